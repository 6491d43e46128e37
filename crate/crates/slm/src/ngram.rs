//! Count-based n-gram sleep model with add-k smoothing and lower-order
//! interpolation.
//!
//! Training counts, for every order `k` in `1..=n`, each k-gram ending at
//! each epoch of each record; contexts that would reach past a record start
//! are left-padded with the boundary symbol `<s>`. Prediction combines the
//! per-order add-k estimates bottom-up,
//!
//! ```text
//! P_1(s)     = (C(s) + k) / (C(.) + 5k)
//! P_j(s | h) = lambda * (C(h, s) + k) / (C(h) + 5k) + (1 - lambda) * P_{j-1}(s | shorter h)
//! ```
//!
//! so every returned probability is strictly positive and every unseen
//! context falls back toward the unigram distribution.

use crate::error::{Error, Result};
use crate::hypnogram::Hypnogram;
use crate::model::SequenceModel;
use crate::stage::{SleepStage, StageDistribution, STAGE_COUNT};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Default add-k pseudo-count.
pub const DEFAULT_SMOOTHING_K: f64 = 0.01;
/// Default weight of the top-order term in the interpolation.
pub const DEFAULT_INTERPOLATION_LAMBDA: f64 = 0.9;

const BOUNDARY_TOKEN: &str = "<s>";
const EMPTY_CONTEXT_TOKEN: &str = "∅";

/// One position of an n-gram context: a stage, or the record-start padding
/// symbol. The boundary symbol never appears in a predicted distribution's
/// support; it only pads contexts shorter than the model order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextToken {
    Boundary,
    Stage(SleepStage),
}

impl ContextToken {
    fn token(self) -> &'static str {
        match self {
            ContextToken::Boundary => BOUNDARY_TOKEN,
            ContextToken::Stage(s) => s.token(),
        }
    }

    fn from_token(token: &str) -> Option<Self> {
        if token == BOUNDARY_TOKEN {
            return Some(ContextToken::Boundary);
        }
        SleepStage::from_token(token).map(ContextToken::Stage)
    }
}

type Counts = [u64; STAGE_COUNT];

/// Count-based n-gram model over the sleep-stage alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    order: usize,
    smoothing_k: f64,
    interpolation_lambda: f64,
    counts: HashMap<Vec<ContextToken>, Counts>,
}

/// Incremental state: the most recent `order - 1` stages.
#[derive(Clone, Debug, Default)]
pub struct NgramState {
    recent: Vec<SleepStage>,
}

impl NgramModel {
    /// Counts all k-grams (k = 1..=order) in `records`.
    pub fn train(
        records: &[Hypnogram],
        order: usize,
        smoothing_k: f64,
        interpolation_lambda: f64,
    ) -> Result<Self> {
        validate_params(order, smoothing_k, interpolation_lambda)?;
        if records.is_empty() {
            return Err(Error::EmptyInput("training corpus has no records".into()));
        }
        let mut counts: HashMap<Vec<ContextToken>, Counts> = HashMap::new();
        let mut ctx_buf: Vec<ContextToken> = Vec::with_capacity(order.saturating_sub(1));
        for record in records {
            let stages = record.stages();
            for (e, &stage) in stages.iter().enumerate() {
                for k in 1..=order {
                    let ctx_len = k - 1;
                    ctx_buf.clear();
                    // Offsets run oldest-first, so boundary padding lands at
                    // the front of the context.
                    for offset in (1..=ctx_len).rev() {
                        ctx_buf.push(match e.checked_sub(offset) {
                            Some(i) => ContextToken::Stage(stages[i]),
                            None => ContextToken::Boundary,
                        });
                    }
                    let entry = match counts.get_mut(ctx_buf.as_slice()) {
                        Some(entry) => entry,
                        None => counts.entry(ctx_buf.clone()).or_insert([0; STAGE_COUNT]),
                    };
                    entry[stage.index()] += 1;
                }
            }
        }
        Ok(NgramModel {
            order,
            smoothing_k,
            interpolation_lambda,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn interpolation_lambda(&self) -> f64 {
        self.interpolation_lambda
    }

    /// Stored next-stage counts for a context, if any were observed.
    pub fn context_counts(&self, context: &[ContextToken]) -> Option<&Counts> {
        self.counts.get(context)
    }

    /// Total number of top-order events (equals the training epoch count).
    pub fn top_order_event_total(&self) -> u64 {
        self.counts
            .iter()
            .filter(|(ctx, _)| ctx.len() == self.order - 1)
            .flat_map(|(_, c)| c.iter())
            .sum()
    }

    /// Next-stage distribution after `history`; histories longer than
    /// `order - 1` are truncated, shorter ones padded with the boundary
    /// symbol. Total over all histories.
    pub fn distribution(&self, history: &[SleepStage]) -> StageDistribution {
        let ctx_len = self.order - 1;
        let mut padded: Vec<ContextToken> = Vec::with_capacity(ctx_len);
        let take = history.len().min(ctx_len);
        for _ in 0..ctx_len - take {
            padded.push(ContextToken::Boundary);
        }
        for &s in &history[history.len() - take..] {
            padded.push(ContextToken::Stage(s));
        }
        self.distribution_for_padded(&padded)
    }

    /// Interpolated estimate for a fully padded context of length `order - 1`.
    fn distribution_for_padded(&self, padded: &[ContextToken]) -> StageDistribution {
        debug_assert_eq!(padded.len(), self.order - 1);
        let lambda = self.interpolation_lambda;
        let mut probs = self.add_k_level(&[]);
        for j in 2..=self.order {
            let ctx = &padded[padded.len() - (j - 1)..];
            let level = self.add_k_level(ctx);
            for s in 0..STAGE_COUNT {
                probs[s] = lambda * level[s] + (1.0 - lambda) * probs[s];
            }
        }
        StageDistribution::new_unchecked(probs)
    }

    /// Add-k estimate at one context, uniform when the context is unseen.
    fn add_k_level(&self, ctx: &[ContextToken]) -> [f64; STAGE_COUNT] {
        let k = self.smoothing_k;
        let counts = self.counts.get(ctx);
        let (counts, total) = match counts {
            Some(c) => (*c, c.iter().sum::<u64>() as f64),
            None => ([0; STAGE_COUNT], 0.0),
        };
        let denom = total + STAGE_COUNT as f64 * k;
        let mut probs = [0.0; STAGE_COUNT];
        for s in 0..STAGE_COUNT {
            probs[s] = (counts[s] as f64 + k) / denom;
        }
        probs
    }

    /// Renders the model text format: a header line followed by one line per
    /// stored context, sorted lexicographically by context token text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "SLM-NGRAM v1 order={} k={} lambda={}",
            self.order, self.smoothing_k, self.interpolation_lambda
        )
        .expect("string write");
        let mut contexts: Vec<&Vec<ContextToken>> = self.counts.keys().collect();
        contexts.sort_by(|a, b| {
            let ta = a.iter().map(|t| t.token());
            let tb = b.iter().map(|t| t.token());
            ta.cmp(tb)
        });
        for ctx in contexts {
            if ctx.is_empty() {
                out.push_str(EMPTY_CONTEXT_TOKEN);
            } else {
                for (i, t) in ctx.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    out.push_str(t.token());
                }
            }
            out.push_str(" |");
            for c in &self.counts[ctx] {
                write!(out, " {c}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the model text format; `origin` labels parse errors.
    pub fn parse_text(input: &str, origin: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::parse(origin, 1, "empty input"));
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "SLM-NGRAM" || fields[1] != "v1" {
            return Err(Error::parse(
                origin,
                1,
                format!("expected header \"SLM-NGRAM v1 order=<n> k=<k> lambda=<l>\", found {header:?}"),
            ));
        }
        let order: usize = parse_header_field(fields[2], "order", origin)?;
        let smoothing_k: f64 = parse_header_field(fields[3], "k", origin)?;
        let interpolation_lambda: f64 = parse_header_field(fields[4], "lambda", origin)?;
        validate_params(order, smoothing_k, interpolation_lambda)
            .map_err(|e| Error::parse(origin, 1, e.to_string()))?;

        let mut counts: HashMap<Vec<ContextToken>, Counts> = HashMap::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let Some((ctx_part, counts_part)) = line.split_once('|') else {
                return Err(Error::parse(origin, line_no, "missing '|' separator"));
            };
            let ctx_part = ctx_part.trim();
            let mut ctx = Vec::new();
            if ctx_part != EMPTY_CONTEXT_TOKEN {
                for token in ctx_part.split_whitespace() {
                    let Some(t) = ContextToken::from_token(token) else {
                        return Err(Error::parse(
                            origin,
                            line_no,
                            format!("unknown context token {token:?}"),
                        ));
                    };
                    ctx.push(t);
                }
                if ctx.is_empty() {
                    return Err(Error::parse(origin, line_no, "empty context field"));
                }
            }
            if ctx.len() >= order {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("context of length {} in an order-{order} model", ctx.len()),
                ));
            }
            if !boundary_is_prefix_only(&ctx) {
                return Err(Error::parse(
                    origin,
                    line_no,
                    "boundary symbol after a stage token",
                ));
            }
            let values: Vec<&str> = counts_part.split_whitespace().collect();
            if values.len() != STAGE_COUNT {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected {STAGE_COUNT} counts, found {}", values.len()),
                ));
            }
            let mut row = [0u64; STAGE_COUNT];
            for (i, v) in values.iter().enumerate() {
                row[i] = v.parse().map_err(|_| {
                    Error::parse(
                        origin,
                        line_no,
                        format!("invalid count {v:?} (expected a non-negative integer)"),
                    )
                })?;
            }
            if counts.insert(ctx, row).is_some() {
                return Err(Error::parse(origin, line_no, "duplicate context"));
            }
        }
        if counts.is_empty() {
            return Err(Error::parse(origin, 1, "model has no count lines"));
        }
        Ok(NgramModel {
            order,
            smoothing_k,
            interpolation_lambda,
            counts,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn validate_params(order: usize, smoothing_k: f64, interpolation_lambda: f64) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
    }
    if !(smoothing_k > 0.0) || !smoothing_k.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smoothing_k must be positive and finite, got {smoothing_k}"
        )));
    }
    if !(interpolation_lambda > 0.0 && interpolation_lambda < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "interpolation_lambda must lie in (0, 1), got {interpolation_lambda}"
        )));
    }
    Ok(())
}

fn boundary_is_prefix_only(ctx: &[ContextToken]) -> bool {
    let first_stage = ctx
        .iter()
        .position(|t| matches!(t, ContextToken::Stage(_)))
        .unwrap_or(ctx.len());
    ctx[first_stage..]
        .iter()
        .all(|t| matches!(t, ContextToken::Stage(_)))
}

fn parse_header_field<T: std::str::FromStr>(field: &str, name: &str, origin: &str) -> Result<T> {
    let value = field
        .strip_prefix(name)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::parse(origin, 1, format!("expected \"{name}=<value>\", found {field:?}")))?;
    value
        .parse()
        .map_err(|_| Error::parse(origin, 1, format!("invalid value in {field:?}")))
}

impl SequenceModel for NgramModel {
    type State = NgramState;

    fn start(&self) -> NgramState {
        NgramState::default()
    }

    fn predict(&self, state: &NgramState) -> StageDistribution {
        self.distribution(&state.recent)
    }

    fn advance(&self, state: &mut NgramState, observed: SleepStage) {
        let keep = self.order.saturating_sub(1);
        if keep == 0 {
            return;
        }
        if state.recent.len() == keep {
            state.recent.remove(0);
        }
        state.recent.push(observed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::SleepStage::*;
    use crate::stage::ALL_STAGES;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn record(stages: &[SleepStage]) -> Hypnogram {
        Hypnogram::new("r", stages.to_vec()).unwrap()
    }

    fn ctx(tokens: &[ContextToken]) -> Vec<ContextToken> {
        tokens.to_vec()
    }

    use ContextToken::{Boundary, Stage};

    #[test]
    fn manual_bigram_counts_match_enumeration() {
        let model = NgramModel::train(
            &[record(&[Wake, Wake, N1, N2, N2])],
            2,
            DEFAULT_SMOOTHING_K,
            DEFAULT_INTERPOLATION_LAMBDA,
        )
        .unwrap();
        let get = |c: &[ContextToken], s: SleepStage| model.context_counts(c).unwrap()[s.index()];
        assert_eq!(get(&[Stage(Wake)], Wake), 1);
        assert_eq!(get(&[Stage(Wake)], N1), 1);
        assert_eq!(get(&[Stage(N1)], N2), 1);
        assert_eq!(get(&[Stage(N2)], N2), 1);
        assert_eq!(get(&[Boundary], Wake), 1);
        // Unigram level sees every epoch once.
        assert_eq!(model.context_counts(&[]).unwrap(), &[2, 0, 1, 2, 0]);
        // Unsmoothed MLE check P(N1 | W) = 1/2 from the raw counts.
        let w_row = model.context_counts(&[Stage(Wake)]).unwrap();
        let total: u64 = w_row.iter().sum();
        assert_eq!(w_row[N1.index()] as f64 / total as f64, 0.5);
    }

    #[test]
    fn rejects_invalid_training_parameters() {
        let r = [record(&[Wake])];
        assert!(NgramModel::train(&r, 0, 0.01, 0.9).is_err());
        assert!(NgramModel::train(&[], 2, 0.01, 0.9).is_err());
        assert!(NgramModel::train(&r, 2, 0.0, 0.9).is_err());
        assert!(NgramModel::train(&r, 2, 0.01, 1.0).is_err());
        assert!(NgramModel::train(&r, 2, 0.01, 0.0).is_err());
    }

    #[test]
    fn degenerate_single_stage_corpus_has_closed_form() {
        // One record [W]: the unigram term is (C(W)+k)/(1+5k).
        let k = 0.25;
        for order in [1usize, 3] {
            let model = NgramModel::train(&[record(&[Wake])], order, k, 0.5).unwrap();
            let unigram = model.add_k_level(&[]);
            assert_abs_diff_eq!(unigram[0], (1.0 + k) / (1.0 + 5.0 * k), epsilon = 1e-15);
            assert_abs_diff_eq!(unigram[1], k / (1.0 + 5.0 * k), epsilon = 1e-15);
        }
    }

    #[test]
    fn order_one_model_on_constant_corpus_approaches_point_mass() {
        let n = 1000usize;
        let k = 0.01;
        let model = NgramModel::train(&[record(&vec![Wake; n])], 1, k, 0.9).unwrap();
        let p = model.distribution(&[]);
        assert_abs_diff_eq!(
            p.prob(Wake),
            (n as f64 + k) / (n as f64 + 5.0 * k),
            epsilon = 1e-12
        );
        assert!(p.prob(Wake) > 0.9999);
    }

    /// Independent re-implementation of the interpolation recursion, written
    /// top-down over explicit token histories. Used as the oracle for the
    /// iterative bottom-up evaluation in the model.
    fn recursive_oracle(model: &NgramModel, order: usize, padded: &[ContextToken]) -> [f64; 5] {
        let k = model.smoothing_k();
        let lambda = model.interpolation_lambda();
        let ctx: Vec<ContextToken> = padded[padded.len().saturating_sub(order - 1)..].to_vec();
        let row = model.context_counts(&ctx).copied().unwrap_or([0; 5]);
        let total: u64 = row.iter().sum();
        let mut top = [0.0; 5];
        for s in 0..5 {
            top[s] = (row[s] as f64 + k) / (total as f64 + 5.0 * k);
        }
        if order == 1 {
            return top;
        }
        let lower = recursive_oracle(model, order - 1, padded);
        let mut probs = [0.0; 5];
        for s in 0..5 {
            probs[s] = lambda * top[s] + (1.0 - lambda) * lower[s];
        }
        probs
    }

    #[test]
    fn unseen_history_matches_independent_recursion() {
        // Corpus never contains N3, so histories ending in N3 are unseen at
        // every order above the unigram.
        let model = NgramModel::train(
            &[record(&[Wake, N1, N2, N1, Wake, Wake, N2, N2, N1])],
            3,
            0.05,
            0.7,
        )
        .unwrap();
        for history in [
            vec![N3, N3],
            vec![Rem, N3],
            vec![N3],
            vec![],
            vec![Wake, N1],
            vec![N2, N2],
        ] {
            let padded: Vec<ContextToken> = {
                let mut p = vec![Boundary; 2usize.saturating_sub(history.len())];
                p.extend(history.iter().map(|&s| Stage(s)));
                p[p.len() - 2..].to_vec()
            };
            let expected = recursive_oracle(&model, 3, &padded);
            let got = model.distribution(&history);
            for s in 0..5 {
                assert_abs_diff_eq!(got.probs()[s], expected[s], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn long_histories_are_truncated() {
        let model = NgramModel::train(
            &[record(&[Wake, N1, N2, N3, N2, N1])],
            2,
            0.01,
            0.9,
        )
        .unwrap();
        let long = model.distribution(&[Rem, Rem, Rem, N2]);
        let short = model.distribution(&[N2]);
        assert_eq!(long, short);
    }

    #[test]
    fn count_conservation_at_top_order() {
        let records = [
            record(&[Wake, Wake, N1, N2, N2, N3, N3, N3]),
            record(&[Rem, Rem, N1]),
        ];
        for order in 1..=4 {
            let model = NgramModel::train(&records, order, 0.01, 0.9).unwrap();
            assert_eq!(model.top_order_event_total(), 11);
        }
    }

    #[test]
    fn serialization_round_trip_preserves_all_distributions() {
        let records = [
            record(&[Wake, Wake, N1, N2, N2, N3, N3, Rem, Wake]),
            record(&[N2, N2, N2, N1, Wake]),
        ];
        for order in [1usize, 2, 3] {
            let model = NgramModel::train(&records, order, 0.01, 0.9).unwrap();
            let text = model.to_text();
            let back = NgramModel::parse_text(&text, "<test>").unwrap();
            assert_eq!(back, model);
            // Exhaustive over all histories up to the context length (plus
            // one longer, exercising truncation).
            let mut histories: Vec<Vec<SleepStage>> = vec![vec![]];
            let mut frontier: Vec<Vec<SleepStage>> = vec![vec![]];
            for _ in 0..order {
                frontier = frontier
                    .iter()
                    .flat_map(|h| {
                        ALL_STAGES.map(|s| {
                            let mut h2 = h.clone();
                            h2.push(s);
                            h2
                        })
                    })
                    .collect();
                histories.extend(frontier.iter().cloned());
            }
            for h in &histories {
                let a = model.distribution(h);
                let b = back.distribution(h);
                for s in 0..5 {
                    assert_abs_diff_eq!(a.probs()[s], b.probs()[s], epsilon = 1e-12);
                }
            }
            // Deterministic output: serializing again yields identical text.
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn parse_rejects_malformed_inputs() {
        let ok = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\n∅ | 1 0 0 0 0\n";
        assert!(NgramModel::parse_text(ok, "<t>").is_ok());
        // Empty body.
        assert!(NgramModel::parse_text("", "<t>").is_err());
        assert!(
            NgramModel::parse_text("SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\n", "<t>").is_err()
        );
        // Malformed header.
        assert!(NgramModel::parse_text("SLM-NGRAM v2 order=2 k=1 lambda=0.9\nx", "<t>").is_err());
        assert!(NgramModel::parse_text("SLM-NGRAM v1 order=0 k=1 lambda=0.9\nx", "<t>").is_err());
        // Negative and non-integer counts.
        let neg = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\n∅ | 1 0 -1 0 0\n";
        assert!(NgramModel::parse_text(neg, "<t>").is_err());
        let frac = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\n∅ | 1 0 0.5 0 0\n";
        assert!(NgramModel::parse_text(frac, "<t>").is_err());
        // Unknown token, oversized context, boundary after stage, duplicate.
        let unk = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\nQQ | 1 0 0 0 0\n";
        assert!(NgramModel::parse_text(unk, "<t>").is_err());
        let too_long = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\nW W | 1 0 0 0 0\n";
        assert!(NgramModel::parse_text(too_long, "<t>").is_err());
        let bad_pad = "SLM-NGRAM v1 order=3 k=0.01 lambda=0.9\nW <s> | 1 0 0 0 0\n";
        assert!(NgramModel::parse_text(bad_pad, "<t>").is_err());
        let dup = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\nW | 1 0 0 0 0\nW | 2 0 0 0 0\n";
        assert!(NgramModel::parse_text(dup, "<t>").is_err());
    }

    #[test]
    fn line_numbers_point_at_offending_line() {
        let text = "SLM-NGRAM v1 order=2 k=0.01 lambda=0.9\n∅ | 1 0 0 0 0\nW | 1 0 x 0 0\n";
        match NgramModel::parse_text(text, "<t>").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn distributions_are_normalized_and_positive(
            stages in proptest::collection::vec(0usize..5, 1..200),
            history in proptest::collection::vec(0usize..5, 0..6),
            order in 1usize..6,
            k in 1e-4f64..2.0,
            lambda in 0.01f64..0.99,
        ) {
            let stages: Vec<SleepStage> = stages.iter().map(|&i| ALL_STAGES[i]).collect();
            let history: Vec<SleepStage> = history.iter().map(|&i| ALL_STAGES[i]).collect();
            let model = NgramModel::train(&[record(&stages)], order, k, lambda).unwrap();
            let dist = model.distribution(&history);
            let sum: f64 = dist.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(dist.probs().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn incremental_state_matches_full_history(
            stages in proptest::collection::vec(0usize..5, 1..60),
            order in 1usize..5,
        ) {
            let stages: Vec<SleepStage> = stages.iter().map(|&i| ALL_STAGES[i]).collect();
            let model = NgramModel::train(&[record(&stages)], order, 0.01, 0.9).unwrap();
            let mut state = model.start();
            for (i, &s) in stages.iter().enumerate() {
                let from_state = model.predict(&state);
                let from_history = model.distribution(&stages[..i]);
                prop_assert_eq!(from_state, from_history);
                model.advance(&mut state, s);
            }
        }
    }
}
