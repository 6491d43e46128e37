//! Synthetic data fabric: Markov-chain hypnogram generators, higher-order
//! sources, and a confusion-matrix emission model standing in for a real
//! signal classifier.
//!
//! Emission rows are uniform-prior posteriors `P(stage | observed)`, so the
//! generated likelihood matrices play the same role as a signal model's
//! per-epoch outputs in fused decoding.

use crate::error::{Error, Result};
use crate::hypnogram::Hypnogram;
use crate::likelihood::LikelihoodMatrix;
use crate::model::SequenceModel;
use crate::stage::{SleepStage, StageDistribution, ALL_STAGES, STAGE_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Built-in adult-night bigram transition probabilities (CLI preset
/// `table1`), in canonical stage order. Rows are renormalized by
/// [`MarkovChain::table1`]; as printed they sum to 0.996..1.0.
pub const TABLE1_PROBS: [[f64; STAGE_COUNT]; STAGE_COUNT] = [
    [0.854, 0.001, 0.138, 0.003, 0.000],
    [0.016, 0.907, 0.066, 0.010, 0.000],
    [0.109, 0.080, 0.498, 0.311, 0.000],
    [0.019, 0.014, 0.062, 0.864, 0.040],
    [0.007, 0.001, 0.007, 0.063, 0.921],
];

/// Convergence tolerance for the stationary-distribution iteration.
const STATIONARY_TOLERANCE: f64 = 1e-12;
/// Iteration cap before the stationary computation reports failure.
const STATIONARY_MAX_STEPS: usize = 1_000_000;

/// A first-order Markov chain over sleep stages.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    transition: [StageDistribution; STAGE_COUNT],
    initial: StageDistribution,
}

impl MarkovChain {
    /// Validates a row-stochastic transition matrix.
    pub fn new(rows: [[f64; STAGE_COUNT]; STAGE_COUNT], initial: StageDistribution) -> Result<Self> {
        let mut transition = [StageDistribution::uniform(); STAGE_COUNT];
        for (i, row) in rows.iter().enumerate() {
            transition[i] = StageDistribution::new(*row).map_err(|e| {
                Error::InvalidArgument(format!("transition row {}: {e}", ALL_STAGES[i]))
            })?;
        }
        Ok(MarkovChain {
            transition,
            initial,
        })
    }

    /// The built-in `table1` preset: each row of [`TABLE1_PROBS`] renormalized
    /// to sum exactly to 1, starting from a point mass on W.
    pub fn table1() -> Self {
        let mut transition = [StageDistribution::uniform(); STAGE_COUNT];
        for (i, row) in TABLE1_PROBS.iter().enumerate() {
            transition[i] = StageDistribution::from_weights(*row).expect("static table");
        }
        MarkovChain {
            transition,
            initial: StageDistribution::point_mass(SleepStage::Wake),
        }
    }

    /// Transition row for `from`.
    pub fn row(&self, from: SleepStage) -> &StageDistribution {
        &self.transition[from.index()]
    }

    pub fn initial(&self) -> &StageDistribution {
        &self.initial
    }

    pub fn with_initial(mut self, initial: StageDistribution) -> Self {
        self.initial = initial;
        self
    }

    /// Replaces the initial distribution with the stationary one.
    pub fn with_stationary_start(self) -> Result<Self> {
        let pi = self.stationary()?;
        let initial = StageDistribution::new(pi)?;
        Ok(self.with_initial(initial))
    }

    fn is_irreducible(&self) -> bool {
        // Transitive closure over the positive-transition graph.
        let mut reach = [[false; STAGE_COUNT]; STAGE_COUNT];
        for i in 0..STAGE_COUNT {
            for j in 0..STAGE_COUNT {
                reach[i][j] = self.transition[i].probs()[j] > 0.0;
            }
        }
        for k in 0..STAGE_COUNT {
            for i in 0..STAGE_COUNT {
                for j in 0..STAGE_COUNT {
                    reach[i][j] = reach[i][j] || (reach[i][k] && reach[k][j]);
                }
            }
        }
        (0..STAGE_COUNT).all(|i| (0..STAGE_COUNT).all(|j| reach[i][j]))
    }

    /// Stationary distribution via power iteration (on the half-lazy chain,
    /// which shares fixed points and also converges for periodic matrices).
    /// Requires an irreducible chain.
    pub fn stationary(&self) -> Result<[f64; STAGE_COUNT]> {
        if !self.is_irreducible() {
            return Err(Error::Numeric(
                "chain is reducible: no unique stationary distribution".into(),
            ));
        }
        let mut pi = [1.0 / STAGE_COUNT as f64; STAGE_COUNT];
        for _ in 0..STATIONARY_MAX_STEPS {
            let mut next = [0.0; STAGE_COUNT];
            for (i, p) in pi.iter().enumerate() {
                let row = self.transition[i].probs();
                for (j, q) in row.iter().enumerate() {
                    next[j] += p * q;
                }
            }
            let mut delta = 0.0f64;
            for j in 0..STAGE_COUNT {
                next[j] = 0.5 * pi[j] + 0.5 * next[j];
                delta = delta.max((next[j] - pi[j]).abs());
            }
            pi = next;
            if delta < STATIONARY_TOLERANCE {
                let total: f64 = pi.iter().sum();
                for p in &mut pi {
                    *p /= total;
                }
                return Ok(pi);
            }
        }
        Err(Error::Numeric(format!(
            "stationary power iteration did not converge in {STATIONARY_MAX_STEPS} steps"
        )))
    }

    /// The perplexity floor for data generated by this chain:
    /// `exp(-sum_s pi_s sum_t P(t|s) ln P(t|s))` with `0 ln 0 = 0`.
    pub fn entropy_rate_perplexity(&self) -> Result<f64> {
        let pi = self.stationary()?;
        let mut entropy = 0.0;
        for (s, weight) in pi.iter().enumerate() {
            for &p in self.transition[s].probs() {
                if p > 0.0 {
                    entropy -= weight * p * p.ln();
                }
            }
        }
        Ok(entropy.exp())
    }

    /// Renders the 5x5 transition matrix as CSV (initial distribution is not
    /// part of the format; loaders default to a point mass on W).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("W,REM,N1,N2,N3\n");
        for row in &self.transition {
            for (i, p) in row.probs().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{p}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(input: &str, origin: &str) -> Result<Self> {
        let rows = parse_square_csv(input, origin)?;
        let mut transition = [StageDistribution::uniform(); STAGE_COUNT];
        for (i, row) in rows.iter().enumerate() {
            transition[i] = StageDistribution::new(*row)
                .map_err(|e| Error::parse(origin, i + 2, e.to_string()))?;
        }
        Ok(MarkovChain {
            transition,
            initial: StageDistribution::point_mass(SleepStage::Wake),
        })
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Markov chains are also sequence models: the empty history predicts the
/// initial distribution, any other history the row of its last stage.
impl SequenceModel for MarkovChain {
    type State = Option<SleepStage>;

    fn start(&self) -> Self::State {
        None
    }

    fn predict(&self, state: &Self::State) -> StageDistribution {
        match state {
            None => self.initial,
            Some(s) => self.transition[s.index()],
        }
    }

    fn advance(&self, state: &mut Self::State, observed: SleepStage) {
        *state = Some(observed);
    }
}

/// A stage generator that can be sampled into a hypnogram.
pub trait SequenceSource {
    /// Appends exactly `len` stages to `out`.
    fn sample_into(&self, len: usize, rng: &mut ChaCha8Rng, out: &mut Vec<SleepStage>);
}

impl SequenceSource for MarkovChain {
    fn sample_into(&self, len: usize, rng: &mut ChaCha8Rng, out: &mut Vec<SleepStage>) {
        if len == 0 {
            return;
        }
        let first = ALL_STAGES[sample_index(self.initial.probs(), rng)];
        out.push(first);
        let mut current = first;
        for _ in 1..len {
            let next = ALL_STAGES[sample_index(self.transition[current.index()].probs(), rng)];
            out.push(next);
            current = next;
        }
    }
}

/// Draws one record of `len` epochs from `source`, deterministically per seed.
pub fn sample_hypnogram<S: SequenceSource>(
    source: &S,
    record_id: &str,
    len: usize,
    seed: u64,
) -> Result<Hypnogram> {
    if len == 0 {
        return Err(Error::InvalidArgument(
            "record length must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(len);
    source.sample_into(len, &mut rng, &mut stages);
    Hypnogram::new(record_id, stages)
}

/// A confusion-matrix observation channel: `confusion[s][o]` is the
/// probability of observing symbol `o` when the true stage is `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionModel {
    confusion: [StageDistribution; STAGE_COUNT],
}

impl EmissionModel {
    pub fn new(rows: [[f64; STAGE_COUNT]; STAGE_COUNT]) -> Result<Self> {
        let mut confusion = [StageDistribution::uniform(); STAGE_COUNT];
        for (i, row) in rows.iter().enumerate() {
            confusion[i] = StageDistribution::new(*row).map_err(|e| {
                Error::InvalidArgument(format!("confusion row {}: {e}", ALL_STAGES[i]))
            })?;
        }
        Ok(EmissionModel { confusion })
    }

    /// Noise-free channel: the observation always equals the true stage.
    pub fn identity() -> Self {
        let mut confusion = [StageDistribution::uniform(); STAGE_COUNT];
        for (i, stage) in ALL_STAGES.iter().enumerate() {
            confusion[i] = StageDistribution::point_mass(*stage);
        }
        EmissionModel { confusion }
    }

    /// Default noisy channel: 0.6 on the diagonal, 0.1 elsewhere.
    pub fn noisy_default() -> Self {
        let mut rows = [[0.1; STAGE_COUNT]; STAGE_COUNT];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 0.6;
        }
        EmissionModel::new(rows).expect("static matrix")
    }

    pub fn confusion_row(&self, stage: SleepStage) -> &StageDistribution {
        &self.confusion[stage.index()]
    }

    /// Samples one observation per epoch and returns, per epoch, the
    /// uniform-prior posterior over stages given that observation (the
    /// normalized confusion-matrix column). Deterministic per seed.
    pub fn emit_likelihoods(&self, truth: &Hypnogram, seed: u64) -> Result<LikelihoodMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(truth.len());
        for (epoch, stage) in truth.stages().iter().enumerate() {
            let observed = sample_index(self.confusion[stage.index()].probs(), &mut rng);
            let mut column = [0.0; STAGE_COUNT];
            for s in 0..STAGE_COUNT {
                column[s] = self.confusion[s].probs()[observed];
            }
            let row = StageDistribution::from_weights(column).map_err(|_| {
                Error::Numeric(format!(
                    "epoch {epoch}: observed symbol {} is impossible under every stage",
                    ALL_STAGES[observed]
                ))
            })?;
            rows.push(row);
        }
        LikelihoodMatrix::new(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("W,REM,N1,N2,N3\n");
        for row in &self.confusion {
            for (i, p) in row.probs().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{p}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(input: &str, origin: &str) -> Result<Self> {
        let rows = parse_square_csv(input, origin)?;
        let mut confusion = [StageDistribution::uniform(); STAGE_COUNT];
        for (i, row) in rows.iter().enumerate() {
            confusion[i] = StageDistribution::new(*row)
                .map_err(|e| Error::parse(origin, i + 2, e.to_string()))?;
        }
        Ok(EmissionModel { confusion })
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Shared 5x5 CSV body parser for chains and emission matrices.
fn parse_square_csv(input: &str, origin: &str) -> Result<[[f64; STAGE_COUNT]; STAGE_COUNT]> {
    let mut lines = input.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::parse(origin, 1, "empty input"));
    };
    let expected: Vec<&str> = ALL_STAGES.iter().map(|s| s.token()).collect();
    let got: Vec<&str> = header.split(',').map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header \"W,REM,N1,N2,N3\", found {header:?}"),
        ));
    }
    let mut rows = [[0.0; STAGE_COUNT]; STAGE_COUNT];
    let mut filled = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if filled == STAGE_COUNT {
            return Err(Error::parse(origin, line_no, "more than 5 matrix rows"));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != STAGE_COUNT {
            return Err(Error::parse(
                origin,
                line_no,
                format!("expected {STAGE_COUNT} fields, found {}", fields.len()),
            ));
        }
        for (j, field) in fields.iter().enumerate() {
            rows[filled][j] = field
                .parse()
                .map_err(|_| Error::parse(origin, line_no, format!("invalid float {field:?}")))?;
        }
        filled += 1;
    }
    if filled != STAGE_COUNT {
        return Err(Error::parse(
            origin,
            1,
            format!("expected 5 matrix rows, found {filled}"),
        ));
    }
    Ok(rows)
}

/// A stationary source of order `k`: the next stage depends on the previous
/// `k` stages through an explicit conditional table.
#[derive(Clone, Debug, PartialEq)]
pub struct HigherOrderSource {
    order: usize,
    /// Conditional rows indexed by context code (base-5, oldest stage most
    /// significant); length `5^order`.
    table: Vec<StageDistribution>,
    /// Distribution over the first `order` stages of a record, indexed the
    /// same way; length `5^order`.
    initial: Vec<f64>,
}

impl HigherOrderSource {
    pub fn new(order: usize, table: Vec<StageDistribution>, initial: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("source order must be >= 1".into()));
        }
        let contexts = STAGE_COUNT.pow(order as u32);
        if table.len() != contexts {
            return Err(Error::InvalidArgument(format!(
                "conditional table has {} rows, expected {contexts}",
                table.len()
            )));
        }
        if initial.len() != contexts {
            return Err(Error::InvalidArgument(format!(
                "initial distribution has {} entries, expected {contexts}",
                initial.len()
            )));
        }
        if initial.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "initial context probabilities must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = initial.iter().sum();
        if (sum - 1.0).abs() > StageDistribution::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "initial context distribution sums to {sum}, expected 1"
            )));
        }
        Ok(HigherOrderSource {
            order,
            table,
            initial,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Conditional row for a context of exactly `order` stages.
    pub fn conditional(&self, context: &[SleepStage]) -> Result<&StageDistribution> {
        if context.len() != self.order {
            return Err(Error::InvalidArgument(format!(
                "context has {} stages, expected {}",
                context.len(),
                self.order
            )));
        }
        Ok(&self.table[context_code(context)])
    }

    /// The built-in order-3 source (CLI preset `order3`): the `table1` chain
    /// row for the most recent stage, exponentially tilted by two patterns
    /// keyed on the two older stages, then renormalized. Records open with a
    /// `table1`-distributed three-stage prefix.
    pub fn order3() -> Self {
        const TILT: [f64; STAGE_COUNT] = [1.0, 0.5, 0.0, -0.5, -1.0];
        const STRENGTH: f64 = 0.7;
        let chain = MarkovChain::table1();
        let mut table = Vec::with_capacity(125);
        for code in 0..125 {
            let [a, b, c] = [code / 25 % 5, code / 5 % 5, code % 5];
            let base = chain.row(ALL_STAGES[c]).probs();
            let mut weights = [0.0; STAGE_COUNT];
            for (s, w) in weights.iter_mut().enumerate() {
                let tilt = STRENGTH * (TILT[(3 * b + s) % 5] + TILT[(2 * a + s) % 5]);
                *w = base[s] * tilt.exp();
            }
            table.push(StageDistribution::from_weights(weights).expect("positive row sums"));
        }
        // Initial three stages: W, then two table1 transitions.
        let mut initial = vec![0.0; 125];
        let w = SleepStage::Wake.index();
        for b in 0..STAGE_COUNT {
            for c in 0..STAGE_COUNT {
                initial[w * 25 + b * 5 + c] =
                    chain.row(SleepStage::Wake).probs()[b] * chain.row(ALL_STAGES[b]).probs()[c];
            }
        }
        HigherOrderSource::new(3, table, initial).expect("static fixture")
    }

    /// Renders the source text format: header, nonzero `init` lines, then one
    /// `ctx` line per context in code order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "SLM-SOURCE v1 order={}", self.order).expect("string write");
        for (code, p) in self.initial.iter().enumerate() {
            if *p > 0.0 {
                write!(out, "init").expect("string write");
                for stage in decode_context(code, self.order) {
                    write!(out, " {stage}").expect("string write");
                }
                writeln!(out, " {p}").expect("string write");
            }
        }
        for (code, row) in self.table.iter().enumerate() {
            write!(out, "ctx").expect("string write");
            for stage in decode_context(code, self.order) {
                write!(out, " {stage}").expect("string write");
            }
            write!(out, " |").expect("string write");
            for p in row.probs() {
                write!(out, " {p}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_text(input: &str, origin: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::parse(origin, 1, "empty input"));
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "SLM-SOURCE" || fields[1] != "v1" {
            return Err(Error::parse(
                origin,
                1,
                format!("expected header \"SLM-SOURCE v1 order=<k>\", found {header:?}"),
            ));
        }
        let order: usize = parse_kv(fields[2], "order", origin)?;
        if order == 0 {
            return Err(Error::parse(origin, 1, "order must be >= 1"));
        }
        let contexts = STAGE_COUNT.pow(order as u32);
        let mut initial = vec![0.0; contexts];
        let mut table: Vec<Option<StageDistribution>> = vec![None; contexts];
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("init ") {
                let tokens: Vec<&str> = rest.split_whitespace().collect();
                if tokens.len() != order + 1 {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("expected {order} stages and one probability"),
                    ));
                }
                let code = parse_context(&tokens[..order], origin, line_no)?;
                initial[code] = tokens[order].parse().map_err(|_| {
                    Error::parse(origin, line_no, format!("invalid float {:?}", tokens[order]))
                })?;
            } else if let Some(rest) = line.strip_prefix("ctx ") {
                let Some((ctx_part, probs_part)) = rest.split_once('|') else {
                    return Err(Error::parse(origin, line_no, "missing '|' separator"));
                };
                let tokens: Vec<&str> = ctx_part.split_whitespace().collect();
                if tokens.len() != order {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("expected {order} context stages, found {}", tokens.len()),
                    ));
                }
                let code = parse_context(&tokens, origin, line_no)?;
                let values: Vec<&str> = probs_part.split_whitespace().collect();
                if values.len() != STAGE_COUNT {
                    return Err(Error::parse(
                        origin,
                        line_no,
                        format!("expected {STAGE_COUNT} probabilities"),
                    ));
                }
                let mut probs = [0.0; STAGE_COUNT];
                for (i, v) in values.iter().enumerate() {
                    probs[i] = v.parse().map_err(|_| {
                        Error::parse(origin, line_no, format!("invalid float {v:?}"))
                    })?;
                }
                let row = StageDistribution::new(probs)
                    .map_err(|e| Error::parse(origin, line_no, e.to_string()))?;
                if table[code].replace(row).is_some() {
                    return Err(Error::parse(origin, line_no, "duplicate context"));
                }
            } else {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected \"init\" or \"ctx\" line, found {line:?}"),
                ));
            }
        }
        let mut rows = Vec::with_capacity(contexts);
        for (code, row) in table.into_iter().enumerate() {
            let Some(row) = row else {
                return Err(Error::parse(
                    origin,
                    1,
                    format!(
                        "missing conditional row for context {:?}",
                        decode_context(code, order)
                            .iter()
                            .map(|s| s.token())
                            .collect::<Vec<_>>()
                            .join(" ")
                    ),
                ));
            };
            rows.push(row);
        }
        HigherOrderSource::new(order, rows, initial)
            .map_err(|e| Error::parse(origin, 1, e.to_string()))
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

impl SequenceSource for HigherOrderSource {
    fn sample_into(&self, len: usize, rng: &mut ChaCha8Rng, out: &mut Vec<SleepStage>) {
        if len == 0 {
            return;
        }
        let code = sample_index_slice(&self.initial, rng);
        let prefix = decode_context(code, self.order);
        out.extend(prefix.iter().take(len));
        while out.len() < len {
            let context = &out[out.len() - self.order..];
            let row = &self.table[context_code(context)];
            out.push(ALL_STAGES[sample_index(row.probs(), rng)]);
        }
    }
}

fn parse_kv<T: std::str::FromStr>(field: &str, name: &str, origin: &str) -> Result<T> {
    let value = field
        .strip_prefix(name)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| {
            Error::parse(origin, 1, format!("expected \"{name}=<value>\", found {field:?}"))
        })?;
    value
        .parse()
        .map_err(|_| Error::parse(origin, 1, format!("invalid value in {field:?}")))
}

fn parse_context(tokens: &[&str], origin: &str, line_no: usize) -> Result<usize> {
    let mut stages = Vec::with_capacity(tokens.len());
    for token in tokens {
        let Some(stage) = SleepStage::from_token(token) else {
            return Err(Error::parse(
                origin,
                line_no,
                format!("unknown stage token {token:?}"),
            ));
        };
        stages.push(stage);
    }
    Ok(context_code(&stages))
}

/// Base-5 code of a stage context, oldest stage most significant.
fn context_code(stages: &[SleepStage]) -> usize {
    stages.iter().fold(0, |acc, s| acc * STAGE_COUNT + s.index())
}

fn decode_context(code: usize, order: usize) -> Vec<SleepStage> {
    let mut stages = vec![SleepStage::Wake; order];
    let mut rest = code;
    for slot in stages.iter_mut().rev() {
        *slot = ALL_STAGES[rest % STAGE_COUNT];
        rest /= STAGE_COUNT;
    }
    stages
}

/// Draws an index from an unnormalized-tolerant probability slice.
fn sample_index(probs: &[f64; STAGE_COUNT], rng: &mut ChaCha8Rng) -> usize {
    sample_index_slice(probs, rng)
}

fn sample_index_slice(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u = rng.random::<f64>();
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
    }
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        if u < p {
            return i;
        }
        u -= p;
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::SleepStage::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn table1_probs_match_published_rows() {
        // Raw entry before renormalization.
        assert_eq!(TABLE1_PROBS[N1.index()][N2.index()], 0.311);
        let chain = MarkovChain::table1();
        for stage in ALL_STAGES {
            let sum: f64 = chain.row(stage).probs().iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
        // 0.854 / 0.996, the W row's printed sum.
        assert_abs_diff_eq!(
            chain.row(Wake).prob(Wake),
            0.857429718875502,
            epsilon = 1e-15
        );
        assert_eq!(chain.initial(), &StageDistribution::point_mass(Wake));
    }

    #[test]
    fn identity_transition_matrix_is_absorbing() {
        let mut rows = [[0.0; 5]; 5];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let chain = MarkovChain::new(rows, StageDistribution::point_mass(Wake)).unwrap();
        let record = sample_hypnogram(&chain, "r", 50, 3).unwrap();
        assert!(record.stages().iter().all(|&s| s == Wake));
        // And it is reducible, so the stationary computation must refuse it.
        assert!(matches!(chain.stationary(), Err(Error::Numeric(_))));
        assert!(chain.entropy_rate_perplexity().is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let chain = MarkovChain::table1();
        let a = sample_hypnogram(&chain, "r", 2000, 99).unwrap();
        let b = sample_hypnogram(&chain, "r", 2000, 99).unwrap();
        let c = sample_hypnogram(&chain, "r", 2000, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(sample_hypnogram(&chain, "r", 0, 1).is_err());
    }

    #[test]
    fn empirical_transition_frequencies_match_the_matrix() {
        let chain = MarkovChain::table1();
        let record = sample_hypnogram(&chain, "r", 1_000_000, 7).unwrap();
        let mut counts = [[0u64; 5]; 5];
        for pair in record.stages().windows(2) {
            counts[pair[0].index()][pair[1].index()] += 1;
        }
        for s in 0..5 {
            let total: u64 = counts[s].iter().sum();
            for t in 0..5 {
                let expected = chain.row(ALL_STAGES[s]).probs()[t];
                let observed = counts[s][t] as f64 / total as f64;
                assert_abs_diff_eq!(observed, expected, epsilon = 0.005);
            }
        }
    }

    #[test]
    fn uniform_chain_has_perplexity_exactly_five() {
        let chain = MarkovChain::new([[0.2; 5]; 5], StageDistribution::uniform()).unwrap();
        assert_abs_diff_eq!(chain.entropy_rate_perplexity().unwrap(), 5.0, epsilon = 1e-12);
    }

    // Regression constant computed once with an independent eigen-solver on
    // the renormalized rows: stationary = (0.164943, 0.160429, 0.115229,
    // 0.369772, 0.189627), entropy rate 0.534452738938694 nats.
    #[test]
    fn table1_entropy_rate_perplexity_matches_frozen_constant() {
        let ppl = MarkovChain::table1().entropy_rate_perplexity().unwrap();
        assert_abs_diff_eq!(ppl, 1.7065140779562178, epsilon = 1e-9);
    }

    #[test]
    fn chain_csv_round_trips() {
        let chain = MarkovChain::table1();
        let csv = chain.to_csv();
        let back = MarkovChain::parse_csv(&csv, "<test>").unwrap();
        assert_eq!(back, chain);
        // Rows that are not stochastic are rejected.
        let bad = "W,REM,N1,N2,N3\n0.9,0,0,0,0\n0.2,0.2,0.2,0.2,0.2\n0.2,0.2,0.2,0.2,0.2\n0.2,0.2,0.2,0.2,0.2\n0.2,0.2,0.2,0.2,0.2\n";
        assert!(MarkovChain::parse_csv(bad, "<test>").is_err());
        // Wrong shape is rejected.
        assert!(MarkovChain::parse_csv("W,REM,N1,N2,N3\n0.2,0.2,0.2,0.2,0.2\n", "<t>").is_err());
    }

    #[test]
    fn identity_emission_is_noise_free() {
        let chain = MarkovChain::table1();
        let truth = sample_hypnogram(&chain, "r", 500, 11).unwrap();
        let lik = EmissionModel::identity().emit_likelihoods(&truth, 1).unwrap();
        for (row, &stage) in lik.rows().iter().zip(truth.stages()) {
            assert_eq!(row, &StageDistribution::point_mass(stage));
        }
    }

    #[test]
    fn uniform_emission_carries_no_information() {
        let truth = Hypnogram::new("r", vec![Wake, N1, N2, N3, Rem]).unwrap();
        let emission = EmissionModel::new([[0.2; 5]; 5]).unwrap();
        let lik = emission.emit_likelihoods(&truth, 5).unwrap();
        for row in lik.rows() {
            assert_eq!(row, &StageDistribution::uniform());
        }
    }

    #[test]
    fn noisy_emission_matches_enumerated_channel_accuracy() {
        // Oracle: expected greedy accuracy by exact enumeration over the
        // 25 (true stage, observed symbol) pairs, weighted by the empirical
        // stage frequencies of the sampled truth.
        let chain = MarkovChain::table1();
        let truth = sample_hypnogram(&chain, "r", 100_000, 13).unwrap();
        let emission = EmissionModel::noisy_default();
        let mut freq = [0.0f64; 5];
        for s in truth.stages() {
            freq[s.index()] += 1.0 / truth.len() as f64;
        }
        let mut expected = 0.0;
        for t in 0..5 {
            for o in 0..5 {
                let mut best = 0usize;
                for s in 1..5 {
                    if emission.confusion[s].probs()[o] > emission.confusion[best].probs()[o] {
                        best = s;
                    }
                }
                if best == t {
                    expected += freq[t] * emission.confusion[t].probs()[o];
                }
            }
        }
        assert_abs_diff_eq!(expected, 0.6, epsilon = 1e-12);

        let lik = emission.emit_likelihoods(&truth, 17).unwrap();
        let correct = lik
            .rows()
            .iter()
            .zip(truth.stages())
            .filter(|(row, &s)| row.argmax() == s)
            .count();
        let observed = correct as f64 / truth.len() as f64;
        assert_abs_diff_eq!(observed, expected, epsilon = 0.01);
    }

    #[test]
    fn order3_source_is_valid_and_samples_deterministically() {
        let source = HigherOrderSource::order3();
        assert_eq!(source.order(), 3);
        let row = source.conditional(&[N3, N2, N1]).unwrap();
        let sum: f64 = row.probs().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(source.conditional(&[N3, N2]).is_err());

        let a = sample_hypnogram(&source, "r", 1000, 21).unwrap();
        let b = sample_hypnogram(&source, "r", 1000, 21).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stages()[0], Wake); // records open awake
        // Shorter than the source order still works.
        assert_eq!(sample_hypnogram(&source, "r", 2, 3).unwrap().len(), 2);
    }

    #[test]
    fn order3_source_text_round_trips() {
        let source = HigherOrderSource::order3();
        let text = source.to_text();
        let back = HigherOrderSource::parse_text(&text, "<test>").unwrap();
        assert_eq!(back, source);
        assert_eq!(back.to_text(), text);
        // A missing context row is rejected.
        let truncated: String = text.lines().take(30).collect::<Vec<_>>().join("\n");
        assert!(HigherOrderSource::parse_text(&truncated, "<test>").is_err());
    }
}
