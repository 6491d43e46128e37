//! Greedy and beam-search decoding with sleep-model fusion.
//!
//! Beam search scores hypotheses epoch-synchronously with the fused
//! log-posterior `ln P_sig(s_e) + alpha * ln P_slm(s_e | s_1..s_{e-1})`,
//! keeps the best `W` after every epoch and returns the best complete
//! sequence. Signal likelihoods are clamped below at 1e-12 before the log, so
//! external CSVs containing exact zeros stay decodable; the sleep-model term
//! needs no clamp because smoothing and softmax outputs are strictly
//! positive.
//!
//! Note on the fused score: the signal term is itself a posterior over
//! stages, so multiplying in the sleep-model prior double-counts class
//! priors under a strict Bayesian reading. The score is used exactly as
//! written above, with no correction term; `alpha` absorbs the mismatch in
//! practice.
//!
//! Ties (equal scores) are broken by lexicographic stage-index order of the
//! full sequence, which makes every result deterministic and, for beams wide
//! enough to hold all `5^T` hypotheses, exactly equal to brute-force
//! maximization.

use crate::error::{Error, Result};
use crate::hypnogram::Hypnogram;
use crate::likelihood::LikelihoodMatrix;
use crate::metrics::{accuracy_stages, cohen_kappa_stages};
use crate::model::SequenceModel;
use crate::stage::{SleepStage, ALL_STAGES, STAGE_COUNT};
use std::cmp::Ordering;
use std::fmt::Write as _;

/// Floor applied to signal likelihoods before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Fusion weight and beam width for [`beam_decode`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    alpha: f64,
    beam_width: usize,
}

impl DecoderConfig {
    pub fn new(alpha: f64, beam_width: usize) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        if beam_width == 0 {
            return Err(Error::InvalidArgument("beam width must be >= 1".into()));
        }
        Ok(DecoderConfig { alpha, beam_width })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beam_width(&self) -> usize {
        self.beam_width
    }
}

/// Per-epoch argmax of the signal likelihoods; ties go to the lowest
/// canonical stage index.
pub fn greedy_decode(likelihoods: &LikelihoodMatrix) -> Hypnogram {
    let stages: Vec<SleepStage> = likelihoods.rows().iter().map(|row| row.argmax()).collect();
    Hypnogram::new("greedy", stages).expect("likelihood matrices are non-empty")
}

/// One surviving partial sequence during beam search.
struct BeamHypothesis<S> {
    stages: Vec<SleepStage>,
    cum_logp: f64,
    slm_state: S,
}

/// Epoch-synchronous beam search under the fused score; returns the best
/// complete sequence and its total log posterior. With `beam_width >= 5^T`
/// this is exact search.
pub fn beam_decode<M: SequenceModel>(
    likelihoods: &LikelihoodMatrix,
    slm: &M,
    config: &DecoderConfig,
) -> (Hypnogram, f64) {
    let alpha = config.alpha;
    let width = config.beam_width;
    let mut beam: Vec<BeamHypothesis<M::State>> = vec![BeamHypothesis {
        stages: Vec::new(),
        cum_logp: 0.0,
        slm_state: slm.start(),
    }];

    // (parent index, stage, score) candidates, rebuilt every epoch.
    let mut candidates: Vec<(usize, SleepStage, f64)> = Vec::with_capacity(5 * width);
    for row in likelihoods.rows() {
        candidates.clear();
        for (parent_idx, hyp) in beam.iter().enumerate() {
            let prior = slm.predict(&hyp.slm_state);
            for &stage in &ALL_STAGES {
                let sig = row.prob(stage).max(LIKELIHOOD_FLOOR).ln();
                let score = hyp.cum_logp + sig + alpha * prior.prob(stage).ln();
                candidates.push((parent_idx, stage, score));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                beam[a.0]
                    .stages
                    .cmp(&beam[b.0].stages)
                    .then(a.1.cmp(&b.1))
            })
        });
        candidates.truncate(width);

        let mut next_beam = Vec::with_capacity(candidates.len());
        for &(parent_idx, stage, score) in candidates.iter() {
            let parent = &beam[parent_idx];
            let mut stages = Vec::with_capacity(parent.stages.len() + 1);
            stages.extend_from_slice(&parent.stages);
            stages.push(stage);
            let mut slm_state = parent.slm_state.clone();
            slm.advance(&mut slm_state, stage);
            next_beam.push(BeamHypothesis {
                stages,
                cum_logp: score,
                slm_state,
            });
        }
        beam = next_beam;
    }

    // The beam is ordered best-first by construction.
    let best = beam.into_iter().next().expect("beam is never empty");
    (
        Hypnogram::new("beam", best.stages).expect("likelihood matrices are non-empty"),
        best.cum_logp,
    )
}

/// One grid point of a fusion sweep, with metrics pooled over all epochs of
/// all decoded records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub width: usize,
    pub kappa: f64,
    pub accuracy: f64,
}

/// Decodes every record at every `(alpha, width)` grid point and aggregates
/// accuracy and kappa over the concatenated epochs. Rows come back sorted by
/// `(alpha, width)`. With `jobs > 1` grid points are decoded in parallel;
/// results are identical regardless of the job count.
pub fn sweep<M>(
    records: &[(LikelihoodMatrix, Hypnogram)],
    slm: &M,
    alphas: &[f64],
    widths: &[usize],
    jobs: usize,
) -> Result<Vec<SweepRow>>
where
    M: SequenceModel + Sync,
    M::State: Send,
{
    if records.is_empty() {
        return Err(Error::EmptyInput("sweep needs at least one record".into()));
    }
    if alphas.is_empty() || widths.is_empty() {
        return Err(Error::EmptyInput("sweep needs non-empty grids".into()));
    }
    for (likelihoods, reference) in records {
        if likelihoods.len() != reference.len() {
            return Err(Error::InvalidArgument(format!(
                "record {}: likelihood matrix has {} epochs, reference has {}",
                reference.record_id(),
                likelihoods.len(),
                reference.len()
            )));
        }
    }

    let mut grid: Vec<(f64, usize)> = Vec::with_capacity(alphas.len() * widths.len());
    for &alpha in alphas {
        for &width in widths {
            grid.push((alpha, width));
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let evaluate = |&(alpha, width): &(f64, usize)| -> Result<SweepRow> {
        let config = DecoderConfig::new(alpha, width).map_err(|e| {
            Error::InvalidArgument(format!("grid point alpha={alpha} width={width}: {e}"))
        })?;
        let mut pred_pool: Vec<SleepStage> = Vec::new();
        let mut ref_pool: Vec<SleepStage> = Vec::new();
        for (likelihoods, reference) in records {
            let (decoded, _) = beam_decode(likelihoods, slm, &config);
            pred_pool.extend_from_slice(decoded.stages());
            ref_pool.extend_from_slice(reference.stages());
        }
        Ok(SweepRow {
            alpha,
            width,
            kappa: cohen_kappa_stages(&pred_pool, &ref_pool)?,
            accuracy: accuracy_stages(&pred_pool, &ref_pool)?,
        })
    };

    if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Numeric(format!("failed to build thread pool: {e}")))?;
        pool.install(|| grid.par_iter().map(evaluate).collect())
    } else {
        grid.iter().map(evaluate).collect()
    }
}

/// Renders sweep rows as `alpha,width,kappa,accuracy` CSV with six decimals.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,width,kappa,accuracy\n");
    for row in rows {
        writeln!(
            out,
            "{:.6},{},{:.6},{:.6}",
            row.alpha, row.width, row.kappa, row.accuracy
        )
        .expect("string write");
    }
    out
}

/// Recomputes the fused score of `stages` under the same clamping and terms
/// as [`beam_decode`]; test and verification helper.
pub fn fused_score<M: SequenceModel>(
    likelihoods: &LikelihoodMatrix,
    slm: &M,
    alpha: f64,
    stages: &[SleepStage],
) -> f64 {
    let mut state = slm.start();
    let mut score = 0.0;
    for (row, &stage) in likelihoods.rows().iter().zip(stages) {
        score += row.prob(stage).max(LIKELIHOOD_FLOOR).ln();
        score += alpha * slm.predict(&state).prob(stage).ln();
        slm.advance(&mut state, stage);
    }
    score
}

/// Exhaustive maximizer of the fused score over all `5^T` sequences;
/// intended for small `T` as the oracle for beam search.
pub fn brute_force_decode<M: SequenceModel>(
    likelihoods: &LikelihoodMatrix,
    slm: &M,
    alpha: f64,
) -> (Vec<SleepStage>, f64) {
    let t = likelihoods.len();
    let total = STAGE_COUNT.pow(t as u32);
    let mut best: Option<(Vec<SleepStage>, f64)> = None;
    let mut sequence = vec![SleepStage::Wake; t];
    for code in 0..total {
        let mut rest = code;
        for slot in sequence.iter_mut().rev() {
            *slot = ALL_STAGES[rest % STAGE_COUNT];
            rest /= STAGE_COUNT;
        }
        let score = fused_score(likelihoods, slm, alpha, &sequence);
        let better = match &best {
            None => true,
            Some((best_seq, best_score)) => match score.total_cmp(best_score) {
                Ordering::Greater => true,
                Ordering::Equal => sequence < *best_seq,
                Ordering::Less => false,
            },
        };
        if better {
            best = Some((sequence.clone(), score));
        }
    }
    best.expect("at least one sequence")
}
