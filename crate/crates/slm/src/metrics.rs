//! Evaluation metrics: perplexity, accuracy and Cohen's kappa.

use crate::error::{Error, Result};
use crate::hypnogram::Hypnogram;
use crate::model::SequenceModel;
use crate::stage::{SleepStage, STAGE_COUNT};

/// Perplexity of `model` on `records`: `exp(-1/N * sum ln P(stage | history))`
/// over all `N` epochs, with the history reset at every record boundary. The
/// first epoch of each record is scored by the model's empty-history
/// distribution, so every epoch contributes exactly one event.
pub fn perplexity<M: SequenceModel>(model: &M, records: &[Hypnogram]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("perplexity needs at least one record".into()));
    }
    let mut total_log_prob = 0.0;
    let mut epochs = 0usize;
    for record in records {
        let mut state = model.start();
        for (epoch, &stage) in record.stages().iter().enumerate() {
            let p = model.predict(&state).prob(stage);
            if !(p > 0.0) {
                return Err(Error::ZeroProbability {
                    record: record.record_id().to_string(),
                    epoch,
                    stage,
                });
            }
            total_log_prob += p.ln();
            epochs += 1;
            model.advance(&mut state, stage);
        }
    }
    Ok((-total_log_prob / epochs as f64).exp())
}

/// Fraction of epochs where the two sequences agree.
pub fn accuracy(pred: &Hypnogram, reference: &Hypnogram) -> Result<f64> {
    accuracy_stages(pred.stages(), reference.stages())
}

/// [`accuracy`] on raw stage slices (used for pooled multi-record scoring).
pub fn accuracy_stages(pred: &[SleepStage], reference: &[SleepStage]) -> Result<f64> {
    check_lengths(pred, reference)?;
    let agree = pred
        .iter()
        .zip(reference)
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)` with the chance term `p_e` taken
/// from the product of the two sequences' marginal class frequencies. When
/// both sequences are the same constant (`p_e = 1`), returns 1 by convention.
pub fn cohen_kappa(pred: &Hypnogram, reference: &Hypnogram) -> Result<f64> {
    cohen_kappa_stages(pred.stages(), reference.stages())
}

/// [`cohen_kappa`] on raw stage slices.
pub fn cohen_kappa_stages(pred: &[SleepStage], reference: &[SleepStage]) -> Result<f64> {
    check_lengths(pred, reference)?;
    let n = pred.len() as f64;
    let mut pred_marginal = [0.0f64; STAGE_COUNT];
    let mut ref_marginal = [0.0f64; STAGE_COUNT];
    let mut agree = 0usize;
    for (a, b) in pred.iter().zip(reference) {
        pred_marginal[a.index()] += 1.0;
        ref_marginal[b.index()] += 1.0;
        if a == b {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = pred_marginal
        .iter()
        .zip(&ref_marginal)
        .map(|(p, r)| (p / n) * (r / n))
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn check_lengths(pred: &[SleepStage], reference: &[SleepStage]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::EmptyInput("metric needs at least one epoch".into()));
    }
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: reference.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UniformModel;
    use crate::stage::SleepStage::*;
    use crate::stage::{StageDistribution, ALL_STAGES};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, stages: &[SleepStage]) -> Hypnogram {
        Hypnogram::new(id, stages.to_vec()).unwrap()
    }

    /// Test model that knows the record and predicts the true next stage
    /// with probability one.
    struct OracleModel {
        stages: Vec<SleepStage>,
    }

    impl SequenceModel for OracleModel {
        type State = usize;

        fn start(&self) -> usize {
            0
        }

        fn predict(&self, state: &usize) -> StageDistribution {
            StageDistribution::point_mass(self.stages[*state])
        }

        fn advance(&self, state: &mut usize, _observed: SleepStage) {
            *state += 1;
        }
    }

    /// Test model backed by explicit per-stage rows; rows need not be
    /// normalized, which lets tests feed published probability tables as-is.
    struct RowModel {
        initial: [f64; 5],
        rows: [[f64; 5]; 5],
    }

    impl SequenceModel for RowModel {
        type State = Option<SleepStage>;

        fn start(&self) -> Self::State {
            None
        }

        fn predict(&self, state: &Self::State) -> StageDistribution {
            // Bypasses validation on purpose: exact hand checks need the raw
            // table rows even though they do not sum to 1.
            let row = match state {
                None => self.initial,
                Some(s) => self.rows[s.index()],
            };
            StageDistribution::new_unchecked(row)
        }

        fn advance(&self, state: &mut Self::State, observed: SleepStage) {
            *state = Some(observed);
        }
    }

    #[test]
    fn uniform_model_has_perplexity_five() {
        let records = vec![record("a", &[Wake, Rem, N1]), record("b", &[N2; 17])];
        let ppl = perplexity(&UniformModel, &records).unwrap();
        assert_abs_diff_eq!(ppl, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_perplexity_is_segmentation_invariant() {
        let stages: Vec<SleepStage> = (0..100).map(|i| ALL_STAGES[i % 5]).collect();
        let one = vec![record("all", &stages)];
        let many: Vec<Hypnogram> = stages
            .chunks(7)
            .enumerate()
            .map(|(i, c)| record(&format!("part{i}"), c))
            .collect();
        let p1 = perplexity(&UniformModel, &one).unwrap();
        let p2 = perplexity(&UniformModel, &many).unwrap();
        assert_abs_diff_eq!(p1, 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p2, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn oracle_model_has_perplexity_one() {
        let stages = vec![Wake, N1, N2, N3, N3, Rem];
        let model = OracleModel {
            stages: stages.clone(),
        };
        let ppl = perplexity(&model, &[record("a", &stages)]).unwrap();
        assert_abs_diff_eq!(ppl, 1.0, epsilon = 1e-12);
    }

    // Hand evaluation, frozen before the build: the reference transition
    // table gives P(W|W)=0.854, P(N1|W)=0.138, P(N2|N1)=0.311, and with a
    // point mass on W for the empty history the record [W, W, N1, N2] scores
    // (1.0 * 0.854 * 0.138 * 0.311)^(-1/4) = 2.285470729024873.
    #[test]
    fn table_row_model_matches_hand_computed_perplexity() {
        let model = RowModel {
            initial: [1.0, 0.0, 0.0, 0.0, 0.0],
            rows: [
                [0.854, 0.001, 0.138, 0.003, 0.000],
                [0.016, 0.907, 0.066, 0.010, 0.000],
                [0.109, 0.080, 0.498, 0.311, 0.000],
                [0.019, 0.014, 0.062, 0.864, 0.040],
                [0.007, 0.001, 0.007, 0.063, 0.921],
            ],
        };
        let ppl = perplexity(&model, &[record("hand", &[Wake, Wake, N1, N2])]).unwrap();
        assert_abs_diff_eq!(ppl, 2.285470729024873, epsilon = 1e-12);
    }

    #[test]
    fn zero_probability_event_names_record_epoch_and_stage() {
        let model = OracleModel {
            stages: vec![Wake, Wake, Wake],
        };
        let err = perplexity(&model, &[record("night7", &[Wake, N1, Wake])]).unwrap_err();
        match err {
            Error::ZeroProbability {
                record,
                epoch,
                stage,
            } => {
                assert_eq!(record, "night7");
                assert_eq!(epoch, 1);
                assert_eq!(stage, N1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn perplexity_rejects_empty_record_list() {
        assert!(perplexity(&UniformModel, &[]).is_err());
    }

    #[test]
    fn perplexity_is_at_least_one() {
        // Any valid distribution has entries <= 1, so each event contributes
        // a non-negative negative-log term.
        let stages = vec![Wake, Wake, N2, N3, N2, Rem, N1, Wake];
        let ppl = perplexity(&UniformModel, &[record("a", &stages)]).unwrap();
        assert!(ppl >= 1.0);
    }

    #[test]
    fn accuracy_counts_agreements() {
        let a = record("a", &[Wake, Wake]);
        let b = record("b", &[Wake, N1]);
        assert_abs_diff_eq!(accuracy(&a, &a).unwrap(), 1.0);
        assert_abs_diff_eq!(accuracy(&a, &b).unwrap(), 0.5);
        assert!(accuracy(&a, &record("c", &[Wake])).is_err());
    }

    #[test]
    fn kappa_hand_example_is_zero() {
        // p_o = 0.5 and both marginals are (0.5, 0.5) so p_e = 0.5.
        let pred = record("p", &[Wake, Wake, N1, N1]);
        let refr = record("r", &[Wake, N1, Wake, N1]);
        assert_abs_diff_eq!(cohen_kappa(&pred, &refr).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kappa_is_one_for_perfect_agreement() {
        let a = record("a", &[Wake, N1, N2, N2, N3]);
        assert_abs_diff_eq!(cohen_kappa(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        // Both constant and equal: p_e = 1, kappa = 1 by convention.
        let c = record("c", &[N2, N2, N2]);
        assert_abs_diff_eq!(cohen_kappa(&c, &c).unwrap(), 1.0);
        // Both constant and different: p_e = 0, kappa = 0.
        let d = record("d", &[N3, N3, N3]);
        assert_abs_diff_eq!(cohen_kappa(&c, &d).unwrap(), 0.0);
    }

    #[test]
    fn independent_uniform_sequences_hit_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<SleepStage> {
            (0..n).map(|_| ALL_STAGES[rng.random_range(0..5)]).collect()
        };
        let pred = record("pred", &draw(&mut rng));
        let refr = record("ref", &draw(&mut rng));
        let acc = accuracy(&pred, &refr).unwrap();
        let kappa = cohen_kappa(&pred, &refr).unwrap();
        assert_abs_diff_eq!(acc, 0.2, epsilon = 0.01);
        assert_abs_diff_eq!(kappa, 0.0, epsilon = 0.02);
    }

    #[test]
    fn accuracy_and_kappa_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<SleepStage> {
            (0..500).map(|_| ALL_STAGES[rng.random_range(0..5)]).collect()
        };
        let a = record("a", &draw(&mut rng));
        let b = record("b", &draw(&mut rng));
        assert_eq!(accuracy(&a, &b).unwrap(), accuracy(&b, &a).unwrap());
        assert_eq!(cohen_kappa(&a, &b).unwrap(), cohen_kappa(&b, &a).unwrap());
    }
}
