//! The sequence-model capability shared by every sleep model.

use crate::stage::{SleepStage, StageDistribution};

/// A model of the next sleep stage given the stages seen so far.
///
/// Implementations carry incremental state so that decoding and evaluation
/// can extend a history one epoch at a time without re-consuming it. The
/// state handle is single-owner; clone it to branch a history (beam search
/// does this for every surviving hypothesis). A fresh state from
/// [`SequenceModel::start`] represents the empty history at a record start,
/// and [`SequenceModel::predict`] must return a valid [`StageDistribution`]
/// for every reachable state, including that one.
pub trait SequenceModel {
    type State: Clone;

    /// State at a record start (empty history).
    fn start(&self) -> Self::State;

    /// Distribution of the next stage given the history consumed so far.
    fn predict(&self, state: &Self::State) -> StageDistribution;

    /// Consumes one observed stage, advancing the history.
    fn advance(&self, state: &mut Self::State, observed: SleepStage);

    /// Convenience: prediction after consuming `history` from a record start.
    fn distribution_after(&self, history: &[SleepStage]) -> StageDistribution {
        let mut state = self.start();
        for &stage in history {
            self.advance(&mut state, stage);
        }
        self.predict(&state)
    }
}

/// The memoryless baseline: 1/5 for every stage in every context.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformModel;

impl SequenceModel for UniformModel {
    type State = ();

    fn start(&self) -> Self::State {}

    fn predict(&self, _state: &Self::State) -> StageDistribution {
        StageDistribution::uniform()
    }

    fn advance(&self, _state: &mut Self::State, _observed: SleepStage) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::ALL_STAGES;

    #[test]
    fn uniform_model_ignores_history() {
        let model = UniformModel;
        assert_eq!(model.distribution_after(&[]), StageDistribution::uniform());
        assert_eq!(
            model.distribution_after(&ALL_STAGES),
            StageDistribution::uniform()
        );
    }
}
