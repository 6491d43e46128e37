//! The five-class sleep-stage alphabet and probability vectors over it.

use crate::error::{Error, Result};
use std::fmt;
use std::ops::Index;
use std::str::FromStr;

/// Number of sleep-stage classes.
pub const STAGE_COUNT: usize = 5;

/// One AASM sleep-stage class, scored per 30-second epoch.
///
/// The canonical index order is `W=0, REM=1, N1=2, N2=3, N3=4`; every matrix
/// and probability vector in this crate uses it for rows and columns, and the
/// derived `Ord` (used for deterministic tie-breaking) follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SleepStage {
    Wake,
    Rem,
    N1,
    N2,
    N3,
}

/// All stages in canonical index order.
pub const ALL_STAGES: [SleepStage; STAGE_COUNT] = [
    SleepStage::Wake,
    SleepStage::Rem,
    SleepStage::N1,
    SleepStage::N2,
    SleepStage::N3,
];

impl SleepStage {
    /// Canonical index in `0..5`.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Inverse of [`SleepStage::index`].
    pub fn from_index(index: usize) -> Option<Self> {
        ALL_STAGES.get(index).copied()
    }

    /// Text token used by every file format in this crate.
    pub fn token(self) -> &'static str {
        match self {
            SleepStage::Wake => "W",
            SleepStage::Rem => "REM",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
        }
    }

    /// Inverse of [`SleepStage::token`].
    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "W" => Some(SleepStage::Wake),
            "REM" => Some(SleepStage::Rem),
            "N1" => Some(SleepStage::N1),
            "N2" => Some(SleepStage::N2),
            "N3" => Some(SleepStage::N3),
            _ => None,
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for SleepStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SleepStage::from_token(s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sleep stage token {s:?}")))
    }
}

/// A probability vector over the five sleep stages.
///
/// Invariant: every entry is finite and non-negative and the entries sum to 1
/// within [`StageDistribution::SUM_TOLERANCE`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageDistribution([f64; STAGE_COUNT]);

impl StageDistribution {
    /// Absolute tolerance on the sum of entries.
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validates and wraps a probability vector.
    pub fn new(probs: [f64; STAGE_COUNT]) -> Result<Self> {
        for (i, p) in probs.iter().enumerate() {
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "probability for stage {} is {p}, expected a finite value >= 0",
                    ALL_STAGES[i]
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1 within {}",
                Self::SUM_TOLERANCE
            )));
        }
        Ok(StageDistribution(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: [f64; STAGE_COUNT]) -> Result<Self> {
        for w in &weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "weight {w} is not a finite value >= 0"
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalize weights that sum to zero".into(),
            ));
        }
        Ok(StageDistribution(weights.map(|w| w / sum)))
    }

    /// Wraps a vector that is known to satisfy the invariant (or that a test
    /// deliberately leaves unnormalized). Not part of the public API.
    pub(crate) fn new_unchecked(probs: [f64; STAGE_COUNT]) -> Self {
        StageDistribution(probs)
    }

    /// The uniform distribution (1/5 per stage).
    pub fn uniform() -> Self {
        StageDistribution([1.0 / STAGE_COUNT as f64; STAGE_COUNT])
    }

    /// All mass on a single stage.
    pub fn point_mass(stage: SleepStage) -> Self {
        let mut probs = [0.0; STAGE_COUNT];
        probs[stage.index()] = 1.0;
        StageDistribution(probs)
    }

    /// Probability of one stage.
    pub fn prob(&self, stage: SleepStage) -> f64 {
        self.0[stage.index()]
    }

    /// The raw vector in canonical stage order.
    pub fn probs(&self) -> &[f64; STAGE_COUNT] {
        &self.0
    }

    /// Highest-probability stage; ties go to the lowest canonical index.
    pub fn argmax(&self) -> SleepStage {
        let mut best = SleepStage::Wake;
        let mut best_p = self.0[0];
        for &stage in &ALL_STAGES[1..] {
            let p = self.0[stage.index()];
            if p > best_p {
                best = stage;
                best_p = p;
            }
        }
        best
    }
}

impl Index<SleepStage> for StageDistribution {
    type Output = f64;

    fn index(&self, stage: SleepStage) -> &f64 {
        &self.0[stage.index()]
    }
}
