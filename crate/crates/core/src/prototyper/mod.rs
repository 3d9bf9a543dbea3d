//! Bi-propagating prototype encoder at desk scale.
//!
//! Each encoding block has a bottom-up half (self-attention over a CLS token
//! plus the input tokens, and Gumbel-perturbed prototype pooling) and a
//! top-down half (cross-attention from lower-level tokens to a higher-level
//! summary). [`forward_bipropagate`] chains three blocks: patches →
//! individuals → groups → global, then global → groups → individuals.
//!
//! All computations are recorded on a [`Graph`] so that the losses can be
//! differentiated in reverse mode and checked against finite differences
//! with [`gradient_check`].

mod bpp;
mod gradcheck;
mod loss;
mod matrix;
mod tape;
mod ube;
mod weights;

pub use bpp::{
    forward_bipropagate, recognition_heads, Hierarchy, RecognitionLogits,
};
pub use gradcheck::{
    check_model, fixture, gradient_check, relative_error, FIXTURE_INIT_STD, FIXTURE_SEED, FIXTURE_TOKENS, FnObjective, GradCheck, GradCheckError, MatrixCheck, Objective,
};
pub use loss::{
    assign_greedy, detection_loss, evaluate_objective, recognition_loss, total_loss, DetectionLoss,
    DetectionPrediction, DetectionSample, LossReport, LossSettings, RecognitionLoss,
    RecognitionTargets, TrainingSample,
};
pub use matrix::Matrix;
pub use tape::{bce_with_logits, sigmoid, softmax_rows, Gradients, Graph, Var};
pub use ube::{
    cme_top_down, prototype_attention, ube_bottom_up, ume_self_attention, CmeOutput,
    PrototypeOutput, UmeOutput, STARVATION_GUARD,
};
pub use weights::{
    detection_features, AttentionParams, BppModel, CmeParams, HeadParams, LinearParams, MlpParams,
    ModelDims, ModelParams, ModelVars, PrototypeBank, PrototypeProjections, UbeParams, UbeVars,
    UbeWeights, Visit, INIT_STD,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrototypeError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter {0} contains non-finite values")]
    NonFinite(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("{tokens} tokens exceed the positional table of {max} entries")]
    TooManyTokens { tokens: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("individual {0} is not covered by any group")]
    Uncovered(usize),
    #[error("individual {0} appears in more than one group")]
    DuplicateMember(usize),
    #[error("group {0} references individual {1}, which does not exist")]
    UnknownMember(usize, usize),
    #[error("group {0} has no members")]
    EmptyGroup(usize),
}

/// Granularity of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Patch,
    Individual,
    Group,
    Global,
}

/// `M×d` feature tokens at one granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: Matrix,
    pub level: Level,
}

impl TokenMatrix {
    pub fn new(rows: Matrix, level: Level) -> Result<Self, PrototypeError> {
        if rows.rows() == 0 {
            return Err(PrototypeError::Dimension("a token matrix needs at least one row".into()));
        }
        if !rows.is_finite() {
            return Err(PrototypeError::NonFinite(format!("{level:?} tokens")));
        }
        Ok(Self { rows, level })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// How prototype logits are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum GumbelMode {
    /// No noise (evaluation).
    #[default]
    Disabled,
    /// One `Gumbel(0, 1)` sample per prototype per call, scaled by `scale`,
    /// from a generator seeded once per forward pass.
    Seeded { seed: u64, scale: f64 },
}

/// Per-pass noise source derived from a [`GumbelMode`].
#[derive(Debug, Clone)]
pub struct GumbelSampler {
    state: Option<(ChaCha8Rng, f64)>,
}

impl GumbelSampler {
    pub fn new(mode: GumbelMode) -> Self {
        let state = match mode {
            GumbelMode::Disabled => None,
            GumbelMode::Seeded { seed, scale } => Some((ChaCha8Rng::seed_from_u64(seed), scale)),
        };
        Self { state }
    }

    pub fn disabled() -> Self {
        Self { state: None }
    }

    /// A `1×J` row of noise, or `None` when disabled.
    pub fn sample(&mut self, prototypes: usize) -> Option<Matrix> {
        let (rng, scale) = self.state.as_mut()?;
        let dist = Gumbel::new(0.0, 1.0).expect("unit gumbel");
        let values = (0..prototypes).map(|_| dist.sample(rng) * *scale).collect();
        Some(Matrix::from_vec(1, prototypes, values))
    }
}
