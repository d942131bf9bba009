//! Prompting and residual-stream steering of similarity-judging agents.
//!
//! Every method here operates on an [`Agent`]: something that, given a
//! prompt and an optional [`SteeringVector`], returns the residual stream
//! at the final prompt token for every layer plus its chosen option. The
//! crate ships [`ToyAgent`], a small deterministic residual-stream model
//! with planted context directions, and [`interchange::ReplayAgent`] for
//! activations exported by an external model harness.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{Dimension, TaskDimension, Triplet};

pub mod condition;
pub mod interchange;
pub mod methods;
pub mod prompt;
pub mod toy;

pub use condition::{plan_condition, run_condition, ConditionMethod, ConditionPlan, MethodKind, Split, SteeringDefaults};
pub use methods::{
    apply_steering, compute_diffmean, extract_task_vector, sae_select_and_steer, select_layer, LayerScore,
    LayerSelection, SaeDictionary, SaeSelection, VectorRecipe,
};
pub use prompt::{build_prompt, ContextExample, NeutralWording, PromptMode, PromptSpec, IN_CONTEXT_EXAMPLES};
pub use toy::{ToyAgent, ToyParams};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("steering vector has {got} entries, agent hidden size is {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("layer {layer} out of range for a {layers}-layer agent")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("empty trace group")]
    EmptyGroup,
    #[error("traces in one group carry different dimensions")]
    InconsistentDimension,
    #[error("no dictionary feature is active on the given traces")]
    AllFeaturesInactive,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("steering is only applied to zero-shot prompts")]
    NotZeroShot,
    #[error("steering vector contains non-finite values")]
    NonFiniteVector,
    #[error("triplet {0} was used to build the steering intervention and cannot be evaluated")]
    SplitOverlap(String),
    #[error("need at least {needed} training triplets, got {got}")]
    InsufficientTraining { needed: usize, got: usize },
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("no candidate layers")]
    NoCandidates,
    #[error("steering vector targets {vector} but the condition asks for {requested}")]
    DimensionMismatch { vector: Dimension, requested: Dimension },
    #[error("agent: {0}")]
    Agent(String),
    #[error("interchange format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SteeringError> = std::result::Result<T, E>;

/// Residual stream at the final input token of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub prompt: String,
    pub mode: PromptMode,
    pub dimension: TaskDimension,
    /// `layers × hidden`, row `l` is the residual after layer `l`.
    pub residuals: DMatrix<f64>,
    pub choice: String,
    pub logit_margin: f64,
}

impl ActivationTrace {
    pub fn layers(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn layer(&self, l: usize) -> Result<DVector<f64>> {
        if l >= self.layers() {
            return Err(SteeringError::LayerOutOfRange {
                layer: l,
                layers: self.layers(),
            });
        }
        Ok(self.residuals.row(l).transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorMethod {
    TaskVector,
    Diffmean,
    Sae,
}

impl VectorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorMethod::TaskVector => "task_vector",
            VectorMethod::Diffmean => "diffmean",
            VectorMethod::Sae => "sae",
        }
    }

    pub fn default_apply_mode(self) -> ApplyMode {
        match self {
            VectorMethod::TaskVector => ApplyMode::PatchReplace,
            VectorMethod::Diffmean | VectorMethod::Sae => ApplyMode::ResidualAdd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    /// Overwrite the final-token residual at the layer.
    PatchReplace,
    /// Add to the final-token residual at the layer.
    ResidualAdd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub vector: DVector<f64>,
    pub layer: usize,
    pub method: VectorMethod,
    pub dimension: Dimension,
    pub apply_mode: ApplyMode,
    /// Ids of triplets that appeared in the prompts this vector was built from.
    pub trained_on: BTreeSet<String>,
}

impl SteeringVector {
    pub fn new(vector: DVector<f64>, layer: usize, method: VectorMethod, dimension: Dimension) -> Self {
        SteeringVector {
            vector,
            layer,
            method,
            dimension,
            apply_mode: method.default_apply_mode(),
            trained_on: BTreeSet::new(),
        }
    }

    pub fn with_apply_mode(mut self, mode: ApplyMode) -> Self {
        self.apply_mode = mode;
        self
    }

    pub fn with_trained_on<'a>(mut self, ids: impl IntoIterator<Item = &'a Triplet>) -> Self {
        self.trained_on.extend(ids.into_iter().map(|t| t.id.clone()));
        self
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|x| x.is_finite())
    }
}

/// Anything that can answer a prompt and expose its final-token residuals.
/// Implementations must be deterministic for fixed inputs.
pub trait Agent: Sync {
    /// Short label used in judgment agent tags, e.g. `"toy"`.
    fn tag(&self) -> &str;
    fn layers(&self) -> usize;
    fn hidden(&self) -> usize;
    fn forward(&self, spec: &PromptSpec, steering: Option<&SteeringVector>) -> Result<ActivationTrace>;
}

/// Shared shape checks for steering vectors.
pub fn check_vector(agent: &dyn Agent, v: &SteeringVector) -> Result<()> {
    if v.vector.len() != agent.hidden() {
        return Err(SteeringError::ShapeMismatch {
            expected: agent.hidden(),
            got: v.vector.len(),
        });
    }
    if v.layer >= agent.layers() {
        return Err(SteeringError::LayerOutOfRange {
            layer: v.layer,
            layers: agent.layers(),
        });
    }
    if !v.is_finite() {
        return Err(SteeringError::NonFiniteVector);
    }
    Ok(())
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}
