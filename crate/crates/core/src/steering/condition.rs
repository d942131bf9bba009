//! Steering conditions: build an intervention on a training split, then
//! collect one judgment per evaluation triplet.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::methods::{apply_steering, check_disjoint, select_layer, tune_sae_alpha, LayerScore, SaeDictionary, VectorRecipe};
use super::prompt::{ContextExample, NeutralWording, PromptSpec, IN_CONTEXT_EXAMPLES};
use super::{Agent, ApplyMode, Result, SteeringError, SteeringVector};
use crate::concepts::{Dimension, TaskDimension, Triplet, TripletSet};
use crate::judgments::{simulated_timestamp, Judgment, JudgmentSet, Provenance};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    PromptZero,
    PromptIcl,
    PromptNeutral,
    TaskVector,
    Diffmean,
    Sae,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::PromptZero,
        MethodKind::PromptIcl,
        MethodKind::PromptNeutral,
        MethodKind::TaskVector,
        MethodKind::Diffmean,
        MethodKind::Sae,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::PromptZero => "prompt_zero",
            MethodKind::PromptIcl => "prompt_icl",
            MethodKind::PromptNeutral => "prompt_neutral",
            MethodKind::TaskVector => "task_vector",
            MethodKind::Diffmean => "diffmean",
            MethodKind::Sae => "sae",
        }
    }

    pub fn is_prompting(self) -> bool {
        matches!(self, MethodKind::PromptZero | MethodKind::PromptIcl | MethodKind::PromptNeutral)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Knobs for building steering conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringDefaults {
    /// Triplets used to build vectors and in-context examples.
    pub n_train: usize,
    /// Triplets used for layer selection and alpha tuning.
    pub n_heldout: usize,
    /// Cap on evaluation triplets; all remaining triplets when absent.
    pub n_eval: Option<usize>,
    pub in_context_examples: usize,
    /// Layers searched; every layer when absent.
    pub candidate_layers: Option<Vec<usize>>,
    pub sae_alpha: Option<f64>,
    /// Multipliers of the SAE coefficient tried on the held-out split.
    pub sae_alpha_multipliers: Vec<f64>,
    pub neutral_wording: NeutralWording,
    pub task_vector_apply_mode: ApplyMode,
}

impl Default for SteeringDefaults {
    fn default() -> Self {
        SteeringDefaults {
            n_train: 200,
            n_heldout: 100,
            n_eval: None,
            in_context_examples: IN_CONTEXT_EXAMPLES,
            candidate_layers: None,
            sae_alpha: None,
            sae_alpha_multipliers: vec![0.5, 1.0, 2.0],
            neutral_wording: NeutralWording::OmitClause,
            task_vector_apply_mode: ApplyMode::PatchReplace,
        }
    }
}

/// Disjoint train / held-out / evaluation partition of a triplet set.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Triplet>,
    pub heldout: Vec<Triplet>,
    pub eval: TripletSet,
}

impl Split {
    pub fn new(ts: &TripletSet, seed: u64, n_train: usize, n_heldout: usize, n_eval: Option<usize>) -> Result<Self> {
        let needed = n_train + n_heldout + 1;
        if ts.len() < needed {
            return Err(SteeringError::InsufficientTraining { needed, got: ts.len() });
        }
        let mut order: Vec<usize> = (0..ts.len()).collect();
        order.shuffle(&mut rng::derived(seed, &["split"]));
        let train = order[..n_train].iter().map(|&i| ts.triplets()[i].clone()).collect();
        let heldout = order[n_train..n_train + n_heldout]
            .iter()
            .map(|&i| ts.triplets()[i].clone())
            .collect();
        let rest = &order[n_train + n_heldout..];
        let mut eval_idx: Vec<usize> = rest[..n_eval.unwrap_or(rest.len()).min(rest.len())].to_vec();
        eval_idx.sort_unstable();
        let eval = ts
            .subset(eval_idx.iter().map(|&i| ts.triplets()[i].id.as_str()))
            .map_err(|e| SteeringError::Agent(e.to_string()))?;
        Ok(Split { train, heldout, eval })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditionMethod {
    PromptZero,
    PromptNeutral,
    PromptIcl(Vec<ContextExample>),
    Steered(SteeringVector),
}

/// A fully built condition, ready to run over evaluation triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPlan {
    pub kind: MethodKind,
    pub dimension: TaskDimension,
    pub method: ConditionMethod,
    pub neutral_wording: NeutralWording,
    /// Per-layer held-out accuracy, vector methods only.
    pub layer_table: Vec<LayerScore>,
}

impl ConditionPlan {
    pub fn prompting(kind: MethodKind, dimension: TaskDimension) -> Self {
        let (method, dimension) = match kind {
            MethodKind::PromptNeutral => (ConditionMethod::PromptNeutral, TaskDimension::Neutral),
            _ => (ConditionMethod::PromptZero, dimension),
        };
        ConditionPlan {
            kind,
            dimension,
            method,
            neutral_wording: NeutralWording::default(),
            layer_table: Vec::new(),
        }
    }

    pub fn steered(vector: SteeringVector) -> Self {
        let kind = match vector.method {
            super::VectorMethod::TaskVector => MethodKind::TaskVector,
            super::VectorMethod::Diffmean => MethodKind::Diffmean,
            super::VectorMethod::Sae => MethodKind::Sae,
        };
        ConditionPlan {
            kind,
            dimension: vector.dimension.into(),
            method: ConditionMethod::Steered(vector),
            neutral_wording: NeutralWording::default(),
            layer_table: Vec::new(),
        }
    }

    /// Agent tag written into every judgment, e.g. `toy:diffmean:size:L3`.
    pub fn agent_tag(&self, agent: &dyn Agent) -> String {
        let mut tag = format!("{}:{}:{}", agent.tag(), self.kind, self.dimension);
        if let ConditionMethod::Steered(v) = &self.method {
            tag.push_str(&format!(":L{}", v.layer));
        }
        tag
    }

    /// Triplet ids that went into building the intervention.
    pub fn training_ids(&self) -> BTreeSet<String> {
        match &self.method {
            ConditionMethod::Steered(v) => v.trained_on.clone(),
            ConditionMethod::PromptIcl(examples) => examples.iter().map(|e| e.triplet.id.clone()).collect(),
            _ => BTreeSet::new(),
        }
    }

    fn prompt(&self, t: &Triplet) -> Result<PromptSpec> {
        let mut spec = match &self.method {
            ConditionMethod::PromptZero => PromptSpec::zero_shot(t, self.dimension),
            ConditionMethod::PromptNeutral | ConditionMethod::Steered(_) => {
                PromptSpec::zero_shot(t, TaskDimension::Neutral)
            }
            ConditionMethod::PromptIcl(examples) => PromptSpec::in_context(examples.clone(), t, self.dimension)?,
        };
        spec.neutral_wording = self.neutral_wording;
        Ok(spec)
    }
}

fn scored(kind: MethodKind, d: TaskDimension) -> Result<Dimension> {
    d.scored().ok_or_else(|| {
        SteeringError::InvalidPrompt(format!("{kind} needs a kind or size dimension"))
    })
}

/// Build the intervention for one method and dimension from `split`.
pub fn plan_condition(
    agent: &dyn Agent,
    kind: MethodKind,
    dimension: TaskDimension,
    split: &Split,
    defaults: &SteeringDefaults,
    sae: Option<&SaeDictionary>,
) -> Result<ConditionPlan> {
    let mut plan = match kind {
        MethodKind::PromptZero | MethodKind::PromptNeutral => ConditionPlan::prompting(kind, dimension),
        MethodKind::PromptIcl => {
            let d = scored(kind, dimension)?;
            let n = defaults.in_context_examples;
            if split.train.len() < n {
                return Err(SteeringError::InsufficientTraining {
                    needed: n,
                    got: split.train.len(),
                });
            }
            let examples = split.train[..n].iter().map(|t| ContextExample::answered(t, d)).collect();
            ConditionPlan {
                kind,
                dimension,
                method: ConditionMethod::PromptIcl(examples),
                neutral_wording: defaults.neutral_wording,
                layer_table: Vec::new(),
            }
        }
        MethodKind::TaskVector | MethodKind::Diffmean | MethodKind::Sae => {
            let d = scored(kind, dimension)?;
            let recipe = match kind {
                MethodKind::TaskVector => VectorRecipe::TaskVector,
                MethodKind::Diffmean => VectorRecipe::DiffMean,
                _ => VectorRecipe::Sae {
                    dictionary: sae
                        .cloned()
                        .ok_or_else(|| SteeringError::Agent("sae method needs a dictionary".into()))?,
                    alpha: defaults.sae_alpha,
                },
            };
            let layers: Vec<usize> = defaults
                .candidate_layers
                .clone()
                .unwrap_or_else(|| (0..agent.layers()).collect());
            let selection = select_layer(agent, &recipe, d, &layers, &split.train, &split.heldout)?;
            let mut vector = selection.vector;
            if kind == MethodKind::TaskVector {
                vector.apply_mode = defaults.task_vector_apply_mode;
            }
            if kind == MethodKind::Sae && defaults.sae_alpha.is_none() && !defaults.sae_alpha_multipliers.is_empty() {
                vector = tune_sae_alpha(agent, &vector, &defaults.sae_alpha_multipliers, &split.heldout)?.1;
            }
            let mut plan = ConditionPlan::steered(vector);
            plan.layer_table = selection.table;
            plan
        }
    };
    plan.neutral_wording = defaults.neutral_wording;
    Ok(plan)
}

/// One judgment per triplet of `ts`, in order. Fails if any evaluation
/// triplet was used to build the intervention.
pub fn run_condition(agent: &dyn Agent, plan: &ConditionPlan, ts: &TripletSet) -> Result<JudgmentSet> {
    if let ConditionMethod::Steered(v) = &plan.method {
        let requested = scored(plan.kind, plan.dimension)?;
        if v.dimension != requested {
            return Err(SteeringError::DimensionMismatch {
                vector: v.dimension,
                requested,
            });
        }
    }
    check_disjoint(&plan.training_ids(), ts.triplets())?;

    let tag = plan.agent_tag(agent);
    let judgments = ts
        .triplets()
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let spec = plan.prompt(t)?;
            let trace = match &plan.method {
                ConditionMethod::Steered(v) => apply_steering(agent, &spec, v)?,
                _ => agent.forward(&spec, None)?,
            };
            let mut j = Judgment::new(&t.id, plan.dimension, trace.choice, tag.clone());
            j.ts = simulated_timestamp(i);
            Ok(j)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(JudgmentSet::new(
        Provenance {
            condition: format!("{}-{}-{}", agent.tag(), plan.kind, plan.dimension),
            method: plan.kind.to_string(),
            model: agent.tag().to_string(),
        },
        judgments,
    ))
}
