//! Prompt construction for the triadic judgment task.

use serde::{Deserialize, Serialize};

use super::{Result, SteeringError};
use crate::concepts::{ground_truth_answer, Dimension, TaskDimension, Triplet};

/// Number of answered triplets in an in-context prompt.
pub const IN_CONTEXT_EXAMPLES: usize = 15;

const INSTRUCTION_HEAD: &str = "Choose the item that is most similar to the first item";
const INSTRUCTION_TAIL: &str = "Respond only with the name of the item exactly as written.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    InContext,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::InContext => "in_context",
        }
    }
}

/// How a neutral instruction is phrased.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeutralWording {
    /// Drop the "in terms of" clause.
    #[default]
    OmitClause,
    /// Interpolate the word "similarity" as the dimension.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContextExample {
    pub triplet: Triplet,
    pub answer: String,
}

impl ContextExample {
    /// Example answered with the ground truth of `d`.
    pub fn answered(triplet: &Triplet, d: Dimension) -> Self {
        ContextExample {
            answer: ground_truth_answer(triplet, d).to_string(),
            triplet: triplet.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub dimension: TaskDimension,
    pub context: Vec<ContextExample>,
    pub query: Triplet,
    pub neutral_wording: NeutralWording,
}

impl PromptSpec {
    pub fn zero_shot(query: &Triplet, dimension: TaskDimension) -> Self {
        PromptSpec {
            mode: PromptMode::ZeroShot,
            dimension,
            context: Vec::new(),
            query: query.clone(),
            neutral_wording: NeutralWording::default(),
        }
    }

    pub fn in_context(context: Vec<ContextExample>, query: &Triplet, dimension: TaskDimension) -> Result<Self> {
        let spec = PromptSpec {
            mode: PromptMode::InContext,
            dimension,
            context,
            query: query.clone(),
            neutral_wording: NeutralWording::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PromptMode::ZeroShot if !self.context.is_empty() => Err(SteeringError::InvalidPrompt(
                "zero-shot prompts carry no context examples".into(),
            )),
            PromptMode::InContext if self.context.is_empty() => Err(SteeringError::InvalidPrompt(
                "in-context prompts need at least one example".into(),
            )),
            _ => {
                for ex in &self.context {
                    if !ex.triplet.is_option(&ex.answer) {
                        return Err(SteeringError::InvalidPrompt(format!(
                            "example answer {:?} is not an option of {}",
                            ex.answer, ex.triplet.id
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

fn instruction(dimension: TaskDimension, wording: NeutralWording) -> String {
    match (dimension, wording) {
        (TaskDimension::Neutral, NeutralWording::OmitClause) => {
            format!("{INSTRUCTION_HEAD}. {INSTRUCTION_TAIL}")
        }
        (TaskDimension::Neutral, NeutralWording::Similarity) => {
            format!("{INSTRUCTION_HEAD} in terms of similarity. {INSTRUCTION_TAIL}")
        }
        (d, _) => format!("{INSTRUCTION_HEAD} in terms of {d}. {INSTRUCTION_TAIL}"),
    }
}

fn push_block(out: &mut String, t: &Triplet, answer: Option<&str>) {
    let r = &t.reference;
    out.push('\n');
    out.push_str(&format!("{r} + {} OR {r} + {}?\n", t.opt1, t.opt2));
    match answer {
        Some(a) => out.push_str(&format!("answer: {r} + {a}")),
        None => out.push_str(&format!("answer: {r} +")),
    }
}

/// Render the prompt text. The final character is always the `+` at which
/// activations are read and steering is applied.
pub fn build_prompt(spec: &PromptSpec) -> String {
    let mut out = instruction(spec.dimension, spec.neutral_wording);
    for ex in &spec.context {
        push_block(&mut out, &ex.triplet, Some(&ex.answer));
    }
    push_block(&mut out, &spec.query, None);
    out
}
