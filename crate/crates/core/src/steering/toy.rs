//! A small deterministic residual-stream model.
//!
//! The residual at the final prompt token is built additively, one write
//! per layer:
//!
//! - layer 0 writes a shared base vector and the query's concept content;
//! - the injection layer writes the task context read from the prompt: the
//!   instruction's dimension word adds its context direction, and each
//!   answered in-context example adds `1/15` of the direction its answer
//!   reveals;
//! - every layer also writes a small fixed drift vector.
//!
//! Steering edits the residual right after its layer's write, and all later
//! layers add on top of the edited value. The readout projects the final
//! residual onto the kind and size directions and answers along whichever
//! is larger. The base vector carries a small component along the default
//! direction, so a prompt with no task context falls back to it.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::methods::SaeDictionary;
use super::prompt::{build_prompt, PromptSpec, IN_CONTEXT_EXAMPLES};
use super::{check_vector, ActivationTrace, Agent, ApplyMode, Result, SteeringError, SteeringVector};
use crate::concepts::{ConceptSet, Dimension, TaskDimension, Triplet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyParams {
    pub layers: usize,
    pub hidden: usize,
    /// Layer at which the prompt's task context enters the residual.
    pub injection_layer: usize,
    pub seed: u64,
    pub base_norm: f64,
    /// Norm of a concept's content vector.
    pub content_scale: f64,
    pub drift_scale: f64,
    pub instruction_strength: f64,
    /// Dimension the readout falls back to without task context.
    pub default_direction: Dimension,
    pub default_bias: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            layers: 8,
            hidden: 32,
            injection_layer: 3,
            seed: 0,
            base_norm: 2.0,
            content_scale: 0.15,
            drift_scale: 0.05,
            instruction_strength: 1.0,
            default_direction: Dimension::Kind,
            default_bias: 0.25,
        }
    }
}

impl ToyParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SteeringError::Agent(format!("invalid toy parameters: {m}")));
        if self.hidden < 4 {
            return bad("hidden must be at least 4");
        }
        if self.layers == 0 || self.injection_layer >= self.layers {
            return bad("injection_layer must be < layers");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConceptFeatures {
    kind: String,
    log_size: f64,
    content: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyAgent {
    params: ToyParams,
    tag: String,
    c_kind: DVector<f64>,
    c_size: DVector<f64>,
    base: DVector<f64>,
    base_direction: DVector<f64>,
    drift: Vec<DVector<f64>>,
    concepts: HashMap<String, ConceptFeatures>,
}

/// Gram-Schmidt `v` against an orthonormal list; `None` if it collapses.
fn orthogonalize(mut v: DVector<f64>, basis: &[DVector<f64>]) -> Option<DVector<f64>> {
    for b in basis {
        let proj = v.dot(b);
        v.axpy(-proj, b, 1.0);
    }
    let n = v.norm();
    (n > 1e-8).then(|| v / n)
}

impl ToyAgent {
    pub fn new(params: ToyParams, concepts: &ConceptSet) -> Result<Self> {
        params.validate()?;
        let d = params.hidden;
        let mut r = rng::derived(params.seed, &["toy_agent"]);
        let gaussian = |r: &mut rand_chacha::ChaCha8Rng| DVector::from_fn(d, |_, _| StandardNormal.sample(r));

        let mut basis: Vec<DVector<f64>> = Vec::new();
        while basis.len() < 3 {
            if let Some(v) = orthogonalize(gaussian(&mut r), &basis) {
                basis.push(v);
            }
        }
        let (c_kind, c_size, base_direction) = (basis[0].clone(), basis[1].clone(), basis[2].clone());
        let c_default = match params.default_direction {
            Dimension::Kind => &c_kind,
            Dimension::Size => &c_size,
        };
        let base = &base_direction * params.base_norm + c_default * params.default_bias;

        // Content and drift live off the context directions so they never
        // change the readout.
        let context_basis = [c_kind.clone(), c_size.clone()];
        let off_context = |r: &mut rand_chacha::ChaCha8Rng, scale: f64| loop {
            if let Some(v) = orthogonalize(gaussian(r), &context_basis) {
                break v * scale;
            }
        };
        let drift = (0..params.layers)
            .map(|_| off_context(&mut r, params.drift_scale))
            .collect();
        let concepts = concepts
            .concepts()
            .iter()
            .map(|c| {
                (
                    c.id.clone(),
                    ConceptFeatures {
                        kind: c.kind.clone(),
                        log_size: c.log_size(),
                        content: off_context(&mut r, params.content_scale),
                    },
                )
            })
            .collect();

        Ok(ToyAgent {
            params,
            tag: "toy".into(),
            c_kind,
            c_size,
            base,
            base_direction,
            drift,
            concepts,
        })
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    pub fn direction(&self, d: Dimension) -> &DVector<f64> {
        match d {
            Dimension::Kind => &self.c_kind,
            Dimension::Size => &self.c_size,
        }
    }

    pub fn base(&self) -> &DVector<f64> {
        &self.base
    }

    /// Unit vector of the base, orthogonal to both context directions.
    pub fn base_direction(&self) -> &DVector<f64> {
        &self.base_direction
    }

    /// Base plus the drift accumulated through `layer`.
    pub fn base_at(&self, layer: usize) -> DVector<f64> {
        self.drift[..=layer].iter().fold(self.base.clone(), |acc, d| acc + d)
    }

    /// A dictionary whose feature `planted` encodes and decodes the size
    /// direction and feature `planted + 1` (mod `features`) the kind
    /// direction. Other features are random directions orthogonal to both
    /// and to the base.
    pub fn planted_dictionary(&self, features: usize, planted: usize, seed: u64) -> SaeDictionary {
        assert!(features >= 2 && planted < features);
        let mut r = rng::derived(seed, &["planted_dictionary"]);
        let fixed = [self.c_kind.clone(), self.c_size.clone(), self.base_direction.clone()];
        let kind_feature = (planted + 1) % features;
        let rows: Vec<_> = (0..features)
            .map(|i| {
                let v = if i == planted {
                    self.c_size.clone()
                } else if i == kind_feature {
                    self.c_kind.clone()
                } else {
                    loop {
                        let g = DVector::from_fn(self.params.hidden, |_, _| StandardNormal.sample(&mut r));
                        if let Some(v) = orthogonalize(g, &fixed) {
                            break v;
                        }
                    }
                };
                v.transpose()
            })
            .collect();
        let m = DMatrix::from_rows(&rows);
        SaeDictionary::new(m.clone(), m).expect("unit rows")
    }

    fn features(&self, id: &str) -> Result<&ConceptFeatures> {
        self.concepts
            .get(id)
            .ok_or_else(|| SteeringError::UnknownConcept(id.to_string()))
    }

    fn content(&self, t: &Triplet) -> Result<DVector<f64>> {
        let mut sum = DVector::zeros(self.params.hidden);
        for id in [&t.reference, &t.opt1, &t.opt2] {
            sum += &self.features(id)?.content;
        }
        Ok(sum / 3.0)
    }

    /// The dimension an answered example reveals, if any.
    fn inferred_dimension(&self, t: &Triplet, answer: &str) -> Option<Dimension> {
        if answer == t.kind_answer {
            Some(Dimension::Kind)
        } else if answer == t.size_answer {
            Some(Dimension::Size)
        } else {
            None
        }
    }

    fn context(&self, spec: &PromptSpec) -> DVector<f64> {
        let mut ctx = DVector::zeros(self.params.hidden);
        if let Some(d) = spec.dimension.scored() {
            ctx.axpy(self.params.instruction_strength, self.direction(d), 1.0);
        }
        let per_example = 1.0 / IN_CONTEXT_EXAMPLES as f64;
        for ex in &spec.context {
            if let Some(d) = self.inferred_dimension(&ex.triplet, &ex.answer) {
                ctx.axpy(per_example, self.direction(d), 1.0);
            }
        }
        ctx
    }

    /// Answer `t` along `d` from concept features. Ties go to `opt1`.
    fn readout_choice<'t>(&self, t: &'t Triplet, d: Dimension) -> Result<&'t str> {
        let r = self.features(&t.reference)?;
        let a = self.features(&t.opt1)?;
        let b = self.features(&t.opt2)?;
        let first = match d {
            Dimension::Kind => {
                let (ka, kb) = (a.kind == r.kind, b.kind == r.kind);
                ka || !kb
            }
            Dimension::Size => (a.log_size - r.log_size).abs() <= (b.log_size - r.log_size).abs(),
        };
        Ok(if first { &t.opt1 } else { &t.opt2 })
    }
}

impl Agent for ToyAgent {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn layers(&self) -> usize {
        self.params.layers
    }

    fn hidden(&self) -> usize {
        self.params.hidden
    }

    fn forward(&self, spec: &PromptSpec, steering: Option<&SteeringVector>) -> Result<ActivationTrace> {
        spec.validate()?;
        if let Some(v) = steering {
            check_vector(self, v)?;
        }
        let content = self.content(&spec.query)?;
        let context = self.context(spec);

        let mut residuals = DMatrix::zeros(self.params.layers, self.params.hidden);
        let mut r = DVector::zeros(self.params.hidden);
        for l in 0..self.params.layers {
            r += &self.drift[l];
            if l == 0 {
                r += &self.base;
                r += &content;
            }
            if l == self.params.injection_layer {
                r += &context;
            }
            if let Some(v) = steering.filter(|v| v.layer == l) {
                match v.apply_mode {
                    ApplyMode::PatchReplace => r.copy_from(&v.vector),
                    ApplyMode::ResidualAdd => r += &v.vector,
                }
            }
            residuals.set_row(l, &r.transpose());
        }

        let kind_proj = r.dot(&self.c_kind);
        let size_proj = r.dot(&self.c_size);
        let read = if size_proj > kind_proj {
            Dimension::Size
        } else if kind_proj > size_proj {
            Dimension::Kind
        } else {
            self.params.default_direction
        };
        let choice = self.readout_choice(&spec.query, read)?.to_string();

        Ok(ActivationTrace {
            prompt: build_prompt(spec),
            mode: spec.mode,
            dimension: spec.dimension,
            residuals,
            choice,
            logit_margin: (size_proj - kind_proj).abs(),
        })
    }
}

/// Convenience for tests and the CLI: neutral zero-shot prompt.
pub fn neutral_prompt(t: &Triplet) -> PromptSpec {
    PromptSpec::zero_shot(t, TaskDimension::Neutral)
}
