//! Construction and application of steering interventions.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompt::{ContextExample, PromptMode, PromptSpec, IN_CONTEXT_EXAMPLES};
use super::{check_vector, ActivationTrace, Agent, Result, SteeringError, SteeringVector, VectorMethod};
use crate::concepts::{ground_truth_answer, Dimension, TaskDimension, Triplet};

/// Apply `v` to a zero-shot prompt and return the steered trace.
pub fn apply_steering(agent: &dyn Agent, spec: &PromptSpec, v: &SteeringVector) -> Result<ActivationTrace> {
    if spec.mode != PromptMode::ZeroShot {
        return Err(SteeringError::NotZeroShot);
    }
    check_vector(agent, v)?;
    agent.forward(spec, Some(v))
}

fn check_layer(agent: &dyn Agent, layer: usize) -> Result<()> {
    if layer >= agent.layers() {
        return Err(SteeringError::LayerOutOfRange {
            layer,
            layers: agent.layers(),
        });
    }
    Ok(())
}

/// The task-vector source prompt: `IN_CONTEXT_EXAMPLES` triplets answered
/// along `d` under a neutral instruction, queried on the next triplet.
pub fn task_vector_prompt(d: Dimension, train: &[Triplet]) -> Result<PromptSpec> {
    let needed = IN_CONTEXT_EXAMPLES + 1;
    if train.len() < needed {
        return Err(SteeringError::InsufficientTraining {
            needed,
            got: train.len(),
        });
    }
    let context = train[..IN_CONTEXT_EXAMPLES]
        .iter()
        .map(|t| ContextExample::answered(t, d))
        .collect();
    PromptSpec::in_context(context, &train[IN_CONTEXT_EXAMPLES], TaskDimension::Neutral)
}

/// Final-token residual at `layer` of the in-context prompt built from
/// `train`. Only the first `IN_CONTEXT_EXAMPLES + 1` triplets are used.
pub fn extract_task_vector(agent: &dyn Agent, d: Dimension, train: &[Triplet], layer: usize) -> Result<SteeringVector> {
    check_layer(agent, layer)?;
    let spec = task_vector_prompt(d, train)?;
    let trace = agent.forward(&spec, None)?;
    Ok(SteeringVector::new(trace.layer(layer)?, layer, VectorMethod::TaskVector, d)
        .with_trained_on(&train[..=IN_CONTEXT_EXAMPLES]))
}

fn group_dimension(traces: &[ActivationTrace]) -> Result<TaskDimension> {
    let first = traces.first().ok_or(SteeringError::EmptyGroup)?.dimension;
    if traces.iter().any(|t| t.dimension != first) {
        return Err(SteeringError::InconsistentDimension);
    }
    Ok(first)
}

fn mean_at(traces: &[ActivationTrace], layer: usize) -> Result<DVector<f64>> {
    let mut sum = traces[0].layer(layer)?;
    for t in &traces[1..] {
        sum += t.layer(layer)?;
    }
    Ok(sum / traces.len() as f64)
}

/// Mean layer-`layer` residual of `traces_d` minus that of `traces_other`.
pub fn compute_diffmean(traces_d: &[ActivationTrace], traces_other: &[ActivationTrace], layer: usize) -> Result<SteeringVector> {
    let d = group_dimension(traces_d)?;
    let other = group_dimension(traces_other)?;
    let d = d.scored().ok_or(SteeringError::InconsistentDimension)?;
    if other == d.into() {
        return Err(SteeringError::InconsistentDimension);
    }
    let v = mean_at(traces_d, layer)? - mean_at(traces_other, layer)?;
    Ok(SteeringVector::new(v, layer, VectorMethod::Diffmean, d))
}

/// Sparse-autoencoder dictionary: `features × hidden` encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeDictionary {
    encoder: DMatrix<f64>,
    decoder: DMatrix<f64>,
}

impl SaeDictionary {
    /// Validates shapes and normalizes decoder rows to unit norm.
    pub fn new(encoder: DMatrix<f64>, mut decoder: DMatrix<f64>) -> Result<Self> {
        if encoder.shape() != decoder.shape() {
            return Err(SteeringError::Format(format!(
                "encoder {:?} and decoder {:?} shapes differ",
                encoder.shape(),
                decoder.shape()
            )));
        }
        if encoder.nrows() == 0 {
            return Err(SteeringError::Format("dictionary has no features".into()));
        }
        for (i, mut row) in decoder.row_iter_mut().enumerate() {
            let n = row.norm();
            if !(n > 0.0) || !n.is_finite() {
                return Err(SteeringError::Format(format!("decoder row {i} has zero or non-finite norm")));
            }
            row /= n;
        }
        Ok(SaeDictionary { encoder, decoder })
    }

    pub fn features(&self) -> usize {
        self.encoder.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.encoder.ncols()
    }

    pub fn encoder(&self) -> &DMatrix<f64> {
        &self.encoder
    }

    pub fn decoder(&self) -> &DMatrix<f64> {
        &self.decoder
    }

    /// Rectified feature activations for one residual vector.
    pub fn encode(&self, residual: &DVector<f64>) -> DVector<f64> {
        (&self.encoder * residual).map(|a| a.max(0.0))
    }

    pub fn decoder_row(&self, feature: usize) -> DVector<f64> {
        self.decoder.row(feature).transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeSelection {
    pub feature: usize,
    pub mean_activations: DVector<f64>,
    pub alpha: f64,
    pub vector: SteeringVector,
}

/// Pick the feature with the highest mean rectified activation over
/// `traces` at `layer` (ties to the lowest index) and steer along its
/// decoder row scaled by `alpha`. Without `alpha`, the mean norm of the
/// traces' layer residuals is used.
pub fn sae_select_and_steer(
    traces: &[ActivationTrace],
    dict: &SaeDictionary,
    layer: usize,
    alpha: Option<f64>,
) -> Result<SaeSelection> {
    let d = group_dimension(traces)?
        .scored()
        .ok_or(SteeringError::InconsistentDimension)?;
    let hidden = traces[0].hidden();
    if dict.hidden() != hidden {
        return Err(SteeringError::ShapeMismatch {
            expected: hidden,
            got: dict.hidden(),
        });
    }
    let mut mean = DVector::zeros(dict.features());
    let mut norm_sum = 0.0;
    for t in traces {
        let r = t.layer(layer)?;
        norm_sum += r.norm();
        mean += dict.encode(&r);
    }
    mean /= traces.len() as f64;

    let mut feature = 0;
    for (i, &a) in mean.iter().enumerate() {
        if a > mean[feature] {
            feature = i;
        }
    }
    if !(mean[feature] > 0.0) {
        return Err(SteeringError::AllFeaturesInactive);
    }
    let alpha = alpha.unwrap_or(norm_sum / traces.len() as f64);
    let vector = SteeringVector::new(dict.decoder_row(feature) * alpha, layer, VectorMethod::Sae, d);
    Ok(SaeSelection {
        feature,
        mean_activations: mean,
        alpha,
        vector,
    })
}

/// How a per-layer steering vector is built from training prompts.
#[derive(Debug, Clone)]
pub enum VectorRecipe {
    TaskVector,
    DiffMean,
    Sae { dictionary: SaeDictionary, alpha: Option<f64> },
}

impl VectorRecipe {
    pub fn method(&self) -> VectorMethod {
        match self {
            VectorRecipe::TaskVector => VectorMethod::TaskVector,
            VectorRecipe::DiffMean => VectorMethod::Diffmean,
            VectorRecipe::Sae { .. } => VectorMethod::Sae,
        }
    }
}

fn zero_shot_traces(agent: &dyn Agent, triplets: &[Triplet], d: TaskDimension) -> Result<Vec<ActivationTrace>> {
    triplets
        .par_iter()
        .map(|t| agent.forward(&PromptSpec::zero_shot(t, d), None))
        .collect()
}

/// Training traces computed once and reused for every candidate layer.
pub struct VectorSource<'a> {
    recipe: &'a VectorRecipe,
    dimension: Dimension,
    traces_d: Vec<ActivationTrace>,
    traces_other: Vec<ActivationTrace>,
    trained_on: BTreeSet<String>,
}

impl<'a> VectorSource<'a> {
    pub fn new(agent: &dyn Agent, recipe: &'a VectorRecipe, d: Dimension, train: &[Triplet]) -> Result<Self> {
        if train.is_empty() {
            return Err(SteeringError::EmptyGroup);
        }
        let (traces_d, traces_other, used) = match recipe {
            VectorRecipe::TaskVector => {
                let spec = task_vector_prompt(d, train)?;
                (vec![agent.forward(&spec, None)?], Vec::new(), &train[..=IN_CONTEXT_EXAMPLES])
            }
            VectorRecipe::DiffMean => (
                zero_shot_traces(agent, train, d.into())?,
                zero_shot_traces(agent, train, d.contrast().into())?,
                train,
            ),
            VectorRecipe::Sae { dictionary, .. } => {
                if dictionary.hidden() != agent.hidden() {
                    return Err(SteeringError::ShapeMismatch {
                        expected: agent.hidden(),
                        got: dictionary.hidden(),
                    });
                }
                (zero_shot_traces(agent, train, d.into())?, Vec::new(), train)
            }
        };
        Ok(VectorSource {
            recipe,
            dimension: d,
            traces_d,
            traces_other,
            trained_on: used.iter().map(|t| t.id.clone()).collect(),
        })
    }

    pub fn vector_at(&self, layer: usize) -> Result<SteeringVector> {
        let mut v = match self.recipe {
            VectorRecipe::TaskVector => SteeringVector::new(
                self.traces_d[0].layer(layer)?,
                layer,
                VectorMethod::TaskVector,
                self.dimension,
            ),
            VectorRecipe::DiffMean => compute_diffmean(&self.traces_d, &self.traces_other, layer)?,
            VectorRecipe::Sae { dictionary, alpha } => {
                sae_select_and_steer(&self.traces_d, dictionary, layer, *alpha)?.vector
            }
        };
        v.trained_on = self.trained_on.clone();
        Ok(v)
    }

    pub fn traces(&self) -> &[ActivationTrace] {
        &self.traces_d
    }
}

/// Fraction of `heldout` triplets on which neutral zero-shot prompts
/// steered by `v` choose the ground truth of `v.dimension`.
pub fn heldout_accuracy(agent: &dyn Agent, v: &SteeringVector, heldout: &[Triplet]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(SteeringError::EmptyGroup);
    }
    let correct: Vec<bool> = heldout
        .par_iter()
        .map(|t| {
            let trace = apply_steering(agent, &PromptSpec::zero_shot(t, TaskDimension::Neutral), v)?;
            Ok(trace.choice == ground_truth_answer(t, v.dimension))
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / heldout.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub layer: usize,
    pub table: Vec<LayerScore>,
    pub vector: SteeringVector,
}

pub(crate) fn check_disjoint(train: &BTreeSet<String>, heldout: &[Triplet]) -> Result<()> {
    match heldout.iter().find(|t| train.contains(&t.id)) {
        Some(t) => Err(SteeringError::SplitOverlap(t.id.clone())),
        None => Ok(()),
    }
}

/// Evaluate the recipe at every candidate layer on held-out triplets and
/// keep the most accurate layer (ties to the lowest layer index).
pub fn select_layer(
    agent: &dyn Agent,
    recipe: &VectorRecipe,
    d: Dimension,
    candidate_layers: &[usize],
    train: &[Triplet],
    heldout: &[Triplet],
) -> Result<LayerSelection> {
    if candidate_layers.is_empty() {
        return Err(SteeringError::NoCandidates);
    }
    for &l in candidate_layers {
        check_layer(agent, l)?;
    }
    let source = VectorSource::new(agent, recipe, d, train)?;
    check_disjoint(&source.trained_on, heldout)?;

    let mut layers = candidate_layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    let mut table = Vec::with_capacity(layers.len());
    let mut best: Option<(f64, SteeringVector)> = None;
    for l in layers {
        let v = source.vector_at(l)?;
        let accuracy = heldout_accuracy(agent, &v, heldout)?;
        table.push(LayerScore { layer: l, accuracy });
        if best.as_ref().is_none_or(|(a, _)| accuracy > *a) {
            best = Some((accuracy, v));
        }
    }
    let (_, vector) = best.expect("at least one candidate");
    Ok(LayerSelection {
        layer: vector.layer,
        table,
        vector,
    })
}

/// Rescale an SAE steering vector by each multiplier and keep the most
/// accurate on `heldout` (ties to the smallest multiplier).
pub fn tune_sae_alpha(agent: &dyn Agent, v: &SteeringVector, multipliers: &[f64], heldout: &[Triplet]) -> Result<(f64, SteeringVector)> {
    let mut sorted = multipliers.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64, SteeringVector)> = None;
    for m in sorted {
        let mut candidate = v.clone();
        candidate.vector *= m;
        let acc = heldout_accuracy(agent, &candidate, heldout)?;
        if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
            best = Some((acc, m, candidate));
        }
    }
    let (_, m, v) = best.ok_or(SteeringError::NoCandidates)?;
    Ok((m, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{generate_triplets, ConceptSet, TripletSet};
    use crate::steering::toy::{ToyAgent, ToyParams};
    use crate::steering::cosine;

    fn setup() -> (ToyAgent, TripletSet) {
        let set = ConceptSet::standin();
        (
            ToyAgent::new(ToyParams::default(), &set).unwrap(),
            generate_triplets(&set, 1.5, 4, 600).unwrap(),
        )
    }

    fn traces(agent: &ToyAgent, ts: &[Triplet], d: TaskDimension) -> Vec<ActivationTrace> {
        zero_shot_traces(agent, ts, d).unwrap()
    }

    #[test]
    fn task_vector_matches_closed_form() {
        let (agent, ts) = setup();
        let inj = agent.params().injection_layer;
        for l in inj..agent.layers() {
            let v = extract_task_vector(&agent, Dimension::Size, ts.triplets(), l).unwrap();
            let expected = agent.base_at(l) + agent.direction(Dimension::Size);
            assert!(cosine(&v.vector, &expected) >= 0.99);
            assert_eq!(v.apply_mode, super::super::ApplyMode::PatchReplace);
            assert_eq!(v.trained_on.len(), IN_CONTEXT_EXAMPLES + 1);
        }
        let a = extract_task_vector(&agent, Dimension::Size, &ts.triplets()[..16], inj).unwrap();
        let b = extract_task_vector(&agent, Dimension::Size, &ts.triplets()[16..32], inj).unwrap();
        assert!(cosine(&a.vector, &b.vector) >= 0.99);
        assert!(matches!(
            extract_task_vector(&agent, Dimension::Size, ts.triplets(), 8),
            Err(SteeringError::LayerOutOfRange { .. })
        ));
        assert!(matches!(
            extract_task_vector(&agent, Dimension::Size, &ts.triplets()[..10], 3),
            Err(SteeringError::InsufficientTraining { needed: 16, got: 10 })
        ));
    }

    #[test]
    fn diffmean_recovers_planted_direction() {
        let (agent, ts) = setup();
        let train = &ts.triplets()[..50];
        let size = traces(&agent, train, TaskDimension::Size);
        let kind = traces(&agent, train, TaskDimension::Kind);
        let v = compute_diffmean(&size, &kind, 5).unwrap();
        let planted = agent.direction(Dimension::Size) - agent.direction(Dimension::Kind);
        assert!(cosine(&v.vector, &planted) >= 0.99);

        // Different prompt sets per group still recover the direction.
        let kind_other = traces(&agent, &ts.triplets()[50..100], TaskDimension::Kind);
        let v = compute_diffmean(&size, &kind_other, 5).unwrap();
        assert!(cosine(&v.vector, &planted) >= 0.99);

        let forward = compute_diffmean(&size, &kind, 5).unwrap();
        let back = compute_diffmean(&kind, &size, 5).unwrap();
        assert_eq!(back.vector, -forward.vector);
        assert_eq!(back.dimension, Dimension::Kind);
    }

    #[test]
    fn diffmean_definition_and_errors() {
        let (agent, ts) = setup();
        let a = traces(&agent, &ts.triplets()[..3], TaskDimension::Size);
        let b = traces(&agent, &ts.triplets()[3..10], TaskDimension::Kind);
        let v = compute_diffmean(&a, &b, 6).unwrap();
        let mean = |g: &[ActivationTrace]| g.iter().map(|t| t.layer(6).unwrap()).sum::<DVector<f64>>() / g.len() as f64;
        assert!((v.vector.clone() - (mean(&a) - mean(&b))).amax() < 1e-12);

        // Identical residuals in both groups give the zero vector.
        let relabeled: Vec<_> = a
            .iter()
            .map(|t| ActivationTrace {
                dimension: TaskDimension::Kind,
                ..t.clone()
            })
            .collect();
        assert_eq!(compute_diffmean(&a, &relabeled, 6).unwrap().vector.amax(), 0.0);
        assert!(matches!(compute_diffmean(&a, &a, 6), Err(SteeringError::InconsistentDimension)));

        assert!(matches!(compute_diffmean(&[], &b, 0), Err(SteeringError::EmptyGroup)));
        let mut mixed = a.clone();
        mixed.extend(b.iter().cloned());
        assert!(matches!(compute_diffmean(&mixed, &b, 0), Err(SteeringError::InconsistentDimension)));
    }

    #[test]
    fn sae_selects_planted_feature() {
        let (agent, ts) = setup();
        let dict = agent.planted_dictionary(16, 3, 0);
        let size = traces(&agent, &ts.triplets()[..100], TaskDimension::Size);
        let sel = sae_select_and_steer(&size, &dict, 4, None).unwrap();
        assert_eq!(sel.feature, 3);
        let mean_norm = size.iter().map(|t| t.layer(4).unwrap().norm()).sum::<f64>() / 100.0;
        assert!((sel.alpha - mean_norm).abs() < 1e-12);
        assert!((sel.vector.vector.norm() - mean_norm).abs() < 1e-9);
        assert_eq!(sel.vector.apply_mode, super::super::ApplyMode::ResidualAdd);
        let acc = heldout_accuracy(&agent, &sel.vector, &ts.triplets()[100..300]).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn sae_ties_and_inactive_features() {
        let (agent, ts) = setup();
        let size = traces(&agent, &ts.triplets()[..5], TaskDimension::Size);
        let dir = agent.direction(Dimension::Size).transpose();
        let dup = DMatrix::from_rows(&[-dir.clone(), dir.clone(), dir.clone()]);
        let dict = SaeDictionary::new(dup.clone(), dup).unwrap();
        assert_eq!(sae_select_and_steer(&size, &dict, 5, Some(1.0)).unwrap().feature, 1);

        let neg = DMatrix::from_rows(&[-dir.clone(), -dir]);
        let dict = SaeDictionary::new(neg.clone(), neg).unwrap();
        assert!(matches!(
            sae_select_and_steer(&size, &dict, 5, None),
            Err(SteeringError::AllFeaturesInactive)
        ));
        assert!(matches!(
            sae_select_and_steer(&[], &dict, 5, None),
            Err(SteeringError::EmptyGroup)
        ));
        assert!(SaeDictionary::new(DMatrix::zeros(2, 4), DMatrix::zeros(2, 4)).is_err());
        assert!(SaeDictionary::new(DMatrix::zeros(2, 4), DMatrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn apply_steering_contracts() {
        let (agent, ts) = setup();
        let t = &ts.triplets()[0];
        let spec = PromptSpec::zero_shot(t, TaskDimension::Neutral);
        let plain = agent.forward(&spec, None).unwrap();
        let zero = SteeringVector::new(DVector::zeros(agent.hidden()), 2, VectorMethod::Diffmean, Dimension::Size);
        assert_eq!(apply_steering(&agent, &spec, &zero).unwrap(), plain);

        for l in 0..agent.layers() {
            let own = SteeringVector::new(plain.layer(l).unwrap(), l, VectorMethod::TaskVector, Dimension::Size);
            let patched = apply_steering(&agent, &spec, &own).unwrap();
            assert_eq!(patched.choice, plain.choice);
            assert!((patched.residuals.clone() - plain.residuals.clone()).amax() < 1e-12);
        }

        let icl = task_vector_prompt(Dimension::Size, ts.triplets()).unwrap();
        assert!(matches!(apply_steering(&agent, &icl, &zero), Err(SteeringError::NotZeroShot)));
        let mut bad = zero.clone();
        bad.vector[0] = f64::NAN;
        assert!(matches!(apply_steering(&agent, &spec, &bad), Err(SteeringError::NonFiniteVector)));
    }

    #[test]
    fn task_vector_patching_steers_neutral_prompts() {
        let (agent, ts) = setup();
        let inj = agent.params().injection_layer;
        let v = extract_task_vector(&agent, Dimension::Size, &ts.triplets()[..16], inj).unwrap();
        let acc = heldout_accuracy(&agent, &v, &ts.triplets()[16..]).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn layer_selection_finds_injection_layer() {
        let (agent, ts) = setup();
        let inj = agent.params().injection_layer;
        let all: Vec<usize> = (0..agent.layers()).collect();
        let (train, heldout) = ts.triplets().split_at(200);
        for recipe in [
            VectorRecipe::TaskVector,
            VectorRecipe::DiffMean,
            VectorRecipe::Sae {
                dictionary: agent.planted_dictionary(16, 3, 0),
                alpha: None,
            },
        ] {
            let sel = select_layer(&agent, &recipe, Dimension::Size, &all, train, &heldout[..100]).unwrap();
            assert_eq!(sel.layer, inj, "{:?}", recipe.method());
            assert_eq!(sel.table.len(), agent.layers());
            for s in &sel.table {
                if s.layer < inj {
                    assert_eq!(s.accuracy, 0.0);
                } else {
                    assert_eq!(s.accuracy, 1.0);
                }
            }
        }

        let single = select_layer(&agent, &VectorRecipe::DiffMean, Dimension::Size, &[6], train, &heldout[..20]).unwrap();
        assert_eq!(single.layer, 6);
        // Kind is the toy default, so every layer ties and the lowest wins.
        let kind = select_layer(&agent, &VectorRecipe::DiffMean, Dimension::Kind, &[5, 2, 7], train, &heldout[..20]).unwrap();
        assert_eq!(kind.layer, 2);
        assert!(matches!(
            select_layer(&agent, &VectorRecipe::DiffMean, Dimension::Size, &[], train, heldout),
            Err(SteeringError::NoCandidates)
        ));
        assert!(matches!(
            select_layer(&agent, &VectorRecipe::DiffMean, Dimension::Size, &[3], train, &train[..5]),
            Err(SteeringError::SplitOverlap(_))
        ));
    }

    #[test]
    fn alpha_tuning_prefers_smallest_sufficient_multiplier() {
        let (agent, ts) = setup();
        let dir = agent.direction(Dimension::Size).clone();
        let v = SteeringVector::new(dir, 4, VectorMethod::Sae, Dimension::Size);
        // Unit push ties the 0.25 default bias only above multiplier 0.25.
        let (m, tuned) = tune_sae_alpha(&agent, &v, &[4.0, 0.1, 1.0, 2.0], &ts.triplets()[..50]).unwrap();
        assert_eq!(m, 1.0);
        assert!((tuned.vector.norm() - 1.0).abs() < 1e-12);
    }
}
