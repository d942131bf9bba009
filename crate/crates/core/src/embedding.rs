//! Crowd-kernel triplet embedding.
//!
//! Each judgment says that, relative to a reference `r`, the respondent
//! picked option `c` over option `o`. Under the crowd-kernel model the
//! probability of that choice is
//!
//! ```text
//! p = (mu + |r - o|²) / (2 mu + |r - c|² + |r - o|²)
//! ```
//!
//! and [`fit_embedding`] minimizes the summed negative log-likelihood over
//! coordinates with momentum gradient descent from several random starts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::TripletSet;
use crate::judgments::Judgment;
use crate::rng;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no judgments to fit")]
    NoJudgments,
    #[error("concept {0:?} is not part of the embedding")]
    MissingConcept(String),
    #[error("judgment references unknown triplet {0}")]
    UnresolvableTriplet(String),
    #[error("choice {choice:?} is not an option of triplet {triplet}")]
    InvalidChoice { triplet: String, choice: String },
    #[error("loss became non-finite in restart {restart} at iteration {iteration}; lower the learning rate")]
    NonFiniteLoss { restart: usize, iteration: usize },
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub dims: usize,
    pub mu: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            dims: 2,
            mu: 0.05,
            restarts: 5,
            max_iters: 2000,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            convergence_tol: 1e-7,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        if self.dims < 1 {
            return bad("dims must be >= 1");
        }
        if !(self.mu > 0.0) {
            return bad("mu must be > 0");
        }
        if self.restarts < 1 {
            return bad("restarts must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }
}

/// One judgment resolved to row indices: `chosen` was picked over `other`
/// as more similar to `reference`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub reference: usize,
    pub chosen: usize,
    pub other: usize,
}

/// Probability that the item at squared distance `d_chosen_sq` is chosen
/// over the one at `d_other_sq`.
pub fn choice_probability(d_chosen_sq: f64, d_other_sq: f64, mu: f64) -> f64 {
    (mu + d_other_sq) / (2.0 * mu + d_chosen_sq + d_other_sq)
}

fn check_rows(n: usize, observations: &[Observation]) -> Result<(), FitError> {
    for o in observations {
        for i in [o.reference, o.chosen, o.other] {
            if i >= n {
                return Err(FitError::MissingConcept(format!("row {i}")));
            }
        }
    }
    Ok(())
}

fn sq_dist(coords: &[f64], dims: usize, a: usize, b: usize) -> f64 {
    let (ra, rb) = (&coords[a * dims..(a + 1) * dims], &coords[b * dims..(b + 1) * dims]);
    ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nll_flat(coords: &[f64], dims: usize, observations: &[Observation], mu: f64) -> f64 {
    observations
        .iter()
        .map(|o| {
            let dc = sq_dist(coords, dims, o.reference, o.chosen);
            let dd = sq_dist(coords, dims, o.reference, o.other);
            (2.0 * mu + dc + dd).ln() - (mu + dd).ln()
        })
        .sum()
}

/// Loss and gradient in one pass over row-major coordinates.
fn loss_and_grad(coords: &[f64], dims: usize, observations: &[Observation], mu: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for o in observations {
        let dc = sq_dist(coords, dims, o.reference, o.chosen);
        let dd = sq_dist(coords, dims, o.reference, o.other);
        let total = 2.0 * mu + dc + dd;
        loss += total.ln() - (mu + dd).ln();
        let g_c = 1.0 / total;
        let g_o = 1.0 / total - 1.0 / (mu + dd);
        for k in 0..dims {
            let r = coords[o.reference * dims + k];
            let diff_c = 2.0 * (r - coords[o.chosen * dims + k]);
            let diff_o = 2.0 * (r - coords[o.other * dims + k]);
            grad[o.reference * dims + k] += g_c * diff_c + g_o * diff_o;
            grad[o.chosen * dims + k] -= g_c * diff_c;
            grad[o.other * dims + k] -= g_o * diff_o;
        }
    }
    loss
}

fn to_row_major(coords: &DMatrix<f64>) -> Vec<f64> {
    let (n, dims) = coords.shape();
    let mut flat = Vec::with_capacity(n * dims);
    for i in 0..n {
        for k in 0..dims {
            flat.push(coords[(i, k)]);
        }
    }
    flat
}

fn from_row_major(flat: &[f64], n: usize, dims: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, dims, flat)
}

/// Summed negative log-likelihood of the observations.
pub fn triplet_nll(coords: &DMatrix<f64>, observations: &[Observation], mu: f64) -> Result<f64, FitError> {
    check_rows(coords.nrows(), observations)?;
    Ok(nll_flat(&to_row_major(coords), coords.ncols(), observations, mu))
}

/// Analytic gradient of [`triplet_nll`] with respect to every coordinate.
pub fn nll_gradient(coords: &DMatrix<f64>, observations: &[Observation], mu: f64) -> Result<DMatrix<f64>, FitError> {
    check_rows(coords.nrows(), observations)?;
    let (n, dims) = coords.shape();
    let flat = to_row_major(coords);
    let mut grad = vec![0.0; flat.len()];
    loss_and_grad(&flat, dims, observations, mu, &mut grad);
    Ok(from_row_major(&grad, n, dims))
}

/// Resolve judgments against a triplet set and a concept ordering.
pub fn resolve_observations(
    concept_ids: &[String],
    judgments: &[Judgment],
    triplets: &TripletSet,
) -> Result<Vec<Observation>, FitError> {
    let index: HashMap<&str, usize> = concept_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let row = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| FitError::MissingConcept(id.to_string()))
    };
    judgments
        .iter()
        .map(|j| {
            let t = triplets
                .get(&j.triplet_id)
                .ok_or_else(|| FitError::UnresolvableTriplet(j.triplet_id.clone()))?;
            let other = t.other_option(&j.choice).ok_or_else(|| FitError::InvalidChoice {
                triplet: t.id.clone(),
                choice: j.choice.clone(),
            })?;
            Ok(Observation {
                reference: row(&t.reference)?,
                chosen: row(&j.choice)?,
                other: row(other)?,
            })
        })
        .collect()
}

/// Draw `count` observations on `coords` from the crowd-kernel model. Each
/// triplet is three distinct rows chosen uniformly; the first option is
/// chosen with the model probability.
pub fn sample_crowd_kernel(coords: &DMatrix<f64>, count: usize, mu: f64, seed: u64) -> Vec<Observation> {
    let n = coords.nrows();
    assert!(n >= 3, "need at least three points");
    let mut rng = rng::derived(seed, &["crowd_kernel_sample"]);
    let sq = |i: usize, j: usize| (coords.row(i) - coords.row(j)).norm_squared();
    (0..count)
        .map(|_| {
            let idx = rand::seq::index::sample(&mut rng, n, 3);
            let (r, a, b) = (idx.index(0), idx.index(1), idx.index(2));
            let p = choice_probability(sq(r, a), sq(r, b), mu);
            if rng.random_bool(p) {
                Observation { reference: r, chosen: a, other: b }
            } else {
                Observation { reference: r, chosen: b, other: a }
            }
        })
        .collect()
}

/// Result of optimizing raw observations.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub coords: DMatrix<f64>,
    pub final_loss: f64,
    pub restart_losses: Vec<f64>,
    /// Accepted-iteration loss trace of the winning restart.
    pub loss_trace: Vec<f64>,
}

struct RestartResult {
    coords: Vec<f64>,
    loss: f64,
    trace: Vec<f64>,
}

/// Momentum gradient descent on the loss divided by judgments per concept,
/// so a given learning rate behaves the same at any judgment count. A step
/// that raises the loss is rejected: the velocity is cleared and the step
/// size halved, so the accepted losses never increase.
fn descend(
    init: Vec<f64>,
    dims: usize,
    observations: &[Observation],
    cfg: &FitConfig,
    restart: usize,
) -> Result<RestartResult, FitError> {
    let scale = (init.len() / dims) as f64 / observations.len() as f64;
    let mut coords = init;
    let mut grad = vec![0.0; coords.len()];
    let mut velocity = vec![0.0; coords.len()];
    let mut candidate = coords.clone();
    let mut candidate_grad = grad.clone();

    let mut loss = loss_and_grad(&coords, dims, observations, cfg.mu, &mut grad);
    if !loss.is_finite() {
        return Err(FitError::NonFiniteLoss { restart, iteration: 0 });
    }
    let mut trace = vec![loss];
    let mut lr = cfg.learning_rate;
    let min_lr = cfg.learning_rate * 1e-12;

    for iteration in 1..=cfg.max_iters {
        for i in 0..coords.len() {
            velocity[i] = cfg.momentum * velocity[i] - lr * scale * grad[i];
            candidate[i] = coords[i] + velocity[i];
        }
        let new_loss = loss_and_grad(&candidate, dims, observations, cfg.mu, &mut candidate_grad);
        if !new_loss.is_finite() || candidate.iter().any(|x| !x.is_finite()) {
            return Err(FitError::NonFiniteLoss { restart, iteration });
        }
        if new_loss > loss {
            velocity.iter_mut().for_each(|v| *v = 0.0);
            lr *= 0.5;
            if lr < min_lr {
                break;
            }
            continue;
        }
        let rel_change = (loss - new_loss) / loss.abs().max(f64::MIN_POSITIVE);
        std::mem::swap(&mut coords, &mut candidate);
        std::mem::swap(&mut grad, &mut candidate_grad);
        loss = new_loss;
        trace.push(loss);
        lr = (lr * 1.1).min(cfg.learning_rate);
        if rel_change < cfg.convergence_tol {
            break;
        }
    }
    Ok(RestartResult { coords, loss, trace })
}

/// Fit `n` points to resolved observations with multiple random restarts.
pub fn fit_observations(n: usize, observations: &[Observation], cfg: &FitConfig) -> Result<FitOutcome, FitError> {
    cfg.validate()?;
    if observations.is_empty() {
        return Err(FitError::NoJudgments);
    }
    check_rows(n, observations)?;
    let dims = cfg.dims;

    let results: Vec<Result<RestartResult, FitError>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = rng::derived(cfg.seed, &["fit_embedding", &restart.to_string()]);
            let init: Vec<f64> = (0..n * dims).map(|_| StandardNormal.sample(&mut rng)).collect();
            descend(init, dims, observations, cfg, restart)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let restart_losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
    let best = restart_losses
        .iter()
        .enumerate()
        .fold(0, |best, (i, &l)| if l < restart_losses[best] { i } else { best });
    let winner = &results[best];
    let mut coords = from_row_major(&winner.coords, n, dims);
    center_columns(&mut coords);
    Ok(FitOutcome {
        coords,
        final_loss: winner.loss,
        restart_losses,
        loss_trace: winner.trace.clone(),
    })
}

pub(crate) fn center_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
}

/// A fitted (or planted) configuration of concepts.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub concept_ids: Vec<String>,
    /// One row per concept, `dims` columns.
    pub coords: DMatrix<f64>,
    pub final_loss: f64,
    pub config: FitConfig,
    pub restart_losses: Vec<f64>,
    pub provenance: String,
    /// Concepts present in the triplet set but never judged.
    pub dropped: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    concept_ids: Vec<String>,
    coords: Vec<Vec<f64>>,
    final_loss: f64,
    config: FitConfig,
    provenance: String,
    #[serde(default)]
    restart_losses: Vec<f64>,
    #[serde(default)]
    dropped: Vec<String>,
}

impl Embedding {
    /// Wrap raw coordinates. Rows are kept as given (not re-centered).
    pub fn from_coords(
        concept_ids: Vec<String>,
        coords: DMatrix<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self, FitError> {
        if concept_ids.len() != coords.nrows() {
            return Err(FitError::Format(format!(
                "{} ids for {} rows",
                concept_ids.len(),
                coords.nrows()
            )));
        }
        let index: HashMap<String, usize> = concept_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        if index.len() != concept_ids.len() {
            return Err(FitError::Format("duplicate concept id".into()));
        }
        Ok(Embedding {
            concept_ids,
            config: FitConfig {
                dims: coords.ncols(),
                ..FitConfig::default()
            },
            coords,
            final_loss: f64::NAN,
            restart_losses: Vec::new(),
            provenance: provenance.into(),
            dropped: Vec::new(),
            index,
        })
    }

    pub fn dims(&self) -> usize {
        self.coords.ncols()
    }

    pub fn len(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, id: &str) -> Option<Vec<f64>> {
        self.position(id)
            .map(|i| self.coords.row(i).iter().copied().collect())
    }

    pub fn squared_distance(&self, a: &str, b: &str) -> Result<f64, FitError> {
        let ia = self.position(a).ok_or_else(|| FitError::MissingConcept(a.into()))?;
        let ib = self.position(b).ok_or_else(|| FitError::MissingConcept(b.into()))?;
        Ok((self.coords.row(ia) - self.coords.row(ib)).norm_squared())
    }

    pub fn to_json(&self) -> String {
        let file = EmbeddingFile {
            concept_ids: self.concept_ids.clone(),
            coords: self
                .coords
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            final_loss: self.final_loss,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            restart_losses: self.restart_losses.clone(),
            dropped: self.dropped.clone(),
        };
        serde_json::to_string_pretty(&file).expect("embedding serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FitError> {
        let file: EmbeddingFile =
            serde_json::from_str(text).map_err(|e| FitError::Format(e.to_string()))?;
        let dims = file.coords.first().map_or(file.config.dims, Vec::len);
        if file.coords.iter().any(|r| r.len() != dims) {
            return Err(FitError::Format("ragged coords".into()));
        }
        let flat: Vec<f64> = file.coords.iter().flatten().copied().collect();
        let coords = DMatrix::from_row_slice(file.coords.len(), dims, &flat);
        let mut e = Embedding::from_coords(file.concept_ids, coords, file.provenance)?;
        e.final_loss = file.final_loss;
        e.config = file.config;
        e.restart_losses = file.restart_losses;
        e.dropped = file.dropped;
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FitError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FitError> {
        Embedding::from_json(&fs::read_to_string(path)?)
    }
}

/// Fit an embedding to judgments. Concepts of `triplets` that no judgment
/// mentions are dropped and listed in [`Embedding::dropped`].
pub fn fit_embedding(judgments: &[Judgment], triplets: &TripletSet, cfg: &FitConfig) -> Result<Embedding, FitError> {
    cfg.validate()?;
    if judgments.is_empty() {
        return Err(FitError::NoJudgments);
    }
    let mut mentioned: BTreeMap<&str, bool> =
        triplets.concept_ids().into_iter().map(|id| (id, false)).collect();
    for j in judgments {
        let t = triplets
            .get(&j.triplet_id)
            .ok_or_else(|| FitError::UnresolvableTriplet(j.triplet_id.clone()))?;
        for id in [&t.reference, &t.opt1, &t.opt2] {
            mentioned.insert(id, true);
        }
    }
    let concept_ids: Vec<String> = mentioned
        .iter()
        .filter(|(_, &m)| m)
        .map(|(id, _)| id.to_string())
        .collect();
    let dropped: Vec<String> = mentioned
        .iter()
        .filter(|(_, &m)| !m)
        .map(|(id, _)| id.to_string())
        .collect();
    for id in &dropped {
        tracing::warn!(concept = %id, "concept has no judgments; dropped from fit");
    }

    let observations = resolve_observations(&concept_ids, judgments, triplets)?;
    let outcome = fit_observations(concept_ids.len(), &observations, cfg)?;
    let mut e = Embedding::from_coords(concept_ids, outcome.coords, "")?;
    e.final_loss = outcome.final_loss;
    e.restart_losses = outcome.restart_losses;
    e.config = cfg.clone();
    e.dropped = dropped;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn obs(r: usize, c: usize, o: usize) -> Observation {
        Observation {
            reference: r,
            chosen: c,
            other: o,
        }
    }

    #[test]
    fn probability_examples() {
        assert_eq!(choice_probability(2.0, 2.0, 0.3), 0.5);
        assert!(close(choice_probability(0.0, 1.0, 0.05), 1.05 / 1.10, 1e-15));
        assert!(close(choice_probability(0.0, 1.0, 0.05), 0.954545, 1e-6));
        assert!(close(choice_probability(1.0, 3.0, 0.05), 0.743902, 1e-6));
        assert!(close(choice_probability(0.0, 1.0, 1e-12), 1.0, 1e-9));
    }

    #[test]
    fn nll_examples() {
        let coords = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        assert_eq!(triplet_nll(&coords, &[], 0.05).unwrap(), 0.0);
        let one = [obs(0, 1, 2)];
        assert!(close(triplet_nll(&coords, &one, 0.05).unwrap(), 2f64.ln(), 1e-15));

        let coords = DMatrix::from_row_slice(3, 2, &[0.3, -0.2, 1.1, 0.4, -0.7, 2.0]);
        let single = [obs(0, 1, 2), obs(1, 2, 0)];
        let double = [single, single].concat();
        let a = triplet_nll(&coords, &single, 0.05).unwrap();
        let b = triplet_nll(&coords, &double, 0.05).unwrap();
        assert!(close(2.0 * a, b, 1e-12));
    }

    #[test]
    fn gradient_rows_and_errors() {
        let coords = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 5.0, 5.0]);
        let g = nll_gradient(&coords, &[], 0.05).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let g = nll_gradient(&coords, &[obs(0, 1, 2)], 0.05).unwrap();
        assert!(g.row(3).iter().all(|&x| x == 0.0));
        assert!(matches!(
            nll_gradient(&coords, &[obs(0, 1, 9)], 0.05),
            Err(FitError::MissingConcept(_))
        ));
    }

    #[test]
    fn equidistant_options_get_equal_gradients() {
        // ref at origin, options mirrored on the x axis.
        let coords = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let g = nll_gradient(&coords, &[obs(0, 1, 2)], 0.05).unwrap();
        // Brute-force oracle: central differences on the two option x coords.
        let h = 1e-6;
        let fd = |row: usize| {
            let mut p = coords.clone();
            p[(row, 0)] += h;
            let mut m = coords.clone();
            m[(row, 0)] -= h;
            (triplet_nll(&p, &[obs(0, 1, 2)], 0.05).unwrap()
                - triplet_nll(&m, &[obs(0, 1, 2)], 0.05).unwrap())
                / (2.0 * h)
        };
        assert!(close(g[(1, 0)], fd(1), 1e-7));
        assert!(close(g[(2, 0)], fd(2), 1e-7));
        // Descent pulls the chosen option (x = 1) toward the reference and
        // pushes the other (x = -1) away: both steps are in -x. With
        // d_c = d_o the two magnitudes coincide at 2/S.
        assert!(g[(1, 0)] > 0.0);
        assert!(g[(2, 0)] > 0.0);
        assert!(close(g[(1, 0)], g[(2, 0)], 1e-12));
        assert!(close(g[(1, 0)], 2.0 / (2.0 * 0.05 + 2.0), 1e-12));
        assert!(g[(1, 1)].abs() < 1e-15 && g[(2, 1)].abs() < 1e-15);
        assert!(g[(0, 0)].abs() > 0.0);
        assert!(close(g.row(0).sum() + g.row(1).sum() + g.row(2).sum(), 0.0, 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        for cfg in [
            FitConfig { dims: 0, ..FitConfig::default() },
            FitConfig { mu: 0.0, ..FitConfig::default() },
            FitConfig { restarts: 0, ..FitConfig::default() },
            FitConfig { momentum: 1.0, ..FitConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(FitError::InvalidConfig(_))));
        }
    }

    #[test]
    fn divergence_surfaces_as_non_finite_loss() {
        let observations = [obs(0, 1, 2), obs(1, 0, 2), obs(2, 1, 0)];
        let cfg = FitConfig {
            learning_rate: 1e300,
            momentum: 0.0,
            restarts: 1,
            ..FitConfig::default()
        };
        assert!(matches!(
            fit_observations(3, &observations, &cfg),
            Err(FitError::NonFiniteLoss { .. })
        ));
        assert!(matches!(
            fit_observations(3, &[], &FitConfig::default()),
            Err(FitError::NoJudgments)
        ));
    }

    #[test]
    fn accepted_losses_never_increase() {
        let observations: Vec<_> = (0..6)
            .flat_map(|r| (0..6).flat_map(move |c| (0..6).map(move |o| (r, c, o))))
            .filter(|&(r, c, o)| r != c && r != o && c < o)
            .map(|(r, c, o)| if (r + c + o) % 3 == 0 { obs(r, o, c) } else { obs(r, c, o) })
            .collect();
        let cfg = FitConfig {
            restarts: 1,
            max_iters: 500,
            learning_rate: 0.5,
            ..FitConfig::default()
        };
        let out = fit_observations(6, &observations, &cfg).unwrap();
        assert!(out.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.final_loss, *out.loss_trace.last().unwrap());
    }

    #[test]
    fn fitted_coords_are_centered_and_loss_is_min_restart() {
        let observations = [obs(0, 1, 2), obs(3, 2, 1), obs(1, 0, 3), obs(2, 3, 0)];
        let out = fit_observations(4, &observations, &FitConfig::default()).unwrap();
        for col in out.coords.column_iter() {
            assert!(col.sum().abs() < 1e-9);
        }
        let min = out.restart_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.final_loss, min);
        assert_eq!(out.restart_losses.len(), 5);
    }

    #[test]
    fn contradictory_pair_respects_lower_bound() {
        // Both options chosen once on the same comparison: the loss is
        // -ln p - ln(1 - p) >= 2 ln 2, attained when the options are equidistant.
        let observations = [obs(0, 1, 2), obs(0, 2, 1)];
        let out = fit_observations(3, &observations, &FitConfig::default()).unwrap();
        assert!(out.final_loss.is_finite());
        assert!(out.final_loss >= 2.0 * 2f64.ln() - 1e-12);

        // 1-D grid brute force over option positions (ref at 0).
        let mut grid_min = f64::INFINITY;
        for i in -40..=40 {
            for k in -40..=40 {
                let c = DMatrix::from_row_slice(3, 1, &[0.0, i as f64 * 0.05, k as f64 * 0.05]);
                grid_min = grid_min.min(triplet_nll(&c, &observations, 0.05).unwrap());
            }
        }
        assert!(close(grid_min, 2.0 * 2f64.ln(), 1e-12));
        assert!(out.final_loss <= grid_min + 1e-6);
    }

    #[test]
    fn embedding_file_round_trip() {
        let coords = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 2.0, 3.0, 4.5, -1.25]);
        let mut e = Embedding::from_coords(vec!["a".into(), "b".into(), "c".into()], coords, "test").unwrap();
        e.final_loss = 1.5;
        let back = Embedding::from_json(&e.to_json()).unwrap();
        assert_eq!(back.coords, e.coords);
        assert_eq!(back.concept_ids, e.concept_ids);
        assert_eq!(back.provenance, "test");
        assert_eq!(back.squared_distance("a", "b").unwrap(), 8.0);
    }
}
