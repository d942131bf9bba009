//! Procrustes alignment between two embeddings.
//!
//! Both configurations are centered and scaled to unit Frobenius norm; the
//! Procrustes correlation `r` is the nuclear norm of their cross-product
//! matrix and `r²` is reported. Reflections are allowed, since fitted
//! embeddings have arbitrary chirality.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::rng;

pub const DEFAULT_PERMUTATIONS: usize = 999;
pub const MIN_PERMUTATIONS: usize = 99;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    #[error("only {0} concepts in common, need at least 3")]
    TooFewCommon(usize),
    #[error("configuration {0} is degenerate (all points coincide)")]
    DegenerateConfiguration(&'static str),
    #[error("need at least {MIN_PERMUTATIONS} permutations, got {0}")]
    TooFewPermutations(usize),
}

/// Optimal similarity transform mapping `Y` onto `X`:
/// `X ≈ scale · Y · rotation + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesFit {
    pub r2: f64,
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    pub translation: DVector<f64>,
    pub n_common: usize,
    pub common_ids: Vec<String>,
}

impl ProcrustesFit {
    /// Apply the fitted transform to rows of `y`.
    pub fn transform(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y * &self.rotation * self.scale;
        for mut row in out.row_iter_mut() {
            row += self.translation.transpose();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub fit: ProcrustesFit,
    pub p_value: f64,
    pub n_permutations: usize,
    pub x_label: String,
    pub y_label: String,
}

impl AlignmentResult {
    pub fn r2(&self) -> f64 {
        self.fit.r2
    }
}

/// JSON alignment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub x: String,
    pub y: String,
    pub r2: f64,
    pub p_value: f64,
    pub n_common: usize,
    pub n_permutations: usize,
    pub scale: f64,
    pub rotation: Vec<Vec<f64>>,
    pub translation: Vec<f64>,
}

impl From<&AlignmentResult> for AlignmentReport {
    fn from(a: &AlignmentResult) -> Self {
        AlignmentReport {
            x: a.x_label.clone(),
            y: a.y_label.clone(),
            r2: a.fit.r2,
            p_value: a.p_value,
            n_common: a.fit.n_common,
            n_permutations: a.n_permutations,
            scale: a.fit.scale,
            rotation: a.fit.rotation.row_iter().map(|r| r.iter().copied().collect()).collect(),
            translation: a.fit.translation.iter().copied().collect(),
        }
    }
}

/// Rows of both embeddings restricted to shared concept ids, sorted by id.
/// The narrower matrix is zero-padded to the wider one's dimension.
pub fn matched_rows(x: &Embedding, y: &Embedding) -> (Vec<String>, DMatrix<f64>, DMatrix<f64>) {
    let mut common: Vec<String> = x
        .concept_ids
        .iter()
        .filter(|id| y.position(id).is_some())
        .cloned()
        .collect();
    common.sort();
    let dims = x.dims().max(y.dims());
    let gather = |e: &Embedding| {
        DMatrix::from_fn(common.len(), dims, |i, k| {
            let row = e.position(&common[i]).expect("common id");
            if k < e.dims() {
                e.coords[(row, k)]
            } else {
                0.0
            }
        })
    };
    let (mx, my) = (gather(x), gather(y));
    (common, mx, my)
}

struct Normalized {
    matrix: DMatrix<f64>,
    mean: DVector<f64>,
    norm: f64,
}

fn normalize(m: &DMatrix<f64>, which: &'static str) -> Result<Normalized, AlignmentError> {
    let n = m.nrows() as f64;
    let mean: DVector<f64> = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let norm = centered.norm();
    let magnitude = m.amax().max(1.0);
    if !(norm > 1e-12 * magnitude) {
        return Err(AlignmentError::DegenerateConfiguration(which));
    }
    Ok(Normalized {
        matrix: centered / norm,
        mean,
        norm,
    })
}

fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().sum()
}

/// Procrustes fit of matched row matrices (same shape).
pub fn procrustes_matrices(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<ProcrustesFit, AlignmentError> {
    assert_eq!(x.shape(), y.shape(), "matched matrices must share a shape");
    if x.nrows() < 3 {
        return Err(AlignmentError::TooFewCommon(x.nrows()));
    }
    let nx = normalize(x, "X")?;
    let ny = normalize(y, "Y")?;

    let cross = ny.matrix.transpose() * &nx.matrix;
    let svd = cross.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let r = svd.singular_values.sum();
    let rotation = u * v_t;
    let scale = r * nx.norm / ny.norm;
    let translation = &nx.mean - (ny.mean.transpose() * &rotation * scale).transpose();

    Ok(ProcrustesFit {
        r2: (r * r).clamp(0.0, 1.0),
        rotation,
        scale,
        translation,
        n_common: x.nrows(),
        common_ids: Vec::new(),
    })
}

/// Squared Procrustes correlation between two embeddings, matched by id.
pub fn procrustes_r2(x: &Embedding, y: &Embedding) -> Result<ProcrustesFit, AlignmentError> {
    let (ids, mx, my) = matched_rows(x, y);
    if ids.len() < 3 {
        return Err(AlignmentError::TooFewCommon(ids.len()));
    }
    let mut fit = procrustes_matrices(&mx, &my)?;
    fit.common_ids = ids;
    Ok(fit)
}

/// Permutation p-value for matched row matrices: row correspondence of
/// `y` is shuffled `n_permutations` times.
pub fn permutation_test_matrices(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    n_permutations: usize,
    seed: u64,
) -> Result<f64, AlignmentError> {
    if n_permutations < MIN_PERMUTATIONS {
        return Err(AlignmentError::TooFewPermutations(n_permutations));
    }
    if x.nrows() < 3 {
        return Err(AlignmentError::TooFewCommon(x.nrows()));
    }
    let nx = normalize(x, "X")?.matrix;
    let ny = normalize(y, "Y")?.matrix;
    let observed = nuclear_norm(&(ny.transpose() * &nx)).powi(2);

    let n = x.nrows();
    let exceed = (0..n_permutations)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = rng::derived(seed, &["permutation", &i.to_string()]);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted = ny.select_rows(perm.iter());
            let r2 = nuclear_norm(&(permuted.transpose() * &nx)).powi(2);
            r2 >= observed - 1e-12
        })
        .count();
    Ok((1 + exceed) as f64 / (n_permutations + 1) as f64)
}

pub fn permutation_test(x: &Embedding, y: &Embedding, n_permutations: usize, seed: u64) -> Result<f64, AlignmentError> {
    let (ids, mx, my) = matched_rows(x, y);
    if ids.len() < 3 {
        return Err(AlignmentError::TooFewCommon(ids.len()));
    }
    permutation_test_matrices(&mx, &my, n_permutations, seed)
}

/// Procrustes fit plus permutation p-value.
pub fn align(x: &Embedding, y: &Embedding, n_permutations: usize, seed: u64) -> Result<AlignmentResult, AlignmentError> {
    let fit = procrustes_r2(x, y)?;
    let p_value = permutation_test(x, y, n_permutations, seed)?;
    Ok(AlignmentResult {
        fit,
        p_value,
        n_permutations,
        x_label: x.provenance.clone(),
        y_label: y.provenance.clone(),
    })
}

/// Every ordered pair `(row, column)` with `row != column`.
pub fn all_pairs(
    embeddings: &[(String, Embedding)],
    n_permutations: usize,
    seed: u64,
) -> Result<Vec<AlignmentResult>, AlignmentError> {
    let mut out = Vec::new();
    for (xl, x) in embeddings {
        for (yl, y) in embeddings {
            if xl == yl {
                continue;
            }
            let mut a = align(x, y, n_permutations, seed)?;
            a.x_label = xl.clone();
            a.y_label = yl.clone();
            out.push(a);
        }
    }
    Ok(out)
}

/// Long-form CSV: one row per ordered pair.
pub fn pairs_csv(results: &[AlignmentResult]) -> String {
    let mut out = String::from("x,y,r2,p_value,n_common,n_permutations\n");
    for a in results {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{}",
            a.x_label, a.y_label, a.fit.r2, a.p_value, a.fit.n_common, a.n_permutations
        );
    }
    out
}

/// Square r² grid with labels on both axes; the diagonal is 1.
pub fn matrix_csv(labels: &[String], results: &[AlignmentResult]) -> String {
    let lookup: HashMap<(&str, &str), f64> = results
        .iter()
        .map(|a| ((a.x_label.as_str(), a.y_label.as_str()), a.fit.r2))
        .collect();
    let mut out = String::from("embedding");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for x in labels {
        out.push_str(x);
        for y in labels {
            let v = if x == y { 1.0 } else { lookup.get(&(x.as_str(), y.as_str())).copied().unwrap_or(f64::NAN) };
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}
