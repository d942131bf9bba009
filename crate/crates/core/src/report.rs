//! Report bundle for a run directory.
//!
//! A run directory holds `concepts.jsonl`, `triplets.jsonl`, one judgment
//! file per condition under `judgments/` and one fitted embedding per
//! condition under `embeddings/`, both named `<condition>.*`. The report
//! contains an accuracy table, the all-pairs alignment table and grid, and
//! one SVG scatter per embedding. Output is byte-deterministic.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::alignment::{self, AlignmentError, AlignmentResult};
use crate::concepts::{ConceptError, ConceptSet, Dimension, TaskDimension, TripletSet};
use crate::embedding::{Embedding, FitError};
use crate::judgments::{accuracy_for, AccuracyReport, JudgmentError, JudgmentSet};

pub const CONCEPTS_FILE: &str = "concepts.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const JUDGMENTS_DIR: &str = "judgments";
pub const EMBEDDINGS_DIR: &str = "embeddings";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Concepts(#[from] ConceptError),
    #[error(transparent)]
    Judgments(#[from] JudgmentError),
    #[error(transparent)]
    Embedding(#[from] FitError),
    #[error("alignment of {x} with {y}: {source}")]
    Alignment { x: String, y: String, source: AlignmentError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub condition: String,
    pub report: AccuracyReport,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub accuracy: Vec<AccuracyRow>,
    pub alignment: Vec<AlignmentResult>,
    pub labels: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn alignment_between(&self, x: &str, y: &str) -> Option<&AlignmentResult> {
        self.alignment.iter().find(|a| a.x_label == x && a.y_label == y)
    }

    pub fn accuracy_of(&self, condition: &str, task: TaskDimension, scoring: Dimension) -> Option<&AccuracyReport> {
        self.accuracy
            .iter()
            .find(|r| r.condition == condition && r.report.task == Some(task) && r.report.scoring == Some(scoring))
            .map(|r| &r.report)
    }
}

fn require(path: PathBuf) -> Result<PathBuf, ReportError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ReportError::MissingArtifact(path))
    }
}

/// Stems of files in `dir` with extension `ext`, sorted.
fn stems(dir: &Path, ext: &str) -> Result<Vec<String>, ReportError> {
    let dir = require(dir.to_path_buf())?;
    let mut out: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    out.sort();
    Ok(out)
}

/// Score every condition's judgments against both ground truths, once per
/// task dimension present in the file.
pub fn accuracy_rows(conditions: &[(String, JudgmentSet)], ts: &TripletSet) -> Result<Vec<AccuracyRow>, ReportError> {
    let mut rows = Vec::new();
    for (name, js) in conditions {
        let tasks: BTreeSet<TaskDimension> = js.judgments.iter().map(|j| j.dimension).collect();
        for task in tasks {
            for scoring in Dimension::ALL {
                rows.push(AccuracyRow {
                    condition: name.clone(),
                    report: accuracy_for(js, ts, task, scoring)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("condition,task,scoring,n,correct,accuracy,ci_low,ci_high\n");
    for r in rows {
        let a = &r.report;
        let task = a.task.map_or_else(|| "all".to_string(), |t| t.to_string());
        let scoring = a.scoring.map_or_else(|| "embedding".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{task},{scoring},{},{},{:.6},{:.6},{:.6}",
            r.condition, a.n, a.correct, a.accuracy, a.ci_low, a.ci_high
        );
    }
    out
}

const KIND_COLORS: [&str; 2] = ["#1b9e77", "#d95f02"];

/// Scatter of the first two embedding axes. Points are colored by kind and
/// their radius grows with log size.
pub fn scatter_svg(title: &str, e: &Embedding, concepts: &ConceptSet) -> String {
    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const PAD: f64 = 48.0;
    let kinds = concepts.kinds();
    let x = |i: usize| e.coords[(i, 0)];
    let y = |i: usize| if e.dims() > 1 { e.coords[(i, 1)] } else { 0.0 };
    let range = |f: &dyn Fn(usize) -> f64| {
        let (lo, hi) = (0..e.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| (lo.min(f(i)), hi.max(f(i))));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let (x0, x1) = range(&x);
    let (y0, y1) = range(&y);
    let sizes: Vec<f64> = concepts.concepts().iter().map(|c| c.log_size()).collect();
    let (s0, s1) = sizes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    for (k, kind) in kinds.iter().enumerate() {
        let ly = 40.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{ly:.2}\" r=\"4\" fill=\"{}\"/><text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>",
            W - 110.0,
            KIND_COLORS[k % 2],
            W - 100.0,
            ly + 4.0,
            escape(kind)
        );
    }
    for (i, id) in e.concept_ids.iter().enumerate() {
        let px = PAD + (x(i) - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let py = H - PAD - (y(i) - y0) / (y1 - y0) * (H - 2.0 * PAD);
        let (color, r) = match concepts.get(id) {
            Some(c) => {
                let k = kinds.iter().position(|k| *k == c.kind).unwrap_or(0);
                let t = if s1 > s0 { (c.log_size() - s0) / (s1 - s0) } else { 0.5 };
                (KIND_COLORS[k % 2], 3.0 + 7.0 * t)
            }
            None => ("#777777", 3.0),
        };
        let _ = writeln!(
            out,
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"{r:.2}\" fill=\"{color}\" fill-opacity=\"0.75\"><title>{}</title></circle>",
            escape(id)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Build the report for `run_dir` into `out_dir`.
pub fn build_report(run_dir: &Path, out_dir: &Path, n_permutations: usize, seed: u64) -> Result<ReportBundle, ReportError> {
    let concepts = ConceptSet::load(require(run_dir.join(CONCEPTS_FILE))?)?;
    let ts = TripletSet::load(require(run_dir.join(TRIPLETS_FILE))?)?;
    let judgments_dir = run_dir.join(JUDGMENTS_DIR);
    let embeddings_dir = run_dir.join(EMBEDDINGS_DIR);

    let names = stems(&judgments_dir, "jsonl")?;
    let mut conditions = Vec::new();
    let mut embeddings = Vec::new();
    for name in &names {
        let js = JudgmentSet::load(judgments_dir.join(format!("{name}.jsonl")))?;
        let e = Embedding::load(require(embeddings_dir.join(format!("{name}.json")))?)?;
        conditions.push((name.clone(), js));
        embeddings.push((name.clone(), e));
    }
    // Reference embeddings may exist without judgments in this run.
    for name in stems(&embeddings_dir, "json")? {
        if !names.contains(&name) {
            let e = Embedding::load(embeddings_dir.join(format!("{name}.json")))?;
            embeddings.push((name, e));
        }
    }
    embeddings.sort_by(|a, b| a.0.cmp(&b.0));

    let accuracy = accuracy_rows(&conditions, &ts)?;
    let pairs = alignment::all_pairs(&embeddings, n_permutations, seed).map_err(|source| ReportError::Alignment {
        x: "*".into(),
        y: "*".into(),
        source,
    })?;
    let labels: Vec<String> = embeddings.iter().map(|(n, _)| n.clone()).collect();

    fs::create_dir_all(out_dir.join("plots"))?;
    let mut files = Vec::new();
    let mut write = |rel: String, text: String| -> Result<(), ReportError> {
        let p = out_dir.join(rel);
        fs::write(&p, text)?;
        files.push(p);
        Ok(())
    };
    write("accuracy.csv".into(), accuracy_csv(&accuracy))?;
    write("alignment.csv".into(), alignment::pairs_csv(&pairs))?;
    write("alignment_matrix.csv".into(), alignment::matrix_csv(&labels, &pairs))?;
    for (name, e) in &embeddings {
        write(format!("plots/{name}.svg"), scatter_svg(name, e, &concepts))?;
    }
    Ok(ReportBundle {
        accuracy,
        alignment: pairs,
        labels,
        files,
    })
}
