//! Judgments, reference agents and accuracy statistics.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{ground_truth_answer, Dimension, TaskDimension, Triplet, TripletSet};
use crate::embedding::Embedding;
use crate::rng;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum JudgmentError {
    #[error("no judgments left after filtering")]
    EmptyAfterFilter,
    #[error("judgment references unknown triplet {0}")]
    UnresolvableTriplet(String),
    #[error("concept {0:?} missing from embedding")]
    MissingConcept(String),
    #[error("choice {choice:?} is not an option of triplet {triplet}")]
    InvalidChoice { triplet: String, choice: String },
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub triplet_id: String,
    pub dimension: TaskDimension,
    pub choice: String,
    pub agent_tag: String,
    pub session_id: Option<String>,
    pub ts: DateTime<Utc>,
    /// Client-measured response time, human sessions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl Judgment {
    pub fn new(triplet_id: impl Into<String>, dimension: TaskDimension, choice: impl Into<String>, agent_tag: impl Into<String>) -> Self {
        Judgment {
            triplet_id: triplet_id.into(),
            dimension,
            choice: choice.into(),
            agent_tag: agent_tag.into(),
            session_id: None,
            ts: simulated_timestamp(0),
            latency_ms: None,
        }
    }
}

/// Logical clock for simulated agents: the Unix epoch plus `index` seconds.
/// Keeps simulated judgment files byte-reproducible.
pub fn simulated_timestamp(index: usize) -> DateTime<Utc> {
    Utc.timestamp_opt(index as i64, 0).single().expect("in range")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub condition: String,
    pub method: String,
    pub model: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JudgmentSet {
    pub provenance: Provenance,
    pub judgments: Vec<Judgment>,
}

impl JudgmentSet {
    pub fn new(provenance: Provenance, judgments: Vec<Judgment>) -> Self {
        JudgmentSet {
            provenance,
            judgments,
        }
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.judgments)
    }

    pub fn parse(source_name: &str, text: &str) -> Result<Self, JudgmentError> {
        let judgments = parse_jsonl(source_name, text)?;
        Ok(JudgmentSet {
            provenance: Provenance {
                condition: source_name.to_string(),
                ..Provenance::default()
            },
            judgments,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), JudgmentError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Load a judgment file; the condition label is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, JudgmentError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        JudgmentSet::parse(&name, &fs::read_to_string(path)?)
    }

    /// Check that every judgment resolves and chooses one of the options.
    pub fn validate(&self, triplets: &TripletSet) -> Result<(), JudgmentError> {
        for j in &self.judgments {
            resolve(j, triplets)?;
        }
        Ok(())
    }
}

pub fn to_jsonl(judgments: &[Judgment]) -> String {
    let mut out = String::new();
    for j in judgments {
        out.push_str(&serde_json::to_string(j).expect("judgment serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(source_name: &str, text: &str) -> Result<Vec<Judgment>, JudgmentError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| JudgmentError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn resolve<'a>(j: &Judgment, triplets: &'a TripletSet) -> Result<&'a Triplet, JudgmentError> {
    let t = triplets
        .get(&j.triplet_id)
        .ok_or_else(|| JudgmentError::UnresolvableTriplet(j.triplet_id.clone()))?;
    if !t.is_option(&j.choice) {
        return Err(JudgmentError::InvalidChoice {
            triplet: t.id.clone(),
            choice: j.choice.clone(),
        });
    }
    Ok(t)
}

/// Responder that answers by ground truth, flipping with probability
/// `noise_p`. Deterministic per `(triplet, dimension, seed)`.
pub fn oracle_judge(t: &Triplet, dimension: Dimension, noise_p: f64, seed: u64) -> Judgment {
    let mut rng = rng::derived(seed, &["oracle", &t.id, dimension.as_str()]);
    let truth = ground_truth_answer(t, dimension);
    let flip = rng.random::<f64>() < noise_p;
    let choice = if flip {
        t.other_option(truth).expect("answer is an option")
    } else {
        truth
    };
    Judgment::new(&t.id, dimension.into(), choice, format!("oracle:{dimension}:p{noise_p}"))
}

/// Responder that picks either option with equal probability.
pub fn uniform_judge(t: &Triplet, dimension: TaskDimension, seed: u64) -> Judgment {
    let mut rng = rng::derived(seed, &["uniform", &t.id]);
    let choice = if rng.random_bool(0.5) { &t.opt1 } else { &t.opt2 };
    Judgment::new(&t.id, dimension, choice, "uniform")
}

/// Run a per-triplet responder over a whole set, stamping logical times.
pub fn judge_all(triplets: &TripletSet, mut judge: impl FnMut(&Triplet) -> Judgment) -> Vec<Judgment> {
    triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut j = judge(t);
            j.ts = simulated_timestamp(i);
            j
        })
        .collect()
}

/// Binomial proportion with a Wilson score interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Task dimension of the scored judgments; `None` when all were pooled.
    pub task: Option<TaskDimension>,
    /// Ground truth scored against; `None` when scored against an embedding.
    pub scoring: Option<Dimension>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval for `correct` successes out of `n` trials.
pub fn wilson_interval(correct: usize, n: usize, z: f64) -> (f64, f64) {
    assert!(n > 0 && correct <= n);
    let n_f = n as f64;
    let p = correct as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let low = (center - half).clamp(0.0, 1.0).min(p);
    let high = (center + half).clamp(0.0, 1.0).max(p);
    (low, high)
}

impl AccuracyReport {
    pub fn from_counts(correct: usize, n: usize) -> Result<Self, JudgmentError> {
        if n == 0 {
            return Err(JudgmentError::EmptyAfterFilter);
        }
        let (ci_low, ci_high) = wilson_interval(correct, n, Z_95);
        Ok(AccuracyReport {
            task: None,
            scoring: None,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            ci_low,
            ci_high,
        })
    }
}

fn score(
    judgments: &[Judgment],
    triplets: &TripletSet,
    task: TaskDimension,
    scoring: Dimension,
) -> Result<AccuracyReport, JudgmentError> {
    let mut n = 0;
    let mut correct = 0;
    for j in judgments.iter().filter(|j| j.dimension == task) {
        let t = resolve(j, triplets)?;
        n += 1;
        if j.choice == ground_truth_answer(t, scoring) {
            correct += 1;
        }
    }
    let mut report = AccuracyReport::from_counts(correct, n)?;
    report.task = Some(task);
    report.scoring = Some(scoring);
    Ok(report)
}

/// Accuracy of the judgments made under dimension `d` against `d`'s
/// ground truth.
pub fn accuracy(js: &JudgmentSet, ts: &TripletSet, d: Dimension) -> Result<AccuracyReport, JudgmentError> {
    score(&js.judgments, ts, d.into(), d)
}

/// Accuracy of neutral-prompt judgments against the ground truth of `d`.
pub fn neutral_accuracy(js: &JudgmentSet, ts: &TripletSet, d: Dimension) -> Result<AccuracyReport, JudgmentError> {
    score(&js.judgments, ts, TaskDimension::Neutral, d)
}

/// Accuracy for any task dimension, scored against `scoring`.
pub fn accuracy_for(
    js: &JudgmentSet,
    ts: &TripletSet,
    task: TaskDimension,
    scoring: Dimension,
) -> Result<AccuracyReport, JudgmentError> {
    score(&js.judgments, ts, task, scoring)
}

/// The option nearer to the reference in embedding space. Exact ties go
/// to `opt1`.
pub fn predict_from_embedding<'t>(e: &Embedding, t: &'t Triplet) -> Result<&'t str, JudgmentError> {
    let dist = |id: &str| {
        e.squared_distance(&t.reference, id).map_err(|_| {
            let missing = [&t.reference, &t.opt1, &t.opt2]
                .into_iter()
                .find(|c| e.position(c).is_none())
                .cloned()
                .unwrap_or_else(|| id.to_string());
            JudgmentError::MissingConcept(missing)
        })
    };
    let d1 = dist(&t.opt1)?;
    let d2 = dist(&t.opt2)?;
    Ok(if d1 <= d2 { &t.opt1 } else { &t.opt2 })
}

/// How often the embedding's predicted choice agrees with the recorded
/// choice, over all judgments regardless of dimension.
pub fn embedding_predictability(e: &Embedding, js: &JudgmentSet, ts: &TripletSet) -> Result<AccuracyReport, JudgmentError> {
    let mut agree = 0;
    for j in &js.judgments {
        let t = resolve(j, ts)?;
        if predict_from_embedding(e, t)? == j.choice {
            agree += 1;
        }
    }
    AccuracyReport::from_counts(agree, js.judgments.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{generate_triplets, ConceptSet};
    use nalgebra::DMatrix;

    fn triplets(n: usize) -> TripletSet {
        generate_triplets(&ConceptSet::standin(), 1.5, 5, n).unwrap()
    }

    fn set(judgments: Vec<Judgment>) -> JudgmentSet {
        JudgmentSet::new(Provenance::default(), judgments)
    }

    #[test]
    fn oracle_noise_extremes() {
        let ts = triplets(200);
        for t in ts.iter() {
            for d in Dimension::ALL {
                assert_eq!(oracle_judge(t, d, 0.0, 1).choice, ground_truth_answer(t, d));
                assert_ne!(oracle_judge(t, d, 1.0, 1).choice, ground_truth_answer(t, d));
                assert_eq!(oracle_judge(t, d, 0.3, 9), oracle_judge(t, d, 0.3, 9));
            }
        }
    }

    #[test]
    fn oracle_half_noise_is_a_coin() {
        let ts = triplets(2500);
        let mut correct = 0;
        let mut n = 0;
        for seed in 0..4 {
            for t in ts.iter() {
                n += 1;
                if oracle_judge(t, Dimension::Size, 0.5, seed).choice == t.size_answer {
                    correct += 1;
                }
            }
        }
        assert_eq!(n, 10_000);
        let acc = correct as f64 / n as f64;
        assert!((acc - 0.5).abs() < 0.02, "{acc}");
    }

    #[test]
    fn wilson_examples() {
        let r = AccuracyReport::from_counts(100, 100).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.ci_high, 1.0);
        assert!(r.ci_low < 1.0 && r.ci_low > 0.95);

        // Closed form at p = 0.5, n = 2500: width = 2 z sqrt(0.25/n + z²/4n²) / (1 + z²/n).
        let r = AccuracyReport::from_counts(1250, 2500).unwrap();
        let n = 2500.0;
        let z2 = Z_95 * Z_95;
        let width = 2.0 * Z_95 * (0.25 / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
        assert!((r.ci_high - r.ci_low - width).abs() < 1e-12);
        assert!((width - 0.039).abs() < 5e-4);

        let r = AccuracyReport::from_counts(0, 7).unwrap();
        assert_eq!(r.ci_low, 0.0);
        assert!(matches!(AccuracyReport::from_counts(0, 0), Err(JudgmentError::EmptyAfterFilter)));
    }

    #[test]
    fn accuracy_filters_and_errors() {
        let ts = triplets(100);
        let all_correct = set(judge_all(&ts, |t| oracle_judge(t, Dimension::Kind, 0.0, 0)));
        let r = accuracy(&all_correct, &ts, Dimension::Kind).unwrap();
        assert_eq!((r.n, r.correct, r.accuracy, r.ci_high), (100, 100, 1.0, 1.0));
        assert!(matches!(
            accuracy(&all_correct, &ts, Dimension::Size),
            Err(JudgmentError::EmptyAfterFilter)
        ));
        assert!(matches!(
            accuracy(&set(vec![]), &ts, Dimension::Kind),
            Err(JudgmentError::EmptyAfterFilter)
        ));
        let bad = set(vec![Judgment::new("nope", TaskDimension::Kind, "x", "t")]);
        assert!(matches!(
            accuracy(&bad, &ts, Dimension::Kind),
            Err(JudgmentError::UnresolvableTriplet(_))
        ));
    }

    #[test]
    fn neutral_judgments_score_against_both() {
        let ts = triplets(50);
        let js = set(judge_all(&ts, |t| {
            let mut j = oracle_judge(t, Dimension::Kind, 0.0, 0);
            j.dimension = TaskDimension::Neutral;
            j
        }));
        let kind = neutral_accuracy(&js, &ts, Dimension::Kind).unwrap();
        let size = neutral_accuracy(&js, &ts, Dimension::Size).unwrap();
        assert_eq!(kind.accuracy, 1.0);
        assert_eq!(size.accuracy, 0.0);
        assert_eq!(kind.scoring, Some(Dimension::Kind));
        assert_eq!(size.task, Some(TaskDimension::Neutral));
    }

    fn line_embedding(points: &[(&str, f64, f64)]) -> Embedding {
        let flat: Vec<f64> = points.iter().flat_map(|p| [p.1, p.2]).collect();
        Embedding::from_coords(
            points.iter().map(|p| p.0.to_string()).collect(),
            DMatrix::from_row_slice(points.len(), 2, &flat),
            "test",
        )
        .unwrap()
    }

    fn manual_triplet(r: &str, a: &str, b: &str) -> Triplet {
        Triplet {
            id: crate::concepts::triplet_id(r, a, b),
            reference: r.into(),
            opt1: a.into(),
            opt2: b.into(),
            kind_answer: a.into(),
            size_answer: b.into(),
        }
    }

    #[test]
    fn prediction_geometry_and_ties() {
        let e = line_embedding(&[("r", 0.0, 0.0), ("a", 1.0, 0.0), ("b", 3.0, 0.0), ("c", -1.0, 0.0)]);
        assert_eq!(predict_from_embedding(&e, &manual_triplet("r", "a", "b")).unwrap(), "a");
        assert_eq!(predict_from_embedding(&e, &manual_triplet("r", "b", "a")).unwrap(), "a");
        assert_eq!(predict_from_embedding(&e, &manual_triplet("r", "a", "c")).unwrap(), "a");
        assert_eq!(predict_from_embedding(&e, &manual_triplet("r", "c", "a")).unwrap(), "c");
        assert!(matches!(
            predict_from_embedding(&e, &manual_triplet("r", "a", "zz")),
            Err(JudgmentError::MissingConcept(id)) if id == "zz"
        ));
    }

    #[test]
    fn predictability_of_self_generated_and_random_choices() {
        let set_c = ConceptSet::standin();
        let ts = triplets(2000);
        let ids: Vec<String> = set_c.concepts().iter().map(|c| c.id.clone()).collect();
        let mut r = rng::seeded(3);
        let flat: Vec<f64> = (0..ids.len() * 2).map(|_| r.random::<f64>()).collect();
        let e = Embedding::from_coords(ids, DMatrix::from_row_slice(46, 2, &flat), "random").unwrap();

        let own = set(judge_all(&ts, |t| {
            Judgment::new(&t.id, TaskDimension::Neutral, predict_from_embedding(&e, t).unwrap(), "self")
        }));
        assert_eq!(embedding_predictability(&e, &own, &ts).unwrap().accuracy, 1.0);

        let coin = set(judge_all(&ts, |t| uniform_judge(t, TaskDimension::Neutral, 4)));
        let acc = embedding_predictability(&e, &coin, &ts).unwrap().accuracy;
        assert!((acc - 0.5).abs() < 0.04, "{acc}");
    }

    #[test]
    fn file_round_trip() {
        let ts = triplets(20);
        let mut js = set(judge_all(&ts, |t| uniform_judge(t, TaskDimension::Size, 1)));
        js.judgments[0].session_id = Some("s1".into());
        js.judgments[0].latency_ms = Some(812);
        let back = JudgmentSet::parse("x", &js.to_jsonl()).unwrap();
        assert_eq!(back.judgments, js.judgments);
        let first = js.to_jsonl().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"triplet_id\":"));
        assert!(first.contains("\"ts\":\"1970-01-01T00:00:00Z\""));
        back.validate(&ts).unwrap();
    }
}
