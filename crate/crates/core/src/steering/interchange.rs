//! File interchange for activations and SAE dictionaries produced by
//! external model harnesses.
//!
//! A trace directory holds one record per prompt: `<stem>.json` with the
//! fields `prompt`, `mode`, `dimension`, `choice`, `layers`, `hidden`, and
//! `<stem>.f32`, a raw little-endian `f32` matrix of shape `layers × hidden`
//! in row-major order. A dictionary is `<stem>.json` (`features`, `hidden`)
//! next to `<stem>.encoder.f32` and `<stem>.decoder.f32`, both
//! `features × hidden`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::methods::SaeDictionary;
use super::prompt::{build_prompt, PromptMode, PromptSpec};
use super::{ActivationTrace, Agent, Result, SteeringError, SteeringVector};
use crate::concepts::TaskDimension;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceSidecar {
    prompt: String,
    mode: PromptMode,
    dimension: TaskDimension,
    choice: String,
    layers: usize,
    hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DictionarySidecar {
    features: usize,
    hidden: usize,
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for row in m.row_iter() {
        for &x in row.iter() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != rows * cols * 4 {
        return Err(SteeringError::Format(format!(
            "{}: expected {} bytes for a {rows}×{cols} f32 matrix, found {}",
            path.display(),
            rows * cols * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SteeringError::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SteeringError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Write `traces` as records `000000`, `000001`, ... under `dir`.
pub fn write_traces(dir: &Path, traces: &[ActivationTrace]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, t) in traces.iter().enumerate() {
        let stem = format!("{i:06}");
        write_json(
            &dir.join(format!("{stem}.json")),
            &TraceSidecar {
                prompt: t.prompt.clone(),
                mode: t.mode,
                dimension: t.dimension,
                choice: t.choice.clone(),
                layers: t.layers(),
                hidden: t.hidden(),
            },
        )?;
        write_matrix(&dir.join(format!("{stem}.f32")), &t.residuals)?;
    }
    Ok(())
}

/// Read every record under `dir`, ordered by file stem.
pub fn read_traces(dir: &Path) -> Result<Vec<ActivationTrace>> {
    let mut sidecars: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    sidecars
        .iter()
        .map(|p| {
            let meta: TraceSidecar = read_json(p)?;
            let residuals = read_matrix(&p.with_extension("f32"), meta.layers, meta.hidden)?;
            Ok(ActivationTrace {
                prompt: meta.prompt,
                mode: meta.mode,
                dimension: meta.dimension,
                residuals,
                choice: meta.choice,
                logit_margin: f64::NAN,
            })
        })
        .collect()
}

fn dictionary_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = path.with_extension("");
    let with = |suffix: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".json"), with(".encoder.f32"), with(".decoder.f32"))
}

/// Write a dictionary; `path` names the sidecar (its extension is ignored).
pub fn write_dictionary(path: &Path, dict: &SaeDictionary) -> Result<()> {
    let (meta, enc, dec) = dictionary_paths(path);
    if let Some(parent) = meta.parent() {
        fs::create_dir_all(parent)?;
    }
    write_json(
        &meta,
        &DictionarySidecar {
            features: dict.features(),
            hidden: dict.hidden(),
        },
    )?;
    write_matrix(&enc, dict.encoder())?;
    write_matrix(&dec, dict.decoder())
}

pub fn read_dictionary(path: &Path) -> Result<SaeDictionary> {
    let (meta, enc, dec) = dictionary_paths(path);
    let m: DictionarySidecar = read_json(&meta)?;
    SaeDictionary::new(
        read_matrix(&enc, m.features, m.hidden)?,
        read_matrix(&dec, m.features, m.hidden)?,
    )
}

/// An agent that answers from recorded traces, keyed by exact prompt text.
/// It cannot be steered: steered conditions need a live model.
#[derive(Debug, Clone)]
pub struct ReplayAgent {
    tag: String,
    layers: usize,
    hidden: usize,
    traces: HashMap<String, ActivationTrace>,
}

impl ReplayAgent {
    pub fn new(tag: impl Into<String>, traces: Vec<ActivationTrace>) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| SteeringError::Format("no trace records".into()))?;
        let (layers, hidden) = (first.layers(), first.hidden());
        let mut map = HashMap::with_capacity(traces.len());
        for t in traces {
            if t.layers() != layers || t.hidden() != hidden {
                return Err(SteeringError::Format(format!(
                    "record for {:?} is {}×{}, expected {layers}×{hidden}",
                    t.prompt,
                    t.layers(),
                    t.hidden()
                )));
            }
            map.insert(t.prompt.clone(), t);
        }
        Ok(ReplayAgent {
            tag: tag.into(),
            layers,
            hidden,
            traces: map,
        })
    }

    pub fn load(tag: impl Into<String>, dir: &Path) -> Result<Self> {
        ReplayAgent::new(tag, read_traces(dir)?)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

impl Agent for ReplayAgent {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn layers(&self) -> usize {
        self.layers
    }

    fn hidden(&self) -> usize {
        self.hidden
    }

    fn forward(&self, spec: &PromptSpec, steering: Option<&SteeringVector>) -> Result<ActivationTrace> {
        if steering.is_some() {
            return Err(SteeringError::Agent("recorded traces cannot be steered".into()));
        }
        let prompt = build_prompt(spec);
        self.traces
            .get(&prompt)
            .cloned()
            .ok_or_else(|| SteeringError::Agent(format!("no recorded trace for prompt ending {:?}", tail(&prompt))))
    }
}

fn tail(s: &str) -> &str {
    let start = s.char_indices().rev().nth(60).map_or(0, |(i, _)| i);
    &s[start..]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{generate_triplets, ConceptSet, Dimension};
    use crate::steering::methods::{compute_diffmean, sae_select_and_steer};
    use crate::steering::{ToyAgent, ToyParams};

    fn toy_traces(agent: &ToyAgent, d: TaskDimension, n: usize) -> Vec<ActivationTrace> {
        let ts = generate_triplets(&ConceptSet::standin(), 1.5, 8, n).unwrap();
        ts.iter()
            .map(|t| agent.forward(&PromptSpec::zero_shot(t, d), None).unwrap())
            .collect()
    }

    #[test]
    fn traces_round_trip_at_f32_precision() {
        let agent = ToyAgent::new(ToyParams::default(), &ConceptSet::standin()).unwrap();
        let traces = toy_traces(&agent, TaskDimension::Size, 5);
        let dir = tempfile::tempdir().unwrap();
        write_traces(dir.path(), &traces).unwrap();
        let bytes = fs::read(dir.path().join("000000.f32")).unwrap();
        assert_eq!(bytes.len(), 8 * 32 * 4);
        assert_eq!(&bytes[..4], &(traces[0].residuals[(0, 0)] as f32).to_le_bytes());
        assert_eq!(&bytes[4..8], &(traces[0].residuals[(0, 1)] as f32).to_le_bytes());

        let back = read_traces(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in traces.iter().zip(&back) {
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.choice, b.choice);
            assert_eq!(a.dimension, b.dimension);
            assert!((&a.residuals - &b.residuals).amax() < 1e-6);
        }
    }

    #[test]
    fn replayed_traces_feed_diffmean() {
        let agent = ToyAgent::new(ToyParams::default(), &ConceptSet::standin()).unwrap();
        let size = toy_traces(&agent, TaskDimension::Size, 60);
        let kind = toy_traces(&agent, TaskDimension::Kind, 60);
        let dir = tempfile::tempdir().unwrap();
        write_traces(&dir.path().join("size"), &size).unwrap();
        write_traces(&dir.path().join("kind"), &kind).unwrap();
        let live = compute_diffmean(&size, &kind, 4).unwrap();
        let replayed = compute_diffmean(
            &read_traces(&dir.path().join("size")).unwrap(),
            &read_traces(&dir.path().join("kind")).unwrap(),
            4,
        )
        .unwrap();
        assert_eq!(replayed.dimension, Dimension::Size);
        assert!((&live.vector - &replayed.vector).amax() < 1e-5);
    }

    #[test]
    fn replay_agent_answers_recorded_prompts_only() {
        let agent = ToyAgent::new(ToyParams::default(), &ConceptSet::standin()).unwrap();
        let ts = generate_triplets(&ConceptSet::standin(), 1.5, 8, 4).unwrap();
        let traces: Vec<_> = ts
            .iter()
            .take(3)
            .map(|t| agent.forward(&PromptSpec::zero_shot(t, TaskDimension::Kind), None).unwrap())
            .collect();
        let replay = ReplayAgent::new("ext", traces.clone()).unwrap();
        assert_eq!((replay.layers(), replay.hidden(), replay.len()), (8, 32, 3));
        let t0 = &ts.triplets()[0];
        let got = replay.forward(&PromptSpec::zero_shot(t0, TaskDimension::Kind), None).unwrap();
        assert_eq!(got.choice, traces[0].choice);
        assert!(replay
            .forward(&PromptSpec::zero_shot(&ts.triplets()[3], TaskDimension::Kind), None)
            .is_err());
        let v = SteeringVector::new(got.layer(0).unwrap(), 0, crate::steering::VectorMethod::Diffmean, Dimension::Kind);
        assert!(replay.forward(&PromptSpec::zero_shot(t0, TaskDimension::Kind), Some(&v)).is_err());
    }

    #[test]
    fn dictionary_round_trip() {
        let agent = ToyAgent::new(ToyParams::default(), &ConceptSet::standin()).unwrap();
        let dict = agent.planted_dictionary(12, 5, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.json");
        write_dictionary(&path, &dict).unwrap();
        assert!(dir.path().join("sae.encoder.f32").exists());
        let back = read_dictionary(&path).unwrap();
        assert_eq!((back.features(), back.hidden()), (12, 32));
        assert!((back.encoder() - dict.encoder()).amax() < 1e-6);
        let traces = toy_traces(&agent, TaskDimension::Size, 40);
        assert_eq!(sae_select_and_steer(&traces, &back, 5, None).unwrap().feature, 5);
    }

    #[test]
    fn truncated_matrix_is_a_format_error() {
        let agent = ToyAgent::new(ToyParams::default(), &ConceptSet::standin()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_traces(dir.path(), &toy_traces(&agent, TaskDimension::Size, 1)).unwrap();
        fs::write(dir.path().join("000000.f32"), [0u8; 12]).unwrap();
        assert!(matches!(read_traces(dir.path()), Err(SteeringError::Format(_))));
    }
}
