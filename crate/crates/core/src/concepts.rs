//! Concept inventories and triplet generation.
//!
//! A [`ConceptSet`] carries two ground-truth dimensions per concept: a
//! two-valued kind label and a physical size. [`generate_triplets`] builds
//! trials `(ref, opt1, opt2)` where one option shares the reference's kind
//! and the *other* option is closer in log size, so the kind-correct and
//! size-correct answers never coincide.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;

/// Minimum number of concepts for a usable inventory.
pub const MIN_CONCEPTS: usize = 8;
/// Minimum members per kind category.
pub const MIN_PER_KIND: usize = 2;
pub const DEFAULT_MARGIN: f64 = 1.5;

const STANDIN_NAME: &str = "round_things_standin";
const STANDIN_JSONL: &str = include_str!("../data/round_things_standin.jsonl");

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("duplicate concept id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("concept {id:?} has non-positive size {size_m} (line {line})")]
    NonPositiveSize { id: String, size_m: f64, line: usize },
    #[error("invalid concept id {id:?} (line {line}): must be non-empty without leading/trailing or control whitespace")]
    InvalidId { id: String, line: usize },
    #[error("expected exactly two kind categories, found {0:?}")]
    KindCount(Vec<String>),
    #[error("kind {kind:?} has {count} members, need at least {MIN_PER_KIND}")]
    KindTooSmall { kind: String, count: usize },
    #[error("concept set has {0} concepts, need at least {MIN_CONCEPTS}")]
    TooFewConcepts(usize),
    #[error("margin must be > 1, got {0}")]
    InvalidMargin(f64),
    #[error("max_count must be positive")]
    InvalidMaxCount,
    #[error("no triplet satisfies the exclusivity constraints at margin {margin}")]
    EmptyPool { margin: f64 },
    #[error("duplicate triplet id {0}")]
    DuplicateTriplet(String),
    #[error("triplet {id}: {message}")]
    InvalidTriplet { id: String, message: String },
    #[error("triplet {triplet} references unknown concept {concept:?}")]
    UnknownConcept { triplet: String, concept: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ConceptError> = std::result::Result<T, E>;

/// A ground-truth dimension against which choices can be scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Kind,
    Size,
}

impl Dimension {
    pub const ALL: [Dimension; 2] = [Dimension::Kind, Dimension::Size];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Kind => "kind",
            Dimension::Size => "size",
        }
    }

    pub fn contrast(self) -> Dimension {
        match self {
            Dimension::Kind => Dimension::Size,
            Dimension::Size => Dimension::Kind,
        }
    }
}

/// The dimension a trial asks about. `Neutral` trials carry no dimension
/// word and are scored against each ground truth separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskDimension {
    Kind,
    Size,
    Neutral,
}

impl TaskDimension {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskDimension::Kind => "kind",
            TaskDimension::Size => "size",
            TaskDimension::Neutral => "neutral",
        }
    }

    /// The scoreable dimension, or `None` for neutral trials.
    pub fn scored(self) -> Option<Dimension> {
        match self {
            TaskDimension::Kind => Some(Dimension::Kind),
            TaskDimension::Size => Some(Dimension::Size),
            TaskDimension::Neutral => None,
        }
    }
}

impl From<Dimension> for TaskDimension {
    fn from(d: Dimension) -> Self {
        match d {
            Dimension::Kind => TaskDimension::Kind,
            Dimension::Size => TaskDimension::Size,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for TaskDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown dimension {0:?}")]
pub struct ParseDimensionError(String);

impl FromStr for TaskDimension {
    type Err = ParseDimensionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kind" => Ok(TaskDimension::Kind),
            "size" => Ok(TaskDimension::Size),
            "neutral" => Ok(TaskDimension::Neutral),
            _ => Err(ParseDimensionError(s.to_string())),
        }
    }
}

impl FromStr for Dimension {
    type Err = ParseDimensionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskDimension::from_str(s)?
            .scored()
            .ok_or_else(|| ParseDimensionError(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub kind: String,
    pub size_m: f64,
}

impl Concept {
    pub fn log_size(&self) -> f64 {
        self.size_m.ln()
    }
}

/// A validated concept inventory with exactly two kind categories.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    name: String,
    concepts: Vec<Concept>,
    kinds: [String; 2],
    index: HashMap<String, usize>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.trim() == id
        && !id.chars().any(|c| c.is_control() || (c.is_whitespace() && c != ' '))
}

impl ConceptSet {
    /// Validate a list of concepts. Record numbers in errors are 1-based
    /// positions in `concepts`.
    pub fn new(name: impl Into<String>, concepts: Vec<Concept>) -> Result<Self> {
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            let line = i + 1;
            if !valid_id(&c.id) {
                return Err(ConceptError::InvalidId {
                    id: c.id.clone(),
                    line,
                });
            }
            if !(c.size_m > 0.0) || !c.size_m.is_finite() {
                return Err(ConceptError::NonPositiveSize {
                    id: c.id.clone(),
                    size_m: c.size_m,
                    line,
                });
            }
            if index.insert(c.id.clone(), i).is_some() {
                return Err(ConceptError::DuplicateId {
                    id: c.id.clone(),
                    line,
                });
            }
        }

        let kinds: BTreeSet<&str> = concepts.iter().map(|c| c.kind.as_str()).collect();
        if kinds.len() != 2 {
            return Err(ConceptError::KindCount(
                kinds.into_iter().map(String::from).collect(),
            ));
        }
        let kinds: Vec<String> = kinds.into_iter().map(String::from).collect();
        for kind in &kinds {
            let count = concepts.iter().filter(|c| &c.kind == kind).count();
            if count < MIN_PER_KIND {
                return Err(ConceptError::KindTooSmall {
                    kind: kind.clone(),
                    count,
                });
            }
        }
        if concepts.len() < MIN_CONCEPTS {
            return Err(ConceptError::TooFewConcepts(concepts.len()));
        }

        Ok(ConceptSet {
            name: name.into(),
            kinds: [kinds[0].clone(), kinds[1].clone()],
            concepts,
            index,
        })
    }

    /// Parse the line-delimited concept format. Blank lines are skipped but
    /// still counted for line numbers.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let name = name.into();
        let mut concepts = Vec::new();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let concept: Concept =
                serde_json::from_str(raw).map_err(|e| ConceptError::Parse {
                    source_name: name.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            concepts.push(concept);
            lines.push(i + 1);
        }
        // Re-map record positions to file lines.
        ConceptSet::new(name, concepts).map_err(|e| match e {
            ConceptError::DuplicateId { id, line } => ConceptError::DuplicateId {
                id,
                line: lines[line - 1],
            },
            ConceptError::NonPositiveSize { id, size_m, line } => ConceptError::NonPositiveSize {
                id,
                size_m,
                line: lines[line - 1],
            },
            ConceptError::InvalidId { id, line } => ConceptError::InvalidId {
                id,
                line: lines[line - 1],
            },
            other => other,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        ConceptSet::parse(name, &text)
    }

    /// The 46-concept stand-in inventory bundled with the crate.
    pub fn standin() -> Self {
        ConceptSet::parse(STANDIN_NAME, STANDIN_JSONL).expect("bundled dataset is valid")
    }

    pub fn standin_jsonl() -> &'static str {
        STANDIN_JSONL
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for c in &self.concepts {
            serde_json::to_writer(&mut out, c).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn kinds(&self) -> &[String; 2] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.index.get(id).map(|&i| &self.concepts[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Same inventory with the records reordered. Used to check that the
    /// generated pool does not depend on file order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let concepts = order.iter().map(|&i| self.concepts[i].clone()).collect();
        ConceptSet::new(self.name.clone(), concepts)
    }

    #[cfg(test)]
    pub(crate) fn unchecked(name: &str, concepts: Vec<Concept>) -> Self {
        let index = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        let kind = concepts[0].kind.clone();
        ConceptSet {
            name: name.to_string(),
            kinds: [kind.clone(), kind],
            concepts,
            index,
        }
    }
}

/// Stable identifier of a comparison: a hash of the reference and the
/// *unordered* option pair, so swapped presentations share an id.
pub fn triplet_id(reference: &str, a: &str, b: &str) -> String {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut hasher = Sha256::new();
    for part in [reference, lo, hi] {
        hasher.update(part.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    let mut s = String::with_capacity(16);
    for byte in &digest[..8] {
        s.push_str(&format!("{byte:02x}"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub opt1: String,
    pub opt2: String,
    pub kind_answer: String,
    pub size_answer: String,
}

impl Triplet {
    pub fn options(&self) -> [&str; 2] {
        [&self.opt1, &self.opt2]
    }

    pub fn is_option(&self, id: &str) -> bool {
        self.opt1 == id || self.opt2 == id
    }

    /// The option not equal to `choice`, if `choice` is an option.
    pub fn other_option(&self, choice: &str) -> Option<&str> {
        if choice == self.opt1 {
            Some(&self.opt2)
        } else if choice == self.opt2 {
            Some(&self.opt1)
        } else {
            None
        }
    }

    /// Same comparison with the option order flipped.
    pub fn swapped(&self) -> Triplet {
        Triplet {
            opt1: self.opt2.clone(),
            opt2: self.opt1.clone(),
            ..self.clone()
        }
    }

    /// Whether the options are presented out of lexical order.
    pub fn presentation_swapped(&self) -> bool {
        self.opt1 > self.opt2
    }

    fn check(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(ConceptError::InvalidTriplet {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.reference == self.opt1 || self.reference == self.opt2 || self.opt1 == self.opt2 {
            return fail("reference and options must be distinct");
        }
        if !self.is_option(&self.kind_answer) || !self.is_option(&self.size_answer) {
            return fail("answers must be options");
        }
        if self.kind_answer == self.size_answer {
            return fail("kind and size answers must differ");
        }
        if self.id != triplet_id(&self.reference, &self.opt1, &self.opt2) {
            return fail("id does not match contents");
        }
        Ok(())
    }
}

/// The correct option for `dimension`.
pub fn ground_truth_answer(t: &Triplet, dimension: Dimension) -> &str {
    match dimension {
        Dimension::Kind => &t.kind_answer,
        Dimension::Size => &t.size_answer,
    }
}

#[derive(Debug, Clone)]
pub struct TripletSet {
    pub source: String,
    pub seed: Option<u64>,
    pub margin: Option<f64>,
    triplets: Vec<Triplet>,
    index: HashMap<String, usize>,
}

impl TripletSet {
    pub fn new(source: impl Into<String>, triplets: Vec<Triplet>) -> Result<Self> {
        let mut index = HashMap::with_capacity(triplets.len());
        for (i, t) in triplets.iter().enumerate() {
            t.check()?;
            if index.insert(t.id.clone(), i).is_some() {
                return Err(ConceptError::DuplicateTriplet(t.id.clone()));
            }
        }
        Ok(TripletSet {
            source: source.into(),
            seed: None,
            margin: None,
            triplets,
            index,
        })
    }

    pub fn parse(source: impl Into<String>, text: &str) -> Result<Self> {
        let source = source.into();
        let mut triplets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let t: Triplet = serde_json::from_str(raw).map_err(|e| ConceptError::Parse {
                source_name: source.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            triplets.push(t);
        }
        TripletSet::new(source, triplets)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        TripletSet::parse(source, &text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.triplets {
            out.push_str(&serde_json::to_string(t).expect("triplet serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Check that every referenced concept exists and that the stored
    /// answers agree with the concept labels.
    pub fn validate_against(&self, set: &ConceptSet) -> Result<()> {
        for t in &self.triplets {
            for id in [&t.reference, &t.opt1, &t.opt2] {
                if set.get(id).is_none() {
                    return Err(ConceptError::UnknownConcept {
                        triplet: t.id.clone(),
                        concept: id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triplet> {
        self.triplets.iter()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Triplet> {
        self.index.get(id).map(|&i| &self.triplets[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Concept ids referenced by any triplet, sorted.
    pub fn concept_ids(&self) -> BTreeSet<&str> {
        self.triplets
            .iter()
            .flat_map(|t| [t.reference.as_str(), t.opt1.as_str(), t.opt2.as_str()])
            .collect()
    }

    /// A set holding the listed triplets, in the given order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<TripletSet> {
        let triplets = ids
            .into_iter()
            .map(|id| {
                self.get(id).cloned().ok_or_else(|| ConceptError::InvalidTriplet {
                    id: id.to_string(),
                    message: "not in source set".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = TripletSet::new(self.source.clone(), triplets)?;
        set.seed = self.seed;
        set.margin = self.margin;
        Ok(set)
    }
}

/// Whether `(reference, same_kind, other_kind)` is a valid exclusive trial:
/// the other-kind option must be closer in log size by at least `margin`.
fn size_constraint(reference: &Concept, same_kind: &Concept, other_kind: &Concept, margin: f64) -> bool {
    let lr = reference.log_size();
    let kind_gap = (same_kind.log_size() - lr).abs();
    let size_gap = (other_kind.log_size() - lr).abs();
    kind_gap > 0.0 && size_gap * margin <= kind_gap
}

/// Every valid comparison in canonical (lexical-option) presentation,
/// ordered by triplet id.
pub fn triplet_pool(set: &ConceptSet, margin: f64) -> Vec<Triplet> {
    let mut pool = Vec::new();
    for r in set.concepts() {
        for a in set.concepts() {
            if a.id == r.id || a.kind != r.kind {
                continue;
            }
            for b in set.concepts() {
                if b.kind == r.kind || !size_constraint(r, a, b, margin) {
                    continue;
                }
                let (opt1, opt2) = if a.id <= b.id { (&a.id, &b.id) } else { (&b.id, &a.id) };
                pool.push(Triplet {
                    id: triplet_id(&r.id, &a.id, &b.id),
                    reference: r.id.clone(),
                    opt1: opt1.clone(),
                    opt2: opt2.clone(),
                    kind_answer: a.id.clone(),
                    size_answer: b.id.clone(),
                });
            }
        }
    }
    pool.sort_by(|x, y| x.id.cmp(&y.id));
    pool
}

/// Sample up to `max_count` exclusive triplets and randomize option order.
pub fn generate_triplets(
    set: &ConceptSet,
    margin: f64,
    seed: u64,
    max_count: usize,
) -> Result<TripletSet> {
    if !(margin > 1.0) || !margin.is_finite() {
        return Err(ConceptError::InvalidMargin(margin));
    }
    if max_count == 0 {
        return Err(ConceptError::InvalidMaxCount);
    }
    let pool = triplet_pool(set, margin);
    if pool.is_empty() {
        return Err(ConceptError::EmptyPool { margin });
    }

    let mut rng = rng::derived(seed, &["generate_triplets", set.name()]);
    let mut chosen: Vec<usize> = if max_count < pool.len() {
        index::sample(&mut rng, pool.len(), max_count).into_vec()
    } else {
        (0..pool.len()).collect()
    };
    chosen.sort_unstable();

    let triplets = chosen
        .into_iter()
        .map(|i| {
            let t = &pool[i];
            if rng.random_bool(0.5) {
                t.swapped()
            } else {
                t.clone()
            }
        })
        .collect();

    let mut ts = TripletSet::new(set.name(), triplets)?;
    ts.seed = Some(seed);
    ts.margin = Some(margin);
    Ok(ts)
}
