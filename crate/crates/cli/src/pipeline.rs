//! The offline pipeline behind the `gen-triplets`, `simulate`, `fit`,
//! `align` and `report` subcommands. Every stage reads and writes files in
//! the run directory, using the layout from [`triadic_core::report`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use triadic_core::alignment::{self, AlignmentReport};
use triadic_core::concepts::{generate_triplets, ConceptSet, Dimension, TaskDimension, TripletSet};
use triadic_core::embedding::{fit_embedding, Embedding};
use triadic_core::judgments::{judge_all, oracle_judge, uniform_judge, JudgmentSet, Provenance};
use triadic_core::report::{self, ReportBundle, CONCEPTS_FILE, EMBEDDINGS_DIR, JUDGMENTS_DIR, TRIPLETS_FILE};
use triadic_core::steering::interchange::{read_dictionary, ReplayAgent};
use triadic_core::steering::{
    plan_condition, run_condition, Agent, ApplyMode, ConditionMethod, LayerScore, MethodKind, SaeDictionary, Split, ToyAgent,
};
use triadic_core::Config;

/// Features in the toy agent's planted SAE dictionary.
pub const TOY_SAE_FEATURES: usize = 16;
/// Index of the planted size feature.
pub const TOY_SAE_PLANTED: usize = 3;

/// Shared settings for one invocation.
#[derive(Debug, Clone)]
pub struct Run {
    pub out: PathBuf,
    pub seed: u64,
    pub config: Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Oracle,
    Uniform,
    Toy,
    Replay,
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(AgentKind::Oracle),
            "uniform" => Ok(AgentKind::Uniform),
            "toy" => Ok(AgentKind::Toy),
            "replay" => Ok(AgentKind::Replay),
            _ => Err(format!("unknown agent {s:?} (oracle, uniform, toy, replay)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub agent: AgentKind,
    pub method: Option<MethodKind>,
    pub dimension: TaskDimension,
    /// Oracle flip probability.
    pub noise: f64,
    pub sae: Option<PathBuf>,
    pub traces: Option<PathBuf>,
}

/// Steering metadata written next to a condition's judgments.
#[derive(Debug, Serialize)]
struct ConditionSidecar<'a> {
    condition: &'a str,
    method: MethodKind,
    dimension: TaskDimension,
    layer: Option<usize>,
    apply_mode: Option<ApplyMode>,
    layer_table: &'a [LayerScore],
    n_eval: usize,
}

impl Run {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn triplets(&self) -> Result<TripletSet> {
        let p = self.path(TRIPLETS_FILE);
        TripletSet::load(&p).with_context(|| format!("loading {} (run gen-triplets first)", p.display()))
    }

    fn concepts(&self) -> Result<ConceptSet> {
        let p = self.path(CONCEPTS_FILE);
        ConceptSet::load(&p).with_context(|| format!("loading {}", p.display()))
    }

    /// Load concepts (the bundled stand-in when `concepts` is absent),
    /// generate triplets, and write both into the run directory.
    pub fn gen_triplets(&self, concepts: Option<&Path>, margin: f64, count: usize) -> Result<TripletSet> {
        let set = match concepts {
            Some(p) => ConceptSet::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ConceptSet::standin(),
        };
        let ts = generate_triplets(&set, margin, self.seed, count)?;
        fs::create_dir_all(&self.out)?;
        set.save(self.path(CONCEPTS_FILE))?;
        ts.save(self.path(TRIPLETS_FILE))?;
        tracing::info!(concepts = set.len(), triplets = ts.len(), "generated triplets");
        Ok(ts)
    }

    fn write_judgments(&self, js: &JudgmentSet) -> Result<PathBuf> {
        let dir = self.path(JUDGMENTS_DIR);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.jsonl", js.provenance.condition));
        js.save(&path)?;
        Ok(path)
    }

    fn toy_agent(&self) -> Result<ToyAgent> {
        Ok(ToyAgent::new(self.config.toy.clone(), &self.concepts()?)?)
    }

    fn split(&self, ts: &TripletSet) -> Result<Split> {
        let s = &self.config.steering;
        Ok(Split::new(ts, self.seed, s.n_train, s.n_heldout, s.n_eval)?)
    }

    /// Run one agent condition and write its judgment file.
    pub fn simulate(&self, args: &SimulateArgs) -> Result<PathBuf> {
        let ts = self.triplets()?;
        match args.agent {
            AgentKind::Oracle | AgentKind::Uniform => {
                if args.method.is_some_and(|m| m != MethodKind::PromptZero) {
                    bail!("reference agents only answer plain prompts");
                }
                let (name, judgments) = if args.agent == AgentKind::Oracle {
                    let d = args
                        .dimension
                        .scored()
                        .context("the oracle needs --dimension kind or size")?;
                    let js = judge_all(&ts, |t| oracle_judge(t, d, args.noise, self.seed));
                    (format!("oracle-{d}"), js)
                } else {
                    let js = judge_all(&ts, |t| uniform_judge(t, args.dimension, self.seed));
                    (format!("uniform-{}", args.dimension), js)
                };
                let js = JudgmentSet::new(
                    Provenance {
                        condition: name.clone(),
                        method: args.agent_name().into(),
                        model: args.agent_name().into(),
                    },
                    judgments,
                );
                self.write_judgments(&js)
            }
            AgentKind::Toy => {
                let agent = self.toy_agent()?;
                let dict = match &args.sae {
                    Some(p) => read_dictionary(p)?,
                    None => agent.planted_dictionary(TOY_SAE_FEATURES, TOY_SAE_PLANTED, self.seed),
                };
                self.run_agent(&agent, &ts, args, Some(&dict))
            }
            AgentKind::Replay => {
                let dir = args.traces.as_ref().context("the replay agent needs --traces <dir>")?;
                let agent = ReplayAgent::load("replay", dir)?;
                let dict = args.sae.as_ref().map(|p| read_dictionary(p)).transpose()?;
                self.run_agent(&agent, &ts, args, dict.as_ref())
            }
        }
    }

    fn run_agent(
        &self,
        agent: &dyn Agent,
        ts: &TripletSet,
        args: &SimulateArgs,
        sae: Option<&SaeDictionary>,
    ) -> Result<PathBuf> {
        let method = args.method.context("model agents need --method")?;
        let split = self.split(ts)?;
        let plan = plan_condition(agent, method, args.dimension, &split, &self.config.steering, sae)?;
        let js = run_condition(agent, &plan, &split.eval)?;
        let path = self.write_judgments(&js)?;
        let vector = match &plan.method {
            ConditionMethod::Steered(v) => Some(v),
            _ => None,
        };
        let sidecar = ConditionSidecar {
            condition: &js.provenance.condition,
            method,
            dimension: plan.dimension,
            layer: vector.map(|v| v.layer),
            apply_mode: vector.map(|v| v.apply_mode),
            layer_table: &plan.layer_table,
            n_eval: split.eval.len(),
        };
        let dir = self.path("conditions");
        fs::create_dir_all(&dir)?;
        fs::write(
            dir.join(format!("{}.json", js.provenance.condition)),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
        if let Some(v) = vector {
            tracing::info!(condition = %js.provenance.condition, layer = v.layer, "steering layer selected");
        }
        Ok(path)
    }

    /// The full condition matrix: both oracles, then every toy method on
    /// each dimension it applies to.
    pub fn simulate_matrix(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for d in Dimension::ALL {
            out.push(self.simulate(&SimulateArgs {
                agent: AgentKind::Oracle,
                method: None,
                dimension: d.into(),
                noise: 0.0,
                sae: None,
                traces: None,
            })?);
        }
        for method in MethodKind::ALL {
            let dims: Vec<TaskDimension> = if method == MethodKind::PromptNeutral {
                vec![TaskDimension::Neutral]
            } else {
                Dimension::ALL.iter().map(|&d| d.into()).collect()
            };
            for dimension in dims {
                out.push(self.simulate(&SimulateArgs {
                    agent: AgentKind::Toy,
                    method: Some(method),
                    dimension,
                    noise: 0.0,
                    sae: None,
                    traces: None,
                })?);
            }
        }
        Ok(out)
    }

    /// Fit one embedding per judgment file (all files when `only` is empty).
    pub fn fit(&self, only: &[PathBuf]) -> Result<Vec<PathBuf>> {
        let ts = self.triplets()?;
        let files = if only.is_empty() {
            let mut v: Vec<PathBuf> = fs::read_dir(self.path(JUDGMENTS_DIR))
                .context("no judgments directory (run simulate first)")?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            v.sort();
            v
        } else {
            only.to_vec()
        };
        if files.is_empty() {
            bail!("no judgment files to fit");
        }
        let dir = self.path(EMBEDDINGS_DIR);
        fs::create_dir_all(&dir)?;
        let mut written = Vec::new();
        for f in files {
            let js = JudgmentSet::load(&f).with_context(|| format!("loading {}", f.display()))?;
            let name = js.provenance.condition.clone();
            let mut e = fit_embedding(&js.judgments, &ts, &self.config.fit).with_context(|| format!("fitting {name}"))?;
            e.provenance = name.clone();
            let path = dir.join(format!("{name}.json"));
            e.save(&path)?;
            tracing::info!(condition = %name, loss = e.final_loss, "fitted embedding");
            written.push(path);
        }
        Ok(written)
    }

    /// Align two embedding files.
    pub fn align_pair(&self, x: &Path, y: &Path, permutations: usize) -> Result<AlignmentReport> {
        let ex = Embedding::load(x).with_context(|| format!("loading {}", x.display()))?;
        let ey = Embedding::load(y).with_context(|| format!("loading {}", y.display()))?;
        let mut a = alignment::align(&ex, &ey, permutations, self.seed)?;
        a.x_label = label(x, &ex);
        a.y_label = label(y, &ey);
        Ok(AlignmentReport::from(&a))
    }

    /// All ordered pairs of embeddings in the run; writes `alignment.csv`.
    pub fn align_all(&self, permutations: usize) -> Result<PathBuf> {
        let dir = self.path(EMBEDDINGS_DIR);
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let embeddings = paths
            .iter()
            .map(|p| Ok((label(p, &Embedding::load(p)?), Embedding::load(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let pairs = alignment::all_pairs(&embeddings, permutations, self.seed)?;
        let path = self.path("alignment.csv");
        fs::write(&path, alignment::pairs_csv(&pairs))?;
        Ok(path)
    }

    pub fn report(&self, permutations: usize) -> Result<ReportBundle> {
        Ok(report::build_report(&self.out, &self.path("report"), permutations, self.seed)?)
    }
}

impl SimulateArgs {
    fn agent_name(&self) -> &'static str {
        match self.agent {
            AgentKind::Oracle => "oracle",
            AgentKind::Uniform => "uniform",
            AgentKind::Toy => "toy",
            AgentKind::Replay => "replay",
        }
    }
}

fn label(path: &Path, e: &Embedding) -> String {
    if e.provenance.is_empty() {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        e.provenance.clone()
    }
}
