use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use triadic_cli::pipeline::{AgentKind, Run, SimulateArgs};
use triadic_cli::server;
use triadic_core::concepts::{TaskDimension, TripletSet};
use triadic_core::service::{Service, SystemClock};
use triadic_core::steering::MethodKind;
use triadic_core::Config;

#[derive(Debug, Parser)]
#[command(name = "triadic", version, about = "Triadic similarity judgments: generate, simulate, collect, fit, align, report")]
struct Cli {
    /// Master seed. Also overrides `fit.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config covering fit, toy and steering parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write concepts.jsonl and triplets.jsonl into the run directory.
    GenTriplets {
        /// Concept file (JSONL). Defaults to the bundled 46-concept stand-in.
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long, default_value_t = 1.5)]
        margin: f64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Produce one condition's judgments (or the full matrix).
    Simulate {
        /// oracle, uniform, toy or replay.
        #[arg(long, default_value = "toy")]
        agent: AgentKind,
        /// prompt_zero, prompt_icl, prompt_neutral, task_vector, diffmean or sae.
        #[arg(long)]
        method: Option<MethodKind>,
        /// kind, size or neutral.
        #[arg(long, default_value = "kind")]
        dimension: TaskDimension,
        /// Oracle flip probability.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// SAE dictionary (`<stem>.json`); the toy agent defaults to its planted one.
        #[arg(long)]
        sae: Option<PathBuf>,
        /// Activation trace directory for the replay agent.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Both oracles plus every toy method and dimension.
        #[arg(long, conflicts_with_all = ["method", "sae", "traces"])]
        matrix: bool,
    },
    /// Run the HTTP session service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Store directory. Defaults to `<out>/store`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Triplet files to serve, keyed by file stem. Defaults to `<out>/triplets.jsonl`.
        #[arg(long)]
        triplets: Vec<PathBuf>,
    },
    /// Fit an embedding per judgment file.
    Fit {
        /// Judgment files. Defaults to every file under `<out>/judgments`.
        #[arg(long, num_args = 1..)]
        judgments: Vec<PathBuf>,
    },
    /// Procrustes alignment between embeddings.
    Align {
        #[arg(long, requires = "y")]
        x: Option<PathBuf>,
        #[arg(long, requires = "x")]
        y: Option<PathBuf>,
        #[arg(long, default_value_t = 999)]
        permutations: usize,
    },
    /// Accuracy table, alignment matrix and scatter plots under `<out>/report`.
    Report {
        #[arg(long, default_value_t = 999)]
        permutations: usize,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.fit.seed = s;
    }
    let run = Run {
        out: cli.out.clone(),
        seed: cli.seed.unwrap_or(config.fit.seed),
        config,
    };
    match cli.command {
        Command::GenTriplets { concepts, margin, count } => {
            let ts = run.gen_triplets(concepts.as_deref(), margin, count)?;
            println!("{} triplets -> {}", ts.len(), run.out.display());
        }
        Command::Simulate {
            agent,
            method,
            dimension,
            noise,
            sae,
            traces,
            matrix,
        } => {
            let written = if matrix {
                run.simulate_matrix()?
            } else {
                vec![run.simulate(&SimulateArgs {
                    agent,
                    method,
                    dimension,
                    noise,
                    sae,
                    traces,
                })?]
            };
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Serve { addr, store, triplets } => {
            let store = store.unwrap_or_else(|| run.path("store"));
            let files = if triplets.is_empty() {
                vec![run.path(triadic_core::report::TRIPLETS_FILE)]
            } else {
                triplets
            };
            let pools = files
                .iter()
                .map(|p| TripletSet::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let service = Service::open(store, pools, run.config.service.clone(), Arc::new(SystemClock))?;
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(server::serve(Arc::new(service), addr))?;
        }
        Command::Fit { judgments } => {
            for p in run.fit(&judgments)? {
                println!("{}", p.display());
            }
        }
        Command::Align { x, y, permutations } => match (x, y) {
            (Some(x), Some(y)) => {
                let r = run.align_pair(&x, &y, permutations)?;
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
            _ => println!("{}", run.align_all(permutations)?.display()),
        },
        Command::Report { permutations } => {
            let bundle = run.report(permutations)?;
            for f in &bundle.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
