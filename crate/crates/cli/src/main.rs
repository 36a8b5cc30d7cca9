//! `segpred`: map matching, training, evaluation and experiments over a
//! working directory.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use segpred::config::ExperimentConfig;
use segpred::experiment::{self, ModelKind, RunManifest};
use segpred::roadnet::SegmentId;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "segpred", version, about = "Road-segment trajectory prediction pipeline")]
struct Cli {
    /// TOML or JSON experiment config; the desk profile when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory, overriding the config.
    #[arg(long, global = true, env = "SEGPRED_WORKDIR")]
    workdir: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override config values.
#[derive(Args)]
struct Overrides {
    /// Seed for parameter initialization and batch order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    l_in: Option<usize>,
    #[arg(long, global = true)]
    l_out: Option<usize>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a grid network, random walks and noisy GPS traces.
    Synth {
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        traj_len: Option<usize>,
    },
    /// Validates an edge-list CSV and copies it into the working directory.
    BuildGraph {
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Precomputes bounded shortest paths between intersections.
    BuildUbodt {
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Map-matches GPS traces to segment sequences.
    Match {
        #[arg(long)]
        gps: Option<PathBuf>,
    },
    /// Builds the vocabulary and the train/validation/test windows.
    Prepare,
    /// Trains a model and stores its checkpoint.
    Train {
        #[arg(long, default_value = "statvtpred")]
        model: ModelKind,
    },
    /// Scores a checkpoint on the test split.
    Eval {
        #[arg(long, default_value = "statvtpred")]
        model: ModelKind,
        /// Decode without the neighbor filter.
        #[arg(long)]
        no_filter: bool,
    },
    /// Continues a comma-separated segment history.
    Predict {
        #[arg(long, default_value = "statvtpred")]
        model: ModelKind,
        #[arg(long, value_delimiter = ',', required = true)]
        history: Vec<u64>,
    },
    /// Trains one model per input/output length pair and prints the table.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        inputs: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        outputs: Option<Vec<usize>>,
    },
    /// Compares the Transformer baseline with the full model, with and
    /// without the filter.
    Ablate,
    /// Writes one test sample and its prediction as GeoJSON.
    ExportGeojson {
        #[arg(long, default_value = "statvtpred")]
        model: ModelKind,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::BuildGraph { .. } => "build-graph",
            Command::BuildUbodt { .. } => "build-ubodt",
            Command::Match { .. } => "match",
            Command::Prepare => "prepare",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Sweep { .. } => "sweep",
            Command::Ablate => "ablate",
            Command::ExportGeojson { .. } => "export-geojson",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => experiment::desk_profile(),
    };
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    let o = &cli.overrides;
    if let Some(s) = o.seed {
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(v) = o.l_in {
        cfg.data.l_in = v;
    }
    if let Some(v) = o.l_out {
        cfg.data.l_out = v;
    }
    if let Some(v) = o.d_model {
        cfg.model.d_model = v;
    }
    match &cli.command {
        Command::Synth { n_traj, traj_len } => {
            if let Some(n) = n_traj {
                cfg.synth.n_traj = *n;
            }
            if let Some(n) = traj_len {
                cfg.synth.traj_len = *n;
            }
        }
        Command::BuildGraph { network: Some(p) } => cfg.paths.network = Some(p.clone()),
        Command::BuildUbodt { delta: Some(d) } => cfg.data.ubodt_delta = *d,
        Command::Match { gps: Some(p) } => cfg.paths.gps = Some(p.clone()),
        Command::Sweep { inputs, outputs } => {
            if let Some(v) = inputs {
                cfg.sweep.l_in = v.clone();
            }
            if let Some(v) = outputs {
                cfg.sweep.l_out = v.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json(v: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    let dir = cfg.paths.workdir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let results = match &cli.command {
        Command::Synth { .. } => to_json(&experiment::synth(&cfg.synth, &dir)?)?,
        Command::BuildGraph { .. } => to_json(&experiment::build_graph(&cfg, &dir)?)?,
        Command::BuildUbodt { .. } => to_json(&experiment::build_ubodt(&cfg, &dir)?)?,
        Command::Match { .. } => to_json(&experiment::match_gps(&cfg, &dir)?)?,
        Command::Prepare => to_json(&experiment::prepare(&cfg, &dir)?)?,
        Command::Train { model } => to_json(&experiment::train_step(&cfg, &dir, *model)?)?,
        Command::Eval { model, no_filter } => {
            to_json(&experiment::eval_step(&dir, *model, no_filter.then_some(false))?)?
        }
        Command::Predict { model, history } => {
            let history: Vec<SegmentId> = history.iter().map(|&s| SegmentId(s)).collect();
            let out = experiment::predict_step(&dir, *model, &history)?;
            to_json(&out)?
        }
        Command::Sweep { .. } => {
            let cells = experiment::sweep_step(&cfg, &dir)?;
            eprintln!("{}", segpred::metrics::format_sweep_table(&cells));
            to_json(&cells)?
        }
        Command::Ablate => to_json(&experiment::ablate_step(&cfg, &dir)?)?,
        Command::ExportGeojson { model, sample, out } => {
            let out = out.clone().unwrap_or_else(|| dir.join(format!("sample-{sample}.geojson")));
            experiment::export_step(&dir, *model, *sample, &out)?;
            serde_json::json!({ "written": out.display().to_string() })
        }
    };
    RunManifest::new(cli.command.name(), &cfg, &results)?.write(&dir)?;
    Ok(results)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let msg = serde_json::json!({ "error": chain.join(": "), "command": cli.command.name() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
