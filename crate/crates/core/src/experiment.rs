//! Pipeline steps over a working directory, length sweeps, ablations and run
//! manifests.
//!
//! Every step reads its inputs from the working directory and fails with
//! [`Error::MissingArtifact`] naming the command that produces a missing one.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExperimentConfig, SplitBy};
use crate::data::{clean, read_samples, split, split_by_group, windows, write_samples, Sample, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::geojson::export_geojson;
use crate::mapmatch::{match_all, parse_gps_csv, read_matches, recovery, write_gps_csv, write_matches, write_sequences, MatchSummary};
use crate::metrics::{format_sweep_table, EvalReport, SweepCell};
use crate::predictor::{
    evaluate, greedy_decode, load_checkpoint, read_predictions, save_checkpoint, train, write_predictions, AnyModel,
    ModelConfig, Prediction, StatvtPred, TrainConfig, TrainOutcome, TransformerBaseline,
};
use crate::roadnet::{read_edge_list_file, write_edge_list_file, NeighborMask, RoadNetwork, SegmentId, Ubodt};
use crate::synth::{synth_gps, synth_network, synth_trajectories, SynthSpec};

pub const NETWORK_FILE: &str = "network.csv";
pub const UBODT_FILE: &str = "ubodt.csv";
pub const GPS_FILE: &str = "gps.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MATCHES_FILE: &str = "matches.csv";
pub const VOCAB_FILE: &str = "vocab.csv";
pub const TRAIN_FILE: &str = "train.txt";
pub const VAL_FILE: &str = "val.txt";
pub const TEST_FILE: &str = "test.txt";
pub const SWEEP_FILE: &str = "sweep.txt";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Statvtpred,
    Transformer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Statvtpred => "statvtpred",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn checkpoint_dir(self) -> String {
        format!("checkpoint-{}", self.name())
    }

    pub fn report_file(self) -> String {
        format!("report-{}.json", self.name())
    }

    pub fn predictions_file(self) -> String {
        format!("predictions-{}.csv", self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "statvtpred" => Ok(ModelKind::Statvtpred),
            "transformer" => Ok(ModelKind::Transformer),
            _ => Err(Error::invalid(format!("unknown model kind `{s}`"))),
        }
    }
}

fn require(dir: &Path, file: &str, producer: &str) -> Result<PathBuf> {
    let p = dir.join(file);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact {
            path: p.display().to_string(),
            producer: producer.to_string(),
        })
    }
}

fn create(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: impl AsRef<Path>) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn write_json(path: impl AsRef<Path>, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn load_network(dir: &Path) -> Result<RoadNetwork> {
    let p = require(dir, NETWORK_FILE, "build-graph")?;
    RoadNetwork::build(read_edge_list_file(p)?)
}

pub fn load_vocabulary(dir: &Path) -> Result<Vocabulary> {
    Vocabulary::read_csv(open(require(dir, VOCAB_FILE, "prepare")?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub segments: usize,
    pub edges: usize,
    pub nodes: usize,
}

impl GraphSummary {
    fn of(net: &RoadNetwork) -> Self {
        Self {
            segments: net.len(),
            edges: net.edge_count(),
            nodes: net.nodes().len(),
        }
    }
}

/// Validates the configured edge list and stores it in the working directory.
pub fn build_graph(cfg: &ExperimentConfig, dir: &Path) -> Result<GraphSummary> {
    let src = cfg
        .paths
        .network
        .as_ref()
        .ok_or_else(|| Error::invalid("paths.network is not set"))?;
    let net = RoadNetwork::build(read_edge_list_file(src)?)?;
    std::fs::create_dir_all(dir)?;
    write_edge_list_file(dir.join(NETWORK_FILE), net.segments())?;
    Ok(GraphSummary::of(&net))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UbodtSummary {
    pub entries: usize,
    pub delta: f64,
}

pub fn build_ubodt(cfg: &ExperimentConfig, dir: &Path) -> Result<UbodtSummary> {
    let net = load_network(dir)?;
    let ubodt = Ubodt::build(&net, cfg.data.ubodt_delta)?;
    ubodt.write_csv(create(dir.join(UBODT_FILE))?)?;
    Ok(UbodtSummary {
        entries: ubodt.len(),
        delta: ubodt.delta(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub network: GraphSummary,
    pub trajectories: usize,
    pub gps_points: usize,
}

/// Grid network, ground-truth walks and their noisy GPS traces.
pub fn synth(spec: &SynthSpec, dir: &Path) -> Result<SynthSummary> {
    let net = RoadNetwork::build(synth_network(spec)?)?;
    let walks = synth_trajectories(spec, &net)?;
    let gps = synth_gps(spec, &net, &walks, spec.seed)?;
    std::fs::create_dir_all(dir)?;
    write_edge_list_file(dir.join(NETWORK_FILE), net.segments())?;
    write_gps_csv(create(dir.join(GPS_FILE))?, &gps)?;
    let truth: Vec<(String, Vec<SegmentId>)> = walks.iter().enumerate().map(|(i, w)| (i.to_string(), w.clone())).collect();
    write_sequences(create(dir.join(TRUTH_FILE))?, &truth)?;
    Ok(SynthSummary {
        network: GraphSummary::of(&net),
        trajectories: walks.len(),
        gps_points: gps.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub summary: MatchSummary,
    /// Mean recovery against the ground truth when the directory has one.
    pub recovery: Option<f64>,
}

pub fn match_gps(cfg: &ExperimentConfig, dir: &Path) -> Result<MatchReport> {
    let gps = match &cfg.paths.gps {
        Some(p) => p.clone(),
        None => require(dir, GPS_FILE, "synth")?,
    };
    let net = load_network(dir)?;
    let ubodt = Ubodt::read_csv(open(require(dir, UBODT_FILE, "build-ubodt")?)?, None)?;
    let (traces, parse) = parse_gps_csv(open(gps)?)?;
    let (matched, mut summary) = match_all(&traces, &net, &ubodt, &cfg.matcher, cfg.data.max_speed);
    summary.parse = parse;
    write_matches(create(dir.join(MATCHES_FILE))?, &matched)?;
    let truth_path = dir.join(TRUTH_FILE);
    let recovery = if truth_path.exists() {
        let truth = read_matches(open(truth_path)?)?;
        let by_vehicle: BTreeMap<&str, Vec<SegmentId>> = matched
            .iter()
            .map(|(id, parts)| (id.as_str(), parts.iter().flat_map(|p| p.segment_seq.iter().copied()).collect()))
            .collect();
        let scores: Vec<f64> = truth
            .iter()
            .map(|(id, t)| recovery(by_vehicle.get(id.as_str()).map_or(&[][..], |v| v), t))
            .collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    } else {
        None
    };
    Ok(MatchReport { summary, recovery })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub trajectories: usize,
    pub kept: usize,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_tokens: usize,
}

pub fn split_samples(cfg: &ExperimentConfig, samples: &[Sample]) -> Result<Split<Sample>> {
    match cfg.data.split_by {
        SplitBy::Sample => split(samples, cfg.data.split, cfg.data.split_seed),
        SplitBy::Trajectory => split_by_group(samples, cfg.data.split, cfg.data.split_seed),
    }
}

/// Windows matched trajectories into samples and splits them.
pub fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<PrepareSummary> {
    let net = load_network(dir)?;
    let matched = read_matches(open(require(dir, MATCHES_FILE, "match")?)?)?;
    let d = &cfg.data;
    let seqs: Vec<Vec<SegmentId>> = matched.into_iter().map(|(_, s)| s).collect();
    let kept = clean(&seqs, d.l_in + d.l_out);
    let vocab = Vocabulary::from_network(&net);
    let mut samples = Vec::new();
    for (i, s) in kept.iter().enumerate() {
        samples.extend(windows(&vocab.encode(s)?, d.l_in, d.l_out, d.stride, i)?);
    }
    let parts = split_samples(cfg, &samples)?;
    vocab.write_csv(create(dir.join(VOCAB_FILE))?)?;
    write_samples(create(dir.join(TRAIN_FILE))?, &parts.train)?;
    write_samples(create(dir.join(VAL_FILE))?, &parts.val)?;
    write_samples(create(dir.join(TEST_FILE))?, &parts.test)?;
    Ok(PrepareSummary {
        trajectories: seqs.len(),
        kept: kept.len(),
        samples: samples.len(),
        train: parts.train.len(),
        val: parts.val.len(),
        test: parts.test.len(),
        n_tokens: vocab.n_tokens(),
    })
}

/// Network, vocabulary, mask and sample split of a prepared directory.
pub struct Prepared {
    pub network: RoadNetwork,
    pub vocab: Vocabulary,
    pub mask: NeighborMask,
    pub split: Split<Sample>,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let network = load_network(dir)?;
    let vocab = load_vocabulary(dir)?;
    let mask = NeighborMask::build(&network, &vocab)?;
    let read = |f: &str| -> Result<Vec<Sample>> { read_samples(open(require(dir, f, "prepare")?)?) };
    let split = Split {
        train: read(TRAIN_FILE)?,
        val: read(VAL_FILE)?,
        test: read(TEST_FILE)?,
    };
    Ok(Prepared {
        network,
        vocab,
        mask,
        split,
    })
}

/// The configuration `kind` is trained with: the baseline has neither
/// graph attention nor the filter.
pub fn kind_config(kind: ModelKind, config: ModelConfig) -> ModelConfig {
    match kind {
        ModelKind::Statvtpred => config,
        ModelKind::Transformer => ModelConfig {
            use_gat: false,
            use_filter: false,
            ..config
        },
    }
}

/// Trains a fresh model of `kind` on `split.train`, selecting on `split.val`.
pub fn train_kind(
    kind: ModelKind,
    config: ModelConfig,
    mask: NeighborMask,
    split: &Split<Sample>,
    tc: &TrainConfig,
) -> Result<(AnyModel, TrainOutcome)> {
    let config = kind_config(kind, config);
    Ok(match kind {
        ModelKind::Statvtpred => {
            let mut m = StatvtPred::new(config, mask)?;
            let out = train(&mut m, &split.train, &split.val, tc)?;
            (AnyModel::Statvtpred(m), out)
        }
        ModelKind::Transformer => {
            let mut m = TransformerBaseline::new(config, mask)?;
            let out = train(&mut m, &split.train, &split.val, tc)?;
            (AnyModel::Transformer(m), out)
        }
    })
}

pub fn train_step(cfg: &ExperimentConfig, dir: &Path, kind: ModelKind) -> Result<TrainOutcome> {
    let p = load_prepared(dir)?;
    let (model, outcome) = train_kind(kind, cfg.model_for(p.vocab.n_tokens()), p.mask, &p.split, &cfg.train)?;
    let vocab_rel = format!("../{VOCAB_FILE}");
    save_checkpoint(model.as_dyn(), kind.name(), &vocab_rel, dir.join(kind.checkpoint_dir()))?;
    Ok(outcome)
}

fn load_model(dir: &Path, kind: ModelKind, mask: NeighborMask) -> Result<AnyModel> {
    let ck = kind.checkpoint_dir();
    require(dir, &ck, &format!("train --model {}", kind.name()))?;
    load_checkpoint(dir.join(ck), mask)
}

/// Scores the trained model on the test split. `use_filter` overrides the
/// checkpoint's setting.
pub fn eval_step(dir: &Path, kind: ModelKind, use_filter: Option<bool>) -> Result<EvalReport> {
    let p = load_prepared(dir)?;
    let model = load_model(dir, kind, p.mask)?;
    let m = model.as_dyn();
    let (report, preds) = evaluate(m, &p.split.test, use_filter.unwrap_or(m.config().use_filter))?;
    write_json(dir.join(kind.report_file()), &report)?;
    write_predictions(create(dir.join(kind.predictions_file()))?, &preds)?;
    Ok(report)
}

/// Continues a segment history with the trained model.
pub fn predict_step(dir: &Path, kind: ModelKind, history: &[SegmentId]) -> Result<Vec<SegmentId>> {
    let network = load_network(dir)?;
    let vocab = load_vocabulary(dir)?;
    let mask = NeighborMask::build(&network, &vocab)?;
    let model = load_model(dir, kind, mask)?;
    let m = model.as_dyn();
    if history.len() != m.config().l_in {
        return Err(Error::invalid(format!(
            "history has {} segments, the model expects {}",
            history.len(),
            m.config().l_in
        )));
    }
    let input = vocab.encode(history)?;
    let d = greedy_decode(m, &[&input], m.config().use_filter)?;
    vocab.decode(&d.tokens[0])
}

/// One sample per sequence whose target starts at position `anchor`, so
/// that windows of different lengths predict the same segments.
pub fn aligned_windows(seqs: &[Vec<usize>], l_in: usize, l_out: usize, anchor: usize) -> Result<Vec<Sample>> {
    if l_in == 0 || l_out == 0 || l_in > anchor {
        return Err(Error::invalid(format!("need 1 <= l_in <= anchor and l_out >= 1, got {l_in}, {l_out}, {anchor}")));
    }
    Ok(seqs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= anchor + l_out)
        .map(|(i, s)| Sample {
            input: s[anchor - l_in..anchor].to_vec(),
            target: s[anchor..anchor + l_out].to_vec(),
            group: i,
        })
        .collect())
}

/// Trains and tests the full model on aligned windows of one length pair.
/// The split is by sequence with the configured seed, so every cell of a
/// sweep tests on the same sequences.
pub fn sweep_cell(
    cfg: &ExperimentConfig,
    seqs: &[Vec<usize>],
    mask: &NeighborMask,
    l_in: usize,
    l_out: usize,
    anchor: usize,
) -> Result<(SweepCell, EvalReport)> {
    let samples = aligned_windows(seqs, l_in, l_out, anchor)?;
    let parts = split_by_group(&samples, cfg.data.split, cfg.data.split_seed)?;
    let config = ModelConfig {
        l_in,
        l_out,
        ..cfg.model_for(mask.n_tokens())
    };
    let (model, _) = train_kind(ModelKind::Statvtpred, config, mask.clone(), &parts, &cfg.train)?;
    let m = model.as_dyn();
    let (report, _) = evaluate(m, &parts.test, m.config().use_filter)?;
    Ok((
        SweepCell {
            l_in,
            l_out,
            de: report.de,
            amr: report.amr,
        },
        report,
    ))
}

/// Every cell of the configured input × output length grid. Sequences too
/// short for the longest window are dropped first.
pub fn run_sweep(cfg: &ExperimentConfig, seqs: &[Vec<usize>], mask: &NeighborMask) -> Result<Vec<SweepCell>> {
    let anchor = cfg.sweep.l_in.iter().copied().max().unwrap_or(0);
    let longest = cfg.sweep.l_out.iter().copied().max().unwrap_or(0);
    let usable: Vec<Vec<usize>> = seqs.iter().filter(|s| s.len() >= anchor + longest).cloned().collect();
    let mut cells = Vec::new();
    for &l_in in &cfg.sweep.l_in {
        for &l_out in &cfg.sweep.l_out {
            cells.push(sweep_cell(cfg, &usable, mask, l_in, l_out, anchor)?.0);
        }
    }
    Ok(cells)
}

pub fn sweep_step(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepCell>> {
    let network = load_network(dir)?;
    let vocab = Vocabulary::from_network(&network);
    let mask = NeighborMask::build(&network, &vocab)?;
    let matched = read_matches(open(require(dir, MATCHES_FILE, "match")?)?)?;
    let seqs = matched.iter().map(|(_, s)| vocab.encode(s)).collect::<Result<Vec<_>>>()?;
    let cells = run_sweep(cfg, &seqs, &mask)?;
    std::fs::write(dir.join(SWEEP_FILE), format_sweep_table(&cells))?;
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub de: f64,
    pub amr: f64,
    pub fallback_count: usize,
    pub disconnected_pairs: usize,
}

impl AblationRow {
    fn new(variant: &str, r: &EvalReport) -> Self {
        Self {
            variant: variant.to_string(),
            de: r.de,
            amr: r.amr,
            fallback_count: r.fallback_count,
            disconnected_pairs: r.disconnected_pairs,
        }
    }
}

/// Test scores of the plain Transformer, the full model decoded without the
/// filter, and the full model, in that order. Both models start from the
/// same initial weights and see batches in the same order.
pub fn run_ablation(cfg: &ExperimentConfig, mask: &NeighborMask, split: &Split<Sample>) -> Result<Vec<AblationRow>> {
    let config = cfg.model_for(mask.n_tokens());
    let (full, _) = train_kind(ModelKind::Statvtpred, config.clone(), mask.clone(), split, &cfg.train)?;
    let (base, _) = train_kind(ModelKind::Transformer, config, mask.clone(), split, &cfg.train)?;
    let (with_filter, _) = evaluate(full.as_dyn(), &split.test, true)?;
    let (without_filter, _) = evaluate(full.as_dyn(), &split.test, false)?;
    let (baseline, _) = evaluate(base.as_dyn(), &split.test, false)?;
    Ok(vec![
        AblationRow::new("Transformer", &baseline),
        AblationRow::new("STATVTPred(-Filter)", &without_filter),
        AblationRow::new("STATVTPred", &with_filter),
    ])
}

pub fn ablate_step(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<AblationRow>> {
    let p = load_prepared(dir)?;
    run_ablation(cfg, &p.mask, &p.split)
}

/// Writes the test sample's history, target and prediction as GeoJSON.
pub fn export_step(dir: &Path, kind: ModelKind, sample_id: usize, out: &Path) -> Result<Value> {
    let p = load_prepared(dir)?;
    let preds_path = require(dir, &kind.predictions_file(), &format!("eval --model {}", kind.name()))?;
    let preds: Vec<Prediction> = read_predictions(open(preds_path)?)?;
    let sample = p
        .split
        .test
        .get(sample_id)
        .ok_or_else(|| Error::invalid(format!("no test sample {sample_id}")))?;
    let pred = preds
        .iter()
        .find(|x| x.sample_id == sample_id)
        .ok_or_else(|| Error::invalid(format!("no prediction for sample {sample_id}")))?;
    let doc = export_geojson(
        &p.network,
        &p.vocab.decode(&sample.input)?,
        &p.vocab.decode(&sample.target)?,
        &p.vocab.decode(&pred.predicted)?,
    )?;
    write_json(out, &doc)?;
    Ok(doc)
}

/// `git describe` of the working tree, or `unknown` outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// What a command ran with and what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub git_describe: String,
    pub config: ExperimentConfig,
    pub results: Value,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, results: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed: cfg.train.seed,
            git_describe: git_describe(),
            config: cfg.clone(),
            results: serde_json::to_value(results)?,
        })
    }

    /// Stored as `manifests/<command>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let d = dir.join(MANIFEST_DIR);
        std::fs::create_dir_all(&d)?;
        let path = d.join(format!("{}.json", self.command));
        write_json(&path, self)?;
        Ok(path)
    }
}

/// A synthetic grid with its walks as token sequences.
pub struct SynthCorpus {
    pub network: RoadNetwork,
    pub vocab: Vocabulary,
    pub mask: NeighborMask,
    pub sequences: Vec<Vec<usize>>,
}

impl SynthCorpus {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        let network = RoadNetwork::build(synth_network(spec)?)?;
        let walks = synth_trajectories(spec, &network)?;
        let vocab = Vocabulary::from_network(&network);
        let mask = NeighborMask::build(&network, &vocab)?;
        let sequences = walks.iter().map(|w| vocab.encode(w)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            network,
            vocab,
            mask,
            sequences,
        })
    }

    /// Windows of every sequence with the configured lengths and stride.
    pub fn samples(&self, cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
        let d = &cfg.data;
        let mut out = Vec::new();
        for (i, s) in self.sequences.iter().enumerate() {
            out.extend(windows(s, d.l_in, d.l_out, d.stride, i)?);
        }
        Ok(out)
    }
}

/// The configuration the CPU experiments run with: near-deterministic walks
/// one window long, so every trajectory yields one sample.
pub fn desk_profile() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.synth.traj_len = 12;
    cfg.synth.policy = [0.99, 0.0, 0.01];
    cfg
}
