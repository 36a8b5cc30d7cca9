//! The spatio-temporal predictor, its plain Transformer baseline, filtered
//! greedy decoding, training and evaluation.

use std::io::Write;
use std::path::Path;

use nncore::checkpoint::Manifest;
use nncore::layers::{Embedding, Linear};
use nncore::optim::{Adam, LrSchedule, WeightDecay};
use nncore::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, BOS};
use crate::error::{Error, Result};
use crate::gat::{build_gat_batch, SpatialEncoder};
use crate::metrics::EvalReport;
use crate::roadnet::NeighborMask;
use crate::seq2seq::{positional_encoding, Decoder, Encoder, NormStyle};

/// How the spatial and temporal streams are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Sum,
    /// `Linear(2d → d)` over `[S ∥ T]`.
    Concat,
}

/// Where the neighbor filter is applied during decoding. Both give the same
/// argmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSpace {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub post_fusion_layers: usize,
    pub dec_layers: usize,
    /// Feed-forward width; `0` means `4 · d_model`.
    pub d_ff: usize,
    pub gat_heads: usize,
    pub gat_layers: usize,
    pub gat_slope: f64,
    pub gat_self_loops: bool,
    pub gat_bidirectional: bool,
    pub dropout: f64,
    pub l_in: usize,
    pub l_out: usize,
    pub use_gat: bool,
    pub use_filter: bool,
    pub fusion: Fusion,
    pub norm: NormStyle,
    pub filter_space: FilterSpace,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_tokens: 0,
            d_model: 256,
            heads: 4,
            enc_layers: 2,
            post_fusion_layers: 1,
            dec_layers: 2,
            d_ff: 0,
            gat_heads: 4,
            gat_layers: 2,
            gat_slope: crate::gat::DEFAULT_SLOPE,
            gat_self_loops: true,
            gat_bidirectional: true,
            dropout: 0.1,
            l_in: crate::data::DEFAULT_L_IN,
            l_out: crate::data::DEFAULT_L_OUT,
            use_gat: true,
            use_filter: true,
            fusion: Fusion::Sum,
            norm: NormStyle::Post,
            filter_space: FilterSpace::Probabilities,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small profile used for CPU experiments.
    pub fn desk(n_tokens: usize) -> Self {
        Self {
            n_tokens,
            d_model: 32,
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_tokens < 3 {
            return bad(format!("n_tokens {} leaves no segment tokens", self.n_tokens));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even and positive", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.gat_heads == 0 || self.d_model % self.gat_heads != 0 {
            return bad(format!("d_model {} not divisible by {} GAT heads", self.d_model, self.gat_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.l_in == 0 || self.l_out == 0 {
            return bad("sequence lengths must be positive".into());
        }
        Ok(())
    }
}

/// Anything that maps input windows to next-segment logits.
pub trait Seq2Seq: Sync {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn mask(&self) -> &NeighborMask;
    /// Encoder memory `[B, L_in, d]`.
    fn encode(&self, g: &mut Graph, inputs: &[&[usize]]) -> Result<Var>;
    /// Logits `[B, t, n_tokens]` for decoder inputs of equal length `t`,
    /// each starting with `BOS`.
    fn decode(&self, g: &mut Graph, memory: Var, dec_in: &[Vec<usize>]) -> Result<Var>;

    /// Teacher-forced logits `[B, prefix + 1, n_tokens]` for `BOS ∥ prefix`.
    fn forward(&self, g: &mut Graph, inputs: &[&[usize]], prefixes: &[&[usize]]) -> Result<Var> {
        let memory = self.encode(g, inputs)?;
        let dec_in: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        self.decode(g, memory, &dec_in)
    }
}

/// Embedding, decoder and output projection shared by both models.
#[derive(Clone, Debug)]
struct Trunk {
    embedding: Embedding,
    decoder: Decoder,
    out_proj: Linear,
}

fn check_tokens(seqs: &[&[usize]], n_tokens: usize, len: Option<usize>) -> Result<()> {
    for s in seqs {
        if let Some(&t) = s.iter().find(|&&t| t >= n_tokens) {
            return Err(Error::UnknownToken(t));
        }
        if let Some(l) = len {
            if s.len() != l {
                return Err(Error::invalid(format!("expected sequences of length {l}, got {}", s.len())));
            }
        }
    }
    Ok(())
}

impl Trunk {
    /// `embed(tokens) + PE` as `[B, L, d]`.
    fn embed(&self, g: &mut Graph, store: &ParamStore, seqs: &[&[usize]], d: usize) -> Result<Var> {
        let len = seqs.first().map_or(0, |s| s.len());
        if seqs.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("sequences in one batch must share a length"));
        }
        let flat: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let e = self.embedding.forward(g, store, &flat)?;
        let e = g.reshape(e, &[seqs.len(), len, d])?;
        let pe = g.constant(positional_encoding(len, d)?);
        Ok(g.add_broadcast(e, pe)?)
    }

    fn decode(&self, g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, memory: Var, dec_in: &[Vec<usize>]) -> Result<Var> {
        let refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        check_tokens(&refs, cfg.n_tokens, None)?;
        let y = self.embed(g, store, &refs, cfg.d_model)?;
        let y = self.decoder.forward(g, store, y, memory, None, cfg.norm, cfg.dropout)?;
        Ok(self.out_proj.forward(g, store, y)?)
    }
}

/// Embedding → (graph attention ∥ Transformer encoder) → fusion → encoder
/// → decoder → linear.
#[derive(Clone, Debug)]
pub struct StatvtPred {
    pub config: ModelConfig,
    pub params: ParamStore,
    mask: NeighborMask,
    trunk: Trunk,
    temporal: Encoder,
    post_fusion: Encoder,
    spatial: SpatialEncoder,
    fusion: Option<Linear>,
}

impl StatvtPred {
    /// Parameters are created in a fixed order (embedding, temporal and
    /// post-fusion encoders, decoder, output, then graph attention and
    /// fusion), so the baseline built from the same seed shares its weights.
    pub fn new(config: ModelConfig, mask: NeighborMask) -> Result<Self> {
        config.validate()?;
        if mask.n_tokens() != config.n_tokens {
            return Err(Error::MaskMismatch {
                expected: config.n_tokens.to_string(),
                found: mask.n_tokens().to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let (d, h, ff) = (config.d_model, config.heads, config.ffn_width());
        let embedding = Embedding::new(&mut params, "embedding", config.n_tokens, d, &mut rng);
        let temporal = Encoder::new(&mut params, "temporal", config.enc_layers, d, h, ff, &mut rng)?;
        let post_fusion = Encoder::new(&mut params, "post_fusion", config.post_fusion_layers, d, h, ff, &mut rng)?;
        let decoder = Decoder::new(&mut params, "decoder", config.dec_layers, d, h, ff, &mut rng)?;
        let out_proj = Linear::new(&mut params, "out_proj", d, config.n_tokens, true, &mut rng);
        let mut spatial = SpatialEncoder::new(&mut params, "spatial", config.gat_layers, d, config.gat_heads, &mut rng)?;
        for l in &mut spatial.layers {
            l.slope = config.gat_slope;
        }
        let fusion =
            (config.fusion == Fusion::Concat).then(|| Linear::new(&mut params, "fusion", 2 * d, d, true, &mut rng));
        Ok(Self {
            config,
            params,
            mask,
            trunk: Trunk {
                embedding,
                decoder,
                out_proj,
            },
            temporal,
            post_fusion,
            spatial,
            fusion,
        })
    }

    pub fn fusion_layer(&self) -> Option<&Linear> {
        self.fusion.as_ref()
    }

    /// Spatial features `[B, L_in, d]` and every GAT coefficient tensor.
    pub fn spatial_features(&self, g: &mut Graph, inputs: &[&[usize]]) -> Result<(Var, Vec<Var>)> {
        let batch = build_gat_batch(inputs, &self.mask, self.config.gat_bidirectional, self.config.gat_self_loops)?;
        let table = g.param(&self.params, self.trunk.embedding.table);
        self.spatial.forward_with_attention(g, &self.params, table, &batch)
    }

    /// Combines spatial and temporal features per the configured mode.
    pub fn fuse(&self, g: &mut Graph, s: Var, t: Var) -> Result<Var> {
        if g.shape(s) != g.shape(t) {
            return Err(Error::Nn(nncore::NnError::ShapeMismatch {
                op: "fuse",
                lhs: g.shape(s).to_vec(),
                rhs: g.shape(t).to_vec(),
            }));
        }
        match &self.fusion {
            None => Ok(g.add(s, t)?),
            Some(lin) => {
                let c = g.concat(&[s, t])?;
                Ok(lin.forward(g, &self.params, c)?)
            }
        }
    }
}

impl Seq2Seq for StatvtPred {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn mask(&self) -> &NeighborMask {
        &self.mask
    }

    fn encode(&self, g: &mut Graph, inputs: &[&[usize]]) -> Result<Var> {
        let cfg = &self.config;
        check_tokens(inputs, cfg.n_tokens, None)?;
        let e = self.trunk.embed(g, &self.params, inputs, cfg.d_model)?;
        let t = self.temporal.forward(g, &self.params, e, None, cfg.norm, cfg.dropout)?;
        let f = if cfg.use_gat {
            let (s, _) = self.spatial_features(g, inputs)?;
            self.fuse(g, s, t)?
        } else {
            t
        };
        self.post_fusion.forward(g, &self.params, f, None, cfg.norm, cfg.dropout)
    }

    fn decode(&self, g: &mut Graph, memory: Var, dec_in: &[Vec<usize>]) -> Result<Var> {
        self.trunk.decode(g, &self.params, &self.config, memory, dec_in)
    }
}

/// Plain encoder-decoder Transformer: one encoder stack of
/// `enc_layers + post_fusion_layers` layers, no graph attention.
#[derive(Clone, Debug)]
pub struct TransformerBaseline {
    pub config: ModelConfig,
    pub params: ParamStore,
    mask: NeighborMask,
    trunk: Trunk,
    encoder: Encoder,
}

impl TransformerBaseline {
    /// Initialized exactly like the shared parts of [`StatvtPred::new`]
    /// with the same config.
    pub fn new(config: ModelConfig, mask: NeighborMask) -> Result<Self> {
        let config = ModelConfig {
            use_gat: false,
            ..config
        };
        let full = StatvtPred::new(config, mask)?;
        Self::from_model(&full)
    }

    /// Baseline holding copies of `model`'s embedding, encoder, decoder and
    /// output weights.
    pub fn from_model(model: &StatvtPred) -> Result<Self> {
        let mut config = model.config.clone();
        config.use_gat = false;
        let names: Vec<String> = model
            .params
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| !n.starts_with("spatial.") && !n.starts_with("fusion."))
            .collect();
        let mut params = ParamStore::new();
        let mut remap = std::collections::HashMap::new();
        for id in model.params.ids() {
            let p = model.params.get(id);
            if names.contains(&p.name) {
                remap.insert(id, params.add(p.name.clone(), p.value.clone()));
            }
        }
        let re = |id: &nncore::ParamId| remap[id];
        let relin = |l: &Linear| Linear {
            weight: re(&l.weight),
            bias: l.bias.as_ref().map(re),
            in_dim: l.in_dim,
            out_dim: l.out_dim,
        };
        let renorm = |n: &nncore::layers::LayerNorm| nncore::layers::LayerNorm {
            gain: re(&n.gain),
            bias: re(&n.bias),
            eps: n.eps,
        };
        let remha = |m: &crate::seq2seq::MultiHeadAttention| crate::seq2seq::MultiHeadAttention {
            wq: relin(&m.wq),
            wk: relin(&m.wk),
            wv: relin(&m.wv),
            wo: relin(&m.wo),
            heads: m.heads,
        };
        let reffn = |f: &crate::seq2seq::FeedForward| crate::seq2seq::FeedForward {
            lin1: relin(&f.lin1),
            lin2: relin(&f.lin2),
        };
        let encoder = Encoder {
            layers: model
                .temporal
                .layers
                .iter()
                .chain(&model.post_fusion.layers)
                .map(|l| crate::seq2seq::EncoderLayer {
                    attn: remha(&l.attn),
                    ffn: reffn(&l.ffn),
                    norm1: renorm(&l.norm1),
                    norm2: renorm(&l.norm2),
                })
                .collect(),
        };
        let decoder = Decoder {
            layers: model
                .trunk
                .decoder
                .layers
                .iter()
                .map(|l| crate::seq2seq::DecoderLayer {
                    self_attn: remha(&l.self_attn),
                    cross_attn: remha(&l.cross_attn),
                    ffn: reffn(&l.ffn),
                    norm1: renorm(&l.norm1),
                    norm2: renorm(&l.norm2),
                    norm3: renorm(&l.norm3),
                })
                .collect(),
        };
        let emb = &model.trunk.embedding;
        Ok(Self {
            config,
            params,
            mask: model.mask.clone(),
            trunk: Trunk {
                embedding: Embedding {
                    table: re(&emb.table),
                    n_tokens: emb.n_tokens,
                    dim: emb.dim,
                },
                decoder,
                out_proj: relin(&model.trunk.out_proj),
            },
            encoder,
        })
    }
}

impl Seq2Seq for TransformerBaseline {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn mask(&self) -> &NeighborMask {
        &self.mask
    }

    fn encode(&self, g: &mut Graph, inputs: &[&[usize]]) -> Result<Var> {
        let cfg = &self.config;
        check_tokens(inputs, cfg.n_tokens, None)?;
        let e = self.trunk.embed(g, &self.params, inputs, cfg.d_model)?;
        self.encoder.forward(g, &self.params, e, None, cfg.norm, cfg.dropout)
    }

    fn decode(&self, g: &mut Graph, memory: Var, dec_in: &[Vec<usize>]) -> Result<Var> {
        self.trunk.decode(g, &self.params, &self.config, memory, dec_in)
    }
}

/// Keeps only successors of `prev` and renormalizes. When they carry no
/// mass, returns `probs` unchanged and `true`.
pub fn filter_probs(probs: &[f64], prev: usize, mask: &NeighborMask) -> (Vec<f64>, bool) {
    let row = mask.row(prev);
    let kept: Vec<f64> = probs.iter().zip(row).map(|(p, &w)| if w { *p } else { 0.0 }).collect();
    let total: f64 = kept.iter().sum();
    if total > 0.0 {
        (kept.into_iter().map(|p| p / total).collect(), false)
    } else {
        (probs.to_vec(), true)
    }
}

/// Sets non-successor logits to `-inf`. When `prev` has no successor at all,
/// returns `logits` unchanged and `true`.
pub fn filter_logits(logits: &[f64], prev: usize, mask: &NeighborMask) -> (Vec<f64>, bool) {
    let row = mask.row(prev);
    if !row.iter().any(|&w| w) {
        return (logits.to_vec(), true);
    }
    let out = logits
        .iter()
        .zip(row)
        .map(|(l, &w)| if w { *l } else { f64::NEG_INFINITY })
        .collect();
    (out, false)
}

/// Index of the largest value, lowest index among ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Chosen token for one step and whether the filter fell back.
pub fn choose(logits: &[f64], prev: usize, mask: &NeighborMask, use_filter: bool, space: FilterSpace) -> (usize, bool) {
    if !use_filter {
        return (argmax(logits), false);
    }
    match space {
        FilterSpace::Probabilities => {
            let probs = nncore::graph::softmax_rows(&Tensor::new(vec![logits.len()], logits.to_vec()).expect("1-d"))
                .expect("logits are finite");
            let (p, fell_back) = filter_probs(probs.data(), prev, mask);
            (argmax(&p), fell_back)
        }
        FilterSpace::Logits => {
            let (l, fell_back) = filter_logits(logits, prev, mask);
            (argmax(&l), fell_back)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<Vec<usize>>,
    pub fallbacks: Vec<Vec<bool>>,
}

/// Step-by-step greedy decoding of one batch. The predecessor of step 1 is
/// the last input token.
pub fn greedy_decode<M: Seq2Seq + ?Sized>(model: &M, inputs: &[&[usize]], use_filter: bool) -> Result<Decoded> {
    let cfg = model.config();
    check_tokens(inputs, cfg.n_tokens, Some(cfg.l_in))?;
    if inputs.is_empty() {
        return Ok(Decoded {
            tokens: Vec::new(),
            fallbacks: Vec::new(),
        });
    }
    let mut g = Graph::new();
    let memory = model.encode(&mut g, inputs)?;
    let b = inputs.len();
    let mut dec_in: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut tokens: Vec<Vec<usize>> = vec![Vec::with_capacity(cfg.l_out); b];
    let mut fallbacks: Vec<Vec<bool>> = vec![Vec::with_capacity(cfg.l_out); b];
    for step in 0..cfg.l_out {
        let logits = model.decode(&mut g, memory, &dec_in)?;
        let v = g.value(logits);
        let t = step + 1;
        for i in 0..b {
            let row = v.row(i * t + step);
            let prev = tokens[i].last().copied().unwrap_or(*inputs[i].last().expect("l_in > 0"));
            let (tok, fell_back) = choose(row, prev, model.mask(), use_filter, cfg.filter_space);
            tokens[i].push(tok);
            fallbacks[i].push(fell_back);
            dec_in[i].push(tok);
        }
    }
    Ok(Decoded { tokens, fallbacks })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: usize,
    pub predicted: Vec<usize>,
    pub target: Vec<usize>,
    pub fallback: Vec<bool>,
}

pub const EVAL_BATCH: usize = 100;

/// Decodes every sample, batches in parallel.
pub fn predict<M: Seq2Seq + ?Sized>(model: &M, samples: &[Sample], use_filter: bool) -> Result<Vec<Prediction>> {
    let chunks: Vec<(usize, &[Sample])> = samples.chunks(EVAL_BATCH).enumerate().collect();
    let parts: Vec<Result<Vec<Prediction>>> = chunks
        .par_iter()
        .map(|(c, chunk)| {
            let inputs: Vec<&[usize]> = chunk.iter().map(|s| s.input.as_slice()).collect();
            let d = greedy_decode(model, &inputs, use_filter)?;
            Ok(chunk
                .iter()
                .zip(d.tokens.into_iter().zip(d.fallbacks))
                .enumerate()
                .map(|(i, (s, (p, f)))| Prediction {
                    sample_id: c * EVAL_BATCH + i,
                    predicted: p,
                    target: s.target.clone(),
                    fallback: f,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Pairs `(last input, predicted…)` that are not road connections.
pub fn disconnected_pairs(sample: &Sample, predicted: &[usize], mask: &NeighborMask) -> usize {
    let mut prev = *sample.input.last().expect("non-empty input");
    let mut bad = 0;
    for &t in predicted {
        bad += usize::from(!mask.is_road_edge(prev, t));
        prev = t;
    }
    bad
}

/// Scores predictions. With the filter on, a disconnected pair without a
/// fallback at that step is reported as an error.
pub fn score(
    samples: &[Sample],
    preds: &[Prediction],
    mask: &NeighborMask,
    l_out: usize,
    use_filter: bool,
) -> Result<EvalReport> {
    let p: Vec<Vec<usize>> = preds.iter().map(|x| x.predicted.clone()).collect();
    let t: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
    let mut report = EvalReport::compute(&p, &t, l_out)?;
    report.fallback_count = preds.iter().map(|x| x.fallback.iter().filter(|f| **f).count()).sum();
    for (s, x) in samples.iter().zip(preds) {
        let bad = disconnected_pairs(s, &x.predicted, mask);
        if use_filter && bad > 0 && !x.fallback.iter().any(|f| *f) {
            return Err(Error::invalid(format!(
                "sample {} decoded a disconnected pair without a fallback",
                x.sample_id
            )));
        }
        report.disconnected_pairs += bad;
    }
    Ok(report)
}

pub fn evaluate<M: Seq2Seq + ?Sized>(model: &M, samples: &[Sample], use_filter: bool) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict(model, samples, use_filter)?;
    let report = score(samples, &preds, model.mask(), model.config().l_out, use_filter)?;
    Ok((report, preds))
}

/// CSV `sample_id,step,predicted_token,target_token,fallback_fired`, with
/// 1-based steps.
pub fn write_predictions(w: impl Write, preds: &[Prediction]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sample_id", "step", "predicted_token", "target_token", "fallback_fired"])?;
    for p in preds {
        for (k, (a, b)) in p.predicted.iter().zip(&p.target).enumerate() {
            wr.write_record([
                p.sample_id.to_string(),
                (k + 1).to_string(),
                a.to_string(),
                b.to_string(),
                u8::from(p.fallback[k]).to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_predictions(r: impl std::io::Read) -> Result<Vec<Prediction>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<Prediction> = Vec::new();
    for row in rd.deserialize() {
        let (id, _step, p, t, f): (usize, usize, usize, usize, u8) = row?;
        if out.last().is_none_or(|x| x.sample_id != id) {
            out.push(Prediction {
                sample_id: id,
                predicted: Vec::new(),
                target: Vec::new(),
                fallback: Vec::new(),
            });
        }
        let x = out.last_mut().expect("pushed above");
        x.predicted.push(p);
        x.target.push(t);
        x.fallback.push(f != 0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Scale of the inverse-square-root warmup schedule.
    pub lr_factor: f64,
    pub warmup: usize,
    /// Constant learning rate instead of the schedule.
    pub constant_lr: Option<f64>,
    pub weight_decay: f64,
    pub coupled_l2: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            epochs: 40,
            lr_factor: 0.5,
            warmup: 400,
            constant_lr: None,
            weight_decay: 0.01,
            coupled_l2: false,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, d_model: usize) -> LrSchedule {
        match self.constant_lr {
            Some(lr) => LrSchedule::Constant(lr),
            None => LrSchedule::InverseSqrtWarmup {
                factor: self.lr_factor,
                d_model,
                warmup: self.warmup,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_de: f64,
    pub val_amr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept; `0` for the initial weights.
    pub best_epoch: usize,
    pub best_val_amr: f64,
    pub steps: u64,
    /// `(epoch, step)` at which a non-finite loss or gradient stopped training.
    pub diverged: Option<(usize, u64)>,
}

/// Teacher-forced cross-entropy of one batch.
pub fn batch_loss<M: Seq2Seq + ?Sized>(model: &M, g: &mut Graph, batch: &[Sample]) -> Result<Var> {
    let l_out = model.config().l_out;
    let inputs: Vec<&[usize]> = batch.iter().map(|s| s.input.as_slice()).collect();
    let prefixes: Vec<&[usize]> = batch.iter().map(|s| &s.target[..l_out - 1]).collect();
    let logits = model.forward(g, &inputs, &prefixes)?;
    let logits = g.reshape(logits, &[batch.len() * l_out, model.config().n_tokens])?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
    Ok(g.cross_entropy(logits, &targets, None)?)
}

/// Adam training with the best-validation-AMR weights kept. Deterministic for
/// a given model, data and `cfg.seed`.
pub fn train<M: Seq2Seq + ?Sized>(model: &mut M, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let l_out = model.config().l_out;
    for s in train.iter().chain(val) {
        if s.target.len() != l_out || s.input.len() != model.config().l_in {
            return Err(Error::invalid("sample lengths do not match the model config"));
        }
    }
    let use_filter = model.config().use_filter;
    let schedule = cfg.schedule(model.config().d_model);
    let adam = Adam::with_weight_decay(if cfg.coupled_l2 {
        WeightDecay::CoupledL2(cfg.weight_decay)
    } else {
        WeightDecay::Decoupled(cfg.weight_decay)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = Manifest::from_store(model.params());
    let (initial, _) = evaluate(&*model, val, use_filter)?;
    let mut best_amr = initial.amr;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::training(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step));
            let loss = batch_loss(&*model, &mut g, &batch)?;
            let lv = g.value(loss).data()[0];
            let lr = schedule.rate(step);
            let stepped = if lv.is_finite() {
                let grads = g.backward(loss)?;
                let store = model.params_mut();
                store.zero_grad();
                g.accumulate_param_grads(&grads, store);
                if let Some(c) = cfg.clip_norm {
                    store.clip_grad_norm(c);
                }
                adam.step(store, lr).is_ok()
            } else {
                false
            };
            if !stepped {
                best.load_into(model.params_mut())?;
                return Ok(TrainOutcome {
                    history,
                    best_epoch,
                    best_val_amr: best_amr,
                    steps: step,
                    diverged: Some((epoch, step)),
                });
            }
            loss_sum += lv;
            batches += 1;
        }
        let (report, _) = evaluate(&*model, val, use_filter)?;
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            lr: schedule.rate(step),
            val_de: report.de,
            val_amr: report.amr,
        });
        if report.amr > best_amr {
            best_amr = report.amr;
            best_epoch = epoch;
            best = Manifest::from_store(model.params());
        }
    }
    best.load_into(model.params_mut())?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_amr: best_amr,
        steps: step,
        diverged: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub mask_fingerprint: String,
    /// Vocabulary file the token ids refer to, relative to the checkpoint.
    pub vocabulary: String,
    /// `statvtpred` or `transformer`.
    pub kind: String,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const META_FILE: &str = "model.json";

pub fn save_checkpoint<M: Seq2Seq + ?Sized>(model: &M, kind: &str, vocabulary: &str, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    Manifest::from_store(model.params()).save(dir.join(PARAMS_FILE))?;
    let meta = CheckpointMeta {
        config: model.config().clone(),
        mask_fingerprint: model.mask().fingerprint(),
        vocabulary: vocabulary.to_string(),
        kind: kind.to_string(),
    };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_checkpoint_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join(META_FILE))?)?)
}

/// A loaded model of either kind.
pub enum AnyModel {
    Statvtpred(StatvtPred),
    Transformer(TransformerBaseline),
}

impl AnyModel {
    pub fn as_dyn(&self) -> &dyn Seq2Seq {
        match self {
            AnyModel::Statvtpred(m) => m,
            AnyModel::Transformer(m) => m,
        }
    }
}

/// Loads a checkpoint, refusing a mask whose fingerprint differs from the
/// one it was trained with.
pub fn load_checkpoint(dir: impl AsRef<Path>, mask: NeighborMask) -> Result<AnyModel> {
    let dir = dir.as_ref();
    let meta = read_checkpoint_meta(dir)?;
    let fp = mask.fingerprint();
    if fp != meta.mask_fingerprint {
        return Err(Error::MaskMismatch {
            expected: meta.mask_fingerprint,
            found: fp,
        });
    }
    let manifest = Manifest::load(dir.join(PARAMS_FILE))?;
    Ok(match meta.kind.as_str() {
        "transformer" => {
            let mut m = TransformerBaseline::new(meta.config, mask)?;
            manifest.load_into(&mut m.params)?;
            AnyModel::Transformer(m)
        }
        _ => {
            let mut m = StatvtPred::new(meta.config, mask)?;
            manifest.load_into(&mut m.params)?;
            AnyModel::Statvtpred(m)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
