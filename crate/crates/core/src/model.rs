//! GCN over unrolled subgraph trees: encoder MLP per vertex, inverse-degree
//! mean aggregation up the tree, decoder MLP at the root. Gradients are
//! derived by hand for this fixed architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::normalize_row;
use crate::rng::{self, Domain};
use crate::sampler::Subgraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn grad(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// Aggregation depth. 0 gives a feature-only model.
    pub layers_r: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_enc: 1,
            n_dec: 1,
            hidden: 32,
            activation: Activation::Tanh,
            layers_r: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_enc) || !(1..=2).contains(&self.n_dec) {
            return Err(Error::InvalidParameter(format!(
                "n_enc and n_dec must be 1 or 2, got {} and {}",
                self.n_enc, self.n_dec
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidParameter("hidden width must be >= 1".into()));
        }
        if self.layers_r > 2 {
            return Err(Error::InvalidParameter(format!(
                "layers_r must be 0, 1 or 2, got {}",
                self.layers_r
            )));
        }
        Ok(())
    }
}

/// Fully connected layer; `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim)) {
            *o += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        out
    }

    /// Accumulates `dW += dout x^T`, `db += dout` into `grad`, returns `W^T dout`.
    fn backward(&self, x: &[f64], dout: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grow[j] += g * x[j];
                dx[j] += g * row[j];
            }
        }
        dx
    }

    fn num_values(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// The three independently clipped parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Encoder,
    Aggregation,
    Decoder,
}

pub const BLOCKS: [Block; 3] = [Block::Encoder, Block::Aggregation, Block::Decoder];

impl Block {
    pub fn index(self) -> usize {
        match self {
            Block::Encoder => 0,
            Block::Aggregation => 1,
            Block::Decoder => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Encoder => "encoder",
            Block::Aggregation => "aggregation",
            Block::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layers: Vec<Dense>,
}

impl ParamBlock {
    /// Weights then bias of each layer, in layer order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(Dense::num_values).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Encoder, aggregation and decoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub blocks: [ParamBlock; 3],
}

impl ModelParams {
    /// All-zero parameters with the layer shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig, in_dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::Shape(format!(
                "need feature dim and class count >= 1, got {in_dim} and {num_classes}"
            )));
        }
        let h = cfg.hidden;
        let enc = (0..cfg.n_enc)
            .map(|i| Dense::zeros(if i == 0 { in_dim } else { h }, h))
            .collect();
        let agg = vec![Dense::zeros(h, h)];
        let dec = (0..cfg.n_dec)
            .map(|i| Dense::zeros(h, if i + 1 == cfg.n_dec { num_classes } else { h }))
            .collect();
        Ok(Self {
            blocks: [ParamBlock { layers: enc }, ParamBlock { layers: agg }, ParamBlock { layers: dec }],
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases.
    pub fn init(cfg: &ModelConfig, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg, in_dim, num_classes)?;
        let mut r = rng::stream(seed, Domain::Init, 0);
        for block in &mut p.blocks {
            for layer in &mut block.layers {
                let bound = 1.0 / (layer.in_dim as f64).sqrt();
                for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                    *w = r.random_range(-bound..bound);
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.values_mut().for_each(|v| *v = 0.0);
        z
    }

    pub fn block(&self, b: Block) -> &ParamBlock {
        &self.blocks[b.index()]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut ParamBlock {
        &mut self.blocks[b.index()]
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.blocks[0].layers
    }

    pub fn aggregation(&self) -> &Dense {
        &self.blocks[1].layers[0]
    }

    pub fn decoder(&self) -> &[Dense] {
        &self.blocks[2].layers
    }

    pub fn in_dim(&self) -> usize {
        self.encoder()[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.decoder().last().map_or(0, |l| l.out_dim)
    }

    /// Every value in block order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(ParamBlock::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(ParamBlock::values_mut)
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(ParamBlock::num_values).sum()
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
            a.layers.len() == b.layers.len()
                && a.layers
                    .iter()
                    .zip(&b.layers)
                    .all(|(x, y)| x.in_dim == y.in_dim && x.out_dim == y.out_dim)
        })
    }

    fn check_finite(&self) -> Result<()> {
        if self.values().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }
}

/// Per-example gradient, shaped like the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grads: ModelParams,
    pub root: usize,
}

impl GradientBundle {
    pub fn block_norms(&self) -> [f64; 3] {
        BLOCKS.map(|b| self.grads.block(b).norm())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|v| v.is_finite())
    }
}

/// Row-major node feature matrix.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Features<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        Ok(Self { data, dim })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, v: usize) -> &'a [f64] {
        &self.data[v * self.dim..(v + 1) * self.dim]
    }
}

impl<'a> From<&'a crate::graph::GraphDataset> for Features<'a> {
    fn from(g: &'a crate::graph::GraphDataset) -> Self {
        Self {
            data: g.features(),
            dim: g.feature_dim(),
        }
    }
}

struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

fn mlp_forward(layers: &[Dense], x: &[f64], act: Activation, activate_last: bool) -> MlpTrace {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let a = layer.apply(&cur);
        let next = if i + 1 < layers.len() || activate_last {
            a.iter().map(|&v| act.apply(v)).collect()
        } else {
            a.clone()
        };
        inputs.push(std::mem::replace(&mut cur, next));
        pre.push(a);
    }
    MlpTrace { inputs, pre, out: cur }
}

/// Backpropagates `dout` (gradient w.r.t. the MLP output) and returns the
/// gradient w.r.t. its input.
fn mlp_backward(
    layers: &[Dense],
    trace: &MlpTrace,
    dout: &[f64],
    act: Activation,
    activate_last: bool,
    grads: &mut [Dense],
) -> Vec<f64> {
    let mut d = dout.to_vec();
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() || activate_last {
            let out = if i + 1 < layers.len() { &trace.inputs[i + 1] } else { &trace.out };
            for ((g, &p), &o) in d.iter_mut().zip(&trace.pre[i]).zip(out) {
                *g *= act.grad(p, o);
            }
        }
        d = layers[i].backward(&trace.inputs[i], &d, &mut grads[i]);
    }
    d
}

/// Whether tree vertex `depth` applies the aggregation layer. The root always
/// does, so a depth-0 model still passes through it with self-weight 1.
fn aggregates(depth: usize, layers_r: usize) -> bool {
    depth < layers_r.max(1)
}

struct ForwardTrace {
    enc: Vec<MlpTrace>,
    /// Per vertex: aggregated input, pre-activation and output, if it aggregates.
    agg: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    emb: Vec<Vec<f64>>,
    dec: MlpTrace,
}

fn check_inputs(sub: &Subgraph, x: &Features<'_>, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if x.dim() != params.in_dim() {
        return Err(Error::Shape(format!(
            "features have width {}, encoder expects {}",
            x.dim(),
            params.in_dim()
        )));
    }
    if params.encoder().len() != cfg.n_enc
        || params.decoder().len() != cfg.n_dec
        || params.aggregation().in_dim != cfg.hidden
    {
        return Err(Error::Shape("parameters do not match the model config".into()));
    }
    if sub.depth() > cfg.layers_r {
        return Err(Error::Shape(format!(
            "subgraph depth {} exceeds model depth {}",
            sub.depth(),
            cfg.layers_r
        )));
    }
    for &v in sub.contains() {
        if v >= x.rows() {
            return Err(Error::Shape(format!("node {v} has no feature row")));
        }
        if x.row(v).iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite(format!("features of node {v}")));
        }
    }
    params.check_finite()
}

fn forward_trace(sub: &Subgraph, x: &Features<'_>, params: &ModelParams, cfg: &ModelConfig) -> Result<ForwardTrace> {
    check_inputs(sub, x, params, cfg)?;
    let act = cfg.activation;
    let verts = sub.nodes();
    let enc: Vec<MlpTrace> = verts
        .iter()
        .map(|t| mlp_forward(params.encoder(), x.row(t.node), act, true))
        .collect();
    let mut emb: Vec<Vec<f64>> = vec![Vec::new(); verts.len()];
    let mut agg = Vec::with_capacity(verts.len());
    agg.resize_with(verts.len(), || None);
    // children always come after their parent, so walk backwards
    for i in (0..verts.len()).rev() {
        let t = &verts[i];
        if !aggregates(t.depth, cfg.layers_r) {
            emb[i] = enc[i].out.clone();
            continue;
        }
        let kids: Vec<usize> = t.children.iter().map(|&c| verts[c].node).collect();
        let w = normalize_row(&kids, t.node);
        let mut s: Vec<f64> = enc[i].out.iter().map(|v| w[0] * v).collect();
        for (&c, &wc) in t.children.iter().zip(&w[1..]) {
            for (acc, v) in s.iter_mut().zip(&emb[c]) {
                *acc += wc * v;
            }
        }
        let a = params.aggregation().apply(&s);
        emb[i] = a.iter().map(|&v| act.apply(v)).collect();
        agg[i] = Some((s, a));
    }
    let dec = mlp_forward(params.decoder(), &emb[0], act, false);
    Ok(ForwardTrace { enc, agg, emb, dec })
}

/// Logits of the root of `sub`.
pub fn forward(sub: &Subgraph, x: &Features<'_>, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    Ok(forward_trace(sub, x, params, cfg)?.dec.out)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Softmax cross-entropy `-log softmax(logits)[label]`.
pub fn loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[label])
}

/// `softmax(logits) - onehot(label)`.
pub fn loss_gradient(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut g: Vec<f64> = log_softmax(logits).into_iter().map(f64::exp).collect();
    g[label] -= 1.0;
    Ok(g)
}

/// Loss and its exact gradient for the example rooted at `sub.root()`.
pub fn loss_and_gradient(
    sub: &Subgraph,
    x: &Features<'_>,
    label: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(f64, GradientBundle)> {
    let trace = forward_trace(sub, x, params, cfg)?;
    let value = loss(&trace.dec.out, label)?;
    let dlogits = loss_gradient(&trace.dec.out, label)?;
    let act = cfg.activation;
    let mut grads = params.zeros_like();
    let [enc_g, agg_g, dec_g] = &mut grads.blocks;

    let verts = sub.nodes();
    let mut demb: Vec<Vec<f64>> = vec![vec![0.0; cfg.hidden]; verts.len()];
    demb[0] = mlp_backward(params.decoder(), &trace.dec, &dlogits, act, false, &mut dec_g.layers);

    let mut dz: Vec<Vec<f64>> = vec![vec![0.0; cfg.hidden]; verts.len()];
    for i in 0..verts.len() {
        let Some((s, a)) = &trace.agg[i] else {
            dz[i] = std::mem::take(&mut demb[i]);
            continue;
        };
        let da: Vec<f64> = demb[i]
            .iter()
            .zip(a)
            .zip(&trace.emb[i])
            .map(|((g, &p), &o)| g * act.grad(p, o))
            .collect();
        let ds = params.aggregation().backward(s, &da, &mut agg_g.layers[0]);
        let w = 1.0 / (verts[i].children.len() + 1) as f64;
        for (acc, g) in dz[i].iter_mut().zip(&ds) {
            *acc += w * g;
        }
        for &c in &verts[i].children {
            for (acc, g) in demb[c].iter_mut().zip(&ds) {
                *acc += w * g;
            }
        }
    }
    for (trace, d) in trace.enc.iter().zip(&dz) {
        if d.iter().all(|&g| g == 0.0) {
            continue;
        }
        mlp_backward(params.encoder(), trace, d, act, true, &mut enc_g.layers);
    }
    Ok((
        value,
        GradientBundle {
            grads,
            root: sub.root(),
        },
    ))
}

/// Exact gradient of the loss at `sub.root()` with label `label`.
pub fn per_example_gradient(
    sub: &Subgraph,
    x: &Features<'_>,
    label: usize,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<GradientBundle> {
    loss_and_gradient(sub, x, label, params, cfg).map(|(_, g)| g)
}

/// Scales each block to norm at most its threshold; blocks already within
/// their threshold are returned untouched.
pub fn clip_per_layer(g: &GradientBundle, thresholds: &[f64; 3]) -> GradientBundle {
    let mut out = g.clone();
    for b in BLOCKS {
        let c = thresholds[b.index()];
        let block = out.grads.block_mut(b);
        let norm = block.norm();
        if norm <= c {
            continue;
        }
        let mut scale = c / norm;
        // rounding can leave the scaled norm a few ulps above c; shrink until it
        // is not, so clipping twice changes nothing
        while block.values().map(|v| (v * scale).powi(2)).sum::<f64>().sqrt() > c {
            scale *= 1.0 - f64::EPSILON;
        }
        block.values_mut().for_each(|v| *v *= scale);
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    in_dim: usize,
    num_classes: usize,
    blocks: Vec<BlockShape>,
    num_values: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockShape {
    name: String,
    layers: Vec<[usize; 2]>,
}

const CHECKPOINT_FORMAT: &str = "dpgraph-f64le-v1";

/// Writes `<stem>.bin` (little-endian f64 in block order, weights then bias per
/// layer) and `<stem>.json` (shape header).
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, dir: &Path, stem: &str) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        config: *cfg,
        in_dim: params.in_dim(),
        num_classes: params.num_classes(),
        blocks: BLOCKS
            .iter()
            .map(|&b| BlockShape {
                name: b.name().into(),
                layers: params.block(b).layers.iter().map(|l| [l.in_dim, l.out_dim]).collect(),
            })
            .collect(),
        num_values: params.num_values(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&header)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    for v in params.values() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(ModelParams, ModelConfig)> {
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!("unknown checkpoint format {:?}", header.format)));
    }
    let mut params = ModelParams::zeros(&header.config, header.in_dim, header.num_classes)?;
    if params.num_values() != header.num_values {
        return Err(Error::Shape("checkpoint header disagrees with its config".into()));
    }
    let file = File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = [0u8; 8];
    for v in params.values_mut() {
        r.read_exact(&mut buf).map_err(|e| Error::io(&bin_path, e))?;
        *v = f64::from_le_bytes(buf);
    }
    if r.read(&mut buf).map_err(|e| Error::io(&bin_path, e))? != 0 {
        return Err(Error::Shape("checkpoint has trailing bytes".into()));
    }
    Ok((params, header.config))
}
