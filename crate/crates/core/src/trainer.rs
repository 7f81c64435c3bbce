//! DP-SGD and DP-Adam over sampled training subgraphs.
//!
//! Each step draws a uniform size-`m` subset of the training subgraphs, clips
//! every per-example gradient block by block, sums them in node-id order, adds
//! Gaussian noise with standard deviation `lambda * 2 C_l N(K, r)` to block `l`
//! and applies the optimizer update scaled by `1/m`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, default_alpha_grid, rdp_to_dp, PrivacySpec};
use crate::error::{Error, Result};
use crate::graph::{GraphDataset, Split};
use crate::model::{
    clip_per_layer, forward, loss_and_gradient, per_example_gradient, Features, ModelConfig, ModelParams, BLOCKS,
};
use crate::rng::{self, Domain};
use crate::sampler::{full_neighborhood_tree, n_bound, sample_edgelists, subgraphs_from_edgelists, SamplerConfig, Subgraph};

/// Children kept per vertex when building inference trees.
pub const INFERENCE_FANOUT_CAP: usize = 256;

/// Per-example gradients used to pick clipping thresholds.
pub const CALIBRATION_SAMPLE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

fn default_percentile() -> Option<f64> {
    Some(75.0)
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_eval_every() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    /// 0 trains without noise.
    pub noise_multiplier: f64,
    /// Percentile of initial gradient norms used as each block's threshold;
    /// `None` disables clipping, which is only allowed without noise.
    #[serde(default = "default_percentile")]
    pub clip_percentile: Option<f64>,
    pub optimizer: Optimizer,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn validate(&self, num_train: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size == 0 || self.batch_size > num_train {
            return bad(format!(
                "batch size {} must satisfy 1 <= m <= |V_tr| = {num_train}",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad(format!("noise multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        match self.clip_percentile {
            Some(p) if !(p > 0.0 && p <= 100.0) => return bad(format!("clip percentile must lie in (0, 100], got {p}")),
            None if self.noise_multiplier > 0.0 => return bad("noisy training requires clipping".into()),
            _ => {}
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.adam_eps.is_nan() || self.adam_eps < 0.0 {
            return bad("adam eps must be >= 0".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub delta: f64,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
}

impl PrivacyConfig {
    pub fn grid(&self) -> Vec<f64> {
        self.alpha_grid.clone().unwrap_or_else(default_alpha_grid)
    }
}

/// A training subgraph and the label of its root.
#[derive(Debug, Clone)]
pub struct Example {
    pub subgraph: Subgraph,
    pub label: usize,
}

/// Uniform size-`m` subset of `0..n` without replacement, returned sorted.
pub fn sample_minibatch(n: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::InvalidParameter(format!("batch size {m} exceeds {n} examples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// Nearest-rank percentile of `values`.
pub fn nearest_rank(values: &mut [f64], percentile: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Per-block clipping thresholds: the `percentile` of per-example gradient
/// norms at `params`, over all examples or a uniform subsample of
/// [`CALIBRATION_SAMPLE`] of them.
pub fn calibrate_clip_thresholds(
    examples: &[Example],
    x: &Features<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
    percentile: f64,
    seed: u64,
) -> Result<[f64; 3]> {
    if examples.is_empty() {
        return Err(Error::InvalidParameter("no training subgraphs to calibrate on".into()));
    }
    let chosen: Vec<usize> = if examples.len() > CALIBRATION_SAMPLE {
        let mut r = rng::stream(seed, Domain::Calibration, 0);
        sample_minibatch(examples.len(), CALIBRATION_SAMPLE, &mut r)?
    } else {
        (0..examples.len()).collect()
    };
    let norms: Vec<[f64; 3]> = chosen
        .par_iter()
        .map(|&i| {
            let e = &examples[i];
            let g = per_example_gradient(&e.subgraph, x, e.label, params, cfg)?;
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { root: g.root });
            }
            Ok(g.block_norms())
        })
        .collect::<Result<_>>()?;
    let mut out = [0.0; 3];
    for b in BLOCKS {
        let mut col: Vec<f64> = norms.iter().map(|n| n[b.index()]).collect();
        let c = nearest_rank(&mut col, percentile);
        if c <= 0.0 {
            return Err(Error::DegenerateInit(format!(
                "{} gradients are zero at the {percentile}th percentile",
                b.name()
            )));
        }
        out[b.index()] = c;
    }
    Ok(out)
}

/// Sum of clipped per-example gradients over `batch`, in index order, and the
/// summed loss.
pub fn clipped_gradient_sum(
    examples: &[Example],
    batch: &[usize],
    x: &Features<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
    thresholds: &[f64; 3],
) -> Result<(ModelParams, f64)> {
    let per_example = batch
        .par_iter()
        .map(|&i| {
            let e = &examples[i];
            let (l, g) = loss_and_gradient(&e.subgraph, x, e.label, params, cfg)?;
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { root: g.root });
            }
            Ok((l, clip_per_layer(&g, thresholds)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_example {
        sum.add_scaled(&g.grads, 1.0);
        loss += l;
    }
    Ok((sum, loss))
}

/// Adds `N(0, sigma_l^2)` with `sigma_l = lambda * 2 C_l nbound` to every
/// coordinate of block `l`, drawing in block order. Nothing is drawn when
/// `lambda == 0`.
pub fn add_gaussian_noise(u: &mut ModelParams, thresholds: &[f64; 3], lambda: f64, nbound: u64, rng: &mut ChaCha8Rng) {
    if lambda == 0.0 {
        return;
    }
    for b in BLOCKS {
        let sigma = lambda * 2.0 * thresholds[b.index()] * nbound as f64;
        for v in u.block_mut(b).values_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
}

/// Everything a step needs besides the parameters and optimizer state.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub examples: &'a [Example],
    pub features: Features<'a>,
    pub model: &'a ModelConfig,
    pub thresholds: [f64; 3],
    pub noise_multiplier: f64,
    pub learning_rate: f64,
    pub nbound: u64,
}

impl StepContext<'_> {
    /// Noisy clipped gradient sum for `batch`, plus the mean batch loss.
    fn noisy_sum(&self, params: &ModelParams, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(ModelParams, f64)> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let (mut u, loss) = clipped_gradient_sum(self.examples, batch, &self.features, params, self.model, &self.thresholds)?;
        add_gaussian_noise(&mut u, &self.thresholds, self.noise_multiplier, self.nbound, rng);
        Ok((u, loss / batch.len() as f64))
    }
}

/// Noises the clipped gradient sum `u` of a size-`m` batch and takes the
/// plain SGD step `params - (eta/m) * (u + noise)`.
pub fn sgd_apply(params: &ModelParams, mut u: ModelParams, m: usize, ctx: &StepContext<'_>, rng: &mut ChaCha8Rng) -> ModelParams {
    add_gaussian_noise(&mut u, &ctx.thresholds, ctx.noise_multiplier, ctx.nbound, rng);
    let mut next = params.clone();
    next.add_scaled(&u, -ctx.learning_rate / m as f64);
    next
}

/// One DP-SGD step. Returns the new parameters and the mean loss of the batch
/// before the update.
pub fn dp_sgd_step(
    params: &ModelParams,
    batch: &[usize],
    ctx: &StepContext<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let (u, loss) = clipped_gradient_sum(ctx.examples, batch, &ctx.features, params, ctx.model, &ctx.thresholds)?;
    Ok((sgd_apply(params, u, batch.len(), ctx, rng), loss / batch.len() as f64))
}

/// First and second moment estimates for DP-Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ModelParams,
    pub second: ModelParams,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            t: 0,
        }
    }
}

/// Applies one bias-corrected Adam update with the (already noisy) sum `u`.
pub fn adam_update(
    params: &ModelParams,
    state: &mut AdamState,
    u: &ModelParams,
    learning_rate: f64,
    m: usize,
    betas: (f64, f64),
    eps: f64,
) -> ModelParams {
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step = learning_rate / m as f64;
    let mut next = params.clone();
    for (((p, f), s), &g) in next
        .values_mut()
        .zip(state.first.values_mut())
        .zip(state.second.values_mut())
        .zip(u.values())
    {
        *f = b1 * *f + (1.0 - b1) * g;
        *s = b2 * *s + (1.0 - b2) * g * g;
        let f_hat = *f / c1;
        let s_hat = *s / c2;
        *p -= step * f_hat / (s_hat.sqrt() + eps);
    }
    next
}

/// One DP-Adam step. The noise is added exactly as in [`dp_sgd_step`].
pub fn dp_adam_step(
    params: &ModelParams,
    state: &mut AdamState,
    batch: &[usize],
    ctx: &StepContext<'_>,
    betas: (f64, f64),
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, f64)> {
    let (u, loss) = ctx.noisy_sum(params, batch, rng)?;
    Ok((adam_update(params, state, &u, ctx.learning_rate, batch.len(), betas, eps), loss))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub train_count: usize,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Classes present in the split, most frequent in training first.
    pub per_class: Vec<ClassAccuracy>,
}

/// Accuracy from `(label, prediction)` pairs, with per-class rows ordered by
/// `train_counts` descending.
pub fn accuracy_report(pairs: &[(usize, usize)], train_counts: &[usize]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no labeled nodes to evaluate".into()));
    }
    let q = train_counts
        .len()
        .max(pairs.iter().map(|&(y, _)| y + 1).max().unwrap_or(0));
    let mut support = vec![0usize; q];
    let mut correct = vec![0usize; q];
    for &(y, pred) in pairs {
        support[y] += 1;
        if y == pred {
            correct[y] += 1;
        }
    }
    let mut per_class: Vec<ClassAccuracy> = (0..q)
        .filter(|&c| support[c] > 0)
        .map(|c| ClassAccuracy {
            class: c,
            train_count: train_counts.get(c).copied().unwrap_or(0),
            support: support[c],
            correct: correct[c],
            accuracy: correct[c] as f64 / support[c] as f64,
        })
        .collect();
    per_class.sort_by(|a, b| b.train_count.cmp(&a.train_count).then(a.class.cmp(&b.class)));
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / pairs.len() as f64,
        per_class,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn train_class_counts(g: &GraphDataset) -> Vec<usize> {
    let mut counts = vec![0usize; g.num_classes()];
    for &v in g.train_set() {
        if let Some(y) = g.label(v) {
            counts[y] += 1;
        }
    }
    counts
}

/// Accuracy over the labeled nodes of `split`, predicting from unsampled
/// neighborhoods of depth `cfg.layers_r`.
pub fn evaluate(params: &ModelParams, g: &GraphDataset, split: Split, cfg: &ModelConfig) -> Result<Evaluation> {
    let nodes: Vec<usize> = g
        .split_nodes(split)
        .iter()
        .copied()
        .filter(|&v| g.label(v).is_some())
        .collect();
    let x = Features::from(g);
    let capped = std::sync::atomic::AtomicUsize::new(0);
    let pairs = nodes
        .par_iter()
        .map(|&v| {
            let tree = full_neighborhood_tree(g, v, cfg.layers_r, INFERENCE_FANOUT_CAP);
            if tree.max_fanout() == INFERENCE_FANOUT_CAP {
                capped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            let logits = forward(&tree, &x, params, cfg)?;
            Ok((g.label(v).unwrap_or(0), argmax(&logits)))
        })
        .collect::<Result<Vec<_>>>()?;
    let capped = capped.into_inner();
    if capped > 0 {
        log::warn!("{capped} inference trees hit the fan-out cap of {INFERENCE_FANOUT_CAP}");
    }
    accuracy_report(&pairs, &train_class_counts(g))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Infinite for noiseless runs.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub per_class: Vec<ClassAccuracy>,
    pub thresholds: [f64; 3],
    pub dropped_nodes: usize,
    pub num_train: usize,
}

impl TrainLog {
    pub fn final_epsilon(&self) -> f64 {
        self.rows.last().map_or(f64::INFINITY, |r| r.epsilon)
    }

    pub fn final_test_accuracy(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_accuracy)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,train_loss,val_accuracy,test_accuracy,epsilon")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?}",
                r.step, r.train_loss, r.val_accuracy, r.test_accuracy, r.epsilon
            )?;
        }
        Ok(())
    }

    pub fn write_per_class_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "class,train_count,support,correct,accuracy")?;
        for c in &self.per_class {
            writeln!(w, "{},{},{},{},{:?}", c.class, c.train_count, c.support, c.correct, c.accuracy)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
            let mut buf = Vec::new();
            f(&mut buf).map_err(|e| Error::io(dir.join(name), e))?;
            std::fs::write(dir.join(name), buf).map_err(|e| Error::io(dir.join(name), e))
        };
        write("train_log.csv", &|w| self.write_csv(w))?;
        write("per_class_accuracy.csv", &|w| self.write_per_class_csv(w))
    }
}

/// Epsilon after `steps` iterations; infinite when there is no noise.
pub fn epsilon_after(
    num_train: usize,
    sampler: &SamplerConfig,
    train: &TrainConfig,
    privacy: &PrivacyConfig,
    steps: u64,
) -> Result<f64> {
    if train.noise_multiplier == 0.0 {
        return Ok(f64::INFINITY);
    }
    let spec = PrivacySpec::from_lambda(
        num_train as u64,
        sampler.k as u64,
        sampler.r as u32,
        train.batch_size as u64,
        train.noise_multiplier,
        steps,
        privacy.delta,
        privacy.grid(),
    )?;
    Ok(rdp_to_dp(&spec)?.epsilon)
}

/// Noise multiplier whose epsilon after `train.iterations` steps is at most
/// `target_epsilon`. The calibration tolerance is absorbed by aiming slightly
/// below the target.
pub fn noise_for_target_epsilon(
    num_train: usize,
    sampler: &SamplerConfig,
    train: &TrainConfig,
    privacy: &PrivacyConfig,
    target_epsilon: f64,
) -> Result<f64> {
    let spec = PrivacySpec::from_lambda(
        num_train as u64,
        sampler.k as u64,
        sampler.r as u32,
        train.batch_size as u64,
        1.0,
        train.iterations,
        privacy.delta,
        privacy.grid(),
    )?;
    let sigma = calibrate_sigma(&spec, target_epsilon * (1.0 - 1e-3))?;
    Ok(sigma / (2.0 * n_bound(sampler.k as u64, sampler.r as u32)? as f64))
}

/// Training examples for every labeled training node.
pub fn build_examples(g: &GraphDataset, subgraphs: Vec<Subgraph>) -> Vec<Example> {
    subgraphs
        .into_iter()
        .filter_map(|s| {
            g.label(s.root()).map(|label| Example { subgraph: s, label })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Samples subgraphs once, calibrates thresholds at initialization and runs
/// `iterations` noisy steps, evaluating every `eval_every` steps and at the end.
pub fn train(
    g: &GraphDataset,
    sampler: &SamplerConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
    privacy: &PrivacyConfig,
) -> Result<TrainOutput> {
    sampler.validate()?;
    model.validate()?;
    if model.layers_r != sampler.r {
        return Err(Error::Config(format!(
            "model depth {} differs from sampler depth {}",
            model.layers_r, sampler.r
        )));
    }
    if !(privacy.delta > 0.0 && privacy.delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {}", privacy.delta)));
    }
    let el = sample_edgelists(g, sampler)?;
    let examples = build_examples(g, subgraphs_from_edgelists(g, &el, sampler.r));
    cfg.validate(examples.len())?;
    let nbound = n_bound(sampler.k as u64, sampler.r as u32)?;
    let x = Features::from(g);
    let mut params = ModelParams::init(model, g.feature_dim(), g.num_classes(), cfg.seed)?;
    let thresholds = match cfg.clip_percentile {
        Some(p) => calibrate_clip_thresholds(&examples, &x, &params, model, p, cfg.seed)?,
        None => [f64::INFINITY; 3],
    };
    let ctx = StepContext {
        examples: &examples,
        features: x,
        model,
        thresholds,
        noise_multiplier: cfg.noise_multiplier,
        learning_rate: cfg.learning_rate,
        nbound,
    };
    let mut adam = AdamState::new(&params);
    let mut rows = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_steps = 0u64;
    for step in 1..=cfg.iterations {
        let batch = sample_minibatch(examples.len(), cfg.batch_size, &mut rng::stream(cfg.seed, Domain::Minibatch, step))?;
        let mut noise_rng = rng::stream(cfg.seed, Domain::Noise, step);
        let (next, loss) = match cfg.optimizer {
            Optimizer::Sgd => dp_sgd_step(&params, &batch, &ctx, &mut noise_rng)?,
            Optimizer::Adam => dp_adam_step(&params, &mut adam, &batch, &ctx, cfg.adam_betas, cfg.adam_eps, &mut noise_rng)?,
        };
        params = next;
        loss_acc += loss;
        loss_steps += 1;
        if step % cfg.eval_every == 0 || step == cfg.iterations {
            let val = if g.val_set().is_empty() { f64::NAN } else { evaluate(&params, g, Split::Val, model)?.accuracy };
            let test = if g.test_set().is_empty() { f64::NAN } else { evaluate(&params, g, Split::Test, model)?.accuracy };
            rows.push(LogRow {
                step,
                train_loss: loss_acc / loss_steps as f64,
                val_accuracy: val,
                test_accuracy: test,
                epsilon: epsilon_after(examples.len(), sampler, cfg, privacy, step)?,
            });
            loss_acc = 0.0;
            loss_steps = 0;
        }
    }
    let per_class = if g.test_set().is_empty() {
        Vec::new()
    } else {
        evaluate(&params, g, Split::Test, model)?.per_class
    };
    Ok(TrainOutput {
        params,
        log: TrainLog {
            rows,
            per_class,
            thresholds,
            dropped_nodes: el.dropped().len(),
            num_train: examples.len(),
        },
    })
}
