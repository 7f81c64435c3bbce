#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use dpgraph::graph::GraphDataset;
use dpgraph::model::{loss_and_gradient, Activation, Dense, Features, ModelConfig, ModelParams};
use dpgraph::sampler::{sample_subgraphs, SamplerConfig, Subgraph};
use dpgraph::verify::random_digraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use rayon::prelude::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense(layer: &Dense, x: &[f64]) -> Vec<f64> {
    (0..layer.out_dim)
        .map(|o| layer.bias[o] + (0..layer.in_dim).map(|j| layer.weight[o * layer.in_dim + j] * x[j]).sum::<f64>())
        .collect()
}

fn act(a: Activation, v: &[f64], margin: &mut f64) -> Vec<f64> {
    v.iter()
        .map(|&x| match a {
            Activation::Relu => {
                *margin = margin.min(x.abs());
                x.max(0.0)
            }
            Activation::Tanh => x.tanh(),
        })
        .collect()
}

/// Recursive tree evaluation written independently of the library's
/// iterative forward pass.
pub fn oracle_logits(sub: &Subgraph, x: &Features<'_>, p: &ModelParams, cfg: &ModelConfig) -> Vec<f64> {
    oracle_with_margin(sub, x, p, cfg).0
}

/// Logits and the smallest `|pre-activation|` fed to a ReLU, which bounds
/// how far a finite-difference step can go before crossing a kink.
pub fn oracle_with_margin(sub: &Subgraph, x: &Features<'_>, p: &ModelParams, cfg: &ModelConfig) -> (Vec<f64>, f64) {
    fn embed(i: usize, sub: &Subgraph, x: &Features<'_>, p: &ModelParams, cfg: &ModelConfig, m: &mut f64) -> Vec<f64> {
        let t = &sub.nodes()[i];
        let mut z = x.row(t.node).to_vec();
        for layer in p.encoder() {
            z = act(cfg.activation, &dense(layer, &z), m);
        }
        if t.depth >= cfg.layers_r.max(1) {
            return z;
        }
        let w = 1.0 / (t.children.len() + 1) as f64;
        let mut s: Vec<f64> = z.iter().map(|v| v * w).collect();
        for &c in &t.children {
            let h = embed(c, sub, x, p, cfg, m);
            for (a, b) in s.iter_mut().zip(h) {
                *a += w * b;
            }
        }
        act(cfg.activation, &dense(p.aggregation(), &s), m)
    }
    let mut margin = f64::INFINITY;
    let mut h = embed(0, sub, x, p, cfg, &mut margin);
    let dec = p.decoder();
    for (i, layer) in dec.iter().enumerate() {
        h = dense(layer, &h);
        if i + 1 < dec.len() {
            h = act(cfg.activation, &h, &mut margin);
        }
    }
    (h, margin)
}

pub fn oracle_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max + z.ln() - logits[label]
}

pub struct Instance {
    pub graph: GraphDataset,
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub sub: Subgraph,
    pub label: usize,
}

/// Random graph, architecture, parameters and sampled training tree. ReLU
/// draws with a pre-activation within `1e-2` of zero are redrawn, since a
/// central difference across the kink is meaningless.
pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    loop {
        let inst = draw_instance(&mut r);
        let x = Features::from(&inst.graph);
        if oracle_with_margin(&inst.sub, &x, &inst.params, &inst.cfg).1 >= 1e-2 {
            return inst;
        }
    }
}

fn draw_instance(r: &mut ChaCha8Rng) -> Instance {
    let n = r.random_range(4..=14);
    let d = r.random_range(1..=5);
    let q = r.random_range(2..=4);
    let graph = random_digraph(n, 0.35, 0.8, d, q, r.random()).unwrap();
    let cfg = ModelConfig {
        n_enc: r.random_range(1..=2),
        n_dec: r.random_range(1..=2),
        hidden: r.random_range(2..=6),
        activation: if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu },
        layers_r: r.random_range(0..=2),
    };
    let sampler = SamplerConfig {
        k: r.random_range(1..=3),
        r: cfg.layers_r,
        seed: r.random(),
    };
    let mut subs = sample_subgraphs(&graph, &sampler).unwrap();
    // prefer a tree with children when one exists
    subs.sort_by_key(|s| std::cmp::Reverse(s.size()));
    let sub = subs.swap_remove(r.random_range(0..subs.len().min(2)));
    let mut params = ModelParams::init(&cfg, d, graph.num_classes(), r.random()).unwrap();
    let scale = r.random_range(0.5..2.0);
    params.values_mut().for_each(|v| *v *= scale);
    let label = graph.label(sub.root()).unwrap();
    Instance { graph, cfg, params, sub, label }
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over all
/// coordinates, with five-point central differences of step `1e-4` on the
/// oracle loss.
pub fn gradient_relative_error(inst: &Instance) -> f64 {
    let x = Features::from(&inst.graph);
    let (_, g) = loss_and_gradient(&inst.sub, &x, inst.label, &inst.params, &inst.cfg).unwrap();
    let analytic: Vec<f64> = g.grads.values().copied().collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let eval = |delta: f64| {
            let mut p = inst.params.clone();
            *p.values_mut().nth(i).unwrap() += delta;
            oracle_loss(&oracle_logits(&inst.sub, &x, &p, &inst.cfg), inst.label)
        };
        let num = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

/// Monte-Carlo estimate of the per-step RDP with `rho ~ Hypergeometric(N, d, m)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_gamma(n: u64, d: u64, m: u64, c: f64, sigma: f64, alpha: f64, draws: u64, seed: u64) -> f64 {
    let dist = Hypergeometric::new(n, d, m).unwrap();
    let chunks = 64u64;
    let per = draws / chunks;
    let total: f64 = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut r = rng(seed.wrapping_mul(1_000_003).wrapping_add(k));
            let mut s = 0.0;
            for _ in 0..per {
                let rho = dist.sample(&mut r) as f64;
                s += (alpha * (alpha - 1.0) * 2.0 * rho * rho * c * c / (sigma * sigma)).exp();
            }
            s
        })
        .sum();
    (total / (per * chunks) as f64).ln() / (alpha - 1.0)
}

/// Importance-sampled Monte-Carlo estimate of `P[Binomial(d, p) > k]`
/// drawing from `Binomial(d, q)` and reweighting by the likelihood ratio.
/// Returns `(estimate, standard error)`.
pub fn mc_binomial_tail(d: u64, p: f64, k: u64, q: f64, draws: u64, seed: u64) -> (f64, f64) {
    let dist = Binomial::new(d, q).unwrap();
    let chunks = 64u64;
    let per = draws / chunks;
    let lr = |x: u64| ((p / q).ln() * x as f64 + ((1.0 - p) / (1.0 - q)).ln() * (d - x) as f64).exp();
    let (s, s2) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng(seed.wrapping_mul(7_919).wrapping_add(c));
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..per {
                let x = dist.sample(&mut r);
                if x > k {
                    let w = lr(x);
                    s += w;
                    s2 += w * w;
                }
            }
            (s, s2)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let nd = (per * chunks) as f64;
    let mean = s / nd;
    let var = (s2 / nd - mean * mean).max(0.0);
    (mean, (var / nd).sqrt())
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_dpgraph"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli(args: &[&str], threads: Option<usize>) -> Run {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("RUST_LOG");
    match threads {
        Some(t) => cmd.env("DPGRAPH_THREADS", t.to_string()),
        None => cmd.env_remove("DPGRAPH_THREADS"),
    };
    let out = cmd.output().expect("run dpgraph");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Every file in `dir` with its bytes, sorted by name.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Validation errors of `value` against the shipped schema `name`.
pub fn schema_errors(name: &str, value: &serde_json::Value) -> Vec<String> {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    validator.iter_errors(value).map(|e| e.to_string()).collect()
}

/// Small run config over a generated SBM, as JSON text.
pub fn small_run_config(n: usize, iterations: u64, target_epsilon: Option<f64>) -> String {
    let privacy = match target_epsilon {
        Some(t) => format!(r#"{{"delta": 1e-5, "target_epsilon": {t}}}"#),
        None => r#"{"delta": 1e-5}"#.to_string(),
    };
    format!(
        r#"{{
  "generator": {{"n": {n}, "num_classes": 3, "p_in": 0.1, "p_out": 0.01, "feature_dim": 4, "feature_noise": 1.5, "seed": 3}},
  "sampler": {{"k": 3, "r": 1, "seed": 3}},
  "model": {{"n_enc": 1, "n_dec": 1, "hidden": 8, "activation": "tanh", "layers_r": 1}},
  "train": {{"batch_size": 40, "learning_rate": 0.2, "iterations": {iterations}, "noise_multiplier": 0.0, "optimizer": "adam", "seed": 3, "eval_every": 5}},
  "privacy": {privacy}
}}
"#
    )
}
