//! Randomized property suites behind `dpgraph verify`.
//!
//! The occurrence suite checks that constrained sampling caps every in-degree
//! at `K` and that no node appears in more than `N(K, r)` training subgraphs.
//! The sensitivity suite checks that deleting one node moves the full-batch sum
//! of clipped gradients by at most `2 C_l N(K, r)` in every block.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::graph::GraphDataset;
use crate::model::{Activation, Features, ModelConfig, ModelParams, BLOCKS};
use crate::rng::{self, Domain};
use crate::sampler::{max_occurrence, n_bound, sample_edgelists, subgraphs_from_edgelists, SamplerConfig, Subgraph};
use crate::trainer::{build_examples, calibrate_clip_thresholds, clipped_gradient_sum};

/// Erdős–Rényi digraph on `n` nodes with standard-normal features, uniform
/// labels and each node in the training set with probability `train_frac`
/// (the rest go to test). At least one node is always in training.
pub fn random_digraph(n: usize, p: f64, train_frac: f64, feature_dim: usize, num_classes: usize, seed: u64) -> Result<GraphDataset> {
    let mut r = rng::stream(seed, Domain::Generator, 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && r.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let features: Vec<f64> = (0..n * feature_dim).map(|_| r.sample(StandardNormal)).collect();
    let labels = (0..n).map(|_| Some(r.random_range(0..num_classes))).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for v in 0..n {
        if v == 0 || r.random_bool(train_frac) {
            train.push(v);
        } else {
            test.push(v);
        }
    }
    GraphDataset::new(n, edges, features, feature_dim, labels, train, Vec::new(), test)
}

/// Occurrence counts by direct enumeration of every tree's vertices.
pub fn brute_force_occurrences(subgraphs: &[Subgraph], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for s in subgraphs {
        let seen: HashSet<usize> = s.nodes().iter().map(|t| t.node).collect();
        for u in seen {
            counts[u] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Serialize)]
pub struct OccurrenceCase {
    pub n: usize,
    pub p: f64,
    pub k: usize,
    pub r: usize,
    pub seed: u64,
    pub max_occurrence: usize,
    pub n_bound: u64,
    pub max_in_degree: usize,
}

impl OccurrenceCase {
    pub fn occurrence_ok(&self) -> bool {
        self.max_occurrence as u64 <= self.n_bound
    }

    pub fn cap_ok(&self) -> bool {
        self.max_in_degree <= self.k
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OccurrenceSummary {
    pub cases: Vec<OccurrenceCase>,
    pub occurrence_violations: usize,
    pub cap_violations: usize,
    /// Cases where the fast counter and brute force disagree.
    pub count_mismatches: usize,
}

impl OccurrenceSummary {
    pub fn passed(&self) -> bool {
        self.occurrence_violations == 0 && self.cap_violations == 0 && self.count_mismatches == 0
    }
}

pub const OCCURRENCE_K: [usize; 4] = [1, 2, 3, 5];
pub const OCCURRENCE_R: [usize; 3] = [0, 1, 2];
pub const OCCURRENCE_P: [f64; 2] = [0.05, 0.2];
pub const SEEDS_PER_GRAPH: u64 = 3;

/// `trials` random graphs with up to 100 nodes, each sampled for every
/// `K`, `r` and three seeds.
pub fn occurrence_suite(trials: usize, seed: u64) -> Result<OccurrenceSummary> {
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, Domain::Verify, t as u64);
            let n = r.random_range(2..=100);
            let p = OCCURRENCE_P[t % OCCURRENCE_P.len()];
            let g = random_digraph(n, p, 0.8, 1, 2, r.random())?;
            let mut out = Vec::new();
            let mut mismatches = 0;
            for &k in &OCCURRENCE_K {
                for &depth in &OCCURRENCE_R {
                    for s in 0..SEEDS_PER_GRAPH {
                        let cfg = SamplerConfig { k, r: depth, seed: s };
                        let el = sample_edgelists(&g, &cfg)?;
                        let subs = subgraphs_from_edgelists(&g, &el, depth);
                        let counts = brute_force_occurrences(&subs, n);
                        let brute = counts.iter().copied().max().unwrap_or(0);
                        if max_occurrence(&subs).map_or(0, |o| o.count) != brute {
                            mismatches += 1;
                        }
                        out.push(OccurrenceCase {
                            n,
                            p,
                            k,
                            r: depth,
                            seed: s,
                            max_occurrence: brute,
                            n_bound: n_bound(k as u64, depth as u32)?,
                            max_in_degree: (0..n).map(|v| el.incoming(v).len()).max().unwrap_or(0),
                        });
                    }
                }
            }
            Ok((out, mismatches))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cases = Vec::new();
    let mut count_mismatches = 0;
    for (c, m) in per_trial {
        cases.extend(c);
        count_mismatches += m;
    }
    Ok(OccurrenceSummary {
        occurrence_violations: cases.iter().filter(|c| !c.occurrence_ok()).count(),
        cap_violations: cases.iter().filter(|c| !c.cap_ok()).count(),
        count_mismatches,
        cases,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityCase {
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub removed: usize,
    pub thresholds: [f64; 3],
    pub n_bound: u64,
    /// `||u(G) - u(G')||_2` per block.
    pub diff: [f64; 3],
}

impl SensitivityCase {
    pub fn bound(&self, block: usize) -> f64 {
        2.0 * self.thresholds[block] * self.n_bound as f64 + 1e-9
    }

    pub fn ok(&self) -> bool {
        (0..3).all(|b| self.diff[b] <= self.bound(b))
    }

    /// Largest `diff / bound` over blocks.
    pub fn tightness(&self) -> f64 {
        (0..3).map(|b| self.diff[b] / self.bound(b)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivitySummary {
    pub cases: Vec<SensitivityCase>,
    pub violations: usize,
    pub max_tightness: f64,
}

impl SensitivitySummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Tiny GCN used by the sensitivity suite: 4 features, 8 hidden units, 3 classes.
pub fn sensitivity_model(r: usize) -> ModelConfig {
    ModelConfig {
        n_enc: 1,
        n_dec: 1,
        hidden: 8,
        activation: Activation::Tanh,
        layers_r: r,
    }
}

/// Full-batch clipped gradient sums on `g` and on `g` minus `removed`, both
/// built from one sampling of `g` so the remaining nodes keep their draws.
pub fn sensitivity_case(g: &GraphDataset, sampler: &SamplerConfig, removed: usize, init_seed: u64) -> Result<SensitivityCase> {
    let cfg = sensitivity_model(sampler.r);
    let x = Features::from(g);
    let el = sample_edgelists(g, sampler)?;
    let ex = build_examples(g, subgraphs_from_edgelists(g, &el, sampler.r));
    let params = ModelParams::init(&cfg, g.feature_dim(), g.num_classes(), init_seed)?;
    let thresholds = calibrate_clip_thresholds(&ex, &x, &params, &cfg, 75.0, init_seed)?;

    let g2 = g.without_node(removed)?;
    let el2 = el.without_node(removed);
    let ex2 = build_examples(&g2, subgraphs_from_edgelists(&g2, &el2, sampler.r));

    let all = |e: &[_]| (0..e.len()).collect::<Vec<usize>>();
    let (u1, _) = clipped_gradient_sum(&ex, &all(&ex), &x, &params, &cfg, &thresholds)?;
    let (u2, _) = clipped_gradient_sum(&ex2, &all(&ex2), &x, &params, &cfg, &thresholds)?;
    let mut diff = [0.0; 3];
    for b in BLOCKS {
        diff[b.index()] = u1
            .block(b)
            .values()
            .zip(u2.block(b).values())
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt();
    }
    Ok(SensitivityCase {
        n: g.num_nodes(),
        k: sampler.k,
        r: sampler.r,
        removed,
        thresholds,
        n_bound: n_bound(sampler.k as u64, sampler.r as u32)?,
        diff,
    })
}

/// `trials` adjacent pairs on random graphs with 5 to 16 nodes. Half the
/// trials remove the most frequently occurring node, the rest a random one.
pub fn sensitivity_suite(trials: usize, seed: u64) -> Result<SensitivitySummary> {
    let cases = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, Domain::Verify, (1 << 32) + t as u64);
            let n = r.random_range(5..=16);
            let p = if t % 2 == 0 { 0.2 } else { 0.4 };
            let g = random_digraph(n, p, 0.7, 4, 3, r.random())?;
            let sampler = SamplerConfig {
                k: r.random_range(1..=3),
                r: r.random_range(1..=2),
                seed: r.random(),
            };
            let removed = if t % 4 < 2 {
                let subs = subgraphs_from_edgelists(&g, &sample_edgelists(&g, &sampler)?, sampler.r);
                max_occurrence(&subs).map_or(0, |o| o.node)
            } else {
                r.random_range(0..n)
            };
            sensitivity_case(&g, &sampler, removed, r.random())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivitySummary {
        violations: cases.iter().filter(|c| !c.ok()).count(),
        max_tightness: cases.iter().map(SensitivityCase::tightness).fold(0.0, f64::max),
        cases,
    })
}
