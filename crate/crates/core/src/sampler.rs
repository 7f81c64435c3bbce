//! In-degree constrained edge sampling and depth-limited subgraph unrolling.
//!
//! After [`sample_edgelists`] every node has at most `K` sampled incoming
//! edges, so any node lands in at most [`n_bound`]`(K, r)` of the depth-`r`
//! trees built by [`sample_subgraphs`].

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Maximum sampled in-degree.
    pub k: usize,
    /// Tree depth, equal to the number of GNN aggregation layers.
    pub r: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("sampler k must be >= 1".into()));
        }
        Ok(())
    }
}

/// `N(K, r) = sum_{i=0}^{r} K^i`, with overflow reported instead of wrapped.
pub fn n_bound(k: u64, r: u32) -> Result<u64> {
    if k == 0 {
        return Err(Error::InvalidParameter("n_bound requires k >= 1".into()));
    }
    let overflow = || Error::Overflow(format!("N(K={k}, r={r}) exceeds u64"));
    let mut total: u64 = 0;
    let mut power: u64 = 1;
    for i in 0..=r {
        total = total.checked_add(power).ok_or_else(overflow)?;
        if i < r {
            power = power.checked_mul(k).ok_or_else(overflow)?;
        }
    }
    Ok(total)
}

/// Sampled incoming edge lists and their reversal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeLists {
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    sampled_in_degree: Vec<usize>,
    dropped: Vec<usize>,
}

impl EdgeLists {
    /// Builds edge lists from already-sampled incoming lists, reversing them.
    pub fn from_incoming(incoming: Vec<Vec<usize>>, sampled_in_degree: Vec<usize>, dropped: Vec<usize>) -> Self {
        let n = incoming.len();
        let mut outgoing = vec![Vec::new(); n];
        for (v, sources) in incoming.iter().enumerate() {
            for &u in sources {
                outgoing[u].push(v);
            }
        }
        Self {
            incoming,
            outgoing,
            sampled_in_degree,
            dropped,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.incoming.len()
    }

    /// Sampled sources of edges into `v` (`RE_v`), sorted.
    pub fn incoming(&self, v: usize) -> &[usize] {
        &self.incoming[v]
    }

    /// Nodes whose sampled incoming list contains `v` (`E_v`), sorted.
    pub fn outgoing(&self, v: usize) -> &[usize] {
        &self.outgoing[v]
    }

    /// Number of edges kept by the Bernoulli step, before the cap is applied.
    pub fn sampled_in_degree(&self, v: usize) -> usize {
        self.sampled_in_degree[v]
    }

    /// Nodes whose incoming list was emptied because it exceeded `K`.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    /// The same sampled graph with node `w` deleted. Removal can only shrink
    /// in-degrees, so the `K` cap still holds.
    pub fn without_node(&self, w: usize) -> Self {
        let incoming = self
            .incoming
            .iter()
            .enumerate()
            .map(|(v, list)| {
                if v == w {
                    Vec::new()
                } else {
                    list.iter().copied().filter(|&u| u != w).collect()
                }
            })
            .collect();
        let dropped = self.dropped.iter().copied().filter(|&v| v != w).collect();
        let mut sampled = self.sampled_in_degree.clone();
        sampled[w] = 0;
        Self::from_incoming(incoming, sampled, dropped)
    }
}

/// Samples each node's incoming edges from training sources.
///
/// Node `v` with `d_v` training in-edges keeps each independently with
/// probability `min(1, K / (2 d_v))`. If more than `K` survive, `v` is dropped:
/// its incoming list becomes empty. The draws for `v` come from its own stream,
/// so the result is the same for any thread count.
pub fn sample_edgelists(g: &GraphDataset, cfg: &SamplerConfig) -> Result<EdgeLists> {
    cfg.validate()?;
    let k = cfg.k;
    let per_node: Vec<(Vec<usize>, usize)> = (0..g.num_nodes())
        .into_par_iter()
        .map(|v| {
            let candidates: Vec<usize> = g.in_neighbors(v).iter().copied().filter(|&u| g.is_train(u)).collect();
            if candidates.is_empty() {
                return (candidates, 0);
            }
            let p = (k as f64 / (2.0 * candidates.len() as f64)).min(1.0);
            let mut r = rng::stream(cfg.seed, Domain::EdgeSampling, v as u64);
            let kept: Vec<usize> = candidates
                .into_iter()
                .filter(|_| r.random::<f64>() < p)
                .collect();
            let n_kept = kept.len();
            if n_kept > k {
                (Vec::new(), n_kept)
            } else {
                (kept, n_kept)
            }
        })
        .collect();
    let mut incoming = Vec::with_capacity(per_node.len());
    let mut sampled = Vec::with_capacity(per_node.len());
    let mut dropped = Vec::new();
    for (v, (list, n_kept)) in per_node.into_iter().enumerate() {
        if n_kept > k {
            dropped.push(v);
        }
        incoming.push(list);
        sampled.push(n_kept);
    }
    Ok(EdgeLists::from_incoming(incoming, sampled, dropped))
}

/// One vertex of an unrolled subgraph tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub node: usize,
    pub depth: usize,
    /// Indices into [`Subgraph::nodes`].
    pub children: Vec<usize>,
}

/// A depth-limited tree rooted at a training node. The same graph node may
/// appear at several positions; `contains` lists each distinct id once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    nodes: Vec<TreeNode>,
    contains: Vec<usize>,
}

impl Subgraph {
    /// Unrolls `depth` levels below `root`, taking children from `children_of`.
    /// With `cap`, at most that many children are kept per vertex.
    pub fn unroll<'a, F>(root: usize, depth: usize, children_of: F, cap: Option<usize>) -> Self
    where
        F: Fn(usize) -> &'a [usize],
    {
        let mut nodes = vec![TreeNode {
            node: root,
            depth: 0,
            children: Vec::new(),
        }];
        // explicit stack; parents always get a smaller index than their children
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let (node, d) = (nodes[idx].node, nodes[idx].depth);
            if d == depth {
                continue;
            }
            let mut kids = children_of(node);
            if let Some(c) = cap {
                kids = &kids[..kids.len().min(c)];
            }
            let mut child_idx = Vec::with_capacity(kids.len());
            for &u in kids {
                child_idx.push(nodes.len());
                nodes.push(TreeNode {
                    node: u,
                    depth: d + 1,
                    children: Vec::new(),
                });
            }
            stack.extend(child_idx.iter().rev());
            nodes[idx].children = child_idx;
        }
        let mut contains: Vec<usize> = nodes.iter().map(|t| t.node).collect();
        contains.sort_unstable();
        contains.dedup();
        Self { nodes, contains }
    }

    /// Builds a tree directly from its vertices. `nodes[0]` is the root and
    /// every child index must point after its parent.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidParameter("subgraph needs a root".into()));
        }
        for (i, t) in nodes.iter().enumerate() {
            for &c in &t.children {
                if c <= i || c >= nodes.len() || nodes[c].depth != t.depth + 1 {
                    return Err(Error::InvalidParameter(format!("bad child index {c} under vertex {i}")));
                }
            }
        }
        let mut contains: Vec<usize> = nodes.iter().map(|t| t.node).collect();
        contains.sort_unstable();
        contains.dedup();
        Ok(Self { nodes, contains })
    }

    pub fn root(&self) -> usize {
        self.nodes[0].node
    }

    /// Tree vertices, each after its parent; index 0 is the root.
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Distinct graph nodes in the tree, sorted.
    pub fn contains(&self) -> &[usize] {
        &self.contains
    }

    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|t| t.depth).max().unwrap_or(0)
    }

    pub fn max_fanout(&self) -> usize {
        self.nodes.iter().map(|t| t.children.len()).max().unwrap_or(0)
    }
}

/// Depth-`r` tree rooted at `root`, with children `E_u` at every vertex `u`.
pub fn dfs_tree(root: usize, el: &EdgeLists, r: usize) -> Subgraph {
    Subgraph::unroll(root, r, |u| el.outgoing(u), None)
}

/// Depth-`r` tree over the unsampled graph, following out-edges from any node,
/// with at most `cap` children per vertex. Used at inference time.
pub fn full_neighborhood_tree(g: &GraphDataset, root: usize, r: usize, cap: usize) -> Subgraph {
    Subgraph::unroll(root, r, |u| g.out_neighbors(u), Some(cap))
}

/// One tree per training node, in training-set order.
pub fn subgraphs_from_edgelists(g: &GraphDataset, el: &EdgeLists, r: usize) -> Vec<Subgraph> {
    g.train_set().par_iter().map(|&v| dfs_tree(v, el, r)).collect()
}

/// Samples edge lists once and unrolls a tree for every training node.
pub fn sample_subgraphs(g: &GraphDataset, cfg: &SamplerConfig) -> Result<Vec<Subgraph>> {
    let el = sample_edgelists(g, cfg)?;
    Ok(subgraphs_from_edgelists(g, &el, cfg.r))
}

/// Number of subgraphs containing a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Occurrence {
    pub node: usize,
    pub count: usize,
}

/// Node present in the most subgraphs; ties go to the smallest id. `None` for
/// an empty list.
pub fn max_occurrence(subgraphs: &[Subgraph]) -> Option<Occurrence> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in subgraphs {
        for &u in s.contains() {
            *counts.entry(u).or_insert(0) += 1;
        }
    }
    let mut best: Option<Occurrence> = None;
    for (node, count) in counts {
        if best.is_none_or(|b| count > b.count) {
            best = Some(Occurrence { node, count });
        }
    }
    best
}
