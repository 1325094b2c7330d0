//! Binary neural decision tree over patch features.
//!
//! Every non-root node owns a patch selector (single-query attention from
//! the parent embedding onto the patches, followed by a hard argmax pick)
//! and a small refinement network mapping `(parent, selected patch)` to the
//! node's own embedding. Leaves are combined by one of five strategies.
//!
//! Nodes are numbered in heap order: the root (the image representation,
//! no parameters) is 0 and the children of `n` are `2n + 1` and `2n + 2`.

pub mod trace;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PatchSet;
use crate::error::{Error, Result};
use crate::tensor::{argmax, BatchNorm1d, Dropout, Graph, Linear, MhaBlock, ParamStore, SelectionGrad, Var};

pub use trace::{DecisionTrace, LeafRecord, NodeRecord, Prediction, SampleInfo, TRACE_SCHEMA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeafStrategy {
    Mean,
    ProbSoft,
    ProbHard,
    LearnSoft,
    #[default]
    LearnHard,
}

impl LeafStrategy {
    pub const ALL: [LeafStrategy; 5] = [
        LeafStrategy::Mean,
        LeafStrategy::ProbSoft,
        LeafStrategy::ProbHard,
        LeafStrategy::LearnSoft,
        LeafStrategy::LearnHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LeafStrategy::Mean => "mean",
            LeafStrategy::ProbSoft => "prob-soft",
            LeafStrategy::ProbHard => "prob-hard",
            LeafStrategy::LearnSoft => "learn-soft",
            LeafStrategy::LearnHard => "learn-hard",
        }
    }

    pub fn is_hard(self) -> bool {
        matches!(self, LeafStrategy::ProbHard | LeafStrategy::LearnHard)
    }
}

impl fmt::Display for LeafStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LeafStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LeafStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown leaf strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub depth: usize,
    pub node_hidden: usize,
    pub selector_heads: usize,
    pub dropout_rate: f64,
    pub strategy: LeafStrategy,
    pub selection_grad: SelectionGrad,
    pub tau_select: f64,
    pub tau_path: f64,
    pub per_leaf_scorer: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            depth: 3,
            node_hidden: 64,
            selector_heads: 4,
            dropout_rate: 0.0,
            strategy: LeafStrategy::LearnHard,
            selection_grad: SelectionGrad::StraightThrough,
            tau_select: 1.0,
            tau_path: 1.0,
            per_leaf_scorer: false,
        }
    }
}

impl TreeConfig {
    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Nodes with parameters: every node except the root.
    pub fn node_count(&self) -> usize {
        (1 << (self.depth + 1)) - 2
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!("tree depth {} not in 1..=16", self.depth)));
        }
        if self.node_hidden == 0 {
            return Err(Error::Config("node_hidden must be at least 1".into()));
        }
        if self.selector_heads == 0 || model_dim % self.selector_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} not divisible by selector_heads {}",
                self.selector_heads
            )));
        }
        if !(self.tau_select > 0.0) || !(self.tau_path > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "tree dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

pub fn parent(id: usize) -> Option<usize> {
    (id > 0).then(|| (id - 1) / 2)
}

pub fn children(id: usize) -> [usize; 2] {
    [2 * id + 1, 2 * id + 2]
}

pub fn node_depth(id: usize) -> usize {
    (usize::BITS - 1 - (id + 1).leading_zeros()) as usize
}

/// Node ids from depth 1 down to the given leaf.
pub fn path_to_leaf(depth: usize, leaf: usize) -> Vec<usize> {
    let mut id = (1 << depth) - 1 + leaf;
    let mut path = Vec::with_capacity(depth);
    while id > 0 {
        path.push(id);
        id = (id - 1) / 2;
    }
    path.reverse();
    path
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub selector: MhaBlock,
    pub fc1: Linear,
    pub dropout: Dropout,
    pub fc2: Linear,
    pub norm: BatchNorm1d,
}

/// One node's contribution to a forward pass.
#[derive(Debug, Clone)]
pub struct NodeStep {
    pub embed: Var,
    pub selected: Var,
    pub indices: Vec<usize>,
    pub weights: Var,
}

/// Dropout layer ids for tree nodes start here.
const DROPOUT_ID_BASE: u64 = 10_000;

impl TreeNode {
    fn new<R: Rng + ?Sized>(
        id: usize,
        cfg: &TreeConfig,
        model_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let name = |part: &str| format!("tree.node{id}.{part}");
        Ok(TreeNode {
            id,
            depth: node_depth(id),
            selector: MhaBlock::new(store, &name("selector"), model_dim, cfg.selector_heads, rng)?,
            fc1: Linear::new(store, &name("fc1"), 2 * model_dim, cfg.node_hidden, true, rng),
            dropout: Dropout {
                rate: cfg.dropout_rate,
                layer_id: DROPOUT_ID_BASE + id as u64,
            },
            fc2: Linear::new(store, &name("fc2"), cfg.node_hidden, model_dim, true, rng),
            norm: BatchNorm1d::new(store, &name("norm"), model_dim),
        })
    }

    /// Selects one patch given the parent embedding `[B, D]` and refines the
    /// pair into this node's embedding.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        parent_embed: Var,
        patches: Var,
        selection_grad: SelectionGrad,
        tau_select: f64,
    ) -> Result<NodeStep> {
        let weights = self.selector.weights(g, store, parent_embed, patches)?;
        let (selected, indices) = g.hard_select(patches, weights, selection_grad, tau_select)?;
        let h = g.concat(&[parent_embed, selected])?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.dropout.forward(g, h)?;
        let h = self.fc2.forward(g, store, h)?;
        let embed = self.norm.forward(g, store, h)?;
        Ok(NodeStep {
            embed,
            selected,
            indices,
            weights,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Tree {
    config: TreeConfig,
    model_dim: usize,
    nodes: Vec<TreeNode>,
    scorers: Vec<Linear>,
    head: Linear,
}

/// Everything a tree forward pass produces, still on the graph.
#[derive(Debug, Clone)]
pub struct TreeOutput {
    pub x_t: Var,
    pub logits: Var,
    /// Indexed by node id; `None` for the root.
    pub steps: Vec<Option<NodeStep>>,
    pub leaf_embeds: Var,
    /// `[B, N]` leaf weights; `None` for the mean strategy.
    pub leaf_weights: Option<Var>,
    /// Per sample: the selected leaf under hard strategies, the highest
    /// weighted leaf under soft ones (leaf 0 under mean).
    pub leaf_index: Vec<usize>,
}

impl Tree {
    pub fn new<R: Rng + ?Sized>(
        config: &TreeConfig,
        model_dim: usize,
        class_count: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(model_dim)?;
        let nodes = (1..=config.node_count())
            .map(|id| TreeNode::new(id, config, model_dim, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let scorer_count = if config.per_leaf_scorer { config.leaf_count() } else { 1 };
        let scorers = (0..scorer_count)
            .map(|i| {
                let name = if config.per_leaf_scorer {
                    format!("tree.scorer{i}")
                } else {
                    "tree.scorer".to_string()
                };
                Linear::new(store, &name, model_dim, 1, true, rng)
            })
            .collect();
        let head = Linear::new(store, "tree.head", model_dim, class_count, true, rng);
        Ok(Tree {
            config: config.clone(),
            model_dim,
            nodes,
            scorers,
            head,
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id - 1]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn scorers(&self) -> &[Linear] {
        &self.scorers
    }

    pub fn head_layer(&self) -> &Linear {
        &self.head
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ps: &PatchSet) -> Result<TreeOutput> {
        let cfg = &self.config;
        let d = self.model_dim;
        let ps_shape = g.shape(ps.patches).to_vec();
        if ps_shape.len() != 3 || ps_shape[2] != d || g.shape(ps.image) != [ps_shape[0], d] {
            return Err(Error::dim(format!("tree input {ps_shape:?} for model dim {d}")));
        }
        let mut steps: Vec<Option<NodeStep>> = vec![None; cfg.node_count() + 1];
        let mut embeds = vec![ps.image];
        let mut frontier = vec![0usize];
        for _ in 0..cfg.depth {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for &pid in &frontier {
                let parent_embed = embeds[pid];
                for cid in children(pid) {
                    let step = self.node(cid).step(
                        g,
                        store,
                        parent_embed,
                        ps.patches,
                        cfg.selection_grad,
                        cfg.tau_select,
                    )?;
                    if embeds.len() <= cid {
                        embeds.resize(cid + 1, ps.image);
                    }
                    embeds[cid] = step.embed;
                    steps[cid] = Some(step);
                    next.push(cid);
                }
            }
            frontier = next;
        }
        let leaves: Vec<Var> = frontier.iter().map(|&id| embeds[id]).collect();
        let leaf_embeds = g.stack(&leaves)?;
        let batch = ps_shape[0];
        let (x_t, leaf_weights, leaf_index) = match cfg.strategy {
            LeafStrategy::Mean => (select_leaf_mean(g, leaf_embeds)?, None, vec![0; batch]),
            LeafStrategy::LearnSoft | LeafStrategy::LearnHard => {
                let hard = cfg.strategy == LeafStrategy::LearnHard;
                let (x_t, w, idx) = self.select_leaf_learn(g, store, leaf_embeds, &leaves, hard)?;
                (x_t, Some(w), idx)
            }
            LeafStrategy::ProbSoft | LeafStrategy::ProbHard => {
                let hard = cfg.strategy == LeafStrategy::ProbHard;
                let (x_t, p, idx) = select_leaf_prob(g, leaf_embeds, &embeds, &steps, cfg, hard)?;
                (x_t, Some(p), idx)
            }
        };
        let logits = self.head.forward(g, store, x_t)?;
        Ok(TreeOutput {
            x_t,
            logits,
            steps,
            leaf_embeds,
            leaf_weights,
            leaf_index,
        })
    }

    /// Raw per-leaf scores `[B, N]` from the leaf scorer(s).
    pub fn leaf_scores(&self, g: &mut Graph, store: &ParamStore, leaf_embeds: Var, leaves: &[Var]) -> Result<Var> {
        let s = g.shape(leaf_embeds).to_vec();
        if self.scorers.len() == 1 {
            let scores = self.scorers[0].forward(g, store, leaf_embeds)?;
            g.reshape(scores, &[s[0], s[1]])
        } else {
            let per_leaf = leaves
                .iter()
                .zip(&self.scorers)
                .map(|(&leaf, scorer)| scorer.forward(g, store, leaf))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&per_leaf)
        }
    }

    /// Learned leaf weights `W_l = softmax(scores)`. Hard: the argmax leaf's
    /// embedding. Soft: the `W_l`-weighted sum of leaf embeddings.
    pub fn select_leaf_learn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaf_embeds: Var,
        leaves: &[Var],
        hard: bool,
    ) -> Result<(Var, Var, Vec<usize>)> {
        let scores = self.leaf_scores(g, store, leaf_embeds, leaves)?;
        select_leaf_from_scores(g, leaf_embeds, scores, hard, self.config.selection_grad, self.config.tau_select)
    }
}

/// Softmax of `scores` followed by hard or soft leaf selection.
pub fn select_leaf_from_scores(
    g: &mut Graph,
    leaf_embeds: Var,
    scores: Var,
    hard: bool,
    selection_grad: SelectionGrad,
    tau: f64,
) -> Result<(Var, Var, Vec<usize>)> {
    let weights = g.softmax(scores)?;
    select_leaf_weighted(g, leaf_embeds, weights, hard, selection_grad, tau)
}

fn select_leaf_weighted(
    g: &mut Graph,
    leaf_embeds: Var,
    weights: Var,
    hard: bool,
    selection_grad: SelectionGrad,
    tau: f64,
) -> Result<(Var, Var, Vec<usize>)> {
    if hard {
        let (x_t, idx) = g.hard_select(leaf_embeds, weights, selection_grad, tau)?;
        Ok((x_t, weights, idx))
    } else {
        let x_t = g.weighted_sum(weights, leaf_embeds)?;
        let n = g.shape(weights)[1];
        let idx = g
            .data(weights)
            .chunks(n)
            .map(|row| argmax(row).ok_or_else(|| Error::Numeric("NaN in leaf weights".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok((x_t, weights, idx))
    }
}

/// Arithmetic mean of the leaf embeddings `[B, N, D] -> [B, D]`.
pub fn select_leaf_mean(g: &mut Graph, leaf_embeds: Var) -> Result<Var> {
    g.mean_axis(leaf_embeds, 1)
}

/// Path-probability leaf weights. For each internal node `u` the two edges
/// to its children are scored by `cosine(x_u, z*_c)`, the cosine between
/// the parent embedding and the patch the child selected; a softmax over
/// the pair at temperature `tau_path` gives edge probabilities, and a
/// leaf's probability is the product along its path.
pub fn select_leaf_prob(
    g: &mut Graph,
    leaf_embeds: Var,
    embeds: &[Var],
    steps: &[Option<NodeStep>],
    cfg: &TreeConfig,
    hard: bool,
) -> Result<(Var, Var, Vec<usize>)> {
    let probs = path_probabilities(g, embeds, steps, cfg)?;
    select_leaf_weighted(g, leaf_embeds, probs, hard, cfg.selection_grad, cfg.tau_select)
}

fn path_probabilities(g: &mut Graph, embeds: &[Var], steps: &[Option<NodeStep>], cfg: &TreeConfig) -> Result<Var> {
    let internal = (1 << cfg.depth) - 1;
    let mut node_prob: Vec<Option<Var>> = vec![None; cfg.node_count() + 1];
    for u in 0..internal {
        let [l, r] = children(u);
        let mut scores = Vec::with_capacity(2);
        for c in [l, r] {
            let step = steps[c]
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("missing record for node {c}")))?;
            scores.push(g.cosine(embeds[u], step.selected).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("path probability at node {u} -> {c}: {m}")),
                other => other,
            })?);
        }
        let pair = g.stack(&scores)?;
        let pair = g.scale(pair, 1.0 / cfg.tau_path);
        let edge = g.softmax(pair)?;
        for (j, c) in [l, r].into_iter().enumerate() {
            let e = g.take(edge, j)?;
            node_prob[c] = Some(match node_prob[u] {
                Some(p) => g.mul(p, e)?,
                None => e,
            });
        }
    }
    let leaves: Vec<Var> = (internal..=cfg.node_count())
        .map(|id| node_prob[id].expect("every leaf has a path probability"))
        .collect();
    g.stack(&leaves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PatchSet;
    use crate::rng;
    use crate::tensor::{Mode, Tensor};

    #[test]
    fn heap_numbering() {
        assert_eq!(children(0), [1, 2]);
        assert_eq!(parent(4), Some(1));
        assert_eq!(parent(0), None);
        assert_eq!(node_depth(0), 0);
        assert_eq!(node_depth(2), 1);
        assert_eq!(node_depth(6), 2);
        assert_eq!(node_depth(7), 3);
        assert_eq!(path_to_leaf(3, 0), vec![1, 3, 7]);
        assert_eq!(path_to_leaf(3, 7), vec![2, 6, 14]);
        assert_eq!(path_to_leaf(1, 1), vec![2]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in LeafStrategy::ALL {
            assert_eq!(s.name().parse::<LeafStrategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert_eq!(LeafStrategy::default().name(), "learn-hard");
        assert!("learn_hard".parse::<LeafStrategy>().is_err());
    }

    fn setup(depth: usize, strategy: LeafStrategy) -> (Tree, ParamStore, TreeConfig) {
        let cfg = TreeConfig {
            depth,
            node_hidden: 6,
            selector_heads: 2,
            strategy,
            dropout_rate: 0.0,
            ..TreeConfig::default()
        };
        let mut store = ParamStore::new();
        let tree = Tree::new(&cfg, 4, 3, &mut store, &mut rng::keyed(&[9])).unwrap();
        (tree, store, cfg)
    }

    fn patch_set(g: &mut Graph, batch: usize, k: usize) -> PatchSet {
        let z = Tensor::randn(&[batch, k, 4], 1.0, &mut rng::keyed(&[10, k as u64]));
        let z = g.input(z);
        let x = g.mean_axis(z, 1).unwrap();
        PatchSet {
            patches: z,
            image: x,
            grid: (1, k),
        }
    }

    #[test]
    fn leaf_and_node_counts() {
        for depth in 1..=4 {
            let (tree, store, cfg) = setup(depth, LeafStrategy::LearnHard);
            assert_eq!(tree.nodes().len(), cfg.node_count());
            let mut g = Graph::new(Mode::eval());
            let ps = patch_set(&mut g, 2, 5);
            let out = tree.forward(&mut g, &store, &ps).unwrap();
            assert_eq!(g.shape(out.leaf_embeds), &[2, 1 << depth, 4]);
            assert_eq!(g.shape(out.logits), &[2, 3]);
            assert_eq!(out.steps.iter().filter(|s| s.is_some()).count(), cfg.node_count());
        }
    }

    #[test]
    fn single_patch_always_selected() {
        let (tree, store, _) = setup(2, LeafStrategy::LearnHard);
        let mut g = Graph::new(Mode::eval());
        let ps = patch_set(&mut g, 3, 1);
        let out = tree.forward(&mut g, &store, &ps).unwrap();
        for step in out.steps.iter().flatten() {
            assert_eq!(step.indices, vec![0, 0, 0]);
        }
    }

    #[test]
    fn prob_weights_sum_to_one() {
        for depth in 1..=4 {
            let (tree, store, _) = setup(depth, LeafStrategy::ProbSoft);
            let mut g = Graph::new(Mode::eval());
            let ps = patch_set(&mut g, 3, 6);
            let out = tree.forward(&mut g, &store, &ps).unwrap();
            let n = 1 << depth;
            for row in g.data(out.leaf_weights.unwrap()).chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_norm_embedding_in_prob_routing_is_a_numeric_error() {
        let (tree, store, _) = setup(1, LeafStrategy::ProbHard);
        let mut g = Graph::new(Mode::eval());
        let z = g.input(Tensor::randn(&[2, 3, 4], 1.0, &mut rng::keyed(&[1])));
        let x = g.input(Tensor::zeros(&[2, 4]));
        let ps = PatchSet {
            patches: z,
            image: x,
            grid: (1, 3),
        };
        let err = tree.forward(&mut g, &store, &ps).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("zero-norm")), "{err}");
    }

    #[test]
    fn config_validation() {
        let cfg = TreeConfig {
            depth: 0,
            ..TreeConfig::default()
        };
        assert!(cfg.validate(64).is_err());
        let cfg = TreeConfig {
            tau_path: 0.0,
            ..TreeConfig::default()
        };
        assert!(cfg.validate(64).is_err());
        assert!(TreeConfig::default().validate(64).is_ok());
        assert!(TreeConfig::default().validate(6).is_err());
    }
}
