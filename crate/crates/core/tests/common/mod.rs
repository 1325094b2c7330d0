//! Shared test oracles. Everything here evaluates forward passes only, so it
//! stays independent of the backward rules it is used to check.
#![allow(dead_code)]

pub mod model_fd;
pub mod op_fd;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitree::tensor::{Graph, Mode, Tensor, Var};
use vitree::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so gradients that are zero up to
/// finite-difference noise are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl FdReport {
    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport {
            max_rel: self.max_rel.max(other.max_rel),
            checked: self.checked + other.checked,
        }
    }
}

/// Checks `d/d inputs of sum(proj * build(inputs))` against central
/// differences. `build` must be a pure function of the input values.
pub fn fd_check<F>(inputs: &[Tensor], mode: Mode, proj_seed: u64, build: F) -> FdReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], want_grad: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(want_grad)))
            .collect();
        let out = build(&mut g, &vars).expect("forward failed");
        let shape = g.shape(out).to_vec();
        let proj = Tensor::randn(&shape, 1.0, &mut rng(proj_seed));
        let p = g.input(proj);
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod);
        let value = g.data(loss)[0];
        if want_grad {
            g.backward(loss).unwrap();
            (value, vars.iter().map(|v| g.grad(*v).map(|s| s.to_vec())).collect())
        } else {
            (value, vec![])
        }
    };
    let (_, grads) = eval(inputs, true);
    let mut report = FdReport::default();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads[i].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            report.max_rel = report.max_rel.max(rel_err(analytic[j], numeric));
            report.checked += 1;
        }
    }
    report
}

use vitree::backbone::BackboneConfig;
use vitree::model::ModelConfig;
use vitree::tensor::{ParamStore, SelectionGrad};
use vitree::tree::{LeafStrategy, TreeConfig};

/// A model small enough for exhaustive finite differences: a 2x2 grid of
/// 4-value patches, width 8, one encoder block, 3 classes.
pub fn toy_config(depth: usize, strategy: LeafStrategy, grad: SelectionGrad, seed: u64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            patch_dim: 4,
            model_dim: 8,
            encoder_layers: 1,
            head_count: 2,
            mlp_hidden: 8,
            class_count: 3,
            dropout_rate: 0.0,
            grid_rows: 2,
            grid_cols: 2,
        },
        tree: TreeConfig {
            depth,
            node_hidden: 6,
            selector_heads: 2,
            strategy,
            selection_grad: grad,
            ..TreeConfig::default()
        },
        seed,
    }
}

/// Redraws every trainable parameter at unit-ish scale so that no part of
/// the model sits in a near-linear regime. Norm gains stay near one.
pub fn scramble(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let mut v = Tensor::randn(&[n], std, &mut r).into_data();
        if store.name(id).ends_with(".gamma") {
            v.iter_mut().for_each(|x| *x += 1.0);
        }
        store.set(id, &v).unwrap();
    }
}

use vitree::backbone::PatchSet;
use vitree::tree::Tree;

pub const TOY_DIM: usize = 8;

pub fn toy_tree_config(depth: usize, strategy: LeafStrategy, grad: SelectionGrad) -> TreeConfig {
    TreeConfig {
        depth,
        node_hidden: 6,
        selector_heads: 2,
        strategy,
        selection_grad: grad,
        ..TreeConfig::default()
    }
}

/// A scrambled tree of width `TOY_DIM` over 3 classes. Trees built from the
/// same seed share parameters whatever their strategy.
pub fn toy_tree(cfg: &TreeConfig, seed: u64) -> (Tree, ParamStore) {
    let mut store = ParamStore::new();
    let tree = Tree::new(cfg, TOY_DIM, 3, &mut store, &mut rng(seed)).unwrap();
    scramble(&mut store, seed + 10_000, 0.5);
    (tree, store)
}

/// Random patch features `[batch, k, TOY_DIM]` on a `1 x k` grid.
pub fn toy_patches(g: &mut Graph, batch: usize, k: usize, seed: u64) -> PatchSet {
    let z = g.input(Tensor::randn(&[batch, k, TOY_DIM], 1.0, &mut rng(seed)));
    let image = g.mean_axis(z, 1).unwrap();
    PatchSet { patches: z, image, grid: (1, k) }
}

/// Row `row` of a `[B, N, D]` value, as a slice of its `D` entries at `n`.
pub fn slot(g: &Graph, v: Var, b: usize, n: usize) -> Vec<f64> {
    let s = g.shape(v);
    let (cnt, d) = (s[1], s[2]);
    g.data(v)[(b * cnt + n) * d..(b * cnt + n + 1) * d].to_vec()
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Test accuracy of a frozen random-feature baseline: each patch goes
/// through a fixed random ReLU layer, features are mean-pooled over patches
/// and standardized, and only a softmax-regression layer is fitted (full
/// batch gradient descent). Written in plain loops so it shares no code
/// with the library.
pub fn frozen_feature_baseline(train: &vitree::data::Dataset, test: &vitree::data::Dataset, hidden: usize, seed: u64) -> f64 {
    use rand_distr::{Distribution, Normal};
    let (k, p, c) = (train.patch_count, train.patch_dim, train.classes);
    let mut r = rng(seed);
    let wdist = Normal::new(0.0, 1.0 / (p as f64).sqrt()).unwrap();
    let w: Vec<f64> = (0..hidden * p).map(|_| wdist.sample(&mut r)).collect();
    let bdist = Normal::new(-0.5, 0.5).unwrap();
    let b: Vec<f64> = (0..hidden).map(|_| bdist.sample(&mut r)).collect();
    let embed = |patches: &[f64]| -> Vec<f64> {
        let mut f = vec![0.0; hidden];
        for cell in patches.chunks(p) {
            for h in 0..hidden {
                let z: f64 = b[h] + w[h * p..(h + 1) * p].iter().zip(cell).map(|(a, x)| a * x).sum::<f64>();
                f[h] += z.max(0.0) / k as f64;
            }
        }
        f
    };
    let mut xtr: Vec<Vec<f64>> = train.samples.iter().map(|s| embed(&s.patches)).collect();
    let mut xte: Vec<Vec<f64>> = test.samples.iter().map(|s| embed(&s.patches)).collect();
    let n = xtr.len() as f64;
    for h in 0..hidden {
        let mean = xtr.iter().map(|x| x[h]).sum::<f64>() / n;
        let var = xtr.iter().map(|x| (x[h] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        for x in xtr.iter_mut().chain(xte.iter_mut()) {
            x[h] = (x[h] - mean) / sd;
        }
    }
    let dim = hidden + 1;
    let mut theta = vec![0.0; c * dim];
    let logits = |theta: &[f64], x: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|j| theta[j * dim + hidden] + theta[j * dim..j * dim + hidden].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let lr = 0.5;
    for _ in 0..300 {
        let mut grad = vec![0.0; c * dim];
        for (x, s) in xtr.iter().zip(&train.samples) {
            let z = logits(&theta, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for j in 0..c {
                let d = e[j] / tot - f64::from(u8::from(j == s.label));
                let row = &mut grad[j * dim..(j + 1) * dim];
                row[..hidden].iter_mut().zip(x).for_each(|(g, xv)| *g += d * xv);
                row[hidden] += d;
            }
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= lr * g / n);
    }
    let hits = xte
        .iter()
        .zip(&test.samples)
        .filter(|(x, s)| {
            let z = logits(&theta, x);
            let best = (0..c).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            best == s.label
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Model defaults shaped for the default synthetic spec (8x8 grid of 4x4
/// grayscale tiles, 10 classes).
pub fn default_model_config(depth: usize, strategy: LeafStrategy, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.patch_dim = 16;
    cfg.tree.depth = depth;
    cfg.tree.strategy = strategy;
    cfg.seed = seed;
    cfg
}
