//! End-to-end finite differences through the whole model.

use super::*;
use vitree::model::{InputKind, ViTree};
use vitree::tensor::{Graph, Mode, ParamStore, SelectionGrad, Tensor};
use vitree::train::{training_loss, LossMode, TrainConfig};
use vitree::tree::LeafStrategy;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-3;
const BATCH: usize = 3;

struct Probe {
    loss: f64,
    /// Every discrete choice made in the pass: node picks, then leaf picks.
    choices: Vec<usize>,
}

fn run(model: &ViTree, store: &ParamStore, x: &Tensor, labels: &[usize], cfg: &TrainConfig, grad: bool) -> (Probe, Option<ParamStore>) {
    let mut g = Graph::new(Mode::train(5, 11));
    let input = g.input(x.clone());
    let out = model.forward(&mut g, store, input, InputKind::Patches).unwrap();
    let loss = training_loss(&mut g, &out, labels, cfg).unwrap();
    let mut choices: Vec<usize> = out.tree.steps.iter().flatten().flat_map(|s| s.indices.clone()).collect();
    choices.extend(&out.tree.leaf_index);
    let probe = Probe { loss: g.data(loss)[0], choices };
    if !grad {
        return (probe, None);
    }
    g.backward(loss).unwrap();
    let mut s = store.clone();
    s.zero_grads();
    s.accumulate_grads(&g);
    (probe, Some(s))
}

/// Checks every trainable coordinate of a depth-2 model over all instances;
/// returns the worst relative error and the number of coordinates checked.
pub fn check_strategy(strategy: LeafStrategy) -> (f64, usize) {
    let cfg = TrainConfig {
        loss: LossMode::Both,
        train_mix: true,
        ..TrainConfig::default()
    };
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for inst in 0..INSTANCES {
        let mc = toy_config(2, strategy, SelectionGrad::Subgradient, inst);
        let (model, mut store) = ViTree::new(&mc).unwrap();
        scramble(&mut store, 500 + inst, 0.5);
        let mut r = rng(900 + inst);
        let x = Tensor::randn(&[BATCH, 4, 4], 1.0, &mut r);
        let labels: Vec<usize> = (0..BATCH).map(|b| (b + inst as usize) % 3).collect();
        let (base, grads) = run(&model, &store, &x, &labels, &cfg, true);
        let grads = grads.unwrap();
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let analytic = grads.get(id).grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
            for j in 0..analytic.len() {
                let orig = store.get(id).data()[j];
                let mut eval_at = |v: f64| {
                    store.get_mut(id).data_mut()[j] = v;
                    let p = run(&model, &store, &x, &labels, &cfg, false).0;
                    store.get_mut(id).data_mut()[j] = orig;
                    p
                };
                let plus = eval_at(orig + FD_STEP);
                let minus = eval_at(orig - FD_STEP);
                if plus.choices != base.choices || minus.choices != base.choices {
                    skipped += 1;
                    continue;
                }
                let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
                let e = rel_err(analytic[j], numeric);
                assert!(
                    e <= TOL,
                    "{strategy} instance {inst}: {}[{j}] analytic {} numeric {numeric} (rel {e:.2e})",
                    store.name(id),
                    analytic[j]
                );
                worst = worst.max(e);
                checked += 1;
            }
        }
    }
    assert!(checked > 1000, "{strategy}: only {checked} coordinates checked");
    assert!(skipped * 100 <= checked, "{strategy}: {skipped} selection flips vs {checked} checked");
    eprintln!("{strategy}: {checked} coordinates, {skipped} skipped at selection flips, worst rel {worst:.2e}");
    (worst, checked)
}

/// Backbone image embedding and head logits against the raw patches.
pub fn backbone_wrt_patches() -> f64 {
    let mut total = FdReport::default();
    for inst in 0..INSTANCES {
        let mc = toy_config(2, LeafStrategy::LearnHard, SelectionGrad::Subgradient, inst);
        let (model, mut store) = ViTree::new(&mc).unwrap();
        scramble(&mut store, 700 + inst, 0.5);
        let x = Tensor::randn(&[BATCH, 4, 4], 1.0, &mut rng(800 + inst));
        let report = fd_check(&[x], Mode::eval(), 31 + inst, |g, v| {
            let ps = model.backbone().encode(g, &store, v[0])?;
            let logits = model.backbone().head(g, &store, ps.image)?;
            g.concat(&[ps.image, logits])
        });
        total = total.merge(report);
    }
    assert!(total.max_rel <= TOL, "max relative error {:.3e}", total.max_rel);
    total.max_rel
}
