//! Finite-difference sweeps over every differentiable tensor op. Each
//! function panics with the failing op and its error.

use super::*;
use vitree::tensor::{Graph, Mode, ParamStore, SelectionGrad, Tensor, Var};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn sweep<F>(name: &str, make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>, mode: Mode, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> vitree::Result<Var> + Copy,
{
    let mut total = FdReport::default();
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let inputs = make(&mut r);
        total = total.merge(fd_check(&inputs, mode, 77 + seed, build));
    }
    assert!(total.checked > 0, "{name}: nothing checked");
    assert!(total.max_rel <= TOL, "{name}: max relative error {:.3e}", total.max_rel);
}

fn dims(r: &mut rand_chacha::ChaCha8Rng, lo: usize, hi: usize) -> usize {
    use rand::Rng;
    r.random_range(lo..=hi)
}

pub fn matmul_and_linear() {
    sweep("matmul", |r| {
        let (m, k, n) = (dims(r, 1, 6), dims(r, 1, 6), dims(r, 1, 6));
        vec![randn(&[m, k], r), randn(&[k, n], r)]
    }, Mode::eval(), |g, v| g.matmul(v[0], v[1]));
    sweep("linear", |r| {
        let (b, i, o) = (dims(r, 1, 5), dims(r, 1, 8), dims(r, 1, 8));
        vec![randn(&[b, 2, i], r), randn(&[o, i], r), randn(&[o], r)]
    }, Mode::eval(), |g, v| g.linear(v[0], v[1], Some(v[2])));
}

pub fn elementwise_and_reductions() {
    let pair = |r: &mut rand_chacha::ChaCha8Rng| {
        let s = [dims(r, 1, 4), dims(r, 1, 5)];
        vec![randn(&s, r), randn(&s, r)]
    };
    sweep("add", pair, Mode::eval(), |g, v| g.add(v[0], v[1]));
    sweep("sub", pair, Mode::eval(), |g, v| g.sub(v[0], v[1]));
    sweep("mul", pair, Mode::eval(), |g, v| g.mul(v[0], v[1]));
    sweep("scale", pair, Mode::eval(), |g, v| Ok(g.scale(v[0], -1.7)));
    sweep("relu", pair, Mode::eval(), |g, v| Ok(g.relu(v[0])));
    sweep("sum", pair, Mode::eval(), |g, v| Ok(g.sum(v[0])));
    sweep("mean", pair, Mode::eval(), |g, v| g.mean(v[0]));
    sweep("add_broadcast", |r| {
        let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 5));
        vec![randn(&[a, b, c], r), randn(&[b, c], r)]
    }, Mode::eval(), |g, v| g.add_broadcast(v[0], v[1]));
    sweep("mean_axis", |r| {
        let s = [dims(r, 1, 3), dims(r, 1, 6), dims(r, 1, 4)];
        vec![randn(&s, r)]
    }, Mode::eval(), |g, v| g.mean_axis(v[0], 1));
    sweep("concat", |r| {
        let b = dims(r, 1, 4);
        vec![randn(&[b, dims(r, 1, 5)], r), randn(&[b, dims(r, 1, 5)], r)]
    }, Mode::eval(), |g, v| g.concat(&[v[0], v[1], v[0]]));
    sweep("stack+take", |r| {
        let s = [dims(r, 1, 4), dims(r, 1, 5)];
        vec![randn(&s, r), randn(&s, r)]
    }, Mode::eval(), |g, v| {
        let s = g.stack(&[v[0], v[1], v[0]])?;
        let t = g.take(s, 1)?;
        let m = g.mul(t, v[0])?;
        g.concat(&[m, v[1]])
    });
    sweep("reshape", pair, Mode::eval(), |g, v| {
        let n = g.value(v[0]).numel();
        g.reshape(v[0], &[n])
    });
}

pub fn softmax_cross_entropy_cosine_mix() {
    sweep("softmax", |r| vec![randn(&[dims(r, 1, 4), dims(r, 1, 8)], r)], Mode::eval(), |g, v| g.softmax(v[0]));
    sweep("cross_entropy", |r| vec![randn(&[4, dims(r, 2, 8)], r)], Mode::eval(), |g, v| {
        let c = g.shape(v[0])[1];
        g.cross_entropy(v[0], &[0, c - 1, 1 % c, (c / 2) % c])
    });
    sweep("cosine", |r| {
        let s = [dims(r, 1, 4), dims(r, 2, 8)];
        vec![randn(&s, r), randn(&s, r)]
    }, Mode::eval(), |g, v| g.cosine(v[0], v[1]));
    sweep("weighted_sum", |r| {
        let (b, n, d) = (dims(r, 1, 3), dims(r, 1, 6), dims(r, 1, 5));
        vec![randn(&[b, n], r), randn(&[b, n, d], r)]
    }, Mode::eval(), |g, v| g.weighted_sum(v[0], v[1]));
    sweep("mix", |r| {
        let s = [dims(r, 1, 3), dims(r, 2, 6)];
        vec![randn(&s, r), randn(&s, r), randn(&[1], r)]
    }, Mode::eval(), |g, v| g.mix(v[0], v[1], v[2]));
}

pub fn normalisation_and_dropout() {
    sweep("layer_norm", |r| {
        let d = dims(r, 2, 8);
        vec![randn(&[dims(r, 1, 4), d], r), randn(&[d], r), randn(&[d], r)]
    }, Mode::eval(), |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    sweep("batch_norm_train", |r| {
        let d = dims(r, 1, 6);
        vec![randn(&[dims(r, 2, 6), d], r), randn(&[d], r), randn(&[d], r)]
    }, Mode::eval(), |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0));
    sweep("batch_norm_eval", |r| {
        let d = dims(r, 1, 6);
        vec![randn(&[dims(r, 1, 4), d], r), randn(&[d], r), randn(&[d], r)]
    }, Mode::eval(), |g, v| {
        let d = g.shape(v[1])[0];
        let mean: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..d).map(|i| 0.5 + i as f64).collect();
        g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
    });
    sweep("dropout", |r| vec![randn(&[dims(r, 1, 4), dims(r, 4, 12)], r)], Mode::train(3, 9), |g, v| g.dropout(v[0], 0.3, 5));
}

pub fn attention_ops() {
    sweep("self_attention", |r| {
        let heads = dims(r, 1, 3);
        let s = [dims(r, 1, 2), dims(r, 1, 5), heads * dims(r, 1, 3)];
        vec![randn(&s, r), randn(&s, r), randn(&s, r)]
    }, Mode::eval(), |g, v| {
        let d = g.shape(v[0])[2];
        let heads = (1..=3).rev().find(|h| d % h == 0 && d / h <= 3).unwrap_or(1);
        g.self_attention(v[0], v[1], v[2], heads)
    });
    for trans in [false, true] {
        sweep("bmm", |r| {
            let (b, m, k, n) = (dims(r, 1, 3), dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
            let bs = if trans { [b, n, k] } else { [b, k, n] };
            vec![randn(&[b, m, k], r), randn(&bs, r)]
        }, Mode::eval(), move |g, v| g.bmm(v[0], v[1], trans));
    }
    sweep("head_fold", |r| {
        let d = 2 * dims(r, 1, 4);
        vec![randn(&[dims(r, 1, 3), d], r), randn(&[d, d], r)]
    }, Mode::eval(), |g, v| g.head_fold(v[0], v[1], 2));
    sweep("head_unfold", |r| {
        let d = 2 * dims(r, 1, 4);
        vec![randn(&[dims(r, 1, 3), 2, d], r), randn(&[d, d], r), randn(&[d], r)]
    }, Mode::eval(), |g, v| g.head_unfold(v[0], v[1], v[2], 2));
}

pub fn multi_head_attention_block() {
    use rand::SeedableRng;
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let d = 4;
        let mut store = ParamStore::new();
        let mut init = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let block = vitree::tensor::MhaBlock::new(&mut store, "mha", d, 2, &mut init).unwrap();
        // Scale weights up so the attention is far from uniform.
        for id in store.ids().collect::<Vec<_>>() {
            let v: Vec<f64> = store.get(id).data().iter().map(|x| x * 40.0).collect();
            store.set(id, &v).unwrap();
        }
        let k = 1 + (seed as usize % 5);
        let inputs = vec![randn(&[2, d], &mut r), randn(&[2, k, d], &mut r)];
        let report = fd_check(&inputs, Mode::eval(), seed, |g, v| {
            let (ctx, w) = block.forward(g, &store, v[0], v[1])?;
            let ctx_sum = g.sum(ctx);
            let w_flat = g.reshape(w, &[2 * k])?;
            let s = g.reshape(ctx_sum, &[1])?;
            g.concat(&[w_flat, s])
        });
        assert!(report.max_rel <= TOL, "mha seed {seed}: {:.3e}", report.max_rel);
    }
}

fn soft_mixture(values: &[f64], weights: &[f64], k: usize, d: usize, tau: f64) -> Vec<f64> {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = weights.iter().map(|w| ((w - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    (0..d)
        .map(|j| (0..k).map(|i| e[i] / z * values[i * d + j]).sum())
        .collect()
}

pub fn hard_select_subgradient_matches_fd_of_forward() {
    sweep("hard_select/subgradient", |r| {
        vec![randn(&[dims(r, 1, 4), dims(r, 1, 6), dims(r, 1, 5)], r), {
            let t = randn(&[1, 1], r);
            t
        }]
    }, Mode::eval(), |g, v| {
        let s = g.shape(v[0]).to_vec();
        let w = g.input(Tensor::randn(&[s[0], s[1]], 1.0, &mut rng(s.iter().sum::<usize>() as u64)));
        let (out, _) = g.hard_select(v[0], w, SelectionGrad::Subgradient, 1.0)?;
        Ok(out)
    });
}

pub fn hard_select_straight_through_matches_soft_mixture_gradient() {
    // The ST backward must equal the gradient of the soft mixture, checked by
    // central differences of an independent plain-f64 implementation.
    for seed in 0..INSTANCES {
        let mut r = rng(900 + seed);
        let (k, d, tau) = (1 + seed as usize % 6, 1 + seed as usize % 4, 0.5 + 0.1 * seed as f64);
        let values = randn(&[k, d], &mut r);
        let weights = randn(&[k], &mut r);
        let proj = randn(&[d], &mut r);
        let mut g = Graph::new(Mode::eval());
        let v = g.leaf(values.clone().with_requires_grad(true));
        let w = g.leaf(weights.clone().with_requires_grad(true));
        let (out, _) = g.hard_select(v, w, SelectionGrad::StraightThrough, tau).unwrap();
        let p = g.input(proj.clone());
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let f = |vals: &[f64], ws: &[f64]| -> f64 {
            soft_mixture(vals, ws, k, d, tau).iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        for (var, t, is_values) in [(v, &values, true), (w, &weights, false)] {
            let analytic = g.grad(var).unwrap();
            for j in 0..t.numel() {
                let (mut plus, mut minus) = (t.data().to_vec(), t.data().to_vec());
                plus[j] += FD_STEP;
                minus[j] -= FD_STEP;
                let numeric = if is_values {
                    (f(&plus, weights.data()) - f(&minus, weights.data())) / (2.0 * FD_STEP)
                } else {
                    (f(values.data(), &plus) - f(values.data(), &minus)) / (2.0 * FD_STEP)
                };
                assert!(rel_err(analytic[j], numeric) <= TOL, "seed {seed}: {} vs {numeric}", analytic[j]);
            }
        }
    }
}
