//! Parameter storage and the layers built on top of [`Graph`] ops.

use std::collections::HashMap;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of the normal initialiser for affine weights and
/// positional embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named tensors owned by a model: trainable parameters plus non-trainable
/// buffers such as batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.insert(name, tensor, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds the gradients recorded on `graph` into the matching parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        let mut pairs: Vec<_> = graph.param_vars().collect();
        pairs.sort_by_key(|(id, _)| *id);
        for (id, var) in pairs {
            if let Some(g) = graph.grad(var) {
                self.entries[id.0].tensor.accumulate_grad(g);
            }
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<f64>)>) {
        for (id, values) in updates {
            self.entries[id.0].tensor.data_mut().copy_from_slice(&values);
        }
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.tensor.numel() != values.len() {
            return Err(Error::dim(format!(
                "{}: expected {} values, got {}",
                entry.name,
                entry.tensor.numel(),
                values.len()
            )));
        }
        entry.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| !e.tensor.is_finite())
            .map(|e| e.name.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights from N(0, 0.02^2), bias zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::randn(&[out_dim, in_dim], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Batch norm over `[B, D]` with running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm1d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[dim])),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// Train mode normalises with batch statistics and queues a running-stat
    /// update (`running = momentum * running + (1 - momentum) * batch`, with
    /// the unbiased batch variance). Eval mode uses the running statistics.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let rm = store.get(self.running_mean).data();
        let rv = store.get(self.running_var).data();
        if !g.is_training() {
            return g.batch_norm_eval(x, gamma, beta, rm, rv, self.eps);
        }
        let (out, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
        let n = g.shape(x)[0] as f64;
        let m = self.momentum;
        let new_mean = rm.iter().zip(&mean).map(|(r, b)| m * r + (1.0 - m) * b).collect();
        let new_var = rv
            .iter()
            .zip(&var)
            .map(|(r, b)| m * r + (1.0 - m) * b * n / (n - 1.0))
            .collect();
        g.queue_buffer_update(self.running_mean, new_mean);
        g.queue_buffer_update(self.running_var, new_var);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub layer_id: u64,
}

impl Dropout {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.dropout(x, self.rate, self.layer_id)
    }
}

/// Multi-head attention from a single query per sample onto a set of keys.
///
/// Per-head projections are the row blocks of `D x D` matrices. Keys carry
/// no bias: a key bias adds the same constant to every logit of a head and
/// cancels in the softmax. The key projection is folded into the query
/// (`q_h . W_h z = (W_h^T q_h) . z`), so no `K x D` key matrix is formed.
#[derive(Debug, Clone)]
pub struct MhaBlock {
    pub heads: usize,
    pub model_dim: usize,
    pub query: Linear,
    pub key: ParamId,
    pub value: Linear,
    pub output: Linear,
}

impl MhaBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} not divisible by {heads} heads"
            )));
        }
        let query = Linear::new(store, &format!("{name}.query"), model_dim, model_dim, true, rng);
        let key = store.add(
            &format!("{name}.key.weight"),
            Tensor::randn(&[model_dim, model_dim], INIT_STD, rng),
        );
        let value = Linear::new(store, &format!("{name}.value"), model_dim, model_dim, true, rng);
        let output = Linear::new(store, &format!("{name}.output"), model_dim, model_dim, true, rng);
        Ok(MhaBlock {
            heads,
            model_dim,
            query,
            key,
            value,
            output,
        })
    }

    fn check(&self, g: &Graph, query: Var, keys: Var) -> Result<()> {
        let (sq, sk) = (g.shape(query), g.shape(keys));
        let d = self.model_dim;
        if sq.len() != 2 || sq[1] != d || sk.len() != 3 || sk[0] != sq[0] || sk[2] != d {
            return Err(Error::dim(format!(
                "attention: query {sq:?} / keys {sk:?} for model dim {d}"
            )));
        }
        if sk[1] == 0 {
            return Err(Error::EmptyInput("attention over zero keys".into()));
        }
        Ok(())
    }

    /// Per-head attention distributions `[B, H, K]`.
    pub fn head_weights(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: Var) -> Result<Var> {
        self.check(g, query, keys)?;
        let q = self.query.forward(g, store, query)?;
        let wk = g.param(store, self.key);
        let u = g.head_fold(q, wk, self.heads)?;
        let logits = g.bmm(u, keys, true)?;
        let dh = self.model_dim / self.heads;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        g.softmax(logits)
    }

    /// Head-averaged attention weights `[B, K]`; each row sums to one.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: Var) -> Result<Var> {
        let p = self.head_weights(g, store, query, keys)?;
        g.mean_axis(p, 1)
    }

    /// `query: [B, D]`, `keys_values: [B, K, D]` -> `(context [B, D], weights [B, K])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        keys_values: Var,
    ) -> Result<(Var, Var)> {
        let p = self.head_weights(g, store, query, keys_values)?;
        let weights = g.mean_axis(p, 1)?;
        let mixed = g.bmm(p, keys_values, false)?;
        let wv = g.param(store, self.value.weight);
        let bv = g.param(store, self.value.bias.expect("value projection has a bias"));
        let heads = g.head_unfold(mixed, wv, bv, self.heads)?;
        let context = self.output.forward(g, store, heads)?;
        Ok((context, weights))
    }
}

/// Single-query convenience wrapper: `query: [1, D]`, `keys_values: [K, D]`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    block: &MhaBlock,
    query: Var,
    keys_values: Var,
) -> Result<(Var, Var)> {
    let sk = g.shape(keys_values).to_vec();
    let kv = match sk.as_slice() {
        [0, _] => return Err(Error::EmptyInput("attention over zero keys".into())),
        [k, d] => g.reshape(keys_values, &[1, *k, *d])?,
        _ => keys_values,
    };
    let (ctx, w) = block.forward(g, store, query, kv)?;
    let k = g.shape(w)[1];
    let w = g.reshape(w, &[k])?;
    Ok((ctx, w))
}
