//! Toy vision-transformer backbone: linear patch embedding, learned
//! positional embeddings, post-norm encoder blocks, and mean pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::INIT_STD;
use crate::tensor::{Dropout, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Flattened length of one input patch.
    pub patch_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub head_count: usize,
    pub mlp_hidden: usize,
    pub class_count: usize,
    pub dropout_rate: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            patch_dim: 48,
            model_dim: 64,
            encoder_layers: 2,
            head_count: 4,
            mlp_hidden: 128,
            class_count: 10,
            dropout_rate: 0.0,
            grid_rows: 8,
            grid_cols: 8,
        }
    }
}

impl BackboneConfig {
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_dim", self.patch_dim),
            ("model_dim", self.model_dim),
            ("head_count", self.head_count),
            ("mlp_hidden", self.mlp_hidden),
            ("class_count", self.class_count),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be at least 1")));
        }
        if self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "backbone dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Patch-level features `[B, K, D]` and their mean `[B, D]`.
#[derive(Debug, Clone, Copy)]
pub struct PatchSet {
    pub patches: Var,
    pub image: Var,
    pub grid: (usize, usize),
}

impl PatchSet {
    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm_attn: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm_mlp: LayerNorm,
    drop_attn: Dropout,
    drop_mlp: Dropout,
}

impl EncoderLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, heads: usize) -> Result<Var> {
        let q = self.query.forward(g, store, z)?;
        let k = self.key.forward(g, store, z)?;
        let v = self.value.forward(g, store, z)?;
        let a = g.self_attention(q, k, v, heads)?;
        let a = self.output.forward(g, store, a)?;
        let a = self.drop_attn.forward(g, a)?;
        let z = g.add(z, a)?;
        let z = self.norm_attn.forward(g, store, z)?;
        let h = self.fc1.forward(g, store, z)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = self.drop_mlp.forward(g, h)?;
        let z = g.add(z, h)?;
        self.norm_mlp.forward(g, store, z)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    embed: Linear,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

/// Dropout layer ids used by the backbone start here.
const DROPOUT_ID_BASE: u64 = 100;

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.model_dim, config.patch_count());
        let embed = Linear::new(store, "backbone.embed", config.patch_dim, d, true, rng);
        let pos = store.add("backbone.pos", Tensor::randn(&[k, d], INIT_STD, rng));
        let layers = (0..config.encoder_layers)
            .map(|l| {
                let name = |part: &str| format!("backbone.layer{l}.{part}");
                let drop = |slot: u64| Dropout {
                    rate: config.dropout_rate,
                    layer_id: DROPOUT_ID_BASE + 2 * l as u64 + slot,
                };
                EncoderLayer {
                    query: Linear::new(store, &name("query"), d, d, true, rng),
                    key: Linear::new(store, &name("key"), d, d, true, rng),
                    value: Linear::new(store, &name("value"), d, d, true, rng),
                    output: Linear::new(store, &name("output"), d, d, true, rng),
                    norm_attn: LayerNorm::new(store, &name("norm_attn"), d),
                    fc1: Linear::new(store, &name("fc1"), d, config.mlp_hidden, true, rng),
                    fc2: Linear::new(store, &name("fc2"), config.mlp_hidden, d, true, rng),
                    norm_mlp: LayerNorm::new(store, &name("norm_mlp"), d),
                    drop_attn: drop(0),
                    drop_mlp: drop(1),
                }
            })
            .collect();
        let head = Linear::new(store, "backbone.head", d, config.class_count, true, rng);
        Ok(Backbone {
            config: config.clone(),
            embed,
            pos,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn positional(&self) -> ParamId {
        self.pos
    }

    pub fn head_layer(&self) -> &Linear {
        &self.head
    }

    /// Encodes raw patches `[B, K, patch_dim]` (or `[K, patch_dim]`).
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<PatchSet> {
        let cfg = &self.config;
        let shape = g.shape(raw).to_vec();
        let raw = match shape.as_slice() {
            [k, p] => g.reshape(raw, &[1, *k, *p])?,
            [_, _, _] => raw,
            _ => return Err(Error::dim(format!("encode: raw patches {shape:?}"))),
        };
        let s = g.shape(raw).to_vec();
        if s[2] != cfg.patch_dim {
            return Err(Error::dim(format!(
                "patch_dim {} does not match backbone patch_dim {}",
                s[2], cfg.patch_dim
            )));
        }
        if s[1] != cfg.patch_count() {
            return Err(Error::dim(format!(
                "{} patches do not match a {}x{} grid",
                s[1], cfg.grid_rows, cfg.grid_cols
            )));
        }
        let z = self.embed.forward(g, store, raw)?;
        let pos = g.param(store, self.pos);
        let mut z = g.add_broadcast(z, pos)?;
        for layer in &self.layers {
            z = layer.forward(g, store, z, cfg.head_count)?;
        }
        self.pool(g, z)
    }

    /// Uses precomputed patch features `[B, K, D]` in place of the encoder
    /// output.
    pub fn encode_features(&self, g: &mut Graph, features: Var) -> Result<PatchSet> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 || s[2] != self.config.model_dim || s[1] != self.config.patch_count() {
            return Err(Error::dim(format!(
                "features {s:?} do not match K={} D={}",
                self.config.patch_count(),
                self.config.model_dim
            )));
        }
        self.pool(g, features)
    }

    fn pool(&self, g: &mut Graph, z: Var) -> Result<PatchSet> {
        let image = g.mean_axis(z, 1)?;
        Ok(PatchSet {
            patches: z,
            image,
            grid: (self.config.grid_rows, self.config.grid_cols),
        })
    }

    /// Backbone classification head on the image representation.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.head.forward(g, store, x)
    }
}
