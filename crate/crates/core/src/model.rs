//! The full model: backbone, tree, and the learnable prediction mix.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PatchSet};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{argmax, sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tree::trace::{path_records, Prediction, SampleInfo, TRACE_VERSION};
use crate::tree::{DecisionTrace, Tree, TreeConfig, TreeOutput};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tree: TreeConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.tree.validate(self.backbone.model_dim)
    }
}

/// What the model consumes: raw patches `[B, K, patch_dim]`, or precomputed
/// patch features `[B, K, D]` that take the place of the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Patches,
    Features,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub patch_set: PatchSet,
    pub logits_v: Var,
    pub logits_t: Var,
    pub combined: Var,
    pub tree: TreeOutput,
}

#[derive(Debug, Clone)]
pub struct ViTree {
    config: ModelConfig,
    backbone: Backbone,
    tree: Tree,
    mix: ParamId,
}

pub const MIX_PARAM: &str = "mix.rho";

impl ViTree {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(config: &ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = rng::keyed(&[rng::stream::INIT, config.seed]);
        let backbone = Backbone::new(&config.backbone, &mut store, &mut init)?;
        let tree = Tree::new(
            &config.tree,
            config.backbone.model_dim,
            config.backbone.class_count,
            &mut store,
            &mut init,
        )?;
        let mix = store.add(MIX_PARAM, Tensor::zeros(&[1]));
        Ok((
            ViTree {
                config: config.clone(),
                backbone,
                tree,
                mix,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn mix_param(&self) -> ParamId {
        self.mix
    }

    /// The effective ratio `alpha = sigmoid(rho)` weighting the backbone logits.
    pub fn alpha(&self, store: &ParamStore) -> f64 {
        sigmoid(store.get(self.mix).data()[0])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var, kind: InputKind) -> Result<ModelOutput> {
        let patch_set = match kind {
            InputKind::Patches => self.backbone.encode(g, store, input)?,
            InputKind::Features => self.backbone.encode_features(g, input)?,
        };
        let logits_v = self.backbone.head(g, store, patch_set.image)?;
        let tree = self.tree.forward(g, store, &patch_set)?;
        let rho = g.param(store, self.mix);
        let combined = g.mix(logits_v, tree.logits, rho)?;
        Ok(ModelOutput {
            patch_set,
            logits_v,
            logits_t: tree.logits,
            combined,
            tree,
        })
    }

    /// One trace per batch row. `indices` and `labels` identify the samples.
    pub fn traces(
        &self,
        g: &Graph,
        store: &ParamStore,
        out: &ModelOutput,
        indices: &[usize],
        labels: &[usize],
    ) -> Result<Vec<DecisionTrace>> {
        let batch = g.shape(out.logits_v)[0];
        if indices.len() != batch || labels.len() != batch {
            return Err(Error::dim(format!(
                "{} indices and {} labels for a batch of {batch}",
                indices.len(),
                labels.len()
            )));
        }
        let pred_v = row_argmax(g, out.logits_v)?;
        let pred_t = row_argmax(g, out.logits_t)?;
        let pred_c = row_argmax(g, out.combined)?;
        let alpha = self.alpha(store);
        (0..batch)
            .map(|b| {
                let (path, leaf) = path_records(g, &out.tree, self.config.tree.depth, out.patch_set.grid, b)?;
                Ok(DecisionTrace {
                    version: TRACE_VERSION,
                    sample: SampleInfo {
                        index: indices[b],
                        label: labels[b],
                    },
                    prediction: Prediction {
                        label_v: pred_v[b],
                        label_t: pred_t[b],
                        label_combined: pred_c[b],
                        alpha,
                    },
                    path,
                    leaf,
                    strategy: self.config.tree.strategy,
                })
            })
            .collect()
    }
}

/// Argmax of each row of a `[B, C]` value.
pub fn row_argmax(g: &Graph, v: Var) -> Result<Vec<usize>> {
    let shape = g.shape(v);
    let c = *shape.last().ok_or_else(|| Error::dim("argmax of a scalar"))?;
    g.data(v)
        .chunks(c)
        .map(|row| argmax(row).ok_or_else(|| Error::Numeric("NaN in logits".into())))
        .collect()
}
