//! Per-sample decision traces: the realized root-to-leaf path with the
//! patch each node selected and its attention weights.

use serde::{Deserialize, Serialize};

use super::{path_to_leaf, LeafStrategy, TreeOutput};
use crate::error::{Error, Result};
use crate::tensor::Graph;

pub const TRACE_VERSION: u32 = 1;

/// JSON Schema (draft 2020-12) every serialized trace conforms to.
pub const TRACE_SCHEMA: &str = include_str!("../../schema/trace.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub node_id: usize,
    pub depth: usize,
    pub patch_index: usize,
    pub patch_row: usize,
    pub patch_col: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafRecord {
    pub index: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleInfo {
    pub index: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub label_v: usize,
    pub label_t: usize,
    pub label_combined: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionTrace {
    pub version: u32,
    pub sample: SampleInfo,
    pub prediction: Prediction,
    pub path: Vec<NodeRecord>,
    pub leaf: LeafRecord,
    pub strategy: LeafStrategy,
}

impl DecisionTrace {
    /// Patch indices along the path, root side first.
    pub fn patch_indices(&self) -> Vec<usize> {
        self.path.iter().map(|r| r.patch_index).collect()
    }
}

/// Reads sample `b`'s realized path and leaf weights off a tree forward pass.
/// Under soft strategies the path leads to the highest-weighted leaf.
pub fn path_records(
    g: &Graph,
    out: &TreeOutput,
    depth: usize,
    grid: (usize, usize),
    b: usize,
) -> Result<(Vec<NodeRecord>, LeafRecord)> {
    let leaf_count = 1usize << depth;
    let leaf = *out
        .leaf_index
        .get(b)
        .ok_or(Error::OutOfRange { index: b, len: out.leaf_index.len() })?;
    let mut records = Vec::with_capacity(depth);
    for id in path_to_leaf(depth, leaf) {
        let step = out.steps[id]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("node {id} missing from forward pass")))?;
        let k = g.shape(step.weights)[1];
        let patch_index = step.indices[b];
        records.push(NodeRecord {
            node_id: id,
            depth: super::node_depth(id),
            patch_index,
            patch_row: patch_index / grid.1,
            patch_col: patch_index % grid.1,
            weights: g.data(step.weights)[b * k..(b + 1) * k].to_vec(),
        });
    }
    let weights = match out.leaf_weights {
        Some(w) => g.data(w)[b * leaf_count..(b + 1) * leaf_count].to_vec(),
        None => vec![1.0 / leaf_count as f64; leaf_count],
    };
    Ok((records, LeafRecord { index: leaf, weights }))
}
