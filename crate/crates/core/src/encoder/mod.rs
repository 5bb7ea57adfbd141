//! The EEG graph transformer: position-enhanced node embedding, stacked
//! full-relation attention layers with FFN blocks, and two-level pooling
//! into per-snapshot and sequence representations.

use thiserror::Error;

use crate::graph::Adjacency;
use crate::tensor::{Matrix, TensorError};

pub mod checkpoint;
pub mod forward;
pub mod params;

pub use checkpoint::{read_model, read_model_from, write_model, CheckpointError, MODEL_MAGIC};
pub use forward::{
    embed_nodes, encode_batch, encode_sequence, ffn_block, fr_attention_layer,
    fr_attention_weights, BatchEncoding, NormMode, ParamNodes, SequenceRepresentation,
};
pub use params::{BatchNormParams, HeadParams, LayerParams, ModelDims, ModelParams};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("embedding dim {d} must equal heads {heads} x head_dim {head_dim}")]
    HeadSplit { d: usize, heads: usize, head_dim: usize },
    #[error("{field} must be at least 1")]
    ZeroField { field: &'static str },
    #[error("snapshot has {got} nodes, positional encodings have {expected}")]
    NodeCountMismatch { expected: usize, got: usize },
    #[error("snapshot features must be Jx3, got {rows}x{cols}")]
    BadFeatureShape { rows: usize, cols: usize },
    #[error("expected {expected} snapshots per sequence, got {got}")]
    SnapshotCount { expected: usize, got: usize },
    #[error("sequence has no snapshots")]
    EmptySequence,
    #[error("layer index {layer} out of range (model has {layers})")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters of the graph transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EgtConfig {
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Attention head count H.
    pub n_heads: usize,
    /// Stacked attention+FFN layer count L.
    pub n_layers: usize,
    /// Positional-encoding dimension K.
    pub pe_dim: usize,
    /// Per-head dimension; `embed_dim = n_heads * head_dim`.
    pub head_dim: usize,
    /// Snapshots (windows) per sequence, f.
    pub snapshots: usize,
}

impl EgtConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        for (v, field) in [
            (self.embed_dim, "embed_dim"),
            (self.n_heads, "n_heads"),
            (self.n_layers, "n_layers"),
            (self.pe_dim, "pe_dim"),
            (self.head_dim, "head_dim"),
            (self.snapshots, "snapshots"),
        ] {
            if v == 0 {
                return Err(EncoderError::ZeroField { field });
            }
        }
        if self.embed_dim != self.n_heads * self.head_dim {
            return Err(EncoderError::HeadSplit {
                d: self.embed_dim,
                heads: self.n_heads,
                head_dim: self.head_dim,
            });
        }
        Ok(())
    }
}

impl Default for EgtConfig {
    /// Desk-scale defaults; overridable from configuration files.
    fn default() -> Self {
        Self { embed_dim: 64, n_heads: 4, n_layers: 2, pe_dim: 8, head_dim: 16, snapshots: 4 }
    }
}

/// Per-electrode features for one time window: a Jx3 matrix.
#[derive(Debug, Clone)]
pub struct NodeFeatureSnapshot {
    /// Window index within the sequence.
    pub t: usize,
    pub features: Matrix,
}

impl NodeFeatureSnapshot {
    pub fn new(t: usize, features: Matrix) -> Result<Self, EncoderError> {
        if features.cols() != 3 {
            return Err(EncoderError::BadFeatureShape {
                rows: features.rows(),
                cols: features.cols(),
            });
        }
        Ok(Self { t, features })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Attention support: all node pairs (full relation) or restricted to
/// adjacency neighbors plus self.
#[derive(Debug, Clone)]
pub enum Neighborhood {
    Full,
    Masked { n_nodes: usize, mask: Vec<bool> },
}

impl Neighborhood {
    /// Builds the masked variant from an adjacency; self-connections are
    /// always allowed, so no row has empty support.
    pub fn masked_from(adjacency: &Adjacency) -> Self {
        let j = adjacency.n_nodes();
        let mut mask = vec![false; j * j];
        for i in 0..j {
            for q in 0..j {
                mask[i * j + q] = i == q || adjacency.matrix.at(i, q) != 0.0;
            }
        }
        Self::Masked { n_nodes: j, mask }
    }

    pub fn mask(&self) -> Option<&[bool]> {
        match self {
            Self::Full => None,
            Self::Masked { mask, .. } => Some(mask),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_head_split_enforced() {
        let mut cfg = EgtConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.head_dim = 5;
        assert!(matches!(cfg.validate(), Err(EncoderError::HeadSplit { .. })));
        cfg.head_dim = 0;
        assert!(matches!(cfg.validate(), Err(EncoderError::ZeroField { .. })));
    }

    #[test]
    fn snapshot_wants_three_features() {
        assert!(NodeFeatureSnapshot::new(0, Matrix::zeros(4, 3)).is_ok());
        assert!(matches!(
            NodeFeatureSnapshot::new(0, Matrix::zeros(4, 2)),
            Err(EncoderError::BadFeatureShape { .. })
        ));
    }

    #[test]
    fn masked_neighborhood_always_includes_self() {
        let adj = Adjacency {
            matrix: Matrix::zeros(3, 3),
            mode: crate::graph::ConnectivityMode::Spatial,
        };
        let n = Neighborhood::masked_from(&adj);
        let mask = n.mask().unwrap();
        for i in 0..3 {
            assert!(mask[i * 3 + i]);
        }
    }
}
