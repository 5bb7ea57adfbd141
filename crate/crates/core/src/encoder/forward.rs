//! Forward passes of the graph transformer.
//!
//! Two paths share the same numeric kernels: a pure per-sequence path used
//! for inference, archetype refreshes, and oracle tests (eval-mode
//! normalization, no gradients), and a tape path that encodes a whole
//! mini-batch for training. In the batched path, batchnorm statistics span
//! the rows of every snapshot in the batch (batch x nodes), so all
//! snapshots are stacked into one matrix around each normalization.

use super::{EgtConfig, EncoderError, ModelParams, Neighborhood, NodeFeatureSnapshot};
use crate::tensor::tape::BN_EPS;
use crate::tensor::{Matrix, NodeId, Tape};

/// Which batchnorm statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current row batch; needs at least 2 rows.
    Train,
    /// Stored running statistics; a pure per-row affine map.
    Eval,
}

/// Output of [`encode_sequence`]: the sequence vector, per-snapshot means,
/// and the final per-node features each snapshot produced.
#[derive(Debug, Clone)]
pub struct SequenceRepresentation {
    /// Sequence-level representation S (mean of the snapshot means).
    pub sequence: Vec<f64>,
    /// Per-snapshot graph representations s^t.
    pub snapshot_means: Vec<Vec<f64>>,
    /// Final-layer node features per snapshot, each Jxd.
    pub node_features: Vec<Matrix>,
}

/// Position-enhanced node embedding: `h_i = (W_v v_i + b_v) + (W_p l_i + b_p)`.
pub fn embed_nodes(
    snapshot: &NodeFeatureSnapshot,
    pe: &crate::graph::PositionalEncodings,
    params: &ModelParams,
) -> Result<Matrix, EncoderError> {
    if snapshot.n_nodes() != pe.n_nodes() {
        return Err(EncoderError::NodeCountMismatch {
            expected: pe.n_nodes(),
            got: snapshot.n_nodes(),
        });
    }
    let sig = snapshot
        .features
        .gemm(&params.w_v, false, true)?
        .add_row_broadcast(&params.b_v)?;
    let pos = pe.vectors.gemm(&params.w_p, false, true)?.add_row_broadcast(&params.b_p)?;
    Ok(sig.add(&pos)?)
}

/// Per-head attention weight matrices (each JxJ, rows summing to 1) for
/// one layer, as the layer's softmax produces them.
pub fn fr_attention_weights(
    h: &Matrix,
    layer: usize,
    params: &ModelParams,
    neighborhood: &Neighborhood,
) -> Result<Vec<Matrix>, EncoderError> {
    let lp = params.layers.get(layer).ok_or(EncoderError::LayerOutOfRange {
        layer,
        layers: params.layers.len(),
    })?;
    let scale = 1.0 / (params.dims.config.head_dim as f64).sqrt();
    let mut out = Vec::with_capacity(lp.heads.len());
    for head in &lp.heads {
        let q = h.gemm(&head.q, false, true)?;
        let k = h.gemm(&head.k, false, true)?;
        let logits = q.gemm(&k, false, true)?.scale(scale)?;
        out.push(logits.softmax_rows_masked(neighborhood.mask())?);
    }
    Ok(out)
}

/// One multi-head full-relation attention layer over the node set.
/// `neighborhood` restricts each node's softmax support; `Full` attends to
/// every node.
pub fn fr_attention_layer(
    h: &Matrix,
    layer: usize,
    params: &ModelParams,
    neighborhood: &Neighborhood,
) -> Result<Matrix, EncoderError> {
    let lp = params.layers.get(layer).ok_or(EncoderError::LayerOutOfRange {
        layer,
        layers: params.layers.len(),
    })?;
    let scale = 1.0 / (params.dims.config.head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(lp.heads.len());
    for head in &lp.heads {
        let q = h.gemm(&head.q, false, true)?;
        let k = h.gemm(&head.k, false, true)?;
        let v = h.gemm(&head.v, false, true)?;
        let logits = q.gemm(&k, false, true)?.scale(scale)?;
        let weights = logits.softmax_rows_masked(neighborhood.mask())?;
        head_outputs.push(weights.matmul(&v)?);
    }
    let refs: Vec<&Matrix> = head_outputs.iter().collect();
    let concat = Matrix::concat_cols(&refs)?;
    Ok(concat.gemm(&lp.o, false, true)?)
}

fn batchnorm_forward(x: &Matrix, scale: &Matrix, shift: &Matrix, mean: &Matrix, var: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let inv_std = 1.0 / (var.at(0, j) + BN_EPS).sqrt();
        scale.at(0, j) * (x.at(i, j) - mean.at(0, j)) * inv_std + shift.at(0, j)
    })
}

fn batch_moments(x: &Matrix) -> (Matrix, Matrix) {
    let mean = x.mean_rows();
    let mut var = Matrix::zeros(1, x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let d = x.at(i, j) - mean.at(0, j);
            var.set(0, j, var.at(0, j) + d * d);
        }
    }
    let inv = 1.0 / x.rows() as f64;
    for j in 0..x.cols() {
        var.set(0, j, var.at(0, j) * inv);
    }
    (mean, var)
}

/// Residual FFN block: `hbar = Norm(h + h_att); out = Norm(hbar + W2 relu(W1 hbar))`.
/// In train mode the normalization statistics come from the rows of the
/// input itself (at least 2 required); eval mode uses running statistics.
pub fn ffn_block(
    h: &Matrix,
    h_att: &Matrix,
    layer: usize,
    params: &ModelParams,
    mode: NormMode,
) -> Result<Matrix, EncoderError> {
    let lp = params.layers.get(layer).ok_or(EncoderError::LayerOutOfRange {
        layer,
        layers: params.layers.len(),
    })?;
    let norm = |x: &Matrix, bn: &super::BatchNormParams| -> Result<Matrix, EncoderError> {
        match mode {
            NormMode::Train => {
                if x.rows() < 2 {
                    return Err(crate::tensor::TensorError::DegenerateBatch { rows: x.rows() }.into());
                }
                let (mean, var) = batch_moments(x);
                Ok(batchnorm_forward(x, &bn.scale, &bn.shift, &mean, &var))
            }
            NormMode::Eval => {
                Ok(batchnorm_forward(x, &bn.scale, &bn.shift, &bn.running_mean, &bn.running_var))
            }
        }
    };
    let hbar = norm(&h.add(h_att)?, &lp.bn1)?;
    let inner = hbar.gemm(&lp.w1, false, true)?.relu().gemm(&lp.w2, false, true)?;
    norm(&hbar.add(&inner)?, &lp.bn2)
}

/// Encodes one sequence of `f` snapshots into its representations using
/// eval-mode normalization; a pure function of its inputs.
pub fn encode_sequence(
    snapshots: &[NodeFeatureSnapshot],
    pe: &crate::graph::PositionalEncodings,
    params: &ModelParams,
    config: &EgtConfig,
    neighborhood: &Neighborhood,
) -> Result<SequenceRepresentation, EncoderError> {
    if snapshots.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    if snapshots.len() != config.snapshots {
        return Err(EncoderError::SnapshotCount {
            expected: config.snapshots,
            got: snapshots.len(),
        });
    }
    let mut node_features = Vec::with_capacity(snapshots.len());
    let mut snapshot_means = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let mut h = embed_nodes(snap, pe, params)?;
        for layer in 0..config.n_layers {
            let att = fr_attention_layer(&h, layer, params, neighborhood)?;
            h = ffn_block(&h, &att, layer, params, NormMode::Eval)?;
        }
        snapshot_means.push(h.mean_rows().into_data());
        node_features.push(h);
    }
    let d = config.embed_dim;
    let mut sequence = vec![0.0; d];
    for s in &snapshot_means {
        for (acc, v) in sequence.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let inv = 1.0 / snapshot_means.len() as f64;
    for v in &mut sequence {
        *v *= inv;
    }
    Ok(SequenceRepresentation { sequence, snapshot_means, node_features })
}

/// Tape nodes of every trainable tensor, in the same canonical order as
/// [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_p: NodeId,
    pub b_p: NodeId,
    pub layers: Vec<LayerNodes>,
    pub f1_w: NodeId,
    pub f1_b: NodeId,
    pub f2_w: NodeId,
    pub f2_b: NodeId,
    pub align_w: NodeId,
    pub align_b: NodeId,
    pub classifier: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub heads: Vec<(NodeId, NodeId, NodeId)>,
    pub o: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
    pub bn1: (NodeId, NodeId),
    pub bn2: (NodeId, NodeId),
}

impl ParamNodes {
    /// Registers every trainable tensor on the tape.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut layers = Vec::with_capacity(params.layers.len());
        let w_v = tape.param(params.w_v.clone());
        let b_v = tape.param(params.b_v.clone());
        let w_p = tape.param(params.w_p.clone());
        let b_p = tape.param(params.b_p.clone());
        for layer in &params.layers {
            let heads = layer
                .heads
                .iter()
                .map(|h| {
                    (tape.param(h.q.clone()), tape.param(h.k.clone()), tape.param(h.v.clone()))
                })
                .collect();
            layers.push(LayerNodes {
                heads,
                o: tape.param(layer.o.clone()),
                w1: tape.param(layer.w1.clone()),
                w2: tape.param(layer.w2.clone()),
                bn1: (tape.param(layer.bn1.scale.clone()), tape.param(layer.bn1.shift.clone())),
                bn2: (tape.param(layer.bn2.scale.clone()), tape.param(layer.bn2.shift.clone())),
            });
        }
        Self {
            w_v,
            b_v,
            w_p,
            b_p,
            layers,
            f1_w: tape.param(params.f1_w.clone()),
            f1_b: tape.param(params.f1_b.clone()),
            f2_w: tape.param(params.f2_w.clone()),
            f2_b: tape.param(params.f2_b.clone()),
            align_w: tape.param(params.align_w.clone()),
            align_b: tape.param(params.align_b.clone()),
            classifier: params.classifier.as_ref().map(|c| tape.param(c.clone())),
        }
    }

    /// Node ids in canonical trainable order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.w_v, self.b_v, self.w_p, self.b_p];
        for layer in &self.layers {
            for &(q, k, v) in &layer.heads {
                out.extend([q, k, v]);
            }
            out.extend([layer.o, layer.w1, layer.w2]);
            out.extend([layer.bn1.0, layer.bn1.1, layer.bn2.0, layer.bn2.1]);
        }
        out.extend([self.f1_w, self.f1_b, self.f2_w, self.f2_b, self.align_w, self.align_b]);
        if let Some(c) = self.classifier {
            out.push(c);
        }
        out
    }
}

/// Tape handles produced by [`encode_batch`].
#[derive(Debug)]
pub struct BatchEncoding {
    /// Per sequence: the 1xd sequence representation node.
    pub sequences: Vec<NodeId>,
    /// Per sequence, per snapshot: the 1xd snapshot mean node.
    pub snapshots: Vec<Vec<NodeId>>,
    /// Train-mode batchnorm nodes in execution order
    /// (layer0.bn1, layer0.bn2, layer1.bn1, ...), for running-stat updates.
    pub bn_nodes: Vec<NodeId>,
}

/// Encodes a mini-batch of sequences on the tape. Every sequence must have
/// `config.snapshots` snapshots over the same node count as `pe`.
/// `params` supplies the running statistics for eval-mode normalization;
/// the trainable tensors come from `nodes`.
#[allow(clippy::too_many_arguments)]
pub fn encode_batch(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ModelParams,
    batch: &[&[NodeFeatureSnapshot]],
    pe: &crate::graph::PositionalEncodings,
    config: &EgtConfig,
    neighborhood: &Neighborhood,
    mode: NormMode,
) -> Result<BatchEncoding, EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    let j = pe.n_nodes();
    let f = config.snapshots;
    for seq in batch {
        if seq.len() != f {
            return Err(EncoderError::SnapshotCount { expected: f, got: seq.len() });
        }
        for snap in *seq {
            if snap.n_nodes() != j {
                return Err(EncoderError::NodeCountMismatch { expected: j, got: snap.n_nodes() });
            }
        }
    }
    let n_blocks = batch.len() * f;

    // Stack all snapshot features and tiled positional encodings once.
    let feats: Vec<&Matrix> = batch.iter().flat_map(|seq| seq.iter().map(|s| &s.features)).collect();
    let features = tape.constant(Matrix::concat_rows(&feats)?);
    let pe_tiled = {
        let tiles: Vec<&Matrix> = (0..n_blocks).map(|_| &pe.vectors).collect();
        tape.constant(Matrix::concat_rows(&tiles)?)
    };

    let sig = tape.matmul_nt(features, nodes.w_v)?;
    let sig = tape.add_row_broadcast(sig, nodes.b_v)?;
    let pos = tape.matmul_nt(pe_tiled, nodes.w_p)?;
    let pos = tape.add_row_broadcast(pos, nodes.b_p)?;
    let mut h = tape.add(sig, pos)?;

    let scale = 1.0 / (config.head_dim as f64).sqrt();
    let mut bn_nodes = Vec::new();
    for (layer, layer_params) in nodes.layers.iter().zip(&params.layers) {
        // Attention runs per snapshot block of J rows.
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let hs = tape.slice_rows(h, b * j, j)?;
            let mut head_outs = Vec::with_capacity(layer.heads.len());
            for &(qw, kw, vw) in &layer.heads {
                let q = tape.matmul_nt(hs, qw)?;
                let k = tape.matmul_nt(hs, kw)?;
                let v = tape.matmul_nt(hs, vw)?;
                let logits = tape.matmul_nt(q, k)?;
                let logits = tape.scale(logits, scale)?;
                let weights = match neighborhood.mask() {
                    Some(mask) => tape.softmax_rows_masked(logits, mask)?,
                    None => tape.softmax_rows(logits),
                };
                head_outs.push(tape.matmul(weights, v)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let att = tape.matmul_nt(concat, layer.o)?;
            blocks.push(tape.add(hs, att)?);
        }
        let stacked = tape.concat_rows(&blocks)?;

        let bn = |tape: &mut Tape, x: NodeId, (s, b): (NodeId, NodeId), running: &super::BatchNormParams| {
            match mode {
                NormMode::Train => tape.batchnorm_train(x, s, b),
                NormMode::Eval => {
                    tape.batchnorm_eval(x, s, b, &running.running_mean, &running.running_var)
                }
            }
        };
        let hbar = bn(tape, stacked, layer.bn1, &layer_params.bn1)?;
        if mode == NormMode::Train {
            bn_nodes.push(hbar);
        }
        let inner = tape.matmul_nt(hbar, layer.w1)?;
        let inner = tape.relu(inner);
        let inner = tape.matmul_nt(inner, layer.w2)?;
        let summed = tape.add(hbar, inner)?;
        let out = bn(tape, summed, layer.bn2, &layer_params.bn2)?;
        if mode == NormMode::Train {
            bn_nodes.push(out);
        }
        h = out;
    }

    let mut sequences = Vec::with_capacity(batch.len());
    let mut snapshots = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let mut snaps = Vec::with_capacity(f);
        for t in 0..f {
            let block = tape.slice_rows(h, (b * f + t) * j, j)?;
            snaps.push(tape.mean_rows(block));
        }
        let stacked = tape.concat_rows(&snaps)?;
        sequences.push(tape.mean_rows(stacked));
        snapshots.push(snaps);
    }
    Ok(BatchEncoding { sequences, snapshots, bn_nodes })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracles are written in index form
mod tests {
    use super::*;
    use crate::encoder::{ModelDims, Neighborhood};
    use crate::graph::PositionalEncodings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            config: EgtConfig {
                embed_dim: 4,
                n_heads: 2,
                n_layers: 2,
                pe_dim: 2,
                head_dim: 2,
                snapshots: 2,
            },
            align_dim: 3,
            n_classes: 3,
            with_classifier: true,
        }
    }

    fn random_pe(j: usize, k: usize, rng: &mut ChaCha8Rng) -> PositionalEncodings {
        PositionalEncodings {
            k,
            vectors: Matrix::from_fn(j, k, |_, _| rng.gen_range(-0.5..0.5)),
        }
    }

    fn random_snapshot(t: usize, j: usize, rng: &mut ChaCha8Rng) -> NodeFeatureSnapshot {
        NodeFeatureSnapshot::new(t, Matrix::from_fn(j, 3, |_, _| rng.gen_range(-1.0..1.0)))
            .unwrap()
    }

    #[test]
    fn embed_zero_inputs_gives_bias_sum() {
        let params = ModelParams::init(tiny_dims(), 3).unwrap();
        let pe = PositionalEncodings { k: 2, vectors: Matrix::zeros(3, 2) };
        let snap = NodeFeatureSnapshot::new(0, Matrix::zeros(3, 3)).unwrap();
        let h = embed_nodes(&snap, &pe, &params).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                let want = params.b_v.at(0, c) + params.b_p.at(0, c);
                assert!((h.at(i, c) - want).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn embed_identical_nodes_get_identical_embeddings() {
        let params = ModelParams::init(tiny_dims(), 4).unwrap();
        let pe = PositionalEncodings {
            k: 2,
            vectors: Matrix::new(2, 2, vec![0.3, -0.2, 0.3, -0.2]).unwrap(),
        };
        let snap = NodeFeatureSnapshot::new(
            0,
            Matrix::new(2, 3, vec![0.5, 1.0, -0.5, 0.5, 1.0, -0.5]).unwrap(),
        )
        .unwrap();
        let h = embed_nodes(&snap, &pe, &params).unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    #[test]
    fn embed_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(tiny_dims(), 5).unwrap();
        let pe = random_pe(5, 2, &mut rng);
        let snap = random_snapshot(0, 5, &mut rng);
        let h = embed_nodes(&snap, &pe, &params).unwrap();
        // Per-node matrix-vector oracle.
        for i in 0..5 {
            for c in 0..4 {
                let mut want = params.b_v.at(0, c) + params.b_p.at(0, c);
                for x in 0..3 {
                    want += params.w_v.at(c, x) * snap.features.at(i, x);
                }
                for x in 0..2 {
                    want += params.w_p.at(c, x) * pe.vectors.at(i, x);
                }
                assert!((h.at(i, c) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_node_weight_is_one() {
        let dims = ModelDims {
            config: EgtConfig {
                embed_dim: 4,
                n_heads: 2,
                n_layers: 1,
                pe_dim: 1,
                head_dim: 2,
                snapshots: 1,
            },
            ..tiny_dims()
        };
        let params = ModelParams::init(dims, 6).unwrap();
        let h = Matrix::new(1, 4, vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let out = fr_attention_layer(&h, 0, &params, &Neighborhood::Full).unwrap();
        // With one node the softmax weight is exactly 1, so the output is
        // O * concat_k(V h).
        let lp = &params.layers[0];
        let parts: Vec<Matrix> = lp.heads.iter().map(|hd| h.gemm(&hd.v, false, true).unwrap()).collect();
        let refs: Vec<&Matrix> = parts.iter().collect();
        let expect = Matrix::concat_cols(&refs).unwrap().gemm(&lp.o, false, true).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn attention_zero_query_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ModelParams::init(tiny_dims(), 7).unwrap();
        for head in &mut params.layers[0].heads {
            head.q = Matrix::zeros(2, 4);
        }
        let j = 5;
        let h = Matrix::from_fn(j, 4, |_, _| rng.gen_range(-1.0..1.0));
        let out = fr_attention_layer(&h, 0, &params, &Neighborhood::Full).unwrap();
        // Uniform weights average the value vectors: output = O concat_k(V mean(h)).
        let mean = h.mean_rows();
        let lp = &params.layers[0];
        let parts: Vec<Matrix> =
            lp.heads.iter().map(|hd| mean.gemm(&hd.v, false, true).unwrap()).collect();
        let refs: Vec<&Matrix> = parts.iter().collect();
        let row = Matrix::concat_cols(&refs).unwrap().gemm(&lp.o, false, true).unwrap();
        for i in 0..j {
            for c in 0..4 {
                assert!((out.at(i, c) - row.at(0, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let params = ModelParams::init(tiny_dims(), 100 + trial).unwrap();
            let j = 3;
            let h = Matrix::from_fn(j, 4, |_, _| rng.gen_range(-1.0..1.0));
            let out = fr_attention_layer(&h, 0, &params, &Neighborhood::Full).unwrap();

            // Naive O(J^2) double-loop oracle, one pair at a time.
            let lp = &params.layers[0];
            let dk = 2.0_f64;
            let mut per_head = Vec::new();
            for head in &lp.heads {
                let q = h.gemm(&head.q, false, true).unwrap();
                let k = h.gemm(&head.k, false, true).unwrap();
                let v = h.gemm(&head.v, false, true).unwrap();
                let mut res = Matrix::zeros(j, 2);
                for i in 0..j {
                    let mut logits = vec![0.0; j];
                    for q2 in 0..j {
                        let mut dot = 0.0;
                        for c in 0..2 {
                            dot += q.at(i, c) * k.at(q2, c);
                        }
                        logits[q2] = dot / dk.sqrt();
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for q2 in 0..j {
                        let w = exps[q2] / sum;
                        for c in 0..2 {
                            res.set(i, c, res.at(i, c) + w * v.at(q2, c));
                        }
                    }
                }
                per_head.push(res);
            }
            let refs: Vec<&Matrix> = per_head.iter().collect();
            let expect =
                Matrix::concat_cols(&refs).unwrap().gemm(&lp.o, false, true).unwrap();
            assert!(out.max_abs_diff(&expect) <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn ffn_identity_norm_passes_residual_through() {
        let mut params = ModelParams::init(tiny_dims(), 19).unwrap();
        params.layers[0].w1 = Matrix::zeros(8, 4);
        params.layers[0].w2 = Matrix::zeros(4, 8);
        // Identity-configured norm: scale 1, shift 0, unit running stats.
        let h = Matrix::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]).unwrap();
        let att = Matrix::new(2, 4, vec![0.5; 8]).unwrap();
        let out = ffn_block(&h, &att, 0, &params, NormMode::Eval).unwrap();
        // BN with mean 0 / var 1 is x / sqrt(1 + eps), applied twice.
        let damp = 1.0 / (1.0 + BN_EPS).sqrt();
        let expect = h.add(&att).unwrap().scale(damp * damp).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn ffn_all_negative_preactivation_contributes_nothing() {
        let mut params = ModelParams::init(tiny_dims(), 23).unwrap();
        // Force strongly negative preactivations; relu kills them and only
        // the residual path remains.
        params.layers[0].w1 = Matrix::from_fn(8, 4, |_, _| -5.0);
        let h = Matrix::from_fn(2, 4, |i, j| 0.2 + 0.1 * (i + j) as f64);
        let att = Matrix::zeros(2, 4);
        let out = ffn_block(&h, &att, 0, &params, NormMode::Eval).unwrap();
        let damp = 1.0 / (1.0 + BN_EPS).sqrt();
        let expect = h.scale(damp * damp).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn ffn_matches_straight_line_oracle_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut params = ModelParams::init(tiny_dims(), 31).unwrap();
        // Non-trivial running stats.
        for layer in &mut params.layers {
            for bn in [&mut layer.bn1, &mut layer.bn2] {
                bn.running_mean = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-0.5..0.5));
                bn.running_var = Matrix::from_fn(1, 4, |_, _| rng.gen_range(0.5..1.5));
                bn.scale = Matrix::from_fn(1, 4, |_, _| rng.gen_range(0.5..1.5));
                bn.shift = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-0.3..0.3));
            }
        }
        let h = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let att = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let out = ffn_block(&h, &att, 0, &params, NormMode::Eval).unwrap();

        // Straight-line scalar oracle.
        let lp = &params.layers[0];
        let norm = |x: f64, j: usize, bn: &crate::encoder::BatchNormParams| {
            bn.scale.at(0, j) * (x - bn.running_mean.at(0, j))
                / (bn.running_var.at(0, j) + BN_EPS).sqrt()
                + bn.shift.at(0, j)
        };
        for i in 0..3 {
            let mut hbar = [0.0; 4];
            for j in 0..4 {
                hbar[j] = norm(h.at(i, j) + att.at(i, j), j, &lp.bn1);
            }
            let mut mid = [0.0; 8];
            for r in 0..8 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += lp.w1.at(r, j) * hbar[j];
                }
                mid[r] = acc.max(0.0);
            }
            for j in 0..4 {
                let mut acc = hbar[j];
                for r in 0..8 {
                    acc += lp.w2.at(j, r) * mid[r];
                }
                let want = norm(acc, j, &lp.bn2);
                assert!((out.at(i, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ffn_train_mode_rejects_single_row() {
        let params = ModelParams::init(tiny_dims(), 37).unwrap();
        let h = Matrix::zeros(1, 4);
        let att = Matrix::zeros(1, 4);
        let err = ffn_block(&h, &att, 0, &params, NormMode::Train).unwrap_err();
        assert!(matches!(
            err,
            EncoderError::Tensor(crate::tensor::TensorError::DegenerateBatch { rows: 1 })
        ));
    }

    #[test]
    fn embed_rejects_node_count_mismatch() {
        let params = ModelParams::init(tiny_dims(), 2).unwrap();
        let pe = PositionalEncodings { k: 2, vectors: Matrix::zeros(3, 2) };
        let snap = NodeFeatureSnapshot::new(0, Matrix::zeros(5, 3)).unwrap();
        assert!(matches!(
            embed_nodes(&snap, &pe, &params),
            Err(EncoderError::NodeCountMismatch { expected: 3, got: 5 })
        ));
    }

    #[test]
    fn encode_sequence_rejects_empty_and_wrong_count() {
        let params = ModelParams::init(tiny_dims(), 2).unwrap();
        let cfg = params.dims.config;
        let pe = PositionalEncodings { k: 2, vectors: Matrix::zeros(3, 2) };
        assert!(matches!(
            encode_sequence(&[], &pe, &params, &cfg, &Neighborhood::Full),
            Err(EncoderError::EmptySequence)
        ));
        let one = vec![NodeFeatureSnapshot::new(0, Matrix::zeros(3, 3)).unwrap()];
        assert!(matches!(
            encode_sequence(&one, &pe, &params, &cfg, &Neighborhood::Full),
            Err(EncoderError::SnapshotCount { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn encode_sequence_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = ModelParams::init(tiny_dims(), 43).unwrap();
        let cfg = params.dims.config;
        let j = 4;
        let pe = random_pe(j, 2, &mut rng);
        let snaps: Vec<NodeFeatureSnapshot> =
            (0..2).map(|t| random_snapshot(t, j, &mut rng)).collect();
        let rep = encode_sequence(&snaps, &pe, &params, &cfg, &Neighborhood::Full).unwrap();

        // S equals the mean of the s^t; each s^t equals the node mean.
        for c in 0..4 {
            let want = (rep.snapshot_means[0][c] + rep.snapshot_means[1][c]) / 2.0;
            assert!((rep.sequence[c] - want).abs() <= 1e-12);
        }
        for (t, nf) in rep.node_features.iter().enumerate() {
            let m = nf.mean_rows();
            for c in 0..4 {
                assert!((rep.snapshot_means[t][c] - m.at(0, c)).abs() <= 1e-12);
            }
        }

        // Identical snapshots produce identical means; f=1 gives S = s^1.
        let twin = vec![snaps[0].clone(), snaps[0].clone()];
        let rep2 = encode_sequence(&twin, &pe, &params, &cfg, &Neighborhood::Full).unwrap();
        assert_eq!(rep2.snapshot_means[0], rep2.snapshot_means[1]);
        assert_eq!(rep2.sequence, rep2.snapshot_means[0]);

        // Recomputation oracle: each s^t from an f=1 pass through the same
        // stack matches the batched sequence encoding.
        let mut cfg1 = cfg;
        cfg1.snapshots = 1;
        for t in 0..2 {
            let one = encode_sequence(
                std::slice::from_ref(&snaps[t]),
                &pe,
                &params,
                &cfg1,
                &Neighborhood::Full,
            )
            .unwrap();
            for c in 0..4 {
                assert!((one.snapshot_means[0][c] - rep.snapshot_means[t][c]).abs() <= 1e-12);
            }
        }

        // Eval-mode forward is pure: bit-identical on re-run.
        let rep3 = encode_sequence(&snaps, &pe, &params, &cfg, &Neighborhood::Full).unwrap();
        assert_eq!(rep.sequence, rep3.sequence);
    }

    #[test]
    fn batched_tape_encoding_matches_pure_path_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let params = ModelParams::init(tiny_dims(), 53).unwrap();
        let cfg = params.dims.config;
        let j = 4;
        let pe = random_pe(j, 2, &mut rng);
        let seqs: Vec<Vec<NodeFeatureSnapshot>> = (0..3)
            .map(|_| (0..2).map(|t| random_snapshot(t, j, &mut rng)).collect())
            .collect();

        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &params);
        let refs: Vec<&[NodeFeatureSnapshot]> = seqs.iter().map(|s| s.as_slice()).collect();
        let enc = encode_batch(
            &mut tape,
            &nodes,
            &params,
            &refs,
            &pe,
            &cfg,
            &Neighborhood::Full,
            NormMode::Eval,
        )
        .unwrap();
        for (b, seq) in seqs.iter().enumerate() {
            let rep = encode_sequence(seq, &pe, &params, &cfg, &Neighborhood::Full).unwrap();
            let tape_s = tape.value(enc.sequences[b]);
            for c in 0..4 {
                assert!((tape_s.at(0, c) - rep.sequence[c]).abs() <= 1e-12);
            }
        }
    }
}
