//! Archetype computation and the training losses: sequence- and
//! channel-level archetype contrastive terms and their convex fusion, the
//! alignment loss against class embeddings, and the cross-entropy head.
//!
//! Each loss exists in two forms sharing the same formulas: a pure value
//! function over plain vectors (inference, oracles) and a tape builder used
//! during training. Archetypes are constants on the tape: no gradient flows
//! into the bank within an epoch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{Matrix, NodeId, Tape, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no representations supplied")]
    EmptyInput,
    #[error("class {class} out of range (C = {n_classes})")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("no archetype for referenced class {0}")]
    MissingArchetype(usize),
    #[error("no embedding for referenced class {0}")]
    MissingEmbedding(usize),
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("loss weight must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Loss hyperparameters: the sequence/channel balance, the contrastive
/// temperatures, and the total-loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Balance between sequence-level and channel-level archetype terms.
    pub alpha: f64,
    /// Sequence-level temperature.
    pub tau1: f64,
    /// Channel-level temperature.
    pub tau2: f64,
    /// Alignment temperature.
    pub tau_align: f64,
    pub beta_gac: f64,
    pub beta_align: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tau1: 0.1, tau2: 0.1, tau_align: 0.07, beta_gac: 1.0, beta_align: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::AlphaOutOfRange(self.alpha));
        }
        for tau in [self.tau1, self.tau2, self.tau_align] {
            if tau <= 0.0 || tau.is_nan() {
                return Err(LossError::NonPositiveTemperature(tau));
            }
        }
        for beta in [self.beta_gac, self.beta_align] {
            if beta < 0.0 {
                return Err(LossError::NegativeWeight(beta));
            }
        }
        Ok(())
    }
}

/// Per-class mean of sequence representations with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchetypeEntry {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-class archetypes, recomputed once per epoch. Classes without any
/// sequence are absent, not zero vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchetypeBank {
    n_classes: usize,
    entries: Vec<Option<ArchetypeEntry>>,
    /// Marks the refresh that produced this bank.
    pub epoch_tag: u64,
}

impl ArchetypeBank {
    /// Rebuilds a bank from stored entries (checkpoint restore); the caller
    /// vouches that each entry is a true per-class mean.
    pub fn from_entries(
        n_classes: usize,
        entries: Vec<Option<ArchetypeEntry>>,
        epoch_tag: u64,
    ) -> Result<Self, LossError> {
        if entries.len() != n_classes {
            return Err(LossError::DimensionMismatch { expected: n_classes, got: entries.len() });
        }
        if entries.iter().flatten().any(|e| e.count == 0) {
            return Err(LossError::EmptyInput);
        }
        Ok(Self { n_classes, entries, epoch_tag })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn archetype(&self, class: usize) -> Option<&ArchetypeEntry> {
        self.entries.get(class).and_then(|e| e.as_ref())
    }

    /// Represented classes in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.n_classes).filter(|&k| self.entries[k].is_some()).collect()
    }

    /// Dense matrix over represented classes (rows follow [`Self::classes`])
    /// plus the column index of each class.
    pub fn dense(&self) -> Result<(Matrix, Vec<usize>), LossError> {
        let classes = self.classes();
        if classes.is_empty() {
            return Err(LossError::EmptyInput);
        }
        let d = self.entries[classes[0]].as_ref().expect("present").mean.len();
        let mut m = Matrix::zeros(classes.len(), d);
        for (row, &k) in classes.iter().enumerate() {
            let mean = &self.entries[k].as_ref().expect("present").mean;
            for (c, &v) in mean.iter().enumerate() {
                m.set(row, c, v);
            }
        }
        Ok((m, classes))
    }

    /// Scales every archetype by a constant (used by invariance tests).
    pub fn scaled(&self, factor: f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                e.as_ref().map(|a| ArchetypeEntry {
                    mean: a.mean.iter().map(|v| v * factor).collect(),
                    count: a.count,
                })
            })
            .collect();
        Self { n_classes: self.n_classes, entries, epoch_tag: self.epoch_tag }
    }
}

/// Groups sequence representations by class and takes per-class arithmetic
/// means.
pub fn compute_archetypes(
    reps: &[(Vec<f64>, usize)],
    n_classes: usize,
    epoch_tag: u64,
) -> Result<ArchetypeBank, LossError> {
    if reps.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let d = reps[0].0.len();
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; n_classes];
    for (s, k) in reps {
        if *k >= n_classes {
            return Err(LossError::ClassOutOfRange { class: *k, n_classes });
        }
        if s.len() != d {
            return Err(LossError::DimensionMismatch { expected: d, got: s.len() });
        }
        let slot = sums[*k].get_or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in slot.0.iter_mut().zip(s) {
            *acc += v;
        }
        slot.1 += 1;
    }
    let entries = sums
        .into_iter()
        .map(|slot| {
            slot.map(|(sum, count)| ArchetypeEntry {
                mean: sum.iter().map(|v| v / count as f64).collect(),
                count,
            })
        })
        .collect();
    Ok(ArchetypeBank { n_classes, entries, epoch_tag })
}

/// Unit-normalized per-class embedding vectors standing in for a visual
/// encoder's concept embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

impl ClassEmbeddingTable {
    /// Seeded random unit vectors, one per class.
    pub fn seeded(n_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let embeddings = (0..n_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut v {
                    *x /= norm;
                }
                v
            })
            .collect();
        Self { dim, embeddings }
    }

    /// Builds a table from explicit vectors, normalizing each.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self, LossError> {
        if vectors.is_empty() {
            return Err(LossError::EmptyInput);
        }
        let dim = vectors[0].len();
        let embeddings = vectors
            .into_iter()
            .map(|mut v| {
                if v.len() != dim {
                    return Err(LossError::DimensionMismatch { expected: dim, got: v.len() });
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(LossError::Tensor(TensorError::ZeroNormRow { row: 0 }));
                }
                for x in &mut v {
                    *x /= norm;
                }
                Ok(v)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { dim, embeddings })
    }

    pub fn n_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, class: usize) -> Result<&[f64], LossError> {
        self.embeddings
            .get(class)
            .map(|v| v.as_slice())
            .ok_or(LossError::MissingEmbedding(class))
    }

    /// Rows of the listed classes as a dense matrix.
    pub fn dense(&self, classes: &[usize]) -> Result<Matrix, LossError> {
        let mut m = Matrix::zeros(classes.len(), self.dim);
        for (row, &k) in classes.iter().enumerate() {
            let e = self.embedding(k)?;
            for (c, &v) in e.iter().enumerate() {
                m.set(row, c, v);
            }
        }
        Ok(m)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log sum_i exp(x_i)` with max subtraction.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-softmax of each sample's own-archetype dot product
/// against all represented archetypes (raw dot-product similarity).
pub fn gac_seq_loss(
    reps: &[(&[f64], usize)],
    bank: &ArchetypeBank,
    tau1: f64,
) -> Result<f64, LossError> {
    if reps.is_empty() {
        return Err(LossError::EmptyInput);
    }
    if tau1 <= 0.0 || tau1.is_nan() {
        return Err(LossError::NonPositiveTemperature(tau1));
    }
    let classes = bank.classes();
    if classes.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let mut total = 0.0;
    for (s, k) in reps {
        let own_col = classes
            .iter()
            .position(|&c| c == *k)
            .ok_or(LossError::MissingArchetype(*k))?;
        let logits: Vec<f64> = classes
            .iter()
            .map(|&m| dot(s, &bank.archetype(m).expect("listed").mean) / tau1)
            .collect();
        total += log_sum_exp(&logits) - logits[own_col];
    }
    Ok(total / reps.len() as f64)
}

fn affine(w: &Matrix, b: &Matrix, x: &[f64]) -> Result<Vec<f64>, LossError> {
    if w.cols() != x.len() {
        return Err(LossError::DimensionMismatch { expected: w.cols(), got: x.len() });
    }
    Ok((0..w.rows())
        .map(|r| b.at(0, r) + w.row(r).iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect())
}

/// Channel-level archetype loss: per snapshot representation `s^t`, the
/// negative log-softmax of `F1(s^t) . F2(c_k) / tau2` against all
/// represented classes, averaged over the batch and the `f` snapshots.
/// Gradients flow through `F1`, `F2`, and the encoder, never into the bank.
pub fn gac_channel_loss(
    snapshot_reps: &[(Vec<Vec<f64>>, usize)],
    bank: &ArchetypeBank,
    f1_w: &Matrix,
    f1_b: &Matrix,
    f2_w: &Matrix,
    f2_b: &Matrix,
    tau2: f64,
) -> Result<f64, LossError> {
    if snapshot_reps.is_empty() || snapshot_reps.iter().any(|(snaps, _)| snaps.is_empty()) {
        return Err(LossError::EmptyInput);
    }
    if tau2 <= 0.0 || tau2.is_nan() {
        return Err(LossError::NonPositiveTemperature(tau2));
    }
    let classes = bank.classes();
    if classes.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let projected_bank: Vec<Vec<f64>> = classes
        .iter()
        .map(|&m| affine(f2_w, f2_b, &bank.archetype(m).expect("listed").mean))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (snaps, k) in snapshot_reps {
        let own_col = classes
            .iter()
            .position(|&c| c == *k)
            .ok_or(LossError::MissingArchetype(*k))?;
        for s in snaps {
            let p1 = affine(f1_w, f1_b, s)?;
            let logits: Vec<f64> =
                projected_bank.iter().map(|p2| dot(&p1, p2) / tau2).collect();
            total += log_sum_exp(&logits) - logits[own_col];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Convex fusion of the two archetype terms.
pub fn gac_loss(seq_part: f64, ch_part: f64, alpha: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::AlphaOutOfRange(alpha));
    }
    Ok(alpha * seq_part + (1.0 - alpha) * ch_part)
}

/// Symmetric InfoNCE between unit-normalized projected sequence features
/// and the embeddings of the classes present in the batch: the mean of the
/// feature-to-class and class-to-feature cross-entropies, cosine
/// similarities divided by `tau_align`.
pub fn alignment_loss(
    s_batch: &[(&[f64], usize)],
    table: &ClassEmbeddingTable,
    tau_align: f64,
    proj_w: &Matrix,
    proj_b: &Matrix,
) -> Result<f64, LossError> {
    if s_batch.is_empty() {
        return Err(LossError::EmptyInput);
    }
    if tau_align <= 0.0 || tau_align.is_nan() {
        return Err(LossError::NonPositiveTemperature(tau_align));
    }
    let mut candidates: Vec<usize> = s_batch.iter().map(|(_, k)| *k).collect();
    candidates.sort_unstable();
    candidates.dedup();
    for &k in &candidates {
        table.embedding(k)?;
    }
    let mut z = Vec::with_capacity(s_batch.len());
    for (s, _) in s_batch {
        let mut p = affine(proj_w, proj_b, s)?;
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LossError::Tensor(TensorError::ZeroNormRow { row: z.len() }));
        }
        for v in &mut p {
            *v /= norm;
        }
        z.push(p);
    }
    let n = s_batch.len();
    let m = candidates.len();
    let mut logits = vec![vec![0.0; m]; n];
    for (b, zb) in z.iter().enumerate() {
        for (c, &k) in candidates.iter().enumerate() {
            logits[b][c] = dot(zb, table.embedding(k)?) / tau_align;
        }
    }
    let own: Vec<usize> = s_batch
        .iter()
        .map(|(_, k)| candidates.iter().position(|c| c == k).expect("candidate"))
        .collect();
    let mut to_class = 0.0;
    for b in 0..n {
        to_class += log_sum_exp(&logits[b]) - logits[b][own[b]];
    }
    to_class /= n as f64;
    let mut to_feature = 0.0;
    for b in 0..n {
        let col: Vec<f64> = (0..n).map(|b2| logits[b2][own[b]]).collect();
        to_feature += log_sum_exp(&col) - logits[b][own[b]];
    }
    to_feature /= n as f64;
    Ok(0.5 * (to_class + to_feature))
}

/// Softmax cross-entropy of `classifier * S` against the labels.
pub fn cross_entropy_loss(
    s_batch: &[(&[f64], usize)],
    classifier: &Matrix,
) -> Result<f64, LossError> {
    if s_batch.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let n_classes = classifier.rows();
    let mut total = 0.0;
    for (s, k) in s_batch {
        if *k >= n_classes {
            return Err(LossError::ClassOutOfRange { class: *k, n_classes });
        }
        if classifier.cols() != s.len() {
            return Err(LossError::DimensionMismatch { expected: classifier.cols(), got: s.len() });
        }
        let logits: Vec<f64> =
            (0..n_classes).map(|r| dot(classifier.row(r), s)).collect();
        total += log_sum_exp(&logits) - logits[*k];
    }
    Ok(total / s_batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Tape builders. Same formulas over tape nodes, for training.
// ---------------------------------------------------------------------------

/// Cross-entropy of a logits node against per-row target columns:
/// `-mean_r log softmax(logits)[r, target_r]`.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId, LossError> {
    let (rows, cols) = tape.value(logits).shape();
    if targets.len() != rows {
        return Err(LossError::DimensionMismatch { expected: rows, got: targets.len() });
    }
    let mut onehot = Matrix::zeros(rows, cols);
    for (r, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(LossError::ClassOutOfRange { class: t, n_classes: cols });
        }
        onehot.set(r, t, 1.0 / rows as f64);
    }
    let probs = tape.softmax_rows(logits);
    let logp = tape.log(probs)?;
    let hot = tape.constant(onehot);
    let picked = tape.dot(logp, hot)?;
    Ok(tape.scale(picked, -1.0)?)
}

/// Sequence-level archetype loss on the tape. `sequences` are 1xd nodes.
pub fn gac_seq_loss_on_tape(
    tape: &mut Tape,
    sequences: &[NodeId],
    labels: &[usize],
    bank: &ArchetypeBank,
    tau1: f64,
) -> Result<NodeId, LossError> {
    if sequences.is_empty() || sequences.len() != labels.len() {
        return Err(LossError::EmptyInput);
    }
    if tau1 <= 0.0 || tau1.is_nan() {
        return Err(LossError::NonPositiveTemperature(tau1));
    }
    let (bank_matrix, classes) = bank.dense()?;
    let targets = labels
        .iter()
        .map(|k| classes.iter().position(|c| c == k).ok_or(LossError::MissingArchetype(*k)))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.concat_rows(sequences)?;
    let bank_node = tape.constant(bank_matrix);
    let logits = tape.matmul_nt(stacked, bank_node)?;
    let logits = tape.scale(logits, 1.0 / tau1)?;
    cross_entropy_on_tape(tape, logits, &targets)
}

/// Channel-level archetype loss on the tape. `snapshots[b][t]` are 1xd
/// nodes; projections come from the registered `F1`/`F2` parameter nodes.
#[allow(clippy::too_many_arguments)]
pub fn gac_channel_loss_on_tape(
    tape: &mut Tape,
    snapshots: &[Vec<NodeId>],
    labels: &[usize],
    bank: &ArchetypeBank,
    f1: (NodeId, NodeId),
    f2: (NodeId, NodeId),
    tau2: f64,
) -> Result<NodeId, LossError> {
    if snapshots.is_empty() || snapshots.len() != labels.len() {
        return Err(LossError::EmptyInput);
    }
    if tau2 <= 0.0 || tau2.is_nan() {
        return Err(LossError::NonPositiveTemperature(tau2));
    }
    let (bank_matrix, classes) = bank.dense()?;
    let mut targets = Vec::new();
    let mut flat_nodes = Vec::new();
    for (snaps, k) in snapshots.iter().zip(labels) {
        if snaps.is_empty() {
            return Err(LossError::EmptyInput);
        }
        let col = classes
            .iter()
            .position(|c| c == k)
            .ok_or(LossError::MissingArchetype(*k))?;
        for &node in snaps {
            flat_nodes.push(node);
            targets.push(col);
        }
    }
    let stacked = tape.concat_rows(&flat_nodes)?;
    let p1 = tape.matmul_nt(stacked, f1.0)?;
    let p1 = tape.add_row_broadcast(p1, f1.1)?;
    let bank_node = tape.constant(bank_matrix);
    let p2 = tape.matmul_nt(bank_node, f2.0)?;
    let p2 = tape.add_row_broadcast(p2, f2.1)?;
    let logits = tape.matmul_nt(p1, p2)?;
    let logits = tape.scale(logits, 1.0 / tau2)?;
    cross_entropy_on_tape(tape, logits, &targets)
}

/// Symmetric alignment loss on the tape.
pub fn alignment_loss_on_tape(
    tape: &mut Tape,
    sequences: &[NodeId],
    labels: &[usize],
    table: &ClassEmbeddingTable,
    tau_align: f64,
    proj: (NodeId, NodeId),
) -> Result<NodeId, LossError> {
    if sequences.is_empty() || sequences.len() != labels.len() {
        return Err(LossError::EmptyInput);
    }
    if tau_align <= 0.0 || tau_align.is_nan() {
        return Err(LossError::NonPositiveTemperature(tau_align));
    }
    let mut candidates: Vec<usize> = labels.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let embeds = table.dense(&candidates)?;
    let own: Vec<usize> = labels
        .iter()
        .map(|k| candidates.iter().position(|c| c == k).expect("candidate"))
        .collect();
    let n = sequences.len();

    let stacked = tape.concat_rows(sequences)?;
    let projected = tape.matmul_nt(stacked, proj.0)?;
    let projected = tape.add_row_broadcast(projected, proj.1)?;
    let z = tape.row_normalize(projected)?;
    let table_node = tape.constant(embeds);
    let logits = tape.matmul_nt(z, table_node)?;
    let logits = tape.scale(logits, 1.0 / tau_align)?;
    let to_class = cross_entropy_on_tape(tape, logits, &own)?;

    // Transposed direction: class-to-feature softmax over the batch.
    let logits_t = tape.matmul_nt(table_node, z)?;
    let logits_t = tape.scale(logits_t, 1.0 / tau_align)?;
    let mut onehot = Matrix::zeros(candidates.len(), n);
    for (b, &o) in own.iter().enumerate() {
        onehot.set(o, b, 1.0 / n as f64);
    }
    let probs = tape.softmax_rows(logits_t);
    let logp = tape.log(probs)?;
    let hot = tape.constant(onehot);
    let picked = tape.dot(logp, hot)?;
    let to_feature = tape.scale(picked, -1.0)?;

    let sum = tape.add(to_class, to_feature)?;
    Ok(tape.scale(sum, 0.5)?)
}
