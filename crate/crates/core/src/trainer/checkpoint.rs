//! Training-state container: the model, optimizer moments, position within
//! the epoch, RNG state, archetype bank, and best-metric record. Round
//! trips are bit-exact, so a restored run continues identically.
//!
//! Layout: magic `EGTT`, `u32` version, the embedded model container
//! (see the model codec), optimizer kind + hyperparameters + moments,
//! progress counters, RNG seed and word position, the current epoch's
//! shuffled order and cursor, the optional archetype bank, and the
//! optional best-metric snapshot.

use std::io::{Read, Write};

use crate::encoder::checkpoint::{
    read_exact, read_f64, read_u32, read_u64, write_f64, write_u32, write_u64,
};
use crate::encoder::{read_model_from, write_model, CheckpointError, ModelParams};
use crate::objectives::{ArchetypeBank, ArchetypeEntry};
use crate::tensor::Matrix;
use crate::trainer::optim::{OptimizerKind, OptimizerState};

pub const TRAIN_STATE_MAGIC: [u8; 4] = *b"EGTT";
const TRAIN_STATE_VERSION: u32 = 1;

/// Best evaluation metric seen so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMetric {
    pub epoch: u64,
    pub top1: f64,
}

/// Everything needed to resume training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    /// Shuffled train indices of the epoch in progress (empty before the
    /// first epoch starts).
    pub epoch_order: Vec<u32>,
    /// Next unconsumed position in `epoch_order`.
    pub cursor: u64,
    /// Bank of the epoch in progress, when the objective uses one.
    pub bank: Option<ArchetypeBank>,
    pub best: Option<BestMetric>,
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<(), CheckpointError> {
    write_u64(w, m.rows() as u64)?;
    write_u64(w, m.cols() as u64)?;
    for &v in m.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read, context: &str) -> Result<Matrix, CheckpointError> {
    let rows = read_u64(r, context)? as usize;
    let cols = read_u64(r, context)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r, context)?);
    }
    Matrix::new(rows, cols, data).map_err(|_| CheckpointError::ShapeMismatch {
        tensor: context.to_string(),
        expected: rows * cols,
        got: rows * cols,
    })
}

fn write_bank(w: &mut impl Write, bank: &ArchetypeBank) -> Result<(), CheckpointError> {
    write_u32(w, bank.n_classes() as u32)?;
    write_u64(w, bank.epoch_tag)?;
    for class in 0..bank.n_classes() {
        match bank.archetype(class) {
            None => write_u32(w, 0)?,
            Some(entry) => {
                write_u32(w, 1)?;
                write_u64(w, entry.count as u64)?;
                write_u64(w, entry.mean.len() as u64)?;
                for &v in &entry.mean {
                    write_f64(w, v)?;
                }
            }
        }
    }
    Ok(())
}

fn read_bank(r: &mut impl Read) -> Result<ArchetypeBank, CheckpointError> {
    let n_classes = read_u32(r, "bank classes")? as usize;
    let epoch_tag = read_u64(r, "bank tag")?;
    let mut entries: Vec<Option<ArchetypeEntry>> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let present = read_u32(r, "bank entry flag")?;
        if present == 0 {
            entries.push(None);
            continue;
        }
        let count = read_u64(r, "bank entry count")? as usize;
        let dim = read_u64(r, "bank entry dim")? as usize;
        let mut mean = Vec::with_capacity(dim);
        for _ in 0..dim {
            mean.push(read_f64(r, "bank entry mean")?);
        }
        entries.push(Some(ArchetypeEntry { mean, count }));
    }
    ArchetypeBank::from_entries(n_classes, entries, epoch_tag).map_err(|_| {
        CheckpointError::ShapeMismatch {
            tensor: "archetype bank".to_string(),
            expected: n_classes,
            got: 0,
        }
    })
}

/// Serializes a training state.
pub fn write_train_state(w: &mut impl Write, state: &TrainState) -> Result<(), CheckpointError> {
    w.write_all(&TRAIN_STATE_MAGIC)?;
    write_u32(w, TRAIN_STATE_VERSION)?;
    write_model(w, &state.params)?;

    match state.optimizer.kind {
        OptimizerKind::Sgd { momentum } => {
            write_u32(w, 0)?;
            write_f64(w, momentum)?;
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            write_u32(w, 1)?;
            write_f64(w, beta1)?;
            write_f64(w, beta2)?;
            write_f64(w, eps)?;
        }
    }
    write_u64(w, state.optimizer.t)?;
    write_u32(w, state.optimizer.m.len() as u32)?;
    for m in &state.optimizer.m {
        write_matrix(w, m)?;
    }
    write_u32(w, state.optimizer.v.len() as u32)?;
    for v in &state.optimizer.v {
        write_matrix(w, v)?;
    }

    write_u64(w, state.epoch)?;
    write_u64(w, state.step)?;
    write_u64(w, state.rng_seed)?;
    write_u64(w, state.rng_word_pos as u64)?;
    write_u64(w, (state.rng_word_pos >> 64) as u64)?;
    write_u64(w, state.epoch_order.len() as u64)?;
    for &idx in &state.epoch_order {
        write_u32(w, idx)?;
    }
    write_u64(w, state.cursor)?;
    match &state.bank {
        None => write_u32(w, 0)?,
        Some(bank) => {
            write_u32(w, 1)?;
            write_bank(w, bank)?;
        }
    }
    match &state.best {
        None => write_u32(w, 0)?,
        Some(best) => {
            write_u32(w, 1)?;
            write_u64(w, best.epoch)?;
            write_f64(w, best.top1)?;
        }
    }
    Ok(())
}

/// Reads a training state, validating magic, versions, and that every
/// optimizer moment matches its parameter tensor's shape.
pub fn read_train_state(r: &mut impl Read) -> Result<TrainState, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "train-state magic")?;
    if magic != TRAIN_STATE_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(&TRAIN_STATE_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(r, "train-state version")?;
    if version != TRAIN_STATE_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let params = read_model_from(r, false)?;

    let kind = match read_u32(r, "optimizer kind")? {
        0 => OptimizerKind::Sgd { momentum: read_f64(r, "momentum")? },
        1 => OptimizerKind::Adam {
            beta1: read_f64(r, "beta1")?,
            beta2: read_f64(r, "beta2")?,
            eps: read_f64(r, "eps")?,
        },
        v => return Err(CheckpointError::BadHeader { field: "optimizer kind", value: v as u64 }),
    };
    let t = read_u64(r, "optimizer t")?;
    let n_m = read_u32(r, "optimizer m count")? as usize;
    let mut m = Vec::with_capacity(n_m);
    for i in 0..n_m {
        m.push(read_matrix(r, &format!("optimizer m[{i}]"))?);
    }
    let n_v = read_u32(r, "optimizer v count")? as usize;
    let mut v = Vec::with_capacity(n_v);
    for i in 0..n_v {
        v.push(read_matrix(r, &format!("optimizer v[{i}]"))?);
    }
    let trainable = params.tensors();
    if m.len() != trainable.len() || (matches!(kind, OptimizerKind::Adam { .. }) && v.len() != trainable.len()) {
        return Err(CheckpointError::ShapeMismatch {
            tensor: "optimizer moments".to_string(),
            expected: trainable.len(),
            got: m.len(),
        });
    }
    for ((name, p), moment) in trainable.iter().zip(&m) {
        if p.shape() != moment.shape() {
            return Err(CheckpointError::ShapeMismatch {
                tensor: name.clone(),
                expected: p.len(),
                got: moment.len(),
            });
        }
    }
    let optimizer = OptimizerState { kind, t, m, v };

    let epoch = read_u64(r, "epoch")?;
    let step = read_u64(r, "step")?;
    let rng_seed = read_u64(r, "rng seed")?;
    let lo = read_u64(r, "rng word pos lo")? as u128;
    let hi = read_u64(r, "rng word pos hi")? as u128;
    let rng_word_pos = lo | (hi << 64);
    let n_order = read_u64(r, "epoch order")? as usize;
    let mut epoch_order = Vec::with_capacity(n_order);
    for _ in 0..n_order {
        epoch_order.push(read_u32(r, "epoch order entry")?);
    }
    let cursor = read_u64(r, "cursor")?;
    let bank = match read_u32(r, "bank flag")? {
        0 => None,
        1 => Some(read_bank(r)?),
        v => return Err(CheckpointError::BadHeader { field: "bank flag", value: v as u64 }),
    };
    let best = match read_u32(r, "best flag")? {
        0 => None,
        1 => Some(BestMetric { epoch: read_u64(r, "best epoch")?, top1: read_f64(r, "best top1")? }),
        v => return Err(CheckpointError::BadHeader { field: "best flag", value: v as u64 }),
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::TrailingBytes(rest.len()));
    }
    Ok(TrainState {
        params,
        optimizer,
        epoch,
        step,
        rng_seed,
        rng_word_pos,
        epoch_order,
        cursor,
        bank,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EgtConfig, ModelDims};
    use crate::objectives::compute_archetypes;

    fn sample_state() -> TrainState {
        let dims = ModelDims {
            config: EgtConfig {
                embed_dim: 4,
                n_heads: 2,
                n_layers: 1,
                pe_dim: 2,
                head_dim: 2,
                snapshots: 2,
            },
            align_dim: 3,
            n_classes: 2,
            with_classifier: true,
        };
        let params = ModelParams::init(dims, 5).unwrap();
        let shapes: Vec<(usize, usize)> =
            params.tensors().iter().map(|(_, m)| m.shape()).collect();
        let mut optimizer = OptimizerState::new(OptimizerKind::default(), &shapes);
        optimizer.t = 7;
        optimizer.m[0].set(0, 0, 0.123);
        let bank = compute_archetypes(
            &[(vec![1.0, 0.5, -0.5, 0.0], 0), (vec![0.0, 1.0, 0.0, 1.0], 1)],
            2,
            3,
        )
        .unwrap();
        TrainState {
            params,
            optimizer,
            epoch: 3,
            step: 17,
            rng_seed: 99,
            rng_word_pos: (7u128 << 64) | 42u128,
            epoch_order: vec![4, 1, 3, 0, 2],
            cursor: 2,
            bank: Some(bank),
            best: Some(BestMetric { epoch: 2, top1: 0.75 }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let state = sample_state();
        let mut buf = Vec::new();
        write_train_state(&mut buf, &state).unwrap();
        let loaded = read_train_state(&mut buf.as_slice()).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn corrupt_files_rejected() {
        let state = sample_state();
        let mut buf = Vec::new();
        write_train_state(&mut buf, &state).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(matches!(
            read_train_state(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic { .. })
        ));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            read_train_state(&mut &short[..]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut trailing = buf.clone();
        trailing.push(1);
        assert!(matches!(
            read_train_state(&mut trailing.as_slice()),
            Err(CheckpointError::TrailingBytes(1))
        ));
    }
}
