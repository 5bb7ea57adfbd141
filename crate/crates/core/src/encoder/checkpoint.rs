//! Versioned binary model container.
//!
//! Layout: magic bytes `EGT1`, a little-endian `u32` header
//! `(version, embed_dim, n_heads, n_layers, pe_dim, head_dim, snapshots,
//! align_dim, n_classes, with_classifier)`, then every tensor as a
//! little-endian `u64` element count followed by that many `f64` values,
//! row-major. Tensor order follows the parameter declaration: `w_v, b_v,
//! w_p, b_p`, per layer `(per head q, k, v), o, w1, w2, bn1 scale/shift/
//! running-mean/running-var, bn2 likewise`, then `f1_w, f1_b, f2_w, f2_b,
//! align_w, align_b` and, when present, `classifier`. The reader rejects
//! wrong magic, unknown versions, truncation, per-tensor shape mismatches,
//! and trailing bytes.

use std::io::{Read, Write};

use thiserror::Error;

use super::{BatchNormParams, EgtConfig, EncoderError, ModelDims, ModelParams};
use crate::tensor::Matrix;

pub const MODEL_MAGIC: [u8; 4] = *b"EGT1";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload while reading {context}")]
    Truncated { context: String },
    #[error("tensor {tensor}: expected {expected} values, found {got}")]
    ShapeMismatch { tensor: String, expected: usize, got: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid header field {field} = {value}")]
    BadHeader { field: &'static str, value: u64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_exact(
    r: &mut impl Read,
    buf: &mut [u8],
    context: &str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context: context.to_string() }
        } else {
            CheckpointError::Io(e)
        }
    })
}

pub(crate) fn read_u32(r: &mut impl Read, context: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, context: &str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read, context: &str) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(f64::from_le_bytes(b))
}

fn write_tensor(w: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    write_u64(w, m.len() as u64)?;
    for &v in m.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor(
    r: &mut impl Read,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix, CheckpointError> {
    let expected = rows * cols;
    let got = read_u64(r, name)? as usize;
    if got != expected {
        return Err(CheckpointError::ShapeMismatch { tensor: name.to_string(), expected, got });
    }
    let mut data = Vec::with_capacity(expected);
    for _ in 0..expected {
        data.push(read_f64(r, name)?);
    }
    Matrix::new(rows, cols, data).map_err(|_| CheckpointError::ShapeMismatch {
        tensor: name.to_string(),
        expected,
        got,
    })
}

/// Every tensor (trainable and batchnorm state) in container order, with
/// names and shapes.
fn full_tensor_list(p: &ModelParams) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = vec![
        ("w_v".into(), &p.w_v),
        ("b_v".into(), &p.b_v),
        ("w_p".into(), &p.w_p),
        ("b_p".into(), &p.b_p),
    ];
    for (l, layer) in p.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            out.push((format!("layers[{l}].heads[{h}].q"), &head.q));
            out.push((format!("layers[{l}].heads[{h}].k"), &head.k));
            out.push((format!("layers[{l}].heads[{h}].v"), &head.v));
        }
        out.push((format!("layers[{l}].o"), &layer.o));
        out.push((format!("layers[{l}].w1"), &layer.w1));
        out.push((format!("layers[{l}].w2"), &layer.w2));
        for (tag, bn) in [("bn1", &layer.bn1), ("bn2", &layer.bn2)] {
            out.push((format!("layers[{l}].{tag}.scale"), &bn.scale));
            out.push((format!("layers[{l}].{tag}.shift"), &bn.shift));
            out.push((format!("layers[{l}].{tag}.running_mean"), &bn.running_mean));
            out.push((format!("layers[{l}].{tag}.running_var"), &bn.running_var));
        }
    }
    out.push(("f1_w".into(), &p.f1_w));
    out.push(("f1_b".into(), &p.f1_b));
    out.push(("f2_w".into(), &p.f2_w));
    out.push(("f2_b".into(), &p.f2_b));
    out.push(("align_w".into(), &p.align_w));
    out.push(("align_b".into(), &p.align_b));
    if let Some(c) = &p.classifier {
        out.push(("classifier".into(), c));
    }
    out
}

/// Serializes a model (parameters plus batchnorm state).
pub fn write_model(w: &mut impl Write, params: &ModelParams) -> Result<(), CheckpointError> {
    w.write_all(&MODEL_MAGIC)?;
    let d = &params.dims;
    let cfg = &d.config;
    for v in [
        MODEL_VERSION,
        cfg.embed_dim as u32,
        cfg.n_heads as u32,
        cfg.n_layers as u32,
        cfg.pe_dim as u32,
        cfg.head_dim as u32,
        cfg.snapshots as u32,
        d.align_dim as u32,
        d.n_classes as u32,
        u32::from(d.with_classifier),
    ] {
        write_u32(w, v)?;
    }
    for (_, m) in full_tensor_list(params) {
        write_tensor(w, m)?;
    }
    Ok(())
}

/// Reads a model, validating magic, version, and every tensor shape
/// implied by the header. `exhaustive` additionally rejects trailing bytes
/// (set it when the model is the only content of the stream).
pub fn read_model_from(
    r: &mut impl Read,
    exhaustive: bool,
) -> Result<ModelParams, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(&MODEL_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(r, "version")?;
    if version != MODEL_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut field = |name: &'static str| -> Result<usize, CheckpointError> {
        let v = read_u32(r, name)?;
        if v == 0 {
            return Err(CheckpointError::BadHeader { field: name, value: 0 });
        }
        Ok(v as usize)
    };
    let embed_dim = field("embed_dim")?;
    let n_heads = field("n_heads")?;
    let n_layers = field("n_layers")?;
    let pe_dim = field("pe_dim")?;
    let head_dim = field("head_dim")?;
    let snapshots = field("snapshots")?;
    let align_dim = field("align_dim")?;
    let n_classes = field("n_classes")?;
    let with_classifier = match read_u32(r, "with_classifier")? {
        0 => false,
        1 => true,
        v => return Err(CheckpointError::BadHeader { field: "with_classifier", value: v as u64 }),
    };
    let dims = ModelDims {
        config: EgtConfig { embed_dim, n_heads, n_layers, pe_dim, head_dim, snapshots },
        align_dim,
        n_classes,
        with_classifier,
    };
    dims.validate()?;

    let d = embed_dim;
    let w_v = read_tensor(r, "w_v", d, 3)?;
    let b_v = read_tensor(r, "b_v", 1, d)?;
    let w_p = read_tensor(r, "w_p", d, pe_dim)?;
    let b_p = read_tensor(r, "b_p", 1, d)?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = read_tensor(r, &format!("layers[{l}].heads[{h}].q"), head_dim, d)?;
            let k = read_tensor(r, &format!("layers[{l}].heads[{h}].k"), head_dim, d)?;
            let v = read_tensor(r, &format!("layers[{l}].heads[{h}].v"), head_dim, d)?;
            heads.push(super::params::HeadParams { q, k, v });
        }
        let o = read_tensor(r, &format!("layers[{l}].o"), d, d)?;
        let w1 = read_tensor(r, &format!("layers[{l}].w1"), 2 * d, d)?;
        let w2 = read_tensor(r, &format!("layers[{l}].w2"), d, 2 * d)?;
        let mut read_bn = |tag: &str| -> Result<BatchNormParams, CheckpointError> {
            Ok(BatchNormParams {
                scale: read_tensor(r, &format!("layers[{l}].{tag}.scale"), 1, d)?,
                shift: read_tensor(r, &format!("layers[{l}].{tag}.shift"), 1, d)?,
                running_mean: read_tensor(r, &format!("layers[{l}].{tag}.running_mean"), 1, d)?,
                running_var: read_tensor(r, &format!("layers[{l}].{tag}.running_var"), 1, d)?,
            })
        };
        let bn1 = read_bn("bn1")?;
        let bn2 = read_bn("bn2")?;
        layers.push(super::params::LayerParams { heads, o, w1, w2, bn1, bn2 });
    }
    let f1_w = read_tensor(r, "f1_w", d, d)?;
    let f1_b = read_tensor(r, "f1_b", 1, d)?;
    let f2_w = read_tensor(r, "f2_w", d, d)?;
    let f2_b = read_tensor(r, "f2_b", 1, d)?;
    let align_w = read_tensor(r, "align_w", align_dim, d)?;
    let align_b = read_tensor(r, "align_b", 1, align_dim)?;
    let classifier = if with_classifier {
        Some(read_tensor(r, "classifier", n_classes, d)?)
    } else {
        None
    };
    if exhaustive {
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::TrailingBytes(rest.len()));
        }
    }
    Ok(ModelParams {
        dims,
        w_v,
        b_v,
        w_p,
        b_p,
        layers,
        f1_w,
        f1_b,
        f2_w,
        f2_b,
        align_w,
        align_b,
        classifier,
    })
}

/// Reads a model that is the sole content of the stream.
pub fn read_model(r: &mut impl Read) -> Result<ModelParams, CheckpointError> {
    read_model_from(r, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ModelParams {
        let dims = ModelDims {
            config: EgtConfig {
                embed_dim: 6,
                n_heads: 2,
                n_layers: 2,
                pe_dim: 2,
                head_dim: 3,
                snapshots: 2,
            },
            align_dim: 4,
            n_classes: 3,
            with_classifier: true,
        };
        let mut p = ModelParams::init(dims, 99).unwrap();
        // Non-default running stats must survive the round trip.
        p.layers[0].bn1.running_mean = Matrix::from_fn(1, 6, |_, j| 0.01 * j as f64);
        p.layers[1].bn2.running_var = Matrix::from_fn(1, 6, |_, j| 1.0 + 0.1 * j as f64);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        let q = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        buf[0] = b'X';
        match read_model(&mut buf.as_slice()) {
            Err(CheckpointError::BadMagic { expected, .. }) => assert_eq!(expected, "EGT1"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        buf.truncate(buf.len() - 9);
        assert!(matches!(read_model(&mut buf.as_slice()), Err(CheckpointError::Truncated { .. })));
        let short = &buf[..10];
        assert!(matches!(
            read_model(&mut &short[..]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        // Corrupt the first tensor's length prefix (just after the 44-byte header).
        let header = 4 + 10 * 4;
        buf[header] = buf[header].wrapping_add(1);
        match read_model(&mut buf.as_slice()) {
            Err(CheckpointError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "w_v"),
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let p = sample_params();
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        buf.push(0);
        assert!(matches!(read_model(&mut buf.as_slice()), Err(CheckpointError::TrailingBytes(1))));
    }
}
