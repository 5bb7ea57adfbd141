//! Learnable tensors of the encoder, projection heads, and classifier,
//! with the canonical traversal order shared by the optimizer, gradient
//! checks, and the checkpoint codec.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EgtConfig, EncoderError};
use crate::tensor::Matrix;

/// Full shape description of a parameter set: architecture plus the
/// alignment-head and classifier dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub config: EgtConfig,
    /// Output dimension of the alignment projection (class-embedding space).
    pub align_dim: usize,
    /// Class count for the optional classifier head.
    pub n_classes: usize,
    pub with_classifier: bool,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), EncoderError> {
        self.config.validate()?;
        for (v, field) in [(self.align_dim, "align_dim"), (self.n_classes, "n_classes")] {
            if v == 0 {
                return Err(EncoderError::ZeroField { field });
            }
        }
        Ok(())
    }
}

/// Scale/shift plus running statistics for one batchnorm instance.
/// Scale and shift are trainable; the running moments are state updated
/// with momentum 0.9 during training and used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: Matrix,
    pub shift: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNormParams {
    fn identity(dim: usize) -> Self {
        Self {
            scale: Matrix::from_fn(1, dim, |_, _| 1.0),
            shift: Matrix::zeros(1, dim),
            running_mean: Matrix::zeros(1, dim),
            running_var: Matrix::from_fn(1, dim, |_, _| 1.0),
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, batch_mean: &Matrix, batch_var: &Matrix, momentum: f64) {
        for j in 0..self.running_mean.cols() {
            let m = momentum * self.running_mean.at(0, j) + (1.0 - momentum) * batch_mean.at(0, j);
            let v = momentum * self.running_var.at(0, j) + (1.0 - momentum) * batch_var.at(0, j);
            self.running_mean.set(0, j, m);
            self.running_var.set(0, j, v);
        }
    }
}

/// Per-head query/key/value projections, all `head_dim x embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// One attention+FFN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Output mix after head concatenation, `d x d`.
    pub o: Matrix,
    /// FFN expansion, `2d x d`.
    pub w1: Matrix,
    /// FFN contraction, `d x 2d`.
    pub w2: Matrix,
    pub bn1: BatchNormParams,
    pub bn2: BatchNormParams,
}

/// All learnable tensors. Biases are stored as 1xd rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Signal-feature embedding, `d x 3`.
    pub w_v: Matrix,
    pub b_v: Matrix,
    /// Positional-encoding embedding, `d x K`.
    pub w_p: Matrix,
    pub b_p: Matrix,
    pub layers: Vec<LayerParams>,
    /// Channel-level contrastive projections, `d x d` with bias.
    pub f1_w: Matrix,
    pub f1_b: Matrix,
    pub f2_w: Matrix,
    pub f2_b: Matrix,
    /// Alignment projection into class-embedding space, `d_e x d` with bias.
    pub align_w: Matrix,
    pub align_b: Matrix,
    /// Optional classifier head, `C x d`, no bias.
    pub classifier: Option<Matrix>,
}

impl ModelParams {
    /// Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization in
    /// canonical order; batchnorm starts at identity.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, EncoderError> {
        dims.validate()?;
        let cfg = dims.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let d = cfg.embed_dim;
        let w_v = draw(d, 3, 3);
        let b_v = draw(1, d, 3);
        let w_p = draw(d, cfg.pe_dim, cfg.pe_dim);
        let b_p = draw(1, d, cfg.pe_dim);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for _ in 0..cfg.n_heads {
                heads.push(HeadParams {
                    q: draw(cfg.head_dim, d, d),
                    k: draw(cfg.head_dim, d, d),
                    v: draw(cfg.head_dim, d, d),
                });
            }
            layers.push(LayerParams {
                heads,
                o: draw(d, d, d),
                w1: draw(2 * d, d, d),
                w2: draw(d, 2 * d, 2 * d),
                bn1: BatchNormParams::identity(d),
                bn2: BatchNormParams::identity(d),
            });
        }
        let f1_w = draw(d, d, d);
        let f1_b = draw(1, d, d);
        let f2_w = draw(d, d, d);
        let f2_b = draw(1, d, d);
        let align_w = draw(dims.align_dim, d, d);
        let align_b = draw(1, dims.align_dim, d);
        let classifier = dims.with_classifier.then(|| draw(dims.n_classes, d, d));
        Ok(Self {
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

    /// Trainable tensors with stable names, in canonical order. Batchnorm
    /// running statistics are state, not parameters, and are excluded.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("w_v".into(), &self.w_v),
            ("b_v".into(), &self.b_v),
            ("w_p".into(), &self.w_p),
            ("b_p".into(), &self.b_p),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layers[{l}].heads[{h}].q"), &head.q));
                out.push((format!("layers[{l}].heads[{h}].k"), &head.k));
                out.push((format!("layers[{l}].heads[{h}].v"), &head.v));
            }
            out.push((format!("layers[{l}].o"), &layer.o));
            out.push((format!("layers[{l}].w1"), &layer.w1));
            out.push((format!("layers[{l}].w2"), &layer.w2));
            out.push((format!("layers[{l}].bn1.scale"), &layer.bn1.scale));
            out.push((format!("layers[{l}].bn1.shift"), &layer.bn1.shift));
            out.push((format!("layers[{l}].bn2.scale"), &layer.bn2.scale));
            out.push((format!("layers[{l}].bn2.shift"), &layer.bn2.shift));
        }
        out.push(("f1_w".into(), &self.f1_w));
        out.push(("f1_b".into(), &self.f1_b));
        out.push(("f2_w".into(), &self.f2_w));
        out.push(("f2_b".into(), &self.f2_b));
        out.push(("align_w".into(), &self.align_w));
        out.push(("align_b".into(), &self.align_b));
        if let Some(c) = &self.classifier {
            out.push(("classifier".into(), c));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            vec![&mut self.w_v, &mut self.b_v, &mut self.w_p, &mut self.b_p];
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.q);
                out.push(&mut head.k);
                out.push(&mut head.v);
            }
            out.push(&mut layer.o);
            out.push(&mut layer.w1);
            out.push(&mut layer.w2);
            out.push(&mut layer.bn1.scale);
            out.push(&mut layer.bn1.shift);
            out.push(&mut layer.bn2.scale);
            out.push(&mut layer.bn2.shift);
        }
        out.push(&mut self.f1_w);
        out.push(&mut self.f1_b);
        out.push(&mut self.f2_w);
        out.push(&mut self.f2_b);
        out.push(&mut self.align_w);
        out.push(&mut self.align_b);
        if let Some(c) = &mut self.classifier {
            out.push(c);
        }
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Trainable values flattened in canonical order (finite-difference
    /// checks, optimizer bookkeeping).
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Writes a flat value vector back into the trainable tensors. Panics
    /// when the length is wrong, which indicates a caller bug.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_trainable(), "flat parameter length mismatch");
        let mut off = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims {
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
        }
    }

    #[test]
    fn init_shapes_match_declaration() {
        let p = ModelParams::init(tiny_dims(), 7).unwrap();
        assert_eq!(p.w_v.shape(), (6, 3));
        assert_eq!(p.b_v.shape(), (1, 6));
        assert_eq!(p.w_p.shape(), (6, 2));
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[0].heads.len(), 2);
        assert_eq!(p.layers[0].heads[0].q.shape(), (3, 6));
        assert_eq!(p.layers[0].o.shape(), (6, 6));
        assert_eq!(p.layers[0].w1.shape(), (12, 6));
        assert_eq!(p.layers[0].w2.shape(), (6, 12));
        assert_eq!(p.align_w.shape(), (4, 6));
        assert_eq!(p.classifier.as_ref().unwrap().shape(), (3, 6));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(tiny_dims(), 7).unwrap();
        let b = ModelParams::init(tiny_dims(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(tiny_dims(), 8).unwrap();
        assert_ne!(a, c);
        let bound = 1.0 / 3.0_f64.sqrt();
        assert!(a.w_v.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn flatten_round_trip() {
        let mut p = ModelParams::init(tiny_dims(), 7).unwrap();
        let flat = p.flatten_trainable();
        assert_eq!(flat.len(), p.n_trainable());
        let mut bumped = flat.clone();
        bumped[0] += 1.0;
        p.set_from_flat(&bumped);
        assert_eq!(p.w_v.at(0, 0), flat[0] + 1.0);
        p.set_from_flat(&flat);
        assert_eq!(p.flatten_trainable(), flat);
    }
}
