//! SGD-with-momentum and Adam over the canonical parameter tensor list.

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers parallel to the trainable tensor list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Adam step counter (bias correction).
    pub t: u64,
    /// SGD velocity or Adam first moment.
    pub m: Vec<Matrix>,
    /// Adam second moment; empty for SGD.
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shapes: &[(usize, usize)]) -> Self {
        let m = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let v = match kind {
            OptimizerKind::Sgd { .. } => Vec::new(),
            OptimizerKind::Adam { .. } => shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        };
        Self { kind, t: 0, m, v }
    }

    /// One update over all tensors. `grads[i] = None` means a zero gradient
    /// for tensor i (the moment decay still applies).
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state shape drift");
        assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for idx in 0..p.len() {
                        let gi = g.map_or(0.0, |g| g.data()[idx]);
                        let vel = momentum * m.data()[idx] + gi;
                        m.data_mut()[idx] = vel;
                        p.data_mut()[idx] -= lr * vel;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for idx in 0..p.len() {
                        let gi = g.map_or(0.0, |g| g.data()[idx]);
                        let m = beta1 * self.m[i].data()[idx] + (1.0 - beta1) * gi;
                        let v = beta2 * self.v[i].data()[idx] + (1.0 - beta2) * gi * gi;
                        self.m[i].data_mut()[idx] = m;
                        self.v[i].data_mut()[idx] = v;
                        let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                        p.data_mut()[idx] -= lr * update;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [
            OptimizerKind::Sgd { momentum: 0.9 },
            OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        ] {
            let mut p = Matrix::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
            let orig = p.clone();
            let mut opt = OptimizerState::new(kind, &[(1, 3)]);
            for _ in 0..5 {
                opt.step(&mut [&mut p], &[None], 0.1);
            }
            assert_eq!(p, orig);
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Matrix::new(1, 1, vec![0.0]).unwrap();
        let g = Matrix::new(1, 1, vec![1.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.5 }, &[(1, 1)]);
        opt.step(&mut [&mut p], &[Some(&g)], 1.0);
        assert!((p.at(0, 0) + 1.0).abs() <= 1e-15);
        opt.step(&mut [&mut p], &[Some(&g)], 1.0);
        // velocity = 0.5 * 1 + 1 = 1.5
        assert!((p.at(0, 0) + 2.5).abs() <= 1e-15);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        let mut p = Matrix::new(1, 1, vec![0.0]).unwrap();
        let g = Matrix::new(1, 1, vec![3.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::default(), &[(1, 1)]);
        opt.step(&mut [&mut p], &[Some(&g)], 0.01);
        // Bias-corrected first step is lr * g / (|g| + eps) ~ lr.
        assert!((p.at(0, 0) + 0.01).abs() <= 1e-6);
    }
}
