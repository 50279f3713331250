use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::instrument;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over a fixed, ordered list of parameter tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        instrument::count_optimizer_step();
        self.step += 1;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &gx) in p.data_mut().iter_mut().zip(g.data()) {
                        *x = T::from_f64(x.to_f64() - self.lr * gx.to_f64());
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, &gx)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gx = gx.to_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gx;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gx * gx;
                        let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        *x = T::from_f64(x.to_f64() - update);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut p = Tensor::<f32>::from_rows(&[&[1.0, -2.0]]);
            let before = p.clone();
            let g = Tensor::from_rows(&[&[0.3, 0.4]]);
            let mut opt = Optimizer::new(kind, 0.0);
            opt.step(&mut [&mut p], &[g]);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_rows(&[&[1.0, 1.0]]);
        let g = Tensor::from_rows(&[&[0.5, -3.0]]);
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.1);
        opt.step(&mut [&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut gs = vec![
            Tensor::<f64>::from_rows(&[&[3.0]]),
            Tensor::from_rows(&[&[4.0]]),
        ];
        let n = clip_global_norm(&mut gs, 1.0);
        assert_eq!(n, 5.0);
        assert!((gs[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((gs[1].data()[0] - 0.8).abs() < 1e-12);
    }
}
