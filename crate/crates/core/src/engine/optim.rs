use super::config::OptimizerKind;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

/// Adam or heavy-ball SGD over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; fails without touching anything when a gradient
    /// is non-finite, and fails if an update produces a non-finite value.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {i} at step {}", self.steps + 1),
            });
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (i, (param, grad)) in params.into_iter().zip(grads).enumerate() {
            if param.len() != grad.len() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    lhs: param.shape().to_vec(),
                    rhs: vec![grad.len()],
                });
            }
            let data = param.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..grad.len() {
                        let g = grad[j];
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        data[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let vel = &mut self.first[i];
                    for j in 0..grad.len() {
                        vel[j] = MOMENTUM * vel[j] + grad[j];
                        data[j] -= self.lr * vel[j];
                    }
                }
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter {i} after step {}", self.steps),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(vec![1.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        opt.step(vec![&mut p], &[vec![0.5, -2.0]]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_minimises_a_quadratic() {
        let mut p = Tensor::from_vec(vec![3.0]);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.05);
        for _ in 0..200 {
            let g = vec![2.0 * p.data()[0]];
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.data()[0].abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_aborts_before_update() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        let res = opt.step(vec![&mut p], &[vec![f64::NAN]]);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
        assert_eq!(p.data()[0], 1.0);
    }
}
