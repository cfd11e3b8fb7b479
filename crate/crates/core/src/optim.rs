//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<F: Scalar = f64> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<F>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamWState { v: m.clone(), m, t: 0 }
    }

    /// One update. `decay[i]` says whether parameter `i` is weight-decayed.
    /// Decay is applied to the parameter, `θ ← θ − lr·wd·θ`, before the
    /// Adam step.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor<F>>,
        grads: &[Tensor<F>],
        decay: &[bool],
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || decay.len() != n {
            return Err(Error::Contract(format!(
                "optimizer holds {n} parameters, got {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::dim("adamw_step", p.shape(), self.m[i].shape()));
            }
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw_step", g.shape(), p.shape()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
        let step = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(cfg.eps);
        for (i, p) in params.into_iter().enumerate() {
            let shrink = if decay[i] { F::of(1.0 - lr * cfg.weight_decay) } else { F::one() };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w = *w * shrink - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[x]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut p = one(1.0);
        let mut s = AdamWState::<f64>::new([p.shape()]);
        s.step(vec![&mut p], &[one(1.0)], &[true], 0.1, &cfg).unwrap();
        // m̂ = v̂ = 1, so the step is lr·1/(1 + eps).
        assert!((p.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamWState::<f64>::new([p.shape()]);
        for _ in 0..3 {
            s.step(vec![&mut p], &[Tensor::zeros(&[3])], &[true], 0.1, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_is_decoupled_from_gradients() {
        let cfg = AdamWConfig::default();
        let mut p = one(2.0);
        let mut q = one(2.0);
        let mut s = AdamWState::<f64>::new([p.shape(), q.shape()]);
        s.step(vec![&mut p, &mut q], &[one(0.0), one(0.0)], &[true, false], 0.01, &cfg).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
        assert_eq!(q.data()[0], 2.0);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = AdamWConfig::default();
        let mut p = one(1.0);
        let mut s = AdamWState::<f64>::new([p.shape()]);
        assert!(s.step(vec![&mut p], &[Tensor::zeros(&[2])], &[true], 0.1, &cfg).is_err());
        assert!(s.step(vec![&mut p], &[], &[true], 0.1, &cfg).is_err());
        assert_eq!(s.t, 0);
    }
}
