//! RMSprop with decoupled weight decay.
//!
//! Per parameter: `v <- rho * v + (1 - rho) * g^2`, then
//! `p <- p - lr * g / (sqrt(v) + eps) - lr * weight_decay * p`.

use crate::error::{LfError, Result};
use crate::numerics::tensor::{Element, Tensor};

/// Hyperparameters of one optimizer instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmspropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig { lr: 1e-4, rho: 0.9, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// Moving average of squared gradients, one slot per parameter tensor.
pub struct Rmsprop<T> {
    cfg: RmspropConfig,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Element> Rmsprop<T> {
    pub fn new(cfg: RmspropConfig, param_shapes: &[crate::numerics::tensor::Shape]) -> Self {
        Rmsprop {
            cfg,
            v: param_shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            steps: 0,
        }
    }

    pub fn config(&self) -> RmspropConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Squared-gradient average for one slot (all entries are >= 0).
    pub fn second_moment(&self, slot: usize) -> &Tensor<T> {
        &self.v[slot]
    }

    /// Apply one update. `grads[i]` pairs with `params[i]`; a `None` gradient
    /// means the parameter was not touched this step (only decay applies).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.v.len() || grads.len() != self.v.len() {
            return Err(LfError::Argument(format!(
                "optimizer has {} slots, got {} params / {} grads",
                self.v.len(),
                params.len(),
                grads.len()
            )));
        }
        let rho = T::from_f64c(self.cfg.rho);
        let one_minus_rho = T::from_f64c(1.0 - self.cfg.rho);
        let lr = T::from_f64c(self.cfg.lr);
        let eps = T::from_f64c(self.cfg.eps);
        let decay = T::from_f64c(self.cfg.lr * self.cfg.weight_decay);
        for (slot, param) in params.iter_mut().enumerate() {
            let v = &mut self.v[slot];
            if v.shape() != param.shape() {
                return Err(LfError::Shape(format!(
                    "optimizer slot {slot}: state {} vs param {}",
                    v.shape(),
                    param.shape()
                )));
            }
            match grads[slot] {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(LfError::Shape(format!(
                            "optimizer slot {slot}: grad {} vs param {}",
                            g.shape(),
                            param.shape()
                        )));
                    }
                    for ((p, v), &gv) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *v = rho * *v + one_minus_rho * gv * gv;
                        *p = *p - lr * gv / (v.sqrt() + eps) - decay * *p;
                    }
                }
                None => {
                    for (p, v) in param.data_mut().iter_mut().zip(v.data_mut()) {
                        *v = rho * *v;
                        *p = *p - decay * *p;
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Shape;

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let cfg = RmspropConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = Rmsprop::<f64>::new(cfg, &[Shape::d1(3)]);
        let mut p = Tensor::from_vec(Shape::d1(3), vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(Shape::d1(3));
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn single_scalar_update_matches_formula() {
        let cfg = RmspropConfig { lr: 0.01, rho: 0.9, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = Rmsprop::<f64>::new(cfg, &[Shape::scalar()]);
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(1.0f64);
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        let v: f64 = 0.1;
        let expect = 1.0 - 0.01 / (v.sqrt() + 1e-8);
        assert!((p.item() - expect).abs() < 1e-15);
        assert!((opt.second_moment(0).item() - v).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = RmspropConfig { lr: 0.5, rho: 0.9, eps: 1e-8, weight_decay: 0.1 };
        let mut opt = Rmsprop::<f64>::new(cfg, &[Shape::scalar()]);
        let mut p = Tensor::scalar(2.0f64);
        let g = Tensor::scalar(0.0f64);
        opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
        // pure decay: p - lr * wd * p
        assert!((p.item() - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(p) = 0.5 * (p0^2 + 10 * p1^2)
        let cfg = RmspropConfig { lr: 0.005, rho: 0.9, eps: 1e-8, weight_decay: 0.0 };
        let mut opt = Rmsprop::<f64>::new(cfg, &[Shape::d1(2)]);
        let mut p = Tensor::from_vec(Shape::d1(2), vec![3.0, -2.0]).unwrap();
        let loss = |p: &Tensor<f64>| 0.5 * (p.data()[0].powi(2) + 10.0 * p.data()[1].powi(2));
        let start = loss(&p);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let g = Tensor::from_vec(Shape::d1(2), vec![p.data()[0], 10.0 * p.data()[1]]).unwrap();
            opt.step(&mut [&mut p], &[Some(&g)]).unwrap();
            losses.push(loss(&p));
        }
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(losses.last().unwrap() < &(0.5 * start));
    }

    #[test]
    fn mismatched_slot_counts_error() {
        let mut opt = Rmsprop::<f32>::new(RmspropConfig::default(), &[Shape::scalar()]);
        let mut p = Tensor::scalar(1.0f32);
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }
}
