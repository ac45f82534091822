use std::collections::BTreeMap;

use super::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Anything holding named trainable parameters.
pub trait Parameterized<T: Real> {
    /// Visits every trainable parameter in a fixed order.
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[T]));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    /// Called once after an optimizer step (refreshes derived state such as
    /// weight scales).
    fn after_update(&mut self) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// One update of every parameter that has a gradient, then
    /// [`Parameterized::after_update`].
    pub fn step<P: Parameterized<T> + ?Sized>(
        &mut self,
        model: &mut P,
        grads: &Gradients<T>,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.epsilon));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let mut failure = None;
        model.visit_params_mut(&mut |name, param| {
            if failure.is_some() {
                return;
            }
            let Some(g) = grads.param(name) else { return };
            if g.numel() != param.len() {
                failure = Some(Error::dim(
                    "adam_step",
                    format!(
                        "{name}: gradient has {} values, parameter {}",
                        g.numel(),
                        param.len()
                    ),
                ));
                return;
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); param.len()]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); param.len()]);
            for (((p, &gv), mi), vi) in param
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gv;
                *vi = b2 * *vi + (T::one() - b2) * gv * gv;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        model.after_update();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Tape, TapeConfig};
    use crate::tensor::{Shape, Tensor};

    struct Pair {
        w: Vec<f64>,
        refreshed: usize,
    }

    impl Parameterized<f64> for Pair {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
            f("w", &self.w);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
            f("w", &mut self.w);
        }
        fn after_update(&mut self) {
            self.refreshed += 1;
        }
    }

    fn grads_for(w: &[f64], target: &[f64]) -> Gradients<f64> {
        let mut tape = Tape::new(TapeConfig::inference());
        let p = tape.param(
            "w",
            Tensor::from_vec(Shape::vector(1, w.len()), w.to_vec()).unwrap(),
        );
        let t = Tensor::from_vec(Shape::vector(1, target.len()), target.to_vec()).unwrap();
        let l = tape.l1_loss(p, &t).unwrap();
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut model = Pair {
            w: vec![0.5, -0.5],
            refreshed: 0,
        };
        let g = grads_for(&[1.0, 2.0], &[1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut model, &g).unwrap();
        assert_eq!(model.w, vec![0.5, -0.5]);
        assert_eq!(model.refreshed, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut model = Pair {
            w: vec![0.5, -0.5],
            refreshed: 0,
        };
        // d/dw mean|w - t| = sign(w - t) / 2
        let g = grads_for(&model.w.clone(), &[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        });
        adam.step(&mut model, &g).unwrap();
        assert!((model.w[0] - (0.5 - 1e-3)).abs() < 1e-8);
        assert!((model.w[1] - (-0.5 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn rejects_gradient_length_mismatch() {
        let mut model = Pair {
            w: vec![0.5],
            refreshed: 0,
        };
        let g = grads_for(&[1.0, 2.0], &[0.0, 0.0]);
        assert!(Adam::new(AdamConfig::default())
            .step(&mut model, &g)
            .is_err());
    }
}
