use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Mat, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moments are keyed by parameter name and only
/// trainable parameters are touched.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Mat<T>, Mat<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut dyn Params<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let lr = T::from_f64(c.lr / bc1);
        let rbc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (Mat::zeros(p.value.rows, p.value.cols), Mat::zeros(p.value.rows, p.value.cols)));
            for (((w, g), m), v) in p
                .value
                .data
                .iter_mut()
                .zip(&p.grad.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *m = b1 * *m + (T::ONE - b1) * *g;
                *v = b2 * *v + (T::ONE - b2) * *g * *g;
                *w -= lr * *m / ((*v * rbc2).sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut lin = Linear::<f64> {
            w: Param::new(Mat::from_vec(1, 2, vec![1.0, 1.0])),
            b: None,
            lora: None,
        };
        lin.w.grad = Mat::from_vec(1, 2, vec![0.3, -2.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(&mut lin);
        assert!((lin.w.value.data[0] - 0.9).abs() < 1e-6);
        assert!((lin.w.value.data[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut lin = Linear::<f32> {
            w: Param::frozen(Mat::from_vec(1, 2, vec![1.0, 2.0])),
            b: None,
            lora: None,
        };
        lin.w.grad = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut lin);
        assert_eq!(lin.w.value.data, vec![1.0, 2.0]);
    }
}
