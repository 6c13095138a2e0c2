use std::collections::HashMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::zoo::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments and no weight decay. Buffers are skipped.
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, model: &mut Model) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let moments = &mut self.moments;
        model.visit_params(&mut |name, p| {
            if p.buffer {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(m)
                .and(v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * *g;
                    *v = b2 * *v + (1.0 - b2) * *g * *g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    *g = 0.0;
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelConfig};
    use crate::Backbone;
    use std::path::Path;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut m = build_model(
            &ModelConfig {
                pretrained: false,
                ..ModelConfig::new(Backbone::TinyCnn)
            },
            Path::new(""),
        )
        .unwrap();
        let before = m.state();
        m.visit_params(&mut |_, p| p.grad.fill(0.5));
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        });
        opt.step(&mut m);
        let after = m.state();
        for (k, v) in &before {
            let d = v - &after[k];
            assert!(d.iter().all(|x| (x - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15), "{k}");
        }
        m.visit_params(&mut |_, p| assert!(p.grad.iter().all(|&g| g == 0.0)));
    }
}
