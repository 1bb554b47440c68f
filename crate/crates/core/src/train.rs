//! Plain Adam and a small trainer for overfitting synthetic scenes.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{write_log_row, LossBreakdown, LOG_HEADER};
use crate::model::Model;
use crate::scene::SceneSample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.85, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Array2<f64>]) -> Self {
        let z: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self { cfg, m: z.clone(), v: z, t: 0 }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let c = self.cfg;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= lr * (*m / b1t) / ((*v / b2t).sqrt() + c.eps);
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub decay_at: Vec<usize>,
    pub decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 200, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, decay_at: vec![140, 180], decay: 0.3, clip: 10.0, shuffle_seed: 0 }
    }
}

/// One Adam step per scene, scenes shuffled every epoch. Returns the mean loss breakdown of
/// each epoch and writes one log row per epoch when `log` is given.
pub fn train(model: &mut Model, scenes: &[SceneSample], opts: &TrainOptions, mut log: Option<&mut dyn Write>) -> Result<Vec<LossBreakdown>> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(out) = log.as_mut() {
        writeln!(out, "{LOG_HEADER}")?;
    }
    let mut adam = Adam::new(opts.adam, &model.params.values);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut lr = opts.adam.lr;
    for epoch in 0..opts.epochs {
        if opts.decay_at.contains(&epoch) {
            lr *= opts.decay;
        }
        order.shuffle(&mut rng);
        let mut sum = [0.0; 11];
        for &i in &order {
            let mut step = model.train_step(&scenes[i])?;
            if !step.losses.total.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite loss at epoch {epoch}, scene {i}")));
            }
            if opts.clip > 0.0 {
                let norm = step.grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > opts.clip {
                    let f = opts.clip / norm;
                    step.grads.iter_mut().for_each(|g| *g *= f);
                }
            }
            adam.step(&mut model.params.values, &step.grads, lr)?;
            for (s, v) in sum.iter_mut().zip(step.losses.parts().iter().chain([step.losses.total].iter())) {
                *s += v;
            }
        }
        let n = scenes.len() as f64;
        let mean = LossBreakdown {
            sample: sum[0] / n,
            vote: sum[1] / n,
            cls: sum[2] / n,
            loc: sum[3] / n,
            size: sum[4] / n,
            angle_bin: sum[5] / n,
            angle_res: sum[6] / n,
            corner: sum[7] / n,
            heatmap: sum[8] / n,
            l2: sum[9] / n,
            total: sum[10] / n,
        };
        if let Some(out) = log.as_mut() {
            write_log_row(out, epoch, &mean)?;
        }
        history.push(mean);
    }
    Ok(history)
}
