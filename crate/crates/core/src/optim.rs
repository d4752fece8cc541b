//! AdamW with a linear anneal-then-hold learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::scorer::{CoherenceScorer, ScorerGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub floor: f64,
    pub anneal_steps: usize,
}

impl LrSchedule {
    /// Linear from `initial` to `floor` over `anneal_steps`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.floor;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.initial + (self.floor - self.initial) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers, flattened in parameter order (encoder
/// tensors, then head weights, then head bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, schedule: LrSchedule, num_params: usize) -> Self {
        AdamW {
            config,
            schedule,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// One decoupled-weight-decay Adam step. Returns the learning rate used.
    /// With `train_encoder == false` only the head is updated.
    pub fn step(&mut self, scorer: &mut CoherenceScorer, grads: &ScorerGrads, train_encoder: bool) -> f64 {
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut k = 0;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
        };
        for (pt, gt) in scorer.encoder.tensors_mut().iter_mut().zip(grads.encoder.tensors()) {
            let n = pt.len();
            if train_encoder {
                for (j, (p, g)) in pt.iter_mut().zip(gt.iter()).enumerate() {
                    let (m, v) = (&mut self.m[k + j], &mut self.v[k + j]);
                    update(p, *g, m, v);
                }
            }
            k += n;
        }
        for (p, g) in scorer.head.w.iter_mut().zip(&grads.head_w) {
            update(p, *g, &mut self.m[k], &mut self.v[k]);
            k += 1;
        }
        update(&mut scorer.head.b, grads.head_b, &mut self.m[k], &mut self.v[k]);
        lr
    }
}

pub fn num_trainable(scorer: &CoherenceScorer) -> usize {
    scorer.encoder.num_scalars() + scorer.head.w.len() + 1
}
