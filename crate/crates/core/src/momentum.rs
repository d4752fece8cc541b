//! Momentum encoder, global negative queue and length-invariant slicing.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MIN_SENTENCES};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scorer::CoherenceScorer;

/// An exponential moving average of the base encoder parameters. It is never
/// trained directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumEncoder {
    pub params: ParamSet,
    pub mu: f64,
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("momentum μ must be in [0, 1), got {mu}")));
    }
    Ok(())
}

/// Starts the momentum encoder as a copy of the base encoder.
pub fn init_momentum(base: &CoherenceScorer, mu: f64) -> Result<MomentumEncoder> {
    check_mu(mu)?;
    Ok(MomentumEncoder {
        params: base.encoder.clone(),
        mu,
    })
}

impl MomentumEncoder {
    /// `φ' ← μ·φ' + (1-μ)·φ`, elementwise.
    pub fn update(&mut self, base: &ParamSet) -> Result<()> {
        let mu = self.mu;
        momentum_update(self, base, mu)
    }
}

pub fn momentum_update(m: &mut MomentumEncoder, base: &ParamSet, mu: f64) -> Result<()> {
    check_mu(mu)?;
    m.params.check_compatible(base)?;
    for (dst, src) in m.params.tensors_mut().iter_mut().zip(base.tensors()) {
        dst.zip_mut_with(src, |a, &b| *a = mu * *a + (1.0 - mu) * b);
    }
    Ok(())
}

/// Fixed-capacity FIFO of detached negative representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be positive".into()));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> Vec<Vec<f64>> {
        self.entries.iter().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    /// Appends `reps` in order, evicting the oldest entries past capacity.
    /// All vectors are validated before any is inserted.
    pub fn enqueue(&mut self, reps: &[Vec<f64>]) -> Result<()> {
        if let Some(bad) = reps.iter().find(|r| r.len() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: bad.len(),
            });
        }
        for r in reps {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(r.clone());
        }
        Ok(())
    }
}

/// A random contiguous run of at least four sentences (up to the whole
/// document): length uniform over `[4, n]`, then start uniform over the
/// valid offsets.
pub fn slice_positive<R: Rng + ?Sized>(doc: &Document, rng: &mut R) -> Result<Document> {
    let n = doc.n();
    if n < MIN_SENTENCES {
        return Err(Error::InvalidDocument {
            id: doc.id.clone(),
            reason: format!("cannot slice {n} sentences, need at least {MIN_SENTENCES}"),
        });
    }
    let len = rng.gen_range(MIN_SENTENCES..=n);
    let start = rng.gen_range(0..=n - len);
    Ok(Document {
        id: format!("{}#s{start}-{}", doc.id, start + len),
        sentences: doc.sentences[start..start + len].to_vec(),
    })
}
