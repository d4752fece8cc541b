//! Local hard-negative ranking.
//!
//! Training proceeds in blocks of `x` steps. The first block trains on `N`
//! negatives drawn at random from each instance's `h` candidates. After a
//! block finishes, the updated model scores all `h` candidates of every
//! instance in the next block and keeps the `N` it scores highest.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::DocumentScorer;
use crate::taskgen::TrainingInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinerConfig {
    /// Candidates scored per instance.
    pub h: usize,
    /// Negatives kept per instance.
    pub n: usize,
    /// Block length in gradient steps.
    pub x: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig { h: 50, n: 5, x: 200 }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.h || self.x == 0 {
            return Err(Error::InvalidArgument(format!(
                "miner config needs 1 <= N <= h and x >= 1, got N={} h={} x={}",
                self.n, self.h, self.x
            )));
        }
        Ok(())
    }
}

/// Selected candidate indices for each instance of the upcoming block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningState {
    pub block_index: usize,
    /// Dataset indices of the block's instances, in training order.
    pub instances: Vec<usize>,
    /// `selections[k]` are candidate indices into `instances[k]`'s pool.
    pub selections: Vec<Vec<usize>>,
}

impl MiningState {
    pub fn selection_for(&self, dataset_index: usize) -> Option<&[usize]> {
        self.instances
            .iter()
            .position(|&i| i == dataset_index)
            .map(|k| self.selections[k].as_slice())
    }
}

/// Block 0: `n` negatives per instance uniformly without replacement.
/// Instances with fewer than `n` negatives are dropped with a warning.
pub fn init_block_random<R: Rng + ?Sized>(
    dataset: &[TrainingInstance],
    block: &[usize],
    n: usize,
    rng: &mut R,
) -> MiningState {
    let mut instances = Vec::with_capacity(block.len());
    let mut selections = Vec::with_capacity(block.len());
    for &i in block {
        let pool = dataset[i].num_negatives();
        if pool < n {
            warn!(
                "{}: {pool} negatives, fewer than the {n} required; dropped from block",
                dataset[i].positive.id
            );
            continue;
        }
        instances.push(i);
        selections.push(sample(rng, pool, n).into_vec());
    }
    MiningState {
        block_index: 0,
        instances,
        selections,
    }
}

/// Scores every candidate of `instance` and returns the indices of the `n`
/// highest scoring ones, best first. Ties go to the lower candidate index.
pub fn rank_and_select(
    scorer: &dyn DocumentScorer,
    instance: &TrainingInstance,
    n: usize,
) -> Result<Vec<usize>> {
    let scores = (0..instance.num_negatives())
        .map(|i| scorer.score_doc(&instance.negative(i)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(top_n(&scores, n))
}

/// Indices of the `n` largest scores, descending; ties by ascending index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Produces the selections for `next_block` with the current model.
pub fn advance(
    state: &MiningState,
    scorer: &dyn DocumentScorer,
    dataset: &[TrainingInstance],
    next_block: &[usize],
    n: usize,
) -> Result<MiningState> {
    let kept: Vec<usize> = next_block
        .iter()
        .copied()
        .filter(|&i| {
            let ok = dataset[i].num_negatives() >= n;
            if !ok {
                warn!("{}: too few negatives, dropped from block", dataset[i].positive.id);
            }
            ok
        })
        .collect();
    let selections = kept
        .par_iter()
        .map(|&i| rank_and_select(scorer, &dataset[i], n))
        .collect::<Result<Vec<_>>>()?;
    Ok(MiningState {
        block_index: state.block_index + 1,
        instances: kept,
        selections,
    })
}
