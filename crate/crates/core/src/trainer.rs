//! Training loop for the pairwise, contrastive and full regimes.
//!
//! A full-regime step:
//! 1. take the current block's selected hard negatives;
//! 2. score the positive and its `N` negatives with the base scorer and
//!    compute the contrastive loss;
//! 3. momentum-encode a random contiguous slice of the positive and the `N`
//!    negatives;
//! 4. compute the momentum loss against the queue (skipped while the queue is
//!    empty, in which case λ is treated as 1);
//! 5. combine the two losses with λ;
//! 6. back-propagate into the base scorer only and take an optimizer step;
//! 7. update the momentum encoder;
//! 8. enqueue the momentum-encoded negatives;
//! 9. every `x` steps, re-rank the next block's candidates with the model.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::evalsuite::pairwise_accuracy;
use crate::miner::{advance, init_block_random, MiningState};
use crate::momentum::{init_momentum, slice_positive, MomentumEncoder, NegativeQueue};
use crate::objectives::{
    combined_loss, contrastive_loss_grad, momentum_loss_grad, pairwise_grad, pairwise_loss,
};
use crate::optim::{num_trainable, AdamW, AdamWConfig, LrSchedule};
use crate::scorer::{CoherenceScorer, ScorerGrads};
use crate::taskgen::{EvalPair, TrainingInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Pairwise,
    Contrastive,
    Full,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Regime::Pairwise),
            "contrastive" => Ok(Regime::Contrastive),
            "full" => Ok(Regime::Full),
            other => Err(Error::InvalidArgument(format!("unknown regime {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub regime: Regime,
    /// Margin τ.
    pub tau: f64,
    /// Negatives per training step, N.
    pub negatives: usize,
    /// Candidate pool per instance for mining, h.
    pub h: usize,
    /// Mining block length in gradient steps, x.
    pub x: usize,
    /// Global queue capacity, l.
    pub queue_size: usize,
    /// Momentum coefficient μ.
    pub momentum: f64,
    /// Weight λ of the contrastive loss in the full objective.
    pub lambda: f64,
    pub learning_rate: f64,
    pub lr_floor: f64,
    /// Defaults to 5000 steps (pairwise/contrastive) or 1000 (full).
    pub anneal_steps: Option<usize>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Train only the linear head.
    pub freeze_encoder: bool,
    /// Defaults to on for the full regime and off otherwise; turning it on
    /// for the contrastive regime gives the mining-without-momentum ablation.
    pub hard_negative_mining: Option<bool>,
    /// Momentum-encode a random contiguous slice of the positive instead of
    /// the whole document.
    pub length_invariance: bool,
    /// Average parameters over post-anneal evaluations and return the average.
    pub swa_average: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            regime: Regime::Full,
            tau: 0.1,
            negatives: 5,
            h: 50,
            x: 200,
            queue_size: 1000,
            momentum: 0.9999999,
            lambda: 0.85,
            learning_rate: 5e-6,
            lr_floor: 1e-6,
            anneal_steps: None,
            weight_decay: 0.01,
            batch_size: 1,
            max_steps: 10_000,
            eval_every: 1000,
            seed: 0,
            freeze_encoder: false,
            hard_negative_mining: None,
            length_invariance: true,
            swa_average: false,
        }
    }
}

impl TrainerConfig {
    pub fn for_regime(regime: Regime) -> Self {
        let mut c = TrainerConfig {
            regime,
            ..TrainerConfig::default()
        };
        if regime == Regime::Pairwise {
            c.negatives = 1;
        }
        c
    }

    pub fn mining(&self) -> bool {
        self.hard_negative_mining
            .unwrap_or(self.regime == Regime::Full)
    }

    pub fn anneal(&self) -> usize {
        self.anneal_steps.unwrap_or(match self.regime {
            Regime::Full => 1000,
            _ => 5000,
        })
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.learning_rate,
            floor: self.lr_floor,
            anneal_steps: self.anneal(),
        }
    }

    /// Negatives the dataset must supply per instance.
    pub fn required_width(&self) -> usize {
        match self.regime {
            Regime::Pairwise => 1,
            _ if self.mining() => self.h,
            _ => self.negatives,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.tau.is_finite() || self.tau < 0.0 {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if self.regime == Regime::Pairwise && self.negatives != 1 {
            return bad("pairwise regime uses exactly one negative".into());
        }
        if self.negatives == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("negatives, batch_size and eval_every must be positive".into());
        }
        if self.mining() && (self.h < self.negatives || self.x == 0) {
            return bad(format!("mining needs h >= N and x >= 1 (h={}, N={})", self.h, self.negatives));
        }
        if self.regime == Regime::Full {
            if !(0.0..1.0).contains(&self.momentum) {
                return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
            }
            if !(0.0..=1.0).contains(&self.lambda) {
                return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
            }
            if self.queue_size == 0 {
                return bad("queue_size must be positive".into());
            }
        }
        if !(self.learning_rate > 0.0 && self.lr_floor > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size > 1 {
            warn!("batch_size {} > 1 departs from the reference setup", self.batch_size);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Pairwise or contrastive component.
    pub primary: f64,
    pub momentum: Option<f64>,
    /// λ actually applied (1 while the queue is warming up).
    pub lambda: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// `(step, block_index)` whenever a new block's negatives were selected.
    pub mining_events: Vec<(usize, usize)>,
    pub wall_clock_secs: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine {
    Step(StepRecord),
    Eval(EvalRecord),
}

impl TrainLog {
    pub fn best_eval(&self) -> Option<&EvalRecord> {
        self.evals
            .iter()
            .fold(None, |best: Option<&EvalRecord>, e| match best {
                Some(b) if b.dev_accuracy >= e.dev_accuracy => Some(b),
                _ => Some(e),
            })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&LogLine::Step(s.clone()))?);
            out.push('\n');
        }
        for e in &self.evals {
            out.push_str(&serde_json::to_string(&LogLine::Eval(e.clone()))?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(line).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Eval(e) => log.evals.push(e),
            }
        }
        Ok(log)
    }
}

/// Loss components for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub primary: f64,
    pub momentum: Option<f64>,
    pub lambda: f64,
}

/// Momentum-branch inputs for [`instance_objective`].
pub struct MomentumBranch<'a> {
    pub encoder: &'a MomentumEncoder,
    pub queue: &'a NegativeQueue,
    /// The view of the positive to momentum-encode (a slice or the document).
    pub positive_view: &'a Document,
    pub lambda: f64,
}

/// Loss and gradients for one (positive, negatives) instance. The momentum
/// encoder and queue are read-only here; gradient flows only into the base
/// scorer.
pub fn instance_objective(
    scorer: &CoherenceScorer,
    regime: Regime,
    tau: f64,
    positive: &Document,
    negatives: &[Document],
    momentum: Option<MomentumBranch<'_>>,
    train_encoder: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    grads: &mut ScorerGrads,
) -> Result<LossParts> {
    let pos = scorer.forward_train(positive, dropout_rng.as_deref_mut())?;
    let negs = negatives
        .iter()
        .map(|d| scorer.forward_train(d, dropout_rng.as_deref_mut()))
        .collect::<Result<Vec<_>>>()?;
    let neg_scores: Vec<f64> = negs.iter().map(|f| f.score).collect();

    let (primary, g_pos, g_negs) = match regime {
        Regime::Pairwise => {
            let l = pairwise_loss(pos.score, neg_scores[0], tau)?;
            let (gp, gn) = pairwise_grad(pos.score, neg_scores[0], tau);
            (l, gp, vec![gn])
        }
        Regime::Contrastive | Regime::Full => contrastive_loss_grad(pos.score, &neg_scores, tau)?,
    };

    let mut parts = LossParts {
        total: primary,
        primary,
        momentum: None,
        lambda: 1.0,
    };
    let mut scale = 1.0;
    let mut dz_extra = None;
    if let Some(m) = momentum.filter(|m| regime == Regime::Full && !m.queue.is_empty()) {
        let z_m = scorer.encode_with(&m.encoder.params, m.positive_view)?;
        let queue: Vec<Vec<f64>> = m.queue.entries();
        let mg = momentum_loss_grad(&pos.z, &z_m, &queue, tau)?;
        parts.total = combined_loss(primary, mg.loss, m.lambda)?;
        parts.momentum = Some(mg.loss);
        parts.lambda = m.lambda;
        scale = m.lambda;
        dz_extra = Some(
            mg.z_pos
                .iter()
                .map(|g| g * (1.0 - m.lambda))
                .collect::<Vec<f64>>(),
        );
    }

    scorer.backprop(&pos, scale * g_pos, dz_extra.as_deref(), grads, train_encoder);
    for (f, g) in negs.iter().zip(&g_negs) {
        scorer.backprop(f, scale * g, None, grads, train_encoder);
    }
    Ok(parts)
}

/// Epoch-wise shuffled stream of dataset indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStream {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: usize,
}

impl InstanceStream {
    fn pull(&mut self, k: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub stream: InstanceStream,
    pub block: Option<MiningState>,
    pub block_cursor: usize,
    pub optimizer: AdamW,
    pub momentum: Option<MomentumEncoder>,
    pub queue: Option<NegativeQueue>,
    pub log: TrainLog,
    pub best_dev: Option<f64>,
    pub swa: Option<(usize, Vec<f64>)>,
}

pub struct Trainer<'a> {
    pub config: TrainerConfig,
    pub scorer: CoherenceScorer,
    pub state: TrainerState,
    dataset: &'a [TrainingInstance],
    dev: &'a [EvalPair],
    out_dir: Option<PathBuf>,
    best: Option<CoherenceScorer>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainerConfig,
        scorer: CoherenceScorer,
        dataset: &'a [TrainingInstance],
        dev: &'a [EvalPair],
    ) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            config.schedule(),
            num_trainable(&scorer),
        );
        let (momentum, queue) = if config.regime == Regime::Full {
            (
                Some(init_momentum(&scorer, config.momentum)?),
                Some(NegativeQueue::new(config.queue_size, scorer.dim())?),
            )
        } else {
            (None, None)
        };
        Ok(Trainer {
            config,
            scorer,
            state: TrainerState {
                step: 0,
                rng,
                stream: InstanceStream {
                    order: Vec::new(),
                    cursor: 0,
                    epoch: 0,
                },
                block: None,
                block_cursor: 0,
                optimizer,
                momentum,
                queue,
                log: TrainLog::default(),
                best_dev: None,
                swa: None,
            },
            dataset,
            dev,
            out_dir: None,
            best: None,
        })
    }

    /// Reassembles a trainer from a checkpoint.
    pub fn from_parts(
        config: TrainerConfig,
        scorer: CoherenceScorer,
        state: TrainerState,
        dataset: &'a [TrainingInstance],
        dev: &'a [EvalPair],
    ) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        if state.optimizer.m.len() != num_trainable(&scorer) {
            return Err(Error::Checkpoint("optimizer state does not match the scorer".into()));
        }
        Ok(Trainer {
            config,
            scorer,
            state,
            dataset,
            dev,
            out_dir: None,
            best: None,
        })
    }

    /// Directory for best/last/diagnostic checkpoints and the training log.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    pub fn log(&self) -> &TrainLog {
        &self.state.log
    }

    /// Best-on-dev scorer seen so far (in memory).
    pub fn best_scorer(&self) -> Option<&CoherenceScorer> {
        self.best.as_ref()
    }

    fn next_block(&mut self) -> Result<()> {
        let cfg = &self.config;
        let block_len = cfg.x.max(1) * cfg.batch_size;
        let n = cfg.negatives;
        loop {
            let next = self
                .state
                .stream
                .pull(block_len, self.dataset.len(), &mut self.state.rng);
            let state = match &self.state.block {
                Some(prev) if cfg.mining() => {
                    advance(prev, &self.scorer, self.dataset, &next, n)?
                }
                prev => {
                    let mut s = init_block_random(self.dataset, &next, n, &mut self.state.rng);
                    s.block_index = prev.as_ref().map_or(0, |p| p.block_index + 1);
                    s
                }
            };
            self.state
                .log
                .mining_events
                .push((self.state.step, state.block_index));
            let empty = state.instances.is_empty();
            self.state.block = Some(state);
            self.state.block_cursor = 0;
            if !empty {
                return Ok(());
            }
        }
    }

    /// Runs one gradient step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let needs_block = self
            .state
            .block
            .as_ref()
            .map_or(true, |b| self.state.block_cursor >= b.instances.len());
        if needs_block {
            self.next_block()?;
        }
        let cfg = self.config.clone();
        let block = self.state.block.clone().expect("block prepared");
        let end = (self.state.block_cursor + cfg.batch_size).min(block.instances.len());
        let batch: Vec<(usize, Vec<usize>)> = (self.state.block_cursor..end)
            .map(|k| (block.instances[k], block.selections[k].clone()))
            .collect();
        self.state.block_cursor = end;

        let train_encoder = !cfg.freeze_encoder;
        let mut grads = self.scorer.zero_grads();
        let mut totals = (0.0, 0.0, None::<f64>, 1.0);
        let mut to_enqueue = Vec::new();
        for (idx, selection) in &batch {
            let inst = &self.dataset[*idx];
            let negatives: Vec<Document> = selection.iter().map(|&j| inst.negative(j)).collect();
            let view = if cfg.regime == Regime::Full && cfg.length_invariance {
                slice_positive(&inst.positive, &mut self.state.rng)?
            } else {
                inst.positive.clone()
            };
            let branch = match (&self.state.momentum, &self.state.queue) {
                (Some(encoder), Some(queue)) => Some(MomentumBranch {
                    encoder,
                    queue,
                    positive_view: &view,
                    lambda: cfg.lambda,
                }),
                _ => None,
            };
            let parts = instance_objective(
                &self.scorer,
                cfg.regime,
                cfg.tau,
                &inst.positive,
                &negatives,
                branch,
                train_encoder,
                Some(&mut self.state.rng),
                &mut grads,
            )?;
            if let Some(m) = &self.state.momentum {
                for d in &negatives {
                    to_enqueue.push(self.scorer.encode_with(&m.params, d)?);
                }
            }
            totals.0 += parts.total;
            totals.1 += parts.primary;
            if let Some(ml) = parts.momentum {
                totals.2 = Some(totals.2.unwrap_or(0.0) + ml);
            }
            totals.3 = parts.lambda;
        }
        let k = batch.len() as f64;
        let record = StepRecord {
            step: self.state.step + 1,
            loss: totals.0 / k,
            primary: totals.1 / k,
            momentum: totals.2.map(|m| m / k),
            lambda: totals.3,
            lr: self.state.optimizer.current_lr(),
        };
        if !record.loss.is_finite() || !grads.l2_norm().is_finite() {
            let detail = format!("non-finite loss {} (primary {})", record.loss, record.primary);
            if let Some(dir) = &self.out_dir {
                let diag = dir.join("diagnostic");
                if let Err(e) = crate::checkpoint::save(&diag, self) {
                    warn!("could not write diagnostic checkpoint: {e}");
                }
            }
            return Err(Error::Divergence {
                step: record.step,
                detail,
            });
        }
        if batch.len() > 1 {
            grads.encoder.scale(1.0 / k);
            grads.head_w.iter_mut().for_each(|g| *g /= k);
            grads.head_b /= k;
        }
        self.state
            .optimizer
            .step(&mut self.scorer, &grads, train_encoder);
        if let Some(m) = &mut self.state.momentum {
            m.update(&self.scorer.encoder)?;
        }
        if let Some(q) = &mut self.state.queue {
            q.enqueue(&to_enqueue)?;
        }
        self.state.step += 1;
        self.state.log.steps.push(record.clone());

        if self.state.step % cfg.eval_every == 0 {
            self.evaluate()?;
        }
        Ok(record)
    }

    fn evaluate(&mut self) -> Result<()> {
        if self.dev.is_empty() {
            return Ok(());
        }
        let acc = pairwise_accuracy(&self.scorer, self.dev, false)?.value;
        info!("step {}: dev accuracy {acc:.4}", self.state.step);
        self.state.log.evals.push(EvalRecord {
            step: self.state.step,
            dev_accuracy: acc,
        });
        if self.state.best_dev.map_or(true, |b| acc > b) {
            self.state.best_dev = Some(acc);
            self.best = Some(self.scorer.clone());
            if let Some(dir) = &self.out_dir {
                crate::checkpoint::save(&dir.join("best"), self)?;
            }
        }
        if self.config.swa_average && self.state.step >= self.config.anneal() {
            let flat = flatten_scorer(&self.scorer);
            let (count, avg) = self.state.swa.get_or_insert_with(|| (0, vec![0.0; flat.len()]));
            *count += 1;
            let c = *count as f64;
            for (a, x) in avg.iter_mut().zip(flat) {
                *a += (x - *a) / c;
            }
        }
        Ok(())
    }

    /// Trains until `target` steps have been taken in total.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let start = Instant::now();
        while self.state.step < target {
            self.step()?;
        }
        self.state.log.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Runs to `max_steps`, writes the last checkpoint and log, and returns
    /// the final scorer (the parameter average when `swa_average` is set).
    pub fn finish(mut self) -> Result<(CoherenceScorer, TrainLog)> {
        self.run_until(self.config.max_steps)?;
        if let Some(dir) = &self.out_dir {
            crate::checkpoint::save(&dir.join("last"), &self)?;
            self.state.log.write_jsonl(&dir.join("train_log.jsonl"))?;
        }
        let mut scorer = self.scorer;
        if let Some((_, avg)) = &self.state.swa {
            unflatten_scorer(&mut scorer, avg)?;
        }
        Ok((scorer, self.state.log))
    }
}

fn flatten_scorer(s: &CoherenceScorer) -> Vec<f64> {
    let mut v = s.encoder.flat();
    v.extend_from_slice(&s.head.w);
    v.push(s.head.b);
    v
}

fn unflatten_scorer(s: &mut CoherenceScorer, v: &[f64]) -> Result<()> {
    let n = s.encoder.num_scalars();
    let d = s.head.w.len();
    if v.len() != n + d + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + d + 1,
            got: v.len(),
        });
    }
    s.encoder.set_flat(&v[..n])?;
    s.head.w.copy_from_slice(&v[n..n + d]);
    s.head.b = v[n + d];
    Ok(())
}

fn check_dataset(config: &TrainerConfig, dataset: &[TrainingInstance]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let need = config.required_width();
    for inst in dataset {
        let have = inst.num_negatives();
        let ok = match config.regime {
            Regime::Pairwise => have == 1,
            _ => have >= need,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "{}: {have} negatives per instance, {:?} regime needs {}{need}",
                inst.positive.id,
                config.regime,
                if config.regime == Regime::Pairwise { "" } else { "at least " },
            )));
        }
    }
    if config.regime == Regime::Full && config.length_invariance {
        if let Some(d) = dataset.iter().find(|i| i.positive.n() < 4) {
            return Err(Error::InvalidDocument {
                id: d.positive.id.clone(),
                reason: "length-invariant slicing needs at least 4 sentences".into(),
            });
        }
    }
    Ok(())
}

/// Trains `scorer` on `dataset` and returns the final scorer and its log.
pub fn train(
    config: TrainerConfig,
    scorer: CoherenceScorer,
    dataset: &[TrainingInstance],
    dev_pairs: &[EvalPair],
    out_dir: Option<&Path>,
) -> Result<(CoherenceScorer, TrainLog)> {
    let mut trainer = Trainer::new(config, scorer, dataset, dev_pairs)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trainer = trainer.with_output_dir(dir);
    }
    trainer.finish()
}
