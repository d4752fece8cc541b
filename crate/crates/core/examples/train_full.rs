//! Full regime: mined hard negatives plus the momentum-encoder queue loss.
//! Trains half the steps, checkpoints, reloads and finishes from the
//! checkpoint.
//!
//! Usage: cargo run --release --example train_full -- [steps] [seed] [out_dir]

use std::path::PathBuf;

use coherence::checkpoint;
use coherence::evalsuite::pairwise_accuracy;
use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};
use coherence::synthetic::synthetic_splits;
use coherence::taskgen::{build_mining_dataset, permuted_eval_pairs};
use coherence::trainer::{Regime, Trainer, TrainerConfig};

fn main() -> coherence::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let out = PathBuf::from(args.get(3).map(String::as_str).unwrap_or("target/example-full"));

    let [train_docs, dev_docs, test_docs] = synthetic_splits(300, 50, 50, seed)?;
    let config = TrainerConfig {
        learning_rate: 5e-3,
        lr_floor: 1e-3,
        anneal_steps: Some(steps / 2),
        max_steps: steps,
        eval_every: (steps / 8).max(1),
        h: 10,
        x: 25,
        queue_size: 100,
        momentum: 0.99,
        seed,
        ..TrainerConfig::for_regime(Regime::Full)
    };
    let dataset = build_mining_dataset(&train_docs, 10, config.h, seed)?;
    let dev = permuted_eval_pairs(&dev_docs, 2, seed ^ 1)?;
    let test = permuted_eval_pairs(&test_docs, 2, seed ^ 2)?;
    let backbone = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(2, 32)))?.backbone;

    let mut trainer = Trainer::new(config, CoherenceScorer::new(backbone, seed), &dataset, &dev)?;
    trainer.run_until(steps / 2)?;
    let ckpt = out.join("half");
    checkpoint::save(&ckpt, &trainer)?;
    println!("checkpoint at step {} in {}", trainer.step_index(), ckpt.display());

    let resumed = checkpoint::load(&ckpt)?.into_trainer(&dataset, &dev)?.with_output_dir(&out);
    let (scorer, log) = resumed.finish()?;
    for s in log.steps.iter().step_by((steps / 10).max(1)) {
        println!(
            "step {:>5}  loss {:.4}  contrastive {:.4}  momentum {:?}",
            s.step, s.loss, s.primary, s.momentum.map(|m| (m * 1e4).round() / 1e4)
        );
    }
    for e in &log.evals {
        println!("step {:>5}  dev accuracy {:.3}", e.step, e.dev_accuracy);
    }
    println!("mining blocks started at steps {:?}", log.mining_events.iter().map(|e| e.0).collect::<Vec<_>>());
    println!("test accuracy {:.3}", pairwise_accuracy(&scorer, &test, false)?.value);
    Ok(())
}
