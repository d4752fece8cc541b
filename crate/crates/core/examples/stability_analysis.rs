//! Dev-accuracy volatility of hard-negative training with and without the
//! momentum branch.
//!
//! Usage: cargo run --release --example stability_analysis -- [steps] [lr] [seeds]
//! e.g. `-- 600 2e-2 1,2,3`

use coherence::analysis::stability_stats;
use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};
use coherence::synthetic::synthetic_splits;
use coherence::taskgen::{build_mining_dataset, permuted_eval_pairs};
use coherence::trainer::{train, Regime, TrainerConfig};

fn main() -> coherence::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-2);
    let seeds: Vec<u64> = args
        .get(3)
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_else(|| vec![1]);

    let [train_docs, dev_docs, _] = synthetic_splits(600, 100, 100, 7)?;
    let dev = permuted_eval_pairs(&dev_docs, 3, 11)?;
    let mut logs = Vec::new();
    for &seed in &seeds {
        for regime in [Regime::Contrastive, Regime::Full] {
            let config = TrainerConfig {
                learning_rate: lr,
                lr_floor: lr / 5.0,
                anneal_steps: Some(steps / 2),
                max_steps: steps,
                eval_every: (steps / 20).max(1),
                h: 20,
                x: 25,
                queue_size: 200,
                momentum: 0.99,
                hard_negative_mining: Some(true),
                seed,
                ..TrainerConfig::for_regime(regime)
            };
            let dataset = build_mining_dataset(&train_docs, 20, config.h, seed)?;
            let b = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(2, 32)))?.backbone;
            let (_, log) = train(config, CoherenceScorer::new(b, seed), &dataset, &dev, None)?;
            let series: Vec<String> = log.evals.iter().map(|e| format!("{:.3}", e.dev_accuracy)).collect();
            println!("{regime:?} seed {seed}: {}", series.join(" "));
            logs.push((format!("{regime:?}"), log));
        }
    }
    for row in stability_stats(&logs, steps / 4)? {
        println!(
            "{:<12} runs {}  mean {:.4}  std {:.4}  per run {:.4?}",
            row.label, row.runs, row.mean, row.std, row.per_run_std
        );
    }
    Ok(())
}
