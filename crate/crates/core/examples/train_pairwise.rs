//! Pairwise ranking on the bundled synthetic corpus with a tiny transformer.
//!
//! Usage: cargo run --example train_pairwise -- [steps] [seed]

use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};
use coherence::synthetic::synthetic_splits;
use coherence::taskgen::{build_permuted_dataset, permuted_eval_pairs};
use coherence::trainer::{train, Regime, TrainerConfig};
use coherence::evalsuite::pairwise_accuracy;

fn main() -> coherence::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let layers: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let dim: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let [train_docs, dev_docs, test_docs] = synthetic_splits(600, 100, 100, seed)?;
    let dataset = build_permuted_dataset(&train_docs, 20, 1, seed)?;
    let dev = permuted_eval_pairs(&dev_docs, 1, seed ^ 1)?;
    let test = permuted_eval_pairs(&test_docs, 1, seed ^ 2)?;

    let backbone = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(layers, dim)))?.backbone;
    let scorer = CoherenceScorer::new(backbone, seed);
    let config = TrainerConfig {
        learning_rate: lr,
        lr_floor: lr / 5.0,
        anneal_steps: Some(steps),
        max_steps: steps,
        eval_every: (steps / 10).max(1),
        seed,
        ..TrainerConfig::for_regime(Regime::Pairwise)
    };
    let start = std::time::Instant::now();
    let (scorer, log) = train(config, scorer, &dataset, &dev, None)?;
    for e in &log.evals {
        println!("step {:>6}  dev accuracy {:.3}", e.step, e.dev_accuracy);
    }
    let acc = pairwise_accuracy(&scorer, &test, false)?.value;
    println!("test accuracy {acc:.3} after {steps} steps in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
