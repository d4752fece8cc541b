//! A small one-factor sweep over the number of negatives, aggregated into
//! curves with CSV and SVG output.
//!
//! Usage: cargo run --release --example sweep_curves -- [out_dir]

use std::path::PathBuf;

use coherence::analysis::{build_curves, sweep_curves, SweepPoint};
use coherence::evalsuite::pairwise_accuracy;
use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};
use coherence::synthetic::synthetic_splits;
use coherence::taskgen::{build_intrusion_dataset, build_permuted_dataset, permuted_eval_pairs, EvalPair, Similarity};
use coherence::trainer::{train, Regime, TrainerConfig};

fn main() -> coherence::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-sweep".into()));
    let seeds = [1u64, 2];
    let [train_docs, dev_docs, test_docs] = synthetic_splits(200, 40, 40, 3)?;
    let dev = permuted_eval_pairs(&dev_docs, 1, 1)?;
    let test_sets: Vec<(&str, Vec<EvalPair>)> = vec![
        ("permuted", permuted_eval_pairs(&test_docs, 2, 2)?),
        (
            "intrusion",
            build_intrusion_dataset(&test_docs, Similarity::Random, 2)?
                .iter()
                .map(|i| EvalPair {
                    pair_id: i.positive.id.clone(),
                    positive: i.positive.clone(),
                    negative: i.negative(0),
                    category: None,
                    annotator_labels: None,
                    tie: false,
                })
                .collect(),
        ),
    ];

    let mut points = Vec::new();
    for negatives in [1usize, 3, 5] {
        for &seed in &seeds {
            let config = TrainerConfig {
                learning_rate: 2e-3,
                lr_floor: 5e-4,
                anneal_steps: Some(100),
                max_steps: 200,
                eval_every: 100,
                negatives,
                hard_negative_mining: Some(false),
                seed,
                ..TrainerConfig::for_regime(Regime::Contrastive)
            };
            let dataset = build_permuted_dataset(&train_docs, 10, negatives, seed)?;
            let b = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(1, 16)))?.backbone;
            let (scorer, _) = train(config, CoherenceScorer::new(b, seed), &dataset, &dev, None)?;
            for (name, pairs) in &test_sets {
                let acc = pairwise_accuracy(&scorer, pairs, false)?.value;
                println!("N={negatives} seed={seed} {name}: {acc:.3}");
                points.push(SweepPoint {
                    param: "negatives".into(),
                    value: negatives as f64,
                    test_set: name.to_string(),
                    seed,
                    metric: Some(acc),
                });
            }
        }
    }
    for curve in build_curves(&points, &seeds) {
        println!("{}", curve.label());
        for p in &curve.points {
            println!("  {:?}", p);
        }
    }
    for path in sweep_curves(&points, &seeds, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
