//! Scores documents and their shuffled versions with a saved scorer, or with
//! a freshly initialized tiny one when no checkpoint is given.
//!
//! Usage: cargo run --example score_documents -- [checkpoint_dir]

use std::path::Path;

use coherence::checkpoint::load_scorer;
use coherence::corpus::Split;
use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};
use coherence::synthetic::synthetic_corpus;
use coherence::taskgen::permuted_eval_pairs;

fn main() -> coherence::Result<()> {
    let scorer = match std::env::args().nth(1) {
        Some(dir) => load_scorer(Path::new(&dir))?,
        None => {
            let b = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(2, 32)))?.backbone;
            CoherenceScorer::new(b, 0)
        }
    };
    let corpus = synthetic_corpus(5, 3, "demo", Split::Test)?;
    for pair in permuted_eval_pairs(&corpus, 1, 3)? {
        let a = scorer.score(&pair.positive)?.value();
        let b = scorer.score(&pair.negative)?.value();
        let mark = if a > b { "ok " } else { "err" };
        println!("{mark} {:<12} original {a:>8.4}  shuffled {b:>8.4}", pair.positive.id);
    }
    Ok(())
}
