//! One round of local hard-negative mining: random selection for the first
//! block, then model-ranked selection from each instance's candidate pool.
//!
//! Usage: cargo run --example hard_negative_mining

use coherence::corpus::Split;
use coherence::miner::{advance, init_block_random, rank_and_select};
use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};
use coherence::synthetic::synthetic_corpus;
use coherence::taskgen::build_mining_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coherence::Result<()> {
    let (h, n) = (20, 5);
    let corpus = synthetic_corpus(8, 1, "m", Split::Train)?;
    let dataset = build_mining_dataset(&corpus, 1, h, 1)?;
    let b = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(1, 16)))?.backbone;
    let scorer = CoherenceScorer::new(b, 4);

    let block: Vec<usize> = (0..4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = init_block_random(&dataset, &block, n, &mut rng);
    println!("block 0 (random): {:?}", first.selections);

    let next: Vec<usize> = (4..8).collect();
    let second = advance(&first, &scorer, &dataset, &next, n)?;
    println!("block 1 (mined):  {:?}", second.selections);

    let inst = &dataset[4];
    let picked = rank_and_select(&scorer, inst, n)?;
    for i in picked {
        println!("  candidate {i:>2} scores {:.4}", scorer.score(&inst.negative(i))?.value());
    }
    Ok(())
}
