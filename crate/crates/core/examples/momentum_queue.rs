//! The momentum encoder trails the base encoder geometrically, and the
//! negative queue keeps the most recent representations.
//!
//! Usage: cargo run --example momentum_queue

use coherence::momentum::{init_momentum, NegativeQueue};
use coherence::nn::TransformerConfig;
use coherence::scorer::{make_backbone, BackboneKind, CoherenceScorer};

fn main() -> coherence::Result<()> {
    let b = make_backbone(&BackboneKind::Tiny(TransformerConfig::tiny(1, 16)))?.backbone;
    let base = CoherenceScorer::new(b.clone(), 1);
    let moved = CoherenceScorer::new(b, 2);

    let mut m = init_momentum(&base, 0.9)?;
    let d0 = m.params.l2_distance(&moved.encoder);
    for t in 1..=5 {
        m.update(&moved.encoder)?;
        let d = m.params.l2_distance(&moved.encoder);
        println!("T={t}  distance {d:.6}  ratio {:.6}", d / d0);
    }

    let mut q = NegativeQueue::new(4, 2)?;
    for k in 0..3 {
        let batch: Vec<Vec<f64>> = (0..2).map(|i| vec![k as f64, i as f64]).collect();
        q.enqueue(&batch)?;
        println!("after batch {k}: {:?}", q.entries());
    }
    Ok(())
}
