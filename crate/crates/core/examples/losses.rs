//! The three training objectives evaluated on hand-picked scores.
//!
//! Usage: cargo run --example losses

use coherence::objectives::{
    combined_loss, contrastive_loss, contrastive_loss_grad, momentum_loss, pairwise_loss,
};

fn main() -> coherence::Result<()> {
    let tau = 0.1;
    println!("pairwise hinge, margin {tau}");
    for (pos, neg) in [(1.0, 0.5), (1.0, 0.95), (0.5, 1.0)] {
        println!("  s+={pos:<4} s-={neg:<4} -> {:.4}", pairwise_loss(pos, neg, tau)?);
    }

    println!("\ncontrastive, margin {tau}");
    for negs in [vec![0.1], vec![0.0, 0.0], vec![0.9, -1.0, -1.0, -1.0, -1.0]] {
        let (l, gp, gn) = contrastive_loss_grad(1.0, &negs, tau)?;
        println!("  s+=1 s-={negs:?} -> {l:.6}  dL/ds+={gp:.4} dL/ds-={gn:.4?}");
    }
    // Adding a constant to every score leaves the loss unchanged.
    let shifted = contrastive_loss(101.0, &[100.0, 100.0], tau)?;
    println!("  shifted by 100 -> {shifted:.6}");

    let z = [1.0, 0.0, 0.0];
    let queue = vec![vec![0.0, 1.0, 0.0], vec![0.7, 0.7, 0.0]];
    let lm = momentum_loss(&z, &[0.9, 0.1, 0.0], &queue, tau)?;
    println!("\nmomentum loss against a queue of {} -> {lm:.6}", queue.len());
    let lc = contrastive_loss(1.0, &[0.0, 0.0], tau)?;
    println!("combined, lambda 0.85 -> {:.6}", combined_loss(lc, lm, 0.85)?);
    Ok(())
}
