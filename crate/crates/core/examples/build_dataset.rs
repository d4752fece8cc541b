//! Builds permutation and sentence-intrusion training data from the bundled
//! synthetic corpus and writes it as JSON lines.
//!
//! Usage: cargo run --example build_dataset -- [out_dir] [seed]

use std::path::PathBuf;

use coherence::corpus::Split;
use coherence::synthetic::synthetic_corpus;
use coherence::taskgen::{
    build_intrusion_dataset, build_permuted_dataset, non_identity_pool, write_instances, Similarity,
};

fn main() -> coherence::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("target/example-data"));
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    std::fs::create_dir_all(&out).map_err(|e| coherence::Error::io(&out, e))?;

    let corpus = synthetic_corpus(50, seed, "doc", Split::Train)?;
    corpus.write_jsonl(&out.join("corpus.jsonl"))?;
    let doc = &corpus.documents[0];
    println!("{} ({} sentences, {} non-identity orders):", doc.id, doc.n(), non_identity_pool(doc.n()));
    for s in &doc.sentences {
        println!("  {s}");
    }

    let permuted = build_permuted_dataset(&corpus, 20, 5, seed)?;
    println!("\nfirst negative of {}:", permuted[0].positive.id);
    for s in &permuted[0].negative(0).sentences {
        println!("  {s}");
    }
    write_instances(&out.join("permuted.jsonl"), &permuted)?;

    let intrusion = build_intrusion_dataset(&corpus, Similarity::LexicalOverlap, seed)?;
    write_instances(&out.join("intrusion.jsonl"), &intrusion)?;
    println!(
        "\n{} permutation instances, {} intrusion instances written to {}",
        permuted.len(),
        intrusion.len(),
        out.display()
    );
    Ok(())
}
