//! Probe accuracy per category and Krippendorff's alpha between simulated
//! annotators and a scorer.
//!
//! Usage: cargo run --example evaluate_agreement -- [checkpoint_dir]

use std::path::Path;

use coherence::checkpoint::load_scorer;
use coherence::corpus::{Document, Split};
use coherence::evalsuite::{model_agreement, probe_accuracy, AgreementMode};
use coherence::scorer::{DocumentScorer, FnScorer};
use coherence::synthetic::{simulated_judgments, synthetic_corpus, synthetic_probes};

// A hand-written baseline: penalizes pronouns that disagree with the
// character introduced in the first sentence, and "late" connectives that
// precede "early" ones.
fn rule_score(d: &Document) -> f64 {
    let first = d.sentences[0].split(' ').next().unwrap_or_default();
    let female = ["Alice", "Maria", "Nora", "Grace", "Lena", "Ruth", "Clara", "Ines"].contains(&first);
    let wrong = if female { " he " } else { " she " };
    let pronouns = d.sentences.iter().filter(|s| s.contains(wrong)).count();
    let early = ["One day", "Soon after", "Then", "Next", "At first"];
    let is_early: Vec<bool> = d.sentences.iter().map(|s| early.iter().any(|e| s.starts_with(e))).collect();
    let inversions = (0..is_early.len())
        .filter(|&i| !is_early[i] && d.sentences[i].contains(", "))
        .map(|i| is_early[i + 1..].iter().filter(|&&e| e).count())
        .sum::<usize>();
    -((pronouns * 10 + inversions) as f64)
}

fn main() -> coherence::Result<()> {
    let corpus = synthetic_corpus(300, 5, "probe", Split::Test)?;
    let probes = synthetic_probes(&corpus, 100, 5);
    let judged = simulated_judgments(&probes, 3, 0.1, 5);

    let loaded;
    let baseline = FnScorer(rule_score);
    let scorer: &dyn DocumentScorer = match std::env::args().nth(1) {
        Some(dir) => {
            loaded = load_scorer(Path::new(&dir))?;
            &loaded
        }
        None => &baseline,
    };

    print!("{}", probe_accuracy(scorer, &probes)?.to_table());
    for mode in [AgreementMode::ModelAsRater, AgreementMode::ModelVsMajority] {
        let report = model_agreement(scorer, &judged, mode)?;
        println!(
            "{mode:?}: alpha {:.3} over {} items ({} excluded), annotators alone {:.3}",
            report.value,
            report.pair_count,
            report.excluded_count,
            report.annotator_alpha.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
