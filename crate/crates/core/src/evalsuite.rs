//! Evaluation: pairwise accuracy, probe accuracy per category, and
//! Krippendorff's alpha agreement with human judgments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::DocumentScorer;
use crate::taskgen::{EvalPair, Label};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub accuracy: f64,
    /// `accuracy` on a 0–100 scale.
    pub percent: f64,
    pub pairs: usize,
    pub correct: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: String,
    /// Accuracy in [0, 1], or alpha in [-1, 1].
    pub value: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub categories: BTreeMap<String, CategoryResult>,
    /// Pairs (or items) that entered the metric.
    pub pair_count: usize,
    pub correct_count: usize,
    /// Exact score ties; counted as incorrect for accuracy.
    pub tie_count: usize,
    /// Pairs left out before scoring (rating ties, or model ties for alpha).
    pub excluded_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub annotator_alpha: Option<f64>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl EvalReport {
    /// Pairs scored strictly the wrong way round.
    pub fn error_count(&self) -> usize {
        self.pair_count - self.correct_count - self.tie_count
    }

    pub fn with_dataset(mut self, name: impl Into<String>) -> Self {
        self.dataset = name.into();
        self
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }

    /// One row per category (or a single row), values as percentages for
    /// accuracy metrics.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = self.metric != "krippendorff_alpha";
        let fmt = |v: f64| {
            if pct {
                format!("{:.2}", 100.0 * v)
            } else {
                format!("{v:.4}")
            }
        };
        let _ = writeln!(out, "{:<28} {:>10} {:>8} {:>6}", "dataset/category", self.metric, "pairs", "ties");
        for (name, c) in &self.categories {
            let _ = writeln!(out, "{:<28} {:>10} {:>8} {:>6}", name, fmt(c.accuracy), c.pairs, c.ties);
        }
        let label = if self.categories.is_empty() {
            self.dataset.as_str()
        } else {
            "macro average"
        };
        let _ = writeln!(
            out,
            "{:<28} {:>10} {:>8} {:>6}",
            label,
            fmt(self.value),
            self.pair_count,
            self.tie_count
        );
        if let Some(a) = self.annotator_alpha {
            let _ = writeln!(out, "{:<28} {:>10.4}", "annotators only", a);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Correct,
    Tie,
    Wrong,
}

fn score_pairs(scorer: &dyn DocumentScorer, pairs: &[&EvalPair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .par_iter()
        .map(|p| Ok((scorer.score_doc(&p.positive)?, scorer.score_doc(&p.negative)?)))
        .collect()
}

fn outcome(sp: f64, sn: f64) -> Outcome {
    if sp > sn {
        Outcome::Correct
    } else if sp == sn {
        Outcome::Tie
    } else {
        Outcome::Wrong
    }
}

fn tally(outcomes: &[Outcome]) -> CategoryResult {
    let correct = outcomes.iter().filter(|o| **o == Outcome::Correct).count();
    let ties = outcomes.iter().filter(|o| **o == Outcome::Tie).count();
    let accuracy = correct as f64 / outcomes.len() as f64;
    CategoryResult {
        accuracy,
        percent: 100.0 * accuracy,
        pairs: outcomes.len(),
        correct,
        ties,
    }
}

fn kept(pairs: &[EvalPair], keep_ties: bool) -> Vec<&EvalPair> {
    pairs.iter().filter(|p| keep_ties || !p.tie).collect()
}

/// Fraction of pairs where the positive scores strictly higher.
/// Pairs flagged as rating ties are skipped unless `keep_ties`.
pub fn pairwise_accuracy(
    scorer: &dyn DocumentScorer,
    pairs: &[EvalPair],
    keep_ties: bool,
) -> Result<EvalReport> {
    let used = kept(pairs, keep_ties);
    if used.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let outcomes: Vec<Outcome> = score_pairs(scorer, &used)?
        .into_iter()
        .map(|(a, b)| outcome(a, b))
        .collect();
    let t = tally(&outcomes);
    Ok(EvalReport {
        dataset: String::new(),
        metric: "accuracy".into(),
        value: t.accuracy,
        categories: BTreeMap::new(),
        pair_count: t.pairs,
        correct_count: t.correct,
        tie_count: t.ties,
        excluded_count: pairs.len() - used.len(),
        annotator_alpha: None,
        provenance: Provenance::default(),
    })
}

/// Pairwise accuracy per `category` plus the macro average over categories.
pub fn probe_accuracy(scorer: &dyn DocumentScorer, pairs: &[EvalPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no probe pairs to evaluate".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.category.is_none()) {
        return Err(Error::InvalidArgument(format!("probe pair {} has no category", p.pair_id)));
    }
    let refs: Vec<&EvalPair> = pairs.iter().collect();
    let scores = score_pairs(scorer, &refs)?;
    let mut grouped: BTreeMap<String, Vec<Outcome>> = BTreeMap::new();
    for (p, (a, b)) in pairs.iter().zip(scores) {
        grouped
            .entry(p.category.clone().unwrap())
            .or_default()
            .push(outcome(a, b));
    }
    let categories: BTreeMap<String, CategoryResult> =
        grouped.into_iter().map(|(k, v)| (k, tally(&v))).collect();
    let macro_avg = categories.values().map(|c| c.accuracy).sum::<f64>() / categories.len() as f64;
    Ok(EvalReport {
        dataset: String::new(),
        metric: "probe_accuracy".into(),
        value: macro_avg,
        pair_count: pairs.len(),
        correct_count: categories.values().map(|c| c.correct).sum(),
        tie_count: categories.values().map(|c| c.ties).sum(),
        categories,
        excluded_count: 0,
        annotator_alpha: None,
        provenance: Provenance::default(),
    })
}

/// Nominal Krippendorff's alpha over a rater × item matrix (`None` = missing),
/// via the coincidence matrix. Items with fewer than two ratings are not
/// pairable and are ignored. Returns [`Error::Undefined`] when fewer than two
/// distinct labels are pairable.
pub fn krippendorff_alpha<T: Ord + Clone>(ratings: &[Vec<Option<T>>]) -> Result<f64> {
    if ratings.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "alpha needs at least 2 raters, got {}",
            ratings.len()
        )));
    }
    let items = ratings[0].len();
    if ratings.iter().any(|r| r.len() != items) {
        return Err(Error::InvalidArgument("ragged ratings matrix".into()));
    }
    let mut labels: BTreeMap<T, usize> = BTreeMap::new();
    for v in ratings.iter().flatten().flatten() {
        let next = labels.len();
        labels.entry(v.clone()).or_insert(next);
    }
    let k = labels.len();
    let mut coincidence = vec![vec![0.0f64; k]; k];
    let mut pairable_units = 0;
    for u in 0..items {
        let mut counts = vec![0usize; k];
        let mut m = 0usize;
        for r in ratings {
            if let Some(v) = &r[u] {
                counts[labels[v]] += 1;
                m += 1;
            }
        }
        if m < 2 {
            continue;
        }
        pairable_units += 1;
        let w = 1.0 / (m - 1) as f64;
        for c in 0..k {
            for d in 0..k {
                let pairs = if c == d {
                    counts[c] * counts[c].saturating_sub(1)
                } else {
                    counts[c] * counts[d]
                };
                coincidence[c][d] += pairs as f64 * w;
            }
        }
    }
    if pairable_units == 0 {
        return Err(Error::InvalidArgument("no item is rated by two or more raters".into()));
    }
    let n_c: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = n_c.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            if c != d {
                observed += coincidence[c][d];
                expected += n_c[c] * n_c[d];
            }
        }
    }
    if expected == 0.0 {
        return Err(Error::Undefined("only one label value among pairable ratings".into()));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementMode {
    /// The model is appended as one more rater.
    #[default]
    ModelAsRater,
    /// Two raters: the annotators' majority label and the model.
    ModelVsMajority,
}

impl std::str::FromStr for AgreementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_as_rater" | "rater" => Ok(AgreementMode::ModelAsRater),
            "model_vs_majority" | "majority" => Ok(AgreementMode::ModelVsMajority),
            other => Err(Error::InvalidArgument(format!("unknown agreement mode {other}"))),
        }
    }
}

fn majority(labels: &[Option<Label>]) -> Option<Label> {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(*l).or_default() += 1;
    }
    let max = *counts.values().max()?;
    let mut top = counts.into_iter().filter(|(_, c)| *c == max);
    let first = top.next()?.0;
    top.next().is_none().then_some(first)
}

/// Agreement between the model's ranking and annotator judgments. The model
/// labels a pair `a` when the `pos` slot scores higher and `b` when lower;
/// exact score ties drop the item.
pub fn model_agreement(
    scorer: &dyn DocumentScorer,
    pairs: &[EvalPair],
    mode: AgreementMode,
) -> Result<EvalReport> {
    let judged: Vec<&EvalPair> = pairs
        .iter()
        .filter(|p| p.annotator_labels.as_ref().is_some_and(|l| !l.is_empty()))
        .collect();
    if judged.is_empty() {
        return Err(Error::InvalidArgument("no pairs carry annotator labels".into()));
    }
    if let Some(p) = judged.iter().find(|p| {
        !p.annotator_labels
            .as_ref()
            .unwrap()
            .iter()
            .any(|l| matches!(l, Label::A | Label::B))
    }) {
        return Err(Error::InvalidArgument(format!("pair {} has no a/b judgment", p.pair_id)));
    }
    let scores = score_pairs(scorer, &judged)?;
    let mut items: Vec<(&EvalPair, Label)> = Vec::new();
    let mut ties = 0;
    for (p, (a, b)) in judged.iter().zip(scores) {
        match outcome(a, b) {
            Outcome::Correct => items.push((p, Label::A)),
            Outcome::Wrong => items.push((p, Label::B)),
            Outcome::Tie => ties += 1,
        }
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("every judged pair was a model tie".into()));
    }
    let raters = items
        .iter()
        .map(|(p, _)| p.annotator_labels.as_ref().unwrap().len())
        .max()
        .unwrap();
    let annotators: Vec<Vec<Option<Label>>> = (0..raters)
        .map(|r| {
            items
                .iter()
                .map(|(p, _)| p.annotator_labels.as_ref().unwrap().get(r).copied())
                .collect()
        })
        .collect();
    let model_row: Vec<Option<Label>> = items.iter().map(|(_, l)| Some(*l)).collect();
    let matrix = match mode {
        AgreementMode::ModelAsRater => {
            let mut m = annotators.clone();
            m.push(model_row.clone());
            m
        }
        AgreementMode::ModelVsMajority => {
            let maj: Vec<Option<Label>> = (0..items.len())
                .map(|u| majority(&annotators.iter().map(|r| r[u]).collect::<Vec<_>>()))
                .collect();
            vec![maj, model_row.clone()]
        }
    };
    let value = krippendorff_alpha(&matrix)?;
    let annotator_alpha = if annotators.len() >= 2 {
        krippendorff_alpha(&annotators).ok()
    } else {
        None
    };
    let correct = model_row.iter().filter(|l| **l == Some(Label::A)).count();
    Ok(EvalReport {
        dataset: String::new(),
        metric: "krippendorff_alpha".into(),
        value,
        categories: BTreeMap::new(),
        pair_count: items.len(),
        correct_count: correct,
        tie_count: 0,
        excluded_count: ties + pairs.len() - judged.len(),
        annotator_alpha,
        provenance: Provenance::default(),
    })
}
