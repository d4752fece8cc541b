//! Self-supervision task generation: unique sentence permutations per
//! positive, sentence-intrusion negatives, and pairwise evaluation sets.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};

/// Derives an independent RNG seed from a global seed and a stream key, so
/// that generation does not depend on iteration order or thread scheduling.
pub fn stream_seed(global: u64, key: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(key.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream_rng(global: u64, key: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(global, key, index))
}

/// A sentence order over a positive document, stored instead of the text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PermutationRecord {
    pub order: Vec<usize>,
}

impl PermutationRecord {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "{order:?} is not a permutation of 0..{n}"
                )));
            }
            seen[i] = true;
        }
        if is_identity(&order) {
            return Err(Error::InvalidArgument("identity order is not a negative".into()));
        }
        Ok(PermutationRecord { order })
    }

    pub fn apply(&self, doc: &Document, id: impl Into<String>) -> Document {
        doc.reordered(&self.order, id)
    }
}

fn is_identity(order: &[usize]) -> bool {
    order.iter().enumerate().all(|(i, &j)| i == j)
}

/// `n! - 1`, saturating at `u128::MAX`.
pub fn non_identity_pool(n: usize) -> u128 {
    let mut f: u128 = 1;
    for k in 2..=n as u128 {
        f = match f.checked_mul(k) {
            Some(v) => v,
            None => return u128::MAX,
        };
    }
    f - 1
}

/// All non-identity permutations of `0..n` in lexicographic order.
fn enumerate_non_identity(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        if !is_identity(&p) {
            out.push(p.clone());
        }
        // next lexicographic permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).unwrap();
        p.swap(i, j);
        p[i + 1..].reverse();
    }
    out
}

/// Draws `count` distinct non-identity orders of `n` sentences, none of which
/// appear in `already_used`.
pub fn sample_permutations<R: Rng + ?Sized>(
    doc_id: &str,
    n: usize,
    count: usize,
    already_used: &HashSet<PermutationRecord>,
    rng: &mut R,
) -> Result<Vec<PermutationRecord>> {
    let pool = non_identity_pool(n);
    let requested = (count as u128).saturating_add(already_used.len() as u128);
    if requested > pool {
        return Err(Error::PoolExhausted {
            id: doc_id.to_string(),
            requested,
            available: pool,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let remaining = pool - already_used.len() as u128;
    // Dense regime: rejection sampling would stall, so enumerate what is left.
    if n <= 8 && (count as u128) * 2 > remaining {
        let mut free: Vec<Vec<usize>> = enumerate_non_identity(n)
            .into_iter()
            .filter(|o| !already_used.contains(&PermutationRecord { order: o.clone() }))
            .collect();
        free.shuffle(rng);
        free.truncate(count);
        return Ok(free
            .into_iter()
            .map(|order| PermutationRecord { order })
            .collect());
    }
    let mut picked = Vec::with_capacity(count);
    let mut local: HashSet<PermutationRecord> = HashSet::with_capacity(count);
    let mut order: Vec<usize> = (0..n).collect();
    while picked.len() < count {
        order.shuffle(rng);
        if is_identity(&order) {
            continue;
        }
        let rec = PermutationRecord {
            order: order.clone(),
        };
        if already_used.contains(&rec) || local.contains(&rec) {
            continue;
        }
        local.insert(rec.clone());
        picked.push(rec);
    }
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    Permutation,
    Intrusion,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Negatives {
    Permutation(Vec<PermutationRecord>),
    Intrusion(Vec<Document>),
}

/// One positive document with its pool of negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub positive: Document,
    pub negatives: Negatives,
    pub repetition: usize,
}

impl TrainingInstance {
    pub fn kind(&self) -> NegativeKind {
        match self.negatives {
            Negatives::Permutation(_) => NegativeKind::Permutation,
            Negatives::Intrusion(_) => NegativeKind::Intrusion,
        }
    }

    pub fn num_negatives(&self) -> usize {
        match &self.negatives {
            Negatives::Permutation(p) => p.len(),
            Negatives::Intrusion(d) => d.len(),
        }
    }

    /// Materializes negative `i` as a document.
    pub fn negative(&self, i: usize) -> Document {
        match &self.negatives {
            Negatives::Permutation(p) => p[i].apply(
                &self.positive,
                format!("{}#r{}n{i}", self.positive.id, self.repetition),
            ),
            Negatives::Intrusion(d) => d[i].clone(),
        }
    }

    pub fn negative_docs(&self) -> Vec<Document> {
        (0..self.num_negatives()).map(|i| self.negative(i)).collect()
    }
}

/// Generates `repetitions` instances per positive, each with
/// `negatives_per_instance` permutations. Permutations are globally unique
/// per positive; if the pool runs dry the remaining repetitions are dropped
/// with a warning.
pub fn build_permuted_dataset(
    corpus: &Corpus,
    repetitions: usize,
    negatives_per_instance: usize,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    if let Some(d) = corpus.documents.iter().find(|d| d.n() < 2) {
        return Err(Error::InvalidDocument {
            id: d.id.clone(),
            reason: "permutation negatives need at least 2 sentences".into(),
        });
    }
    let per_doc: Vec<Vec<TrainingInstance>> = corpus
        .documents
        .par_iter()
        .map(|doc| {
            let pool = non_identity_pool(doc.n());
            let mut used: HashSet<PermutationRecord> = HashSet::new();
            let mut out = Vec::with_capacity(repetitions);
            for rep in 0..repetitions {
                let needed = negatives_per_instance as u128;
                if (used.len() as u128).saturating_add(needed) > pool {
                    warn!(
                        "{}: only {} unique permutations exist; dropping {} of {} repetitions",
                        doc.id,
                        pool,
                        repetitions - rep,
                        repetitions
                    );
                    break;
                }
                let mut rng = stream_rng(seed, &doc.id, rep as u64);
                let recs =
                    sample_permutations(&doc.id, doc.n(), negatives_per_instance, &used, &mut rng)
                        .expect("pool size checked above");
                used.extend(recs.iter().cloned());
                out.push(TrainingInstance {
                    positive: doc.clone(),
                    negatives: Negatives::Permutation(recs),
                    repetition: rep,
                });
            }
            out
        })
        .collect();
    Ok(per_doc.into_iter().flatten().collect())
}

/// Candidate pools for hard-negative mining: `h` unique permutations per
/// instance.
pub fn build_mining_dataset(
    corpus: &Corpus,
    repetitions: usize,
    h: usize,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    build_permuted_dataset(corpus, repetitions, h, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Random,
    LexicalOverlap,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "for", "with", "by",
    "from", "is", "was", "were", "are", "be", "been", "it", "its", "he", "she", "they", "them",
    "his", "her", "their", "this", "that", "as", "had", "has", "have", "not", "then", "so", "i",
    "we", "you", "my", "our", "me", "him", "who", "which", "there", "after", "into", "up",
];

pub fn content_words(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// One intrusion negative per positive: a uniformly chosen sentence is
/// replaced with a sentence from a different document.
pub fn build_intrusion_dataset(
    corpus: &Corpus,
    similarity: Similarity,
    seed: u64,
) -> Result<Vec<TrainingInstance>> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "intrusion generation needs at least two documents".into(),
        ));
    }
    corpus
        .documents
        .par_iter()
        .enumerate()
        .map(|(di, doc)| {
            let mut rng = stream_rng(seed, &doc.id, 0);
            let pos = rng.gen_range(0..doc.n());
            let replaced = &doc.sentences[pos];
            let candidates: Vec<&String> = corpus
                .documents
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != di)
                .flat_map(|(_, other)| other.sentences.iter())
                .filter(|s| s.trim() != replaced.trim())
                .collect();
            if candidates.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{}: no replacement sentence available",
                    doc.id
                )));
            }
            let chosen = match similarity {
                Similarity::Random => *candidates.choose(&mut rng).unwrap(),
                Similarity::LexicalOverlap => {
                    let context: HashSet<String> = doc
                        .sentences
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != pos)
                        .flat_map(|(_, s)| content_words(s))
                        .collect();
                    let scores: Vec<usize> = candidates
                        .iter()
                        .map(|c| content_words(c).intersection(&context).count())
                        .collect();
                    let best = *scores.iter().max().unwrap();
                    let top: Vec<&String> = candidates
                        .iter()
                        .zip(&scores)
                        .filter(|(_, &s)| s == best)
                        .map(|(c, _)| *c)
                        .collect();
                    *top.choose(&mut rng).unwrap()
                }
            };
            let mut sentences = doc.sentences.clone();
            sentences[pos] = chosen.clone();
            Ok(TrainingInstance {
                positive: doc.clone(),
                negatives: Negatives::Intrusion(vec![Document {
                    id: format!("{}#i{pos}", doc.id),
                    sentences,
                }]),
                repetition: 0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstanceRecord {
    positive_id: String,
    repetition: usize,
    negative_kind: NegativeKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    orders: Option<Vec<PermutationRecord>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    negative_docs: Option<Vec<Document>>,
}

pub fn write_instances(path: &Path, instances: &[TrainingInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        let (orders, negative_docs) = match &inst.negatives {
            Negatives::Permutation(p) => (Some(p.clone()), None),
            Negatives::Intrusion(d) => (None, Some(d.clone())),
        };
        let rec = InstanceRecord {
            positive_id: inst.positive.id.clone(),
            repetition: inst.repetition,
            negative_kind: inst.kind(),
            orders,
            negative_docs,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an instance file, resolving positives against `corpus`.
pub fn read_instances(path: &Path, corpus: &Corpus) -> Result<Vec<TrainingInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: BTreeMap<&str, &Document> =
        corpus.documents.iter().map(|d| (d.id.as_str(), d)).collect();
    let schema_err = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(line).map_err(|e| schema_err(i + 1, e.to_string()))?;
        let positive = index
            .get(rec.positive_id.as_str())
            .ok_or_else(|| schema_err(i + 1, format!("unknown positive {}", rec.positive_id)))?;
        let negatives = match (rec.negative_kind, rec.orders, rec.negative_docs) {
            (NegativeKind::Permutation, Some(orders), _) => {
                for o in &orders {
                    if o.order.len() != positive.n() {
                        return Err(schema_err(i + 1, "order length mismatch".into()));
                    }
                    PermutationRecord::new(o.order.clone())
                        .map_err(|e| schema_err(i + 1, e.to_string()))?;
                }
                Negatives::Permutation(orders)
            }
            (NegativeKind::Intrusion, _, Some(docs)) => Negatives::Intrusion(docs),
            _ => return Err(schema_err(i + 1, "negatives missing for kind".into())),
        };
        out.push(TrainingInstance {
            positive: (*positive).clone(),
            negatives,
            repetition: rec.repetition,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// The first slot (`pos`) was judged more coherent.
    A,
    B,
    Tie,
}

/// A (positive, negative) pair for pairwise evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub pair_id: String,
    #[serde(rename = "pos")]
    pub positive: Document,
    #[serde(rename = "neg")]
    pub negative: Document,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub category: Option<String>,
    #[serde(rename = "labels", skip_serializing_if = "Option::is_none", default)]
    pub annotator_labels: Option<Vec<Label>>,
    /// Set when the pair was built from equal mean ratings.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub tie: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSchema {
    Generic,
    Judgments,
    Probes,
}

pub fn load_eval_pairs(path: &Path, schema: PairSchema) -> Result<Vec<EvalPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let pair: EvalPair = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        pair.positive.validate().map_err(|e| err(e.to_string()))?;
        pair.negative.validate().map_err(|e| err(e.to_string()))?;
        if pair.positive.sentences == pair.negative.sentences {
            return Err(err("positive and negative are identical".into()));
        }
        match schema {
            PairSchema::Generic => {}
            PairSchema::Judgments => {
                if pair.annotator_labels.as_ref().map_or(true, Vec::is_empty) {
                    return Err(err("judgment pair without labels".into()));
                }
            }
            PairSchema::Probes => {
                if pair.category.is_none() {
                    return Err(err("probe pair without category".into()));
                }
            }
        }
        out.push(pair);
    }
    Ok(out)
}

pub fn write_eval_pairs(path: &Path, pairs: &[EvalPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A system output with its per-annotator coherence ratings; `key` groups
/// outputs produced for the same source/prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedText {
    pub key: String,
    pub document: Document,
    pub ratings: Vec<f64>,
}

/// Forms one pair per unordered pair of texts sharing a key; the text with
/// the higher mean rating is the positive. Equal means yield `tie` pairs.
pub fn pair_from_ratings(texts: &[RatedText]) -> Result<Vec<EvalPair>> {
    let mut groups: BTreeMap<&str, Vec<&RatedText>> = BTreeMap::new();
    for t in texts {
        if t.ratings.is_empty() || t.ratings.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{}: ratings must be non-empty and finite",
                t.document.id
            )));
        }
        groups.entry(t.key.as_str()).or_default().push(t);
    }
    let mean = |t: &RatedText| t.ratings.iter().sum::<f64>() / t.ratings.len() as f64;
    let mut out = Vec::new();
    for (key, group) in groups {
        if group.len() < 2 {
            warn!("key {key}: fewer than two rated texts, skipping");
            continue;
        }
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (group[i], group[j]);
                let (ma, mb) = (mean(a), mean(b));
                let (pos, neg) = if mb > ma { (b, a) } else { (a, b) };
                out.push(EvalPair {
                    pair_id: format!("{key}:{}|{}", a.document.id, b.document.id),
                    positive: pos.document.clone(),
                    negative: neg.document.clone(),
                    category: None,
                    annotator_labels: None,
                    tie: ma == mb,
                });
            }
        }
    }
    Ok(out)
}

/// Held-out (original, permuted) pairs: `per_doc` unique permutations of
/// every document.
pub fn permuted_eval_pairs(corpus: &Corpus, per_doc: usize, seed: u64) -> Result<Vec<EvalPair>> {
    let instances = build_permuted_dataset(corpus, 1, per_doc, seed)?;
    Ok(instances
        .iter()
        .flat_map(|inst| {
            (0..inst.num_negatives()).map(move |i| EvalPair {
                pair_id: format!("{}:{i}", inst.positive.id),
                positive: inst.positive.clone(),
                negative: inst.negative(i),
                category: None,
                annotator_labels: None,
                tie: false,
            })
        })
        .collect())
}
