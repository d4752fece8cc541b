//! Template-generated narratives used as the bundled demo corpus.
//!
//! Each story introduces a character, follows them through a sequence of
//! events and closes with a resolution. Events in the first half of the
//! middle open with an "early" connective and the rest with a "late" one, so
//! order inside each half carries no surface cue. The character is referred
//! to by name or by a gendered pronoun after the introduction.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Corpus, Document, Split};
use crate::error::Result;
use crate::taskgen::{stream_rng, EvalPair, Label};

const NAMES: &[(&str, bool)] = &[
    ("Alice", false),
    ("Maria", false),
    ("Nora", false),
    ("Grace", false),
    ("Lena", false),
    ("Ruth", false),
    ("Clara", false),
    ("Ines", false),
    ("Tom", true),
    ("Omar", true),
    ("Felix", true),
    ("Jonas", true),
    ("Victor", true),
    ("Hugo", true),
    ("Samuel", true),
    ("Leo", true),
];
const ROLES: &[&str] = &[
    "baker", "sailor", "teacher", "farmer", "painter", "doctor", "carpenter", "student",
    "musician", "gardener", "pilot", "writer",
];
const PLACES: &[&str] = &[
    "a small village", "the old harbor", "a busy city", "the northern hills", "a quiet town",
    "the river valley", "a mountain camp", "the coastal road",
];
const VERBS: &[&str] = &[
    "found", "repaired", "carried", "painted", "sold", "lost", "cleaned", "opened", "borrowed",
    "hid", "measured", "packed",
];
const OBJECTS: &[&str] = &[
    "an old lantern", "a wooden box", "a torn map", "a heavy key", "a blue bicycle",
    "a broken clock", "a silver cup", "a basket of apples", "a stack of letters", "a small boat",
];
const SPOTS: &[&str] = &[
    "near the bridge", "behind the market", "at the station", "by the well", "in the cellar",
    "on the roof", "under the oak tree", "beside the church",
];
/// Connectives for the first and second half of the middle sentences.
const EARLY: &[&str] = &["One day", "Soon after", "Then", "Next", "At first"];
const LATE: &[&str] = &["After that", "Later", "Afterwards", "Eventually", "By evening"];
const ENDINGS: &[&str] = &[
    "was tired but happy", "finally felt at home", "shared the story with friends",
    "decided to rest", "never forgot that day", "smiled and went to sleep",
];

pub const MIN_LEN: usize = 6;
pub const MAX_LEN: usize = 12;

fn pronoun(male: bool) -> &'static str {
    if male {
        "he"
    } else {
        "she"
    }
}

/// One story with `len` sentences (clamped to `[MIN_LEN, MAX_LEN]`).
pub fn story<R: Rng + ?Sized>(id: impl Into<String>, len: usize, rng: &mut R) -> Document {
    let len = len.clamp(MIN_LEN, MAX_LEN);
    let &(name, male) = NAMES.choose(rng).unwrap();
    let he = pronoun(male);
    let role = ROLES.choose(rng).unwrap();
    let place = PLACES.choose(rng).unwrap();
    let mut sentences = vec![format!("{name} was a {role} who lived in {place}.")];
    let middle = len - 3;
    for i in 0..middle {
        let pool = if 2 * i < middle { EARLY } else { LATE };
        let connective = pool.choose(rng).unwrap();
        let subject = if rng.gen_bool(0.5) { name } else { he };
        let verb = VERBS.choose(rng).unwrap();
        let obj = OBJECTS.choose(rng).unwrap();
        let spot = SPOTS.choose(rng).unwrap();
        sentences.push(format!("{connective}, {subject} {verb} {obj} {spot}."));
    }
    let verb = VERBS.choose(rng).unwrap();
    let obj = OBJECTS.choose(rng).unwrap();
    sentences.push(format!("Finally, {he} {verb} {obj} once more."));
    let end = ENDINGS.choose(rng).unwrap();
    sentences.push(format!("In the end, {name} {end}."));
    Document {
        id: id.into(),
        sentences,
    }
}

/// `count` stories with ids `{prefix}{i:05}` and lengths uniform in
/// `[MIN_LEN, MAX_LEN]`. Story `i` depends only on `(seed, prefix, i)`.
pub fn synthetic_corpus(count: usize, seed: u64, prefix: &str, split: Split) -> Result<Corpus> {
    let docs = (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, prefix, i as u64);
            let len = rng.gen_range(MIN_LEN..=MAX_LEN);
            story(format!("{prefix}{i:05}"), len, &mut rng)
        })
        .collect();
    Corpus::new(docs, split)
}

/// Disjoint train, dev and test corpora.
pub fn synthetic_splits(train: usize, dev: usize, test: usize, seed: u64) -> Result<[Corpus; 3]> {
    Ok([
        synthetic_corpus(train, seed, "train", Split::Train)?,
        synthetic_corpus(dev, seed, "dev", Split::Dev)?,
        synthetic_corpus(test, seed, "test", Split::Test)?,
    ])
}

fn flip_pronoun(s: &str) -> Option<String> {
    let words: Vec<&str> = s.split(' ').collect();
    let i = words.iter().position(|w| *w == "he" || *w == "she")?;
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out[i] = if words[i] == "he" { "she" } else { "he" }.to_string();
    Some(out.join(" "))
}

/// Minimal-edit probe pairs in two categories: a flipped pronoun and a
/// swapped pair of adjacent middle sentences.
pub fn synthetic_probes(corpus: &Corpus, per_category: usize, seed: u64) -> Vec<EvalPair> {
    let mut out = Vec::new();
    let mut flips = 0;
    let mut swaps = 0;
    for (k, doc) in corpus.documents.iter().enumerate() {
        let mut rng = stream_rng(seed, &doc.id, 0);
        if flips < per_category {
            let candidates: Vec<usize> = (1..doc.n())
                .filter(|&i| flip_pronoun(&doc.sentences[i]).is_some())
                .collect();
            if let Some(&i) = candidates.choose(&mut rng) {
                let mut neg = doc.clone();
                neg.id = format!("{}#flip{i}", doc.id);
                neg.sentences[i] = flip_pronoun(&doc.sentences[i]).unwrap();
                out.push(EvalPair {
                    pair_id: format!("probe-flip-{k}"),
                    positive: doc.clone(),
                    negative: neg,
                    category: Some("Pronoun Gender Flip".into()),
                    annotator_labels: None,
                    tie: false,
                });
                flips += 1;
            }
        }
        if swaps < per_category {
            let i = rng.gen_range(1..doc.n() - 3);
            let mut neg = doc.clone();
            neg.id = format!("{}#swap{i}", doc.id);
            neg.sentences.swap(i, i + 1);
            out.push(EvalPair {
                pair_id: format!("probe-swap-{k}"),
                positive: doc.clone(),
                negative: neg,
                category: Some("Adjacent Event Swap".into()),
                annotator_labels: None,
                tie: false,
            });
            swaps += 1;
        }
        if flips >= per_category && swaps >= per_category {
            break;
        }
    }
    out
}

/// Attaches simulated annotator labels: each rater reports the true order
/// (`a`, the `pos` slot) with probability `1 - noise`, else `b`. Slots are
/// randomly swapped per pair so that both labels occur.
pub fn simulated_judgments(pairs: &[EvalPair], raters: usize, noise: f64, seed: u64) -> Vec<EvalPair> {
    pairs
        .iter()
        .map(|p| {
            let mut rng = stream_rng(seed, &p.pair_id, 1);
            let swapped = rng.gen_bool(0.5);
            let labels = (0..raters)
                .map(|_| {
                    let truthful = !rng.gen_bool(noise);
                    match (truthful, swapped) {
                        (true, false) | (false, true) => Label::A,
                        _ => Label::B,
                    }
                })
                .collect();
            let (a, b) = if swapped {
                (p.negative.clone(), p.positive.clone())
            } else {
                (p.positive.clone(), p.negative.clone())
            };
            EvalPair {
                pair_id: p.pair_id.clone(),
                positive: a,
                negative: b,
                category: p.category.clone(),
                annotator_labels: Some(labels),
                tie: false,
            }
        })
        .collect()
}
