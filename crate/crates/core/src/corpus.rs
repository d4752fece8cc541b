//! Corpus ingestion and preprocessing: length filtering, sentence-granular
//! truncation, and block partitioning of long documents.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of sentences a document needs to be used at all.
pub const MIN_SENTENCES: usize = 4;
/// Token budget for a single document.
pub const MAX_TOKENS: usize = 600;
/// Documents with at least this many sentences are split into blocks.
pub const BLOCK_THRESHOLD: usize = 20;
pub const BLOCK_SIZE: usize = 10;

/// An ordered list of sentences with a stable identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<String>,
}

impl Document {
    /// Builds a document, rejecting empty documents and blank sentences.
    pub fn new(id: impl Into<String>, sentences: Vec<String>) -> Result<Self> {
        let doc = Document {
            id: id.into(),
            sentences,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::InvalidDocument {
                id: self.id.clone(),
                reason: "no sentences".into(),
            });
        }
        if let Some(i) = self.sentences.iter().position(|s| s.trim().is_empty()) {
            return Err(Error::InvalidDocument {
                id: self.id.clone(),
                reason: format!("sentence {i} is empty"),
            });
        }
        Ok(())
    }

    /// Number of sentences.
    pub fn n(&self) -> usize {
        self.sentences.len()
    }

    pub fn token_count(&self, tokenizer: &dyn Tokenizer) -> usize {
        self.sentences.iter().map(|s| tokenizer.count(s)).sum()
    }

    /// Reorders sentences according to `order` (a permutation of `0..n`).
    pub fn reordered(&self, order: &[usize], id: impl Into<String>) -> Document {
        Document {
            id: id.into(),
            sentences: order.iter().map(|&i| self.sentences[i].clone()).collect(),
        }
    }
}

/// Splits sentences into tokens. The backbone's own tokenizer can be plugged
/// in; [`WhitespaceTokenizer`] is the fallback.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, sentence: &'a str) -> Vec<&'a str>;

    fn count(&self, sentence: &str) -> usize {
        self.tokenize(sentence).len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize<'a>(&self, sentence: &'a str) -> Vec<&'a str> {
        sentence.split_whitespace().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub split: Split,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, split: Split) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::InvalidDocument {
                    id: d.id.clone(),
                    reason: "duplicate id in corpus".into(),
                });
            }
        }
        Ok(Corpus { documents, split })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Writes the corpus as JSON-lines, one document per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(&serde_json::to_string(d)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// `{"id": ..., "sentences": [...]}` per line.
    Jsonl,
    /// Documents separated by blank lines, one sentence per line.
    Text,
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    /// Malformed records that were skipped.
    pub skipped: usize,
}

pub fn load_corpus(path: &Path, format: CorpusFormat, split: Split) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (documents, skipped) = match format {
        CorpusFormat::Jsonl => parse_jsonl(&text, path),
        CorpusFormat::Text => parse_text(&text, path),
    };
    Ok(LoadedCorpus {
        corpus: Corpus { documents, split },
        skipped,
    })
}

fn parse_jsonl(text: &str, path: &Path) -> (Vec<Document>, usize) {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Document>(line)
            .map_err(|e| e.to_string())
            .and_then(|d| d.validate().map(|_| d).map_err(|e| e.to_string()))
            .and_then(|d| {
                if seen.contains(&d.id) {
                    Err(format!("duplicate id {}", d.id))
                } else {
                    Ok(d)
                }
            });
        match parsed {
            Ok(d) => {
                seen.insert(d.id.clone());
                docs.push(d);
            }
            Err(e) => {
                warn!("{}:{}: skipping malformed record: {e}", path.display(), lineno + 1);
                skipped += 1;
            }
        }
    }
    (docs, skipped)
}

fn parse_text(text: &str, path: &Path) -> (Vec<Document>, usize) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "doc".into());
    let mut docs = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut flush = |current: &mut Vec<String>| {
        if !current.is_empty() {
            let id = format!("{stem}-{}", docs.len());
            docs.push(Document {
                id,
                sentences: std::mem::take(current),
            });
        }
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            flush(&mut current);
        } else {
            current.push(line.to_string());
        }
    }
    flush(&mut current);
    (docs, 0)
}

/// Drops short documents and truncates long ones to the token budget by
/// removing trailing whole sentences. Returns `None` when the document has
/// (or ends up with) fewer than `min_sentences` sentences.
pub fn preprocess(
    doc: &Document,
    min_sentences: usize,
    max_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Option<Document> {
    if doc.n() < min_sentences {
        return None;
    }
    let mut total = 0;
    let mut keep = 0;
    for s in &doc.sentences {
        let c = tokenizer.count(s);
        if total + c > max_tokens {
            break;
        }
        total += c;
        keep += 1;
    }
    if keep < min_sentences {
        return None;
    }
    Some(Document {
        id: doc.id.clone(),
        sentences: doc.sentences[..keep].to_vec(),
    })
}

/// Splits documents with at least `threshold` sentences into consecutive
/// blocks of `block_size`. A trailing remainder is kept as its own block if
/// it has at least `min_sentences` sentences.
pub fn partition_blocks(
    doc: &Document,
    threshold: usize,
    block_size: usize,
    min_sentences: usize,
) -> Vec<Document> {
    if doc.n() < threshold || block_size == 0 {
        return vec![doc.clone()];
    }
    doc.sentences
        .chunks(block_size)
        .filter(|chunk| chunk.len() == block_size || chunk.len() >= min_sentences)
        .enumerate()
        .map(|(i, chunk)| Document {
            id: format!("{}#b{i}", doc.id),
            sentences: chunk.to_vec(),
        })
        .collect()
}

/// Preprocess + partition every document, keeping only usable positives.
pub fn prepare_corpus(corpus: &Corpus, tokenizer: &dyn Tokenizer) -> Corpus {
    let documents = corpus
        .documents
        .iter()
        .filter_map(|d| preprocess(d, MIN_SENTENCES, MAX_TOKENS, tokenizer))
        .flat_map(|d| partition_blocks(&d, BLOCK_THRESHOLD, BLOCK_SIZE, MIN_SENTENCES))
        .collect();
    Corpus {
        documents,
        split: corpus.split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn doc(n: usize) -> Document {
        Document::new("d", (0..n).map(|i| format!("sentence number {i}")).collect()).unwrap()
    }

    fn doc_with_tokens(counts: &[usize]) -> Document {
        let sentences = counts
            .iter()
            .map(|&c| vec!["w"; c].join(" "))
            .collect();
        Document::new("t", sentences).unwrap()
    }

    #[test]
    fn rejects_blank_sentences() {
        assert!(Document::new("x", vec!["ok".into(), "   ".into()]).is_err());
        assert!(Document::new("x", vec![]).is_err());
    }

    #[test]
    fn loads_valid_jsonl() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..3 {
            writeln!(f, r#"{{"id": "d{i}", "sentences": ["a.", "b."]}}"#).unwrap();
        }
        let loaded = load_corpus(f.path(), CorpusFormat::Jsonl, Split::Train).unwrap();
        assert_eq!(loaded.corpus.len(), 3);
        assert_eq!(loaded.skipped, 0);
    }

    #[test]
    fn skips_malformed_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id": "a", "sentences": ["x."]}}"#).unwrap();
        writeln!(f, r#"{{"id": "b", "sentences": "#).unwrap();
        writeln!(f, r#"{{"id": "c", "sentences": ["y."]}}"#).unwrap();
        let loaded = load_corpus(f.path(), CorpusFormat::Jsonl, Split::Train).unwrap();
        assert_eq!(loaded.corpus.len(), 2);
        assert_eq!(loaded.skipped, 1);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let loaded = load_corpus(f.path(), CorpusFormat::Jsonl, Split::Dev).unwrap();
        assert!(loaded.corpus.is_empty());
        assert_eq!(loaded.skipped, 0);
    }

    #[test]
    fn missing_file_is_fatal() {
        let r = load_corpus(Path::new("/nonexistent/x.jsonl"), CorpusFormat::Jsonl, Split::Dev);
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn loads_plain_text_blocks() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "a.\nb.\n\n\nc.\nd.\ne.\n").unwrap();
        let loaded = load_corpus(f.path(), CorpusFormat::Text, Split::Train).unwrap();
        assert_eq!(loaded.corpus.len(), 2);
        assert_eq!(loaded.corpus.documents[1].sentences, vec!["c.", "d.", "e."]);
    }

    #[test]
    fn preprocess_drops_short_documents() {
        assert!(preprocess(&doc(3), 4, 600, &WhitespaceTokenizer).is_none());
    }

    #[test]
    fn preprocess_keeps_documents_under_limits() {
        let d = doc_with_tokens(&[40; 10]);
        assert_eq!(preprocess(&d, 4, 600, &WhitespaceTokenizer), Some(d));
    }

    #[test]
    fn preprocess_truncates_whole_sentences() {
        // 8 sentences, 700 tokens; the first six sum to 590.
        let d = doc_with_tokens(&[100, 100, 100, 100, 100, 90, 60, 50]);
        assert_eq!(d.token_count(&WhitespaceTokenizer), 700);
        let out = preprocess(&d, 4, 600, &WhitespaceTokenizer).unwrap();
        assert_eq!(out.n(), 6);
        assert_eq!(out.token_count(&WhitespaceTokenizer), 590);
    }

    #[test]
    fn preprocess_drops_when_truncation_leaves_too_few() {
        let d = doc_with_tokens(&[300, 250, 100, 10, 10]);
        assert!(preprocess(&d, 4, 600, &WhitespaceTokenizer).is_none());
    }

    #[test]
    fn partition_below_threshold_is_identity() {
        let d = doc(19);
        assert_eq!(partition_blocks(&d, 20, 10, 4), vec![d]);
    }

    #[test]
    fn partition_exact_multiple() {
        let blocks = partition_blocks(&doc(20), 20, 10, 4);
        assert_eq!(blocks.iter().map(Document::n).collect::<Vec<_>>(), vec![10, 10]);
        assert_eq!(blocks[1].id, "d#b1");
    }

    #[test]
    fn partition_keeps_long_remainder() {
        let blocks = partition_blocks(&doc(25), 20, 10, 4);
        assert_eq!(blocks.iter().map(Document::n).collect::<Vec<_>>(), vec![10, 10, 5]);
    }

    #[test]
    fn partition_drops_short_remainder() {
        let blocks = partition_blocks(&doc(23), 20, 10, 4);
        assert_eq!(blocks.iter().map(Document::n).collect::<Vec<_>>(), vec![10, 10]);
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(counts in prop::collection::vec(1usize..200, 1..30)) {
            let d = doc_with_tokens(&counts);
            let once = preprocess(&d, 4, 600, &WhitespaceTokenizer);
            if let Some(ref p) = once {
                prop_assert_eq!(preprocess(p, 4, 600, &WhitespaceTokenizer), once.clone());
                prop_assert!(d.sentences.starts_with(&p.sentences));
            }
        }

        #[test]
        fn partition_is_ordered_prefix(n in 1usize..80) {
            let d = doc(n);
            let blocks = partition_blocks(&d, 20, 10, 4);
            let flat: Vec<String> = blocks.iter().flat_map(|b| b.sentences.clone()).collect();
            prop_assert!(d.sentences.starts_with(&flat));
            prop_assert!(d.n() - flat.len() < 4);
        }
    }
}
