//! A small bidirectional transformer document encoder.
//!
//! Input is `[CLS] w_1 ... w_k` where each token embedding is summed with a
//! token-position embedding and a sentence-index embedding (CLS sits at
//! position 0 / sentence 0). Layers are pre-norm. The document vector `z`
//! is the mean of the final states plus the final CLS state.

use log::warn;
use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Mat, Tape, Var};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::scorer::{Backbone, EncoderForward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Hash buckets for word ids; bucket 0 is reserved for CLS.
    pub vocab_size: usize,
    pub max_positions: usize,
    pub max_sentences: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Applied to attention and feed-forward outputs in training mode only.
    pub dropout: f64,
    /// When false, token and sentence positions are not embedded and the
    /// encoder becomes order-invariant.
    pub position_info: bool,
}

impl TransformerConfig {
    pub fn tiny(layers: usize, dim: usize) -> Self {
        TransformerConfig {
            vocab_size: 1024,
            max_positions: 256,
            max_sentences: 32,
            dim,
            layers,
            heads: if dim % 4 == 0 { 4 } else { 1 },
            ffn_dim: dim * 4,
            dropout: 0.0,
            position_info: true,
        }
    }

    /// Shape of the base-size pretrained backbone.
    pub fn base() -> Self {
        TransformerConfig {
            vocab_size: 32000,
            max_positions: 1024,
            max_sentences: 128,
            dim: 768,
            layers: 12,
            heads: 12,
            ffn_dim: 3072,
            dropout: 0.1,
            position_info: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("transformer config: {m}")));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.vocab_size < 2 || self.max_positions < 2 || self.max_sentences < 2 {
            return bad("vocab/positions/sentences too small");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// FNV-1a, so word ids do not depend on the standard library's hasher.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn word_pieces(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    config: TransformerConfig,
    name: String,
}

impl TransformerEncoder {
    pub fn new(config: TransformerConfig, name: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(TransformerEncoder {
            config,
            name: name.into(),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Parameter index layout; must match `init_params`.
    fn layout(&self) -> (usize, usize, usize, Vec<LayerIdx>, usize, usize) {
        let mut i = 3;
        let layers = (0..self.config.layers)
            .map(|_| {
                let l = LayerIdx {
                    ln1_g: i,
                    ln1_b: i + 1,
                    wqkv: i + 2,
                    bqkv: i + 3,
                    wo: i + 4,
                    bo: i + 5,
                    ln2_g: i + 6,
                    ln2_b: i + 7,
                    w1: i + 8,
                    b1: i + 9,
                    w2: i + 10,
                    b2: i + 11,
                };
                i += 12;
                l
            })
            .collect();
        (0, 1, 2, layers, i, i + 1)
    }

    /// Word-piece ids with CLS prepended, plus position and sentence indices.
    fn inputs(&self, doc: &Document) -> (Vec<usize>, Vec<usize>, Vec<usize>, bool) {
        let c = &self.config;
        let mut ids = vec![0];
        let mut pos = vec![0];
        let mut sent = vec![0];
        let mut truncated = false;
        'outer: for (si, s) in doc.sentences.iter().enumerate() {
            for w in word_pieces(s) {
                if ids.len() >= c.max_positions {
                    truncated = true;
                    break 'outer;
                }
                ids.push(1 + (fnv1a(&w) % (c.vocab_size as u64 - 1)) as usize);
                pos.push(ids.len() - 1);
                sent.push((si + 1).min(c.max_sentences - 1));
            }
        }
        (ids, pos, sent, truncated)
    }
}

fn uniform(rng: &mut impl Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

impl Backbone for TransformerEncoder {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let c = &self.config;
        let d = c.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xavier = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let mut p = ParamSet::default();
        p.push("embed.tokens", uniform(&mut rng, (c.vocab_size, d), 0.5));
        p.push("embed.positions", uniform(&mut rng, (c.max_positions, d), 0.5));
        p.push("embed.sentences", uniform(&mut rng, (c.max_sentences, d), 0.5));
        for l in 0..c.layers {
            p.push(format!("layer{l}.ln1.gain"), Array2::ones((1, d)));
            p.push(format!("layer{l}.ln1.bias"), Array2::zeros((1, d)));
            p.push(format!("layer{l}.attn.wqkv"), uniform(&mut rng, (d, 3 * d), xavier(d, d)));
            p.push(format!("layer{l}.attn.bqkv"), Array2::zeros((1, 3 * d)));
            p.push(format!("layer{l}.attn.wo"), uniform(&mut rng, (d, d), xavier(d, d)));
            p.push(format!("layer{l}.attn.bo"), Array2::zeros((1, d)));
            p.push(format!("layer{l}.ln2.gain"), Array2::ones((1, d)));
            p.push(format!("layer{l}.ln2.bias"), Array2::zeros((1, d)));
            p.push(format!("layer{l}.ffn.w1"), uniform(&mut rng, (d, c.ffn_dim), xavier(d, c.ffn_dim)));
            p.push(format!("layer{l}.ffn.b1"), Array2::zeros((1, c.ffn_dim)));
            p.push(format!("layer{l}.ffn.w2"), uniform(&mut rng, (c.ffn_dim, d), xavier(d, c.ffn_dim)));
            p.push(format!("layer{l}.ffn.b2"), Array2::zeros((1, d)));
        }
        p.push("final_ln.gain", Array2::ones((1, d)));
        p.push("final_ln.bias", Array2::zeros((1, d)));
        p
    }

    fn forward(
        &self,
        params: &ParamSet,
        doc: &Document,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderForward> {
        doc.validate()?;
        let c = &self.config;
        let (tok, posi, senti, layers, fg, fb) = self.layout();
        if params.len() != fb + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                fb + 1,
                params.len()
            )));
        }
        let (ids, pos, sent, truncated) = self.inputs(doc);
        if truncated {
            warn!(
                "{}: exceeds the {}-token window, encoding a truncated prefix",
                doc.id, c.max_positions
            );
        }
        let hd = c.dim / c.heads;
        let att_scale = 1.0 / (hd as f64).sqrt();
        let p_drop = if dropout_rng.is_some() { c.dropout } else { 0.0 };

        let mut t = Tape::new();
        let mut x = t.gather(params, tok, &ids);
        if c.position_info {
            let pe = t.gather(params, posi, &pos);
            let se = t.gather(params, senti, &sent);
            x = t.add(x, pe);
            x = t.add(x, se);
        }
        let rows = ids.len();
        for l in &layers {
            let h = layer_norm(&mut t, params, x, l.ln1_g, l.ln1_b);
            let wqkv = t.param(params, l.wqkv);
            let bqkv = t.param(params, l.bqkv);
            let qkv = t.matmul(h, wqkv);
            let qkv = t.add_row(qkv, bqkv);
            let heads: Vec<Var> = (0..c.heads)
                .map(|i| {
                    let q = t.col_slice(qkv, i * hd, hd);
                    let k = t.col_slice(qkv, c.dim + i * hd, hd);
                    let v = t.col_slice(qkv, 2 * c.dim + i * hd, hd);
                    let scores = t.matmul_t(q, k);
                    let scores = t.scale(scores, att_scale);
                    let att = t.softmax_rows(scores);
                    t.matmul(att, v)
                })
                .collect();
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                t.col_concat(&heads)
            };
            let wo = t.param(params, l.wo);
            let bo = t.param(params, l.bo);
            let o = t.matmul(ctx, wo);
            let mut o = t.add_row(o, bo);
            if let (Some(rng), true) = (dropout_rng.as_deref_mut(), p_drop > 0.0) {
                o = t.dropout(o, dropout_mask(rng, (rows, c.dim), p_drop));
            }
            x = t.add(x, o);

            let h = layer_norm(&mut t, params, x, l.ln2_g, l.ln2_b);
            let w1 = t.param(params, l.w1);
            let b1 = t.param(params, l.b1);
            let w2 = t.param(params, l.w2);
            let b2 = t.param(params, l.b2);
            let f = t.matmul(h, w1);
            let f = t.add_row(f, b1);
            let f = t.gelu(f);
            let f = t.matmul(f, w2);
            let mut f = t.add_row(f, b2);
            if let (Some(rng), true) = (dropout_rng.as_deref_mut(), p_drop > 0.0) {
                f = t.dropout(f, dropout_mask(rng, (rows, c.dim), p_drop));
            }
            x = t.add(x, f);
        }
        let states = layer_norm(&mut t, params, x, fg, fb);
        let mean = t.mean_rows(states);
        let cls = t.row(states, 0);
        let z = t.add(mean, cls);
        Ok(EncoderForward::new(t, z, states, truncated))
    }
}

fn layer_norm(t: &mut Tape, params: &ParamSet, x: Var, gain: usize, bias: usize) -> Var {
    let n = t.normalize(x);
    let g = t.param(params, gain);
    let b = t.param(params, bias);
    let n = t.mul_row(n, g);
    t.add_row(n, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(sentences: &[&str]) -> Document {
        Document::new("d", sentences.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let enc = TransformerEncoder::new(TransformerConfig::tiny(2, 32), "tiny").unwrap();
        assert_eq!(enc.init_params(7), enc.init_params(7));
        assert_ne!(enc.init_params(7), enc.init_params(8));
    }

    #[test]
    fn forward_is_deterministic_in_inference() {
        let enc = TransformerEncoder::new(TransformerConfig::tiny(2, 16), "tiny").unwrap();
        let p = enc.init_params(1);
        let d = doc(&["The cat sat.", "It was warm.", "Then it slept.", "The end."]);
        let a = enc.forward(&p, &d, None).unwrap().z();
        let b = enc.forward(&p, &d, None).unwrap().z();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn order_matters_with_positions() {
        let enc = TransformerEncoder::new(TransformerConfig::tiny(1, 16), "tiny").unwrap();
        let p = enc.init_params(3);
        let a = doc(&["One.", "Two words.", "Three more words.", "Four."]);
        let b = doc(&["Four.", "Three more words.", "Two words.", "One."]);
        assert_ne!(enc.forward(&p, &a, None).unwrap().z(), enc.forward(&p, &b, None).unwrap().z());
    }

    #[test]
    fn order_invariant_without_positions() {
        let mut cfg = TransformerConfig::tiny(1, 16);
        cfg.position_info = false;
        let enc = TransformerEncoder::new(cfg, "tiny").unwrap();
        let p = enc.init_params(3);
        let a = doc(&["One.", "Two words.", "Three more words.", "Four."]);
        let b = doc(&["Four.", "Three more words.", "Two words.", "One."]);
        let za = enc.forward(&p, &a, None).unwrap().z();
        let zb = enc.forward(&p, &b, None).unwrap().z();
        for (x, y) in za.iter().zip(&zb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn long_documents_are_truncated() {
        let mut cfg = TransformerConfig::tiny(1, 8);
        cfg.max_positions = 6;
        let enc = TransformerEncoder::new(cfg, "tiny").unwrap();
        let p = enc.init_params(0);
        let d = doc(&["a b c", "d e f", "g h i"]);
        let f = enc.forward(&p, &d, None).unwrap();
        assert!(f.truncated);
        assert_eq!(f.token_reps().nrows(), 6);
    }

    #[test]
    fn dropout_only_in_training() {
        let mut cfg = TransformerConfig::tiny(1, 8);
        cfg.dropout = 0.5;
        let enc = TransformerEncoder::new(cfg, "tiny").unwrap();
        let p = enc.init_params(0);
        let d = doc(&["a b c", "d e f"]);
        let inf = enc.forward(&p, &d, None).unwrap().z();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = enc.forward(&p, &d, Some(&mut rng)).unwrap().z();
        assert_ne!(inf, train);
        assert_eq!(inf, enc.forward(&p, &d, None).unwrap().z());
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = TransformerConfig::tiny(1, 10);
        cfg.heads = 3;
        assert!(TransformerEncoder::new(cfg, "x").is_err());
    }
}
