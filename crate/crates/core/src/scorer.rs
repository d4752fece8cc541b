//! The coherence scorer: a pluggable document encoder `φ` producing a
//! representation `z`, and a linear head giving `f(D) = w·z + b`.

use std::fmt::Debug;
use std::path::PathBuf;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::nn::{Mat, ParamSet, Tape, TransformerConfig, TransformerEncoder, Var};

/// A document encoder architecture. Parameters live outside the backbone so
/// the same architecture can run the base and the momentum encoder.
pub trait Backbone: Send + Sync + Debug {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn config_json(&self) -> serde_json::Value;
    fn init_params(&self, seed: u64) -> ParamSet;
    /// Encodes `doc`. Stochastic layers are active only when `dropout_rng`
    /// is given.
    fn forward(
        &self,
        params: &ParamSet,
        doc: &Document,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderForward>;
}

/// A recorded encoder forward pass that can be back-propagated.
#[derive(Debug)]
pub struct EncoderForward {
    tape: Tape,
    z: Var,
    states: Var,
    pub truncated: bool,
}

impl EncoderForward {
    pub fn new(tape: Tape, z: Var, states: Var, truncated: bool) -> Self {
        EncoderForward {
            tape,
            z,
            states,
            truncated,
        }
    }

    pub fn z(&self) -> Vec<f64> {
        self.tape.value(self.z).iter().copied().collect()
    }

    pub fn token_reps(&self) -> &Mat {
        self.tape.value(self.states)
    }

    pub fn output(&self) -> EncoderOutput {
        EncoderOutput {
            z: self.z(),
            token_reps: Some(self.token_reps().clone()),
        }
    }

    /// Accumulates `dL/dφ` given `dL/dz` into `grads`.
    pub fn backward(&self, dz: &[f64], grads: &mut ParamSet) {
        let seed = Mat::from_shape_vec((1, dz.len()), dz.to_vec()).expect("dz is a row");
        self.tape.backward(self.z, &seed, grads);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z: Vec<f64>,
    pub token_reps: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearHead {
    pub fn apply(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                got: z.len(),
            });
        }
        Ok(self.w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CoherenceScore(pub f64);

impl CoherenceScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Anything that assigns a coherence score to a document.
pub trait DocumentScorer: Sync {
    fn score_doc(&self, doc: &Document) -> Result<f64>;
}

/// Adapts a closure into a [`DocumentScorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&Document) -> f64 + Sync> DocumentScorer for FnScorer<F> {
    fn score_doc(&self, doc: &Document) -> Result<f64> {
        Ok((self.0)(doc))
    }
}

/// θ = {φ, w, b} together with the encoder architecture.
#[derive(Debug, Clone)]
pub struct CoherenceScorer {
    backbone: Arc<dyn Backbone>,
    pub encoder: ParamSet,
    pub head: LinearHead,
}

/// Gradients with respect to every trainable part of a scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerGrads {
    pub encoder: ParamSet,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl ScorerGrads {
    pub fn l2_norm(&self) -> f64 {
        let e = self.encoder.l2_norm();
        (e * e + self.head_w.iter().map(|x| x * x).sum::<f64>() + self.head_b * self.head_b).sqrt()
    }
}

/// A training-mode forward pass for one document.
#[derive(Debug)]
pub struct ScoredForward {
    pub forward: EncoderForward,
    pub z: Vec<f64>,
    pub score: f64,
}

impl CoherenceScorer {
    /// Fresh scorer with seeded encoder and head initialization.
    pub fn new(backbone: Arc<dyn Backbone>, seed: u64) -> Self {
        let encoder = backbone.init_params(seed);
        Self::with_encoder(backbone, encoder, seed)
    }

    pub fn with_encoder(backbone: Arc<dyn Backbone>, encoder: ParamSet, seed: u64) -> Self {
        let d = backbone.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = (0..d).map(|_| dist.sample(&mut rng)).collect();
        CoherenceScorer {
            backbone,
            encoder,
            head: LinearHead { w, b: 0.0 },
        }
    }

    pub fn from_parts(backbone: Arc<dyn Backbone>, encoder: ParamSet, head: LinearHead) -> Result<Self> {
        if head.w.len() != backbone.dim() {
            return Err(Error::DimensionMismatch {
                expected: backbone.dim(),
                got: head.w.len(),
            });
        }
        let expected = backbone.init_params(0);
        encoder.check_compatible(&expected)?;
        Ok(CoherenceScorer {
            backbone,
            encoder,
            head,
        })
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim()
    }

    /// Inference-mode encoding.
    pub fn encode(&self, doc: &Document) -> Result<EncoderOutput> {
        Ok(self.backbone.forward(&self.encoder, doc, None)?.output())
    }

    /// Encodes with an arbitrary parameter set of this architecture (used by
    /// the momentum encoder).
    pub fn encode_with(&self, params: &ParamSet, doc: &Document) -> Result<Vec<f64>> {
        Ok(self.backbone.forward(params, doc, None)?.z())
    }

    pub fn score(&self, doc: &Document) -> Result<CoherenceScore> {
        let z = self.backbone.forward(&self.encoder, doc, None)?.z();
        let s = self.head.apply(&z)?;
        if !s.is_finite() {
            return Err(Error::NonFinite("coherence score"));
        }
        Ok(CoherenceScore(s))
    }

    pub fn forward_train(
        &self,
        doc: &Document,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ScoredForward> {
        let forward = self.backbone.forward(&self.encoder, doc, dropout_rng)?;
        let z = forward.z();
        let score = self.head.apply(&z)?;
        Ok(ScoredForward { forward, z, score })
    }

    pub fn zero_grads(&self) -> ScorerGrads {
        ScorerGrads {
            encoder: self.encoder.zeros_like(),
            head_w: vec![0.0; self.dim()],
            head_b: 0.0,
        }
    }

    /// Back-propagates `dL/dscore` (and optionally an extra `dL/dz`) of one
    /// forward pass. With `train_encoder == false` only `w` and `b` receive
    /// gradient.
    pub fn backprop(
        &self,
        fwd: &ScoredForward,
        dscore: f64,
        dz_extra: Option<&[f64]>,
        grads: &mut ScorerGrads,
        train_encoder: bool,
    ) {
        for (g, z) in grads.head_w.iter_mut().zip(&fwd.z) {
            *g += dscore * z;
        }
        grads.head_b += dscore;
        if train_encoder {
            let mut dz: Vec<f64> = self.head.w.iter().map(|w| dscore * w).collect();
            if let Some(extra) = dz_extra {
                for (a, b) in dz.iter_mut().zip(extra) {
                    *a += b;
                }
            }
            fwd.forward.backward(&dz, &mut grads.encoder);
        }
    }
}

impl DocumentScorer for CoherenceScorer {
    fn score_doc(&self, doc: &Document) -> Result<f64> {
        self.score(doc).map(CoherenceScore::value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneKind {
    /// A pretrained base-size transformer whose weights are loaded from
    /// `weights_dir` (written by `checkpoint::save_encoder`).
    Pretrained { weights_dir: PathBuf },
    /// A small randomly initialized transformer.
    Tiny(TransformerConfig),
}

/// A backbone plus, for pretrained kinds, its loaded weights.
#[derive(Debug, Clone)]
pub struct LoadedBackbone {
    pub backbone: Arc<dyn Backbone>,
    pub weights: Option<ParamSet>,
}

pub fn make_backbone(kind: &BackboneKind) -> Result<LoadedBackbone> {
    match kind {
        BackboneKind::Tiny(cfg) => Ok(LoadedBackbone {
            backbone: Arc::new(TransformerEncoder::new(cfg.clone(), "tiny-transformer")?),
            weights: None,
        }),
        BackboneKind::Pretrained { weights_dir } => {
            if !weights_dir.join(crate::checkpoint::ENCODER_CONFIG).exists() {
                return Err(Error::BackboneUnavailable(format!(
                    "no pretrained weights at {}",
                    weights_dir.display()
                )));
            }
            let (backbone, weights) = crate::checkpoint::load_encoder(weights_dir)?;
            Ok(LoadedBackbone {
                backbone,
                weights: Some(weights),
            })
        }
    }
}

/// Parses a backbone kind name from configuration (`tiny` or `pretrained`).
pub fn backbone_kind_from_name(
    name: &str,
    tiny: TransformerConfig,
    weights_dir: Option<PathBuf>,
) -> Result<BackboneKind> {
    match name {
        "tiny" => Ok(BackboneKind::Tiny(tiny)),
        "pretrained" => Ok(BackboneKind::Pretrained {
            weights_dir: weights_dir.unwrap_or_default(),
        }),
        other => Err(Error::UnknownBackbone(other.to_string())),
    }
}

/// Rebuilds a backbone from its id and configuration JSON.
pub fn backbone_from_json(id: &str, config: &serde_json::Value) -> Result<Arc<dyn Backbone>> {
    let cfg: TransformerConfig = serde_json::from_value(config.clone())?;
    Ok(Arc::new(TransformerEncoder::new(cfg, id)?))
}
