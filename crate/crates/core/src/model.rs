//! The full model: encoder weights, vocabulary and the manifold head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::encoder::{self, Dropout, EncodeSession, EncoderConfig, EncoderWeights, Tokens, Vocab};
use crate::error::{Error, Result};
use crate::geometry::{self, ManifoldConfig, ManifoldKind};

/// Everything needed to rebuild a model besides its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub manifold: ManifoldConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HimModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub weights: EncoderWeights<Tensor>,
    /// Scalar tensors so the optimizer treats them like any other parameter.
    pub c: Tensor,
    pub gamma: Tensor,
}

/// Tape handles for one forward pass, in the order of [`HimModel::named`].
pub struct ModelVars {
    pub encoder: EncoderWeights<Var>,
    pub c: Var,
    pub gamma: Var,
}

impl ModelVars {
    pub fn in_order(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.named().into_iter().map(|(_, v)| *v).collect();
        out.push(self.c);
        out.push(self.gamma);
        out
    }
}

impl HimModel {
    /// Fresh weights. The encoder's `vocab_size` is set to the vocabulary size.
    pub fn new<R: Rng + ?Sized>(
        mut encoder: EncoderConfig,
        manifold: ManifoldConfig,
        vocab: Vocab,
        rng: &mut R,
    ) -> Result<Self> {
        manifold.validate()?;
        encoder.vocab_size = vocab.len();
        let weights = EncoderWeights::init(&encoder, rng)?;
        Ok(Self {
            c: Tensor::scalar(manifold.c as f32 as f64),
            gamma: Tensor::scalar(manifold.gamma as f32 as f64),
            config: ModelConfig { encoder, manifold },
            vocab,
            weights,
        })
    }

    /// Reuse trained encoder weights under a new head.
    pub fn with_manifold(mut self, manifold: ManifoldConfig) -> Result<Self> {
        manifold.validate()?;
        self.c = Tensor::scalar(manifold.c as f32 as f64);
        self.gamma = Tensor::scalar(manifold.gamma as f32 as f64);
        self.config.manifold = manifold;
        Ok(self)
    }

    /// Add the unseen words of `texts` to the vocabulary, each with a fresh
    /// embedding row. Returns how many were added.
    pub fn extend_vocab<R: Rng + ?Sized>(&mut self, texts: &[&str], rng: &mut R) -> Result<usize> {
        let mut tokens = self.vocab.tokens().to_vec();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for w in encoder::words(text) {
                if seen.insert(w.clone()) {
                    tokens.push(w);
                }
            }
        }
        let added = tokens.len() - self.vocab.len();
        if added == 0 {
            return Ok(0);
        }
        let d = self.config.encoder.d_model;
        let rows = encoder::kaiming_init(&[added, d], d, rng)?;
        let mut data = self.weights.embed.data().to_vec();
        data.extend_from_slice(rows.data());
        self.weights.embed = Tensor::new(vec![tokens.len(), d], data)?;
        self.config.encoder.vocab_size = tokens.len();
        self.vocab = Vocab::from_tokens(tokens)?;
        Ok(added)
    }

    pub fn kind(&self) -> ManifoldKind {
        self.config.manifold.kind
    }

    pub fn curvature(&self) -> f64 {
        self.c.item()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.item()
    }

    /// `(name, tensor)` for every parameter in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.weights.named();
        out.push(("head.c".into(), &self.c));
        out.push(("head.gamma".into(), &self.gamma));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.weights.values_mut();
        out.push(&mut self.c);
        out.push(&mut self.gamma);
        out
    }

    pub fn from_named(config: ModelConfig, vocab: Vocab, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = EncoderWeights::<Tensor>::n_tensors(config.encoder.n_blocks) + 2;
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} model tensors, got {}", tensors.len())));
        }
        let gamma = tensors.pop().unwrap_or_else(|| unreachable!());
        let c = tensors.pop().unwrap_or_else(|| unreachable!());
        if c.0 != "head.c" || gamma.0 != "head.gamma" || !c.1.is_scalar() || !gamma.1.is_scalar() {
            return Err(Error::Checkpoint("head tensors missing or misshapen".into()));
        }
        config.encoder.validate()?;
        config.manifold.validate()?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(Error::Checkpoint("vocabulary size disagrees with the encoder config".into()));
        }
        let template = EncoderWeights::zeros(&config.encoder);
        for ((name, t), (want_name, want)) in tensors.iter().zip(template.named()) {
            if *name != want_name || t.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        let weights = EncoderWeights::from_values(tensors.into_iter().map(|(_, t)| t).collect(), config.encoder.n_blocks)?;
        Ok(Self {
            config,
            vocab,
            weights,
            c: c.1,
            gamma: gamma.1,
        })
    }

    /// Whether `name` is updated by the optimizer under this head.
    pub fn trainable(&self, name: &str) -> bool {
        let m = &self.config.manifold;
        match name {
            "head.c" => m.kind.is_hyperbolic() && m.learn_curvature,
            "head.gamma" => m.kind.is_hyperbolic() && m.learn_scale,
            _ => true,
        }
    }

    /// Put every parameter on `t`; gradients only if `train`.
    pub fn register(&self, t: &mut Tape, train: bool) -> ModelVars {
        let encoder = self.weights.register(t, train);
        let c = t.leaf(self.c.clone(), train && self.trainable("head.c"));
        let gamma = t.leaf(self.gamma.clone(), train && self.trainable("head.gamma"));
        ModelVars { encoder, c, gamma }
    }

    pub fn tokenize(&self, text: &str) -> Tokens {
        encoder::tokenize(text, &self.vocab, self.config.encoder.max_len)
    }

    /// Pooled vector of one sequence on the tape, with optional dropout.
    pub fn pooled_tape<R: Rng>(
        &self,
        t: &mut Tape,
        vars: &ModelVars,
        tokens: &Tokens,
        dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<Var> {
        encoder::encode_tape(t, &vars.encoder, tokens, dropout)
    }

    /// Rows of pooled vectors `[B, D]` to manifold points.
    pub fn head_tape(&self, t: &mut Tape, vars: &ModelVars, pooled: Var) -> Result<Var> {
        let kind = self.kind();
        let u = geometry::diff::squash(t, pooled);
        let h = geometry::diff::norm_scale(t, kind, u, vars.gamma)?;
        geometry::diff::project(t, kind, h, vars.c)
    }

    /// Manifold point for a pooled vector, without a tape.
    pub fn head(&self, pooled: &[f64]) -> Vec<f64> {
        let kind = self.kind();
        let u: Vec<f64> = pooled.iter().map(|v| v.tanh()).collect();
        let h = geometry::norm_scale(&u, self.gamma(), kind);
        geometry::project(kind, &h, self.curvature())
    }

    /// Eval-mode pooled vectors.
    pub fn pooled(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut session = EncodeSession::new(&self.weights);
        texts.iter().map(|s| session.encode(&self.tokenize(s))).collect()
    }

    /// Eval-mode manifold points.
    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(self.pooled(texts)?.iter().map(|s| self.head(s)).collect())
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        geometry::distance(self.kind(), x, y, self.curvature())
    }

    pub fn h_norm(&self, e: &[f64]) -> Result<f64> {
        geometry::h_norm(e, self.curvature(), self.kind())
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}
