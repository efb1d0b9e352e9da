//! Sentence encoder: word-level tokenizer, a stack of Mamba2 blocks with a
//! recurrent scan and an SSD (dense dual) reference path, and masked mean
//! pooling.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const RMS_EPS: f64 = 1e-6;

/// Largest sequence length [`ssd_dense`] will materialize an `L×L` matrix for.
pub const SSD_MAX_LEN: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Maximum sequence length in tokens.
    pub max_len: usize,
    pub d_model: usize,
    /// Width of the input projection; split in half into `x′` and `z′`.
    pub d_inner: usize,
    pub d_state: usize,
    pub n_blocks: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30_000,
            max_len: 128,
            d_model: 384,
            d_inner: 768,
            d_state: 96,
            n_blocks: 4,
            conv_kernel: 4,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    /// Small profile that trains on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            vocab_size: 4096,
            max_len: 32,
            d_model: 64,
            d_inner: 128,
            d_state: 16,
            n_blocks: 2,
            conv_kernel: 4,
            dropout: 0.2,
        }
    }

    /// Channels of `x′` (and `z′`).
    pub fn d_half(&self) -> usize {
        self.d_inner / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.n_blocks == 0 || self.max_len == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.d_inner != 2 * self.d_model {
            return Err(Error::invalid(format!(
                "d_inner must be 2·d_model ({}), got {}",
                2 * self.d_model,
                self.d_inner
            )));
        }
        if self.conv_kernel == 0 {
            return Err(Error::invalid("conv_kernel must be positive"));
        }
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocab_size must leave room for pad, unk and a word"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Word-level vocabulary. Id 0 is padding, id 1 is the unknown token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl Vocab {
    /// Rebuild from the full id→token list (including the two specials).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(Error::invalid("vocabulary must start with <pad>, <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|ch: char| !ch.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Most-frequent-first word vocabulary of at most `max_size` words plus the
/// two specials. Ties are broken alphabetically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in words(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(ranked.into_iter().map(|(w, _)| w));
    Vocab::from_tokens(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Tokens {
    pub fn n_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Word ids truncated or padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Tokens {
    let mut ids: Vec<u32> = words(text).take(max_len).map(|w| vocab.id(&w)).collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, false);
    Tokens { ids, mask }
}

/// Draws from `N(0, 2/fan_in)`, rounded to f32 precision so checkpoints are exact.
pub fn kaiming_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::invalid("kaiming_init needs fan_in > 0"));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32 as f64).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Parameters of one block. Generic so the same layout can hold tensors,
/// tape handles or optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mamba2<T> {
    pub norm_gain: T,
    /// `[D, I]`
    pub w_in: T,
    pub b_in: T,
    /// `[K, I/2]`
    pub conv: T,
    /// `[I/2, 1]`, with scalar bias `b_a`
    pub w_a: T,
    pub b_a: T,
    /// `[I/2, N]`
    pub w_b: T,
    pub w_c: T,
    /// `[D, I]`
    pub w_g: T,
    pub b_g: T,
    /// `[I, D]`
    pub w_out: T,
    pub b_out: T,
}

pub type Mamba2Params = Mamba2<Tensor>;

pub const BLOCK_FIELDS: [&str; 12] = [
    "norm_gain", "w_in", "b_in", "conv", "w_a", "b_a", "w_b", "w_c", "w_g", "b_g", "w_out", "b_out",
];

impl<T> Mamba2<T> {
    pub fn fields(&self) -> [&T; 12] {
        [
            &self.norm_gain, &self.w_in, &self.b_in, &self.conv, &self.w_a, &self.b_a,
            &self.w_b, &self.w_c, &self.w_g, &self.b_g, &self.w_out, &self.b_out,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.norm_gain, &mut self.w_in, &mut self.b_in, &mut self.conv, &mut self.w_a,
            &mut self.b_a, &mut self.w_b, &mut self.w_c, &mut self.w_g, &mut self.b_g,
            &mut self.w_out, &mut self.b_out,
        ]
    }

    pub fn from_fields(f: [T; 12]) -> Self {
        let [norm_gain, w_in, b_in, conv, w_a, b_a, w_b, w_c, w_g, b_g, w_out, b_out] = f;
        Self { norm_gain, w_in, b_in, conv, w_a, b_a, w_b, w_c, w_g, b_g, w_out, b_out }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Mamba2<U> {
        let fs = self.fields();
        Mamba2::from_fields(std::array::from_fn(|i| f(BLOCK_FIELDS[i], fs[i])))
    }
}

impl Mamba2Params {
    /// Kaiming-normal weights, zero biases, unit norm gain.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let (d, i, p, n) = (cfg.d_model, cfg.d_inner, cfg.d_half(), cfg.d_state);
        Ok(Self {
            norm_gain: Tensor::full(&[d], 1.0),
            w_in: kaiming_init(&[d, i], d, rng)?,
            b_in: Tensor::zeros(&[i]),
            conv: kaiming_init(&[cfg.conv_kernel, p], cfg.conv_kernel, rng)?,
            w_a: kaiming_init(&[p, 1], p, rng)?,
            b_a: Tensor::zeros(&[1]),
            w_b: kaiming_init(&[p, n], p, rng)?,
            w_c: kaiming_init(&[p, n], p, rng)?,
            w_g: kaiming_init(&[d, i], d, rng)?,
            b_g: Tensor::zeros(&[i]),
            w_out: kaiming_init(&[i, d], i, rng)?,
            b_out: Tensor::zeros(&[d]),
        })
    }

    /// Every weight and bias zero, unit gain.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, i, p, n) = (cfg.d_model, cfg.d_inner, cfg.d_half(), cfg.d_state);
        Self {
            norm_gain: Tensor::full(&[d], 1.0),
            w_in: Tensor::zeros(&[d, i]),
            b_in: Tensor::zeros(&[i]),
            conv: Tensor::zeros(&[cfg.conv_kernel, p]),
            w_a: Tensor::zeros(&[p, 1]),
            b_a: Tensor::zeros(&[1]),
            w_b: Tensor::zeros(&[p, n]),
            w_c: Tensor::zeros(&[p, n]),
            w_g: Tensor::zeros(&[d, i]),
            b_g: Tensor::zeros(&[i]),
            w_out: Tensor::zeros(&[i, d]),
            b_out: Tensor::zeros(&[d]),
        }
    }
}

/// Token embedding table, the block stack and the final norm gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights<T> {
    pub embed: T,
    pub blocks: Vec<Mamba2<T>>,
    pub norm_f: T,
}

impl<T> EncoderWeights<T> {
    /// `(name, value)` in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (b, blk) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(blk.fields()) {
                out.push((format!("blocks.{b}.{name}"), t));
            }
        }
        out.push(("norm_f".to_string(), &self.norm_f));
        out
    }

    pub fn n_tensors(n_blocks: usize) -> usize {
        2 + 12 * n_blocks
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed];
        for blk in &mut self.blocks {
            out.extend(blk.fields_mut());
        }
        out.push(&mut self.norm_f);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            embed: f("embed", &self.embed),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            norm_f: f("norm_f", &self.norm_f),
        }
    }

    /// Rebuild from values in the order of [`EncoderWeights::named`].
    pub fn from_values(values: Vec<T>, n_blocks: usize) -> Result<Self> {
        if values.len() != Self::n_tensors(n_blocks) {
            return Err(Error::dim(format!(
                "expected {} encoder tensors, got {}",
                Self::n_tensors(n_blocks),
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let embed = it.next().unwrap_or_else(|| unreachable!());
        let blocks = (0..n_blocks)
            .map(|_| Mamba2::from_fields(std::array::from_fn(|_| it.next().unwrap_or_else(|| unreachable!()))))
            .collect();
        let norm_f = it.next().unwrap_or_else(|| unreachable!());
        Ok(Self { embed, blocks, norm_f })
    }
}

impl EncoderWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embed = kaiming_init(&[cfg.vocab_size, cfg.d_model], cfg.d_model, rng)?;
        let blocks = (0..cfg.n_blocks)
            .map(|_| Mamba2Params::init(cfg, rng))
            .collect::<Result<_>>()?;
        let norm_f = Tensor::full(&[cfg.d_model], 1.0);
        Ok(Self { embed, blocks, norm_f })
    }

    /// All-zero weights with the shapes `cfg` implies.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            embed: Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
            blocks: vec![Mamba2Params::zeros(cfg); cfg.n_blocks],
            norm_f: Tensor::zeros(&[cfg.d_model]),
        }
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> EncoderWeights<Var> {
        self.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }
}

/// Weight decay applies to weight matrices, the conv kernel and the embedding
/// table; not to biases or gains.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf == "embed" || leaf == "conv" || leaf.starts_with("w_")
}

/// Optional dropout during a forward pass.
pub struct Dropout<'a, R: Rng> {
    pub p: f64,
    pub rng: &'a mut R,
}

/// One block on the tape: `x [l, D] -> [l, D]`.
pub fn mamba2_block_tape<R: Rng>(
    t: &mut Tape,
    x: Var,
    p: &Mamba2<Var>,
    dropout: Option<&mut Dropout<'_, R>>,
) -> Result<Var> {
    let xn = t.rms_norm(x, p.norm_gain, RMS_EPS)?;
    let (xp, zp) = input_project_split_tape(t, xn, p.w_in, p.b_in)?;
    let conv = t.conv1d_causal(xp, p.conv)?;
    let xc = t.silu(conv);
    let (a, b, c) = selective_params_tape(t, xc, p)?;
    let z = t.scan(a, b, c, xc)?;
    let y = gate_residual_tape(t, z, zp, x, xn, p)?;
    match dropout {
        Some(d) => t.dropout(y, d.p, &mut *d.rng),
        None => Ok(y),
    }
}

fn input_project_split_tape(t: &mut Tape, xn: Var, w_in: Var, b_in: Var) -> Result<(Var, Var)> {
    let u = t.matmul(xn, w_in)?;
    let u = t.add_row(u, b_in)?;
    let width = t.value(u).cols();
    let xp = t.slice_cols(u, 0, width / 2)?;
    let zp = t.slice_cols(u, width / 2, width)?;
    Ok((xp, zp))
}

/// `a_t = σ(w_a·x′_t + b_a)`, `B_t = x′_t W_B`, `C_t = x′_t W_C`.
fn selective_params_tape(t: &mut Tape, xc: Var, p: &Mamba2<Var>) -> Result<(Var, Var, Var)> {
    let l = t.value(xc).rows();
    let logits = t.matmul(xc, p.w_a)?;
    let logits = t.reshape(logits, vec![l])?;
    let logits = t.add_scalar(logits, p.b_a)?;
    let a = t.sigmoid(logits);
    let b = t.matmul(xc, p.w_b)?;
    let c = t.matmul(xc, p.w_c)?;
    Ok((a, b, c))
}

fn gate_residual_tape(t: &mut Tape, z: Var, zp: Var, x: Var, xn: Var, p: &Mamba2<Var>) -> Result<Var> {
    let gz = t.silu(zp);
    let comb = t.concat(&[z, gz])?;
    let g = t.matmul(xn, p.w_g)?;
    let g = t.add_row(g, p.b_g)?;
    let g = t.sigmoid(g);
    let gated = t.mul(g, comb)?;
    let out = t.matmul(gated, p.w_out)?;
    let out = t.add_row(out, p.b_out)?;
    t.add(out, x)
}

/// Pooled sentence vector `[D]` for one token sequence on the tape: blocks,
/// a final RMSNorm, then the mean over real tokens.
///
/// Only positions up to the last real token are run: the blocks are causal,
/// so trailing padding cannot influence them.
pub fn encode_tape<R: Rng>(
    t: &mut Tape,
    w: &EncoderWeights<Var>,
    tokens: &Tokens,
    mut dropout: Option<&mut Dropout<'_, R>>,
) -> Result<Var> {
    let last = match tokens.mask.iter().rposition(|&m| m) {
        Some(i) => i + 1,
        None => return Err(Error::invalid("cannot encode an all-padding sequence")),
    };
    if tokens.ids.len() != tokens.mask.len() {
        return Err(Error::dim("ids and mask lengths differ"));
    }
    let vocab = t.value(w.embed).rows();
    let idx: Vec<usize> = tokens.ids[..last].iter().map(|&i| i as usize).collect();
    if let Some(bad) = idx.iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let mut x = t.gather_rows(w.embed, &idx)?;
    for blk in &w.blocks {
        x = mamba2_block_tape(t, x, blk, dropout.as_deref_mut())?;
    }
    x = t.rms_norm(x, w.norm_f, RMS_EPS)?;
    let keep: Vec<usize> = (0..last).filter(|&i| tokens.mask[i]).collect();
    if keep.len() != last {
        x = t.gather_rows(x, &keep)?;
    }
    t.mean_rows(x)
}

/// Encodes many sequences in eval mode while registering the weights once.
pub struct EncodeSession<'w> {
    weights: &'w EncoderWeights<Tensor>,
    tape: Tape,
    vars: EncoderWeights<Var>,
    base: usize,
}

impl<'w> EncodeSession<'w> {
    pub fn new(weights: &'w EncoderWeights<Tensor>) -> Self {
        let mut tape = Tape::new();
        let vars = weights.register(&mut tape, false);
        let base = tape.len();
        Self { weights, tape, vars, base }
    }

    pub fn weights(&self) -> &EncoderWeights<Tensor> {
        self.weights
    }

    pub fn encode(&mut self, tokens: &Tokens) -> Result<Vec<f64>> {
        self.tape.truncate(self.base);
        let s = encode_tape::<rand_chacha::ChaCha8Rng>(&mut self.tape, &self.vars, tokens, None)?;
        Ok(self.tape.value(s).data().to_vec())
    }
}

/// Eval-mode pooled vector for one tokenized sequence.
pub fn encode(weights: &EncoderWeights<Tensor>, tokens: &Tokens) -> Result<Vec<f64>> {
    EncodeSession::new(weights).encode(tokens)
}

fn run_constant(inputs: &[&Tensor], f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Result<Tensor> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant((*x).clone())).collect();
    let out = f(&mut t, &vars)?;
    Ok(t.value(out).clone())
}

/// `x / sqrt(mean(x²) + 1e-6) · gain` over the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    run_constant(&[x, gain], |t, v| t.rms_norm(v[0], v[1], RMS_EPS))
}

/// `u = x̃·W_in + b_in`, split into halves `(x′, z′)`.
pub fn input_project_split(xn: &Tensor, w_in: &Tensor, b_in: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(xn.clone()), t.constant(w_in.clone()), t.constant(b_in.clone()));
    let (xp, zp) = input_project_split_tape(&mut t, x, w, b)?;
    Ok((t.value(xp).clone(), t.value(zp).clone()))
}

/// Causal per-channel convolution, `y[t, c] = Σ_j kernel[j, c] · x[t − j, c]`.
pub fn depthwise_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    run_constant(&[x, kernel], |t, v| t.conv1d_causal(v[0], v[1]))
}

pub fn silu(x: f64) -> f64 {
    autograd::silu(x)
}

/// Recurrent scan `h_t = a_t h_{t−1} + B_t u_t`, `z_t = C_t · h_t`, per channel.
pub fn ssm_scan(a: &Tensor, b: &Tensor, c: &Tensor, u: &Tensor) -> Result<Tensor> {
    let dims = autograd::scan_dims(a, b, c, u)?;
    let z = autograd::scan_forward(a.data(), b.data(), c.data(), u.data(), dims, None);
    Tensor::new(vec![dims.l, dims.p], z)
}

/// The mixing matrix `M[t, s] = (∏_{k=s+1..t} a_k)·⟨C_t, B_s⟩` for `s ≤ t`.
pub fn ssd_matrix(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    let l = a.len();
    if l > SSD_MAX_LEN {
        return Err(Error::invalid(format!(
            "sequence length {l} too large for the dense dual form (max {SSD_MAX_LEN})"
        )));
    }
    let n = b.cols();
    if b.rows() != l || c.rows() != l || c.cols() != n {
        return Err(Error::dim("ssd: a, B, C lengths differ"));
    }
    let mut m = vec![0.0; l * l];
    for t in 0..l {
        let ct = c.row(t);
        let mut decay = 1.0;
        for s in (0..=t).rev() {
            m[t * l + s] = decay * autograd::dot(ct, b.row(s));
            decay *= a.data()[s];
        }
    }
    Tensor::matrix(l, l, m)
}

/// Dual form of [`ssm_scan`]: `z = M·u` with `M` from [`ssd_matrix`].
pub fn ssd_dense(a: &Tensor, b: &Tensor, c: &Tensor, u: &Tensor) -> Result<Tensor> {
    let m = ssd_matrix(a, b, c)?;
    let l = a.len();
    if u.rows() != l {
        return Err(Error::dim("ssd: u length differs from a"));
    }
    let p = u.cols();
    let mut out = vec![0.0; l * p];
    autograd::matmul_into(m.data(), u.data(), &mut out, l, l, p);
    Tensor::matrix(l, p, out)
}

/// `W_out(σ(x̃W_g + b_g) ⊙ [z, silu(z′)]) + b_out + x`.
#[allow(clippy::too_many_arguments)]
pub fn gate_residual(
    z: &Tensor,
    zp: &Tensor,
    x: &Tensor,
    xn: &Tensor,
    w_g: &Tensor,
    b_g: &Tensor,
    w_out: &Tensor,
    b_out: &Tensor,
) -> Result<Tensor> {
    run_constant(&[z, zp, x, xn, w_g, b_g, w_out, b_out], |t, v| {
        let p = Mamba2 {
            w_g: v[4],
            b_g: v[5],
            w_out: v[6],
            b_out: v[7],
            // unused by the gate
            norm_gain: v[0],
            w_in: v[0],
            b_in: v[0],
            conv: v[0],
            w_a: v[0],
            b_a: v[0],
            w_b: v[0],
            w_c: v[0],
        };
        gate_residual_tape(t, v[0], v[1], v[2], v[3], &p)
    })
}

/// Eval-mode block: `x [L, D] -> [L, D]`.
pub fn mamba2_block(x: &Tensor, params: &Mamba2Params) -> Result<Tensor> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let p = params.map(|_, w| t.constant(w.clone()));
    let y = mamba2_block_tape::<rand_chacha::ChaCha8Rng>(&mut t, xv, &p, None)?;
    Ok(t.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check_at;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            max_len: 12,
            d_model: 6,
            d_inner: 12,
            d_state: 3,
            n_blocks: 2,
            conv_kernel: 4,
            dropout: 0.2,
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab(&["a b", "a"], 100).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(1), Some("<unk>"));
        assert!(v.id("a") < v.id("b"));
        assert!(build_vocab::<&str>(&[], 10).is_err());
        assert!(build_vocab(&["  ,, "], 10).is_err());
    }

    #[test]
    fn vocab_truncation_and_determinism() {
        let corpus = ["x x x y y z w", "Z, w! q"];
        let v = build_vocab(&corpus, 3).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("x"), 2);
        assert_eq!(tokenize("q", &v, 2).ids, vec![UNK, PAD]);
        assert_eq!(build_vocab(&corpus, 3).unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }

    #[test]
    fn tokenize_examples() {
        let v = build_vocab(&["alpha beta gamma"], 10).unwrap();
        let e = tokenize("", &v, 4);
        assert_eq!(e.ids, vec![PAD; 4]);
        assert_eq!(e.mask, vec![false; 4]);
        let long = tokenize("alpha beta gamma alpha beta", &v, 3);
        assert_eq!(long.ids.len(), 3);
        assert_eq!(long.mask, vec![true; 3]);
        let k = tokenize("Beta", &v, 2);
        assert_eq!(k.ids[0], v.id("beta"));
        assert_eq!(k.mask, vec![true, false]);
    }

    #[test]
    fn rmsnorm_examples() {
        let y = rmsnorm(&Tensor::vector(vec![2.0; 4]), &Tensor::full(&[4], 1.0)).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        let z = rmsnorm(&Tensor::zeros(&[4]), &Tensor::full(&[4], 1.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[5, 8], &mut rng, -3.0, 3.0);
        let y = rmsnorm(&x, &Tensor::full(&[8], 1.0)).unwrap();
        for r in 0..5 {
            let rms = (y.row(r).iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn input_projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
        let (xp, zp) = input_project_split(&x, &Tensor::zeros(&[4, 8]), &Tensor::zeros(&[8])).unwrap();
        assert!(xp.data().iter().chain(zp.data()).all(|&v| v == 0.0));

        let mut w = vec![0.0; 32];
        for i in 0..4 {
            w[i * 8 + i] = 1.0;
        }
        let w = Tensor::matrix(4, 8, w).unwrap();
        let (xp, _) = input_project_split(&x, &w, &Tensor::zeros(&[8])).unwrap();
        assert_eq!(xp.data(), x.data());

        let w = rand_tensor(&[4, 8], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[8], &mut rng, -1.0, 1.0);
        let (xp, zp) = input_project_split(&x, &w, &b).unwrap();
        for r in 0..3 {
            for j in 0..8 {
                let u: f64 = (0..4).map(|k| x.row(r)[k] * w.data()[k * 8 + j]).sum::<f64>() + b.data()[j];
                let got = if j < 4 { xp.row(r)[j] } else { zp.row(r)[j - 4] };
                assert_eq!(got, u);
            }
        }
        assert!(input_project_split(&x, &Tensor::zeros(&[5, 8]), &Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[6, 2], &mut rng, -1.0, 1.0);
        let mut k = vec![0.0; 8];
        k[0] = 1.0;
        k[1] = 1.0;
        let id = depthwise_conv(&x, &Tensor::matrix(4, 2, k).unwrap()).unwrap();
        assert_eq!(id.data(), x.data());

        let mut k = vec![0.0; 8];
        k[2] = 1.0;
        k[3] = 1.0;
        let sh = depthwise_conv(&x, &Tensor::matrix(4, 2, k).unwrap()).unwrap();
        assert_eq!(sh.row(0), &[0.0, 0.0]);
        for t in 1..6 {
            assert_eq!(sh.row(t), x.row(t - 1));
        }

        let c = Tensor::full(&[6, 2], 1.5);
        let k = Tensor::matrix(4, 2, vec![0.1, 1.0, 0.2, 1.0, 0.3, 1.0, 0.4, 1.0]).unwrap();
        let y = depthwise_conv(&c, &k).unwrap();
        for t in 3..6 {
            assert!((y.row(t)[0] - 1.5).abs() < 1e-12);
            assert!((y.row(t)[1] - 6.0).abs() < 1e-12);
        }
        // warm-up positions only see the available taps
        assert!((y.row(0)[0] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn silu_examples() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(10.0) - 9.999546).abs() < 1e-5);
        assert!((silu(-10.0) + 4.54e-4).abs() < 1e-6);
    }

    #[test]
    fn scan_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, n, p) = (5, 3, 2);
        let b = rand_tensor(&[l, n], &mut rng, -1.0, 1.0);
        let c = rand_tensor(&[l, n], &mut rng, -1.0, 1.0);
        let u = rand_tensor(&[l, p], &mut rng, -1.0, 1.0);
        let z = ssm_scan(&Tensor::zeros(&[l]), &b, &c, &u).unwrap();
        for t in 0..l {
            let cb: f64 = (0..n).map(|s| c.row(t)[s] * b.row(t)[s]).sum();
            for ch in 0..p {
                assert!((z.row(t)[ch] - cb * u.row(t)[ch]).abs() < 1e-12);
            }
        }
        let ones = Tensor::full(&[6], 1.0);
        let z = ssm_scan(
            &ones,
            &Tensor::full(&[6, 1], 0.5),
            &Tensor::full(&[6, 1], 3.0),
            &Tensor::full(&[6, 1], 1.0),
        )
        .unwrap();
        for t in 0..6 {
            assert!((z.data()[t] - 1.5 * (t + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ssd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_tensor(&[1, 4], &mut rng, -1.0, 1.0);
        let c = rand_tensor(&[1, 4], &mut rng, -1.0, 1.0);
        let u = rand_tensor(&[1, 3], &mut rng, -1.0, 1.0);
        let a = Tensor::vector(vec![0.7]);
        let m = ssd_matrix(&a, &b, &c).unwrap();
        let cb: f64 = b.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        assert!((m.data()[0] - cb).abs() < 1e-15);
        let diff = max_abs_diff(&ssd_dense(&a, &b, &c, &u).unwrap(), &ssm_scan(&a, &b, &c, &u).unwrap());
        assert!(diff < 1e-12);

        let b = rand_tensor(&[5, 2], &mut rng, -1.0, 1.0);
        let c = rand_tensor(&[5, 2], &mut rng, -1.0, 1.0);
        let m = ssd_matrix(&Tensor::zeros(&[5]), &b, &c).unwrap();
        for t in 0..5 {
            for s in 0..5 {
                if s != t {
                    assert_eq!(m.data()[t * 5 + s], 0.0);
                }
            }
        }

        let big = SSD_MAX_LEN + 1;
        let r = ssd_matrix(&Tensor::zeros(&[big]), &Tensor::zeros(&[big, 1]), &Tensor::zeros(&[big, 1]));
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    fn max_abs_diff(x: &Tensor, y: &Tensor) -> f64 {
        x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn ssd_matches_scan_on_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let l = rng.random_range(1..=32);
            let n = rng.random_range(1..=8);
            let p = rng.random_range(1..=4);
            let a = rand_tensor(&[l], &mut rng, 0.0, 1.0);
            let b = rand_tensor(&[l, n], &mut rng, -1.0, 1.0);
            let c = rand_tensor(&[l, n], &mut rng, -1.0, 1.0);
            let u = rand_tensor(&[l, p], &mut rng, -1.0, 1.0);
            let d = max_abs_diff(&ssd_dense(&a, &b, &c, &u).unwrap(), &ssm_scan(&a, &b, &c, &u).unwrap());
            assert!(d < 1e-5, "{d}");
        }
    }

    #[test]
    fn gate_residual_examples() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Mamba2Params::init(&cfg, &mut rng).unwrap();
        let (l, d, h) = (4, cfg.d_model, cfg.d_half());
        let z = rand_tensor(&[l, h], &mut rng, -1.0, 1.0);
        let zp = rand_tensor(&[l, h], &mut rng, -1.0, 1.0);
        let x = rand_tensor(&[l, d], &mut rng, -1.0, 1.0);
        let xn = rand_tensor(&[l, d], &mut rng, -1.0, 1.0);

        let closed = Tensor::full(&[cfg.d_inner], -1e4);
        let y = gate_residual(&z, &zp, &x, &xn, &Tensor::zeros(&[d, cfg.d_inner]), &closed, &p.w_out, &Tensor::zeros(&[d])).unwrap();
        assert!(max_abs_diff(&y, &x) < 1e-12);

        let y = gate_residual(&z, &zp, &x, &xn, &p.w_g, &p.b_g, &Tensor::zeros(&[cfg.d_inner, d]), &Tensor::zeros(&[d])).unwrap();
        assert_eq!(y.data(), x.data());

        let y = gate_residual(&z, &zp, &x, &xn, &p.w_g, &p.b_g, &p.w_out, &p.b_out).unwrap();
        let i = cfg.d_inner;
        for r in 0..l {
            let comb: Vec<f64> = z.row(r).iter().copied().chain(zp.row(r).iter().map(|&v| silu(v))).collect();
            let gated: Vec<f64> = (0..i)
                .map(|j| {
                    let g: f64 = (0..d).map(|k| xn.row(r)[k] * p.w_g.data()[k * i + j]).sum();
                    autograd::sigmoid(g) * comb[j]
                })
                .collect();
            for col in 0..d {
                let o: f64 = (0..i).map(|j| gated[j] * p.w_out.data()[j * d + col]).sum();
                assert!((y.row(r)[col] - (o + x.row(r)[col])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_with_zero_weights_is_identity() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[5, cfg.d_model], &mut rng, -1.0, 1.0);
        let y = mamba2_block(&x, &Mamba2Params::zeros(&cfg)).unwrap();
        assert_eq!(y.data(), x.data());
        let p = Mamba2Params::init(&cfg, &mut rng).unwrap();
        let y1 = mamba2_block(&x, &p).unwrap();
        let y2 = mamba2_block(&x, &p).unwrap();
        assert_eq!(y1.shape(), &[5, cfg.d_model]);
        assert_eq!(y1, y2);
    }

    #[test]
    fn block_composes_reference_functions() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Mamba2Params::init(&cfg, &mut rng).unwrap();
        let x = rand_tensor(&[7, cfg.d_model], &mut rng, -1.0, 1.0);
        let xn = rmsnorm(&x, &p.norm_gain).unwrap();
        let (xp, zp) = input_project_split(&xn, &p.w_in, &p.b_in).unwrap();
        let conv = depthwise_conv(&xp, &p.conv).unwrap();
        let xc = Tensor::new(conv.shape().to_vec(), conv.data().iter().map(|&v| silu(v)).collect()).unwrap();
        let h = cfg.d_half();
        let a: Vec<f64> = (0..7)
            .map(|t| autograd::sigmoid((0..h).map(|j| xc.row(t)[j] * p.w_a.data()[j]).sum::<f64>() + p.b_a.data()[0]))
            .collect();
        let proj = |w: &Tensor| {
            let n = cfg.d_state;
            let mut data = Vec::new();
            for t in 0..7 {
                for s in 0..n {
                    data.push((0..h).map(|j| xc.row(t)[j] * w.data()[j * n + s]).sum::<f64>());
                }
            }
            Tensor::matrix(7, n, data).unwrap()
        };
        let (bm, cm) = (proj(&p.w_b), proj(&p.w_c));
        let z = ssd_dense(&Tensor::vector(a), &bm, &cm, &xc).unwrap();
        let expected = gate_residual(&z, &zp, &x, &xn, &p.w_g, &p.b_g, &p.w_out, &p.b_out).unwrap();
        assert!(max_abs_diff(&mamba2_block(&x, &p).unwrap(), &expected) < 1e-10);
    }

    #[test]
    fn kaiming_statistics_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = kaiming_init(&[100_000], 50, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / (2.0 / 50.0) - 1.0).abs() < 0.1, "{var}");
        let a = kaiming_init(&[3, 4], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = kaiming_init(&[3, 4], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(kaiming_init(&[2], 0, &mut rng).is_err());
        let p = Mamba2Params::init(&tiny(), &mut rng).unwrap();
        for b in [&p.b_in, &p.b_a, &p.b_g, &p.b_out] {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }

    fn tiny_model(seed: u64) -> (EncoderWeights<Tensor>, Vocab) {
        let cfg = tiny();
        let vocab = build_vocab(&["red green blue cyan magenta yellow black white"], 100).unwrap();
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (w, vocab)
    }

    #[test]
    fn encode_examples() {
        let (w, vocab) = tiny_model(11);
        let one = tokenize("green", &vocab, 12);
        let s = encode(&w, &one).unwrap();
        let mut x = Tensor::matrix(1, 6, w.embed.row(vocab.id("green") as usize).to_vec()).unwrap();
        for b in &w.blocks {
            x = mamba2_block(&x, b).unwrap();
        }
        let x = rmsnorm(&x, &w.norm_f).unwrap();
        assert_eq!(s, x.data());

        let ab = encode(&w, &tokenize("red blue", &vocab, 12)).unwrap();
        let ba = encode(&w, &tokenize("blue red", &vocab, 12)).unwrap();
        assert_ne!(ab, ba);

        let short = tokenize("red blue cyan", &vocab, 4);
        let long = tokenize("red blue cyan", &vocab, 12);
        assert_eq!(encode(&w, &short).unwrap(), encode(&w, &long).unwrap());

        assert!(encode(&w, &tokenize("", &vocab, 5)).is_err());
    }

    #[test]
    fn blocks_are_causal() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = EncoderWeights::init(&cfg, &mut rng).unwrap();
        let l = 9;
        let x = rand_tensor(&[l, cfg.d_model], &mut rng, -1.0, 1.0);
        let run = |x: &Tensor| {
            let mut y = x.clone();
            for b in &w.blocks {
                y = mamba2_block(&y, b).unwrap();
            }
            y
        };
        let base = run(&x);
        for pos in 0..l {
            let mut x2 = x.clone();
            x2.data_mut()[pos * cfg.d_model] += 0.5;
            let y2 = run(&x2);
            for t in 0..l {
                let changed = base.row(t) != y2.row(t);
                assert_eq!(changed, t >= pos, "perturbing {pos} vs output {t}");
            }
        }
    }

    #[test]
    fn dropout_changes_train_forward_only() {
        let (w, vocab) = tiny_model(13);
        let tok = tokenize("red green blue", &vocab, 12);
        let mut t = Tape::new();
        let vars = w.register(&mut t, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dropout { p: 0.5, rng: &mut rng };
        let s = encode_tape(&mut t, &vars, &tok, Some(&mut d)).unwrap();
        assert_ne!(t.value(s).data(), encode(&w, &tok).unwrap().as_slice());
    }

    #[test]
    fn encode_gradient_matches_fd() {
        let (w, vocab) = tiny_model(14);
        let tok = tokenize("red green blue cyan", &vocab, 12);
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        for (pi, name) in names.iter().enumerate() {
            let x0 = (*w.named()[pi].1).clone();
            let w2 = w.clone();
            let tok2 = tok.clone();
            let f = move |t: &mut Tape, x: Var| -> Result<Var> {
                let mut vars = w2.register(t, false);
                *vars.values_mut()[pi] = x;
                let s = encode_tape::<ChaCha8Rng>(t, &vars, &tok2, None)?;
                // sum(s²) is nearly constant after the final norm
                let n = t.value(s).len();
                let wv = Tensor::new(vec![n], (0..n).map(|i| 0.3 + 0.1 * i as f64).collect())?;
                let wv = t.constant(wv);
                let ws = t.mul(s, wv)?;
                let sq = t.square(ws);
                Ok(t.sum(sq))
            };
            // coordinates with a non-negligible gradient
            let mut t = Tape::new();
            let xv = t.param(x0.clone());
            let loss = f(&mut t, xv).unwrap();
            let g = t.backward(loss).unwrap().get_or_zeros(xv);
            let coords: Vec<usize> = (0..g.len()).filter(|&i| g.data()[i].abs() > 1e-6).take(40).collect();
            if coords.is_empty() {
                continue;
            }
            let r = finite_difference_check_at(f, &x0, 1e-6, &coords).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn weight_decay_selection() {
        assert!(decays("embed"));
        assert!(decays("blocks.0.w_in"));
        assert!(decays("blocks.1.conv"));
        assert!(!decays("blocks.0.b_in"));
        assert!(!decays("blocks.0.norm_gain"));
        assert!(!decays("head.c"));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::desk().validate().is_ok());
        let mut bad = EncoderConfig::desk();
        bad.d_inner = 100;
        assert!(bad.validate().is_err());
    }
}
