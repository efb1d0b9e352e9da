//! Optimization: AdamW with warmup and clipping, the hierarchy trainer,
//! contrastive pretraining and checkpoints.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::encoder::{self, build_vocab, Dropout, EncoderConfig, Tokens, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{self, calibrate_threshold};
use crate::geometry::{self, ManifoldConfig, ManifoldKind, MIN_CURVATURE};
use crate::hierarchy::{build_eval_pairs, make_splits, LabeledPair, Splits, Task, Taxonomy, TripletSampler};
use crate::model::{HimModel, ModelConfig};
use crate::objectives::{self, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_target: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub stabilize_every: u64,
    pub dropout: f64,
    pub seed: u64,
    /// Probability that a triplet's negative is a sibling or cousin.
    pub hard_fraction: f64,
    pub task: Task,
    /// Train, validation and test shares of the subsumptions.
    pub split_fractions: [f64; 3],
    /// Negatives per positive in validation and test pairs.
    pub neg_ratio: usize,
    /// Learning-rate multiplier for the curvature `c`.
    pub curvature_lr_scale: f64,
    /// Learning-rate multiplier for the scale `γ`.
    pub gamma_lr_scale: f64,
    pub manifold: ManifoldConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr_target: 1e-4,
            warmup_steps: 100,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            stabilize_every: 100,
            dropout: 0.2,
            seed: 0,
            hard_fraction: 0.5,
            task: Task::Mixed,
            split_fractions: DEFAULT_FRACTIONS,
            neg_ratio: 10,
            curvature_lr_scale: 1.0,
            gamma_lr_scale: 1.0,
            manifold: ManifoldConfig::new(ManifoldKind::Lorentz),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the small encoder profile on a few hundred entities.
    pub fn desk(kind: ManifoldKind) -> Self {
        Self {
            batch_size: 32,
            lr_target: 3e-3,
            warmup_steps: 50,
            dropout: 0.0,
            curvature_lr_scale: 0.1,
            gamma_lr_scale: 5.0,
            manifold: ManifoldConfig::new(kind),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stabilize_every == 0 || self.neg_ratio == 0 {
            return Err(Error::invalid("batch_size, stabilize_every and neg_ratio must be positive"));
        }
        if !(self.lr_target >= 0.0 && self.lr_target.is_finite()) {
            return Err(Error::invalid("lr_target must be finite and ≥ 0"));
        }
        if [self.curvature_lr_scale, self.gamma_lr_scale].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("learning-rate scales must be finite and ≥ 0"));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::invalid("weight_decay must be ≥ 0 and clip_norm > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::invalid("dropout must be in [0, 1) and hard_fraction in [0, 1]"));
        }
        self.manifold.validate()?;
        self.loss.validate()
    }
}

/// `lr_target·min(1, step/warmup)`.
pub fn lr_at(step: u64, lr_target: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return lr_target;
    }
    lr_target * (step as f64 / warmup_steps as f64).min(1.0)
}

/// Scale all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for each parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Per-parameter options for [`optimizer_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroup {
    pub weight_decay: bool,
    /// Multiplies the learning rate.
    pub lr_scale: f64,
}

impl Default for ParamGroup {
    fn default() -> Self {
        Self {
            weight_decay: true,
            lr_scale: 1.0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay on the
/// parameters whose group asks for it.
///
/// Returns `false` and leaves everything untouched when a gradient is not
/// finite.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    groups: &[ParamGroup],
    hp: &AdamW,
) -> Result<bool> {
    let n = params.len();
    if grads.len() != n || groups.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::dim("optimizer inputs differ in length"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        log::warn!("non-finite gradient at step {}; update skipped", state.step + 1);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..n {
        let p = params[i].data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let wd = if groups[i].weight_decay { weight_decay } else { 0.0 };
        let lr = lr * groups[i].lr_scale;
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * wd * p[j];
            p[j] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(true)
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Splits plus fixed validation and test pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub splits: Splits,
    pub val_pairs: Vec<LabeledPair>,
    pub test_pairs: Vec<LabeledPair>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.15, 0.15];

impl Dataset {
    pub fn prepare(tax: &Taxonomy, task: Task, fractions: [f64; 3], neg_ratio: usize, seed: u64) -> Result<Self> {
        let splits = make_splits(tax, task, fractions, seed)?;
        if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
            return Err(Error::invalid("every split needs at least one positive"));
        }
        let val_pairs = build_eval_pairs(tax, &splits.val, neg_ratio, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c00));
        let test_pairs = build_eval_pairs(tax, &splits.test, neg_ratio, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7374));
        Ok(Self {
            splits,
            val_pairs,
            test_pairs,
        })
    }

    /// The split a training run with `cfg` uses.
    pub fn for_run(tax: &Taxonomy, cfg: &TrainConfig) -> Result<Self> {
        Self::prepare(tax, cfg.task, cfg.split_fractions, cfg.neg_ratio, cfg.seed)
    }
}

/// Vocabulary over the entity labels.
pub fn taxonomy_vocab(tax: &Taxonomy, max_size: usize) -> Result<Vocab> {
    build_vocab(tax.labels(), max_size)
}

/// Untrained model for `tax` with the head of `cfg`.
pub fn init_model(tax: &Taxonomy, encoder: EncoderConfig, cfg: &TrainConfig) -> Result<HimModel> {
    let vocab = taxonomy_vocab(tax, encoder.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    HimModel::new(encoder, cfg.manifold.clone(), vocab, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub c: f64,
    pub gamma: f64,
    pub wallclock_s: f64,
}

impl EpochMetrics {
    /// Equal in everything but wall-clock time.
    pub fn same_run(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_f1.to_bits() == other.val_f1.to_bits()
            && self.c.to_bits() == other.c.to_bits()
            && self.gamma.to_bits() == other.gamma.to_bits()
    }
}

/// Position within a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub loss_sum: f64,
    pub loss_count: usize,
    pub nan_streak: u32,
    pub skipped_steps: u64,
    pub elapsed_s: f64,
}

/// Everything besides the model needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    pub log: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub applied: bool,
    pub epoch_done: Option<EpochMetrics>,
}

pub struct Trainer<'t> {
    pub model: HimModel,
    pub state: TrainerState,
    tax: &'t Taxonomy,
    tokens: Vec<Tokens>,
    sampler: TripletSampler<'t>,
    val_pairs: Vec<LabeledPair>,
    steps_per_epoch: usize,
    cached_points: Vec<Vec<f64>>,
}

impl<'t> Trainer<'t> {
    pub fn new(model: HimModel, tax: &'t Taxonomy, data: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = OptimizerState::new(model.named().into_iter().map(|(_, t)| t));
        let state = TrainerState {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            config: cfg,
            optimizer,
            progress: Progress::default(),
            log: Vec::new(),
        };
        Self::resume(model, state, tax, data)
    }

    /// Continue from a saved state.
    pub fn resume(mut model: HimModel, state: TrainerState, tax: &'t Taxonomy, data: &Dataset) -> Result<Self> {
        state.config.validate()?;
        if model.kind() != state.config.manifold.kind {
            return Err(Error::invalid(format!(
                "model head is {} but the run is configured for {}",
                model.kind(),
                state.config.manifold.kind
            )));
        }
        if state.optimizer.m.len() != model.named().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        model.config.encoder.dropout = state.config.dropout;
        for t in model.values_mut() {
            round_f32(t);
        }
        let tokens = tax.labels().iter().map(|l| model.tokenize(l)).collect::<Vec<_>>();
        if let Some(i) = tokens.iter().position(|t| t.n_real() == 0) {
            return Err(Error::invalid(format!("entity {} has an empty label", tax.id(i))));
        }
        let sampler = TripletSampler::new(tax, &data.splits.train)?;
        let steps_per_epoch = data.splits.train.len().div_ceil(state.config.batch_size);
        Ok(Self {
            model,
            state,
            tax,
            tokens,
            sampler,
            val_pairs: data.val_pairs.clone(),
            steps_per_epoch,
            cached_points: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.state.progress.epoch >= self.state.config.epochs
    }

    /// Manifold points of the most recent batch.
    pub fn cached_points(&self) -> &[Vec<f64>] {
        &self.cached_points
    }

    pub fn log(&self) -> &[EpochMetrics] {
        &self.state.log
    }

    /// One optimization step; finishes the epoch when it is the last one.
    pub fn step(&mut self) -> Result<StepReport> {
        let start = Instant::now();
        let cfg = self.state.config.clone();
        let triplets = self.sampler.sample_many(cfg.batch_size, cfg.hard_fraction, &mut self.state.rng);
        let mut row_of: HashMap<usize, usize> = HashMap::new();
        let mut nodes = Vec::new();
        for t in &triplets {
            for u in [t.anchor, t.positive, t.negative] {
                row_of.entry(u).or_insert_with(|| {
                    nodes.push(u);
                    nodes.len() - 1
                });
            }
        }
        let idx = |f: fn(&crate::hierarchy::Triplet) -> usize| -> Vec<usize> {
            triplets.iter().map(|t| row_of[&f(t)]).collect()
        };
        let (ia, ip, ineg) = (idx(|t| t.anchor), idx(|t| t.positive), idx(|t| t.negative));

        let mut tape = Tape::new();
        let vars = self.model.register(&mut tape, true);
        let mut pooled = Vec::with_capacity(nodes.len());
        let p = cfg.dropout;
        for &u in &nodes {
            let s = if p > 0.0 {
                let mut d = Dropout { p, rng: &mut self.state.rng };
                self.model.pooled_tape(&mut tape, &vars, &self.tokens[u], Some(&mut d))?
            } else {
                self.model.pooled_tape::<ChaCha8Rng>(&mut tape, &vars, &self.tokens[u], None)?
            };
            pooled.push(s);
        }
        let stacked = tape.stack_rows(&pooled)?;
        let points = self.model.head_tape(&mut tape, &vars, stacked)?;
        let e = tape.gather_rows(points, &ia)?;
        let ep = tape.gather_rows(points, &ip)?;
        let en = tape.gather_rows(points, &ineg)?;
        let kind = self.model.kind();
        let loss = objectives::diff::hyperbolic_loss(&mut tape, kind, e, ep, en, vars.c, &cfg.loss)?.total;
        let loss_value = tape.value(loss).item();

        let progress = &mut self.state.progress;
        progress.global_step += 1;
        progress.step_in_epoch += 1;
        let mut applied = false;
        if !loss_value.is_finite() {
            progress.nan_streak += 1;
            progress.skipped_steps += 1;
            log::warn!("non-finite loss at step {}", progress.global_step);
            if progress.nan_streak >= 2 {
                return Err(Error::Divergence {
                    step: progress.global_step,
                });
            }
        } else {
            progress.nan_streak = 0;
            let grads_all = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars.in_order().into_iter().map(|v| grads_all.get_or_zeros(v)).collect();
            let names: Vec<String> = self.model.named().into_iter().map(|(n, _)| n).collect();
            let groups: Vec<ParamGroup> = names
                .iter()
                .map(|n| ParamGroup {
                    weight_decay: encoder::decays(n),
                    lr_scale: match n.as_str() {
                        "head.c" => cfg.curvature_lr_scale,
                        "head.gamma" => cfg.gamma_lr_scale,
                        _ => 1.0,
                    },
                })
                .collect();
            for (g, n) in grads.iter_mut().zip(&names) {
                if !self.model.trainable(n) {
                    *g = Tensor::zeros(g.shape());
                }
            }
            if grads.iter().all(Tensor::all_finite) {
                clip_gradients(&mut grads, cfg.clip_norm);
            }
            let lr = lr_at(self.state.optimizer.step + 1, cfg.lr_target, cfg.warmup_steps);
            let mut params = self.model.values_mut();
            applied = optimizer_step(&mut params, &grads, &mut self.state.optimizer, lr, cfg.weight_decay, &groups, &AdamW::default())?;
            if applied {
                for t in params {
                    round_f32(t);
                }
                for t in self.state.optimizer.m.iter_mut().chain(self.state.optimizer.v.iter_mut()) {
                    round_f32(t);
                }
                clamp_curvature(&mut self.model);
                progress.loss_sum += loss_value;
                progress.loss_count += 1;
            } else {
                progress.skipped_steps += 1;
            }
            let pts = tape.value(points);
            self.cached_points = (0..pts.rows()).map(|r| pts.row(r).to_vec()).collect();
        }
        if progress.global_step % cfg.stabilize_every == 0 {
            self.stabilize()?;
        }
        self.state.progress.elapsed_s += start.elapsed().as_secs_f64();
        let epoch_done = if self.state.progress.step_in_epoch >= self.steps_per_epoch {
            Some(self.finish_epoch()?)
        } else {
            None
        };
        Ok(StepReport {
            loss: loss_value,
            applied,
            epoch_done,
        })
    }

    /// Re-clamp `c`, check `γ`, and pull cached points back onto the manifold.
    /// Returns how many points needed repair.
    pub fn stabilize(&mut self) -> Result<usize> {
        clamp_curvature(&mut self.model);
        if !self.model.gamma().is_finite() {
            return Err(Error::NonFinite("gamma".into()));
        }
        let (c, kind) = (self.model.curvature(), self.model.kind());
        let mut repaired = 0;
        for p in &mut self.cached_points {
            if !geometry::check_on_manifold(p, c, kind, 1e-5) {
                *p = geometry::stabilize_point(p, c, kind);
                repaired += 1;
            }
        }
        Ok(repaired)
    }

    fn finish_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let val_f1 = self.validation_f1()?;
        let progress = &mut self.state.progress;
        let train_loss = if progress.loss_count > 0 {
            progress.loss_sum / progress.loss_count as f64
        } else {
            f64::NAN
        };
        progress.epoch += 1;
        progress.step_in_epoch = 0;
        progress.loss_sum = 0.0;
        progress.loss_count = 0;
        progress.elapsed_s += start.elapsed().as_secs_f64();
        let m = EpochMetrics {
            epoch: progress.epoch,
            train_loss,
            val_f1,
            c: self.model.curvature(),
            gamma: self.model.gamma(),
            wallclock_s: progress.elapsed_s,
        };
        log::info!(
            "epoch {} loss {:.4} val_f1 {:.4} c {:.4} gamma {:.4}",
            m.epoch,
            m.train_loss,
            m.val_f1,
            m.c,
            m.gamma
        );
        self.state.log.push(m.clone());
        Ok(m)
    }

    /// Best F1 over thresholds on the validation pairs.
    pub fn validation_f1(&self) -> Result<f64> {
        let points = evaluation::embed_entities(&self.model, self.tax)?;
        let scores = evaluation::pair_scores(&self.model, &points, &self.val_pairs)?;
        let labels: Vec<bool> = self.val_pairs.iter().map(|p| p.positive).collect();
        Ok(calibrate_threshold(&scores, &labels)?.f1)
    }

    /// Train to the configured number of epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochMetrics, &Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            if let Some(m) = self.step()?.epoch_done {
                on_epoch(&m, self)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.state))
    }
}

fn clamp_curvature(model: &mut HimModel) {
    let c = model.c.data_mut();
    if !(c[0] >= MIN_CURVATURE) {
        c[0] = MIN_CURVATURE as f32 as f64;
    }
}

/// Train a fresh run to completion.
pub fn train(model: HimModel, tax: &Taxonomy, data: &Dataset, cfg: TrainConfig) -> Result<(HimModel, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model, tax, data, cfg)?;
    trainer.run(|_, _| Ok(()))?;
    Ok((trainer.model, trainer.state.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_target: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr_target: 1e-3,
            warmup_steps: 20,
            weight_decay: 1e-3,
            clip_norm: 1.0,
            dropout: 0.1,
            temperature: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPair {
    pub text_a: String,
    pub text_b: String,
}

/// JSON-lines file of `{"text_a": …, "text_b": …}`.
pub fn load_pairs_jsonl(path: &Path) -> Result<Vec<TextPair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// In-batch contrastive training of the encoder on sentence pairs, in the
/// Euclidean unit-norm space. Returns the model and the mean loss per epoch.
pub fn pretrain(pairs: &[TextPair], encoder: EncoderConfig, cfg: &PretrainConfig) -> Result<(HimModel, Vec<f64>)> {
    if pairs.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::invalid("pretraining needs at least two pairs per batch"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) || !(cfg.temperature > 0.0) {
        return Err(Error::invalid("dropout must be in [0, 1) and temperature positive"));
    }
    let corpus: Vec<&str> = pairs.iter().flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()]).collect();
    let vocab = build_vocab(&corpus, encoder.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = HimModel::new(encoder, ManifoldConfig::new(ManifoldKind::Euclidean), vocab, &mut rng)?;
    model.config.encoder.dropout = cfg.dropout;
    let tokens: Vec<(Tokens, Tokens)> = pairs
        .iter()
        .map(|p| (model.tokenize(&p.text_a), model.tokenize(&p.text_b)))
        .collect();
    if tokens.iter().any(|(a, b)| a.n_real() == 0 || b.n_real() == 0) {
        return Err(Error::invalid("pretraining pair with an empty text"));
    }
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let groups: Vec<ParamGroup> = names
        .iter()
        .map(|n| ParamGroup {
            weight_decay: encoder::decays(n),
            lr_scale: 1.0,
        })
        .collect();
    let mut opt = OptimizerState::new(model.named().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let mut rows = Vec::with_capacity(2 * chunk.len());
            for side in 0..2 {
                for &i in chunk {
                    let tok = if side == 0 { &tokens[i].0 } else { &tokens[i].1 };
                    let mut d = Dropout { p: cfg.dropout, rng: &mut rng };
                    let s = if cfg.dropout > 0.0 {
                        model.pooled_tape(&mut tape, &vars, tok, Some(&mut d))?
                    } else {
                        model.pooled_tape::<ChaCha8Rng>(&mut tape, &vars, tok, None)?
                    };
                    rows.push(s);
                }
            }
            let b = chunk.len();
            let pair: Vec<usize> = (0..2 * b).map(|r| (r + b) % (2 * b)).collect();
            let stacked = tape.stack_rows(&rows)?;
            let units = geometry::diff::squash_normalize(&mut tape, stacked)?;
            let loss = objectives::diff::batch_contrastive_loss(&mut tape, units, &pair, cfg.temperature)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { step: opt.step + 1 });
            }
            let g = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars.in_order().into_iter().map(|v| g.get_or_zeros(v)).collect();
            clip_gradients(&mut grads, cfg.clip_norm);
            let lr = lr_at(opt.step + 1, cfg.lr_target, cfg.warmup_steps);
            let mut params = model.values_mut();
            if optimizer_step(&mut params, &grads, &mut opt, lr, cfg.weight_decay, &groups, &AdamW::default())? {
                for t in params {
                    round_f32(t);
                }
                sum += value;
                count += 1;
            }
        }
        history.push(if count > 0 { sum / count as f64 } else { f64::NAN });
        log::info!("pretrain epoch {} loss {:.4}", history.len(), history[history.len() - 1]);
    }
    Ok((model, history))
}

const MAGIC: &[u8; 8] = b"HIMCKPT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerHeader {
    config: TrainConfig,
    optimizer_step: u64,
    rng: ChaCha8Rng,
    progress: Progress,
    log: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
    trainer: Option<TrainerHeader>,
}

/// Write `model` (and optionally a trainer state) to `path`.
///
/// Layout: the magic `HIMCKPT1`, a little-endian `u64` header length, the JSON
/// header, then every tensor as little-endian `f32` in manifest order.
pub fn save_checkpoint(path: &Path, model: &HimModel, state: Option<&TrainerState>) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = model.named();
    if let Some(s) = state {
        let base: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        if s.optimizer.m.len() != base.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        for (n, t) in base.iter().zip(&s.optimizer.m) {
            named.push((format!("adam.m.{n}"), t));
        }
        for (n, t) in base.iter().zip(&s.optimizer.v) {
            named.push((format!("adam.v.{n}"), t));
        }
    }
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(n, t)| {
            let e = TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        model: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors,
        trainer: state.map(|s| TrainerHeader {
            config: s.config.clone(),
            optimizer_step: s.optimizer.step,
            rng: s.rng.clone(),
            progress: s.progress.clone(),
            log: s.log.clone(),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, t) in &named {
            for &v in t.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(HimModel, Option<TrainerState>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint or unsupported version"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().map_err(|_| bad("short header"))?) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let payload = &bytes[16 + len..];
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(bad(&format!("tensor {} at unexpected offset", e.name)));
        }
        let start = e.offset as usize;
        let end = start + 4 * n;
        let raw = payload.get(start..end).ok_or_else(|| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected = end as u64;
    }
    if payload.len() as u64 != expected {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let n_model = crate::encoder::EncoderWeights::<Tensor>::n_tensors(header.model.encoder.n_blocks) + 2;
    if tensors.len() < n_model {
        return Err(bad("missing model tensors"));
    }
    let rest = tensors.split_off(n_model);
    let model = HimModel::from_named(header.model, header.vocab, tensors)?;
    let state = match header.trainer {
        None => {
            if !rest.is_empty() {
                return Err(bad("optimizer tensors without trainer state"));
            }
            None
        }
        Some(h) => {
            if rest.len() != 2 * n_model {
                return Err(bad("optimizer tensors missing"));
            }
            let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
            let (m, v) = rest.split_at(n_model);
            for (i, n) in names.iter().enumerate() {
                if m[i].0 != format!("adam.m.{n}") || v[i].0 != format!("adam.v.{n}") {
                    return Err(bad("optimizer tensors out of order"));
                }
            }
            Some(TrainerState {
                config: h.config,
                optimizer: OptimizerState {
                    step: h.optimizer_step,
                    m: m.iter().map(|(_, t)| t.clone()).collect(),
                    v: v.iter().map(|(_, t)| t.clone()).collect(),
                },
                rng: h.rng,
                progress: h.progress,
                log: h.log,
            })
        }
    };
    Ok((model, state))
}

/// Append one JSON object per line.
pub fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(m)?)?;
    Ok(())
}
