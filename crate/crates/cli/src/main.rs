mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand};
use him::evaluation::{self, EvalReport};
use him::geometry::ManifoldKind;
use him::hierarchy::{
    self, delta_hyperbolicity, delta_hyperbolicity_exact, generate_synthetic_tree, Graph, LabelScheme, SynthConfig,
    Task, Taxonomy,
};
use him::model::HimModel;
use him::training::{self, Dataset, Trainer, TrainerState};
use him::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use config::{PretrainRunConfig, Profile, RunConfig};

#[derive(Parser)]
#[command(name = "him", version, about = "Hierarchy encoders on hyperbolic manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write entities.tsv and edges.tsv for a random tree.
    Synth(SynthArgs),
    /// Contrastive pretraining of the encoder on sentence pairs.
    Pretrain(PretrainArgs),
    /// Train a hierarchy encoder on a taxonomy.
    Train(TrainArgs),
    /// Score labelled pairs with a trained checkpoint; prints a JSON report.
    Eval(EvalArgs),
    /// Gromov δ of the taxonomy graph; prints a JSON report.
    Hyperbolicity(HyperbolicityArgs),
    /// Export entity embeddings with their h-norms as TSV.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding entities.tsv and edges.tsv.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<Taxonomy> {
        hierarchy::load_taxonomy(&self.data.join("entities.tsv"), &self.data.join("edges.tsv"))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Most children per internal node.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..))]
    branching: u32,
    /// Fewest children per internal node.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    min_branching: u32,
    /// Depth of every leaf; the root is depth 0.
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(2..))]
    depth: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `path-words` labels repeat the ancestors' words; `word` gives one word per node.
    #[arg(long, default_value = "path-words")]
    labels: LabelScheme,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON-lines file of {"text_a": …, "text_b": …}.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// JSON file with `profile`, `encoder` and `pretrain` sections.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn negative_curvature(s: &str) -> std::result::Result<f64, String> {
    let k: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if k < 0.0 && k.is_finite() {
        Ok(k)
    } else {
        Err(format!("curvature must be negative, got {k}"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory for model.ckpt, metrics.jsonl, config.json and the pair files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// JSON file with `profile`, `encoder` and `train` sections.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    manifold: Option<ManifoldKind>,
    #[arg(long)]
    task: Option<Task>,
    /// Train with this fixed curvature K < 0 instead of learning it.
    #[arg(long, value_name = "K", allow_hyphen_values = true, value_parser = negative_curvature)]
    fixed_curvature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Start from a pretrained checkpoint instead of fresh weights.
    #[arg(long, value_name = "FILE", conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue the run saved in this checkpoint. `--epochs` may extend it;
    /// other settings come from the checkpoint.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("calibration").required(true).args(["val_pairs", "threshold"])))]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Pairs to score, as written by `train` (test_pairs.tsv).
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    /// Pairs to pick the threshold on (val_pairs.tsv).
    #[arg(long, value_name = "FILE")]
    val_pairs: Option<PathBuf>,
    /// Fixed distance threshold; a pair is positive when its distance is below it.
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Fail unless the checkpoint uses this manifold.
    #[arg(long)]
    manifold: Option<ManifoldKind>,
    /// Task name for the report; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    task: Option<Task>,
}

#[derive(Args)]
struct HyperbolicityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of sampled quadruples.
    #[arg(long, default_value_t = 100_000)]
    quadruples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Average over every quadruple instead of sampling.
    #[arg(long)]
    exact: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// TSV file to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Hyperbolicity(a) => hyperbolicity(a),
        Command::Embed(a) => embed(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.min_branching > a.branching {
        Cli::command()
            .error(clap::error::ErrorKind::ArgumentConflict, "--min-branching exceeds --branching")
            .exit();
    }
    let cfg = SynthConfig {
        branching: a.branching as usize,
        min_branching: a.min_branching as usize,
        depth: a.depth as usize,
        label_scheme: a.labels,
        seed: a.seed,
    };
    let tax = generate_synthetic_tree(&cfg)?;
    fs::create_dir_all(&a.out)?;
    tax.save(&a.out.join("entities.tsv"), &a.out.join("edges.tsv"))?;
    eprintln!("{} entities, {} edges -> {}", tax.len(), tax.edges().len(), a.out.display());
    print_json(&json!({"entities": tax.len(), "edges": tax.edges().len()}))
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainRunConfig = config::resolve(a.config.as_deref(), a.profile, PretrainRunConfig::defaults)?;
    let p = &mut cfg.pretrain;
    if let Some(v) = a.seed {
        p.seed = v;
    }
    if let Some(v) = a.epochs {
        p.epochs = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = a.lr {
        p.lr_target = v;
    }
    log::info!("resolved config {}", serde_json::to_string(&cfg)?);
    let pairs = training::load_pairs_jsonl(&a.corpus)?;
    let (model, losses) = training::pretrain(&pairs, cfg.encoder, &cfg.pretrain)?;
    for (i, l) in losses.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {l:.5}", i + 1);
    }
    training::save_checkpoint(&a.out, &model, None)?;
    print_json(&json!({"pairs": pairs.len(), "losses": losses, "checkpoint": a.out}))
}

fn train(a: TrainArgs) -> Result<()> {
    let tax = a.data.load()?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let metrics = a.out.join("metrics.jsonl");

    let (model, state) = match &a.resume {
        Some(path) => {
            let (model, state) = training::load_checkpoint(path)?;
            let mut state = state.ok_or_else(|| Error::Checkpoint(format!("{} has no trainer state", path.display())))?;
            if let Some(e) = a.epochs {
                state.config.epochs = e;
            }
            (model, Some(state))
        }
        None => (fresh_model(&a, &tax)?, None),
    };
    let mut trainer = match state {
        Some(state) => {
            let data = Dataset::for_run(&tax, &state.config)?;
            log::info!("resuming at epoch {} step {}", state.progress.epoch, state.progress.global_step);
            Trainer::resume(model, state, &tax, &data)?
        }
        None => {
            let cfg = resolve_train(&a)?;
            let data = Dataset::for_run(&tax, &cfg)?;
            hierarchy::save_pairs(&tax, &data.val_pairs, &a.out.join("val_pairs.tsv"))?;
            hierarchy::save_pairs(&tax, &data.test_pairs, &a.out.join("test_pairs.tsv"))?;
            if metrics.exists() {
                fs::remove_file(&metrics)?;
            }
            let t = Trainer::new(model, &tax, &data, cfg)?;
            t.save(&ckpt)?;
            t
        }
    };
    let resolved = json!({
        "encoder": trainer.model.config.encoder,
        "train": trainer.state.config,
    });
    log::info!("resolved config {resolved}");
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;

    let outcome = trainer.run(|m, t| {
        training::append_metrics(&metrics, m)?;
        t.save(&ckpt)
    });
    if let Err(e) = outcome {
        if exit_code(&e) == 3 {
            eprintln!("last good checkpoint: {}", ckpt.display());
        }
        return Err(e);
    }
    let last = trainer.log().last().cloned();
    print_json(&json!({
        "epochs": trainer.state.progress.epoch,
        "global_step": trainer.state.progress.global_step,
        "skipped_steps": trainer.state.progress.skipped_steps,
        "final": last,
        "checkpoint": ckpt,
    }))
}

fn fresh_model(a: &TrainArgs, tax: &Taxonomy) -> Result<HimModel> {
    let cfg = resolve_run(a)?;
    match &a.init {
        None => training::init_model(tax, cfg.encoder, &cfg.train),
        Some(path) => {
            let (mut model, _) = training::load_checkpoint(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let labels: Vec<&str> = tax.labels().iter().map(String::as_str).collect();
            let added = model.extend_vocab(&labels, &mut rng)?;
            log::info!("initialised from {}; {added} new words", path.display());
            model.with_manifold(cfg.train.manifold)
        }
    }
}

fn resolve_run(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = config::resolve(a.config.as_deref(), a.profile, RunConfig::defaults)?;
    let t = &mut cfg.train;
    if let Some(kind) = a.manifold {
        // a euclidean config has nothing to say about what a hyperbolic head learns
        let m = &mut t.manifold;
        let keep = m.kind.is_hyperbolic();
        let hyperbolic = kind.is_hyperbolic();
        m.learn_curvature = hyperbolic && (!keep || m.learn_curvature);
        m.learn_scale = hyperbolic && (!keep || m.learn_scale);
        m.kind = kind;
    }
    if let Some(k) = a.fixed_curvature {
        t.manifold = t.manifold.clone().with_fixed_curvature(k)?;
    }
    if let Some(v) = a.task {
        t.task = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr_target = v;
    }
    if let Some(v) = a.dropout {
        t.dropout = v;
    }
    t.validate()?;
    Ok(cfg)
}

fn resolve_train(a: &TrainArgs) -> Result<training::TrainConfig> {
    Ok(resolve_run(a)?.train)
}

fn load_model(path: &Path) -> Result<(HimModel, Option<TrainerState>)> {
    training::load_checkpoint(path)
}

fn eval(a: EvalArgs) -> Result<()> {
    let tax = a.data.load()?;
    let (model, state) = load_model(&a.checkpoint)?;
    if let Some(kind) = a.manifold {
        if kind != model.kind() {
            return Err(Error::Invalid(format!("checkpoint is {} but --manifold is {kind}", model.kind())));
        }
    }
    let task = a.task.or(state.map(|s| s.config.task)).unwrap_or(Task::Mixed);
    let pairs = hierarchy::load_pairs(&tax, &a.pairs)?;
    let report: EvalReport = match (&a.val_pairs, a.threshold) {
        (Some(val), _) => {
            let val = hierarchy::load_pairs(&tax, val)?;
            evaluation::calibrate_and_evaluate(&model, &tax, &val, &pairs, task)?
        }
        (None, Some(t)) => evaluation::evaluate(&model, &tax, &pairs, t, task)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    eprintln!("{:<10}{:>10}{:>10}{:>10}", "task", "precision", "recall", "f1");
    eprintln!("{:<10}{:>10.4}{:>10.4}{:>10.4}", report.task.to_string(), report.precision, report.recall, report.f1);
    for (hop, f1) in &report.per_hop {
        eprintln!("  hop {hop:<5}{f1:>25.4}");
    }
    print_json(&serde_json::to_value(&report)?)
}

fn hyperbolicity(a: HyperbolicityArgs) -> Result<()> {
    let tax = a.data.load()?;
    let graph = Graph::from_taxonomy(&tax);
    let report = if a.exact {
        delta_hyperbolicity_exact(&graph)?
    } else {
        delta_hyperbolicity(&graph, a.quadruples, &mut ChaCha8Rng::seed_from_u64(a.seed))?
    };
    eprintln!(
        "delta {:.6}  normalized {:.6}  over {} quadruples of {} nodes",
        report.mean_delta, report.mean_normalized_delta, report.quadruples, report.nodes
    );
    print_json(&serde_json::to_value(report)?)
}

fn embed(a: EmbedArgs) -> Result<()> {
    let tax = a.data.load()?;
    let (model, _) = load_model(&a.checkpoint)?;
    let rows = evaluation::export_embeddings(&model, &tax, &a.out)?;
    eprintln!("{rows} embeddings -> {}", a.out.display());
    print_json(&json!({"rows": rows, "manifold": model.kind(), "path": a.out}))
}
