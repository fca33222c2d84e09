use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nsnet::data::{
    atomic_write, file_sha256, generate_synthetic_dataset, write_dataset, DatasetManifest,
    PresampleConfig, SynthConfig,
};
use nsnet::evaluation::{
    flops_total, frontier_csv, presample_dataset, run_comparison, CostTable,
};
use nsnet::fusion::{sample_frames, saliency_csv, FusionConfig, FusionMode};
use nsnet::model::SamplerModel;
use nsnet::supervision::{build_prototypes, PrototypeBank};
use nsnet::training::{train, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE};

mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "nsnet", version, about = "Adaptive frame sampler with non-saliency suppression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic train/val dataset.
    Synth(SynthArgs),
    /// Build class prototypes from a training manifest.
    Prototypes(PrototypeArgs),
    /// Train a sampler from a run config and flag overrides.
    Train(TrainArgs),
    /// Dump per-video saliency and selected frames.
    Sample(SampleArgs),
    /// Compare the sampler with the baselines across K.
    Eval(EvalArgs),
    /// Print the per-video GFLOPs of the sampler pipeline.
    Flops(FlopsArgs),
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1]"))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    val_per_class: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    light_dim: usize,
    #[arg(long, default_value_t = 32)]
    guiding_dim: usize,
    #[arg(long, default_value_t = 0.25, value_parser = fraction)]
    salient_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrototypeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Percentage of confident correct frames kept per video.
    #[arg(long, default_value_t = 30.0)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags override the config file; unset flags keep its values.
#[derive(Args)]
struct TrainArgs {
    /// key=value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<String>,
    #[arg(long)]
    val_manifest: Option<String>,
    #[arg(long)]
    prototypes: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// [default: 120]
    #[arg(long)]
    epochs: Option<String>,
    /// [default: 64]
    #[arg(long)]
    batch_size: Option<String>,
    /// [default: 0.01]
    #[arg(long)]
    base_lr: Option<String>,
    /// Comma-separated [default: 50,75 scaled to the epoch count]
    #[arg(long)]
    lr_decay_epochs: Option<String>,
    /// [default: 0.1]
    #[arg(long)]
    decay_factor: Option<String>,
    /// [default: 0.9]
    #[arg(long)]
    momentum: Option<String>,
    /// Observation frames T [default: 16]
    #[arg(long)]
    frames: Option<String>,
    /// [default: true]
    #[arg(long)]
    shift_augment: Option<String>,
    /// ns or hard [default: ns]
    #[arg(long)]
    supervision: Option<String>,
    /// Validation fusion mode [default: index_union]
    #[arg(long)]
    fusion: Option<String>,
    /// [default: 0.6]
    #[arg(long)]
    ratio: Option<String>,
    /// Validation K [default: 5]
    #[arg(long)]
    k: Option<String>,
    /// [default: 2]
    #[arg(long)]
    encoder_layers: Option<String>,
    /// [default: 8]
    #[arg(long)]
    heads: Option<String>,
    /// [default: light_dim]
    #[arg(long)]
    ffn_dim: Option<String>,
    /// [default: 0.2]
    #[arg(long)]
    dropout_pos_enc: Option<String>,
    /// [default: 0.9]
    #[arg(long)]
    dropout_cls: Option<String>,
    /// [default: 0.2]
    #[arg(long)]
    dropout_attn: Option<String>,
    /// [default: 0.2]
    #[arg(long)]
    gamma: Option<String>,
    /// [default: 128]
    #[arg(long)]
    max_frames: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        [
            ("train_manifest", &self.train_manifest),
            ("val_manifest", &self.val_manifest),
            ("prototypes", &self.prototypes),
            ("out_dir", &self.out_dir),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("base_lr", &self.base_lr),
            ("lr_decay_epochs", &self.lr_decay_epochs),
            ("decay_factor", &self.decay_factor),
            ("momentum", &self.momentum),
            ("frames", &self.frames),
            ("shift_augment", &self.shift_augment),
            ("supervision", &self.supervision),
            ("fusion", &self.fusion),
            ("ratio", &self.ratio),
            ("k", &self.k),
            ("encoder_layers", &self.encoder_layers),
            ("heads", &self.heads),
            ("ffn_dim", &self.ffn_dim),
            ("dropout_pos_enc", &self.dropout_pos_enc),
            ("dropout_cls", &self.dropout_cls),
            ("dropout_attn", &self.dropout_attn),
            ("gamma", &self.gamma),
            ("max_frames", &self.max_frames),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args)]
struct FusionArgs {
    #[arg(long, default_value = "index_union")]
    fusion: FusionMode,
    #[arg(long, default_value_t = 0.6)]
    ratio: f64,
    /// Observation frames T; must match training.
    #[arg(long, default_value_t = 16)]
    frames: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[command(flatten)]
    fusion: FusionArgs,
    /// Receives one `<video_id>.csv` per video.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated frame budgets.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    k: Vec<usize>,
    #[command(flatten)]
    fusion: FusionArgs,
    /// `name=gflops` lines [default: built-in table]
    #[arg(long)]
    cost_table: Option<PathBuf>,
    /// Seed of the random baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// `name=gflops` lines [default: built-in table]
    #[arg(long)]
    cost_table: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    t: usize,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_classes: a.classes,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        frames: a.frames,
        light_dim: a.light_dim,
        guiding_dim: a.guiding_dim,
        salient_fraction: a.salient_fraction,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let data = generate_synthetic_dataset(&cfg)?;
    let train = write_dataset(&a.out_dir, &data.train)?;
    let val = write_dataset(&a.out_dir, &data.val)?;
    println!(
        "wrote {} train videos to {} and {} val videos to {}",
        data.train.records.len(),
        train.display(),
        data.val.records.len(),
        val.display()
    );
    Ok(())
}

fn cmd_prototypes(a: PrototypeArgs) -> Result<()> {
    require_file(&a.manifest, "manifest")?;
    let dataset = DatasetManifest::load(&a.manifest)?.load_records()?;
    let bank = build_prototypes(&dataset, a.epsilon)?;
    bank.save(&a.out, &file_sha256(&a.manifest)?)?;
    println!(
        "wrote {} prototypes of dim {} to {}",
        bank.prototypes.rows(),
        bank.prototypes.cols(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in a.overrides() {
        run.set(k, v, Path::new("")).with_context(|| format!("--{}", k.replace('_', "-")))?;
    }
    let tcfg = run.train_config()?;
    let (Some(train_path), Some(out_dir)) = (&run.train_manifest, &run.out_dir) else {
        bail!("train_manifest and out_dir are required");
    };
    require_file(train_path, "train manifest")?;
    if let Some(v) = &run.val_manifest {
        require_file(v, "val manifest")?;
    }
    let bank_path = run.prototypes.clone();
    if let Some(p) = &bank_path {
        require_file(p, "prototype bank")?;
    } else if tcfg.supervision == nsnet::training::Supervision::NonSaliency {
        bail!("prototypes are required for ns supervision");
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let train_set = DatasetManifest::load(train_path)?.load_records()?;
    let val_set = match &run.val_manifest {
        Some(v) => Some(DatasetManifest::load(v)?.load_records()?),
        None => None,
    };
    let bank = match &bank_path {
        Some(p) => PrototypeBank::load(p)?,
        None => build_prototypes(&train_set, nsnet::supervision::DEFAULT_EPSILON_PERCENT)?,
    };
    let mcfg = run.model_config(train_set.light_dim(), train_set.num_classes)?;
    atomic_write(&out_dir.join("run.cfg"), run.render()?.as_bytes())?;
    let out = train(&train_set, val_set.as_ref(), &bank, &mcfg, &tcfg, Some(out_dir))?;
    let last = out.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs, final loss {:.4}; wrote {}, {} and {} in {}",
        out.log.len(),
        last.loss,
        METRICS_FILE,
        LAST_CHECKPOINT,
        BEST_CHECKPOINT,
        out_dir.display()
    );
    Ok(())
}

fn load_eval_inputs(checkpoint: &Path, manifest: &Path) -> Result<(SamplerModel, nsnet::data::Dataset)> {
    require_file(checkpoint, "checkpoint")?;
    require_file(manifest, "manifest")?;
    let model = SamplerModel::load(checkpoint)?;
    let data = DatasetManifest::load(manifest)?.load_records()?;
    Ok((model, data))
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (model, data) = load_eval_inputs(&a.checkpoint, &a.manifest)?;
    let pcfg = PresampleConfig::new(a.fusion.frames, false)?;
    let fusion = FusionConfig {
        mode: a.fusion.fusion,
        ratio: a.fusion.ratio,
        k: a.k,
    };
    let records = presample_dataset(&data, &pcfg);
    for r in &records {
        let profile = sample_frames(&model, r, &fusion)?;
        atomic_write(
            &a.out_dir.join(format!("{}.csv", r.video_id)),
            saliency_csv(&profile).as_bytes(),
        )?;
    }
    println!("wrote {} saliency profiles to {}", records.len(), a.out_dir.display());
    Ok(())
}

fn cost_table(path: &Option<PathBuf>) -> Result<CostTable> {
    Ok(match path {
        Some(p) => CostTable::load(p)?,
        None => CostTable::default(),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let costs = cost_table(&a.cost_table)?;
    let (model, data) = load_eval_inputs(&a.checkpoint, &a.manifest)?;
    let pcfg = PresampleConfig::new(a.fusion.frames, false)?;
    let fusion = FusionConfig {
        mode: a.fusion.fusion,
        ratio: a.fusion.ratio,
        k: 1,
    };
    let rows = run_comparison(&data, &model, &fusion, &pcfg, &a.k, &costs, a.seed)?;
    atomic_write(&a.out, frontier_csv(&rows).as_bytes())?;
    for r in &rows {
        println!(
            "{:<16} K={:<3} top1={:.4} mAP={:.4} gflops={:.2}",
            r.method, r.k, r.top1, r.map, r.gflops
        );
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let budget = cost_table(&a.cost_table)?.budget(a.k, a.t);
    budget.validate()?;
    println!("{:.2}", flops_total(&budget));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prototypes(a) => cmd_prototypes(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
