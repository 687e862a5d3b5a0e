//! `clothreid` command line: generate worlds, train, evaluate, cluster.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use clothreid::clustering::dbscan;
use clothreid::dataset_io::{read_dataset, write_csv, write_dataset};
use clothreid::encoder::{read_checkpoint, write_checkpoint};
use clothreid::evaluation::{EvalProtocol, Shot};
use clothreid::pipeline::{encode_samples, evaluate_encoder, run_training, write_reports_csv, PipelineConfig, PipelineError};
use clothreid::world::{generate_world, Dataset, Role, SplitSetting, World, WorldConfig};

#[derive(Parser)]
#[command(name = "clothreid", version, about = "Unsupervised clothing-change person re-identification on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write its dataset file.
    GenWorld(GenWorldArgs),
    /// Train an encoder on a dataset file.
    Train(TrainArgs),
    /// Score a checkpoint on the dataset's query/gallery split.
    Eval(EvalArgs),
    /// Write the pseudo labels a checkpoint assigns to the training set.
    Cluster(ClusterArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    ClothingChange,
    SameClothing,
}

impl From<SettingArg> for SplitSetting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::ClothingChange => SplitSetting::ClothingChange,
            SettingArg::SameClothing => SplitSetting::SameClothing,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ShotArg {
    Single,
    Multi,
}

#[derive(clap::Args)]
struct GenWorldArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also export the samples as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    num_identities: u32,
    #[arg(long, default_value_t = 4)]
    clothes_per_identity: u32,
    #[arg(long, default_value_t = 6)]
    samples_per_identity_clothing: u32,
    #[arg(long, default_value_t = 4)]
    num_cameras: u32,
    #[arg(long, default_value_t = 32)]
    embedding_dim: u32,
    #[arg(long, default_value_t = 16)]
    identity_dim: u32,
    #[arg(long, default_value_t = 16)]
    clothing_dim: u32,
    #[arg(long, default_value_t = 1.0)]
    identity_scale: f64,
    #[arg(long, default_value_t = 0.9)]
    clothing_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
    /// Identities below this index are training data.
    #[arg(long, default_value_t = 25)]
    train_identities: u32,
    #[arg(long, value_enum, default_value = "clothing-change")]
    split: SettingArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// key=value pipeline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Final checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch report CSV.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Directory for the periodic checkpoints requested by `checkpoint_every`.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Extra key=value overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "clothing-change")]
    setting: SettingArg,
    #[arg(long, value_enum, default_value = "single")]
    shot: ShotArg,
    /// Keep same-identity gallery entries from the query's camera.
    #[arg(long)]
    keep_same_camera: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    ranks: Vec<usize>,
    /// Seed for the single-shot gallery draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics report (key=value); printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    ap_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ClusterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    eps: f64,
    #[arg(long, default_value_t = 4)]
    min_samples: usize,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenWorld(args) => gen_world(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Cluster(args) => cluster(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn gen_world(args: GenWorldArgs) -> Result<(), Failure> {
    let config = WorldConfig {
        num_identities: args.num_identities,
        clothes_per_identity: args.clothes_per_identity,
        samples_per_identity_clothing: args.samples_per_identity_clothing,
        num_cameras: args.num_cameras,
        embedding_dim: args.embedding_dim,
        identity_dim: args.identity_dim,
        clothing_dim: args.clothing_dim,
        identity_scale: args.identity_scale,
        clothing_scale: args.clothing_scale,
        noise_scale: args.noise_scale,
        train_identities: args.train_identities,
        split: args.split.into(),
        seed: args.seed,
    };
    config.validate().map_err(config_err)?;
    let (_, dataset) = generate_world(&config).context("generating world")?;
    write_dataset(&args.out, &dataset).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = args.csv {
        let mut f = std::io::BufWriter::new(fs::File::create(&path).context("creating csv")?);
        write_csv(&mut f, &dataset.samples).context("writing csv")?;
    }
    println!("wrote {} samples to {}", dataset.samples.len(), args.out.display());
    Ok(())
}

/// Reads a dataset and rebuilds the world it was generated from; the clothing
/// swap needs the world's hidden maps.
fn load_world(path: &Path) -> Result<(World, Dataset), Failure> {
    let dataset = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    let (world, regenerated) = generate_world(&dataset.config).context("rebuilding world")?;
    if regenerated != dataset {
        return Err(anyhow!("{} does not match the world its header describes", path.display()).into());
    }
    Ok((world, dataset))
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(config_err)?;
            PipelineConfig::parse(&text).map_err(config_err)?
        }
        None => PipelineConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err(anyhow!("expected KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim()).map_err(config_err)?;
    }
    config.validate().map_err(config_err)?;
    if config.checkpoint_every > 0 && args.checkpoint_dir.is_none() {
        return Err(config_err(anyhow!("checkpoint_every needs --checkpoint-dir")));
    }
    let (world, dataset) = load_world(&args.dataset)?;

    let every = config.checkpoint_every;
    let dir = args.checkpoint_dir.clone();
    let outcome = run_training(&config, world, dataset, |report, state| {
        eprintln!(
            "epoch {:>3}  clusters {:>3}  noise {:>3}  l_q {:.4}  l_s {:.6}  lr {:.3e}",
            report.epoch, report.num_clusters, report.num_noise, report.mean_l_q, report.mean_l_s, report.lr
        );
        if let (Some(dir), true) = (&dir, every > 0 && report.epoch % every == 0) {
            let path = dir.join(format!("epoch_{:04}.ckpt", report.epoch));
            write_checkpoint(&path, &state.checkpoint())?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        PipelineError::Config(_) => config_err(e),
        other => Failure::Runtime(other.into()),
    })?;
    write_checkpoint(&args.out, &outcome.state.checkpoint()).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.reports {
        write_reports_csv(path, &outcome.reports).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let protocol = EvalProtocol {
        setting: args.setting.into(),
        shot: match args.shot {
            ShotArg::Single => Shot::Single,
            ShotArg::Multi => Shot::Multi,
        },
        exclude_same_camera: !args.keep_same_camera,
        ranks: args.ranks,
        seed: args.seed,
    };
    protocol.validate().map_err(config_err)?;
    let ckpt = read_checkpoint(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let dataset = read_dataset(&args.dataset).with_context(|| format!("reading {}", args.dataset.display()))?;
    let metrics = evaluate_encoder(&ckpt.params, &dataset, &protocol).context("evaluating")?;
    match &args.report {
        Some(path) => metrics.write_report(path).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", metrics.report()),
    }
    if let Some(path) = &args.ap_csv {
        metrics.write_ap_csv(path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cluster(args: ClusterArgs) -> Result<(), Failure> {
    if !(args.eps.is_finite() && args.eps >= 0.0) || args.min_samples == 0 {
        return Err(config_err(anyhow!("eps must be >= 0 and min_samples >= 1")));
    }
    let ckpt = read_checkpoint(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let dataset = read_dataset(&args.dataset).with_context(|| format!("reading {}", args.dataset.display()))?;
    let train = dataset.with_role(Role::Train);
    let features = encode_samples(&ckpt.params, &train).context("encoding")?;
    let labeling = dbscan(&features, args.eps, args.min_samples).context("clustering")?;
    let mut f = std::io::BufWriter::new(fs::File::create(&args.out).context("creating output")?);
    labeling.write_csv(&mut f).context("writing labels")?;
    println!("{} clusters, {} noise samples", labeling.num_clusters(), labeling.num_noise());
    Ok(())
}
