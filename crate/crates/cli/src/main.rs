use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modetr::data::{generate_samples, read_dataset, write_dataset, SceneSpec};
use modetr::evaluation::{map_report, MetricReport, ScoredDetection};
use modetr::run::{check_dataset, evaluate, export_attention, prepare, Checkpoint, RunConfig, StepLog, Trainer};
use modetr::Error;

#[derive(Parser)]
#[command(name = "modetr", version, about = "Moving-object detection transformer on synthetic two-frame scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(EvalArgs),
    /// Write decoder cross-attention maps for one sample.
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene spec JSON; defaults apply to omitted fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Enables default ego motion when the spec does not set it.
    #[arg(long)]
    ego_motion: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON; optional when resuming.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Training dataset; defaults to the config's `train_data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint until the configured step count.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "detections")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score precomputed per-sample detections instead of running a model.
    #[arg(long, hide = true)]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> modetr::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        field: field.to_string(),
        msg: e.to_string(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> modetr::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate(args: GenerateArgs) -> modetr::Result<()> {
    let mut spec: SceneSpec = match &args.spec {
        Some(path) => read_json(path, "spec")?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.ego_motion && spec.ego_motion.is_none() {
        spec.ego_motion = SceneSpec::with_ego_motion().ego_motion;
    }
    spec.validate()?;
    let samples = generate_samples(&spec, args.count)?;
    write_dataset(&args.out, Some(&spec), &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> modetr::Result<()> {
    let config = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut trainer = match (&args.resume, config) {
        (Some(path), config) => {
            let mut trainer = Checkpoint::load(path)?.into_trainer()?;
            if let Some(config) = config {
                if config.model != trainer.config.model {
                    return Err(Error::Config {
                        field: "model".into(),
                        msg: "differs from the checkpoint being resumed".into(),
                    });
                }
                trainer.optimizer.config = config.optimizer.clone();
                trainer.config = config;
            }
            trainer
        }
        (None, Some(config)) => Trainer::new(config)?,
        (None, None) => unreachable!("clap requires --config without --resume"),
    };
    let data_dir = args
        .data
        .clone()
        .or_else(|| trainer.config.train_data.clone())
        .ok_or_else(|| Error::Config {
            field: "train_data".into(),
            msg: "no dataset given by --data or the config".into(),
        })?;
    let dataset = read_dataset(&data_dir)?;
    let data = prepare(&dataset, &trainer.config.model)?;
    if data.is_empty() && trainer.step < trainer.config.steps {
        return Err(Error::Contract("training set is empty".into()));
    }
    println!("{}", StepLog::HEADER);
    let every = trainer.config.checkpoint_every;
    while trainer.step < trainer.config.steps {
        let log = trainer.train_step(&data)?;
        println!("{log}");
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.config.steps {
            Checkpoint::from(&trainer).save(&args.out)?;
        }
    }
    Checkpoint::from(&trainer).save(&args.out)
}

fn eval(args: EvalArgs) -> modetr::Result<()> {
    let dataset = read_dataset(&args.data)?;
    let report: MetricReport = match (&args.detections, &args.ckpt) {
        (Some(path), _) => {
            let dets: Vec<Vec<ScoredDetection>> = read_json(path, "detections")?;
            let gts: Vec<_> = dataset.samples.iter().map(|s| s.objects.clone()).collect();
            map_report(&dets, &gts)?
        }
        (None, Some(ckpt)) => {
            let model = Checkpoint::load(ckpt)?.model()?;
            let data = prepare(&dataset, &model.config)?;
            evaluate(&model, &data)?
        }
        (None, None) => unreachable!("clap requires --ckpt without --detections"),
    };
    write_json(&args.out, &report)?;
    println!(
        "moving: map_total {:.4} map50 {:.4} map75 {:.4}",
        report.moving.map_total, report.moving.map50, report.moving.map75
    );
    Ok(())
}

fn export(args: ExportArgs) -> modetr::Result<()> {
    let model = Checkpoint::load(&args.ckpt)?.model()?;
    let dataset = read_dataset(&args.data)?;
    check_dataset(&dataset, &model.config)?;
    let sample = dataset.samples.get(args.sample).ok_or(Error::Index {
        index: args.sample,
        len: dataset.samples.len(),
    })?;
    let files = export_attention(&model, sample, &args.out)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportAttention(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() || matches!(e, Error::Index { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
