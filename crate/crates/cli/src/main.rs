use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use maprotonet::config::RunConfig;
use maprotonet::data::{write_synth_dataset, SynthConfig};
use maprotonet::metrics::{report_jsonl, table2};
use maprotonet::run::{self, Subjects, REPORT_FILE, TABLE_FILE};
use maprotonet::visualize::{MapSource, OverlayConfig};

#[derive(Parser)]
#[command(
    name = "maprotonet",
    version,
    about = "Prototype-based classification of 3D multi-modal volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured fold and evaluate each on its held-out part.
    Train(TrainArgs),
    /// Score checkpoints: balanced accuracy, activation precision, deletion score.
    Eval(EvalArgs),
    /// Show prototype provenance, or push the prototypes again.
    Push(PushArgs),
    /// Export attribution overlays as PNG slices.
    Visualize(VisualizeArgs),
    /// Write a synthetic NIfTI dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; must not exist.
    #[arg(long)]
    out: PathBuf,
    /// Continue an interrupted run staged next to `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Configuration replacing the one stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; repeat for several folds.
    #[arg(long = "checkpoint", required_unless_present = "run")]
    checkpoints: Vec<PathBuf>,
    /// Training output directory; scores every `fold*/model.ckpt` inside.
    #[arg(long, conflicts_with = "checkpoints")]
    run: Option<PathBuf>,
    #[command(flatten)]
    cfg: CheckpointArgs,
    /// Score every subject of the data source instead of the held-out fold.
    #[arg(long)]
    all_subjects: bool,
    /// Directory for `report.jsonl` and `table.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PushArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: CheckpointArgs,
    /// Push again onto the training split and save the result here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: CheckpointArgs,
    /// Subject id; repeat for several. Defaults to the held-out fold.
    #[arg(long = "subject")]
    subjects: Vec<String>,
    /// Draw a single prototype's map instead of the mean over prototypes.
    #[arg(long)]
    prototype: Option<usize>,
    #[arg(long, default_value_t = 5)]
    slices: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// `C,H,W,D`.
    #[arg(long, default_value = "4,32,32,24", value_parser = parse_shape)]
    shape: [usize; 4],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("{p:?} is not a size")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected four comma-separated sizes".to_string())
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(match &args.config {
        Some(path) => RunConfig::load(path, &args.overrides)?,
        None => RunConfig::from_toml(&RunConfig::synthetic_default().to_toml(), &args.overrides)?,
    })
}

fn fold_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let f = name.strip_prefix("fold")?.parse().ok()?;
            let ckpt = e.path().join(run::CHECKPOINT_FILE);
            ckpt.exists().then_some((f, ckpt))
        })
        .collect();
    found.sort();
    if found.is_empty() {
        bail!("no fold checkpoints under {}", dir.display());
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = run_config(&args.cfg)?;
    let results = run::train_run(&cfg, &args.out, args.resume)?;
    print!("{}", table2(&run::model_name(&cfg.model), &results)?);
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let paths = match &args.run {
        Some(dir) => fold_checkpoints(dir)?,
        None => args.checkpoints.clone(),
    };
    let which = if args.all_subjects {
        Subjects::All
    } else {
        Subjects::HeldOut
    };
    let (name, results) = run::evaluate_checkpoints(&paths, args.cfg.config.as_deref(), &args.cfg.overrides, which)?;
    let report = report_jsonl(&results)?;
    let table = table2(&name, &results)?;
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join(REPORT_FILE), &report)?;
        std::fs::write(out.join(TABLE_FILE), &table)?;
    } else {
        print!("{report}");
    }
    Ok(())
}

fn push(args: PushArgs) -> Result<()> {
    let loaded = run::load_run(&args.checkpoint, args.cfg.config.as_deref(), &args.cfg.overrides)?;
    let (checkpoint, provenance) = match &args.out {
        Some(_) => {
            let (ck, prov) = run::repush(loaded)?;
            (Some(ck), prov)
        }
        None => {
            let state = loaded.checkpoint.state.as_ref();
            let prov = state.map(|s| s.provenance.clone()).unwrap_or_default();
            if prov.is_empty() {
                bail!("{} records no push yet", args.checkpoint.display());
            }
            (None, prov)
        }
    };
    println!(
        "{:>9}  {:>5}  {:<24}  {:>12}",
        "prototype", "class", "source", "distance"
    );
    for p in &provenance {
        println!(
            "{:>9}  {:>5}  {:<24}  {:>12.6}",
            p.prototype, p.class, p.sample_id, p.distance
        );
    }
    if let (Some(ck), Some(out)) = (checkpoint, &args.out) {
        ck.save(out)?;
        println!("saved {}", out.display());
    }
    Ok(())
}

fn visualize(args: VisualizeArgs) -> Result<()> {
    let loaded = run::load_run(&args.checkpoint, args.cfg.config.as_deref(), &args.cfg.overrides)?;
    let source = args.prototype.map_or(MapSource::Mean, MapSource::Prototype);
    let overlay = OverlayConfig {
        alpha: args.alpha,
        slices: args.slices,
        ..OverlayConfig::default()
    };
    let written = run::export_overlays(&loaded, Subjects::HeldOut, &args.subjects, source, &overlay, &args.out)?;
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(args.n, args.shape, args.seed);
    let manifest = write_synth_dataset(&args.out, &cfg)?;
    println!("{} subjects, manifest {}", args.n, manifest.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Push(a) => push(a),
        Command::Visualize(a) => visualize(a),
        Command::Synth(a) => synth(a),
    }
}
