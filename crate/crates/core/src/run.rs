//! Whole runs driven by a [`RunConfig`]: fold-wise training with
//! checkpoints, held-out evaluation, prototype re-push and overlay export.
//!
//! Training writes into a hidden `.NAME.partial` sibling of the output
//! directory and renames it into place only after every fold finished, so
//! a failed run leaves no artifacts. A killed run leaves the staging
//! directory behind and can be resumed from its per-block checkpoints.

use std::path::{Path, PathBuf};

use crate::checkpoint::{history_jsonl, Checkpoint};
use crate::config::RunConfig;
use crate::data::{labels_of, make_folds, split_fold, Volume};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, report_jsonl, table2, EvalResult};
use crate::network::{MaProtoNet, ModelConfig};
use crate::training::{fold_model_seed, pick, push_prototypes, run_training, Provenance, TrainState};
use crate::visualize::{visualize, write_visualization, MapSource, OverlayConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const TABLE_FILE: &str = "table.txt";

pub fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold{fold}"))
}

/// Hidden sibling that holds an unfinished run.
pub fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no final component", out.display())))?;
    let parent = out.parent().unwrap_or(Path::new(""));
    Ok(parent.join(format!(".{}.partial", name.to_string_lossy())))
}

/// Row label used in result tables.
pub fn model_name(cfg: &ModelConfig) -> String {
    match (cfg.use_quadruplet, cfg.use_multiscale && cfg.n_scale > 1) {
        (true, true) => format!("MAProtoNet-{}", cfg.fusion_variant),
        (true, false) => "MProtoNet + Q".into(),
        (false, true) => "MProtoNet + MS".into(),
        (false, false) => "MProtoNet".into(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Subject indices of fold `fold` as `(train, held_out)`.
fn split(cfg: &RunConfig, data: &[Volume], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let folds = make_folds(&labels_of(data, &all), cfg.data.folds, cfg.train.seed)?;
    Ok(split_fold(&folds, fold))
}

/// Trains every requested fold into `out` and evaluates each on its
/// held-out part. `out` must not exist yet.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: bool) -> Result<Vec<EvalResult>> {
    cfg.validate()?;
    if out.exists() {
        return Err(Error::Config(format!(
            "output directory {} already exists",
            out.display()
        )));
    }
    let stage = staging_dir(out)?;
    if stage.exists() {
        if !resume {
            return Err(Error::Config(format!(
                "an unfinished run is staged at {}; resume it or remove it",
                stage.display()
            )));
        }
        let staged = std::fs::read_to_string(stage.join(CONFIG_FILE)).map_err(|e| Error::io(&stage, e))?;
        if staged != cfg.to_toml() {
            return Err(Error::Config(format!(
                "the run staged at {} used a different configuration",
                stage.display()
            )));
        }
    }
    let data = cfg.load_data()?;
    if data.is_empty() {
        return Err(Error::Data("the data source holds no subjects".into()));
    }
    std::fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    match train_into(cfg, &data, &stage) {
        Ok(results) => {
            std::fs::rename(&stage, out).map_err(|e| Error::io(out, e))?;
            Ok(results)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}

fn train_into(cfg: &RunConfig, data: &[Volume], root: &Path) -> Result<Vec<EvalResult>> {
    write(&root.join(CONFIG_FILE), &cfg.to_toml())?;
    let recipe = cfg.recipe();
    let folds: Vec<usize> = cfg.data.fold.map_or_else(|| (0..cfg.data.folds).collect(), |f| vec![f]);
    let mut results = Vec::with_capacity(folds.len());
    for f in folds {
        let dir = fold_dir(root, f);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (train, val) = split(cfg, data, f)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let snapshot = RunConfig {
            data: crate::config::DataConfig {
                fold: Some(f),
                ..cfg.data.clone()
            },
            ..cfg.clone()
        }
        .to_toml();
        let (mut model, mut state) = if ckpt.exists() {
            let ck = Checkpoint::load(&ckpt)?;
            let state = ck
                .state
                .ok_or_else(|| Error::Checkpoint(format!("{} has no training state", ckpt.display())))?;
            log::info!("fold {f}: resuming at cycle {} ({:?})", state.cycle, state.stage);
            (ck.model, state)
        } else {
            let model = MaProtoNet::new(cfg.model.clone(), fold_model_seed(cfg.train.seed, f))?;
            (model, TrainState::new(&cfg.train))
        };
        if !state.is_done() {
            log::info!("fold {f}: {} training / {} held-out subjects", train.len(), val.len());
            run_training(
                &mut model,
                &mut state,
                &recipe,
                data,
                &train,
                Some(&val),
                &mut |m, s| {
                    Checkpoint {
                        model: m.clone(),
                        state: Some(s.clone()),
                        run_config: Some(snapshot.clone()),
                    }
                    .save(&ckpt)
                },
            )?;
        }
        write(&dir.join(HISTORY_FILE), &history_jsonl(&state.history))?;
        let mut r = evaluate(&model, &pick(data, &val), &cfg.eval)?;
        r.fold = Some(f);
        log::info!("fold {f}: held-out BAC {:.3}", r.bac);
        results.push(r);
    }
    write(&root.join(REPORT_FILE), &report_jsonl(&results)?)?;
    write(&root.join(TABLE_FILE), &table2(&model_name(&cfg.model), &results)?)?;
    Ok(results)
}

/// A checkpoint together with the run configuration it was trained under,
/// after applying `overrides`.
pub struct LoadedRun {
    pub checkpoint: Checkpoint,
    pub config: RunConfig,
}

pub fn load_run(path: &Path, config: Option<&Path>, overrides: &[String]) -> Result<LoadedRun> {
    let checkpoint = Checkpoint::load(path)?;
    let config = match config {
        Some(c) => RunConfig::load(c, overrides)?,
        None => {
            let text = checkpoint.run_config.as_deref().ok_or_else(|| {
                Error::Config(format!(
                    "{} stores no run configuration; pass one explicitly",
                    path.display()
                ))
            })?;
            RunConfig::from_toml(text, overrides)?
        }
    };
    if config.model != checkpoint.model.config {
        return Err(Error::Config(format!(
            "the model section disagrees with the architecture stored in {}",
            path.display()
        )));
    }
    Ok(LoadedRun { checkpoint, config })
}

/// Which subjects a command looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subjects {
    /// The held-out part of the configured fold.
    HeldOut,
    /// The training part of the configured fold.
    Training,
    All,
}

fn select(cfg: &RunConfig, data: &[Volume], which: Subjects) -> Result<(Option<usize>, Vec<usize>)> {
    if which == Subjects::All {
        return Ok((None, (0..data.len()).collect()));
    }
    let f = cfg
        .data
        .fold
        .ok_or_else(|| Error::Config("data.fold is unset; pick a fold or use every subject".into()))?;
    let (train, val) = split(cfg, data, f)?;
    Ok((Some(f), if which == Subjects::Training { train } else { val }))
}

/// Evaluates every checkpoint on its own held-out fold (or every subject).
/// Consecutive checkpoints that share a data section share one load.
pub fn evaluate_checkpoints(
    paths: &[PathBuf],
    config: Option<&Path>,
    overrides: &[String],
    which: Subjects,
) -> Result<(String, Vec<EvalResult>)> {
    let mut cached: Option<(crate::config::DataConfig, Vec<Volume>)> = None;
    let mut results = Vec::with_capacity(paths.len());
    let mut name = String::new();
    for path in paths {
        let run = load_run(path, config, overrides)?;
        let cfg = &run.config;
        let fresh = match &cached {
            Some((d, _)) => d != &cfg.data,
            None => true,
        };
        if fresh {
            cached = Some((cfg.data.clone(), cfg.load_data()?));
        }
        let data = &cached.as_ref().expect("loaded above").1;
        let (fold, idx) = select(cfg, data, which)?;
        let mut r = evaluate(&run.checkpoint.model, &pick(data, &idx), &cfg.eval)?;
        r.fold = fold;
        name = model_name(&cfg.model);
        results.push(r);
    }
    Ok((name, results))
}

/// Pushes the prototypes of a trained model again onto its training split
/// and records the new provenance in the returned checkpoint.
pub fn repush(run: LoadedRun) -> Result<(Checkpoint, Vec<Provenance>)> {
    let LoadedRun { mut checkpoint, config } = run;
    let data = config.load_data()?;
    let (_, idx) = select(&config, &data, Subjects::Training)?;
    let prov = push_prototypes(&mut checkpoint.model, &data, &idx, config.train.batch_size)?;
    if let Some(state) = &mut checkpoint.state {
        state.provenance = prov.clone();
    }
    Ok((checkpoint, prov))
}

/// Renders overlays for the chosen subjects (by id, or the whole selection
/// when `ids` is empty); returns every written file.
pub fn export_overlays(
    run: &LoadedRun,
    which: Subjects,
    ids: &[String],
    source: MapSource,
    overlay: &OverlayConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let data = run.config.load_data()?;
    let chosen: Vec<&Volume> = if ids.is_empty() {
        let (_, idx) = select(&run.config, &data, which)?;
        idx.iter().map(|&i| &data[i]).collect()
    } else {
        ids.iter()
            .map(|id| {
                data.iter()
                    .find(|v| &v.id == id)
                    .ok_or_else(|| Error::Data(format!("no subject with id {id}")))
            })
            .collect::<Result<_>>()?
    };
    let provenance = run.checkpoint.state.as_ref().map_or(&[][..], |s| &s.provenance[..]);
    let mut written = Vec::new();
    for v in chosen {
        let vis = visualize(&run.checkpoint.model, v, source, overlay)?;
        written.extend(write_visualization(out, &vis, &run.checkpoint.model, provenance)?);
    }
    Ok(written)
}
