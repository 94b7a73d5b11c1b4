//! Balanced accuracy, activation precision and the incremental deletion
//! score, plus the per-fold evaluation driver and summary reports.

use std::fmt::Write as _;

use maprotonet_tensor::Array;
use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::{resize_trilinear, stack_images, Volume};
use crate::error::{shape_err, Error, Result};
use crate::network::MaProtoNet;

/// `(TPR + TNR) / 2` with class 1 as positive.
pub fn bac(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match y {
            1 => {
                pos += 1;
                tp += usize::from(p == 1);
            }
            0 => {
                neg += 1;
                tn += usize::from(p == 0);
            }
            other => return Err(Error::Metric(format!("label {other} is not binary"))),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("balanced accuracy needs both classes".into()));
    }
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Mean of the `P` attribution maps of one sample, `(P, h, w, d)`,
/// trilinearly up-sampled to `extents`.
pub fn subject_attribution(maps: &Array, extents: [usize; 3]) -> Result<Array> {
    if maps.ndim() != 4 {
        return Err(shape_err!(
            "attribution maps must be (P, H, W, D), got {:?}",
            maps.shape()
        ));
    }
    let mean = maps.mean_axis(Axis(0)).expect("at least one prototype");
    Ok(resize_trilinear(&mean, extents))
}

/// `|mask ∩ {map > threshold}| / |{map > threshold}|`; 0 when nothing is
/// activated.
pub fn activation_precision(map: &Array, mask: &Array, threshold: f64) -> Result<f64> {
    if map.shape() != mask.shape() {
        return Err(shape_err!("map {:?} and mask {:?} differ", map.shape(), mask.shape()));
    }
    let (mut active, mut hit) = (0usize, 0usize);
    for (&m, &t) in map.iter().zip(mask.iter()) {
        if m > threshold {
            active += 1;
            hit += usize::from(t > 0.0);
        }
    }
    Ok(if active == 0 { 0.0 } else { hit as f64 / active as f64 })
}

/// Order in which voxels are deleted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeletionOrder {
    MostActiveFirst,
    LeastActiveFirst,
}

/// Normalised area under a deletion curve sampled at equally spaced
/// deleted fractions `0, 1/s, …, 1`. Values are divided by the first one
/// and clamped to `[0, 1]` before trapezoid integration, so a flat curve
/// scores exactly 1. A zero starting probability counts as a flat curve.
pub fn ids_from_curve(probabilities: &[f64]) -> Result<f64> {
    if probabilities.len() < 2 {
        return Err(Error::Metric("a deletion curve needs at least two points".into()));
    }
    if let Some(p) = probabilities.iter().find(|p| !p.is_finite()) {
        return Err(Error::Metric(format!(
            "non-finite probability {p} on the deletion curve"
        )));
    }
    let p0 = probabilities[0];
    if p0 <= 0.0 {
        return Ok(1.0);
    }
    let q: Vec<f64> = probabilities.iter().map(|p| (p / p0).clamp(0.0, 1.0)).collect();
    let last = q.len() - 1;
    // integrate first, divide once: a flat curve then gives exactly 1
    let area = (q[0] + q[last]) / 2.0 + q[1..last].iter().sum::<f64>();
    Ok(area / last as f64)
}

/// Voxel ranks by activation; ties keep index order so runs are reproducible.
fn deletion_ranking(map: &Array, order: DeletionOrder) -> Vec<usize> {
    let vals: Vec<f64> = map.iter().copied().collect();
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| {
        let c = vals[a].total_cmp(&vals[b]);
        match order {
            DeletionOrder::MostActiveFirst => c.reverse(),
            DeletionOrder::LeastActiveFirst => c,
        }
        .then(a.cmp(&b))
    });
    idx
}

fn softmax_row(logits: &Array, row: usize) -> Vec<f64> {
    let r = logits.index_axis(Axis(0), row);
    let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// True-class probability after deleting (zeroing all channels of) the
/// first `k/steps` of the ranked voxels, for `k = 0..=steps`.
pub fn deletion_curve(
    model: &MaProtoNet,
    image: &Array,
    map: &Array,
    label: usize,
    steps: usize,
    order: DeletionOrder,
    batch: usize,
) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 4 || map.shape() != &s[1..] {
        return Err(shape_err!("image {:?} and map {:?} do not align", s, map.shape()));
    }
    let n_vox = map.len();
    let rank = deletion_ranking(map, order);
    let variants: Vec<Array> = (0..=steps)
        .map(|k| {
            let cut = ((k as f64 / steps as f64) * n_vox as f64).round() as usize;
            let mut x = image.as_standard_layout().into_owned();
            let flat = x.as_slice_mut().expect("standard layout");
            for c in 0..s[0] {
                for &v in &rank[..cut] {
                    flat[c * n_vox + v] = 0.0;
                }
            }
            x
        })
        .collect();
    let mut probs = Vec::with_capacity(variants.len());
    for chunk in variants.chunks(batch.max(1)) {
        let views: Vec<_> = chunk.iter().map(|x| x.view().insert_axis(Axis(0))).collect();
        let xb = ndarray::concatenate(Axis(0), &views).unwrap();
        let out = model.forward(&xb)?;
        for i in 0..chunk.len() {
            probs.push(softmax_row(&out.logits, i)[label]);
        }
    }
    Ok(probs)
}

/// Incremental deletion score of one subject, most active voxels first.
pub fn incremental_deletion_score(
    model: &MaProtoNet,
    image: &Array,
    map: &Array,
    label: usize,
    steps: usize,
) -> Result<f64> {
    ids_from_curve(&deletion_curve(
        model,
        image,
        map,
        label,
        steps,
        DeletionOrder::MostActiveFirst,
        8,
    )?)
}

/// Evaluation knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub ids_steps: usize,
    pub compute_ids: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            ids_steps: 20,
            compute_ids: true,
            batch_size: 8,
        }
    }
}

/// Model outputs for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    /// Full-resolution attribution map.
    pub attribution: Array,
}

/// Runs the model over `volumes` in batches.
pub fn predict(model: &MaProtoNet, volumes: &[Volume], batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(volumes.len());
    let idx: Vec<usize> = (0..volumes.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = stack_images(volumes, chunk)?;
        let fwd = model.forward(&x)?;
        for (row, &i) in chunk.iter().enumerate() {
            let probabilities = softmax_row(&fwd.logits, row);
            let predicted = argmax(&probabilities);
            let maps = fwd.maps.index_axis(Axis(0), row).to_owned();
            out.push(Prediction {
                id: volumes[i].id.clone(),
                label: volumes[i].label,
                predicted,
                probabilities,
                attribution: subject_attribution(&maps, volumes[i].extents())?,
            });
        }
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    // first maximum wins, matching the usual convention
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| {
                if x > bv {
                    (i, x)
                } else {
                    (bi, bv)
                }
            },
        )
        .0
}

/// Per-subject metric values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probability: f64,
    pub ap: Option<f64>,
    pub ids: Option<f64>,
}

/// Metrics of one held-out fold; fractions in `[0, 1]`. AP and IDS are
/// omitted when any subject lacks a mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fold: Option<usize>,
    pub n: usize,
    pub bac: f64,
    pub ap: Option<f64>,
    pub ids: Option<f64>,
    pub subjects: Vec<SubjectMetrics>,
}

/// Scores stored predictions. IDS needs the model and is skipped when
/// `model` is `None`.
pub fn score_predictions(
    predictions: &[Prediction],
    volumes: &[Volume],
    model: Option<&MaProtoNet>,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if predictions.len() != volumes.len() {
        return Err(Error::Metric("predictions and volumes differ in length".into()));
    }
    let masks_complete = volumes.iter().all(|v| v.mask.is_some());
    if !masks_complete {
        log::warn!("some subjects lack masks; AP and IDS are omitted");
    }
    let mut subjects = Vec::with_capacity(volumes.len());
    for (p, v) in predictions.iter().zip(volumes) {
        if p.id != v.id {
            return Err(Error::Metric(format!(
                "prediction {} does not match volume {}",
                p.id, v.id
            )));
        }
        let ap = match (&v.mask, masks_complete) {
            (Some(mask), true) => Some(activation_precision(&p.attribution, mask, cfg.threshold)?),
            _ => None,
        };
        let ids = match model {
            Some(m) if masks_complete && cfg.compute_ids => Some(ids_from_curve(&deletion_curve(
                m,
                &v.image,
                &p.attribution,
                v.label,
                cfg.ids_steps,
                DeletionOrder::MostActiveFirst,
                cfg.batch_size,
            )?)?),
            _ => None,
        };
        subjects.push(SubjectMetrics {
            id: p.id.clone(),
            label: p.label,
            predicted: p.predicted,
            probability: p.probabilities[p.label],
            ap,
            ids,
        });
    }
    let preds: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let mean_of = |f: fn(&SubjectMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = subjects.iter().map(f).collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(EvalResult {
        fold: None,
        n: subjects.len(),
        bac: bac(&preds, &labels)?,
        ap: mean_of(|s| s.ap),
        ids: mean_of(|s| s.ids),
        subjects,
    })
}

/// Predicts and scores one held-out set.
pub fn evaluate(model: &MaProtoNet, volumes: &[Volume], cfg: &EvalConfig) -> Result<EvalResult> {
    let preds = predict(model, volumes, cfg.batch_size)?;
    score_predictions(&preds, volumes, Some(model), cfg)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { mean, sd })
    }

    /// `mean ± sd` in percent with one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.sd)
    }
}

/// Cross-fold aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub bac: MeanSd,
    pub ap: Option<MeanSd>,
    pub ids: Option<MeanSd>,
}

pub fn aggregate(results: &[EvalResult]) -> Result<Aggregate> {
    let bacs: Vec<f64> = results.iter().map(|r| r.bac).collect();
    let opt = |f: fn(&EvalResult) -> Option<f64>| -> Option<MeanSd> {
        let v: Option<Vec<f64>> = results.iter().map(f).collect();
        v.and_then(|v| MeanSd::of(&v))
    };
    Ok(Aggregate {
        folds: results.len(),
        bac: MeanSd::of(&bacs).ok_or_else(|| Error::Metric("no folds to aggregate".into()))?,
        ap: opt(|r| r.ap),
        ids: opt(|r| r.ids),
    })
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ReportLine<'a> {
    Fold {
        fold: Option<usize>,
        n: usize,
        bac: f64,
        ap: Option<f64>,
        ids: Option<f64>,
    },
    Aggregate(&'a Aggregate),
}

/// One JSON record per fold followed by the aggregate.
pub fn report_jsonl(results: &[EvalResult]) -> Result<String> {
    let agg = aggregate(results)?;
    let mut out = String::new();
    for r in results {
        let line = ReportLine::Fold {
            fold: r.fold,
            n: r.n,
            bac: r.bac,
            ap: r.ap,
            ids: r.ids,
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serialises"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&ReportLine::Aggregate(&agg)).expect("plain data serialises"));
    out.push('\n');
    Ok(out)
}

/// Plain-text summary in the layout of the results table.
pub fn table2(model_name: &str, results: &[EvalResult]) -> Result<String> {
    let agg = aggregate(results)?;
    let na = || "n/a".to_string();
    let mut s = String::new();
    writeln!(
        s,
        "{:<16} | {:>12} | {:>12} | {:>12}",
        "Model", "BAC (%)", "AP (%)", "IDS (%) ↓"
    )
    .unwrap();
    writeln!(s, "{}", "-".repeat(62)).unwrap();
    for r in results {
        let label = r.fold.map_or_else(|| "held-out".into(), |f| format!("  fold {f}"));
        writeln!(
            s,
            "{:<16} | {:>12.1} | {:>12} | {:>12}",
            label,
            100.0 * r.bac,
            r.ap.map_or_else(na, |v| format!("{:.1}", 100.0 * v)),
            r.ids.map_or_else(na, |v| format!("{:.1}", 100.0 * v)),
        )
        .unwrap();
    }
    writeln!(
        s,
        "{:<16} | {:>12} | {:>12} | {:>12}",
        model_name,
        agg.bac.percent(),
        agg.ap.map_or_else(na, |m| m.percent()),
        agg.ids.map_or_else(na, |m| m.percent()),
    )
    .unwrap();
    Ok(s)
}

/// Maps with a single value everywhere; used by tests and tools that need a
/// neutral attribution.
pub fn constant_map(extents: [usize; 3], value: f64) -> Array {
    Array::from_elem(IxDyn(&extents), value)
}
