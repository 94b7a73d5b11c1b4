//! Axial overlay panels: the T1CE channel with the up-sampled attribution
//! map alpha-blended on top and the whole-tumour contour traced in green.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use maprotonet_tensor::Array;
use ndarray::{s, Axis};
use serde::Serialize;

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::metrics::subject_attribution;
use crate::network::MaProtoNet;
use crate::training::Provenance;

/// Channel shown underneath the map (T1CE).
pub const T1CE: usize = 1;

const CONTOUR: [u8; 3] = [0, 255, 0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayConfig {
    /// Peak opacity of the map, reached where the map is 1.
    pub alpha: f64,
    pub slices: usize,
    pub channel: usize,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            slices: 5,
            channel: T1CE,
        }
    }
}

/// Which map to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Mean over all prototypes, as used for AP and IDS.
    Mean,
    Prototype(usize),
}

/// The `k` axial slices with the largest mass of `weights` `(H, W, D)`,
/// in ascending depth order. Ties go to the shallower slice.
pub fn select_slices(weights: &Array, k: usize) -> Vec<usize> {
    let depth = weights.shape()[2];
    let mass: Vec<f64> = (0..depth)
        .map(|d| weights.index_axis(Axis(2), d).iter().map(|v| v.max(0.0)).sum())
        .collect();
    let mut order: Vec<usize> = (0..depth).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    order.truncate(k.min(depth));
    order.sort_unstable();
    order
}

/// Jet-like colour ramp on `[0, 1]`.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0;
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Blends a grey value with the heat colour of `map` at opacity
/// `alpha · map`; every channel is clamped to the display range.
pub fn blend(grey: f64, map: f64, alpha: f64) -> [u8; 3] {
    let a = (alpha * map).clamp(0.0, 1.0);
    let g = grey.clamp(0.0, 255.0);
    heat(map).map(|c| ((1.0 - a) * g + a * c).round().clamp(0.0, 255.0) as u8)
}

/// Renders axial slice `depth`; rows run along H, columns along W.
pub fn render_slice(
    image: &Array,
    map: &Array,
    mask: Option<&Array>,
    depth: usize,
    cfg: &OverlayConfig,
) -> Result<RgbImage> {
    let ch = image.index_axis(Axis(0), cfg.channel);
    if ch.shape() != map.shape() {
        return Err(crate::error::shape_err!(
            "map {:?} does not match image extents {:?}",
            map.shape(),
            ch.shape()
        ));
    }
    let (lo, hi) = ch
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let slice = ch.slice(s![.., .., depth]);
    let m = map.slice(s![.., .., depth]);
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let grey = (slice[[r, c]] - lo) / span * 255.0;
            img.put_pixel(c as u32, r as u32, Rgb(blend(grey, m[[r, c]], cfg.alpha)));
        }
    }
    if let Some(mask) = mask {
        let ms = mask.slice(s![.., .., depth]);
        let inside = |r: isize, c: isize| {
            r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && ms[[r as usize, c as usize]] > 0.0
        };
        for r in 0..h as isize {
            for c in 0..w as isize {
                let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dr, dc)| !inside(r + dr, c + dc));
                if inside(r, c) && edge {
                    img.put_pixel(c as u32, r as u32, Rgb(CONTOUR));
                }
            }
        }
    }
    Ok(img)
}

#[derive(Clone, Debug)]
pub struct Panel {
    pub depth: usize,
    pub image: RgbImage,
}

/// Everything exported for one subject.
#[derive(Clone, Debug)]
pub struct Visualization {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub source: MapSource,
    /// Similarity of the subject to every prototype.
    pub similarities: Vec<f64>,
    pub panels: Vec<Panel>,
}

/// Runs the model on one subject and renders the selected slices. Slices
/// follow the mask mass, or the map mass when the subject has no mask.
pub fn visualize(model: &MaProtoNet, volume: &Volume, source: MapSource, cfg: &OverlayConfig) -> Result<Visualization> {
    if cfg.channel >= volume.channels() {
        return Err(Error::Config(format!(
            "channel {} outside 0..{}",
            cfg.channel,
            volume.channels()
        )));
    }
    let x = volume.image.clone().insert_axis(Axis(0));
    let out = model.forward(&x)?;
    let maps = out.maps.index_axis(Axis(0), 0).to_owned();
    let ext = volume.extents();
    let map = match source {
        MapSource::Mean => subject_attribution(&maps, ext)?,
        MapSource::Prototype(p) => {
            if p >= maps.shape()[0] {
                return Err(Error::Config(format!("prototype {p} outside 0..{}", maps.shape()[0])));
            }
            subject_attribution(&maps.slice(s![p..p + 1, .., .., ..]).to_owned().into_dyn(), ext)?
        }
    };
    let slices = select_slices(volume.mask.as_ref().unwrap_or(&map), cfg.slices);
    let panels = slices
        .into_iter()
        .map(|depth| {
            Ok(Panel {
                depth,
                image: render_slice(&volume.image, &map, volume.mask.as_ref(), depth, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = out.logits.index_axis(Axis(0), 0).iter().copied().collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
    let probabilities: Vec<f64> = logits.iter().map(|l| (l - top).exp() / z).collect();
    let predicted = probabilities
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > probabilities[best] { i } else { best });
    Ok(Visualization {
        id: volume.id.clone(),
        label: volume.label,
        predicted,
        probabilities,
        source,
        similarities: out.scores.index_axis(Axis(0), 0).iter().copied().collect(),
        panels,
    })
}

#[derive(Serialize)]
struct Summary<'a> {
    id: &'a str,
    label: usize,
    predicted: usize,
    probabilities: &'a [f64],
    source: MapSource,
    slices: Vec<usize>,
    prototypes: Vec<PrototypeRow<'a>>,
}

#[derive(Serialize)]
struct PrototypeRow<'a> {
    prototype: usize,
    class: usize,
    similarity: f64,
    source_sample: Option<&'a str>,
    push_distance: Option<f64>,
}

/// Writes one PNG per panel plus `summary.json` with similarities and push
/// provenance; returns the written paths.
pub fn write_visualization(
    dir: &Path,
    vis: &Visualization,
    model: &MaProtoNet,
    provenance: &[Provenance],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tag = match vis.source {
        MapSource::Mean => "mean".to_string(),
        MapSource::Prototype(p) => format!("proto{p:03}"),
    };
    let mut written = Vec::new();
    for panel in &vis.panels {
        let path = dir.join(format!("{}_{tag}_z{:03}.png", vis.id, panel.depth));
        panel.image.save(&path).map_err(|e| Error::Volume {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        written.push(path);
    }
    let prototypes = vis
        .similarities
        .iter()
        .enumerate()
        .map(|(p, &similarity)| {
            let prov = provenance.iter().find(|r| r.prototype == p);
            PrototypeRow {
                prototype: p,
                class: model.config.class_of(p),
                similarity,
                source_sample: prov.map(|r| r.sample_id.as_str()),
                push_distance: prov.map(|r| r.distance),
            }
        })
        .collect();
    let summary = Summary {
        id: &vis.id,
        label: vis.label,
        predicted: vis.predicted,
        probabilities: &vis.probabilities,
        source: vis.source,
        slices: vis.panels.iter().map(|p| p.depth).collect(),
        prototypes,
    };
    let path = dir.join(format!("{}_{tag}_summary.json", vis.id));
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn slices_follow_mass() {
        let mut w = Array::zeros(IxDyn(&[4, 4, 8]));
        for (d, m) in [(6, 5.0), (1, 4.0), (3, 3.0)] {
            w[[0, 0, d]] = m;
        }
        assert_eq!(select_slices(&w, 2), vec![1, 6]);
        assert_eq!(select_slices(&w, 20).len(), 8);
    }

    #[test]
    fn blend_clamps_and_keeps_grey_without_map() {
        assert_eq!(blend(100.0, 0.0, 0.6), [100, 100, 100]);
        assert_eq!(blend(400.0, 0.0, 0.6), [255, 255, 255]);
        assert_eq!(blend(-3.0, 5.0, 2.0), blend(0.0, 1.0, 1.0));
    }

    #[test]
    fn contour_marks_mask_border() {
        let image = Array::zeros(IxDyn(&[2, 6, 6, 1]));
        let map = Array::zeros(IxDyn(&[6, 6, 1]));
        let mut mask = Array::zeros(IxDyn(&[6, 6, 1]));
        for r in 1..5 {
            for c in 1..5 {
                mask[[r, c, 0]] = 1.0;
            }
        }
        let img = render_slice(&image, &map, Some(&mask), 0, &OverlayConfig::default()).unwrap();
        assert_eq!(img.get_pixel(1, 1).0, CONTOUR);
        assert_ne!(img.get_pixel(2, 2).0, CONTOUR);
        assert_ne!(img.get_pixel(0, 0).0, CONTOUR);
    }
}
