use maprotonet_tensor::{Array, Boundary, SpatialMap};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::{RawSubject, Volume};
use crate::error::{shape_err, Result};

pub const SD_FLOOR: f64 = 1e-6;

/// Geometry of the preprocessing pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub crop: [usize; 3],
    pub target: [usize; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop: [192, 192, 144],
            target: [128, 128, 96],
        }
    }
}

/// Centre crop of the trailing three axes.
pub fn center_crop(x: &Array, crop: [usize; 3]) -> Result<Array> {
    let nd = x.ndim();
    let ext = &x.shape()[nd - 3..];
    if (0..3).any(|a| crop[a] > ext[a]) {
        return Err(shape_err!("crop window {crop:?} exceeds extents {ext:?}"));
    }
    let off: Vec<usize> = (0..3).map(|a| (ext[a] - crop[a]) / 2).collect();
    let mut v = x.view();
    for a in 0..3 {
        v.slice_axis_inplace(Axis(nd - 3 + a), ndarray::Slice::from(off[a]..off[a] + crop[a]));
    }
    Ok(v.to_owned())
}

/// Source coordinate of output index `o` under half-pixel alignment.
fn half_pixel(o: usize, input: usize, output: usize) -> f64 {
    (o as f64 + 0.5) * input as f64 / output as f64 - 0.5
}

/// Trilinear resize of the trailing three axes (half-pixel alignment,
/// edge clamping). Matching extents are returned unchanged.
pub fn resize_trilinear(x: &Array, target: [usize; 3]) -> Array {
    let nd = x.ndim();
    let ext = [x.shape()[nd - 3], x.shape()[nd - 2], x.shape()[nd - 1]];
    if ext == target {
        return x.clone();
    }
    let map = SpatialMap::trilinear(ext, target, Boundary::Clamp, |o| {
        [
            half_pixel(o[0], ext[0], target[0]),
            half_pixel(o[1], ext[1], target[1]),
            half_pixel(o[2], ext[2], target[2]),
        ]
    });
    map.apply_array(x)
}

/// Nearest-neighbour resize of a binary `(H, W, D)` mask.
pub fn resize_mask(mask: &Array, target: [usize; 3]) -> Array {
    let ext = [mask.shape()[0], mask.shape()[1], mask.shape()[2]];
    if ext == target {
        return mask.clone();
    }
    let map = SpatialMap::nearest(ext, target, |o| {
        [0, 1, 2].map(|a| {
            let c = half_pixel(o[a], ext[a], target[a]);
            // ties round down so the map stays inside the grid
            (c - 1e-9).round().clamp(0.0, (ext[a] - 1) as f64)
        })
    });
    map.apply_array(mask)
}

/// Z-scores every channel of a `(C, H, W, D)` image over its nonzero
/// voxels; zero voxels stay zero. The standard deviation is floored at
/// [`SD_FLOOR`].
pub fn z_score_nonzero(image: &mut Array) {
    for mut ch in image.axis_iter_mut(Axis(0)) {
        let (mut n, mut sum) = (0usize, 0.0);
        for &v in ch.iter() {
            if v != 0.0 {
                n += 1;
                sum += v;
            }
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = ch
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = var.sqrt().max(SD_FLOOR);
        ch.mapv_inplace(|v| if v != 0.0 { (v - mean) / sd } else { 0.0 });
    }
}

/// Crop, resample and normalise a raw subject. Inputs already at the
/// target grid skip the geometric steps.
pub fn preprocess(raw: &RawSubject, cfg: &PreprocessConfig) -> Result<Volume> {
    if raw.image.ndim() != 4 {
        return Err(shape_err!(
            "raw image must be (C, H, W, D), got {:?}",
            raw.image.shape()
        ));
    }
    let ext = [raw.image.shape()[1], raw.image.shape()[2], raw.image.shape()[3]];
    let (mut image, mask) = if ext == cfg.target {
        (raw.image.clone(), raw.mask.clone())
    } else {
        let cropped = center_crop(&raw.image, cfg.crop)?;
        let mask = match &raw.mask {
            Some(m) => Some(resize_mask(&center_crop(m, cfg.crop)?, cfg.target)),
            None => None,
        };
        (resize_trilinear(&cropped, cfg.target), mask)
    };
    z_score_nonzero(&mut image);
    Ok(Volume {
        id: raw.id.clone(),
        image,
        mask,
        label: raw.label,
    })
}
