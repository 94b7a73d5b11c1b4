use maprotonet_tensor::Array;
use ndarray::{Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{resize_trilinear, Volume};
use crate::affine::{AffineRange, AffineSpec};

/// Trigger probabilities and magnitudes of the eight augmentation steps.
/// Magnitudes follow common nnU-Net-style defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_rotate_scale: f64,
    pub p_noise: f64,
    pub p_blur: f64,
    pub p_brightness: f64,
    pub p_contrast: f64,
    pub p_low_res: f64,
    pub p_gamma: f64,
    pub p_mirror: f64,
    pub affine: AffineRange,
    /// Noise variance is drawn from `[0, noise_var_max]`.
    pub noise_var_max: f64,
    pub blur_sigma: [f64; 2],
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    /// Fraction of the original resolution kept by the low-resolution step.
    pub low_res_zoom: [f64; 2],
    pub gamma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate_scale: 0.2,
            p_noise: 0.2,
            p_blur: 0.2,
            p_brightness: 0.2,
            p_contrast: 0.2,
            p_low_res: 0.2,
            p_gamma: 0.2,
            p_mirror: 0.2,
            affine: AffineRange {
                max_angle_deg: 15.0,
                min_scale: 0.85,
                max_scale: 1.15,
            },
            noise_var_max: 0.1,
            blur_sigma: [0.5, 1.0],
            brightness: [0.75, 1.25],
            contrast: [0.75, 1.25],
            low_res_zoom: [0.5, 1.0],
            gamma: [0.7, 1.5],
        }
    }
}

impl AugmentConfig {
    /// Every trigger disabled.
    pub fn off() -> Self {
        Self {
            p_rotate_scale: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_low_res: 0.0,
            p_gamma: 0.0,
            p_mirror: 0.0,
            ..Self::default()
        }
    }

    fn probabilities(&self) -> [f64; 8] {
        [
            self.p_rotate_scale,
            self.p_noise,
            self.p_blur,
            self.p_brightness,
            self.p_contrast,
            self.p_low_res,
            self.p_gamma,
            self.p_mirror,
        ]
    }
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Rotation and scaling about the grid centre; the mask follows with
/// nearest-neighbour sampling.
pub fn rotate_scale(v: &mut Volume, spec: &AffineSpec) {
    let ext = v.extents();
    v.image = spec.spatial_map(ext).apply_array(&v.image);
    if let Some(m) = &v.mask {
        v.mask = Some(spec.nearest_map(ext).apply_array(m));
    }
}

/// Flips the listed spatial axes (0 = H, 1 = W, 2 = D) of image and mask.
pub fn mirror(v: &mut Volume, axes: [bool; 3]) {
    for (a, flip) in axes.into_iter().enumerate() {
        if flip {
            v.image.invert_axis(Axis(a + 1));
            if let Some(m) = &mut v.mask {
                m.invert_axis(Axis(a));
            }
        }
    }
    v.image = v.image.as_standard_layout().into_owned();
    v.mask = v.mask.take().map(|m| m.as_standard_layout().into_owned());
}

/// Separable Gaussian blur of one `(H, W, D)` channel with clamped edges.
pub fn gaussian_blur(ch: &Array, sigma: f64) -> Array {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = ch.clone();
    for axis in 0..3 {
        let mut out = cur.clone();
        Zip::from(out.lanes_mut(Axis(axis)))
            .and(cur.lanes(Axis(axis)))
            .for_each(|mut o, i| {
                let n = i.len() as isize;
                for j in 0..n {
                    o[j as usize] = kernel
                        .iter()
                        .enumerate()
                        .map(|(t, k)| k * i[(j + t as isize - r).clamp(0, n - 1) as usize])
                        .sum();
                }
            });
        cur = out;
    }
    cur
}

/// Gamma transform over the nonzero voxels of one channel: values are
/// mapped to `[0, 1]`, raised to `gamma` and mapped back.
pub fn gamma_transform(ch: &mut Array, gamma: f64) {
    let (lo, hi) = ch
        .iter()
        .filter(|&&v| v != 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    // an all-zero channel leaves range at -inf
    if !range.is_finite() || range <= 1e-12 || gamma == 1.0 {
        return;
    }
    ch.mapv_inplace(|v| {
        if v != 0.0 {
            ((v - lo) / range).powf(gamma) * range + lo
        } else {
            0.0
        }
    });
}

/// Contrast scaling about the mean of the nonzero voxels, clipped to the
/// original range.
fn contrast(ch: &mut Array, factor: f64) {
    let vals: Vec<f64> = ch.iter().copied().filter(|&v| v != 0.0).collect();
    if vals.is_empty() {
        return;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ch.mapv_inplace(|v| {
        if v != 0.0 {
            ((v - mean) * factor + mean).clamp(lo, hi)
        } else {
            0.0
        }
    });
}

/// Applies the eight steps in order, each with its own trigger. Intensity
/// steps draw per-channel magnitudes. The label never changes.
pub fn augment<R: Rng>(volume: &Volume, cfg: &AugmentConfig, rng: &mut R) -> Volume {
    let mut v = volume.clone();
    let p = cfg.probabilities();
    // draw every trigger up front so one step's randomness does not shift another's
    let fire: Vec<bool> = p.iter().map(|&p| p > 0.0 && rng.gen::<f64>() < p).collect();
    let ext = v.extents();
    if fire[0] {
        rotate_scale(&mut v, &AffineSpec::sample(rng, &cfg.affine));
    }
    if fire[1] {
        let var = uniform(rng, [0.0, cfg.noise_var_max]);
        if var > 0.0 {
            let normal = Normal::new(0.0, var.sqrt()).expect("finite sd");
            v.image.mapv_inplace(|x| x + normal.sample(rng));
        }
    }
    if fire[2] {
        for c in 0..v.channels() {
            let sigma = uniform(rng, cfg.blur_sigma);
            let blurred = gaussian_blur(&v.image.index_axis(Axis(0), c).to_owned(), sigma);
            v.image.index_axis_mut(Axis(0), c).assign(&blurred);
        }
    }
    if fire[3] {
        for mut ch in v.image.axis_iter_mut(Axis(0)) {
            let f = uniform(rng, cfg.brightness);
            ch.mapv_inplace(|x| x * f);
        }
    }
    if fire[4] {
        for c in 0..v.channels() {
            let f = uniform(rng, cfg.contrast);
            let mut ch = v.image.index_axis(Axis(0), c).to_owned();
            contrast(&mut ch, f);
            v.image.index_axis_mut(Axis(0), c).assign(&ch);
        }
    }
    if fire[5] {
        let zoom = uniform(rng, cfg.low_res_zoom);
        let small = ext.map(|n| ((n as f64 * zoom).round() as usize).max(1));
        v.image = resize_trilinear(&resize_trilinear(&v.image, small), ext);
    }
    if fire[6] {
        for c in 0..v.channels() {
            let g = uniform(rng, cfg.gamma);
            let mut ch = v.image.index_axis(Axis(0), c).to_owned();
            gamma_transform(&mut ch, g);
            v.image.index_axis_mut(Axis(0), c).assign(&ch);
        }
    }
    if fire[7] {
        let axes = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        mirror(&mut v, axes);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn volume() -> Volume {
        let image = Array::from_shape_fn(IxDyn(&[4, 12, 10, 8]), |i| {
            (i[0] as f64 + 1.0) * ((i[1] * 3 + i[2] * 2 + i[3]) as f64 * 0.37).sin() + 0.1
        });
        let mask = Array::from_shape_fn(IxDyn(&[12, 10, 8]), |i| f64::from(i[0] < 4 && i[1] > 5 && i[2] < 3));
        Volume {
            id: "v".into(),
            image,
            mask: Some(mask),
            label: 1,
        }
    }

    #[test]
    fn all_triggers_off_is_identity() {
        let v = volume();
        let out = augment(&v, &AugmentConfig::off(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(out, v);
    }

    #[test]
    fn mirroring_is_an_involution() {
        let v = volume();
        let mut m = v.clone();
        mirror(&mut m, [true, false, true]);
        assert_ne!(m, v);
        assert_eq!(m.image[[2, 0, 3, 0]], v.image[[2, 11, 3, 7]]);
        assert_eq!(
            m.mask.as_ref().unwrap()[[0, 3, 0]],
            v.mask.as_ref().unwrap()[[11, 3, 7]]
        );
        mirror(&mut m, [true, false, true]);
        assert_eq!(m, v);
    }

    #[test]
    fn unit_gamma_is_identity() {
        let mut ch = volume().image.index_axis(Axis(0), 1).to_owned();
        let orig = ch.clone();
        gamma_transform(&mut ch, 1.0);
        assert_eq!(ch, orig);
    }

    #[test]
    fn blur_preserves_constants() {
        let c = Array::from_elem(IxDyn(&[5, 6, 7]), 2.5);
        let b = gaussian_blur(&c, 0.8);
        assert!(b.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn label_is_never_changed() {
        let mut cfg = AugmentConfig::default();
        for p in [
            &mut cfg.p_rotate_scale,
            &mut cfg.p_noise,
            &mut cfg.p_blur,
            &mut cfg.p_brightness,
            &mut cfg.p_contrast,
            &mut cfg.p_low_res,
            &mut cfg.p_gamma,
            &mut cfg.p_mirror,
        ] {
            *p = 1.0;
        }
        let v = volume();
        let out = augment(&v, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(out.label, v.label);
        assert_eq!(out.image.shape(), v.image.shape());
        assert!(out.image.iter().all(|x| x.is_finite()));
    }
}
