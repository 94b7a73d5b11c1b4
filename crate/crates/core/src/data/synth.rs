//! Synthetic four-modality volumes with a class-dependent lesion.
//!
//! Every subject has an ellipsoidal "brain" with smooth per-modality texture
//! and one ellipsoidal blob. The blob is hyperintense in FLAIR and T2 for
//! both classes; class 1 blobs are larger and strongly enhancing in T1CE,
//! class 0 blobs are smaller and barely enhancing. The blob mask is the
//! ground-truth localisation target.

use std::path::{Path, PathBuf};

use maprotonet_tensor::Array;
use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, write_volume, z_score_nonzero, RawSubject, SubjectRecord, Volume, MODALITIES};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    /// `(C, H, W, D)`; `C` must be 4.
    pub shape: [usize; 4],
    pub seed: u64,
    /// Blob radius ranges in voxels at `H = 32`; scaled linearly with `H`.
    pub radius_hgg: [f64; 2],
    pub radius_lgg: [f64; 2],
    /// Added T1CE intensity inside the blob.
    pub enhance_hgg: [f64; 2],
    pub enhance_lgg: [f64; 2],
    /// Voxelwise Gaussian noise sd inside the brain.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 64,
            shape: [4, 32, 32, 24],
            seed: 0,
            radius_hgg: [5.6, 8.4],
            radius_lgg: [4.2, 6.3],
            enhance_hgg: [1.6, 2.4],
            enhance_lgg: [0.2, 0.6],
            noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn new(n: usize, shape: [usize; 4], seed: u64) -> Self {
        Self {
            n,
            shape,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shape[0] != MODALITIES.len() {
            return Err(Error::Config(format!(
                "synthetic volumes need 4 channels, got {}",
                self.shape[0]
            )));
        }
        if self.shape[1..].iter().any(|&e| e < 8) {
            return Err(Error::Config(format!(
                "synthetic extents must be at least 8, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn range<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Sum of a few random low-frequency cosines, amplitude about `amp`.
fn texture<R: Rng>(rng: &mut R, ext: [usize; 3], amp: f64) -> impl Fn([usize; 3]) -> f64 {
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [0, 1, 2].map(|a| rng.gen_range(0.5..2.0) * std::f64::consts::TAU / ext[a] as f64);
            (k, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    move |i| {
        amp / 3.0
            * waves
                .iter()
                .map(|(k, ph)| (k[0] * i[0] as f64 + k[1] * i[1] as f64 + k[2] * i[2] as f64 + ph).cos())
                .sum::<f64>()
    }
}

fn ellipsoid(i: [usize; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((i[a] as f64 - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Raw (unnormalised, strictly positive inside the brain) subject `idx`.
fn synth_subject(cfg: &SynthConfig, idx: usize) -> RawSubject {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, idx as u64]));
    let label = idx % 2;
    let ext = [cfg.shape[1], cfg.shape[2], cfg.shape[3]];
    let centre = ext.map(|n| (n as f64 - 1.0) / 2.0);
    let brain_r = ext.map(|n| n as f64 * rng.gen_range(0.40..0.46));

    let scale = ext[0] as f64 / 32.0;
    let (r_range, e_range) = if label == 1 {
        (cfg.radius_hgg, cfg.enhance_hgg)
    } else {
        (cfg.radius_lgg, cfg.enhance_lgg)
    };
    let r = range(&mut rng, r_range) * scale;
    let blob_r = [0, 1, 2].map(|_| r * rng.gen_range(0.85..1.15));
    // keep the blob well inside the brain
    let blob_c = [0, 1, 2].map(|a| {
        let slack = (brain_r[a] - blob_r[a] - 1.0).max(0.0) * 0.6;
        centre[a] + rng.gen_range(-slack..=slack)
    });
    let enhance = range(&mut rng, e_range);
    // per-modality (base, blob offset): T1 darker, T2/FLAIR brighter
    let profile = [(1.0, -0.3), (1.0, enhance), (1.2, 0.9), (1.0, 1.3)];
    let textures: Vec<_> = (0..4).map(|_| texture(&mut rng, ext, 0.15)).collect();
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite sd");

    let mut mask = Array::zeros(IxDyn(&ext));
    let mut image = Array::zeros(IxDyn(&cfg.shape));
    for h in 0..ext[0] {
        for w in 0..ext[1] {
            for d in 0..ext[2] {
                let i = [h, w, d];
                if !ellipsoid(i, centre, brain_r) {
                    continue;
                }
                let in_blob = ellipsoid(i, blob_c, blob_r);
                if in_blob {
                    mask[[h, w, d]] = 1.0;
                }
                for (c, &(base, offset)) in profile.iter().enumerate() {
                    let mut v = base + textures[c](i) + noise.sample(&mut rng);
                    if in_blob {
                        v += offset;
                    }
                    // brain voxels stay strictly positive so they survive z-scoring as nonzero
                    image[[c, h, w, d]] = v.max(0.05);
                }
            }
        }
    }
    RawSubject {
        id: format!("synth_{idx:04}"),
        image,
        mask: Some(mask),
        label,
    }
}

/// Raw subjects with alternating labels (balanced for even `n`).
pub fn synth_raw(cfg: &SynthConfig) -> Result<Vec<RawSubject>> {
    cfg.validate()?;
    Ok((0..cfg.n).map(|i| synth_subject(cfg, i)).collect())
}

/// Normalised synthetic dataset, ready for training.
pub fn synth_generate(n: usize, shape: [usize; 4], seed: u64) -> Result<Vec<Volume>> {
    synth_dataset(&SynthConfig::new(n, shape, seed))
}

/// Normalised dataset for an explicit generator configuration.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Volume>> {
    Ok(synth_raw(cfg)?
        .into_iter()
        .map(|r| {
            let mut image = r.image;
            z_score_nonzero(&mut image);
            Volume {
                id: r.id,
                image,
                mask: r.mask,
                label: r.label,
            }
        })
        .collect())
}

/// Writes every subject as gzip-compressed NIfTI files (one per modality
/// plus the mask) and a `manifest.csv`; returns the manifest path.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(cfg.n);
    for raw in synth_raw(cfg)? {
        let mut paths = Vec::with_capacity(4);
        for (c, m) in MODALITIES.iter().enumerate() {
            let p = dir.join(format!("{}_{m}.nii.gz", raw.id));
            write_volume(&p, &raw.image.index_axis(Axis(0), c).to_owned())?;
            paths.push(p);
        }
        let seg = dir.join(format!("{}_seg.nii.gz", raw.id));
        write_volume(&seg, raw.mask.as_ref().expect("synthetic subjects carry masks"))?;
        records.push(SubjectRecord {
            id: raw.id,
            modalities: [paths[0].clone(), paths[1].clone(), paths[2].clone(), paths[3].clone()],
            seg: Some(seg),
            label: raw.label,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
