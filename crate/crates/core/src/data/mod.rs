//! Subject ingestion, preprocessing, augmentation, fold splitting and the
//! synthetic volume generator.

mod augment;
mod cache;
mod folds;
mod manifest;
mod nifti_io;
mod preprocess;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use cache::{read_cache, write_cache};
pub use folds::{make_folds, split_fold};
pub use manifest::{read_manifest, write_manifest, SubjectRecord};
pub use nifti_io::{load_subject, read_volume, write_volume, RawSubject};
pub use preprocess::{
    center_crop, preprocess, resize_mask, resize_trilinear, z_score_nonzero, PreprocessConfig, SD_FLOOR,
};
pub use synth::{synth_dataset, synth_generate, synth_raw, write_synth_dataset, SynthConfig};

use maprotonet_tensor::Array;
use ndarray::Axis;

use crate::error::{shape_err, Result};

/// Class labels.
pub const LGG: usize = 0;
pub const HGG: usize = 1;

/// Modality order on the channel axis.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// A preprocessed subject: `(4, H, W, D)` intensities, optional binary
/// whole-tumour mask `(H, W, D)` and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    pub image: Array,
    pub mask: Option<Array>,
    pub label: usize,
}

impl Volume {
    pub fn extents(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Stacks the images of `volumes[idx]` into an `(N, C, H, W, D)` batch.
pub fn stack_images(volumes: &[Volume], idx: &[usize]) -> Result<Array> {
    let first = volumes
        .get(*idx.first().ok_or_else(|| shape_err!("empty batch"))?)
        .ok_or_else(|| shape_err!("batch index out of range"))?;
    let shape = first.image.shape().to_vec();
    let views = idx
        .iter()
        .map(|&i| {
            let v = &volumes[i].image;
            if v.shape() != shape.as_slice() {
                return Err(shape_err!(
                    "volume {} has shape {:?}, expected {:?}",
                    volumes[i].id,
                    v.shape(),
                    shape
                ));
            }
            Ok(v.view().insert_axis(Axis(0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ndarray::concatenate(Axis(0), &views).unwrap())
}

/// Labels of `volumes[idx]`.
pub fn labels_of(volumes: &[Volume], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| volumes[i].label).collect()
}

/// Whole-tumour mask: every positive label becomes 1.
pub(crate) fn binarize(seg: &Array) -> Array {
    seg.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}
