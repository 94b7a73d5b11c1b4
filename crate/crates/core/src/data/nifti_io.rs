use std::path::Path;

use maprotonet_tensor::Array;
use ndarray::{Axis, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::{binarize, SubjectRecord};
use crate::error::{Error, Result};

/// A subject as stored on disk: `(4, H, W, D)` intensities and an optional
/// binary whole-tumour mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSubject {
    pub id: String,
    pub image: Array,
    pub mask: Option<Array>,
    pub label: usize,
}

/// Reads a 3D NIfTI volume (plain or gzip-compressed) as `f64`.
pub fn read_volume(path: &Path) -> Result<Array> {
    let err = |reason: String| Error::Volume {
        path: path.to_path_buf(),
        reason,
    };
    if !path.exists() {
        return Err(err("file not found".into()));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| err(e.to_string()))?;
    let mut vol = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| err(e.to_string()))?;
    // drop trailing singleton axes such as a unit time dimension
    while vol.ndim() > 3 && vol.shape()[vol.ndim() - 1] == 1 {
        let last = Axis(vol.ndim() - 1);
        vol = vol.index_axis_move(last, 0);
    }
    if vol.ndim() != 3 {
        return Err(err(format!("expected a 3D volume, found shape {:?}", vol.shape())));
    }
    Ok(vol.as_standard_layout().into_owned())
}

/// Writes a 3D `f64` volume; a `.gz` suffix selects gzip compression.
pub fn write_volume(path: &Path, volume: &Array) -> Result<()> {
    WriterOptions::new(path).write_nifti(volume).map_err(|e| Error::Volume {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads the four modalities and the segmentation of one record. The
/// segmentation is reduced to a whole-tumour mask (`label > 0`).
pub fn load_subject(record: &SubjectRecord) -> Result<RawSubject> {
    let mut channels = Vec::with_capacity(4);
    for path in &record.modalities {
        let v = read_volume(path)?;
        if let Some(first) = channels.first().map(|a: &Array| a.shape().to_vec()) {
            if v.shape() != first.as_slice() {
                return Err(Error::Volume {
                    path: path.clone(),
                    reason: format!("shape {:?} differs from the first modality {:?}", v.shape(), first),
                });
            }
        }
        channels.push(v);
    }
    let extents = channels[0].shape().to_vec();
    let views: Vec<_> = channels.iter().map(|c| c.view().insert_axis(Axis(0))).collect();
    let image = ndarray::concatenate(Axis(0), &views)
        .unwrap()
        .into_dimensionality::<IxDyn>()
        .unwrap();
    let mask = match &record.seg {
        Some(p) => {
            let seg = read_volume(p)?;
            if seg.shape() != extents.as_slice() {
                return Err(Error::Volume {
                    path: p.clone(),
                    reason: format!("segmentation shape {:?} differs from image {:?}", seg.shape(), extents),
                });
            }
            Some(binarize(&seg))
        }
        None => None,
    };
    Ok(RawSubject {
        id: record.id.clone(),
        image,
        mask,
        label: record.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn volume_round_trip_and_whole_tumour_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for m in 0..4 {
            let p = dir.path().join(format!("m{m}.nii.gz"));
            let v = Array::from_shape_fn(IxDyn(&[3, 4, 2]), |i| (i[0] * 8 + i[1] * 2 + i[2] + m) as f64);
            write_volume(&p, &v).unwrap();
            assert_eq!(read_volume(&p).unwrap(), v);
            paths.push(p);
        }
        let seg = dir.path().join("seg.nii.gz");
        let mut s = Array::zeros(IxDyn(&[3, 4, 2]));
        s[[0, 0, 0]] = 1.0;
        s[[1, 1, 1]] = 2.0;
        s[[2, 3, 1]] = 4.0;
        write_volume(&seg, &s).unwrap();
        let rec = SubjectRecord {
            id: "s".into(),
            modalities: [paths[0].clone(), paths[1].clone(), paths[2].clone(), paths[3].clone()],
            seg: Some(seg),
            label: 1,
        };
        let raw = load_subject(&rec).unwrap();
        assert_eq!(raw.image.shape(), &[4, 3, 4, 2]);
        let mask = raw.mask.unwrap();
        assert_eq!(mask.sum(), 3.0);
        assert_eq!(mask[[2, 3, 1]], 1.0);
    }

    #[test]
    fn unreadable_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("corrupt.nii.gz");
        std::fs::write(&bad, b"not a volume").unwrap();
        let e = read_volume(&bad).unwrap_err().to_string();
        assert!(e.contains("corrupt.nii.gz"), "{e}");
        let missing = PathBuf::from("/nonexistent/t1.nii.gz");
        assert!(read_volume(&missing).unwrap_err().to_string().contains("t1.nii.gz"));
    }
}
