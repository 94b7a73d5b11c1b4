use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HGG, LGG};
use crate::error::{Error, Result};

/// One manifest row. Relative paths are resolved against the manifest's
/// directory when read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectRecord {
    pub id: String,
    /// T1, T1CE, T2, FLAIR.
    pub modalities: [PathBuf; 4],
    pub seg: Option<PathBuf>,
    pub label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    t1: String,
    t1ce: String,
    t2: String,
    flair: String,
    #[serde(default)]
    seg: String,
    label: String,
}

fn parse_label(s: &str) -> Option<usize> {
    match s.trim().to_ascii_uppercase().as_str() {
        "0" | "LGG" => Some(LGG),
        "1" | "HGG" => Some(HGG),
        _ => None,
    }
}

/// Reads a comma-separated manifest with header
/// `id,t1,t1ce,t2,flair,seg,label`; `seg` may be empty and `label` is
/// `0`/`1` or `LGG`/`HGG`.
pub fn read_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), line + 1)))?;
        let label = parse_label(&row.label).ok_or_else(|| {
            Error::Data(format!(
                "{}: subject {}: bad label {:?}",
                path.display(),
                row.id,
                row.label
            ))
        })?;
        for (name, p) in [
            ("t1", &row.t1),
            ("t1ce", &row.t1ce),
            ("t2", &row.t2),
            ("flair", &row.flair),
        ] {
            if p.is_empty() {
                return Err(Error::Data(format!(
                    "{}: subject {} lacks modality {name}",
                    path.display(),
                    row.id
                )));
            }
        }
        out.push(SubjectRecord {
            modalities: [
                resolve(&row.t1),
                resolve(&row.t1ce),
                resolve(&row.t2),
                resolve(&row.flair),
            ],
            seg: (!row.seg.is_empty()).then(|| resolve(&row.seg)),
            label,
            id: row.id,
        });
    }
    Ok(out)
}

/// Writes records with paths relative to the manifest directory when possible.
pub fn write_manifest(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        w.write_record(["id", "t1", "t1ce", "t2", "flair", "seg", "label"])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    for r in records {
        w.serialize(Row {
            id: r.id.clone(),
            t1: rel(&r.modalities[0]),
            t1ce: rel(&r.modalities[1]),
            t2: rel(&r.modalities[2]),
            flair: rel(&r.modalities[3]),
            seg: r.seg.as_deref().map(rel).unwrap_or_default(),
            label: r.label.to_string(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
