//! Preprocessed-volume cache: `volumes.bin` holds little-endian `f64`
//! payloads back to back, `volumes.idx` one line per subject:
//! `id label offset c,h,w,d mask_offset|-` (offsets in values).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use maprotonet_tensor::Array;
use ndarray::IxDyn;

use super::Volume;
use crate::error::{Error, Result};

const BIN: &str = "volumes.bin";
const IDX: &str = "volumes.idx";

pub fn write_cache(dir: &Path, volumes: &[Volume]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin_path = dir.join(BIN);
    let idx_path = dir.join(IDX);
    let mut bin = BufWriter::new(File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
    let mut idx = String::new();
    let mut offset = 0usize;
    let mut put = |a: &Array, offset: &mut usize| -> Result<usize> {
        let start = *offset;
        for v in a.iter() {
            bin.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        }
        *offset += a.len();
        Ok(start)
    };
    for v in volumes {
        if v.id.contains(char::is_whitespace) || v.id.is_empty() {
            return Err(Error::Data(format!(
                "cache ids must be non-empty without whitespace: {:?}",
                v.id
            )));
        }
        let img = put(&v.image.as_standard_layout().into_owned(), &mut offset)?;
        let shape: Vec<String> = v.image.shape().iter().map(usize::to_string).collect();
        let mask = match &v.mask {
            Some(m) => put(&m.as_standard_layout().into_owned(), &mut offset)?.to_string(),
            None => "-".into(),
        };
        idx.push_str(&format!("{} {} {} {} {}\n", v.id, v.label, img, shape.join(","), mask));
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    std::fs::write(&idx_path, idx).map_err(|e| Error::io(&idx_path, e))
}

pub fn read_cache(dir: &Path) -> Result<Vec<Volume>> {
    let bin_path = dir.join(BIN);
    let idx_path = dir.join(IDX);
    let mut raw = Vec::new();
    File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&bin_path, e))?;
    if raw.len() % 8 != 0 {
        return Err(Error::Data(format!("{}: truncated payload", bin_path.display())));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let bad = |line: usize, why: &str| Error::Data(format!("{}:{}: {why}", idx_path.display(), line + 1));
    let take = |line: usize, start: usize, shape: &[usize]| -> Result<Array> {
        let n: usize = shape.iter().product();
        let slice = values
            .get(start..start + n)
            .ok_or_else(|| bad(line, "offset out of range"))?;
        Ok(Array::from_shape_vec(IxDyn(shape), slice.to_vec()).unwrap())
    };
    let file = File::open(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let mut out = Vec::new();
    for (line, text) in BufReader::new(file).lines().enumerate() {
        let text = text.map_err(|e| Error::io(&idx_path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = text.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(line, "expected 5 fields"));
        }
        let label = f[1].parse().map_err(|_| bad(line, "bad label"))?;
        let offset: usize = f[2].parse().map_err(|_| bad(line, "bad offset"))?;
        let shape = f[3]
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad(line, "bad shape"))?;
        if shape.len() != 4 {
            return Err(bad(line, "shape must have 4 axes"));
        }
        let image = take(line, offset, &shape)?;
        let mask = match f[4] {
            "-" => None,
            s => Some(take(
                line,
                s.parse().map_err(|_| bad(line, "bad mask offset"))?,
                &shape[1..],
            )?),
        };
        out.push(Volume {
            id: f[0].to_string(),
            image,
            mask,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut vols = crate::data::synth_generate(3, [4, 8, 8, 8], 2).unwrap();
        vols[1].mask = None;
        write_cache(dir.path(), &vols).unwrap();
        assert_eq!(read_cache(dir.path()).unwrap(), vols);
        let idx = std::fs::read_to_string(dir.path().join(IDX)).unwrap();
        assert_eq!(idx.lines().count(), 3);
    }

    #[test]
    fn corrupt_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_cache(dir.path(), &crate::data::synth_generate(1, [4, 8, 8, 8], 0).unwrap()).unwrap();
        std::fs::write(dir.path().join(IDX), "x 1 999999 4,8,8,8 -\n").unwrap();
        assert!(read_cache(dir.path()).unwrap_err().to_string().contains("out of range"));
    }
}
