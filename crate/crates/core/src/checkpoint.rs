//! Single-file checkpoint archive.
//!
//! Layout: the line `MAPROTONET-CHECKPOINT 1`, then entries of the form
//! `<key> <byte length>\n<payload>\n`, keys in ascending order. Keys:
//!
//! - `config/model.toml`: model configuration (text)
//! - `config/run.toml`: optional full run configuration snapshot (text)
//! - `param/<name>`, `buffer/<name>`: arrays
//! - `bank/class_of`: prototype class assignments, one per line (text)
//! - `state/counters.json`: stage, cycle and epoch counters, best snapshot
//! - `state/history.jsonl`: training history
//! - `optim/<name>/m`, `optim/<name>/v`, `optim/<name>/step`: AdamW moments
//! - `provenance/<p>.json`, `provenance/<p>/map`: push provenance
//!
//! Arrays are stored as `u32` rank, `u64` extents and `f64` values, all
//! little-endian, in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use maprotonet_tensor::{AdamW, Array, Moments};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{MaProtoNet, ModelConfig};
use crate::training::{BestSnapshot, HistoryRecord, Provenance, Stage, TrainState};

const MAGIC: &str = "MAPROTONET-CHECKPOINT 1\n";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_array(a: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * a.ndim() + 8 * a.len());
    out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<Array> {
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| ck("truncated array"));
    let rank = u32::from_le_bytes(take(0, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u64::from_le_bytes(take(4 + 8 * i, 8)?.try_into().unwrap()) as usize);
    }
    let start = 4 + 8 * rank;
    let n: usize = shape.iter().product();
    if bytes.len() != start + 8 * n {
        return Err(ck(format!(
            "array payload of {} bytes does not match shape {shape:?}",
            bytes.len()
        )));
    }
    let vals = bytes[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array::from_shape_vec(IxDyn(&shape), vals).unwrap())
}

/// Ordered key/payload pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn put(&mut self, key: impl Into<String>, bytes: Vec<u8>) {
        self.entries.insert(key.into(), bytes);
    }

    pub fn put_text(&mut self, key: impl Into<String>, text: &str) {
        self.put(key, text.as_bytes().to_vec());
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        let b = self.get(key).ok_or_else(|| ck(format!("missing entry {key}")))?;
        std::str::from_utf8(b).map_err(|_| ck(format!("entry {key} is not text")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.as_bytes().to_vec();
        for (k, v) in &self.entries {
            out.extend_from_slice(format!("{k} {}\n", v.len()).as_bytes());
            out.extend_from_slice(v);
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| ck("not a checkpoint archive"))?;
        let mut entries = BTreeMap::new();
        let mut at = 0;
        while at < rest.len() {
            let nl = rest[at..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ck("truncated header"))?;
            let header = std::str::from_utf8(&rest[at..at + nl]).map_err(|_| ck("bad header"))?;
            let (key, len) = header
                .rsplit_once(' ')
                .ok_or_else(|| ck(format!("bad header {header:?}")))?;
            let len: usize = len.parse().map_err(|_| ck(format!("bad length in {header:?}")))?;
            let start = at + nl + 1;
            let payload = rest
                .get(start..start + len)
                .ok_or_else(|| ck(format!("entry {key} is truncated")))?;
            if rest.get(start + len) != Some(&b'\n') {
                return Err(ck(format!("entry {key} is not terminated")));
            }
            entries.insert(key.to_string(), payload.to_vec());
            at = start + len + 1;
        }
        Ok(Self { entries })
    }

    /// Writes through a temporary sibling and renames, so a failed write
    /// never leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct Counters {
    stage: Stage,
    cycle: usize,
    joint_epochs_done: usize,
    head_epochs_done: usize,
    weight_decay: f64,
    best: Option<BestSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceMeta {
    prototype: usize,
    class: usize,
    sample_id: String,
    sample_index: usize,
    distance: f64,
}

/// Model, optional training state and optional run configuration text.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MaProtoNet,
    pub state: Option<TrainState>,
    pub run_config: Option<String>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        let cfg = toml::to_string(&self.model.config).map_err(|e| ck(e.to_string()))?;
        a.put_text("config/model.toml", &cfg);
        if let Some(run) = &self.run_config {
            a.put_text("config/run.toml", run);
        }
        for (k, v) in self.model.store.params() {
            a.put(format!("param/{k}"), encode_array(v));
        }
        for (k, v) in self.model.store.buffers() {
            a.put(format!("buffer/{k}"), encode_array(v));
        }
        let classes: String = self.model.bank().class_of.iter().map(|c| format!("{c}\n")).collect();
        a.put_text("bank/class_of", &classes);
        if let Some(s) = &self.state {
            let counters = Counters {
                stage: s.stage,
                cycle: s.cycle,
                joint_epochs_done: s.joint_epochs_done,
                head_epochs_done: s.head_epochs_done,
                weight_decay: s.optimizer.weight_decay,
                best: s.best,
            };
            a.put_text("state/counters.json", &serde_json::to_string(&counters).unwrap());
            a.put_text("state/history.jsonl", &history_jsonl(&s.history));
            for (name, m) in &s.optimizer.state {
                a.put(format!("optim/{name}/m"), encode_array(&m.m));
                a.put(format!("optim/{name}/v"), encode_array(&m.v));
                a.put_text(format!("optim/{name}/step"), &m.step.to_string());
            }
            for p in &s.provenance {
                let meta = ProvenanceMeta {
                    prototype: p.prototype,
                    class: p.class,
                    sample_id: p.sample_id.clone(),
                    sample_index: p.sample_index,
                    distance: p.distance,
                };
                a.put_text(
                    format!("provenance/{:04}.json", p.prototype),
                    &serde_json::to_string(&meta).unwrap(),
                );
                a.put(format!("provenance/{:04}/map", p.prototype), encode_array(&p.map));
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: ModelConfig = toml::from_str(a.text("config/model.toml")?).map_err(|e| ck(e.to_string()))?;
        let mut model = MaProtoNet::new(config, 0)?;
        let expected: Vec<String> = model.store.params().map(|(k, _)| k.clone()).collect();
        for k in expected {
            let bytes = a
                .get(&format!("param/{k}"))
                .ok_or_else(|| ck(format!("missing parameter {k}")))?;
            let v = decode_array(bytes)?;
            let slot = model.store.get_mut(&k).unwrap();
            if slot.shape() != v.shape() {
                return Err(ck(format!(
                    "parameter {k} has shape {:?}, expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v;
        }
        let buffers: Vec<String> = model.store.buffers().map(|(k, _)| k.clone()).collect();
        for k in buffers {
            let bytes = a
                .get(&format!("buffer/{k}"))
                .ok_or_else(|| ck(format!("missing buffer {k}")))?;
            *model.store.buffer_mut(&k).unwrap() = decode_array(bytes)?;
        }
        let class_of: Vec<usize> = a
            .text("bank/class_of")?
            .lines()
            .map(|l| l.parse().map_err(|_| ck("bad class assignment")))
            .collect::<Result<_>>()?;
        if class_of != model.bank().class_of {
            return Err(ck("stored class assignments disagree with the configuration"));
        }
        let state = match a.get("state/counters.json") {
            None => None,
            Some(bytes) => Some(read_state(a, bytes)?),
        };
        let run_config = a
            .get("config/run.toml")
            .map(|_| a.text("config/run.toml").map(str::to_string))
            .transpose()?;
        Ok(Self {
            model,
            state,
            run_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn read_state(a: &Archive, counters: &[u8]) -> Result<TrainState> {
    let c: Counters = serde_json::from_slice(counters).map_err(|e| ck(e.to_string()))?;
    let mut optimizer = AdamW::new(c.weight_decay);
    for key in a.entries.keys() {
        let Some(name) = key.strip_prefix("optim/").and_then(|k| k.strip_suffix("/step")) else {
            continue;
        };
        let get = |part: &str| {
            a.get(&format!("optim/{name}/{part}"))
                .ok_or_else(|| ck(format!("missing optimiser entry {name}/{part}")))
        };
        optimizer.state.insert(
            name.to_string(),
            Moments {
                step: a.text(key)?.trim().parse().map_err(|_| ck("bad optimiser step"))?,
                m: decode_array(get("m")?)?,
                v: decode_array(get("v")?)?,
            },
        );
    }
    let history = a
        .text("state/history.jsonl")?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str::<HistoryRecord>(l).map_err(|e| ck(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut provenance = Vec::new();
    for (key, bytes) in a.entries.range("provenance/".to_string()..) {
        if !key.starts_with("provenance/") {
            break;
        }
        if !key.ends_with(".json") {
            continue;
        }
        let meta: ProvenanceMeta = serde_json::from_slice(bytes).map_err(|e| ck(e.to_string()))?;
        let map_key = format!("provenance/{:04}/map", meta.prototype);
        let map = decode_array(a.get(&map_key).ok_or_else(|| ck(format!("missing {map_key}")))?)?;
        provenance.push(Provenance {
            prototype: meta.prototype,
            class: meta.class,
            sample_id: meta.sample_id,
            sample_index: meta.sample_index,
            distance: meta.distance,
            map,
        });
    }
    Ok(TrainState {
        stage: c.stage,
        cycle: c.cycle,
        joint_epochs_done: c.joint_epochs_done,
        head_epochs_done: c.head_epochs_done,
        optimizer,
        provenance,
        history,
        best: c.best,
    })
}

/// History as line-delimited JSON records.
pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    history
        .iter()
        .map(|h| serde_json::to_string(h).unwrap() + "\n")
        .collect()
}
