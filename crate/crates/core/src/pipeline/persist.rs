//! Versioned JSON artifacts.
//!
//! Every document carries `kind` and `version` fields next to its payload.
//! Floats are written in shortest round-trip form, so `load(save(x))` is
//! bitwise identical to `x`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ddo::DdoParams;
use crate::gridworld::{Coord, GridMap, N_ACTIONS};
use crate::metrics::MetricReport;
use crate::smdp::{Segment, SegmentedRollout, SmdpQTable};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: expected {kind} version {expected}, found {found:?}")]
    VersionMismatch {
        path: PathBuf,
        kind: &'static str,
        expected: u32,
        found: Option<u64>,
    },
    #[error("{path}: corrupt {kind} document: {reason}")]
    Corrupt {
        path: PathBuf,
        kind: &'static str,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Structural checks beyond what deserialization enforces.
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Artifact for DdoParams {
    const KIND: &'static str = "ddo_params";

    fn check(&self) -> Result<(), String> {
        if self.shape_ok() {
            Ok(())
        } else {
            Err(format!(
                "logit arrays do not match {} options x {} states x {N_ACTIONS} actions",
                self.n_options, self.n_states
            ))
        }
    }
}

impl Artifact for SmdpQTable {
    const KIND: &'static str = "smdp_q_table";

    fn check(&self) -> Result<(), String> {
        let n = self.n_states * self.labels.len();
        if self.q.len() == n && self.visits.len() == n {
            Ok(())
        } else {
            Err("table size does not match states x choices".into())
        }
    }
}

impl Artifact for MetricReport {
    const KIND: &'static str = "metric_report";
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    kind: &'static str,
    version: u32,
    #[serde(flatten)]
    body: &'a T,
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn to_json<T: Artifact>(x: &T) -> String {
    let mut s = serde_json::to_string_pretty(&EnvelopeOut {
        kind: T::KIND,
        version: FORMAT_VERSION,
        body: x,
    })
    .expect("artifact serializes");
    s.push('\n');
    s
}

pub fn from_json<T: Artifact>(text: &str, path: &Path) -> Result<T, PersistError> {
    let corrupt = |reason: String| PersistError::Corrupt {
        path: path.to_path_buf(),
        kind: T::KIND,
        reason,
    };
    let mut value: Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let obj = value.as_object_mut().ok_or_else(|| corrupt("not a JSON object".into()))?;
    let found = obj.get("version").and_then(Value::as_u64);
    if found != Some(u64::from(FORMAT_VERSION)) {
        return Err(PersistError::VersionMismatch {
            path: path.to_path_buf(),
            kind: T::KIND,
            expected: FORMAT_VERSION,
            found,
        });
    }
    match obj.get("kind").and_then(Value::as_str) {
        Some(k) if k == T::KIND => {}
        other => return Err(corrupt(format!("kind is {other:?}"))),
    }
    obj.remove("version");
    obj.remove("kind");
    let x: T = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    x.check().map_err(corrupt)?;
    Ok(x)
}

pub fn save<T: Artifact>(path: &Path, x: &T) -> Result<(), PersistError> {
    write_bytes(path, to_json(x).as_bytes())
}

pub fn load<T: Artifact>(path: &Path) -> Result<T, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    from_json(&text, path)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, PersistError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Record of one stage: what it read and wrote, with content hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Artifact for StageManifest {
    const KIND: &'static str = "stage_manifest";
}

#[derive(Debug, Serialize, Deserialize)]
struct RolloutRecord {
    seed: u64,
    start: Coord,
    goal: Coord,
    states: Vec<Coord>,
    actions: Vec<usize>,
    segments: Vec<Segment>,
    success: bool,
}

/// Segmented rollouts as JSON Lines.
pub fn rollouts_to_jsonl(map: &GridMap, rollouts: &[SegmentedRollout]) -> String {
    let mut out = String::new();
    for r in rollouts {
        let t = &r.trajectory;
        let rec = RolloutRecord {
            seed: t.seed,
            start: map.coord(t.task.start),
            goal: map.coord(t.task.goal),
            states: t.states.iter().map(|&s| map.coord(s)).collect(),
            actions: t.actions.iter().map(|a| a.index()).collect(),
            segments: r.segments.clone(),
            success: r.success,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}
