//! File formats: transition CSV with a JSON sidecar, JSON helpers, hashing.
//!
//! Dataset CSV layout, one transition per row:
//!
//! ```text
//! s0,..,s{d-1},a0,..,a{k-1},s0',..,s{d-1}',r,done
//! ```
//!
//! Floats are written in the shortest form that parses back to the same
//! `f64`; `done` is `0` or `1`. The sidecar `<stem>.meta.json` records the
//! environment, seed and collection statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collect::{Dataset, Transition};
use crate::envs::Benchmark;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing input file {0}")]
    Missing(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema mismatch: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: file is truncated or incomplete: {message}")]
    Truncated { path: PathBuf, message: String },
}

impl IoError {
    pub fn schema(path: &Path, message: impl Into<String>) -> Self {
        IoError::Schema {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest round-trip rendering of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing(path.to_path_buf())
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| IoError::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
    }
    fs::write(path, bytes).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_bytes(path, to_json_string(value).as_bytes())
}

/// Reads JSON and checks its `format_version` field before deserializing.
pub fn read_versioned_json<T: DeserializeOwned>(path: &Path, expected: u32) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| {
        if e.is_eof() {
            IoError::Truncated {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        } else {
            IoError::schema(path, e.to_string())
        }
    })?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| IoError::schema(path, "missing format_version"))?;
    if found != u64::from(expected) {
        return Err(IoError::Version {
            path: path.to_path_buf(),
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected,
        });
    }
    serde_json::from_value(value).map_err(|e| IoError::schema(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub env: Benchmark,
    pub seed: u64,
    pub epsilon: f64,
    pub expert: String,
    pub n_transitions: usize,
    pub episodes_used: usize,
    pub random_actions: usize,
    pub state_names: Vec<String>,
    pub action_names: Vec<String>,
    /// SHA-256 of the CSV body.
    pub fingerprint: String,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

pub fn dataset_header(env: Benchmark) -> Vec<String> {
    let spec = env.spec();
    let d = spec.state_dim();
    let k = spec.action_dim();
    (0..d)
        .map(|i| format!("s{i}"))
        .chain((0..k).map(|i| format!("a{i}")))
        .chain((0..d).map(|i| format!("s{i}'")))
        .chain(["r".to_string(), "done".to_string()])
        .collect()
}

pub fn dataset_csv_string(data: &Dataset) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(dataset_header(data.env)).expect("in-memory write");
    for t in &data.transitions {
        let row: Vec<String> = t
            .state
            .iter()
            .chain(&t.action)
            .chain(&t.next_state)
            .chain(std::iter::once(&t.reward))
            .map(|&v| fmt_f64(v))
            .chain(std::iter::once(if t.done { "1" } else { "0" }.to_string()))
            .collect();
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}

/// Content hash identifying a dataset.
pub fn dataset_fingerprint(data: &Dataset) -> String {
    sha256_hex(dataset_csv_string(data).as_bytes())
}

pub fn dataset_meta(data: &Dataset) -> DatasetMeta {
    let spec = data.env.spec();
    DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        env: data.env,
        seed: data.seed,
        epsilon: data.epsilon,
        expert: data.expert.clone(),
        n_transitions: data.len(),
        episodes_used: data.episodes_used,
        random_actions: data.random_actions,
        state_names: spec.state_names.clone(),
        action_names: spec.action_names.clone(),
        fingerprint: dataset_fingerprint(data),
    }
}

/// Writes `<path>` and its sidecar.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), IoError> {
    write_bytes(path, dataset_csv_string(data).as_bytes())?;
    write_json(&sidecar_path(path), &dataset_meta(data))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let bytes = read_bytes(path)?;
    let meta: DatasetMeta = read_versioned_json(&sidecar_path(path), DATASET_FORMAT_VERSION)?;
    let spec = meta.env.spec();
    if meta.state_names != spec.state_names || meta.action_names != spec.action_names {
        return Err(IoError::schema(
            path,
            "sidecar dimension names do not match environment",
        ));
    }
    let (d, k) = (spec.state_dim(), spec.action_dim());
    let mut reader = csv::ReaderBuilder::new().from_reader(bytes.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IoError::schema(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = dataset_header(meta.env);
    if header != expected {
        return Err(IoError::schema(
            path,
            format!("header {header:?} does not match {expected:?}"),
        ));
    }
    let mut transitions = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| IoError::schema(path, format!("line {line}: {e}")))?;
        if record.len() != expected.len() {
            return Err(IoError::schema(path, format!("line {line}: wrong field count")));
        }
        let nums: Vec<f64> = record
            .iter()
            .take(2 * d + k + 1)
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::schema(path, format!("line {line}: {e}")))?;
        let done = match &record[2 * d + k + 1] {
            "0" => false,
            "1" => true,
            other => return Err(IoError::schema(path, format!("line {line}: bad done flag '{other}'"))),
        };
        transitions.push(Transition {
            state: nums[..d].to_vec(),
            action: nums[d..d + k].to_vec(),
            next_state: nums[d + k..2 * d + k].to_vec(),
            reward: nums[2 * d + k],
            done,
        });
    }
    if transitions.len() != meta.n_transitions {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            message: format!("{} rows but sidecar records {}", transitions.len(), meta.n_transitions),
        });
    }
    let data = Dataset {
        env: meta.env,
        seed: meta.seed,
        epsilon: meta.epsilon,
        expert: meta.expert,
        episodes_used: meta.episodes_used,
        random_actions: meta.random_actions,
        transitions,
    };
    if dataset_fingerprint(&data) != meta.fingerprint {
        return Err(IoError::schema(path, "content does not match sidecar fingerprint"));
    }
    Ok(data)
}
