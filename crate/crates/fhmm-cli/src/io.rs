//! Data-file formats, atomic output, digests, and the run manifest.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::CliError;
use fhmm::model::Dataset;

/// JSON container for multi-sample batches: `{dt, samples: [[[...]]]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataContainer {
    dt: f64,
    samples: Vec<Vec<Vec<f64>>>,
}

/// Reads dataset files: either a single `.json` container or one CSV per
/// sample (header `t,y0,...,y{o-1}`). All samples must agree on `(T, o)`.
pub fn read_dataset(paths: &[String]) -> Result<Dataset, CliError> {
    if paths.is_empty() {
        return Err(CliError::data("no data files given".into()));
    }
    if paths.len() == 1 && paths[0].ends_with(".json") {
        return read_json_container(&paths[0]);
    }
    let mut samples: Vec<(Vec<Vec<f64>>, f64)> = Vec::new();
    for path in paths {
        samples.push(read_csv_sample(path)?);
    }
    let t_len = samples[0].0.len();
    let o = samples[0].0[0].len();
    let dt = samples[0].1;
    for (i, (rows, sample_dt)) in samples.iter().enumerate() {
        if rows.len() != t_len || rows[0].len() != o {
            return Err(CliError::data(format!(
                "sample {i} has shape ({}, {}), expected ({t_len}, {o})",
                rows.len(),
                rows[0].len()
            )));
        }
        if (sample_dt - dt).abs() > 1e-12 * dt.abs().max(1.0) {
            return Err(CliError::data(format!("sample {i} has a different dt")));
        }
    }
    let mut x = Array3::<f64>::zeros((samples.len(), t_len, o));
    for (s, (rows, _)) in samples.iter().enumerate() {
        for (t, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                x[[s, t, j]] = v;
            }
        }
    }
    Dataset::new(x, dt).map_err(|e| CliError::data(e.to_string()))
}

fn read_json_container(path: &str) -> Result<Dataset, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {path}: {e}")))?;
    let container: DataContainer =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{path}: {e}")))?;
    let n = container.samples.len();
    if n == 0 {
        return Err(CliError::data(format!("{path}: empty sample list")));
    }
    let t_len = container.samples[0].len();
    let o = container.samples[0].first().map_or(0, |r| r.len());
    if t_len == 0 || o == 0 {
        return Err(CliError::data(format!("{path}: empty sample")));
    }
    let mut x = Array3::<f64>::zeros((n, t_len, o));
    for (s, sample) in container.samples.iter().enumerate() {
        if sample.len() != t_len {
            return Err(CliError::data(format!("{path}: sample {s} length differs")));
        }
        for (t, row) in sample.iter().enumerate() {
            if row.len() != o {
                return Err(CliError::data(format!("{path}: ragged row in sample {s}")));
            }
            for (j, &v) in row.iter().enumerate() {
                x[[s, t, j]] = v;
            }
        }
    }
    Dataset::new(x, container.dt).map_err(|e| CliError::data(e.to_string()))
}

fn read_csv_sample(path: &str) -> Result<(Vec<Vec<f64>>, f64), CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::data(format!("cannot read {path}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("{path}: {e}")))?
        .clone();
    if headers.get(0) != Some("t") {
        return Err(CliError::data(format!("{path}: first column must be `t`")));
    }
    let o = headers.len() - 1;
    if o == 0 {
        return Err(CliError::data(format!("{path}: no observable columns")));
    }
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (ln, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::data(format!("{path}: {e}")))?;
        let parse = |idx: usize| -> Result<f64, CliError> {
            record
                .get(idx)
                .ok_or_else(|| CliError::data(format!("{path}: row {ln} too short")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| CliError::data(format!("{path}: row {ln}: {e}")))
        };
        times.push(parse(0)?);
        rows.push((1..=o).map(parse).collect::<Result<Vec<f64>, _>>()?);
    }
    if rows.len() < 2 {
        return Err(CliError::data(format!("{path}: need at least 2 rows")));
    }
    let dt = times[1] - times[0];
    if dt <= 0.0 {
        return Err(CliError::data(format!("{path}: non-increasing time column")));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt {
            return Err(CliError::data(format!("{path}: non-uniform time column")));
        }
    }
    Ok((rows, dt))
}

/// Writes a dataset as the JSON container.
pub fn dataset_to_json(ds: &Dataset) -> String {
    let (n, t_len, o) = ds.x.dim();
    let samples: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|s| {
            (0..t_len)
                .map(|t| (0..o).map(|j| ds.x[[s, t, j]]).collect())
                .collect()
        })
        .collect();
    serde_json::to_string(&DataContainer { dt: ds.dt, samples }).expect("serialize dataset")
}

/// Writes one sample as CSV with header `t,y0,...`.
pub fn sample_to_csv(ds: &Dataset, sample: usize) -> String {
    let (_, t_len, o) = ds.x.dim();
    let mut out = String::from("t");
    for j in 0..o {
        out.push_str(&format!(",y{j}"));
    }
    out.push('\n');
    for t in 0..t_len {
        out.push_str(&format!("{}", t as f64 * ds.dt));
        for j in 0..o {
            out.push_str(&format!(",{}", ds.x[[sample, t, j]]));
        }
        out.push('\n');
    }
    out
}

/// Atomic write: temp file in the target directory, then rename.
pub fn write_atomic(path: &str, contents: &str) -> Result<(), CliError> {
    let target = Path::new(path);
    let dir = target.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    }
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp-{}",
        target.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, contents)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, target)
        .map_err(|e| CliError::data(format!("cannot rename into {path}: {e}")))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

pub fn sha256_file(path: &str) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read {path}: {e}")))?;
    Ok(sha256_hex(&bytes))
}

/// Reproducibility record written alongside every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<ManifestInput>,
    pub outputs: Vec<String>,
    pub version: String,
}

#[derive(Debug, Serialize)]
pub struct ManifestInput {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_sha256: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, path: &str) -> Result<(), CliError> {
        self.inputs.push(ManifestInput { path: path.to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    /// Writes `<first_output>.manifest.json`.
    pub fn write(&self) -> Result<(), CliError> {
        let anchor = self
            .outputs
            .first()
            .ok_or_else(|| CliError::data("manifest has no outputs".into()))?;
        let path = format!("{anchor}.manifest.json");
        write_atomic(&path, &serde_json::to_string_pretty(self).expect("manifest"))
    }
}
