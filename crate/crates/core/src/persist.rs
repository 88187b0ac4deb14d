//! On-disk formats: dataset containers, training checkpoints, metric traces,
//! and portable grayscale images.
//!
//! Every artifact is reproducible from config and seed alone, so nothing
//! here embeds timestamps or machine identity. Floating-point values are
//! written in shortest round-trip decimal form, making regeneration
//! byte-identical and reloads bit-exact.
//!
//! A dataset directory holds:
//!
//! * `metadata.json` — dimensions, seed, and the generator configuration;
//! * `x.csv`, `z_true.csv`, `intervention_values.csv` — numeric matrices,
//!   one data point per row;
//! * `masks.csv` — 0/1 intervention indicators, same row order;
//! * `ground_truth.json` — the generating model (order, weights, noise
//!   scale, projection).
//!
//! Loading cross-checks every shape against the metadata and refuses
//! disagreement. Checkpoints carry a config hash; loading refuses a
//! checkpoint whose hash does not match the active configuration.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::opt::{Adam, ParamStore};
use crate::scm::InterventionMask;
use crate::synth::{Dataset, GroundTruth, SynthConfig};
use crate::{F, Mat};

/// Version tag written into every container this module produces.
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of a configuration's canonical JSON encoding.
pub fn config_hash<T: serde::Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config)
        .map_err(|e| Error::Format(format!("config not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Dataset-level facts stored alongside the matrices.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    /// Container format version.
    pub format_version: u32,
    /// Number of latent variables.
    pub d: usize,
    /// Observation dimension.
    pub obs_dim: usize,
    /// Number of data points.
    pub n: usize,
    /// Generator seed.
    pub seed: u64,
    /// Full generator configuration.
    pub synth: SynthConfig,
}

/// Serializes any value as pretty JSON (with trailing newline).
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

/// Reads a JSON file.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Appends one value as a single JSON line.
pub fn append_jsonl<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    line.push('\n');
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}

/// Reads a JSON-lines file into a vector.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let body = fs::read_to_string(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Writes a numeric matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &ArrayView2<F>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in m.rows() {
        writer.write_record(row.iter().map(|x| format_float(*x)))?;
    }
    writer.flush()?;
    Ok(())
}

fn format_float(x: F) -> String {
    let mut buf = ryu_format(x);
    // Keep integers readable without a trailing ".0" surprise mismatch:
    // ryu always emits a fractional part, so round-trips are uniform.
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_format(x: F) -> String {
    // The csv crate's internal float encoding is shortest-round-trip; doing
    // the same via the standard formatter keeps bit-exact reload behavior.
    format!("{x}")
}

/// Reads a headerless CSV of floats into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows: Vec<Vec<F>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row: std::result::Result<Vec<F>, _> =
            record.iter().map(|s| s.parse::<F>()).collect();
        rows.push(row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
    }
    matrix_from_rows(path, rows)
}

fn matrix_from_rows(path: &Path, rows: Vec<Vec<F>>) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!(
            "{}: ragged rows",
            path.display()
        )));
    }
    let flat: Vec<F> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes intervention masks as headerless 0/1 CSV.
pub fn write_masks_csv(path: &Path, masks: &[InterventionMask]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for mask in masks {
        writer.write_record(
            mask.bits()
                .iter()
                .map(|&b| if b { "1" } else { "0" }.to_string()),
        )?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads intervention masks from headerless 0/1 CSV.
pub fn read_masks_csv(path: &Path) -> Result<Vec<InterventionMask>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut masks = Vec::new();
    for record in reader.records() {
        let record = record?;
        let bits: Result<Vec<bool>> = record
            .iter()
            .map(|s| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Format(format!(
                    "{}: mask entry '{other}' is not 0/1",
                    path.display()
                ))),
            })
            .collect();
        masks.push(InterventionMask::new(bits?));
    }
    Ok(masks)
}

/// Writes a full dataset directory (see module docs for the layout).
pub fn save_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    truth: &GroundTruth,
    data: &Dataset,
) -> Result<()> {
    if meta.n != data.n() || meta.d != data.d() || meta.obs_dim != data.obs_dim() {
        return Err(Error::DimensionMismatch(format!(
            "metadata says {}x({} latents, {} observed), data is {}x({}, {})",
            meta.n,
            meta.d,
            meta.obs_dim,
            data.n(),
            data.d(),
            data.obs_dim()
        )));
    }
    fs::create_dir_all(dir)?;
    write_json(&dir.join("metadata.json"), meta)?;
    write_json(&dir.join("ground_truth.json"), truth)?;
    write_matrix_csv(&dir.join("x.csv"), &data.x.view())?;
    write_matrix_csv(&dir.join("z_true.csv"), &data.z.view())?;
    write_matrix_csv(&dir.join("intervention_values.csv"), &data.values.view())?;
    write_masks_csv(&dir.join("masks.csv"), &data.masks)?;
    Ok(())
}

/// Loads a dataset directory, cross-checking every shape against metadata.
pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, GroundTruth, Dataset)> {
    let meta: DatasetMeta = read_json(&dir.join("metadata.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} (this build reads {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let truth: GroundTruth = read_json(&dir.join("ground_truth.json"))?;
    let x = read_matrix_csv(&dir.join("x.csv"))?;
    let z = read_matrix_csv(&dir.join("z_true.csv"))?;
    let values = read_matrix_csv(&dir.join("intervention_values.csv"))?;
    let masks = read_masks_csv(&dir.join("masks.csv"))?;
    let shape_ok = x.dim() == (meta.n, meta.obs_dim)
        && z.dim() == (meta.n, meta.d)
        && values.dim() == (meta.n, meta.d)
        && masks.len() == meta.n
        && masks.iter().all(|m| m.d() == meta.d)
        && truth.d() == meta.d
        && truth.projection.obs_dim() == meta.obs_dim;
    if !shape_ok {
        return Err(Error::Format(format!(
            "dataset in {} disagrees with its metadata",
            dir.display()
        )));
    }
    Ok((meta, truth, Dataset { x, masks, values, z }))
}

/// A resumable training snapshot.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    /// Container format version.
    pub format_version: u32,
    /// Hash of the configuration this run was started with.
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: usize,
    /// All model and posterior parameters.
    pub params: ParamStore,
    /// Optimizer moments and step count.
    pub optimizer: Adam,
    /// Objective value at the last completed epoch.
    pub elbo: F,
}

/// Writes a checkpoint as JSON.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_json(path, checkpoint)
}

/// Loads a checkpoint, refusing one written under a different configuration.
pub fn load_checkpoint(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let checkpoint: Checkpoint = read_json(path)?;
    if checkpoint.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} (this build reads {FORMAT_VERSION})",
            checkpoint.format_version
        )));
    }
    if checkpoint.config_hash != expected_hash {
        return Err(Error::ConfigHashMismatch(format!(
            "checkpoint was written under {} but the active configuration hashes to {}",
            checkpoint.config_hash, expected_hash
        )));
    }
    Ok(checkpoint)
}

/// Writes one grayscale image as binary PGM (P5), mapping intensities in
/// `[0, 1]` to bytes 0–255 (clamped).
pub fn write_pgm(path: &Path, image: &ArrayView2<F>) -> Result<()> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mut bytes = Vec::with_capacity(32 + h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for row in image.rows() {
        for &px in row {
            let clamped = px.clamp(0.0, 1.0);
            bytes.push((clamped * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}
