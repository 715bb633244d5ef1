//! On-disk artifact formats: JSON-lines datasets and results, the network
//! checkpoint, loss curves, sweep grids, and summary tables.
//!
//! Every artifact embeds the experiment seed, the config hash, and the code
//! version, so a file always states what produced it. Reruns with identical
//! inputs are byte-identical except for explicitly named timing fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use odfsep_core::metrics::{EvalRecord, FiberEstimate};
use odfsep_core::mlp::{MlpModel, TrainRecord};
use odfsep_core::simulate::{compose_multifiber, FiberConfig, OdfSample};
use odfsep_core::sh::ShVector;

use crate::CliError;

/// Code version stamped into artifacts.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The provenance triple carried by every artifact.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Provenance { seed, config_hash, code_version: CODE_VERSION.into() }
    }

    /// The `# key=value` comment lines prefixed to CSV artifacts.
    pub fn csv_comments(&self) -> String {
        format!(
            "# seed={}\n# config_hash={}\n# code_version={}\n",
            self.seed, self.config_hash, self.code_version
        )
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| {
                CliError::runtime(format!("cannot create {}: {e}", dir.display()))
            })?;
        }
    }
    fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Manifest written beside a dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub kind: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub lmax: usize,
    pub n_two: usize,
    pub n_three: usize,
    pub n_samples: usize,
}

/// One dataset row: the generating configuration plus the composed ODF.
/// Per-fiber component ODFs are recomputed on load from the configuration,
/// which is exactly how they were built in the first place.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetRow {
    index: usize,
    config: FiberConfig,
    total: ShVector,
}

/// Writes the dataset as JSON lines plus a manifest file next to it.
pub fn write_dataset(
    path: &Path,
    manifest_path: &Path,
    samples: &[OdfSample],
    manifest: &DatasetManifest,
) -> Result<(), CliError> {
    let mut lines = String::new();
    for (index, s) in samples.iter().enumerate() {
        let row = DatasetRow { index, config: s.config.clone(), total: s.total.clone() };
        lines.push_str(&serde_json::to_string(&row).expect("row serializes"));
        lines.push('\n');
    }
    write_atomic(path, &lines)?;
    let mut manifest_json =
        serde_json::to_string_pretty(manifest).expect("manifest serializes");
    manifest_json.push('\n');
    write_atomic(manifest_path, &manifest_json)
}

/// Reads a dataset back, recomposing per-fiber components from each row's
/// configuration. The input file is never modified.
pub fn read_dataset(path: &Path, lmax: usize) -> Result<Vec<OdfSample>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::runtime(format!(
            "cannot read dataset {}: {e}; run `odfsep simulate` first",
            path.display()
        ))
    })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetRow = serde_json::from_str(line).map_err(|e| {
            CliError::runtime(format!(
                "corrupt dataset {} line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let sample = compose_multifiber(&row.config, lmax)
            .map_err(|e| CliError::runtime(format!("invalid configuration in row: {e}")))?;
        if sample.total.coeffs().len() != row.total.coeffs().len() {
            return Err(CliError::runtime(format!(
                "dataset {} was generated at a different band limit",
                path.display()
            )));
        }
        out.push(sample);
    }
    if out.is_empty() {
        return Err(CliError::runtime(format!("dataset {} is empty", path.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Separation results
// ---------------------------------------------------------------------------

/// First line of a results file: run-level metadata. `total_wall_ms` and
/// `ms_per_voxel` are the timing fields excluded from bit-identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub kind: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub method: String,
    pub n_voxels: usize,
    pub hardware: String,
    pub total_wall_ms: f64,
    pub ms_per_voxel: f64,
}

/// One separated voxel: estimates plus its evaluation record.
/// `record.wall_ms` is a timing field excluded from bit-identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub index: usize,
    pub fibers: Vec<FiberEstimate>,
    pub record: EvalRecord,
}

pub fn write_results(
    path: &Path,
    header: &ResultsHeader,
    rows: &[ResultRow],
) -> Result<(), CliError> {
    let mut lines = serde_json::to_string(header).expect("header serializes");
    lines.push('\n');
    for row in rows {
        lines.push_str(&serde_json::to_string(row).expect("row serializes"));
        lines.push('\n');
    }
    write_atomic(path, &lines)
}

pub fn read_results(path: &Path) -> Result<(ResultsHeader, Vec<ResultRow>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::runtime(format!("cannot read results {}: {e}", path.display()))
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::runtime(format!("results {} is empty", path.display())))?;
    let header: ResultsHeader = serde_json::from_str(header_line).map_err(|e| {
        CliError::runtime(format!("corrupt results header in {}: {e}", path.display()))
    })?;
    if header.kind != "odfsep-results" {
        return Err(CliError::runtime(format!(
            "{} is not a results file (kind {})",
            path.display(),
            header.kind
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let row: ResultRow = serde_json::from_str(line).map_err(|e| {
            CliError::runtime(format!(
                "corrupt results row {} in {}: {e}",
                lineno + 2,
                path.display()
            ))
        })?;
        rows.push(row);
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// Checkpoints and loss curves
// ---------------------------------------------------------------------------

/// A trained network with everything needed to reproduce and reuse it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub lmax: usize,
    pub mesh_pixels: usize,
    pub kappa: f64,
    pub include_single: bool,
    /// Seed of the training-data stream.
    pub data_seed: u64,
    /// Seed of the held-out validation stream.
    pub validation_seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_batch: usize,
    pub final_val_loss: f64,
    pub batches_run: usize,
    pub stopped_early: bool,
    pub stop_reason: String,
    pub model: MlpModel,
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CliError> {
    let mut json = serde_json::to_string(checkpoint).expect("checkpoint serializes");
    json.push('\n');
    write_atomic(path, &json)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::runtime(format!(
            "cannot read checkpoint {}: {e}; train one with `odfsep train`",
            path.display()
        ))
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
        CliError::runtime(format!("corrupt checkpoint {}: {e}", path.display()))
    })?;
    if ckpt.kind != "odfsep-checkpoint" {
        return Err(CliError::runtime(format!(
            "{} is not a checkpoint (kind {})",
            path.display(),
            ckpt.kind
        )));
    }
    Ok(ckpt)
}

/// Loss curve CSV: provenance comments, a stop-reason comment, a header,
/// then one row per validation point.
pub fn write_loss_csv(
    path: &Path,
    provenance: &Provenance,
    stop_reason: &str,
    log: &[TrainRecord],
) -> Result<(), CliError> {
    let mut text = provenance.csv_comments();
    text.push_str(&format!("# stop_reason={stop_reason}\n"));
    text.push_str("batch,train_loss,val_loss\n");
    for row in log {
        text.push_str(&format!("{},{},{}\n", row.batch, row.train_loss, row.val_loss));
    }
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// Sweep grids
// ---------------------------------------------------------------------------

/// One sweep cell for one method.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepCell {
    pub method: String,
    pub separation_deg: f64,
    pub min_fraction: f64,
    pub n_samples: usize,
    pub median_min_acc: f64,
    pub iqr_min_acc: f64,
}

/// Sweep CSV, shaped for direct plotting: one row per (method, cell).
pub fn write_sweep_csv(
    path: &Path,
    provenance: &Provenance,
    cells: &[SweepCell],
) -> Result<(), CliError> {
    let mut text = provenance.csv_comments();
    text.push_str("method,separation_deg,min_fraction,n_samples,median_min_acc,iqr_min_acc\n");
    for c in cells {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.method, c.separation_deg, c.min_fraction, c.n_samples, c.median_min_acc,
            c.iqr_min_acc
        ));
    }
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// Summary tables
// ---------------------------------------------------------------------------

/// One aggregated table row for a method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n_voxels: usize,
    pub angular_error_median_deg: f64,
    pub angular_error_iqr_deg: f64,
    pub vf_error_median: f64,
    pub vf_error_iqr: f64,
    pub acc_median: f64,
    pub acc_iqr: f64,
    /// Timing field, excluded from bit-identity.
    pub ms_per_voxel: f64,
}

/// Fixed CSV column order of the evaluation summary.
pub const SUMMARY_COLUMNS: &str = "method,n_voxels,angular_error_median_deg,\
angular_error_iqr_deg,vf_error_median,vf_error_iqr,acc_median,acc_iqr,ms_per_voxel";

pub fn write_summary_csv(
    path: &Path,
    provenance: &Provenance,
    rows: &[SummaryRow],
) -> Result<(), CliError> {
    let mut text = provenance.csv_comments();
    text.push_str(SUMMARY_COLUMNS);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.n_voxels,
            r.angular_error_median_deg,
            r.angular_error_iqr_deg,
            r.vf_error_median,
            r.vf_error_iqr,
            r.acc_median,
            r.acc_iqr,
            r.ms_per_voxel
        ));
    }
    write_atomic(path, &text)
}

fn med_iqr(median: f64, iqr: f64, digits: usize) -> String {
    format!("{median:.digits$} ({iqr:.digits$})")
}

/// Markdown summary table: median (IQR) per metric, one row per method.
pub fn write_summary_markdown(
    path: &Path,
    provenance: &Provenance,
    rows: &[SummaryRow],
) -> Result<(), CliError> {
    let mut text = String::from(
        "| Method | Angular error (deg) | VF error | ACC | ms/voxel |\n\
         |---|---|---|---|---|\n",
    );
    for r in rows {
        text.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} |\n",
            r.method,
            med_iqr(r.angular_error_median_deg, r.angular_error_iqr_deg, 4),
            med_iqr(r.vf_error_median, r.vf_error_iqr, 4),
            med_iqr(r.acc_median, r.acc_iqr, 4),
            r.ms_per_voxel
        ));
    }
    text.push_str(&format!(
        "\nMedians with interquartile ranges in parentheses. seed={} config_hash={} \
         code_version={}\n",
        provenance.seed, provenance.config_hash, provenance.code_version
    ));
    write_atomic(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use odfsep_core::simulate::generate_dataset;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("odfsep-artifact-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn dataset_round_trips_bitwise() {
        let samples = generate_dataset(9, 3, 2, 6).unwrap();
        let path = tmp("ds.jsonl");
        let mpath = tmp("ds.manifest.json");
        let manifest = DatasetManifest {
            kind: "odfsep-dataset".into(),
            provenance: Provenance::new(9, "h".into()),
            lmax: 6,
            n_two: 3,
            n_three: 2,
            n_samples: 5,
        };
        write_dataset(&path, &mpath, &samples, &manifest).unwrap();
        let back = read_dataset(&path, 6).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.total.coeffs(), b.total.coeffs());
            assert_eq!(a.components.len(), b.components.len());
            for (ca, cb) in a.components.iter().zip(&b.components) {
                assert_eq!(ca.coeffs(), cb.coeffs());
            }
        }
    }

    #[test]
    fn missing_dataset_is_actionable() {
        let err = read_dataset(Path::new("/nonexistent/ds.jsonl"), 6).unwrap_err();
        assert!(err.to_string().contains("odfsep simulate"));
    }

    #[test]
    fn float_fields_round_trip_bit_exactly_through_json() {
        let vals = [0.1f64, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0];
        for v in vals {
            let s = serde_json::to_string(&v).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(v.to_bits(), back.to_bits());
        }
    }
}
