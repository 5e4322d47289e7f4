use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{MetricsReport, SweepResult};

use super::{file_err, Result};

/// Write via a same-directory temp file and rename, so readers never see a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(file_err(path))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Fixed column order; metric values scaled to percent with two decimals.
/// One aggregate row follows the per-dataset rows.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("dataset,family,n_real,n_fake,ap,acc\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.dataset,
            row.family,
            row.n_real,
            row.n_fake,
            pct(row.ap),
            pct(row.acc)
        ));
    }
    let n_real: usize = report.rows.iter().map(|r| r.n_real).sum();
    let n_fake: usize = report.rows.iter().map(|r| r.n_fake).sum();
    out.push_str(&format!(
        "aggregate,all,{},{},{},{}\n",
        n_real,
        n_fake,
        pct(report.map),
        pct(report.mean_acc)
    ));
    out
}

/// Full-precision structured form with run metadata.
pub fn metrics_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("family,perturbation,parameter,n_real,n_fake,ap,acc,error\n");
    for cell in &sweep.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.family,
            cell.perturbation,
            cell.parameter,
            cell.n_real,
            cell.n_fake,
            cell.ap.map(pct).unwrap_or_default(),
            cell.acc.map(pct).unwrap_or_default(),
            cell.error.clone().unwrap_or_default()
        ));
    }
    out
}

pub fn sweep_json(sweep: &SweepResult) -> String {
    serde_json::to_string_pretty(sweep).expect("sweep serializes")
}

/// Per-family x/y series for external plotting: one line per grid cell with
/// the perturbation parameter as x (identity at x = 0).
pub fn sweep_plot_data(sweep: &SweepResult) -> String {
    let mut out = String::from("family,series,x,ap,acc\n");
    for cell in &sweep.cells {
        let series = if cell.perturbation == "identity" {
            "identity".to_string()
        } else {
            format!("{}_{}", cell.perturbation, cell.parameter)
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.family,
            series,
            cell.parameter,
            cell.ap.map(|v| v.to_string()).unwrap_or_default(),
            cell.acc.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    out
}

pub fn emit_metrics_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    atomic_write(&csv_path, metrics_csv(report).as_bytes())?;
    atomic_write(&json_path, metrics_json(report).as_bytes())?;
    Ok(vec![csv_path, json_path])
}

pub fn emit_sweep_result(sweep: &SweepResult, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    let plot_path = dir.join(format!("{stem}_plot.csv"));
    atomic_write(&csv_path, sweep_csv(sweep).as_bytes())?;
    atomic_write(&json_path, sweep_json(sweep).as_bytes())?;
    atomic_write(&plot_path, sweep_plot_data(sweep).as_bytes())?;
    Ok(vec![csv_path, json_path, plot_path])
}

pub fn emit_loss_curve(curve: &[f64], dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    let path = dir.join(format!("{stem}.csv"));
    atomic_write(&path, out.as_bytes())?;
    Ok(path)
}

/// One row per image: source id, label, family, then the embedding values
/// comma-separated at full precision.
pub fn features_csv(rows: &[(String, u8, String, Vec<f32>)]) -> String {
    let mut out = String::new();
    for (source_id, label, family, emb) in rows {
        out.push_str(&format!("{source_id},{label},{family}"));
        for v in emb {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(file_err(path))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Reproducibility record written next to every command's outputs. Every
/// artifact file is listed with its content hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_digest,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(ManifestEntry {
            file: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    pub fn finish_and_write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        atomic_write(
            &path,
            serde_json::to_string_pretty(&self).expect("manifest serializes").as_bytes(),
        )?;
        Ok(path)
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
