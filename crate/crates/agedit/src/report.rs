//! Metrics files and image grids.

use std::path::{Path, PathBuf};

use agedit_core::eval::{AblationTable, EvalReport};
use agedit_core::synthface::{render_face, SyntheticFaceSpec};
use agedit_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::format::{read_text, write_file};
use crate::image::grid;

pub const METRICS_FILE: &str = "metrics.toml";
pub const GRID_FILE: &str = "grid.pgm";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    /// Untrained-prior baseline MAE, when computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationTable>,
}

pub fn metrics_to_toml(m: &Metrics) -> String {
    toml::to_string(m).expect("metrics serialize")
}

pub fn save_metrics(path: &Path, m: &Metrics) -> AppResult<()> {
    write_file(path, metrics_to_toml(m).as_bytes())
}

pub fn load_metrics(path: &Path) -> AppResult<Metrics> {
    toml::from_str(&read_text(path)?).map_err(|e| AppError::format(path, e.message().to_string()))
}

/// Per-target MAE table, one column per target age plus the average.
pub fn mae_table(r: &EvalReport) -> String {
    let mut head = String::from("target ");
    let mut row = String::from("MAE    ");
    for (t, m) in r.targets.iter().zip(&r.per_target_mae) {
        head.push_str(&format!("{t:>8}"));
        row.push_str(&format!("{m:>8.3}"));
    }
    head.push_str(&format!("{:>9}", "avg"));
    row.push_str(&format!("{:>9.3}", r.average_mae));
    format!("{head}\n{row}\nidentity similarity {:.4}\n", r.mean_identity_similarity)
}

pub fn ablation_table(t: &AblationTable) -> String {
    let mut s = format!("{:<10}{:>10}{:>12}\n", "variant", "MAE", "similarity");
    for r in &t.rows {
        s.push_str(&format!("{:<10}{:>10.3}{:>12.4}\n", r.variant.label(), r.mae, r.similarity));
    }
    s
}

/// Write `metrics.toml` and `grid.pgm` into `out_dir`. The grid has one row
/// of source renders followed by one row per target age, one column per
/// spec. `edits` is indexed `[target][spec]`. Returns the written paths.
pub fn export_report(
    report: &EvalReport,
    specs: &[SyntheticFaceSpec],
    edits: &[Vec<Tensor<f32>>],
    baseline_mae: Option<f64>,
    out_dir: &Path,
) -> AppResult<Vec<PathBuf>> {
    report.check()?;
    if edits.len() != report.targets.len() || edits.iter().any(|r| r.len() != specs.len()) {
        return Err(AppError::Failed("edit grid does not match targets × specs".into()));
    }
    let mut rows = vec![specs.iter().map(render_face::<f32>).collect::<Result<Vec<_>, _>>()?];
    rows.extend(edits.iter().cloned());
    let grid_path = out_dir.join(GRID_FILE);
    write_file(&grid_path, &grid(&rows)?.to_pgm())?;
    let mut report = report.clone();
    report.grid_files = vec![GRID_FILE.to_string()];
    let metrics_path = out_dir.join(METRICS_FILE);
    save_metrics(
        &metrics_path,
        &Metrics {
            eval: Some(report),
            baseline_mae,
            ablation: None,
        },
    )?;
    Ok(vec![metrics_path, grid_path])
}
