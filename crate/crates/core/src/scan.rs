//! The (α, θ) grid scan and optimum selection.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    compute_rauc, preserved_accuracy, RobustnessCurve, SweepConfig, UpperBoundCurve,
};
use crate::model::ModelGraph;
use crate::noise::NoiseSchedule;
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig};

pub const SCAN_HEADER: &str = "alpha,theta,rauc_percent,preserved_acc_pp,status";
pub const DEFAULT_ALPHAS: [f64; 6] = [0.15, 0.3, 0.45, 0.6, 0.75, 1.0];
pub const DEFAULT_THETAS: [f64; 7] = [0.0, 0.05, 0.15, 0.25, 0.35, 0.5, 0.75];

/// `θ = 0.4 · σ_train`: a starting point for the θ range, not a substitute
/// for scanning.
pub fn theta_heuristic(sigma_train: f64) -> f64 {
    0.4 * sigma_train
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGrid {
    pub alphas: Vec<f64>,
    pub thetas: Vec<f64>,
    pub sigma_train: f64,
}

fn sorted_union(base: &[f64], extra: f64) -> Vec<f64> {
    let mut v = base.to_vec();
    if !v.contains(&extra) {
        v.push(extra);
    }
    v.sort_by(f64::total_cmp);
    v
}

impl ScanGrid {
    /// The default desk-scale grid, with the θ heuristic merged in.
    pub fn default_for(sigma_train: f64) -> Self {
        // round so that 0.4·σ matches grid literals like 0.5 exactly
        let h = (theta_heuristic(sigma_train) * 1e10).round() / 1e10;
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
            thetas: sorted_union(&DEFAULT_THETAS, h),
            sigma_train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Error::Config {
            field: field.into(),
            msg: msg.into(),
        };
        for (name, axis) in [("alphas", &self.alphas), ("thetas", &self.thetas)] {
            if axis.is_empty() {
                return Err(err(name, "must not be empty"));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(err(name, "must be strictly increasing"));
            }
            if axis.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(err(name, "values must be finite and non-negative"));
            }
        }
        if !(self.sigma_train.is_finite() && self.sigma_train >= 0.0) {
            return Err(err("sigma_train", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.alphas
            .iter()
            .flat_map(|&a| self.thetas.iter().map(move |&t| (a, t)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "reason")]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanCell {
    pub alpha: f64,
    pub theta: f64,
    pub rauc_percent: f64,
    pub preserved_acc_pp: f64,
    pub checkpoint: Option<String>,
    pub status: CellStatus,
}

impl ScanCell {
    pub fn ok(alpha: f64, theta: f64, rauc_percent: f64, preserved_acc_pp: f64) -> Self {
        Self {
            alpha,
            theta,
            rauc_percent,
            preserved_acc_pp,
            checkpoint: None,
            status: CellStatus::Ok,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

/// The selected cell; `relaxed` means no cell preserved NT accuracy and the
/// pick maximizes Preserved Accuracy instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub cell: ScanCell,
    pub relaxed: bool,
}

/// Orders by `key` descending, then smaller θ, then smaller α.
fn better(a: &ScanCell, b: &ScanCell, key: impl Fn(&ScanCell) -> f64) -> Ordering {
    key(a)
        .total_cmp(&key(b))
        .then_with(|| b.theta.total_cmp(&a.theta))
        .then_with(|| b.alpha.total_cmp(&a.alpha))
}

/// Keeps cells with non-negative Preserved Accuracy and returns the one with
/// the highest rAUC. Failed cells are never selected.
pub fn select_optimal(cells: &[ScanCell]) -> Result<Selection> {
    if cells.is_empty() {
        return Err(Error::Usage(
            "select_optimal needs at least one cell".into(),
        ));
    }
    let ok: Vec<&ScanCell> = cells.iter().filter(|c| c.is_ok()).collect();
    let pick = |pool: &[&ScanCell], key: fn(&ScanCell) -> f64| {
        pool.iter()
            .copied()
            .max_by(|a, b| better(a, b, key))
            .cloned()
    };
    let kept: Vec<&ScanCell> = ok
        .iter()
        .copied()
        .filter(|c| c.preserved_acc_pp >= 0.0)
        .collect();
    if let Some(cell) = pick(&kept, |c| c.rauc_percent) {
        return Ok(Selection {
            cell,
            relaxed: false,
        });
    }
    pick(&ok, |c| c.preserved_acc_pp)
        .map(|cell| Selection {
            cell,
            relaxed: true,
        })
        .ok_or_else(|| Error::Degenerate("every scan cell failed".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub grid: ScanGrid,
    /// Row-major over `(alpha, theta)`.
    pub cells: Vec<ScanCell>,
}

impl ScanResult {
    pub fn failures(&self) -> Vec<&ScanCell> {
        self.cells.iter().filter(|c| !c.is_ok()).collect()
    }

    pub fn cell(&self, alpha: f64, theta: f64) -> Option<&ScanCell> {
        self.cells
            .iter()
            .find(|c| c.alpha == alpha && c.theta == theta)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCAN_HEADER}\n");
        for c in &self.cells {
            match &c.status {
                CellStatus::Ok => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},ok",
                        c.alpha, c.theta, c.rauc_percent, c.preserved_acc_pp
                    );
                }
                CellStatus::Failed(_) => {
                    let _ = writeln!(out, "{},{},,,failed", c.alpha, c.theta);
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a scan cell is compared against.
pub struct ScanBaseline<'a> {
    pub upper: &'a UpperBoundCurve,
    /// Sweep of the NT model trained at the grid's σ_train.
    pub nt: &'a RobustnessCurve,
}

/// Trains and sweeps one VANT model per cell (in parallel on the current
/// rayon pool). A failing cell is recorded and the scan continues.
/// `on_cell` sees each finished cell with its model, e.g. to save it.
#[allow(clippy::too_many_arguments)]
pub fn grid_scan<T: Scalar>(
    grid: &ScanGrid,
    factory: impl Fn() -> Result<ModelGraph<T>> + Sync,
    train_data: &Dataset<T>,
    test_data: &Dataset<T>,
    train_cfg: &TrainConfig,
    sweep: &SweepConfig,
    baseline: &ScanBaseline<'_>,
    on_cell: impl Fn(&ScanCell, Option<&ModelGraph<T>>) -> Option<String> + Sync,
) -> Result<ScanResult> {
    grid.validate()?;
    if baseline.upper.curve.sigmas != sweep.sigmas {
        return Err(Error::Usage(
            "upper bound is not on the sweep grid; rebuild it with the same sigmas".into(),
        ));
    }
    let run = |alpha: f64, theta: f64| -> Result<(ScanCell, ModelGraph<T>)> {
        let schedule = NoiseSchedule::variance_aware(grid.sigma_train, alpha, theta);
        let cfg = train_cfg.clone().with_schedule(schedule);
        let (model, _) = train(factory()?, train_data, &cfg)?;
        let curve = sweep.run(&model, test_data)?;
        let rauc = compute_rauc(&curve, &baseline.upper.curve)?;
        let pa = preserved_accuracy(&curve, baseline.nt, grid.sigma_train)?;
        Ok((ScanCell::ok(alpha, theta, rauc, pa), model))
    };
    let cells = grid
        .cells()
        .into_par_iter()
        .map(|(alpha, theta)| {
            let (mut cell, model) = match run(alpha, theta) {
                Ok((cell, model)) => (cell, Some(model)),
                Err(e) => (
                    ScanCell {
                        alpha,
                        theta,
                        rauc_percent: f64::NAN,
                        preserved_acc_pp: f64::NAN,
                        checkpoint: None,
                        status: CellStatus::Failed(e.to_string()),
                    },
                    None,
                ),
            };
            cell.checkpoint = on_cell(&cell, model.as_ref());
            cell
        })
        .collect();
    Ok(ScanResult {
        grid: grid.clone(),
        cells,
    })
}

/// Scan outcome persisted as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub sigma_train: f64,
    pub theta_heuristic: f64,
    pub selected: Selection,
    pub nt_rauc_percent: f64,
    pub failed_cells: Vec<ScanCell>,
}
