//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use noisy_forge::checkpoint::{load_checkpoint_with, save_checkpoint};
use noisy_forge::eval::{
    auc_trapezoid, build_upper_bound, compute_rauc, preserved_accuracy, sigma_grid, MetricsSummary,
    RobustnessCurve, SweepConfig, UpperBoundCurve,
};
use noisy_forge::scan::{grid_scan, select_optimal, theta_heuristic, ScanBaseline, ScanSummary};
use noisy_forge::train::{train_with, TrainConfig};
use noisy_forge::{Error, Model, NoiseSchedule};
use serde::Serialize;
use thiserror::Error as ThisError;

use crate::config::{load_data, ExperimentConfig, LoadedData};
use crate::{ReportArgs, SweepArgs};

pub const REPORT_HEADER: &str = "series,sigma,mean_acc,std_acc";

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Config(Error),
    #[error("{0}")]
    Core(#[from] Error),
    /// An input file that exists in principle but cannot be used.
    #[error("cannot use {}: {source}", path.display())]
    Unreadable { path: PathBuf, source: Error },
    #[error("missing prerequisite file(s): {}", list(.0))]
    Missing(Vec<PathBuf>),
    #[error("{0}")]
    Workers(String),
}

fn list(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } => 3,
        Error::TrainingAt { source, .. } => core_exit_code(source),
        Error::Format { .. } => 4,
        _ => 1,
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Workers(_) => 2,
            CliError::Core(e) => core_exit_code(e),
            CliError::Unreadable { .. } => 4,
            CliError::Missing(_) => 5,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(CliError::Config)
}

fn require(paths: &[&Path]) -> CliResult<()> {
    let missing: Vec<PathBuf> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.to_path_buf())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Missing(missing))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Usage(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_curve(path: &Path) -> CliResult<RobustnessCurve> {
    RobustnessCurve::read_csv(path).map_err(|source| CliError::Unreadable {
        path: path.to_path_buf(),
        source,
    })
}

/// File name of the noisy-training model trained at `sigma`.
pub fn nt_label(sigma: f64) -> String {
    format!("nt_sigma_{sigma}")
}

fn prepare(config: &Path) -> CliResult<(ExperimentConfig, LoadedData)> {
    let cfg = load_config(config)?;
    let data = load_data(&cfg.dataset).map_err(|e| match e {
        Error::Format { .. } | Error::Io { .. } => CliError::Unreadable {
            path: config.to_path_buf(),
            source: e,
        },
        other => other.into(),
    })?;
    create_dir(&cfg.output_dir)?;
    Ok((cfg, data))
}

fn factory<'a>(
    cfg: &'a ExperimentConfig,
    data: &'a LoadedData,
) -> impl Fn() -> noisy_forge::Result<Model> + Sync + 'a {
    move || cfg.build_model(&data.train)
}

pub fn train(config: &Path) -> CliResult<()> {
    let (cfg, data) = prepare(config)?;
    let out = &cfg.output_dir;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("dataset.json"), &data.metadata)?;
    let model = cfg.build_model(&data.train)?;
    let (model, log) = train_with(model, &data.train, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  clean_acc {:.4}  lr {:.6}",
            r.epoch, r.loss, r.clean_acc, r.lr
        );
    })?;
    save_checkpoint(&model, &out.join("model.nfck"))?;
    log.write_csv(&out.join("trainlog.csv"))?;
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let (cfg, data) = prepare(&args.config)?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model.nfck"));
    let mut injection = cfg.injection();
    if args.no_logit_noise {
        injection.logits = false;
    }
    let model: Model =
        load_checkpoint_with(&ckpt, injection).map_err(|source| CliError::Unreadable {
            path: ckpt.clone(),
            source,
        })?;
    let sigmas = sigma_grid(args.sigma_min, args.sigma_max, args.sigma_step).map_err(|e| {
        CliError::Config(Error::Config {
            field: "--sigma-step".into(),
            msg: e.to_string(),
        })
    })?;
    let sweep = SweepConfig {
        sigmas,
        repeats: args.repeats,
        seed: args.seed.unwrap_or(cfg.sweep.seed),
    };
    sweep.validate().map_err(CliError::Config)?;
    let curve = sweep.run(&model, &data.test)?;

    let mut summary = MetricsSummary {
        auc: auc_trapezoid(&curve)?,
        rauc_percent: None,
        preserved_accuracy_pp: None,
        sigma_train: args.sigma_train,
    };
    if let Some(up) = &args.upper {
        summary.rauc_percent = Some(compute_rauc(&curve, &read_curve(up)?)?);
    }
    if let (Some(base), Some(st)) = (&args.baseline, args.sigma_train) {
        summary.preserved_accuracy_pp = Some(preserved_accuracy(&curve, &read_curve(base)?, st)?);
    }
    let stem = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("sweep"));
    curve.write_csv(&stem.with_extension("csv"))?;
    write_json(&stem.with_extension("json"), &summary)
}

pub fn upper_bound(config: &Path) -> CliResult<()> {
    let (cfg, data) = prepare(config)?;
    let dir = cfg.output_dir.join("upper");
    create_dir(&dir)?;
    let (curve, models) = build_upper_bound(
        factory(&cfg, &data),
        &data.train,
        &data.test,
        &cfg.upper_bound.train_sigmas,
        &cfg.train,
        &cfg.sweep,
        nt_label,
    )?;
    for (point, model) in curve.trained.iter().zip(&models) {
        save_checkpoint(model, &dir.join(format!("{}.nfck", point.checkpoint)))?;
    }
    curve
        .curve
        .write_csv(&cfg.output_dir.join("upper_bound.csv"))?;
    write_json(&cfg.output_dir.join("upper_bound.json"), &curve)
}

/// The noisy-training model at `sigma`: reused from the upper-bound run
/// when it trained that σ, otherwise trained now and saved beside it.
fn nt_model(cfg: &ExperimentConfig, data: &LoadedData, sigma: f64) -> CliResult<Model> {
    let path = cfg
        .output_dir
        .join("upper")
        .join(format!("{}.nfck", nt_label(sigma)));
    if path.is_file() {
        let fresh = cfg.build_model(&data.train)?;
        return noisy_forge::checkpoint::load_checkpoint_as(&path, &fresh).map_err(|source| {
            CliError::Unreadable {
                path: path.clone(),
                source,
            }
        });
    }
    let train_cfg: TrainConfig = cfg.train.clone().with_schedule(NoiseSchedule::fixed(sigma));
    let (model, _) = train_with(
        cfg.build_model(&data.train)?,
        &data.train,
        &train_cfg,
        |_| {},
    )
    .map_err(|e| Error::TrainingAt {
        sigma,
        source: Box::new(e),
    })?;
    save_checkpoint(&model, &path)?;
    Ok(model)
}

pub fn scan(config: &Path) -> CliResult<()> {
    let cfg = load_config(config)?;
    let Some(settings) = cfg.scan.clone() else {
        return Err(CliError::Config(Error::Config {
            field: "scan".into(),
            msg: "the scan command needs a `scan` section".into(),
        }));
    };
    let ub_json = cfg.output_dir.join("upper_bound.json");
    require(&[&ub_json])?;
    let text = fs::read_to_string(&ub_json).map_err(|e| Error::Io {
        path: ub_json.clone(),
        source: e,
    })?;
    let upper: UpperBoundCurve = serde_json::from_str(&text).map_err(|e| CliError::Unreadable {
        path: ub_json.clone(),
        source: Error::Format {
            path: ub_json.clone(),
            msg: e.to_string(),
        },
    })?;
    let (cfg, data) = prepare(config)?;
    let grid = settings.grid();
    let st = grid.sigma_train;

    let nt = nt_model(&cfg, &data, st)?;
    let nt_curve = cfg.sweep.run(&nt, &data.test)?;
    let baseline = ScanBaseline {
        upper: &upper,
        nt: &nt_curve,
    };
    let dir = cfg.output_dir.join("scan");
    create_dir(&dir)?;
    let result = grid_scan(
        &grid,
        factory(&cfg, &data),
        &data.train,
        &data.test,
        &cfg.train,
        &cfg.sweep,
        &baseline,
        |cell, model| {
            eprintln!(
                "cell alpha={} theta={}: rauc {:.2}% pa {:.2}pp",
                cell.alpha, cell.theta, cell.rauc_percent, cell.preserved_acc_pp
            );
            let model = model?;
            let name = format!("vant_a{}_t{}.nfck", cell.alpha, cell.theta);
            save_checkpoint(model, &dir.join(&name)).ok()?;
            Some(name)
        },
    )?;
    result.write_csv(&cfg.output_dir.join("scan.csv"))?;
    let selected = select_optimal(&result.cells)?;

    let name = selected
        .cell
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Degenerate("selected cell has no saved checkpoint".into()))?;
    let fresh = cfg.build_model(&data.train)?;
    let vant = noisy_forge::checkpoint::load_checkpoint_as(&dir.join(name), &fresh)?;
    let vant_curve = cfg.sweep.run(&vant, &data.test)?;

    let summary = ScanSummary {
        sigma_train: st,
        theta_heuristic: theta_heuristic(st),
        nt_rauc_percent: compute_rauc(&nt_curve, &upper.curve)?,
        failed_cells: result.failures().into_iter().cloned().collect(),
        selected,
    };
    nt_curve.write_csv(&cfg.output_dir.join("nt_curve.csv"))?;
    vant_curve.write_csv(&cfg.output_dir.join("vant_curve.csv"))?;
    write_json(&cfg.output_dir.join("scan_summary.json"), &summary)
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| args.dir.join(name));
    let series = [
        ("nt", pick(&args.nt, "nt_curve.csv")),
        ("vant", pick(&args.vant, "vant_curve.csv")),
        ("upper", pick(&args.upper, "upper_bound.csv")),
    ];
    require(&series.iter().map(|(_, p)| p.as_path()).collect::<Vec<_>>())?;
    let clean = match &args.clean {
        Some(p) => {
            require(&[p])?;
            Some(p.clone())
        }
        None => Some(args.dir.join("sweep.csv")).filter(|p| p.is_file()),
    };

    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let all = series
        .iter()
        .map(|(n, p)| (*n, p.clone()))
        .chain(clean.map(|p| ("clean", p)));
    for (name, path) in all {
        let curve = read_curve(&path)?;
        for i in 0..curve.len() {
            out.push_str(&format!(
                "{name},{},{},{}\n",
                curve.sigmas[i], curve.mean_acc[i], curve.std_acc[i]
            ));
        }
    }
    let target = pick(&args.out, "report.csv");
    write_text(&target, &out)
}
