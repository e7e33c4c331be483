use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::check::run_suite;
use super::config::RunConfig;
use super::{CliError, Result, Suite};
use crate::enemyroom::{
    calibrate_theta, evaluate, generate_dataset, history_csv, init_params, metrics_csv, read_dataset, read_meta,
    train, write_dataset, Calibration, DatasetMeta, DatasetSummary, EnemyRoom, MetricsRow, Trajectory,
    WorldConfig, GENERATOR_VERSION,
};
use crate::neural::{load_json, save_json, ParamStore};
use crate::stochastics::RngKey;

/// The eight (N, T, E) configurations of the benchmark grid.
pub const GRID: [(i64, usize, usize); 8] = [
    (10, 10, 1),
    (10, 10, 2),
    (10, 20, 1),
    (10, 20, 2),
    (15, 10, 1),
    (15, 10, 2),
    (15, 20, 1),
    (15, 20, 2),
];

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Wall-clock data lives beside the artifacts, never inside them.
fn run_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.log");
    PathBuf::from(s)
}

fn run_log(path: &Path, command: &str, started: Instant, extra: &str) -> Result<()> {
    let text = format!(
        "command: {command}\nelapsed_seconds: {:.3}\nthreads: {}\n{extra}",
        started.elapsed().as_secs_f64(),
        rayon::current_num_threads()
    );
    write_file(path, &text)
}

fn summary_line(label: &str, s: &DatasetSummary) -> String {
    format!(
        "{label}: {} trajectories, {} deaths ({:.2}%), hit rate {:.3}",
        s.count,
        s.deaths,
        100.0 * s.death_rate,
        s.hit_rate
    )
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let started = Instant::now();
    let world = &cfg.world;
    let (data, summary) = generate_dataset(world, cfg.count, &RngKey::new(world.seed))?;
    let meta = DatasetMeta {
        generator_version: GENERATOR_VERSION.to_string(),
        seed: world.seed,
        config: world.clone(),
        summary,
    };
    write_dataset(out, &data, &meta)?;
    run_log(&run_log_path(out), "gen-data", started, "")?;
    Ok(summary_line(&world.label(), &summary))
}

fn room_for(data: &[Trajectory], path: &Path) -> Result<EnemyRoom> {
    let first = data
        .first()
        .ok_or_else(|| CliError::Config(format!("{}: empty dataset", path.display())))?;
    if let Some(bad) = data.iter().find(|t| (t.n, t.t, t.e) != (first.n, first.t, first.e)) {
        return Err(CliError::Config(format!(
            "{}: mixed configurations ({}, {}, {}) and ({}, {}, {})",
            path.display(),
            first.n,
            first.t,
            first.e,
            bad.n,
            bad.t,
            bad.e
        )));
    }
    Ok(EnemyRoom::new(first.n, first.e)?)
}

fn fresh_params(seed: u64) -> Result<ParamStore> {
    Ok(init_params(RngKey::new(seed).split(0))?)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, val: Option<&Path>, out: &Path) -> Result<String> {
    let started = Instant::now();
    let train_set = read_dataset(data)?;
    let room = room_for(&train_set, data)?;
    let val_set = match val {
        Some(v) => read_dataset(v)?,
        None => train_set.clone(),
    };
    let store = fresh_params(cfg.seed)?;
    let key = RngKey::new(cfg.seed).split(1);
    let outcome = train(&room, store, &train_set, &val_set, &cfg.train, &key, |r| {
        eprintln!(
            "epoch {:>3} loss {:.5} val_ba {} theta {:.4} ({:.0}s)",
            r.epoch,
            r.loss,
            r.val_balanced_accuracy.map_or("NA".into(), |b| format!("{b:.4}")),
            r.theta_hat,
            started.elapsed().as_secs_f64()
        );
    })?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ckpt = out.join("checkpoint.json");
    save_json(&outcome.store, &ckpt)?;
    write_file(&out.join("history.csv"), &history_csv(&outcome.history))?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let extra = format!(
        "epochs_run: {}\nbest_epoch: {}\n",
        outcome.history.len(),
        outcome.best_epoch
    );
    run_log(&out.join("run.log"), "train", started, &extra)?;
    Ok(format!(
        "trained {} epochs, kept epoch {}, theta_hat {:.4}; wrote {}",
        outcome.history.len(),
        outcome.best_epoch,
        crate::enemyroom::theta_hat(&outcome.store)?,
        ckpt.display()
    ))
}

/// Datasets to evaluate, in order. Relative paths are resolved against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    /// Row label; taken from the dataset's metadata when absent.
    #[serde(default)]
    pub config: Option<String>,
}

fn default_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalSource {
    Data(PathBuf),
    Manifest(PathBuf),
}

impl EvalSource {
    fn entries(&self) -> Result<Vec<ManifestEntry>> {
        match self {
            EvalSource::Data(p) => Ok(vec![ManifestEntry {
                path: p.clone(),
                split: p
                    .file_stem()
                    .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
                config: None,
            }]),
            EvalSource::Manifest(m) => {
                let text = std::fs::read_to_string(m).map_err(|e| CliError::io(m, e))?;
                let mf: Manifest = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", m.display())))?;
                let base = m.parent().unwrap_or(Path::new(""));
                Ok(mf
                    .datasets
                    .into_iter()
                    .map(|mut e| {
                        if e.path.is_relative() {
                            e.path = base.join(&e.path);
                        }
                        e
                    })
                    .collect())
            }
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, source: &EvalSource, out: &Path) -> Result<String> {
    let started = Instant::now();
    let mut store = fresh_params(cfg.seed)?;
    if let Some(c) = checkpoint {
        load_json(&mut store, c)?;
    }
    let key = RngKey::new(cfg.seed).split(2);
    let mut rows = Vec::new();
    let mut report = String::new();
    for (i, entry) in source.entries()?.into_iter().enumerate() {
        let data = read_dataset(&entry.path)?;
        let room = room_for(&data, &entry.path)?;
        let label = match &entry.config {
            Some(c) => c.clone(),
            None => read_meta(&entry.path)
                .map(|m| m.config.label())
                .unwrap_or_else(|_| WorldConfig::new(data[0].n, data[0].t, data[0].e).label()),
        };
        let evaluation = evaluate(
            &room,
            &store,
            &data,
            cfg.eval.threshold,
            cfg.eval.n_particles,
            &key.split(i as u64),
        )?;
        let row = MetricsRow {
            config: label,
            split: entry.split,
            evaluation,
        };
        let r = row.record();
        let _ = writeln!(report, "{} {}: balanced_accuracy {} f1 {}", r[0], r[1], r[2], r[3]);
        rows.push(row);
    }
    write_file(out, &metrics_csv(&rows)?)?;
    run_log(&run_log_path(out), "eval", started, "")?;
    Ok(report.trim_end().to_string())
}

pub fn cmd_check(suite: Suite, seed: u64) -> Result<String> {
    let r = run_suite(suite, seed)?;
    if r.passed {
        Ok(r.to_string())
    } else {
        Err(CliError::Validation(r.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLog {
    pub calibration: Calibration,
    /// `(label, death rate)` of every grid configuration at the calibrated
    /// hit probability.
    pub grid: Vec<(String, f64)>,
}

pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let started = Instant::now();
    let c = &cfg.calibration;
    let cal = calibrate_theta(&cfg.world, c.target, c.count, cfg.world.seed, c.tol, c.max_iter)?;
    let mut grid = Vec::new();
    for (n, t, e) in GRID {
        let world = WorldConfig {
            theta_star: cal.theta,
            ..WorldConfig::new(n, t, e)
        };
        let (_, s) = generate_dataset(&world, c.count, &RngKey::new(cfg.world.seed))?;
        grid.push((world.label(), s.death_rate));
    }
    let log = CalibrationLog { calibration: cal, grid };
    let text = serde_json::to_string_pretty(&log).expect("plain data serialises") + "\n";
    write_file(out, &text)?;
    run_log(&run_log_path(out), "calibrate", started, "")?;
    let mut msg = format!(
        "theta* = {} gives death rate {:.4} (target {})",
        log.calibration.theta, log.calibration.death_rate, c.target
    );
    for (l, r) in &log.grid {
        let _ = write!(msg, "\n{l}: {:.2}%", 100.0 * r);
    }
    Ok(msg)
}
