//! Experiment orchestration: run directories, manifests, seed fan-out, grids
//! and aggregation.

pub mod config;
pub mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::analytics::{
    aggregate_runs, final_eval_return, fmt17, iqm, write_curves, write_iqm_report, write_metrics, CellLabel,
    IqmReport, MetricRecord, RunSource,
};
use crate::error::{Error, Result};
use crate::learners::train;
use crate::nets::write_snapshot;

pub use config::{parse_seed_list, ConfigMap, ExperimentConfig};

pub const MANIFEST_FILE: &str = "manifest.cfg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POLICY_FILE: &str = "policy.bin";
pub const VALUE_FILE: &str = "value.bin";
/// Environment variable consulted when no output root is given.
pub const OUT_ENV_VAR: &str = "SQRT_TRUST_OUT";

pub fn code_version() -> String {
    format!("sqrt-trust {}", env!("CARGO_PKG_VERSION"))
}

/// Content hash in git's blob framing (`blob <len>\0<content>`), with SHA-256.
pub fn content_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Output root: explicit setting, then `SQRT_TRUST_OUT`, then `./runs`.
pub fn resolve_output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<env>/<algo label>/seed<k>`
pub fn run_dir(root: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    root.join(cfg.train.env.as_str())
        .join(cfg.train.update.label())
        .join(format!("seed{seed}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Failed,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Failed => "failed",
        }
    }
}

/// Snapshot of one run: its single-seed configuration plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub code_version: String,
    pub code_hash: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub final_eval: Option<f64>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = self.config.to_text();
        let _ = writeln!(out, "status = {}", self.status.as_str());
        let _ = writeln!(out, "started_unix = {}", self.started_unix);
        let _ = writeln!(out, "finished_unix = {}", self.finished_unix);
        let _ = writeln!(out, "code_version = {}", self.code_version);
        let _ = writeln!(out, "code_hash = {}", self.code_hash);
        if let Some(v) = self.final_eval {
            let _ = writeln!(out, "final_eval = {}", fmt17(v));
        }
        if let Some(e) = &self.error {
            let _ = writeln!(out, "error = {}", e.replace(['\n', '#'], " "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = ConfigMap::parse(text)?;
        let config = ExperimentConfig::from_map(&map)?;
        if config.seeds.len() != 1 {
            return Err(Error::Parse("a manifest names exactly one seed".into()));
        }
        let status = match map.get("status") {
            Some("completed") => RunStatus::Completed,
            Some("failed") => RunStatus::Failed,
            other => return Err(Error::Parse(format!("manifest status {other:?}"))),
        };
        let num = |k: &str| map.get(k).and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        Ok(RunManifest {
            seed: config.seeds[0],
            started_unix: num("started_unix"),
            finished_unix: num("finished_unix"),
            code_version: map.get("code_version").unwrap_or_default().to_string(),
            code_hash: map.get("code_hash").unwrap_or_default().to_string(),
            status,
            error: map.get("error").map(str::to_string),
            final_eval: map.get("final_eval").and_then(|v| v.parse().ok()),
            config,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn cell_label(&self) -> CellLabel {
        let u = &self.config.train.update;
        CellLabel {
            env: self.config.train.env,
            algorithm: u.label(),
            entropy_coef: u.surrogate.entropy_coef,
            beta_or_eps: u.beta_or_eps(),
            key: self.config.cell_key(),
        }
    }
}

/// Result of one seed.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub final_eval: Option<f64>,
    pub error: Option<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_artifacts(dir: &Path, metrics: &[MetricRecord], run: &crate::learners::RunArtifacts) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, metrics)?;
    write_file(&dir.join(METRICS_FILE), &buf)?;
    let p = &run.agent.policy;
    let mut buf = Vec::new();
    write_snapshot(&mut buf, p.net.dims(), p.net.params(), &p.log_std)?;
    write_file(&dir.join(POLICY_FILE), &buf)?;
    let mut buf = Vec::new();
    run.agent.value.write_snapshot(&mut buf, &[])?;
    write_file(&dir.join(VALUE_FILE), &buf)
}

/// Trains one seed into `dir`. Failures are recorded in the manifest rather
/// than returned, so sibling seeds keep going.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> RunOutcome {
    let started_unix = unix_now();
    let result = fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .and_then(|_| train(&cfg.train, seed))
        .and_then(|run| {
            write_artifacts(dir, &run.metrics, &run)?;
            Ok(final_eval_return(&run.metrics))
        });
    let (status, final_eval, error) = match result {
        Ok(f) => (RunStatus::Completed, f, None),
        Err(e) => {
            log::error!("seed {seed} failed: {e}");
            (RunStatus::Failed, None, Some(e.to_string()))
        }
    };
    let manifest = RunManifest {
        config: cfg.with_seed(seed),
        seed,
        started_unix,
        finished_unix: unix_now(),
        code_version: code_version(),
        code_hash: content_hash(&code_version()),
        status,
        error: error.clone(),
        final_eval,
    };
    let mut error = error;
    if let Err(e) = fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .and_then(|_| write_file(&dir.join(MANIFEST_FILE), manifest.to_text().as_bytes()))
    {
        log::error!("could not write manifest for seed {seed}: {e}");
        error.get_or_insert(e.to_string());
    }
    RunOutcome {
        seed,
        dir: dir.to_path_buf(),
        status: if error.is_some() { RunStatus::Failed } else { status },
        final_eval,
        error,
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))
}

/// Runs every seed of `cfg` under `root`, `jobs` at a time. Outcomes are in seed order.
pub fn train_seeds(cfg: &ExperimentConfig, root: &Path, jobs: usize) -> Result<Vec<RunOutcome>> {
    let pool = thread_pool(jobs)?;
    Ok(pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, seed, &run_dir(root, cfg, seed)))
            .collect()
    }))
}

/// Hyperparameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epsilon,
    /// `beta` for BTRPO, the penalty weight for TRPO-KL and the regularized variants.
    Beta,
    Lr,
    BatchSize,
    EntropyCoef,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::Epsilon,
        SweepAxis::Beta,
        SweepAxis::Lr,
        SweepAxis::BatchSize,
        SweepAxis::EntropyCoef,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Beta => "beta",
            SweepAxis::Lr => "lr",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::EntropyCoef => "entropy_coef",
        }
    }

    fn short(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "eps",
            SweepAxis::Beta => "beta",
            SweepAxis::Lr => "lr",
            SweepAxis::BatchSize => "bs",
            SweepAxis::EntropyCoef => "ent",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown sweep axis '{s}' (expected epsilon, beta, lr, batch_size or entropy_coef)"
                ))
            })
    }
}

/// Parses `axis=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<(SweepAxis, Vec<f64>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("grid axis '{spec}' must look like axis=v1,v2")))?;
    let axis: SweepAxis = name.trim().parse()?;
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("grid value '{}': {e}", v.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::invalid(format!("grid axis '{name}' has no values")));
    }
    Ok((axis, values))
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, v: f64) -> Result<()> {
    let u = &mut cfg.train.update;
    match axis {
        SweepAxis::Epsilon => u.surrogate.epsilon = v,
        SweepAxis::Beta => match u.algorithm {
            crate::learners::Algorithm::Btrpo => u.surrogate.beta = v,
            _ => u.surrogate.lambda_pen = v,
        },
        SweepAxis::Lr => u.adam.learning_rate = v,
        SweepAxis::EntropyCoef => u.surrogate.entropy_coef = v,
        SweepAxis::BatchSize => {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::invalid(format!("batch_size must be a positive integer, got {v}")));
            }
            cfg.train.rollout_len = v as usize;
        }
    }
    cfg.train.validate()
}

/// One point of a grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub values: Vec<(SweepAxis, f64)>,
    pub config: ExperimentConfig,
}

/// Cartesian product of the axes, first axis slowest.
pub fn expand_grid(base: &ExperimentConfig, axes: &[(SweepAxis, Vec<f64>)]) -> Result<Vec<SweepCell>> {
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::invalid("a sweep needs at least one axis with at least one value"));
    }
    for (i, (a, _)) in axes.iter().enumerate() {
        if axes[..i].iter().any(|(b, _)| b == a) {
            return Err(Error::invalid(format!("axis '{}' given twice", a.as_str())));
        }
    }
    let mut cells = vec![(Vec::new(), base.clone())];
    for (axis, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (vals, cfg) in &cells {
            for &v in values {
                let mut c: ExperimentConfig = cfg.clone();
                apply_axis(&mut c, *axis, v)?;
                let mut vs: Vec<(SweepAxis, f64)> = vals.clone();
                vs.push((*axis, v));
                next.push((vs, c));
            }
        }
        cells = next;
    }
    Ok(cells
        .into_iter()
        .map(|(values, config)| SweepCell {
            label: values
                .iter()
                .map(|(a, v)| format!("{}{v}", a.short()))
                .collect::<Vec<_>>()
                .join("_"),
            values,
            config,
        })
        .collect())
}

/// Summary of one grid cell across seeds.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub cell: SweepCell,
    pub outcomes: Vec<RunOutcome>,
}

impl CellSummary {
    pub fn finals(&self) -> Vec<f64> {
        self.outcomes.iter().filter_map(|o| o.final_eval).collect()
    }
}

/// Runs every cell of the grid; cell `c` lives under `<root>/<c.label>/`.
pub fn run_sweep(cells: &[SweepCell], root: &Path, jobs: usize) -> Result<Vec<CellSummary>> {
    let pool = thread_pool(jobs)?;
    let tasks: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes: Vec<(usize, RunOutcome)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, seed)| {
                let cell = &cells[i];
                let dir = run_dir(&root.join(&cell.label), &cell.config, seed);
                (i, run_seed(&cell.config, seed, &dir))
            })
            .collect()
    });
    let mut summaries: Vec<CellSummary> = cells
        .iter()
        .map(|c| CellSummary {
            cell: c.clone(),
            outcomes: Vec::new(),
        })
        .collect();
    for (i, o) in outcomes {
        summaries[i].outcomes.push(o);
    }
    Ok(summaries)
}

/// Grid summary: the swept values, then final-evaluation statistics.
pub fn write_sweep_summary<W: std::io::Write>(mut out: W, axes: &[SweepAxis], cells: &[CellSummary]) -> Result<()> {
    let mut text = String::from("cell");
    for a in axes {
        text.push(',');
        text.push_str(a.as_str());
    }
    text.push_str(",final_iqm,final_mean,n_completed,n_failed\n");
    for c in cells {
        text.push_str(&c.cell.label);
        for (_, v) in &c.cell.values {
            text.push(',');
            text.push_str(&fmt17(*v));
        }
        let finals = c.finals();
        let (iqm_s, mean_s) = if finals.is_empty() {
            (String::new(), String::new())
        } else {
            (
                fmt17(iqm(&finals)?),
                fmt17(finals.iter().sum::<f64>() / finals.len() as f64),
            )
        };
        let failed = c.outcomes.iter().filter(|o| o.status == RunStatus::Failed).count();
        let _ = writeln!(
            text,
            ",{iqm_s},{mean_s},{},{failed}",
            c.outcomes.len() - failed
        );
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<sweep summary>", e))
}

/// Finds completed runs below `root` by their manifests. Unreadable or failed
/// runs are reported in the second list.
pub fn discover_runs(root: &Path) -> (Vec<RunSource>, Vec<(PathBuf, String)>) {
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    let mut manifests: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == MANIFEST_FILE)
        .map(|e| e.into_path())
        .collect();
    manifests.sort();
    for path in manifests {
        let dir = path.parent().unwrap_or(root).to_path_buf();
        match RunManifest::read(&dir) {
            Ok(m) if m.status == RunStatus::Completed => runs.push(RunSource {
                label: m.cell_label(),
                metrics_path: dir.join(METRICS_FILE),
            }),
            Ok(_) => skipped.push((dir, "run failed".to_string())),
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                skipped.push((dir, e.to_string()));
            }
        }
    }
    (runs, skipped)
}

/// Aggregates every completed run below `root` into `iqm_report.csv` and
/// `curves.csv` inside `dest`.
pub fn aggregate_dir(root: &Path, dest: &Path) -> Result<IqmReport> {
    let (runs, skipped) = discover_runs(root);
    let mut report = aggregate_runs(&runs)?;
    report.skipped.extend(skipped);
    fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    let mut buf = Vec::new();
    write_iqm_report(&mut buf, &report)?;
    write_file(&dest.join("iqm_report.csv"), &buf)?;
    let mut buf = Vec::new();
    write_curves(&mut buf, &report)?;
    write_file(&dest.join("curves.csv"), &buf)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::from_text(
            "env = cartpole\nalgo = bppo\nseeds = 0..1\nsteps = 256\nbatch_size = 128\nhidden = 8\neval_episodes = 2\nepochs = 2\n",
        )
        .unwrap()
    }

    #[test]
    fn content_hash_is_git_style() {
        // `printf 'blob 5\0hello' | sha256sum`
        assert_eq!(
            content_hash("hello"),
            "8aec4e4876f854f688d0ebfc8f37598f38e5fd6903cccc850ca36591175aeb60"
        );
        assert_eq!(content_hash("hello").len(), 64);
        assert_ne!(content_hash("a"), content_hash("b"));
    }

    #[test]
    fn grid_expansion_shapes() {
        let base = small_cfg();
        let axes = vec![
            (SweepAxis::Epsilon, vec![0.1, 0.2, 0.5]),
            (SweepAxis::BatchSize, vec![64.0, 128.0, 256.0]),
            (SweepAxis::Lr, vec![1e-4, 3e-4, 1e-3]),
        ];
        let cells = expand_grid(&base, &axes).unwrap();
        assert_eq!(cells.len(), 27);
        assert_eq!(cells[0].label, "eps0.1_bs64_lr0.0001");
        assert_eq!(cells[26].config.train.rollout_len, 256);
        assert!(expand_grid(&base, &[]).is_err());
        assert!(expand_grid(&base, &[(SweepAxis::Lr, vec![])]).is_err());
        // batch larger than the step budget is rejected
        assert!(expand_grid(&base, &[(SweepAxis::BatchSize, vec![512.0])]).is_err());
    }

    #[test]
    fn beta_axis_targets_the_right_weight() {
        let mut base = small_cfg();
        base.train.update.algorithm = crate::learners::Algorithm::TrpoKl;
        let cells = expand_grid(&base, &[(SweepAxis::Beta, vec![0.0, 5.0])]).unwrap();
        assert_eq!(cells[1].config.train.update.surrogate.lambda_pen, 5.0);
        base.train.update.algorithm = crate::learners::Algorithm::Btrpo;
        assert!(expand_grid(&base, &[(SweepAxis::Beta, vec![0.0])]).is_err());
        base.train.update.allow_zero_beta = true;
        let cells = expand_grid(&base, &[(SweepAxis::Beta, vec![0.0, 1.0])]).unwrap();
        assert_eq!(cells[1].config.train.update.surrogate.beta, 1.0);
    }

    #[test]
    fn runs_write_manifest_and_aggregate() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let outcomes = train_seeds(&cfg, tmp.path(), 2).unwrap();
        assert_eq!(outcomes.len(), 2);
        for o in &outcomes {
            assert_eq!(o.status, RunStatus::Completed, "{:?}", o.error);
            for f in [MANIFEST_FILE, METRICS_FILE, POLICY_FILE, VALUE_FILE] {
                assert!(o.dir.join(f).is_file(), "{f}");
            }
            let m = RunManifest::read(&o.dir).unwrap();
            assert_eq!(m.config, cfg.with_seed(o.seed));
        }
        assert!(tmp.path().join("cartpole/bppo/seed1/metrics.csv").is_file());
        let report = aggregate_dir(tmp.path(), tmp.path()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].n_seeds, 2);
        assert!(tmp.path().join("iqm_report.csv").is_file());
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        train_seeds(&cfg, a.path(), 1).unwrap();
        train_seeds(&cfg, b.path(), 2).unwrap();
        for seed in [0, 1] {
            let rel = format!("cartpole/bppo/seed{seed}/metrics.csv");
            assert_eq!(
                fs::read(a.path().join(&rel)).unwrap(),
                fs::read(b.path().join(&rel)).unwrap()
            );
        }
    }

    #[test]
    fn manifest_relaunch_reproduces_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg().with_seed(1);
        let first = run_seed(&cfg, 1, &tmp.path().join("first"));
        let manifest = RunManifest::read(&first.dir).unwrap();
        let again = run_seed(&manifest.config, manifest.seed, &tmp.path().join("again"));
        assert_eq!(
            fs::read(first.dir.join(METRICS_FILE)).unwrap(),
            fs::read(again.dir.join(METRICS_FILE)).unwrap()
        );
    }
}
