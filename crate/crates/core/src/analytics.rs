//! Ratio diagnostics, per-run metric files and cross-seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::envs::EnvName;
use crate::error::{Error, Result};

/// Summary of a batch of likelihood ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioStats {
    pub mean_r: f64,
    pub p99_r: f64,
    pub max_r: f64,
    pub min_r: f64,
    pub n: usize,
}

/// Formats with 17 significant digits, enough to round-trip any f64.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Percentile of already-sorted data, linear interpolation at rank `p * (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("percentile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("percentile level {p} outside [0, 1]")));
    }
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

pub fn ratio_stats(r: &[f64]) -> Result<RatioStats> {
    if r.is_empty() {
        return Err(Error::invalid("ratio_stats: empty batch"));
    }
    let s = sorted(r);
    let mean_r = r.iter().sum::<f64>() / r.len() as f64;
    Ok(RatioStats {
        // summation rounding can push the mean a hair outside [min, max]
        mean_r: mean_r.clamp(s[0], s[s.len() - 1]),
        p99_r: percentile_sorted(&s, 0.99)?,
        max_r: s[s.len() - 1],
        min_r: s[0],
        n: r.len(),
    })
}

/// Interquartile mean: the mean of the middle half of the sorted sample, with
/// elements straddling the 25% and 75% cut points counted fractionally.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("iqm of an empty sample"));
    }
    let s = sorted(values);
    let n = s.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        let w = ((i + 1) as f64).min(hi) - (i as f64).max(lo);
        if w > 0.0 {
            acc += w * v;
        }
    }
    Ok(acc / (hi - lo))
}

/// Mean shortfall below `target`, divided by `|target|` unless the target is zero.
pub fn optimality_gap(values: &[f64], target: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("optimality gap of an empty sample"));
    }
    if !target.is_finite() {
        return Err(Error::invalid(format!("optimality gap target {target} is not finite")));
    }
    let shortfall = values.iter().map(|v| (target - v).max(0.0)).sum::<f64>() / values.len() as f64;
    Ok(if target != 0.0 { shortfall / target.abs() } else { shortfall })
}

/// Default optimality-gap target for each environment.
pub fn default_target(env: EnvName) -> f64 {
    match env {
        EnvName::Cartpole => 500.0,
        EnvName::Frozenlake => 1.0,
        EnvName::MountaincarContinuous => 93.0,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row of a run's `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub env_steps: u64,
    pub update_idx: u64,
    /// Present only on updates followed by an evaluation.
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub penalty: f64,
    pub ratio_mean: f64,
    pub ratio_p99: f64,
    pub ratio_max: f64,
    pub ratio_min: f64,
    pub q_mean: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "env_steps,update_idx,eval_return_mean,eval_return_std,policy_loss,value_loss,entropy,penalty,ratio_mean,ratio_p99,ratio_max,ratio_min,q_mean,grad_norm";

impl MetricRecord {
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        let mut row = format!(
            "{},{},{},{}",
            self.env_steps,
            self.update_idx,
            opt(self.eval_return_mean),
            opt(self.eval_return_std)
        );
        for v in [
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.penalty,
            self.ratio_mean,
            self.ratio_p99,
            self.ratio_max,
            self.ratio_min,
            self.q_mean,
            self.grad_norm,
        ] {
            row.push(',');
            row.push_str(&fmt17(v));
        }
        row
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Parse(format!("expected 14 metric columns, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { real(s).map(Some) };
        Ok(MetricRecord {
            env_steps: int(fields[0])?,
            update_idx: int(fields[1])?,
            eval_return_mean: opt(fields[2])?,
            eval_return_std: opt(fields[3])?,
            policy_loss: real(fields[4])?,
            value_loss: real(fields[5])?,
            entropy: real(fields[6])?,
            penalty: real(fields[7])?,
            ratio_mean: real(fields[8])?,
            ratio_p99: real(fields[9])?,
            ratio_max: real(fields[10])?,
            ratio_min: real(fields[11])?,
            q_mean: real(fields[12])?,
            grad_norm: real(fields[13])?,
        })
    }
}

pub fn write_metrics<W: Write>(mut out: W, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::with_capacity(256 * (records.len() + 1));
    text.push_str(METRICS_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_csv_row());
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<metrics>", e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        _ => return Err(Error::Parse(format!("{}: missing metrics header", path.display()))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            MetricRecord::parse_csv_row(l)
                .map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// The last evaluation return recorded in a metric series.
pub fn final_eval_return(records: &[MetricRecord]) -> Option<f64> {
    records.iter().rev().find_map(|r| r.eval_return_mean)
}

/// Identifies the aggregation cell a run belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLabel {
    pub env: EnvName,
    pub algorithm: String,
    pub entropy_coef: f64,
    /// `beta` for BTRPO, the penalty weight for TRPO-KL, otherwise `epsilon`.
    pub beta_or_eps: f64,
    /// Runs with equal keys are seeds of the same configuration.
    pub key: String,
}

#[derive(Debug, Clone)]
pub struct RunSource {
    pub label: CellLabel,
    pub metrics_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqmRow {
    pub label: CellLabel,
    pub iqm: f64,
    pub optimality_gap: f64,
    pub n_seeds: usize,
    pub finals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub return_mean: f64,
    pub return_std: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: CellLabel,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IqmReport {
    pub rows: Vec<IqmRow>,
    pub curves: Vec<Curve>,
    /// Runs that could not be used, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Cross-seed mean and std of evaluation returns on the union of logged step
/// counts. A run contributes its latest evaluation at or before each grid point.
pub fn learning_curve(series: &[Vec<(u64, f64)>]) -> Vec<CurvePoint> {
    let mut grid: Vec<u64> = series.iter().flatten().map(|p| p.0).collect();
    grid.sort_unstable();
    grid.dedup();
    grid.into_iter()
        .filter_map(|step| {
            let vals: Vec<f64> = series
                .iter()
                .filter_map(|s| s.iter().take_while(|p| p.0 <= step).last().map(|p| p.1))
                .collect();
            if vals.is_empty() {
                return None;
            }
            let (return_mean, return_std) = mean_std(&vals);
            Some(CurvePoint {
                env_steps: step,
                return_mean,
                return_std,
                n_runs: vals.len(),
            })
        })
        .collect()
}

/// Groups runs by cell, computes final-evaluation IQM and optimality gap, and
/// builds learning curves. Unreadable runs are skipped with a warning; it is an
/// error only if no run is usable.
pub fn aggregate_runs(runs: &[RunSource]) -> Result<IqmReport> {
    let mut report = IqmReport::default();
    let mut groups: BTreeMap<String, (CellLabel, Vec<f64>, Vec<Vec<(u64, f64)>>)> = BTreeMap::new();
    for run in runs {
        let records = match read_metrics(&run.metrics_path) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping {}: {e}", run.metrics_path.display());
                report.skipped.push((run.metrics_path.clone(), e.to_string()));
                continue;
            }
        };
        let Some(final_return) = final_eval_return(&records) else {
            let msg = "no evaluation rows".to_string();
            log::warn!("skipping {}: {msg}", run.metrics_path.display());
            report.skipped.push((run.metrics_path.clone(), msg));
            continue;
        };
        let series = records
            .iter()
            .filter_map(|r| r.eval_return_mean.map(|v| (r.env_steps, v)))
            .collect();
        let entry = groups
            .entry(run.label.key.clone())
            .or_insert_with(|| (run.label.clone(), Vec::new(), Vec::new()));
        entry.1.push(final_return);
        entry.2.push(series);
    }
    if groups.is_empty() {
        return Err(Error::InvalidState("no usable runs to aggregate".into()));
    }
    for (_, (label, finals, series)) in groups {
        report.rows.push(IqmRow {
            iqm: iqm(&finals)?,
            optimality_gap: optimality_gap(&finals, default_target(label.env))?,
            n_seeds: finals.len(),
            finals,
            label: label.clone(),
        });
        report.curves.push(Curve {
            label,
            points: learning_curve(&series),
        });
    }
    Ok(report)
}

pub fn write_iqm_report<W: Write>(mut out: W, report: &IqmReport) -> Result<()> {
    let mut text = String::from("env,algorithm,entropy_coef,beta_or_eps,iqm,optimality_gap,n_seeds\n");
    for row in &report.rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            row.label.env.as_str(),
            row.label.algorithm,
            fmt17(row.label.entropy_coef),
            fmt17(row.label.beta_or_eps),
            fmt17(row.iqm),
            fmt17(row.optimality_gap),
            row.n_seeds
        );
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<iqm_report>", e))
}

/// Learning curves. The trailing hyperparameter columns tell apart cells that
/// share an environment and algorithm.
pub fn write_curves<W: Write>(mut out: W, report: &IqmReport) -> Result<()> {
    let mut text = String::from("env,algorithm,env_steps,return_mean,return_std,entropy_coef,beta_or_eps\n");
    for curve in &report.curves {
        for p in &curve.points {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{}",
                curve.label.env.as_str(),
                curve.label.algorithm,
                p.env_steps,
                fmt17(p.return_mean),
                fmt17(p.return_std),
                fmt17(curve.label.entropy_coef),
                fmt17(curve.label.beta_or_eps)
            );
        }
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<curves>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_stats_examples() {
        let s = ratio_stats(&[1.0; 7]).unwrap();
        assert_eq!((s.mean_r, s.p99_r, s.max_r, s.min_r), (1.0, 1.0, 1.0, 1.0));
        let s = ratio_stats(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean_r, 2.5);
        assert_eq!((s.max_r, s.min_r), (4.0, 1.0));
        // rank 0.99 * 3 = 2.97 between 3 and 4
        assert!((s.p99_r - 3.97).abs() < 1e-12);
        let s = ratio_stats(&[5.0]).unwrap();
        assert_eq!((s.mean_r, s.p99_r, s.max_r, s.min_r, s.n), (5.0, 5.0, 5.0, 5.0, 1));
        assert!(ratio_stats(&[]).is_err());
    }

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 100.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 3.0);
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(iqm(&v).unwrap(), 4.5);
        assert_eq!(iqm(&[400.0, 100.0, 300.0, 200.0]).unwrap(), 250.0);
        assert_eq!(iqm(&[7.0]).unwrap(), 7.0);
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn iqm_fractional_weights_n6() {
        // cut points 1.5 and 4.5: half weight on elements 1 and 4
        let v = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        let expect = (0.5 * 20.0 + 30.0 + 40.0 + 0.5 * 50.0) / 3.0;
        assert!((iqm(&v).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn optimality_gap_examples() {
        assert_eq!(optimality_gap(&[500.0, 600.0], 500.0).unwrap(), 0.0);
        assert_eq!(optimality_gap(&[250.0, 500.0], 500.0).unwrap(), 0.25);
        assert_eq!(optimality_gap(&[0.0], 500.0).unwrap(), 1.0);
        assert_eq!(optimality_gap(&[-2.0], 0.0).unwrap(), 2.0);
        assert!(optimality_gap(&[], 1.0).is_err());
    }

    #[test]
    fn aligned_curves_are_elementwise_means() {
        let a = vec![(10, 1.0), (20, 3.0)];
        let b = vec![(10, 3.0), (20, 5.0)];
        let c = learning_curve(&[a, b]);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].env_steps, c[0].return_mean, c[0].return_std), (10, 2.0, 1.0));
        assert_eq!((c[1].env_steps, c[1].return_mean), (20, 4.0));
    }

    #[test]
    fn metric_rows_round_trip() {
        let r = MetricRecord {
            env_steps: 2048,
            update_idx: 0,
            eval_return_mean: None,
            eval_return_std: None,
            policy_loss: -0.1,
            value_loss: 12.5,
            entropy: 0.69,
            penalty: 0.0,
            ratio_mean: 1.0,
            ratio_p99: 1.2,
            ratio_max: 1.5,
            ratio_min: 0.7,
            q_mean: 0.99,
            grad_norm: 0.3,
        };
        let back = MetricRecord::parse_csv_row(&r.to_csv_row()).unwrap();
        assert_eq!(back, r);
        let with_eval = MetricRecord {
            eval_return_mean: Some(1.0 / 3.0),
            eval_return_std: Some(0.1),
            ..r
        };
        assert_eq!(MetricRecord::parse_csv_row(&with_eval.to_csv_row()).unwrap(), with_eval);
    }

    proptest! {
        #[test]
        fn iqm_is_permutation_invariant_and_monotone(
            mut v in prop::collection::vec(-1e3f64..1e3, 1..40),
            idx in any::<prop::sample::Index>(),
            bump in 0.0f64..100.0,
        ) {
            let base = iqm(&v).unwrap();
            let mut rev = v.clone();
            rev.reverse();
            prop_assert!((iqm(&rev).unwrap() - base).abs() <= 1e-9);
            let i = idx.index(v.len());
            v[i] += bump;
            prop_assert!(iqm(&v).unwrap() >= base - 1e-9);
        }

        #[test]
        fn iqm_of_constant(c in -1e6f64..1e6, n in 1usize..30) {
            let v = vec![c; n];
            prop_assert!((iqm(&v).unwrap() - c).abs() <= 1e-9 * c.abs().max(1.0));
        }

        #[test]
        fn ratio_stats_ordering(v in prop::collection::vec(0.0f64..50.0, 1..200)) {
            let s = ratio_stats(&v).unwrap();
            prop_assert!(s.min_r <= s.mean_r && s.mean_r <= s.max_r);
            prop_assert!(s.min_r <= s.p99_r && s.p99_r <= s.max_r);
            prop_assert!(s.min_r >= 0.0);
        }
    }
}
