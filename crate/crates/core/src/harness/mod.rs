//! Sweeps, metrics rows and figure data.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::federation::{self, NoObserver, RoundRecord};
use crate::nn::{argmax, Mlp, ParamVector};

pub use config::{Arm, ExperimentConfig};

/// Column order of every metrics file.
pub const CSV_HEADER: &str = "arm,round,seed,axis_value,acc_remain,acc_test,acc_unlearn,comp_time_s,comm_time_s,total_time_s,payload_bytes";

/// Top-1 accuracy, ties going to the lowest class.
pub fn eval_accuracy(model: &Mlp, params: &ParamVector, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = model.forward(params, &ds.inputs)?;
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == ds.labels[i])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// One CSV row: one round of one arm for one seed at one sweep value.
///
/// Time columns describe the round's critical client, so
/// `total_time_s == comp_time_s + comm_time_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub arm: Arm,
    pub round: usize,
    pub seed: u64,
    pub axis_value: f64,
    pub acc_remain: f64,
    pub acc_test: f64,
    pub acc_unlearn: Option<f64>,
    pub comp_time_s: f64,
    pub comm_time_s: f64,
    pub total_time_s: f64,
    /// Bytes uploaded by the critical client.
    pub payload_bytes: usize,
}

impl MetricsRow {
    pub fn from_record(arm: Arm, seed: u64, axis_value: f64, rec: &RoundRecord) -> Self {
        let k = rec.critical_client();
        Self {
            arm,
            round: rec.round,
            seed,
            axis_value,
            acc_remain: rec.acc_remain,
            acc_test: rec.acc_test,
            acc_unlearn: rec.acc_unlearn,
            comp_time_s: rec.compute_s[k],
            comm_time_s: rec.comm_s[k],
            total_time_s: rec.total_s,
            payload_bytes: rec.payload_bytes[k],
        }
    }
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    UnlearnClients,
    UnlearnRatio,
    Alpha,
    Beta,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::UnlearnClients => "unlearn_clients",
            Axis::UnlearnRatio => "unlearn_ratio",
            Axis::Alpha => "alpha",
            Axis::Beta => "beta",
        }
    }

    /// Current value of this parameter in `cfg`.
    pub fn current(self, cfg: &ExperimentConfig) -> f64 {
        match self {
            Axis::UnlearnClients => cfg.unlearn_clients as f64,
            Axis::UnlearnRatio => cfg.unlearn_ratio,
            Axis::Alpha => cfg.alpha,
            Axis::Beta => cfg.beta,
        }
    }

    /// Copy of `cfg` with this parameter set to `value`, validated.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        match self {
            Axis::UnlearnClients => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "unlearn_clients must be a whole number, got {value}"
                    )));
                }
                out.unlearn_clients = value as usize;
            }
            Axis::UnlearnRatio => out.unlearn_ratio = value,
            Axis::Alpha => out.alpha = value,
            Axis::Beta => out.beta = value,
        }
        out.validate()?;
        Ok(out)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "unlearn_clients" => Ok(Axis::UnlearnClients),
            "unlearn_ratio" => Ok(Axis::UnlearnRatio),
            "alpha" => Ok(Axis::Alpha),
            "beta" => Ok(Axis::Beta),
            other => Err(Error::InvalidConfig(format!("unknown axis {other:?}"))),
        }
    }
}

/// Per (arm, value) medians over seeds of the final round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: Arm,
    pub axis_value: f64,
    pub seeds: usize,
    pub acc_remain_median: f64,
    pub acc_test_median: f64,
    pub acc_unlearn_median: Option<f64>,
    /// Median over seeds of the summed per-round makespan.
    pub total_time_s_median: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
}

/// Run every arm for every value and seed. Rows come back in canonical
/// order (arm, axis value, seed, round) whatever order points finished in.
pub fn run_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[f64]) -> Result<SweepResult> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::InvalidConfig(
            "sweep needs at least one value".into(),
        ));
    }
    let configs: Vec<(f64, ExperimentConfig)> = values
        .iter()
        .map(|&v| axis.apply(cfg, v).map(|c| (v, c)))
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    for &arm in &cfg.arms {
        for (v, c) in &configs {
            for seed in 0..cfg.seeds as u64 {
                points.push((arm, *v, seed, c));
            }
        }
    }

    let per_point: Vec<Vec<MetricsRow>> = points
        .par_iter()
        .map(|&(arm, v, seed, c)| {
            let out = federation::run_arm(c, arm, seed, &mut NoObserver)?;
            Ok(out
                .history
                .iter()
                .map(|r| MetricsRow::from_record(arm, seed, v, r))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<MetricsRow> = per_point.into_iter().flatten().collect();
    sort_canonical(&mut rows);
    let summary = summarize(&rows);
    Ok(SweepResult {
        axis,
        rows,
        summary,
    })
}

pub fn sort_canonical(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        a.arm
            .cmp(&b.arm)
            .then(a.axis_value.total_cmp(&b.axis_value))
            .then(a.seed.cmp(&b.seed))
            .then(a.round.cmp(&b.round))
    });
}

/// Group key with a totally ordered float.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key(Arm, OrdF64);

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Rows grouped by (arm, value), then by seed, each seed's rows in round order.
fn group(rows: &[MetricsRow]) -> BTreeMap<Key, BTreeMap<u64, Vec<&MetricsRow>>> {
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry(Key(r.arm, OrdF64(r.axis_value)))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    for seeds in groups.values_mut() {
        for runs in seeds.values_mut() {
            runs.sort_by_key(|r| r.round);
        }
    }
    groups
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    group(rows)
        .into_iter()
        .map(|(Key(arm, v), seeds)| {
            let finals: Vec<&MetricsRow> = seeds
                .values()
                .filter_map(|runs| runs.last().copied())
                .collect();
            let pick = |f: fn(&MetricsRow) -> f64| -> f64 {
                median(&finals.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let unlearn: Vec<f64> = finals.iter().filter_map(|r| r.acc_unlearn).collect();
            let totals: Vec<f64> = seeds
                .values()
                .map(|runs| runs.iter().map(|r| r.total_time_s).sum())
                .collect();
            SummaryRow {
                arm,
                axis_value: v.0,
                seeds: finals.len(),
                acc_remain_median: pick(|r| r.acc_remain),
                acc_test_median: pick(|r| r.acc_test),
                acc_unlearn_median: (!unlearn.is_empty()).then(|| median(&unlearn)),
                total_time_s_median: median(&totals),
            }
        })
        .collect()
}

/// Linear-interpolated quantile of unsorted data; NaN for empty input.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn iqr(values: &[f64]) -> f64 {
    quantile(values, 0.75) - quantile(values, 0.25)
}

pub fn write_rows(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::MalformedCsv(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::MalformedCsv(format!("{} row {}: {e}", path.display(), i + 2)))
        })
        .collect()
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Run a sweep and store `metrics.csv`, `summary.csv` and the fully
/// resolved `config.json` in `out_dir`.
pub fn run_sweep_to_dir(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<SweepResult> {
    let out_dir = out_dir.as_ref();
    let result = run_sweep(cfg, axis, values)?;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    write_rows(out_dir.join("metrics.csv"), &result.rows)?;
    write_serialized(&out_dir.join("summary.csv"), &result.summary)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAccuracy {
    pub arm: Arm,
    pub axis_value: f64,
    pub seeds: usize,
    pub acc_remain_median: f64,
    pub acc_remain_iqr: f64,
    pub acc_unlearn_median: Option<f64>,
    pub acc_unlearn_iqr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAccuracy {
    pub arm: Arm,
    pub axis_value: f64,
    pub round: usize,
    pub acc_remain_median: f64,
    pub acc_remain_iqr: f64,
}

/// Time over a whole run (sum over rounds), median and IQR over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub arm: Arm,
    pub axis_value: f64,
    pub seeds: usize,
    pub median_s: f64,
    pub iqr_s: f64,
}

/// Figure data derived from a metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub fig2: Vec<FinalAccuracy>,
    pub fig3: Vec<RoundAccuracy>,
    pub fig4_comp: Vec<TimeSummary>,
    pub fig4_comm: Vec<TimeSummary>,
    pub fig4_total: Vec<TimeSummary>,
}

impl Report {
    pub fn from_rows(rows: &[MetricsRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("metrics file has no rows".into()));
        }
        let groups = group(rows);
        let mut rep = Report {
            fig2: Vec::new(),
            fig3: Vec::new(),
            fig4_comp: Vec::new(),
            fig4_comm: Vec::new(),
            fig4_total: Vec::new(),
        };
        for (Key(arm, v), seeds) in &groups {
            let axis_value = v.0;
            let finals: Vec<&MetricsRow> = seeds
                .values()
                .filter_map(|runs| runs.last().copied())
                .collect();
            let remain: Vec<f64> = finals.iter().map(|r| r.acc_remain).collect();
            let unlearn: Vec<f64> = finals.iter().filter_map(|r| r.acc_unlearn).collect();
            rep.fig2.push(FinalAccuracy {
                arm: *arm,
                axis_value,
                seeds: finals.len(),
                acc_remain_median: median(&remain),
                acc_remain_iqr: iqr(&remain),
                acc_unlearn_median: (!unlearn.is_empty()).then(|| median(&unlearn)),
                acc_unlearn_iqr: (!unlearn.is_empty()).then(|| iqr(&unlearn)),
            });

            let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for runs in seeds.values() {
                for r in runs {
                    by_round.entry(r.round).or_default().push(r.acc_remain);
                }
            }
            for (round, vals) in by_round {
                rep.fig3.push(RoundAccuracy {
                    arm: *arm,
                    axis_value,
                    round,
                    acc_remain_median: median(&vals),
                    acc_remain_iqr: iqr(&vals),
                });
            }

            let time = |f: fn(&MetricsRow) -> f64| -> TimeSummary {
                let sums: Vec<f64> = seeds
                    .values()
                    .map(|runs| runs.iter().map(|r| f(r)).sum())
                    .collect();
                TimeSummary {
                    arm: *arm,
                    axis_value,
                    seeds: sums.len(),
                    median_s: median(&sums),
                    iqr_s: iqr(&sums),
                }
            };
            rep.fig4_comp.push(time(|r| r.comp_time_s));
            rep.fig4_comm.push(time(|r| r.comm_time_s));
            rep.fig4_total.push(time(|r| r.total_time_s));
        }
        Ok(rep)
    }

    /// Human-readable digest.
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<11} {:>10} {:>6} {:>12} {:>12} {:>12}",
            "arm", "value", "seeds", "acc_remain", "acc_unlearn", "total_s"
        );
        for (acc, t) in self.fig2.iter().zip(&self.fig4_total) {
            let unlearn = acc
                .acc_unlearn_median
                .map_or_else(|| "-".to_string(), |u| format!("{u:.4}"));
            let _ = writeln!(
                s,
                "{:<11} {:>10} {:>6} {:>12.4} {:>12} {:>12.3}",
                acc.arm.as_str(),
                acc.axis_value,
                acc.seeds,
                acc.acc_remain_median,
                unlearn,
                t.median_s
            );
        }
        s
    }

    /// Write all figure files into `dir`, returning their paths. Files are
    /// staged under temporary names and renamed only once all succeeded.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        let result = (|| -> Result<()> {
            let mut stage = |name: &str, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
                let tmp = dir.join(format!(".{name}.tmp"));
                staged.push((tmp.clone(), dir.join(name)));
                write(&tmp)
            };
            stage("fig2.csv", &|p| write_serialized(p, &self.fig2))?;
            stage("fig3.csv", &|p| write_serialized(p, &self.fig3))?;
            stage("fig4_comp.csv", &|p| write_serialized(p, &self.fig4_comp))?;
            stage("fig4_comm.csv", &|p| write_serialized(p, &self.fig4_comm))?;
            stage("fig4_total.csv", &|p| write_serialized(p, &self.fig4_total))?;
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &staged {
                let _ = fs::remove_file(tmp);
            }
            return Err(e);
        }
        let mut out = Vec::new();
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest)?;
            out.push(dest);
        }
        Ok(out)
    }
}

/// Read a metrics file, write figure data next to `out_dir`, and return the
/// digest text.
pub fn report(csv_path: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<String> {
    let rows = read_rows(csv_path)?;
    let rep = Report::from_rows(&rows)?;
    rep.write(out_dir)?;
    Ok(rep.summary_text())
}
