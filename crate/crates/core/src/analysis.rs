//! Error metrics, bootstrap comparisons, iteration and timing statistics,
//! and CSV/JSON export of trial results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::geometry::{to_degrees, wrap_angle, RelativeState};
use crate::models::{AugmentedState, SchemeKind};
use crate::simulation::{CovarianceMode, StepRecord, TrialRecord, UncertaintyLevel};

/// Length of the transient interval in seconds.
pub const TRANSIENT_SECONDS: f64 = 10.0;

/// Number of transient steps `k0` for a sampling time.
pub fn split_step(ts: f64) -> usize {
    (TRANSIENT_SECONDS / ts).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Both sums divided by `N · N_s`, the literal form of the definitions.
    #[default]
    PaperLiteral,
    /// Transient sum divided by `N · k0`, steady-state sum by `N · (N_s - k0)`.
    PerSample,
}

impl std::str::FromStr for Normalization {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" | "paper" => Ok(Normalization::PaperLiteral),
            "per-sample" => Ok(Normalization::PerSample),
            other => Err(CrlError::Config(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Averaged heading (deg) and position (m) errors over the transient
/// and steady-state intervals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub tr_er_psi: f64,
    pub ss_er_psi: f64,
    pub tr_er_p: f64,
    pub ss_er_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TrErPsi,
    SsErPsi,
    TrErP,
    SsErP,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::TrErPsi, Metric::SsErPsi, Metric::TrErP, Metric::SsErP];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::TrErPsi => "tr_er_psi",
            Metric::SsErPsi => "ss_er_psi",
            Metric::TrErP => "tr_er_p",
            Metric::SsErP => "ss_er_p",
        }
    }

    pub fn of(&self, m: &ErrorMetrics) -> f64 {
        match self {
            Metric::TrErPsi => m.tr_er_psi,
            Metric::SsErPsi => m.ss_er_psi,
            Metric::TrErP => m.tr_er_p,
            Metric::SsErP => m.ss_er_p,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| CrlError::Config(format!("unknown metric '{s}'")))
    }
}

/// Metrics of a complete trial; `k0` is the last transient step.
pub fn compute_metrics(record: &TrialRecord, k0: usize, normalization: Normalization) -> Result<ErrorMetrics> {
    if let Some(f) = &record.failure {
        return Err(CrlError::Domain(format!("trial {} failed: {f}", record.seed)));
    }
    let n_s = record.steps.len();
    if k0 == 0 || k0 >= n_s {
        return Err(CrlError::Domain(format!("split step {k0} must lie inside 1..{n_s}")));
    }
    let n = record.steps[0].truth.blocks.len();
    let (mut tr_psi, mut ss_psi, mut tr_p, mut ss_p) = (0.0, 0.0, 0.0, 0.0);
    for (i, step) in record.steps.iter().enumerate() {
        let (mut e_psi, mut e_p) = (0.0, 0.0);
        for (t, e) in step.truth.blocks.iter().zip(&step.estimate.blocks) {
            e_psi += wrap_angle(t.psi - e.psi).abs();
            e_p += (t.p - e.p).norm();
        }
        if i < k0 {
            tr_psi += e_psi;
            tr_p += e_p;
        } else {
            ss_psi += e_psi;
            ss_p += e_p;
        }
    }
    let (tr_den, ss_den) = match normalization {
        Normalization::PaperLiteral => ((n * n_s) as f64, (n * n_s) as f64),
        Normalization::PerSample => ((n * k0) as f64, (n * (n_s - k0)) as f64),
    };
    Ok(ErrorMetrics {
        tr_er_psi: to_degrees(tr_psi / tr_den),
        ss_er_psi: to_degrees(ss_psi / ss_den),
        tr_er_p: tr_p / tr_den,
        ss_er_p: ss_p / ss_den,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub nominal_diff: f64,
    pub p_value: f64,
    pub n_resamples: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pooled resampling test of `|mean(A) - mean(B)|`: both resampled sets
/// have the pooled size, and ties with the nominal difference count as
/// exceedances.
pub fn bootstrap_compare<R: Rng + ?Sized>(
    a: &[f64],
    b: &[f64],
    n_resamples: usize,
    rng: &mut R,
) -> Result<BootstrapResult> {
    if a.is_empty() || b.is_empty() || n_resamples == 0 {
        return Err(CrlError::Domain(
            "bootstrap needs two non-empty samples and at least one resample".into(),
        ));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let m = pooled.len();
    let (mean_a, mean_b) = (mean(a), mean(b));
    let nominal_diff = (mean_a - mean_b).abs();
    let mut exceed = 0usize;
    for _ in 0..n_resamples {
        let sa: f64 = (0..m).map(|_| pooled[rng.random_range(0..m)]).sum();
        let sb: f64 = (0..m).map(|_| pooled[rng.random_range(0..m)]).sum();
        if ((sa - sb) / m as f64).abs() >= nominal_diff {
            exceed += 1;
        }
    }
    Ok(BootstrapResult {
        mean_a,
        mean_b,
        nominal_diff,
        p_value: exceed as f64 / n_resamples as f64,
        n_resamples,
    })
}

/// Method and covariance mode, the grouping key of all statistics.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub method: String,
    pub mode: CovarianceMode,
}

impl GroupKey {
    pub fn of(record: &TrialRecord) -> Self {
        Self {
            method: record.method.clone(),
            mode: record.mode,
        }
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} [{}]", self.method, self.mode.label())
    }
}

/// Groups in order of first appearance.
fn groups(records: &[TrialRecord]) -> Vec<(GroupKey, Vec<&TrialRecord>)> {
    let mut out: Vec<(GroupKey, Vec<&TrialRecord>)> = Vec::new();
    for r in records {
        let key = GroupKey::of(r);
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => out.push((key, vec![r])),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub group: GroupKey,
    pub kernel: Option<String>,
    /// Iteration count → number of steps.
    pub histogram: BTreeMap<u32, u64>,
    pub mean: f64,
    pub steps: u64,
}

/// Pooled fixed-point iteration counts per group; groups without any
/// iteration data (EKF runs) are omitted.
pub fn iteration_stats(records: &[TrialRecord]) -> Vec<IterationStats> {
    groups(records)
        .into_iter()
        .filter_map(|(group, rs)| {
            let mut histogram = BTreeMap::new();
            let (mut total, mut count) = (0u64, 0u64);
            for it in rs.iter().flat_map(|r| r.steps.iter().filter_map(|s| s.fp_iters)) {
                *histogram.entry(it).or_insert(0) += 1;
                total += it as u64;
                count += 1;
            }
            (count > 0).then(|| IterationStats {
                kernel: rs[0].kernel.clone(),
                group,
                histogram,
                mean: total as f64 / count as f64,
                steps: count,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub group: GroupKey,
    pub scheme: SchemeKind,
    pub mean_step_ns: f64,
    pub steps: u64,
}

/// Mean per-step wall time over all steps and trials of each group.
pub fn timing_stats(records: &[TrialRecord]) -> Vec<TimingStats> {
    groups(records)
        .into_iter()
        .filter_map(|(group, rs)| {
            let (mut total, mut count) = (0u128, 0u64);
            for s in rs.iter().flat_map(|r| &r.steps) {
                total += s.step_time_ns as u128;
                count += 1;
            }
            (count > 0).then(|| TimingStats {
                scheme: rs[0].scheme,
                group,
                mean_step_ns: total as f64 / count as f64,
                steps: count,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub method: String,
    pub mode: CovarianceMode,
    pub seed: u64,
    pub psi_e: f64,
    pub r_e: f64,
    #[serde(flatten)]
    pub metrics: ErrorMetrics,
}

/// Metrics of every successful trial; failed trials are skipped.
pub fn trial_metrics(records: &[TrialRecord], normalization: Normalization) -> Vec<TrialMetrics> {
    records
        .iter()
        .filter_map(|r| {
            let m = compute_metrics(r, split_step(r.ts), normalization).ok()?;
            Some(TrialMetrics {
                method: r.method.clone(),
                mode: r.mode,
                seed: r.seed,
                psi_e: r.level.psi_e,
                r_e: r.level.r_e,
                metrics: m,
            })
        })
        .collect()
}

/// Samples of one metric for one method and mode, in trial order.
pub fn metric_samples(rows: &[TrialMetrics], method: &str, mode: CovarianceMode, metric: Metric) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.method == method && r.mode == mode)
        .map(|r| metric.of(&r.metrics))
        .collect()
}

/// Percentage change from `base` to `other`.
pub fn percent_increase(base: f64, other: f64) -> f64 {
    (other - base) / base * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub normalization: Normalization,
    pub n_resamples: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::PaperLiteral,
            n_resamples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    pub mode: CovarianceMode,
    pub trials: usize,
    pub failures: usize,
    pub mean: ErrorMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub normalization: Normalization,
    pub config_digests: Vec<String>,
    pub trials: usize,
    pub failures: usize,
    pub groups: Vec<GroupSummary>,
    pub trial_metrics: Vec<TrialMetrics>,
}

fn summarize(records: &[TrialRecord], rows: &[TrialMetrics], normalization: Normalization) -> ReportSummary {
    let mut digests: Vec<String> = records.iter().map(|r| r.config_digest.clone()).collect();
    digests.sort();
    digests.dedup();
    let groups = groups(records)
        .into_iter()
        .map(|(key, rs)| {
            let mine: Vec<&TrialMetrics> = rows
                .iter()
                .filter(|r| r.method == key.method && r.mode == key.mode)
                .collect();
            let avg = |f: fn(&ErrorMetrics) -> f64| {
                if mine.is_empty() {
                    f64::NAN
                } else {
                    mine.iter().map(|r| f(&r.metrics)).sum::<f64>() / mine.len() as f64
                }
            };
            GroupSummary {
                trials: rs.len(),
                failures: rs.iter().filter(|r| r.failure.is_some()).count(),
                mean: ErrorMetrics {
                    tr_er_psi: avg(|m| m.tr_er_psi),
                    ss_er_psi: avg(|m| m.ss_er_psi),
                    tr_er_p: avg(|m| m.tr_er_p),
                    ss_er_p: avg(|m| m.ss_er_p),
                },
                method: key.method,
                mode: key.mode,
            }
        })
        .collect();
    ReportSummary {
        normalization,
        config_digests: digests,
        trials: records.len(),
        failures: records.iter().filter(|r| r.failure.is_some()).count(),
        groups,
        trial_metrics: rows.to_vec(),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CrlError::ser(path, e))
}

fn write_rows<S: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CrlError::ser(path, e))?;
    w.write_record(header).map_err(|e| CrlError::ser(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CrlError::ser(path, e))?;
    }
    w.flush().map_err(|e| CrlError::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CrlError::ser(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CrlError::io(path, e))
}

/// Writes metrics.csv, violin_data.csv, bootstrap.csv, iterations.csv,
/// timings.csv and summary.json into `out_dir`.
///
/// The bootstrap compares every pair of methods within each covariance
/// mode on every metric.
pub fn export_report(records: &[TrialRecord], options: &ReportOptions, out_dir: &Path) -> Result<ReportSummary> {
    fs::create_dir_all(out_dir).map_err(|e| CrlError::io(out_dir, e))?;
    let rows = trial_metrics(records, options.normalization);
    let norm = match options.normalization {
        Normalization::PaperLiteral => "paper-literal",
        Normalization::PerSample => "per-sample",
    };

    write_rows(
        &out_dir.join("metrics.csv"),
        &[
            "method",
            "mode",
            "seed",
            "psi_e",
            "r_e",
            "tr_er_psi",
            "ss_er_psi",
            "tr_er_p",
            "ss_er_p",
            "normalization",
        ],
        rows.iter().map(|r| {
            (
                &r.method,
                r.mode.label(),
                r.seed,
                r.psi_e,
                r.r_e,
                r.metrics.tr_er_psi,
                r.metrics.ss_er_psi,
                r.metrics.tr_er_p,
                r.metrics.ss_er_p,
                norm,
            )
        }),
    )?;

    write_rows(
        &out_dir.join("violin_data.csv"),
        &["method", "mode", "metric", "value"],
        Metric::ALL.iter().flat_map(|m| {
            rows.iter()
                .map(move |r| (&r.method, r.mode.label(), m.name(), m.of(&r.metrics)))
        }),
    )?;

    let keys: Vec<GroupKey> = groups(records).into_iter().map(|(k, _)| k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut boot = Vec::new();
    for metric in Metric::ALL {
        for (i, a) in keys.iter().enumerate() {
            for b in keys[i + 1..].iter().filter(|b| b.mode == a.mode) {
                let sa = metric_samples(&rows, &a.method, a.mode, metric);
                let sb = metric_samples(&rows, &b.method, b.mode, metric);
                if sa.is_empty() || sb.is_empty() {
                    continue;
                }
                let res = bootstrap_compare(&sa, &sb, options.n_resamples, &mut rng)?;
                boot.push((
                    metric.name(),
                    a.mode.label(),
                    a.method.clone(),
                    b.method.clone(),
                    res.mean_a,
                    res.mean_b,
                    res.nominal_diff,
                    res.p_value,
                    res.n_resamples,
                ));
            }
        }
    }
    write_rows(
        &out_dir.join("bootstrap.csv"),
        &[
            "metric",
            "mode",
            "method_a",
            "method_b",
            "mean_a",
            "mean_b",
            "nominal_diff",
            "p_value",
            "n_resamples",
        ],
        boot,
    )?;

    let iters = iteration_stats(records);
    write_rows(
        &out_dir.join("iterations.csv"),
        &["method", "mode", "kernel", "iterations", "count"],
        iters.iter().flat_map(|s| {
            s.histogram.iter().map(move |(it, c)| {
                (
                    &s.group.method,
                    s.group.mode.label(),
                    s.kernel.clone().unwrap_or_default(),
                    *it,
                    *c,
                )
            })
        }),
    )?;

    write_rows(
        &out_dir.join("timings.csv"),
        &["method", "mode", "scheme", "mean_step_ns", "steps"],
        timing_stats(records).iter().map(|t| {
            (
                t.group.method.clone(),
                t.group.mode.label(),
                t.scheme.label(),
                t.mean_step_ns,
                t.steps,
            )
        }),
    )?;

    let summary = summarize(records, &rows, options.normalization);
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One row of a trial CSV: one neighbor at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrialRow {
    k: usize,
    t: f64,
    pair: usize,
    psi_true: f64,
    psi_est: f64,
    x_true: f64,
    x_est: f64,
    y_true: f64,
    y_est: f64,
    z_true: f64,
    z_est: f64,
    fp_iters: Option<u32>,
    step_time_ns: u64,
    p_trace: f64,
}

/// Writes the per-step, per-pair trajectory of a trial.
pub fn write_trial_csv(record: &TrialRecord, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for s in &record.steps {
        for (pair, (t, e)) in s.truth.blocks.iter().zip(&s.estimate.blocks).enumerate() {
            w.serialize(TrialRow {
                k: s.k,
                t: s.k as f64 * record.ts,
                pair,
                psi_true: t.psi,
                psi_est: e.psi,
                x_true: t.p.x,
                x_est: e.p.x,
                y_true: t.p.y,
                y_est: e.p.y,
                z_true: t.p.z,
                z_est: e.p.z,
                fp_iters: s.fp_iters,
                step_time_ns: s.step_time_ns,
                p_trace: s.p_trace,
            })
            .map_err(|e| CrlError::ser(path, e))?;
        }
    }
    w.flush().map_err(|e| CrlError::io(path, e))
}

fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CrlError::ser(path, e))?;
    let mut steps: Vec<StepRecord> = Vec::new();
    for row in rdr.deserialize::<TrialRow>() {
        let row = row.map_err(|e| CrlError::ser(path, e))?;
        let truth = RelativeState::new(row.psi_true, Vector3::new(row.x_true, row.y_true, row.z_true));
        let est = RelativeState::new(row.psi_est, Vector3::new(row.x_est, row.y_est, row.z_est));
        match steps.last_mut() {
            Some(s) if s.k == row.k => {
                if row.pair != s.truth.blocks.len() {
                    return Err(CrlError::ser(
                        path,
                        format!("step {} pair {} out of order", row.k, row.pair),
                    ));
                }
                s.truth.blocks.push(truth);
                s.estimate.blocks.push(est);
            }
            _ => {
                if row.pair != 0 {
                    return Err(CrlError::ser(
                        path,
                        format!("step {} starts at pair {}", row.k, row.pair),
                    ));
                }
                steps.push(StepRecord {
                    k: row.k,
                    truth: AugmentedState::new(vec![truth]),
                    estimate: AugmentedState::new(vec![est]),
                    p_trace: row.p_trace,
                    fp_iters: row.fp_iters,
                    step_time_ns: row.step_time_ns,
                });
            }
        }
    }
    Ok(steps)
}

/// Manifest entry of a stored trial: everything but the steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub file: String,
    pub method: String,
    pub scheme: SchemeKind,
    pub mode: CovarianceMode,
    pub kernel: Option<String>,
    pub max_iters: Option<usize>,
    pub seed: u64,
    pub level: UncertaintyLevel,
    pub config_digest: String,
    pub ts: f64,
    pub steps: usize,
    pub failure: Option<String>,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

pub const TRIALS_DIR: &str = "trials";
pub const MANIFEST: &str = "trials.json";

/// Stores records as `trials/<id>.csv` plus a `trials.json` manifest.
pub fn save_trials(records: &[TrialRecord], out_dir: &Path) -> Result<()> {
    let dir = out_dir.join(TRIALS_DIR);
    fs::create_dir_all(&dir).map_err(|e| CrlError::io(&dir, e))?;
    let mut manifest = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let file = format!("{i:05}_{}_{}_s{}.csv", slug(&r.method), r.mode.label(), r.seed);
        write_trial_csv(r, &dir.join(&file))?;
        manifest.push(TrialEntry {
            file,
            method: r.method.clone(),
            scheme: r.scheme,
            mode: r.mode,
            kernel: r.kernel.clone(),
            max_iters: r.max_iters,
            seed: r.seed,
            level: r.level,
            config_digest: r.config_digest.clone(),
            ts: r.ts,
            steps: r.steps.len(),
            failure: r.failure.clone(),
        });
    }
    write_json(&out_dir.join(MANIFEST), &manifest)
}

/// Reads records written by [`save_trials`].
pub fn load_trials(in_dir: &Path) -> Result<Vec<TrialRecord>> {
    let path = in_dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CrlError::io(&path, e))?;
    let manifest: Vec<TrialEntry> = serde_json::from_str(&text).map_err(|e| CrlError::ser(&path, e))?;
    manifest
        .into_iter()
        .map(|e| {
            let file = in_dir.join(TRIALS_DIR).join(&e.file);
            let steps = read_steps(&file)?;
            if steps.len() != e.steps {
                return Err(CrlError::ser(
                    &file,
                    format!("expected {} steps, found {}", e.steps, steps.len()),
                ));
            }
            Ok(TrialRecord {
                method: e.method,
                scheme: e.scheme,
                mode: e.mode,
                kernel: e.kernel,
                max_iters: e.max_iters,
                seed: e.seed,
                level: e.level,
                config_digest: e.config_digest,
                ts: e.ts,
                steps,
                failure: e.failure,
            })
        })
        .collect()
}
