//! Parameter sweeps over batches of seeded runs, and their CSV output.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigError, ProtocolConfig, SigScheme};
use crate::node::NodeEvent;
use crate::simnet::{RunOutcome, SimError};

use super::audit::{audit, AuditReport};
use super::workload::{AdversarySpec, Scenario, Workload};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("sweep point {point}: {source}")]
    Config {
        point: String,
        #[source]
        source: ConfigError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Values to sweep; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub loss_prob: Vec<f64>,
    pub fanout: Vec<usize>,
    /// Changing N also sets f to its maximum and X to f + 1 (before any
    /// fanout sweep applies).
    pub n: Vec<usize>,
    /// 𝕋 / d.
    pub round_ratio: Vec<u64>,
    pub sig_scheme: Vec<SigScheme>,
    pub payload_size: Vec<usize>,
    pub byz_count: Vec<usize>,
    pub recovery: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub base: ProtocolConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default = "default_runs")]
    pub runs_per_point: u64,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub payload_size: usize,
}

fn default_runs() -> u64 {
    1000
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub config: ProtocolConfig,
    pub adversary: AdversarySpec,
    pub payload_size: usize,
}

impl Point {
    fn label(&self) -> String {
        let c = &self.config;
        format!(
            "n={} f={} X={} loss={} byz={}",
            c.n, c.f, c.fanout, c.loss_prob, self.adversary.count
        )
    }

    fn sort_key(&self) -> (usize, usize, usize, u64, u64, u8, usize, usize, bool) {
        let c = &self.config;
        (
            c.n,
            c.f,
            c.fanout,
            c.round / c.link_delay,
            c.loss_prob.to_bits(),
            scheme_rank(c.sig_scheme),
            self.payload_size,
            self.adversary.count,
            c.recovery,
        )
    }
}

fn scheme_rank(s: SigScheme) -> u8 {
    match s {
        SigScheme::Stub => 0,
        SigScheme::EcdsaP256Like => 1,
        SigScheme::Rsa2048Like => 2,
    }
}

fn scheme_name(s: SigScheme) -> &'static str {
    match s {
        SigScheme::Stub => "stub",
        SigScheme::EcdsaP256Like => "ecdsa_p256_like",
        SigScheme::Rsa2048Like => "rsa2048_like",
    }
}

fn values<T: Clone>(swept: &[T], base: T) -> Vec<T> {
    if swept.is_empty() {
        vec![base]
    } else {
        swept.to_vec()
    }
}

impl ExperimentSpec {
    /// Cartesian product of the sweep, each point validated.
    pub fn points(&self) -> Result<Vec<Point>, ExperimentError> {
        let b = &self.base;
        let s = &self.sweep;
        let mut out = Vec::new();
        for n in values(&s.n, b.n) {
            for fanout in values(&s.fanout, 0) {
                for ratio in values(&s.round_ratio, b.round / b.link_delay) {
                    for loss in values(&s.loss_prob, b.loss_prob) {
                        for scheme in values(&s.sig_scheme, b.sig_scheme) {
                            for size in values(&s.payload_size, self.payload_size) {
                                for byz in values(&s.byz_count, self.adversary.count) {
                                    for rec in values(&s.recovery, b.recovery) {
                                        let mut c = b.clone();
                                        if n != b.n {
                                            c.n = n;
                                            c.f = ProtocolConfig::max_faults(n);
                                            c.fanout = c.f + 1;
                                        }
                                        if fanout > 0 {
                                            c.fanout = fanout;
                                        }
                                        c.round = ratio * c.link_delay;
                                        c.loss_prob = loss;
                                        c.sig_scheme = scheme;
                                        c.recovery = rec;
                                        let p = Point {
                                            config: c,
                                            adversary: AdversarySpec {
                                                behavior: self.adversary.behavior,
                                                count: byz,
                                            },
                                            payload_size: size,
                                        };
                                        p.config.validate().map_err(|source| {
                                            ExperimentError::Config {
                                                point: p.label(),
                                                source,
                                            }
                                        })?;
                                        out.push(p);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out.sort_by_key(Point::sort_key);
        Ok(out)
    }
}

/// What one run contributes to the aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub passive_incidents: usize,
    pub any_passive: bool,
    pub quorum_alive_at_end: bool,
    /// Application-level delivery latencies at processes active at the time.
    pub delivery_latency: Vec<u64>,
    pub bytes_per_node: Vec<u64>,
    pub msgs_per_node: Vec<u64>,
    pub signatures: u64,
    pub violations: usize,
    pub trace_hash: [u8; 32],
}

impl RunMetrics {
    pub fn from_outcome(out: &RunOutcome, report: &AuditReport) -> Self {
        let correct = out.correct();
        let passive_incidents = out
            .records
            .iter()
            .filter(|r| correct.contains(r.node) && matches!(r.event, NodeEvent::Passive { .. }))
            .count();
        let mut sent = std::collections::BTreeMap::new();
        for r in &out.records {
            if let NodeEvent::Broadcast { id, .. } = &r.event {
                sent.insert(*id, r.at);
            }
        }
        let delivery_latency = out
            .deliveries()
            .filter(|(p, _)| correct.contains(*p))
            .filter_map(|(_, d)| sent.get(&d.id).map(|t| d.at - t))
            .collect();
        RunMetrics {
            seed: out.config.seed,
            passive_incidents,
            any_passive: !out.ever_passive.is_empty(),
            quorum_alive_at_end: out.active_correct_at_end() >= out.config.quorum(),
            delivery_latency,
            bytes_per_node: out.stats.bytes_sent.clone(),
            msgs_per_node: out.stats.packets_sent.clone(),
            signatures: out.stats.total_signatures(),
            violations: report.violations.len(),
            trace_hash: out.trace_hash,
        }
    }
}

/// Maps `run` over `seeds` on all available cores. Results are in seed order.
pub fn par_seeds<T, F>(seeds: Range<u64>, run: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    seeds.into_par_iter().map(run).collect()
}

/// Runs `runs` seeds starting at `seed0`, auditing each.
pub fn run_batch(
    point: &Point,
    workload: &Workload,
    seed0: u64,
    runs: u64,
) -> Result<Vec<RunMetrics>, ExperimentError> {
    par_seeds(seed0..seed0 + runs, |seed| {
        let mut cfg = point.config.clone();
        cfg.seed = seed;
        let mut s = Scenario::new(cfg, workload.clone())
            .with_adversary(point.adversary.behavior, point.adversary.count);
        s.payload_size = point.payload_size;
        let out = s.run()?;
        let report = audit(&out, workload);
        Ok(RunMetrics::from_outcome(&out, &report))
    })
    .into_iter()
    .collect()
}

/// Fraction of runs in which some correct process went passive.
pub fn passive_probability(runs: &[RunMetrics]) -> f64 {
    mean(runs.iter().map(|r| f64::from(u8::from(r.any_passive))))
}

/// Fraction of runs ending with fewer than 2f + 1 active processes.
pub fn quorum_loss_probability(runs: &[RunMetrics]) -> f64 {
    mean(
        runs.iter()
            .map(|r| f64::from(u8::from(!r.quorum_alive_at_end))),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub point: Point,
    pub metric: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub runs: u64,
    pub seed_first: u64,
    pub seed_last: u64,
}

/// Aggregates of one point, one row per metric.
pub fn summarize(point: &Point, runs: &[RunMetrics]) -> Vec<ResultRow> {
    let per_run: [(&'static str, Vec<f64>); 6] = [
        (
            "passive_probability",
            runs.iter()
                .map(|r| f64::from(u8::from(r.any_passive)))
                .collect(),
        ),
        (
            "quorum_lost_probability",
            runs.iter()
                .map(|r| f64::from(u8::from(!r.quorum_alive_at_end)))
                .collect(),
        ),
        (
            "bytes_per_node",
            runs.iter()
                .map(|r| {
                    r.bytes_per_node.iter().sum::<u64>() as f64
                        / r.bytes_per_node.len().max(1) as f64
                })
                .collect(),
        ),
        (
            "msgs_per_node",
            runs.iter()
                .map(|r| {
                    r.msgs_per_node.iter().sum::<u64>() as f64 / r.msgs_per_node.len().max(1) as f64
                })
                .collect(),
        ),
        (
            "delivery_latency_us",
            runs.iter()
                .flat_map(|r| r.delivery_latency.iter().map(|&x| x as f64))
                .collect(),
        ),
        (
            "violations",
            runs.iter().map(|r| r.violations as f64).collect(),
        ),
    ];
    let seed_first = runs.iter().map(|r| r.seed).min().unwrap_or(0);
    let seed_last = runs.iter().map(|r| r.seed).max().unwrap_or(0);
    per_run
        .into_iter()
        .map(|(metric, xs)| {
            let (mean, stderr) = mean_stderr(&xs);
            ResultRow {
                point: point.clone(),
                metric,
                mean,
                stderr,
                runs: runs.len() as u64,
                seed_first,
                seed_last,
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 16] = [
    "n",
    "f",
    "fanout",
    "round_ratio",
    "loss_prob",
    "sig_scheme",
    "payload_size",
    "byz_behavior",
    "byz_count",
    "recovery",
    "metric",
    "mean",
    "stderr",
    "runs",
    "seed_first",
    "seed_last",
];

/// Writes rows sorted by sweep keys, then metric name.
pub fn emit_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<(), ExperimentError> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.point.sort_key(), a.metric).cmp(&(b.point.sort_key(), b.metric)));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in sorted {
        let c = &r.point.config;
        let behavior = serde_json::to_value(r.point.adversary.behavior)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        out.write_record([
            c.n.to_string(),
            c.f.to_string(),
            c.fanout.to_string(),
            (c.round / c.link_delay).to_string(),
            c.loss_prob.to_string(),
            scheme_name(c.sig_scheme).to_string(),
            r.point.payload_size.to_string(),
            behavior,
            r.point.adversary.count.to_string(),
            c.recovery.to_string(),
            r.metric.to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.stderr),
            r.runs.to_string(),
            r.seed_first.to_string(),
            r.seed_last.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every point of `spec` and returns the rows and total violations.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(Vec<ResultRow>, usize), ExperimentError> {
    let mut rows = Vec::new();
    let mut violations = 0;
    for p in spec.points()? {
        let runs = run_batch(&p, &spec.workload, spec.base.seed, spec.runs_per_point)?;
        violations += runs.iter().map(|r| r.violations).sum::<usize>();
        rows.extend(summarize(&p, &runs));
    }
    Ok((rows, violations))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ExperimentSpec {
        ExperimentSpec {
            base: ProtocolConfig::new(4, 1),
            sweep: Sweep::default(),
            runs_per_point: 2,
            workload: Workload::SingleBroadcast,
            adversary: AdversarySpec::default(),
            payload_size: 0,
        }
    }

    #[test]
    fn parallel_results_keep_seed_order() {
        assert_eq!(
            par_seeds(5..12, |s| s * 2),
            vec![10, 12, 14, 16, 18, 20, 22]
        );
        assert!(par_seeds(3..3, |s| s).is_empty());
    }

    #[test]
    fn empty_results_give_header_only() {
        let mut buf = Vec::new();
        emit_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("n,f,fanout,"));
    }

    #[test]
    fn sweep_is_a_sorted_product() {
        let mut s = spec();
        s.sweep.loss_prob = vec![0.2, 0.0];
        s.sweep.round_ratio = vec![8, 4];
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 4);
        let keys: Vec<(u64, f64)> = pts
            .iter()
            .map(|p| (p.config.round / p.config.link_delay, p.config.loss_prob))
            .collect();
        assert_eq!(keys, vec![(4, 0.0), (4, 0.2), (8, 0.0), (8, 0.2)]);
    }

    #[test]
    fn changing_n_rederives_faults_and_fanout() {
        let mut s = spec();
        s.sweep.n = vec![7];
        let p = &s.points().unwrap()[0];
        assert_eq!((p.config.n, p.config.f, p.config.fanout), (7, 2, 3));
    }

    #[test]
    fn invalid_points_are_rejected() {
        let mut s = spec();
        s.sweep.fanout = vec![5];
        assert!(matches!(s.points(), Err(ExperimentError::Config { .. })));
    }

    #[test]
    fn two_points_give_sorted_rows_and_same_bytes_on_rerun() {
        let mut s = spec();
        s.sweep.loss_prob = vec![0.1, 0.0];
        let csv_of = |s: &ExperimentSpec| {
            let (rows, v) = run_experiment(s).unwrap();
            assert_eq!(v, 0);
            let mut buf = Vec::new();
            emit_csv(&rows, &mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = csv_of(&s);
        let b = csv_of(&s);
        assert_eq!(a, b);
        let passive: Vec<&str> = a
            .lines()
            .filter(|l| l.contains(",passive_probability,"))
            .collect();
        assert_eq!(passive.len(), 2);
        assert!(passive[0].contains(",0,stub,") && passive[1].contains(",0.1,stub,"));
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[1.0, 1.0, 1.0]), (1.0, 0.0));
        let (m, se) = mean_stderr(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((se - 0.5).abs() < 1e-12);
    }
}
