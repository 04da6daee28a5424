//! The acceptance suite: nine pass/fail criteria over seeded simulations.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{KeyRing, SignerMask};
use crate::harness::audit::{audit, AuditReport, Property};
use crate::harness::experiment::{par_seeds, RunMetrics};
use crate::harness::workload::{Scenario, Workload};
use crate::model::{self, ProcessId, ProtocolConfig, SigScheme, Time};
use crate::node::{Application, Command};
use crate::rtbc::{self, ConsensusApp, IcMsg};
use crate::simnet::{
    AdversaryProfile, Behavior, EquivocationPlan, RunOutcome, SimError, SimOptions, Simulation,
};

pub const ALL: [u8; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Clone, Debug)]
pub struct Options {
    /// Runs per point for criteria 1 to 4.
    pub runs: u64,
    /// Randomized seeds for criteria 7 and 8.
    pub seeds: u64,
    /// Random configurations for criterion 9.
    pub configs: usize,
    /// First seed; run k of a point uses `seed + k`.
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            runs: 1000,
            seeds: 100,
            configs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} {:<22} {} ({:.1}s) {}",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Adversary {
    None,
    Silent,
    Equivocate,
}

impl Adversary {
    fn profile(self, f: usize) -> AdversaryProfile {
        match self {
            Adversary::None => AdversaryProfile::none(),
            Adversary::Silent => AdversaryProfile::new(Behavior::Silent, f),
            Adversary::Equivocate => AdversaryProfile::new(Behavior::Equivocate, f),
        }
    }
}

/// Tallies for one single-broadcast grid point.
#[derive(Clone, Debug, Default)]
struct PointStats {
    runs: u64,
    passive_runs: u64,
    quorum_lost_runs: u64,
    timeliness: usize,
    safety: usize,
    first_failure: Option<String>,
}

impl PointStats {
    fn passive_probability(&self) -> f64 {
        self.passive_runs as f64 / self.runs as f64
    }

    fn quorum_lost_probability(&self) -> f64 {
        self.quorum_lost_runs as f64 / self.runs as f64
    }

    /// `other` must cover later seeds.
    fn merge(&mut self, other: PointStats) {
        self.runs += other.runs;
        self.passive_runs += other.passive_runs;
        self.quorum_lost_runs += other.quorum_lost_runs;
        self.timeliness += other.timeliness;
        self.safety += other.safety;
        if self.first_failure.is_none() {
            self.first_failure = other.first_failure;
        }
    }
}

fn point_runs(key: PointKey, seeds: std::ops::Range<u64>) -> Result<PointStats, SimError> {
    let (n, f, loss, adv, recovery) = key;
    let mut stats = PointStats::default();
    for seed in seeds {
        let mut cfg = ProtocolConfig::new(n, f);
        cfg.loss_prob = f64::from(loss) / 100.0;
        cfg.recovery = recovery;
        cfg.seed = seed;
        let workload = Workload::SingleBroadcast;
        let mut sc = Scenario::new(cfg, workload.clone());
        sc.adversary = adv.profile(f);
        let out = sc.run()?;
        let report = audit(&out, &workload);
        let m = RunMetrics::from_outcome(&out, &report);
        stats.runs += 1;
        stats.passive_runs += u64::from(m.any_passive);
        stats.quorum_lost_runs += u64::from(!m.quorum_alive_at_end);
        let late = report.count(Property::BroadcastTimeliness);
        stats.timeliness += late;
        stats.safety += report.violations.len() - late;
        if stats.first_failure.is_none() && !report.is_clean() {
            stats.first_failure = first_violation(&report)
                .map(|v| format!("n={n} loss={loss}% {adv:?} seed={seed}: {v}"));
        }
    }
    Ok(stats)
}

/// (n, f, loss in percent, adversary, recovery)
type PointKey = (usize, usize, u32, Adversary, bool);

/// Single-broadcast points are shared between criteria.
pub struct Suite {
    opts: Options,
    points: BTreeMap<PointKey, PointStats>,
}

fn elapsed_report(
    id: u8,
    name: &'static str,
    t0: Instant,
    res: Result<(bool, String), SimError>,
) -> CriterionReport {
    let (pass, detail) = res.unwrap_or_else(|e| (false, format!("simulation error: {e}")));
    CriterionReport {
        id,
        name,
        pass,
        detail,
        elapsed: t0.elapsed(),
    }
}

fn first_violation(r: &AuditReport) -> Option<String> {
    r.violations.first().map(|v| v.to_string())
}

impl Suite {
    pub fn new(opts: Options) -> Self {
        Suite {
            opts,
            points: BTreeMap::new(),
        }
    }

    pub fn run_all(&mut self) -> Vec<CriterionReport> {
        self.run(&ALL)
    }

    /// Runs the listed criteria in ascending order. Unknown ids are ignored.
    pub fn run(&mut self, ids: &[u8]) -> Vec<CriterionReport> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut out = Vec::new();
        if ids.contains(&1) || ids.contains(&2) {
            let (c1, c2) = self.timeliness_and_safety();
            out.extend([c1, c2].into_iter().filter(|c| ids.contains(&c.id)));
        }
        for id in ids {
            let r = match id {
                3 => self.reliability_curve(),
                4 => self.recovery_resilience(),
                5 => worst_case_formula(),
                6 => bandwidth_identity(&self.opts),
                7 => consensus_properties(&self.opts),
                8 => atomic_properties(&self.opts),
                9 => determinism(&self.opts),
                _ => continue,
            };
            out.push(r);
        }
        out
    }

    fn point(&mut self, key: PointKey) -> Result<PointStats, SimError> {
        if let Some(s) = self.points.get(&key) {
            return Ok(s.clone());
        }
        let seeds = self.opts.seed..self.opts.seed + self.opts.runs;
        let parts = par_seeds(seeds, |seed| point_runs(key, seed..seed + 1));
        let mut stats = PointStats::default();
        for part in parts {
            stats.merge(part?);
        }
        self.points.insert(key, stats.clone());
        Ok(stats)
    }

    /// Criteria 1 and 2 over the same runs.
    pub fn timeliness_and_safety(&mut self) -> (CriterionReport, CriterionReport) {
        let t0 = Instant::now();
        let mut late = 0;
        let mut unsafe_ = 0;
        let mut runs = 0;
        let mut late_first = None;
        let mut unsafe_first = None;
        let mut err = None;
        'grid: for n in [4, 25, 49] {
            let f = ProtocolConfig::max_faults(n);
            for loss in [0, 20, 40] {
                for adv in [Adversary::None, Adversary::Silent, Adversary::Equivocate] {
                    match self.point((n, f, loss, adv, false)) {
                        Ok(s) => {
                            runs += s.runs;
                            late += s.timeliness;
                            unsafe_ += s.safety;
                            if s.timeliness > 0 && late_first.is_none() {
                                late_first = s.first_failure.clone();
                            }
                            if s.safety > 0 && unsafe_first.is_none() {
                                unsafe_first = s.first_failure.clone();
                            }
                        }
                        Err(e) => {
                            err = Some(e);
                            break 'grid;
                        }
                    }
                }
            }
        }
        let elapsed = t0.elapsed();
        let mk = |id, name, count: usize, first: Option<String>| {
            let (pass, detail) = match &err {
                Some(e) => (false, format!("simulation error: {e}")),
                None => (
                    count == 0,
                    format!(
                        "{count} violations in {runs} runs{}",
                        first.map(|s| format!("; first: {s}")).unwrap_or_default()
                    ),
                ),
            };
            CriterionReport {
                id,
                name,
                pass,
                detail,
                elapsed,
            }
        };
        (
            mk(1, "broadcast timeliness", late, late_first),
            mk(2, "broadcast safety", unsafe_, unsafe_first),
        )
    }

    /// Criterion 3.
    pub fn reliability_curve(&mut self) -> CriterionReport {
        let t0 = Instant::now();
        let res = (|| {
            let mut fails = Vec::new();
            let mut curve = Vec::new();
            for loss in (0..=90).step_by(10) {
                let s = self.point((25, 8, loss, Adversary::None, false))?;
                curve.push((loss, s.passive_probability(), s.runs));
            }
            for &(loss, p, _) in &curve {
                if loss <= 30 && p > 0.0 {
                    fails.push(format!("n=25 loss={loss}%: {p}"));
                }
                if loss == 40 && p > 0.05 {
                    fails.push(format!("n=25 loss=40%: {p} > 0.05"));
                }
            }
            for w in curve.windows(2) {
                let (l0, p0, r0) = w[0];
                let (l1, p1, r1) = w[1];
                if p1 + monotone_slack(p0, r0, p1, r1) < p0 {
                    fails.push(format!("n=25 decreases from {l0}% ({p0}) to {l1}% ({p1})"));
                }
            }
            let mut big = Vec::new();
            for loss in (0..=40).step_by(10) {
                let s = self.point((49, 16, loss, Adversary::None, false))?;
                big.push(s.passive_probability());
                if s.passive_runs > 0 {
                    fails.push(format!("n=49 loss={loss}%: {}", s.passive_probability()));
                }
            }
            let shown: Vec<String> = curve.iter().map(|(_, p, _)| format!("{p:.3}")).collect();
            let detail = format!(
                "n=25 curve [{}], n=49 [{}]{}",
                shown.join(" "),
                big.iter()
                    .map(|p| format!("{p:.3}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                if fails.is_empty() {
                    String::new()
                } else {
                    format!("; {}", fails.join("; "))
                }
            );
            Ok((fails.is_empty(), detail))
        })();
        elapsed_report(3, "reliability curve", t0, res)
    }

    /// Criterion 4.
    pub fn recovery_resilience(&mut self) -> CriterionReport {
        let t0 = Instant::now();
        let res = (|| {
            let mut fails = Vec::new();
            let mut shown = Vec::new();
            for (n, max_loss) in [(49, 60), (52, 70)] {
                let mut row = Vec::new();
                for loss in (0..=max_loss).step_by(10) {
                    let s = self.point((n, 16, loss, Adversary::Silent, true))?;
                    let q = s.quorum_lost_probability();
                    row.push(format!("{q:.3}"));
                    if q > 0.01 {
                        fails.push(format!("n={n} loss={loss}%: {q} > 0.01"));
                    }
                }
                shown.push(format!("n={n} [{}]", row.join(" ")));
            }
            let mut detail = shown.join(", ");
            if !fails.is_empty() {
                detail = format!("{detail}; {}", fails.join("; "));
            }
            Ok((fails.is_empty(), detail))
        })();
        elapsed_report(4, "recovery resilience", t0, res)
    }
}

/// Two standard errors of the difference of two estimated proportions.
fn monotone_slack(p0: f64, r0: u64, p1: f64, r1: u64) -> f64 {
    let v0 = p0 * (1.0 - p0) / r0 as f64;
    let v1 = p1 * (1.0 - p1) / r1 as f64;
    2.0 * (v0 + v1).sqrt()
}

/// Criterion 5. Reference values in milliseconds.
pub fn worst_case_formula() -> CriterionReport {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut shown = Vec::new();
    for (n, reference) in [(25usize, 25.6), (50, 27.0), (100, 30.0)] {
        let ms = model::worst_case_latency(n, 1000, 30) as f64 / 1000.0;
        shown.push(format!("n={n}: {ms} vs {reference}"));
        if (ms - reference).abs() > 0.5 {
            fails.push(n);
        }
    }
    elapsed_report(
        5,
        "worst-case formula",
        t0,
        Ok((fails.is_empty(), shown.join(", "))),
    )
}

/// Criterion 6.
pub fn bandwidth_identity(opts: &Options) -> CriterionReport {
    let t0 = Instant::now();
    let res = (|| {
        let delta = (SigScheme::Rsa2048Like.signature_size()
            - SigScheme::EcdsaP256Like.signature_size()) as u64;
        let cases = [
            (4, 0.0, Behavior::Silent, 0),
            (7, 0.1, Behavior::Equivocate, 2),
            (25, 0.2, Behavior::Silent, 0),
            (49, 0.4, Behavior::Silent, 16),
        ];
        let mut checked = 0;
        let mut sigs = 0;
        for (n, loss, behavior, count) in cases {
            for k in 0..5 {
                let run = |scheme| {
                    let mut cfg = ProtocolConfig::new(n, ProtocolConfig::max_faults(n));
                    cfg.loss_prob = loss;
                    cfg.sig_scheme = scheme;
                    cfg.seed = opts.seed + k;
                    Scenario::new(cfg, Workload::SingleBroadcast)
                        .with_adversary(behavior, count)
                        .run()
                };
                let rsa = run(SigScheme::Rsa2048Like)?;
                let ecdsa = run(SigScheme::EcdsaP256Like)?;
                let s = rsa.stats.total_signatures();
                let diff = rsa.stats.total_bytes() as i128 - ecdsa.stats.total_bytes() as i128;
                if s != ecdsa.stats.total_signatures() || diff != i128::from(delta * s) {
                    return Ok((
                        false,
                        format!(
                            "n={n} seed={}: byte difference {diff}, {s} vs {} signatures",
                            opts.seed + k,
                            ecdsa.stats.total_signatures()
                        ),
                    ));
                }
                checked += 1;
                sigs += s;
            }
        }
        Ok((
            true,
            format!("{checked} run pairs, {sigs} signatures, {delta} bytes each"),
        ))
    })();
    elapsed_report(6, "bandwidth identity", t0, res)
}

fn ic_value(keys: &KeyRing, inst: u64, proposer: ProcessId, value: Option<Bytes>) -> Bytes {
    IcMsg::propose(keys, inst, proposer, value).encode()
}

/// Runs standalone consensus with explicit proposals.
fn run_consensus(
    cfg: &ProtocolConfig,
    adversary: AdversaryProfile,
    proposals: &[(Time, ProcessId, u64, Option<Bytes>)],
    horizon: Time,
) -> Result<RunOutcome, SimError> {
    let opts = SimOptions {
        adversary,
        ..SimOptions::default()
    };
    let mut sim = Simulation::new(cfg.clone(), opts, |p, cfg, keys: &Rc<KeyRing>| {
        Box::new(ConsensusApp::new(p, cfg, keys.clone())) as Box<dyn Application>
    })?;
    for (at, p, instance, value) in proposals {
        sim.schedule_command(
            *at,
            *p,
            Command::Propose {
                instance: *instance,
                value: value.clone(),
            },
        );
    }
    sim.run_until(horizon);
    Ok(sim.finish())
}

/// Equivocation of one IC proposal: either one RTBRB broadcast with two
/// values, or two broadcasts under distinct sequence numbers.
#[allow(clippy::too_many_arguments)]
fn ic_equivocation(
    keys: &KeyRing,
    byz: ProcessId,
    inst: u64,
    values: [Option<Bytes>; 2],
    split: SignerMask,
    at: Time,
    seq: u64,
    two_seqs: bool,
    gap: Time,
) -> Vec<(ProcessId, EquivocationPlan)> {
    let a = ic_value(keys, inst, byz, values[0].clone());
    let b = ic_value(keys, inst, byz, values[1].clone());
    let mut plans = vec![(
        byz,
        EquivocationPlan {
            seq,
            values: [a.clone(), b.clone()],
            split,
            at,
        },
    )];
    if two_seqs {
        plans.push((
            byz,
            EquivocationPlan {
                seq: seq + 1,
                values: [b, a],
                split,
                at: at + gap,
            },
        ));
    }
    plans
}

/// Criterion 7.
pub fn consensus_properties(opts: &Options) -> CriterionReport {
    let t0 = Instant::now();
    let res = (|| {
        let mut runs = 0;
        let bad = |out: &RunOutcome, workload: &Workload, what: String| {
            let r = audit(out, workload);
            first_violation(&r).map(|v| format!("{what}: {v}"))
        };

        // Exhaustive at n=4: the Byzantine proposer p3 sends two IC values
        // to every split of the correct processes.
        let cfg = ProtocolConfig::new(4, 1);
        let keys = KeyRing::new(cfg.n, cfg.seed);
        let byz = ProcessId(3);
        let l = rtbc::round_length(&cfg);
        let dr = cfg.delivery_bound();
        let timings = [0, l - dr / 2, l + dr, rtbc::instance_length(&cfg) + dr];
        let horizon = 2 * rtbc::decision_bound(&cfg) + 2 * cfg.delivery_bound();
        let w = Workload::ConsensusBatch {
            instances: 1,
            mixed: true,
        };
        let a = || Some(Bytes::from_static(b"a"));
        let b = || Some(Bytes::from_static(b"b"));
        for mask in 0u128..8 {
            let split = SignerMask(mask);
            for two_seqs in [false, true] {
                for &at in &timings {
                    for mixed in [false, true] {
                        let props: Vec<_> = (0..3u16)
                            .map(|i| {
                                let v = if mixed && i == 1 { b() } else { a() };
                                (0, ProcessId(i), 0, v)
                            })
                            .collect();
                        let plans =
                            ic_equivocation(&keys, byz, 0, [a(), b()], split, at, 0, two_seqs, l);
                        let adv = AdversaryProfile {
                            behavior: Behavior::Equivocate,
                            count: 1,
                            plans,
                        };
                        let out = run_consensus(&cfg, adv, &props, horizon)?;
                        runs += 1;
                        let what = format!(
                            "n=4 split={mask:03b} two_seqs={two_seqs} at={at} mixed={mixed}"
                        );
                        if let Some(v) = bad(&out, &w, what) {
                            return Ok((false, v));
                        }
                    }
                }
            }
        }
        let log4 = bound_log(&cfg);

        // Randomized at n=7 with two equivocating proposers.
        let mut cfg7 = ProtocolConfig::new(7, 2);
        let instances = 2;
        for k in 0..opts.seeds {
            let seed = opts.seed + k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1c_0de);
            cfg7.seed = seed;
            cfg7.loss_prob = [0.0, 0.1, 0.2][rng.gen_range(0..3)];
            let keys = KeyRing::new(cfg7.n, cfg7.seed);
            let correct_mask = SignerMask((1u128 << 5) - 1);
            let spacing = crate::harness::workload::consensus_spacing(&cfg7);
            let mut plans = Vec::new();
            for byz in [ProcessId(5), ProcessId(6)] {
                let mut seq = 0;
                for inst in 0..instances {
                    let split = SignerMask(rng.gen::<u128>() & correct_mask.0);
                    let at = inst * spacing + rng.gen_range(0..=rtbc::instance_length(&cfg7));
                    let two = rng.gen_bool(0.5);
                    let first = if rng.gen_bool(0.2) {
                        None
                    } else {
                        Some(Bytes::from(format!("a{inst}")))
                    };
                    let values = [first, Some(Bytes::from(format!("b{inst}")))];
                    plans.extend(ic_equivocation(
                        &keys, byz, inst, values, split, at, seq, two, l,
                    ));
                    seq += if two { 2 } else { 1 };
                }
            }
            let w = Workload::ConsensusBatch {
                instances: instances as usize,
                mixed: true,
            };
            let mut sc = Scenario::new(cfg7.clone(), w.clone());
            sc.adversary = AdversaryProfile {
                behavior: Behavior::Equivocate,
                count: 2,
                plans,
            };
            let out = sc.run()?;
            runs += 1;
            if let Some(v) = bad(&out, &w, format!("n=7 seed={seed}")) {
                return Ok((false, v));
            }
        }
        Ok((
            true,
            format!("{runs} runs clean; {log4}; {}", bound_log(&cfg7)),
        ))
    })();
    elapsed_report(7, "consensus properties", t0, res)
}

fn bound_log(cfg: &ProtocolConfig) -> String {
    format!(
        "n={} f+1={} m={:.3} decision bound={}us",
        cfg.n,
        rtbc::rounds(cfg),
        rtbc::multiplicity(cfg),
        rtbc::decision_bound(cfg)
    )
}

/// Criterion 8.
pub fn atomic_properties(opts: &Options) -> CriterionReport {
    let t0 = Instant::now();
    let res = (|| {
        let w = Workload::PacedAtomic {
            messages: 3,
            broadcasters: 2,
        };
        let mut runs = 0;
        let mut delivered = 0;
        for loss in [0.0, 0.2] {
            for k in 0..opts.seeds {
                let mut cfg = ProtocolConfig::new(4, 1);
                cfg.loss_prob = loss;
                cfg.seed = opts.seed + k;
                let out = Scenario::new(cfg, w.clone()).run()?;
                let r = audit(&out, &w);
                if let Some(v) = first_violation(&r) {
                    return Ok((false, format!("loss={loss} seed={}: {v}", opts.seed + k)));
                }
                runs += 1;
                delivered += out
                    .records
                    .iter()
                    .filter(|r| {
                        matches!(
                            r.event,
                            crate::node::NodeEvent::App(
                                crate::node::AppEvent::AtomicDelivered { .. }
                            )
                        )
                    })
                    .count();
            }
        }
        let cfg = ProtocolConfig::new(4, 1);
        Ok((
            true,
            format!(
                "{runs} runs clean, {delivered} atomic deliveries, bound {}us",
                crate::rtbab::delivery_bound(&cfg)
            ),
        ))
    })();
    elapsed_report(8, "atomic properties", t0, res)
}

/// A random configuration for the determinism check.
pub fn random_scenario<R: Rng>(rng: &mut R) -> Scenario {
    let n = [4, 7, 10, 13, 16, 25][rng.gen_range(0..6)];
    let f = ProtocolConfig::max_faults(n);
    let mut cfg = ProtocolConfig::new(n, f);
    cfg.loss_prob = f64::from(rng.gen_range(0..5u32)) / 10.0;
    cfg.seed = rng.gen();
    cfg.recovery = rng.gen_bool(0.5);
    cfg.sig_scheme = [
        SigScheme::Stub,
        SigScheme::Rsa2048Like,
        SigScheme::EcdsaP256Like,
    ][rng.gen_range(0..3)];
    let behavior = [
        Behavior::Silent,
        Behavior::Equivocate,
        Behavior::StaleReplay,
        Behavior::MaxDelay,
    ][rng.gen_range(0..4)];
    let count = rng.gen_range(0..=f);
    let workload = match rng.gen_range(0..3) {
        0 if n <= 7 => Workload::PacedAtomic {
            messages: 2,
            broadcasters: 2,
        },
        1 if n <= 10 => Workload::ConsensusBatch {
            instances: 2,
            mixed: rng.gen(),
        },
        _ => Workload::SingleBroadcast,
    };
    let mut sc = Scenario::new(cfg, workload).with_adversary(behavior, count);
    sc.payload_size = rng.gen_range(0..256);
    sc
}

/// Criterion 9.
pub fn determinism(opts: &Options) -> CriterionReport {
    let t0 = Instant::now();
    let res = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xde7e_3a15);
        for i in 0..opts.configs {
            let sc = random_scenario(&mut rng);
            let a = sc.run()?;
            let b = sc.run()?;
            if a.trace_hash != b.trace_hash {
                return Ok((
                    false,
                    format!(
                        "config {i} ({:?}, n={}) hashes differ",
                        sc.workload, sc.config.n
                    ),
                ));
            }
        }
        Ok((true, format!("{} configurations", opts.configs)))
    })();
    elapsed_report(9, "determinism", t0, res)
}
