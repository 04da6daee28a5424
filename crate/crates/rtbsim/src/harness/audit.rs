//! Property checks over finished runs. Agreement-style checks compare only
//! steady processes (correct and never passive); bounds are checked for
//! every correct process that acted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use bytes::Bytes;

use crate::crypto::SignerMask;
use crate::model::{BroadcastId, ProcessId, ProtocolConfig, Time};
use crate::node::{AppEvent, NodeEvent};
use crate::rtbab::{self, AtomicMsg, Queued};
use crate::rtbc;
use crate::simnet::RunOutcome;

use super::workload::Workload;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Property {
    BroadcastTimeliness,
    BroadcastAgreement,
    BroadcastNoDuplication,
    BroadcastIntegrity,
    ConsensusAgreement,
    ConsensusValidity,
    ConsensusTermination,
    ConsensusTimeliness,
    VectorAgreement,
    VectorValidity,
    TotalOrder,
    AtomicNoDuplication,
    AtomicIntegrity,
    AtomicTimeliness,
    IssueBound,
    ProposeBound,
    SingleValue,
    DecideDeliver,
    Repropose,
    Participation,
    Layer,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Property::BroadcastTimeliness => "broadcast-timeliness",
            Property::BroadcastAgreement => "broadcast-agreement",
            Property::BroadcastNoDuplication => "broadcast-no-duplication",
            Property::BroadcastIntegrity => "broadcast-integrity",
            Property::ConsensusAgreement => "consensus-agreement",
            Property::ConsensusValidity => "consensus-validity",
            Property::ConsensusTermination => "consensus-termination",
            Property::ConsensusTimeliness => "consensus-timeliness",
            Property::VectorAgreement => "vector-agreement",
            Property::VectorValidity => "vector-validity",
            Property::TotalOrder => "total-order",
            Property::AtomicNoDuplication => "atomic-no-duplication",
            Property::AtomicIntegrity => "atomic-integrity",
            Property::AtomicTimeliness => "atomic-timeliness",
            Property::IssueBound => "p1-issue-bound",
            Property::ProposeBound => "p2-propose-bound",
            Property::SingleValue => "p3-single-value",
            Property::DecideDeliver => "p4-decide-deliver",
            Property::Repropose => "p5-repropose",
            Property::Participation => "p6-participation",
            Property::Layer => "layer-report",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub property: Property,
    pub node: Option<ProcessId>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(p) => write!(f, "{} at {}: {}", self.property, p, self.detail),
            None => write!(f, "{}: {}", self.property, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, property: Property) -> usize {
        self.violations
            .iter()
            .filter(|v| v.property == property)
            .count()
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.violations.extend(other.violations);
    }

    fn push(&mut self, property: Property, node: Option<ProcessId>, detail: String) {
        self.violations.push(Violation {
            property,
            node,
            detail,
        });
    }
}

/// Every audit that applies to `workload`.
pub fn audit(out: &RunOutcome, workload: &Workload) -> AuditReport {
    let mut r = audit_broadcast(out);
    r.merge(audit_layer_reports(out));
    match workload {
        Workload::SingleBroadcast => {}
        Workload::ConsensusBatch { .. } => r.merge(audit_consensus(out)),
        Workload::PacedAtomic { .. } => {
            r.merge(audit_consensus(out));
            r.merge(audit_atomic(out));
        }
    }
    r
}

/// Reliable broadcast: timeliness, agreement, no duplication, integrity.
pub fn audit_broadcast(out: &RunOutcome) -> AuditReport {
    let mut r = AuditReport::default();
    let correct = out.correct();
    let steady = out.steady();
    let bound = out.config.delivery_bound();

    let mut sent: BTreeMap<BroadcastId, (Time, Bytes)> = BTreeMap::new();
    for rec in &out.records {
        if let NodeEvent::Broadcast { id, value } = &rec.event {
            if correct.contains(rec.node) {
                sent.insert(*id, (rec.at, value.clone()));
            }
        }
    }

    let mut got: BTreeMap<ProcessId, BTreeMap<BroadcastId, Bytes>> = BTreeMap::new();
    let mut first: BTreeMap<BroadcastId, Time> = BTreeMap::new();
    for (p, d) in out.deliveries() {
        if !correct.contains(p) {
            continue;
        }
        first.entry(d.id).or_insert(d.at);
        if got
            .entry(p)
            .or_default()
            .insert(d.id, d.value.clone())
            .is_some()
        {
            r.push(
                Property::BroadcastNoDuplication,
                Some(p),
                format!("{} delivered twice", d.id),
            );
        }
        if !correct.contains(d.id.origin) {
            continue;
        }
        match sent.get(&d.id) {
            Some((t, v)) if *v == d.value && *t <= d.at => {
                if d.at > t + bound {
                    r.push(
                        Property::BroadcastTimeliness,
                        Some(p),
                        format!("{} delivered {}us after broadcast", d.id, d.at - t),
                    );
                }
            }
            _ => r.push(
                Property::BroadcastIntegrity,
                Some(p),
                format!("{} delivered but never broadcast with that value", d.id),
            ),
        }
    }

    // Instances first delivered too close to the horizon may still be in flight.
    let cutoff = out.horizon.saturating_sub(bound);
    let empty = BTreeMap::new();
    for (id, t) in &first {
        if *t > cutoff {
            continue;
        }
        let mut value: Option<&Bytes> = None;
        for p in steady.iter() {
            match got.get(&p).unwrap_or(&empty).get(id) {
                None => r.push(
                    Property::BroadcastAgreement,
                    Some(p),
                    format!("{id} not delivered"),
                ),
                Some(v) => match value {
                    Some(w) if w != v => r.push(
                        Property::BroadcastAgreement,
                        Some(p),
                        format!("{id} delivered with a different value"),
                    ),
                    _ => value = Some(v),
                },
            }
        }
    }
    r
}

/// Violations reported by the layers themselves at steady processes.
pub fn audit_layer_reports(out: &RunOutcome) -> AuditReport {
    let mut r = AuditReport::default();
    let steady = out.steady();
    for rec in &out.records {
        if let NodeEvent::App(AppEvent::Violation(what)) = &rec.event {
            if steady.contains(rec.node) {
                r.push(Property::Layer, Some(rec.node), what.clone());
            }
        }
    }
    r
}

/// (time, value, vector)
type DecisionRecord = (Time, Option<Bytes>, Vec<Option<Bytes>>);

#[derive(Default)]
struct InstanceLog {
    proposals: BTreeMap<ProcessId, (Time, Option<Bytes>)>,
    decisions: BTreeMap<ProcessId, DecisionRecord>,
}

fn consensus_logs(out: &RunOutcome) -> BTreeMap<u64, InstanceLog> {
    let correct = out.correct();
    let mut logs: BTreeMap<u64, InstanceLog> = BTreeMap::new();
    for rec in &out.records {
        if !correct.contains(rec.node) {
            continue;
        }
        match &rec.event {
            NodeEvent::App(AppEvent::Proposed { instance, value }) => {
                logs.entry(*instance)
                    .or_default()
                    .proposals
                    .insert(rec.node, (rec.at, value.clone()));
            }
            NodeEvent::App(AppEvent::Decided {
                instance,
                value,
                vector,
            }) => {
                logs.entry(*instance)
                    .or_default()
                    .decisions
                    .insert(rec.node, (rec.at, value.clone(), vector.clone()));
            }
            _ => {}
        }
    }
    logs
}

/// Consensus and interactive consistency per instance. Decisions must come
/// within the decision bound of the earliest correct proposal, and within
/// one instance length of the decider's own proposal.
pub fn audit_consensus(out: &RunOutcome) -> AuditReport {
    let mut r = AuditReport::default();
    let cfg = &out.config;
    let correct = out.correct();
    let steady = out.steady();
    let dc = rtbc::decision_bound(cfg);
    let len = rtbc::instance_length(cfg);

    for (inst, log) in consensus_logs(out) {
        let Some(earliest) = log.proposals.values().map(|(t, _)| *t).min() else {
            continue;
        };
        let deadline = earliest + dc;
        let correct_values: BTreeSet<&Option<Bytes>> =
            log.proposals.values().map(|(_, v)| v).collect();
        let unanimous = log.proposals.len() == correct.len() && correct_values.len() == 1;

        let mut agreed: Option<&Option<Bytes>> = None;
        let mut vector: Option<&Vec<Option<Bytes>>> = None;
        for p in steady.iter() {
            let Some((t, value, vec)) = log.decisions.get(&p) else {
                if deadline <= out.horizon {
                    r.push(
                        Property::ConsensusTermination,
                        Some(p),
                        format!("instance {inst} undecided"),
                    );
                }
                continue;
            };
            if *t > deadline {
                r.push(
                    Property::ConsensusTimeliness,
                    Some(p),
                    format!(
                        "instance {inst} decided {}us after the first proposal",
                        t - earliest
                    ),
                );
            }
            if let Some((own, _)) = log.proposals.get(&p) {
                if *t > own + len {
                    r.push(
                        Property::ConsensusTimeliness,
                        Some(p),
                        format!("instance {inst} decided {}us after proposing", t - own),
                    );
                }
            }
            match agreed {
                Some(a) if a != value => r.push(
                    Property::ConsensusAgreement,
                    Some(p),
                    format!("instance {inst} decided differently"),
                ),
                _ => agreed = Some(value),
            }
            match vector {
                Some(v) if v != vec => r.push(
                    Property::VectorAgreement,
                    Some(p),
                    format!("instance {inst} vector differs"),
                ),
                _ => vector = Some(vec),
            }
            if unanimous {
                let v = correct_values.iter().next().expect("one value");
                if *v != value {
                    r.push(
                        Property::ConsensusValidity,
                        Some(p),
                        format!("instance {inst}: unanimous proposal not decided"),
                    );
                }
            }
            if value.is_some() && !correct_values.contains(value) {
                r.push(
                    Property::ConsensusValidity,
                    Some(p),
                    format!("instance {inst}: decided a value no correct process proposed"),
                );
            }
            for (j, (_, proposal)) in &log.proposals {
                if steady.contains(*j) && vec.get(j.index()) != Some(proposal) {
                    r.push(
                        Property::VectorValidity,
                        Some(p),
                        format!("instance {inst}: slot {j} does not hold its proposal"),
                    );
                }
            }
        }
    }
    r
}

struct AtomicView {
    /// Per process: (time, seq, payload) of its own atomic broadcasts.
    issued: BTreeMap<ProcessId, Vec<(Time, u64, Bytes)>>,
    /// Per process: atomic seqs it handed to reliable broadcast, with time.
    rb_issued: BTreeMap<ProcessId, BTreeMap<u64, Time>>,
    /// Per process: reliable deliveries of atomic messages.
    rb_delivered: BTreeMap<ProcessId, Vec<(Time, Queued)>>,
    /// Per process: atomic deliveries in order.
    logs: BTreeMap<ProcessId, Vec<(Time, u64, Queued)>>,
}

fn atomic_view(out: &RunOutcome) -> AtomicView {
    let correct = out.correct();
    let mut v = AtomicView {
        issued: BTreeMap::new(),
        rb_issued: BTreeMap::new(),
        rb_delivered: BTreeMap::new(),
        logs: BTreeMap::new(),
    };
    for rec in &out.records {
        let p = rec.node;
        if !correct.contains(p) {
            continue;
        }
        match &rec.event {
            NodeEvent::App(AppEvent::AtomicBroadcast { seq, payload }) => {
                v.issued
                    .entry(p)
                    .or_default()
                    .push((rec.at, *seq, payload.clone()));
            }
            NodeEvent::Broadcast { value, .. } => {
                if let Ok(m) = AtomicMsg::decode(value.clone()) {
                    v.rb_issued.entry(p).or_default().insert(m.seq, rec.at);
                }
            }
            NodeEvent::Delivered(d) => {
                if let Ok(m) = AtomicMsg::decode(d.value.clone()) {
                    v.rb_delivered.entry(p).or_default().push((
                        rec.at,
                        Queued {
                            origin: d.id.origin,
                            seq: m.seq,
                            payload: m.payload,
                        },
                    ));
                }
            }
            NodeEvent::App(AppEvent::AtomicDelivered {
                instance,
                origin,
                seq,
                payload,
                ..
            }) => {
                v.logs.entry(p).or_default().push((
                    rec.at,
                    *instance,
                    Queued {
                        origin: *origin,
                        seq: *seq,
                        payload: payload.clone(),
                    },
                ));
            }
            _ => {}
        }
    }
    v
}

/// Atomic broadcast: total order, no duplication, integrity, timeliness,
/// and the six structural properties of the rotating-coordinator scheme.
pub fn audit_atomic(out: &RunOutcome) -> AuditReport {
    let mut r = AuditReport::default();
    let cfg = &out.config;
    let steady = out.steady();
    let correct = out.correct();
    let view = atomic_view(out);
    let no_log = Vec::new();

    audit_order(&mut r, &view, steady, correct, &no_log);
    audit_atomic_timeliness(&mut r, cfg, out.horizon, &view, steady, &no_log);
    audit_structure(&mut r, out, &view, steady);
    r
}

fn audit_order(
    r: &mut AuditReport,
    view: &AtomicView,
    steady: SignerMask,
    correct: SignerMask,
    no_log: &Vec<(Time, u64, Queued)>,
) {
    let issued: BTreeSet<(ProcessId, u64, &Bytes)> = view
        .issued
        .iter()
        .flat_map(|(p, v)| v.iter().map(move |(_, s, b)| (*p, *s, b)))
        .collect();
    for (p, log) in &view.logs {
        let mut seen = BTreeSet::new();
        for (_, _, q) in log {
            if !seen.insert((q.origin, q.seq)) {
                r.push(
                    Property::AtomicNoDuplication,
                    Some(*p),
                    format!("{}#{} delivered twice", q.origin, q.seq),
                );
            }
            if correct.contains(q.origin) && !issued.contains(&(q.origin, q.seq, &q.payload)) {
                r.push(
                    Property::AtomicIntegrity,
                    Some(*p),
                    format!("{}#{} was never broadcast", q.origin, q.seq),
                );
            }
        }
    }
    let nodes: Vec<ProcessId> = steady.iter().collect();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            let la = view.logs.get(a).unwrap_or(no_log);
            let lb = view.logs.get(b).unwrap_or(no_log);
            let common = la.len().min(lb.len());
            if let Some(k) = (0..common).find(|&k| la[k].2 != lb[k].2) {
                r.push(
                    Property::TotalOrder,
                    Some(*a),
                    format!("log diverges from {b}'s at position {k}"),
                );
            }
        }
    }
}

fn audit_atomic_timeliness(
    r: &mut AuditReport,
    cfg: &ProtocolConfig,
    horizon: Time,
    view: &AtomicView,
    steady: SignerMask,
    no_log: &Vec<(Time, u64, Queued)>,
) {
    let bound = rtbab::delivery_bound(cfg);
    for (origin, sent) in &view.issued {
        if !steady.contains(*origin) {
            continue;
        }
        for (t, seq, _) in sent {
            let deadline = t + bound;
            for (p, log) in &view.logs {
                if let Some((at, _, _)) = log
                    .iter()
                    .find(|(_, _, q)| q.origin == *origin && q.seq == *seq)
                {
                    if *at > deadline {
                        r.push(
                            Property::AtomicTimeliness,
                            Some(*p),
                            format!("{origin}#{seq} delivered {}us after broadcast", at - t),
                        );
                    }
                }
            }
            if deadline > horizon {
                continue;
            }
            for p in steady.iter() {
                let log = view.logs.get(&p).unwrap_or(no_log);
                if !log
                    .iter()
                    .any(|(_, _, q)| q.origin == *origin && q.seq == *seq)
                {
                    r.push(
                        Property::AtomicTimeliness,
                        Some(p),
                        format!("{origin}#{seq} not delivered within {bound}us"),
                    );
                }
            }
        }
    }
}

fn audit_structure(r: &mut AuditReport, out: &RunOutcome, view: &AtomicView, steady: SignerMask) {
    let cfg = &out.config;
    let n = cfg.n as u64;
    let dp = rtbab::propose_bound(cfg);
    let logs = consensus_logs(out);

    // Per process: instance -> (propose time, value), instance -> (decide time, value).
    let mut proposed: BTreeMap<ProcessId, Vec<(Time, u64, Option<Bytes>)>> = BTreeMap::new();
    let mut decided: BTreeMap<ProcessId, BTreeMap<u64, (Time, Option<Bytes>)>> = BTreeMap::new();
    for rec in &out.records {
        if !steady.contains(rec.node) {
            continue;
        }
        match &rec.event {
            NodeEvent::App(AppEvent::Proposed { instance, value }) => proposed
                .entry(rec.node)
                .or_default()
                .push((rec.at, *instance, value.clone())),
            NodeEvent::App(AppEvent::Decided {
                instance, value, ..
            }) => {
                decided
                    .entry(rec.node)
                    .or_default()
                    .insert(*instance, (rec.at, value.clone()));
            }
            _ => {}
        }
    }
    let no_dec = BTreeMap::new();

    for p in steady.iter() {
        // P1: atomic broadcasts reach reliable broadcast at once.
        let rb = view.rb_issued.get(&p);
        for (t, seq, _) in view.issued.get(&p).into_iter().flatten() {
            match rb.and_then(|m| m.get(seq)) {
                Some(at) if at <= t => {}
                _ => r.push(
                    Property::IssueBound,
                    Some(p),
                    format!("atomic #{seq} not issued at once"),
                ),
            }
        }

        let props = proposed.get(&p).map(Vec::as_slice).unwrap_or(&[]);
        let decs = decided.get(&p).unwrap_or(&no_dec);

        // P2: reliably delivered messages are proposed or decided in time.
        for (t, q) in view.rb_delivered.get(&p).into_iter().flatten() {
            if !out.correct().contains(q.origin) || t + dp > out.horizon {
                continue;
            }
            let enc = Some(q.encode());
            let hit = props.iter().any(|(at, _, v)| *v == enc && *at <= t + dp)
                || decs.values().any(|(at, v)| *v == enc && *at <= t + dp);
            if !hit {
                r.push(
                    Property::ProposeBound,
                    Some(p),
                    format!(
                        "{}#{} neither proposed nor decided within {dp}us",
                        q.origin, q.seq
                    ),
                );
            }
        }

        // P4: decided values are delivered at once.
        let log = view.logs.get(&p);
        for (inst, (t, v)) in decs {
            let Some(q) = v.clone().and_then(|b| Queued::decode(b).ok()) else {
                continue;
            };
            let ok = log
                .into_iter()
                .flatten()
                .any(|(at, _, d)| *d == q && at <= t);
            if !ok {
                r.push(
                    Property::DecideDeliver,
                    Some(p),
                    format!("instance {inst} decision not delivered at once"),
                );
            }
        }

        // P6: one proposal per instance, every instance, in order, never two in flight.
        for (k, w) in props.windows(2).enumerate() {
            let (t1, i1, _) = &w[0];
            let (t2, i2, _) = &w[1];
            if *i2 != i1 + 1 {
                r.push(
                    Property::Participation,
                    Some(p),
                    format!("proposal {} is for instance {i2} after {i1}", k + 1),
                );
            }
            match decs.get(i1) {
                Some((d, _)) if d <= t2 => {}
                _ => r.push(
                    Property::Participation,
                    Some(p),
                    format!("instance {i2} proposed at {t2} before instance {i1} (proposed {t1}) decided"),
                ),
            }
        }
        if let Some((_, first, _)) = props.first() {
            if *first != 0 {
                r.push(
                    Property::Participation,
                    Some(p),
                    format!("first proposal is for instance {first}"),
                );
            }
        }

        // P5: a value not decided is proposed again by the next slot of its leader.
        let by_inst: BTreeMap<u64, &Option<Bytes>> =
            props.iter().map(|(_, i, v)| (*i, v)).collect();
        for (_, inst, v) in props {
            let Some(val) = v else { continue };
            if decs.get(inst).map(|(_, d)| d) == Some(v) {
                continue;
            }
            let next_any = logs
                .range(inst + 1..)
                .find(|(_, l)| l.proposals.values().any(|(_, pv)| pv == v))
                .map(|(i, _)| *i);
            if let Some(k) = next_any {
                if let Some(mine) = by_inst.get(&k) {
                    if mine.as_ref() != Some(val) {
                        r.push(
                            Property::Repropose,
                            Some(p),
                            format!("value from instance {inst} not re-proposed at instance {k}"),
                        );
                    }
                }
            }
            if by_inst.contains_key(&(inst + n))
                && !(inst + 1..=inst + n).any(|k| by_inst.get(&k) == Some(&v))
            {
                r.push(
                    Property::Repropose,
                    Some(p),
                    format!("value from instance {inst} dropped before its leader's next slot"),
                );
            }
        }
    }

    // P3: at most one non-bottom value proposed per instance.
    for (inst, log) in &logs {
        let values: BTreeSet<&Bytes> = log
            .proposals
            .iter()
            .filter(|(p, _)| steady.contains(**p))
            .filter_map(|(_, (_, v))| v.as_ref())
            .collect();
        if values.len() > 1 {
            r.push(
                Property::SingleValue,
                None,
                format!("instance {inst} has {} distinct proposals", values.len()),
            );
        }
    }
}
