//! Real-time atomic broadcast: a rotating coordinator over successive
//! consensus instances. Instance `k` votes on the head of the queue of
//! `leader(k) = k mod n`; a decided value is delivered once, in instance
//! order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use bytes::Bytes;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::KeyRing;
use crate::model::{BroadcastId, ProcessId, ProtocolConfig, Span, Time};
use crate::node::{AppCtx, AppEvent, AppTimer, Application, Command};
use crate::rtbc::{self, Decision, IcEngine, IcInput, IcMsg, IC_TAG};
use crate::rtbrb::Delivery;

/// First byte of an encoded [`AtomicMsg`].
pub const ATOMIC_TAG: u8 = b'A';

/// Atomic broadcast payload as carried by reliable broadcast. `seq` counts
/// the origin's atomic broadcasts, independently of its reliable-broadcast
/// sequence numbers (consensus traffic shares those).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomicMsg {
    pub seq: u64,
    pub payload: Bytes,
}

impl AtomicMsg {
    pub fn encode(&self) -> Bytes {
        let mut w = Writer::new();
        w.u8(ATOMIC_TAG).u64(self.seq).bytes(&self.payload);
        w.finish()
    }

    pub fn decode(buf: Bytes) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let tag = r.u8()?;
        if tag != ATOMIC_TAG {
            return Err(DecodeError::UnknownTag(tag));
        }
        let seq = r.u64()?;
        let payload = r.bytes()?;
        r.finish()?;
        Ok(AtomicMsg { seq, payload })
    }
}

/// A queued message with its origin, as proposed to consensus.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Queued {
    pub origin: ProcessId,
    pub seq: u64,
    pub payload: Bytes,
}

impl Queued {
    pub fn encode(&self) -> Bytes {
        let mut w = Writer::new();
        w.u16(self.origin.0).u64(self.seq).bytes(&self.payload);
        w.finish()
    }

    pub fn decode(buf: Bytes) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let origin = ProcessId(r.u16()?);
        let seq = r.u64()?;
        let payload = r.bytes()?;
        r.finish()?;
        Ok(Queued {
            origin,
            seq,
            payload,
        })
    }
}

pub fn leader(inst: u64, n: usize) -> ProcessId {
    ProcessId::from_index((inst % n as u64) as usize)
}

/// Retry period for out-of-order events (Δ_W).
pub fn retry_wait(cfg: &ProtocolConfig) -> Span {
    cfg.link_delay
}

/// Bound from reliable delivery of a message to its proposal (Δ_P).
pub fn propose_bound(cfg: &ProtocolConfig) -> Span {
    let w = retry_wait(cfg);
    w + cfg.n as u64 * (rtbc::decision_bound(cfg) + w)
}

/// Bound from atomic broadcast to atomic delivery at every correct process,
/// and the minimum spacing between two broadcasts of one process.
pub fn delivery_bound(cfg: &ProtocolConfig) -> Span {
    cfg.delivery_bound() + propose_bound(cfg)
}

struct Pending {
    origin: ProcessId,
    seq: u64,
    payload: Bytes,
    since: Time,
}

/// Per-process atomic broadcast state.
pub struct AtomicApp {
    n: usize,
    wait: Span,
    join_after: Span,
    spacing: Span,
    ic: IcEngine,
    unordered: Vec<VecDeque<Queued>>,
    next: Vec<u64>,
    seq: u64,
    delivered: BTreeSet<Queued>,
    position: u64,
    busy: bool,
    inst: u64,
    out_of_order: Vec<Pending>,
    retry_armed: bool,
    early: BTreeMap<u64, (Decision, Time)>,
    last_broadcast: Option<Time>,
}

impl AtomicApp {
    pub fn new(me: ProcessId, cfg: &ProtocolConfig, keys: Rc<KeyRing>) -> Self {
        AtomicApp {
            n: cfg.n,
            wait: retry_wait(cfg),
            join_after: cfg.delivery_bound(),
            spacing: delivery_bound(cfg),
            ic: IcEngine::new(me, cfg, keys),
            unordered: vec![VecDeque::new(); cfg.n],
            next: vec![0; cfg.n],
            seq: 0,
            delivered: BTreeSet::new(),
            position: 0,
            busy: false,
            inst: 0,
            out_of_order: Vec::new(),
            retry_armed: false,
            early: BTreeMap::new(),
            last_broadcast: None,
        }
    }

    pub fn instance(&self) -> u64 {
        self.inst
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    pub fn next_expected(&self, origin: ProcessId) -> u64 {
        self.next[origin.index()]
    }

    pub fn queued(&self, origin: ProcessId) -> usize {
        self.unordered[origin.index()].len()
    }

    pub fn delivered_count(&self) -> usize {
        self.delivered.len()
    }

    fn broadcast(&mut self, payload: Bytes, now: Time, ctx: &mut AppCtx) {
        if let Some(prev) = self.last_broadcast {
            if now < prev + self.spacing {
                ctx.events.push(AppEvent::Warning(format!(
                    "atomic broadcasts {}us apart, assumed at least {}us",
                    now - prev,
                    self.spacing
                )));
            }
        }
        self.last_broadcast = Some(now);
        let seq = self.seq;
        self.seq += 1;
        ctx.broadcasts.push(
            AtomicMsg {
                seq,
                payload: payload.clone(),
            }
            .encode(),
        );
        ctx.events.push(AppEvent::AtomicBroadcast { seq, payload });
    }

    /// Takes a reliably delivered atomic message in origin order. Returns
    /// false if it has to wait for an earlier one.
    fn take(&mut self, origin: ProcessId, seq: u64, payload: &Bytes) -> bool {
        let next = &mut self.next[origin.index()];
        if seq < *next {
            return true;
        }
        if seq > *next {
            return false;
        }
        *next += 1;
        let q = Queued {
            origin,
            seq,
            payload: payload.clone(),
        };
        if !self.delivered.contains(&q) {
            self.unordered[origin.index()].push_back(q);
        }
        true
    }

    fn on_atomic(&mut self, origin: ProcessId, msg: AtomicMsg, now: Time, ctx: &mut AppCtx) {
        if !self.take(origin, msg.seq, &msg.payload) {
            self.out_of_order.push(Pending {
                origin,
                seq: msg.seq,
                payload: msg.payload,
                since: now,
            });
            self.arm_retry(now, ctx);
            return;
        }
        self.maybe_start(now, ctx);
    }

    fn arm_retry(&mut self, now: Time, ctx: &mut AppCtx) {
        if !self.retry_armed {
            self.retry_armed = true;
            ctx.timers
                .push((now + self.wait, AppTimer::AtomicRetryDeliver));
        }
    }

    fn retry_out_of_order(&mut self, now: Time, ctx: &mut AppCtx) {
        self.retry_armed = false;
        let mut waiting = std::mem::take(&mut self.out_of_order);
        waiting.sort_by_key(|p| (p.origin, p.seq));
        for p in waiting {
            if self.take(p.origin, p.seq, &p.payload) {
                continue;
            }
            if now > p.since + self.spacing {
                ctx.events.push(AppEvent::Violation(format!(
                    "atomic message {}#{} waited past {}us for its predecessor",
                    p.origin, p.seq, self.spacing
                )));
                continue;
            }
            self.out_of_order.push(p);
        }
        if !self.out_of_order.is_empty() {
            self.arm_retry(now, ctx);
        }
        self.maybe_start(now, ctx);
    }

    fn maybe_start(&mut self, now: Time, ctx: &mut AppCtx) {
        if self.busy || self.unordered.iter().all(VecDeque::is_empty) {
            return;
        }
        self.start_instance(now, ctx);
    }

    fn start_instance(&mut self, now: Time, ctx: &mut AppCtx) {
        let inst = self.inst;
        let value = self.unordered[leader(inst, self.n).index()]
            .front()
            .map(Queued::encode);
        self.busy = true;
        match self.ic.propose(inst, value.clone(), now, ctx) {
            Ok(()) => ctx.events.push(AppEvent::Proposed {
                instance: inst,
                value,
            }),
            Err(e) => ctx.events.push(AppEvent::Violation(format!("atomic: {e}"))),
        }
    }

    fn on_ic(&mut self, relayer: ProcessId, msg: IcMsg, now: Time, ctx: &mut AppCtx) {
        match self.ic.on_message(relayer, msg, now, ctx) {
            Ok(IcInput::Buffered(inst)) if inst == self.inst && !self.busy => {
                ctx.timers
                    .push((now + self.join_after, AppTimer::AtomicJoin(inst)));
            }
            Ok(_) => {}
            Err(e) => ctx
                .events
                .push(AppEvent::Warning(format!("rejected consensus input: {e}"))),
        }
    }

    fn on_decision(&mut self, d: Decision, now: Time, ctx: &mut AppCtx) {
        ctx.events.push(AppEvent::Decided {
            instance: d.inst,
            value: d.value.clone(),
            vector: d.vector.clone(),
        });
        self.apply_decision(d, now, now, ctx);
    }

    /// `first` is when the decision was first seen.
    fn apply_decision(&mut self, d: Decision, first: Time, now: Time, ctx: &mut AppCtx) {
        if d.inst != self.inst {
            let inst = d.inst;
            if now > first + self.spacing {
                ctx.events.push(AppEvent::Violation(format!(
                    "decision of instance {inst} never became current"
                )));
                return;
            }
            self.early.insert(inst, (d, first));
            ctx.timers
                .push((now + self.wait, AppTimer::AtomicRetryDecide(inst)));
            return;
        }
        let lead = leader(d.inst, self.n);
        if let Some(q) = d.value.and_then(|v| Queued::decode(v).ok()) {
            self.unordered[lead.index()].retain(|x| *x != q);
            if self.delivered.insert(q.clone()) {
                ctx.events.push(AppEvent::AtomicDelivered {
                    position: self.position,
                    instance: d.inst,
                    leader: lead,
                    origin: q.origin,
                    seq: q.seq,
                    payload: q.payload,
                });
                self.position += 1;
            }
        }
        self.inst += 1;
        self.busy = false;
        self.maybe_start(now, ctx);
        if !self.busy && self.ic.has_buffered(self.inst) {
            ctx.timers
                .push((now + self.join_after, AppTimer::AtomicJoin(self.inst)));
        }
    }
}

impl Application for AtomicApp {
    fn on_deliver(&mut self, d: &Delivery, now: Time, ctx: &mut AppCtx) {
        match d.value.first() {
            Some(&ATOMIC_TAG) => match AtomicMsg::decode(d.value.clone()) {
                Ok(m) => self.on_atomic(d.id.origin, m, now, ctx),
                Err(e) => ctx
                    .events
                    .push(AppEvent::Warning(format!("rejected atomic input: {e}"))),
            },
            Some(&IC_TAG) => match IcMsg::decode(d.value.clone()) {
                Ok(m) => self.on_ic(d.id.origin, m, now, ctx),
                Err(e) => ctx
                    .events
                    .push(AppEvent::Warning(format!("rejected consensus input: {e}"))),
            },
            _ => {}
        }
    }

    fn on_command(&mut self, cmd: Command, now: Time, ctx: &mut AppCtx) {
        if let Command::AtomicBroadcast(payload) = cmd {
            self.broadcast(payload, now, ctx);
        }
    }

    fn on_timer(&mut self, timer: AppTimer, now: Time, ctx: &mut AppCtx) {
        match timer {
            AppTimer::ConsensusFinalize(inst) => {
                if let Some(d) = self.ic.finalize(inst, now) {
                    self.on_decision(d, now, ctx);
                }
            }
            AppTimer::AtomicRetryDeliver => self.retry_out_of_order(now, ctx),
            AppTimer::AtomicRetryDecide(inst) => {
                if let Some((d, first)) = self.early.remove(&inst) {
                    self.apply_decision(d, first, now, ctx);
                }
            }
            AppTimer::AtomicJoin(inst) => {
                if inst == self.inst && !self.busy && self.ic.has_buffered(inst) {
                    self.start_instance(now, ctx);
                }
            }
        }
    }

    fn on_resume(&mut self, completed: &[(BroadcastId, Bytes)], _now: Time, _ctx: &mut AppCtx) {
        for (id, value) in completed {
            if let Ok(m) = AtomicMsg::decode(value.clone()) {
                let next = &mut self.next[id.origin.index()];
                *next = (*next).max(m.seq + 1);
            }
        }
    }
}
