//! Real-time consensus: signed-chain interactive consistency run entirely
//! over reliable broadcast, followed by the 2f+1-occurrence filter.
//!
//! Rounds are paced by a local clock started at the first propose or at the
//! first message of the instance, whichever comes first. A value with a
//! chain of `r + 1` distinct signers is accepted until the end of round `r`
//! and relayed with one more signature while the chain is shorter than
//! `f + 1`. After round `f` the vector is fixed.

use std::collections::BTreeMap;
use std::rc::Rc;

use bytes::Bytes;
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::crypto::{payload_digest, KeyRing, PayloadKind, Signature, SignerMask};
use crate::model::{BroadcastId, ProcessId, ProtocolConfig, Span, Time};
use crate::node::{AppCtx, AppEvent, AppTimer, Application, Command};
use crate::rtbrb::Delivery;

/// First byte of an encoded [`IcMsg`].
pub const IC_TAG: u8 = b'I';

/// Length of one round: a relay started at the very end of a round must be
/// delivered before the end of the next round at a process whose clock
/// started up to one delivery bound later.
pub fn round_length(cfg: &ProtocolConfig) -> Span {
    2 * cfg.delivery_bound() + cfg.link_delay
}

/// Number of rounds, `f + 1`.
pub fn rounds(cfg: &ProtocolConfig) -> u64 {
    cfg.f as u64 + 1
}

/// Time from starting an instance (proposing or joining) to finalizing it.
pub fn instance_length(cfg: &ProtocolConfig) -> Span {
    rounds(cfg) * round_length(cfg)
}

/// Latest decision of any correct process after the first correct proposal
/// (Δ_C): clocks start at most one delivery bound apart.
pub fn decision_bound(cfg: &ProtocolConfig) -> Span {
    cfg.delivery_bound() + instance_length(cfg)
}

/// Δ_C in units of `f + 1` delivery bounds.
pub fn multiplicity(cfg: &ProtocolConfig) -> f64 {
    decision_bound(cfg) as f64 / (rounds(cfg) * cfg.delivery_bound()) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("already proposed in instance {0}")]
    DuplicatePropose(u64),
    #[error("instance {0} already finalized")]
    Finalized(u64),
    #[error("relay chain is empty")]
    EmptyChain,
    #[error("relay chain does not start with the proposer")]
    WrongProposer,
    #[error("relay chain repeats signer {0}")]
    RepeatedSigner(ProcessId),
    #[error("relay chain does not end with the broadcaster")]
    WrongRelayer,
    #[error("bad signature by {0} in relay chain")]
    BadSignature(ProcessId),
    #[error("unknown process {0}")]
    UnknownProcess(ProcessId),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// A proposal for `inst` by `proposer`, with the chain of processes that
/// signed and relayed it. `value = None` is ⊥.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IcMsg {
    pub inst: u64,
    pub proposer: ProcessId,
    pub value: Option<Bytes>,
    pub chain: Vec<Signature>,
}

fn encode_value(w: &mut Writer, value: &Option<Bytes>) {
    match value {
        Some(v) => w.u8(1).bytes(v),
        None => w.u8(0),
    };
}

/// Digest every chain signature is taken over.
pub fn relay_digest(inst: u64, proposer: ProcessId, value: &Option<Bytes>) -> u64 {
    let mut w = Writer::new();
    encode_value(&mut w, value);
    payload_digest(
        PayloadKind::Relay,
        BroadcastId::new(proposer, inst),
        &w.finish(),
    )
}

impl IcMsg {
    /// A fresh proposal signed by its proposer.
    pub fn propose(keys: &KeyRing, inst: u64, proposer: ProcessId, value: Option<Bytes>) -> Self {
        let sig = keys.sign_digest(proposer, relay_digest(inst, proposer, &value));
        IcMsg {
            inst,
            proposer,
            value,
            chain: vec![sig],
        }
    }

    pub fn signers(&self) -> SignerMask {
        self.chain.iter().map(|s| s.signer).collect()
    }

    pub fn encode(&self) -> Bytes {
        let mut w = Writer::new();
        w.u8(IC_TAG).u64(self.inst).u16(self.proposer.0);
        encode_value(&mut w, &self.value);
        w.u16(self.chain.len() as u16);
        for s in &self.chain {
            w.u16(s.signer.0).u64(s.tag);
        }
        w.finish()
    }

    pub fn decode(buf: Bytes) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let tag = r.u8()?;
        if tag != IC_TAG {
            return Err(DecodeError::UnknownTag(tag));
        }
        let inst = r.u64()?;
        let proposer = ProcessId(r.u16()?);
        let value = match r.u8()? {
            0 => None,
            1 => Some(r.bytes()?),
            t => return Err(DecodeError::UnknownTag(t)),
        };
        let len = r.u16()? as usize;
        let mut chain = Vec::with_capacity(len);
        for _ in 0..len {
            let signer = ProcessId(r.u16()?);
            let tag = r.u64()?;
            chain.push(Signature { signer, tag });
        }
        r.finish()?;
        Ok(IcMsg {
            inst,
            proposer,
            value,
            chain,
        })
    }

    /// Checks chain shape and every signature. `relayer` is the process that
    /// reliably broadcast this message.
    pub fn validate(&self, keys: &KeyRing, relayer: ProcessId) -> Result<(), ConsensusError> {
        let first = self.chain.first().ok_or(ConsensusError::EmptyChain)?;
        if first.signer != self.proposer {
            return Err(ConsensusError::WrongProposer);
        }
        if self.chain.last().map(|s| s.signer) != Some(relayer) {
            return Err(ConsensusError::WrongRelayer);
        }
        let digest = relay_digest(self.inst, self.proposer, &self.value);
        let mut seen = SignerMask::EMPTY;
        for s in &self.chain {
            if s.signer.index() >= keys.len() {
                return Err(ConsensusError::UnknownProcess(s.signer));
            }
            if !seen.insert(s.signer) {
                return Err(ConsensusError::RepeatedSigner(s.signer));
            }
            if !keys.verify_digest(s, digest) {
                return Err(ConsensusError::BadSignature(s.signer));
            }
        }
        Ok(())
    }
}

/// Outcome of one instance at one process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    pub inst: u64,
    /// One slot per proposer: its value if exactly one was accepted, else ⊥.
    pub vector: Vec<Option<Bytes>>,
    /// The value filling at least 2f + 1 slots, else ⊥.
    pub value: Option<Bytes>,
    pub at: Time,
}

/// What happened to an incoming relay message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IcInput {
    /// Counted towards the instance (possibly relayed).
    Accepted,
    /// Valid but arrived after its round, or carried nothing new.
    Ignored,
    /// The instance has not started here; the message waits for `start`.
    Buffered(u64),
    /// The instance is already finalized.
    Late,
}

#[derive(Default)]
struct Instance {
    start: Option<Time>,
    proposed: bool,
    /// Distinct values accepted per proposer; two are enough to know the
    /// proposer equivocated.
    accepted: BTreeMap<ProcessId, Vec<Option<Bytes>>>,
    buffered: Vec<(Time, IcMsg)>,
}

/// Per-process interactive-consistency state, multiplexing instances.
pub struct IcEngine {
    me: ProcessId,
    n: usize,
    f: usize,
    round: Span,
    rounds: u64,
    keys: Rc<KeyRing>,
    open: BTreeMap<u64, Instance>,
    finalized: BTreeMap<u64, Decision>,
}

impl IcEngine {
    pub fn new(me: ProcessId, cfg: &ProtocolConfig, keys: Rc<KeyRing>) -> Self {
        IcEngine {
            me,
            n: cfg.n,
            f: cfg.f,
            round: round_length(cfg),
            rounds: rounds(cfg),
            keys,
            open: BTreeMap::new(),
            finalized: BTreeMap::new(),
        }
    }

    pub fn is_started(&self, inst: u64) -> bool {
        self.open.get(&inst).is_some_and(|i| i.start.is_some())
    }

    pub fn is_finalized(&self, inst: u64) -> bool {
        self.finalized.contains_key(&inst)
    }

    pub fn has_buffered(&self, inst: u64) -> bool {
        self.open
            .get(&inst)
            .is_some_and(|i| i.start.is_none() && !i.buffered.is_empty())
    }

    pub fn decision(&self, inst: u64) -> Option<&Decision> {
        self.finalized.get(&inst)
    }

    /// Starts the round clock of `inst` (idempotent) and processes messages
    /// that arrived before it.
    pub fn start(&mut self, inst: u64, now: Time, ctx: &mut AppCtx) {
        if self.is_finalized(inst) || self.is_started(inst) {
            return;
        }
        let entry = self.open.entry(inst).or_default();
        entry.start = Some(now);
        let buffered = std::mem::take(&mut entry.buffered);
        ctx.timers.push((
            now + self.rounds * self.round,
            AppTimer::ConsensusFinalize(inst),
        ));
        for (at, msg) in buffered {
            self.accept(msg, at, ctx);
        }
    }

    /// Proposes `value` (⊥ when `None`) and starts the instance if needed.
    pub fn propose(
        &mut self,
        inst: u64,
        value: Option<Bytes>,
        now: Time,
        ctx: &mut AppCtx,
    ) -> Result<(), ConsensusError> {
        if self.is_finalized(inst) {
            return Err(ConsensusError::Finalized(inst));
        }
        if self.open.get(&inst).is_some_and(|i| i.proposed) {
            return Err(ConsensusError::DuplicatePropose(inst));
        }
        self.start(inst, now, ctx);
        self.open.get_mut(&inst).expect("started").proposed = true;
        let msg = IcMsg::propose(&self.keys, inst, self.me, value);
        ctx.broadcasts.push(msg.encode());
        Ok(())
    }

    /// Handles a reliably delivered relay message from `relayer`.
    pub fn on_message(
        &mut self,
        relayer: ProcessId,
        msg: IcMsg,
        now: Time,
        ctx: &mut AppCtx,
    ) -> Result<IcInput, ConsensusError> {
        if msg.proposer.index() >= self.n {
            return Err(ConsensusError::UnknownProcess(msg.proposer));
        }
        msg.validate(&self.keys, relayer)?;
        ctx.verifications += msg.chain.len();
        if self.is_finalized(msg.inst) {
            return Ok(IcInput::Late);
        }
        let inst = msg.inst;
        let entry = self.open.entry(inst).or_default();
        if entry.start.is_none() {
            entry.buffered.push((now, msg));
            return Ok(IcInput::Buffered(inst));
        }
        Ok(self.accept(msg, now, ctx))
    }

    fn accept(&mut self, msg: IcMsg, at: Time, ctx: &mut AppCtx) -> IcInput {
        let inst = self
            .open
            .get_mut(&msg.inst)
            .expect("accepting into an open instance");
        let start = inst.start.expect("accepting into a started instance");
        let len = (msg.chain.len() as u64).min(self.rounds);
        if at > start + len * self.round {
            return IcInput::Ignored;
        }
        let values = inst.accepted.entry(msg.proposer).or_default();
        if values.len() >= 2 || values.contains(&msg.value) {
            return IcInput::Ignored;
        }
        values.push(msg.value.clone());
        if msg.chain.len() <= self.f && !msg.signers().contains(self.me) {
            let mut relay = msg;
            let digest = relay_digest(relay.inst, relay.proposer, &relay.value);
            relay.chain.push(self.keys.sign_digest(self.me, digest));
            ctx.broadcasts.push(relay.encode());
        }
        IcInput::Accepted
    }

    /// Fixes the vector of `inst` and applies the 2f+1 filter. Returns `None`
    /// if the instance never started or was already finalized.
    pub fn finalize(&mut self, inst: u64, now: Time) -> Option<Decision> {
        let state = self.open.remove(&inst)?;
        state.start?;
        let vector: Vec<Option<Bytes>> = (0..self.n)
            .map(|j| match state.accepted.get(&ProcessId::from_index(j)) {
                Some(vals) if vals.len() == 1 => vals[0].clone(),
                _ => None,
            })
            .collect();
        let value = decide(&vector, self.f);
        let d = Decision {
            inst,
            vector,
            value,
            at: now,
        };
        self.finalized.insert(inst, d.clone());
        Some(d)
    }
}

/// The non-⊥ value occurring at least 2f+1 times in `vector`, if any.
pub fn decide(vector: &[Option<Bytes>], f: usize) -> Option<Bytes> {
    let mut counts: BTreeMap<&Bytes, usize> = BTreeMap::new();
    for v in vector.iter().flatten() {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|(_, c)| *c > 2 * f)
        .map(|(v, _)| v.clone())
}

/// Application running standalone consensus instances on command.
pub struct ConsensusApp {
    engine: IcEngine,
}

impl ConsensusApp {
    pub fn new(me: ProcessId, cfg: &ProtocolConfig, keys: Rc<KeyRing>) -> Self {
        ConsensusApp {
            engine: IcEngine::new(me, cfg, keys),
        }
    }

    pub fn engine(&self) -> &IcEngine {
        &self.engine
    }
}

impl Application for ConsensusApp {
    fn on_deliver(&mut self, d: &Delivery, now: Time, ctx: &mut AppCtx) {
        if d.value.first() != Some(&IC_TAG) {
            return;
        }
        let res = IcMsg::decode(d.value.clone())
            .map_err(ConsensusError::from)
            .and_then(|m| self.engine.on_message(d.id.origin, m, now, ctx));
        match res {
            // Joining: the clock starts at the first message seen.
            Ok(IcInput::Buffered(inst)) => self.engine.start(inst, now, ctx),
            Ok(_) => {}
            // Only a Byzantine relayer can produce an invalid message.
            Err(e) => ctx
                .events
                .push(AppEvent::Warning(format!("rejected consensus input: {e}"))),
        }
    }

    fn on_command(&mut self, cmd: Command, now: Time, ctx: &mut AppCtx) {
        if let Command::Propose { instance, value } = cmd {
            match self.engine.propose(instance, value.clone(), now, ctx) {
                Ok(()) => ctx.events.push(AppEvent::Proposed { instance, value }),
                Err(e) => ctx
                    .events
                    .push(AppEvent::Violation(format!("consensus: {e}"))),
            }
        }
    }

    fn on_timer(&mut self, timer: AppTimer, now: Time, ctx: &mut AppCtx) {
        if let AppTimer::ConsensusFinalize(inst) = timer {
            if let Some(d) = self.engine.finalize(inst, now) {
                ctx.events.push(AppEvent::Decided {
                    instance: inst,
                    value: d.value,
                    vector: d.vector,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(s: &'static str) -> Option<Bytes> {
        Some(Bytes::from_static(s.as_bytes()))
    }

    fn cfg4() -> ProtocolConfig {
        ProtocolConfig::new(4, 1)
    }

    fn engines(cfg: &ProtocolConfig) -> (Rc<KeyRing>, Vec<IcEngine>) {
        let keys = Rc::new(KeyRing::new(cfg.n, 5));
        let e = (0..cfg.n)
            .map(|i| IcEngine::new(ProcessId::from_index(i), cfg, keys.clone()))
            .collect();
        (keys, e)
    }

    #[test]
    fn filter_needs_two_f_plus_one_occurrences() {
        assert_eq!(decide(&[b("v"), b("v"), b("v"), None], 1), b("v"));
        assert_eq!(decide(&[b("v"), b("v"), None, None], 1), None);
        assert_eq!(decide(&[b("v"), b("v"), b("w"), b("w")], 1), None);
        assert_eq!(decide(&[None, None, None, None], 1), None);
    }

    #[test]
    fn messages_roundtrip_and_validate() {
        let keys = KeyRing::new(4, 1);
        let mut m = IcMsg::propose(&keys, 7, ProcessId(2), b("x"));
        let d = relay_digest(7, ProcessId(2), &m.value);
        m.chain.push(keys.sign_digest(ProcessId(0), d));
        let back = IcMsg::decode(m.encode()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.validate(&keys, ProcessId(0)), Ok(()));
        assert_eq!(
            back.validate(&keys, ProcessId(2)),
            Err(ConsensusError::WrongRelayer)
        );
        let bot = IcMsg::propose(&keys, 0, ProcessId(1), None);
        assert_eq!(IcMsg::decode(bot.encode()).unwrap(), bot);
    }

    #[test]
    fn repeated_signer_is_rejected() {
        let keys = KeyRing::new(4, 1);
        let mut m = IcMsg::propose(&keys, 0, ProcessId(1), b("x"));
        m.chain.push(m.chain[0]);
        assert_eq!(
            m.validate(&keys, ProcessId(1)),
            Err(ConsensusError::RepeatedSigner(ProcessId(1)))
        );
    }

    #[test]
    fn forged_link_is_rejected() {
        let keys = KeyRing::new(4, 1);
        let mut m = IcMsg::propose(&keys, 0, ProcessId(1), b("x"));
        m.chain.push(Signature {
            signer: ProcessId(3),
            tag: 42,
        });
        assert_eq!(
            m.validate(&keys, ProcessId(3)),
            Err(ConsensusError::BadSignature(ProcessId(3)))
        );
    }

    #[test]
    fn second_propose_is_rejected() {
        let cfg = cfg4();
        let (_, mut e) = engines(&cfg);
        let mut ctx = AppCtx::default();
        e[0].propose(0, b("v"), 0, &mut ctx).unwrap();
        assert_eq!(
            e[0].propose(0, b("w"), 1, &mut ctx),
            Err(ConsensusError::DuplicatePropose(0))
        );
        assert_eq!(ctx.broadcasts.len(), 1);
        assert_eq!(
            ctx.timers,
            vec![(
                rounds(&cfg) * round_length(&cfg),
                AppTimer::ConsensusFinalize(0)
            )]
        );
    }

    /// Delivers every broadcast in `ctx` to every engine at `at`, repeatedly,
    /// as a lossless reliable broadcast would.
    fn flood(e: &mut [IcEngine], from: usize, ctx: AppCtx, at: Time) {
        let mut queue: Vec<(usize, Bytes)> =
            ctx.broadcasts.into_iter().map(|m| (from, m)).collect();
        while let Some((src, m)) = queue.pop() {
            for (i, eng) in e.iter_mut().enumerate() {
                let mut c = AppCtx::default();
                let msg = IcMsg::decode(m.clone()).unwrap();
                let r = eng
                    .on_message(ProcessId::from_index(src), msg, at, &mut c)
                    .unwrap();
                if let IcInput::Buffered(inst) = r {
                    eng.start(inst, at, &mut c);
                }
                queue.extend(c.broadcasts.into_iter().map(|m| (i, m)));
            }
        }
    }

    #[test]
    fn unanimous_proposals_are_decided() {
        let cfg = cfg4();
        let (_, mut e) = engines(&cfg);
        for i in 0..4 {
            let mut ctx = AppCtx::default();
            e[i].propose(0, b("v"), 0, &mut ctx).unwrap();
            flood(&mut e, i, ctx, 10);
        }
        let end = rounds(&cfg) * round_length(&cfg);
        for eng in &mut e {
            let d = eng.finalize(0, end).unwrap();
            assert_eq!(d.value, b("v"));
            assert_eq!(d.vector, vec![b("v"); 4]);
        }
    }

    #[test]
    fn split_proposals_decide_bottom() {
        let cfg = cfg4();
        let (_, mut e) = engines(&cfg);
        for (i, v) in [b("a"), b("a"), b("b"), b("b")].into_iter().enumerate() {
            let mut ctx = AppCtx::default();
            e[i].propose(0, v, 0, &mut ctx).unwrap();
            flood(&mut e, i, ctx, 10);
        }
        let end = rounds(&cfg) * round_length(&cfg);
        for eng in &mut e {
            assert_eq!(eng.finalize(0, end).unwrap().value, None);
        }
    }

    #[test]
    fn late_single_signature_value_is_ignored_but_relay_is_not() {
        let cfg = cfg4();
        let (keys, mut e) = engines(&cfg);
        let l = round_length(&cfg);
        let mut ctx = AppCtx::default();
        e[0].start(0, 0, &mut ctx);
        let late = IcMsg::propose(&keys, 0, ProcessId(3), b("x"));
        let r = e[0]
            .on_message(ProcessId(3), late.clone(), l + 1, &mut ctx)
            .unwrap();
        assert_eq!(r, IcInput::Ignored);
        let mut relayed = late;
        let d = relay_digest(0, ProcessId(3), &relayed.value);
        relayed.chain.push(keys.sign_digest(ProcessId(1), d));
        let r = e[0]
            .on_message(ProcessId(1), relayed, l + 1, &mut ctx)
            .unwrap();
        assert_eq!(r, IcInput::Accepted);
        // f = 1: a chain of length 2 is not relayed further.
        assert!(ctx.broadcasts.is_empty());
        let dec = e[0].finalize(0, 2 * l).unwrap();
        assert_eq!(dec.vector[3], b("x"));
    }

    #[test]
    fn two_values_from_one_proposer_leave_its_slot_bottom() {
        let cfg = cfg4();
        let (keys, mut e) = engines(&cfg);
        let mut ctx = AppCtx::default();
        e[0].start(0, 0, &mut ctx);
        for v in [b("x"), b("y"), b("z")] {
            let m = IcMsg::propose(&keys, 0, ProcessId(3), v);
            e[0].on_message(ProcessId(3), m, 5, &mut ctx).unwrap();
        }
        // Relays go out for the first two values only.
        assert_eq!(ctx.broadcasts.len(), 2);
        assert_eq!(e[0].finalize(0, 10).unwrap().vector[3], None);
    }

    #[test]
    fn zero_faults_means_one_round_and_no_relays() {
        let cfg = ProtocolConfig::new(3, 0);
        let (keys, mut e) = engines(&cfg);
        let mut ctx = AppCtx::default();
        e[0].propose(0, b("v"), 0, &mut ctx).unwrap();
        assert_eq!(rounds(&cfg), 1);
        let m = IcMsg::propose(&keys, 0, ProcessId(1), b("w"));
        let mut ctx = AppCtx::default();
        e[0].on_message(ProcessId(1), m, 3, &mut ctx).unwrap();
        assert!(ctx.broadcasts.is_empty());
    }

    #[test]
    fn messages_before_start_are_buffered_then_counted() {
        let cfg = cfg4();
        let (keys, mut e) = engines(&cfg);
        let mut ctx = AppCtx::default();
        let m = IcMsg::propose(&keys, 4, ProcessId(2), b("q"));
        assert_eq!(
            e[1].on_message(ProcessId(2), m, 100, &mut ctx),
            Ok(IcInput::Buffered(4))
        );
        assert!(e[1].has_buffered(4));
        e[1].start(4, 5_000, &mut ctx);
        assert!(!e[1].has_buffered(4));
        // Relayed once the clock runs.
        assert_eq!(ctx.broadcasts.len(), 1);
        let d = e[1].finalize(4, 5_000 + 2 * round_length(&cfg)).unwrap();
        assert_eq!(d.vector[2], b("q"));
        assert_eq!(
            e[1].on_message(
                ProcessId(2),
                IcMsg::propose(&keys, 4, ProcessId(2), b("q")),
                0,
                &mut ctx
            ),
            Ok(IcInput::Late)
        );
    }

    #[test]
    fn bounds_follow_round_structure() {
        let cfg = cfg4();
        assert_eq!(round_length(&cfg), 2 * 24_000 + 1_000);
        assert_eq!(instance_length(&cfg), 2 * 49_000);
        assert_eq!(decision_bound(&cfg), 24_000 + 2 * 49_000);
        assert!((multiplicity(&cfg) - 122.0 / 48.0).abs() < 1e-12);
    }
}
