//! Reliable broadcast with timed echo and deliver phases.
//!
//! A process echoes the first value it sees for an instance, collecting echo
//! signatures, and moves to the deliver phase once more than 2f processes
//! signed. Each phase is diffused for a bounded number of repetitions; missing
//! a quorum within its timeout sends the process to passive mode.

use std::collections::BTreeMap;
use std::rc::Rc;

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::crypto::{payload_digest, KeyRing, PayloadKind, RejectReason, SignatureSet, SignerMask};
use crate::model::{quorum_size, BroadcastId, ProcessId, ProtocolConfig, Span, Time};
use crate::wire::{DeliverMsg, EchoMsg, InstanceMsg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Echo,
    Deliver,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BrbTimer {
    Diffuse { id: BroadcastId, epoch: u32 },
    EchoTimeout(BroadcastId),
    DeliverTimeout(BroadcastId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub id: BroadcastId,
    pub value: Bytes,
    /// At least 2f + 1 echo signatures on the value.
    pub proof: Rc<SignatureSet>,
    pub at: Time,
}

#[derive(Clone, Debug)]
pub enum BrbAction {
    Send {
        targets: Vec<ProcessId>,
        msg: InstanceMsg,
    },
    Schedule {
        at: Time,
        timer: BrbTimer,
    },
    Deliver(Delivery),
}

#[derive(Debug, Default)]
pub struct BrbOutput {
    pub actions: Vec<BrbAction>,
    /// Signature verifications performed while producing these actions.
    pub verifications: usize,
}

impl BrbOutput {
    fn schedule(&mut self, at: Time, timer: BrbTimer) {
        self.actions.push(BrbAction::Schedule { at, timer });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeoutVerdict {
    Quiet,
    /// The quorum was not reached in time.
    Passive,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BroadcastError {
    #[error("cannot broadcast while passive")]
    Passive,
    #[error("instance {0} already exists")]
    DuplicateInstance(BroadcastId),
}

#[derive(Clone, Copy, Debug)]
struct Diffusion {
    phase: Phase,
    epoch: u32,
    remaining: u64,
}

#[derive(Debug)]
struct Instance {
    value: Bytes,
    digest_echo: u64,
    digest_deliver: u64,
    echo: Rc<SignatureSet>,
    /// Echo quorum carried in our deliver messages.
    echo_proof: Option<Rc<SignatureSet>>,
    deliver: Option<Rc<SignatureSet>>,
    quorum_reached: bool,
    lie: bool,
    app_delivered: bool,
    completed_passive: bool,
    /// Peers known to hold an echo quorum; skipped when diffusing echoes.
    skip_echo: SignerMask,
    /// Peers known to hold a deliver quorum; skipped when diffusing delivers.
    skip_deliver: SignerMask,
    epoch: u32,
    diffusion: Option<Diffusion>,
}

impl Instance {
    fn new(id: BroadcastId, value: Bytes, echo: SignatureSet) -> Self {
        Instance {
            digest_echo: payload_digest(PayloadKind::Echo, id, &value),
            digest_deliver: payload_digest(PayloadKind::Deliver, id, &value),
            value,
            echo: Rc::new(echo),
            echo_proof: None,
            deliver: None,
            quorum_reached: false,
            lie: false,
            app_delivered: false,
            completed_passive: false,
            skip_echo: SignerMask::EMPTY,
            skip_deliver: SignerMask::EMPTY,
            epoch: 0,
            diffusion: None,
        }
    }

    fn replace_value(&mut self, id: BroadcastId, value: Bytes, echo: SignatureSet) {
        self.digest_echo = payload_digest(PayloadKind::Echo, id, &value);
        self.digest_deliver = payload_digest(PayloadKind::Deliver, id, &value);
        self.value = value;
        self.echo = Rc::new(echo);
        self.skip_echo = SignerMask::EMPTY;
    }
}

/// Read-only snapshot of one instance, for tests and metrics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceView {
    pub value: Bytes,
    pub echo_sigs: usize,
    pub deliver_sigs: Option<usize>,
    pub lie: bool,
    pub app_delivered: bool,
    pub diffusing: Option<Phase>,
}

pub struct BroadcastLayer {
    me: ProcessId,
    n: usize,
    f: usize,
    fanout: usize,
    reps: u64,
    round: Span,
    delay: Span,
    keys: Rc<KeyRing>,
    instances: BTreeMap<BroadcastId, Instance>,
    next_seq: u64,
}

impl BroadcastLayer {
    pub fn new(me: ProcessId, cfg: &ProtocolConfig, keys: Rc<KeyRing>) -> Self {
        BroadcastLayer {
            me,
            n: cfg.n,
            f: cfg.f,
            fanout: cfg.fanout,
            reps: cfg.reps(),
            round: cfg.round,
            delay: cfg.link_delay,
            keys,
            instances: BTreeMap::new(),
            next_seq: 0,
        }
    }

    fn quorum(&self) -> usize {
        quorum_size(self.f)
    }

    /// Broadcasts `value` under the next unused sequence number.
    pub fn broadcast(
        &mut self,
        value: Bytes,
        now: Time,
        active: bool,
        out: &mut BrbOutput,
    ) -> Result<BroadcastId, BroadcastError> {
        let seq = self.next_seq;
        self.broadcast_as(seq, value, now, active, out)
    }

    pub fn broadcast_as(
        &mut self,
        seq: u64,
        value: Bytes,
        now: Time,
        active: bool,
        out: &mut BrbOutput,
    ) -> Result<BroadcastId, BroadcastError> {
        if !active {
            return Err(BroadcastError::Passive);
        }
        let id = BroadcastId::new(self.me, seq);
        if self.instances.contains_key(&id) {
            return Err(BroadcastError::DuplicateInstance(id));
        }
        self.next_seq = self.next_seq.max(seq + 1);
        let mut inst = Instance::new(id, value, SignatureSet::new());
        let own = self.keys.sign_digest(self.me, inst.digest_echo);
        Rc::make_mut(&mut inst.echo).insert(own);
        let echoes = inst.echo.len();
        self.instances.insert(id, inst);
        out.schedule(now + self.round, BrbTimer::EchoTimeout(id));
        if echoes > 2 * self.f {
            let proof = self.instances[&id].echo.clone();
            self.instances.get_mut(&id).unwrap().quorum_reached = true;
            self.deliver_msg(id, proof, now, active, out);
        } else {
            self.start_diffusion(id, Phase::Echo, now, out);
        }
        Ok(id)
    }

    pub fn on_echo(
        &mut self,
        from: ProcessId,
        msg: &EchoMsg,
        now: Time,
        active: bool,
        out: &mut BrbOutput,
    ) -> Result<(), RejectReason> {
        let id = msg.id;
        if !msg.sigs.contains(id.origin) {
            return Err(RejectReason::MissingSenderSig);
        }
        let q = self.quorum();
        let f = self.f;
        let Some(inst) = self.instances.get_mut(&id) else {
            let mut inst = Instance::new(id, msg.value.clone(), (*msg.sigs).clone());
            out.verifications +=
                self.keys
                    .verify_subset(&msg.sigs, inst.digest_echo, msg.sigs.mask())?;
            let own = self.keys.sign_digest(self.me, inst.digest_echo);
            Rc::make_mut(&mut inst.echo).insert(own);
            if msg.sigs.len() >= q {
                inst.skip_echo.insert(from);
            }
            let reached = inst.echo.len() > 2 * f;
            inst.quorum_reached = reached;
            let proof = inst.echo.clone();
            self.instances.insert(id, inst);
            if reached {
                self.deliver_msg(id, proof, now, active, out);
            } else {
                out.schedule(now + self.round, BrbTimer::EchoTimeout(id));
                self.start_diffusion(id, Phase::Echo, now, out);
            }
            return Ok(());
        };

        if inst.value == msg.value {
            if msg.sigs.len() >= q {
                inst.skip_echo.insert(from);
            }
            let fresh = msg.sigs.mask().minus(inst.echo.mask());
            if fresh.is_empty() {
                return Ok(());
            }
            out.verifications += self
                .keys
                .verify_subset(&msg.sigs, inst.digest_echo, fresh)?;
            Rc::make_mut(&mut inst.echo).merge(&msg.sigs);
            if !inst.quorum_reached && inst.echo.len() > 2 * f {
                inst.quorum_reached = true;
                let proof = inst.echo.clone();
                self.deliver_msg(id, proof, now, active, out);
            }
            return Ok(());
        }

        // A second value for the same instance: the originator lied.
        let digest = payload_digest(PayloadKind::Echo, id, &msg.value);
        out.verifications +=
            self.keys
                .verify_subset(&msg.sigs, digest, SignerMask::single(id.origin))?;
        inst.lie = true;
        if msg.sigs.len() > 2 * f && inst.deliver.is_none() {
            out.verifications += self
                .keys
                .verify_subset(&msg.sigs, digest, msg.sigs.mask())?;
            inst.replace_value(id, msg.value.clone(), (*msg.sigs).clone());
            inst.skip_echo.insert(from);
            inst.quorum_reached = true;
            let proof = inst.echo.clone();
            self.deliver_msg(id, proof, now, active, out);
        }
        Ok(())
    }

    pub fn on_deliver(
        &mut self,
        from: ProcessId,
        msg: &DeliverMsg,
        now: Time,
        active: bool,
        out: &mut BrbOutput,
    ) -> Result<(), RejectReason> {
        let id = msg.id;
        if !msg.echo_sigs.contains(id.origin) {
            return Err(RejectReason::MissingSenderSig);
        }
        let q = self.quorum();
        if msg.echo_sigs.len() < q {
            return Err(RejectReason::SubQuorumDeliver {
                got: msg.echo_sigs.len(),
                need: q,
            });
        }
        let proven = SignerMask::single(from).union(msg.deliver_sigs.mask());

        if let Some(inst) = self.instances.get_mut(&id) {
            if let Some(mine) = inst.deliver.as_ref().map(|d| d.mask()) {
                if inst.value != msg.value {
                    inst.lie = true;
                    return Ok(());
                }
                inst.skip_echo = inst.skip_echo.union(proven);
                if msg.deliver_sigs.len() >= q {
                    inst.skip_deliver.insert(from);
                }
                let fresh = msg.deliver_sigs.mask().minus(mine);
                if fresh.is_empty() {
                    return Ok(());
                }
                out.verifications +=
                    self.keys
                        .verify_subset(&msg.deliver_sigs, inst.digest_deliver, fresh)?;
                if let Some(d) = inst.deliver.as_mut() {
                    Rc::make_mut(d).merge(&msg.deliver_sigs);
                }
                return Ok(());
            }
        }

        // First deliver message for an instance we have not delivered.
        let existing = self.instances.get(&id);
        let same_value = existing.is_some_and(|i| i.value == msg.value);
        let (de, dd) = match existing {
            Some(i) if same_value => (i.digest_echo, i.digest_deliver),
            _ => (
                payload_digest(PayloadKind::Echo, id, &msg.value),
                payload_digest(PayloadKind::Deliver, id, &msg.value),
            ),
        };
        let known = if same_value {
            existing.unwrap().echo.mask()
        } else {
            SignerMask::EMPTY
        };
        out.verifications +=
            self.keys
                .verify_subset(&msg.echo_sigs, de, msg.echo_sigs.mask().minus(known))?;
        out.verifications +=
            self.keys
                .verify_subset(&msg.deliver_sigs, dd, msg.deliver_sigs.mask())?;

        match self.instances.get_mut(&id) {
            Some(inst) if same_value => {
                Rc::make_mut(&mut inst.echo).merge(&msg.echo_sigs);
            }
            Some(inst) => {
                inst.lie = true;
                inst.replace_value(id, msg.value.clone(), (*msg.echo_sigs).clone());
            }
            None => {
                let inst = Instance::new(id, msg.value.clone(), (*msg.echo_sigs).clone());
                self.instances.insert(id, inst);
            }
        }
        let inst = self.instances.get_mut(&id).unwrap();
        inst.quorum_reached = true;
        inst.skip_echo = inst.skip_echo.union(proven);
        if msg.deliver_sigs.len() >= q {
            inst.skip_deliver.insert(from);
        }
        self.deliver_msg(id, msg.echo_sigs.clone(), now, active, out);
        let inst = self.instances.get_mut(&id).unwrap();
        Rc::make_mut(inst.deliver.as_mut().unwrap()).merge(&msg.deliver_sigs);
        Ok(())
    }

    fn deliver_msg(
        &mut self,
        id: BroadcastId,
        proof: Rc<SignatureSet>,
        now: Time,
        active: bool,
        out: &mut BrbOutput,
    ) {
        let round = self.round;
        let inst = self.instances.get_mut(&id).expect("instance exists");
        if inst.deliver.is_none() {
            if active {
                inst.app_delivered = true;
                out.actions.push(BrbAction::Deliver(Delivery {
                    id,
                    value: inst.value.clone(),
                    proof: proof.clone(),
                    at: now,
                }));
            } else {
                inst.completed_passive = true;
            }
            let own = self.keys.sign_digest(self.me, inst.digest_deliver);
            inst.deliver = Some(Rc::new(SignatureSet::from_sig(own)));
            inst.echo_proof = Some(proof);
            out.schedule(now + 2 * round, BrbTimer::DeliverTimeout(id));
        }
        self.start_diffusion(id, Phase::Deliver, now, out);
    }

    fn start_diffusion(&mut self, id: BroadcastId, phase: Phase, now: Time, out: &mut BrbOutput) {
        let reps = match phase {
            Phase::Echo => self.reps,
            Phase::Deliver => 2 * self.reps,
        };
        let inst = self.instances.get_mut(&id).expect("instance exists");
        inst.epoch += 1;
        inst.diffusion = Some(Diffusion {
            phase,
            epoch: inst.epoch,
            remaining: reps,
        });
        out.schedule(
            now,
            BrbTimer::Diffuse {
                id,
                epoch: inst.epoch,
            },
        );
    }

    /// One repetition of an ongoing diffusion: picks up to X eligible targets
    /// and sends the current state of the instance.
    pub fn diffuse_step<R: Rng>(
        &mut self,
        id: BroadcastId,
        epoch: u32,
        now: Time,
        rng: &mut R,
        out: &mut BrbOutput,
    ) {
        let (me, n, fanout, delay) = (self.me, self.n, self.fanout, self.delay);
        let Some(inst) = self.instances.get_mut(&id) else {
            return;
        };
        let Some(diff) = inst.diffusion.as_mut() else {
            return;
        };
        if diff.epoch != epoch || diff.remaining == 0 {
            return;
        }
        diff.remaining -= 1;
        let phase = diff.phase;
        let more = diff.remaining > 0;
        let (skip, msg) = match phase {
            Phase::Echo => (
                inst.skip_echo,
                InstanceMsg::Echo(EchoMsg {
                    id,
                    value: inst.value.clone(),
                    sigs: inst.echo.clone(),
                }),
            ),
            Phase::Deliver => (
                inst.skip_deliver,
                InstanceMsg::Deliver(DeliverMsg {
                    id,
                    value: inst.value.clone(),
                    echo_sigs: inst.echo_proof.clone().expect("deliver phase has a proof"),
                    deliver_sigs: inst.deliver.clone().expect("deliver phase has signatures"),
                }),
            ),
        };
        if !more {
            inst.diffusion = None;
        }
        let targets = pick_targets(me, n, fanout, skip, rng);
        out.actions.push(BrbAction::Send { targets, msg });
        if more {
            out.schedule(now + delay, BrbTimer::Diffuse { id, epoch });
        }
    }

    pub fn on_timeout(&self, timer: BrbTimer) -> TimeoutVerdict {
        let f = self.f;
        let starved = match timer {
            BrbTimer::EchoTimeout(id) => self
                .instances
                .get(&id)
                .is_some_and(|i| i.echo.len() <= 2 * f && !i.lie),
            BrbTimer::DeliverTimeout(id) => self
                .instances
                .get(&id)
                .and_then(|i| i.deliver.as_ref())
                .is_some_and(|d| d.len() <= 2 * f),
            BrbTimer::Diffuse { .. } => false,
        };
        if starved {
            TimeoutVerdict::Passive
        } else {
            TimeoutVerdict::Quiet
        }
    }

    /// Instances that completed while this process was passive and were never
    /// handed to the application. Each is reported once.
    pub fn take_completed_while_passive(&mut self) -> Vec<(BroadcastId, Bytes)> {
        let mut done = Vec::new();
        for (id, inst) in self.instances.iter_mut() {
            if inst.completed_passive {
                inst.completed_passive = false;
                done.push((*id, inst.value.clone()));
            }
        }
        done
    }

    pub fn instance(&self, id: BroadcastId) -> Option<InstanceView> {
        self.instances.get(&id).map(|i| InstanceView {
            value: i.value.clone(),
            echo_sigs: i.echo.len(),
            deliver_sigs: i.deliver.as_ref().map(|d| d.len()),
            lie: i.lie,
            app_delivered: i.app_delivered,
            diffusing: i.diffusion.map(|d| d.phase),
        })
    }

    /// Whether any instance is currently diffusing.
    pub fn is_diffusing(&self) -> bool {
        self.instances.values().any(|i| i.diffusion.is_some())
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }
}

/// Up to `fanout` distinct peers chosen uniformly from those not in `skip`.
pub fn pick_targets<R: Rng>(
    me: ProcessId,
    n: usize,
    fanout: usize,
    skip: SignerMask,
    rng: &mut R,
) -> Vec<ProcessId> {
    let excluded = skip.union(SignerMask::single(me));
    let pool: Vec<ProcessId> = (0..n)
        .map(ProcessId::from_index)
        .filter(|p| !excluded.contains(*p))
        .collect();
    pool.choose_multiple(rng, fanout).copied().collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    struct Net {
        cfg: ProtocolConfig,
        keys: Rc<KeyRing>,
        layers: Vec<BroadcastLayer>,
    }

    impl Net {
        fn new(n: usize, f: usize) -> Self {
            let cfg = ProtocolConfig::new(n, f);
            let keys = Rc::new(KeyRing::new(n, 11));
            let layers = (0..n)
                .map(|i| BroadcastLayer::new(ProcessId::from_index(i), &cfg, keys.clone()))
                .collect();
            Net { cfg, keys, layers }
        }

        fn sig(
            &self,
            signer: u16,
            kind: PayloadKind,
            id: BroadcastId,
            v: &[u8],
        ) -> crate::crypto::Signature {
            self.keys.sign(ProcessId(signer), kind, id, v)
        }

        fn echo(&self, id: BroadcastId, v: &'static [u8], signers: &[u16]) -> EchoMsg {
            EchoMsg {
                id,
                value: Bytes::from_static(v),
                sigs: Rc::new(
                    signers
                        .iter()
                        .map(|&s| self.sig(s, PayloadKind::Echo, id, v))
                        .collect(),
                ),
            }
        }
    }

    fn delivered(out: &BrbOutput) -> Vec<&Delivery> {
        out.actions
            .iter()
            .filter_map(|a| match a {
                BrbAction::Deliver(d) => Some(d),
                _ => None,
            })
            .collect()
    }

    fn sends(out: &BrbOutput) -> usize {
        out.actions
            .iter()
            .filter(|a| {
                matches!(
                    a,
                    BrbAction::Schedule {
                        timer: BrbTimer::Diffuse { .. },
                        ..
                    }
                )
            })
            .count()
    }

    #[test]
    fn broadcast_starts_echo_phase() {
        let mut net = Net::new(4, 1);
        let mut out = BrbOutput::default();
        let id = net.layers[0]
            .broadcast(Bytes::from_static(b"v"), 0, true, &mut out)
            .unwrap();
        assert_eq!(id, BroadcastId::new(ProcessId(0), 0));
        let view = net.layers[0].instance(id).unwrap();
        assert_eq!(view.echo_sigs, 1);
        assert_eq!(view.diffusing, Some(Phase::Echo));
        assert!(out.actions.iter().any(|a| matches!(
            a,
            BrbAction::Schedule {
                at: 8_000,
                timer: BrbTimer::EchoTimeout(_)
            }
        )));
        assert_eq!(
            net.layers[0].broadcast_as(0, Bytes::new(), 0, true, &mut out),
            Err(BroadcastError::DuplicateInstance(id))
        );
        assert_eq!(
            net.layers[1].broadcast(Bytes::new(), 0, false, &mut out),
            Err(BroadcastError::Passive)
        );
    }

    #[test]
    fn first_echo_adds_own_signature() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(0), 0);
        let m = net.echo(id, b"v", &[0]);
        let mut out = BrbOutput::default();
        net.layers[1]
            .on_echo(ProcessId(0), &m, 10, true, &mut out)
            .unwrap();
        let view = net.layers[1].instance(id).unwrap();
        assert_eq!(view.echo_sigs, 2);
        assert_eq!(view.diffusing, Some(Phase::Echo));
        assert!(delivered(&out).is_empty());
        assert_eq!(out.verifications, 1);
    }

    #[test]
    fn echo_quorum_delivers_once() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(0), 0);
        let mut out = BrbOutput::default();
        let m = net.echo(id, b"v", &[0]);
        net.layers[1]
            .on_echo(ProcessId(0), &m, 0, true, &mut out)
            .unwrap();
        let m = net.echo(id, b"v", &[0, 2]);
        net.layers[1]
            .on_echo(ProcessId(2), &m, 5, true, &mut out)
            .unwrap();
        assert_eq!(delivered(&out).len(), 1);
        assert_eq!(delivered(&out)[0].at, 5);
        let view = net.layers[1].instance(id).unwrap();
        assert_eq!(view.diffusing, Some(Phase::Deliver));
        assert_eq!(view.deliver_sigs, Some(1));
        let m = net.echo(id, b"v", &[0, 2, 3]);
        net.layers[1]
            .on_echo(ProcessId(3), &m, 6, true, &mut out)
            .unwrap();
        assert_eq!(delivered(&out).len(), 1);
    }

    #[test]
    fn known_signatures_are_not_reverified() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(0), 0);
        let mut out = BrbOutput::default();
        let m = net.echo(id, b"v", &[0]);
        net.layers[2]
            .on_echo(ProcessId(0), &m, 0, true, &mut out)
            .unwrap();
        let before = out.verifications;
        net.layers[2]
            .on_echo(ProcessId(1), &m, 1, true, &mut out)
            .unwrap();
        assert_eq!(out.verifications, before);
        assert_eq!(sends(&out), 1);
    }

    #[test]
    fn second_value_marks_lie_without_delivering() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(3), 0);
        let mut out = BrbOutput::default();
        let m = net.echo(id, b"a", &[3]);
        net.layers[0]
            .on_echo(ProcessId(3), &m, 0, true, &mut out)
            .unwrap();
        let m = net.echo(id, b"b", &[3, 1]);
        net.layers[0]
            .on_echo(ProcessId(1), &m, 1, true, &mut out)
            .unwrap();
        let view = net.layers[0].instance(id).unwrap();
        assert!(view.lie);
        assert_eq!(view.value.as_ref(), b"a");
        assert!(delivered(&out).is_empty());
        assert_eq!(
            net.layers[0].on_timeout(BrbTimer::EchoTimeout(id)),
            TimeoutVerdict::Quiet
        );
    }

    #[test]
    fn quorum_for_other_value_overrides() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(3), 0);
        let mut out = BrbOutput::default();
        let m = net.echo(id, b"a", &[3]);
        net.layers[0]
            .on_echo(ProcessId(3), &m, 0, true, &mut out)
            .unwrap();
        let m = net.echo(id, b"b", &[3, 1, 2]);
        net.layers[0]
            .on_echo(ProcessId(1), &m, 1, true, &mut out)
            .unwrap();
        let d = delivered(&out);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].value.as_ref(), b"b");
    }

    #[test]
    fn invalid_messages_are_rejected() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(0), 0);
        let mut out = BrbOutput::default();
        let no_origin = net.echo(id, b"v", &[1, 2]);
        assert_eq!(
            net.layers[3].on_echo(ProcessId(1), &no_origin, 0, true, &mut out),
            Err(RejectReason::MissingSenderSig)
        );
        let mut forged = net.echo(id, b"v", &[0, 1]);
        forged.value = Bytes::from_static(b"w");
        assert!(matches!(
            net.layers[3].on_echo(ProcessId(1), &forged, 0, true, &mut out),
            Err(RejectReason::BadSig(_))
        ));
        let thin = DeliverMsg {
            id,
            value: Bytes::from_static(b"v"),
            echo_sigs: net.echo(id, b"v", &[0, 1]).sigs,
            deliver_sigs: Rc::new(SignatureSet::new()),
        };
        assert_eq!(
            net.layers[3].on_deliver(ProcessId(1), &thin, 0, true, &mut out),
            Err(RejectReason::SubQuorumDeliver { got: 2, need: 3 })
        );
        assert!(net.layers[3].instance(id).is_none());
    }

    #[test]
    fn deliver_message_delivers_and_collects() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(0), 0);
        let mut out = BrbOutput::default();
        let dsig = |s: u16| net.sig(s, PayloadKind::Deliver, id, b"v");
        let m = DeliverMsg {
            id,
            value: Bytes::from_static(b"v"),
            echo_sigs: net.echo(id, b"v", &[0, 1, 2]).sigs,
            deliver_sigs: Rc::new([dsig(1), dsig(2)].into_iter().collect()),
        };
        net.layers[3]
            .on_deliver(ProcessId(1), &m, 3, true, &mut out)
            .unwrap();
        assert_eq!(delivered(&out).len(), 1);
        let view = net.layers[3].instance(id).unwrap();
        assert_eq!(view.deliver_sigs, Some(3));
        assert_eq!(
            net.layers[3].on_timeout(BrbTimer::DeliverTimeout(id)),
            TimeoutVerdict::Quiet
        );
    }

    #[test]
    fn passive_process_completes_without_delivering() {
        let mut net = Net::new(4, 1);
        let id = BroadcastId::new(ProcessId(0), 0);
        let mut out = BrbOutput::default();
        let m = net.echo(id, b"v", &[0, 2]);
        net.layers[1]
            .on_echo(ProcessId(0), &m, 0, false, &mut out)
            .unwrap();
        assert!(delivered(&out).is_empty());
        assert_eq!(
            net.layers[1].instance(id).unwrap().diffusing,
            Some(Phase::Deliver)
        );
        let done = net.layers[1].take_completed_while_passive();
        assert_eq!(done, vec![(id, Bytes::from_static(b"v"))]);
        assert!(net.layers[1].take_completed_while_passive().is_empty());
    }

    #[test]
    fn timeouts_detect_missing_quorum() {
        let mut net = Net::new(4, 1);
        let mut out = BrbOutput::default();
        let id = net.layers[0]
            .broadcast(Bytes::from_static(b"v"), 0, true, &mut out)
            .unwrap();
        assert_eq!(
            net.layers[0].on_timeout(BrbTimer::EchoTimeout(id)),
            TimeoutVerdict::Passive
        );
        let _ = net.cfg;
    }

    #[test]
    fn diffusion_runs_reps_times_then_stops() {
        let mut net = Net::new(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = BrbOutput::default();
        let id = net.layers[0]
            .broadcast(Bytes::from_static(b"v"), 0, true, &mut out)
            .unwrap();
        let mut now = 0;
        let mut sent = 0;
        loop {
            let mut step = BrbOutput::default();
            net.layers[0].diffuse_step(id, 1, now, &mut rng, &mut step);
            let s = step
                .actions
                .iter()
                .filter(|a| matches!(a, BrbAction::Send { .. }))
                .count();
            if s == 0 {
                break;
            }
            for a in &step.actions {
                if let BrbAction::Send { targets, .. } = a {
                    assert_eq!(targets.len(), 2);
                    assert!(!targets.contains(&ProcessId(0)));
                }
            }
            sent += s;
            now += 1_000;
        }
        assert_eq!(sent, 8);
        assert_eq!(net.layers[0].instance(id).unwrap().diffusing, None);
    }

    #[test]
    fn targets_respect_exclusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let skip: SignerMask = [1u16, 2].into_iter().map(ProcessId).collect();
        for _ in 0..100 {
            let t = pick_targets(ProcessId(0), 6, 2, skip, &mut rng);
            assert_eq!(t.len(), 2);
            assert!(t.iter().all(|p| p.0 >= 3));
        }
        let t = pick_targets(ProcessId(0), 4, 3, skip, &mut rng);
        assert_eq!(t, vec![ProcessId(3)]);
    }

    #[test]
    fn targets_are_uniform_over_eligible_peers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, fanout, draws) = (49usize, 17usize, 10_000u32);
        let skip: SignerMask = [5u16, 40].into_iter().map(ProcessId).collect();
        let mut hits = vec![0u32; n];
        for _ in 0..draws {
            let t = pick_targets(ProcessId(0), n, fanout, skip, &mut rng);
            assert_eq!(t.len(), fanout);
            for p in t {
                hits[p.index()] += 1;
            }
        }
        let eligible = (n - 3) as f64;
        let p = fanout as f64 / eligible;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (i, &h) in hits.iter().enumerate() {
            if i == 0 || i == 5 || i == 40 {
                assert_eq!(h, 0);
                continue;
            }
            assert!(
                (h as f64 - mean).abs() <= 4.0 * sigma,
                "peer {i}: {h} vs {mean}"
            );
            chi2 += (h as f64 - mean).powi(2) / mean;
        }
        // 45 degrees of freedom; 99.9th percentile is about 80.1.
        assert!(chi2 < 80.1, "chi2 = {chi2}");
    }
}
