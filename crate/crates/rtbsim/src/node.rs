//! A correct process: proof-of-connectivity, reliable broadcast, mode
//! tracking and an optional application layer, driven by discrete events.

use std::rc::Rc;

use bytes::Bytes;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;

use crate::crypto::{KeyRing, RejectReason, SignerMask};
use crate::model::{BroadcastId, ProcessId, ProtocolConfig, Span, Time};
use crate::poc::{PocState, RoundVerdict};
use crate::rtbrb::{
    BrbAction, BrbOutput, BrbTimer, BroadcastError, BroadcastLayer, Delivery, TimeoutVerdict,
};
use crate::wire::{HbBundle, InstanceMsg, Packet};

/// Relays of grown heartbeats are batched over `d / RELAY_BATCHES`.
pub const RELAY_BATCHES: Span = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Active,
    Passive { since: Time },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PassiveCause {
    Heartbeat { seq: u64, signers: usize },
    EchoTimeout(BroadcastId),
    DeliverTimeout(BroadcastId),
}

/// Timers owned by application layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppTimer {
    /// End of the last relay round of a consensus instance.
    ConsensusFinalize(u64),
    /// Atomic broadcast: re-trigger out-of-order broadcast deliveries.
    AtomicRetryDeliver,
    /// Atomic broadcast: re-trigger a decision for an instance other than
    /// the current one.
    AtomicRetryDecide(u64),
    /// Atomic broadcast: join an instance others started although nothing
    /// is queued locally.
    AtomicJoin(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Timer {
    Tick,
    /// Sends heartbeats that gained signatures since the last flush.
    RelayFlush,
    HeartbeatTimeout(u64),
    Brb(BrbTimer),
    Recover {
        epoch: u32,
    },
    App(AppTimer),
}

/// External stimuli injected by a workload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Broadcast(Bytes),
    AtomicBroadcast(Bytes),
    Propose { instance: u64, value: Option<Bytes> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AppEvent {
    Proposed {
        instance: u64,
        value: Option<Bytes>,
    },
    Decided {
        instance: u64,
        value: Option<Bytes>,
        /// The interactive-consistency vector the decision was taken on.
        vector: Vec<Option<Bytes>>,
    },
    AtomicBroadcast {
        seq: u64,
        payload: Bytes,
    },
    AtomicDelivered {
        position: u64,
        instance: u64,
        /// `leader(instance)`, to which the delivery is attributed.
        leader: ProcessId,
        origin: ProcessId,
        seq: u64,
        payload: Bytes,
    },
    /// A property the layer guarantees could not be upheld.
    Violation(String),
    /// The workload broke an assumption; the run continues.
    Warning(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeEvent {
    Broadcast {
        id: BroadcastId,
        value: Bytes,
    },
    BroadcastRefused(BroadcastError),
    Delivered(Delivery),
    Passive {
        cause: PassiveCause,
        was_active: bool,
    },
    Resumed,
    Rejected(RejectReason),
    App(AppEvent),
}

/// Everything a node asks of its environment in reaction to one input.
#[derive(Debug, Default)]
pub struct Effects {
    pub sends: Vec<(ProcessId, Rc<Packet>)>,
    pub timers: Vec<(Time, Timer)>,
    pub events: Vec<NodeEvent>,
    /// Signature verifications the reaction cost.
    pub verifications: usize,
}

impl Effects {
    pub fn clear(&mut self) {
        self.sends.clear();
        self.timers.clear();
        self.events.clear();
        self.verifications = 0;
    }
}

/// Requests an application layer makes of its node.
#[derive(Debug, Default)]
pub struct AppCtx {
    pub broadcasts: Vec<Bytes>,
    pub timers: Vec<(Time, AppTimer)>,
    pub events: Vec<AppEvent>,
    pub verifications: usize,
}

pub trait Application {
    fn on_deliver(&mut self, d: &Delivery, now: Time, ctx: &mut AppCtx);
    fn on_command(&mut self, cmd: Command, now: Time, ctx: &mut AppCtx);
    fn on_timer(&mut self, timer: AppTimer, now: Time, ctx: &mut AppCtx);
    /// Called when the node leaves passive mode, with the instances it
    /// completed while passive.
    fn on_resume(&mut self, completed: &[(BroadcastId, Bytes)], now: Time, ctx: &mut AppCtx) {
        let _ = (completed, now, ctx);
    }
}

/// Application that only forwards deliveries to the trace.
pub struct NoApp;

impl Application for NoApp {
    fn on_deliver(&mut self, _: &Delivery, _: Time, _: &mut AppCtx) {}
    fn on_command(&mut self, _: Command, _: Time, _: &mut AppCtx) {}
    fn on_timer(&mut self, _: AppTimer, _: Time, _: &mut AppCtx) {}
}

pub struct Node {
    id: ProcessId,
    cfg: Rc<ProtocolConfig>,
    poc: PocState,
    brb: BroadcastLayer,
    mode: Mode,
    ever_passive: bool,
    tick: u64,
    /// Last time each peer was sent our heartbeat bundle.
    hb_sent_at: Vec<Option<Time>>,
    bundle_cache: Option<(Time, u64, Option<Rc<HbBundle>>)>,
    recover_epoch: u32,
    app: Box<dyn Application>,
    rejected: u64,
}

impl Node {
    pub fn new<R: Rng>(
        id: ProcessId,
        cfg: Rc<ProtocolConfig>,
        keys: Rc<KeyRing>,
        app: Box<dyn Application>,
        rng: &mut R,
    ) -> Self {
        Node {
            id,
            poc: PocState::new(id, &cfg, rng),
            brb: BroadcastLayer::new(id, &cfg, keys),
            hb_sent_at: vec![None; cfg.n],
            cfg,
            mode: Mode::Active,
            ever_passive: false,
            tick: 0,
            bundle_cache: None,
            recover_epoch: 0,
            app,
            rejected: 0,
        }
    }

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_active(&self) -> bool {
        self.mode == Mode::Active
    }

    pub fn ever_passive(&self) -> bool {
        self.ever_passive
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn poc(&self) -> &PocState {
        &self.poc
    }

    pub fn brb(&self) -> &BroadcastLayer {
        &self.brb
    }

    /// Arms the heartbeat grid; the first tick fires at `now`.
    pub fn start(&mut self, now: Time, fx: &mut Effects) {
        fx.timers.push((now, Timer::Tick));
    }

    pub fn on_packet<R: Rng>(&mut self, pkt: &Packet, now: Time, rng: &mut R, fx: &mut Effects) {
        if let Some(b) = &pkt.heartbeats {
            let queued = self.poc.has_relays();
            fx.verifications += self.poc.absorb(b, now).fresh_sigs;
            if !queued && self.poc.has_relays() {
                fx.timers
                    .push((now + self.relay_batch(), Timer::RelayFlush));
            }
        }
        let Some(msg) = &pkt.instance else {
            return;
        };
        let active = self.is_active();
        let mut out = BrbOutput::default();
        let res = match msg {
            InstanceMsg::Echo(m) => self.brb.on_echo(pkt.from, m, now, active, &mut out),
            InstanceMsg::Deliver(m) => self.brb.on_deliver(pkt.from, m, now, active, &mut out),
        };
        if let Err(e) = res {
            self.rejected += 1;
            fx.events.push(NodeEvent::Rejected(e));
        }
        self.apply(out, now, rng, fx);
    }

    pub fn on_timer<R: Rng>(&mut self, timer: Timer, now: Time, rng: &mut R, fx: &mut Effects) {
        match timer {
            Timer::Tick => self.on_tick(now, fx),
            Timer::RelayFlush => self.flush_relays(rng, fx),
            Timer::HeartbeatTimeout(seq) => {
                if let RoundVerdict::Disconnected { signers } = self.poc.on_round_timeout(seq) {
                    self.enter_passive(PassiveCause::Heartbeat { seq, signers }, now, fx);
                }
            }
            Timer::Brb(BrbTimer::Diffuse { id, epoch }) => {
                let mut out = BrbOutput::default();
                self.brb.diffuse_step(id, epoch, now, rng, &mut out);
                self.apply(out, now, rng, fx);
            }
            Timer::Brb(t) => {
                if self.brb.on_timeout(t) == TimeoutVerdict::Passive {
                    let cause = match t {
                        BrbTimer::EchoTimeout(id) => PassiveCause::EchoTimeout(id),
                        BrbTimer::DeliverTimeout(id) => PassiveCause::DeliverTimeout(id),
                        BrbTimer::Diffuse { .. } => unreachable!("diffusion never times out"),
                    };
                    self.enter_passive(cause, now, fx);
                }
            }
            Timer::Recover { epoch } => {
                if epoch == self.recover_epoch && !self.is_active() {
                    self.mode = Mode::Active;
                    fx.events.push(NodeEvent::Resumed);
                    let completed = self.brb.take_completed_while_passive();
                    let mut ctx = AppCtx::default();
                    self.app.on_resume(&completed, now, &mut ctx);
                    self.apply_app(ctx, now, rng, fx);
                }
            }
            Timer::App(t) => {
                let mut ctx = AppCtx::default();
                self.app.on_timer(t, now, &mut ctx);
                self.apply_app(ctx, now, rng, fx);
            }
        }
    }

    pub fn on_command<R: Rng>(&mut self, cmd: Command, now: Time, rng: &mut R, fx: &mut Effects) {
        match cmd {
            Command::Broadcast(value) => self.broadcast(value, now, rng, fx),
            other => {
                let mut ctx = AppCtx::default();
                self.app.on_command(other, now, &mut ctx);
                self.apply_app(ctx, now, rng, fx);
            }
        }
    }

    fn broadcast<R: Rng>(&mut self, value: Bytes, now: Time, rng: &mut R, fx: &mut Effects) {
        let mut out = BrbOutput::default();
        match self
            .brb
            .broadcast(value.clone(), now, self.is_active(), &mut out)
        {
            Ok(id) => fx.events.push(NodeEvent::Broadcast { id, value }),
            Err(e) => fx.events.push(NodeEvent::BroadcastRefused(e)),
        }
        self.apply(out, now, rng, fx);
    }

    fn on_tick(&mut self, now: Time, fx: &mut Effects) {
        let d = self.cfg.link_delay;
        fx.timers.push((now + d, Timer::Tick));
        let tick = self.tick;
        self.tick += 1;
        if self.is_active() {
            let seq = self.poc.start_round(now);
            fx.timers
                .push((now + self.cfg.round, Timer::HeartbeatTimeout(seq)));
        }
        let Some(bundle) = self.current_bundle(now) else {
            return;
        };
        let pkt = Rc::new(Packet {
            from: self.id,
            heartbeats: Some(bundle),
            instance: None,
        });
        for to in self.poc.cover_targets(tick) {
            let slot = &mut self.hb_sent_at[to.index()];
            if slot.is_some_and(|t| t + d > now) {
                continue;
            }
            *slot = Some(now);
            fx.sends.push((to, pkt.clone()));
        }
    }

    fn relay_batch(&self) -> Span {
        (self.cfg.link_delay / RELAY_BATCHES).max(1)
    }

    /// First send of a relay: heartbeats that gained signatures go out without
    /// waiting for the next tick, batched over a fraction of d.
    fn flush_relays<R: Rng>(&mut self, rng: &mut R, fx: &mut Effects) {
        let Some(bundle) = self.poc.take_relays() else {
            return;
        };
        let pkt = Rc::new(Packet {
            from: self.id,
            heartbeats: Some(Rc::new(bundle)),
            instance: None,
        });
        let me = self.id;
        let peers = (0..self.cfg.n)
            .map(ProcessId::from_index)
            .filter(|p| *p != me);
        for to in peers.choose_multiple(rng, self.cfg.fanout) {
            fx.sends.push((to, pkt.clone()));
        }
    }

    fn current_bundle(&mut self, now: Time) -> Option<Rc<HbBundle>> {
        let v = self.poc.version();
        if let Some((t, ver, b)) = &self.bundle_cache {
            if *t == now && *ver == v {
                return b.clone();
            }
        }
        let b = self.poc.bundle(now).map(Rc::new);
        self.bundle_cache = Some((now, v, b.clone()));
        b
    }

    fn enter_passive(&mut self, cause: PassiveCause, now: Time, fx: &mut Effects) {
        let was_active = self.is_active();
        if was_active {
            self.mode = Mode::Passive { since: now };
        }
        self.ever_passive = true;
        fx.events.push(NodeEvent::Passive { cause, was_active });
        if self.cfg.recovery {
            self.recover_epoch += 1;
            fx.timers.push((
                now + self.cfg.recovery_window(),
                Timer::Recover {
                    epoch: self.recover_epoch,
                },
            ));
        }
    }

    fn apply<R: Rng>(&mut self, out: BrbOutput, now: Time, rng: &mut R, fx: &mut Effects) {
        fx.verifications += out.verifications;
        for action in out.actions {
            match action {
                BrbAction::Send { targets, msg } => self.send_instance(targets, msg, now, rng, fx),
                BrbAction::Schedule { at, timer } => fx.timers.push((at, Timer::Brb(timer))),
                BrbAction::Deliver(d) => {
                    let mut ctx = AppCtx::default();
                    self.app.on_deliver(&d, now, &mut ctx);
                    fx.events.push(NodeEvent::Delivered(d));
                    self.apply_app(ctx, now, rng, fx);
                }
            }
        }
    }

    fn apply_app<R: Rng>(&mut self, ctx: AppCtx, now: Time, rng: &mut R, fx: &mut Effects) {
        fx.verifications += ctx.verifications;
        fx.events.extend(ctx.events.into_iter().map(NodeEvent::App));
        for (at, t) in ctx.timers {
            fx.timers.push((at, Timer::App(t)));
        }
        for value in ctx.broadcasts {
            self.broadcast(value, now, rng, fx);
        }
    }

    /// Sends an instance message with the current heartbeat bundle attached.
    /// When fewer than X targets are eligible, bundle-only packets make up
    /// the difference.
    fn send_instance<R: Rng>(
        &mut self,
        targets: Vec<ProcessId>,
        msg: InstanceMsg,
        now: Time,
        rng: &mut R,
        fx: &mut Effects,
    ) {
        let bundle = self.current_bundle(now);
        let pkt = Rc::new(Packet {
            from: self.id,
            heartbeats: bundle.clone(),
            instance: Some(msg),
        });
        for &to in &targets {
            fx.sends.push((to, pkt.clone()));
        }
        let Some(bundle) = bundle else {
            return;
        };
        for &to in &targets {
            self.hb_sent_at[to.index()] = Some(now);
        }
        let missing = self.cfg.fanout.saturating_sub(targets.len());
        if missing == 0 {
            return;
        }
        let taken: SignerMask = targets.iter().copied().chain([self.id]).collect();
        let pool: Vec<ProcessId> = (0..self.cfg.n)
            .map(ProcessId::from_index)
            .filter(|p| !taken.contains(*p))
            .collect();
        let pad = Rc::new(Packet {
            from: self.id,
            heartbeats: Some(bundle),
            instance: None,
        });
        for &to in pool.choose_multiple(rng, missing) {
            self.hb_sent_at[to.index()] = Some(now);
            fx.sends.push((to, pad.clone()));
        }
    }
}
