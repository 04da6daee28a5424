//! Deterministic discrete-event simulation of a fully connected network of
//! processes over lossy, delay-bounded links.
//!
//! One seeded RNG drives everything (node setup, link sampling, target
//! selection); events at equal times run in insertion order, so a seed fully
//! determines a run.

pub mod adversary;
pub mod link;
pub mod trace;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{KeyRing, SignerMask, MAX_PROCESSES};
use crate::model::{ConfigError, ProcessId, ProtocolConfig, Time};
use crate::node::{Application, Command, Effects, Node, NodeEvent, Timer};
use crate::rtbrb::Delivery;
use crate::wire::Packet;

pub use adversary::{AdversaryProfile, Behavior, EquivocationPlan};
pub use link::LinkModel;
pub use trace::TraceRecord;

use adversary::{ByzTimer, Byzantine};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation supports at most {MAX_PROCESSES} processes, got {0}")]
    TooManyProcesses(usize),
    #[error("{count} Byzantine processes requested but only {n} processes exist")]
    TooManyByzantine { count: usize, n: usize },
    #[error("equivocation plan given for {0}, which is not Byzantine")]
    PlanForCorrectProcess(ProcessId),
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    /// Overrides the link model derived from the protocol config.
    pub link: Option<LinkModel>,
    pub adversary: AdversaryProfile,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            link: None,
            adversary: AdversaryProfile::none(),
        }
    }
}

/// Per-process traffic counters. Lost packets count as sent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetStats {
    pub bytes_sent: Vec<u64>,
    pub packets_sent: Vec<u64>,
    pub signatures_sent: Vec<u64>,
    pub dropped: u64,
}

impl NetStats {
    fn new(n: usize) -> Self {
        NetStats {
            bytes_sent: vec![0; n],
            packets_sent: vec![0; n],
            signatures_sent: vec![0; n],
            dropped: 0,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent.iter().sum()
    }

    pub fn total_signatures(&self) -> u64 {
        self.signatures_sent.iter().sum()
    }

    pub fn total_packets(&self) -> u64 {
        self.packets_sent.iter().sum()
    }
}

#[derive(Clone)]
pub struct RunOutcome {
    pub config: ProtocolConfig,
    pub horizon: Time,
    pub records: Vec<TraceRecord>,
    pub stats: NetStats,
    /// SHA-256 over every trace record and every transmission.
    pub trace_hash: [u8; 32],
    pub byzantine: SignerMask,
    pub ever_passive: SignerMask,
    pub active_at_end: SignerMask,
    pub stale_dropped: u64,
    pub rejected: u64,
}

impl RunOutcome {
    pub fn correct(&self) -> SignerMask {
        (0..self.config.n)
            .map(ProcessId::from_index)
            .filter(|p| !self.byzantine.contains(*p))
            .collect()
    }

    /// Correct processes that were never passive during the run.
    pub fn steady(&self) -> SignerMask {
        self.correct().minus(self.ever_passive)
    }

    pub fn active_correct_at_end(&self) -> usize {
        self.active_at_end.len()
    }

    pub fn deliveries(&self) -> impl Iterator<Item = (ProcessId, &Delivery)> {
        self.records.iter().filter_map(|r| match &r.event {
            NodeEvent::Delivered(d) => Some((r.node, d)),
            _ => None,
        })
    }
}

enum Actor {
    Correct(Box<Node>),
    Byzantine(Byzantine),
}

enum EventKind {
    Packet { to: ProcessId, pkt: Rc<Packet> },
    Timer { node: ProcessId, timer: Timer },
    Byz { node: ProcessId, timer: ByzTimer },
    Command { node: ProcessId, cmd: Command },
}

struct Event {
    at: Time,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

pub struct Simulation {
    cfg: Rc<ProtocolConfig>,
    link: LinkModel,
    now: Time,
    next_seq: u64,
    queue: BinaryHeap<Event>,
    rng: ChaCha8Rng,
    actors: Vec<Actor>,
    byzantine: SignerMask,
    max_delay: SignerMask,
    busy_until: Vec<Time>,
    stats: NetStats,
    records: Vec<TraceRecord>,
    hasher: Sha256,
    ever_passive: SignerMask,
    fx: Effects,
    byz_timers: Vec<(Time, ByzTimer)>,
}

impl Simulation {
    /// Builds the network; `app` creates the application layer of each correct process.
    pub fn new<F>(cfg: ProtocolConfig, opts: SimOptions, mut app: F) -> Result<Self, SimError>
    where
        F: FnMut(ProcessId, &Rc<ProtocolConfig>, &Rc<KeyRing>) -> Box<dyn Application>,
    {
        cfg.validate()?;
        if cfg.n > MAX_PROCESSES {
            return Err(SimError::TooManyProcesses(cfg.n));
        }
        let adv = opts.adversary;
        if adv.count > cfg.n {
            return Err(SimError::TooManyByzantine {
                count: adv.count,
                n: cfg.n,
            });
        }
        let byzantine = adv.byzantine(cfg.n);
        if let Some((p, _)) = adv.plans.iter().find(|(p, _)| !byzantine.contains(*p)) {
            return Err(SimError::PlanForCorrectProcess(*p));
        }
        let link = opts.link.unwrap_or_else(|| LinkModel::from_config(&cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let keys = Rc::new(KeyRing::new(cfg.n, cfg.seed));
        let cfg = Rc::new(cfg);
        let correct: Vec<ProcessId> = (0..cfg.n)
            .map(ProcessId::from_index)
            .filter(|p| !byzantine.contains(*p))
            .collect();

        let mut actors = Vec::with_capacity(cfg.n);
        let mut max_delay = SignerMask::EMPTY;
        for i in 0..cfg.n {
            let p = ProcessId::from_index(i);
            let actor = if !byzantine.contains(p) {
                let a = app(p, &cfg, &keys);
                Actor::Correct(Box::new(Node::new(
                    p,
                    cfg.clone(),
                    keys.clone(),
                    a,
                    &mut rng,
                )))
            } else {
                Actor::Byzantine(match adv.behavior {
                    Behavior::Silent => Byzantine::Silent,
                    Behavior::Equivocate => {
                        let mut plans: Vec<EquivocationPlan> = adv
                            .plans
                            .iter()
                            .filter(|(q, _)| *q == p)
                            .map(|(_, plan)| plan.clone())
                            .collect();
                        if plans.is_empty() {
                            let split = correct
                                .iter()
                                .copied()
                                .filter(|_| rng.gen_bool(0.5))
                                .collect();
                            plans.push(EquivocationPlan {
                                seq: 0,
                                values: [
                                    Bytes::from(format!("equivocation-{}-a", p.0)),
                                    Bytes::from(format!("equivocation-{}-b", p.0)),
                                ],
                                split,
                                at: 0,
                            });
                        }
                        Byzantine::Equivocator {
                            me: p,
                            n: cfg.n,
                            reps: cfg.reps(),
                            delay: cfg.link_delay,
                            keys: keys.clone(),
                            plans,
                        }
                    }
                    Behavior::StaleReplay => Byzantine::StaleReplay {
                        me: p,
                        n: cfg.n,
                        fanout: cfg.fanout,
                        delay: cfg.link_delay,
                        stored: None,
                    },
                    Behavior::MaxDelay => {
                        max_delay.insert(p);
                        let a = app(p, &cfg, &keys);
                        Byzantine::MaxDelay(Box::new(Node::new(
                            p,
                            cfg.clone(),
                            keys.clone(),
                            a,
                            &mut rng,
                        )))
                    }
                })
            };
            actors.push(actor);
        }

        let n = cfg.n;
        let mut sim = Simulation {
            cfg,
            link,
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            rng,
            actors,
            byzantine,
            max_delay,
            busy_until: vec![0; n],
            stats: NetStats::new(n),
            records: Vec::new(),
            hasher: Sha256::new(),
            ever_passive: SignerMask::EMPTY,
            fx: Effects::default(),
            byz_timers: Vec::new(),
        };
        for i in 0..n {
            let mut fx = std::mem::take(&mut sim.fx);
            let mut bt = std::mem::take(&mut sim.byz_timers);
            match &mut sim.actors[i] {
                Actor::Correct(node) => node.start(0, &mut fx),
                Actor::Byzantine(b) => b.start(0, &mut fx, &mut bt),
            }
            sim.flush(ProcessId::from_index(i), fx, bt);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn byzantine(&self) -> SignerMask {
        self.byzantine
    }

    pub fn node(&self, p: ProcessId) -> Option<&Node> {
        match self.actors.get(p.index())? {
            Actor::Correct(n) => Some(n),
            Actor::Byzantine(_) => None,
        }
    }

    fn push(&mut self, at: Time, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event { at, seq, kind });
    }

    /// Injects a workload command for `node` at time `at`.
    pub fn schedule_command(&mut self, at: Time, node: ProcessId, cmd: Command) {
        self.push(at.max(self.now), EventKind::Command { node, cmd });
    }

    /// Processes every event due at or before `horizon`.
    pub fn run_until(&mut self, horizon: Time) {
        while let Some(top) = self.queue.peek() {
            if top.at > horizon {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.step(ev.kind);
        }
        self.now = self.now.max(horizon);
    }

    fn step(&mut self, kind: EventKind) {
        let now = self.now;
        let mut fx = std::mem::take(&mut self.fx);
        let mut bt = std::mem::take(&mut self.byz_timers);
        let rng = &mut self.rng;
        let node = match kind {
            EventKind::Packet { to, pkt } => {
                match &mut self.actors[to.index()] {
                    Actor::Correct(n) => n.on_packet(&pkt, now, rng, &mut fx),
                    Actor::Byzantine(b) => b.on_packet(&pkt, now, rng, &mut fx),
                }
                to
            }
            EventKind::Timer { node, timer } => {
                match &mut self.actors[node.index()] {
                    Actor::Correct(n) => n.on_timer(timer, now, rng, &mut fx),
                    Actor::Byzantine(Byzantine::MaxDelay(n)) => {
                        n.on_timer(timer, now, rng, &mut fx)
                    }
                    Actor::Byzantine(_) => {}
                }
                node
            }
            EventKind::Byz { node, timer } => {
                if let Actor::Byzantine(b) = &mut self.actors[node.index()] {
                    b.on_timer(timer, now, rng, &mut fx, &mut bt);
                }
                node
            }
            EventKind::Command { node, cmd } => {
                match &mut self.actors[node.index()] {
                    Actor::Correct(n) => n.on_command(cmd, now, rng, &mut fx),
                    Actor::Byzantine(Byzantine::MaxDelay(n)) => {
                        n.on_command(cmd, now, rng, &mut fx)
                    }
                    Actor::Byzantine(_) => {}
                }
                node
            }
        };
        self.flush(node, fx, bt);
    }

    fn flush(&mut self, from: ProcessId, mut fx: Effects, mut bt: Vec<(Time, ByzTimer)>) {
        let now = self.now;
        let i = from.index();
        let depart = if self.cfg.verify_cost > 0 && fx.verifications > 0 {
            let t = self.busy_until[i].max(now) + fx.verifications as u64 * self.cfg.verify_cost;
            self.busy_until[i] = t;
            t
        } else {
            now.max(self.busy_until[i])
        };
        let scheme = self.cfg.sig_scheme;
        let slow = self.max_delay.contains(from);
        for (to, pkt) in fx.sends.drain(..) {
            let size = pkt.wire_size(scheme) as u64;
            let sigs = pkt.signature_count() as u64;
            self.stats.bytes_sent[i] += size;
            self.stats.packets_sent[i] += 1;
            self.stats.signatures_sent[i] += sigs;
            let mut delay = self.link.sample(&mut self.rng);
            if slow {
                delay = delay.map(|_| self.link.max_delay());
            }
            let mut h = [0u8; 21];
            h[..8].copy_from_slice(&depart.to_be_bytes());
            h[8..10].copy_from_slice(&from.0.to_be_bytes());
            h[10..12].copy_from_slice(&to.0.to_be_bytes());
            h[12..20].copy_from_slice(&size.to_be_bytes());
            h[20] = delay.is_some() as u8;
            self.hasher.update(h);
            match delay {
                Some(d) => self.push(depart + d, EventKind::Packet { to, pkt }),
                None => self.stats.dropped += 1,
            }
        }
        for (at, timer) in fx.timers.drain(..) {
            self.push(at, EventKind::Timer { node: from, timer });
        }
        for (at, timer) in bt.drain(..) {
            self.push(at, EventKind::Byz { node: from, timer });
        }
        for event in fx.events.drain(..) {
            if matches!(event, NodeEvent::Passive { .. }) && !self.byzantine.contains(from) {
                self.ever_passive.insert(from);
            }
            let rec = TraceRecord {
                at: now,
                node: from,
                event,
            };
            self.hasher.update(rec.to_json().to_string().as_bytes());
            self.records.push(rec);
        }
        fx.clear();
        self.fx = fx;
        self.byz_timers = bt;
    }

    pub fn finish(self) -> RunOutcome {
        let mut active_at_end = SignerMask::EMPTY;
        let mut stale_dropped = 0;
        let mut rejected = 0;
        for (i, a) in self.actors.iter().enumerate() {
            if let Actor::Correct(n) = a {
                if n.is_active() {
                    active_at_end.insert(ProcessId::from_index(i));
                }
                stale_dropped += n.poc().stale_dropped();
                rejected += n.rejected();
            }
        }
        RunOutcome {
            config: (*self.cfg).clone(),
            horizon: self.now,
            records: self.records,
            stats: self.stats,
            trace_hash: self.hasher.finalize().into(),
            byzantine: self.byzantine,
            ever_passive: self.ever_passive,
            active_at_end,
            stale_dropped,
            rejected,
        }
    }
}
