//! Byzantine behaviours. Byzantine processes never forge signatures of
//! correct processes; they only withhold, equivocate, replay or delay.

use std::rc::Rc;

use bytes::Bytes;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{KeyRing, PayloadKind, SignatureSet, SignerMask};
use crate::model::{BroadcastId, ProcessId, Span, Time};
use crate::node::{Effects, Node};
use crate::wire::{EchoMsg, HbBundle, InstanceMsg, Packet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Sends nothing.
    Silent,
    /// Broadcasts conflicting values to different peers, otherwise silent.
    Equivocate,
    /// Replays the first heartbeat bundle it received, forever.
    StaleReplay,
    /// Runs the protocol correctly but every send takes the full link delay.
    MaxDelay,
}

/// One equivocating broadcast: peers in `split` get `values[0]`, the rest `values[1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EquivocationPlan {
    pub seq: u64,
    pub values: [Bytes; 2],
    pub split: SignerMask,
    pub at: Time,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdversaryProfile {
    pub behavior: Behavior,
    /// Number of Byzantine processes (the highest-indexed ones).
    pub count: usize,
    /// Explicit equivocations per Byzantine process. When empty, each
    /// equivocator broadcasts two default values at time 0 with a random split.
    pub plans: Vec<(ProcessId, EquivocationPlan)>,
}

impl AdversaryProfile {
    pub fn none() -> Self {
        AdversaryProfile {
            behavior: Behavior::Silent,
            count: 0,
            plans: Vec::new(),
        }
    }

    pub fn new(behavior: Behavior, count: usize) -> Self {
        AdversaryProfile {
            behavior,
            count,
            plans: Vec::new(),
        }
    }

    pub fn byzantine(&self, n: usize) -> SignerMask {
        (n - self.count..n).map(ProcessId::from_index).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ByzTimer {
    Tick,
    Equivocate { plan: usize, remaining: u64 },
}

pub enum Byzantine {
    Silent,
    Equivocator {
        me: ProcessId,
        n: usize,
        reps: u64,
        delay: Span,
        keys: Rc<KeyRing>,
        plans: Vec<EquivocationPlan>,
    },
    StaleReplay {
        me: ProcessId,
        n: usize,
        fanout: usize,
        delay: Span,
        stored: Option<Rc<HbBundle>>,
    },
    MaxDelay(Box<Node>),
}

impl Byzantine {
    pub fn start(&mut self, now: Time, fx: &mut Effects, timers: &mut Vec<(Time, ByzTimer)>) {
        match self {
            Byzantine::Silent => {}
            Byzantine::Equivocator { plans, reps, .. } => {
                for (i, p) in plans.iter().enumerate() {
                    timers.push((
                        p.at.max(now),
                        ByzTimer::Equivocate {
                            plan: i,
                            remaining: *reps,
                        },
                    ));
                }
            }
            Byzantine::StaleReplay { .. } => timers.push((now, ByzTimer::Tick)),
            Byzantine::MaxDelay(node) => node.start(now, fx),
        }
    }

    pub fn on_packet<R: Rng>(&mut self, pkt: &Packet, now: Time, rng: &mut R, fx: &mut Effects) {
        match self {
            Byzantine::StaleReplay { stored, .. } => {
                if stored.is_none() {
                    *stored = pkt.heartbeats.clone();
                }
            }
            Byzantine::MaxDelay(node) => node.on_packet(pkt, now, rng, fx),
            _ => {}
        }
    }

    pub fn on_timer<R: Rng>(
        &mut self,
        t: ByzTimer,
        now: Time,
        rng: &mut R,
        fx: &mut Effects,
        timers: &mut Vec<(Time, ByzTimer)>,
    ) {
        match (self, t) {
            (
                Byzantine::Equivocator {
                    me,
                    n,
                    delay,
                    keys,
                    plans,
                    ..
                },
                ByzTimer::Equivocate { plan, remaining },
            ) => {
                let p = &plans[plan];
                let id = BroadcastId::new(*me, p.seq);
                let msgs: Vec<Rc<Packet>> = p
                    .values
                    .iter()
                    .map(|v| {
                        let sig = keys.sign(*me, PayloadKind::Echo, id, v);
                        Rc::new(Packet {
                            from: *me,
                            heartbeats: None,
                            instance: Some(InstanceMsg::Echo(EchoMsg {
                                id,
                                value: v.clone(),
                                sigs: Rc::new(SignatureSet::from_sig(sig)),
                            })),
                        })
                    })
                    .collect();
                for to in (0..*n).map(ProcessId::from_index).filter(|q| q != me) {
                    let which = usize::from(!p.split.contains(to));
                    fx.sends.push((to, msgs[which].clone()));
                }
                if remaining > 1 {
                    timers.push((
                        now + *delay,
                        ByzTimer::Equivocate {
                            plan,
                            remaining: remaining - 1,
                        },
                    ));
                }
            }
            (
                Byzantine::StaleReplay {
                    me,
                    n,
                    fanout,
                    delay,
                    stored,
                },
                ByzTimer::Tick,
            ) => {
                timers.push((now + *delay, ByzTimer::Tick));
                if let Some(b) = stored {
                    let pkt = Rc::new(Packet {
                        from: *me,
                        heartbeats: Some(b.clone()),
                        instance: None,
                    });
                    let peers: Vec<ProcessId> = (0..*n)
                        .map(ProcessId::from_index)
                        .filter(|q| q != me)
                        .collect();
                    for &to in peers.choose_multiple(rng, *fanout) {
                        fx.sends.push((to, pkt.clone()));
                    }
                }
            }
            _ => {}
        }
    }
}
