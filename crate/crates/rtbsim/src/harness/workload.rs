//! Workloads and single-run scenarios.

use std::rc::Rc;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::KeyRing;
use crate::model::{ProcessId, ProtocolConfig, Time};
use crate::node::{Application, Command, NoApp};
use crate::rtbab::{self, AtomicApp};
use crate::rtbc::{self, ConsensusApp};
use crate::simnet::{AdversaryProfile, Behavior, RunOutcome, SimError, SimOptions, Simulation};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// Process 0 reliably broadcasts one message at time 0.
    #[default]
    SingleBroadcast,
    /// The first `broadcasters` processes each atomically broadcast
    /// `messages` messages, spaced by the atomic delivery bound.
    PacedAtomic {
        messages: usize,
        broadcasters: usize,
    },
    /// Every correct process proposes in `instances` consensus instances.
    /// With `mixed`, each proposal is one of two values at random,
    /// otherwise all proposals of an instance agree.
    ConsensusBatch { instances: usize, mixed: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub behavior: Behavior,
    pub count: usize,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        AdversarySpec {
            behavior: Behavior::Silent,
            count: 0,
        }
    }
}

/// Pads a label with zeros to `size` bytes.
pub fn payload(label: String, size: usize) -> Bytes {
    let mut v = label.into_bytes();
    if v.len() < size {
        v.resize(size, 0);
    }
    Bytes::from(v)
}

/// Time between consecutive consensus instances of a batch.
pub fn consensus_spacing(cfg: &ProtocolConfig) -> Time {
    rtbc::decision_bound(cfg) + cfg.delivery_bound() + cfg.round
}

/// A single run as read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub config: ProtocolConfig,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub payload_size: usize,
    #[serde(default)]
    pub horizon: Option<Time>,
}

impl RunSpec {
    pub fn scenario(&self) -> Scenario {
        let mut s = Scenario::new(self.config.clone(), self.workload.clone())
            .with_adversary(self.adversary.behavior, self.adversary.count);
        s.payload_size = self.payload_size;
        s.horizon = self.horizon;
        s
    }
}

/// One fully specified run.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ProtocolConfig,
    pub adversary: AdversaryProfile,
    pub workload: Workload,
    pub payload_size: usize,
    /// Defaults to [`Scenario::default_horizon`].
    pub horizon: Option<Time>,
}

impl Scenario {
    pub fn new(config: ProtocolConfig, workload: Workload) -> Self {
        Scenario {
            config,
            adversary: AdversaryProfile::none(),
            workload,
            payload_size: 0,
            horizon: None,
        }
    }

    pub fn with_adversary(mut self, behavior: Behavior, count: usize) -> Self {
        self.adversary = AdversaryProfile::new(behavior, count);
        self
    }

    /// Long enough for every operation the workload starts to complete,
    /// plus one recovery window when recovery is on.
    pub fn default_horizon(&self) -> Time {
        let cfg = &self.config;
        let base = match &self.workload {
            Workload::SingleBroadcast => cfg.delivery_bound() + cfg.round,
            Workload::PacedAtomic {
                messages,
                broadcasters,
            } => {
                let last = messages.saturating_sub(1) as u64 * rtbab::delivery_bound(cfg)
                    + *broadcasters as u64 * cfg.link_delay;
                last + rtbab::delivery_bound(cfg) + cfg.round
            }
            Workload::ConsensusBatch { instances, .. } => {
                *instances as u64 * consensus_spacing(cfg)
            }
        };
        if cfg.recovery {
            base + cfg.recovery_window()
        } else {
            base
        }
    }

    pub fn horizon(&self) -> Time {
        self.horizon.unwrap_or_else(|| self.default_horizon())
    }

    pub fn build(&self) -> Result<Simulation, SimError> {
        let opts = SimOptions {
            adversary: self.adversary.clone(),
            ..SimOptions::default()
        };
        let workload = self.workload.clone();
        let mut sim = Simulation::new(
            self.config.clone(),
            opts,
            move |p, cfg, keys: &Rc<KeyRing>| -> Box<dyn Application> {
                match workload {
                    Workload::SingleBroadcast => Box::new(NoApp),
                    Workload::PacedAtomic { .. } => Box::new(AtomicApp::new(p, cfg, keys.clone())),
                    Workload::ConsensusBatch { .. } => {
                        Box::new(ConsensusApp::new(p, cfg, keys.clone()))
                    }
                }
            },
        )?;
        self.schedule(&mut sim);
        Ok(sim)
    }

    fn schedule(&self, sim: &mut Simulation) {
        let cfg = &self.config;
        let byz = sim.byzantine();
        let correct: Vec<ProcessId> = (0..cfg.n)
            .map(ProcessId::from_index)
            .filter(|p| !byz.contains(*p))
            .collect();
        let size = self.payload_size;
        match &self.workload {
            Workload::SingleBroadcast => {
                let value = payload("m-0-0".into(), size);
                sim.schedule_command(0, ProcessId(0), Command::Broadcast(value));
            }
            Workload::PacedAtomic {
                messages,
                broadcasters,
            } => {
                let spacing = rtbab::delivery_bound(cfg);
                for (i, &p) in correct.iter().take(*broadcasters).enumerate() {
                    for k in 0..*messages {
                        let at = k as u64 * spacing + i as u64 * cfg.link_delay;
                        let value = payload(format!("m-{}-{k}", p.0), size);
                        sim.schedule_command(at, p, Command::AtomicBroadcast(value));
                    }
                }
            }
            Workload::ConsensusBatch { instances, mixed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
                let spacing = consensus_spacing(cfg);
                for inst in 0..*instances as u64 {
                    for &p in &correct {
                        let label = if *mixed && rng.gen_bool(0.5) {
                            "b"
                        } else {
                            "a"
                        };
                        let value = payload(format!("{label}{inst}"), size);
                        sim.schedule_command(
                            inst * spacing,
                            p,
                            Command::Propose {
                                instance: inst,
                                value: Some(value),
                            },
                        );
                    }
                }
            }
        }
    }

    pub fn run(&self) -> Result<RunOutcome, SimError> {
        let mut sim = self.build()?;
        sim.run_until(self.horizon());
        Ok(sim.finish())
    }
}
