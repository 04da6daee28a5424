//! Proof-of-connectivity: signed heartbeats that let a process notice when it
//! can no longer reach a quorum within one round.
//!
//! Heartbeats to diffuse are collected into one bundle per tick; an entry stays
//! in the bundle for a full round after it was created or last relayed, which
//! is the per-heartbeat `h-diffuse` schedule folded onto the tick grid.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::crypto::SignerMask;
use crate::model::{ProcessId, ProtocolConfig, Span, Time};
use crate::wire::{HbBundle, HbEntry};

#[derive(Clone, Copy, Debug)]
struct Slot {
    signers: SignerMask,
    /// `EMPTY` when the slot holds nothing.
    seq: u64,
    diffuse_until: Time,
}

impl Slot {
    const EMPTY: u64 = u64::MAX;
    const VACANT: Slot = Slot {
        signers: SignerMask::EMPTY,
        seq: Slot::EMPTY,
        diffuse_until: 0,
    };

    fn holds(&self, seq: u64) -> bool {
        self.seq == seq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundVerdict {
    /// More than 2f processes signed the heartbeat in time.
    Connected,
    /// At most 2f signatures: the process must enter passive mode.
    Disconnected { signers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HbOutcome {
    /// Sequence number below the lowest valid one; ignored.
    Stale,
    Merged {
        fresh: usize,
        relayed: bool,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AbsorbStats {
    pub merged: usize,
    pub stale: usize,
    /// Signatures not previously held, each of which costs a verification.
    pub fresh_sigs: usize,
}

pub struct PocState {
    me: ProcessId,
    f: usize,
    reps: u64,
    round: Span,
    fanout: usize,
    /// Lowest valid heartbeat sequence number per process.
    low: Vec<u64>,
    /// Next own heartbeat sequence number.
    next_seq: u64,
    /// `width` slots per process, indexed by `seq mod width`; `width` is a
    /// power of two of at least `reps + 1`.
    slots: Vec<Slot>,
    width: usize,
    cover: Vec<ProcessId>,
    /// Slots queued in `grown`.
    pending: Vec<bool>,
    grown: Vec<usize>,
    version: u64,
    stale_dropped: u64,
}

impl PocState {
    pub fn new<R: Rng>(me: ProcessId, cfg: &ProtocolConfig, rng: &mut R) -> Self {
        let reps = cfg.reps();
        let width = (reps as usize + 1).next_power_of_two();
        let mut cover: Vec<ProcessId> = (0..cfg.n)
            .map(ProcessId::from_index)
            .filter(|&p| p != me)
            .collect();
        cover.shuffle(rng);
        PocState {
            me,
            f: cfg.f,
            reps,
            round: cfg.round,
            fanout: cfg.fanout,
            low: vec![0; cfg.n],
            next_seq: 0,
            slots: vec![Slot::VACANT; cfg.n * width],
            width,
            cover,
            pending: vec![false; cfg.n * width],
            grown: Vec::new(),
            version: 0,
            stale_dropped: 0,
        }
    }

    fn slot_index(&self, origin: ProcessId, seq: u64) -> usize {
        origin.index() * self.width + (seq as usize & (self.width - 1))
    }

    /// Starts a new heartbeat round at `now`. Its timeout is due at `now + round`.
    pub fn start_round(&mut self, now: Time) -> u64 {
        let seq = self.next_seq;
        let i = self.slot_index(self.me, seq);
        self.slots[i] = Slot {
            seq,
            signers: SignerMask::single(self.me),
            diffuse_until: now + self.round,
        };
        self.next_seq += 1;
        let me = self.me.index();
        if self.next_seq - self.low[me] > self.reps {
            self.low[me] += 1;
        }
        self.version += 1;
        seq
    }

    pub fn on_round_timeout(&mut self, seq: u64) -> RoundVerdict {
        let i = self.slot_index(self.me, seq);
        let slot = &mut self.slots[i];
        let signers = if slot.holds(seq) {
            slot.signers.len()
        } else {
            0
        };
        slot.seq = Slot::EMPTY;
        self.version += 1;
        if signers <= 2 * self.f {
            RoundVerdict::Disconnected { signers }
        } else {
            RoundVerdict::Connected
        }
    }

    pub fn absorb_entry(&mut self, e: &HbEntry, now: Time) -> HbOutcome {
        let p = e.origin.index();
        let old_low = self.low[p];
        if e.seq < old_low {
            self.stale_dropped += 1;
            return HbOutcome::Stale;
        }
        let own = e.origin == self.me;
        if own && e.seq >= self.next_seq {
            self.stale_dropped += 1;
            return HbOutcome::Stale;
        }
        if !own && e.seq > old_low + self.reps {
            self.low[p] = e.seq - self.reps;
        }
        let i = self.slot_index(e.origin, e.seq);
        let slot = &mut self.slots[i];
        if !slot.holds(e.seq) {
            if own {
                // Already judged at its timeout.
                return HbOutcome::Merged {
                    fresh: 0,
                    relayed: false,
                };
            }
            *slot = Slot {
                seq: e.seq,
                ..Slot::VACANT
            };
        }
        let merged = slot
            .signers
            .union(e.signers)
            .union(SignerMask::single(self.me));
        let fresh = merged
            .minus(slot.signers)
            .minus(SignerMask::single(self.me))
            .len();
        let changed = merged != slot.signers;
        slot.signers = merged;
        // The lowest valid heartbeat is about to leave the window and is not
        // relayed, except at start-up where the window has not yet filled.
        let relayed = !own && (e.seq != old_low || old_low == 0);
        if relayed {
            let until = now + self.round;
            if slot.diffuse_until != until {
                slot.diffuse_until = until;
                self.version += 1;
            }
        }
        if changed {
            self.version += 1;
        }
        HbOutcome::Merged { fresh, relayed }
    }

    /// Merges a bundle. Equivalent to `absorb_entry` on each entry, except
    /// that relayed heartbeats whose signer set grew are also queued for
    /// `take_relays`.
    pub fn absorb(&mut self, bundle: &HbBundle, now: Time) -> AbsorbStats {
        let me = self.me;
        let me_bit = SignerMask::single(me).0;
        let (width, reps) = (self.width, self.reps);
        let wmask = width - 1;
        let until = now + self.round;
        let (mut merged_n, mut stale_n, mut fresh_n) = (0usize, 0usize, 0usize);
        let mut changed = false;
        let mut own = false;
        let PocState {
            low,
            slots,
            pending,
            grown,
            ..
        } = self;
        for e in bundle.entries() {
            if e.origin == me {
                own = true;
                continue;
            }
            let p = e.origin.index();
            let lo = low[p];
            if e.seq < lo {
                stale_n += 1;
                continue;
            }
            if e.seq > lo + reps {
                low[p] = e.seq - reps;
            }
            let idx = p * width + (e.seq as usize & wmask);
            let slot = &mut slots[idx];
            if !slot.holds(e.seq) {
                *slot = Slot {
                    seq: e.seq,
                    ..Slot::VACANT
                };
            }
            let old = slot.signers.0;
            let merged = old | e.signers.0 | me_bit;
            fresh_n += (merged & !old & !me_bit).count_ones() as usize;
            slot.signers.0 = merged;
            let refresh = e.seq != lo || lo == 0;
            let grew = merged != old;
            if refresh && grew && !pending[idx] {
                pending[idx] = true;
                grown.push(idx);
            }
            let new_until = if refresh { until } else { slot.diffuse_until };
            changed |= grew | (new_until != slot.diffuse_until);
            slot.diffuse_until = new_until;
            merged_n += 1;
        }
        self.stale_dropped += stale_n as u64;
        if changed {
            self.version += 1;
        }
        let mut stats = AbsorbStats {
            merged: merged_n,
            stale: stale_n,
            fresh_sigs: fresh_n,
        };
        if own {
            for e in bundle.entries().iter().filter(|e| e.origin == me) {
                match self.absorb_entry(e, now) {
                    HbOutcome::Stale => stats.stale += 1,
                    HbOutcome::Merged { fresh, .. } => {
                        stats.merged += 1;
                        stats.fresh_sigs += fresh;
                    }
                }
            }
        }
        stats
    }

    /// Whether any grown heartbeat is waiting for `take_relays`.
    pub fn has_relays(&self) -> bool {
        !self.grown.is_empty()
    }

    /// Heartbeats that gained signatures since the last call, with their
    /// current signer sets.
    pub fn take_relays(&mut self) -> Option<HbBundle> {
        let width = self.width;
        let mut entries = Vec::with_capacity(self.grown.len());
        for idx in self.grown.drain(..) {
            self.pending[idx] = false;
            let s = self.slots[idx];
            let p = idx / width;
            if s.seq != Slot::EMPTY && s.seq >= self.low[p] {
                entries.push(HbEntry {
                    origin: ProcessId::from_index(p),
                    seq: s.seq,
                    signers: s.signers,
                });
            }
        }
        (!entries.is_empty()).then(|| HbBundle::new(entries))
    }

    /// Heartbeats currently being diffused, or `None` if there are none.
    pub fn bundle(&self, now: Time) -> Option<HbBundle> {
        let width = self.width;
        let mut entries = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            if s.seq != Slot::EMPTY && s.diffuse_until > now && s.seq >= self.low[i / width] {
                entries.push(HbEntry {
                    origin: ProcessId::from_index(i / width),
                    seq: s.seq,
                    signers: s.signers,
                });
            }
        }
        if entries.is_empty() {
            None
        } else {
            Some(HbBundle::new(entries))
        }
    }

    /// The `fanout` peers covered at grid tick `tick`. Any `reps` consecutive
    /// ticks together cover every other process.
    pub fn cover_targets(&self, tick: u64) -> impl Iterator<Item = ProcessId> + '_ {
        let m = self.cover.len() as u64;
        let start = tick.wrapping_mul(self.fanout as u64);
        (0..self.fanout as u64).map(move |j| self.cover[((start + j) % m) as usize])
    }

    pub fn signers(&self, origin: ProcessId, seq: u64) -> Option<SignerMask> {
        let s = self.slots[self.slot_index(origin, seq)];
        (s.holds(seq) && seq >= self.low[origin.index()]).then_some(s.signers)
    }

    pub fn lowest_valid(&self, origin: ProcessId) -> u64 {
        self.low[origin.index()]
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Changes whenever the bundle contents may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn stale_dropped(&self) -> u64 {
        self.stale_dropped
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(n: usize, f: usize) -> ProtocolConfig {
        let mut c = ProtocolConfig::new(n, f);
        c.fanout = f + 1;
        c
    }

    fn state(me: u16, c: &ProtocolConfig) -> PocState {
        PocState::new(ProcessId(me), c, &mut ChaCha8Rng::seed_from_u64(7))
    }

    fn entry(origin: u16, seq: u64, signers: &[u16]) -> HbEntry {
        HbEntry {
            origin: ProcessId(origin),
            seq,
            signers: signers.iter().copied().map(ProcessId).collect(),
        }
    }

    #[test]
    fn own_window_keeps_reps_heartbeats() {
        let c = cfg(4, 1);
        let mut s = state(0, &c);
        for k in 0..20 {
            s.start_round(k * c.link_delay);
            assert!(s.next_seq() - s.lowest_valid(ProcessId(0)) <= c.reps());
        }
        assert_eq!(s.lowest_valid(ProcessId(0)), 20 - 8);
    }

    #[test]
    fn timeout_verdict_depends_on_quorum() {
        let c = cfg(4, 1);
        let mut s = state(0, &c);
        let a = s.start_round(0);
        let b = s.start_round(1_000);
        s.absorb_entry(&entry(0, a, &[0, 1, 2]), 500);
        s.absorb_entry(&entry(0, b, &[0, 1]), 1_500);
        assert_eq!(s.on_round_timeout(a), RoundVerdict::Connected);
        assert_eq!(
            s.on_round_timeout(b),
            RoundVerdict::Disconnected { signers: 2 }
        );
        assert_eq!(s.signers(ProcessId(0), a), None);
    }

    #[test]
    fn remote_heartbeat_gains_own_signature_and_relays() {
        let c = cfg(4, 1);
        let mut s = state(1, &c);
        let out = s.absorb_entry(&entry(0, 3, &[0]), 100);
        assert_eq!(
            out,
            HbOutcome::Merged {
                fresh: 1,
                relayed: true
            }
        );
        assert_eq!(s.signers(ProcessId(0), 3).unwrap().len(), 2);
        let b = s.bundle(100).unwrap();
        assert_eq!(b.entries(), &[entry(0, 3, &[0, 1])]);
        assert!(s.bundle(100 + c.round).is_none());
    }

    #[test]
    fn heartbeat_far_ahead_purges_older_ones() {
        let c = cfg(4, 1);
        let mut s = state(1, &c);
        s.absorb_entry(&entry(0, 2, &[0]), 0);
        s.absorb_entry(&entry(0, 20, &[0]), 0);
        assert!(s.signers(ProcessId(0), 20).is_some());
        assert_eq!(s.lowest_valid(ProcessId(0)), 12);
        assert_eq!(s.signers(ProcessId(0), 2), None);
        assert_eq!(s.absorb_entry(&entry(0, 11, &[0, 2]), 0), HbOutcome::Stale);
        assert_eq!(s.stale_dropped(), 1);
        // The lowest valid heartbeat is merged but not relayed.
        assert_eq!(
            s.absorb_entry(&entry(0, 12, &[0]), 0),
            HbOutcome::Merged {
                fresh: 1,
                relayed: false
            }
        );
    }

    #[test]
    fn unknown_own_heartbeat_is_not_resurrected() {
        let c = cfg(4, 1);
        let mut s = state(0, &c);
        let a = s.start_round(0);
        s.on_round_timeout(a);
        s.absorb_entry(&entry(0, a, &[0, 1, 2, 3]), 10);
        assert_eq!(s.signers(ProcessId(0), a), None);
        assert_eq!(s.absorb_entry(&entry(0, 99, &[0, 1]), 10), HbOutcome::Stale);
    }

    #[test]
    fn own_heartbeat_diffuses_for_one_round() {
        let c = cfg(4, 1);
        let mut s = state(0, &c);
        s.start_round(0);
        let ticks = (0..20)
            .filter(|k| s.bundle(k * c.link_delay).is_some())
            .count();
        assert_eq!(ticks as u64, c.reps());
    }

    #[test]
    fn cover_reaches_every_peer_within_a_round() {
        for seed in 0..1_000u64 {
            let c = cfg(25, 8);
            let s = PocState::new(ProcessId(3), &c, &mut ChaCha8Rng::seed_from_u64(seed));
            for start in [0u64, 5, 13] {
                let covered: SignerMask = (start..start + c.reps())
                    .flat_map(|t| s.cover_targets(t).collect::<Vec<_>>())
                    .collect();
                assert_eq!(covered.len(), 24);
                assert!(!covered.contains(ProcessId(3)));
            }
        }
    }

    #[test]
    fn every_repetition_covers_all_peers_when_fanout_is_everyone() {
        let mut c = cfg(4, 1);
        c.fanout = 3;
        c.round = c.link_delay;
        let s = state(2, &c);
        for t in 0..5 {
            let m: SignerMask = s.cover_targets(t).collect();
            assert_eq!(m.len(), 3);
        }
    }
}
