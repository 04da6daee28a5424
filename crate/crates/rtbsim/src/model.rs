//! Identifiers, protocol parameters and the closed-form bounds derived from them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in microseconds.
pub type Time = u64;

/// A span of simulated time in microseconds.
pub type Span = u64;

pub const MICROS_PER_MS: u64 = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u16);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(i: usize) -> Self {
        ProcessId(u16::try_from(i).expect("process index fits in u16"))
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Names one broadcast instance: the originating process and its sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BroadcastId {
    pub origin: ProcessId,
    pub seq: u64,
}

impl BroadcastId {
    pub fn new(origin: ProcessId, seq: u64) -> Self {
        BroadcastId { origin, seq }
    }
}

impl fmt::Display for BroadcastId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.origin, self.seq)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigScheme {
    #[default]
    Stub,
    Rsa2048Like,
    EcdsaP256Like,
}

impl SigScheme {
    /// Bytes one signature occupies on the wire.
    pub fn signature_size(self) -> usize {
        match self {
            SigScheme::Stub => 8,
            SigScheme::Rsa2048Like => 256,
            SigScheme::EcdsaP256Like => 71,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("n = {n} is too small for f = {f}: need n >= 3f + 1")]
    TooFewProcesses { n: usize, f: usize },
    #[error("fanout {fanout} out of range 1..={max}")]
    FanoutOutOfRange { fanout: usize, max: usize },
    #[error("link delay must be positive")]
    ZeroLinkDelay,
    #[error("round length {round} is not a positive multiple of link delay {delay}")]
    RoundNotMultiple { round: Span, delay: Span },
    #[error("fanout {fanout} over {reps} repetitions cannot reach all {peers} peers")]
    InsufficientCoverage {
        peers: usize,
        fanout: usize,
        reps: u64,
    },
    #[error("loss probability {0} outside [0, 1)")]
    LossOutOfRange(f64),
}

fn default_verify_cost() -> Span {
    0
}

/// Parameters shared by every process in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n: usize,
    pub f: usize,
    /// Targets per diffusion repetition (X).
    pub fanout: usize,
    /// Upper bound on link delay (d), in microseconds.
    pub link_delay: Span,
    /// Round length (𝕋), a multiple of `link_delay`.
    pub round: Span,
    pub loss_prob: f64,
    #[serde(default)]
    pub sig_scheme: SigScheme,
    #[serde(default)]
    pub seed: u64,
    /// Per-signature verification cost (d_p), in microseconds.
    #[serde(default = "default_verify_cost")]
    pub verify_cost: Span,
    /// Whether passive processes may return to active mode.
    #[serde(default)]
    pub recovery: bool,
}

impl ProtocolConfig {
    /// Defaults used throughout the evaluation: d = 1 ms, 𝕋 = 8d, X = f + 1.
    pub fn new(n: usize, f: usize) -> Self {
        ProtocolConfig {
            n,
            f,
            fanout: f + 1,
            link_delay: MICROS_PER_MS,
            round: 8 * MICROS_PER_MS,
            loss_prob: 0.0,
            sig_scheme: SigScheme::Stub,
            seed: 0,
            verify_cost: 0,
            recovery: false,
        }
    }

    /// Largest f tolerated by `n` processes.
    pub fn max_faults(n: usize) -> usize {
        n.saturating_sub(1) / 3
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 3 * self.f + 1 {
            return Err(ConfigError::TooFewProcesses {
                n: self.n,
                f: self.f,
            });
        }
        let max = self.n.saturating_sub(1);
        if self.fanout < 1 || self.fanout > max {
            return Err(ConfigError::FanoutOutOfRange {
                fanout: self.fanout,
                max,
            });
        }
        let reps = repetitions(self.round, self.link_delay)?;
        if (self.n - 1) as u64 > self.fanout as u64 * reps {
            return Err(ConfigError::InsufficientCoverage {
                peers: self.n - 1,
                fanout: self.fanout,
                reps,
            });
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(ConfigError::LossOutOfRange(self.loss_prob));
        }
        Ok(())
    }

    pub fn quorum(&self) -> usize {
        quorum_size(self.f)
    }

    /// Diffusion repetitions per round (𝕋 / d). Only valid on a validated config.
    pub fn reps(&self) -> u64 {
        self.round / self.link_delay
    }

    /// Bound on broadcast-to-delivery latency (Δ_R = 3𝕋).
    pub fn delivery_bound(&self) -> Span {
        3 * self.round
    }

    /// Passive processes become active again after this long without a new passive trigger.
    pub fn recovery_window(&self) -> Span {
        self.delivery_bound()
    }
}

pub fn quorum_size(f: usize) -> usize {
    2 * f + 1
}

/// Number of repetitions a diffusion round makes, one every `delay`.
pub fn repetitions(round: Span, delay: Span) -> Result<u64, ConfigError> {
    if delay == 0 {
        return Err(ConfigError::ZeroLinkDelay);
    }
    if round == 0 || !round.is_multiple_of(delay) {
        return Err(ConfigError::RoundNotMultiple { round, delay });
    }
    Ok(round / delay)
}

/// Worst-case delivery latency `24·d_n + 2·N·d_p` for 𝕋 = 8·d_n.
pub fn worst_case_latency(n: usize, net_delay: Span, verify_cost: Span) -> Span {
    24 * net_delay + 2 * n as u64 * verify_cost
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_is_two_f_plus_one() {
        assert_eq!(quorum_size(0), 1);
        assert_eq!(quorum_size(8), 17);
        assert_eq!(quorum_size(16), 33);
    }

    #[test]
    fn repetitions_divide_round() {
        assert_eq!(repetitions(8_000, 1_000), Ok(8));
        assert_eq!(repetitions(1_000, 1_000), Ok(1));
        assert!(matches!(
            repetitions(7_500, 1_000),
            Err(ConfigError::RoundNotMultiple { .. })
        ));
        assert_eq!(repetitions(5, 0), Err(ConfigError::ZeroLinkDelay));
    }

    #[test]
    fn worst_case_matches_closed_form() {
        // d_n = 1 ms, d_p = 0.032 ms
        assert_eq!(worst_case_latency(25, 1_000, 32), 25_600);
        assert_eq!(worst_case_latency(100, 1_000, 30), 30_000);
        assert_eq!(worst_case_latency(25, 1_000, 0), 24_000);
    }

    #[test]
    fn evaluation_configs_validate() {
        for (n, f) in [(25, 8), (49, 16), (52, 17), (73, 24), (300, 99)] {
            for reps in [6, 8] {
                for fanout in [f + 1, 2 * f + 1, n - 1] {
                    let mut c = ProtocolConfig::new(n, f);
                    c.round = reps * c.link_delay;
                    c.fanout = fanout;
                    assert_eq!(c.validate(), Ok(()), "n={n} f={f} reps={reps} x={fanout}");
                }
            }
        }
    }

    #[test]
    fn rejects_too_many_faults() {
        let c = ProtocolConfig::new(4, 2);
        assert_eq!(
            c.validate(),
            Err(ConfigError::TooFewProcesses { n: 4, f: 2 })
        );
    }

    #[test]
    fn rejects_uncovered_peers() {
        let mut c = ProtocolConfig::new(49, 16);
        c.fanout = 5;
        c.round = 8_000;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::InsufficientCoverage { .. })
        ));
        c.fanout = 6;
        assert_eq!(c.validate(), Ok(()));
    }

    #[test]
    fn rejects_bad_fanout_and_loss() {
        let mut c = ProtocolConfig::new(4, 1);
        c.fanout = 4;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::FanoutOutOfRange { .. })
        ));
        c.fanout = 0;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::FanoutOutOfRange { .. })
        ));
        c.fanout = 3;
        c.loss_prob = 1.0;
        assert_eq!(c.validate(), Err(ConfigError::LossOutOfRange(1.0)));
    }

    #[test]
    fn minimal_round_is_legal() {
        let mut c = ProtocolConfig::new(4, 1);
        c.fanout = 3;
        c.round = c.link_delay;
        assert_eq!(c.validate(), Ok(()));
        assert_eq!(c.reps(), 1);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ProtocolConfig::new(25, 8);
        let s = serde_json::to_string(&c).unwrap();
        let back: ProtocolConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let minimal: ProtocolConfig = serde_json::from_str(
            r#"{"n":4,"f":1,"fanout":2,"link_delay":1000,"round":8000,"loss_prob":0.1}"#,
        )
        .unwrap();
        assert_eq!(minimal.sig_scheme, SigScheme::Stub);
        assert!(!minimal.recovery);
    }
}
