use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ProtocolConfig, Span};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DelayModel {
    /// Uniform over `[min, max]` microseconds.
    Uniform {
        min: Span,
        max: Span,
    },
    Constant {
        delay: Span,
    },
}

/// Independent per-message loss and bounded delay, identical on every link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub loss_prob: f64,
    pub delay: DelayModel,
}

impl LinkModel {
    /// Delays uniform over `[d/2, d]` and the configured loss probability.
    pub fn from_config(cfg: &ProtocolConfig) -> Self {
        LinkModel {
            loss_prob: cfg.loss_prob,
            delay: DelayModel::Uniform {
                min: 1,
                max: cfg.link_delay,
            },
        }
    }

    pub fn max_delay(&self) -> Span {
        match self.delay {
            DelayModel::Uniform { max, .. } => max,
            DelayModel::Constant { delay } => delay,
        }
    }

    /// Samples one transmission: `None` if lost, otherwise the delay.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Option<Span> {
        if self.loss_prob > 0.0 && rng.gen::<f64>() < self.loss_prob {
            return None;
        }
        Some(match self.delay {
            DelayModel::Uniform { min, max } => rng.gen_range(min..=max),
            DelayModel::Constant { delay } => delay,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn lossless_link_always_delivers_within_bound() {
        let cfg = ProtocolConfig::new(4, 1);
        let link = LinkModel::from_config(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1_000 {
            let d = link.sample(&mut rng).unwrap();
            assert!((1..=1_000).contains(&d));
        }
    }

    #[test]
    fn certain_loss_drops_everything() {
        let link = LinkModel {
            loss_prob: 1.0,
            delay: DelayModel::Constant { delay: 5 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| link.sample(&mut rng).is_none()));
    }

    #[test]
    fn loss_rate_matches_binomial_expectation() {
        // 10^5 draws at p = 0.3: sd = sqrt(n p (1-p)) ~ 145, allow 5 sd.
        let link = LinkModel {
            loss_prob: 0.3,
            delay: DelayModel::Constant { delay: 1 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000u32;
        let lost = (0..n).filter(|_| link.sample(&mut rng).is_none()).count() as f64;
        let mean = n as f64 * 0.3;
        let sd = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((lost - mean).abs() < 5.0 * sd, "lost {lost}");
    }
}
