use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::intervals::{scale_to_allowed, ActionSpace, Interval, IntervalSet, PAD_CAPACITY};

/// How an agent copes with restricted actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandlerKind {
    /// Execute the raw action; violations end the episode with the collision reward.
    Penalty,
    /// Replace invalid actions with the nearest allowed one.
    Projection,
    /// Replace invalid actions with a uniform draw from the allowed set.
    RandomReplacement,
    /// Map the full range onto the concatenated allowed intervals.
    ContinuousMasking,
    /// Mask unavailable discrete actions.
    DiscreteMasking,
    /// The architecture handles restrictions itself (PAM, MPS-TD3).
    Native,
}

impl HandlerKind {
    pub const ALL: [HandlerKind; 6] = [
        HandlerKind::Penalty,
        HandlerKind::Projection,
        HandlerKind::RandomReplacement,
        HandlerKind::ContinuousMasking,
        HandlerKind::DiscreteMasking,
        HandlerKind::Native,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HandlerKind::Penalty => "penalty",
            HandlerKind::Projection => "projection",
            HandlerKind::RandomReplacement => "random_replacement",
            HandlerKind::ContinuousMasking => "continuous_masking",
            HandlerKind::DiscreteMasking => "discrete_masking",
            HandlerKind::Native => "native",
        }
    }

    /// Whether the allowed set is appended to the observation.
    pub fn observes_restrictions(self) -> bool {
        matches!(
            self,
            HandlerKind::Penalty
                | HandlerKind::Projection
                | HandlerKind::RandomReplacement
                | HandlerKind::ContinuousMasking
        )
    }

    /// Whether every executed action is guaranteed to lie in a nonempty allowed set.
    pub fn is_strict(self) -> bool {
        self != HandlerKind::Penalty
    }
}

impl fmt::Display for HandlerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HandlerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let norm = if norm == "replacement" {
            "random_replacement".to_string()
        } else {
            norm
        };
        HandlerKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown handler {s:?}")))
    }
}

/// A restriction handler bound to an action space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestrictionHandler {
    pub kind: HandlerKind,
    pub space: ActionSpace,
    pub pad_capacity: usize,
}

impl RestrictionHandler {
    pub fn new(kind: HandlerKind, space: ActionSpace) -> Self {
        Self {
            kind,
            space,
            pad_capacity: PAD_CAPACITY,
        }
    }

    /// Unscaled network input for this handler.
    pub fn augment_observation(&self, obs: &Observation, allowed: &IntervalSet) -> Result<Vec<f64>> {
        let mut v = obs.to_vec();
        if self.kind.observes_restrictions() {
            v.extend(allowed.zero_pad(self.pad_capacity)?);
        }
        Ok(v)
    }

    pub fn input_len(&self) -> usize {
        if self.kind.observes_restrictions() {
            Observation::LEN + 2 * self.pad_capacity
        } else {
            Observation::LEN
        }
    }

    /// Turns a proposed action into the executed one.
    ///
    /// Returns `(executed, violated)`. With an empty allowed set nothing can be
    /// repaired: the raw action is executed and flagged.
    pub fn apply(&self, raw: f64, allowed: &IntervalSet, rng: &mut dyn RngCore) -> Result<(f64, bool)> {
        if allowed.is_empty() {
            return Ok((raw, true));
        }
        let executed = match self.kind {
            HandlerKind::Penalty => return Ok((raw, !allowed.contains(raw))),
            HandlerKind::Projection => allowed.project(raw, 2.0)?,
            HandlerKind::RandomReplacement => {
                if allowed.contains(raw) {
                    raw
                } else {
                    allowed.sample_uniform(rng)?
                }
            }
            HandlerKind::ContinuousMasking => scale_to_allowed(&self.space, allowed, raw)?,
            HandlerKind::DiscreteMasking | HandlerKind::Native => raw,
        };
        Ok((executed, !allowed.contains(executed)))
    }
}

/// Observation ++ the encoding of a single interval, as fed to multi-pass agents.
pub fn augment_with_interval(obs: &Observation, interval: &Interval) -> Vec<f64> {
    let mut v = obs.to_vec();
    v.push(interval.low);
    v.push(interval.high);
    v
}

/// Brings raw network inputs to unit scale.
///
/// The six observation entries are divided by map width, height, 180°, map
/// diagonal, 360° and the step cap; anything after them is an angle and divided by 180°.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaler {
    factors: [f64; Observation::LEN],
}

pub const ANGLE_SCALE: f64 = 1.0 / 180.0;

impl InputScaler {
    pub fn new(cfg: &EnvConfig) -> Self {
        let diag = cfg.width.hypot(cfg.height);
        Self {
            factors: [
                1.0 / cfg.width,
                1.0 / cfg.height,
                ANGLE_SCALE,
                1.0 / diag,
                1.0 / 360.0,
                1.0 / cfg.max_steps as f64,
            ],
        }
    }

    pub fn scale(&self, mut v: Vec<f64>) -> Vec<f64> {
        for (i, x) in v.iter_mut().enumerate() {
            *x *= self.factors.get(i).copied().unwrap_or(ANGLE_SCALE);
        }
        v
    }

    pub fn observation(&self, obs: &Observation) -> Vec<f64> {
        self.scale(obs.to_vec())
    }
}

/// Uniform draw from the whole action space, used when nothing is allowed.
pub(crate) fn uniform_full(space: &ActionSpace, rng: &mut dyn RngCore) -> f64 {
    rng.random_range(space.min..=space.max)
}
