use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear decay from `initial` to `final` over `steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub steps: u64,
}

impl Linear {
    pub fn new(initial: f64, final_value: f64, steps: u64) -> Result<Self> {
        let s = Self {
            initial,
            final_value,
            steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(value: f64) -> Self {
        Self {
            initial: value,
            final_value: value,
            steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.final_value.is_finite()) || self.final_value < 0.0 {
            return Err(Error::InvalidArgument(
                "schedule values must be finite and non-negative".into(),
            ));
        }
        if self.final_value > self.initial {
            return Err(Error::InvalidArgument(format!(
                "schedule must not increase ({} -> {})",
                self.initial, self.final_value
            )));
        }
        Ok(())
    }

    pub fn value(&self, t: u64) -> f64 {
        if t >= self.steps {
            return self.final_value;
        }
        let frac = t as f64 / self.steps as f64;
        self.initial + (self.final_value - self.initial) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        let s = Linear::new(0.8, 0.01, 50_000).unwrap();
        assert_eq!(s.value(0), 0.8);
        assert_eq!(s.value(50_000), 0.01);
        assert_eq!(s.value(1_000_000), 0.01);
        assert!((s.value(25_000) - 0.405).abs() < 1e-12);
    }

    #[test]
    fn rejects_increasing() {
        assert!(Linear::new(0.1, 0.5, 10).is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_floored(init in 0.0..30.0f64, frac in 0.0..1.0f64, steps in 1u64..100_000, t in 0u64..200_000) {
            let s = Linear::new(init, init * frac, steps).unwrap();
            prop_assert!(s.value(t + 1) <= s.value(t));
            prop_assert!(s.value(t) >= s.final_value);
            prop_assert_eq!(s.value(steps), s.final_value);
        }
    }
}
