use crate::error::{Error, Result};

/// One-cycle learning-rate schedule: cosine ramp from `floor` up to `peak`
/// over the warm-up fraction, then cosine decay back to `floor`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    /// Floor as a fraction of `peak`.
    pub floor_fraction: f64,
}

impl LrSchedule {
    pub fn one_cycle(peak: f64, total_steps: u64) -> Self {
        Self {
            peak,
            total_steps,
            warmup_fraction: 0.30,
            floor_fraction: 1.0 / 25.0,
        }
    }

    pub fn floor(&self) -> f64 {
        self.peak * self.floor_fraction
    }

    fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Learning rate at `step` (0 ≤ step ≤ total).
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Range(format!(
                "schedule step {step} (total {})",
                self.total_steps
            )));
        }
        let (floor, peak) = (self.floor(), self.peak);
        let s = step as f64;
        let warm = self.warmup_steps();
        let total = self.total_steps as f64;
        let lr = if self.total_steps == 0 {
            peak
        } else if s <= warm {
            let frac = if warm > 0.0 { s / warm } else { 1.0 };
            floor + (peak - floor) * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos())
        } else {
            let frac = (s - warm) / (total - warm);
            floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        Ok(lr)
    }

    /// Largest possible |lr(s+1) − lr(s)|: the steepest point of the shorter cosine half.
    pub fn max_step_change(&self) -> f64 {
        let warm = self.warmup_steps();
        let decay = self.total_steps as f64 - warm;
        let shortest = warm.min(decay).max(1.0);
        (self.peak - self.floor()) * std::f64::consts::PI / (2.0 * shortest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apex_and_endpoints() {
        let s = LrSchedule::one_cycle(1e-3, 1000);
        assert!((s.lr(300).unwrap() - 1e-3).abs() < 1e-18);
        assert!((s.lr(0).unwrap() - 1e-3 / 25.0).abs() < 1e-18);
        assert!((s.lr(1000).unwrap() - 1e-3 / 25.0).abs() < 1e-18);
        assert!(s.lr(1001).is_err());
    }

    #[test]
    fn positive_and_continuous_scan() {
        let s = LrSchedule::one_cycle(1e-3, 1000);
        let bound = s.max_step_change();
        let mut prev = s.lr(0).unwrap();
        for step in 1..=1000 {
            let lr = s.lr(step).unwrap();
            assert!(lr > 0.0);
            assert!((lr - prev).abs() <= bound * (1.0 + 1e-9), "jump at {step}");
            prev = lr;
        }
        // Steepest warm-up step: 0.96·peak·π/600 ≈ 5.03·peak/total.
        assert!((bound - 0.96e-3 * std::f64::consts::PI / 600.0).abs() < 1e-15);
    }
}
