use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step variance increments `beta_t` and their cumulative products
/// `alpha_bar_t = prod_{s<=t} (1 - beta_s)`. Timesteps are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        Self::from_betas(r.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::validation("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Linear schedule whose endpoints `1e-4 -> 0.02` are rescaled by
    /// `1000 / steps`, so short chains still end near pure noise.
    pub fn linear_scaled(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::validation("schedule needs at least one timestep"));
        }
        let scale = 1000.0 / steps as f64;
        Self::linear(steps, 1e-4 * scale, (0.02 * scale).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::validation("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::validation(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || acc <= 0.0 {
            return Err(Error::validation(
                "betas too small to keep alpha_bar strictly decreasing",
            ));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                what: "diffusion timestep",
                index: t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// `beta_t` for 1-based `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bars(), &[0.9]);
    }

    #[test]
    fn two_steps() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(2), 0.9 * 0.8);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, -0.1]).is_err());
    }

    #[test]
    fn long_schedule_matches_product_loop() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=200 {
            let b = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 199.0;
            prod *= 1.0 - b;
        }
        assert!((s.alpha_bar(200) - prod).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn scaled_schedule_ends_near_noise() {
        let s = NoiseSchedule::linear_scaled(200).unwrap();
        assert!((s.beta(1) - 5e-4).abs() < 1e-15);
        assert!((s.beta(200) - 0.1).abs() < 1e-12);
        assert!(s.alpha_bar(200) < 1e-3);
        let full = NoiseSchedule::linear_scaled(1000).unwrap();
        assert_eq!(full, NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap());
    }

    #[test]
    fn index_errors() {
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(6).is_err());
        assert!(s.check_step(5).is_ok());
    }

    #[test]
    fn serde_round_trip_recomputes_products() {
        let s = NoiseSchedule::linear(7, 0.01, 0.3).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
