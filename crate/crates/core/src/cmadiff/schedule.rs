//! Linear variance schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

/// `beta_t` linear in `t = 1..=T`, `alpha_bar_t = prod_{s<=t} (1 - beta_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = cfg;
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Constraint(format!("invalid noise schedule {cfg:?}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn add_noise(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if z0.len() != eps.len() {
            return Err(Error::LengthMismatch {
                what: "add_noise",
                left: z0.len(),
                right: eps.len(),
            });
        }
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }

    /// Timesteps visited by a sampler with `n` steps: `round((n - k) T / n)`
    /// for `k = 0..n`, strictly decreasing from `T`.
    pub fn strided(&self, n: usize) -> Vec<usize> {
        let t = self.steps();
        let n = n.clamp(1, t);
        let mut out: Vec<usize> = (0..n)
            .map(|k| (((n - k) as f64) * t as f64 / n as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensor::Rng;

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 200);
        assert_eq!(s.beta(1), 1e-4);
        for t in 1..=s.steps() {
            let (a, b) = (s.alpha_bar(t - 1), s.alpha_bar(t));
            assert!(b < a && b > 0.0);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
    }

    #[test]
    fn first_step_is_nearly_identity() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(1);
        let z0 = rng.normal_vec(768);
        let eps = rng.normal_vec(768);
        let z1 = s.add_noise(&z0, 1, &eps).unwrap();
        for ((a, b), e) in z1.iter().zip(&z0).zip(&eps) {
            assert!((a - b).abs() <= 1e-2 * (b.abs() + e.abs()));
        }
    }

    #[test]
    fn zero_noise_scales_exactly() {
        let s = NoiseSchedule::default();
        let z0 = [0.3, -0.7, 1.0];
        for t in [1, 57, 200] {
            let z = s.add_noise(&z0, t, &[0.0; 3]).unwrap();
            let a = s.alpha_bar(t).sqrt();
            assert_eq!(z, z0.map(|v| a * v).to_vec());
        }
        assert!(matches!(s.add_noise(&z0, 0, &[0.0; 3]), Err(Error::Timestep { t: 0, .. })));
        assert!(s.add_noise(&z0, 201, &[0.0; 3]).is_err());
    }

    #[test]
    fn terminal_marginal_has_unit_variance() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(2);
        let n = 100_000;
        let eps = rng.normal_vec(n);
        let z = s.add_noise(&vec![0.0; n], s.steps(), &eps).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn perfect_denoise_recovers_input() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(3);
        let z0 = rng.normal_vec(64);
        let eps = rng.normal_vec(64);
        let t = 120;
        let zt = s.add_noise(&z0, t, &eps).unwrap();
        let ab = s.alpha_bar(t);
        for ((z, e), want) in zt.iter().zip(&eps).zip(&z0) {
            let x0 = (z - (1.0 - ab).sqrt() * e) / ab.sqrt();
            assert!((x0 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_steps() {
        let s = NoiseSchedule::default();
        let ts = s.strided(50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 200);
        assert_eq!(*ts.last().unwrap(), 4);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.strided(1), vec![200]);
    }
}
