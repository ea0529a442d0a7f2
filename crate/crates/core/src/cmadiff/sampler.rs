//! Reverse-process samplers with classifier-free guidance.

use serde::{Deserialize, Serialize};
use tensor::Rng;

use super::schedule::NoiseSchedule;
use super::tokens::ObjectCond;
use crate::error::Result;
use crate::image::NUMEL;

/// One noise-prediction request: the noisy image (`[16, 16, 3]` values), the
/// objects to condition on (empty for the unconditional estimate) and the
/// cells the caller will read from the answer.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub z: &'a [f64],
    pub objects: &'a [ObjectCond],
    /// Per-pixel flags (`16 * 16`), `None` meaning the whole canvas.
    pub region: Option<&'a [bool]>,
}

/// Anything that predicts the noise in a batch of images at timestep `t`.
pub trait NoisePredictor {
    fn predict(&self, t: usize, queries: &[Query]) -> Result<Vec<Vec<f64>>>;

    /// Whether answers depend on `Query::region`. When false, callers may
    /// share one unconditional query among several regions.
    fn depends_on_region(&self) -> bool {
        false
    }
}

/// `(1 - s) * uncond + s * cond`, which returns each input exactly at `s = 0`
/// and `s = 1`.
pub fn guide(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| (1.0 - scale) * u + scale * c).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Noise-free update (`eta = 0`).
    Deterministic,
    /// Stochastic update with fresh noise each step (`eta = 1`).
    Ancestral,
}

/// Coefficients of one reverse step from `t` to `t_prev`.
#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub t: usize,
    pub t_prev: usize,
    ab: f64,
    ab_prev: f64,
    sigma: f64,
}

impl Step {
    pub fn new(s: &NoiseSchedule, t: usize, t_prev: usize, kind: SamplerKind) -> Self {
        let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
        let sigma = match kind {
            SamplerKind::Deterministic => 0.0,
            SamplerKind::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt(),
        };
        Self {
            t,
            t_prev,
            ab,
            ab_prev,
            sigma,
        }
    }

    /// Updates one value given its noise estimate and (for ancestral steps)
    /// a standard normal draw. The implied clean value is clipped to
    /// `[-1, 1]` and the noise estimate made consistent with it.
    pub fn apply(&self, z: f64, eps: f64, noise: f64) -> f64 {
        let (sa, s1) = (self.ab.sqrt(), (1.0 - self.ab).sqrt());
        let x0 = ((z - s1 * eps) / sa).clamp(-1.0, 1.0);
        let eps = (z - sa * x0) / s1;
        let dir = (1.0 - self.ab_prev - self.sigma * self.sigma).max(0.0).sqrt();
        self.ab_prev.sqrt() * x0 + dir * eps + self.sigma * noise
    }

    pub fn is_stochastic(&self) -> bool {
        self.sigma > 0.0
    }
}

/// The `(t, t_prev)` pairs of an `n`-step run, ending at `t_prev = 0`.
pub fn step_pairs(s: &NoiseSchedule, n: usize) -> Vec<(usize, usize)> {
    let ts = s.strided(n);
    ts.iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub kind: SamplerKind,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 7.5,
            kind: SamplerKind::Deterministic,
        }
    }
}

/// Generates an image (values in `[-1, 1]`) conditioned on `objects`.
///
/// The stream `Rng::new(seed)` supplies the initial canvas, then one fresh
/// canvas of noise per ancestral step.
pub fn sample(
    pred: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    objects: &[ObjectCond],
    opts: &SampleOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let mut z = rng.normal_vec(NUMEL);
    for (t, t_prev) in step_pairs(sched, opts.steps) {
        let step = Step::new(sched, t, t_prev, opts.kind);
        let out = pred.predict(
            t,
            &[
                Query {
                    z: &z,
                    objects,
                    region: None,
                },
                Query {
                    z: &z,
                    objects: &[],
                    region: None,
                },
            ],
        )?;
        let eps = guide(&out[0], &out[1], opts.cfg_scale);
        let noise = if step.is_stochastic() {
            rng.normal_vec(NUMEL)
        } else {
            vec![0.0; NUMEL]
        };
        z = z
            .iter()
            .zip(&eps)
            .zip(&noise)
            .map(|((&z, &e), &n)| step.apply(z, e, n))
            .collect();
    }
    Ok(z)
}
