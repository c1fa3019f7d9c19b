//! Per-example clipping, Gaussian noising and the single-release epsilon of
//! the Gaussian mechanism.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::GradVector;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Clipping norm `C`.
    pub clip: f64,
    /// Noise multiplier; the noise std is `noise_multiplier · clip`.
    pub noise_multiplier: f64,
    /// Failure probability `δ_dp`.
    pub delta: f64,
}

impl DpConfig {
    pub fn problems(&self) -> Vec<(&'static str, &'static str)> {
        let mut out = Vec::new();
        if !(self.clip.is_finite() && self.clip > 0.0) {
            out.push(("clip", "must be positive and finite"));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            out.push(("noise_multiplier", "must be non-negative and finite"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push(("delta", "must lie in (0, 1)"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            Some(&(field, reason)) => Err(Error::invalid(field, reason)),
            None => Ok(()),
        }
    }

    /// Absolute noise std `σ_dp · C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip
    }

    /// Per-message epsilon for this configuration.
    pub fn epsilon(&self) -> Result<f64> {
        epsilon(self.clip, self.noise_std(), self.delta)
    }
}

/// `g / max(1, ‖g‖ / C)`. Vectors already inside the ball come back
/// untouched.
pub fn clip_grad(g: &GradVector, clip: f64) -> GradVector {
    let norm = g.norm();
    if norm <= clip {
        return g.clone();
    }
    let factor = clip / norm;
    let out = g.scale(factor);
    // Rounding can land a hair outside the ball; shrink by one ulp until
    // the norm bound holds so clipping stays idempotent.
    if out.norm() > clip {
        let mut f = factor;
        loop {
            f = f64::from_bits(f.to_bits() - 1);
            let o = g.scale(f);
            if o.norm() <= clip {
                return o;
            }
        }
    }
    out
}

/// `(Σ_j clip(g_j) + N(0, σ²C²I)) / n`. The noise stream is
/// `rng::stream(seed, [DP_NOISE])`.
pub fn dp_class_grad(per_example: &[GradVector], clip: f64, noise_multiplier: f64, seed: u64) -> Result<GradVector> {
    let first = per_example.first().ok_or(Error::Empty("per-example gradients"))?;
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::invalid("clip", "must be positive"));
    }
    let mut acc = clip_grad(first, clip).into_values();
    for g in &per_example[1..] {
        first.check_layout(g)?;
        for (a, v) in acc.iter_mut().zip(clip_grad(g, clip).values()) {
            *a += v;
        }
    }
    if noise_multiplier > 0.0 {
        let std = noise_multiplier * clip;
        let mut r = rng::stream(seed, &[rng::DP_NOISE]);
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *a += std * z;
        }
    }
    let n = per_example.len() as f64;
    let out = GradVector::new(first.layout().clone(), acc.into_iter().map(|a| a / n).collect())?;
    if !out.is_finite() {
        return Err(Error::NonFinite("dp_class_grad"));
    }
    Ok(out)
}

/// `ε = √(2 ln(1.25/δ)) · 2C / σ` with sensitivity `2C` and absolute noise
/// std `σ`. A zero `σ` gives [`Error::InfiniteEpsilon`].
pub fn epsilon(clip: f64, noise_std: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition("delta must lie in (0, 1)".into()));
    }
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::Precondition("clip must be positive".into()));
    }
    if noise_std == 0.0 {
        return Err(Error::InfiniteEpsilon);
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(Error::Precondition("noise std must be positive".into()));
    }
    Ok(libm::sqrt(2.0 * libm::log(1.25 / delta)) * 2.0 * clip / noise_std)
}
