//! Convergence-bound evaluators for local-SGD federated training and for
//! gradient descent on the matching loss, plus empirical estimators of the
//! constants they need.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Constants of the local-SGD analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams {
    /// Smoothness `L`.
    pub l: f64,
    /// Stochastic-gradient variance bound `σ_var`.
    pub sigma: f64,
    /// Heterogeneity bound `ζ`.
    pub zeta: f64,
    /// Local steps `τ`.
    pub tau: f64,
    /// Client population `M`.
    pub m: f64,
    /// Rounds `T`.
    pub t: f64,
    /// Initial distance `𝔻 = ‖x⁽⁰'⁰⁾ − x*‖`.
    pub d: f64,
    /// Client learning rate `η`.
    pub eta: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(alloc::format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(alloc::format!("{name} must be non-negative, got {v}")))
    }
}

impl ConvergenceParams {
    fn check_shape(&self) -> Result<()> {
        positive("L", self.l)?;
        positive("tau", self.tau)?;
        positive("M", self.m)?;
        positive("T", self.t)?;
        non_negative("sigma", self.sigma)?;
        non_negative("zeta", self.zeta)?;
        non_negative("D", self.d)
    }

    fn check_eta(&self) -> Result<()> {
        self.check_shape()?;
        positive("eta", self.eta)?;
        if self.eta < 1.0 / (4.0 * self.l) {
            Ok(())
        } else {
            Err(Error::Precondition(alloc::format!(
                "eta = {} must be below 1/(4L) = {}",
                self.eta,
                1.0 / (4.0 * self.l)
            )))
        }
    }

    pub fn with_eta(self, eta: f64) -> Self {
        Self { eta, ..self }
    }
}

/// `𝔻²/(2ητT) + ησ²/M + 4τη²Lσ² + 18τ²η²Lζ²`, requiring `η < 1/(4L)`.
pub fn theorem1_bound(p: &ConvergenceParams) -> Result<f64> {
    p.check_eta()?;
    let ConvergenceParams {
        l,
        sigma,
        zeta,
        tau,
        m,
        t,
        d,
        eta,
    } = *p;
    Ok(d * d / (2.0 * eta * tau * t)
        + eta * sigma * sigma / m
        + 4.0 * tau * eta * eta * l * sigma * sigma
        + 18.0 * tau * tau * eta * eta * l * zeta * zeta)
}

/// The four step-size candidates; a vanishing `σ` or `ζ` makes its
/// candidates infinite.
pub fn lr_candidates(p: &ConvergenceParams) -> Result<[f64; 4]> {
    p.check_shape()?;
    let ConvergenceParams {
        l,
        sigma,
        zeta,
        tau,
        m,
        t,
        d,
        ..
    } = *p;
    let cbrt = libm::cbrt;
    let d23 = cbrt(d * d);
    let (c2, c3) = if sigma == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (
            libm::sqrt(m) * d / (libm::sqrt(tau) * libm::sqrt(t) * sigma),
            d23 / (cbrt(tau * tau) * cbrt(t) * cbrt(l) * cbrt(sigma * sigma)),
        )
    };
    let c4 = if zeta == 0.0 {
        f64::INFINITY
    } else {
        d23 / (tau * cbrt(t) * cbrt(l) * cbrt(zeta * zeta))
    };
    Ok([1.0 / (4.0 * l), c2, c3, c4])
}

/// Minimum of [`lr_candidates`]. The `η` field of `p` is ignored.
pub fn lr_choose(p: &ConvergenceParams) -> Result<f64> {
    Ok(lr_candidates(p)?.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRate {
    /// `2L𝔻²/(τT)`
    pub sync_smooth: f64,
    /// `2σ𝔻/√(MτT)`
    pub sync_noise: f64,
    /// `5L^{1/3}σ^{2/3}𝔻^{4/3}/(τ^{1/3}T^{2/3})`
    pub local_noise: f64,
    /// `19L^{1/3}ζ^{2/3}𝔻^{4/3}/T^{2/3}`
    pub local_heterogeneity: f64,
    pub total: f64,
}

/// The rate reached with the chosen step size, term by term.
pub fn final_rate_bound(p: &ConvergenceParams) -> Result<FinalRate> {
    p.check_shape()?;
    let ConvergenceParams {
        l,
        sigma,
        zeta,
        tau,
        m,
        t,
        d,
        ..
    } = *p;
    let cbrt = libm::cbrt;
    let d43 = cbrt(d * d * d * d);
    let t23 = cbrt(t * t);
    let sync_smooth = 2.0 * l * d * d / (tau * t);
    let sync_noise = 2.0 * sigma * d / libm::sqrt(m * tau * t);
    let local_noise = 5.0 * cbrt(l) * cbrt(sigma * sigma) * d43 / (cbrt(tau) * t23);
    let local_heterogeneity = 19.0 * cbrt(l) * cbrt(zeta * zeta) * d43 / t23;
    Ok(FinalRate {
        sync_smooth,
        sync_noise,
        local_noise,
        local_heterogeneity,
        total: sync_smooth + sync_noise + local_noise + local_heterogeneity,
    })
}

/// Right-hand side of the per-round progress bound:
/// `(d0 − dτ)/(2ητ) + ησ²/M + (L/(Mτ)) · drift_sum`, where `d0`, `dτ` are the
/// squared distances of the shadow iterate to the optimum at the start and
/// end of the round and `drift_sum` is `Σ_i Σ_k ‖x_i^k − x̄^k‖²`.
pub fn lemma1_rhs(p: &ConvergenceParams, d0_sq: f64, dtau_sq: f64, drift_sum: f64) -> Result<f64> {
    p.check_eta()?;
    Ok((d0_sq - dtau_sq) / (2.0 * p.eta * p.tau)
        + p.eta * p.sigma * p.sigma / p.m
        + p.l / (p.m * p.tau) * drift_sum)
}

/// `18τ²η²ζ² + 4τη²σ²`, requiring `η < 1/(4L)`.
pub fn lemma2_drift_bound(p: &ConvergenceParams) -> Result<f64> {
    p.check_eta()?;
    let (tau, eta) = (p.tau, p.eta);
    Ok(18.0 * tau * tau * eta * eta * p.zeta * p.zeta + 4.0 * tau * eta * eta * p.sigma * p.sigma)
}

/// `(D₀ − D*)/(η_S − L η_S²/2)`, bounding `Σ_t ‖∇D(S_t)‖²` for
/// `0 < η_S < 2/L`.
pub fn gm_telescope_bound(l_gm: f64, eta_s: f64, d0: f64, dstar: f64) -> Result<f64> {
    positive("L_gm", l_gm)?;
    if !(eta_s > 0.0 && eta_s < 2.0 / l_gm) {
        return Err(Error::Precondition(alloc::format!(
            "eta_S = {eta_s} must lie in (0, 2/L) = (0, {})",
            2.0 / l_gm
        )));
    }
    if d0.is_nan() || dstar.is_nan() || d0 < dstar {
        return Err(Error::Precondition("D0 must not be below D*".into()));
    }
    Ok((d0 - dstar) / (eta_s - l_gm * eta_s * eta_s / 2.0))
}

/// Gradients observed at one parameter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSample {
    pub point: Vec<f64>,
    /// Full-data gradient `∇F(x)`.
    pub full: Vec<f64>,
    /// Mini-batch gradients at `x`.
    pub batches: Vec<Vec<f64>>,
    /// Per-client full gradients `∇F_i(x)`.
    pub clients: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub l: f64,
    pub sigma: f64,
    pub zeta: f64,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(dist_sq(a, b))
}

/// `L̂` as the largest `‖∇F(a) − ∇F(b)‖/‖a − b‖` over sample pairs, `σ̂` as
/// the largest batch deviation from the full gradient and `ζ̂` as the
/// largest client deviation.
pub fn estimate_constants(samples: &[GradientSample]) -> Result<Constants> {
    if samples.len() < 2 {
        return Err(Error::Precondition("need at least two sample points".into()));
    }
    let mut l: f64 = 0.0;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let dx = dist(&a.point, &b.point);
            if dx > 0.0 {
                l = l.max(dist(&a.full, &b.full) / dx);
            }
        }
    }
    let dev = |s: &GradientSample, set: &[Vec<f64>]| set.iter().fold(0.0f64, |m, g| m.max(dist(g, &s.full)));
    let sigma = samples.iter().fold(0.0f64, |m, s| m.max(dev(s, &s.batches)));
    let zeta = samples.iter().fold(0.0f64, |m, s| m.max(dev(s, &s.clients)));
    Ok(Constants { l, sigma, zeta })
}

/// Largest gradient-difference ratio over `pairs` random point pairs drawn
/// uniformly from the box `center ± radius`.
pub fn probe_smoothness(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    center: &[f64],
    radius: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pairs == 0 || center.is_empty() {
        return Err(Error::Precondition("need at least one probe pair".into()));
    }
    let mut r = rng::stream(seed, &[rng::PROBE]);
    let draw = |r: &mut rng::Rng| -> Vec<f64> {
        center.iter().map(|c| c + radius * (2.0 * r.random::<f64>() - 1.0)).collect()
    };
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let a = draw(&mut r);
        let b = draw(&mut r);
        let dx = dist(&a, &b);
        if dx > 0.0 {
            best = best.max(dist(&grad(&a)?, &grad(&b)?) / dx);
        }
    }
    Ok(best)
}

/// Largest absolute Hessian eigenvalue at `point`, by power iteration on
/// central-difference Hessian-vector products of `grad`. Random pairs
/// rarely line up with the top eigenvector, so this is the sharper local
/// smoothness estimate in more than a few dimensions.
pub fn hessian_norm(
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    point: &[f64],
    iters: usize,
    seed: u64,
) -> Result<f64> {
    const H: f64 = 1e-5;
    if iters == 0 || point.is_empty() {
        return Err(Error::Precondition("need a point and at least one iteration".into()));
    }
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let mut r = rng::stream(seed, &[rng::PROBE, 3]);
    let mut v: Vec<f64> = point.iter().map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let n = norm(&v);
        if n == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let shifted = |s: f64| -> Vec<f64> { point.iter().zip(&v).map(|(p, d)| p + s * d).collect() };
        let up = grad(&shifted(H))?;
        let down = grad(&shifted(-H))?;
        v = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * H)).collect();
        lambda = norm(&v);
    }
    Ok(lambda)
}

/// Clients with local objectives `F_i(x) = ½λ‖x − c_i‖²` and stochastic
/// gradients perturbed by sign noise of norm exactly `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFederation {
    pub lambda: f64,
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
}

/// Drift recorded by [`QuadraticFederation::local_round`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `max_i ‖x_i^k − x̄^k‖²` for `k = 0..=τ`.
    pub per_step: Vec<f64>,
    /// `Σ_i Σ_{k<τ} ‖x_i^k − x̄^k‖²`.
    pub sum: f64,
    pub max: f64,
    pub shadow_start: Vec<f64>,
    pub shadow_end: Vec<f64>,
}

impl QuadraticFederation {
    pub fn clients(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Minimizer of the average objective: the mean center.
    pub fn optimum(&self) -> Vec<f64> {
        let m = self.clients() as f64;
        (0..self.dim())
            .map(|j| self.centers.iter().map(|c| c[j]).sum::<f64>() / m)
            .collect()
    }

    /// `ζ = λ · max_i ‖c_i − c̄‖`, exact since `∇F_i − ∇F` is constant.
    pub fn zeta(&self) -> f64 {
        let opt = self.optimum();
        self.lambda * self.centers.iter().fold(0.0f64, |m, c| m.max(dist(c, &opt)))
    }

    pub fn params(&self, tau: usize, rounds: usize, eta: f64, start: &[f64]) -> ConvergenceParams {
        ConvergenceParams {
            l: self.lambda,
            sigma: self.sigma,
            zeta: self.zeta(),
            tau: tau as f64,
            m: self.clients() as f64,
            t: rounds as f64,
            d: dist(start, &self.optimum()),
            eta,
        }
    }

    /// `τ` local SGD steps of every client from the shared point `x0`.
    pub fn local_round(&self, x0: &[f64], tau: usize, eta: f64, seed: u64) -> DriftReport {
        let d = self.dim();
        let m = self.clients();
        let mut r = rng::stream(seed, &[rng::PROBE, 1]);
        let coord = if d == 0 { 0.0 } else { self.sigma / libm::sqrt(d as f64) };
        let mut xs: Vec<Vec<f64>> = alloc::vec![x0.to_vec(); m];
        let mut per_step = Vec::with_capacity(tau + 1);
        let mut sum = 0.0;
        let shadow = |xs: &[Vec<f64>]| -> Vec<f64> {
            (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / m as f64).collect()
        };
        for k in 0..=tau {
            let bar = shadow(&xs);
            let devs: Vec<f64> = xs.iter().map(|x| dist_sq(x, &bar)).collect();
            per_step.push(devs.iter().fold(0.0f64, |a, &b| a.max(b)));
            if k == tau {
                break;
            }
            sum += devs.iter().sum::<f64>();
            for (x, c) in xs.iter_mut().zip(&self.centers) {
                for j in 0..d {
                    let noise = if r.random::<bool>() { coord } else { -coord };
                    x[j] -= eta * (self.lambda * (x[j] - c[j]) + noise);
                }
            }
        }
        DriftReport {
            max: per_step.iter().fold(0.0f64, |a, &b| a.max(b)),
            per_step,
            sum,
            shadow_start: x0.to_vec(),
            shadow_end: shadow(&xs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn example() -> ConvergenceParams {
        ConvergenceParams {
            l: 1.0,
            sigma: 1.0,
            zeta: 1.0,
            tau: 5.0,
            m: 4.0,
            t: 100.0,
            d: 1.0,
            eta: 0.04,
        }
    }

    #[test]
    fn theorem1_examples() {
        let b = theorem1_bound(&example()).unwrap();
        assert!((b - 0.787).abs() < 1e-12, "{b}");
        let quiet = ConvergenceParams {
            sigma: 0.0,
            zeta: 0.0,
            ..example()
        };
        assert_eq!(theorem1_bound(&quiet).unwrap(), 1.0 / (2.0 * 0.04 * 5.0 * 100.0));
        assert!(theorem1_bound(&example().with_eta(0.25)).is_err());
    }

    #[test]
    fn theorem1_decreases_with_doubling_t() {
        let mut prev = f64::INFINITY;
        let mut t = 100.0;
        while t <= 1e6 {
            let p = ConvergenceParams { t, ..example() };
            let b = theorem1_bound(&p.with_eta(lr_choose(&p).unwrap())).unwrap();
            assert!(b < prev);
            prev = b;
            t *= 2.0;
        }
    }

    #[test]
    fn lr_choose_examples() {
        let c = lr_candidates(&example()).unwrap();
        let expect = [0.25, 0.08944, 0.07368, 0.04309];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 5e-6, "{a} vs {b}");
        }
        assert_eq!(lr_choose(&example()).unwrap(), c[3]);
        let quiet = ConvergenceParams {
            sigma: 0.0,
            zeta: 0.0,
            ..example()
        };
        assert_eq!(lr_choose(&quiet).unwrap(), 0.25);
        let far = ConvergenceParams { d: 8.0, ..example() };
        let cf = lr_candidates(&far).unwrap();
        for (k, s) in [(1, 8.0), (2, 4.0), (3, 4.0)] {
            assert!((cf[k] / c[k] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn final_rate_examples() {
        let unit = ConvergenceParams {
            l: 1.0,
            sigma: 1.0,
            zeta: 1.0,
            tau: 1.0,
            m: 1.0,
            t: 1.0,
            d: 1.0,
            eta: 0.1,
        };
        let r = final_rate_bound(&unit).unwrap();
        assert_eq!(
            [r.sync_smooth, r.sync_noise, r.local_noise, r.local_heterogeneity, r.total],
            [2.0, 2.0, 5.0, 19.0, 28.0]
        );
        let flat = final_rate_bound(&ConvergenceParams { zeta: 0.0, ..unit }).unwrap();
        assert_eq!(flat.local_heterogeneity, 0.0);
        let mut prev = f64::INFINITY;
        for t in [10.0, 1e2, 1e3, 1e4, 1e5, 1e6] {
            let total = final_rate_bound(&ConvergenceParams { t, ..example() }).unwrap().total;
            assert!(total < prev);
            prev = total;
        }
    }

    #[test]
    fn lemma_examples() {
        let p = ConvergenceParams {
            tau: 2.0,
            eta: 0.1,
            ..example()
        };
        assert!((lemma2_drift_bound(&p).unwrap() - 0.8).abs() < 1e-12);
        let quiet = ConvergenceParams {
            sigma: 0.0,
            zeta: 0.0,
            ..p
        };
        assert_eq!(lemma2_drift_bound(&quiet).unwrap(), 0.0);
        assert!(lemma2_drift_bound(&p.with_eta(0.3)).is_err());
        let rhs = lemma1_rhs(&p, 2.0, 1.0, 0.5).unwrap();
        assert!((rhs - (1.0 / 0.4 + 0.1 / 4.0 + 1.0 / 8.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn telescope_examples() {
        assert_eq!(gm_telescope_bound(1.0, 1.0, 10.0, 0.0).unwrap(), 20.0);
        assert!(gm_telescope_bound(1.0, 2.0, 10.0, 0.0).is_err());
        assert!(gm_telescope_bound(1.0, 0.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn quadratic_smoothness_is_lambda() {
        let lambda = 3.5;
        let l = probe_smoothness(|x| Ok(x.iter().map(|v| lambda * v).collect()), &[0.0; 4], 1.0, 1000, 0).unwrap();
        assert!((l / lambda - 1.0).abs() < 0.05);
    }

    #[test]
    fn hessian_norm_finds_the_top_eigenvalue() {
        // diag(1, 1, 1, 9): random pairs see a blend, power iteration sees 9.
        let scales = [1.0, 1.0, 1.0, 9.0];
        let grad = |x: &[f64]| Ok(x.iter().zip(&scales).map(|(v, s)| s * v).collect());
        let l = hessian_norm(grad, &[0.3; 4], 100, 0).unwrap();
        assert!((l - 9.0).abs() < 1e-6, "{l}");
        assert!(hessian_norm(grad, &[], 10, 0).is_err());
    }

    #[test]
    fn degenerate_and_zero_constants() {
        let s = GradientSample {
            point: vec![0.0],
            full: vec![1.0],
            batches: vec![vec![1.0]],
            clients: vec![vec![1.0]],
        };
        assert!(estimate_constants(core::slice::from_ref(&s)).is_err());
        let t = GradientSample {
            point: vec![1.0],
            full: vec![3.0],
            batches: vec![vec![3.0]],
            clients: vec![vec![3.0]],
        };
        let c = estimate_constants(&[s, t]).unwrap();
        assert_eq!(c, Constants { l: 2.0, sigma: 0.0, zeta: 0.0 });
    }

    #[test]
    fn drift_stays_under_lemma2() {
        for seed in 0..20u64 {
            let mut r = rng::stream(seed, &[]);
            let centers: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random::<f64>()).collect()).collect();
            let fed = QuadraticFederation {
                lambda: 2.0,
                centers,
                sigma: 0.5,
            };
            let p = fed.params(5, 1, 0.1, &[0.0; 3]);
            let report = fed.local_round(&[0.0; 3], 5, 0.1, seed);
            assert!(report.max <= lemma2_drift_bound(&p).unwrap());
        }
    }
}
