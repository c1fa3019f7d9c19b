//! Measured counterparts of the convergence bounds, emitted under
//! `convergence` in the run summary.

use distdd_core::analysis::{self, Constants, ConvergenceParams, FinalRate, GradientSample};
use distdd_core::data::Dataset;
use distdd_core::distill::{self, DistillConfig, DistillOutput, SyntheticDataset};
use distdd_core::flcore::RoundConfig;
use distdd_core::models::{self, Architecture, ModelSpec, ParamSet};
use distdd_core::numerics::{GradVector, Tensor};
use distdd_core::rng;
use serde::{Deserialize, Serialize};

use crate::config::ProbeConfig;
use crate::error::Result;

/// Slack allowed when checking that an inner loop never increases `D`.
pub const DESCENT_TOL: f64 = 1e-9;

pub fn non_increasing(trace: &[f64], tol: f64) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + tol)
}

/// Power-iteration steps per Hessian-norm estimate.
const POWER_ITERS: usize = 50;
/// Times `L̂` may be raised to cover the iterates of the inner loop.
const REFINEMENTS: usize = 5;

/// One full-batch inner loop on class 0 at the initial weights, against the
/// full-data class gradient. `L̂` of `∇_S D` starts as the larger of a random
/// pair probe around `S₀` and the Hessian norm at `S₀`; while some iterate
/// shows a larger Hessian norm, `L̂` is raised to it and the loop re-run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellProbe {
    /// The estimate the step size was derived from.
    pub l_hat: f64,
    /// Largest Hessian norm over `S₀, …, S_ς` of the reported loop.
    pub l_path: f64,
    pub refinements: usize,
    pub eta_s: f64,
    /// `D(S_0), …, D(S_ς)`.
    pub inner: Vec<f64>,
    pub sum_grad_sq: f64,
    pub non_increasing: bool,
    /// `(D₀ − 0)/(η_S − L̂η_S²/2)`; absent when `η_S ≥ 2/L̂`.
    pub telescope_bound: Option<f64>,
    /// Largest coordinate move away from `S₀`, to compare with the probe
    /// radius.
    pub max_displacement: f64,
}

impl CellProbe {
    pub fn within_bound(&self) -> Option<bool> {
        self.telescope_bound.map(|b| self.sum_grad_sq <= b)
    }
}

struct InnerLoop {
    iterates: Vec<Tensor>,
    inner: Vec<f64>,
    grad_sq: Vec<f64>,
}

/// Runs [`CellProbe`] with step size `eta_of_l(L̂)`.
pub fn probe_cell(
    spec: &ModelSpec,
    train: &Dataset,
    cfg: &DistillConfig,
    probe: &ProbeConfig,
    seed: u64,
    eta_of_l: impl Fn(f64) -> f64,
) -> Result<CellProbe> {
    let theta = models::init_params(spec, seed)?;
    let syn = SyntheticDataset::init_normal(train.classes(), cfg.ipc, train.dim(), seed)?;
    let class = 0;
    let idx = train.class_indices(class);
    let x = train.features().select_rows(&idx);
    let target = models::class_gradient(spec, &theta, &x, &vec![class; idx.len()])?;
    let (ipc, dim) = (cfg.ipc, train.dim());
    let start = syn.class(class).clone();
    let grad = |p: &[f64]| -> distdd_core::error::Result<Vec<f64>> {
        let rows = Tensor::matrix(ipc, dim, p.to_vec())?;
        let (_, g) = distill::distance_and_grad(spec, &theta, &rows, class, &target, cfg.distance)?;
        Ok(g.into_data())
    };
    let run = |eta_s: f64| -> Result<InnerLoop> {
        let mut r = rng::stream(seed, &[rng::PROBE, 1]);
        let mut out = InnerLoop {
            iterates: vec![start.clone()],
            inner: Vec::with_capacity(cfg.syn_steps + 1),
            grad_sq: Vec::with_capacity(cfg.syn_steps),
        };
        for _ in 0..cfg.syn_steps {
            let from = out.iterates.last().expect("starts non-empty");
            let up = distill::update_synthetic(spec, &theta, from, class, &target, 1, eta_s, ipc, cfg.distance, &mut r)?;
            if out.inner.is_empty() {
                out.inner.push(up.trace[0]);
            }
            out.inner.push(up.trace[1]);
            out.grad_sq.extend(up.grad_sq);
            out.iterates.push(up.rows);
        }
        Ok(out)
    };
    let mut l_hat = analysis::probe_smoothness(
        &grad,
        start.data(),
        probe.radius,
        probe.pairs,
        rng::derive(seed, &[rng::PROBE]),
    )?
    .max(analysis::hessian_norm(&grad, start.data(), POWER_ITERS, seed)?);
    let mut refinements = 0;
    let (eta_s, path, l_path) = loop {
        let eta_s = eta_of_l(l_hat);
        let path = run(eta_s)?;
        let mut l_path: f64 = 0.0;
        for it in &path.iterates {
            l_path = l_path.max(analysis::hessian_norm(&grad, it.data(), POWER_ITERS, seed)?);
        }
        if l_path <= l_hat || refinements == REFINEMENTS {
            break (eta_s, path, l_path);
        }
        l_hat = l_path;
        refinements += 1;
    };
    let telescope_bound = analysis::gm_telescope_bound(l_hat, eta_s, path.inner[0], 0.0).ok();
    let last = path.iterates.last().expect("starts non-empty");
    let max_displacement = last
        .data()
        .iter()
        .zip(start.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(CellProbe {
        l_hat,
        l_path,
        refinements,
        eta_s,
        non_increasing: non_increasing(&path.inner, DESCENT_TOL),
        sum_grad_sq: path.grad_sq.iter().sum(),
        inner: path.inner,
        telescope_bound,
        max_displacement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConvergence {
    /// Linear-softmax model; only then do the bounds apply.
    pub convex: bool,
    pub inner_loops: usize,
    /// Inner loops whose `D` trace never rose by more than the tolerance.
    /// Minibatched loops (`syn_batch < ipc`) see a different batch per step,
    /// so only full-batch runs are expected to descend monotonically.
    pub non_increasing_loops: usize,
    pub full_batch: bool,
    pub sum_grad_sq: f64,
    pub probe: CellProbe,
    pub probe_within_bound: Option<bool>,
}

pub fn distill_convergence(
    spec: &ModelSpec,
    train: &Dataset,
    cfg: &DistillConfig,
    probe: &ProbeConfig,
    seed: u64,
    out: &DistillOutput,
) -> Result<DistillConvergence> {
    let loops: Vec<_> = out.trace.iter().filter(|r| r.distance.is_some()).collect();
    let probe = probe_cell(spec, train, cfg, probe, seed, |_| cfg.syn_lr)?;
    Ok(DistillConvergence {
        convex: spec.arch == Architecture::Linear,
        inner_loops: loops.len(),
        non_increasing_loops: loops.iter().filter(|r| non_increasing(&r.inner, DESCENT_TOL)).count(),
        full_batch: cfg.syn_batch >= cfg.ipc,
        sum_grad_sq: loops.iter().flat_map(|r| r.grad_sq.iter()).sum(),
        probe_within_bound: probe.within_bound(),
        probe,
    })
}

/// Constants estimated along the segment from the initial to the final
/// FedAvg weights, and the bounds evaluated with them. `d` uses the length
/// of that segment in place of the unknown distance to the optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedavgConvergence {
    pub convex: bool,
    pub constants: Constants,
    pub params: ConvergenceParams,
    /// Absent when the configured `η` violates `η < 1/(4L̂)`.
    pub theorem1: Option<f64>,
    pub lemma2_drift: Option<f64>,
    pub lr_choose: f64,
    pub final_rate: FinalRate,
}

fn grad_values(spec: &ModelSpec, p: &ParamSet, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(models::class_gradient(spec, p, ds.features(), ds.labels())?.into_values())
}

pub fn fedavg_convergence(
    spec: &ModelSpec,
    train: &Dataset,
    shards: &[Dataset],
    cfg: &RoundConfig,
    init: &ParamSet,
    last: &ParamSet,
) -> Result<FedavgConvergence> {
    const POINTS: usize = 5;
    const BATCHES: usize = 8;
    let (a, b) = (init.flat(), last.flat());
    let mut samples = Vec::with_capacity(POINTS);
    for k in 0..POINTS {
        let w = k as f64 / (POINTS - 1) as f64;
        let values = a.values().iter().zip(b.values()).map(|(x, y)| x + w * (y - x)).collect();
        let p = ParamSet::from_flat(&GradVector::new(a.layout().clone(), values)?);
        let mut r = rng::stream(cfg.seed, &[rng::PROBE, 2, k as u64]);
        let mut batches = Vec::with_capacity(BATCHES);
        for _ in 0..BATCHES {
            let idx = rng::sample_indices(&mut r, train.len(), cfg.batch_size);
            batches.push(grad_values(spec, &p, &train.subset(&idx))?);
        }
        let clients = shards.iter().map(|s| grad_values(spec, &p, s)).collect::<Result<_>>()?;
        samples.push(GradientSample {
            point: p.flat().into_values(),
            full: grad_values(spec, &p, train)?,
            batches,
            clients,
        });
    }
    let constants = analysis::estimate_constants(&samples)?;
    let d = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let params = ConvergenceParams {
        // A zero estimate (e.g. identical points) would break every bound.
        l: constants.l.max(f64::MIN_POSITIVE),
        sigma: constants.sigma,
        zeta: constants.zeta,
        tau: cfg.local_steps as f64,
        m: cfg.clients as f64,
        t: cfg.rounds as f64,
        d,
        eta: cfg.client_lr,
    };
    Ok(FedavgConvergence {
        convex: spec.arch == Architecture::Linear,
        constants,
        params,
        theorem1: analysis::theorem1_bound(&params).ok(),
        lemma2_drift: analysis::lemma2_drift_bound(&params).ok(),
        lr_choose: analysis::lr_choose(&params)?,
        final_rate: analysis::final_rate_bound(&params)?,
    })
}
