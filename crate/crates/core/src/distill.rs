//! Federated gradient-matching distillation: clients upload per-class
//! gradients at the server's current weights, the server moves its synthetic
//! examples so their gradient matches the aggregate, then trains the weights
//! on the synthetic set.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::flcore::{self, Aggregation, CostLedger, Direction, GradMessage, RoundConfig};
use crate::models::{self, ModelSpec, ParamSet, TrainConfig};
use crate::numerics::{GradVector, Tape, Tensor, Var};
use crate::privacy::{self, DpConfig};
use crate::rng::{self, Rng};

/// Ledger phase name for distillation traffic.
pub const PHASE: &str = "distill";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `‖G − g‖²` over the whole parameter vector.
    #[default]
    SqL2,
    /// `Σ_l (1 − cos(G_l, g_l))` over parameter tensors.
    LayerwiseCosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynInit {
    /// i.i.d. `N(0.5, 0.25²)` clipped into `[0, 1]`.
    #[default]
    Normal,
    /// Random real samples of each class. Needs raw client data at the
    /// server, so it is only meant for comparisons.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub rounds: usize,
    /// Synthetic-set steps `ς_S` per class per round.
    pub syn_steps: usize,
    /// Weight steps `ς_θ` per round. Zero leaves the weights fixed.
    pub theta_steps: usize,
    pub syn_lr: f64,
    pub theta_lr: f64,
    /// Client batch size `|B^T|`.
    pub real_batch: usize,
    /// Synthetic batch size `|B^S|` for matching.
    pub syn_batch: usize,
    /// Batch size for the weight update on the whole synthetic set.
    pub theta_batch: usize,
    pub ipc: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Multiply the median by the number of contributors so it is on the
    /// scale of a sum.
    #[serde(default)]
    pub median_rescale: bool,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub init: SynInit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            syn_steps: 10,
            theta_steps: 10,
            syn_lr: 0.1,
            theta_lr: 0.1,
            real_batch: 32,
            syn_batch: 10,
            theta_batch: 30,
            ipc: 10,
            aggregation: Aggregation::Sum,
            median_rescale: false,
            dp: None,
            distance: Distance::SqL2,
            init: SynInit::Normal,
        }
    }
}

impl DistillConfig {
    pub fn problems(&self) -> Vec<(&'static str, &'static str)> {
        let mut out = Vec::new();
        for (name, v) in [
            ("rounds", self.rounds),
            ("syn_steps", self.syn_steps),
            ("real_batch", self.real_batch),
            ("syn_batch", self.syn_batch),
            ("theta_batch", self.theta_batch),
            ("ipc", self.ipc),
        ] {
            if v == 0 {
                out.push((name, "must be positive"));
            }
        }
        for (name, v) in [("syn_lr", self.syn_lr), ("theta_lr", self.theta_lr)] {
            if !(v.is_finite() && v > 0.0) {
                out.push((name, "must be positive and finite"));
            }
        }
        if let Some(dp) = &self.dp {
            out.extend(dp.problems());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            Some(&(field, reason)) => Err(Error::invalid(field, reason)),
            None => Ok(()),
        }
    }
}

/// `ipc` synthetic rows per class; labels are implied by the class slot and
/// never change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    classes: Vec<Tensor>,
    ipc: usize,
    dim: usize,
}

impl SyntheticDataset {
    pub fn new(classes: Vec<Tensor>) -> Result<Self> {
        let first = classes.first().ok_or(Error::Empty("synthetic classes"))?;
        let (ipc, dim) = (first.rows(), first.cols());
        if ipc == 0 {
            return Err(Error::Empty("synthetic class"));
        }
        for t in &classes {
            if t.shape() != [ipc, dim] {
                return Err(Error::shape("synthetic", t.shape(), &[ipc, dim]));
            }
        }
        Ok(Self { classes, ipc, dim })
    }

    pub fn init_normal(classes: usize, ipc: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::SYN_INIT]);
        let normal = Normal::new(0.5, 0.25).expect("valid normal");
        let tensors = (0..classes)
            .map(|_| {
                let data = (0..ipc * dim).map(|_| f64::clamp(normal.sample(&mut r), 0.0, 1.0)).collect();
                Tensor::matrix(ipc, dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tensors)
    }

    /// Draws `ipc` real rows per class (with repetition only when a class has
    /// fewer than `ipc` rows).
    pub fn init_real(ds: &Dataset, ipc: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::SYN_INIT]);
        let tensors = (0..ds.classes())
            .map(|c| {
                let idx = ds.class_indices(c);
                if idx.is_empty() {
                    return Err(Error::Empty("class in real init"));
                }
                let mut rows = Vec::with_capacity(ipc);
                while rows.len() < ipc {
                    let take = rng::sample_indices(&mut r, idx.len(), ipc - rows.len());
                    rows.extend(take.into_iter().map(|k| idx[k]));
                }
                Ok(ds.features().select_rows(&rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tensors)
    }

    pub fn classes(&self) -> usize {
        self.classes.len()
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self, c: usize) -> &Tensor {
        &self.classes[c]
    }

    pub fn set_class(&mut self, c: usize, rows: Tensor) -> Result<()> {
        if rows.shape() != [self.ipc, self.dim] {
            return Err(Error::shape("synthetic", rows.shape(), &[self.ipc, self.dim]));
        }
        self.classes[c] = rows;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.classes.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// All rows grouped by class, with their labels.
    pub fn to_parts(&self) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(self.classes() * self.ipc * self.dim);
        let mut labels = Vec::with_capacity(self.classes() * self.ipc);
        for (c, t) in self.classes.iter().enumerate() {
            data.extend_from_slice(t.data());
            labels.extend(core::iter::repeat_n(c, self.ipc));
        }
        let n = labels.len();
        (Tensor::from_parts(vec![n, self.dim], data), labels)
    }
}

/// Gradient mismatch between the fixed target `target` and the gradient
/// nodes `g` (one per parameter tensor), recorded on `tape` so it can be
/// differentiated further.
pub fn grad_distance(tape: &mut Tape, target: &GradVector, g: &[Var], mode: Distance) -> Result<Var> {
    let parts = target.to_tensors();
    if parts.len() != g.len() {
        return Err(Error::LayoutMismatch);
    }
    let mut total: Option<Var> = None;
    for (k, (t, &gv)) in parts.into_iter().zip(g).enumerate() {
        if tape.shape(gv)? != t.shape() {
            return Err(Error::LayoutMismatch);
        }
        let term = match mode {
            Distance::SqL2 => {
                let tv = tape.constant(t);
                let diff = tape.sub(gv, tv)?;
                let sq = tape.square(diff)?;
                tape.sum(sq)?
            }
            Distance::LayerwiseCosine => {
                let name = &target.layout().segments()[k].name;
                let tn = libm::sqrt(t.sum_sq());
                let gn2 = tape.value(gv)?.sum_sq();
                if tn == 0.0 || gn2 == 0.0 {
                    return Err(Error::ZeroNormSegment(name.clone()));
                }
                let tv = tape.constant(t);
                let prod = tape.mul(gv, tv)?;
                let dot = tape.sum(prod)?;
                let gsq = tape.square(gv)?;
                let gss = tape.sum(gsq)?;
                let gnorm = tape.sqrt(gss)?;
                let inv = tape.recip(gnorm)?;
                let cos = tape.mul(dot, inv)?;
                tape.affine(cos, -1.0 / tn, 1.0)?
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or(Error::Empty("parameter layout"))
}

/// Plain evaluation of [`grad_distance`] on two vectors.
pub fn distance_value(target: &GradVector, g: &GradVector, mode: Distance) -> Result<f64> {
    target.check_layout(g)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = g.to_tensors().into_iter().map(|t| tape.constant(t)).collect();
    let d = grad_distance(&mut tape, target, &vars, mode)?;
    tape.value(d)?.item()
}

/// `D(G, ∇_θ L(θ; rows, class))` and its gradient with respect to `rows`.
pub fn distance_and_grad(
    spec: &ModelSpec,
    theta: &ParamSet,
    rows: &Tensor,
    class: usize,
    target: &GradVector,
    mode: Distance,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let params = theta.to_vars(&mut tape);
    let s = tape.var(rows.clone());
    let labels = vec![class; rows.rows()];
    let loss = models::loss_on_tape(spec, &mut tape, &params, s, &labels)?;
    let g = tape.grad(loss, &params)?;
    let d = grad_distance(&mut tape, target, &g, mode)?;
    let ds = tape.grad(d, &[s])?;
    let value = tape.value(d)?.item()?;
    Ok((value, tape.value(ds[0])?.clone()))
}

/// Class-`c` upload of one client: `∇_θ` of the mean loss on a class-`c`
/// batch of `min(batch, available)` rows, or `None` without class-`c` data.
/// The batch stream is `rng::stream(client_seed, [REAL_BATCH, round, c])`.
#[allow(clippy::too_many_arguments)]
pub fn client_class_grad(
    spec: &ModelSpec,
    shard: &Dataset,
    client: usize,
    theta: &ParamSet,
    round: usize,
    class: usize,
    batch: usize,
    client_seed: u64,
    dp: Option<&DpConfig>,
) -> Result<Option<GradMessage>> {
    let idx = shard.class_indices(class);
    if idx.is_empty() {
        return Ok(None);
    }
    let mut r = rng::stream(client_seed, &[rng::REAL_BATCH, round as u64, class as u64]);
    let picked: Vec<usize> = rng::sample_indices(&mut r, idx.len(), batch)
        .into_iter()
        .map(|k| idx[k])
        .collect();
    let x = shard.features().select_rows(&picked);
    let labels = vec![class; picked.len()];
    let grad = match dp {
        None => models::class_gradient(spec, theta, &x, &labels)?,
        Some(dp) => {
            let per_example = (0..picked.len())
                .map(|j| models::class_gradient(spec, theta, &x.select_rows(&[j]), &labels[..1]))
                .collect::<Result<Vec<_>>>()?;
            let noise_seed = rng::derive(client_seed, &[rng::DP_NOISE, round as u64, class as u64]);
            privacy::dp_class_grad(&per_example, dp.clip, dp.noise_multiplier, noise_seed)?
        }
    };
    Ok(Some(GradMessage {
        round,
        class,
        client,
        grad,
    }))
}

/// Matching values and squared gradient norms over one synthetic update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynUpdate {
    pub rows: Tensor,
    /// `D` before each step, then once more after the last step on the last
    /// batch.
    pub trace: Vec<f64>,
    /// `‖∇_s D‖²` at each step.
    pub grad_sq: Vec<f64>,
}

/// `ς_S` SGD steps `s ← s − η_S ∇_s D` on batches of `syn_batch` rows.
#[allow(clippy::too_many_arguments)]
pub fn update_synthetic(
    spec: &ModelSpec,
    theta: &ParamSet,
    rows: &Tensor,
    class: usize,
    target: &GradVector,
    steps: usize,
    lr: f64,
    syn_batch: usize,
    mode: Distance,
    rng: &mut Rng,
) -> Result<SynUpdate> {
    let mut rows = rows.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    let mut grad_sq = Vec::with_capacity(steps);
    let mut last = Vec::new();
    for _ in 0..steps {
        let idx = rng::sample_indices(rng, rows.rows(), syn_batch);
        let batch = rows.select_rows(&idx);
        let (d, g) = distance_and_grad(spec, theta, &batch, class, target, mode)?;
        trace.push(d);
        grad_sq.push(g.sum_sq());
        rows = scatter_step(&rows, &idx, &g, lr)?;
        last = idx;
    }
    if !last.is_empty() {
        let (d, _) = distance_and_grad(spec, theta, &rows.select_rows(&last), class, target, mode)?;
        trace.push(d);
    }
    Ok(SynUpdate { rows, trace, grad_sq })
}

fn scatter_step(rows: &Tensor, idx: &[usize], g: &Tensor, lr: f64) -> Result<Tensor> {
    let d = rows.cols();
    let mut data = rows.data().to_vec();
    for (k, &i) in idx.iter().enumerate() {
        for (v, gv) in data[i * d..(i + 1) * d].iter_mut().zip(g.row(k)) {
            *v -= lr * gv;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("synthetic update"));
    }
    Tensor::matrix(rows.rows(), d, data)
}

/// `ς_θ` SGD steps on the synthetic set.
pub fn update_theta(
    spec: &ModelSpec,
    theta: &ParamSet,
    syn: &SyntheticDataset,
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<ParamSet> {
    let (x, y) = syn.to_parts();
    models::train(spec, theta, &x, &y, &TrainConfig { steps, lr, batch }, rng)
}

/// One `(t, c)` cell of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub class: usize,
    /// Clients that uploaded a class-`c` gradient.
    pub contributors: usize,
    pub uplink_bytes: u64,
    /// `D` at the first inner step; `None` when the class was skipped.
    pub distance: Option<f64>,
    pub inner: Vec<f64>,
    pub grad_sq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOutput {
    pub synthetic: SyntheticDataset,
    pub theta: ParamSet,
    pub ledger: CostLedger,
    pub trace: Vec<TraceRow>,
}

impl DistillOutput {
    /// Cells where no selected client held the class.
    pub fn skipped(&self) -> impl Iterator<Item = &TraceRow> {
        self.trace.iter().filter(|r| r.distance.is_none())
    }
}

fn initial_synthetic(ds: &Dataset, cfg: &DistillConfig, seed: u64) -> Result<SyntheticDataset> {
    match cfg.init {
        SynInit::Normal => SyntheticDataset::init_normal(ds.classes(), cfg.ipc, ds.dim(), seed),
        SynInit::Real => SyntheticDataset::init_real(ds, cfg.ipc, seed),
    }
}

/// Seed of client `i` under master seed `seed`.
pub fn client_seed(seed: u64, client: usize) -> u64 {
    rng::derive(seed, &[rng::CLIENT, client as u64])
}

/// Server-side part of a cell: aggregate, match, update `S_c`.
#[allow(clippy::too_many_arguments)]
fn server_cell(
    spec: &ModelSpec,
    theta: &ParamSet,
    syn: &mut SyntheticDataset,
    messages: &[GradMessage],
    round: usize,
    class: usize,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TraceRow> {
    let uplink_bytes = messages.iter().map(GradMessage::bytes).sum();
    let mut row = TraceRow {
        round,
        class,
        contributors: messages.len(),
        uplink_bytes,
        distance: None,
        inner: Vec::new(),
        grad_sq: Vec::new(),
    };
    if messages.is_empty() {
        return Ok(row);
    }
    let mut target = flcore::aggregate(messages, cfg.aggregation)?;
    if cfg.aggregation == Aggregation::Median && cfg.median_rescale {
        target = target.scale(messages.len() as f64);
    }
    let mut r = rng::stream(seed, &[rng::SYN_BATCH, round as u64, class as u64]);
    let up = update_synthetic(
        spec,
        theta,
        syn.class(class),
        class,
        &target,
        cfg.syn_steps,
        cfg.syn_lr,
        cfg.syn_batch,
        cfg.distance,
        &mut r,
    )?;
    syn.set_class(class, up.rows)?;
    row.distance = up.trace.first().copied();
    row.inner = up.trace;
    row.grad_sq = up.grad_sq;
    Ok(row)
}

fn theta_step(
    spec: &ModelSpec,
    theta: &ParamSet,
    syn: &SyntheticDataset,
    cfg: &DistillConfig,
    round: usize,
    seed: u64,
) -> Result<ParamSet> {
    let mut r = rng::stream(seed, &[rng::THETA_BATCH, round as u64]);
    update_theta(spec, theta, syn, cfg.theta_steps, cfg.theta_lr, cfg.theta_batch, &mut r)
}

/// The full federated loop. Participation and the client population come
/// from `round_cfg`; the round count and all matching settings from `cfg`.
pub fn distill(
    ds: &Dataset,
    partition: &Partition,
    spec: &ModelSpec,
    round_cfg: &RoundConfig,
    cfg: &DistillConfig,
) -> Result<DistillOutput> {
    round_cfg.validate()?;
    cfg.validate()?;
    spec.validate()?;
    if partition.clients() != round_cfg.clients {
        return Err(Error::invalid("clients", "must equal the partition's client count"));
    }
    if spec.classes != ds.classes() || spec.input_dim != ds.dim() {
        return Err(Error::invalid("model", "class count and input dim must match the data"));
    }
    let seed = round_cfg.seed;
    let shards = partition.client_datasets(ds);
    let mut theta = models::init_params(spec, seed)?;
    let mut syn = initial_synthetic(ds, cfg, seed)?;
    let msg = flcore::message_bytes(theta.layout().len());
    let mut ledger = CostLedger::new();
    let mut trace = Vec::with_capacity(cfg.rounds * ds.classes());
    for t in 0..cfg.rounds {
        ledger.record(t, PHASE, Direction::Downlink, round_cfg.clients as u64 * msg);
        let participants = flcore::select_participants(round_cfg.clients, round_cfg.participation, t, seed);
        let mut server_steps = 0u64;
        let mut client_grads = 0u64;
        for c in 0..ds.classes() {
            let mut cell = || -> Result<TraceRow> {
                let mut messages = Vec::new();
                for &i in &participants {
                    let m = client_class_grad(
                        spec,
                        &shards[i],
                        i,
                        &theta,
                        t,
                        c,
                        cfg.real_batch,
                        client_seed(seed, i),
                        cfg.dp.as_ref(),
                    )?;
                    messages.extend(m);
                }
                server_cell(spec, &theta, &mut syn, &messages, t, c, cfg, seed)
            };
            let row = cell().map_err(|e| e.in_cell(t, c))?;
            ledger.record(t, PHASE, Direction::Uplink, row.uplink_bytes);
            client_grads += row.contributors as u64;
            if row.distance.is_some() {
                server_steps += cfg.syn_steps as u64;
            }
            trace.push(row);
        }
        theta = theta_step(spec, &theta, &syn, cfg, t, seed).map_err(|e| e.in_cell(t, ds.classes()))?;
        server_steps += cfg.theta_steps as u64;
        ledger.record_compute(t, PHASE, client_grads, server_steps);
        if !syn.is_finite() {
            return Err(Error::NonFinite("synthetic set"));
        }
    }
    Ok(DistillOutput {
        synthetic: syn,
        theta,
        ledger,
        trace,
    })
}

/// Gradient matching with the whole dataset at the server: the target for
/// class `c` is the gradient of a class-`c` batch drawn directly from `ds`
/// with the stream a lone client `0` would use. No traffic is recorded.
pub fn centralized_gm(ds: &Dataset, spec: &ModelSpec, cfg: &DistillConfig, seed: u64) -> Result<DistillOutput> {
    cfg.validate()?;
    let mut theta = models::init_params(spec, seed)?;
    let mut syn = initial_synthetic(ds, cfg, seed)?;
    let batch_seed = client_seed(seed, 0);
    let mut trace = Vec::new();
    for t in 0..cfg.rounds {
        for c in 0..ds.classes() {
            let idx = ds.class_indices(c);
            let mut messages = Vec::new();
            if !idx.is_empty() {
                let mut r = rng::stream(batch_seed, &[rng::REAL_BATCH, t as u64, c as u64]);
                let picked: Vec<usize> = rng::sample_indices(&mut r, idx.len(), cfg.real_batch)
                    .into_iter()
                    .map(|k| idx[k])
                    .collect();
                let x = ds.features().select_rows(&picked);
                let grad = models::class_gradient(spec, &theta, &x, &vec![c; picked.len()])?;
                messages.push(GradMessage {
                    round: t,
                    class: c,
                    client: 0,
                    grad,
                });
            }
            let row = server_cell(spec, &theta, &mut syn, &messages, t, c, cfg, seed).map_err(|e| e.in_cell(t, c))?;
            trace.push(row);
        }
        theta = theta_step(spec, &theta, &syn, cfg, t, seed)?;
    }
    Ok(DistillOutput {
        synthetic: syn,
        theta,
        ledger: CostLedger::new(),
        trace,
    })
}

/// Trains a fresh model on `syn` from `seed` and reports accuracy on `test`.
pub fn evaluate_synthetic(
    spec: &ModelSpec,
    syn: &SyntheticDataset,
    train: &TrainConfig,
    seed: u64,
    test: &Dataset,
) -> Result<f64> {
    let theta = models::init_params(spec, rng::derive(seed, &[rng::EVAL]))?;
    let (x, y) = syn.to_parts();
    let mut r = rng::stream(seed, &[rng::EVAL, 1]);
    let trained = models::train(spec, &theta, &x, &y, train, &mut r)?;
    models::accuracy(spec, &trained, test.features(), test.labels())
}

/// Closed-form traffic of a run: downlink `T · I · m` plus uplink
/// `Σ_cells contributors · m`, for message size `m`.
pub fn expected_bytes(trace: &[TraceRow], rounds: usize, clients: usize, params: usize) -> (u64, u64) {
    let m = flcore::message_bytes(params);
    let up = trace.iter().map(|r| r.contributors as u64).sum::<u64>() * m;
    (up, rounds as u64 * clients as u64 * m)
}

/// Human-readable one-liner per skipped cell.
pub fn skip_log(out: &DistillOutput) -> Vec<String> {
    out.skipped()
        .map(|r| alloc::format!("round {} class {}: no selected client holds the class", r.round, r.class))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, partition_dirichlet};
    use crate::numerics::{fd_oracle, relative_error, Layout};

    fn gv(v: &[f64]) -> GradVector {
        GradVector::new(Layout::single("g", &[v.len()]), v.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let a = gv(&[1.0, 2.0]);
        assert_eq!(distance_value(&a, &a, Distance::SqL2).unwrap(), 0.0);
        assert!(distance_value(&a, &a, Distance::LayerwiseCosine).unwrap().abs() < 1e-15);
        assert_eq!(distance_value(&a, &gv(&[0.0, 0.0]), Distance::SqL2).unwrap(), 5.0);
        assert!(matches!(
            distance_value(&a, &gv(&[0.0, 0.0]), Distance::LayerwiseCosine),
            Err(Error::ZeroNormSegment(_))
        ));
        assert_eq!(distance_value(&a, &gv(&[1.0]), Distance::SqL2), Err(Error::LayoutMismatch));
        let cos = distance_value(&gv(&[1.0, 0.0]), &gv(&[0.0, 3.0]), Distance::LayerwiseCosine).unwrap();
        assert!((cos - 1.0).abs() < 1e-15);
    }

    fn setup() -> (ModelSpec, ParamSet, Tensor, GradVector) {
        let spec = ModelSpec::mlp(3, &[4], 3);
        let theta = models::init_params(&spec, 2).unwrap();
        let syn = SyntheticDataset::init_normal(3, 5, 3, 4).unwrap();
        let ds = gen_blobs(3, 20, 3, 0.5, 1).unwrap();
        let x = ds.subset(&ds.class_indices(1));
        let target = models::class_gradient(&spec, &theta, x.features(), x.labels()).unwrap();
        (spec, theta, syn.class(1).clone(), target)
    }

    #[test]
    fn synthetic_gradient_matches_finite_differences() {
        let (spec, theta, rows, target) = setup();
        for mode in [Distance::SqL2, Distance::LayerwiseCosine] {
            let (_, g) = distance_and_grad(&spec, &theta, &rows, 1, &target, mode).unwrap();
            let fd = fd_oracle(
                |s| distance_and_grad(&spec, &theta, s, 1, &target, mode).map(|p| p.0),
                &rows,
                1e-5,
            )
            .unwrap();
            let err = relative_error(g.data(), fd.values(), 1e-8);
            assert!(err < 1e-4, "{mode:?} rel err {err}");
        }
    }

    #[test]
    fn matched_set_is_a_fixed_point() {
        let (spec, theta, rows, _) = setup();
        let target = models::class_gradient(&spec, &theta, &rows, &[1; 5]).unwrap();
        let mut r = rng::stream(0, &[]);
        let up = update_synthetic(&spec, &theta, &rows, 1, &target, 3, 0.5, 5, Distance::SqL2, &mut r).unwrap();
        assert_eq!(up.rows, rows);
        assert!(up.trace.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn one_step_matches_fd_step() {
        let spec = ModelSpec::linear(1, 2);
        let theta = models::init_params(&spec, 3).unwrap();
        let rows = Tensor::matrix(2, 1, vec![0.2, 0.7]).unwrap();
        let target = gv(&[0.3, -0.3, 0.1, -0.1]);
        let target = GradVector::new(spec.layout(), target.into_values()).unwrap();
        let mut r = rng::stream(0, &[]);
        let up = update_synthetic(&spec, &theta, &rows, 0, &target, 1, 0.05, 2, Distance::SqL2, &mut r).unwrap();
        let fd = fd_oracle(
            |s| distance_and_grad(&spec, &theta, s, 0, &target, Distance::SqL2).map(|p| p.0),
            &rows,
            1e-6,
        )
        .unwrap();
        for (i, v) in up.rows.data().iter().enumerate() {
            let expect = rows.data()[i] - 0.05 * fd.values()[i];
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn theta_update_examples() {
        let spec = ModelSpec::linear(2, 2);
        let theta = models::init_params(&spec, 0).unwrap();
        let syn = SyntheticDataset::new(vec![
            Tensor::matrix(2, 2, vec![0.1, 0.1, 0.2, 0.0]).unwrap(),
            Tensor::matrix(2, 2, vec![0.9, 0.8, 0.7, 1.0]).unwrap(),
        ])
        .unwrap();
        let mut r = rng::stream(0, &[]);
        assert_eq!(update_theta(&spec, &theta, &syn, 0, 0.1, 4, &mut r).unwrap(), theta);
        let one = update_theta(&spec, &theta, &syn, 1, 0.1, 4, &mut r).unwrap();
        let (x, y) = syn.to_parts();
        let g = models::class_gradient(&spec, &theta, &x, &y).unwrap();
        assert_eq!(one, theta.sgd_step(&g, 0.1).unwrap());
        let trained = update_theta(&spec, &theta, &syn, 500, 1.0, 4, &mut r).unwrap();
        assert!(models::loss(&spec, &trained, &x, &y).unwrap() < 0.1);
    }

    #[test]
    fn client_grad_absent_and_full_shard() {
        let ds = gen_blobs(3, 4, 2, 0.5, 0).unwrap();
        let spec = ModelSpec::linear(2, 3);
        let theta = models::init_params(&spec, 0).unwrap();
        let shard = ds.subset(&ds.class_indices(0));
        assert_eq!(client_class_grad(&spec, &shard, 0, &theta, 0, 1, 8, 5, None).unwrap(), None);
        let m = client_class_grad(&spec, &shard, 0, &theta, 0, 0, 8, 5, None).unwrap().unwrap();
        let full = models::class_gradient(&spec, &theta, shard.features(), shard.labels()).unwrap();
        assert_eq!(m.grad, full);
        let again = client_class_grad(&spec, &shard, 3, &theta, 0, 0, 2, 5, None).unwrap().unwrap();
        let twin = client_class_grad(&spec, &shard, 3, &theta, 0, 0, 2, 5, None).unwrap().unwrap();
        assert_eq!(again, twin);
    }

    fn small_run(aggregation: Aggregation) -> (Dataset, Partition, ModelSpec, RoundConfig, DistillConfig) {
        let ds = gen_blobs(3, 20, 2, 0.5, 0).unwrap();
        let p = partition_dirichlet(&ds, 4, 0.5, 0).unwrap();
        let spec = ModelSpec::mlp(2, &[4], 3);
        let rc = RoundConfig {
            clients: 4,
            participation: 0.5,
            seed: 11,
            ..RoundConfig::default()
        };
        let cfg = DistillConfig {
            rounds: 3,
            syn_steps: 2,
            theta_steps: 2,
            ipc: 3,
            syn_batch: 3,
            aggregation,
            ..DistillConfig::default()
        };
        (ds, p, spec, rc, cfg)
    }

    #[test]
    fn ledger_matches_closed_form() {
        let (ds, p, spec, rc, cfg) = small_run(Aggregation::Sum);
        let out = distill(&ds, &p, &spec, &rc, &cfg).unwrap();
        let (up, down) = expected_bytes(&out.trace, cfg.rounds, rc.clients, spec.param_count());
        assert_eq!(out.ledger.uplink_bytes(), up);
        assert_eq!(out.ledger.downlink_bytes(), down);
        assert!(out.ledger.prefix_sums_hold());
        assert_eq!(out.trace.len(), 9);
        assert_eq!(out.synthetic.ipc(), 3);
        for row in &out.trace {
            let holders = flcore::select_participants(4, 0.5, row.round, 11)
                .into_iter()
                .filter(|&i| p.shards()[i].iter().any(|&k| ds.labels()[k] == row.class))
                .count();
            assert_eq!(row.contributors, holders);
            assert_eq!(row.distance.is_none(), holders == 0);
        }
    }

    #[test]
    fn run_is_reproducible() {
        let (ds, p, spec, rc, cfg) = small_run(Aggregation::Median);
        assert_eq!(distill(&ds, &p, &spec, &rc, &cfg), distill(&ds, &p, &spec, &rc, &cfg));
    }

    #[test]
    fn single_client_equals_centralized() {
        let (ds, _, spec, mut rc, cfg) = small_run(Aggregation::Sum);
        rc.clients = 1;
        let p = partition_dirichlet(&ds, 1, 1.0, 0).unwrap();
        let fed = distill(&ds, &p, &spec, &rc, &cfg).unwrap();
        let cen = centralized_gm(&ds, &spec, &cfg, rc.seed).unwrap();
        assert_eq!(fed.synthetic, cen.synthetic);
        assert_eq!(fed.theta, cen.theta);
        for (a, b) in fed.trace.iter().zip(&cen.trace) {
            assert_eq!(a.inner, b.inner);
        }
    }

    #[test]
    fn errors_carry_their_cell() {
        let (ds, p, _, rc, mut cfg) = small_run(Aggregation::Mean);
        let spec = ModelSpec::linear(2, 3);
        cfg.syn_lr = 1e300;
        cfg.syn_steps = 3;
        let err = distill(&ds, &p, &spec, &rc, &cfg).unwrap_err();
        assert!(matches!(err, Error::InCell { round: 0, .. }), "{err:?}");
    }
}
