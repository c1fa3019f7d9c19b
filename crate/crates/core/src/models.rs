//! The classifier family shared by federated training and distillation:
//! linear softmax, a sigmoid MLP, and a tiny conv net.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GradVector, Layout, Segment, Tape, Tensor, Var};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp,
    /// One 3x3 valid conv, 2x2 average pool, then a linear head. Inputs are
    /// square single-channel images flattened row-major.
    TinyConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
    Relu,
}

/// Weights i.i.d. `N(0, 1/fan_in)`, biases zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    ScaledNormal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_dim: usize,
    /// Hidden widths for the MLP; the filter count for the conv net.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init: InitScheme,
}

struct ConvGeometry {
    side: usize,
    conv_side: usize,
    pool_side: usize,
    filters: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::Linear,
            input_dim,
            hidden: Vec::new(),
            classes,
            activation: Activation::Sigmoid,
            init: InitScheme::ScaledNormal,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp,
            hidden: hidden.to_vec(),
            ..Self::linear(input_dim, classes)
        }
    }

    pub fn tiny_conv(side: usize, filters: usize, classes: usize) -> Self {
        Self {
            arch: Architecture::TinyConv,
            hidden: vec![filters],
            ..Self::linear(side * side, classes)
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least 2"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "widths must be positive"));
        }
        match self.arch {
            Architecture::Linear if !self.hidden.is_empty() => {
                Err(Error::invalid("hidden", "linear model takes no hidden layers"))
            }
            Architecture::Mlp if self.hidden.is_empty() => {
                Err(Error::invalid("hidden", "mlp needs at least one hidden layer"))
            }
            Architecture::TinyConv => self.conv_geometry().map(|_| ()),
            _ => Ok(()),
        }
    }

    fn conv_geometry(&self) -> Result<ConvGeometry> {
        let side = libm::sqrt(self.input_dim as f64) as usize;
        if side * side != self.input_dim || side < 4 {
            return Err(Error::invalid(
                "input_dim",
                "tiny_conv needs a square image with side >= 4",
            ));
        }
        if self.hidden.len() != 1 {
            return Err(Error::invalid("hidden", "tiny_conv takes one filter count"));
        }
        Ok(ConvGeometry {
            side,
            conv_side: side - 2,
            pool_side: (side - 2) / 2,
            filters: self.hidden[0],
        })
    }

    /// `(name, shape, fan_in)` per parameter tensor; `fan_in == 0` marks a bias.
    fn param_shapes(&self) -> Vec<(alloc::string::String, Vec<usize>, usize)> {
        match self.arch {
            Architecture::Linear | Architecture::Mlp => {
                let mut dims = vec![self.input_dim];
                dims.extend_from_slice(&self.hidden);
                dims.push(self.classes);
                let mut out = Vec::new();
                for (l, w) in dims.windows(2).enumerate() {
                    out.push((format!("w{l}"), vec![w[0], w[1]], w[0]));
                    out.push((format!("b{l}"), vec![w[1]], 0));
                }
                out
            }
            Architecture::TinyConv => {
                let g = self.conv_geometry().expect("validated spec");
                let pooled = g.pool_side * g.pool_side * g.filters;
                vec![
                    ("conv_w".into(), vec![9, g.filters], 9),
                    ("conv_b".into(), vec![g.filters], 0),
                    ("out_w".into(), vec![pooled, self.classes], pooled),
                    ("out_b".into(), vec![self.classes], 0),
                ]
            }
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(
            self.param_shapes()
                .into_iter()
                .map(|(name, shape, _)| Segment { name, shape })
                .collect(),
        )
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

/// Named parameter tensors laid out per a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layout: Layout,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(layout: Layout, tensors: Vec<Tensor>) -> Result<Self> {
        if layout.segments().len() != tensors.len()
            || layout
                .segments()
                .iter()
                .zip(&tensors)
                .any(|(s, t)| s.shape.as_slice() != t.shape())
        {
            return Err(Error::LayoutMismatch);
        }
        Ok(Self { layout, tensors })
    }

    pub fn from_flat(flat: &GradVector) -> Self {
        Self {
            layout: flat.layout().clone(),
            tensors: flat.to_tensors(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn flat(&self) -> GradVector {
        let refs: Vec<&Tensor> = self.tensors.iter().collect();
        GradVector::from_tensors(self.layout.clone(), &refs).expect("layout matches by construction")
    }

    /// `theta - lr * grad`.
    pub fn sgd_step(&self, grad: &GradVector, lr: f64) -> Result<Self> {
        if grad.layout() != &self.layout {
            return Err(Error::LayoutMismatch);
        }
        let tensors = self
            .tensors
            .iter()
            .zip(grad.to_tensors())
            .map(|(t, g)| t.sgd_step(&g, lr))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout: self.layout.clone(),
            tensors,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Puts every tensor on `tape` as a differentiable leaf.
    pub fn to_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.var(t.clone())).collect()
    }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::INIT]);
    let mut tensors = Vec::new();
    for (_, shape, fan_in) in spec.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if fan_in == 0 {
            vec![0.0; n]
        } else {
            let std = 1.0 / libm::sqrt(fan_in as f64);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect()
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    ParamSet::new(spec.layout(), tensors)
}

fn activate(tape: &mut Tape, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = tape.shape(x)?[0];
    let xw = tape.matmul(x, w)?;
    let bias = tape.broadcast_rows(b, n)?;
    tape.add(xw, bias)
}

/// Logits `[n, classes]` for a batch `x: [n, input_dim]`.
pub fn logits(spec: &ModelSpec, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    if shape.len() != 2 || shape[1] != spec.input_dim {
        return Err(Error::shape("logits", &shape, &[0, spec.input_dim]));
    }
    if params.len() != spec.layout().segments().len() {
        return Err(Error::LayoutMismatch);
    }
    match spec.arch {
        Architecture::Linear | Architecture::Mlp => {
            let layers = params.len() / 2;
            let mut h = x;
            for l in 0..layers {
                h = dense(tape, h, params[2 * l], params[2 * l + 1])?;
                if l + 1 < layers {
                    h = activate(tape, spec.activation, h)?;
                }
            }
            Ok(h)
        }
        Architecture::TinyConv => conv_logits(spec, tape, params, x, shape[0]),
    }
}

fn conv_logits(spec: &ModelSpec, tape: &mut Tape, params: &[Var], x: Var, n: usize) -> Result<Var> {
    let g = spec.conv_geometry()?;
    let positions = g.conv_side * g.conv_side;
    let mut idx = Vec::with_capacity(n * positions * 9);
    for i in 0..n {
        for r in 0..g.conv_side {
            for c in 0..g.conv_side {
                for kr in 0..3 {
                    for kc in 0..3 {
                        idx.push(i * spec.input_dim + (r + kr) * g.side + (c + kc));
                    }
                }
            }
        }
    }
    let patches = tape.gather(x, Arc::from(idx), &[n * positions, 9])?;
    let conv = dense(tape, patches, params[0], params[1])?;
    let conv = activate(tape, spec.activation, conv)?;
    let flat = tape.reshape(conv, &[n, positions * g.filters])?;

    let pooled_len = g.pool_side * g.pool_side * g.filters;
    let mut pool = vec![0.0; positions * g.filters * pooled_len];
    for qr in 0..g.pool_side {
        for qc in 0..g.pool_side {
            let q = qr * g.pool_side + qc;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = (2 * qr + dr) * g.conv_side + (2 * qc + dc);
                for f in 0..g.filters {
                    pool[(p * g.filters + f) * pooled_len + q * g.filters + f] = 0.25;
                }
            }
        }
    }
    let pool = tape.constant(Tensor::matrix(positions * g.filters, pooled_len, pool)?);
    let pooled = tape.matmul(flat, pool)?;
    dense(tape, pooled, params[2], params[3])
}

/// Row order sorted by label, then features under IEEE total order. Batch
/// reductions run in this order so shuffling a batch cannot change a bit.
fn canonical_order(x: &Tensor, labels: &[usize]) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            x.row(a)
                .iter()
                .zip(x.row(b))
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        None
    } else {
        Some(order)
    }
}

/// Mean cross-entropy of the batch, recorded on `tape`.
pub fn loss_on_tape(
    spec: &ModelSpec,
    tape: &mut Tape,
    params: &[Var],
    x: Var,
    labels: &[usize],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= spec.classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: spec.classes,
        });
    }
    let rows = tape.shape(x)?.first().copied().unwrap_or(0);
    if rows != labels.len() {
        return Err(Error::shape("loss", &[rows], &[labels.len()]));
    }
    match canonical_order(tape.value(x)?, labels) {
        None => {
            let z = logits(spec, tape, params, x)?;
            tape.softmax_xent(z, labels)
        }
        Some(order) => {
            let xs = tape.select_rows(x, &order)?;
            let ys: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let z = logits(spec, tape, params, xs)?;
            tape.softmax_xent(z, &ys)
        }
    }
}

pub fn loss(spec: &ModelSpec, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x.clone());
    let l = loss_on_tape(spec, &mut tape, &vars, xv, labels)?;
    tape.value(l)?.item()
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn class_gradient(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<GradVector> {
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape);
    let xv = tape.constant(x.clone());
    let l = loss_on_tape(spec, &mut tape, &vars, xv, labels)?;
    let grads = tape.grad(l, &vars)?;
    let mut values = Vec::with_capacity(params.layout().len());
    for g in grads {
        values.extend_from_slice(tape.value(g)?.data());
    }
    GradVector::new(params.layout().clone(), values)
}

/// Arg-max class per row; ties go to the lower class index.
pub fn predict(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x.clone());
    let z = logits(spec, &mut tape, &vars, xv)?;
    let z = tape.value(z)?;
    Ok((0..z.rows())
        .map(|i| {
            z.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// `1 - errors / n`.
pub fn accuracy(spec: &ModelSpec, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let pred = predict(spec, params, x)?;
    let errors = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(1.0 - errors as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

/// Plain minibatch SGD; each step draws `min(batch, n)` distinct rows.
pub fn train(
    spec: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<ParamSet> {
    if labels.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut theta = params.clone();
    for _ in 0..cfg.steps {
        let idx = rng::sample_indices(rng, labels.len(), cfg.batch);
        let xb = x.select_rows(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let g = class_gradient(spec, &theta, &xb, &yb)?;
        theta = theta.sgd_step(&g, cfg.lr)?;
    }
    Ok(theta)
}
