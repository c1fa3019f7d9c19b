//! Client/server protocol pieces: participant selection, gradient
//! aggregation, the FedAvg baseline and the communication cost ledger.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ParamSet, TrainConfig};
use crate::numerics::GradVector;
use crate::rng;

/// Fixed per-message header: round, class and client id as 8-byte words.
pub const HEADER_BYTES: u64 = 24;

/// Wire size of a message carrying `len` 64-bit floats.
pub fn message_bytes(len: usize) -> u64 {
    8 * len as u64 + HEADER_BYTES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    /// Total client population `I`.
    pub clients: usize,
    /// Participation fraction `δ_part` in `(0, 1]`.
    pub participation: f64,
    pub rounds: usize,
    /// Local SGD steps `τ` (FedAvg).
    pub local_steps: usize,
    /// Client learning rate `η` (FedAvg).
    pub client_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            participation: 0.5,
            rounds: 100,
            local_steps: 5,
            client_lr: 0.5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl RoundConfig {
    /// Every violated field, in declaration order.
    pub fn problems(&self) -> Vec<(&'static str, &'static str)> {
        let mut out = Vec::new();
        if self.clients == 0 {
            out.push(("clients", "must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            out.push(("participation", "must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            out.push(("rounds", "must be positive"));
        }
        if self.local_steps == 0 {
            out.push(("local_steps", "must be positive"));
        }
        if !(self.client_lr.is_finite() && self.client_lr > 0.0) {
            out.push(("client_lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            out.push(("batch_size", "must be positive"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            Some(&(field, reason)) => Err(Error::invalid(field, reason)),
            None => Ok(()),
        }
    }

    /// Participants per round: `round(δ_part · I)`, at least one.
    pub fn per_round(&self) -> usize {
        participants_count(self.clients, self.participation)
    }
}

fn participants_count(clients: usize, participation: f64) -> usize {
    (libm::round(participation * clients as f64) as usize).clamp(1, clients)
}

/// Uniform sample without replacement of `max(1, round(δ_part · I))` client
/// ids, ascending. Depends only on `(seed, round)`.
pub fn select_participants(clients: usize, participation: f64, round: usize, seed: u64) -> Vec<usize> {
    if clients == 0 {
        return Vec::new();
    }
    let k = participants_count(clients, participation);
    let mut r = rng::stream(seed, &[rng::SELECT, round as u64]);
    rng::sample_indices(&mut r, clients, k)
}

/// A per-class gradient upload `g_{t,c,i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradMessage {
    pub round: usize,
    pub class: usize,
    pub client: usize,
    pub grad: GradVector,
}

impl GradMessage {
    pub fn bytes(&self) -> u64 {
        message_bytes(self.grad.len())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    Median,
}

/// Reduces the messages of one `(t, c)` cell in client-id order.
pub fn aggregate(messages: &[GradMessage], mode: Aggregation) -> Result<GradVector> {
    let mut sorted: Vec<&GradMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.client);
    let grads: Vec<&GradVector> = sorted.iter().map(|m| &m.grad).collect();
    aggregate_vectors(&grads, mode)
}

/// Reduces vectors in the order given.
pub fn aggregate_vectors(grads: &[&GradVector], mode: Aggregation) -> Result<GradVector> {
    let first = *grads.first().ok_or(Error::Empty("aggregate"))?;
    for g in &grads[1..] {
        first.check_layout(g)?;
    }
    let k = grads.len();
    let values: Vec<f64> = match mode {
        Aggregation::Sum | Aggregation::Mean => {
            let mut acc = first.values().to_vec();
            for g in &grads[1..] {
                for (a, v) in acc.iter_mut().zip(g.values()) {
                    *a += v;
                }
            }
            if mode == Aggregation::Mean && k > 1 {
                let inv = 1.0 / k as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
            }
            acc
        }
        Aggregation::Median => {
            let mut column = Vec::with_capacity(k);
            (0..first.len())
                .map(|j| {
                    column.clear();
                    column.extend(grads.iter().map(|g| g.values()[j]));
                    median(&mut column)
                })
                .collect()
        }
    };
    GradVector::new(first.layout().clone(), values)
}

/// One-dimensional median; an even count averages the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Local training of one FedAvg participant: `τ` SGD steps from `global`.
pub fn local_update(
    spec: &ModelSpec,
    global: &ParamSet,
    shard: &Dataset,
    cfg: &RoundConfig,
    round: usize,
    client: usize,
) -> Result<ParamSet> {
    let train = TrainConfig {
        steps: cfg.local_steps,
        lr: cfg.client_lr,
        batch: cfg.batch_size,
    };
    let mut r = rng::stream(cfg.seed, &[rng::FEDAVG_BATCH, round as u64, client as u64]);
    models::train(spec, global, shard.features(), shard.labels(), &train, &mut r)
}

/// `Σ w_i θ_i` written as `θ_1 + Σ_{i>1} w_i (θ_i − θ_1)`, which equals the
/// weighted mean when the weights sum to one and returns `θ_1` bit-exactly
/// when every model agrees.
pub fn weighted_average(models: &[(f64, ParamSet)]) -> Result<ParamSet> {
    let (_, base) = models.first().ok_or(Error::Empty("weighted_average"))?;
    let base_flat = base.flat();
    let mut acc = base_flat.values().to_vec();
    for (w, m) in &models[1..] {
        let flat = m.flat();
        base_flat.check_layout(&flat)?;
        for ((a, v), b) in acc.iter_mut().zip(flat.values()).zip(base_flat.values()) {
            *a += w * (v - b);
        }
    }
    let out = ParamSet::from_flat(&GradVector::new(base_flat.layout().clone(), acc)?);
    if !out.is_finite() {
        return Err(Error::NonFinite("fedavg"));
    }
    Ok(out)
}

/// One FedAvg round: each participant trains locally, the server averages
/// with weights `n_i / Σ n_j`.
pub fn fedavg_round(
    spec: &ModelSpec,
    global: &ParamSet,
    shards: &[Dataset],
    participants: &[usize],
    cfg: &RoundConfig,
    round: usize,
) -> Result<ParamSet> {
    if participants.is_empty() {
        return Err(Error::Empty("participants"));
    }
    let total: usize = participants.iter().map(|&i| shards[i].len()).sum();
    let mut locals = Vec::with_capacity(participants.len());
    for &i in participants {
        let local = local_update(spec, global, &shards[i], cfg, round, i)?;
        locals.push((shards[i].len() as f64 / total as f64, local));
    }
    weighted_average(&locals)
}

/// Full FedAvg training from `init`, recording traffic and compute in
/// `ledger` under `phase`.
pub fn fedavg(
    spec: &ModelSpec,
    init: &ParamSet,
    shards: &[Dataset],
    cfg: &RoundConfig,
    ledger: &mut CostLedger,
    phase: &str,
) -> Result<ParamSet> {
    cfg.validate()?;
    if shards.len() != cfg.clients {
        return Err(Error::invalid("clients", "must equal the number of shards"));
    }
    let msg = message_bytes(init.layout().len());
    let mut theta = init.clone();
    for t in 0..cfg.rounds {
        let part = select_participants(cfg.clients, cfg.participation, t, cfg.seed);
        let k = part.len() as u64;
        ledger.record(t, phase, Direction::Downlink, k * msg);
        theta = fedavg_round(spec, &theta, shards, &part, cfg, t)?;
        ledger.record(t, phase, Direction::Uplink, k * msg);
        ledger.record_compute(t, phase, k * cfg.local_steps as u64, 1);
    }
    Ok(theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

/// Prices for turning a ledger into modeled seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per communication round.
    pub latency: f64,
    /// Seconds per client gradient computation (one class batch or one
    /// local SGD step).
    pub client_grad_seconds: f64,
    /// Seconds per server-side optimizer step.
    pub server_step_seconds: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            bandwidth: 1e6,
            latency: 0.1,
            client_grad_seconds: 1e-3,
            server_step_seconds: 5e-4,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth", "must be positive"));
        }
        for (name, v) in [
            ("latency", self.latency),
            ("client_grad_seconds", self.client_grad_seconds),
            ("server_step_seconds", self.server_step_seconds),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub phase: String,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub client_grads: u64,
    pub server_steps: u64,
    pub cum_uplink_bytes: u64,
    pub cum_downlink_bytes: u64,
}

impl LedgerRow {
    fn communicates(&self) -> bool {
        self.uplink_bytes + self.downlink_bytes > 0
    }
}

/// Per-`(round, phase)` traffic and compute counts with running totals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    rows: Vec<LedgerRow>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    fn row(&mut self, round: usize, phase: &str) -> &mut LedgerRow {
        let fresh = !matches!(self.rows.last(), Some(r) if r.round == round && r.phase == phase);
        if fresh {
            let (up, down) = self
                .rows
                .last()
                .map_or((0, 0), |r| (r.cum_uplink_bytes, r.cum_downlink_bytes));
            self.rows.push(LedgerRow {
                round,
                phase: phase.into(),
                uplink_bytes: 0,
                downlink_bytes: 0,
                client_grads: 0,
                server_steps: 0,
                cum_uplink_bytes: up,
                cum_downlink_bytes: down,
            });
        }
        self.rows.last_mut().expect("row just ensured")
    }

    /// Adds traffic to the `(round, phase)` row, opening a new row when the
    /// key changes.
    pub fn record(&mut self, round: usize, phase: &str, direction: Direction, bytes: u64) {
        let row = self.row(round, phase);
        match direction {
            Direction::Uplink => {
                row.uplink_bytes += bytes;
                row.cum_uplink_bytes += bytes;
            }
            Direction::Downlink => {
                row.downlink_bytes += bytes;
                row.cum_downlink_bytes += bytes;
            }
        }
    }

    pub fn record_compute(&mut self, round: usize, phase: &str, client_grads: u64, server_steps: u64) {
        let row = self.row(round, phase);
        row.client_grads += client_grads;
        row.server_steps += server_steps;
    }

    /// Appends `other`'s rows, carrying the running totals forward.
    pub fn extend(&mut self, other: &CostLedger) {
        for r in &other.rows {
            self.record(r.round, &r.phase, Direction::Uplink, r.uplink_bytes);
            self.record(r.round, &r.phase, Direction::Downlink, r.downlink_bytes);
            self.record_compute(r.round, &r.phase, r.client_grads, r.server_steps);
        }
    }

    pub fn uplink_bytes(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_uplink_bytes)
    }

    pub fn downlink_bytes(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cum_downlink_bytes)
    }

    pub fn total_bytes(&self) -> u64 {
        self.uplink_bytes() + self.downlink_bytes()
    }

    /// Rows that moved at least one byte.
    pub fn network_rounds(&self) -> usize {
        self.rows.iter().filter(|r| r.communicates()).count()
    }

    /// Bytes in the given phase only.
    pub fn phase_bytes(&self, phase: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.uplink_bytes + r.downlink_bytes)
            .sum()
    }

    /// `bytes / bandwidth + network_rounds · latency + compute`.
    pub fn time(&self, model: &CostModel) -> f64 {
        self.cumulative_times(model).last().copied().unwrap_or(0.0)
    }

    /// Modeled seconds up to and including each row.
    pub fn cumulative_times(&self, model: &CostModel) -> Vec<f64> {
        let mut compute = 0.0;
        let mut rounds = 0usize;
        self.rows
            .iter()
            .map(|r| {
                compute += r.client_grads as f64 * model.client_grad_seconds
                    + r.server_steps as f64 * model.server_step_seconds;
                rounds += usize::from(r.communicates());
                (r.cum_uplink_bytes + r.cum_downlink_bytes) as f64 / model.bandwidth
                    + rounds as f64 * model.latency
                    + compute
            })
            .collect()
    }

    /// `round,phase,uplink_bytes,downlink_bytes,modeled_seconds` with
    /// cumulative modeled seconds.
    pub fn to_csv(&self, model: &CostModel) -> String {
        let mut out = String::from("round,phase,uplink_bytes,downlink_bytes,modeled_seconds\n");
        for (r, t) in self.rows.iter().zip(self.cumulative_times(model)) {
            let _ = writeln!(out, "{},{},{},{},{}", r.round, r.phase, r.uplink_bytes, r.downlink_bytes, t);
        }
        out
    }

    /// Checks the running totals against fresh prefix sums.
    pub fn prefix_sums_hold(&self) -> bool {
        let (mut up, mut down) = (0, 0);
        self.rows.iter().all(|r| {
            up += r.uplink_bytes;
            down += r.downlink_bytes;
            r.cum_uplink_bytes == up && r.cum_downlink_bytes == down
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, partition_dirichlet};
    use crate::models::{accuracy, init_params};
    use crate::numerics::Layout;
    use alloc::vec;
    use proptest::prelude::*;

    fn gv(v: &[f64]) -> GradVector {
        GradVector::new(Layout::single("g", &[v.len()]), v.to_vec()).unwrap()
    }

    fn msg(client: usize, v: &[f64]) -> GradMessage {
        GradMessage {
            round: 0,
            class: 0,
            client,
            grad: gv(v),
        }
    }

    #[test]
    fn selection_sizes() {
        assert_eq!(select_participants(20, 0.5, 3, 1).len(), 10);
        assert_eq!(select_participants(7, 1.0, 3, 9), (0..7).collect::<Vec<_>>());
        assert_eq!(select_participants(20, 0.01, 0, 0).len(), 1);
        assert_eq!(select_participants(20, 0.5, 4, 2), select_participants(20, 0.5, 4, 2));
        assert_ne!(select_participants(20, 0.5, 4, 2), select_participants(20, 0.5, 5, 2));
    }

    #[test]
    fn message_size() {
        assert_eq!(msg(0, &[1.0, 2.0]).bytes(), 40);
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[msg(0, &[1., 2.]), msg(1, &[3., 4.])], Aggregation::Sum).unwrap();
        assert_eq!(s.values(), &[4., 6.]);
        let m = aggregate(
            &[msg(0, &[1., 5.]), msg(1, &[2., 4.]), msg(2, &[9., 0.])],
            Aggregation::Median,
        )
        .unwrap();
        assert_eq!(m.values(), &[2., 4.]);
        let e = aggregate(&[msg(0, &[1.]), msg(1, &[4.])], Aggregation::Median).unwrap();
        assert_eq!(e.values(), &[2.5]);
        let mean = aggregate(&[msg(0, &[1.]), msg(1, &[4.])], Aggregation::Mean).unwrap();
        assert_eq!(mean.values(), &[2.5]);
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate(&[], Aggregation::Sum), Err(Error::Empty("aggregate")));
        assert_eq!(
            aggregate(&[msg(0, &[1.]), msg(1, &[1., 2.])], Aggregation::Sum),
            Err(Error::LayoutMismatch)
        );
    }

    #[test]
    fn median_matches_sort_oracle() {
        use rand::Rng as _;
        let mut r = rng::stream(3, &[]);
        let msgs: Vec<GradMessage> = (0..100)
            .map(|i| msg(i, &(0..6).map(|_| r.random::<f64>() - 0.5).collect::<Vec<_>>()))
            .collect();
        let med = aggregate(&msgs, Aggregation::Median).unwrap();
        for j in 0..6 {
            let mut col: Vec<f64> = msgs.iter().map(|m| m.grad.values()[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(med.values()[j], (col[49] + col[50]) / 2.0);
        }
    }

    proptest! {
        #[test]
        fn sum_is_permutation_invariant(
            vals in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..8),
            rot in 0usize..8,
        ) {
            let msgs: Vec<GradMessage> = vals.iter().enumerate().map(|(i, v)| msg(i, v)).collect();
            let mut shuffled = msgs.clone();
            let k = shuffled.len();
            shuffled.rotate_left(rot % k);
            shuffled.reverse();
            for mode in [Aggregation::Sum, Aggregation::Mean, Aggregation::Median] {
                prop_assert_eq!(aggregate(&msgs, mode).unwrap(), aggregate(&shuffled, mode).unwrap());
            }
        }

        #[test]
        fn median_resists_one_outlier(
            base in prop::collection::vec(-10f64..10.0, 3),
            junk in prop::collection::vec(-1e9f64..1e9, 3),
            k in 3usize..8,
            victim in 0usize..8,
        ) {
            let mut msgs: Vec<GradMessage> = (0..k).map(|i| msg(i, &base)).collect();
            msgs[victim % k] = msg(victim % k, &junk);
            let med = aggregate(&msgs, Aggregation::Median).unwrap();
            prop_assert_eq!(med.values(), base.as_slice());
        }

        #[test]
        fn ledger_prefix_sums(events in prop::collection::vec((0usize..5, any::<bool>(), 0u64..1000), 0..40)) {
            let mut ledger = CostLedger::new();
            let mut round = 0;
            for (dr, up, bytes) in events {
                round += dr;
                let dir = if up { Direction::Uplink } else { Direction::Downlink };
                ledger.record(round, "p", dir, bytes);
                prop_assert!(ledger.prefix_sums_hold());
            }
        }
    }

    #[test]
    fn ledger_time_examples() {
        let model = CostModel {
            bandwidth: 1e7,
            latency: 0.1,
            client_grad_seconds: 0.0,
            server_step_seconds: 0.0,
        };
        assert_eq!(CostLedger::new().time(&model), 0.0);
        let mut ledger = CostLedger::new();
        for t in 0..100 {
            ledger.record(t, "fl", Direction::Uplink, 1_000_000);
        }
        assert_eq!(ledger.total_bytes(), 100_000_000);
        assert!((ledger.time(&model) - 20.0).abs() < 1e-9);
        let csv = ledger.to_csv(&model);
        assert_eq!(csv.lines().count(), 101);
        assert!(csv.starts_with("round,phase,uplink_bytes,downlink_bytes,modeled_seconds\n0,fl,1000000,0,"));
    }

    #[test]
    fn one_client_one_step_is_centralized_sgd() {
        let ds = gen_blobs(3, 10, 2, 0.5, 0).unwrap();
        let spec = ModelSpec::mlp(2, &[4], 3);
        let theta = init_params(&spec, 1).unwrap();
        let cfg = RoundConfig {
            clients: 1,
            participation: 1.0,
            local_steps: 1,
            batch_size: 1000,
            ..RoundConfig::default()
        };
        let out = fedavg_round(&spec, &theta, core::slice::from_ref(&ds), &[0], &cfg, 0).unwrap();
        let g = models::class_gradient(&spec, &theta, ds.features(), ds.labels()).unwrap();
        assert_eq!(out, theta.sgd_step(&g, cfg.client_lr).unwrap());
    }

    #[test]
    fn identical_shards_match_single_client() {
        let ds = gen_blobs(3, 10, 2, 0.5, 0).unwrap();
        let spec = ModelSpec::linear(2, 3);
        let theta = init_params(&spec, 1).unwrap();
        let cfg = RoundConfig {
            clients: 4,
            participation: 1.0,
            local_steps: 3,
            batch_size: 1000,
            ..RoundConfig::default()
        };
        let shards = vec![ds.clone(); 4];
        let all = fedavg_round(&spec, &theta, &shards, &[0, 1, 2, 3], &cfg, 0).unwrap();
        let one = local_update(&spec, &theta, &ds, &cfg, 0, 2).unwrap();
        assert_eq!(all, one);
    }

    #[test]
    fn fedavg_learns_blobs() {
        let ds = gen_blobs(3, 100, 2, 0.5, 0).unwrap();
        let spec = ModelSpec::mlp(2, &[16], 3);
        let p = partition_dirichlet(&ds, 10, 1000.0, 0).unwrap();
        let shards = p.client_datasets(&ds);
        let cfg = RoundConfig {
            rounds: 50,
            ..RoundConfig::default()
        };
        let mut ledger = CostLedger::new();
        let theta = fedavg(&spec, &init_params(&spec, 0).unwrap(), &shards, &cfg, &mut ledger, "fedavg").unwrap();
        let acc = accuracy(&spec, &theta, ds.features(), ds.labels()).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
        let msg = message_bytes(spec.param_count());
        assert_eq!(ledger.total_bytes(), 50 * 2 * 5 * msg);
        assert_eq!(ledger.network_rounds(), 50);
    }

    #[test]
    fn config_problems_enumerate_fields() {
        let cfg = RoundConfig {
            clients: 0,
            participation: 0.0,
            rounds: 0,
            local_steps: 0,
            client_lr: -1.0,
            batch_size: 0,
            seed: 0,
        };
        let problems = cfg.problems();
        let fields: Vec<&str> = problems.iter().map(|p| p.0).collect();
        assert_eq!(
            fields,
            vec!["clients", "participation", "rounds", "local_steps", "client_lr", "batch_size"]
        );
    }
}
