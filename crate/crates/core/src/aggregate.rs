//! Server and peer aggregation: FedAvg, FedProx, FedOpt and Scaffold, plus
//! the policy for persistent buffers.
//!
//! All arithmetic runs on `f64` copies of the flat trainable vector and is
//! rounded to `f32` once. Updates are sorted by client id before any
//! summation so results never depend on arrival order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ClientUpdate;
use crate::params::{ControlVariates, ParameterSet, ParamsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no client updates to aggregate")]
    EmptyUpdateSet,
    #[error("total sample weight is zero")]
    ZeroTotalWeight,
    #[error("client `{0}` has no control variate")]
    MissingVariate(String),
    #[error("model carries persistent buffers {0:?} but the buffer policy requires a stateless model")]
    StatefulModelRejected(Vec<String>),
    #[error("updates from rounds {0} and {1} mixed in one aggregation")]
    RoundMismatch(u32, u32),
    #[error("client `{0}` submitted more than one update")]
    DuplicateClient(String),
    #[error("invalid aggregator configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed aggregator state: {0}")]
    MalformedState(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

pub type Result<T> = std::result::Result<T, AggregateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedOpt,
    Scaffold,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::FedAvg, Algorithm::FedProx, Algorithm::FedOpt, Algorithm::Scaffold];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedProx => "FedProx",
            Algorithm::FedOpt => "FedOpt",
            Algorithm::Scaffold => "Scaffold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferPolicy {
    WeightedAverage,
    KeepServer,
    RequireStateless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_server_lr")]
    pub server_lr: f64,
    #[serde(default = "default_momentum")]
    pub server_momentum: f64,
    #[serde(default)]
    pub prox_mu: f64,
    /// Unset means the algorithm's default, see [`AggregatorConfig::buffer_policy`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_policy: Option<BufferPolicy>,
}

fn default_server_lr() -> f64 {
    1.0
}

fn default_momentum() -> f64 {
    0.9
}

impl AggregatorConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            server_lr: default_server_lr(),
            server_momentum: default_momentum(),
            prox_mu: 0.0,
            buffer_policy: None,
        }
    }

    pub fn buffer_policy(&self) -> BufferPolicy {
        self.buffer_policy.unwrap_or(match self.algorithm {
            Algorithm::FedOpt | Algorithm::Scaffold => BufferPolicy::RequireStateless,
            Algorithm::FedAvg | Algorithm::FedProx => BufferPolicy::WeightedAverage,
        })
    }

    /// Proximal coefficient clients should apply this round.
    pub fn client_prox_mu(&self) -> f64 {
        if self.algorithm == Algorithm::FedProx {
            self.prox_mu
        } else {
            0.0
        }
    }

    /// Returns the offending field name with the message.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(("server_lr", format!("must be positive, got {}", self.server_lr)));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(("server_momentum", format!("must lie in [0, 1), got {}", self.server_momentum)));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(("prox_mu", format!("must be nonnegative, got {}", self.prox_mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub momentum: ParameterSet,
    pub t: u64,
}

impl ServerOptState {
    pub fn new(template: &ParameterSet) -> Self {
        Self { momentum: template.trainable().zeros_like(), t: 0 }
    }
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or(AggregateError::EmptyUpdateSet)?;
    let mut seen = BTreeSet::new();
    for u in updates {
        if u.round != first.round {
            return Err(AggregateError::RoundMismatch(first.round, u.round));
        }
        if !seen.insert(u.client.as_str()) {
            return Err(AggregateError::DuplicateClient(u.client.clone()));
        }
    }
    let mut out: Vec<&ClientUpdate> = updates.iter().collect();
    out.sort_by(|a, b| a.client.cmp(&b.client));
    Ok(out)
}

fn check_shapes(global: &ParameterSet, updates: &[&ClientUpdate]) -> Result<()> {
    for u in updates {
        u.weights
            .check_structure(global)
            .map_err(|e| ParamsError::StructureMismatch(format!("update from {}: {e}", u.client)))?;
    }
    Ok(())
}

/// Coordinatewise `global + mean_i (w_i - global)` style helpers on flat vectors.
fn flat_trainables(updates: &[&ClientUpdate]) -> Vec<Vec<f64>> {
    updates.iter().map(|u| u.weights.trainable().to_flat_f64()).collect()
}

fn finish(global: &ParameterSet, trainable: &[f64], buffers: ParameterSet) -> Result<ParameterSet> {
    let t = global.trainable().with_flat_f64(trainable)?;
    Ok(t.merged(&buffers)?)
}

/// Combines client buffers per `policy`; weights are the clients' sample counts.
pub fn aggregate_buffers(
    global: &ParameterSet,
    clients: &[(&ParameterSet, u64)],
    policy: BufferPolicy,
) -> Result<ParameterSet> {
    let template = global.buffers();
    if template.is_empty() {
        return Ok(template);
    }
    match policy {
        BufferPolicy::RequireStateless => {
            Err(AggregateError::StatefulModelRejected(template.names().map(str::to_owned).collect()))
        }
        BufferPolicy::KeepServer => Ok(template),
        BufferPolicy::WeightedAverage => {
            let total: u64 = clients.iter().map(|(_, n)| n).sum();
            if total == 0 {
                return Err(AggregateError::ZeroTotalWeight);
            }
            let mut acc = vec![0.0; template.num_values()];
            for (set, n) in clients {
                let b = set.buffers();
                b.check_structure(&template)?;
                let w = *n as f64 / total as f64;
                for (a, v) in acc.iter_mut().zip(b.to_flat_f64()) {
                    *a += w * v;
                }
            }
            Ok(template.with_flat_f64(&acc)?)
        }
    }
}

fn buffers_of(global: &ParameterSet, updates: &[&ClientUpdate], policy: BufferPolicy) -> Result<ParameterSet> {
    let clients: Vec<(&ParameterSet, u64)> = updates.iter().map(|u| (&u.weights, u.num_samples)).collect();
    aggregate_buffers(global, &clients, policy)
}

/// Sample-weighted average of client weights.
pub fn fed_avg(global: &ParameterSet, updates: &[ClientUpdate], cfg: &AggregatorConfig) -> Result<ParameterSet> {
    let updates = sorted(updates)?;
    check_shapes(global, &updates)?;
    let total: u64 = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(AggregateError::ZeroTotalWeight);
    }
    let buffers = buffers_of(global, &updates, cfg.buffer_policy())?;
    let mut acc = vec![0.0; global.trainable().num_values()];
    for (u, flat) in updates.iter().zip(flat_trainables(&updates)) {
        let w = u.num_samples as f64;
        for (a, v) in acc.iter_mut().zip(flat) {
            *a += w * v;
        }
    }
    for a in acc.iter_mut() {
        *a /= total as f64;
    }
    finish(global, &acc, buffers)
}

/// Unweighted mean of `w_i - global` over the participants.
fn mean_delta(global: &[f64], flats: &[Vec<f64>]) -> Vec<f64> {
    let k = flats.len() as f64;
    let mut acc = vec![0.0; global.len()];
    for flat in flats {
        for ((a, v), g) in acc.iter_mut().zip(flat).zip(global) {
            *a += v - g;
        }
    }
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// Server SGD with momentum on the negated mean client delta.
pub fn fed_opt_update(
    global: &ParameterSet,
    updates: &[ClientUpdate],
    state: &ServerOptState,
    cfg: &AggregatorConfig,
) -> Result<(ParameterSet, ServerOptState)> {
    let updates = sorted(updates)?;
    check_shapes(global, &updates)?;
    state.momentum.check_structure(&global.trainable())?;
    if updates.iter().all(|u| u.num_samples == 0) {
        return Err(AggregateError::ZeroTotalWeight);
    }
    let buffers = buffers_of(global, &updates, cfg.buffer_policy())?;
    let w = global.trainable().to_flat_f64();
    let delta = mean_delta(&w, &flat_trainables(&updates));
    let m_old = state.momentum.to_flat_f64();
    let m: Vec<f64> = m_old.iter().zip(&delta).map(|(m, d)| cfg.server_momentum * m - d).collect();
    let next: Vec<f64> = w.iter().zip(&m).map(|(w, m)| w - cfg.server_lr * m).collect();
    let state = ServerOptState { momentum: state.momentum.with_flat_f64(&m)?, t: state.t + 1 };
    Ok((finish(global, &next, buffers)?, state))
}

/// Scaffold server step; `variates` holds the variates the clients trained
/// with, and every update carries its refreshed client variate.
pub fn scaffold_update(
    global: &ParameterSet,
    updates: &[ClientUpdate],
    variates: &ControlVariates,
    cfg: &AggregatorConfig,
) -> Result<(ParameterSet, ControlVariates)> {
    let updates = sorted(updates)?;
    check_shapes(global, &updates)?;
    if updates.iter().all(|u| u.num_samples == 0) {
        return Err(AggregateError::ZeroTotalWeight);
    }
    let mut next_variates = variates.clone();
    for u in &updates {
        if variates.client(&u.client).is_none() {
            return Err(AggregateError::MissingVariate(u.client.clone()));
        }
        let reported = u.variate.as_ref().ok_or_else(|| AggregateError::MissingVariate(u.client.clone()))?;
        next_variates.set_client(&u.client, reported.clone())?;
    }
    let buffers = buffers_of(global, &updates, cfg.buffer_policy())?;

    let w = global.trainable().to_flat_f64();
    let c = variates.global().to_flat_f64();
    let k = updates.len() as f64;
    let mut step = vec![0.0; w.len()];
    for (u, flat) in updates.iter().zip(flat_trainables(&updates)) {
        let ci = variates.client(&u.client).expect("checked above").to_flat_f64();
        for i in 0..w.len() {
            step[i] += (flat[i] - w[i]) - ci[i] + c[i];
        }
    }
    let next: Vec<f64> = w.iter().zip(&step).map(|(w, s)| w + cfg.server_lr * s / k).collect();
    next_variates.refresh_global()?;
    Ok((finish(global, &next, buffers)?, next_variates))
}

/// Stateful front end used by coordinators: holds the FedOpt momentum or the
/// Scaffold variates between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    config: AggregatorConfig,
    opt_state: Option<ServerOptState>,
    variates: Option<ControlVariates>,
}

impl Aggregator {
    /// `clients` are all registered participants (Scaffold averages its
    /// global variate over every one of them).
    pub fn new<S: AsRef<str>>(config: AggregatorConfig, template: &ParameterSet, clients: &[S]) -> Result<Self> {
        config.validate().map_err(|(f, m)| AggregateError::InvalidConfig(format!("{f} {m}")))?;
        if config.buffer_policy() == BufferPolicy::RequireStateless && template.has_buffers() {
            return Err(AggregateError::StatefulModelRejected(template.buffers().names().map(str::to_owned).collect()));
        }
        let opt_state = (config.algorithm == Algorithm::FedOpt).then(|| ServerOptState::new(template));
        let variates = (config.algorithm == Algorithm::Scaffold)
            .then(|| ControlVariates::zeros(clients.iter().map(|c| c.as_ref().to_owned()), template));
        Ok(Self { config, opt_state, variates })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn variates(&self) -> Option<&ControlVariates> {
        self.variates.as_ref()
    }

    pub fn opt_state(&self) -> Option<&ServerOptState> {
        self.opt_state.as_ref()
    }

    pub fn aggregate(&mut self, global: &ParameterSet, updates: &[ClientUpdate]) -> Result<ParameterSet> {
        match self.config.algorithm {
            Algorithm::FedAvg | Algorithm::FedProx => fed_avg(global, updates, &self.config),
            Algorithm::FedOpt => {
                let state = self.opt_state.as_ref().expect("FedOpt state");
                let (next, state) = fed_opt_update(global, updates, state, &self.config)?;
                self.opt_state = Some(state);
                Ok(next)
            }
            Algorithm::Scaffold => {
                let variates = self.variates.as_ref().expect("Scaffold variates");
                let (next, variates) = scaffold_update(global, updates, variates, &self.config)?;
                self.variates = Some(variates);
                Ok(next)
            }
        }
    }

    /// Server state as bytes, for handing aggregation duty to another node.
    pub fn export_state(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FFAS");
        match &self.opt_state {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.t.to_le_bytes());
                put_blob(&mut out, &s.momentum.serialize());
            }
            None => out.push(0),
        }
        match &self.variates {
            Some(v) => {
                out.push(1);
                put_blob(&mut out, &v.global().serialize());
                out.extend_from_slice(&(v.clients().len() as u32).to_le_bytes());
                for (name, c) in v.clients() {
                    put_blob(&mut out, name.as_bytes());
                    put_blob(&mut out, &c.serialize());
                }
            }
            None => out.push(0),
        }
        out
    }

    /// Replaces the held state with one produced by [`Aggregator::export_state`].
    pub fn import_state(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = StateReader { bytes, pos: 0 };
        if r.take(4)? != b"FFAS" {
            return Err(AggregateError::MalformedState("bad magic".into()));
        }
        let opt_state = if r.flag()? {
            let t = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            Some(ServerOptState { t, momentum: ParameterSet::deserialize(r.blob()?)? })
        } else {
            None
        };
        let variates = if r.flag()? {
            let global = ParameterSet::deserialize(r.blob()?)?;
            let n = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            let mut clients = std::collections::BTreeMap::new();
            for _ in 0..n {
                let name = String::from_utf8(r.blob()?.to_vec())
                    .map_err(|_| AggregateError::MalformedState("client name is not UTF-8".into()))?;
                clients.insert(name, ParameterSet::deserialize(r.blob()?)?);
            }
            Some(ControlVariates::from_parts(clients, global)?)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(AggregateError::MalformedState("trailing bytes".into()));
        }
        if opt_state.is_some() != self.opt_state.is_some() || variates.is_some() != self.variates.is_some() {
            return Err(AggregateError::MalformedState("state does not match the configured algorithm".into()));
        }
        self.opt_state = opt_state;
        self.variates = variates;
        Ok(())
    }
}

fn put_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

struct StateReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> StateReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AggregateError::MalformedState(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            f => Err(AggregateError::MalformedState(format!("bad flag {f}"))),
        }
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::TensorKind;

    fn scalar(v: f32) -> ParameterSet {
        ParameterSet::new().with("t", vec![1], vec![v], TensorKind::Trainable)
    }

    fn update(client: &str, weights: ParameterSet, n: u64) -> ClientUpdate {
        ClientUpdate {
            client: client.into(),
            round: 0,
            num_samples: n,
            weights,
            variate: None,
            train_loss: 0.0,
            steps: 1,
        }
    }

    fn value(p: &ParameterSet) -> f64 {
        p.get("t").unwrap().values()[0] as f64
    }

    #[test]
    fn fed_avg_single_update_is_identity() {
        let w = ParameterSet::new().with("a", vec![3], vec![0.1, -7.25, 3.3], TensorKind::Trainable);
        let out =
            fed_avg(&w.zeros_like(), &[update("x", w.clone(), 17)], &AggregatorConfig::new(Algorithm::FedAvg)).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn fed_avg_weights_by_image_count() {
        let cfg = AggregatorConfig::new(Algorithm::FedAvg);
        let out =
            fed_avg(&scalar(0.0), &[update("mu", scalar(1.0), 700), update("ka", scalar(5.0), 93)], &cfg).unwrap();
        let expected = ((700.0 * 1.0 + 93.0 * 5.0) / 793.0) as f32;
        assert_eq!(out.get("t").unwrap().values()[0], expected);
    }

    #[test]
    fn fed_avg_consensus_is_fixed_point() {
        let w = scalar(0.3);
        let cfg = AggregatorConfig::new(Algorithm::FedAvg);
        let out = fed_avg(&scalar(9.0), &[update("a", w.clone(), 3), update("b", w.clone(), 1000)], &cfg).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn fed_avg_errors() {
        let cfg = AggregatorConfig::new(Algorithm::FedAvg);
        assert_eq!(fed_avg(&scalar(0.0), &[], &cfg), Err(AggregateError::EmptyUpdateSet));
        assert_eq!(
            fed_avg(&scalar(0.0), &[update("a", scalar(1.0), 0), update("b", scalar(2.0), 0)], &cfg),
            Err(AggregateError::ZeroTotalWeight)
        );
        let other = ParameterSet::new().with("u", vec![1], vec![1.0], TensorKind::Trainable);
        assert!(matches!(
            fed_avg(&scalar(0.0), &[update("a", other, 1)], &cfg),
            Err(AggregateError::Params(ParamsError::StructureMismatch(_)))
        ));
        let mut late = update("b", scalar(1.0), 1);
        late.round = 1;
        assert_eq!(
            fed_avg(&scalar(0.0), &[update("a", scalar(1.0), 1), late], &cfg),
            Err(AggregateError::RoundMismatch(0, 1))
        );
    }

    #[test]
    fn fed_opt_full_step_without_momentum() {
        let cfg = AggregatorConfig { server_momentum: 0.0, ..AggregatorConfig::new(Algorithm::FedOpt) };
        let global = scalar(1.0);
        let state = ServerOptState::new(&global);
        let (out, state) = fed_opt_update(&global, &[update("a", scalar(4.5), 10)], &state, &cfg).unwrap();
        assert_eq!(value(&out), 4.5);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn fed_opt_zero_delta_decays_momentum() {
        let cfg = AggregatorConfig::new(Algorithm::FedOpt);
        let global = scalar(2.0);
        let state = ServerOptState { momentum: scalar(1.0), t: 4 };
        let (out, state) = fed_opt_update(&global, &[update("a", scalar(2.0), 1)], &state, &cfg).unwrap();
        assert!((value(&state.momentum) - 0.9).abs() < 1e-7);
        // w - lr * m with m = 0.9
        assert!((value(&out) - 1.1).abs() < 1e-6);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn fed_opt_two_rounds_of_momentum() {
        let cfg = AggregatorConfig::new(Algorithm::FedOpt);
        let d = 0.5f32;
        let w0 = scalar(0.0);
        let state = ServerOptState::new(&w0);
        let (w1, state) = fed_opt_update(&w0, &[update("a", scalar(d), 1)], &state, &cfg).unwrap();
        let next = value(&w1) as f32 + d;
        let (w2, _) = fed_opt_update(&w1, &[update("a", scalar(next), 1)], &state, &cfg).unwrap();
        let expected = d as f64 + (d as f64 + 0.9 * d as f64);
        assert!((value(&w2) - expected).abs() < 1e-6);
    }

    #[test]
    fn scaffold_scalar_oracle() {
        let global = scalar(3.0);
        let variates = ControlVariates::from_parts(
            [("a".to_string(), scalar(1.0)), ("b".to_string(), scalar(-1.0))].into(),
            scalar(0.0),
        )
        .unwrap();
        let mut a = update("a", scalar(5.0), 1);
        a.variate = Some(scalar(2.0));
        let mut b = update("b", scalar(7.0), 1);
        b.variate = Some(scalar(4.0));
        let cfg = AggregatorConfig { server_lr: 0.5, ..AggregatorConfig::new(Algorithm::Scaffold) };
        let (out, v) = scaffold_update(&global, &[a, b], &variates, &cfg).unwrap();
        assert_eq!(value(&out), 4.5);
        assert_eq!(value(v.client("a").unwrap()), 2.0);
        assert_eq!(value(v.global()), 3.0);
    }

    #[test]
    fn scaffold_cancellation_and_missing_variate() {
        let global = scalar(1.0);
        let variates = ControlVariates::from_parts([("a".to_string(), scalar(0.75))].into(), scalar(0.25)).unwrap();
        let mut a = update("a", scalar(1.5), 1);
        a.variate = Some(scalar(0.0));
        let cfg = AggregatorConfig::new(Algorithm::Scaffold);
        let (out, _) = scaffold_update(&global, &[a], &variates, &cfg).unwrap();
        assert_eq!(value(&out), 1.0);

        let mut stranger = update("z", scalar(1.5), 1);
        stranger.variate = Some(scalar(0.0));
        assert_eq!(
            scaffold_update(&global, &[stranger], &variates, &cfg),
            Err(AggregateError::MissingVariate("z".into()))
        );
        assert_eq!(
            scaffold_update(&global, &[update("a", scalar(1.5), 1)], &variates, &cfg),
            Err(AggregateError::MissingVariate("a".into()))
        );
    }

    #[test]
    fn scaffold_global_variate_spans_all_registered_clients() {
        let global = scalar(0.0);
        let mut variates = ControlVariates::zeros(["a", "b", "c", "d"], &global);
        variates.refresh_global().unwrap();
        let mut a = update("a", scalar(0.0), 1);
        a.variate = Some(scalar(4.0));
        let cfg = AggregatorConfig::new(Algorithm::Scaffold);
        let (_, v) = scaffold_update(&global, &[a], &variates, &cfg).unwrap();
        assert_eq!(value(v.global()), 1.0);
    }

    fn with_buffer(mean: f32) -> ParameterSet {
        scalar(0.0).with("bn.running_mean", vec![1], vec![mean], TensorKind::PersistentBuffer)
    }

    #[test]
    fn buffer_policies() {
        let global = with_buffer(7.0);
        let a = with_buffer(0.0);
        let b = with_buffer(2.0);
        let clients = [(&a, 5), (&b, 5)];
        let avg = aggregate_buffers(&global, &clients, BufferPolicy::WeightedAverage).unwrap();
        assert_eq!(avg.get("bn.running_mean").unwrap().values(), &[1.0]);
        let keep = aggregate_buffers(&global, &clients, BufferPolicy::KeepServer).unwrap();
        assert_eq!(keep.get("bn.running_mean").unwrap().values(), &[7.0]);
        assert!(matches!(
            aggregate_buffers(&global, &clients, BufferPolicy::RequireStateless),
            Err(AggregateError::StatefulModelRejected(_))
        ));
        for policy in [BufferPolicy::WeightedAverage, BufferPolicy::KeepServer, BufferPolicy::RequireStateless] {
            assert!(aggregate_buffers(&scalar(0.0), &[], policy).unwrap().is_empty());
        }
    }

    #[test]
    fn default_buffer_policy_by_algorithm() {
        assert_eq!(AggregatorConfig::new(Algorithm::FedAvg).buffer_policy(), BufferPolicy::WeightedAverage);
        assert_eq!(AggregatorConfig::new(Algorithm::FedProx).buffer_policy(), BufferPolicy::WeightedAverage);
        assert_eq!(AggregatorConfig::new(Algorithm::FedOpt).buffer_policy(), BufferPolicy::RequireStateless);
        assert_eq!(AggregatorConfig::new(Algorithm::Scaffold).buffer_policy(), BufferPolicy::RequireStateless);
        let err = Aggregator::new(AggregatorConfig::new(Algorithm::FedOpt), &with_buffer(0.0), &["a"]).unwrap_err();
        assert!(matches!(err, AggregateError::StatefulModelRejected(_)));
    }

    #[test]
    fn state_export_round_trips() {
        let template = scalar(0.0);
        for algorithm in Algorithm::ALL {
            let mut agg = Aggregator::new(AggregatorConfig::new(algorithm), &template, &["a", "b"]).unwrap();
            let mut u = update("a", scalar(1.0), 3);
            u.variate = Some(scalar(0.5));
            agg.aggregate(&template, &[u]).unwrap();
            let bytes = agg.export_state();
            let mut fresh = Aggregator::new(AggregatorConfig::new(algorithm), &template, &["a", "b"]).unwrap();
            fresh.import_state(&bytes).unwrap();
            assert_eq!(fresh, agg);
            for cut in 0..bytes.len() {
                assert!(fresh.import_state(&bytes[..cut]).is_err());
            }
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = AggregatorConfig { prox_mu: -1.0, ..AggregatorConfig::new(Algorithm::FedProx) };
        assert_eq!(bad.validate().unwrap_err().0, "prox_mu");
        let bad = AggregatorConfig { server_momentum: 1.0, ..AggregatorConfig::new(Algorithm::FedOpt) };
        assert_eq!(bad.validate().unwrap_err().0, "server_momentum");
        let bad = AggregatorConfig { server_lr: 0.0, ..AggregatorConfig::new(Algorithm::FedOpt) };
        assert_eq!(bad.validate().unwrap_err().0, "server_lr");
    }
}
