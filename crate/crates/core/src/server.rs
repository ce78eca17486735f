//! Server state and aggregation rules.

use alloc::vec::Vec;

use crate::client::Algorithm;
use crate::error::{Error, Result};
use crate::params::{same_len, ParamVector};
use crate::BYTES_PER_PARAM;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerHyper {
    /// FedAGM server learning rate.
    pub tau: f64,
    /// FedAGM momentum decay.
    pub lambda: f64,
    /// FedAvgM server step size.
    pub global_lr: f64,
    pub avgm_beta: f64,
    /// FedAdam server step size.
    pub adam_lr: f64,
    /// FedAdam denominator offset.
    pub adam_tau: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for ServerHyper {
    fn default() -> Self {
        ServerHyper {
            tau: 1.0,
            lambda: 0.85,
            global_lr: 1.0,
            avgm_beta: 0.6,
            adam_lr: 0.01,
            adam_tau: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
        }
    }
}

impl ServerHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return bad("lambda must lie in [0, 1)");
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return bad("global_lr must be positive");
        }
        if !(self.avgm_beta >= 0.0 && self.avgm_beta < 1.0) {
            return bad("avgm_beta must lie in [0, 1)");
        }
        if !(self.adam_lr > 0.0 && self.adam_lr.is_finite()) {
            return bad("adam_lr must be positive");
        }
        if !(self.adam_tau > 0.0 && self.adam_tau.is_finite()) {
            return bad("adam_tau must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Global model plus every algorithm's server-side buffers. Buffers that the
/// running algorithm does not use stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: ParamVector,
    /// FedAGM global momentum, `-(theta^t - theta^{t-1})`.
    pub delta: ParamVector,
    pub avgm_buf: ParamVector,
    pub adam_m: ParamVector,
    pub adam_v: ParamVector,
    pub dyn_h: ParamVector,
    pub cm_momentum: ParamVector,
    pub round: usize,
    pub hyper: ServerHyper,
}

impl ServerState {
    pub fn new(theta: ParamVector, hyper: ServerHyper) -> Self {
        let zeros = ParamVector::zeros(theta.len());
        ServerState {
            delta: zeros.clone(),
            avgm_buf: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros.clone(),
            dyn_h: zeros.clone(),
            cm_momentum: zeros,
            theta,
            round: 0,
            hyper,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// What the server sends to each sampled client.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub model: ParamVector,
    /// FedCM's global momentum, sent alongside the model.
    pub momentum: Option<ParamVector>,
}

impl Broadcast {
    pub fn bytes_per_client(&self) -> u64 {
        let vectors = 1 + u64::from(self.momentum.is_some());
        vectors * self.model.len() as u64 * BYTES_PER_PARAM
    }
}

pub fn broadcast(state: &ServerState, algorithm: Algorithm) -> Result<Broadcast> {
    Ok(match algorithm {
        Algorithm::FedAgm => Broadcast { model: accelerated(state)?, momentum: None },
        Algorithm::FedCm => Broadcast { model: state.theta.clone(), momentum: Some(state.cm_momentum.clone()) },
        _ => Broadcast { model: state.theta.clone(), momentum: None },
    })
}

/// `theta - lambda * delta`.
fn accelerated(state: &ServerState) -> Result<ParamVector> {
    ParamVector::axpy(-state.hyper.lambda, &state.delta, &state.theta)
}

/// Round quantities some baseline rules need beyond the client returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundContext {
    /// Local step size used this round.
    pub local_lr: f64,
    pub local_iterations: usize,
    /// Total number of clients N.
    pub client_count: usize,
    pub dyn_alpha: f64,
}

fn check_returns(state: &ServerState, returns: &[ParamVector]) -> Result<()> {
    if returns.is_empty() {
        return Err(Error::Empty("client returns"));
    }
    for r in returns {
        same_len(&state.theta, r)?;
    }
    Ok(())
}

/// FedAGM server step:
/// `theta' = tau * mean(returns) + (1 - tau) * (theta - lambda * delta)` and
/// `delta' = -(theta' - theta)`.
pub fn aggregate_fedagm(state: &ServerState, returns: &[ParamVector]) -> Result<ServerState> {
    check_returns(state, returns)?;
    let tau = state.hyper.tau;
    let sent = accelerated(state)?;
    let mean = ParamVector::mean(returns)?;
    // mean - (1 - tau) * (mean - sent) returns `sent` exactly when no client moved
    let theta = if tau == 1.0 { mean } else { ParamVector::axpy(-(1.0 - tau), &mean.sub(&sent)?, &mean)? };
    let delta = state.theta.sub(&theta)?;
    Ok(ServerState { theta, delta, round: state.round + 1, ..state.clone() })
}

/// Server rules for every algorithm except FedAGM.
pub fn aggregate_baseline(
    state: &ServerState,
    returns: &[ParamVector],
    algorithm: Algorithm,
    ctx: &RoundContext,
) -> Result<ServerState> {
    check_returns(state, returns)?;
    let h = &state.hyper;
    let mean = ParamVector::mean(returns)?;
    let mut next = ServerState { round: state.round + 1, ..state.clone() };
    match algorithm {
        Algorithm::FedAvg | Algorithm::FedProx => next.theta = mean,
        Algorithm::FedAvgM => {
            // buf' = beta * buf + (theta - mean); theta' = theta - lr * buf',
            // arranged so that beta = 0, lr = 1 yields the plain mean exactly.
            let pseudo = state.theta.sub(&mean)?;
            next.avgm_buf = ParamVector::axpy(h.avgm_beta, &state.avgm_buf, &pseudo)?;
            let lr = h.global_lr;
            let out: Vec<f64> = mean
                .iter()
                .zip(pseudo.iter())
                .zip(state.avgm_buf.iter())
                .map(|((&m, &p), &b)| m + (1.0 - lr) * p - lr * h.avgm_beta * b)
                .collect();
            next.theta = ParamVector::from_vec(out)?;
        }
        Algorithm::FedAdam => {
            let step = mean.sub(&state.theta)?;
            next.adam_m = ParamVector::axpy(h.adam_beta1, &state.adam_m, &step.scale(1.0 - h.adam_beta1)?)?;
            let sq: Vec<f64> = step.iter().map(|s| (1.0 - h.adam_beta2) * s * s).collect();
            next.adam_v = ParamVector::axpy(h.adam_beta2, &state.adam_v, &ParamVector::from_vec(sq)?)?;
            let out: Vec<f64> = state
                .theta
                .iter()
                .zip(next.adam_m.iter())
                .zip(next.adam_v.iter())
                .map(|((&t, &m), &v)| t + h.adam_lr * m / (libm::sqrt(v) + h.adam_tau))
                .collect();
            next.theta = ParamVector::from_vec(out)?;
        }
        Algorithm::FedDyn => {
            if ctx.dyn_alpha > 0.0 {
                // h' = h - alpha/N * sum(theta_i - theta); theta' = mean - h'/alpha
                let moved = mean.sub(&state.theta)?;
                let scale = ctx.dyn_alpha * returns.len() as f64 / ctx.client_count as f64;
                next.dyn_h = ParamVector::axpy(-scale, &moved, &state.dyn_h)?;
                next.theta = ParamVector::axpy(-1.0 / ctx.dyn_alpha, &next.dyn_h, &mean)?;
            } else {
                next.theta = mean;
            }
        }
        Algorithm::FedCm => {
            // Average local gradient over the round: (theta - mean) / (lr * K).
            let steps = ctx.local_lr * ctx.local_iterations as f64;
            if steps > 0.0 {
                next.cm_momentum = state.theta.sub(&mean)?.scale(1.0 / steps)?;
            }
            next.theta = mean;
        }
        Algorithm::FedAgm => return Err(Error::Unsupported("fedagm uses aggregate_fedagm")),
    }
    Ok(next)
}

pub fn aggregate(
    state: &ServerState,
    returns: &[ParamVector],
    algorithm: Algorithm,
    ctx: &RoundContext,
) -> Result<ServerState> {
    match algorithm {
        Algorithm::FedAgm => aggregate_fedagm(state, returns),
        _ => aggregate_baseline(state, returns, algorithm, ctx),
    }
}

/// Residual of the momentum identity `delta' = tau * grad + lambda * delta`,
/// where `grad = -mean_i(theta_i - (theta - lambda * delta))` is the averaged
/// client movement from the accelerated model. Returned in the infinity norm.
pub fn check_momentum_identity(before: &ServerState, returns: &[ParamVector], after: &ServerState) -> Result<f64> {
    check_returns(before, returns)?;
    same_len(&before.theta, &after.delta)?;
    let (tau, lambda) = (before.hyper.tau, before.hyper.lambda);
    let sent = accelerated(before)?;
    let k = returns.len() as f64;
    let mut residual: f64 = 0.0;
    for j in 0..before.dim() {
        let moved: f64 = returns.iter().map(|r| r[j] - sent[j]).sum();
        let grad = -moved / k;
        let predicted = tau * grad + lambda * before.delta[j];
        residual = residual.max((after.delta[j] - predicted).abs());
    }
    Ok(residual)
}

/// Tolerance for [`check_momentum_identity`]: `1e-12 * (1 + ||delta'||_inf)`.
pub fn momentum_identity_bound(after: &ServerState) -> f64 {
    1e-12 * (1.0 + after.delta.norm_inf())
}
