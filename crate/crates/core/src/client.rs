//! Local training on one client.
//!
//! Every algorithm runs exactly `iterations` steps of clipped mini-batch SGD
//! from the broadcast model; they differ only in the direction `g` fed to
//! each step.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Batch, ModelSpec};
use crate::params::{same_len, ParamVector};
use crate::BYTES_PER_PARAM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedAvgM,
    FedAdam,
    FedDyn,
    FedCm,
    FedAgm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::FedAvg,
        Algorithm::FedProx,
        Algorithm::FedAvgM,
        Algorithm::FedAdam,
        Algorithm::FedDyn,
        Algorithm::FedCm,
        Algorithm::FedAgm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedAvgM => "fedavgm",
            Algorithm::FedAdam => "fedadam",
            Algorithm::FedDyn => "feddyn",
            Algorithm::FedCm => "fedcm",
            Algorithm::FedAgm => "fedagm",
        }
    }

    /// Number of parameter vectors sent to each sampled client per round.
    pub fn downlink_vectors(self) -> u64 {
        match self {
            Algorithm::FedCm => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown algorithm '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    /// Local SGD steps per round (K).
    pub iterations: usize,
    /// Passes over the shard that `iterations` steps should amount to; sets
    /// the batch size when `batch_size` is `None`.
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr: f64,
    /// Per-round multiplicative decay of `lr`.
    pub lr_decay: f64,
    pub clip_norm: f64,
    /// Weight on the local loss in the FedAGM objective.
    pub alpha: f64,
    /// Weight on the FedAGM proximity penalty to the broadcast model.
    pub beta: f64,
    pub prox_mu: f64,
    pub cm_alpha: f64,
    pub dyn_alpha: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            iterations: 50,
            epochs: 5,
            batch_size: None,
            lr: 0.1,
            lr_decay: 1.0,
            clip_norm: 10.0,
            alpha: 1.0,
            beta: 0.01,
            prox_mu: 0.01,
            cm_alpha: 0.1,
            dyn_alpha: 0.01,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.iterations == 0 {
            return bad("local iterations must be positive");
        }
        if self.epochs == 0 || self.batch_size == Some(0) {
            return bad("local epochs and batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("local learning rate must be a nonnegative number");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !self.alpha.is_finite() || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("alpha must be finite and beta nonnegative");
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) || !(self.dyn_alpha >= 0.0 && self.dyn_alpha.is_finite()) {
            return bad("prox_mu and dyn_alpha must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.cm_alpha) {
            return bad("cm_alpha must lie in [0, 1]");
        }
        Ok(())
    }

    /// Step size used in `round`: `lr * lr_decay^round`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * libm::pow(self.lr_decay, round as f64)
    }

    /// `ceil(shard_len * epochs / iterations)` unless fixed explicitly, capped at the shard size.
    pub fn batch_size_for(&self, shard_len: usize) -> usize {
        let derived = (shard_len * self.epochs).div_ceil(self.iterations);
        self.batch_size.unwrap_or(derived).clamp(1, shard_len.max(1))
    }
}

/// Per-client input beyond the broadcast model.
#[derive(Debug, Clone, Copy)]
pub enum LocalAux<'a> {
    None,
    /// FedCM: the server's global momentum estimate.
    Momentum(&'a ParamVector),
    /// FedDyn: this client's persistent linear-term state.
    DynState(&'a ParamVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub final_params: ParamVector,
    pub local_steps_taken: usize,
    pub train_loss_last: f64,
    pub bytes_up: u64,
    /// FedDyn only: the client's updated linear-term state.
    pub dyn_state: Option<ParamVector>,
}

/// Gradient of `alpha * f_i(params) + beta/2 * ||params - broadcast||^2`.
pub fn local_gradient_fedagm(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    broadcast: &ParamVector,
    cfg: &LocalConfig,
) -> Result<ParamVector> {
    same_len(params, broadcast)?;
    let grad = spec.gradient(params, batch)?;
    let mut g = grad.into_vec();
    add_fedagm_terms(&mut g, params.as_slice(), broadcast.as_slice(), cfg.alpha, cfg.beta);
    ParamVector::from_raw(g).ensure_finite("local gradient")
}

fn add_fedagm_terms(g: &mut [f64], params: &[f64], broadcast: &[f64], alpha: f64, beta: f64) {
    if alpha != 1.0 {
        g.iter_mut().for_each(|v| *v *= alpha);
    }
    if beta != 0.0 {
        for ((v, &p), &b) in g.iter_mut().zip(params).zip(broadcast) {
            *v += beta * (p - b);
        }
    }
}

/// Rescales `g` onto the ball of radius `max_norm` when it lies outside.
pub fn clip_to_norm(g: &ParamVector, max_norm: f64) -> ParamVector {
    let mut out = g.clone();
    clip_in_place(out.as_mut_slice(), max_norm);
    out
}

fn clip_in_place(g: &mut [f64], max_norm: f64) {
    // scaled by the largest entry so that huge finite gradients do not overflow
    let largest = g.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    if largest == 0.0 {
        return;
    }
    let norm = largest * libm::sqrt(g.iter().map(|v| (v / largest) * (v / largest)).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Cycles through a shard in shuffled mini-batches, reshuffling once fewer
/// than a full batch remains.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl BatchCursor {
    fn new<R: Rng + ?Sized>(len: usize, size: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        BatchCursor { order, pos: 0, size }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.size;
        &self.order[start..self.pos]
    }
}

/// Runs `cfg.iterations` local steps of `algorithm` starting from `init`.
///
/// `init` is the model received from the server (for FedAGM, the accelerated
/// model). Errors are tagged with `round` and the failing step; the caller
/// fills in the client id.
#[allow(clippy::too_many_arguments)]
pub fn local_update<R: Rng + ?Sized>(
    spec: &ModelSpec,
    init: &ParamVector,
    shard: &Dataset,
    cfg: &LocalConfig,
    round: usize,
    rng: &mut R,
    algorithm: Algorithm,
    aux: LocalAux<'_>,
) -> Result<ClientResult> {
    let d = spec.param_count();
    if init.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: init.len() });
    }
    if shard.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    let momentum = match (algorithm, aux) {
        (Algorithm::FedCm, LocalAux::Momentum(m)) => Some(m),
        (Algorithm::FedCm, _) => return Err(Error::InvalidConfig("fedcm needs the global momentum".into())),
        _ => None,
    };
    let dyn_state = match (algorithm, aux) {
        (Algorithm::FedDyn, LocalAux::DynState(h)) => Some(h),
        (Algorithm::FedDyn, _) => return Err(Error::InvalidConfig("feddyn needs the client state".into())),
        _ => None,
    };
    for v in momentum.iter().chain(dyn_state.iter()) {
        same_len(init, v)?;
    }

    let lr = cfg.lr_at(round);
    let mut cursor = BatchCursor::new(shard.len(), cfg.batch_size_for(shard.len()), rng);
    let mut theta = init.clone();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.iterations {
        let tag = |e: Error| Error::Client { round, client: 0, step, source: alloc::boxed::Box::new(e) };
        let batch = shard.batch(cursor.next(rng)).map_err(tag)?;
        let (loss, grad) = spec.loss_and_gradient(&theta, &batch).map_err(tag)?;
        last_loss = loss;
        let mut g = grad.into_vec();
        let (t, x0) = (theta.as_slice(), init.as_slice());
        match algorithm {
            Algorithm::FedAvg | Algorithm::FedAvgM | Algorithm::FedAdam => {}
            Algorithm::FedAgm => add_fedagm_terms(&mut g, t, x0, cfg.alpha, cfg.beta),
            Algorithm::FedProx => {
                if cfg.prox_mu != 0.0 {
                    for ((v, &p), &b) in g.iter_mut().zip(t).zip(x0) {
                        *v += cfg.prox_mu * (p - b);
                    }
                }
            }
            Algorithm::FedDyn => {
                let h = dyn_state.expect("checked above").as_slice();
                for (((v, &p), &b), &hj) in g.iter_mut().zip(t).zip(x0).zip(h) {
                    *v -= hj;
                    if cfg.dyn_alpha != 0.0 {
                        *v += cfg.dyn_alpha * (p - b);
                    }
                }
            }
            Algorithm::FedCm => {
                if cfg.cm_alpha != 1.0 {
                    let m = momentum.expect("checked above").as_slice();
                    for (v, &mj) in g.iter_mut().zip(m) {
                        *v = cfg.cm_alpha * *v + (1.0 - cfg.cm_alpha) * mj;
                    }
                }
            }
        }
        clip_in_place(&mut g, cfg.clip_norm);
        for (p, &gj) in theta.as_mut_slice().iter_mut().zip(&g) {
            *p -= lr * gj;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(tag(Error::NonFinite("local parameters")));
        }
    }

    let dyn_state = match dyn_state {
        Some(h) => {
            let moved = theta.sub(init)?;
            Some(ParamVector::axpy(-cfg.dyn_alpha, &moved, h)?)
        }
        None => None,
    };
    Ok(ClientResult {
        final_params: theta,
        local_steps_taken: cfg.iterations,
        train_loss_last: last_loss,
        bytes_up: d as u64 * BYTES_PER_PARAM,
        dyn_state,
    })
}
