//! The round loop: sample, broadcast, train locally, aggregate, evaluate.
//!
//! Rounds run one after another; the clients of a round are independent and
//! are handed to an [`Executor`], which may run them in parallel. Each client
//! draws from its own random stream keyed by `(seed, round, client)` and the
//! server consumes results in ascending client order, so a run's output does
//! not depend on how the executor schedules work.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::client::{local_update, Algorithm, ClientResult, LocalAux, LocalConfig};
use crate::data::{Dataset, Partition, PartitionSpec};
use crate::error::{Error, Result};
use crate::metrics::{global_loss_of_shards, EmaSeries};
use crate::models::{Batch, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{stream, Purpose};
use crate::server::{aggregate, broadcast, check_momentum_identity, momentum_identity_bound, RoundContext, ServerHyper, ServerState};
use crate::BYTES_PER_PARAM;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    /// Total number of clients N.
    pub clients: usize,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    pub rounds: usize,
    pub local: LocalConfig,
    pub server: ServerHyper,
    pub seed: u64,
    pub eval_every: usize,
    /// Accuracy thresholds reported as rounds-to-target.
    pub targets: Vec<f64>,
}

impl RunConfig {
    /// Defaults for a classifier: FedAGM with the usual hyperparameters,
    /// 100 clients, 5% participation.
    pub fn new(algorithm: Algorithm, model: ModelSpec) -> Self {
        RunConfig {
            algorithm,
            model,
            partition: PartitionSpec::Dirichlet { concentration: 0.3 },
            clients: 100,
            participation: 0.05,
            rounds: 100,
            local: LocalConfig::default(),
            server: ServerHyper::default(),
            seed: 0,
            eval_every: 1,
            targets: Vec::new(),
        }
    }

    pub fn sample_size(&self) -> usize {
        sample_size(self.clients, self.participation)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        self.model.validate()?;
        if !self.model.is_classifier() {
            return bad("federated runs need a classifier model");
        }
        self.local.validate()?;
        self.server.validate()?;
        if self.clients == 0 {
            return bad("client count must be positive");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must lie in (0, 1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if let PartitionSpec::Dirichlet { concentration } = self.partition {
            if !(concentration > 0.0 && concentration.is_finite()) {
                return bad("dirichlet concentration must be positive");
            }
        }
        if self.targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("accuracy targets must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Metrics logged for an evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// Completed rounds, counting from 1.
    pub round: usize,
    pub sampled_clients: Vec<usize>,
    /// Global training loss of the new model, without weight decay.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub ema_accuracy: f64,
    /// Bytes sent to clients since the previous record.
    pub bytes_down: u64,
    /// Bytes received from clients since the previous record.
    pub bytes_up: u64,
    pub wall_ms: u64,
}

/// Runs a batch of independent client jobs, returning results in input order.
pub trait Executor {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }
}

/// Hooks into a running simulation.
pub trait RoundObserver {
    /// Milliseconds on some monotonic clock; used for [`RoundRecord::wall_ms`].
    fn elapsed_ms(&mut self) -> u64 {
        0
    }

    /// Called with each record as soon as it is complete.
    fn on_round(&mut self, _record: &RoundRecord) -> Result<()> {
        Ok(())
    }
}

impl RoundObserver for () {}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub final_state: ServerState,
    pub partition: Partition,
    /// Largest momentum-identity residual seen, relative to
    /// `1 + ||delta'||_inf` (FedAGM runs only).
    pub max_momentum_residual: Option<f64>,
}

fn sample_size(clients: usize, participation: f64) -> usize {
    (libm::round(participation * clients as f64) as usize).clamp(1, clients)
}

/// Uniform sample without replacement of `max(1, round(participation * N))`
/// client ids, sorted ascending.
pub fn sample_clients(clients: usize, participation: f64, round: usize, seed: u64) -> Vec<usize> {
    let amount = sample_size(clients, participation);
    let mut rng = stream(seed, Purpose::Sampling, round as u64, 0);
    let mut ids = rand::seq::index::sample(&mut rng, clients, amount).into_vec();
    ids.sort_unstable();
    ids
}

pub fn run(config: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    run_with(config, train, test, &Serial, &mut ())
}

pub fn run_with<E: Executor, O: RoundObserver + ?Sized>(
    config: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    executor: &E,
    observer: &mut O,
) -> Result<RunOutcome> {
    config.validate()?;
    check_data(config, train)?;
    check_data(config, test)?;
    let spec = &config.model;
    let partition = config.partition.apply(train, config.clients, config.seed)?;
    let shards = partition.assignments().iter().map(|s| train.subset(s)).collect::<Result<Vec<_>>>()?;
    let shard_batches = shards.iter().map(Dataset::to_batch).collect::<Result<Vec<Batch>>>()?;
    let test_batch = test.to_batch()?;

    let theta0 = spec.init_params(&mut stream(config.seed, Purpose::Init, 0, 0));
    let d = theta0.len();
    let mut state = ServerState::new(theta0, config.server.clone());
    let mut dyn_states: Vec<Option<ParamVector>> = vec![None; config.clients];
    let zeros = ParamVector::zeros(d);
    let mut ema = EmaSeries::default();
    let mut records = Vec::new();
    let mut max_residual: Option<f64> = None;
    let (mut bytes_down, mut bytes_up) = (0u64, 0u64);
    let mut started = observer.elapsed_ms();

    for t in 0..config.rounds {
        let in_round = |e: Error| match e {
            Error::Client { .. } => e,
            other => Error::Round { round: t + 1, source: Box::new(other) },
        };
        let sampled = sample_clients(config.clients, config.participation, t, config.seed);
        let sent = broadcast(&state, config.algorithm).map_err(in_round)?;
        let job = |&client: &usize| -> Result<ClientResult> {
            let aux = match config.algorithm {
                Algorithm::FedCm => LocalAux::Momentum(sent.momentum.as_ref().expect("fedcm sends momentum")),
                Algorithm::FedDyn => LocalAux::DynState(dyn_states[client].as_ref().unwrap_or(&zeros)),
                _ => LocalAux::None,
            };
            let mut rng = stream(config.seed, Purpose::Client, t as u64, client as u64);
            local_update(spec, &sent.model, &shards[client], &config.local, t, &mut rng, config.algorithm, aux)
                .map_err(|e| match e {
                    Error::Client { step, source, .. } => Error::Client { round: t + 1, client, step, source },
                    other => Error::Client { round: t + 1, client, step: 0, source: Box::new(other) },
                })
        };
        let results = executor.map(&sampled, job);

        let mut returns = Vec::with_capacity(sampled.len());
        for (&client, result) in sampled.iter().zip(results) {
            let result = result?;
            bytes_up += result.bytes_up;
            if let Some(h) = result.dyn_state {
                dyn_states[client] = Some(h);
            }
            returns.push(result.final_params);
        }
        bytes_down += sent.bytes_per_client() * sampled.len() as u64;

        let ctx = RoundContext {
            local_lr: config.local.lr_at(t),
            local_iterations: config.local.iterations,
            client_count: config.clients,
            dyn_alpha: config.local.dyn_alpha,
        };
        let next = aggregate(&state, &returns, config.algorithm, &ctx).map_err(in_round)?;
        if config.algorithm == Algorithm::FedAgm {
            let residual = check_momentum_identity(&state, &returns, &next).map_err(in_round)?;
            let bound = momentum_identity_bound(&next);
            if !(residual <= bound) {
                return Err(Error::MomentumIdentity { round: t + 1, residual, bound });
            }
            let relative = residual / (1.0 + next.delta.norm_inf());
            max_residual = Some(max_residual.map_or(relative, |m| m.max(relative)));
        }
        state = next;

        let completed = t + 1;
        if completed % config.eval_every == 0 || completed == config.rounds {
            let train_loss = global_loss_of_shards(spec, &state.theta, &shard_batches).map_err(in_round)?;
            let test_accuracy = spec.accuracy(&state.theta, &test_batch).map_err(in_round)?;
            let ema_accuracy = ema.push(test_accuracy);
            let now = observer.elapsed_ms();
            let record = RoundRecord {
                round: completed,
                sampled_clients: sampled,
                train_loss,
                test_accuracy,
                ema_accuracy,
                bytes_down,
                bytes_up,
                wall_ms: now.saturating_sub(started),
            };
            started = now;
            bytes_down = 0;
            bytes_up = 0;
            observer.on_round(&record)?;
            records.push(record);
        }
    }

    Ok(RunOutcome { records, final_state: state, partition, max_momentum_residual: max_residual })
}

fn check_data(config: &RunConfig, data: &Dataset) -> Result<()> {
    if data.input_dim() != config.model.input_dim {
        return Err(Error::DimensionMismatch { expected: config.model.input_dim, found: data.input_dim() });
    }
    match data.class_count() {
        Some(k) if k <= config.model.output_dim => Ok(()),
        Some(k) => Err(Error::DimensionMismatch { expected: config.model.output_dim, found: k }),
        None => Err(Error::Unsupported("federated runs need class labels")),
    }
}

/// Expected total downlink bytes for a run: `d * 8 * sum |S_t|`, doubled for FedCM.
pub fn expected_bytes_down(config: &RunConfig) -> u64 {
    let d = config.model.param_count() as u64;
    let per_round = config.sample_size() as u64;
    config.algorithm.downlink_vectors() * d * BYTES_PER_PARAM * per_round * config.rounds as u64
}
