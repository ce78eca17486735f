//! Fast invariant checks run by `fedsim selftest`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::client::{local_gradient_fedagm, Algorithm, LocalConfig};
use crate::data::{generate_synthetic, partition_dirichlet, partition_iid, Dataset};
use crate::engine::{run, RoundRecord, RunConfig};
use crate::error::Result;
use crate::models::{fd_gradient, Batch, ModelKind, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{stream, Purpose};
use crate::server::{aggregate_fedagm, broadcast, check_momentum_identity, momentum_identity_bound, ServerHyper, ServerState};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Check {
        Check { name: name.into(), passed, detail }
    }

    fn from_result(name: impl Into<String>, r: Result<(bool, String)>) -> Check {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

pub fn run_all() -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(momentum_identity_check(false));
    checks.extend(gradient_checks());
    checks.push(decomposition_check());
    checks.extend(degeneration_checks());
    checks.push(partition_check());
    checks
}

fn random_vector<R: Rng>(rng: &mut R, d: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| rng.random_range(-scale..scale)).collect()).expect("finite draws")
}

/// Momentum identity over 200 random FedAGM rounds. With `flip_lambda`, the
/// server aggregates with the sign of lambda reversed, which the check must
/// catch.
pub fn momentum_identity_check(flip_lambda: bool) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut rng = stream(0, Purpose::Check, 100, 0);
        let mut worst_ratio: f64 = 0.0;
        for _ in 0..20 {
            let d = rng.random_range(1..50);
            let hyper = ServerHyper {
                tau: rng.random_range(0.1..=1.0),
                lambda: rng.random_range(0.05..0.95),
                ..ServerHyper::default()
            };
            let mut state = ServerState::new(random_vector(&mut rng, d, 2.0), hyper);
            for _ in 0..10 {
                let sent = broadcast(&state, Algorithm::FedAgm)?.model;
                let k = rng.random_range(1..10);
                let returns: Vec<ParamVector> =
                    (0..k).map(|_| ParamVector::axpy(1.0, &random_vector(&mut rng, d, 0.3), &sent)).collect::<Result<_>>()?;
                let mut aggregator = state.clone();
                if flip_lambda {
                    aggregator.hyper.lambda = -aggregator.hyper.lambda;
                }
                let next = aggregate_fedagm(&aggregator, &returns)?;
                let residual = check_momentum_identity(&state, &returns, &next)?;
                worst_ratio = worst_ratio.max(residual / momentum_identity_bound(&next));
                state = ServerState { hyper: state.hyper.clone(), ..next };
            }
        }
        Ok((worst_ratio <= 1.0, format!("max residual / bound = {worst_ratio:.3e}")))
    };
    Check::from_result("momentum-identity", run())
}

fn random_case(kind: ModelKind, seed: u64) -> (ModelSpec, ParamVector, Batch) {
    let mut rng = stream(seed, Purpose::Check, 200, kind as u64);
    let spec = match kind {
        ModelKind::LinearRegression => ModelSpec::linear_regression(3, 2),
        ModelKind::Softmax => ModelSpec::softmax(4, 3),
        ModelKind::Mlp => ModelSpec::mlp(3, alloc::vec![4], 3),
    }
    .with_weight_decay(0.001);
    let n = rng.random_range(1..6);
    let features: Vec<f64> = (0..n * spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let params = random_vector(&mut rng, spec.param_count(), 1.0);
    let batch = if spec.is_classifier() {
        let labels = (0..n).map(|_| rng.random_range(0..spec.output_dim)).collect();
        Batch::classification(features, spec.input_dim, labels)
    } else {
        let values = (0..n * spec.output_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        Batch::regression(features, spec.input_dim, values, spec.output_dim)
    }
    .expect("well-formed batch");
    (spec, params, batch)
}

fn gradient_checks() -> Vec<Check> {
    [ModelKind::LinearRegression, ModelKind::Softmax, ModelKind::Mlp]
        .into_iter()
        .map(|kind| {
            let r = (|| -> Result<(bool, String)> {
                let mut worst: f64 = 0.0;
                for seed in 0..5 {
                    let (spec, params, batch) = random_case(kind, seed);
                    let g = spec.gradient(&params, &batch)?;
                    let fd = fd_gradient(&spec, &params, &batch, 1e-6)?;
                    worst = worst.max(g.sub(&fd)?.l2_norm() / fd.l2_norm().max(1e-12));
                }
                Ok((worst <= 1e-5, format!("max relative error = {worst:.3e}")))
            })();
            Check::from_result(format!("gradient-vs-fd/{kind:?}"), r)
        })
        .collect()
}

fn decomposition_check() -> Check {
    let r = (|| -> Result<(bool, String)> {
        let mut rng = stream(0, Purpose::Check, 300, 0);
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let (spec, params, batch) = random_case(ModelKind::Softmax, 100 + seed);
            let d = params.len();
            let (theta, delta) = (random_vector(&mut rng, d, 1.0), random_vector(&mut rng, d, 0.2));
            let (lambda, alpha, beta) =
                (rng.random_range(0.0..0.95), rng.random_range(0.5..1.5), rng.random_range(0.0..0.5));
            let cfg = LocalConfig { alpha, beta, ..LocalConfig::default() };
            let sent = ParamVector::axpy(-lambda, &delta, &theta)?;
            let lhs = local_gradient_fedagm(&spec, &params, &batch, &sent, &cfg)?;
            let grad = spec.gradient(&params, &batch)?;
            for j in 0..d {
                let rhs = alpha * grad[j] + beta * lambda * delta[j] + beta * (params[j] - theta[j]);
                worst = worst.max((lhs[j] - rhs).abs());
            }
        }
        Ok((worst <= 1e-12, format!("max absolute deviation = {worst:.3e}")))
    })();
    Check::from_result("gradient-decomposition", r)
}

fn degeneration_data() -> Result<(Dataset, Dataset)> {
    generate_synthetic(11, 3, 40, 4, 1.5)?.split(30, 11)
}

/// Small run configuration shared by the degeneration checks.
pub fn degeneration_base(algorithm: Algorithm, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::new(algorithm, ModelSpec::softmax(4, 3).with_weight_decay(0.001));
    cfg.clients = 10;
    cfg.participation = 0.3;
    cfg.rounds = rounds;
    cfg.local.iterations = 5;
    cfg.local.lr_decay = 0.998;
    cfg
}

/// Configurations that must reproduce FedAvg exactly.
pub fn degenerate_variants(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::new();
    let mut agm = base.clone();
    agm.algorithm = Algorithm::FedAgm;
    (agm.server.lambda, agm.server.tau, agm.local.alpha, agm.local.beta) = (0.0, 1.0, 1.0, 0.0);
    out.push(agm);
    let mut prox = base.clone();
    prox.algorithm = Algorithm::FedProx;
    prox.local.prox_mu = 0.0;
    out.push(prox);
    let mut dynamic = base.clone();
    dynamic.algorithm = Algorithm::FedDyn;
    dynamic.local.dyn_alpha = 0.0;
    out.push(dynamic);
    let mut cm = base.clone();
    cm.algorithm = Algorithm::FedCm;
    cm.local.cm_alpha = 1.0;
    out.push(cm);
    let mut avgm = base.clone();
    avgm.algorithm = Algorithm::FedAvgM;
    (avgm.server.avgm_beta, avgm.server.global_lr) = (0.0, 1.0);
    out.push(avgm);
    out
}

fn degeneration_checks() -> Vec<Check> {
    let base = degeneration_base(Algorithm::FedAvg, 10);
    let data = degeneration_data();
    let reference = data.as_ref().map_err(Clone::clone).and_then(|(train, test)| run(&base, train, test));
    degenerate_variants(&base)
        .into_iter()
        .map(|variant| {
            let name = format!("degeneration/{}", variant.algorithm);
            let r = (|| -> Result<(bool, String)> {
                let (train, test) = data.as_ref().map_err(Clone::clone)?;
                let expected = reference.as_ref().map_err(Clone::clone)?;
                let got = run(&variant, train, test)?;
                let same = records_match(variant.algorithm, &got.records, &expected.records)
                    && got.final_state.theta == expected.final_state.theta;
                Ok((same, format!("{} rounds compared bitwise", got.records.len())))
            })();
            Check::from_result(name, r)
        })
        .collect()
}

/// Bitwise record comparison against FedAvg. FedCM ships its momentum next to
/// the model, so its downlink column must be exactly twice FedAvg's instead.
pub fn records_match(algorithm: Algorithm, got: &[RoundRecord], fedavg: &[RoundRecord]) -> bool {
    let factor = algorithm.downlink_vectors();
    got.len() == fedavg.len()
        && got.iter().zip(fedavg).all(|(g, f)| {
            RoundRecord { bytes_down: f.bytes_down * factor, ..f.clone() } == *g
        })
}

fn partition_check() -> Check {
    let r = (|| -> Result<(bool, String)> {
        let mut rng = stream(0, Purpose::Check, 400, 0);
        let trials = 40;
        for trial in 0..trials {
            let classes = rng.random_range(1..8);
            let data = generate_synthetic(trial, classes, rng.random_range(1..30), 2, 1.0)?;
            let clients = rng.random_range(1..=data.len().min(40));
            let concentration = libm::exp(rng.random_range(-5.0..5.0));
            let n = data.len();
            for p in [partition_iid(&data, clients, trial)?, partition_dirichlet(&data, clients, concentration, trial)?] {
                if let Err(e) = p.validate(n) {
                    return Ok((false, format!("trial {trial}: {e}")));
                }
            }
        }
        Ok((true, format!("{trials} random configurations")))
    })();
    Check::from_result("partition-invariants", r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let checks = run_all();
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert_eq!(checks, run_all());
    }

    #[test]
    fn flipped_lambda_fails_momentum_identity() {
        assert!(!momentum_identity_check(true).passed);
    }
}
