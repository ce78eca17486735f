//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedsim::commands::{run_experiment, ConfigSource};
use fedsim::config::{synthetic_split, ExperimentConfig};
use fedsim::exec::ThreadPool;
use fedsim::output::{self, RoundRow, Summary};
use fedsim_core::client::local_gradient_fedagm;
use fedsim_core::data::{generate_synthetic, label_entropy, partition_dirichlet, partition_iid};
use fedsim_core::engine::{run, run_with};
use fedsim_core::metrics::{rounds_to_loss_target, rounds_to_target, EmaSeries, RoundsToTarget};
use fedsim_core::models::fd_gradient;
use fedsim_core::rng::{stream, Purpose};
use fedsim_core::{
    Algorithm, Batch, Dataset, LocalConfig, ModelKind, ModelSpec, ParamVector, PartitionSpec, RunConfig, Serial,
    ServerHyper, BYTES_PER_PARAM,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Verdict = Result<(bool, String), String>;

fn rng(tag: u64) -> ChaCha8Rng {
    stream(2024, Purpose::Check, tag, 0)
}

fn vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Randomized FedAGM runs: at least 1000 rounds in total, d <= 200,
/// N <= 100, with the engine checking the identity after every round.
fn momentum_identity() -> Verdict {
    let mut rng = rng(1);
    let (mut rounds, mut worst, mut max_d) = (0usize, 0.0f64, 0usize);
    let mut trial = 0u64;
    while rounds < 1000 {
        let classes: usize = rng.random_range(2..=6);
        let input_dim = rng.random_range(1..=(200 / classes - 1).min(25));
        let spec = if rng.random_bool(0.3) {
            ModelSpec::mlp(input_dim, vec![rng.random_range(2..6)], classes)
        } else {
            ModelSpec::softmax(input_dim, classes)
        };
        if spec.param_count() > 200 {
            continue;
        }
        max_d = max_d.max(spec.param_count());
        let clients: usize = rng.random_range(1..=100);
        let per_class = clients.div_ceil(classes) + rng.random_range(0..10);
        let data = generate_synthetic(trial, classes, per_class + 5, input_dim, rng.random_range(0.3..2.0)).map_err(fail)?;
        let (train, test) = data.split(classes * 5, trial).map_err(fail)?;
        let mut cfg = RunConfig::new(Algorithm::FedAgm, spec.with_weight_decay(rng.random_range(0.0..0.01)));
        cfg.clients = clients;
        cfg.participation = rng.random_range(0.01..=1.0);
        cfg.partition = if rng.random_bool(0.5) {
            PartitionSpec::Iid
        } else {
            PartitionSpec::Dirichlet { concentration: rng.random_range(0.05..2.0) }
        };
        cfg.rounds = 50;
        cfg.seed = trial;
        cfg.local.iterations = rng.random_range(1..=10);
        cfg.local.lr = rng.random_range(0.01..0.3);
        cfg.local.alpha = rng.random_range(0.5..1.5);
        cfg.local.beta = rng.random_range(0.0..0.1);
        cfg.server = ServerHyper {
            tau: rng.random_range(0.1..=1.0),
            lambda: rng.random_range(0.0..0.95),
            ..ServerHyper::default()
        };
        let out = run(&cfg, &train, &test).map_err(|e| format!("trial {trial}: {e}"))?;
        worst = worst.max(out.max_momentum_residual.unwrap_or(f64::INFINITY));
        rounds += cfg.rounds;
        trial += 1;
    }
    Ok((worst <= 1e-12, format!("{rounds} rounds over {trial} configs (d <= {max_d}), max relative residual {worst:.2e}")))
}

fn degeneration_base() -> ExperimentConfig {
    let text = r#"
        algorithm = "fedavg"
        rounds = 200
        clients = 10
        participation = 0.3
        targets = [0.6]

        [data]
        source = "synthetic"
        classes = 3
        per_class = 40
        test_per_class = 10
        input_dim = 4
        spread = 1.5

        [local]
        iterations = 5
        lr_decay = 0.998
    "#;
    ExperimentConfig::parse(text, "degeneration base").unwrap()
}

fn csv_columns(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

/// Degenerate settings against FedAvg, compared through `rounds.csv`. FedCM
/// must also ship its momentum, so its `bytes_down` column is compared as
/// exactly twice FedAvg's and every other column byte for byte.
fn degeneration_equivalence() -> Verdict {
    let dir = TempDir::new().map_err(fail)?;
    let pool = ThreadPool::new(Some(2)).map_err(fail)?;
    let base = degeneration_base();
    let produce = |name: &str, cfg: ExperimentConfig| -> Result<String, String> {
        let out = dir.path().join(name);
        let source = ConfigSource { path: dir.path().join(format!("{name}.toml")), config: cfg };
        run_experiment(&source, &out, &pool).map_err(|e| format!("{name}: {e}"))?;
        fs::read_to_string(out.join(output::ROUNDS_FILE)).map_err(fail)
    };
    let reference = produce("fedavg", base.clone())?;
    let variants: [(&str, &[&str]); 5] = [
        ("fedagm", &["algorithm=fedagm", "server.lambda=0", "server.tau=1", "local.alpha=1", "local.beta=0"]),
        ("fedprox", &["algorithm=fedprox", "local.prox_mu=0"]),
        ("feddyn", &["algorithm=feddyn", "local.dyn_alpha=0"]),
        ("fedcm", &["algorithm=fedcm", "local.cm_alpha=1"]),
        ("fedavgm", &["algorithm=fedavgm", "server.avgm_beta=0", "server.global_lr=1"]),
    ];
    let mut mismatched = Vec::new();
    for (name, sets) in variants {
        let got = produce(name, base.with_overrides(sets).map_err(fail)?)?;
        let same = if name == "fedcm" {
            let (g, r) = (csv_columns(&got), csv_columns(&reference));
            g.len() == r.len()
                && g.iter().zip(&r).enumerate().all(|(i, (gl, rl))| {
                    gl.len() == rl.len()
                        && gl.iter().zip(rl).enumerate().all(|(j, (gc, rc))| {
                            if i > 0 && j == 4 {
                                gc.parse::<u64>().ok() == rc.parse::<u64>().ok().map(|b| 2 * b)
                            } else {
                                gc == rc
                            }
                        })
                })
        } else {
            got == reference
        };
        if !same {
            mismatched.push(name);
        }
    }
    let rows = reference.lines().count() - 1;
    if mismatched.is_empty() {
        Ok((true, format!("5 variants x {rows} rounds identical to fedavg (fedcm downlink exactly 2x)")))
    } else {
        Ok((false, format!("differs from fedavg: {}", mismatched.join(", "))))
    }
}

fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Batch {
    let n = rng.random_range(1..8);
    let features: Vec<f64> = (0..n * spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    if spec.is_classifier() {
        let labels = (0..n).map(|_| rng.random_range(0..spec.output_dim)).collect();
        Batch::classification(features, spec.input_dim, labels).unwrap()
    } else {
        let values = (0..n * spec.output_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        Batch::regression(features, spec.input_dim, values, spec.output_dim).unwrap()
    }
}

fn random_spec(rng: &mut ChaCha8Rng, kind: ModelKind) -> ModelSpec {
    let (input, output) = (rng.random_range(1..6), rng.random_range(2..5));
    let spec = match kind {
        ModelKind::LinearRegression => ModelSpec::linear_regression(input, output),
        ModelKind::Softmax => ModelSpec::softmax(input, output),
        ModelKind::Mlp => {
            let hidden = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..6)).collect();
            ModelSpec::mlp(input, hidden, output)
        }
    };
    spec.with_weight_decay(rng.random_range(0.0..0.01))
}

const KINDS: [ModelKind; 3] = [ModelKind::LinearRegression, ModelKind::Softmax, ModelKind::Mlp];

fn gradient_correctness() -> Verdict {
    let mut rng = rng(3);
    let mut worst = [0.0f64; 3];
    for (k, kind) in KINDS.into_iter().enumerate() {
        for _ in 0..20 {
            let spec = random_spec(&mut rng, kind);
            let params = vector(&mut rng, spec.param_count(), 1.0);
            let batch = random_batch(&mut rng, &spec);
            let g = spec.gradient(&params, &batch).map_err(fail)?;
            let fd = fd_gradient(&spec, &params, &batch, 1e-5).map_err(fail)?;
            let err = g.sub(&fd).map_err(fail)?.l2_norm() / fd.l2_norm().max(1e-12);
            worst[k] = worst[k].max(err);
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Ok((
        max <= 1e-5,
        format!("20 cases per kind; max relative L2 error linear {:.1e}, softmax {:.1e}, mlp {:.1e}", worst[0], worst[1], worst[2]),
    ))
}

fn gradient_decomposition() -> Verdict {
    let mut rng = rng(4);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let spec = random_spec(&mut rng, KINDS[draw % 3]);
        let d = spec.param_count();
        let params = vector(&mut rng, d, 1.0);
        let batch = random_batch(&mut rng, &spec);
        let (theta, delta) = (vector(&mut rng, d, 1.0), vector(&mut rng, d, 0.3));
        let lambda = rng.random_range(0.0..0.95);
        let cfg = LocalConfig { alpha: rng.random_range(0.5..1.5), beta: rng.random_range(0.0..0.5), ..LocalConfig::default() };
        let sent = ParamVector::axpy(-lambda, &delta, &theta).map_err(fail)?;
        let lhs = local_gradient_fedagm(&spec, &params, &batch, &sent, &cfg).map_err(fail)?;
        let grad = spec.gradient(&params, &batch).map_err(fail)?;
        for j in 0..d {
            let rhs = cfg.alpha * grad[j] + cfg.beta * lambda * delta[j] + cfg.beta * (params[j] - theta[j]);
            worst = worst.max((lhs[j] - rhs).abs());
        }
    }
    Ok((worst <= 1e-12, format!("100 draws, max absolute deviation {worst:.2e}")))
}

fn mean_client_entropy(data: &Dataset, partition: &fedsim_core::Partition) -> f64 {
    let hists = partition.label_histograms(data).expect("classification data");
    hists.iter().map(|h| label_entropy(h)).sum::<f64>() / hists.len() as f64
}

fn partition_invariants() -> Verdict {
    let mut rng = rng(5);
    for trial in 0..200u64 {
        let classes = rng.random_range(1..=10);
        let data = generate_synthetic(trial, classes, rng.random_range(1..60), 2, 1.0).map_err(fail)?;
        let clients = rng.random_range(1..=data.len().min(100));
        let concentration = 10f64.powf(rng.random_range(-3.0..4.0));
        let seed = rng.random::<u64>();
        for p in [
            partition_dirichlet(&data, clients, concentration, seed).map_err(fail)?,
            partition_iid(&data, clients, seed).map_err(fail)?,
        ] {
            if let Err(e) = p.validate(data.len()) {
                return Ok((false, format!("N={clients}, c={concentration:.3e}, seed={seed}: {e}")));
            }
        }
    }
    let (mut h03, mut h06, mut hiid) = (0.0, 0.0, 0.0);
    for seed in 0..10u64 {
        let data = generate_synthetic(seed, 10, 100, 2, 1.0).map_err(fail)?;
        h03 += mean_client_entropy(&data, &partition_dirichlet(&data, 50, 0.3, seed).map_err(fail)?) / 10.0;
        h06 += mean_client_entropy(&data, &partition_dirichlet(&data, 50, 0.6, seed).map_err(fail)?) / 10.0;
        hiid += mean_client_entropy(&data, &partition_iid(&data, 50, seed).map_err(fail)?) / 10.0;
    }
    Ok((
        h03 <= h06 && h06 <= hiid,
        format!("200 triples valid; mean label entropy Dir(0.3) {h03:.3} <= Dir(0.6) {h06:.3} <= iid {hiid:.3}"),
    ))
}

fn communication_accounting() -> Verdict {
    let (train, test) = synthetic_split(6, 4, 30, 5, 6, 1.0).map_err(fail)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for alg in Algorithm::ALL {
        let mut cfg = RunConfig::new(alg, ModelSpec::mlp(6, vec![5], 4));
        (cfg.clients, cfg.participation, cfg.rounds) = (20, 0.15, 25);
        cfg.local.iterations = 3;
        let out = run_with(&cfg, &train, &test, &Serial, &mut ()).map_err(fail)?;
        let d = cfg.model.param_count() as u64;
        let dispatched: u64 = out.records.iter().map(|r| r.sampled_clients.len() as u64).sum();
        let down: u64 = out.records.iter().map(|r| r.bytes_down).sum();
        let up: u64 = out.records.iter().map(|r| r.bytes_up).sum();
        let factor = if alg == Algorithm::FedCm { 2 } else { 1 };
        let expected = d * BYTES_PER_PARAM * dispatched;
        ok &= down == factor * expected && up == expected;
        lines.push(format!("{alg} {}x", down as f64 / expected as f64));
    }
    Ok((ok, format!("downlink / (d*8*sum|S_t|): {}", lines.join(", "))))
}

fn ema_direct(values: &[f64], decay: f64, t: usize) -> f64 {
    let mut s = decay.powi(t as i32) * values[0];
    for (i, v) in values.iter().enumerate().take(t + 1).skip(1) {
        s += (1.0 - decay) * decay.powi((t - i) as i32) * v;
    }
    s
}

fn metric_oracles() -> Verdict {
    let mut rng = rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut ema = EmaSeries::default();
        values.iter().for_each(|&v| {
            ema.push(v);
        });
        for (t, s) in ema.smoothed().iter().enumerate() {
            worst = worst.max((s - ema_direct(&values, 0.9, t)).abs());
        }
    }
    let mut scans = 0;
    for _ in 0..500 {
        let n = rng.random_range(0..80);
        let series: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (target, limit) = (rng.random_range(0.01..0.99), rng.random_range(1..100));
        let mut brute = RoundsToTarget::Saturated(limit);
        for (i, &v) in series.iter().enumerate().take(limit) {
            if v >= target {
                brute = RoundsToTarget::Reached(i + 1);
                break;
            }
        }
        let rows: Vec<RoundRow> = series
            .iter()
            .enumerate()
            .map(|(i, &e)| RoundRow { round: i + 1, train_loss: 0.0, test_accuracy: e, ema_accuracy: e, bytes_down: 0, bytes_up: 0 })
            .collect();
        if rounds_to_target(&series, target, limit) != brute || output::rounds_to_target(&rows, target, limit) != brute {
            return Ok((false, format!("rounds_to_target disagrees with a scan for target {target}, limit {limit}")));
        }
        scans += 1;
    }
    let flat = vec![0.5; 1000];
    let rows: Vec<RoundRow> = flat
        .iter()
        .enumerate()
        .map(|(i, &e)| RoundRow { round: i + 1, train_loss: 1.0, test_accuracy: e, ema_accuracy: e, bytes_down: 0, bytes_up: 0 })
        .collect();
    let rendered = rounds_to_target(&flat, 0.84, 1000).to_string();
    let summary = Summary::new("fedavg", 1000, &rows, &[0.84], &[], None);
    let saturation = rendered == "1000+" && summary.rounds_to_target[0].display == "1000+";
    Ok((
        worst <= 1e-12 && saturation,
        format!("EMA max deviation {worst:.2e} over 100 series; {scans} brute-force scans agree; saturation renders {rendered:?}"),
    ))
}

const BENCH_LOSS_TARGET: f64 = 0.5;
const BENCH_ROUNDS: usize = 100;

fn bench_config(algorithm: Algorithm, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(algorithm, ModelSpec::softmax(20, 10).with_weight_decay(0.001));
    cfg.partition = PartitionSpec::Dirichlet { concentration: 0.3 };
    (cfg.clients, cfg.participation, cfg.rounds, cfg.seed) = (100, 0.05, BENCH_ROUNDS, seed);
    (cfg.local.iterations, cfg.local.lr, cfg.local.alpha, cfg.local.beta) = (50, 0.1, 1.0, 0.01);
    (cfg.server.lambda, cfg.server.tau) = (0.85, 1.0);
    cfg
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Rounds until the global training loss first drops to the target on the
/// 10-class, 20-dimensional synthetic task with 5000 training examples.
fn directional_convergence() -> Verdict {
    let pool = ThreadPool::new(None).map_err(fail)?;
    let (mut avg, mut agm) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let (train, test) = synthetic_split(seed, 10, 500, 50, 20, 1.0).map_err(fail)?;
        assert_eq!(train.len(), 5000);
        for (alg, sink) in [(Algorithm::FedAvg, &mut avg), (Algorithm::FedAgm, &mut agm)] {
            let out = run_with(&bench_config(alg, seed), &train, &test, &pool, &mut ()).map_err(fail)?;
            let losses: Vec<f64> = out.records.iter().map(|r| r.train_loss).collect();
            sink.push(rounds_to_loss_target(&losses, BENCH_LOSS_TARGET, BENCH_ROUNDS).rounds_or_limit());
        }
    }
    let (m_avg, m_agm) = (median(avg.clone()), median(agm.clone()));
    let reduction = 1.0 - m_agm as f64 / m_avg as f64;
    Ok((
        reduction >= 0.10,
        format!(
            "rounds to loss {BENCH_LOSS_TARGET}: fedavg {avg:?} (median {m_avg}), fedagm {agm:?} (median {m_agm}); {:.0}% fewer",
            100.0 * reduction
        ),
    ))
}

fn without_timestamps(path: &Path) -> Result<serde_json::Value, String> {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).map_err(fail)?).map_err(fail)?;
    let obj = v.as_object_mut().ok_or("manifest is not an object")?;
    obj.remove("started_at");
    obj.remove("finished_at");
    Ok(v)
}

fn determinism() -> Verdict {
    let dir = TempDir::new().map_err(fail)?;
    let configs = [
        ("agm", "algorithm = \"fedagm\"\nrounds = 30\n[local]\niterations = 20\n"),
        (
            "dyn",
            "algorithm = \"feddyn\"\nrounds = 25\nclients = 40\nparticipation = 0.25\n[partition]\nkind = \"iid\"\n[model]\nkind = \"mlp\"\nhidden_dims = [8]\n",
        ),
        ("cm", "algorithm = \"fedcm\"\nrounds = 40\nseed = 3\neval_every = 3\ntargets = [0.7]\n[partition]\nconcentration = 0.1\n"),
    ];
    for (name, text) in configs {
        let cfg = dir.path().join(format!("{name}.toml"));
        fs::write(&cfg, text).map_err(fail)?;
        for threads in ["1", "8"] {
            let out = dir.path().join(format!("{name}-{threads}"));
            let o = Command::new(env!("CARGO_BIN_EXE_fedsim"))
                .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", threads])
                .output()
                .map_err(fail)?;
            if !o.status.success() {
                return Err(format!("{name} with {threads} threads: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
        let (a, b) = (dir.path().join(format!("{name}-1")), dir.path().join(format!("{name}-8")));
        for f in [output::ROUNDS_FILE, output::SUMMARY_FILE] {
            if fs::read(a.join(f)).map_err(fail)? != fs::read(b.join(f)).map_err(fail)? {
                return Ok((false, format!("{name}: {f} differs between 1 and 8 threads")));
            }
        }
        if without_timestamps(&a.join(output::MANIFEST_FILE))? != without_timestamps(&b.join(output::MANIFEST_FILE))? {
            return Ok((false, format!("{name}: manifest differs beyond timestamps")));
        }
    }
    Ok((true, "3 configs: rounds.csv and summary.json byte-identical, manifest equal apart from timestamps".into()))
}

type Criterion = (&'static str, fn() -> Verdict, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 momentum identity", momentum_identity, Duration::from_secs(30)),
        ("2 degeneration equivalence", degeneration_equivalence, Duration::from_secs(60)),
        ("3 gradient correctness", gradient_correctness, Duration::from_secs(10)),
        ("4 gradient decomposition", gradient_decomposition, Duration::MAX),
        ("5 partition invariants", partition_invariants, Duration::MAX),
        ("6 communication accounting", communication_accounting, Duration::MAX),
        ("7 metric oracles", metric_oracles, Duration::MAX),
        ("8 directional convergence", directional_convergence, Duration::from_secs(300)),
        ("9 determinism", determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let (passed, detail) = match verdict {
            Ok((_, detail)) if elapsed > budget => (false, format!("{detail}; over time budget {budget:?}")),
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!("{} {name}: {detail} [{:.2}s]", if passed { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
