use std::path::PathBuf;

use fedsim::config::ExperimentConfig;

fn configs() -> Vec<(String, ExperimentConfig)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), ExperimentConfig::load(&p).unwrap()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn one_config_per_algorithm_named_after_it() {
    let all = configs();
    let names: Vec<&str> = all.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["fedadam", "fedagm", "fedavg", "fedavgm", "fedcm", "feddyn", "fedprox"]);
    for (name, cfg) in &all {
        assert_eq!(cfg.algorithm.name(), name);
    }
}

#[test]
fn shipped_configs_are_comparable() {
    let all = configs();
    let key = all[0].1.comparison_key();
    for (name, cfg) in &all {
        assert_eq!(cfg.comparison_key(), key, "{name}");
    }
}
