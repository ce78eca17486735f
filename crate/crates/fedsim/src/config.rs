//! Experiment configuration files.
//!
//! A config is a TOML document. Every key has a default, so an empty file
//! describes a FedAGM run on the built-in synthetic task:
//!
//! ```toml
//! algorithm = "fedagm"
//! seed = 0
//! rounds = 100
//! clients = 100
//! participation = 0.05
//! targets = [0.8]
//!
//! [data]
//! source = "synthetic"
//! classes = 10
//! per_class = 500
//!
//! [partition]
//! kind = "dirichlet"
//! concentration = 0.3
//!
//! [local]
//! iterations = 50
//! lr = 0.1
//!
//! [server]
//! lambda = 0.85
//! ```

use std::path::{Path, PathBuf};

use fedsim_core::data::generate_synthetic;
use fedsim_core::{Algorithm, Dataset, LocalConfig, ModelKind, ModelSpec, PartitionSpec, RunConfig, ServerHyper};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csv_data::{read_table, to_dataset, LabelMap, Normalization};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(with = "algorithm_name")]
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub participation: f64,
    pub eval_every: usize,
    /// Accuracy thresholds for rounds-to-target.
    pub targets: Vec<f64>,
    /// Rounds at which smoothed accuracy is reported.
    pub checkpoints: Vec<usize>,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub local: LocalSection,
    pub server: ServerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::FedAgm,
            seed: 0,
            rounds: 100,
            clients: 100,
            participation: 0.05,
            eval_every: 1,
            targets: Vec::new(),
            checkpoints: Vec::new(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            model: ModelConfig::default(),
            local: LocalSection::default(),
            server: ServerSection::default(),
        }
    }
}

mod algorithm_name {
    use fedsim_core::Algorithm;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &Algorithm, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(a.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Algorithm, D::Error> {
        let name = String::deserialize(d)?;
        name.parse().map_err(|_| {
            let known: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            de::Error::custom(format!("unknown algorithm `{name}`, expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian mixture with one cluster per class.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        /// Training examples per class.
        #[serde(default = "default_per_class")]
        per_class: usize,
        /// Held-out examples per class.
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Relative paths resolve against the config file's directory.
    Csv {
        path: PathBuf,
        label_column: String,
        /// Separate test file; without one, `test_fraction` of the rows are
        /// held out.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_fraction: Option<f64>,
    },
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    50
}
fn default_input_dim() -> usize {
    20
}
fn default_spread() -> f64 {
    1.0
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            classes: default_classes(),
            per_class: default_per_class(),
            test_per_class: default_test_per_class(),
            input_dim: default_input_dim(),
            spread: default_spread(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    /// Dirichlet concentration; ignored for `iid`.
    pub concentration: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { kind: PartitionKind::Dirichlet, concentration: 0.3 }
    }
}

impl From<&PartitionConfig> for PartitionSpec {
    fn from(p: &PartitionConfig) -> Self {
        match p.kind {
            PartitionKind::Iid => PartitionSpec::Iid,
            PartitionKind::Dirichlet => PartitionSpec::Dirichlet { concentration: p.concentration },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindName {
    LinearRegression,
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindName,
    pub hidden_dims: Vec<usize>,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKindName::Softmax, hidden_dims: Vec::new(), weight_decay: 0.001 }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, outputs: usize) -> ModelSpec {
        let kind = match self.kind {
            ModelKindName::LinearRegression => ModelKind::LinearRegression,
            ModelKindName::Softmax => ModelKind::Softmax,
            ModelKindName::Mlp => ModelKind::Mlp,
        };
        ModelSpec { kind, input_dim, output_dim: outputs, hidden_dims: self.hidden_dims.clone(), weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub iterations: usize,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    pub prox_mu: f64,
    pub cm_alpha: f64,
    pub dyn_alpha: f64,
}

impl Default for LocalSection {
    fn default() -> Self {
        LocalSection::from(&LocalConfig::default())
    }
}

impl From<&LocalConfig> for LocalSection {
    fn from(c: &LocalConfig) -> Self {
        LocalSection {
            iterations: c.iterations,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            lr_decay: c.lr_decay,
            clip_norm: c.clip_norm,
            alpha: c.alpha,
            beta: c.beta,
            prox_mu: c.prox_mu,
            cm_alpha: c.cm_alpha,
            dyn_alpha: c.dyn_alpha,
        }
    }
}

impl From<&LocalSection> for LocalConfig {
    fn from(c: &LocalSection) -> Self {
        LocalConfig {
            iterations: c.iterations,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            lr_decay: c.lr_decay,
            clip_norm: c.clip_norm,
            alpha: c.alpha,
            beta: c.beta,
            prox_mu: c.prox_mu,
            cm_alpha: c.cm_alpha,
            dyn_alpha: c.dyn_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub tau: f64,
    pub lambda: f64,
    pub global_lr: f64,
    pub avgm_beta: f64,
    pub adam_lr: f64,
    pub adam_tau: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        let h = ServerHyper::default();
        ServerSection {
            tau: h.tau,
            lambda: h.lambda,
            global_lr: h.global_lr,
            avgm_beta: h.avgm_beta,
            adam_lr: h.adam_lr,
            adam_tau: h.adam_tau,
            adam_beta1: h.adam_beta1,
            adam_beta2: h.adam_beta2,
        }
    }
}

impl From<&ServerSection> for ServerHyper {
    fn from(s: &ServerSection) -> Self {
        ServerHyper {
            tau: s.tau,
            lambda: s.lambda,
            global_lr: s.global_lr,
            avgm_beta: s.avgm_beta,
            adam_lr: s.adam_lr,
            adam_tau: s.adam_tau,
            adam_beta1: s.adam_beta1,
            adam_beta2: s.adam_beta2,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides addressed by dotted paths, such as
    /// `local.lr=0.05` or `algorithm=fedavg`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(format!("cannot re-encode config: {e}")))?;
        for o in overrides {
            set_key(&mut doc, o.as_ref())?;
        }
        doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("invalid override: {}", e.message())))
    }

    /// Canonical JSON: every field present, keys sorted.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        serde_json::to_string(&value).expect("JSON value serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn run_config(&self, data: &LoadedData) -> RunConfig {
        let outputs = data.train.class_count().unwrap_or(1);
        RunConfig {
            algorithm: self.algorithm,
            model: self.model.spec(data.train.input_dim(), outputs),
            partition: PartitionSpec::from(&self.partition),
            clients: self.clients,
            participation: self.participation,
            rounds: self.rounds,
            local: LocalConfig::from(&self.local),
            server: ServerHyper::from(&self.server),
            seed: self.seed,
            eval_every: self.eval_every,
            targets: self.targets.clone(),
        }
    }

    /// Settings that must agree for two runs to be comparable.
    pub fn comparison_key(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "partition": self.partition,
            "clients": self.clients,
            "participation": self.participation,
            "rounds": self.rounds,
            "eval_every": self.eval_every,
            "model": self.model,
            "targets": self.targets,
            "checkpoints": self.checkpoints,
        })
    }
}

fn set_key(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let bad = |msg: String| Error::Config(format!("--set {assignment}: {msg}"));
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected KEY=VALUE".into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (leaf, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for (i, part) in parents.iter().enumerate() {
        table = match table.get_mut(*part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(bad(format!("unknown key `{}`", parts[..=i].join(".")))),
        };
    }
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v"));
    let value = match (table.get(*leaf), parsed) {
        (Some(toml::Value::Float(_)), Some(toml::Value::Integer(i))) => toml::Value::Float(i as f64),
        (Some(toml::Value::String(_)), Some(toml::Value::String(s))) => toml::Value::String(s),
        (Some(toml::Value::String(_)), _) | (_, None) => toml::Value::String(raw.to_string()),
        (_, Some(v)) => v,
    };
    table.insert((*leaf).to_string(), value);
    Ok(())
}

/// Train and test sets ready for a run, plus what was learned while loading.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub labels: Option<LabelMap>,
    pub normalization: Option<Normalization>,
}

/// Synthetic task with a class-balanced held-out set: each class draws
/// `per_class + test_per_class` examples and the last `test_per_class` of
/// them are held out.
pub fn synthetic_split(
    seed: u64,
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    input_dim: usize,
    spread: f64,
) -> Result<(Dataset, Dataset)> {
    if test_per_class == 0 {
        return Err(Error::Config("data.test_per_class must be positive".into()));
    }
    let all = generate_synthetic(seed, classes, per_class + test_per_class, input_dim, spread)?;
    let block = per_class + test_per_class;
    let (train, test): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % block < per_class);
    Ok((all.subset(&train)?, all.subset(&test)?))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads or generates the configured data. CSV paths are resolved against
/// `base_dir`.
pub fn load_data(cfg: &ExperimentConfig, base_dir: &Path) -> Result<LoadedData> {
    match &cfg.data {
        &DataConfig::Synthetic { classes, per_class, test_per_class, input_dim, spread } => {
            let (train, test) = synthetic_split(cfg.seed, classes, per_class, test_per_class, input_dim, spread)?;
            Ok(LoadedData { train, test, labels: None, normalization: None })
        }
        DataConfig::Csv { path, label_column, test_path, test_fraction } => {
            let path = resolve(base_dir, path);
            let table = read_table(&path, label_column)?;
            let labels = LabelMap::fit(&table.labels);
            let norm = Normalization::fit(&table);
            let full = to_dataset(&path, &table, &labels, &norm)?;
            let (train, test) = match (test_path, test_fraction) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config("data: set either test_path or test_fraction, not both".into()))
                }
                (Some(tp), None) => {
                    let tp = resolve(base_dir, tp);
                    let test_table = read_table(&tp, label_column)?;
                    if test_table.feature_names != table.feature_names {
                        return Err(Error::Data { path: tp, message: "columns differ from the training file".into() });
                    }
                    let test = to_dataset(&tp, &test_table, &labels, &norm)?;
                    (full, test)
                }
                (None, fraction) => {
                    let fraction = fraction.unwrap_or(0.1);
                    let count = (fraction * full.len() as f64).round() as usize;
                    if !(fraction > 0.0 && fraction < 1.0) || count == 0 || count >= full.len() {
                        return Err(Error::Config(format!(
                            "data.test_fraction {fraction} leaves no train or no test rows out of {}",
                            full.len()
                        )));
                    }
                    full.split(count, cfg.seed)?
                }
            };
            Ok(LoadedData { train, test, labels: Some(labels), normalization: Some(norm) })
        }
    }
}
