//! End-to-end runs: collect, fit, train in the surrogate, evaluate in the
//! real environment, report.
//!
//! Every stage reads and writes plain files, so the `pipeline` command and
//! the individual stage commands produce the same artifacts. Stage seeds are
//! the global seed plus a fixed per-stage offset.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::{self, CollectConfig, CollectError, Dataset};
use crate::envs::{Benchmark, EnvError, RealEnv};
use crate::features::LibrarySpec;
use crate::io::{self, IoError};
use crate::metrics::{self, InteractionLedger, MetricsError};
use crate::rl::{self, CemConfig, Policy, PolicyEval, RlError, StateGrid};
use crate::sindy::{self, GridSearchSpec, SindyError, SindyModel};
use crate::surrogate::SurrogateEnv;

pub const CONFIG_VERSION: u32 = 1;

pub const COLLECT_SEED_OFFSET: u64 = 1;
pub const FIT_SEED_OFFSET: u64 = 2;
pub const TRAIN_SEED_OFFSET: u64 = 3;
pub const EVAL_SEED_OFFSET: u64 = 4;
pub const BASELINE_SEED_OFFSET: u64 = 5;

pub const DATASET_FILE: &str = "dataset.csv";
pub const MODEL_FILE: &str = "model.json";
pub const EQUATIONS_FILE: &str = "equations.txt";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const POLICY_FILE: &str = "policy.json";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const BASELINE_POLICY_FILE: &str = "baseline_policy.json";
pub const BASELINE_CURVE_FILE: &str = "baseline_curve.csv";
pub const BASELINE_SUMMARY_FILE: &str = "baseline_summary.json";
pub const EVAL_REPORT_CSV: &str = "eval_report.csv";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const POLICY_EVAL_FILE: &str = "policy_eval.json";
pub const BASELINE_EVAL_FILE: &str = "baseline_eval.json";
pub const ACTION_MAP_FILE: &str = "action_map.csv";
pub const BASELINE_ACTION_MAP_FILE: &str = "baseline_action_map.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const COMPARE_CSV: &str = "compare_report.csv";
pub const COMPARE_JSON: &str = "compare_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Sindy(#[from] SindyError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Coarse error classes, one exit code each on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    MissingInput,
    Schema,
    Version,
    Dimension,
    Data,
    Other,
}

impl StageError {
    pub fn class(&self) -> ErrorClass {
        fn io_class(e: &IoError) -> ErrorClass {
            match e {
                IoError::Missing(_) => ErrorClass::MissingInput,
                IoError::Schema { .. } | IoError::Truncated { .. } => ErrorClass::Schema,
                IoError::Version { .. } => ErrorClass::Version,
                IoError::Io { .. } => ErrorClass::Other,
            }
        }
        fn sindy_class(e: &SindyError) -> ErrorClass {
            match e {
                SindyError::Io(e) => io_class(e),
                SindyError::Dimension(_) => ErrorClass::Dimension,
                SindyError::TooFewTransitions { .. } | SindyError::AllDegenerate | SindyError::NonFinite { .. } => {
                    ErrorClass::Data
                }
                SindyError::InvalidGrid(_) | SindyError::Feature(_) | SindyError::Stlsq(_) => ErrorClass::Config,
            }
        }
        match self {
            StageError::Config(_) => ErrorClass::Config,
            StageError::Io(e) => io_class(e),
            StageError::Collect(CollectError::InvalidConfig(_)) => ErrorClass::Config,
            StageError::Collect(_) => ErrorClass::Data,
            StageError::Sindy(e) => sindy_class(e),
            StageError::Rl(RlError::Io(e)) => io_class(e),
            StageError::Rl(RlError::Dimension { .. }) => ErrorClass::Dimension,
            StageError::Rl(RlError::InvalidConfig(_)) => ErrorClass::Config,
            StageError::Rl(RlError::Env(_)) => ErrorClass::Other,
            StageError::Metrics(MetricsError::Sindy(e)) => sindy_class(e),
            StageError::Metrics(MetricsError::EnvMismatch { .. } | MetricsError::Shape(..)) => ErrorClass::Dimension,
            StageError::Metrics(_) => ErrorClass::Data,
            StageError::Env(EnvError::StateDimension { .. }) => ErrorClass::Dimension,
            StageError::Env(_) => ErrorClass::Other,
        }
    }
}

#[derive(Debug, Error)]
#[error("stage '{stage}' failed: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: StageError,
}

fn at<E: Into<StageError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectSettings {
    pub expert: String,
    pub epsilon: f64,
    /// `None` uses the environment default.
    pub n_transitions: Option<usize>,
    pub max_episodes: usize,
    pub max_timesteps: Option<usize>,
}

impl Default for CollectSettings {
    fn default() -> Self {
        Self {
            expert: "scripted".into(),
            epsilon: 0.2,
            n_transitions: None,
            max_episodes: 50,
            max_timesteps: None,
        }
    }
}

impl CollectSettings {
    pub fn resolve(&self, env: Benchmark, seed: u64) -> CollectConfig {
        let defaults = CollectConfig::defaults_for(env);
        CollectConfig {
            env,
            expert: self.expert.clone(),
            epsilon: self.epsilon,
            n_transitions: self.n_transitions.unwrap_or(defaults.n_transitions),
            max_episodes: self.max_episodes,
            max_timesteps: self.max_timesteps.unwrap_or(defaults.max_timesteps),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub episodes: usize,
    pub horizons: Vec<usize>,
    pub action_map_resolution: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizons: metrics::DEFAULT_HORIZONS.to_vec(),
            action_map_resolution: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub libraries: Vec<LibrarySpec>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            libraries: sindy::default_library_candidates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub version: u32,
    pub env: Benchmark,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub collect: CollectSettings,
    #[serde(default)]
    pub fit: GridSearchSpec,
    /// The seed field is replaced by the derived training seed.
    #[serde(default)]
    pub train: CemConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub ablate: AblationSettings,
    /// Also train a policy directly in the real environment for comparison.
    #[serde(default = "default_true")]
    pub baseline: bool,
}

fn default_true() -> bool {
    true
}

impl PipelineConfig {
    pub fn defaults_for(env: Benchmark) -> Self {
        Self {
            version: CONFIG_VERSION,
            env,
            seed: 0,
            out_dir: None,
            collect: CollectSettings::default(),
            fit: GridSearchSpec::default(),
            train: CemConfig::default(),
            eval: EvalSettings::default(),
            ablate: AblationSettings::default(),
            baseline: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, StageError> {
        let value: toml::Table = toml::from_str(text).map_err(|e| StageError::Config(e.to_string()))?;
        match value.get("version").and_then(toml::Value::as_integer) {
            Some(v) if v == i64::from(CONFIG_VERSION) => {}
            Some(v) => {
                return Err(StageError::Io(IoError::Version {
                    path: PathBuf::from("<config>"),
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: CONFIG_VERSION,
                }))
            }
            None => return Err(StageError::Config("missing 'version' field".into())),
        }
        let config: Self = toml::from_str(text).map_err(|e| StageError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, StageError> {
        let bytes = io::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| StageError::Config(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            StageError::Io(IoError::Version { found, expected, .. }) => StageError::Io(IoError::Version {
                path: path.to_path_buf(),
                found,
                expected,
            }),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), StageError> {
        self.collect_config().validate()?;
        self.fit.validate()?;
        self.train_config().validate()?;
        if self.eval.episodes == 0 {
            return Err(StageError::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn collect_seed(&self) -> u64 {
        self.seed.wrapping_add(COLLECT_SEED_OFFSET)
    }

    pub fn fit_seed(&self) -> u64 {
        self.seed.wrapping_add(FIT_SEED_OFFSET)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(TRAIN_SEED_OFFSET)
    }

    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(EVAL_SEED_OFFSET)
    }

    pub fn baseline_seed(&self) -> u64 {
        self.seed.wrapping_add(BASELINE_SEED_OFFSET)
    }

    pub fn collect_config(&self) -> CollectConfig {
        self.collect.resolve(self.env, self.collect_seed())
    }

    pub fn train_config(&self) -> CemConfig {
        CemConfig {
            seed: self.train_seed(),
            ..self.train.clone()
        }
    }

    pub fn baseline_config(&self) -> CemConfig {
        CemConfig {
            seed: self.baseline_seed(),
            ..self.train.clone()
        }
    }
}

/// Training bookkeeping kept next to a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env: Benchmark,
    pub surrogate: bool,
    pub env_steps: u64,
    pub best_return: f64,
    pub selection_return: f64,
    pub seed: u64,
}

fn write_text(path: &Path, text: &str) -> Result<(), StageError> {
    Ok(io::write_bytes(path, text.as_bytes())?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, StageError> {
    let bytes = io::read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        StageError::Io(if e.is_eof() {
            IoError::Truncated {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        } else {
            IoError::schema(path, e.to_string())
        })
    })
}

/// Collects a dataset, loading a trained policy as the expert when the
/// config names a file instead of `scripted`.
pub fn stage_collect(config: &CollectConfig, out: &Path) -> Result<Dataset, StageError> {
    let data = if config.expert == "scripted" {
        collect::collect(config)?
    } else {
        let policy = Policy::load(Path::new(&config.expert))?;
        if policy.env != config.env {
            return Err(StageError::Rl(RlError::Dimension {
                env: config.env,
                message: format!("expert policy was trained on {}", policy.env),
            }));
        }
        collect::collect_with(config, &policy)?
    };
    io::write_dataset(&out.join(DATASET_FILE), &data)?;
    log::info!(
        "collected {} transitions over {} episodes",
        data.len(),
        data.episodes_used
    );
    Ok(data)
}

pub fn stage_fit(dataset: &Path, grid: &GridSearchSpec, seed: u64, out: &Path) -> Result<SindyModel, StageError> {
    let data = io::read_dataset(dataset)?;
    let model = sindy::fit(&data, grid, seed)?;
    model.save(&out.join(MODEL_FILE))?;
    write_text(&out.join(EQUATIONS_FILE), &model.print_equations())?;
    io::write_json(&out.join(FIT_REPORT_FILE), model.fit_report.as_ref().expect("fitted"))?;
    Ok(model)
}

/// Trains in the surrogate built from `model`, or in the real environment
/// when `model` is `None`.
pub fn stage_train(
    env: Benchmark,
    model: Option<&Path>,
    cem: &CemConfig,
    out: &Path,
    prefix: (&str, &str, &str),
) -> Result<(Policy, TrainSummary), StageError> {
    let outcome = match model {
        Some(path) => {
            let model = Arc::new(SindyModel::load(path)?);
            SurrogateEnv::new(model.clone(), env)?;
            rl::train(|| SurrogateEnv::new(model.clone(), env).expect("checked above"), cem)?
        }
        None => rl::train(|| RealEnv::new(env), cem)?,
    };
    let summary = TrainSummary {
        env,
        surrogate: outcome.surrogate,
        env_steps: outcome.env_steps,
        best_return: outcome.best_return,
        selection_return: outcome.selection_return,
        seed: cem.seed,
    };
    let (policy_file, curve_file, summary_file) = prefix;
    outcome.policy.save(&out.join(policy_file))?;
    write_text(&out.join(curve_file), &rl::curve_csv(&outcome.curve))?;
    io::write_json(&out.join(summary_file), &summary)?;
    Ok((outcome.policy, summary))
}

/// Model fidelity report on held-out transitions.
pub fn stage_eval_model(
    model: &Path,
    dataset: &Path,
    horizons: &[usize],
    out: &Path,
) -> Result<metrics::EvalReport, StageError> {
    let model = SindyModel::load(model)?;
    let data = io::read_dataset(dataset)?;
    let report = metrics::eval_report(&model, &data, horizons)?;
    write_text(&out.join(EVAL_REPORT_CSV), &report.to_csv())?;
    io::write_json(&out.join(EVAL_REPORT_JSON), &report)?;
    Ok(report)
}

/// Real-environment evaluation of a saved policy plus its action map.
pub fn stage_eval_policy(
    env: Benchmark,
    policy: &Path,
    episodes: usize,
    seed: u64,
    resolution: usize,
    out: &Path,
    files: (&str, &str),
) -> Result<PolicyEval, StageError> {
    let policy = Policy::load(policy)?;
    if policy.env != env {
        return Err(StageError::Rl(RlError::Dimension {
            env,
            message: format!("policy was trained on {}", policy.env),
        }));
    }
    let mut real = RealEnv::new(env);
    let eval = rl::evaluate_policy(&mut real, &policy, episodes, seed)?;
    let base = env.reset_state(0).iter().map(|_| 0.0).collect();
    let grid = StateGrid::over_bounds(env, 0, 1, resolution, base);
    let map = rl::policy_action_map(env, &policy, &grid);
    io::write_json(&out.join(files.0), &eval)?;
    write_text(&out.join(files.1), &map.to_csv())?;
    Ok(eval)
}

pub fn stage_ablate(
    dataset: &Path,
    libraries: &[LibrarySpec],
    grid: &GridSearchSpec,
    seed: u64,
    out: &Path,
) -> Result<metrics::AblationReport, StageError> {
    let data = io::read_dataset(dataset)?;
    let report = metrics::ablation_report(&data, libraries, grid, seed);
    write_text(&out.join(ABLATION_CSV), &report.to_csv())?;
    io::write_json(&out.join(ABLATION_JSON), &report)?;
    Ok(report)
}

/// Compares the surrogate-trained and real-trained policies from the files
/// the earlier stages wrote into `dir`.
pub fn stage_compare(dir: &Path, out: &Path) -> Result<metrics::CompareReport, StageError> {
    let meta: io::DatasetMeta =
        io::read_versioned_json(&io::sidecar_path(&dir.join(DATASET_FILE)), io::DATASET_FORMAT_VERSION)?;
    let sur_eval: PolicyEval = read_json(&dir.join(POLICY_EVAL_FILE))?;
    let real_eval: PolicyEval = read_json(&dir.join(BASELINE_EVAL_FILE))?;
    let sur: TrainSummary = read_json(&dir.join(TRAIN_SUMMARY_FILE))?;
    let base: TrainSummary = read_json(&dir.join(BASELINE_SUMMARY_FILE))?;
    if !sur.surrogate || base.surrogate {
        return Err(StageError::Config(
            "compare needs a surrogate-trained policy and a real-trained baseline".into(),
        ));
    }
    let ledger = InteractionLedger {
        collection_steps: meta.n_transitions as u64,
        surrogate_training_steps: sur.env_steps,
        baseline_training_steps: base.env_steps,
    };
    let report = metrics::compare_report(&sur_eval, &real_eval, &ledger);
    write_text(&out.join(COMPARE_CSV), &report.to_csv())?;
    io::write_json(&out.join(COMPARE_JSON), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub env: Benchmark,
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: Vec<ManifestEntry>,
}

/// Hashes every regular file in `dir` except the manifest itself.
pub fn build_manifest(dir: &Path, config: &PipelineConfig) -> Result<Manifest, StageError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| IoError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    let mut artifacts = Vec::with_capacity(names.len());
    for name in names {
        let bytes = io::read_bytes(&dir.join(&name))?;
        artifacts.push(ManifestEntry {
            sha256: io::sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            path: name,
        });
    }
    Ok(Manifest {
        format_version: 1,
        env: config.env,
        seed: config.seed,
        config_sha256: io::sha256_hex(config.to_toml().as_bytes()),
        artifacts,
    })
}

/// Runs every stage in order and writes the manifest.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<Manifest, PipelineError> {
    config.validate().map_err(at("config"))?;
    std::fs::create_dir_all(out)
        .map_err(|e| IoError::Io {
            path: out.to_path_buf(),
            source: e,
        })
        .map_err(at("setup"))?;
    write_text(&out.join("config.toml"), &config.to_toml()).map_err(at("setup"))?;
    let env = config.env;

    stage_collect(&config.collect_config(), out).map_err(at("collect"))?;
    let dataset = out.join(DATASET_FILE);
    stage_fit(&dataset, &config.fit, config.fit_seed(), out).map_err(at("fit"))?;
    let model = out.join(MODEL_FILE);
    stage_train(
        env,
        Some(&model),
        &config.train_config(),
        out,
        (POLICY_FILE, CURVE_FILE, TRAIN_SUMMARY_FILE),
    )
    .map_err(at("train"))?;
    stage_eval_model(&model, &dataset, &config.eval.horizons, out).map_err(at("eval"))?;
    stage_eval_policy(
        env,
        &out.join(POLICY_FILE),
        config.eval.episodes,
        config.eval_seed(),
        config.eval.action_map_resolution,
        out,
        (POLICY_EVAL_FILE, ACTION_MAP_FILE),
    )
    .map_err(at("eval"))?;
    stage_ablate(&dataset, &config.ablate.libraries, &config.fit, config.fit_seed(), out).map_err(at("ablate"))?;
    if config.baseline {
        stage_train(
            env,
            None,
            &config.baseline_config(),
            out,
            (BASELINE_POLICY_FILE, BASELINE_CURVE_FILE, BASELINE_SUMMARY_FILE),
        )
        .map_err(at("baseline"))?;
        stage_eval_policy(
            env,
            &out.join(BASELINE_POLICY_FILE),
            config.eval.episodes,
            config.eval_seed(),
            config.eval.action_map_resolution,
            out,
            (BASELINE_EVAL_FILE, BASELINE_ACTION_MAP_FILE),
        )
        .map_err(at("baseline"))?;
        stage_compare(out, out).map_err(at("compare"))?;
    }
    let manifest = build_manifest(out, config).map_err(at("manifest"))?;
    io::write_json(&out.join(MANIFEST_FILE), &manifest)
        .map_err(StageError::from)
        .map_err(at("manifest"))?;
    Ok(manifest)
}
