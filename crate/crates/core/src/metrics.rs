//! Fidelity and transfer metrics: per-dimension error and correlation,
//! open-loop divergence, library ablations and policy comparison reports.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::collect::Dataset;
use crate::envs::{Benchmark, EnvError};
use crate::features::LibrarySpec;
use crate::io;
use crate::rl::PolicyEval;
use crate::scalar::Real;
use crate::sindy::{self, GridSearchSpec, SindyError, SindyModel};

pub const DEFAULT_HORIZONS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("no rows to score")]
    Empty,
    #[error("no episode segment of length {k} in the dataset")]
    NoSegment { k: usize },
    #[error("model fits {model} but data comes from {data}")]
    EnvMismatch { model: String, data: Benchmark },
    #[error(transparent)]
    Sindy(#[from] SindyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn check_shapes<T>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Shape(a.dim(), b.dim()));
    }
    if a.nrows() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Column-wise mean squared error.
pub fn mse_per_dim<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<Vec<T>, MetricsError> {
    check_shapes(&pred, &truth)?;
    let n = T::from_count(pred.nrows());
    Ok((0..pred.ncols())
        .map(|j| {
            pred.column(j)
                .iter()
                .zip(truth.column(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                / n
        })
        .collect())
}

/// Pearson correlation, or `Undefined` when either side is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(&self) -> Option<f64> {
        match self {
            Correlation::Defined(v) => Some(*v),
            Correlation::Undefined => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Defined(v) => write!(f, "{v:?}"),
            Correlation::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Correlation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Correlation::Defined(v) => s.serialize_f64(*v),
            Correlation::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Correlation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(Correlation::Defined(v)),
            Repr::Text(t) if t == "undefined" => Ok(Correlation::Undefined),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad correlation '{t}'"))),
        }
    }
}

pub fn pearson_per_dim<T: Real>(pred: ArrayView2<T>, truth: ArrayView2<T>) -> Result<Vec<Correlation>, MetricsError> {
    check_shapes(&pred, &truth)?;
    let n = T::from_count(pred.nrows());
    Ok((0..pred.ncols())
        .map(|j| {
            let (a, b) = (pred.column(j), truth.column(j));
            let ma = a.iter().copied().sum::<T>() / n;
            let mb = b.iter().copied().sum::<T>() / n;
            let mut sab = T::zero();
            let mut saa = T::zero();
            let mut sbb = T::zero();
            for (&x, &y) in a.iter().zip(b) {
                let (dx, dy) = (x - ma, y - mb);
                sab = sab + dx * dy;
                saa = saa + dx * dx;
                sbb = sbb + dy * dy;
            }
            if saa == T::zero() || sbb == T::zero() || !(saa * sbb).is_finite() {
                return Correlation::Undefined;
            }
            let r = (sab / (saa.sqrt() * sbb.sqrt())).to_f64().unwrap_or(f64::NAN);
            if r.is_finite() {
                Correlation::Defined(r.clamp(-1.0, 1.0))
            } else {
                Correlation::Undefined
            }
        })
        .collect())
}

fn check_env(model: &SindyModel, data: &Dataset) -> Result<(), MetricsError> {
    match model.env {
        Some(env) if env != data.env => Err(MetricsError::EnvMismatch {
            model: env.to_string(),
            data: data.env,
        }),
        _ if model.state_names != data.env.spec().state_names || model.action_dim() != data.env.spec().action_dim() => {
            Err(MetricsError::EnvMismatch {
                model: format!("{:?}", model.library.input_names),
                data: data.env,
            })
        }
        _ => Ok(()),
    }
}

/// Model step followed by the environment's bound rules.
fn constrained_step(
    model: &SindyModel,
    env: Benchmark,
    state: &[f64],
    action: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    Ok(env.enforce_bounds(&model.predict(state, action)?))
}

/// Open-loop error after `k` steps: from every start index whose next `k`
/// transitions belong to one episode, the stored actions are replayed
/// through the model and through the environment. Returns per-dimension
/// RMSE of the final states and the number of segments.
pub fn kstep_divergence(model: &SindyModel, data: &Dataset, k: usize) -> Result<(Vec<f64>, usize), MetricsError> {
    check_env(model, data)?;
    let env = data.env;
    let d = env.spec().state_dim();
    let mut sq = vec![0.0; d];
    let mut segments = 0usize;
    for ep in data.episodes() {
        if k == 0 || ep.len() < k {
            continue;
        }
        for start in ep.start..=ep.end - k {
            let mut predicted = data.transitions[start].state.clone();
            let mut truth = predicted.clone();
            for t in &data.transitions[start..start + k] {
                predicted = constrained_step(model, env, &predicted, &t.action)?;
                truth = env.step(&truth, &env.decode_action(&t.action)?)?.next_state;
            }
            for j in 0..d {
                sq[j] += (predicted[j] - truth[j]).powi(2);
            }
            segments += 1;
        }
    }
    if segments == 0 {
        return Err(MetricsError::NoSegment { k });
    }
    Ok((sq.iter().map(|s| (s / segments as f64).sqrt()).collect(), segments))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStepRmse {
    pub k: usize,
    pub segments: usize,
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: Benchmark,
    pub library: String,
    pub dataset_fingerprint: String,
    pub state_names: Vec<String>,
    /// Number of held-out transitions scored.
    pub n_pairs: usize,
    pub mse: Vec<f64>,
    /// MSE divided by the variance of each state dimension in the
    /// training inputs.
    pub mse_normalized: Vec<f64>,
    pub correlation: Vec<Correlation>,
    pub kstep: Vec<KStepRmse>,
}

/// Scores a model on held-out transitions (the validation split recorded in
/// its fit report, or every transition for a model without one) and on
/// open-loop replays of length `horizons`.
pub fn eval_report(model: &SindyModel, data: &Dataset, horizons: &[usize]) -> Result<EvalReport, MetricsError> {
    check_env(model, data)?;
    let env = data.env;
    let d = env.spec().state_dim();
    let rows: Vec<usize> = match &model.fit_report {
        Some(r) if r.dataset_fingerprint == io::dataset_fingerprint(data) => r.validation_indices.clone(),
        _ => (0..data.len()).collect(),
    };
    let mut pred = Array2::<f64>::zeros((rows.len(), d));
    let mut truth = Array2::<f64>::zeros((rows.len(), d));
    for (i, &r) in rows.iter().enumerate() {
        let t = &data.transitions[r];
        let p = constrained_step(model, env, &t.state, &t.action)?;
        for j in 0..d {
            pred[[i, j]] = p[j];
            truth[[i, j]] = t.next_state[j];
        }
    }
    let mse = mse_per_dim(pred.view(), truth.view())?;
    let mse_normalized = mse.iter().zip(&model.norm.std[..d]).map(|(m, s)| m / (s * s)).collect();
    let correlation = pearson_per_dim(pred.view(), truth.view())?;
    let mut kstep = Vec::new();
    for &k in horizons {
        match kstep_divergence(model, data, k) {
            Ok((rmse, segments)) => kstep.push(KStepRmse { k, segments, rmse }),
            Err(MetricsError::NoSegment { .. }) => log::warn!("no episode segment of length {k}; skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        env,
        library: model.library.identifier(),
        dataset_fingerprint: io::dataset_fingerprint(data),
        state_names: env.spec().state_names.clone(),
        n_pairs: rows.len(),
        mse,
        mse_normalized,
        correlation,
        kstep,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec![
            "dimension".to_string(),
            "mse".into(),
            "mse_normalized".into(),
            "correlation".into(),
        ];
        header.extend(self.kstep.iter().map(|k| format!("rmse_k{}", k.k)));
        w.write_record(&header).expect("in-memory write");
        for (j, name) in self.state_names.iter().enumerate() {
            let mut row = vec![
                name.clone(),
                io::fmt_f64(self.mse[j]),
                io::fmt_f64(self.mse_normalized[j]),
                self.correlation[j].to_string(),
            ];
            row.extend(self.kstep.iter().map(|k| io::fmt_f64(k.rmse[j])));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub library: String,
    pub mean_mse: Option<f64>,
    pub mse: Vec<f64>,
    pub threshold: Option<f64>,
    pub ridge: Option<f64>,
    pub nonzeros: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub env: Benchmark,
    pub dataset_fingerprint: String,
    pub state_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Best held-out MSE per library candidate, each searched over the grid's
/// thresholds and ridges with the same split. A failing candidate yields a
/// row carrying its error.
pub fn ablation_report(data: &Dataset, candidates: &[LibrarySpec], grid: &GridSearchSpec, seed: u64) -> AblationReport {
    let rows = candidates
        .iter()
        .map(|lib| {
            let single = GridSearchSpec {
                libraries: vec![lib.clone()],
                ..grid.clone()
            };
            match sindy::fit(data, &single, seed) {
                Ok(model) => {
                    let r = model.fit_report.as_ref().expect("fitted model has a report");
                    let best = r.selected();
                    AblationRow {
                        library: r.library.clone(),
                        mean_mse: Some(best.mean_validation_mse),
                        mse: best.validation_mse.clone(),
                        threshold: Some(best.threshold),
                        ridge: Some(best.ridge),
                        nonzeros: Some(best.nonzeros),
                        error: None,
                    }
                }
                Err(e) => AblationRow {
                    library: lib.identifier(),
                    mean_mse: None,
                    mse: Vec::new(),
                    threshold: None,
                    ridge: None,
                    nonzeros: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    AblationReport {
        env: data.env,
        dataset_fingerprint: io::dataset_fingerprint(data),
        state_names: data.env.spec().state_names.clone(),
        rows,
    }
}

impl AblationReport {
    pub fn row(&self, library: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.library == library)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec!["env".to_string(), "library".into(), "mean_mse".into()];
        header.extend(self.state_names.iter().map(|n| format!("mse_{n}")));
        header.extend(["threshold", "ridge", "nonzeros", "error"].map(String::from));
        w.write_record(&header).expect("in-memory write");
        let opt = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
        for r in &self.rows {
            let mut row = vec![self.env.to_string(), r.library.clone(), opt(r.mean_mse)];
            for j in 0..self.state_names.len() {
                row.push(opt(r.mse.get(j).copied()));
            }
            row.push(opt(r.threshold));
            row.push(opt(r.ridge));
            row.push(r.nonzeros.map(|n| n.to_string()).unwrap_or_default());
            row.push(r.error.clone().unwrap_or_default());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Real-environment steps consumed by each pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLedger {
    /// Transitions collected to build the model.
    pub collection_steps: u64,
    /// Steps taken inside the surrogate while training (not real).
    pub surrogate_training_steps: u64,
    /// Real steps used by the baseline trainer.
    pub baseline_training_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub mean_return: f64,
    pub success_rate: f64,
    pub successes: usize,
    pub episodes: usize,
    /// Real steps spent before evaluation.
    pub real_training_interactions: u64,
    pub real_evaluation_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub env: Benchmark,
    pub surrogate_trained: PipelineSummary,
    pub real_trained: PipelineSummary,
    pub surrogate_training_steps: u64,
    /// Surrogate-trained mean return over real-trained mean return.
    pub return_ratio: f64,
    /// Baseline real training interactions over model-building interactions.
    pub interaction_reduction: f64,
}

/// Side-by-side comparison; both evaluations must come from the real
/// environment.
pub fn compare_report(
    surrogate_eval: &PolicyEval,
    real_eval: &PolicyEval,
    ledger: &InteractionLedger,
) -> CompareReport {
    let summary = |e: &PolicyEval, training: u64| PipelineSummary {
        mean_return: e.mean_return,
        success_rate: e.success_rate,
        successes: e.successes,
        episodes: e.episodes,
        real_training_interactions: training,
        real_evaluation_steps: e.steps,
    };
    CompareReport {
        env: surrogate_eval.env,
        surrogate_trained: summary(surrogate_eval, ledger.collection_steps),
        real_trained: summary(real_eval, ledger.baseline_training_steps),
        surrogate_training_steps: ledger.surrogate_training_steps,
        return_ratio: surrogate_eval.mean_return / real_eval.mean_return,
        interaction_reduction: ledger.baseline_training_steps as f64 / ledger.collection_steps.max(1) as f64,
    }
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([
            "pipeline",
            "mean_return",
            "success_rate",
            "successes",
            "episodes",
            "real_training_interactions",
            "real_evaluation_steps",
        ])
        .expect("in-memory write");
        for (name, s) in [
            ("surrogate_trained", &self.surrogate_trained),
            ("real_trained", &self.real_trained),
        ] {
            w.write_record([
                name.to_string(),
                io::fmt_f64(s.mean_return),
                io::fmt_f64(s.success_rate),
                s.successes.to_string(),
                s.episodes.to_string(),
                s.real_training_interactions.to_string(),
                s.real_evaluation_steps.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
