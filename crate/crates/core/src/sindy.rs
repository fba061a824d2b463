//! Discrete-time SINDy models: grid-searched fitting, prediction, equation
//! printing and persistence.
//!
//! A model maps `(s, a)` to `s'` as `Θ(s, a) · Ξ`, optionally added to `s`
//! when the regression target was the state increment. Inputs are z-scored
//! with statistics from the training split before polynomial terms are
//! formed; trig and rational terms see raw inputs.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::Dataset;
use crate::envs::Benchmark;
use crate::features::{FeatureError, FeatureLibrary, LibrarySpec, NormStats, Term};
use crate::io::{self, IoError};
use crate::stlsq::{CompressedSystem, SparseSolution, StlsqConfig, StlsqError};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MIN_TRANSITIONS: usize = 10;

#[derive(Debug, Error)]
pub enum SindyError {
    #[error("too few transitions: {found} (need at least {min})")]
    TooFewTransitions { found: usize, min: usize },
    #[error(
        "every candidate produced an all-zero model on every state dimension; \
         reduce the smallest threshold in the grid"
    )]
    AllDegenerate,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite {what} value {value} at index {index}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Stlsq(#[from] StlsqError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    NextState,
    #[default]
    DeltaState,
}

/// Logarithmically spaced values from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

/// Library candidates matching the three rows of the ablation table:
/// polynomials only, with trigonometric terms, with rational terms.
pub fn default_library_candidates() -> Vec<LibrarySpec> {
    let poly = LibrarySpec::polynomial(2);
    let trig = poly.clone().with_trig(&[1.0, 2.0, 3.0]);
    let rational = trig.clone().with_rational();
    vec![poly, trig, rational]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSearchSpec {
    pub thresholds: Vec<f64>,
    pub ridges: Vec<f64>,
    /// Input names and discrete-input counts are filled in from the data.
    pub libraries: Vec<LibrarySpec>,
    pub validation_fraction: f64,
    pub max_iterations: usize,
    pub target_mode: TargetMode,
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        Self {
            thresholds: logspace(1e-5, 1e-1, 9),
            ridges: vec![0.0, 1e-6, 1e-4, 1e-2],
            libraries: default_library_candidates(),
            validation_fraction: 0.2,
            max_iterations: StlsqConfig::<f64>::DEFAULT_MAX_ITERATIONS,
            target_mode: TargetMode::DeltaState,
        }
    }
}

impl GridSearchSpec {
    pub fn single(library: LibrarySpec, threshold: f64, ridge: f64) -> Self {
        Self {
            thresholds: vec![threshold],
            ridges: vec![ridge],
            libraries: vec![library],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SindyError> {
        if self.thresholds.is_empty() || self.ridges.is_empty() || self.libraries.is_empty() {
            return Err(SindyError::InvalidGrid(
                "each of thresholds, ridges and libraries needs at least one candidate".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(SindyError::InvalidGrid(format!(
                "validation fraction {} outside (0, 0.5]",
                self.validation_fraction
            )));
        }
        for &t in &self.thresholds {
            StlsqConfig::new(t, 0.0).validate()?;
        }
        for &r in &self.ridges {
            StlsqConfig::new(0.0, r).validate()?;
        }
        if self.max_iterations == 0 {
            return Err(SindyError::InvalidGrid("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Transitions as aligned matrices, the form the regression works on.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub env: Option<Benchmark>,
    pub state_names: Vec<String>,
    pub action_names: Vec<String>,
    /// Trailing action inputs that are indicators.
    pub discrete_actions: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
}

impl TransitionTable {
    pub fn from_dataset(data: &Dataset) -> Self {
        let spec = data.env.spec();
        let (n, d, k) = (data.len(), spec.state_dim(), spec.action_dim());
        let mut states = Array2::zeros((n, d));
        let mut actions = Array2::zeros((n, k));
        let mut next_states = Array2::zeros((n, d));
        for (i, t) in data.transitions.iter().enumerate() {
            for j in 0..d {
                states[[i, j]] = t.state[j];
                next_states[[i, j]] = t.next_state[j];
            }
            for j in 0..k {
                actions[[i, j]] = t.action[j];
            }
        }
        Self {
            env: Some(data.env),
            state_names: spec.state_names.clone(),
            action_names: spec.action_names.clone(),
            discrete_actions: spec.discrete_action_inputs(),
            states,
            actions,
            next_states,
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn input_names(&self) -> Vec<String> {
        self.state_names.iter().chain(&self.action_names).cloned().collect()
    }

    /// `[state | action]` rows for the given indices.
    pub fn inputs(&self, rows: &[usize]) -> Array2<f64> {
        let (d, k) = (self.states.ncols(), self.actions.ncols());
        Array2::from_shape_fn((rows.len(), d + k), |(i, j)| {
            if j < d {
                self.states[[rows[i], j]]
            } else {
                self.actions[[rows[i], j - d]]
            }
        })
    }

    pub fn targets(&self, rows: &[usize], mode: TargetMode) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), self.state_dim()), |(i, j)| match mode {
            TargetMode::NextState => self.next_states[[rows[i], j]],
            TargetMode::DeltaState => self.next_states[[rows[i], j]] - self.states[[rows[i], j]],
        })
    }

    /// SHA-256 over the little-endian bytes of every stored value.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.states.len() * 2 + self.actions.len()));
        for m in [&self.states, &self.actions, &self.next_states] {
            for v in m.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::sha256_hex(&bytes)
    }

    fn validate(&self) -> Result<(), SindyError> {
        let n = self.len();
        if self.actions.nrows() != n || self.next_states.nrows() != n {
            return Err(SindyError::Dimension("table columns have unequal lengths".into()));
        }
        if self.next_states.ncols() != self.state_dim()
            || self.state_names.len() != self.state_dim()
            || self.action_names.len() != self.actions.ncols()
            || self.discrete_actions > self.actions.ncols()
        {
            return Err(SindyError::Dimension("table widths disagree with names".into()));
        }
        for (what, m) in [
            ("state", &self.states),
            ("action", &self.actions),
            ("next state", &self.next_states),
        ] {
            if let Some((index, &value)) = m.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(SindyError::NonFinite { what, index, value });
            }
        }
        Ok(())
    }
}

/// Score of one (library, threshold, ridge) candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub library_index: usize,
    pub library: String,
    pub threshold: f64,
    pub ridge: f64,
    pub train_mse: Vec<f64>,
    /// Per state dimension; `f64::MAX` marks a non-finite score.
    pub validation_mse: Vec<f64>,
    pub mean_validation_mse: f64,
    pub nonzeros: usize,
    pub empty_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub split_fingerprint: String,
    pub n_train: usize,
    pub n_validation: usize,
    /// Training transitions left out because the recorded next state sits
    /// on a state bound.
    pub n_excluded: usize,
    pub validation_indices: Vec<usize>,
    pub library_index: usize,
    pub library: String,
    pub config: StlsqConfig<f64>,
    pub train_mse: Vec<f64>,
    pub validation_mse: Vec<f64>,
    pub candidates: Vec<CandidateScore>,
}

impl FitReport {
    pub fn selected(&self) -> &CandidateScore {
        self.candidates
            .iter()
            .find(|c| {
                c.library_index == self.library_index
                    && c.threshold == self.config.threshold
                    && c.ridge == self.config.ridge
            })
            .expect("selected candidate is in the table")
    }
}

/// A fitted (or hand-built) discrete-time model.
#[derive(Debug, Clone)]
pub struct SindyModel {
    pub env: Option<Benchmark>,
    pub state_names: Vec<String>,
    pub library: LibrarySpec,
    pub coefficients: SparseSolution<f64>,
    pub norm: NormStats<f64>,
    pub target_mode: TargetMode,
    pub fit_report: Option<FitReport>,
    compiled: FeatureLibrary,
    active_terms: Vec<usize>,
    // (position in active_terms, coefficient) per state dimension
    rows: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for SindyModel {
    fn eq(&self, other: &Self) -> bool {
        self.env == other.env
            && self.state_names == other.state_names
            && self.library == other.library
            && self.coefficients == other.coefficients
            && self.norm == other.norm
            && self.target_mode == other.target_mode
            && self.fit_report == other.fit_report
    }
}

impl SindyModel {
    /// Assembles a model from a coefficient matrix of shape
    /// (features × state dims). The library's leading inputs are the states.
    pub fn new(
        state_names: Vec<String>,
        library: LibrarySpec,
        coefficients: Array2<f64>,
        norm: NormStats<f64>,
        target_mode: TargetMode,
    ) -> Result<Self, SindyError> {
        let compiled = FeatureLibrary::new(&library)?;
        let d = state_names.len();
        if d == 0 || d > library.n_continuous() {
            return Err(SindyError::Dimension(format!(
                "{d} state dimensions do not fit a library with {} continuous inputs",
                library.n_continuous()
            )));
        }
        if state_names[..] != library.input_names[..d] {
            return Err(SindyError::Dimension(
                "state names must lead the library input names".into(),
            ));
        }
        if coefficients.dim() != (compiled.len(), d) {
            return Err(SindyError::Dimension(format!(
                "coefficients are {:?}, library × state dims is ({}, {d})",
                coefficients.dim(),
                compiled.len()
            )));
        }
        if norm.len() != library.n_inputs() {
            return Err(SindyError::Dimension(format!(
                "normalization covers {} inputs, library has {}",
                norm.len(),
                library.n_inputs()
            )));
        }
        if let Some((index, &value)) = coefficients.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SindyError::NonFinite {
                what: "coefficient",
                index,
                value,
            });
        }
        let support: Vec<Vec<usize>> = coefficients
            .columns()
            .into_iter()
            .map(|c| (0..c.len()).filter(|&i| c[i] != 0.0).collect())
            .collect();
        let solution = SparseSolution {
            degenerate: support.iter().any(Vec::is_empty),
            support,
            iterations_used: 0,
            coefficients,
        };
        Ok(Self::assemble(
            None,
            state_names,
            library,
            solution,
            norm,
            target_mode,
            None,
            compiled,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        env: Option<Benchmark>,
        state_names: Vec<String>,
        library: LibrarySpec,
        coefficients: SparseSolution<f64>,
        norm: NormStats<f64>,
        target_mode: TargetMode,
        fit_report: Option<FitReport>,
        compiled: FeatureLibrary,
    ) -> Self {
        let active_terms: Vec<usize> = (0..compiled.len())
            .filter(|&i| coefficients.coefficients.row(i).iter().any(|&c| c != 0.0))
            .collect();
        let rows = (0..state_names.len())
            .map(|j| {
                active_terms
                    .iter()
                    .enumerate()
                    .filter_map(|(pos, &t)| {
                        let c = coefficients.coefficients[[t, j]];
                        (c != 0.0).then_some((pos, c))
                    })
                    .collect()
            })
            .collect();
        Self {
            env,
            state_names,
            library,
            coefficients,
            norm,
            target_mode,
            fit_report,
            compiled,
            active_terms,
            rows,
        }
    }

    pub fn with_env(mut self, env: Benchmark) -> Result<Self, SindyError> {
        let spec = env.spec();
        if spec.state_names != self.state_names
            || spec.action_dim() != self.action_dim()
            || spec.discrete_action_inputs() != self.library.discrete_inputs
        {
            return Err(SindyError::Dimension(format!(
                "model inputs {:?} do not match {} (state {:?}, actions {:?})",
                self.library.input_names, env, spec.state_names, spec.action_names
            )));
        }
        self.env = Some(env);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn action_dim(&self) -> usize {
        self.library.n_inputs() - self.state_dim()
    }

    pub fn nonzeros(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// One-step prediction of `s'` from a state and an encoded action.
    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>, SindyError> {
        let mut out = vec![0.0; self.state_dim()];
        self.predict_into(state, action, &mut out)?;
        Ok(out)
    }

    pub fn predict_into(&self, state: &[f64], action: &[f64], out: &mut [f64]) -> Result<(), SindyError> {
        let d = self.state_dim();
        if state.len() != d || action.len() != self.action_dim() || out.len() != d {
            return Err(SindyError::Dimension(format!(
                "expected state of {d} and action of {}, got {} and {}",
                self.action_dim(),
                state.len(),
                action.len()
            )));
        }
        if let Some((index, &value)) = state.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SindyError::NonFinite {
                what: "state",
                index,
                value,
            });
        }
        if let Some((index, &value)) = action.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SindyError::NonFinite {
                what: "action",
                index,
                value,
            });
        }
        let raw: Vec<f64> = state.iter().chain(action).copied().collect();
        let mut scaled = vec![0.0; raw.len()];
        self.norm.normalize_into(&raw, &mut scaled);
        let terms = self.compiled.terms();
        let phi: Vec<f64> = self
            .active_terms
            .iter()
            .map(|&t| self.compiled.term_value(&terms[t], &raw, &scaled))
            .collect();
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(pos, c) in &self.rows[j] {
                acc += c * phi[pos];
            }
            *o = match self.target_mode {
                TargetMode::DeltaState => state[j] + acc,
                TargetMode::NextState => acc,
            };
        }
        Ok(())
    }

    pub fn term_names(&self) -> Vec<String> {
        self.compiled
            .terms()
            .iter()
            .map(|t| t.label(&self.library.input_names))
            .collect()
    }

    pub fn equations(&self) -> Vec<Equation> {
        equations(self)
    }

    pub fn print_equations(&self) -> String {
        print_equations(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), SindyError> {
        io::write_json(path, &ModelFile::from_model(self))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        io::to_json_string(&ModelFile::from_model(self))
    }

    pub fn load(path: &Path) -> Result<Self, SindyError> {
        let file: ModelFile = io::read_versioned_json(path, MODEL_FORMAT_VERSION)?;
        file.into_model()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    env: Option<Benchmark>,
    state_names: Vec<String>,
    target_mode: TargetMode,
    library: LibrarySpec,
    norm: NormStats<f64>,
    term_names: Vec<String>,
    /// One dense row of library coefficients per state dimension.
    coefficients: Vec<Vec<f64>>,
    stlsq_iterations: usize,
    fit_report: Option<FitReport>,
}

impl ModelFile {
    fn from_model(m: &SindyModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            env: m.env,
            state_names: m.state_names.clone(),
            target_mode: m.target_mode,
            library: m.library.clone(),
            norm: m.norm.clone(),
            term_names: m.term_names(),
            coefficients: m
                .coefficients
                .coefficients
                .columns()
                .into_iter()
                .map(|c| c.to_vec())
                .collect(),
            stlsq_iterations: m.coefficients.iterations_used,
            fit_report: m.fit_report.clone(),
        }
    }

    fn into_model(self) -> Result<SindyModel, SindyError> {
        let d = self.state_names.len();
        if self.coefficients.len() != d {
            return Err(SindyError::Dimension(format!(
                "{} coefficient rows for {d} state dimensions",
                self.coefficients.len()
            )));
        }
        let p = self.term_names.len();
        if let Some(bad) = self.coefficients.iter().find(|r| r.len() != p) {
            return Err(SindyError::Dimension(format!(
                "coefficient row of length {} for {p} terms",
                bad.len()
            )));
        }
        let xi = Array2::from_shape_fn((p, d), |(i, j)| self.coefficients[j][i]);
        let mut model = SindyModel::new(self.state_names, self.library, xi, self.norm, self.target_mode)?;
        if model.term_names() != self.term_names {
            return Err(SindyError::Dimension(
                "stored term names do not match the library".into(),
            ));
        }
        model.coefficients.iterations_used = self.stlsq_iterations;
        model.fit_report = self.fit_report;
        if let Some(env) = self.env {
            model = model.with_env(env)?;
        }
        Ok(model)
    }
}

fn mse_columns(pred: &Array2<f64>, truth: &Array2<f64>) -> Vec<f64> {
    let n = pred.nrows().max(1) as f64;
    (0..pred.ncols())
        .map(|j| {
            let s: f64 = pred
                .column(j)
                .iter()
                .zip(truth.column(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let mse = s / n;
            if mse.is_finite() {
                mse
            } else {
                f64::MAX
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    let s: f64 = v.iter().sum();
    let m = s / v.len() as f64;
    if m.is_finite() {
        m
    } else {
        f64::MAX
    }
}

/// Seeded train/validation split; both halves sorted ascending.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((validation_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Fits a model to a collected dataset.
pub fn fit(data: &Dataset, grid: &GridSearchSpec, seed: u64) -> Result<SindyModel, SindyError> {
    if data.len() < MIN_TRANSITIONS {
        return Err(SindyError::TooFewTransitions {
            found: data.len(),
            min: MIN_TRANSITIONS,
        });
    }
    let mut model = fit_table(&TransitionTable::from_dataset(data), grid, seed)?;
    if let Some(report) = model.fit_report.as_mut() {
        report.dataset_fingerprint = io::dataset_fingerprint(data);
    }
    Ok(model)
}

/// Grid-searched fit on a transition table.
///
/// When the table names an environment, training rows whose next state lies
/// on a state bound are excluded (the boundary rules are not part of the
/// smooth dynamics), and validation predictions pass through the
/// environment's bound enforcement before scoring.
pub fn fit_table(table: &TransitionTable, grid: &GridSearchSpec, seed: u64) -> Result<SindyModel, SindyError> {
    grid.validate()?;
    table.validate()?;
    let n = table.len();
    if n < MIN_TRANSITIONS {
        return Err(SindyError::TooFewTransitions {
            found: n,
            min: MIN_TRANSITIONS,
        });
    }
    let d = table.state_dim();
    let (train_all, val) = split_indices(n, grid.validation_fraction, seed);
    let train: Vec<usize> = match table.env {
        Some(env) => {
            let spec = env.spec();
            let kept: Vec<usize> = train_all
                .iter()
                .copied()
                .filter(|&i| !spec.touches_bound(table.next_states.row(i).as_slice().unwrap_or(&[])))
                .collect();
            if kept.len() >= 2 {
                kept
            } else {
                train_all.clone()
            }
        }
        None => train_all.clone(),
    };
    let n_excluded = train_all.len() - train.len();

    let input_names = table.input_names();
    let x_train = table.inputs(&train);
    let x_val = table.inputs(&val);
    let y_train = table.targets(&train, grid.target_mode);
    let s_val = table.states.select(Axis(0), &val);
    let truth_val = table.next_states.select(Axis(0), &val);
    let norm = NormStats::fit(x_train.view(), table.discrete_actions);

    let configs: Vec<(f64, f64)> = grid
        .ridges
        .iter()
        .flat_map(|&r| grid.thresholds.iter().map(move |&t| (t, r)))
        .collect();

    struct Fitted {
        score: CandidateScore,
        solution: SparseSolution<f64>,
    }

    let mut fitted: Vec<Fitted> = Vec::new();
    let mut libraries = Vec::with_capacity(grid.libraries.len());
    for (li, base) in grid.libraries.iter().enumerate() {
        let spec = base.clone().with_inputs(&input_names, table.discrete_actions);
        let lib = FeatureLibrary::new(&spec)?;
        let theta_train = lib.evaluate(x_train.view(), &norm)?;
        let theta_val = lib.evaluate(x_val.view(), &norm)?;
        let system = CompressedSystem::new(theta_train.view(), y_train.view())?;
        let id = spec.identifier();
        let results: Vec<Result<Fitted, SindyError>> = configs
            .par_iter()
            .map(|&(threshold, ridge)| {
                let mut config = StlsqConfig::new(threshold, ridge);
                config.max_iterations = grid.max_iterations;
                let solution = system.solve(&config)?;
                let fit_train = solution.predict(theta_train.view());
                let train_mse = mse_columns(&fit_train, &y_train);
                let mut pred = solution.predict(theta_val.view());
                if grid.target_mode == TargetMode::DeltaState {
                    pred += &s_val;
                }
                if let Some(env) = table.env {
                    for mut row in pred.rows_mut() {
                        let fixed = env.enforce_bounds(&row.to_vec());
                        row.assign(&ndarray::ArrayView1::from(&fixed[..]));
                    }
                }
                let validation_mse = mse_columns(&pred, &truth_val);
                Ok(Fitted {
                    score: CandidateScore {
                        library_index: li,
                        library: id.clone(),
                        threshold,
                        ridge,
                        train_mse,
                        mean_validation_mse: mean(&validation_mse),
                        validation_mse,
                        nonzeros: solution.nonzeros(),
                        empty_dims: solution.empty_targets(),
                    },
                    solution,
                })
            })
            .collect();
        for r in results {
            fitted.push(r?);
        }
        libraries.push((spec, lib));
    }

    if fitted.iter().all(|f| f.score.empty_dims.len() == d) {
        return Err(SindyError::AllDegenerate);
    }

    // Strict argmin; exact ties go to fewer nonzeros, then smaller threshold,
    // then grid order.
    let best = (0..fitted.len())
        .min_by(|&a, &b| {
            let (x, y) = (&fitted[a].score, &fitted[b].score);
            x.mean_validation_mse
                .total_cmp(&y.mean_validation_mse)
                .then(x.nonzeros.cmp(&y.nonzeros))
                .then(x.threshold.total_cmp(&y.threshold))
                .then(a.cmp(&b))
        })
        .expect("grid is non-empty");

    let candidates: Vec<CandidateScore> = fitted.iter().map(|f| f.score.clone()).collect();
    let chosen = fitted.swap_remove(best);
    let split_text = val.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut config = StlsqConfig::new(chosen.score.threshold, chosen.score.ridge);
    config.max_iterations = grid.max_iterations;
    let report = FitReport {
        seed,
        dataset_fingerprint: table.fingerprint(),
        split_fingerprint: io::sha256_hex(split_text.as_bytes()),
        n_train: train.len(),
        n_validation: val.len(),
        n_excluded,
        validation_indices: val,
        library_index: chosen.score.library_index,
        library: chosen.score.library.clone(),
        config,
        train_mse: chosen.score.train_mse.clone(),
        validation_mse: chosen.score.validation_mse.clone(),
        candidates,
    };
    let (spec, lib) = libraries.swap_remove(chosen.score.library_index);
    log::info!(
        "selected {} threshold={:e} ridge={:e} validation mse={:e} ({} nonzeros)",
        report.library,
        report.config.threshold,
        report.config.ridge,
        chosen.score.mean_validation_mse,
        chosen.score.nonzeros
    );
    Ok(SindyModel::assemble(
        table.env,
        table.state_names.clone(),
        spec,
        chosen.solution,
        norm,
        grid.target_mode,
        Some(report),
        lib,
    ))
}

/// One additive term of a printed equation.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationTerm {
    pub label: String,
    pub coefficient: f64,
    /// Coefficient refers to z-scored inputs rather than original units.
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub state: String,
    /// Whether the right-hand side is an increment added to the state.
    pub delta: bool,
    pub terms: Vec<EquationTerm>,
}

impl Equation {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.label == label).map(|t| t.coefficient)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{}' = ", self.state);
        let mut first = true;
        if self.delta {
            s.push_str(&self.state);
            first = false;
        }
        for t in &self.terms {
            let body = if t.normalized {
                format!("z[{}]", t.label)
            } else {
                t.label.clone()
            };
            let magnitude = if first { t.coefficient } else { t.coefficient.abs() };
            if !first {
                s.push_str(if t.coefficient < 0.0 { " - " } else { " + " });
            }
            if body == "1" {
                let _ = write!(s, "{magnitude:?}");
            } else {
                let _ = write!(s, "{magnitude:?}·{body}");
            }
            first = false;
        }
        if self.terms.is_empty() {
            s.push_str(if self.delta { " + 0" } else { "0" });
        }
        s
    }
}

/// Per-dimension equations, with coefficients rendered in original units
/// where the z-scoring can be undone exactly: bias, linear and
/// indicator-by-linear monomials, trig and rational terms. Higher-degree
/// monomials keep their normalized-space coefficients and are flagged.
pub fn equations(model: &SindyModel) -> Vec<Equation> {
    let names = &model.library.input_names;
    let terms = model.compiled.terms();
    let n_cont = model.library.n_continuous();
    let xi = &model.coefficients.coefficients;
    let mu = &model.norm.mean;
    let sd = &model.norm.std;

    // Output slots: canonical term order, with a constant slot in front.
    let mut labels: Vec<String> = vec!["1".to_string()];
    let mut normalized: Vec<bool> = vec![false];
    let mut slot_of_term: Vec<usize> = Vec::with_capacity(terms.len());
    for term in terms {
        if matches!(term, Term::Bias) {
            slot_of_term.push(0);
            continue;
        }
        slot_of_term.push(labels.len());
        labels.push(term.label(names));
        let exact = match term {
            Term::Monomial(f) => {
                f.len() == 1 && f[0].1 == 1 || f.len() == 2 && f.iter().all(|&(_, p)| p == 1) && f[1].0 >= n_cont
            }
            _ => true,
        };
        normalized.push(!exact);
    }
    let slot_of = |factors: &[(usize, u32)]| -> Option<usize> {
        terms
            .iter()
            .position(|t| matches!(t, Term::Monomial(f) if f == factors))
            .map(|i| slot_of_term[i])
    };

    (0..model.state_dim())
        .map(|j| {
            let mut values = vec![0.0; labels.len()];
            // largest contribution per slot, to recognise pure rounding residue
            let mut scale = vec![0.0f64; labels.len()];
            let mut add = |slot: usize, v: f64| {
                values[slot] += v;
                scale[slot] = scale[slot].max(v.abs());
            };
            for (t, term) in terms.iter().enumerate() {
                let c = xi[[t, j]];
                if c == 0.0 {
                    continue;
                }
                let slot = slot_of_term[t];
                match term {
                    Term::Monomial(f) if !normalized[slot] => {
                        // continuous factor i (if any) carries (x_i - mu_i)/sd_i
                        let (cont, disc): (Vec<_>, Vec<_>) = f.iter().partition(|&&(i, _)| i < n_cont);
                        match (cont.as_slice(), disc.as_slice()) {
                            ([(i, _)], []) => {
                                add(slot, c / sd[*i]);
                                add(0, -c * mu[*i] / sd[*i]);
                            }
                            ([], [_]) => add(slot, c),
                            ([(i, _)], [(k, _)]) => {
                                add(slot, c / sd[*i]);
                                let lone = slot_of(&[(*k, 1)]).expect("indicator term present");
                                add(lone, -c * mu[*i] / sd[*i]);
                            }
                            _ => add(slot, c),
                        }
                    }
                    _ => add(slot, c),
                }
            }
            let terms = labels
                .iter()
                .enumerate()
                .filter(|&(s, _)| values[s] != 0.0 && values[s].abs() > 1e-12 * scale[s])
                .map(|(s, label)| EquationTerm {
                    label: label.clone(),
                    coefficient: values[s],
                    normalized: normalized[s],
                })
                .collect();
            Equation {
                state: model.state_names[j].clone(),
                delta: model.target_mode == TargetMode::DeltaState,
                terms,
            }
        })
        .collect()
}

/// One line per state dimension.
pub fn print_equations(model: &SindyModel) -> String {
    let eqs = equations(model);
    let mut out = String::new();
    for e in &eqs {
        out.push_str(&e.render());
        out.push('\n');
    }
    if eqs.iter().any(|e| e.terms.iter().any(|t| t.normalized)) {
        out.push_str("# z[...] terms are products of z-scored inputs; their coefficients are in normalized units\n");
    }
    out
}

/// The benchmark Mountain Car dynamics written as a model (delta targets,
/// identity normalization): `v' = v + 0.0015·a − 0.0025·cos(3p)`,
/// `p' = p + v'`. Bound handling is left to the environment.
pub fn mountain_car_reference_model() -> SindyModel {
    use crate::envs::mountain_car::{HILL, POWER};
    let env = Benchmark::MountainCar;
    let spec = env.spec();
    let names: Vec<String> = spec.state_names.iter().chain(&spec.action_names).cloned().collect();
    let library = LibrarySpec::polynomial(1).with_trig(&[3.0]).with_inputs(&names, 0);
    let labels = crate::features::term_names(&library);
    let at = |l: &str| labels.iter().position(|x| x == l).expect("term present");
    let mut xi = Array2::zeros((labels.len(), 2));
    for j in 0..2 {
        xi[[at("action"), j]] = POWER;
        xi[[at("cos(3*position)"), j]] = -HILL;
    }
    xi[[at("velocity"), 0]] = 1.0;
    SindyModel::new(
        spec.state_names.clone(),
        library,
        xi,
        NormStats::identity(3),
        TargetMode::DeltaState,
    )
    .and_then(|m| m.with_env(env))
    .expect("reference model is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::{collect, CollectConfig};
    use crate::envs::mountain_car;
    use rand::Rng;

    fn linear_table(n: usize) -> TransitionTable {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let actions = Array2::zeros((n, 0));
        let next_states = states.mapv(|v| 0.9 * v);
        TransitionTable {
            env: None,
            state_names: vec!["x".into(), "y".into()],
            action_names: vec![],
            discrete_actions: 0,
            states,
            actions,
            next_states,
        }
    }

    #[test]
    fn recovers_linear_contraction() {
        let table = linear_table(60);
        let grid = GridSearchSpec {
            libraries: vec![LibrarySpec::polynomial(1)],
            target_mode: TargetMode::NextState,
            ..GridSearchSpec::default()
        };
        let model = fit_table(&table, &grid, 1).unwrap();
        let eqs = model.equations();
        assert!((eqs[0].coefficient("x").unwrap() - 0.9).abs() < 1e-8);
        assert!((eqs[1].coefficient("y").unwrap() - 0.9).abs() < 1e-8);
        assert_eq!(eqs[0].terms.len(), 1);
        let report = model.fit_report.as_ref().unwrap();
        assert!(report.validation_mse.iter().all(|&m| m <= 1e-12));
    }

    #[test]
    fn single_config_grid_equals_direct_solve() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::MountainCar)).unwrap();
        let lib = LibrarySpec::polynomial(2).with_trig(&[3.0]);
        let grid = GridSearchSpec::single(lib.clone(), 1e-4, 1e-6);
        let model = fit(&data, &grid, 9).unwrap();
        let report = model.fit_report.clone().unwrap();

        let table = TransitionTable::from_dataset(&data);
        let (train, val) = split_indices(data.len(), 0.2, 9);
        assert_eq!(val, report.validation_indices);
        let spec = data.env.spec();
        let train: Vec<usize> = train
            .into_iter()
            .filter(|&i| !spec.touches_bound(&data.transitions[i].next_state))
            .collect();
        let x = table.inputs(&train);
        let norm = NormStats::fit(x.view(), 0);
        let spec = lib.with_inputs(&table.input_names(), 0);
        let theta = crate::features::evaluate_scaled(&spec, x.view(), &norm).unwrap();
        let y = table.targets(&train, TargetMode::DeltaState);
        let direct = crate::stlsq::solve(theta.view(), y.view(), &StlsqConfig::new(1e-4, 1e-6)).unwrap();
        assert_eq!(direct.coefficients, model.coefficients.coefficients);
        assert_eq!(norm, model.norm);
    }

    #[test]
    fn too_few_transitions() {
        let mut data = collect(&CollectConfig::defaults_for(Benchmark::MountainCar)).unwrap();
        data.transitions.truncate(5);
        assert!(matches!(
            fit(&data, &GridSearchSpec::default(), 0),
            Err(SindyError::TooFewTransitions { found: 5, .. })
        ));
    }

    #[test]
    fn all_degenerate_is_an_error() {
        let table = linear_table(30);
        let grid = GridSearchSpec {
            thresholds: vec![10.0],
            libraries: vec![LibrarySpec::polynomial(1)],
            ..GridSearchSpec::default()
        };
        assert!(matches!(fit_table(&table, &grid, 0), Err(SindyError::AllDegenerate)));
    }

    #[test]
    fn zero_delta_model_is_identity() {
        let mut table = linear_table(30);
        table.next_states = table.states.clone();
        let names = table.input_names();
        let lib = LibrarySpec::polynomial(2).with_inputs(&names, 0);
        let p = crate::features::term_names(&lib).len();
        let model = SindyModel::new(
            table.state_names.clone(),
            lib,
            Array2::zeros((p, 2)),
            NormStats::identity(2),
            TargetMode::DeltaState,
        )
        .unwrap();
        assert_eq!(model.predict(&[0.3, -0.7], &[]).unwrap(), vec![0.3, -0.7]);
        assert_eq!(model.print_equations(), "x' = x + 0\ny' = y + 0\n");
    }

    #[test]
    fn reference_model_matches_environment() {
        let model = mountain_car_reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let s = [rng.random_range(-1.2..0.6), rng.random_range(-0.07..0.07)];
            let a: f64 = rng.random_range(-1.0..1.0);
            let truth = mountain_car::step(&s, a).unwrap().next_state;
            let pred = Benchmark::MountainCar.enforce_bounds(&model.predict(&s, &[a]).unwrap());
            for j in 0..2 {
                assert!((pred[j] - truth[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_term_equation() {
        let lib = LibrarySpec::polynomial(1).without_bias().with_inputs(&["x"], 0);
        let model = SindyModel::new(
            vec!["x".into()],
            lib,
            ndarray::array![[2.0]],
            NormStats::identity(1),
            TargetMode::NextState,
        )
        .unwrap();
        assert_eq!(model.print_equations(), "x' = 2.0·x\n");
    }

    #[test]
    fn de_normalized_equations_reproduce_predictions() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::LunarLander)).unwrap();
        let grid = GridSearchSpec {
            libraries: vec![LibrarySpec::polynomial(1).with_trig(&[1.0])],
            ..GridSearchSpec::default()
        };
        let model = fit(&data, &grid, 2).unwrap();
        let eqs = model.equations();
        assert!(eqs.iter().all(|e| e.terms.iter().all(|t| !t.normalized)));
        let names = &model.library.input_names;
        for t in data.transitions.iter().take(50) {
            let raw: Vec<f64> = t.state.iter().chain(&t.action).copied().collect();
            let pred = model.predict(&t.state, &t.action).unwrap();
            for (j, e) in eqs.iter().enumerate() {
                let mut v = t.state[j];
                for term in &e.terms {
                    let x = if term.label == "1" {
                        1.0
                    } else if let Some(i) = names.iter().position(|n| *n == term.label) {
                        raw[i]
                    } else if let Some(rest) = term.label.strip_prefix("sin(") {
                        raw[names.iter().position(|n| *n == rest.trim_end_matches(')')).unwrap()].sin()
                    } else if let Some(rest) = term.label.strip_prefix("cos(") {
                        raw[names.iter().position(|n| *n == rest.trim_end_matches(')')).unwrap()].cos()
                    } else {
                        panic!("unexpected term {}", term.label)
                    };
                    v += term.coefficient * x;
                }
                assert!((v - pred[j]).abs() < 1e-9, "{} vs {}", v, pred[j]);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::MountainCar)).unwrap();
        let model = fit(&data, &GridSearchSpec::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = SindyModel::load(&path).unwrap();
        assert_eq!(back, model);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let s = [rng.random_range(-1.2..0.6), rng.random_range(-0.07..0.07)];
            let a = [rng.random_range(-1.0..1.0)];
            assert_eq!(model.predict(&s, &a).unwrap(), back.predict(&s, &a).unwrap());
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let model = mountain_car_reference_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let text = model.to_json();

        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            SindyModel::load(&path),
            Err(SindyError::Io(IoError::Truncated { .. }))
        ));

        std::fs::write(
            &path,
            text.replacen("\"format_version\": 1", "\"format_version\": 7", 1),
        )
        .unwrap();
        let err = SindyModel::load(&path).unwrap_err();
        assert!(matches!(
            err,
            SindyError::Io(IoError::Version {
                found: 7,
                expected: 1,
                ..
            })
        ));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));

        let mut file = ModelFile::from_model(&model);
        file.coefficients.pop();
        std::fs::write(&path, io::to_json_string(&file)).unwrap();
        assert!(matches!(SindyModel::load(&path), Err(SindyError::Dimension(_))));
    }

    #[test]
    fn predict_rejects_non_finite_state() {
        let model = mountain_car_reference_model();
        assert!(matches!(
            model.predict(&[f64::NAN, 0.0], &[0.0]),
            Err(SindyError::NonFinite { what: "state", .. })
        ));
    }

    #[test]
    fn selected_candidate_is_minimal() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::MountainCar)).unwrap();
        let model = fit(&data, &GridSearchSpec::default(), 0).unwrap();
        let report = model.fit_report.as_ref().unwrap();
        let best = report.selected().mean_validation_mse;
        assert!(report.candidates.iter().all(|c| best <= c.mean_validation_mse));
        assert_eq!(report.candidates.len(), 3 * 9 * 4);
    }

    #[test]
    fn fit_is_deterministic() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::MountainCar)).unwrap();
        let a = fit(&data, &GridSearchSpec::default(), 11).unwrap();
        let b = fit(&data, &GridSearchSpec::default(), 11).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn logspace_endpoints() {
        let v = logspace(1e-5, 1e-1, 9);
        assert_eq!(v.len(), 9);
        assert!((v[0] - 1e-5).abs() < 1e-20 && (v[8] - 1e-1).abs() < 1e-15);
        assert!((v[4] - 1e-3).abs() < 1e-15);
    }
}
