//! Linear policies and cross-entropy-method policy search.
//!
//! The same trainer runs against any [`Environment`], so a policy can be
//! optimized on the real simulator or on a surrogate without changes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Action, ActionSpace, Benchmark, Controller, EnvError, Environment};
use crate::features::STD_FLOOR;
use crate::io::{self, IoError};

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Length of the random rollout used to fix the policy's state scaling.
pub const NORMALIZATION_STEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid CEM config: {0}")]
    InvalidConfig(String),
    #[error("policy does not fit {env}: {message}")]
    Dimension { env: Benchmark, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyHead {
    /// Single output squashed by `tanh` onto `[low, high]`.
    Tanh { low: f64, high: f64 },
    /// One score per action; lowest index wins ties.
    Argmax { n: usize },
}

impl PolicyHead {
    pub fn for_env(env: Benchmark) -> Self {
        match env.spec().action_space {
            ActionSpace::Continuous { low, high } => PolicyHead::Tanh { low, high },
            ActionSpace::Discrete { n } => PolicyHead::Argmax { n },
        }
    }

    pub fn width(&self) -> usize {
        match self {
            PolicyHead::Tanh { .. } => 1,
            PolicyHead::Argmax { n } => *n,
        }
    }
}

/// Linear map from the z-scored state to action pre-activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub env: Benchmark,
    pub head: PolicyHead,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Per output: `state_dim` weights followed by a bias.
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format_version: u32,
    #[serde(flatten)]
    policy: Policy,
}

impl Policy {
    pub fn param_count(env: Benchmark) -> usize {
        (env.spec().state_dim() + 1) * PolicyHead::for_env(env).width()
    }

    pub fn new(env: Benchmark, state_mean: Vec<f64>, state_std: Vec<f64>, params: Vec<f64>) -> Result<Self, RlError> {
        let d = env.spec().state_dim();
        let head = PolicyHead::for_env(env);
        let dim_err = |message: String| RlError::Dimension { env, message };
        if state_mean.len() != d || state_std.len() != d {
            return Err(dim_err(format!(
                "scaling has {} entries, state has {d}",
                state_mean.len()
            )));
        }
        if params.len() != (d + 1) * head.width() {
            return Err(dim_err(format!(
                "{} parameters, expected {}",
                params.len(),
                (d + 1) * head.width()
            )));
        }
        if state_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(dim_err("state scaling must be positive".into()));
        }
        Ok(Self {
            env,
            head,
            state_mean,
            state_std,
            params,
        })
    }

    /// Action pre-activations for `state`.
    pub fn scores(&self, state: &[f64]) -> Vec<f64> {
        let d = self.state_mean.len();
        self.params
            .chunks_exact(d + 1)
            .map(|w| {
                let mut acc = w[d];
                for i in 0..d {
                    acc += w[i] * (state[i] - self.state_mean[i]) / self.state_std[i];
                }
                acc
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        io::write_json(
            path,
            &PolicyFile {
                format_version: POLICY_FORMAT_VERSION,
                policy: self.clone(),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        let file: PolicyFile = io::read_versioned_json(path, POLICY_FORMAT_VERSION)?;
        let p = file.policy;
        let policy = Policy::new(p.env, p.state_mean, p.state_std, p.params)?;
        if policy.head != p.head {
            return Err(RlError::Dimension {
                env: p.env,
                message: "stored head does not match the action space".into(),
            });
        }
        Ok(policy)
    }
}

impl Controller for Policy {
    fn act(&self, state: &[f64]) -> Action {
        let scores = self.scores(state);
        match self.head {
            PolicyHead::Tanh { low, high } => {
                let t = scores[0].tanh();
                Action::Continuous(low + 0.5 * (t + 1.0) * (high - low))
            }
            PolicyHead::Argmax { .. } => {
                let mut best = 0;
                for (i, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub init_std: f64,
    pub std_floor: f64,
    pub episodes_per_candidate: usize,
    /// Episodes used to re-score the finalists (each generation's top
    /// candidate and the final mean) before one is returned.
    pub selection_episodes: usize,
    /// Fraction of the iterations over which the extra sampling variance
    /// decays to zero; 0 disables it.
    pub noise_decay_fraction: f64,
    /// Episode step limit; `None` uses the environment's own limit.
    pub horizon: Option<usize>,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 64,
            elite_fraction: 0.125,
            iterations: 60,
            init_std: 1.0,
            std_floor: 0.02,
            episodes_per_candidate: 3,
            selection_episodes: 20,
            noise_decay_fraction: 0.5,
            horizon: None,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        (self.elite_fraction * self.population as f64).round() as usize
    }

    /// Variance added to every parameter after refit `iteration`: starts
    /// at `init_std²` and decays linearly to zero halfway through training.
    pub fn extra_variance(&self, iteration: usize) -> f64 {
        let span = (self.iterations as f64 * self.noise_decay_fraction).max(1.0);
        self.init_std * self.init_std * (1.0 - (iteration + 1) as f64 / span).max(0.0)
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.into()));
        if self.population == 0 || self.episodes_per_candidate == 0 || self.selection_episodes == 0 {
            return bad("population, episodes_per_candidate and selection_episodes must be positive");
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) || self.elite_count() == 0 {
            return bad("elite fraction must select at least one candidate");
        }
        if !(self.init_std > 0.0 && self.std_floor > 0.0) {
            return bad("init_std and std_floor must be positive");
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_return: f64,
    pub max_return: f64,
    pub elite_mean_return: f64,
    pub best_return: f64,
    /// Environment steps consumed so far, including the scaling rollout.
    pub cumulative_steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    /// Highest single-generation fitness seen.
    pub best_return: f64,
    /// Mean return of the returned policy over the selection episodes.
    pub selection_return: f64,
    pub curve: Vec<CurvePoint>,
    pub env_steps: u64,
    pub surrogate: bool,
}

/// Plays one episode and returns `(return, steps, success)`.
pub fn run_episode(
    env: &mut dyn Environment,
    policy: &dyn Controller,
    seed: u64,
    horizon: usize,
) -> Result<(f64, usize, bool), EnvError> {
    let mut state = env.reset(seed);
    let mut total = 0.0;
    for t in 0..horizon {
        let r = env.step(&policy.act(&state))?;
        total += r.reward;
        if r.terminated {
            return Ok((total, t + 1, env.benchmark().is_success(&r.next_state)));
        }
        if r.truncated {
            return Ok((total, t + 1, false));
        }
        state = r.next_state;
    }
    Ok((total, horizon, false))
}

/// Mean and population std of states visited by uniform random actions.
pub fn random_state_stats(
    env: &mut dyn Environment,
    steps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let benchmark = env.benchmark();
    let d = env.spec().state_dim();
    let mut state = env.reset(rng.random());
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..steps {
        for i in 0..d {
            sum[i] += state[i];
            sq[i] += state[i] * state[i];
        }
        let r = env.step(&benchmark.random_action(&mut rng))?;
        state = if r.done() {
            env.reset(rng.random())
        } else {
            r.next_state
        };
    }
    let n = steps.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    Ok((mean, std))
}

fn episode_seeds(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// Cross-entropy method over linear policy parameters.
///
/// Generation 0 samples the initial distribution; each of the `iterations`
/// that follow refits mean and std to the elites and samples again. The
/// current mean is always evaluated alongside the samples. All candidates of
/// a generation share the same episode seeds. The previous generation's top
/// candidate is carried over.
pub fn train<E, F>(make_env: F, config: &CemConfig) -> Result<TrainOutcome, RlError>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut setup_env = make_env();
    let env_id = setup_env.benchmark();
    let surrogate = setup_env.is_surrogate();
    let horizon = config.horizon.unwrap_or(setup_env.spec().max_episode_steps);
    let (state_mean, state_std) = random_state_stats(&mut setup_env, NORMALIZATION_STEPS, rng.random())?;
    let mut steps = setup_env.total_steps();

    let n_params = Policy::param_count(env_id);
    let mut mean = vec![0.0; n_params];
    let mut std = vec![config.init_std; n_params];
    let elites = config.elite_count();
    let make_policy = |params: Vec<f64>| Policy::new(env_id, state_mean.clone(), state_std.clone(), params);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut finalists: Vec<Vec<f64>> = Vec::with_capacity(config.iterations + 2);
    let mut curve = Vec::with_capacity(config.iterations + 1);
    for iteration in 0..=config.iterations {
        let seeds = episode_seeds(&mut rng, config.episodes_per_candidate);
        let mut population = vec![mean.clone()];
        if let Some(prev) = finalists.last() {
            population.push(prev.clone());
        }
        while population.len() < config.population.max(3) {
            population.push(
                mean.iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect(),
            );
        }
        let scored: Vec<Result<(f64, u64), EnvError>> = population
            .par_iter()
            .map(|params| {
                let policy = make_policy(params.clone()).expect("parameter count fixed");
                let mut env = make_env();
                let mut total = 0.0;
                for &s in &seeds {
                    total += run_episode(&mut env, &policy, s, horizon)?.0;
                }
                let fitness = total / seeds.len() as f64;
                let fitness = if fitness.is_finite() {
                    fitness
                } else {
                    f64::NEG_INFINITY
                };
                Ok((fitness, env.total_steps()))
            })
            .collect();
        let mut fitness = Vec::with_capacity(population.len());
        for r in scored {
            let (f, s) = r?;
            fitness.push(f);
            steps += s;
        }

        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
        let top = order[0];
        if fitness[top].is_finite() {
            finalists.push(population[top].clone());
        }
        if best.as_ref().is_none_or(|(f, _)| fitness[top] > *f) {
            best = Some((fitness[top], population[top].clone()));
        }
        let finite: Vec<f64> = fitness.iter().copied().filter(|f| f.is_finite()).collect();
        let elite_idx: Vec<usize> = order
            .iter()
            .copied()
            .take(elites)
            .filter(|&i| fitness[i].is_finite())
            .collect();
        let point = CurvePoint {
            iteration,
            mean_return: if finite.is_empty() {
                f64::NEG_INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            max_return: fitness[top],
            elite_mean_return: elite_idx.iter().map(|&i| fitness[i]).sum::<f64>() / elite_idx.len().max(1) as f64,
            best_return: best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0),
            cumulative_steps: steps,
        };
        log::debug!(
            "cem iteration {iteration}: mean {:.3} max {:.3} elite {:.3}",
            point.mean_return,
            point.max_return,
            point.elite_mean_return
        );
        curve.push(point);

        if iteration < config.iterations && !elite_idx.is_empty() {
            let k = elite_idx.len() as f64;
            let extra = config.extra_variance(iteration);
            for j in 0..n_params {
                let m = elite_idx.iter().map(|&i| population[i][j]).sum::<f64>() / k;
                let v = elite_idx.iter().map(|&i| (population[i][j] - m).powi(2)).sum::<f64>() / k;
                mean[j] = m;
                std[j] = (v + extra).sqrt().max(config.std_floor);
            }
        }
    }
    finalists.push(mean);
    let seeds = episode_seeds(&mut rng, config.selection_episodes);
    let rescored: Vec<Result<(f64, u64), EnvError>> = finalists
        .par_iter()
        .map(|params| {
            let policy = make_policy(params.clone()).expect("parameter count fixed");
            let mut env = make_env();
            let mut total = 0.0;
            for &s in &seeds {
                total += run_episode(&mut env, &policy, s, horizon)?.0;
            }
            let score = total / seeds.len() as f64;
            Ok((
                if score.is_finite() { score } else { f64::NEG_INFINITY },
                env.total_steps(),
            ))
        })
        .collect();
    let mut chosen = finalists.len() - 1;
    let mut chosen_score = f64::NEG_INFINITY;
    for (i, r) in rescored.into_iter().enumerate() {
        let (score, s) = r?;
        steps += s;
        if score > chosen_score {
            chosen_score = score;
            chosen = i;
        }
    }
    let best_return = best.map_or(f64::NEG_INFINITY, |b| b.0);
    Ok(TrainOutcome {
        policy: make_policy(finalists.swap_remove(chosen))?,
        best_return,
        selection_return: chosen_score,
        curve,
        env_steps: steps,
        surrogate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub env: Benchmark,
    pub episodes: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub successes: usize,
    pub success_rate: f64,
    pub returns: Vec<f64>,
    pub steps: u64,
}

/// Plays `n_episodes` full episodes with seeds drawn from `seed`.
pub fn evaluate_policy(
    env: &mut dyn Environment,
    policy: &dyn Controller,
    n_episodes: usize,
    seed: u64,
) -> Result<PolicyEval, EnvError> {
    let n = n_episodes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = env.spec().max_episode_steps;
    let mut returns = Vec::with_capacity(n);
    let mut successes = 0;
    let mut steps = 0u64;
    for s in episode_seeds(&mut rng, n) {
        let (ret, len, ok) = run_episode(env, policy, s, horizon)?;
        returns.push(ret);
        successes += usize::from(ok);
        steps += len as u64;
    }
    Ok(PolicyEval {
        env: env.benchmark(),
        episodes: n,
        seed,
        mean_return: returns.iter().sum::<f64>() / n as f64,
        successes,
        success_rate: successes as f64 / n as f64,
        returns,
        steps,
    })
}

/// Rectangular grid over two state dimensions, other dimensions fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub x_dim: usize,
    pub y_dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub base_state: Vec<f64>,
}

impl StateGrid {
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        }
    }

    /// Grid spanning the environment's bounds on the two dimensions.
    pub fn over_bounds(env: Benchmark, x_dim: usize, y_dim: usize, resolution: usize, base_state: Vec<f64>) -> Self {
        let spec = env.spec();
        Self {
            x_dim,
            y_dim,
            xs: Self::linspace(spec.lower[x_dim], spec.upper[x_dim], resolution),
            ys: Self::linspace(spec.lower[y_dim], spec.upper[y_dim], resolution),
            base_state,
        }
    }

    pub fn state_at(&self, ix: usize, iy: usize) -> Vec<f64> {
        let mut s = self.base_state.clone();
        s[self.x_dim] = self.xs[ix];
        s[self.y_dim] = self.ys[iy];
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMap {
    pub x_name: String,
    pub y_name: String,
    pub grid: StateGrid,
    /// `values[iy][ix]`: continuous action value or discrete action index.
    pub values: Vec<Vec<f64>>,
}

fn action_value(a: Action) -> f64 {
    match a {
        Action::Continuous(v) => v,
        Action::Discrete(i) => i as f64,
    }
}

pub fn policy_action_map(env: Benchmark, policy: &dyn Controller, grid: &StateGrid) -> ActionMap {
    let spec = env.spec();
    let values = (0..grid.ys.len())
        .map(|iy| {
            (0..grid.xs.len())
                .map(|ix| action_value(policy.act(&grid.state_at(ix, iy))))
                .collect()
        })
        .collect();
    ActionMap {
        x_name: spec.state_names[grid.x_dim].clone(),
        y_name: spec.state_names[grid.y_dim].clone(),
        grid: grid.clone(),
        values,
    }
}

impl ActionMap {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([self.x_name.as_str(), self.y_name.as_str(), "action"])
            .expect("in-memory write");
        for (iy, row) in self.values.iter().enumerate() {
            for (ix, v) in row.iter().enumerate() {
                w.write_record([
                    io::fmt_f64(self.grid.xs[ix]),
                    io::fmt_f64(self.grid.ys[iy]),
                    io::fmt_f64(*v),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Fraction of cells, optionally restricted by `mask[iy][ix]`, where the
    /// two maps pick the same action. Continuous actions agree when they push
    /// in the same direction.
    pub fn agreement(&self, other: &ActionMap, discrete: bool, mask: Option<&[Vec<bool>]>) -> f64 {
        let mut total = 0usize;
        let mut same = 0usize;
        for (iy, (ra, rb)) in self.values.iter().zip(&other.values).enumerate() {
            for (ix, (a, b)) in ra.iter().zip(rb).enumerate() {
                if mask.is_some_and(|m| !m[iy][ix]) {
                    continue;
                }
                total += 1;
                let agree = if discrete { a == b } else { a.signum() == b.signum() };
                same += usize::from(agree);
            }
        }
        if total == 0 {
            return 1.0;
        }
        same as f64 / total as f64
    }
}

/// Marks grid cells that contain at least one of `states`.
pub fn visited_mask(grid: &StateGrid, states: &[Vec<f64>]) -> Vec<Vec<bool>> {
    let cell = |vals: &[f64], v: f64| -> Option<usize> {
        if vals.len() < 2 {
            return Some(0);
        }
        let (lo, hi) = (vals[0], vals[vals.len() - 1]);
        if v < lo || v > hi {
            return None;
        }
        let step = (hi - lo) / (vals.len() - 1) as f64;
        Some((((v - lo) / step).round() as usize).min(vals.len() - 1))
    };
    let mut mask = vec![vec![false; grid.xs.len()]; grid.ys.len()];
    for s in states {
        if let (Some(ix), Some(iy)) = (cell(&grid.xs, s[grid.x_dim]), cell(&grid.ys, s[grid.y_dim])) {
            mask[iy][ix] = true;
        }
    }
    mask
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "iteration",
        "mean_return",
        "max_return",
        "elite_mean_return",
        "best_return",
        "cumulative_steps",
    ])
    .expect("in-memory write");
    for p in curve {
        w.write_record([
            p.iteration.to_string(),
            io::fmt_f64(p.mean_return),
            io::fmt_f64(p.max_return),
            io::fmt_f64(p.elite_mean_return),
            io::fmt_f64(p.best_return),
            p.cumulative_steps.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::ScriptedExpert;
    use crate::envs::{lunar_lander, RealEnv};
    use crate::surrogate::{RandomPolicy, SurrogateEnv};

    fn unit_policy(env: Benchmark, params: Vec<f64>) -> Policy {
        let d = env.spec().state_dim();
        Policy::new(env, vec![0.0; d], vec![1.0; d], params).unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Policy::param_count(Benchmark::MountainCar), 3);
        assert_eq!(Policy::param_count(Benchmark::LunarLander), 28);
    }

    #[test]
    fn tanh_head_stays_in_interval() {
        let p = unit_policy(Benchmark::MountainCar, vec![1e6, -1e6, 3.0]);
        for s in [[-1.2, -0.07], [0.6, 0.07], [0.0, 0.0]] {
            let Action::Continuous(a) = p.act(&s) else { panic!() };
            assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let p = unit_policy(Benchmark::LunarLander, vec![0.0; 28]);
        assert_eq!(p.act(&[0.0; 6]), Action::Discrete(0));
        let mut params = vec![0.0; 28];
        params[13] = 1.0;
        params[27] = 1.0;
        let p = unit_policy(Benchmark::LunarLander, params);
        assert_eq!(p.act(&[0.0; 6]), Action::Discrete(1));
    }

    #[test]
    fn expert_solves_mountain_car_every_time() {
        let mut env = RealEnv::new(Benchmark::MountainCar);
        let eval = evaluate_policy(&mut env, &ScriptedExpert(Benchmark::MountainCar), 100, 0).unwrap();
        assert_eq!(eval.successes, 100);
        let again = evaluate_policy(&mut env, &ScriptedExpert(Benchmark::MountainCar), 100, 0).unwrap();
        assert_eq!(eval, again);
    }

    #[test]
    fn random_lander_rarely_lands() {
        let mut env = RealEnv::new(Benchmark::LunarLander);
        let eval = evaluate_policy(&mut env, &RandomPolicy::new(Benchmark::LunarLander, 0), 100, 0).unwrap();
        assert!(eval.successes <= 10);
    }

    #[test]
    fn zero_iterations_returns_best_initial_candidate() {
        let config = CemConfig {
            iterations: 0,
            population: 8,
            episodes_per_candidate: 1,
            horizon: Some(50),
            ..CemConfig::default()
        };
        let out = train(|| RealEnv::new(Benchmark::MountainCar), &config).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.best_return, out.curve[0].max_return);
        assert!(out.selection_return.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let config = CemConfig {
            iterations: 3,
            population: 16,
            horizon: Some(200),
            ..CemConfig::default()
        };
        let a = train(|| RealEnv::new(Benchmark::MountainCar), &config).unwrap();
        let b = train(|| RealEnv::new(Benchmark::MountainCar), &config).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn surrogate_training_reports_no_real_steps() {
        let model = std::sync::Arc::new(crate::sindy::mountain_car_reference_model());
        let config = CemConfig {
            iterations: 1,
            population: 8,
            horizon: Some(100),
            ..CemConfig::default()
        };
        let out = train(
            || SurrogateEnv::new(model.clone(), Benchmark::MountainCar).unwrap(),
            &config,
        )
        .unwrap();
        assert!(out.surrogate);
        assert!(out.env_steps > 0);
    }

    #[test]
    fn expert_action_map_switches_at_zero_velocity() {
        let grid = StateGrid::over_bounds(Benchmark::MountainCar, 0, 1, 15, vec![0.0, 0.0]);
        let map = policy_action_map(Benchmark::MountainCar, &ScriptedExpert(Benchmark::MountainCar), &grid);
        for (iy, row) in map.values.iter().enumerate() {
            let expected = if grid.ys[iy] >= 0.0 { 1.0 } else { -1.0 };
            assert!(row.iter().all(|&a| a == expected));
        }
        let constant = |_: &[f64]| Action::Discrete(lunar_lander::MAIN);
        let lgrid = StateGrid::over_bounds(Benchmark::LunarLander, 0, 1, 5, vec![0.0; 6]);
        let lmap = policy_action_map(Benchmark::LunarLander, &constant, &lgrid);
        assert!(lmap.values.iter().flatten().all(|&a| a == 2.0));
        assert_eq!(map.agreement(&map, false, None), 1.0);
    }

    #[test]
    fn policy_file_round_trip() {
        let p = unit_policy(Benchmark::LunarLander, (0..28).map(|i| i as f64 * 0.1).collect());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(Policy::load(&path).unwrap(), p);
    }
}
