//! A fitted model standing in for the simulator.
//!
//! Transitions come from the model; reset, bounds, reward and termination
//! come from the base environment.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, Benchmark, Controller, EnvError, Environment, StepResult};
use crate::sindy::{SindyError, SindyModel};

/// Multiple of the bound range beyond which a state counts as diverged.
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    model: Arc<SindyModel>,
    benchmark: Benchmark,
    pub clip_to_bounds: bool,
    /// Per-dimension absolute limit; exceeding it truncates the episode.
    pub divergence_guard: Vec<f64>,
    state: Vec<f64>,
    episode_steps: usize,
    total_steps: u64,
}

impl SurrogateEnv {
    pub fn new(model: Arc<SindyModel>, benchmark: Benchmark) -> Result<Self, SindyError> {
        let spec = benchmark.spec();
        if model.state_dim() != spec.state_dim() || model.action_dim() != spec.action_dim() {
            return Err(SindyError::Dimension(format!(
                "model maps {} states and {} action inputs, {} has {} and {}",
                model.state_dim(),
                model.action_dim(),
                benchmark,
                spec.state_dim(),
                spec.action_dim()
            )));
        }
        if let Some(env) = model.env {
            if env != benchmark {
                return Err(SindyError::Dimension(format!(
                    "model was fitted on {env}, not {benchmark}"
                )));
            }
        }
        let divergence_guard = spec
            .lower
            .iter()
            .zip(&spec.upper)
            .map(|(lo, hi)| DEFAULT_DIVERGENCE_FACTOR * (hi - lo))
            .collect();
        Ok(Self {
            model,
            benchmark,
            clip_to_bounds: true,
            divergence_guard,
            state: benchmark.reset_state(0),
            episode_steps: 0,
            total_steps: 0,
        })
    }

    pub fn model(&self) -> &Arc<SindyModel> {
        &self.model
    }

    /// Model transition from an arbitrary state, without touching episode
    /// bookkeeping.
    pub fn transition(&self, state: &[f64], action: &Action) -> Result<StepResult, EnvError> {
        self.benchmark.validate_action(action)?;
        if state.len() != self.spec().state_dim() {
            return Err(EnvError::StateDimension {
                expected: self.spec().state_dim(),
                found: state.len(),
            });
        }
        let encoded = self.benchmark.encode_action(action);
        let proposed = match self.model.predict(state, &encoded) {
            Ok(p) => p,
            Err(SindyError::NonFinite { .. }) => {
                return Ok(StepResult {
                    next_state: state.to_vec(),
                    reward: 0.0,
                    terminated: false,
                    truncated: true,
                })
            }
            Err(e) => return Err(EnvError::InvalidState(e.to_string())),
        };
        let diverged = proposed
            .iter()
            .zip(&self.divergence_guard)
            .any(|(v, g)| !v.is_finite() || v.abs() > *g);
        if diverged {
            return Ok(StepResult {
                next_state: state.to_vec(),
                reward: 0.0,
                terminated: false,
                truncated: true,
            });
        }
        let next = if self.clip_to_bounds {
            self.benchmark.enforce_bounds(&proposed)
        } else {
            proposed
        };
        let (reward, terminated) = self.benchmark.outcome(state, action, &next);
        Ok(StepResult {
            next_state: next,
            reward,
            terminated,
            truncated: false,
        })
    }
}

impl Environment for SurrogateEnv {
    fn benchmark(&self) -> Benchmark {
        self.benchmark
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.state = self.benchmark.reset_state(seed);
        self.episode_steps = 0;
        self.state.clone()
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        let mut result = self.transition(&self.state, action)?;
        self.episode_steps += 1;
        self.total_steps += 1;
        if !result.terminated && self.episode_steps >= self.spec().max_episode_steps {
            result.truncated = true;
        }
        self.state.clone_from(&result.next_state);
        Ok(result)
    }

    fn total_steps(&self) -> u64 {
        self.total_steps
    }

    fn is_surrogate(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Runs one episode of at most `horizon` steps from the reset state drawn
/// under `seed`. Stops early when the environment ends the episode.
pub fn rollout(
    env: &mut dyn Environment,
    policy: &dyn Controller,
    horizon: usize,
    seed: u64,
) -> Result<Vec<TrajectoryStep>, EnvError> {
    let mut state = env.reset(seed);
    let mut out = Vec::with_capacity(horizon.min(4096));
    for _ in 0..horizon {
        let action = policy.act(&state);
        let r = env.step(&action)?;
        let done = r.done();
        out.push(TrajectoryStep {
            state: std::mem::replace(&mut state, r.next_state.clone()),
            action,
            reward: r.reward,
            next_state: r.next_state,
            done,
        });
        if done {
            break;
        }
    }
    Ok(out)
}

/// Uniform random policy driven by its own seeded generator.
pub struct RandomPolicy {
    benchmark: Benchmark,
    rng: std::sync::Mutex<ChaCha8Rng>,
}

impl RandomPolicy {
    pub fn new(benchmark: Benchmark, seed: u64) -> Self {
        Self {
            benchmark,
            rng: std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Controller for RandomPolicy {
    fn act(&self, _state: &[f64]) -> Action {
        let mut rng = self.rng.lock().expect("random policy lock");
        self.benchmark.random_action(&mut *rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::{collect, CollectConfig, ScriptedExpert};
    use crate::envs::RealEnv;
    use crate::features::{term_names, LibrarySpec, NormStats};
    use crate::sindy::{fit, mountain_car_reference_model, GridSearchSpec, TargetMode};
    use ndarray::Array2;
    use rand::Rng;

    fn exact_env() -> SurrogateEnv {
        SurrogateEnv::new(Arc::new(mountain_car_reference_model()), Benchmark::MountainCar).unwrap()
    }

    #[test]
    fn exact_model_matches_ground_truth() {
        let env = exact_env();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let s = vec![rng.random_range(-1.2..=0.6), rng.random_range(-0.07..=0.07)];
            let a = Action::Continuous(rng.random_range(-1.0..=1.0));
            let truth = Benchmark::MountainCar.step(&s, &a).unwrap();
            let got = env.transition(&s, &a).unwrap();
            for j in 0..2 {
                assert!((truth.next_state[j] - got.next_state[j]).abs() <= 1e-12);
            }
            assert_eq!(truth.terminated, got.terminated);
            assert!((truth.reward - got.reward).abs() <= 1e-12);
        }
    }

    #[test]
    fn rewards_are_reused_verbatim() {
        let env = exact_env();
        let s = [-0.5, 0.01];
        let a = Action::Continuous(0.4);
        let r = env.transition(&s, &a).unwrap();
        let (reward, term) = Benchmark::MountainCar.outcome(&s, &a, &r.next_state);
        assert_eq!((r.reward, r.terminated), (reward, term));
    }

    #[test]
    fn zero_model_truncates_at_max_steps() {
        let env = Benchmark::MountainCar;
        let names: Vec<String> = ["position", "velocity", "action"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let lib = LibrarySpec::polynomial(1).with_inputs(&names, 0);
        let p = term_names(&lib).len();
        let model = crate::sindy::SindyModel::new(
            names[..2].to_vec(),
            lib,
            Array2::zeros((p, 2)),
            NormStats::identity(3),
            TargetMode::DeltaState,
        )
        .unwrap();
        let mut sur = SurrogateEnv::new(Arc::new(model), env).unwrap();
        let start = sur.reset(3);
        let traj = rollout(&mut sur, &ScriptedExpert(env), 5000, 3).unwrap();
        assert_eq!(traj.len(), env.spec().max_episode_steps);
        assert!(traj.iter().all(|t| t.next_state == start));
        assert!(traj.last().unwrap().done);
    }

    #[test]
    fn exact_surrogate_rollout_pairs_with_real() {
        let mut sur = exact_env();
        let mut real = RealEnv::new(Benchmark::MountainCar);
        let expert = ScriptedExpert(Benchmark::MountainCar);
        let a = rollout(&mut sur, &expert, 999, 7).unwrap();
        let b = rollout(&mut real, &expert, 999, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            for j in 0..2 {
                assert!((x.next_state[j] - y.next_state[j]).abs() <= 1e-9);
            }
            assert_eq!(x.done, y.done);
        }
        assert_eq!(real.total_steps(), b.len() as u64);
    }

    #[test]
    fn horizon_one_and_determinism() {
        let mut sur = exact_env();
        let expert = ScriptedExpert(Benchmark::MountainCar);
        assert_eq!(rollout(&mut sur, &expert, 1, 0).unwrap().len(), 1);
        let a = rollout(&mut sur, &expert, 200, 4).unwrap();
        let b = rollout(&mut sur, &expert, 200, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitted_model_tracks_expert_rollout() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::MountainCar)).unwrap();
        let model = fit(&data, &GridSearchSpec::default(), 2).unwrap();
        let mut sur = SurrogateEnv::new(Arc::new(model), Benchmark::MountainCar).unwrap();
        let mut real = RealEnv::new(Benchmark::MountainCar);
        let expert = ScriptedExpert(Benchmark::MountainCar);
        let a = rollout(&mut sur, &expert, 50, 12).unwrap();
        let b = rollout(&mut real, &expert, 50, 12).unwrap();
        let n = a.len().min(b.len());
        let se: f64 = (0..n).map(|i| (a[i].next_state[0] - b[i].next_state[0]).powi(2)).sum();
        assert!((se / n as f64).sqrt() <= 1e-2);
    }

    #[test]
    fn clipped_states_stay_in_bounds() {
        let data = collect(&CollectConfig::defaults_for(Benchmark::LunarLander)).unwrap();
        let grid = GridSearchSpec {
            libraries: vec![LibrarySpec::polynomial(1)],
            ..GridSearchSpec::default()
        };
        let model = fit(&data, &grid, 0).unwrap();
        let mut sur = SurrogateEnv::new(Arc::new(model), Benchmark::LunarLander).unwrap();
        let spec = Benchmark::LunarLander.spec();
        let policy = RandomPolicy::new(Benchmark::LunarLander, 1);
        for seed in 0..20 {
            for t in rollout(&mut sur, &policy, 500, seed).unwrap() {
                assert!(spec.in_bounds(&t.next_state));
            }
        }
        assert!(sur.total_steps() > 0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = Arc::new(mountain_car_reference_model());
        assert!(matches!(
            SurrogateEnv::new(model, Benchmark::LunarLander),
            Err(SindyError::Dimension(_))
        ));
    }
}
