//! ε-greedy data collection from an expert controller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{lunar_lander, Action, Benchmark, Controller, EnvError};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("invalid collection config: {0}")]
    InvalidConfig(String),
    #[error("collected only {collected} of {target} transitions within {episodes} episodes; raise max_episodes")]
    Unreachable {
        collected: usize,
        target: usize,
        episodes: usize,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Scripted Mountain Car expert: push in the direction of motion.
pub fn expert_mc(state: &[f64]) -> f64 {
    if state[1] >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Descent-rate target for the lander expert.
pub fn lander_target_vertical_speed(y: f64) -> f64 {
    -0.1 - 0.4 * y.max(0.0)
}

/// Attitude the lander expert steers towards, leaning against horizontal
/// offset and drift.
pub fn lander_target_angle(x: f64, vx: f64) -> f64 {
    (0.5 * x + 1.0 * vx).clamp(-0.3, 0.3)
}

/// Scripted lander expert: main engine whenever descending faster than the
/// target rate, otherwise side engines to track the target attitude.
pub fn expert_ll(state: &[f64]) -> usize {
    let (x, y, vx, vy, angle, omega) = (state[0], state[1], state[2], state[3], state[4], state[5]);
    if vy < lander_target_vertical_speed(y) {
        return lunar_lander::MAIN;
    }
    let error = lander_target_angle(x, vx) - angle - 0.3 * omega;
    if error > 0.05 {
        lunar_lander::RIGHT
    } else if error < -0.05 {
        lunar_lander::LEFT
    } else {
        lunar_lander::NOOP
    }
}

/// The built-in expert for a benchmark.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedExpert(pub Benchmark);

impl Controller for ScriptedExpert {
    fn act(&self, state: &[f64]) -> Action {
        match self.0 {
            Benchmark::MountainCar => Action::Continuous(expert_mc(state)),
            Benchmark::LunarLander => Action::Discrete(expert_ll(state)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub env: Benchmark,
    /// `"scripted"` or a path to a saved policy file.
    pub expert: String,
    pub epsilon: f64,
    pub n_transitions: usize,
    pub max_episodes: usize,
    pub max_timesteps: usize,
    pub seed: u64,
}

impl CollectConfig {
    pub fn defaults_for(env: Benchmark) -> Self {
        let n_transitions = match env {
            Benchmark::MountainCar => 75,
            Benchmark::LunarLander => 1000,
        };
        Self {
            env,
            expert: "scripted".into(),
            epsilon: 0.2,
            n_transitions,
            max_episodes: 50,
            max_timesteps: env.spec().max_episode_steps,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CollectError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(CollectError::InvalidConfig(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.n_transitions == 0 || self.max_episodes == 0 || self.max_timesteps == 0 {
            return Err(CollectError::InvalidConfig(
                "n_transitions, max_episodes and max_timesteps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One recorded `(s, a, s', r, done)` tuple; the action is stored encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Episode boundary: terminated or truncated.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: Benchmark,
    pub seed: u64,
    pub epsilon: f64,
    pub expert: String,
    pub episodes_used: usize,
    pub random_actions: usize,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Column labels: state names followed by encoded-action names.
    pub fn input_names(&self) -> Vec<String> {
        let spec = self.env.spec();
        spec.state_names.iter().chain(&spec.action_names).cloned().collect()
    }

    /// Contiguous runs of transitions belonging to one episode, as index
    /// ranges. A run ends at a `done` transition or where the stored next
    /// state does not continue into the following transition.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            let last = i + 1 == self.transitions.len();
            let breaks = t.done || last || self.transitions[i + 1].state != t.next_state;
            if breaks {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        out
    }
}

/// ε-greedy choice between an expert and the uniform random action.
pub struct EpsilonGreedy<'a> {
    pub env: Benchmark,
    pub expert: &'a dyn Controller,
    pub epsilon: f64,
}

impl EpsilonGreedy<'_> {
    /// Returns the action and whether it came from the random arm.
    pub fn choose<R: Rng>(&self, rng: &mut R, state: &[f64]) -> (Action, bool) {
        if rng.random::<f64>() < self.epsilon {
            (self.env.random_action(rng), true)
        } else {
            (self.expert.act(state), false)
        }
    }
}

/// Collects with the built-in scripted expert.
pub fn collect(config: &CollectConfig) -> Result<Dataset, CollectError> {
    let expert = ScriptedExpert(config.env);
    collect_with(config, &expert)
}

/// Runs ε-greedy episodes with `expert` until `n_transitions` are stored.
pub fn collect_with(config: &CollectConfig, expert: &dyn Controller) -> Result<Dataset, CollectError> {
    config.validate()?;
    let env = config.env;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chooser = EpsilonGreedy {
        env,
        expert,
        epsilon: config.epsilon,
    };
    let mut transitions = Vec::with_capacity(config.n_transitions);
    let mut random_actions = 0;
    let mut episodes = 0;
    while transitions.len() < config.n_transitions {
        if episodes == config.max_episodes {
            return Err(CollectError::Unreachable {
                collected: transitions.len(),
                target: config.n_transitions,
                episodes,
            });
        }
        episodes += 1;
        let mut state = env.sample_initial_state(&mut rng);
        for t in 0..config.max_timesteps {
            let (action, random) = chooser.choose(&mut rng, &state);
            random_actions += usize::from(random);
            let step = env.step(&state, &action)?;
            let done = step.terminated || t + 1 == config.max_timesteps;
            transitions.push(Transition {
                state: state.clone(),
                action: env.encode_action(&action),
                next_state: step.next_state.clone(),
                reward: step.reward,
                done,
            });
            state = step.next_state;
            if done || transitions.len() == config.n_transitions {
                break;
            }
        }
    }
    Ok(Dataset {
        env,
        seed: config.seed,
        epsilon: config.epsilon,
        expert: config.expert.clone(),
        episodes_used: episodes,
        random_actions,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_rules() {
        assert_eq!(expert_mc(&[-0.5, -0.01]), -1.0);
        assert_eq!(expert_mc(&[-0.5, 0.0]), 1.0);
        assert_eq!(lander_target_vertical_speed(1.0), -0.5);
        assert_eq!(expert_ll(&[0.0, 1.0, 0.0, -2.0, 0.0, 0.0]), lunar_lander::MAIN);
    }

    #[test]
    fn greedy_collection_follows_expert() {
        for env in [Benchmark::MountainCar, Benchmark::LunarLander] {
            let mut cfg = CollectConfig::defaults_for(env);
            cfg.epsilon = 0.0;
            let data = collect(&cfg).unwrap();
            assert_eq!(data.random_actions, 0);
            for t in &data.transitions {
                let expected = env.encode_action(&ScriptedExpert(env).act(&t.state));
                assert_eq!(t.action, expected);
            }
        }
    }

    #[test]
    fn stored_transitions_are_ground_truth() {
        let cfg = CollectConfig::defaults_for(Benchmark::LunarLander);
        let data = collect(&cfg).unwrap();
        assert_eq!(data.len(), 1000);
        assert!(data.episodes_used > 1);
        for t in &data.transitions {
            let a = data.env.decode_action(&t.action).unwrap();
            let r = data.env.step(&t.state, &a).unwrap();
            assert_eq!(r.next_state, t.next_state);
            assert_eq!(r.reward, t.reward);
            assert!(data.env.spec().in_bounds(&t.next_state));
        }
    }

    #[test]
    fn collection_is_seeded() {
        let cfg = CollectConfig::defaults_for(Benchmark::MountainCar);
        assert_eq!(collect(&cfg).unwrap(), collect(&cfg).unwrap());
        let other = CollectConfig { seed: 1, ..cfg.clone() };
        assert_ne!(collect(&cfg).unwrap(), collect(&other).unwrap());
    }

    #[test]
    fn mountain_car_dataset_spans_valley_and_slope() {
        for seed in 0..10 {
            let cfg = CollectConfig {
                seed,
                ..CollectConfig::defaults_for(Benchmark::MountainCar)
            };
            let data = collect(&cfg).unwrap();
            assert_eq!(data.len(), 75);
            let (lo, hi) = data.transitions.iter().fold((f64::MAX, f64::MIN), |(lo, hi), t| {
                (lo.min(t.state[0]), hi.max(t.state[0]))
            });
            assert!(hi - lo >= 0.5, "seed {seed}: width {}", hi - lo);
        }
    }

    #[test]
    fn epsilon_mixture_fraction() {
        let expert = ScriptedExpert(Benchmark::LunarLander);
        let chooser = EpsilonGreedy {
            env: Benchmark::LunarLander,
            expert: &expert,
            epsilon: 0.2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = Benchmark::LunarLander.reset_state(0);
        let random = (0..10_000).filter(|_| chooser.choose(&mut rng, &state).1).count();
        let frac = random as f64 / 10_000.0;
        assert!((frac - 0.2).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn fully_random_arm_is_uniform() {
        let expert = ScriptedExpert(Benchmark::LunarLander);
        let chooser = EpsilonGreedy {
            env: Benchmark::LunarLander,
            expert: &expert,
            epsilon: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = Benchmark::LunarLander.reset_state(0);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            match chooser.choose(&mut rng, &state).0 {
                Action::Discrete(i) => counts[i] += 1,
                other => panic!("{other:?}"),
            }
        }
        // χ² with 3 degrees of freedom, 0.001 critical value 16.27
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        assert!(chi2 < 16.27, "{counts:?} χ²={chi2}");

        let mc_expert = ScriptedExpert(Benchmark::MountainCar);
        let chooser = EpsilonGreedy {
            env: Benchmark::MountainCar,
            expert: &mc_expert,
            epsilon: 1.0,
        };
        let mut bins = [0usize; 10];
        for _ in 0..10_000 {
            match chooser.choose(&mut rng, &[-0.5, 0.0]).0 {
                Action::Continuous(a) => bins[(((a + 1.0) / 0.2) as usize).min(9)] += 1,
                other => panic!("{other:?}"),
            }
        }
        // 9 degrees of freedom, 0.001 critical value 27.88
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(chi2 < 27.88, "{bins:?} χ²={chi2}");
    }

    #[test]
    fn unreachable_target_reports_count() {
        let cfg = CollectConfig {
            n_transitions: 10_000,
            max_episodes: 2,
            ..CollectConfig::defaults_for(Benchmark::MountainCar)
        };
        match collect(&cfg) {
            Err(CollectError::Unreachable {
                collected,
                target,
                episodes,
            }) => {
                assert!(collected > 0 && collected < target);
                assert_eq!(episodes, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn episodes_split_on_done() {
        let cfg = CollectConfig::defaults_for(Benchmark::LunarLander);
        let data = collect(&cfg).unwrap();
        let eps = data.episodes();
        assert_eq!(eps.len(), data.episodes_used);
        assert_eq!(eps.iter().map(|r| r.len()).sum::<usize>(), data.len());
    }
}
