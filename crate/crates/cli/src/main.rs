use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sindy_surrogate::pipeline::{self, ErrorClass, PipelineConfig, PipelineError, StageError};
use sindy_surrogate::{Benchmark, TargetMode};

/// Sparse dynamics models as training environments for reinforcement learning.
///
/// Log verbosity is read from SINDY_RL_LOG (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "sindy-rl", version)]
struct Cli {
    /// Pipeline config file (TOML). Without it, defaults for --env are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Environment name (mountain_car or lunar_lander); overrides the config.
    #[arg(long, global = true)]
    env: Option<Benchmark>,
    /// Global seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; defaults to the config's out_dir or runs/<env>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect transitions from the expert with epsilon-random actions.
    Collect(CollectArgs),
    /// Fit a sparse model by grid search over library, threshold and ridge.
    Fit(FitArgs),
    /// Train a policy in the surrogate, or in the real environment with --real.
    Train(TrainArgs),
    /// Score model fidelity and evaluate the trained policy in the real environment.
    Eval(EvalArgs),
    /// Refit the dataset with each library candidate and compare errors.
    Ablate(AblateArgs),
    /// Compare the surrogate-trained policy with the real-trained baseline.
    Compare,
    /// Run every stage in order and write a manifest of artifact hashes.
    Pipeline,
    /// Print the resolved config as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
struct CollectArgs {
    /// Number of transitions to record.
    #[arg(long)]
    n_transitions: Option<usize>,
    /// Probability of replacing the expert action with a random one.
    #[arg(long)]
    epsilon: Option<f64>,
    /// "scripted" or a saved policy file.
    #[arg(long)]
    expert: Option<String>,
    /// Episode budget before giving up.
    #[arg(long)]
    max_episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Dataset CSV; defaults to <out>/dataset.csv.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Sparsity thresholds to search (comma separated).
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Ridge penalties to search (comma separated).
    #[arg(long, value_delimiter = ',')]
    ridges: Option<Vec<f64>>,
    /// Regression target: delta_state or next_state.
    #[arg(long, value_parser = parse_target)]
    target: Option<TargetMode>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Model file; defaults to <out>/model.json.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Train in the real environment and write the baseline artifacts.
    #[arg(long)]
    real: bool,
    /// CEM refit iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Candidates per generation.
    #[arg(long)]
    population: Option<usize>,
    /// Episode length cap during training.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model file; defaults to <out>/model.json.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset CSV; defaults to <out>/dataset.csv.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Policy file; defaults to <out>/policy.json when present.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Evaluate the real-trained baseline policy instead.
    #[arg(long)]
    baseline: bool,
    /// Real-environment evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// K-step horizons (comma separated).
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset CSV; defaults to <out>/dataset.csv.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn parse_target(s: &str) -> Result<TargetMode, String> {
    match s {
        "delta_state" => Ok(TargetMode::DeltaState),
        "next_state" => Ok(TargetMode::NextState),
        _ => Err(format!("unknown target '{s}' (expected delta_state or next_state)")),
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Other => 1,
        ErrorClass::Config => 2,
        ErrorClass::MissingInput => 3,
        ErrorClass::Schema => 4,
        ErrorClass::Version => 5,
        ErrorClass::Dimension => 6,
        ErrorClass::Data => 7,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Other => "other",
        ErrorClass::Config => "config",
        ErrorClass::MissingInput => "missing-input",
        ErrorClass::Schema => "schema",
        ErrorClass::Version => "version",
        ErrorClass::Dimension => "dimension",
        ErrorClass::Data => "data",
    }
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match (&cli.config, cli.env) {
        (Some(path), _) => PipelineConfig::load(path).map_err(|source| PipelineError {
            stage: "config",
            source,
        })?,
        (None, Some(env)) => PipelineConfig::defaults_for(env),
        (None, None) => {
            return Err(PipelineError {
                stage: "config",
                source: StageError::Config("either --config or --env is required".into()),
            })
        }
    };
    if let Some(env) = cli.env {
        config.env = env;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli, config: &PipelineConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(config.env.to_string()))
}

fn or_default(arg: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    arg.clone().unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = resolve_config(&cli)?;
    let out = out_dir(&cli, &config);
    let stage = |name: &'static str| move |source: StageError| PipelineError { stage: name, source };
    match &cli.command {
        Command::Collect(a) => {
            if let Some(n) = a.n_transitions {
                config.collect.n_transitions = Some(n);
            }
            if let Some(e) = a.epsilon {
                config.collect.epsilon = e;
            }
            if let Some(e) = &a.expert {
                config.collect.expert.clone_from(e);
            }
            if let Some(m) = a.max_episodes {
                config.collect.max_episodes = m;
            }
            let collect = config.collect_config();
            collect.validate().map_err(StageError::from).map_err(stage("collect"))?;
            let data = pipeline::stage_collect(&collect, &out).map_err(stage("collect"))?;
            println!(
                "collected {} transitions ({} episodes) -> {}",
                data.len(),
                data.episodes_used,
                out.join(pipeline::DATASET_FILE).display()
            );
        }
        Command::Fit(a) => {
            if let Some(t) = &a.thresholds {
                config.fit.thresholds.clone_from(t);
            }
            if let Some(r) = &a.ridges {
                config.fit.ridges.clone_from(r);
            }
            if let Some(t) = a.target {
                config.fit.target_mode = t;
            }
            let dataset = or_default(&a.dataset, &out, pipeline::DATASET_FILE);
            let model = pipeline::stage_fit(&dataset, &config.fit, config.fit_seed(), &out).map_err(stage("fit"))?;
            print!("{}", model.print_equations());
        }
        Command::Train(a) => {
            if let Some(i) = a.iterations {
                config.train.iterations = i;
            }
            if let Some(p) = a.population {
                config.train.population = p;
            }
            if a.horizon.is_some() {
                config.train.horizon = a.horizon;
            }
            let (summary, name) = if a.real {
                let (_, s) = pipeline::stage_train(
                    config.env,
                    None,
                    &config.baseline_config(),
                    &out,
                    (
                        pipeline::BASELINE_POLICY_FILE,
                        pipeline::BASELINE_CURVE_FILE,
                        pipeline::BASELINE_SUMMARY_FILE,
                    ),
                )
                .map_err(stage("baseline"))?;
                (s, pipeline::BASELINE_POLICY_FILE)
            } else {
                let model = or_default(&a.model, &out, pipeline::MODEL_FILE);
                let (_, s) = pipeline::stage_train(
                    config.env,
                    Some(&model),
                    &config.train_config(),
                    &out,
                    (
                        pipeline::POLICY_FILE,
                        pipeline::CURVE_FILE,
                        pipeline::TRAIN_SUMMARY_FILE,
                    ),
                )
                .map_err(stage("train"))?;
                (s, pipeline::POLICY_FILE)
            };
            println!(
                "trained policy -> {} (selection return {:.3}, {} env steps)",
                out.join(name).display(),
                summary.selection_return,
                summary.env_steps
            );
        }
        Command::Eval(a) => {
            if let Some(e) = a.episodes {
                config.eval.episodes = e;
            }
            if let Some(h) = &a.horizons {
                config.eval.horizons.clone_from(h);
            }
            if a.baseline {
                let policy = or_default(&a.policy, &out, pipeline::BASELINE_POLICY_FILE);
                let eval = pipeline::stage_eval_policy(
                    config.env,
                    &policy,
                    config.eval.episodes,
                    config.eval_seed(),
                    config.eval.action_map_resolution,
                    &out,
                    (pipeline::BASELINE_EVAL_FILE, pipeline::BASELINE_ACTION_MAP_FILE),
                )
                .map_err(stage("baseline"))?;
                println!(
                    "baseline: mean return {:.3}, success {}/{}",
                    eval.mean_return, eval.successes, eval.episodes
                );
                return Ok(());
            }
            let model = or_default(&a.model, &out, pipeline::MODEL_FILE);
            let dataset = or_default(&a.dataset, &out, pipeline::DATASET_FILE);
            let report =
                pipeline::stage_eval_model(&model, &dataset, &config.eval.horizons, &out).map_err(stage("eval"))?;
            print!("{}", report.to_csv());
            let policy = match &a.policy {
                Some(p) => Some(p.clone()),
                None => Some(out.join(pipeline::POLICY_FILE)).filter(|p| p.exists()),
            };
            if let Some(policy) = policy {
                let eval = pipeline::stage_eval_policy(
                    config.env,
                    &policy,
                    config.eval.episodes,
                    config.eval_seed(),
                    config.eval.action_map_resolution,
                    &out,
                    (pipeline::POLICY_EVAL_FILE, pipeline::ACTION_MAP_FILE),
                )
                .map_err(stage("eval"))?;
                println!(
                    "policy: mean return {:.3}, success {}/{}",
                    eval.mean_return, eval.successes, eval.episodes
                );
            }
        }
        Command::Ablate(a) => {
            let dataset = or_default(&a.dataset, &out, pipeline::DATASET_FILE);
            let report =
                pipeline::stage_ablate(&dataset, &config.ablate.libraries, &config.fit, config.fit_seed(), &out)
                    .map_err(stage("ablate"))?;
            print!("{}", report.to_csv());
        }
        Command::Compare => {
            let report = pipeline::stage_compare(&out, &out).map_err(stage("compare"))?;
            print!("{}", report.to_csv());
            println!(
                "return ratio {:.4}, interaction reduction {:.1}x",
                report.return_ratio, report.interaction_reduction
            );
        }
        Command::Pipeline => {
            let manifest = pipeline::run_pipeline(&config, &out)?;
            println!(
                "{} artifacts -> {}",
                manifest.artifacts.len(),
                out.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SINDY_RL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.source.class();
            eprintln!("error [{}] in stage '{}': {}", class_name(class), e.stage, e.source);
            ExitCode::from(exit_code(class))
        }
    }
}
