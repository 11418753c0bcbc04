//! Command-line entry points: `train`, `eval`, `cem-demo`, `verify` and
//! `replay`.
//!
//! Every command is deterministic under `--seed` and writes only inside its
//! output directory. Invalid configurations exit with code 2, runtime
//! failures with 1.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use crate::analysis::{verify_barrier, verify_blindness, verify_gradcheck, verify_variance, Verdict};
use crate::cem::{dynamic_cem_run, static_cem_run, CemIterStats, ContextDistribution};
use crate::core::cvar_of_samples;
use crate::envs::{
    maze::MazeStrategy, rollout, rollout_scripted, Env, GuardedMaze, MazeConfig, ServersConfig,
    ServersEnv,
};
use crate::logging::log_info;
use crate::policy::PolicyParams;
use crate::rng::{substream, STREAM_DEMO, STREAM_EVAL, STREAM_REPLAY};
use crate::train::{run_training, Algorithm, EnvId, TrainConfig};
use crate::{Error, Result};

const EXIT_OK: i32 = 0;
const EXIT_RUNTIME: i32 = 1;
const EXIT_CONFIG: i32 = 2;

#[derive(Parser)]
#[command(name = "cesor", about = "Risk-averse policy-gradient training harness", version)]
struct Cli {
    /// Cap on rollout worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a JSON config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint with greedy rollouts.
    Eval(EvalArgs),
    /// Run the cross-entropy sampler on a toy score function.
    CemDemo(CemDemoArgs),
    /// Run the built-in claim verifiers and emit JSON verdicts.
    Verify(VerifyArgs),
    /// Replay a scripted action sequence through an environment.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value config overrides (dot paths allowed, values parsed as JSON).
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Run directory (default runs/<env>_<algorithm>_seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Policy checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment to evaluate in.
    #[arg(long)]
    env: CliEnv,
    /// Optional training config supplying environment parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the per-episode CSV (stdout table only if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum CliEnv {
    Maze,
    Servers,
}

#[derive(Args)]
struct CemDemoArgs {
    /// Toy family: beta-toy (dynamic target), exponential or bernoulli
    /// (static target).
    #[arg(long, default_value = "beta-toy")]
    family: String,
    /// Static numeric target (static families only).
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    nu: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which verifier to run.
    #[arg(long, default_value = "all")]
    which: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Blindness Monte Carlo trials.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Blindness steps per trial.
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    /// Variance-reduction repeats.
    #[arg(long, default_value_t = 2000)]
    repeats: usize,
    /// Batch size for blindness/variance checks.
    #[arg(long, default_value_t = 400)]
    batch: usize,
    /// Observations per architecture for the gradient check.
    #[arg(long, default_value_t = 34)]
    samples: usize,
    /// Barrier property cases.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    /// Test fixture: corrupt the analytic gradient so gradcheck must fail.
    #[arg(long, hide = true, default_value_t = false)]
    inject_bug: bool,
    /// Verdict JSON output path (stdout always gets a copy).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    env: CliEnv,
    /// Action-sequence file, one action index per line.
    #[arg(long)]
    actions: PathBuf,
    /// Context vector as comma-separated numbers (sampled from the original
    /// distribution if omitted).
    #[arg(long)]
    context: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step CSV output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `std::env::args`, run, and return the process exit code.
pub fn run_from_args() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Some(workers) = cli.workers {
        // Ignore the error if a pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::CemDemo(args) => cmd_cem_demo(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run configuration file.
// ---------------------------------------------------------------------------

/// JSON run configuration: env and algorithm are required, everything else
/// falls back to the per-environment defaults. Unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    env: EnvId,
    algorithm: Algorithm,
    alpha: Option<f64>,
    nu: Option<f64>,
    beta_smooth: Option<f64>,
    rho: Option<f64>,
    n_batch: Option<usize>,
    m_steps: Option<usize>,
    learning_rate: Option<f64>,
    weight_clip: Option<(f64, f64)>,
    validate_every: Option<usize>,
    validation_episodes: Option<usize>,
    master_seed: Option<u64>,
    hidden_dims: Option<Vec<usize>>,
    maze: Option<MazeConfig>,
    /// Path to an external maze layout JSON (overrides `maze`).
    maze_layout_path: Option<PathBuf>,
    servers: Option<ServersConfig>,
    servers_curriculum_minutes: Option<Vec<usize>>,
}

impl RunConfigFile {
    fn resolve(self, config_dir: &Path) -> Result<TrainConfig> {
        let seed = self.master_seed.unwrap_or(0);
        let mut config = match self.env {
            EnvId::Maze => TrainConfig::maze_default(self.algorithm, seed),
            EnvId::Servers => TrainConfig::servers_default(self.algorithm, seed),
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    config.$field = v;
                }
            };
        }
        take!(alpha);
        take!(nu);
        take!(beta_smooth);
        take!(rho);
        take!(n_batch);
        take!(m_steps);
        take!(learning_rate);
        take!(weight_clip);
        take!(validate_every);
        take!(validation_episodes);
        take!(hidden_dims);
        take!(maze);
        take!(servers);
        take!(servers_curriculum_minutes);
        if let Some(path) = self.maze_layout_path {
            let full = if path.is_relative() {
                config_dir.join(path)
            } else {
                path
            };
            let text = fs::read_to_string(&full)?;
            config.maze = serde_json::from_str(&text)?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Apply a `key=value` override to the raw config JSON. Dot paths descend
/// into nested objects; values are parsed as JSON, falling back to strings.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let value: Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| Value::String(raw_value.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' does not address an object")))?;
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        node = map
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let text = fs::read_to_string(&args.config)?;
    let mut raw: Value = serde_json::from_str(&text)?;
    for spec in &args.overrides {
        apply_override(&mut raw, spec)?;
    }
    let file: RunConfigFile = serde_json::from_value(raw)?;
    let config_dir = args.config.parent().unwrap_or(Path::new("."));
    let mut config = file.resolve(config_dir)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let config = load_train_config(&args)?;
    let out_dir = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(
            format!(
                "runs/{:?}_{:?}_seed{}",
                config.env, config.algorithm, config.master_seed
            )
            .to_ascii_lowercase(),
        )
    });
    log_info!("training into {}", out_dir.display());
    let artifacts = run_training(&config, &out_dir)?;
    println!("run directory: {}", artifacts.out_dir.display());
    if let Some(last) = artifacts.validations.last() {
        println!(
            "final validation: mean {} cvar {} (best checkpoint from iteration {})",
            last.mean, last.cvar, artifacts.best_iteration
        );
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// Eval.
// ---------------------------------------------------------------------------

struct EvalOutcome {
    returns: Vec<f64>,
    strategies: Option<Vec<MazeStrategy>>,
}

fn eval_rollouts<E: Env>(
    env: &E,
    params: &PolicyParams,
    episodes: usize,
    seed: u64,
    classify: Option<&dyn Fn(&crate::core::Trajectory) -> MazeStrategy>,
) -> Result<EvalOutcome> {
    let phi0 = env.context_family();
    let mut returns = Vec::with_capacity(episodes);
    let mut strategies = classify.map(|_| Vec::with_capacity(episodes));
    for i in 0..episodes {
        let mut rng = substream(seed, &[STREAM_EVAL, i as u64]);
        let context = phi0.sample(&mut rng);
        let (trajectory, ret) = rollout(env, params, &context, params.spec.eval_temperature, &mut rng)?;
        returns.push(ret);
        if let (Some(list), Some(tag)) = (strategies.as_mut(), classify) {
            list.push(tag(&trajectory));
        }
    }
    Ok(EvalOutcome {
        returns,
        strategies,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let params = PolicyParams::load_checkpoint(&args.checkpoint)?;
    let (maze_config, servers_config) = eval_env_configs(&args)?;
    let outcome = match args.env {
        CliEnv::Maze => {
            let env = GuardedMaze::new(maze_config)?;
            check_shapes(&params, env.obs_dim(), env.n_actions())?;
            let tag = |t: &crate::core::Trajectory| env.classify(t);
            eval_rollouts(&env, &params, args.episodes, args.seed, Some(&tag))?
        }
        CliEnv::Servers => {
            let env = ServersEnv::new(servers_config)?;
            check_shapes(&params, env.obs_dim(), env.n_actions())?;
            eval_rollouts(&env, &params, args.episodes, args.seed, None)?
        }
    };

    let n = outcome.returns.len();
    let mean = outcome.returns.iter().sum::<f64>() / n as f64;
    let cvar = cvar_of_samples(&outcome.returns, args.alpha)?;
    println!("episodes,{n}");
    println!("mean,{mean}");
    println!("cvar_{},{cvar}", args.alpha);
    let mut sorted = outcome.returns.clone();
    sorted.sort_by(f64::total_cmp);
    for pct in 1..=100usize {
        let q = crate::core::empirical_quantile(&sorted, pct as f64 / 100.0)?;
        println!("q{pct:03},{q}");
    }
    if let Some(strategies) = &outcome.strategies {
        let count = |s: MazeStrategy| strategies.iter().filter(|&&x| x == s).count();
        println!("short,{}", count(MazeStrategy::Short));
        println!("long,{}", count(MazeStrategy::Long));
        println!("stay,{}", count(MazeStrategy::Stay));
    }

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let mut csv = String::from(match &outcome.strategies {
            Some(_) => "episode,ret,strategy\n",
            None => "episode,ret\n",
        });
        for (i, ret) in outcome.returns.iter().enumerate() {
            match &outcome.strategies {
                Some(s) => csv.push_str(&format!("{i},{ret},{:?}\n", s[i])),
                None => csv.push_str(&format!("{i},{ret}\n")),
            }
        }
        fs::write(dir.join("eval_returns.csv"), csv)?;
    }
    Ok(EXIT_OK)
}

fn eval_env_configs(args: &EvalArgs) -> Result<(MazeConfig, ServersConfig)> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        let file: RunConfigFile = serde_json::from_str(&text)?;
        let config = file.resolve(path.parent().unwrap_or(Path::new(".")))?;
        Ok((config.maze, config.servers))
    } else {
        Ok((MazeConfig::default(), ServersConfig::default()))
    }
}

fn check_shapes(params: &PolicyParams, obs_dim: usize, n_actions: usize) -> Result<()> {
    if params.spec.input_dim != obs_dim || params.spec.n_actions != n_actions {
        return Err(Error::Config(format!(
            "checkpoint is {}-in/{}-out but the environment needs {}-in/{}-out",
            params.spec.input_dim, params.spec.n_actions, obs_dim, n_actions
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CEM demo.
// ---------------------------------------------------------------------------

fn cem_rows_to_csv(rows: &[CemIterStats]) -> String {
    let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
    let phi_len = rows.first().map(|r| r.phi.len()).unwrap_or(0);
    let mut header = String::from("iteration");
    for i in 0..phi_len {
        header.push_str(&format!(",phi_{i}"));
    }
    header.push_str(",phi_mean,sample_mean,q,selected\n");
    let mut out = header;
    for row in rows {
        out.push_str(&row.iteration.to_string());
        for &v in &row.phi {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            fmt(row.phi_mean[0]),
            fmt(row.sample_mean),
            fmt(row.q),
            row.selected
        ));
    }
    out
}

fn cmd_cem_demo(args: CemDemoArgs) -> Result<i32> {
    let mut rng = substream(args.seed, &[STREAM_DEMO]);
    let rows = match args.family.as_str() {
        "beta-toy" => dynamic_cem_run(
            &ContextDistribution::BetaMeanParam { mean: 0.5 },
            |c| c[0],
            args.alpha,
            args.nu,
            args.beta,
            args.samples,
            args.iters,
            None,
            &mut rng,
        )?,
        "exponential" => {
            let target = args.target.ok_or_else(|| {
                Error::Config("static families need an explicit --target".into())
            })?;
            static_cem_run(
                &ContextDistribution::ExponentialMean { mean: 1.0 },
                |c| c[0],
                target,
                args.samples,
                args.beta,
                args.iters,
                None,
                &mut rng,
            )?
        }
        "bernoulli" => {
            let target = args.target.ok_or_else(|| {
                Error::Config("static families need an explicit --target".into())
            })?;
            static_cem_run(
                &ContextDistribution::Bernoulli { p: 0.5 },
                |c| c[0],
                target,
                args.samples,
                args.beta,
                args.iters,
                None,
                &mut rng,
            )?
        }
        other => {
            return Err(Error::Config(format!("unsupported family '{other}'")));
        }
    };
    let csv = cem_rows_to_csv(&rows);
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// Verify.
// ---------------------------------------------------------------------------

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let inject = if args.inject_bug { 0.05 } else { 0.0 };
    let mut verdicts: Vec<Verdict> = Vec::new();
    let which = args.which.as_str();
    if !matches!(which, "all" | "barrier" | "blindness" | "variance" | "gradcheck") {
        return Err(Error::Config(format!(
            "unknown verifier '{which}' (expected all|barrier|blindness|variance|gradcheck)"
        )));
    }
    if matches!(which, "all" | "gradcheck") {
        verdicts.extend(verify_gradcheck(args.seed, args.samples, inject)?);
    }
    if matches!(which, "all" | "barrier") {
        verdicts.push(verify_barrier(args.seed, args.cases)?);
    }
    if matches!(which, "all" | "blindness") {
        verdicts.push(verify_blindness(
            0.05, 0.25, args.batch, args.steps, args.trials, args.seed,
        )?);
    }
    if matches!(which, "all" | "variance") {
        verdicts.extend(verify_variance(
            &[0.05, 0.1, 0.2],
            args.batch,
            args.repeats,
            args.seed,
        )?);
    }
    let json = serde_json::to_string_pretty(&verdicts)?;
    println!("{json}");
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, &json)?;
    }
    Ok(if verdicts.iter().all(|v| v.pass) {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

// ---------------------------------------------------------------------------
// Replay.
// ---------------------------------------------------------------------------

fn parse_context(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad context component '{part}'")))
        })
        .collect()
}

fn cmd_replay(args: ReplayArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.actions)?;
    let script: Vec<usize> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad action line '{l}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(args.seed, &[STREAM_REPLAY]);

    let (trajectory, ret, strategy) = match args.env {
        CliEnv::Maze => {
            let env = GuardedMaze::new(MazeConfig::default())?;
            let context = match &args.context {
                Some(text) => parse_context(text)?,
                None => env.context_family().sample(&mut rng),
            };
            let (t, r) = rollout_scripted(&env, &script, &context, &mut rng)?;
            let strategy = Some(env.classify(&t));
            (t, r, strategy)
        }
        CliEnv::Servers => {
            let env = ServersEnv::new(ServersConfig::default())?;
            let context = match &args.context {
                Some(text) => parse_context(text)?,
                None => env.context_family().sample(&mut rng),
            };
            let (t, r) = rollout_scripted(&env, &script, &context, &mut rng)?;
            (t, r, None)
        }
    };

    let mut csv = String::from("t,action,reward\n");
    for (t, (action, reward)) in trajectory
        .actions
        .iter()
        .zip(&trajectory.rewards)
        .enumerate()
    {
        csv.push_str(&format!("{t},{action},{reward}\n"));
    }
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, &csv)?;
        }
        None => print!("{csv}"),
    }
    println!("return,{ret}");
    if let Some(s) = strategy {
        println!("strategy,{s:?}");
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_with_json_values_and_dot_paths() {
        let mut raw: Value = serde_json::from_str(
            r#"{"env": "maze", "algorithm": "CeSoR"}"#,
        )
        .unwrap();
        apply_override(&mut raw, "algorithm=\"GCVaR\"").unwrap();
        apply_override(&mut raw, "alpha=0.1").unwrap();
        apply_override(&mut raw, "maze.noise_sigma=0.3").unwrap();
        let file: RunConfigFile = serde_json::from_value(raw).unwrap();
        let config = file.resolve(Path::new(".")).unwrap();
        assert_eq!(config.algorithm, Algorithm::Gcvar);
        assert_eq!(config.alpha, 0.1);
        assert_eq!(config.maze.noise_sigma, 0.3);
        // Untouched maze fields keep their defaults.
        assert_eq!(config.maze.horizon, 160);
    }

    #[test]
    fn bare_string_override_works_for_enums() {
        let mut raw: Value =
            serde_json::from_str(r#"{"env": "maze", "algorithm": "CeSoR"}"#).unwrap();
        apply_override(&mut raw, "algorithm=GCVaR").unwrap();
        let file: RunConfigFile = serde_json::from_value(raw).unwrap();
        assert_eq!(file.algorithm, Algorithm::Gcvar);
    }

    #[test]
    fn unknown_keys_rejected() {
        let raw = r#"{"env": "maze", "algorithm": "PG", "bogus": 1}"#;
        assert!(serde_json::from_str::<RunConfigFile>(raw).is_err());
    }

    #[test]
    fn env_defaults_differ() {
        let maze: RunConfigFile =
            serde_json::from_str(r#"{"env": "maze", "algorithm": "CeSoR"}"#).unwrap();
        let maze = maze.resolve(Path::new(".")).unwrap();
        assert_eq!(maze.m_steps, 250);
        assert_eq!(maze.learning_rate, 0.1);
        assert!(maze.hidden_dims.is_empty());

        let servers: RunConfigFile =
            serde_json::from_str(r#"{"env": "servers", "algorithm": "CeSoR"}"#).unwrap();
        let servers = servers.resolve(Path::new(".")).unwrap();
        assert_eq!(servers.m_steps, 100);
        assert_eq!(servers.hidden_dims, vec![16]);
        assert_eq!(servers.nu, 0.5);
    }

    #[test]
    fn context_parsing() {
        assert_eq!(parse_context("1, 32.5").unwrap(), vec![1.0, 32.5]);
        assert!(parse_context("1, x").is_err());
    }
}
