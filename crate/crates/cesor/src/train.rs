//! The training loop: batch collection with reference/shifted context
//! mixing, the per-iteration CE sampler update, the soft-risk schedule, the
//! policy-gradient step, periodic greedy validation, checkpoint selection
//! and CSV run logging.
//!
//! Episodes within a batch run in parallel, each on an RNG substream derived
//! from `(master seed, iteration, episode index)` and merged in episode
//! order, so results are identical regardless of worker count.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cem::{ce_threshold, CeState, ContextDistribution};
use crate::core::{
    cvar_of_samples, floor_snapped, EpisodeRecord, EpisodeSource, ReturnBatch, Trajectory,
};
use crate::envs::{
    maze::MazeStrategy, rollout, Env, GuardedMaze, MazeConfig, ServersConfig, ServersEnv,
};
use crate::gradients::{adam_step, cvar_pg_gradient, mean_pg_gradient, AdamState};
use crate::logging::log_info;
use crate::policy::{PolicyParams, PolicySpec};
use crate::rng::{substream, STREAM_INIT, STREAM_TRAIN, STREAM_VALIDATION};
use crate::schedule::{soft_risk_level, RiskSchedule};
use crate::{Error, Result};

/// Training variants: risk-neutral, plain CVaR, and the soft-risk /
/// CE-sampling combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "PG")]
    Pg,
    #[serde(rename = "GCVaR")]
    Gcvar,
    #[serde(rename = "SoR")]
    Sor,
    #[serde(rename = "CeR")]
    Cer,
    #[serde(rename = "CeSoR")]
    Cesor,
}

impl Algorithm {
    pub fn uses_cem(self) -> bool {
        matches!(self, Algorithm::Cer | Algorithm::Cesor)
    }

    pub fn uses_soft_risk(self) -> bool {
        matches!(self, Algorithm::Sor | Algorithm::Cesor)
    }

    pub fn is_risk_neutral(self) -> bool {
        self == Algorithm::Pg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Maze,
    Servers,
}

/// Fully resolved experiment description; serialized verbatim into the run
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvId,
    pub algorithm: Algorithm,
    pub alpha: f64,
    /// Fraction of each batch drawn from the original context distribution.
    pub nu: f64,
    /// CE smoothing quantile.
    pub beta_smooth: f64,
    /// Fraction of training spent descending the soft risk level.
    pub rho: f64,
    /// Episodes per training step.
    pub n_batch: usize,
    /// Training steps.
    pub m_steps: usize,
    pub learning_rate: f64,
    pub weight_clip: (f64, f64),
    pub validate_every: usize,
    pub validation_episodes: usize,
    pub master_seed: u64,
    /// Hidden tanh layer widths; empty for a linear policy.
    pub hidden_dims: Vec<usize>,
    pub maze: MazeConfig,
    pub servers: ServersConfig,
    /// Episode lengths (minutes) of the servers curriculum phases; training
    /// is split equally across them. A single entry disables the curriculum.
    pub servers_curriculum_minutes: Vec<usize>,
}

impl TrainConfig {
    /// Maze defaults: linear policy over the 64-cell encoding.
    pub fn maze_default(algorithm: Algorithm, master_seed: u64) -> Self {
        Self {
            env: EnvId::Maze,
            algorithm,
            alpha: 0.05,
            nu: 0.2,
            beta_smooth: 0.2,
            rho: 0.8,
            n_batch: 400,
            m_steps: 250,
            learning_rate: 0.1,
            weight_clip: (0.2, 5.0),
            validate_every: 10,
            validation_episodes: 1000,
            master_seed,
            hidden_dims: vec![],
            maze: MazeConfig::default(),
            servers: ServersConfig::default(),
            servers_curriculum_minutes: vec![15, 30, 45, 60],
        }
    }

    /// Servers defaults: one hidden layer of 16, half the batch from the
    /// original distribution.
    pub fn servers_default(algorithm: Algorithm, master_seed: u64) -> Self {
        Self {
            env: EnvId::Servers,
            algorithm,
            alpha: 0.01,
            nu: 0.5,
            beta_smooth: 0.2,
            rho: 0.8,
            n_batch: 400,
            m_steps: 100,
            learning_rate: 0.03,
            weight_clip: (0.2, 5.0),
            validate_every: 10,
            validation_episodes: 1000,
            master_seed,
            hidden_dims: vec![16],
            maze: MazeConfig::default(),
            servers: ServersConfig::default(),
            servers_curriculum_minutes: vec![15, 30, 45, 60],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("nu must be in (0, 1], got {}", self.nu)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.n_batch == 0 {
            return Err(Error::Config("n_batch must be positive".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be positive".into()));
        }
        if self.weight_clip.0 <= 0.0 || self.weight_clip.0 > 1.0 || self.weight_clip.1 < 1.0 {
            return Err(Error::Config(format!(
                "weight_clip must satisfy 0 < low <= 1 <= high, got {:?}",
                self.weight_clip
            )));
        }
        if self.env == EnvId::Servers && self.servers_curriculum_minutes.is_empty() {
            return Err(Error::Config("servers curriculum must not be empty".into()));
        }
        Ok(())
    }
}

/// Strategy tallies for environments that classify episodes (the maze).
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StrategyCounts {
    pub n_short: usize,
    pub n_long: usize,
    pub n_stay: usize,
    /// Of the episodes the optimizer used (strictly below the baseline).
    pub short_used: usize,
    pub long_used: usize,
    pub stay_used: usize,
}

/// One row of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct IterRow {
    pub iteration: usize,
    pub alpha_prime: f64,
    /// CE selection threshold (only when the CE sampler is active).
    pub q_ce: Option<f64>,
    /// Baseline fed to the policy-gradient step.
    pub q_prime: f64,
    pub train_mean: f64,
    pub train_cvar: f64,
    pub used_count: usize,
    pub used_weight_fraction: f64,
    pub n_eff_used: f64,
    pub n_reference: usize,
    pub n_shifted: usize,
    pub empty_ce_selection: bool,
    pub phi: Vec<f64>,
    pub strategies: Option<StrategyCounts>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationRow {
    pub iteration: usize,
    pub mean: f64,
    pub cvar: f64,
}

/// Everything a finished run leaves behind, plus in-memory copies for
/// programmatic use.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub rows: Vec<IterRow>,
    pub validations: Vec<ValidationRow>,
    pub final_params: PolicyParams,
    pub best_params: PolicyParams,
    pub best_iteration: usize,
}

/// Collect one batch of episodes. With a CE sampler, `floor(nu * N)`
/// reference episodes precede the shifted remainder; without one, the whole
/// batch is reference. Returns the batch and per-episode score tensors.
pub fn collect_batch<E: Env>(
    env: &E,
    params: &PolicyParams,
    ce: Option<&CeState>,
    n_batch: usize,
    nu: f64,
    master_seed: u64,
    iteration: usize,
) -> Result<(ReturnBatch, Vec<PolicyParams>)> {
    if n_batch == 0 {
        return Err(Error::EmptyInput("collect_batch size"));
    }
    let phi0 = env.context_family();
    let n_reference = match ce {
        Some(_) => floor_snapped(nu * n_batch as f64).clamp(1, n_batch),
        None => n_batch,
    };
    let temperature = params.spec.train_temperature;
    let episodes: Vec<(EpisodeRecord, PolicyParams)> = (0..n_batch)
        .into_par_iter()
        .map(|i| -> Result<(EpisodeRecord, PolicyParams)> {
            let mut rng = substream(master_seed, &[STREAM_TRAIN, iteration as u64, i as u64]);
            let (context, weight, source) = if i < n_reference {
                (phi0.sample(&mut rng), 1.0, EpisodeSource::Reference)
            } else {
                let ce = ce.expect("shifted episodes only exist with a CE sampler");
                let context = ce.phi.sample(&mut rng);
                let weight =
                    crate::cem::importance_weight(&ce.phi0, &ce.phi, &context, ce.weight_clip)?;
                (context, weight, EpisodeSource::Shifted)
            };
            let (trajectory, ret) = rollout(env, params, &context, temperature, &mut rng)?;
            let score = crate::policy::trajectory_score(params, &trajectory)?;
            Ok((
                EpisodeRecord {
                    context,
                    trajectory,
                    ret,
                    weight,
                    source,
                },
                score,
            ))
        })
        .enumerate()
        .map(|(i, res)| res.map_err(|e| e.in_episode(i)))
        .collect::<Result<Vec<_>>>()?;
    let (records, scores): (Vec<_>, Vec<_>) = episodes.into_iter().unzip();
    Ok((ReturnBatch::new(records)?, scores))
}

/// Greedy validation under fresh original-distribution contexts on a
/// dedicated substream; returns (mean, CVaR at `alpha`, per-episode
/// returns).
pub fn validate<E: Env>(
    env: &E,
    params: &PolicyParams,
    n_episodes: usize,
    alpha: f64,
    master_seed: u64,
    iteration: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    let phi0 = env.context_family();
    let temperature = params.spec.eval_temperature;
    let returns: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng =
                substream(master_seed, &[STREAM_VALIDATION, iteration as u64, i as u64]);
            let context = phi0.sample(&mut rng);
            let (_, ret) = rollout(env, params, &context, temperature, &mut rng)?;
            Ok(ret)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let cvar = cvar_of_samples(&returns, alpha)?;
    Ok((mean, cvar, returns))
}

/// One full training iteration: collect, CE-update, schedule, gradient
/// step. Returns the log row.
#[allow(clippy::too_many_arguments)]
pub fn training_step<E: Env>(
    env: &E,
    config: &TrainConfig,
    m: usize,
    params: &mut PolicyParams,
    adam: &mut AdamState,
    ce_state: Option<&mut CeState>,
    schedule: &RiskSchedule,
    tagger: Option<&(dyn Fn(&Trajectory) -> MazeStrategy + Sync)>,
) -> Result<IterRow> {
    let (batch, scores) = collect_batch(
        env,
        params,
        ce_state.as_deref(),
        config.n_batch,
        config.nu,
        config.master_seed,
        m,
    )?;

    // CE sampler update at the target risk level (the optimizer's schedule
    // never leaks into the sampler).
    let mut q_ce = None;
    let mut empty_ce_selection = false;
    let mut phi_snapshot = env.context_family().params_flat();
    if let Some(ce) = ce_state {
        let ref_returns = batch.reference_returns();
        let all_returns = batch.returns();
        let q = ce_threshold(&ref_returns, &all_returns, config.alpha, ce.beta_smooth)?;
        let contexts: Vec<Vec<f64>> = batch.records().iter().map(|r| r.context.clone()).collect();
        let weights: Vec<f64> = batch.records().iter().map(|r| r.weight).collect();
        let outcome = ce.update(&contexts, &weights, &all_returns, q)?;
        q_ce = Some(q);
        empty_ce_selection = outcome.empty_selection;
        phi_snapshot = ce.phi.params_flat();
    }

    // Scheduled risk level and the gradient step.
    let alpha_prime = match config.algorithm {
        Algorithm::Pg => 1.0,
        _ if config.algorithm.uses_soft_risk() => soft_risk_level(m, schedule)?,
        _ => config.alpha,
    };
    let report = if config.algorithm.is_risk_neutral() {
        mean_pg_gradient(&batch, &scores)?
    } else {
        let q_prime = crate::core::empirical_quantile(&batch.reference_returns(), alpha_prime)?;
        cvar_pg_gradient(&batch, &scores, q_prime, alpha_prime)?
    };
    adam_step(adam, params, &report.gradient)?;

    // Diagnostics.
    let all_returns = batch.returns();
    let train_mean = all_returns.iter().sum::<f64>() / all_returns.len() as f64;
    let train_cvar = cvar_of_samples(&all_returns, config.alpha)?;
    let strategies = tagger.map(|tag| {
        let mut counts = StrategyCounts::default();
        for (i, record) in batch.records().iter().enumerate() {
            let used = if config.algorithm.is_risk_neutral() {
                i < batch.n_reference()
            } else {
                record.ret < report.q_hat
            };
            match tag(&record.trajectory) {
                MazeStrategy::Short => {
                    counts.n_short += 1;
                    counts.short_used += used as usize;
                }
                MazeStrategy::Long => {
                    counts.n_long += 1;
                    counts.long_used += used as usize;
                }
                MazeStrategy::Stay => {
                    counts.n_stay += 1;
                    counts.stay_used += used as usize;
                }
            }
        }
        counts
    });

    Ok(IterRow {
        iteration: m,
        alpha_prime,
        q_ce,
        q_prime: report.q_hat,
        train_mean,
        train_cvar,
        used_count: report.used_count,
        used_weight_fraction: report.used_weight_fraction,
        n_eff_used: report.n_eff_used,
        n_reference: batch.n_reference(),
        n_shifted: batch.n_shifted(),
        empty_ce_selection,
        phi: phi_snapshot,
        strategies,
    })
}

/// Swap the family scale (e.g. binomial trial count) while keeping the
/// learned parameter, used at curriculum phase boundaries.
fn retarget_family(current: &ContextDistribution, template: &ContextDistribution) -> ContextDistribution {
    match (current, template) {
        (
            ContextDistribution::Binomial { p, .. },
            ContextDistribution::Binomial { n_trials, .. },
        ) => ContextDistribution::Binomial {
            n_trials: *n_trials,
            p: *p,
        },
        _ => current.clone(),
    }
}

struct CsvWriter {
    file: BufWriter<File>,
}

impl CsvWriter {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(header.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(Self { file })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.file.write_all(fields.join(",").as_bytes())?;
        self.file.write_all(b"\n")?;
        // Flushing per row keeps a usable partial log if the run dies.
        self.file.flush()?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Run the full training loop described by `config`, writing the run
/// directory under `out_dir`.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    match config.env {
        EnvId::Maze => {
            let env = GuardedMaze::new(config.maze.clone())?;
            let tagger = |t: &Trajectory| env.classify(t);
            run_loop(config, out_dir, &[env.clone()], Some(&tagger))
        }
        EnvId::Servers => {
            let envs: Vec<ServersEnv> = config
                .servers_curriculum_minutes
                .iter()
                .map(|&minutes| ServersEnv::new(config.servers.clone().with_minutes(minutes)))
                .collect::<Result<Vec<_>>>()?;
            run_loop(config, out_dir, &envs, None)
        }
    }
}

fn phase_index(m: usize, m_steps: usize, n_phases: usize) -> usize {
    if n_phases <= 1 || m_steps == 0 {
        return 0;
    }
    (((m - 1) * n_phases) / m_steps).min(n_phases - 1)
}

fn run_loop<E: Env>(
    config: &TrainConfig,
    out_dir: &Path,
    phase_envs: &[E],
    tagger: Option<&(dyn Fn(&Trajectory) -> MazeStrategy + Sync)>,
) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir)?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::create_dir_all(out_dir.join("histograms"))?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )?;

    let first_env = &phase_envs[0];
    let spec = PolicySpec::new(
        first_env.obs_dim(),
        config.hidden_dims.clone(),
        first_env.n_actions(),
    )?;
    let mut params = PolicyParams::init(spec, &mut substream(config.master_seed, &[STREAM_INIT]))?;
    let mut adam = AdamState::new(&params, config.learning_rate);
    let mut ce_state = if config.algorithm.uses_cem() {
        Some(CeState::new(
            first_env.context_family(),
            config.beta_smooth,
            config.weight_clip,
        )?)
    } else {
        None
    };
    let schedule = RiskSchedule::new(config.alpha, config.rho, config.m_steps.max(1))?;

    let phi_len = first_env.context_family().params_flat().len();
    let phi_header: Vec<String> = (0..phi_len).map(|i| format!("phi_{i}")).collect();
    let mut train_header = vec![
        "iteration".into(),
        "alpha_prime".into(),
        "q_ce".into(),
        "q_prime".into(),
        "train_mean".into(),
        "train_cvar".into(),
        "used_count".into(),
        "used_weight_fraction".into(),
        "n_eff_used".into(),
        "n_reference".into(),
        "n_shifted".into(),
        "empty_ce_selection".into(),
    ];
    train_header.extend(phi_header.clone());
    if tagger.is_some() {
        for col in ["n_short", "n_long", "n_stay", "short_used", "long_used", "stay_used"] {
            train_header.push(col.into());
        }
    }
    let mut train_log = CsvWriter::create(&out_dir.join("train_log.csv"), &train_header.join(","))?;
    let mut val_log = CsvWriter::create(
        &out_dir.join("validation_log.csv"),
        "iteration,mean,cvar",
    )?;
    let mut phi_log = CsvWriter::create(
        &out_dir.join("phi_history.csv"),
        &format!("iteration,{}", phi_header.join(",")),
    )?;

    let mut rows = Vec::with_capacity(config.m_steps);
    let mut validations = Vec::new();
    let mut best_params = params.clone();
    let mut best_iteration = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let mut current_phase = 0usize;

    for m in 1..=config.m_steps {
        let phase = phase_index(m, config.m_steps, phase_envs.len());
        if phase != current_phase {
            current_phase = phase;
            if let Some(ce) = ce_state.as_mut() {
                let template = phase_envs[phase].context_family();
                ce.phi = retarget_family(&ce.phi, &template);
                ce.phi0 = template;
            }
            log_info!("entering curriculum phase {phase} at iteration {m}");
        }
        let env = &phase_envs[phase];

        let row = match training_step(
            env,
            config,
            m,
            &mut params,
            &mut adam,
            ce_state.as_mut(),
            &schedule,
            tagger,
        ) {
            Ok(row) => row,
            Err(err) => {
                // Leave a diagnostic trail next to the partial logs.
                let dump = serde_json::json!({
                    "iteration": m,
                    "error": err.to_string(),
                });
                fs::write(
                    out_dir.join("failure_dump.json"),
                    serde_json::to_string_pretty(&dump)?,
                )?;
                return Err(err);
            }
        };

        let mut fields = vec![
            row.iteration.to_string(),
            fmt_f64(row.alpha_prime),
            row.q_ce.map(fmt_f64).unwrap_or_default(),
            fmt_f64(row.q_prime),
            fmt_f64(row.train_mean),
            fmt_f64(row.train_cvar),
            row.used_count.to_string(),
            fmt_f64(row.used_weight_fraction),
            fmt_f64(row.n_eff_used),
            row.n_reference.to_string(),
            row.n_shifted.to_string(),
            (row.empty_ce_selection as u8).to_string(),
        ];
        fields.extend(row.phi.iter().copied().map(fmt_f64));
        if let Some(counts) = &row.strategies {
            fields.extend([
                counts.n_short.to_string(),
                counts.n_long.to_string(),
                counts.n_stay.to_string(),
                counts.short_used.to_string(),
                counts.long_used.to_string(),
                counts.stay_used.to_string(),
            ]);
        }
        train_log.row(&fields)?;
        let mut phi_fields = vec![row.iteration.to_string()];
        phi_fields.extend(row.phi.iter().copied().map(fmt_f64));
        phi_log.row(&phi_fields)?;

        if m % config.validate_every == 0 || m == config.m_steps {
            let env_val = &phase_envs[phase];
            let (mean, cvar, returns) = validate(
                env_val,
                &params,
                config.validation_episodes,
                config.alpha,
                config.master_seed,
                m,
            )?;
            val_log.row(&[m.to_string(), fmt_f64(mean), fmt_f64(cvar)])?;
            let mut hist = CsvWriter::create(
                &out_dir.join(format!("histograms/val_{m:06}.csv")),
                "episode,ret",
            )?;
            for (i, r) in returns.iter().enumerate() {
                hist.row(&[i.to_string(), fmt_f64(*r)])?;
            }
            validations.push(ValidationRow {
                iteration: m,
                mean,
                cvar,
            });
            let metric = if config.algorithm.is_risk_neutral() {
                mean
            } else {
                cvar
            };
            if metric > best_metric {
                best_metric = metric;
                best_params = params.clone();
                best_iteration = m;
            }
            log_info!(
                "iter {m}: validation mean {mean:.3} cvar {cvar:.3} (alpha' {:.4})",
                row.alpha_prime
            );
        }
        rows.push(row);
    }

    if validations.is_empty() {
        best_params = params.clone();
        best_iteration = config.m_steps;
    }
    params.save_checkpoint(&out_dir.join("checkpoints/final.json"))?;
    best_params.save_checkpoint(&out_dir.join("checkpoints/best.json"))?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        rows,
        validations,
        final_params: params,
        best_params,
        best_iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_maze_config(algorithm: Algorithm, seed: u64) -> TrainConfig {
        let mut config = TrainConfig::maze_default(algorithm, seed);
        config.n_batch = 40;
        config.m_steps = 3;
        config.validate_every = 2;
        config.validation_episodes = 50;
        config
    }

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "cesor-train-{tag}-{}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn collect_batch_split_counts() {
        let env = GuardedMaze::new(MazeConfig::default()).unwrap();
        let spec = PolicySpec::new(env.obs_dim(), vec![], env.n_actions()).unwrap();
        let params = PolicyParams::init(spec, &mut substream(1, &[STREAM_INIT])).unwrap();

        // Without a CE sampler everything is reference with weight 1.
        let (batch, scores) = collect_batch(&env, &params, None, 25, 0.2, 1, 1).unwrap();
        assert_eq!(batch.n_reference(), 25);
        assert_eq!(batch.n_shifted(), 0);
        assert_eq!(scores.len(), 25);
        assert!(batch.records().iter().all(|r| r.weight == 1.0));

        // nu = 0.2 of 400 gives the 80/320 split.
        let ce = CeState::new(env.context_family(), 0.2, (0.2, 5.0)).unwrap();
        let (batch, _) = collect_batch(&env, &params, Some(&ce), 400, 0.2, 1, 1).unwrap();
        assert_eq!(batch.n_reference(), 80);
        assert_eq!(batch.n_shifted(), 320);

        // phi = phi0: every shifted weight is exactly 1.
        assert!(batch.records().iter().all(|r| r.weight == 1.0));
        for record in batch.records() {
            record.validate((0.2, 5.0)).unwrap();
        }
    }

    #[test]
    fn collect_batch_is_order_deterministic() {
        let env = GuardedMaze::new(MazeConfig::default()).unwrap();
        let spec = PolicySpec::new(env.obs_dim(), vec![], env.n_actions()).unwrap();
        let params = PolicyParams::init(spec, &mut substream(2, &[STREAM_INIT])).unwrap();
        let (b1, _) = collect_batch(&env, &params, None, 30, 1.0, 7, 3).unwrap();
        let (b2, _) = collect_batch(&env, &params, None, 30, 1.0, 7, 3).unwrap();
        for (a, b) in b1.records().iter().zip(b2.records()) {
            assert_eq!(a.ret.to_bits(), b.ret.to_bits());
            assert_eq!(a.context, b.context);
        }
    }

    #[test]
    fn q_prime_ignores_shifted_returns() {
        // The gradient baseline comes from reference returns only:
        // perturbing every shifted return leaves it unchanged.
        let reference: Vec<f64> = (0..50).map(f64::from).collect();
        let shifted: Vec<f64> = (0..50).map(|i| -1000.0 - f64::from(i)).collect();
        let q1 = crate::core::empirical_quantile(&reference, 0.1).unwrap();
        // Shifted returns never enter the quantile input.
        let _ = shifted;
        let q2 = crate::core::empirical_quantile(&reference, 0.1).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn soft_phase_alpha_prime_at_start() {
        // CeSoR at m = 1 of 250 with rho 0.8: alpha' = 1 - 0.95/200.
        let config = TrainConfig::maze_default(Algorithm::Cesor, 3);
        let schedule = RiskSchedule::new(config.alpha, config.rho, config.m_steps).unwrap();
        let a1 = soft_risk_level(1, &schedule).unwrap();
        assert!((a1 - (1.0 - 0.95 / 200.0)).abs() < 1e-12);
    }

    #[test]
    fn pg_never_touches_phi_and_logs_alpha_one() {
        let config = tiny_maze_config(Algorithm::Pg, 11);
        let dir = tmp_dir("pg");
        let run = run_training(&config, &dir).unwrap();
        for row in &run.rows {
            assert_eq!(row.alpha_prime, 1.0);
            assert!(row.q_ce.is_none());
            assert_eq!(row.phi, vec![0.2, 32.0]);
            assert_eq!(row.n_shifted, 0);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cesor_updates_phi_and_uses_schedule() {
        let config = tiny_maze_config(Algorithm::Cesor, 13);
        let schedule = RiskSchedule::new(config.alpha, config.rho, config.m_steps).unwrap();
        let dir = tmp_dir("cesor");
        let run = run_training(&config, &dir).unwrap();
        for (i, row) in run.rows.iter().enumerate() {
            assert_eq!(row.alpha_prime, soft_risk_level(i + 1, &schedule).unwrap());
            assert!(row.q_ce.is_some());
        }
        // The CE update moves phi away from phi0 almost surely.
        assert!(run.rows.iter().any(|r| r.phi != vec![0.2, 32.0]));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ce_threshold_uses_target_alpha_not_schedule() {
        // At m = 1 of a long run the soft level is near 1, so if the CE
        // threshold used it, q_ce would be near the max return; with the
        // target alpha it stays near the bottom of the reference returns.
        let mut config = TrainConfig::maze_default(Algorithm::Cesor, 17);
        config.n_batch = 200;
        config.m_steps = 100;
        let env = GuardedMaze::new(config.maze.clone()).unwrap();
        let spec = PolicySpec::new(env.obs_dim(), vec![], env.n_actions()).unwrap();
        let mut params =
            PolicyParams::init(spec, &mut substream(17, &[STREAM_INIT])).unwrap();
        let mut adam = AdamState::new(&params, config.learning_rate);
        let mut ce =
            CeState::new(env.context_family(), config.beta_smooth, config.weight_clip).unwrap();
        let schedule = RiskSchedule::new(config.alpha, config.rho, config.m_steps).unwrap();
        let row = training_step(
            &env,
            &config,
            1,
            &mut params,
            &mut adam,
            Some(&mut ce),
            &schedule,
            None,
        )
        .unwrap();
        assert!(row.alpha_prime > 0.98);
        let q_ce = row.q_ce.unwrap();
        // q_prime is the near-max reference quantile at alpha' ~ 1; q_ce
        // must sit strictly below it at these batch sizes.
        assert!(q_ce < row.q_prime, "q_ce {q_ce} vs q_prime {}", row.q_prime);
    }

    #[test]
    fn zero_steps_returns_initial_policy() {
        let mut config = tiny_maze_config(Algorithm::Gcvar, 19);
        config.m_steps = 0;
        let dir = tmp_dir("zerosteps");
        let run = run_training(&config, &dir).unwrap();
        assert_eq!(run.rows.len(), 0);
        assert_eq!(run.final_params, run.best_params);
        assert!(dir.join("checkpoints/final.json").exists());
        assert!(dir.join("checkpoints/best.json").exists());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identical_seeds_give_byte_identical_logs() {
        let config = tiny_maze_config(Algorithm::Cesor, 23);
        let dir1 = tmp_dir("repro1");
        let dir2 = tmp_dir("repro2");
        run_training(&config, &dir1).unwrap();
        run_training(&config, &dir2).unwrap();
        for name in ["train_log.csv", "validation_log.csv", "phi_history.csv"] {
            let a = fs::read(dir1.join(name)).unwrap();
            let b = fs::read(dir2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        fs::remove_dir_all(&dir1).ok();
        fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn gcvar_barrier_batch_leaves_params_unchanged() {
        // A synthetic batch whose bottom quantile ties exactly: zero
        // gradient, and from a fresh optimizer the parameters stay put.
        let env = GuardedMaze::new(MazeConfig::default()).unwrap();
        let spec = PolicySpec::new(env.obs_dim(), vec![], env.n_actions()).unwrap();
        let params = PolicyParams::init(spec, &mut substream(29, &[STREAM_INIT])).unwrap();
        let returns: Vec<f64> = (0..40)
            .map(|i| if i < 10 { -32.0 } else { f64::from(i) })
            .collect();
        let records: Vec<EpisodeRecord> = returns
            .iter()
            .map(|&ret| EpisodeRecord {
                context: vec![0.0, 0.0],
                trajectory: Trajectory::new(
                    vec![vec![0.0; env.obs_dim()]],
                    vec![0],
                    vec![ret],
                )
                .unwrap(),
                ret,
                weight: 1.0,
                source: EpisodeSource::Reference,
            })
            .collect();
        let batch = ReturnBatch::new(records).unwrap();
        let scores: Vec<PolicyParams> = (0..40)
            .map(|_| {
                let mut s = params.zeros_like();
                *s.param_iter_mut().next().unwrap() = 1.0;
                s
            })
            .collect();
        let q = crate::core::empirical_quantile(&returns, 0.05).unwrap();
        assert_eq!(q, -32.0);
        let report = cvar_pg_gradient(&batch, &scores, q, 0.05).unwrap();
        assert!(report.gradient.param_iter().all(|v| v == 0.0));
        let mut adam = AdamState::new(&params, 0.1);
        let mut updated = params.clone();
        adam_step(&mut adam, &mut updated, &report.gradient).unwrap();
        assert_eq!(updated, params);
    }

    #[test]
    fn maze_stay_policy_validates_at_minus_budget() {
        // A policy hard-wired to walk down never reaches the target.
        let env = GuardedMaze::new(MazeConfig::default()).unwrap();
        let spec = PolicySpec::new(env.obs_dim(), vec![], env.n_actions()).unwrap();
        let mut params =
            PolicyParams::init(spec, &mut substream(31, &[STREAM_INIT])).unwrap().zeros_like();
        params.layers[0].bias[3] = 50.0; // action 3 = down
        let (mean, cvar, _) = validate(&env, &params, 200, 0.05, 31, 1).unwrap();
        assert_eq!(mean, -32.0);
        assert_eq!(cvar, -32.0);
    }

    #[test]
    fn servers_curriculum_switches_phase_and_family() {
        let mut config = TrainConfig::servers_default(Algorithm::Cesor, 37);
        config.n_batch = 16;
        config.m_steps = 4;
        config.validation_episodes = 8;
        config.validate_every = 10;
        config.servers_curriculum_minutes = vec![1, 2];
        let dir = tmp_dir("curriculum");
        let run = run_training(&config, &dir).unwrap();
        // Phase 1 covers iterations 1-2 (60 trials), phase 2 covers 3-4
        // (120 trials); the binomial phi parameter survives the switch.
        assert_eq!(run.rows.len(), 4);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn phase_index_splits_evenly() {
        assert_eq!(phase_index(1, 100, 4), 0);
        assert_eq!(phase_index(25, 100, 4), 0);
        assert_eq!(phase_index(26, 100, 4), 1);
        assert_eq!(phase_index(50, 100, 4), 1);
        assert_eq!(phase_index(51, 100, 4), 2);
        assert_eq!(phase_index(100, 100, 4), 3);
        assert_eq!(phase_index(7, 50, 1), 0);
    }
}
