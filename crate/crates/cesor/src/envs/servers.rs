//! Server allocation: a per-second queueing simulation where the agent
//! resizes a FIFO-served server pool once a minute, trading server cost
//! against request waiting time.
//!
//! User interest is a constant base rate except for rare peak seconds
//! (the context), which drive the arrival-rate EMA up to roughly twice the
//! base before it decays back. Arrivals within a second form a Poisson
//! process at the current rate; service times are exponential. New servers
//! need an upload delay before serving; removal targets the last server in
//! the list and takes effect when its current task finishes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::{Env, StepOutcome};
use crate::cem::ContextDistribution;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServersConfig {
    /// Episode length in minutes; one decision per minute.
    pub episode_minutes: usize,
    /// Base user interest, requests per second.
    pub base_interest: f64,
    /// Momentary interest during a peak second.
    pub peak_interest: f64,
    /// EMA window of the arrival rate, in seconds.
    pub ema_window_seconds: f64,
    /// Mean service time, seconds.
    pub service_mean_seconds: f64,
    pub min_servers: usize,
    pub max_servers: usize,
    pub initial_servers: usize,
    /// Delay before a newly added server can serve.
    pub upload_delay_seconds: f64,
    /// Cost per server per second.
    pub cost_per_server_second: f64,
    /// phi0: probability of a peak event at any given second.
    pub peak_prob_per_second: f64,
    /// Divisor normalizing the queue-length observation.
    pub queue_obs_scale: f64,
}

impl Default for ServersConfig {
    fn default() -> Self {
        Self {
            episode_minutes: 60,
            base_interest: 3.0,
            peak_interest: 900.0,
            ema_window_seconds: 300.0,
            service_mean_seconds: 1.0,
            min_servers: 3,
            max_servers: 10,
            initial_servers: 4,
            upload_delay_seconds: 120.0,
            cost_per_server_second: 2.0,
            peak_prob_per_second: 1.0 / (3.0 * 24.0 * 3600.0),
            queue_obs_scale: 30.0,
        }
    }
}

impl ServersConfig {
    pub fn episode_seconds(&self) -> usize {
        self.episode_minutes * 60
    }

    pub fn with_minutes(mut self, minutes: usize) -> Self {
        self.episode_minutes = minutes;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.episode_minutes == 0 {
            return Err(Error::Config("episode must be at least one minute".into()));
        }
        if self.min_servers < 1
            || self.max_servers <= self.min_servers
            || !(self.min_servers..=self.max_servers).contains(&self.initial_servers)
        {
            return Err(Error::Config(format!(
                "server bounds invalid: min {} max {} initial {}",
                self.min_servers, self.max_servers, self.initial_servers
            )));
        }
        if !(self.peak_prob_per_second > 0.0 && self.peak_prob_per_second < 1.0) {
            return Err(Error::Config("peak probability must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Remove one server (the last), keep the pool, or add one server.
pub const ACTION_REMOVE: usize = 0;
pub const ACTION_KEEP: usize = 1;
pub const ACTION_ADD: usize = 2;

#[derive(Clone, Debug)]
struct Server {
    /// Time the server next becomes free (upload completion for new ones).
    free_at: f64,
    /// Flagged for removal; takes no new tasks and leaves once idle.
    removing: bool,
}

#[derive(Clone, Debug)]
pub struct ServersState {
    /// Current time in whole seconds.
    pub second: usize,
    pub lambda: f64,
    servers: Vec<Server>,
    /// Arrival times of requests waiting for service.
    waiting: VecDeque<f64>,
    /// Sorted peak seconds for this episode.
    peak_seconds: Vec<usize>,
    pub total_arrived: usize,
    pub total_served: usize,
    /// Waiting time accrued over the whole episode.
    pub tts_total: f64,
    /// Integral of the paid server count, sampled once per second.
    pub server_seconds: f64,
    pub done: bool,
}

impl ServersState {
    pub fn paid_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn queue_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn pending_at_end(&self) -> usize {
        self.waiting.len()
    }
}

#[derive(Clone, Debug)]
pub struct ServersEnv {
    pub config: ServersConfig,
}

impl ServersEnv {
    pub fn new(config: ServersConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn apply_action(&self, state: &mut ServersState, action: usize) -> Result<()> {
        match action {
            ACTION_REMOVE => {
                let active = state.servers.iter().filter(|s| !s.removing).count();
                if active > self.config.min_servers {
                    // Only the last server in the list is directly
                    // removable; skip over ones already leaving.
                    if let Some(server) = state.servers.iter_mut().rev().find(|s| !s.removing) {
                        server.removing = true;
                    }
                }
            }
            ACTION_KEEP => {}
            ACTION_ADD => {
                if state.servers.len() < self.config.max_servers {
                    state.servers.push(Server {
                        free_at: state.second as f64 + self.config.upload_delay_seconds,
                        removing: false,
                    });
                }
            }
            _ => {
                return Err(Error::OutOfRange(format!(
                    "servers action must be in 0..3, got {action}"
                )))
            }
        }
        Ok(())
    }

    /// Advance one second of simulation; returns the waiting time accrued
    /// by requests whose service started during it.
    fn simulate_second(&self, state: &mut ServersState, rng: &mut ChaCha8Rng) -> f64 {
        let sec = state.second;
        let t0 = sec as f64;
        state
            .servers
            .retain(|s| !(s.removing && s.free_at <= t0));
        state.server_seconds += state.servers.len() as f64;

        // Interest and arrival-rate EMA.
        let interest = if state.peak_seconds.binary_search(&sec).is_ok() {
            self.config.peak_interest
        } else {
            self.config.base_interest
        };
        let w = self.config.ema_window_seconds;
        state.lambda = (w - 1.0) / w * state.lambda + interest / w;

        // Poisson arrivals with uniform times within the second.
        let count = Poisson::new(state.lambda).expect("lambda > 0").sample(rng) as usize;
        let mut times: Vec<f64> = (0..count).map(|_| t0 + rng.gen::<f64>()).collect();
        times.sort_by(f64::total_cmp);
        for t in times {
            state.waiting.push_back(t);
            state.total_arrived += 1;
        }

        // Serve in FIFO order on whichever capable server frees first.
        let service = Exp::new(1.0 / self.config.service_mean_seconds).expect("positive mean");
        let mut tts_accrued = 0.0;
        while let Some(&arrival) = state.waiting.front() {
            let Some(server) = state
                .servers
                .iter_mut()
                .filter(|s| !s.removing)
                .min_by(|a, b| a.free_at.total_cmp(&b.free_at))
            else {
                break;
            };
            let start = arrival.max(server.free_at);
            if start >= t0 + 1.0 {
                break;
            }
            state.waiting.pop_front();
            tts_accrued += start - arrival;
            server.free_at = start + service.sample(rng);
            state.total_served += 1;
        }
        state.second += 1;
        tts_accrued
    }
}

impl Env for ServersEnv {
    type State = ServersState;

    fn obs_dim(&self) -> usize {
        (self.config.max_servers - self.config.min_servers + 1) + 1
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn horizon(&self) -> usize {
        self.config.episode_minutes
    }

    fn context_family(&self) -> ContextDistribution {
        ContextDistribution::Binomial {
            n_trials: self.config.episode_seconds() as u64,
            p: self.config.peak_prob_per_second,
        }
    }

    /// Context is the number of peak seconds; their positions are drawn
    /// uniformly without replacement at reset.
    fn reset(&self, context: &[f64], rng: &mut ChaCha8Rng) -> Result<ServersState> {
        if context.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: context.len(),
            });
        }
        let total = self.config.episode_seconds();
        let k = context[0];
        if k < 0.0 || k.fract() != 0.0 || k as usize > total {
            return Err(Error::invalid(format!(
                "servers context must be an integer peak count in [0, {total}], got {k}"
            )));
        }
        let k = k as usize;
        let mut peak_seconds: Vec<usize> = Vec::with_capacity(k);
        while peak_seconds.len() < k {
            let s = rng.gen_range(0..total);
            if !peak_seconds.contains(&s) {
                peak_seconds.push(s);
            }
        }
        peak_seconds.sort_unstable();
        Ok(ServersState {
            second: 0,
            lambda: self.config.base_interest,
            servers: (0..self.config.initial_servers)
                .map(|_| Server {
                    free_at: 0.0,
                    removing: false,
                })
                .collect(),
            waiting: VecDeque::new(),
            peak_seconds,
            total_arrived: 0,
            total_served: 0,
            tts_total: 0.0,
            server_seconds: 0.0,
            done: false,
        })
    }

    /// Apply the sizing action, then advance one decision interval.
    fn step(
        &self,
        state: &mut ServersState,
        action: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::invalid("step called on finished servers episode"));
        }
        self.apply_action(state, action)?;
        let seconds_before = state.server_seconds;
        let mut tts_interval = 0.0;
        for _ in 0..60 {
            tts_interval += self.simulate_second(state, rng);
        }
        if state.second >= self.config.episode_seconds() {
            state.done = true;
            // Requests still waiting accrue their time up to episode end.
            let end = state.second as f64;
            for &arrival in &state.waiting {
                tts_interval += end - arrival;
            }
        }
        state.tts_total += tts_interval;
        let server_cost =
            self.config.cost_per_server_second * (state.server_seconds - seconds_before);
        Ok(StepOutcome {
            reward: -tts_interval - server_cost,
            done: state.done,
        })
    }

    /// One-hot of the paid server count (uploading servers included) plus
    /// the scaled queue length, uncapped.
    fn observe(&self, state: &ServersState) -> Vec<f64> {
        let slots = self.config.max_servers - self.config.min_servers + 1;
        let mut obs = vec![0.0; slots + 1];
        let n = state
            .servers
            .len()
            .clamp(self.config.min_servers, self.config.max_servers);
        obs[n - self.config.min_servers] = 1.0;
        obs[slots] = state.waiting.len() as f64 / self.config.queue_obs_scale;
        obs
    }
}
