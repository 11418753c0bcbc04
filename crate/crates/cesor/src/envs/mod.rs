//! Context-MDP benchmark environments behind a uniform contract.
//!
//! An environment owns per-episode context sampled from its
//! [`ContextDistribution`] family; given the same context, seed and action
//! sequence it reproduces the trajectory bit for bit.

pub mod maze;
pub mod servers;

pub use maze::{maze_validate_layout, GuardedMaze, LayoutReport, MazeConfig, MazeStrategy};
pub use servers::{ServersConfig, ServersEnv};

use rand_chacha::ChaCha8Rng;

use crate::cem::ContextDistribution;
use crate::core::{trajectory_return, Trajectory};
use crate::policy::{action_probabilities, sample_action, PolicyParams};
use crate::Result;

/// Result of one environment step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Uniform environment contract.
pub trait Env: Sync {
    type State;

    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Maximum number of steps per episode.
    fn horizon(&self) -> usize;
    /// The context family, parameterized at its original phi0.
    fn context_family(&self) -> ContextDistribution;
    fn reset(&self, context: &[f64], rng: &mut ChaCha8Rng) -> Result<Self::State>;
    fn step(
        &self,
        state: &mut Self::State,
        action: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome>;
    fn observe(&self, state: &Self::State) -> Vec<f64>;
}

/// Roll one episode under a policy at the given temperature; returns the
/// trajectory and its undiscounted return.
pub fn rollout<E: Env>(
    env: &E,
    params: &PolicyParams,
    context: &[f64],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, f64)> {
    let mut state = env.reset(context, rng)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for _ in 0..env.horizon() {
        let obs = env.observe(&state);
        let probs = action_probabilities(params, &obs, temperature)?;
        let action = sample_action(&probs, rng)?;
        let outcome = env.step(&mut state, action, rng)?;
        states.push(obs);
        actions.push(action);
        rewards.push(outcome.reward);
        if outcome.done {
            break;
        }
    }
    let ret = trajectory_return(&rewards, 1.0)?;
    Ok((Trajectory::new(states, actions, rewards)?, ret))
}

/// Roll one episode from a fixed action sequence (replay mode). Stops at
/// episode end or when the script runs out.
pub fn rollout_scripted<E: Env>(
    env: &E,
    script: &[usize],
    context: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, f64)> {
    let mut state = env.reset(context, rng)?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for &action in script.iter().take(env.horizon()) {
        let obs = env.observe(&state);
        let outcome = env.step(&mut state, action, rng)?;
        states.push(obs);
        actions.push(action);
        rewards.push(outcome.reward);
        if outcome.done {
            break;
        }
    }
    let ret = trajectory_return(&rewards, 1.0)?;
    Ok((Trajectory::new(states, actions, rewards)?, ret))
}
