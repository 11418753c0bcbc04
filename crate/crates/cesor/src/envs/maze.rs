//! The Guarded Maze: continuous navigation over an 8x8 grid with noisy unit
//! steps, a step-cost budget, a rewarded target cell, and a guard cell that
//! charges a context-dependent toll on first entry.
//!
//! The context is `(C1, C2)`: `C1 ~ Bernoulli(p)` says whether the guard is
//! present, `C2 ~ Exponential(mean)` is the toll. The default layout routes a
//! short path through the guard cell and a longer detour around it, sized so
//! the expected toll makes the short path mean-optimal but tail-risky.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Env, StepOutcome};
use crate::cem::ContextDistribution;
use crate::core::Trajectory;
use crate::{Error, Result};

/// Upper sanity bound on the short/long path-length gap.
const MAX_DELTA: f64 = 40.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MazeConfig {
    pub grid_size: usize,
    /// Wall cells as (x, y), y growing upward.
    pub walls: Vec<(usize, usize)>,
    pub target: (usize, usize),
    pub guard: (usize, usize),
    /// Std deviation of the additive Gaussian control noise, per dimension.
    pub noise_sigma: f64,
    pub horizon: usize,
    /// Total step-cost budget; steps past it are free.
    pub step_cost_cap: f64,
    pub target_reward: f64,
    /// phi0 guard-presence probability.
    pub guard_prob: f64,
    /// phi0 mean of the exponential guard cost.
    pub guard_cost_mean: f64,
}

impl Default for MazeConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            // One wall row just above the start region; its gate is the
            // guard cell itself, and the detour runs through the open
            // columns on the right.
            walls: vec![(0, 4), (2, 4), (3, 4), (4, 4), (5, 4)],
            target: (1, 6),
            guard: (1, 4),
            noise_sigma: 0.2,
            horizon: 160,
            step_cost_cap: 32.0,
            target_reward: 16.0,
            guard_prob: 0.2,
            guard_cost_mean: 32.0,
        }
    }
}

impl MazeConfig {
    fn is_wall(&self, cell: (usize, usize)) -> bool {
        self.walls.contains(&cell)
    }

    fn in_grid(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.grid_size as f64 && y < self.grid_size as f64
    }

    /// Side length of the square start region (the lower-left quarter).
    fn start_extent(&self) -> f64 {
        self.grid_size as f64 / 2.0
    }

    /// Whether the straight segment from `from` to `to` crosses a wall
    /// cell. Checking the whole sweep (not just the endpoint) keeps walls
    /// impassable even from positions hugging them, where a unit step plus
    /// noise could otherwise clear a one-cell wall entirely; the layout
    /// validation BFS assumes walls cannot be jumped.
    fn segment_hits_wall(&self, from: (f64, f64), to: (f64, f64)) -> bool {
        let (x0, y0) = from;
        let (x1, y1) = to;
        let (dx, dy) = (x1 - x0, y1 - y0);
        let mut cx = x0.floor() as isize;
        let mut cy = y0.floor() as isize;
        let end_cx = x1.floor() as isize;
        let end_cy = y1.floor() as isize;
        let step_x: isize = if dx > 0.0 { 1 } else { -1 };
        let step_y: isize = if dy > 0.0 { 1 } else { -1 };
        // Parameter distance to the first vertical/horizontal cell boundary
        // and per-cell increments (grid traversal).
        let mut t_max_x = if dx != 0.0 {
            let next = if dx > 0.0 { cx as f64 + 1.0 } else { cx as f64 };
            (next - x0) / dx
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dy != 0.0 {
            let next = if dy > 0.0 { cy as f64 + 1.0 } else { cy as f64 };
            (next - y0) / dy
        } else {
            f64::INFINITY
        };
        let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
        let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
        for _ in 0..4 * self.grid_size {
            if cx >= 0 && cy >= 0 && self.is_wall((cx as usize, cy as usize)) {
                return true;
            }
            if cx == end_cx && cy == end_cy {
                return false;
            }
            if t_max_x < t_max_y {
                t_max_x += t_delta_x;
                cx += step_x;
            } else {
                t_max_y += t_delta_y;
                cy += step_y;
            }
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MazeStrategy {
    /// Reached the target through the guard cell.
    Short,
    /// Reached the target without entering the guard cell.
    Long,
    /// Never reached the target; worth exactly the step budget.
    Stay,
}

#[derive(Clone, Debug)]
pub struct MazeState {
    pub pos: (f64, f64),
    pub t: usize,
    pub cost_paid: f64,
    pub guard_entered: bool,
    /// Materialized toll `C1 * C2` for this episode.
    pub toll: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct GuardedMaze {
    pub config: MazeConfig,
}

impl GuardedMaze {
    pub fn new(config: MazeConfig) -> Result<Self> {
        let report = maze_validate_layout(&config);
        if !report.pass {
            return Err(Error::Config(format!(
                "maze layout rejected: {}",
                report.reasons.join("; ")
            )));
        }
        Ok(Self { config })
    }

    /// Build without the layout gate (test fixtures for failing layouts).
    pub fn new_unchecked(config: MazeConfig) -> Self {
        Self { config }
    }

    fn cell_of(&self, pos: (f64, f64)) -> (usize, usize) {
        (pos.0 as usize, pos.1 as usize)
    }

    /// Recover the grid cell a recorded observation encodes. The soft
    /// one-hot is bilinear in the position, so the weighted average of the
    /// active cell coordinates reproduces it exactly up to edge clamping,
    /// which never moves the point across a cell boundary.
    fn cell_from_obs(&self, obs: &[f64]) -> (usize, usize) {
        let n = self.config.grid_size;
        let mut u = 0.0;
        let mut v = 0.0;
        for (idx, &w) in obs.iter().enumerate() {
            if w > 0.0 {
                u += w * (idx % n) as f64;
                v += w * (idx / n) as f64;
            }
        }
        let x = (u + 0.5).floor().clamp(0.0, (n - 1) as f64);
        let y = (v + 0.5).floor().clamp(0.0, (n - 1) as f64);
        (x as usize, y as usize)
    }

    /// Classify a complete episode by where it went.
    pub fn classify(&self, trajectory: &Trajectory) -> MazeStrategy {
        // Positive rewards only occur on the step that enters the target.
        let reached = trajectory.len() < self.config.horizon
            || trajectory.rewards.last().is_some_and(|&r| r > 0.0);
        if !reached {
            return MazeStrategy::Stay;
        }
        // The first observation is the start (never the guard); later ones
        // re-encode every intermediate position. The final position is the
        // target itself, so scanning recorded states covers all guard visits.
        let visited_guard = trajectory
            .states
            .iter()
            .skip(1)
            .any(|obs| self.cell_from_obs(obs) == self.config.guard);
        if visited_guard {
            MazeStrategy::Short
        } else {
            MazeStrategy::Long
        }
    }
}

impl Env for GuardedMaze {
    type State = MazeState;

    fn obs_dim(&self) -> usize {
        self.config.grid_size * self.config.grid_size
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn context_family(&self) -> ContextDistribution {
        ContextDistribution::Product {
            components: vec![
                ContextDistribution::Bernoulli {
                    p: self.config.guard_prob,
                },
                ContextDistribution::ExponentialMean {
                    mean: self.config.guard_cost_mean,
                },
            ],
        }
    }

    fn reset(&self, context: &[f64], rng: &mut ChaCha8Rng) -> Result<MazeState> {
        if context.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: context.len(),
            });
        }
        let (c1, c2) = (context[0], context[1]);
        if (c1 != 0.0 && c1 != 1.0) || c2 < 0.0 {
            return Err(Error::invalid(format!(
                "maze context must be (0|1, cost >= 0), got ({c1}, {c2})"
            )));
        }
        let extent = self.config.start_extent();
        let x = rng.gen::<f64>() * extent;
        let y = rng.gen::<f64>() * extent;
        Ok(MazeState {
            pos: (x, y),
            t: 0,
            cost_paid: 0.0,
            guard_entered: false,
            toll: c1 * c2,
            done: false,
        })
    }

    fn step(
        &self,
        state: &mut MazeState,
        action: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::invalid("step called on finished maze episode"));
        }
        let (dx, dy) = match action {
            0 => (-1.0, 0.0),
            1 => (1.0, 0.0),
            2 => (0.0, 1.0),
            3 => (0.0, -1.0),
            _ => {
                return Err(Error::OutOfRange(format!(
                    "maze action must be in 0..4, got {action}"
                )))
            }
        };
        let noise = Normal::new(0.0, self.config.noise_sigma).expect("sigma >= 0");
        let ex = noise.sample(rng);
        let ey = noise.sample(rng);
        let nx = state.pos.0 + dx + ex;
        let ny = state.pos.1 + dy + ey;
        // A move ending in (or sweeping through) a wall, or leaving the
        // grid, is cancelled.
        if self.config.in_grid(nx, ny) && !self.config.segment_hits_wall(state.pos, (nx, ny)) {
            state.pos = (nx, ny);
        }

        let mut reward = 0.0;
        if state.cost_paid < self.config.step_cost_cap {
            reward -= 1.0;
            state.cost_paid += 1.0;
        }
        let cell = self.cell_of(state.pos);
        if cell == self.config.guard && !state.guard_entered {
            state.guard_entered = true;
            reward -= state.toll;
        }
        if cell == self.config.target {
            reward += self.config.target_reward;
            state.done = true;
        }
        state.t += 1;
        if state.t >= self.config.horizon {
            state.done = true;
        }
        Ok(StepOutcome {
            reward,
            done: state.done,
        })
    }

    /// Soft one-hot: bilinear interpolation of the position over the grid
    /// of cell centers; at most 4 entries are non-zero and they sum to 1.
    fn observe(&self, state: &MazeState) -> Vec<f64> {
        let n = self.config.grid_size;
        let mut obs = vec![0.0; n * n];
        let u = (state.pos.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let v = (state.pos.1 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 2);
        let j0 = (v.floor() as usize).min(n - 2);
        let fx = u - i0 as f64;
        let fy = v - j0 as f64;
        obs[j0 * n + i0] = (1.0 - fx) * (1.0 - fy);
        obs[j0 * n + i0 + 1] = fx * (1.0 - fy);
        obs[(j0 + 1) * n + i0] = (1.0 - fx) * fy;
        obs[(j0 + 1) * n + i0 + 1] = fx * fy;
        obs
    }
}

/// Layout validation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayoutReport {
    /// BFS path length from the start-region centroid through the guard.
    pub l_short: Option<usize>,
    /// BFS path length with the guard cell forbidden.
    pub l_long: Option<usize>,
    pub delta: Option<f64>,
    pub pass: bool,
    pub reasons: Vec<String>,
}

fn bfs(config: &MazeConfig, from: (usize, usize), to: (usize, usize), forbid: Option<(usize, usize)>) -> Option<usize> {
    let n = config.grid_size;
    let blocked = |cell: (usize, usize)| config.is_wall(cell) || forbid == Some(cell);
    if blocked(from) || blocked(to) {
        return None;
    }
    let mut dist = vec![usize::MAX; n * n];
    let idx = |c: (usize, usize)| c.1 * n + c.0;
    let mut queue = VecDeque::new();
    dist[idx(from)] = 0;
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        if cell == to {
            return Some(dist[idx(cell)]);
        }
        let (x, y) = (cell.0 as isize, cell.1 as isize);
        for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
            if nx < 0 || ny < 0 || nx >= n as isize || ny >= n as isize {
                continue;
            }
            let next = (nx as usize, ny as usize);
            if blocked(next) || dist[idx(next)] != usize::MAX {
                continue;
            }
            dist[idx(next)] = dist[idx(cell)] + 1;
            queue.push_back(next);
        }
    }
    None
}

/// Check a layout: the guarded shortcut must beat the detour by more than
/// the expected toll (otherwise the shortcut is never mean-optimal) but not
/// absurdly, and both routes must fit inside the step budget.
pub fn maze_validate_layout(config: &MazeConfig) -> LayoutReport {
    let mut reasons = Vec::new();
    let n = config.grid_size;
    if n < 4 {
        reasons.push("grid too small".into());
    }
    for &cell in &[config.target, config.guard] {
        if cell.0 >= n || cell.1 >= n {
            reasons.push(format!("cell {cell:?} outside grid"));
        }
        if config.is_wall(cell) {
            reasons.push(format!("cell {cell:?} is a wall"));
        }
    }
    if config.target == config.guard {
        reasons.push("target and guard coincide".into());
    }
    let half = n / 2;
    let in_start = |c: (usize, usize)| c.0 < half && c.1 < half;
    if in_start(config.target) || in_start(config.guard) {
        reasons.push("target/guard inside the start region".into());
    }
    if config.walls.iter().any(|&w| in_start(w)) {
        reasons.push("walls inside the start region".into());
    }
    if !reasons.is_empty() {
        return LayoutReport {
            l_short: None,
            l_long: None,
            delta: None,
            pass: false,
            reasons,
        };
    }

    let centroid = (n / 4, n / 4);
    let l_short = bfs(config, centroid, config.target, None);
    let l_long = bfs(config, centroid, config.target, Some(config.guard));
    let delta = match (l_short, l_long) {
        (Some(s), Some(l)) => Some(l as f64 - s as f64),
        _ => None,
    };
    match (l_short, l_long) {
        (None, _) => reasons.push("target unreachable".into()),
        (_, None) => reasons.push("target unreachable without crossing the guard".into()),
        (Some(s), Some(l)) => {
            let d = l as f64 - s as f64;
            let expected_toll = config.guard_prob * config.guard_cost_mean;
            if d <= expected_toll {
                reasons.push(format!(
                    "path gap {d} not above the expected toll {expected_toll}; the shortcut is CVaR-competitive"
                ));
            }
            if d >= MAX_DELTA {
                reasons.push(format!("path gap {d} exceeds {MAX_DELTA}"));
            }
            if s as f64 > config.step_cost_cap || l as f64 > config.step_cost_cap {
                reasons.push(format!(
                    "route lengths ({s}, {l}) exceed the step budget {}",
                    config.step_cost_cap
                ));
            }
        }
    }
    LayoutReport {
        l_short,
        l_long,
        delta,
        pass: reasons.is_empty(),
        reasons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::rollout_scripted;
    use crate::rng::{substream, STREAM_EVAL};

    fn maze() -> GuardedMaze {
        GuardedMaze::new(MazeConfig::default()).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        substream(seed, &[STREAM_EVAL])
    }

    const UP: usize = 2;
    const DOWN: usize = 3;
    const LEFT: usize = 0;
    const RIGHT: usize = 1;

    #[test]
    fn default_layout_passes() {
        let report = maze_validate_layout(&MazeConfig::default());
        assert!(report.pass, "{:?}", report.reasons);
        assert_eq!(report.l_short, Some(5));
        assert_eq!(report.l_long, Some(13));
        assert_eq!(report.delta, Some(8.0));
    }

    #[test]
    fn walled_off_guard_fails() {
        let mut config = MazeConfig::default();
        config.walls.extend([(0, 4), (2, 4), (1, 3)]);
        let report = maze_validate_layout(&config);
        assert!(!report.pass);
    }

    #[test]
    fn small_gap_fails() {
        let mut config = MazeConfig::default();
        config.walls = vec![(0, 5), (2, 5)];
        let report = maze_validate_layout(&config);
        assert!(!report.pass);
        assert!(report.delta.unwrap() < 6.4);
    }

    #[test]
    fn unreachable_target_fails() {
        let mut config = MazeConfig::default();
        config.walls = (0..8).map(|x| (x, 5)).collect();
        config.guard = (1, 4);
        let report = maze_validate_layout(&config);
        assert!(!report.pass);
        assert!(report.reasons.iter().any(|r| r.contains("unreachable")));
    }

    #[test]
    fn reset_is_deterministic_and_uniform_over_quarter() {
        let env = maze();
        let s1 = env.reset(&[0.0, 1.0], &mut rng(3)).unwrap();
        let s2 = env.reset(&[0.0, 1.0], &mut rng(3)).unwrap();
        assert_eq!(s1.pos, s2.pos);

        // Chi-squared over the 16 start cells at the 1% level (df = 15).
        let n = 100_000;
        let mut counts = [0usize; 16];
        let mut r = rng(4);
        for _ in 0..n {
            let s = env.reset(&[0.0, 1.0], &mut r).unwrap();
            assert!(s.pos.0 < 4.0 && s.pos.1 < 4.0);
            counts[(s.pos.1 as usize) * 4 + (s.pos.0 as usize)] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 30.578, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_context_rejected() {
        let env = maze();
        assert!(env.reset(&[0.5, 1.0], &mut rng(0)).is_err());
        assert!(env.reset(&[1.0, -2.0], &mut rng(0)).is_err());
        assert!(env.reset(&[1.0], &mut rng(0)).is_err());
    }

    #[test]
    fn wall_step_is_cancelled() {
        let env = maze();
        let mut state = env.reset(&[0.0, 0.0], &mut rng(5)).unwrap();
        // Park right under a wall cell and command "up" into it.
        state.pos = (3.5, 3.5);
        let mut r = rng(6);
        for _ in 0..20 {
            let before = state.pos;
            let out = env.step(&mut state, UP, &mut r).unwrap();
            assert_eq!(out.reward, -1.0);
            // (3, 4) is a wall; with sigma = 0.2 the endpoint stays inside
            // it, so the position must not move at all.
            assert_eq!(state.pos, before);
        }
    }

    #[test]
    fn stay_episodes_return_exactly_minus_budget() {
        let env = maze();
        // Walking down forever never reaches the target.
        let script = vec![DOWN; 160];
        let (traj, ret) = rollout_scripted(&env, &script, &[1.0, 50.0], &mut rng(7)).unwrap();
        assert_eq!(ret, -32.0);
        assert_eq!(traj.len(), 160);
        assert_eq!(env.classify(&traj), MazeStrategy::Stay);
    }

    #[test]
    fn guard_toll_charged_once() {
        let env = maze();
        let mut r = rng(8);
        let mut state = env.reset(&[1.0, 10.0], &mut r).unwrap();
        state.pos = (1.5, 3.5); // just under the guard cell (1, 4)
        let out = env.step(&mut state, UP, &mut r).unwrap();
        assert!(env.cell_of(state.pos) == (1, 4));
        assert_eq!(out.reward, -11.0); // step cost + toll
        // Leave and re-enter: no second charge.
        let out = env.step(&mut state, DOWN, &mut r).unwrap();
        assert_eq!(out.reward, -1.0);
        let out = env.step(&mut state, UP, &mut r).unwrap();
        assert!(env.cell_of(state.pos) == (1, 4));
        assert_eq!(out.reward, -1.0);
    }

    #[test]
    fn no_guard_means_no_toll() {
        let env = maze();
        let mut r = rng(9);
        let mut state = env.reset(&[0.0, 99.0], &mut r).unwrap();
        state.pos = (1.5, 3.5);
        let out = env.step(&mut state, UP, &mut r).unwrap();
        assert_eq!(out.reward, -1.0);
        assert!(state.guard_entered);
    }

    #[test]
    fn step_after_done_errors() {
        let env = maze();
        let mut r = rng(10);
        let mut state = env.reset(&[0.0, 0.0], &mut r).unwrap();
        state.done = true;
        assert!(env.step(&mut state, UP, &mut r).is_err());
    }

    #[test]
    fn observation_is_soft_one_hot() {
        let env = maze();
        let mut state = env.reset(&[0.0, 0.0], &mut rng(11)).unwrap();

        // Exactly at a cell center: exact one-hot.
        state.pos = (2.5, 3.5);
        let obs = env.observe(&state);
        assert_eq!(obs[3 * 8 + 2], 1.0);
        assert_eq!(obs.iter().filter(|&&w| w != 0.0).count(), 1);

        // Midpoint between four centers: four entries of 0.25.
        state.pos = (3.0, 4.0);
        let obs = env.observe(&state);
        let nonzero: Vec<f64> = obs.iter().copied().filter(|&w| w != 0.0).collect();
        assert_eq!(nonzero.len(), 4);
        for w in nonzero {
            assert!((w - 0.25).abs() < 1e-12);
        }

        // Arbitrary positions: at most 4 non-zeros summing to 1.
        let mut r = rng(12);
        for _ in 0..200 {
            state.pos = (r.gen::<f64>() * 8.0, r.gen::<f64>() * 8.0);
            let obs = env.observe(&state);
            let sum: f64 = obs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(obs.iter().filter(|&&w| w != 0.0).count() <= 4);
            assert!(obs.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn observation_roundtrips_to_cell() {
        let env = maze();
        let mut state = env.reset(&[0.0, 0.0], &mut rng(13)).unwrap();
        let mut r = rng(14);
        for _ in 0..500 {
            state.pos = (r.gen::<f64>() * 8.0, r.gen::<f64>() * 8.0);
            let obs = env.observe(&state);
            assert_eq!(env.cell_from_obs(&obs), env.cell_of(state.pos));
        }
    }

    /// Reset, park at a chosen position, then follow a script.
    fn run_from(
        env: &GuardedMaze,
        start: (f64, f64),
        script: &[usize],
        context: &[f64],
        seed: u64,
    ) -> (Trajectory, f64) {
        let mut r = rng(seed);
        let mut state = env.reset(context, &mut r).unwrap();
        state.pos = start;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for &a in script {
            states.push(env.observe(&state));
            let out = env.step(&mut state, a, &mut r).unwrap();
            actions.push(a);
            rewards.push(out.reward);
            if out.done {
                break;
            }
        }
        let ret = rewards.iter().sum();
        (Trajectory::new(states, actions, rewards).unwrap(), ret)
    }

    #[test]
    fn scripted_short_and_long_paths_classify() {
        let env = maze();

        // Short: straight up column 1, through the guarded gate.
        let short = vec![UP; 12];
        let (traj, ret) = run_from(&env, (1.5, 0.5), &short, &[1.0, 20.0], 15);
        assert_eq!(env.classify(&traj), MazeStrategy::Short);
        assert!(ret < 0.0); // toll of 20 dominates the target reward

        // Long: up column 6 through the opening, then west to the target,
        // with a few interleaved corrections against drift.
        let mut long = vec![UP; 6];
        long.extend(vec![LEFT; 5]);
        long.extend([UP, LEFT, UP, LEFT, UP, LEFT]);
        let (traj, ret) = run_from(&env, (6.5, 0.5), &long, &[1.0, 20.0], 23);
        assert_eq!(env.classify(&traj), MazeStrategy::Long);
        assert!(ret > 0.0); // no toll on the detour
    }

    #[test]
    fn walls_cannot_be_jumped_from_adjacent_slivers() {
        // From just under the wall row, a unit step plus noise could clear
        // the wall cell entirely if only the endpoint were checked.
        let env = maze();
        let mut r = rng(20);
        for _ in 0..200 {
            let mut state = env.reset(&[0.0, 0.0], &mut r).unwrap();
            state.pos = (0.4, 3.98);
            env.step(&mut state, UP, &mut r).unwrap();
            assert!(state.pos.1 < 4.0, "tunneled to {:?}", state.pos);
        }
    }

    #[test]
    fn trajectories_are_bit_identical_for_equal_seeds() {
        let env = maze();
        let script = vec![UP, RIGHT, UP, RIGHT, UP, UP, LEFT, UP, UP, UP];
        let (t1, r1) = rollout_scripted(&env, &script, &[1.0, 3.0], &mut rng(17)).unwrap();
        let (t2, r2) = rollout_scripted(&env, &script, &[1.0, 3.0], &mut rng(17)).unwrap();
        assert_eq!(r1.to_bits(), r2.to_bits());
        assert_eq!(t1.rewards.len(), t2.rewards.len());
        for (a, b) in t1.rewards.iter().zip(&t2.rewards) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in t1.states.iter().zip(&t2.states) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn returns_stay_within_bounds() {
        let env = maze();
        let mut r = rng(18);
        for i in 0..200 {
            let c2 = (i as f64) * 0.7;
            let script: Vec<usize> = (0..160).map(|k| (k + i) % 4).collect();
            let (_, ret) = rollout_scripted(&env, &script, &[1.0, c2], &mut r).unwrap();
            assert!(ret <= 16.0);
            assert!(ret >= -32.0 - c2);
        }
    }

    #[test]
    fn short_path_cvar_sits_below_long_path_value() {
        // Monte Carlo over a million episodes of the toll distribution:
        // CVaR_5% of the short strategy is about
        // 16 - L_short - mean * (1 + ln 4), far below the long strategy's
        // 16 - L_long.
        let config = MazeConfig::default();
        let report = maze_validate_layout(&config);
        let (l_short, l_long) = (report.l_short.unwrap() as f64, report.l_long.unwrap() as f64);
        let mut r = rng(19);
        let n = 1_000_000;
        let tolls: Vec<f64> = (0..n)
            .map(|_| {
                let present = r.gen::<f64>() < config.guard_prob;
                if present {
                    -config.guard_cost_mean * (1.0 - r.gen::<f64>()).ln()
                } else {
                    0.0
                }
            })
            .collect();
        let short_returns: Vec<f64> = tolls
            .iter()
            .map(|t| 16.0 - l_short - t)
            .collect();
        let cvar_short = crate::core::cvar_of_samples(&short_returns, 0.05).unwrap();
        let formula = 16.0 - l_short - config.guard_cost_mean * (1.0 + 4.0f64.ln());
        assert!(
            (cvar_short - formula).abs() < 1.5,
            "cvar {cvar_short} vs formula {formula}"
        );
        let long_value = 16.0 - l_long;
        assert!(cvar_short < long_value);
    }
}
