//! Deterministic scripted replay: drive the maze with a fixed action
//! sequence and a fixed context, printing the per-step trace. Useful as a
//! regression harness for environment dynamics.
//!
//! ```bash
//! cargo run --release --example replay_actions -- [seed]
//! ```

use cesor::envs::{rollout_scripted, GuardedMaze, MazeConfig};
use cesor::rng::{substream, STREAM_REPLAY};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let env = GuardedMaze::new(MazeConfig::default()).expect("layout");

    // Walk down into the corner forever: a guaranteed stay episode worth
    // exactly the step budget.
    let script = vec![3usize; 160];
    let context = [1.0, 50.0]; // guard present, toll 50 (never paid)
    let mut rng = substream(seed, &[STREAM_REPLAY]);
    let (trajectory, ret) = rollout_scripted(&env, &script, &context, &mut rng).expect("replay");

    println!("t,action,reward");
    for (t, (action, reward)) in trajectory
        .actions
        .iter()
        .zip(&trajectory.rewards)
        .enumerate()
    {
        println!("{t},{action},{reward}");
    }
    println!("return,{ret}");
    println!("strategy,{:?}", env.classify(&trajectory));
}
