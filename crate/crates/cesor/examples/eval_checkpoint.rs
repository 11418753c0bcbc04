//! Load a policy checkpoint and evaluate it greedily on the maze: return
//! statistics, a quantile grid and the strategy breakdown.
//!
//! ```bash
//! cargo run --release --example eval_checkpoint -- path/to/checkpoint.json [episodes] [seed]
//! ```
//!
//! Checkpoints are produced under `runs/<...>/checkpoints/` by the training
//! examples or the `cesor train` command.

use cesor::core::{cvar_of_samples, empirical_quantile};
use cesor::envs::{maze::MazeStrategy, rollout, Env, GuardedMaze, MazeConfig};
use cesor::policy::PolicyParams;
use cesor::rng::{substream, STREAM_EVAL};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let Some(path) = args.get(1) else {
        eprintln!("usage: eval_checkpoint <checkpoint.json> [episodes] [seed]");
        std::process::exit(2);
    };
    let episodes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let params = PolicyParams::load_checkpoint(path.as_ref()).expect("load checkpoint");
    let env = GuardedMaze::new(MazeConfig::default()).expect("layout");
    assert_eq!(
        params.spec.input_dim,
        env.obs_dim(),
        "checkpoint does not match the maze observation size"
    );

    let phi0 = env.context_family();
    let mut returns = Vec::with_capacity(episodes);
    let mut counts = [0usize; 3];
    for i in 0..episodes {
        let mut rng = substream(seed, &[STREAM_EVAL, i as u64]);
        let context = phi0.sample(&mut rng);
        let (traj, ret) = rollout(&env, &params, &context, 0.0, &mut rng).unwrap();
        match env.classify(&traj) {
            MazeStrategy::Short => counts[0] += 1,
            MazeStrategy::Long => counts[1] += 1,
            MazeStrategy::Stay => counts[2] += 1,
        }
        returns.push(ret);
    }

    let mean = returns.iter().sum::<f64>() / episodes as f64;
    println!("episodes,{episodes}");
    println!("mean,{mean}");
    println!("cvar_0.05,{}", cvar_of_samples(&returns, 0.05).unwrap());
    for pct in [1, 5, 10, 25, 50, 75, 100] {
        let q = empirical_quantile(&returns, pct as f64 / 100.0).unwrap();
        println!("q{pct:03},{q}");
    }
    println!("short,{}", counts[0]);
    println!("long,{}", counts[1]);
    println!("stay,{}", counts[2]);
}
