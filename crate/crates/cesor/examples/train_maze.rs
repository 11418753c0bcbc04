//! Train an agent on the guarded maze and report greedy test metrics.
//!
//! ```bash
//! cargo run --release --example train_maze -- [PG|GCVaR|SoR|CeR|CeSoR] [seed]
//! ```
//!
//! The default is CeSoR with seed 1. A full 250-iteration run takes a few
//! seconds on a multi-core machine; the run directory is written under
//! `runs/`.

use cesor::core::cvar_of_samples;
use cesor::envs::{maze::MazeStrategy, rollout, Env, GuardedMaze};
use cesor::rng::{substream, STREAM_EVAL};
use cesor::train::{run_training, Algorithm, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let algorithm = match args.get(1).map(String::as_str) {
        None | Some("CeSoR") => Algorithm::Cesor,
        Some("PG") => Algorithm::Pg,
        Some("GCVaR") => Algorithm::Gcvar,
        Some("SoR") => Algorithm::Sor,
        Some("CeR") => Algorithm::Cer,
        Some(other) => {
            eprintln!("unknown algorithm '{other}'");
            std::process::exit(2);
        }
    };
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let config = TrainConfig::maze_default(algorithm, seed);
    let out_dir = std::path::PathBuf::from(format!("runs/maze_{algorithm:?}_seed{seed}"));
    println!("training {algorithm:?} on the maze (seed {seed}) -> {}", out_dir.display());
    let run = run_training(&config, &out_dir).expect("training failed");

    // Greedy test rollouts under fresh original-distribution contexts.
    let env = GuardedMaze::new(config.maze.clone()).expect("layout");
    let phi0 = env.context_family();
    let n = 1000;
    let mut returns = Vec::with_capacity(n);
    let mut counts = [0usize; 3];
    for i in 0..n {
        let mut rng = substream(seed, &[STREAM_EVAL, 0xeea1, i as u64]);
        let context = phi0.sample(&mut rng);
        let (traj, ret) = rollout(&env, &run.best_params, &context, 0.0, &mut rng).unwrap();
        match env.classify(&traj) {
            MazeStrategy::Short => counts[0] += 1,
            MazeStrategy::Long => counts[1] += 1,
            MazeStrategy::Stay => counts[2] += 1,
        }
        returns.push(ret);
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let cvar = cvar_of_samples(&returns, config.alpha).unwrap();
    println!("test over {n} episodes (best checkpoint from iteration {}):", run.best_iteration);
    println!("  mean        {mean:.2}");
    println!("  cvar_{:.2}   {cvar:.2}", config.alpha);
    println!(
        "  strategies  short {} / long {} / stay {}",
        counts[0], counts[1], counts[2]
    );
}
