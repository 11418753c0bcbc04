//! Train an agent on the server-allocation benchmark at desk scale
//! (15-minute episodes) and report greedy test metrics, including the modal
//! server count and how the policy reacts to a forced peak event.
//!
//! ```bash
//! cargo run --release --example train_servers -- [PG|GCVaR|CeSoR] [seed]
//! ```

use cesor::core::cvar_of_samples;
use cesor::envs::{rollout, Env, ServersEnv};
use cesor::rng::{substream, STREAM_EVAL};
use cesor::train::{run_training, Algorithm, TrainConfig};

fn servers_observed(states: &[Vec<f64>]) -> Vec<usize> {
    states
        .iter()
        .map(|obs| obs[..8].iter().position(|&v| v == 1.0).unwrap_or(0) + 3)
        .collect()
}

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

    let mut config = TrainConfig::servers_default(algorithm, seed);
    config.m_steps = 50;
    config.n_batch = 200;
    config.servers_curriculum_minutes = vec![15];
    let out_dir = std::path::PathBuf::from(format!("runs/servers_{algorithm:?}_seed{seed}"));
    println!(
        "training {algorithm:?} on server allocation (seed {seed}) -> {}",
        out_dir.display()
    );
    let run = run_training(&config, &out_dir).expect("training failed");

    let env = ServersEnv::new(config.servers.clone().with_minutes(15)).expect("env");
    let phi0 = env.context_family();
    let n = 2000;
    let mut returns = Vec::with_capacity(n);
    let mut histogram = vec![0usize; 11];
    for i in 0..n {
        let mut rng = substream(seed, &[STREAM_EVAL, 0x5e7, i as u64]);
        let context = phi0.sample(&mut rng);
        let (traj, ret) = rollout(&env, &run.best_params, &context, 0.0, &mut rng).unwrap();
        for n_s in servers_observed(&traj.states) {
            histogram[n_s] += 1;
        }
        returns.push(ret);
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let cvar = cvar_of_samples(&returns, config.alpha).unwrap();
    let modal = histogram
        .iter()
        .enumerate()
        .max_by_key(|(_, &c)| c)
        .map(|(n_s, _)| n_s)
        .unwrap();
    println!("test over {n} episodes (best checkpoint from iteration {}):", run.best_iteration);
    println!("  mean          {mean:.0}");
    println!("  cvar_{:.2}     {cvar:.0}", config.alpha);
    println!("  modal servers {modal}");

    // Forced single-peak episodes show whether the policy scales up on load.
    let mut reactions = 0usize;
    let probes = 50;
    for i in 0..probes {
        let mut rng = substream(seed, &[STREAM_EVAL, 0x9ea7, i as u64]);
        let (traj, _) = rollout(&env, &run.best_params, &[1.0], 0.0, &mut rng).unwrap();
        let counts = servers_observed(&traj.states);
        if counts.iter().max() > counts.iter().min() {
            reactions += 1;
        }
    }
    println!("  peak reaction {reactions}/{probes} forced-peak episodes resized the pool");
}
