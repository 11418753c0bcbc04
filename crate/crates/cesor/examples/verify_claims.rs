//! Run the built-in claim verifiers and print their JSON verdicts.
//!
//! ```bash
//! cargo run --release --example verify_claims            # quick scale
//! cargo run --release --example verify_claims -- --full  # acceptance scale
//! ```
//!
//! The quick scale finishes in a few seconds; `--full` runs the blindness
//! Monte Carlo at 10^4 trials x 10^4 steps and the variance check at 2000
//! repeats, matching the acceptance suite.

use cesor::analysis::{verify_barrier, verify_blindness, verify_gradcheck, verify_variance};

fn main() {
    let full = std::env::args().any(|a| a == "--full");
    let (trials, steps, repeats, batch) = if full {
        (10_000, 10_000, 2000, 400)
    } else {
        (1000, 100, 500, 200)
    };

    let mut verdicts = verify_gradcheck(0, 34, 0.0).expect("gradcheck");
    verdicts.push(verify_barrier(0, 200).expect("barrier"));
    verdicts.push(verify_blindness(0.05, 0.25, batch, steps, trials, 0).expect("blindness"));
    verdicts.extend(verify_variance(&[0.05, 0.1, 0.2], batch, repeats, 0).expect("variance"));

    println!("{}", serde_json::to_string_pretty(&verdicts).unwrap());
    let all_pass = verdicts.iter().all(|v| v.pass);
    eprintln!(
        "{} of {} verifiers passed",
        verdicts.iter().filter(|v| v.pass).count(),
        verdicts.len()
    );
    std::process::exit(if all_pass { 0 } else { 1 });
}
