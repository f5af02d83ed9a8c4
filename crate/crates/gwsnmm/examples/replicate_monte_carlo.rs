//! Run a small Monte Carlo replication of the simulation study and
//! print the summary table.
//!
//! Usage: cargo run --release --example replicate_monte_carlo [reps] [table]

use gwsnmm::simlab::{
    run_table1, run_table2, NuisanceCombo, ReplicationOptions, Table2Estimator,
};

fn main() -> gwsnmm::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let table: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);

    let opts = ReplicationOptions::new(reps, 2024);
    let started = std::time::Instant::now();
    let summary = match table {
        1 => {
            let combos = [
                NuisanceCombo { propensity_correct: true, outcome_correct: true },
                NuisanceCombo { propensity_correct: false, outcome_correct: true },
                NuisanceCombo { propensity_correct: true, outcome_correct: false },
                NuisanceCombo { propensity_correct: false, outcome_correct: false },
            ];
            run_table1(&opts, &combos)?
        }
        2 => run_table2(&opts, &[Table2Estimator::Ipw, Table2Estimator::ConstantOne])?,
        other => {
            eprintln!("unknown table {other}, expected 1 or 2");
            std::process::exit(2);
        }
    };
    println!("{}", summary.to_text());
    eprintln!("elapsed: {:.1?} for {reps} replicates", started.elapsed());
    Ok(())
}
