//! Temporary calibration pilot (not part of the documented examples).
use gwsnmm::simlab::{run_table1, run_table2, NuisanceCombo, ReplicationOptions, Table2Estimator};
use gwsnmm::tuning::TauGrid;

fn main() -> gwsnmm::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let table: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    let lo: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.0);
    let hi: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.0);
    let combo: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let mut opts = ReplicationOptions::new(reps, 2024);
    if lo > 0.0 && hi > lo {
        opts.grid = Some(TauGrid::geometric(lo, hi, 10)?);
        eprintln!("grid: [{lo}, {hi}] x10 geometric");
    }
    let started = std::time::Instant::now();
    let summary = if table == 1 {
        let all = [
            NuisanceCombo { propensity_correct: true, outcome_correct: true },
            NuisanceCombo { propensity_correct: false, outcome_correct: true },
            NuisanceCombo { propensity_correct: true, outcome_correct: false },
            NuisanceCombo { propensity_correct: false, outcome_correct: false },
        ];
        let combos: Vec<NuisanceCombo> =
            if combo == 0 { all.to_vec() } else { vec![all[combo - 1]] };
        run_table1(&opts, &combos)?
    } else {
        run_table2(&opts, &[Table2Estimator::Ipw, Table2Estimator::ConstantOne])?
    };
    println!("{}", summary.to_text());
    eprintln!("elapsed: {:.1?}", started.elapsed());
    Ok(())
}
