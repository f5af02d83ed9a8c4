//! Generate a synthetic panel, write it as CSV, and reload it.
//!
//! Usage: cargo run --release --example simulate_panel [seed]

use gwsnmm::panel::{load_panel_csv, write_panel_csv, CsvSchema};
use gwsnmm::simlab::{generate, SimScenario, Surface};

fn main() -> gwsnmm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(7);
    let scenario = SimScenario {
        n: 200,
        horizon: 12,
        missingness: true,
        ..SimScenario::new(Surface::S2, seed)
    };
    let draw = generate(&scenario);

    let dir = std::env::temp_dir().join("gwsnmm_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("panel.csv");
    write_panel_csv(&draw.panel, &path)?;
    let reloaded = load_panel_csv(&path, &CsvSchema::default())?;

    let responded: usize = reloaded
        .subjects
        .iter()
        .map(|s| s.response.iter().filter(|&&r| r == 1).count())
        .sum();
    println!("wrote {}", path.display());
    println!(
        "subjects {} | waves {} | response rate {:.3}",
        reloaded.n_subjects(),
        reloaded.time_count,
        responded as f64 / (reloaded.n_subjects() * reloaded.time_count) as f64
    );
    let s = &reloaded.subjects[0];
    println!(
        "first subject at ({:.3}, {:.3}), true effect {:.3}",
        s.location.s1, s.location.s2, draw.truth.psi[0]
    );
    Ok(())
}
