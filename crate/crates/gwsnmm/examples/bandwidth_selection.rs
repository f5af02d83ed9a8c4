//! Select the kernel bandwidth at one location by cross-validation
//! with the balancing criterion and print the loss profile.
//!
//! Usage: cargo run --release --example bandwidth_selection [seed]

use gwsnmm::blip::BlipFamily;
use gwsnmm::gwe::{EstimatingConfig, LocalDesign, NuisanceSpec, PolyOrder};
use gwsnmm::nuisance::FeatureMap;
use gwsnmm::panel::Location;
use gwsnmm::simlab::{generate, SimScenario, Surface};
use gwsnmm::tuning::{select_bandwidth, TauGrid};

fn main() -> gwsnmm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let draw = generate(&SimScenario::new(Surface::S3, seed));
    let data = &draw.panel;
    let names = &data.covariate_names;

    let nspec = NuisanceSpec {
        propensity_features: FeatureMap::parse(
            &["1".into(), "X:x1".into(), "cumA".into()],
            names,
        )?,
        outcome_features: Some(FeatureMap::parse(&["1".into(), "X:x1".into()], names)?),
        response_features: None,
        h_features: None,
    };
    let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
    let design = LocalDesign { order: PolyOrder::Linear };
    let grid = TauGrid::auto(data)?;
    let target = Location { s1: 0.25, s2: 0.75 };

    let report = select_bandwidth(data, &target, &grid, 5, seed, &design, &cfg, &nspec)?;
    println!("bandwidth grid and mean held-out balancing loss:");
    for (tau, loss) in grid.values().iter().zip(&report.mean_losses) {
        let marker = if *tau == report.chosen_tau { "  <- chosen" } else { "" };
        match loss {
            Some(l) => println!("  tau {tau:.4}  loss {l:.6}{marker}"),
            None => println!("  tau {tau:.4}  (failed in some fold)"),
        }
    }
    println!("chosen bandwidth: {:.4} over {} folds", report.chosen_tau, report.folds);
    Ok(())
}
