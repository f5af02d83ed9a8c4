//! Wild-bootstrap confidence interval at one location, with the
//! degenerate-weight hook demonstrating the frozen-nuisance identity.
//!
//! Usage: cargo run --release --example wild_bootstrap_ci [seed]

use gwsnmm::blip::BlipFamily;
use gwsnmm::gwe::{EstimatingConfig, LocalDesign, NuisanceSpec, PolyOrder};
use gwsnmm::inference::{wild_bootstrap, BootstrapSpec, WeightLaw};
use gwsnmm::nuisance::FeatureMap;
use gwsnmm::panel::Location;
use gwsnmm::simlab::{generate, truth_at, SimScenario, Surface};
use gwsnmm::tuning::{PipelineConfig, TauGrid};

fn main() -> gwsnmm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(9);
    let draw = generate(&SimScenario::new(Surface::S1, seed));
    let data = &draw.panel;
    let target = Location { s1: 0.25, s2: 0.25 };

    let config = PipelineConfig {
        grid: TauGrid::auto(data)?,
        folds: 5,
        bias_q: 3,
        seed,
        design: LocalDesign { order: PolyOrder::Linear },
        cfg: EstimatingConfig::new(BlipFamily::Lag1Linear),
        nspec: NuisanceSpec {
            propensity_features: FeatureMap::parse(
                &["1".into(), "X:x1".into(), "cumA".into()],
                &data.covariate_names,
            )?,
            outcome_features: Some(FeatureMap::parse(
                &["1".into(), "X:x1".into()],
                &data.covariate_names,
            )?),
            response_features: None,
            h_features: None,
        },
    };

    let spec = BootstrapSpec::new(200, seed)?;
    let result = wild_bootstrap(data, &target, &config, &spec, 0.95)?;
    println!("true effect {:.4}", truth_at(Surface::S1, &target));
    println!(
        "debiased estimate {:.4}, bootstrap variance {:.5} ({} replicates, {} failed)",
        result.psi_bc[0], result.variance[0], result.replicates_used, result.replicates_failed
    );
    println!("95% interval [{:.4}, {:.4}]", result.ci_lower[0], result.ci_upper[0]);

    // degenerate weights: every replicate reproduces the point estimate
    let degenerate = BootstrapSpec { weight_law: WeightLaw::DegenerateOne, ..spec };
    let check = wild_bootstrap(data, &target, &config, &degenerate, 0.95)?;
    println!(
        "degenerate-weight check: variance {} (must be exactly zero)",
        check.variance[0]
    );
    Ok(())
}
