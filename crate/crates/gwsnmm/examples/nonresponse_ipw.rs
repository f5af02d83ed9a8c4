//! Informative non-response: estimate the response model from the
//! instrument moment system, then compare the unweighted complete-case
//! estimator with inverse-probability weighting.
//!
//! Usage: cargo run --release --example nonresponse_ipw [seed]

use gwsnmm::blip::BlipFamily;
use gwsnmm::gwe::{
    EstimatingConfig, LocalDesign, NuisanceSpec, PolyOrder, ResponseWeighting,
};
use gwsnmm::inference::{analyze_targets, AnalysisOptions, BootstrapSpec};
use gwsnmm::nuisance::{fit_response_gmm, FeatureMap};
use gwsnmm::panel::Location;
use gwsnmm::simlab::{generate, truth_at, SimScenario, Surface};
use gwsnmm::tuning::{PipelineConfig, TauGrid};

fn main() -> gwsnmm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(21);
    let scenario = SimScenario { missingness: true, ..SimScenario::new(Surface::S1, seed) };
    let draw = generate(&scenario);
    let data = &draw.panel;
    let names = &data.covariate_names;

    // response model: logistic in the current outcome and the response
    // history; the covariate is the non-response instrument
    let rmap = FeatureMap::parse(&["1".into(), "Y".into(), "cumR".into()], names)?;
    let hmap = FeatureMap::parse(
        &["1".into(), "cumR".into(), "X:x1".into(), "X2:x1".into()],
        names,
    )?;
    let response_model = fit_response_gmm(data, &rmap, &hmap)?;
    println!(
        "response model eta = ({:+.3}, {:+.3}, {:+.3})  (generator: -1, +0.5, +0.25)",
        response_model.eta[0], response_model.eta[1], response_model.eta[2]
    );

    let target = Location { s1: 0.75, s2: 0.75 };
    let truth = truth_at(Surface::S1, &target);
    for (label, weighting) in [
        ("complete-case (weights = 1)", ResponseWeighting::ConstantOne),
        ("inverse probability weighted", ResponseWeighting::InverseProbability),
    ] {
        let mut cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        cfg.response = weighting;
        let nspec = NuisanceSpec {
            propensity_features: FeatureMap::parse(
                &["1".into(), "X:x1".into(), "cumA".into()],
                names,
            )?,
            outcome_features: Some(FeatureMap::parse(&["1".into(), "X:x1".into()], names)?),
            response_features: (weighting == ResponseWeighting::InverseProbability)
                .then(|| rmap.clone()),
            h_features: (weighting == ResponseWeighting::InverseProbability)
                .then(|| hmap.clone()),
        };
        let options = AnalysisOptions {
            pipeline: PipelineConfig {
                grid: TauGrid::auto(data)?,
                folds: 5,
                bias_q: 3,
                seed,
                design: LocalDesign { order: PolyOrder::Linear },
                cfg,
                nspec,
            },
            bootstrap: BootstrapSpec::new(50, seed)?,
            ci_level: 0.95,
        };
        let a = &analyze_targets(data, &[target], &options)?[0];
        println!(
            "{label}: psi {:+.3} [{:+.3}, {:+.3}]  (truth {truth:+.3})",
            a.inference.psi_bc[0], a.inference.ci_lower[0], a.inference.ci_upper[0]
        );
    }
    Ok(())
}
