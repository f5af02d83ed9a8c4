//! Temporary diagnostics (not part of the documented examples).
//! Mode 1: fixed-bandwidth variance decomposition at s1*.
//! Mode 2: estimate-vs-bandwidth curve for S3 at s3*.

use gwsnmm::blip::BlipFamily;
use gwsnmm::gwe::{
    solve_local, EstimatingConfig, KernelSpec, LocalDesign, NuisanceSpec, PolyOrder,
    ResponseWeighting, SolverChoice,
};
use gwsnmm::nuisance::FeatureMap;
use gwsnmm::panel::Location;
use gwsnmm::simlab::{generate, truth_at, SimScenario, Surface};
use gwsnmm::tuning::{PipelineConfig, PreparedPipeline, TauGrid};

fn nspec(data: &gwsnmm::panel::PanelDataset) -> NuisanceSpec {
    let names = &data.covariate_names;
    NuisanceSpec {
        propensity_features: FeatureMap::parse(
            &["1".into(), "X:x1".into(), "cumA".into()],
            names,
        )
        .unwrap(),
        outcome_features: Some(
            FeatureMap::parse(&["1".into(), "X:x1".into()], names).unwrap(),
        ),
        response_features: None,
        h_features: None,
    }
}

fn main() {
    let mode: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let reps: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(80);
    match mode {
        1 => fixed_tau_variance(reps),
        2 => curve(reps),
        3 => mode3(reps),
        6 => mode6(reps),
        _ => eprintln!("mode 1, 2 or 3"),
    }
}

/// Raw estimates at fixed tau across draws vs mean bootstrap variance
/// of the reweighted solve (no CV, no bias correction).
fn fixed_tau_variance(reps: usize) {
    let tau = 0.25;
    let target = Location { s1: 0.25, s2: 0.25 };
    let design = LocalDesign { order: PolyOrder::Linear };
    let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
    let mut estimates = Vec::new();
    let mut boot_vars = Vec::new();
    for rep in 0..reps {
        let scenario = SimScenario::new(Surface::S1, 40_000 + rep as u64);
        let draw = generate(&scenario);
        let data = &draw.panel;
        let spec = nspec(data);
        let kernel = KernelSpec::new(tau).unwrap();
        let nuis = gwsnmm::gwe::fit_nuisances(data, &spec, &cfg, Some(&kernel), &design).unwrap();
        let fit =
            solve_local(data, &target, &kernel, &design, &nuis, &cfg, None, SolverChoice::Auto)
                .unwrap();
        estimates.push(fit.psi[0]);
        // bootstrap the solve only, nuisances and tau frozen
        let b = 60;
        let mut reps_psi = Vec::with_capacity(b);
        for rb in 0..b {
            let xi: Vec<f64> = data
                .subjects
                .iter()
                .map(|s| gwsnmm::inference::bootstrap_weight(123, rb as u64, &s.id))
                .collect();
            let f = solve_local(
                data,
                &target,
                &kernel,
                &design,
                &nuis,
                &cfg,
                Some(&xi),
                SolverChoice::Auto,
            )
            .unwrap();
            reps_psi.push(f.psi[0]);
        }
        let mb = reps_psi.iter().sum::<f64>() / b as f64;
        let vb = reps_psi.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (b as f64 - 1.0);
        boot_vars.push(vb);
    }
    let mean = estimates.iter().sum::<f64>() / reps as f64;
    let var =
        estimates.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
    let ve = boot_vars.iter().sum::<f64>() / reps as f64;
    println!("fixed tau {tau}: mean {mean:.4} (truth 0.5)  Var {var:.5}  mean-boot-V {ve:.5}  ratio {:.2}", ve / var);
}

/// Mean raw estimate per grid bandwidth for S3 at s3*.
fn curve(reps: usize) {
    let target = Location { s1: 0.25, s2: 0.75 };
    let truth = truth_at(Surface::S3, &target);
    let design = LocalDesign { order: PolyOrder::Linear };
    let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
    let grid = TauGrid::geometric(0.08, 0.8, 10).unwrap();
    let mut sums = vec![0.0; grid.len()];
    let mut counts = vec![0usize; grid.len()];
    let mut chosen_counts = vec![0usize; grid.len()];
    for rep in 0..reps {
        let scenario = SimScenario::new(Surface::S3, 50_000 + rep as u64);
        let draw = generate(&scenario);
        let data = &draw.panel;
        let pipeline = PreparedPipeline::build(
            data,
            PipelineConfig {
                grid: grid.clone(),
                folds: 5,
                bias_q: 3,
                seed: rep as u64,
                design,
                cfg: cfg.clone(),
                nspec: nspec(data),
            },
        )
        .unwrap();
        let (chosen, _) = pipeline.choose_bandwidth(data, &target, None, None).unwrap();
        chosen_counts[chosen] += 1;
        for (ti, est) in pipeline.grid_estimates(data, &target, None).iter().enumerate()
        {
            if let Some(e) = est {
                sums[ti] += e[0];
                counts[ti] += 1;
            }
        }
    }
    println!("truth at target: {truth:.4}");
    for (ti, &tau) in grid.values().iter().enumerate() {
        let mean = if counts[ti] > 0 { sums[ti] / counts[ti] as f64 } else { f64::NAN };
        println!(
            "tau {tau:.3}: mean est {mean:.4} (bias {:+.4})  ok {}  chosen {}x",
            mean - truth,
            counts[ti],
            chosen_counts[ti]
        );
    }
}

/// Appended diagnostics: full-pipeline per-draw records at s1*.
#[allow(dead_code)]
fn mode3(reps: usize) {
    use gwsnmm::inference::{analyze_targets, AnalysisOptions, BootstrapSpec};
    let target = Location { s1: 0.25, s2: 0.25 };
    let design = LocalDesign { order: PolyOrder::Linear };
    let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
    let mut taus = Vec::new();
    let mut debiased = Vec::new();
    let mut raws = Vec::new();
    let mut ves = Vec::new();
    for rep in 0..reps {
        let scenario = SimScenario::new(Surface::S1, 60_000 + rep as u64);
        let draw = generate(&scenario);
        let data = &draw.panel;
        let opts = AnalysisOptions {
            pipeline: PipelineConfig {
                grid: TauGrid::auto(data).unwrap(),
                folds: 5,
                bias_q: 3,
                seed: rep as u64,
                design,
                cfg: cfg.clone(),
                nspec: nspec(data),
            },
            bootstrap: BootstrapSpec::new(50, rep as u64).unwrap(),
            ci_level: 0.95,
        };
        let a = &analyze_targets(data, &[target], &opts).unwrap()[0];
        taus.push(a.cv.chosen_tau);
        raws.push(a.fit.psi[0]);
        debiased.push(a.inference.psi_bc[0]);
        ves.push(a.inference.variance[0]);
    }
    let stat = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0);
        (m, var)
    };
    let (mr, vr) = stat(&raws);
    let (md, vd) = stat(&debiased);
    let (mv, _) = stat(&ves);
    println!("raw: mean {mr:.4} var {vr:.5}");
    println!("debiased: mean {md:.4} var {vd:.5}");
    println!("mean Ve {mv:.5}  Ve/Var(debiased) {:.2}", mv / vd);
    let mut tc: Vec<(String, usize)> = Vec::new();
    for t in &taus {
        let key = format!("{t:.3}");
        match tc.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => *c += 1,
            None => tc.push((key, 1)),
        }
    }
    tc.sort();
    println!("chosen tau counts: {tc:?}");
}

/// Conditional-variance check: locations fixed across draws, dynamics
/// fresh; compares the across-draw variance to the mean bootstrap
/// variance at s1*.
#[allow(dead_code)]
fn mode6(reps: usize) {
    use gwsnmm::inference::{analyze_targets, AnalysisOptions, BootstrapSpec};
    use gwsnmm::panel::{PanelDataset, SubjectRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    let n = 400usize;
    let horizon = 25usize;
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    // master locations
    let mut loc_rng = ChaCha8Rng::seed_from_u64(777);
    let locations: Vec<Location> = (0..n)
        .map(|_| Location { s1: loc_rng.random::<f64>(), s2: loc_rng.random::<f64>() })
        .collect();

    let target = Location { s1: 0.25, s2: 0.25 };
    let design = LocalDesign { order: PolyOrder::Linear };
    let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
    let mut debiased = Vec::new();
    let mut ves = Vec::new();
    for rep in 0..reps {
        // fresh dynamics at fixed locations, S1 surface
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(90_000 + rep as u64);
            rng.set_stream(i as u64);
            let t = horizon + 1;
            let x0 = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
            let xe = Normal::new(0.0, (0.5 * 0.75f64).sqrt()).unwrap();
            let mut x = vec![x0.sample(&mut rng)];
            for k in 1..t {
                let prev = x[k - 1];
                x.push(0.5 * prev + xe.sample(&mut rng));
            }
            let e0 = Normal::new(0.0, 0.25f64.sqrt()).unwrap();
            let ee = Normal::new(0.0, (0.25 * 0.9375f64).sqrt()).unwrap();
            let mut eps = vec![e0.sample(&mut rng)];
            for k in 1..t {
                let prev = eps[k - 1];
                eps.push(0.25 * prev + ee.sample(&mut rng));
            }
            let mut a = Vec::with_capacity(t);
            let mut cum = 0.0;
            for k in 0..t {
                let p = expit(-1.0 + 0.5 * x[k] + 0.25 * cum);
                let av = u8::from(rng.random::<f64>() < p);
                cum += f64::from(av);
                a.push(av);
            }
            let psi = locations[i].s1 + locations[i].s2;
            let mut y = Vec::with_capacity(t);
            for k in 0..t {
                let mut v = x[k] + eps[k];
                if k > 0 {
                    v += psi * f64::from(a[k - 1]);
                }
                y.push(v);
            }
            subjects.push(SubjectRecord {
                id: format!("s{i:04}"),
                location: locations[i],
                first_time_index: 0,
                treatment: a.iter().map(|&v| Some(v)).collect(),
                covariates: x.iter().map(|&v| vec![Some(v)]).collect(),
                outcome: y.iter().map(|&v| Some(v)).collect(),
                response: vec![1; t],
            });
        }
        let data = PanelDataset::new(subjects, vec!["x1".into()]).unwrap();
        let opts = AnalysisOptions {
            pipeline: PipelineConfig {
                grid: TauGrid::auto(&data).unwrap(),
                folds: 5,
                bias_q: 3,
                seed: rep as u64,
                design,
                cfg: cfg.clone(),
                nspec: nspec(&data),
            },
            bootstrap: BootstrapSpec::new(50, rep as u64).unwrap(),
            ci_level: 0.95,
        };
        let a = &analyze_targets(&data, &[target], &opts).unwrap()[0];
        debiased.push(a.inference.psi_bc[0]);
        ves.push(a.inference.variance[0]);
    }
    let m = debiased.iter().sum::<f64>() / reps as f64;
    let var = debiased.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (reps as f64 - 1.0);
    let ve = ves.iter().sum::<f64>() / reps as f64;
    println!("fixed locations: mean {m:.4} Var {var:.5} mean Ve {ve:.5} ratio {:.2}", ve / var);
}
