//! Synthetic panel generator and the Monte Carlo harness.
//!
//! Subjects sit uniformly on the unit square. The covariate follows a
//! stationary AR(1) with variance 0.5 and lag-one correlation 0.5; the
//! baseline outcome adds an independent AR(1) noise with variance 0.25
//! and lag-one correlation 0.25. Treatment is Bernoulli with
//! `logit e = -1 + 0.5 X + 0.25 cumA`, and the observed outcome adds
//! the lag-one effect `psi(s) A_{k-1}` of the chosen surface. With
//! missingness on, response is Bernoulli with
//! `logit pi = -1 + 0.5 Y + 0.25 cumR`; a non-responding time hides the
//! treatment and outcome but never the covariate, which therefore acts
//! as a non-response instrument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::blip::{BlipFamily, BlipParams};
use crate::error::{Error, Result};
use crate::gwe::{
    EstimatingConfig, LocalDesign, NuisanceSpec, PolyOrder, ResponseWeighting,
};
use crate::inference::{analyze_targets, AnalysisOptions, BootstrapSpec};
use crate::nuisance::FeatureMap;
use crate::panel::{Location, PanelDataset, SubjectRecord};
use crate::tuning::{PipelineConfig, TauGrid};

/// True effect surface over the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    /// `s1 + s2` (a tilted plane).
    S1,
    /// `exp(s1 + s2)`.
    S2,
    /// `sin(2 (s1 + 2 s2 - 1))`.
    S3,
    /// Identically zero (test hook).
    Zero,
}

impl Surface {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(Surface::S1),
            "S2" | "s2" => Ok(Surface::S2),
            "S3" | "s3" => Ok(Surface::S3),
            "zero" | "Zero" => Ok(Surface::Zero),
            other => Err(Error::Validation(format!("unknown scenario {other:?}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Surface::S1 => "S1",
            Surface::S2 => "S2",
            Surface::S3 => "S3",
            Surface::Zero => "zero",
        }
    }
}

/// True effect value of a surface at a location.
pub fn truth_at(surface: Surface, s: &Location) -> f64 {
    match surface {
        Surface::S1 => s.s1 + s.s2,
        Surface::S2 => (s.s1 + s.s2).exp(),
        Surface::S3 => (2.0 * (s.s1 + 2.0 * s.s2 - 1.0)).sin(),
        Surface::Zero => 0.0,
    }
}

/// The four benchmark evaluation locations with coordinates in
/// `{0.25, 0.75}`, ordered to match the reported tables.
pub const SIM_TARGETS: [Location; 4] = [
    Location { s1: 0.25, s2: 0.25 },
    Location { s1: 0.75, s2: 0.25 },
    Location { s1: 0.25, s2: 0.75 },
    Location { s1: 0.75, s2: 0.75 },
];

/// A fully specified data-generating process.
#[derive(Debug, Clone, Copy)]
pub struct SimScenario {
    pub surface: Surface,
    pub n: usize,
    /// Largest time index; the panel has `horizon + 1` waves.
    pub horizon: usize,
    pub missingness: bool,
    pub seed: u64,
}

impl SimScenario {
    pub fn new(surface: Surface, seed: u64) -> Self {
        SimScenario { surface, n: 400, horizon: 25, missingness: false, seed }
    }
}

/// Stored generator state alongside the observable panel.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// Untreated potential outcome series per subject.
    pub baseline: Vec<Vec<f64>>,
    /// True effect value at each subject's location.
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDraw {
    pub panel: PanelDataset,
    pub truth: SimTruth,
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const COV_VAR: f64 = 0.5;
const COV_RHO: f64 = 0.5;
const NOISE_VAR: f64 = 0.25;
const NOISE_RHO: f64 = 0.25;

struct SubjectDraw {
    location: Location,
    x: Vec<f64>,
    treatment: Vec<u8>,
    baseline: Vec<f64>,
    outcome: Vec<f64>,
    response: Vec<u8>,
}

/// Draw one subject's processes; `effect(m, k, a_m)` is the blip of
/// treatment at `m` on the outcome at `k`.
fn draw_subject(
    rng: &mut ChaCha8Rng,
    horizon: usize,
    missingness: bool,
    effect: &dyn Fn(usize, usize, f64) -> f64,
) -> SubjectDraw {
    let t = horizon + 1;
    let location = Location { s1: rng.random::<f64>(), s2: rng.random::<f64>() };

    // stationary AR(1) covariate and noise paths
    let x0 = Normal::new(0.0, COV_VAR.sqrt()).unwrap();
    let xe = Normal::new(0.0, (COV_VAR * (1.0 - COV_RHO * COV_RHO)).sqrt()).unwrap();
    let mut x = Vec::with_capacity(t);
    x.push(x0.sample(rng));
    for k in 1..t {
        x.push(COV_RHO * x[k - 1] + xe.sample(rng));
    }
    let e0 = Normal::new(0.0, NOISE_VAR.sqrt()).unwrap();
    let ee = Normal::new(0.0, (NOISE_VAR * (1.0 - NOISE_RHO * NOISE_RHO)).sqrt()).unwrap();
    let mut eps = Vec::with_capacity(t);
    eps.push(e0.sample(rng));
    for k in 1..t {
        eps.push(NOISE_RHO * eps[k - 1] + ee.sample(rng));
    }

    // sequential treatment
    let mut treatment = Vec::with_capacity(t);
    let mut cum_a = 0.0;
    for k in 0..t {
        let p = expit(-1.0 + 0.5 * x[k] + 0.25 * cum_a);
        let a = u8::from(rng.random::<f64>() < p);
        cum_a += f64::from(a);
        treatment.push(a);
    }

    // outcomes: baseline plus accumulated treatment effects
    let mut baseline = Vec::with_capacity(t);
    let mut outcome = Vec::with_capacity(t);
    for k in 0..t {
        let y0 = x[k] + eps[k];
        baseline.push(y0);
        let mut y = y0;
        for m in 0..=k {
            y += effect(m, k, f64::from(treatment[m]));
        }
        outcome.push(y);
    }

    // response indicators (after outcomes: response depends on the
    // possibly missing current outcome)
    let mut response = Vec::with_capacity(t);
    if missingness {
        let mut cum_r = 0.0;
        for k in 0..t {
            let p = expit(-1.0 + 0.5 * outcome[k] + 0.25 * cum_r);
            let r = u8::from(rng.random::<f64>() < p);
            cum_r += f64::from(r);
            response.push(r);
        }
    } else {
        response = vec![1; t];
    }

    SubjectDraw { location, x, treatment, baseline, outcome, response }
}

fn assemble_panel(draws: Vec<SubjectDraw>, psi: Vec<f64>) -> SimDraw {
    let mut subjects = Vec::with_capacity(draws.len());
    let mut baseline = Vec::with_capacity(draws.len());
    for (i, d) in draws.into_iter().enumerate() {
        let t = d.x.len();
        let mut treatment = Vec::with_capacity(t);
        let mut outcome = Vec::with_capacity(t);
        let mut covariates = Vec::with_capacity(t);
        for k in 0..t {
            let observed = d.response[k] == 1;
            treatment.push(observed.then_some(d.treatment[k]));
            outcome.push(observed.then_some(d.outcome[k]));
            covariates.push(vec![Some(d.x[k])]);
        }
        subjects.push(SubjectRecord {
            id: format!("s{i:04}"),
            location: d.location,
            first_time_index: 0,
            treatment,
            covariates,
            outcome,
            response: d.response,
        });
        baseline.push(d.baseline);
    }
    let panel = PanelDataset::new(subjects, vec!["x1".into()]).expect("generator invariants");
    SimDraw { panel, truth: SimTruth { baseline, psi } }
}

/// Generate a synthetic panel with the lag-one linear effect.
pub fn generate(scenario: &SimScenario) -> SimDraw {
    let mut draws = Vec::with_capacity(scenario.n);
    let mut psi = Vec::with_capacity(scenario.n);
    for i in 0..scenario.n {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(i as u64);
        // the effect needs the location, so peek it deterministically:
        // draw_subject consumes the same two uniforms first
        let mut peek = rng.clone();
        let loc = Location { s1: peek.random::<f64>(), s2: peek.random::<f64>() };
        let effect_size = truth_at(scenario.surface, &loc);
        let effect =
            move |m: usize, k: usize, a: f64| if k == m + 1 { effect_size * a } else { 0.0 };
        let d = draw_subject(&mut rng, scenario.horizon, scenario.missingness, &effect);
        debug_assert_eq!(d.location, loc);
        psi.push(effect_size);
        draws.push(d);
    }
    assemble_panel(draws, psi)
}

/// Generate a synthetic monthly panel whose treatment effects follow
/// the squared-exponential lag curve at fixed parameters.
pub fn generate_gaussian_lag(
    n: usize,
    horizon: usize,
    params: &BlipParams,
    seed: u64,
) -> Result<SimDraw> {
    if params.len() != 3 || params.0[2] <= 0.0 {
        return Err(Error::Validation(
            "gaussian-lag generator needs (psi, mu, sigma2) with sigma2 > 0".into(),
        ));
    }
    let (psi, mu, sigma2) = (params.0[0], params.0[1], params.0[2]);
    let mut draws = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let effect = move |m: usize, k: usize, a: f64| {
            let lag = (k - m) as f64;
            psi * (-(lag - mu) * (lag - mu) / (2.0 * sigma2)).exp() * a
        };
        draws.push(draw_subject(&mut rng, horizon, false, &effect));
    }
    Ok(assemble_panel(draws, vec![psi; n]))
}

// ---------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------

/// Which nuisance models the replication run fits correctly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NuisanceCombo {
    pub propensity_correct: bool,
    pub outcome_correct: bool,
}

impl NuisanceCombo {
    pub fn label(&self) -> String {
        let tick = |b: bool| if b { "correct" } else { "wrong" };
        format!("pp={},om={}", tick(self.propensity_correct), tick(self.outcome_correct))
    }
}

/// Estimators compared under informative non-response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table2Estimator {
    /// Non-response weights set to one (misspecified response model).
    ConstantOne,
    /// Inverse-probability-of-response weighting with the instrument.
    Ipw,
}

impl Table2Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Table2Estimator::ConstantOne => "GWLPc1",
            Table2Estimator::Ipw => "GWLPipw",
        }
    }
}

/// Settings for a replication run.
#[derive(Debug, Clone)]
pub struct ReplicationOptions {
    pub reps: usize,
    pub n: usize,
    pub horizon: usize,
    pub seed: u64,
    pub bootstrap: usize,
    pub folds: usize,
    /// Explicit bandwidth grid; `None` derives one from each draw.
    pub grid: Option<TauGrid>,
    pub order: PolyOrder,
    pub bias_q: usize,
    pub ci_level: f64,
}

impl ReplicationOptions {
    pub fn new(reps: usize, seed: u64) -> Self {
        ReplicationOptions {
            reps,
            n: 400,
            horizon: 25,
            seed,
            bootstrap: 50,
            folds: 5,
            grid: None,
            order: PolyOrder::Linear,
            bias_q: 3,
            ci_level: 0.95,
        }
    }
}

/// Aggregated results for one scenario/variant/location cell.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub scenario: String,
    pub variant: String,
    pub location: Location,
    pub truth: f64,
    /// Monte Carlo mean of the bias-corrected estimate.
    pub est: f64,
    /// Monte Carlo variance of the estimate.
    pub var: f64,
    /// Mean bootstrap variance estimate.
    pub ve: f64,
    /// Coverage rate of the nominal-level interval, in percent.
    pub cr: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

/// One replicate's per-target results.
struct RepResult {
    est: Vec<f64>,
    ve: Vec<f64>,
    covered: Vec<bool>,
}

fn covariate_features(correct: bool) -> Vec<String> {
    if correct {
        vec!["1".into(), "X:x1".into(), "cumA".into()]
    } else {
        vec!["1".into(), "X2:x1".into(), "cumA2".into()]
    }
}

fn sim_nuisance_spec(
    data: &PanelDataset,
    combo: NuisanceCombo,
    response: ResponseWeighting,
) -> Result<NuisanceSpec> {
    let names = &data.covariate_names;
    let propensity_features = FeatureMap::parse(&covariate_features(combo.propensity_correct), names)?;
    let outcome_features = if combo.outcome_correct {
        Some(FeatureMap::parse(&["1".into(), "X:x1".into()], names)?)
    } else {
        None
    };
    let (response_features, h_features) = if response == ResponseWeighting::InverseProbability {
        (
            Some(FeatureMap::parse(&["1".into(), "Y".into(), "cumR".into()], names)?),
            Some(FeatureMap::parse(
                &["1".into(), "cumR".into(), "X:x1".into(), "X2:x1".into()],
                names,
            )?),
        )
    } else {
        (None, None)
    };
    Ok(NuisanceSpec { propensity_features, outcome_features, response_features, h_features })
}

fn replicate_seed(seed: u64, scenario_idx: u64, rep: u64) -> u64 {
    // distinct, well-separated streams per (scenario, replicate)
    seed.wrapping_add(scenario_idx.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(rep.wrapping_mul(0xD1B54A32D192ED03))
}

/// Run one replicate for one variant; returns per-target results.
fn run_replicate(
    draw: &SimDraw,
    surface: Surface,
    combo: NuisanceCombo,
    response: ResponseWeighting,
    opts: &ReplicationOptions,
    rep_seed: u64,
) -> Result<RepResult> {
    let data = &draw.panel;
    let nspec = sim_nuisance_spec(data, combo, response)?;
    let mut cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
    cfg.response = response;
    let grid = match &opts.grid {
        Some(g) => g.clone(),
        None => TauGrid::auto(data)?,
    };
    let options = AnalysisOptions {
        pipeline: PipelineConfig {
            grid,
            folds: opts.folds,
            bias_q: opts.bias_q,
            seed: rep_seed,
            design: LocalDesign { order: opts.order },
            cfg,
            nspec,
        },
        bootstrap: BootstrapSpec::new(opts.bootstrap, rep_seed)?,
        ci_level: opts.ci_level,
    };
    let analyses = analyze_targets(data, &SIM_TARGETS, &options)?;
    let mut est = Vec::with_capacity(SIM_TARGETS.len());
    let mut ve = Vec::with_capacity(SIM_TARGETS.len());
    let mut covered = Vec::with_capacity(SIM_TARGETS.len());
    for (t, a) in SIM_TARGETS.iter().zip(&analyses) {
        let truth = truth_at(surface, t);
        est.push(a.inference.psi_bc[0]);
        ve.push(a.inference.variance[0]);
        covered.push(a.inference.ci_lower[0] <= truth && truth <= a.inference.ci_upper[0]);
    }
    Ok(RepResult { est, ve, covered })
}

fn aggregate_rows(
    scenario: Surface,
    variant: &str,
    results: &[Option<RepResult>],
) -> Vec<SummaryRow> {
    let mut rows = Vec::with_capacity(SIM_TARGETS.len());
    let total = results.len();
    let ok: Vec<&RepResult> = results.iter().flatten().collect();
    let failures = total - ok.len();
    for (ti, target) in SIM_TARGETS.iter().enumerate() {
        let n = ok.len().max(1) as f64;
        let mean_est = ok.iter().map(|r| r.est[ti]).sum::<f64>() / n;
        let var = if ok.len() > 1 {
            ok.iter().map(|r| (r.est[ti] - mean_est).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mean_ve = ok.iter().map(|r| r.ve[ti]).sum::<f64>() / n;
        let cr = 100.0 * ok.iter().filter(|r| r.covered[ti]).count() as f64 / n;
        rows.push(SummaryRow {
            scenario: scenario.label().to_string(),
            variant: variant.to_string(),
            location: *target,
            truth: truth_at(scenario, target),
            est: mean_est,
            var,
            ve: mean_ve,
            cr,
            replicates: ok.len(),
            failures,
        });
    }
    rows
}

const TABLE_SCENARIOS: [Surface; 3] = [Surface::S1, Surface::S2, Surface::S3];

/// Replicate the complete-data study: three scenarios by four nuisance
/// combinations, each cell a Monte Carlo over fresh draws.
pub fn run_table1(opts: &ReplicationOptions, combos: &[NuisanceCombo]) -> Result<SummaryTable> {
    if opts.reps < 2 {
        return Err(Error::Validation("need at least 2 replicates".into()));
    }
    let mut rows = Vec::new();
    for (si, &surface) in TABLE_SCENARIOS.iter().enumerate() {
        let per_rep: Vec<Vec<Option<RepResult>>> = (0..opts.reps)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = replicate_seed(opts.seed, si as u64, rep as u64);
                let scenario = SimScenario {
                    surface,
                    n: opts.n,
                    horizon: opts.horizon,
                    missingness: false,
                    seed: rep_seed,
                };
                let draw = generate(&scenario);
                combos
                    .iter()
                    .map(|&combo| {
                        run_replicate(
                            &draw,
                            surface,
                            combo,
                            ResponseWeighting::FullData,
                            opts,
                            rep_seed,
                        )
                        .ok()
                    })
                    .collect()
            })
            .collect();
        for (ci, combo) in combos.iter().enumerate() {
            let results: Vec<Option<RepResult>> =
                per_rep.iter().map(|r| r[ci].as_ref().map(clone_rep)).collect();
            rows.extend(aggregate_rows(surface, &combo.label(), &results));
        }
    }
    Ok(SummaryTable { rows })
}

fn clone_rep(r: &RepResult) -> RepResult {
    RepResult { est: r.est.clone(), ve: r.ve.clone(), covered: r.covered.clone() }
}

/// Replicate the non-response study: three scenarios by the two
/// response-handling estimators, on draws with missingness.
pub fn run_table2(opts: &ReplicationOptions, estimators: &[Table2Estimator]) -> Result<SummaryTable> {
    if opts.reps < 2 {
        return Err(Error::Validation("need at least 2 replicates".into()));
    }
    let combo = NuisanceCombo { propensity_correct: true, outcome_correct: true };
    let mut rows = Vec::new();
    for (si, &surface) in TABLE_SCENARIOS.iter().enumerate() {
        let per_rep: Vec<Vec<Option<RepResult>>> = (0..opts.reps)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = replicate_seed(opts.seed, 100 + si as u64, rep as u64);
                let scenario = SimScenario {
                    surface,
                    n: opts.n,
                    horizon: opts.horizon,
                    missingness: true,
                    seed: rep_seed,
                };
                let draw = generate(&scenario);
                estimators
                    .iter()
                    .map(|est| {
                        let response = match est {
                            Table2Estimator::ConstantOne => ResponseWeighting::ConstantOne,
                            Table2Estimator::Ipw => ResponseWeighting::InverseProbability,
                        };
                        run_replicate(&draw, surface, combo, response, opts, rep_seed).ok()
                    })
                    .collect()
            })
            .collect();
        for (ei, est) in estimators.iter().enumerate() {
            let results: Vec<Option<RepResult>> =
                per_rep.iter().map(|r| r[ei].as_ref().map(clone_rep)).collect();
            rows.extend(aggregate_rows(surface, est.label(), &results));
        }
    }
    Ok(SummaryTable { rows })
}

impl SummaryTable {
    /// Long-format CSV: one metric per row, raw (unscaled) values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,variant,s1,s2,metric,value\n");
        for r in &self.rows {
            let mut push = |metric: &str, value: f64| {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.scenario, r.variant, r.location.s1, r.location.s2, metric, value
                ));
            };
            push("true", r.truth);
            push("est", r.est);
            push("var", r.var);
            push("ve", r.ve);
            push("cr", r.cr);
            push("failures", r.failures as f64);
        }
        out
    }

    /// Aligned text rendering in the layout of the published tables:
    /// the estimate and truth scaled by 100, variances by 1000, and the
    /// coverage in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "Monte Carlo summary (Est, True x100; Var, Ve x1000; Cr %), locations in table order\n",
        );
        let mut variants: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
        }
        let mut scenarios: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !scenarios.contains(&r.scenario.as_str()) {
                scenarios.push(&r.scenario);
            }
        }
        for variant in &variants {
            out.push_str(&format!("\n[{variant}]\n"));
            out.push_str(&format!(
                "{:<10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
                "scenario", "metric", "s1*", "s2*", "s3*", "s4*"
            ));
            for scenario in &scenarios {
                let cells: Vec<&SummaryRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.scenario == *scenario && r.variant == *variant)
                    .collect();
                if cells.len() != 4 {
                    continue;
                }
                let line = |metric: &str, vals: [f64; 4]| {
                    format!(
                        "{:<10}{:>10}{:>10.1}{:>10.1}{:>10.1}{:>10.1}\n",
                        scenario, metric, vals[0], vals[1], vals[2], vals[3]
                    )
                };
                out.push_str(&line(
                    "True",
                    [0, 1, 2, 3].map(|i| 100.0 * cells[i].truth),
                ));
                out.push_str(&line("Est", [0, 1, 2, 3].map(|i| 100.0 * cells[i].est)));
                out.push_str(&line("Var", [0, 1, 2, 3].map(|i| 1000.0 * cells[i].var)));
                out.push_str(&line("Ve", [0, 1, 2, 3].map(|i| 1000.0 * cells[i].ve)));
                out.push_str(&line("Cr", [0, 1, 2, 3].map(|i| cells[i].cr)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truth_values_match_reported_table() {
        assert_relative_eq!(truth_at(Surface::S1, &SIM_TARGETS[0]), 0.50, epsilon = 1e-12);
        assert_relative_eq!(truth_at(Surface::S1, &SIM_TARGETS[3]), 1.50, epsilon = 1e-12);
        assert_relative_eq!(
            truth_at(Surface::S2, &SIM_TARGETS[3]),
            4.4816890703380645,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            truth_at(Surface::S3, &SIM_TARGETS[0]),
            -0.479425538604203,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            truth_at(Surface::S3, &SIM_TARGETS[1]),
            0.479425538604203,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            truth_at(Surface::S3, &SIM_TARGETS[2]),
            0.9974949866040544,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            truth_at(Surface::S3, &SIM_TARGETS[3]),
            0.5984721441039564,
            epsilon = 1e-12
        );
    }

    #[test]
    fn generator_is_deterministic() {
        let scenario = SimScenario { missingness: true, ..SimScenario::new(Surface::S1, 11) };
        let a = generate(&scenario);
        let b = generate(&scenario);
        for (sa, sb) in a.panel.subjects.iter().zip(&b.panel.subjects) {
            assert_eq!(sa.id, sb.id);
            assert_eq!(sa.location, sb.location);
            assert_eq!(sa.treatment, sb.treatment);
            assert_eq!(sa.outcome, sb.outcome);
            assert_eq!(sa.response, sb.response);
            assert_eq!(sa.covariates, sb.covariates);
        }
        assert_eq!(a.truth.baseline, b.truth.baseline);
    }

    #[test]
    fn generator_identity_links_outcome_and_baseline() {
        let scenario = SimScenario { n: 50, ..SimScenario::new(Surface::S2, 5) };
        let draw = generate(&scenario);
        for (i, s) in draw.panel.subjects.iter().enumerate() {
            let psi = draw.truth.psi[i];
            assert_relative_eq!(psi, truth_at(Surface::S2, &s.location), epsilon = 1e-12);
            // lag-one effect: Y_k - Y0_k = psi * A_{k-1} exactly
            assert_eq!(s.outcome[0].unwrap(), draw.truth.baseline[i][0]);
            for k in 1..draw.panel.time_count {
                let gap = s.outcome[k].unwrap() - draw.truth.baseline[i][k];
                let expected = psi * f64::from(s.treatment[k - 1].unwrap());
                assert_relative_eq!(gap, expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_surface_outcome_equals_baseline() {
        let scenario = SimScenario { n: 30, ..SimScenario::new(Surface::Zero, 3) };
        let draw = generate(&scenario);
        for (i, s) in draw.panel.subjects.iter().enumerate() {
            for k in 0..draw.panel.time_count {
                assert_eq!(s.outcome[k].unwrap(), draw.truth.baseline[i][k]);
            }
        }
    }

    #[test]
    fn covariate_moments_match_the_design() {
        let scenario = SimScenario { n: 600, ..SimScenario::new(Surface::S1, 21) };
        let draw = generate(&scenario);
        let mut values = Vec::new();
        let mut lag_pairs = Vec::new();
        for s in &draw.panel.subjects {
            for k in 0..draw.panel.time_count {
                let x = s.covariates[k][0].unwrap();
                values.push(x);
                if k > 0 {
                    lag_pairs.push((s.covariates[k - 1][0].unwrap(), x));
                }
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // MC standard error of the variance of ~15600 draws is ~0.006
        assert!(
            (var - COV_VAR).abs() < 3.0 * 0.01,
            "sample variance {var} too far from {COV_VAR}"
        );
        let m = lag_pairs.len() as f64;
        let cov = lag_pairs.iter().map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / m;
        let rho = cov / var;
        assert!((rho - COV_RHO).abs() < 3.0 * 0.012, "lag correlation {rho}");
    }

    #[test]
    fn response_rate_is_plausible_under_zero_effects() {
        for seed in [1u64, 2, 3] {
            let scenario = SimScenario {
                n: 300,
                missingness: true,
                ..SimScenario::new(Surface::Zero, seed)
            };
            let draw = generate(&scenario);
            let mut responded = 0usize;
            let mut total = 0usize;
            for s in &draw.panel.subjects {
                responded += s.response.iter().filter(|&&r| r == 1).count();
                total += s.response.len();
            }
            let rate = responded as f64 / total as f64;
            assert!((0.2..0.6).contains(&rate), "response rate {rate} at seed {seed}");
        }
    }

    #[test]
    fn missingness_hides_treatment_and_outcome_only() {
        let scenario =
            SimScenario { n: 40, missingness: true, ..SimScenario::new(Surface::S1, 13) };
        let draw = generate(&scenario);
        let mut saw_missing = false;
        for s in &draw.panel.subjects {
            for k in 0..draw.panel.time_count {
                assert!(s.covariates[k][0].is_some());
                if s.response[k] == 0 {
                    saw_missing = true;
                    assert!(s.treatment[k].is_none());
                    assert!(s.outcome[k].is_none());
                } else {
                    assert!(s.treatment[k].is_some());
                    assert!(s.outcome[k].is_some());
                }
            }
        }
        assert!(saw_missing);
    }

    #[test]
    fn gaussian_lag_generator_matches_effect_curve() {
        let params = BlipParams(vec![-1.4, 7.1, 2.9]);
        let draw = generate_gaussian_lag(20, 25, &params, 3).unwrap();
        let fam = BlipFamily::GaussianLag;
        for (i, s) in draw.panel.subjects.iter().enumerate() {
            for k in 0..draw.panel.time_count {
                let mut expected = draw.truth.baseline[i][k];
                for m in 0..=k {
                    expected += fam
                        .effect_at_lag((k - m) as f64, &params)
                        .unwrap()
                        * f64::from(s.treatment[m].unwrap());
                }
                assert_relative_eq!(s.outcome[k].unwrap(), expected, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn tiny_replication_run_completes() {
        let mut opts = ReplicationOptions::new(2, 7);
        opts.n = 60;
        opts.horizon = 6;
        opts.bootstrap = 4;
        opts.folds = 2;
        let combos = [NuisanceCombo { propensity_correct: true, outcome_correct: true }];
        let table = run_table1(&opts, &combos).unwrap();
        assert_eq!(table.rows.len(), 12); // 3 scenarios x 4 locations
        for row in &table.rows {
            assert!(row.est.is_finite());
            assert!(row.var >= 0.0);
        }
        let csv = table.to_csv();
        assert!(csv.lines().count() > 70);
        let text = table.to_text();
        assert!(text.contains("Est"));
    }
}
