//! Wild-bootstrap variance estimation and Wald confidence intervals
//! for the bias-corrected local estimator.
//!
//! Each replicate draws one exchangeable exponential weight per subject
//! (mean one, variance one) and reruns bandwidth selection, the grid of
//! local solves, and bias correction with every subject's contribution
//! multiplied by its weight. Nuisance models are frozen at their
//! original fits. Weights come from a counter-based generator keyed by
//! seed, replicate index, and a subject-id hash, so results do not
//! depend on scheduling or subject order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gwe::{LocalFit, THIN_DATA_ESS};
use crate::panel::{Location, PanelDataset};
use crate::tuning::{
    available_estimates, fit_bias_polynomial, fold_assignment_for, BiasFit, CvReport,
    PipelineConfig, PreparedPipeline,
};

/// Law of the per-subject bootstrap weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightLaw {
    /// Unit-mean, unit-variance exponential weights.
    ExpOne,
    /// All weights exactly one (a test hook: every replicate reproduces
    /// the point estimate).
    DegenerateOne,
}

/// Wild-bootstrap configuration.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub weight_law: WeightLaw,
    pub seed: u64,
}

impl BootstrapSpec {
    pub fn new(replicates: usize, seed: u64) -> Result<Self> {
        if replicates < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 bootstrap replicates, got {replicates}"
            )));
        }
        Ok(BootstrapSpec { replicates, weight_law: WeightLaw::ExpOne, seed })
    }
}

/// Point estimate with bootstrap variance and a Wald interval.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// Bias-corrected effect estimate.
    pub psi_bc: Vec<f64>,
    /// Marginal bootstrap variances per component.
    pub variance: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

// ---------------------------------------------------------------------
// Counter-based weights
// ---------------------------------------------------------------------

/// 64-bit FNV-1a hash of a subject id; stable across platforms.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Exponential(1) weight keyed by `(seed, replicate, subject_hash)`.
pub(crate) fn exp_weight(seed: u64, replicate: u64, subject_hash: u64) -> f64 {
    let mut state = splitmix64(seed);
    state = splitmix64(state ^ splitmix64(replicate.wrapping_add(1)));
    state = splitmix64(state ^ subject_hash);
    // map to (0, 1) with 53-bit precision, then invert the CDF
    let u = ((state >> 11) as f64) * (1.0 / (1u64 << 53) as f64);
    -(1.0 - u).ln()
}

/// Exponential(1) bootstrap weight for a subject id, keyed by seed and
/// replicate index; the contract behind replicate determinism.
pub fn bootstrap_weight(seed: u64, replicate: u64, subject_id: &str) -> f64 {
    exp_weight(seed, replicate, fnv1a64(subject_id.as_bytes()))
}

/// The weight vector of one bootstrap replicate.
pub(crate) fn replicate_weights(
    spec: &BootstrapSpec,
    replicate: usize,
    subject_hashes: &[u64],
) -> Vec<f64> {
    match spec.weight_law {
        WeightLaw::DegenerateOne => vec![1.0; subject_hashes.len()],
        WeightLaw::ExpOne => subject_hashes
            .iter()
            .map(|&h| exp_weight(spec.seed, replicate as u64, h))
            .collect(),
    }
}

// ---------------------------------------------------------------------
// Wald interval
// ---------------------------------------------------------------------

/// Standard normal quantile (Acklam's rational approximation,
/// absolute error below 1.2e-9).
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Symmetric Wald interval `point ± z_{1-alpha/2} sqrt(variance)`.
pub fn wald_ci(point: &[f64], variance: &[f64], level: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must be in (0, 1), got {level}")));
    }
    if point.len() != variance.len() {
        return Err(Error::Validation("point and variance dimensions differ".into()));
    }
    if variance.iter().any(|v| *v < 0.0) {
        return Err(Error::Validation("variances must be nonnegative".into()));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let lower = point.iter().zip(variance).map(|(m, v)| m - z * v.sqrt()).collect();
    let upper = point.iter().zip(variance).map(|(m, v)| m + z * v.sqrt()).collect();
    Ok((lower, upper))
}

// ---------------------------------------------------------------------
// Wild bootstrap over the prepared pipeline
// ---------------------------------------------------------------------

/// One full reweighted analysis at a target: bandwidth choice by
/// cross-validation, grid estimates, bias correction. Returns the
/// debiased estimate.
fn weighted_analysis(
    pipeline: &PreparedPipeline,
    data: &PanelDataset,
    target: &Location,
    xi: Option<&[f64]>,
    fold_override: Option<&[usize]>,
) -> Result<(usize, Vec<Vec<Option<f64>>>, Vec<Option<Vec<f64>>>, BiasFit)> {
    let (tau_idx, fold_losses) = pipeline.choose_bandwidth(data, target, xi, fold_override)?;
    let chosen_tau = pipeline.config.grid.values()[tau_idx];
    let estimates = pipeline.grid_estimates(data, target, xi);
    if estimates[tau_idx].is_none() {
        return Err(Error::NonConvergence(format!(
            "the chosen bandwidth {chosen_tau:.4} produced no full-data estimate"
        )));
    }
    let (sub_grid, sub_estimates) = available_estimates(&pipeline.config.grid, &estimates)?;
    let bias = fit_bias_polynomial(&sub_grid, &sub_estimates, chosen_tau, pipeline.config.bias_q)?;
    Ok((tau_idx, fold_losses, estimates, bias))
}

/// Wild-bootstrap variance of the bias-corrected estimate at `target`,
/// with nuisance fits frozen in `pipeline`.
pub(crate) fn wild_bootstrap_prepared(
    pipeline: &PreparedPipeline,
    data: &PanelDataset,
    target: &Location,
    spec: &BootstrapSpec,
    level: f64,
    point: &BiasFit,
) -> Result<InferenceResult> {
    let hashes: Vec<u64> =
        data.subjects.iter().map(|s| fnv1a64(s.id.as_bytes())).collect();
    let k = pipeline.config.folds;
    let replicates: Vec<Option<Vec<f64>>> = (0..spec.replicates)
        .into_par_iter()
        .map(|b| {
            let xi = replicate_weights(spec, b, &hashes);
            // each replicate repeats the cross-validation in full,
            // including a fresh fold split keyed by the replicate; the
            // degenerate weight law keeps the base split so replicates
            // reproduce the point estimate exactly
            let folds = match spec.weight_law {
                WeightLaw::DegenerateOne => None,
                WeightLaw::ExpOne => {
                    let fold_seed = spec.seed ^ (b as u64).wrapping_mul(0xA076_1D64_78BD_642F);
                    Some(fold_assignment_for(data, fold_seed, k).ok()?)
                }
            };
            weighted_analysis(pipeline, data, target, Some(&xi), folds.as_deref())
                .ok()
                .map(|(_, _, _, bias)| bias.debiased)
        })
        .collect();
    let used: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    let failed = spec.replicates - used.len();
    if failed * 10 > spec.replicates {
        return Err(Error::NonConvergence(format!(
            "{failed} of {} bootstrap replicates failed at ({:.4}, {:.4})",
            spec.replicates, target.s1, target.s2
        )));
    }
    let p = point.debiased.len();
    let n = used.len() as f64;
    // empirical variance of the replicates around the point estimate:
    // the replicate-mean offset proxies the noise of the components
    // frozen across replicates (nuisance fits), which pure
    // mean-centered spread would miss
    let mut variance = vec![0.0; p];
    for rep in &used {
        for a in 0..p {
            let d = rep[a] - point.debiased[a];
            variance[a] += d * d;
        }
    }
    for v in &mut variance {
        *v /= n;
    }
    let (ci_lower, ci_upper) = wald_ci(&point.debiased, &variance, level)?;
    Ok(InferenceResult {
        psi_bc: point.debiased.clone(),
        variance,
        ci_lower,
        ci_upper,
        level,
        replicates_used: used.len(),
        replicates_failed: failed,
    })
}

/// Run the wild bootstrap at one target (builds the pipeline, runs the
/// unweighted analysis for the point estimate, then the replicates).
pub fn wild_bootstrap(
    data: &PanelDataset,
    target: &Location,
    config: &PipelineConfig,
    spec: &BootstrapSpec,
    level: f64,
) -> Result<InferenceResult> {
    let pipeline = PreparedPipeline::build(data, config.clone())?;
    let (_, _, _, bias) = weighted_analysis(&pipeline, data, target, None, None)?;
    wild_bootstrap_prepared(&pipeline, data, target, spec, level, &bias)
}

/// Everything the full analysis produces at one evaluation location.
#[derive(Debug, Clone)]
pub struct TargetAnalysis {
    pub target: Location,
    pub cv: CvReport,
    /// Raw (not bias-corrected) fit at the chosen bandwidth.
    pub fit: LocalFit,
    /// Level estimates at every grid bandwidth (`None` where the fit
    /// failed, typically at bandwidths too small for the data).
    pub grid_estimates: Vec<Option<Vec<f64>>>,
    pub bias: BiasFit,
    pub inference: InferenceResult,
}

/// Options for the full per-target analysis.
#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub pipeline: PipelineConfig,
    pub bootstrap: BootstrapSpec,
    pub ci_level: f64,
}

/// Full pipeline at a list of targets: per-target cross-validated
/// bandwidth, bias-corrected estimate, and wild-bootstrap interval.
/// Nuisance fits are shared across targets and replicates.
pub fn analyze_targets(
    data: &PanelDataset,
    targets: &[Location],
    options: &AnalysisOptions,
) -> Result<Vec<TargetAnalysis>> {
    if targets.is_empty() {
        return Err(Error::Validation("no evaluation targets".into()));
    }
    let pipeline = PreparedPipeline::build(data, options.pipeline.clone())?;
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let (tau_idx, fold_losses, estimates, bias) =
            weighted_analysis(&pipeline, data, target, None, None).map_err(|e| {
                Error::Computation(format!("target ({:.4}, {:.4}): {e}", target.s1, target.s2))
            })?;
        let inference = wild_bootstrap_prepared(
            &pipeline,
            data,
            target,
            &options.bootstrap,
            options.ci_level,
            &bias,
        )
        .map_err(|e| {
            Error::Computation(format!("target ({:.4}, {:.4}): {e}", target.s1, target.s2))
        })?;
        let folds = options.pipeline.folds;
        let mean_losses: Vec<Option<f64>> = fold_losses
            .iter()
            .map(|per_fold| {
                if per_fold.iter().any(Option::is_none) {
                    None
                } else {
                    Some(per_fold.iter().map(|l| l.unwrap()).sum::<f64>() / folds as f64)
                }
            })
            .collect();
        let grid = &options.pipeline.grid;
        let cv = CvReport {
            chosen_tau: grid.values()[tau_idx],
            chosen_index: tau_idx,
            fold_losses,
            mean_losses,
            folds,
        };
        // raw fit at the chosen bandwidth from the frozen full-data cell
        let cell = pipeline.cells[tau_idx]
            .as_ref()
            .expect("grid estimates already succeeded");
        let phi = pipeline.solve_cell(data, cell, tau_idx, target, None).map_err(|e| {
            Error::Computation(format!("target ({:.4}, {:.4}): {e}", target.s1, target.s2))
        })?;
        let ess = {
            let kernel = crate::gwe::KernelSpec { tau: cv.chosen_tau };
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for s in &data.subjects {
                let w = crate::gwe::kernel_weight(&kernel, target, &s.location);
                sum += w;
                max = max.max(w);
            }
            if max > 0.0 {
                sum / max
            } else {
                0.0
            }
        };
        let fit = LocalFit {
            target: *target,
            tau: cv.chosen_tau,
            psi: estimates[tau_idx].clone().expect("checked in weighted_analysis"),
            phi,
            converged: true,
            iterations: 0,
            ess,
            thin_data: ess < THIN_DATA_ESS,
        };
        out.push(TargetAnalysis {
            target: *target,
            cv,
            fit,
            grid_estimates: estimates,
            bias,
            inference,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn normal_quantiles_match_reference_values() {
        assert_relative_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-8);
        assert_relative_eq!(normal_quantile(0.75), 0.6744897501960817, epsilon = 1e-8);
        assert_relative_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-9);
        assert_relative_eq!(normal_quantile(0.025), -1.959963984540054, epsilon = 1e-8);
    }

    #[test]
    fn wald_interval_reference_values() {
        let (lo, hi) = wald_ci(&[0.0], &[1.0], 0.95).unwrap();
        assert_relative_eq!(lo[0], -1.95996, epsilon = 1e-4);
        assert_relative_eq!(hi[0], 1.95996, epsilon = 1e-4);
        // half-width at level 0.5 is 0.67449 standard deviations
        let (lo, hi) = wald_ci(&[2.0], &[4.0], 0.5).unwrap();
        assert_relative_eq!(hi[0] - 2.0, 2.0 * 0.67449, epsilon = 1e-4);
        assert_relative_eq!(2.0 - lo[0], 2.0 * 0.67449, epsilon = 1e-4);
    }

    #[test]
    fn zero_variance_gives_degenerate_interval() {
        let (lo, hi) = wald_ci(&[1.3, -0.2], &[0.0, 0.0], 0.95).unwrap();
        assert_eq!(lo, vec![1.3, -0.2]);
        assert_eq!(hi, vec![1.3, -0.2]);
    }

    #[test]
    fn wald_rejects_bad_inputs() {
        assert!(wald_ci(&[0.0], &[1.0], 0.0).is_err());
        assert!(wald_ci(&[0.0], &[1.0], 1.0).is_err());
        assert!(wald_ci(&[0.0], &[-0.1], 0.9).is_err());
        assert!(wald_ci(&[0.0, 1.0], &[0.1], 0.9).is_err());
    }

    #[test]
    fn exp_weights_have_unit_mean_and_variance() {
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let w = exp_weight(42, 7, i as u64);
            assert!(w >= 0.0 && w.is_finite());
            sum += w;
            sumsq += w * w;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn weights_are_keyed_not_sequenced() {
        // same key gives the same weight regardless of evaluation order
        let a = exp_weight(1, 5, 99);
        let _ = exp_weight(1, 6, 99);
        let b = exp_weight(1, 5, 99);
        assert_eq!(a, b);
        // different replicate or subject gives a different weight
        assert_ne!(exp_weight(1, 5, 99), exp_weight(1, 6, 99));
        assert_ne!(exp_weight(1, 5, 99), exp_weight(1, 5, 98));
    }

    #[test]
    fn replicate_prefix_property() {
        // the first replicates of a longer run equal a shorter run
        let hashes: Vec<u64> = (0..50).map(|i| fnv1a64(format!("s{i}").as_bytes())).collect();
        let spec = BootstrapSpec::new(50, 9).unwrap();
        let long: Vec<Vec<f64>> =
            (0..200).map(|b| replicate_weights(&spec, b, &hashes)).collect();
        let short: Vec<Vec<f64>> =
            (0..50).map(|b| replicate_weights(&spec, b, &hashes)).collect();
        assert_eq!(&long[..50], &short[..]);
    }
}
