//! Core estimator: the doubly robust estimating function, geographic
//! kernel weighting with a local polynomial design, and the three-step
//! fitting procedure.
//!
//! For each subject the estimating function stacks, over included time
//! pairs `(m, k)`, the product of an index function of the history, the
//! centered pseudo-outcome, and the centered treatment. Geographic
//! weighting multiplies each subject's contribution by a Gaussian kernel
//! in the distance to the evaluation location, and the local polynomial
//! design expands the parameters to first order in the coordinates. For
//! blip families linear in the parameters the stacked system is linear
//! and solved in closed form; otherwise a damped Newton iteration is
//! used.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::blip::{self, BlipFamily, BlipParams};
use crate::error::{Error, Result};
use crate::nuisance::{
    fit_outcome_mean, fit_propensity, fit_response_gmm, FeatureMap, OutcomeMeanModel,
    PropensityModel, ResponseModel, PROB_FLOOR,
};
use crate::panel::{Location, PanelDataset};

/// Gaussian kernel with bandwidth `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub tau: f64,
}

impl KernelSpec {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Validation(format!("bandwidth must be positive, got {tau}")));
        }
        Ok(KernelSpec { tau })
    }
}

/// Kernel weight `tau^{-1} K(||target - s|| / tau)` with `K` the
/// standard normal density.
pub fn kernel_weight(spec: &KernelSpec, target: &Location, s: &Location) -> f64 {
    let z = target.distance(s) / spec.tau;
    (-0.5 * z * z).exp() / (spec.tau * (2.0 * std::f64::consts::PI).sqrt())
}

/// Order of the local polynomial approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolyOrder {
    /// Local constant: design row `(1)`.
    Constant,
    /// Local linear: design row `(1, t1 - s1, t2 - s2)`.
    Linear,
}

/// Local polynomial design around an evaluation location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalDesign {
    pub order: PolyOrder,
}

impl LocalDesign {
    pub fn dim(&self) -> usize {
        match self.order {
            PolyOrder::Constant => 1,
            PolyOrder::Linear => 3,
        }
    }

    pub fn row(&self, target: &Location, s: &Location) -> Vec<f64> {
        match self.order {
            PolyOrder::Constant => vec![1.0],
            PolyOrder::Linear => vec![1.0, target.s1 - s.s1, target.s2 - s.s2],
        }
    }

    /// Design row on the stack; entries past `dim()` are unused.
    #[inline]
    fn row3(&self, target: &Location, s: &Location) -> [f64; 3] {
        match self.order {
            PolyOrder::Constant => [1.0, 0.0, 0.0],
            PolyOrder::Linear => [1.0, target.s1 - s.s1, target.s2 - s.s2],
        }
    }
}

/// Choice of the index function in the estimating equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QChoice {
    /// Gradient of the blip sum at the current iterate (the default).
    Gradient,
    /// The closed-form scalar choice `(1 - e) / var(H | history)` for
    /// single-lag scalar families.
    Example3,
}

/// How non-response enters the estimating function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseWeighting {
    /// Complete data required; a missing needed value is an error.
    FullData,
    /// Complete-case analysis: terms with missing values drop, the
    /// remaining ones keep weight one (the misspecified-response
    /// benchmark).
    ConstantOne,
    /// Inverse-probability-of-response weighting from a fitted response
    /// model; terms with missing values drop.
    InverseProbability,
}

/// Configuration of the doubly robust estimating function.
#[derive(Debug, Clone)]
pub struct EstimatingConfig {
    pub family: BlipFamily,
    /// Explicit `(m, k)` pairs; `None` derives them from the family's
    /// lag window.
    pub pairs: Option<Vec<(usize, usize)>>,
    /// Extra lags beyond the structurally nonzero window.
    pub lag_buffer: usize,
    pub q_choice: QChoice,
    pub response: ResponseWeighting,
    /// First treatment time entering the sums (the estimating sums
    /// start at 1; 0 includes the baseline treatment).
    pub start_time: usize,
}

impl EstimatingConfig {
    pub fn new(family: BlipFamily) -> Self {
        EstimatingConfig {
            family,
            pairs: None,
            lag_buffer: 0,
            q_choice: QChoice::Gradient,
            response: ResponseWeighting::FullData,
            start_time: 1,
        }
    }

    /// The included `(m, k)` pairs for a panel with the given horizon.
    pub fn resolved_pairs(&self, horizon: usize) -> Result<Vec<(usize, usize)>> {
        if let Some(pairs) = &self.pairs {
            for &(m, k) in pairs {
                if m < self.start_time || m > k || k > horizon {
                    return Err(Error::Validation(format!(
                        "pair ({m}, {k}) outside {} <= m <= k <= {horizon}",
                        self.start_time
                    )));
                }
            }
            return Ok(pairs.clone());
        }
        let (lo, hi) = self.family.lag_window();
        let hi = hi.map(|h| h + self.lag_buffer);
        let mut pairs = Vec::new();
        for m in self.start_time..=horizon {
            for k in m..=horizon {
                let lag = k - m;
                if lag >= lo && hi.is_none_or(|h| lag <= h) {
                    pairs.push((m, k));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Validation("no admissible (m, k) pairs".into()));
        }
        Ok(pairs)
    }
}

/// The fitted nuisance models used by the estimating function.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub propensity: PropensityModel,
    pub outcome: OutcomeMeanModel,
    pub response: Option<ResponseModel>,
}

/// Solution of the geographically weighted system at one location.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub target: Location,
    pub tau: f64,
    /// Stacked coefficients: the level block first, then the two slope
    /// blocks for a linear design (internal parameterization).
    pub phi: Vec<f64>,
    /// The level block mapped to the public parameterization: the
    /// effect estimate at the target.
    pub psi: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Effective local sample size (kernel mass over its maximum).
    pub ess: f64,
    /// Set when the effective sample size is below [`THIN_DATA_ESS`].
    pub thin_data: bool,
}

/// A globally pooled fit (uniform weights, constant design).
#[derive(Debug, Clone)]
pub struct GlobalFit {
    pub psi: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Solver selection for [`solve_local`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    /// Closed form for linear blips, Newton otherwise.
    Auto,
    ClosedForm,
    Newton,
}

/// Effective-sample-size threshold below which a fit is flagged.
pub const THIN_DATA_ESS: f64 = 5.0;

// ---------------------------------------------------------------------
// Per-subject terms
// ---------------------------------------------------------------------

/// One pseudo-outcome row kept so the outcome mean can be refit on a
/// subject subset without rebuilding the term statistics.
#[derive(Debug, Clone)]
pub(crate) struct PseudoRow {
    pub lag: usize,
    pub features: Vec<f64>,
    /// Raw outcome; the blip sum at a supplied effect value is
    /// subtracted when forming the regression response.
    pub y_raw: f64,
    pub gsum: Vec<f64>,
    pub weight: f64,
}

/// Per-subject sufficient statistics for blip families linear in the
/// parameters: the subject's estimating function is `c - B psi`.
#[derive(Debug, Clone)]
pub(crate) struct LinearSubjectStats {
    pub b: DMatrix<f64>,
    /// Right-hand side using the outcome model supplied at build time.
    pub c: DVector<f64>,
    /// Right-hand side with no outcome-mean correction.
    pub c_y: DVector<f64>,
    /// Per-lag coupling of the right-hand side to outcome coefficients:
    /// `c(coef) = c_y - sum_lag M_lag coef_lag`.
    pub m_by_lag: BTreeMap<usize, DMatrix<f64>>,
    pub rows: Vec<PseudoRow>,
}

#[derive(Debug, Clone)]
pub(crate) struct LinearTerms {
    pub p: usize,
    pub outcome_dim: Option<usize>,
    pub stats: Vec<LinearSubjectStats>,
}

/// One term of the nonlinear estimating function.
#[derive(Debug, Clone)]
pub(crate) struct NlPair {
    pub m: usize,
    pub k: usize,
    pub weight: f64,
    pub centered: f64,
    /// Outcome minus the fitted mean; the blip sum at the current
    /// iterate completes the pseudo-outcome residual.
    pub resid0: f64,
    /// Scalar index value for the closed-form q choice.
    pub q3: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct NlTerms {
    pub p: usize,
    pub per_subject: Vec<Vec<NlPair>>,
}

/// Inverse-probability weight over the span `[m, k]`, with only the
/// lower probability floor applied so that a predicted probability of
/// one contributes exactly one.
pub(crate) fn span_weight(
    data: &PanelDataset,
    model: &ResponseModel,
    subject: usize,
    m: usize,
    k: usize,
) -> Result<f64> {
    let s = &data.subjects[subject];
    let mut w = 1.0;
    for l in m..=k {
        if s.response[l] == 0 {
            return Ok(0.0);
        }
        let raw = model.predict_raw(data, subject, l).ok_or_else(|| {
            Error::Validation(format!("response features unavailable for subject {} at {l}", s.id))
        })?;
        w /= raw.max(PROB_FLOOR);
    }
    Ok(w)
}

struct TermInputs {
    weight: f64,
    centered: f64,
    y_raw: f64,
    mu: f64,
    gsum: Vec<f64>,
    q3: f64,
}

/// Raw ingredients of the `(m, k)` term for one subject, or `None` when
/// the term drops under the configured response handling.
fn term_inputs(
    data: &PanelDataset,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
    subject: usize,
    m: usize,
    k: usize,
    params: &BlipParams,
) -> Result<Option<TermInputs>> {
    let missing = |what: &str| -> Error {
        Error::Validation(format!(
            "{what} unavailable for subject {} at pair ({m}, {k}) with complete-data weighting",
            data.subjects[subject].id
        ))
    };
    let weight = match cfg.response {
        ResponseWeighting::FullData | ResponseWeighting::ConstantOne => 1.0,
        ResponseWeighting::InverseProbability => {
            let model = nuis.response.as_ref().ok_or_else(|| {
                Error::Validation("inverse probability weighting needs a response model".into())
            })?;
            let w = span_weight(data, model, subject, m, k)?;
            if w == 0.0 {
                return Ok(None);
            }
            w
        }
    };

    let s = &data.subjects[subject];
    let strict = cfg.response == ResponseWeighting::FullData;
    let a_m = match s.treatment[m] {
        Some(a) => f64::from(a),
        None if strict => return Err(missing("treatment")),
        None => return Ok(None),
    };
    let e_hat = match nuis.propensity.predict_raw(data, subject, m) {
        Some(e) => e,
        None if strict => return Err(missing("propensity features")),
        None => return Ok(None),
    };
    let y_raw = match s.outcome[k] {
        Some(y) => y,
        None if strict => return Err(missing("outcome")),
        None => return Ok(None),
    };
    let mu = match nuis.outcome.predict(data, subject, m, k) {
        Some(mu) => mu,
        None if strict => return Err(missing("outcome-mean features")),
        None => return Ok(None),
    };
    let gsum = match blip::blip_sum_gradient(data, subject, m, k, &cfg.family, params) {
        Ok(g) => g,
        Err(e) if strict => return Err(e),
        Err(_) => return Ok(None),
    };
    if !cfg.family.is_linear() && blip::blip_sum(data, subject, m, k, &cfg.family, params).is_err()
    {
        if strict {
            return Err(missing("treatment history for the blip sum"));
        }
        return Ok(None);
    }
    let q3 = (1.0 - e_hat) / nuis.outcome.residual_variance();
    Ok(Some(TermInputs { weight, centered: a_m - e_hat, y_raw, mu, gsum, q3 }))
}

/// Build per-subject sufficient statistics for a linear blip family.
///
/// `outcome_features`, when given, additionally records the rows and
/// coupling matrices needed to swap in refitted outcome coefficients
/// without rebuilding; the outcome model inside `nuis` should then be
/// the zero model so `c_y` carries no correction.
pub(crate) fn build_linear_terms(
    data: &PanelDataset,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
    outcome_features: Option<&FeatureMap>,
) -> Result<LinearTerms> {
    if !cfg.family.is_linear() {
        return Err(Error::Validation("linear terms need a linear blip family".into()));
    }
    let p = cfg.family.param_len();
    if cfg.q_choice == QChoice::Example3 && p != 1 {
        return Err(Error::Validation(
            "the closed-form index choice applies to scalar blip families".into(),
        ));
    }
    let pairs = cfg.resolved_pairs(data.horizon())?;
    let zero = BlipParams::zeros(p);
    let d_out = outcome_features.map(FeatureMap::dim);
    let mut stats = Vec::with_capacity(data.n_subjects());
    for i in 0..data.n_subjects() {
        let mut b = DMatrix::<f64>::zeros(p, p);
        let mut c = DVector::<f64>::zeros(p);
        let mut c_y = DVector::<f64>::zeros(p);
        let mut m_by_lag: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        let mut rows = Vec::new();
        for &(m, k) in &pairs {
            let Some(t) = term_inputs(data, nuis, cfg, i, m, k, &zero)? else { continue };
            let q: &[f64] = match cfg.q_choice {
                QChoice::Gradient => &t.gsum,
                QChoice::Example3 => std::slice::from_ref(&t.q3),
            };
            let scale = t.weight * t.centered;
            for a in 0..p {
                c[a] += scale * q[a] * (t.y_raw - t.mu);
                c_y[a] += scale * q[a] * t.y_raw;
                for bcol in 0..p {
                    b[(a, bcol)] += scale * q[a] * t.gsum[bcol];
                }
            }
            if let Some(fmap) = outcome_features {
                if let Some(x) = fmap.eval(data, i, m) {
                    let mm = m_by_lag
                        .entry(k - m)
                        .or_insert_with(|| DMatrix::zeros(p, d_out.unwrap()));
                    for a in 0..p {
                        for (j, xj) in x.iter().enumerate() {
                            mm[(a, j)] += scale * q[a] * xj;
                        }
                    }
                    rows.push(PseudoRow {
                        lag: k - m,
                        features: x,
                        y_raw: t.y_raw,
                        gsum: t.gsum.clone(),
                        weight: t.weight,
                    });
                }
            }
        }
        stats.push(LinearSubjectStats { b, c, c_y, m_by_lag, rows });
    }
    Ok(LinearTerms { p, outcome_dim: d_out, stats })
}

// ---------------------------------------------------------------------
// Assembly and solving
// ---------------------------------------------------------------------

fn effective_sample_size(
    data: &PanelDataset,
    kernel: Option<&KernelSpec>,
    target: &Location,
    xi: Option<&[f64]>,
) -> f64 {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (i, s) in data.subjects.iter().enumerate() {
        let w = kernel.map_or(1.0, |sp| kernel_weight(sp, target, &s.location))
            * xi.map_or(1.0, |x| x[i]);
        sum += w;
        max = max.max(w);
    }
    if max > 0.0 {
        sum / max
    } else {
        0.0
    }
}

/// Solve the normalized stacked system, reporting singularity together
/// with the effective sample size.
fn solve_stacked(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    ess: f64,
    target: &Location,
) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax < 1e-10 || smin <= 1e-12 * smax {
        return Err(Error::Singular(format!(
            "local system at ({:.4}, {:.4}) is singular; effective local sample size {ess:.2}",
            target.s1, target.s2
        )));
    }
    let sol = svd.solve(b, 0.0).map_err(|e| Error::Singular(e.to_string()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!(
            "non-finite solution at ({:.4}, {:.4}); effective local sample size {ess:.2}",
            target.s1, target.s2
        )));
    }
    Ok(sol)
}

fn override_rhs(
    stat: &LinearSubjectStats,
    coef_override: Option<&BTreeMap<usize, Vec<f64>>>,
    c_i: &mut DVector<f64>,
) {
    match coef_override {
        None => c_i.copy_from(&stat.c),
        Some(coefs) => {
            c_i.copy_from(&stat.c_y);
            for (lag, mmat) in &stat.m_by_lag {
                if let Some(beta) = coefs.get(lag) {
                    for (col, b) in beta.iter().enumerate() {
                        for a in 0..c_i.len() {
                            c_i[a] -= mmat[(a, col)] * b;
                        }
                    }
                }
            }
        }
    }
}

/// Closed-form solve of the linear stacked system at `target`.
///
/// `coef_override` replaces the outcome-mean coefficients recorded at
/// build time (requires terms built with an outcome feature map); `xi`
/// are per-subject multipliers (bootstrap weights or fold masks).
pub(crate) fn solve_linear_local(
    data: &PanelDataset,
    terms: &LinearTerms,
    coef_override: Option<&BTreeMap<usize, Vec<f64>>>,
    design: &LocalDesign,
    target: &Location,
    kernel: Option<&KernelSpec>,
    xi: Option<&[f64]>,
) -> Result<(Vec<f64>, f64)> {
    if coef_override.is_some() && terms.outcome_dim.is_none() {
        return Err(Error::Validation(
            "terms were built without outcome decomposition support".into(),
        ));
    }
    let p = terms.p;
    let d = design.dim();
    let ess = effective_sample_size(data, kernel, target, xi);
    let mut a = DMatrix::<f64>::zeros(d * p, d * p);
    let mut rhs = DVector::<f64>::zeros(d * p);
    let mut mass = 0.0;
    let mut c_i = DVector::<f64>::zeros(p);
    for (i, stat) in terms.stats.iter().enumerate() {
        let s = &data.subjects[i];
        let w = kernel.map_or(1.0, |sp| kernel_weight(sp, target, &s.location))
            * xi.map_or(1.0, |x| x[i]);
        if w == 0.0 {
            continue;
        }
        mass += w;
        override_rhs(stat, coef_override, &mut c_i);
        let drow = design.row3(target, &s.location);
        for r in 0..d {
            let wr = w * drow[r];
            for r2 in 0..d {
                let wrr = wr * drow[r2];
                for pa in 0..p {
                    for pb in 0..p {
                        a[(r * p + pa, r2 * p + pb)] += wrr * stat.b[(pa, pb)];
                    }
                }
            }
            for pa in 0..p {
                rhs[r * p + pa] += wr * c_i[pa];
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::Singular(format!(
            "no subject carries weight at ({:.4}, {:.4})",
            target.s1, target.s2
        )));
    }
    a /= mass;
    rhs /= mass;
    let phi = solve_stacked(&a, &rhs, ess, target)?;
    Ok((phi.iter().copied().collect(), ess))
}

/// Normalized balancing moment `|P_n omega (c - B psi)| / P_n omega` at
/// a fixed effect value, max-norm over components.
pub(crate) fn linear_balancing_moment(
    data: &PanelDataset,
    terms: &LinearTerms,
    coef_override: Option<&BTreeMap<usize, Vec<f64>>>,
    psi: &[f64],
    target: &Location,
    kernel: Option<&KernelSpec>,
    xi: Option<&[f64]>,
) -> Result<f64> {
    let p = terms.p;
    let psi_v = DVector::from_column_slice(psi);
    let mut acc = DVector::<f64>::zeros(p);
    let mut mass = 0.0;
    let mut c_i = DVector::<f64>::zeros(p);
    for (i, stat) in terms.stats.iter().enumerate() {
        let s = &data.subjects[i];
        let w = kernel.map_or(1.0, |sp| kernel_weight(sp, target, &s.location))
            * xi.map_or(1.0, |x| x[i]);
        if w == 0.0 {
            continue;
        }
        mass += w;
        override_rhs(stat, coef_override, &mut c_i);
        acc += w * (&c_i - &stat.b * &psi_v);
    }
    if mass <= 0.0 {
        return Err(Error::Validation(format!(
            "no subject carries kernel weight at ({:.4}, {:.4})",
            target.s1, target.s2
        )));
    }
    Ok(acc.amax() / mass)
}

// ---------------------------------------------------------------------
// Nonlinear terms and Newton
// ---------------------------------------------------------------------

pub(crate) fn build_nl_terms(
    data: &PanelDataset,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
    expansion: &BlipParams,
) -> Result<NlTerms> {
    if cfg.q_choice == QChoice::Example3 && !cfg.family.is_linear() {
        return Err(Error::Validation(
            "the closed-form index choice applies to linear blip families".into(),
        ));
    }
    let p = cfg.family.param_len();
    let pairs = cfg.resolved_pairs(data.horizon())?;
    let mut per_subject = Vec::with_capacity(data.n_subjects());
    for i in 0..data.n_subjects() {
        let mut list = Vec::new();
        for &(m, k) in &pairs {
            let Some(t) = term_inputs(data, nuis, cfg, i, m, k, expansion)? else { continue };
            list.push(NlPair {
                m,
                k,
                weight: t.weight,
                centered: t.centered,
                resid0: t.y_raw - t.mu,
                q3: t.q3,
            });
        }
        per_subject.push(list);
    }
    Ok(NlTerms { p, per_subject })
}

/// Gradient of the blip sum in the internal parameterization.
fn internal_gradient(
    data: &PanelDataset,
    subject: usize,
    m: usize,
    k: usize,
    family: &BlipFamily,
    public: &BlipParams,
) -> Result<Vec<f64>> {
    let mut g = blip::blip_sum_gradient(data, subject, m, k, family, public)?;
    if matches!(family, BlipFamily::GaussianLag) {
        g[2] *= public.0[2]; // d/d(log s2) = s2 d/d(s2)
    }
    Ok(g)
}

/// Damped Newton on the stacked nonlinear system in the internal
/// parameterization. Returns the stacked solution, the effective
/// sample size, the iteration count, and whether the tolerance was met.
#[allow(clippy::too_many_arguments)]
pub(crate) fn newton_solve_local(
    data: &PanelDataset,
    terms: &NlTerms,
    cfg: &EstimatingConfig,
    design: &LocalDesign,
    target: &Location,
    kernel: Option<&KernelSpec>,
    xi: Option<&[f64]>,
    init_internal: &[f64],
) -> Result<(Vec<f64>, f64, usize, bool)> {
    let p = terms.p;
    let d = design.dim();
    let dim = d * p;
    let weights: Vec<f64> = data
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            kernel.map_or(1.0, |sp| kernel_weight(sp, target, &s.location))
                * xi.map_or(1.0, |x| x[i])
        })
        .collect();
    let ess = effective_sample_size(data, kernel, target, xi);
    let mass: f64 = weights.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Singular(format!(
            "no subject carries weight at ({:.4}, {:.4})",
            target.s1, target.s2
        )));
    }
    let rows: Vec<[f64; 3]> = data
        .subjects
        .iter()
        .map(|s| design.row3(target, &s.location))
        .collect();

    let eval = |u: &DVector<f64>, want_jac: bool| -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let mut f = DVector::<f64>::zeros(dim);
        let mut jac = if want_jac { Some(DMatrix::<f64>::zeros(dim, dim)) } else { None };
        for (i, pairs) in terms.per_subject.iter().enumerate() {
            let w_i = weights[i];
            if w_i == 0.0 || pairs.is_empty() {
                continue;
            }
            let drow = &rows[i];
            let mut theta = vec![0.0; p];
            for (a, th) in theta.iter_mut().enumerate() {
                for r in 0..d {
                    *th += drow[r] * u[r * p + a];
                }
            }
            let public = BlipParams(blip::from_internal(&cfg.family, &theta));
            let mut g_i = vec![0.0; p];
            let mut j_i = if want_jac { Some(DMatrix::<f64>::zeros(p, p)) } else { None };
            for t in pairs {
                let g_int = internal_gradient(data, i, t.m, t.k, &cfg.family, &public)?;
                let bsum = blip::blip_sum(data, i, t.m, t.k, &cfg.family, &public)?;
                let resid = t.resid0 - bsum;
                let scale = t.weight * t.centered;
                let q: &[f64] = match cfg.q_choice {
                    QChoice::Gradient => &g_int,
                    QChoice::Example3 => std::slice::from_ref(&t.q3),
                };
                for a in 0..p {
                    g_i[a] += scale * q[a] * resid;
                }
                if let Some(j) = j_i.as_mut() {
                    for a in 0..p {
                        for b in 0..p {
                            j[(a, b)] -= scale * q[a] * g_int[b];
                        }
                    }
                }
            }
            for r in 0..d {
                let wr = w_i * drow[r];
                for a in 0..p {
                    f[r * p + a] += wr * g_i[a];
                }
                if let (Some(jac), Some(j_i)) = (jac.as_mut(), j_i.as_ref()) {
                    for r2 in 0..d {
                        let wrr = wr * drow[r2];
                        for a in 0..p {
                            for b in 0..p {
                                jac[(r * p + a, r2 * p + b)] += wrr * j_i[(a, b)];
                            }
                        }
                    }
                }
            }
        }
        f /= mass;
        if let Some(j) = jac.as_mut() {
            *j /= mass;
        }
        Ok((f, jac))
    };

    let tol = 1e-8;
    let max_iter = 100;
    let mut u = DVector::<f64>::zeros(dim);
    for (a, &v) in init_internal.iter().enumerate().take(p) {
        u[a] = v;
    }
    let (mut f, _) = eval(&u, false)?;
    let mut norm = f.norm();
    for it in 0..max_iter {
        if norm <= tol {
            return Ok((u.iter().copied().collect(), ess, it, true));
        }
        let (_, jac) = eval(&u, true)?;
        let step = solve_stacked(&jac.unwrap(), &f, ess, target)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand = &u - lambda * &step;
            if let Ok((f_new, _)) = eval(&cand, false) {
                let n_new = f_new.norm();
                if n_new < norm {
                    u = cand;
                    f = f_new;
                    norm = n_new;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm <= 1e-6 {
        return Ok((u.iter().copied().collect(), ess, max_iter, norm <= tol));
    }
    Err(Error::NonConvergence(format!(
        "Newton stalled at system norm {norm:.2e} at ({:.4}, {:.4})",
        target.s1, target.s2
    )))
}

/// Newton starting points in the internal parameterization.
fn default_starts(family: &BlipFamily, horizon: usize) -> Vec<Vec<f64>> {
    match family {
        BlipFamily::GaussianLag => {
            let mu0 = (horizon as f64 / 3.0).max(1.0);
            let ls0 = (horizon as f64 / 6.0).max(2.0).ln();
            vec![vec![-0.5, mu0, ls0], vec![0.5, mu0, ls0], vec![-1.5, 2.0 * mu0, ls0]]
        }
        other => vec![vec![0.0; other.param_len()]],
    }
}

// ---------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------

/// The doubly robust estimating function of one subject at a given
/// effect value: the sum over included pairs of
/// `weight * q * (H(psi) - mu_hat) * (A - e_hat)`.
pub fn estimating_function(
    data: &PanelDataset,
    subject: &str,
    psi: &BlipParams,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
) -> Result<Vec<f64>> {
    let i = data
        .subjects
        .iter()
        .position(|s| s.id == subject)
        .ok_or_else(|| Error::Validation(format!("unknown subject {subject:?}")))?;
    estimating_function_by_index(data, i, psi, nuis, cfg)
}

pub(crate) fn estimating_function_by_index(
    data: &PanelDataset,
    subject: usize,
    psi: &BlipParams,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
) -> Result<Vec<f64>> {
    if psi.len() != cfg.family.param_len() {
        return Err(Error::Validation(format!(
            "effect dimension {} does not match the family dimension {}",
            psi.len(),
            cfg.family.param_len()
        )));
    }
    let p = cfg.family.param_len();
    let pairs = cfg.resolved_pairs(data.horizon())?;
    let mut out = vec![0.0; p];
    for &(m, k) in &pairs {
        let Some(t) = term_inputs(data, nuis, cfg, subject, m, k, psi)? else { continue };
        let bsum = blip::blip_sum(data, subject, m, k, &cfg.family, psi)?;
        let resid = t.y_raw - t.mu - bsum;
        let q: &[f64] = match cfg.q_choice {
            QChoice::Gradient => &t.gsum,
            QChoice::Example3 => std::slice::from_ref(&t.q3),
        };
        for a in 0..p {
            out[a] += t.weight * q[a] * resid * t.centered;
        }
    }
    Ok(out)
}

fn finish_fit(
    family: &BlipFamily,
    target: Location,
    tau: f64,
    phi_internal: Vec<f64>,
    p: usize,
    ess: f64,
    iterations: usize,
    converged: bool,
) -> LocalFit {
    let psi = blip::from_internal(family, &phi_internal[..p]);
    LocalFit {
        target,
        tau,
        phi: phi_internal,
        psi,
        converged,
        iterations,
        ess,
        thin_data: ess < THIN_DATA_ESS,
    }
}

/// Solve the geographically weighted system at `target`.
///
/// Linear blip families solve in closed form (or by Newton when forced
/// through `solver`); nonlinear families use damped Newton initialized
/// from the global fit. `subject_weights` multiply each subject's
/// contribution to the empirical measure.
#[allow(clippy::too_many_arguments)]
pub fn solve_local(
    data: &PanelDataset,
    target: &Location,
    kernel: &KernelSpec,
    design: &LocalDesign,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
    subject_weights: Option<&[f64]>,
    solver: SolverChoice,
) -> Result<LocalFit> {
    let p = cfg.family.param_len();
    if let Some(xi) = subject_weights {
        if xi.len() != data.n_subjects() {
            return Err(Error::Validation("one subject weight per subject required".into()));
        }
        if xi.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Validation("subject weights must be nonnegative".into()));
        }
    }
    if cfg.family.is_linear() && solver != SolverChoice::Newton {
        let terms = build_linear_terms(data, nuis, cfg, None)?;
        let (phi, ess) =
            solve_linear_local(data, &terms, None, design, target, Some(kernel), subject_weights)?;
        return Ok(finish_fit(&cfg.family, *target, kernel.tau, phi, p, ess, 0, true));
    }
    let global = fit_global(data, nuis, cfg)?;
    let expansion = BlipParams(global.psi.clone());
    let terms = build_nl_terms(data, nuis, cfg, &expansion)?;
    let init = blip::to_internal(&cfg.family, &global.psi);
    let (phi, ess, iters, converged) = newton_solve_local(
        data,
        &terms,
        cfg,
        design,
        target,
        Some(kernel),
        subject_weights,
        &init,
    )?;
    Ok(finish_fit(&cfg.family, *target, kernel.tau, phi, p, ess, iters, converged))
}

/// Globally pooled fit: uniform weights and a constant design.
pub fn fit_global(
    data: &PanelDataset,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
) -> Result<GlobalFit> {
    let p = cfg.family.param_len();
    let design = LocalDesign { order: PolyOrder::Constant };
    let origin = Location { s1: 0.0, s2: 0.0 };
    if cfg.family.is_linear() {
        let terms = build_linear_terms(data, nuis, cfg, None)?;
        let (phi, _) = solve_linear_local(data, &terms, None, &design, &origin, None, None)?;
        return Ok(GlobalFit { psi: phi, converged: true, iterations: 0 });
    }
    let zero = BlipParams::zeros(p);
    let terms = build_nl_terms(data, nuis, cfg, &zero)?;
    let mut fallback: Option<(Vec<f64>, usize)> = None;
    for start in default_starts(&cfg.family, data.horizon()) {
        match newton_solve_local(data, &terms, cfg, &design, &origin, None, None, &start) {
            Ok((u, _, iters, converged)) => {
                let psi = blip::from_internal(&cfg.family, &u[..p]);
                if converged {
                    return Ok(GlobalFit { psi, converged: true, iterations: iters });
                }
                if fallback.is_none() {
                    fallback = Some((psi, iters));
                }
            }
            Err(_) => continue,
        }
    }
    match fallback {
        Some((psi, iterations)) => Ok(GlobalFit { psi, converged: false, iterations }),
        None => Err(Error::NonConvergence(
            "global fit did not converge from any starting point".into(),
        )),
    }
}

/// Preliminary geographically weighted fit: no outcome-mean correction
/// and the gradient index choice, used to seed the outcome model.
#[allow(clippy::too_many_arguments)]
pub fn preliminary_fit(
    data: &PanelDataset,
    target: &Location,
    kernel: &KernelSpec,
    design: &LocalDesign,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
    subject_weights: Option<&[f64]>,
) -> Result<LocalFit> {
    let prelim_nuis = NuisanceSet {
        propensity: nuis.propensity.clone(),
        outcome: OutcomeMeanModel::zero(),
        response: nuis.response.clone(),
    };
    let mut prelim_cfg = cfg.clone();
    prelim_cfg.q_choice = QChoice::Gradient;
    solve_local(
        data,
        target,
        kernel,
        design,
        &prelim_nuis,
        &prelim_cfg,
        subject_weights,
        SolverChoice::Auto,
    )
}

/// Which feature maps to fit for each nuisance model.
#[derive(Debug, Clone)]
pub struct NuisanceSpec {
    pub propensity_features: FeatureMap,
    /// `None` fits the identically-zero outcome mean.
    pub outcome_features: Option<FeatureMap>,
    /// Response model and instrument-moment features, required for
    /// inverse-probability response weighting.
    pub response_features: Option<FeatureMap>,
    pub h_features: Option<FeatureMap>,
}

/// Fit the nuisance set for a given bandwidth: the response model
/// first (when weighting), then the propensity score, then the outcome
/// mean seeded by preliminary fits at each subject's location.
pub fn fit_nuisances(
    data: &PanelDataset,
    spec: &NuisanceSpec,
    cfg: &EstimatingConfig,
    kernel: Option<&KernelSpec>,
    design: &LocalDesign,
) -> Result<NuisanceSet> {
    let response = if cfg.response == ResponseWeighting::InverseProbability {
        let (rmap, hmap) = match (&spec.response_features, &spec.h_features) {
            (Some(r), Some(h)) => (r, h),
            _ => {
                return Err(Error::Validation(
                    "inverse probability weighting needs response and h feature maps".into(),
                ))
            }
        };
        Some(fit_response_gmm(data, rmap, hmap)?)
    } else {
        None
    };

    // propensity rows weighted by the single-period response weight
    let prop_weights: Option<Vec<Vec<f64>>> = match &response {
        Some(model) => {
            let mut w = Vec::with_capacity(data.n_subjects());
            for i in 0..data.n_subjects() {
                let mut row = Vec::with_capacity(data.time_count);
                for m in 0..data.time_count {
                    row.push(span_weight(data, model, i, m, m)?);
                }
                w.push(row);
            }
            Some(w)
        }
        None => None,
    };
    let propensity = fit_propensity(data, &spec.propensity_features, prop_weights.as_deref())?;

    let outcome = match &spec.outcome_features {
        None => OutcomeMeanModel::zero(),
        Some(fmap) => {
            let prelim_nuis = NuisanceSet {
                propensity: propensity.clone(),
                outcome: OutcomeMeanModel::zero(),
                response: response.clone(),
            };
            let mut prelim_cfg = cfg.clone();
            prelim_cfg.q_choice = QChoice::Gradient;
            let prelim: Vec<BlipParams> = match (kernel, cfg.family.is_linear()) {
                (Some(spec_k), true) => {
                    let terms = build_linear_terms(data, &prelim_nuis, &prelim_cfg, None)?;
                    (0..data.n_subjects())
                        .map(|i| {
                            solve_linear_local(
                                data,
                                &terms,
                                None,
                                design,
                                &data.subjects[i].location,
                                Some(spec_k),
                                None,
                            )
                            .map(|(phi, _)| BlipParams(phi[..terms.p].to_vec()))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                (Some(spec_k), false) => (0..data.n_subjects())
                    .map(|i| {
                        preliminary_fit(
                            data,
                            &data.subjects[i].location,
                            spec_k,
                            design,
                            &prelim_nuis,
                            cfg,
                            None,
                        )
                        .map(|f| BlipParams(f.psi))
                    })
                    .collect::<Result<Vec<_>>>()?,
                (None, _) => {
                    let g = fit_global(data, &prelim_nuis, &prelim_cfg)?;
                    vec![BlipParams(g.psi); data.n_subjects()]
                }
            };
            let pairs = cfg.resolved_pairs(data.horizon())?;
            let weight_fn: Option<Box<dyn Fn(usize, usize, usize) -> f64>> = match &response {
                Some(model) => {
                    let model = model.clone();
                    let data_ref = data.clone();
                    Some(Box::new(move |i, m, k| {
                        span_weight(&data_ref, &model, i, m, k).unwrap_or(0.0)
                    }))
                }
                None => None,
            };
            fit_outcome_mean(data, fmap, &cfg.family, &prelim, &pairs, weight_fn.as_deref())?
        }
    };

    Ok(NuisanceSet { propensity, outcome, response })
}

/// The full three-step procedure at a list of evaluation locations:
/// fit the propensity once, seed and fit the outcome mean, then solve
/// the weighted system at each target (targets run in parallel).
pub fn three_step_estimate(
    data: &PanelDataset,
    targets: &[Location],
    kernel: &KernelSpec,
    design: &LocalDesign,
    cfg: &EstimatingConfig,
    spec: &NuisanceSpec,
) -> Result<Vec<LocalFit>> {
    if targets.is_empty() {
        return Err(Error::Validation("no evaluation targets".into()));
    }
    let nuis = fit_nuisances(data, spec, cfg, Some(kernel), design)?;
    let terms = if cfg.family.is_linear() {
        Some(build_linear_terms(data, &nuis, cfg, None)?)
    } else {
        None
    };
    let fits: Vec<Result<LocalFit>> = targets
        .par_iter()
        .map(|t| {
            let fit = match &terms {
                Some(terms) => solve_linear_local(data, terms, None, design, t, Some(kernel), None)
                    .map(|(phi, ess)| {
                        finish_fit(&cfg.family, *t, kernel.tau, phi, terms.p, ess, 0, true)
                    }),
                None => solve_local(data, t, kernel, design, &nuis, cfg, None, SolverChoice::Auto),
            };
            fit.map_err(|e| Error::Computation(format!("target ({:.4}, {:.4}): {e}", t.s1, t.s2)))
        })
        .collect();
    fits.into_iter().collect()
}

/// Literal closed form of the single-lag scalar case: the design block
/// solve of `Gamma^{-1} P_n[omega d q (Y - mu)(A - e)]` with
/// `Gamma = P_n[omega d d' q A (A - e)]` and
/// `q = (1 - e) / var(H | history)`.
pub fn example3_closed_form(
    data: &PanelDataset,
    target: &Location,
    kernel: &KernelSpec,
    design: &LocalDesign,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
) -> Result<LocalFit> {
    let (lo, hi) = cfg.family.lag_window();
    if cfg.family.param_len() != 1 || hi != Some(lo) {
        return Err(Error::Validation(
            "the closed form covers scalar single-lag blip families".into(),
        ));
    }
    let lag = lo;
    let d = design.dim();
    let var_h = nuis.outcome.residual_variance();
    let mut gamma = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut mass = 0.0;
    for (i, s) in data.subjects.iter().enumerate() {
        let omega = kernel_weight(kernel, target, &s.location);
        let drow = design.row3(target, &s.location);
        mass += omega;
        if data.horizon() < lag {
            continue;
        }
        for m in cfg.start_time..=(data.horizon() - lag) {
            let k = m + lag;
            let strict = cfg.response == ResponseWeighting::FullData;
            let (Some(a), Some(y)) = (s.treatment[m], s.outcome[k]) else {
                if strict {
                    return Err(Error::Validation(format!(
                        "subject {} is missing values at pair ({m}, {k})",
                        s.id
                    )));
                }
                continue;
            };
            let w = match (&nuis.response, cfg.response) {
                (Some(model), ResponseWeighting::InverseProbability) => {
                    span_weight(data, model, i, m, k)?
                }
                _ => 1.0,
            };
            if w == 0.0 {
                continue;
            }
            let (Some(e), Some(mu)) = (
                nuis.propensity.predict_raw(data, i, m),
                nuis.outcome.predict(data, i, m, k),
            ) else {
                if strict {
                    return Err(Error::Validation(format!(
                        "subject {} is missing nuisance features at ({m}, {k})",
                        s.id
                    )));
                }
                continue;
            };
            let a = f64::from(a);
            let q = (1.0 - e) / var_h;
            for r in 0..d {
                rhs[r] += omega * drow[r] * w * q * (y - mu) * (a - e);
                for r2 in 0..d {
                    gamma[(r, r2)] += omega * drow[r] * drow[r2] * w * q * a * (a - e);
                }
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::Singular("no kernel mass at the target".into()));
    }
    gamma /= mass;
    rhs /= mass;
    let ess = effective_sample_size(data, Some(kernel), target, None);
    let phi = solve_stacked(&gamma, &rhs, ess, target)?;
    Ok(finish_fit(&cfg.family, *target, kernel.tau, phi.iter().copied().collect(), 1, ess, 0, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::Term;
    use crate::panel::SubjectRecord;
    use approx::assert_relative_eq;

    fn kernel(tau: f64) -> KernelSpec {
        KernelSpec::new(tau).unwrap()
    }

    #[test]
    fn kernel_weight_reference_values() {
        let origin = Location { s1: 0.0, s2: 0.0 };
        let at = |tau: f64, r: f64| kernel_weight(&kernel(tau), &origin, &Location { s1: r, s2: 0.0 });
        assert_relative_eq!(at(1.0, 0.0), 0.3989422804014327, epsilon = 1e-10);
        assert_relative_eq!(at(2.0, 0.0), 0.19947114020071635, epsilon = 1e-10);
        assert_relative_eq!(at(1.0, 1.0), 0.24197072451914337, epsilon = 1e-10);
    }

    #[test]
    fn kernel_weights_decrease_with_distance() {
        let origin = Location { s1: 0.0, s2: 0.0 };
        let spec = kernel(0.7);
        let mut last = f64::INFINITY;
        for r in [0.0, 0.1, 0.4, 0.9, 1.5] {
            let w = kernel_weight(&spec, &origin, &Location { s1: r, s2: 0.0 });
            assert!(w > 0.0 && w < last);
            last = w;
        }
    }

    fn subject(id: &str, loc: (f64, f64), a: &[u8], y: &[f64], x: &[f64]) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            location: Location { s1: loc.0, s2: loc.1 },
            first_time_index: 0,
            treatment: a.iter().map(|&v| Some(v)).collect(),
            covariates: x.iter().map(|&v| vec![Some(v)]).collect(),
            outcome: y.iter().map(|&v| Some(v)).collect(),
            response: vec![1; a.len()],
        }
    }

    fn toy_panel() -> PanelDataset {
        let subjects = vec![
            subject("a", (0.1, 0.2), &[1, 1, 0], &[0.5, 1.6, 0.9], &[0.3, -0.4, 0.2]),
            subject("b", (0.8, 0.3), &[0, 1, 1], &[-0.2, 0.4, 1.8], &[-0.1, 0.5, -0.3]),
            subject("c", (0.4, 0.9), &[1, 0, 1], &[1.1, 0.2, -0.5], &[0.7, 0.1, 0.4]),
            subject("d", (0.6, 0.6), &[0, 0, 1], &[0.0, 0.3, 0.8], &[-0.6, -0.2, 0.5]),
            subject("e", (0.2, 0.7), &[1, 1, 1], &[0.9, 1.2, 2.1], &[0.2, 0.6, -0.1]),
        ];
        PanelDataset::new(subjects, vec!["x1".into()]).unwrap()
    }

    fn manual_nuisances(data: &PanelDataset) -> NuisanceSet {
        // hand-constructed propensity so the expected values can be
        // enumerated directly in the tests
        let propensity = PropensityModel {
            features: FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]),
            coefficients: vec![-0.2, 0.5],
            standard_errors: vec![0.0, 0.0],
            iterations: 0,
        };
        let fam = BlipFamily::Lag1Linear;
        let prelim = vec![BlipParams(vec![0.0]); data.n_subjects()];
        let fmap = FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]);
        let pairs = vec![(1usize, 2usize)];
        let outcome = fit_outcome_mean(data, &fmap, &fam, &prelim, &pairs, None).unwrap();
        NuisanceSet { propensity, outcome, response: None }
    }

    #[test]
    fn estimating_function_matches_hand_enumeration() {
        let data = toy_panel();
        let nuis = manual_nuisances(&data);
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let psi = BlipParams(vec![0.4]);
        for (i, s) in data.subjects.iter().enumerate() {
            // only the pair (1, 2) is active: q = A_1; H = Y_2 - psi A_1
            let a1 = f64::from(s.treatment[1].unwrap());
            let x1 = s.covariates[1][0].unwrap();
            let e = 1.0 / (1.0 + (-(-0.2 + 0.5 * x1)).exp());
            let mu = nuis.outcome.predict(&data, i, 1, 2).unwrap();
            let h = s.outcome[2].unwrap() - 0.4 * a1;
            let expected = a1 * (h - mu) * (a1 - e);
            let got = estimating_function(&data, &s.id, &psi, &nuis, &cfg).unwrap();
            assert!((got[0] - expected).abs() < 1e-12, "{} vs {expected}", got[0]);
        }
    }

    #[test]
    fn estimating_function_zero_when_propensity_reproduces_treatment() {
        // raw probabilities saturate to exactly 0/1 when the covariate
        // copies the treatment and the coefficients are steep
        let mut data = toy_panel();
        for s in &mut data.subjects {
            for m in 0..3 {
                s.covariates[m][0] = Some(f64::from(s.treatment[m].unwrap()));
            }
        }
        let nuis = NuisanceSet {
            propensity: PropensityModel {
                features: FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]),
                coefficients: vec![-800.0, 1600.0],
                standard_errors: vec![0.0, 0.0],
                iterations: 0,
            },
            outcome: OutcomeMeanModel::zero(),
            response: None,
        };
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        for s in &data.subjects {
            let g = estimating_function(&data, &s.id, &BlipParams(vec![0.3]), &nuis, &cfg).unwrap();
            assert!(g[0].abs() < 1e-12, "{}", g[0]);
        }
    }

    #[test]
    fn ipw_with_unit_probabilities_reduces_to_complete_data() {
        let data = toy_panel();
        let mut nuis = manual_nuisances(&data);
        let cfg_off = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let mut cfg_on = cfg_off.clone();
        cfg_on.response = ResponseWeighting::InverseProbability;
        nuis.response = Some(ResponseModel {
            features: FeatureMap::new(vec![Term::Intercept]),
            eta: vec![800.0], // expit saturates to exactly 1.0
            moment_norm: 0.0,
            iterations: 0,
        });
        let psi = BlipParams(vec![0.4]);
        for s in &data.subjects {
            let off = estimating_function(&data, &s.id, &psi, &nuis, &cfg_off).unwrap();
            let on = estimating_function(&data, &s.id, &psi, &nuis, &cfg_on).unwrap();
            assert_eq!(off, on);
        }
    }

    #[test]
    fn closed_form_and_newton_agree_on_linear_blip() {
        let data = toy_panel();
        let nuis = manual_nuisances(&data);
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let design = LocalDesign { order: PolyOrder::Linear };
        let target = Location { s1: 0.5, s2: 0.5 };
        let spec = kernel(0.8);
        let a = solve_local(&data, &target, &spec, &design, &nuis, &cfg, None, SolverChoice::ClosedForm)
            .unwrap();
        let b = solve_local(&data, &target, &spec, &design, &nuis, &cfg, None, SolverChoice::Newton)
            .unwrap();
        assert!((a.psi[0] - b.psi[0]).abs() <= 1e-8, "{} vs {}", a.psi[0], b.psi[0]);
        assert!(b.converged);
    }

    #[test]
    fn example3_matches_generic_solver() {
        let data = toy_panel();
        let nuis = manual_nuisances(&data);
        let mut cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        cfg.q_choice = QChoice::Example3;
        let design = LocalDesign { order: PolyOrder::Linear };
        let target = Location { s1: 0.4, s2: 0.5 };
        let spec = kernel(0.9);
        let closed = example3_closed_form(&data, &target, &spec, &design, &nuis, &cfg).unwrap();
        let newton =
            solve_local(&data, &target, &spec, &design, &nuis, &cfg, None, SolverChoice::Newton)
                .unwrap();
        assert!(
            (closed.psi[0] - newton.psi[0]).abs() <= 1e-8,
            "{} vs {}",
            closed.psi[0],
            newton.psi[0]
        );
    }

    #[test]
    fn unit_subject_weights_change_nothing() {
        let data = toy_panel();
        let nuis = manual_nuisances(&data);
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let design = LocalDesign { order: PolyOrder::Linear };
        let target = Location { s1: 0.3, s2: 0.3 };
        let spec = kernel(0.8);
        let ones = vec![1.0; data.n_subjects()];
        let a = solve_local(&data, &target, &spec, &design, &nuis, &cfg, None, SolverChoice::Auto)
            .unwrap();
        let b = solve_local(&data, &target, &spec, &design, &nuis, &cfg, Some(&ones), SolverChoice::Auto)
            .unwrap();
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn rescaling_coordinates_and_bandwidth_preserves_estimate() {
        let data = toy_panel();
        let nuis = manual_nuisances(&data);
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let design = LocalDesign { order: PolyOrder::Linear };
        let target = Location { s1: 0.45, s2: 0.55 };
        let fit =
            solve_local(&data, &target, &kernel(0.6), &design, &nuis, &cfg, None, SolverChoice::Auto)
                .unwrap();

        let scale = 3.0;
        let mut scaled = data.clone();
        for s in &mut scaled.subjects {
            s.location = Location { s1: s.location.s1 * scale, s2: s.location.s2 * scale };
        }
        let scaled_nuis = manual_nuisances(&scaled);
        let target2 = Location { s1: target.s1 * scale, s2: target.s2 * scale };
        let fit2 = solve_local(
            &scaled,
            &target2,
            &kernel(0.6 * scale),
            &design,
            &scaled_nuis,
            &cfg,
            None,
            SolverChoice::Auto,
        )
        .unwrap();
        assert_relative_eq!(fit.psi[0], fit2.psi[0], epsilon = 1e-9);
    }

    #[test]
    fn single_location_order_zero_equals_global() {
        let mut data = toy_panel();
        let loc = Location { s1: 0.5, s2: 0.5 };
        for s in &mut data.subjects {
            s.location = loc;
        }
        let nuis = manual_nuisances(&data);
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let design = LocalDesign { order: PolyOrder::Constant };
        let fit = solve_local(&data, &loc, &kernel(0.4), &design, &nuis, &cfg, None, SolverChoice::Auto)
            .unwrap();
        let global = fit_global(&data, &nuis, &cfg).unwrap();
        assert_relative_eq!(fit.psi[0], global.psi[0], epsilon = 1e-10);
    }

    #[test]
    fn saturated_propensity_makes_preliminary_system_singular() {
        let mut data = toy_panel();
        for s in &mut data.subjects {
            for m in 0..3 {
                s.covariates[m][0] = Some(f64::from(s.treatment[m].unwrap()));
            }
        }
        let nuis = NuisanceSet {
            propensity: PropensityModel {
                features: FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]),
                coefficients: vec![-800.0, 1600.0],
                standard_errors: vec![0.0, 0.0],
                iterations: 0,
            },
            outcome: OutcomeMeanModel::zero(),
            response: None,
        };
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let design = LocalDesign { order: PolyOrder::Constant };
        let target = Location { s1: 0.5, s2: 0.5 };
        let err =
            preliminary_fit(&data, &target, &kernel(0.8), &design, &nuis, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
        assert!(err.to_string().contains("effective"), "{err}");
    }

    #[test]
    fn resolved_pairs_respect_lag_window() {
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let pairs = cfg.resolved_pairs(4).unwrap();
        assert_eq!(pairs, vec![(1, 2), (2, 3), (3, 4)]);
        let cfg = EstimatingConfig::new(BlipFamily::GaussianLag);
        let pairs = cfg.resolved_pairs(3).unwrap();
        assert_eq!(pairs, vec![(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]);
    }

    #[test]
    fn duplicate_targets_produce_identical_fits() {
        let data = toy_panel();
        let cfg = EstimatingConfig::new(BlipFamily::Lag1Linear);
        let design = LocalDesign { order: PolyOrder::Linear };
        let spec = NuisanceSpec {
            propensity_features: FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]),
            outcome_features: Some(FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)])),
            response_features: None,
            h_features: None,
        };
        let t = Location { s1: 0.5, s2: 0.4 };
        let fits = three_step_estimate(&data, &[t, t], &kernel(0.7), &design, &cfg, &spec).unwrap();
        assert_eq!(fits.len(), 2);
        assert_eq!(fits[0].phi, fits[1].phi);
        assert_eq!(fits[0].ess, fits[1].ess);
    }
}
