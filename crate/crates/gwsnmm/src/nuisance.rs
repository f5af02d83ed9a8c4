//! Nuisance models: the treatment propensity score, the outcome mean of
//! blipped-down pseudo-outcomes, and the response probability under
//! informative non-response.
//!
//! All three are parametric working models over declarative feature
//! maps. The propensity and response models are logistic; the outcome
//! mean is linear with one coefficient set per time lag. Response
//! probabilities are estimated from a moment system with a non-response
//! instrument, since the response may depend on the possibly missing
//! current values themselves.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::blip::{blip_down, BlipFamily, BlipParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::PanelDataset;

/// Probability floor applied to propensity and response predictions so
/// inverse-probability weights stay bounded.
pub const PROB_FLOOR: f64 = 1e-3;

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clip_probability(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// One regressor in a feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    /// Covariate value at the current time.
    Covariate(usize),
    /// Squared covariate value at the current time.
    CovariateSquared(usize),
    /// Cumulative treatment count over earlier times.
    CumTreatment,
    /// Squared cumulative treatment count.
    CumTreatmentSquared,
    /// Cumulative response count over earlier times.
    CumResponse,
    /// Treatment at the current time (response-model feature).
    Treatment,
    /// Outcome at the current time (response-model feature).
    Outcome,
}

/// A deterministic map from a subject's history at time `m` to a
/// regressor vector. Returns `None` when a needed value is unobserved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    terms: Vec<Term>,
}

impl FeatureMap {
    pub fn new(terms: Vec<Term>) -> Self {
        FeatureMap { terms }
    }

    /// Parse terms like `"1"`, `"X:visibility"`, `"X2:visibility"`,
    /// `"cumA"`, `"cumA2"`, `"cumR"`, `"A"`, `"Y"`.
    pub fn parse(specs: &[String], covariate_names: &[String]) -> Result<Self> {
        let mut terms = Vec::with_capacity(specs.len());
        for s in specs {
            let term = match s.trim() {
                "1" => Term::Intercept,
                "cumA" => Term::CumTreatment,
                "cumA2" => Term::CumTreatmentSquared,
                "cumR" => Term::CumResponse,
                "A" => Term::Treatment,
                "Y" => Term::Outcome,
                other => {
                    let (cons, name): (fn(usize) -> Term, &str) =
                        if let Some(n) = other.strip_prefix("X2:") {
                            (Term::CovariateSquared, n)
                        } else if let Some(n) = other.strip_prefix("X:") {
                            (Term::Covariate, n)
                        } else {
                            return Err(Error::Validation(format!("unknown feature term {other:?}")));
                        };
                    let idx = covariate_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::Validation(format!("unknown covariate {name:?}")))?;
                    cons(idx)
                }
            };
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(Error::Validation("feature map has no terms".into()));
        }
        Ok(FeatureMap { terms })
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Evaluate at `(subject, m)`. `None` if any needed cell is missing.
    pub fn eval(&self, data: &PanelDataset, subject: usize, m: usize) -> Option<Vec<f64>> {
        let s = &data.subjects[subject];
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let v = match t {
                Term::Intercept => 1.0,
                Term::Covariate(j) => s.covariates[m][*j]?,
                Term::CovariateSquared(j) => {
                    let x = s.covariates[m][*j]?;
                    x * x
                }
                Term::CumTreatment => s.cum_treatment_before(m)?,
                Term::CumTreatmentSquared => {
                    let c = s.cum_treatment_before(m)?;
                    c * c
                }
                Term::CumResponse => s.cum_response_before(m),
                Term::Treatment => f64::from(s.treatment[m]?),
                Term::Outcome => s.outcome[m]?,
            };
            out.push(v);
        }
        Some(out)
    }

    /// Indices of terms that are computable at every `(subject, m)`.
    fn always_computable(&self, data: &PanelDataset) -> Vec<usize> {
        (0..self.terms.len())
            .filter(|&t| {
                let single = FeatureMap { terms: vec![self.terms[t].clone()] };
                data.subjects
                    .iter()
                    .enumerate()
                    .all(|(i, _)| (0..data.time_count).all(|m| single.eval(data, i, m).is_some()))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------
// Propensity score
// ---------------------------------------------------------------------

/// Fitted logistic model for the treatment propensity.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub features: FeatureMap,
    pub coefficients: Vec<f64>,
    /// Model-based standard errors from the final information matrix.
    pub standard_errors: Vec<f64>,
    pub iterations: usize,
}

impl PropensityModel {
    /// Linear predictor probability without the floor, `None` when the
    /// features are unavailable.
    pub fn predict_raw(&self, data: &PanelDataset, subject: usize, m: usize) -> Option<f64> {
        let x = self.features.eval(data, subject, m)?;
        Some(expit(dot(&self.coefficients, &x)))
    }

    /// Floored probability in `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn predict(&self, data: &PanelDataset, subject: usize, m: usize) -> Option<f64> {
        self.predict_raw(data, subject, m).map(clip_probability)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit the propensity model by iteratively reweighted least squares.
///
/// A row is one `(subject, m)` with observed treatment and computable
/// features. `weights` (outer index subject, inner index time) scale
/// each row's log-likelihood contribution; rows with zero weight drop.
pub fn fit_propensity(
    data: &PanelDataset,
    features: &FeatureMap,
    weights: Option<&[Vec<f64>]>,
) -> Result<PropensityModel> {
    let mut rows: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        for m in 0..data.time_count {
            let Some(a) = s.treatment[m] else { continue };
            let Some(x) = features.eval(data, i, m) else { continue };
            let w = weights.map_or(1.0, |w| w[i][m]);
            if w < 0.0 {
                return Err(Error::Validation("propensity weights must be nonnegative".into()));
            }
            if w > 0.0 {
                rows.push((x, f64::from(a), w));
            }
        }
    }
    let (coefficients, standard_errors, iterations) =
        logistic_irls(&rows, features.dim(), "propensity")?;
    Ok(PropensityModel { features: features.clone(), coefficients, standard_errors, iterations })
}

/// Weighted logistic regression via IRLS. Returns coefficients,
/// model-based standard errors, and the iteration count.
fn logistic_irls(
    rows: &[(Vec<f64>, f64, f64)],
    dim: usize,
    context: &str,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("{context}: no usable rows")));
    }
    if rows.iter().all(|(_, a, _)| *a == 1.0) || rows.iter().all(|(_, a, _)| *a == 0.0) {
        return Err(Error::PerfectSeparation(format!(
            "{context}: response is constant, likelihood has no interior maximum"
        )));
    }
    let mut beta = DVector::<f64>::zeros(dim);
    let max_iter = 100;
    let mut info = DMatrix::<f64>::zeros(dim, dim);
    for it in 0..max_iter {
        let mut score = DVector::<f64>::zeros(dim);
        info.fill(0.0);
        for (x, a, w) in rows {
            let eta = x.iter().zip(beta.iter()).map(|(xi, bi)| xi * bi).sum::<f64>();
            let p = expit(eta);
            let r = w * (a - p);
            let wv = (w * p * (1.0 - p)).max(1e-12);
            for i in 0..dim {
                score[i] += r * x[i];
                for j in i..dim {
                    info[(i, j)] += wv * x[i] * x[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                info[(i, j)] = info[(j, i)];
            }
        }
        let score_norm = score.norm();
        if score_norm <= 1e-8 {
            let cov = info
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular(format!("{context}: information matrix")))?;
            let se = (0..dim).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            return Ok((beta.iter().copied().collect(), se, it));
        }
        let step = linalg::solve(&info, &score, context)?;
        beta += step;
        if beta.amax() > 20.0 {
            return Err(Error::PerfectSeparation(format!(
                "{context}: coefficient norm diverged (|beta|_max = {:.1})",
                beta.amax()
            )));
        }
    }
    Err(Error::NonConvergence(format!("{context}: IRLS did not converge in {max_iter} iterations")))
}

// ---------------------------------------------------------------------
// Outcome mean
// ---------------------------------------------------------------------

/// Fitted mean model for blipped-down pseudo-outcomes, one coefficient
/// set per time lag `k - m`.
#[derive(Debug, Clone)]
pub struct OutcomeMeanModel {
    kind: OutcomeMeanKind,
}

#[derive(Debug, Clone)]
enum OutcomeMeanKind {
    /// The degenerate model `mu = 0` (used as the misspecified variant).
    Zero,
    Fitted {
        features: FeatureMap,
        coef_by_lag: BTreeMap<usize, Vec<f64>>,
        residual_variance: f64,
    },
}

impl OutcomeMeanModel {
    /// The identically-zero mean model.
    pub fn zero() -> Self {
        OutcomeMeanModel { kind: OutcomeMeanKind::Zero }
    }

    /// Assemble a fitted model from externally computed pieces.
    pub(crate) fn from_parts(
        features: FeatureMap,
        coef_by_lag: BTreeMap<usize, Vec<f64>>,
        residual_variance: f64,
    ) -> Self {
        OutcomeMeanModel {
            kind: OutcomeMeanKind::Fitted { features, coef_by_lag, residual_variance },
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, OutcomeMeanKind::Zero)
    }

    /// Predicted mean pseudo-outcome for pair `(m, k)`; `None` when the
    /// features are unavailable or the lag was not in the fit.
    pub fn predict(&self, data: &PanelDataset, subject: usize, m: usize, k: usize) -> Option<f64> {
        match &self.kind {
            OutcomeMeanKind::Zero => Some(0.0),
            OutcomeMeanKind::Fitted { features, coef_by_lag, .. } => {
                let coef = coef_by_lag.get(&(k - m))?;
                let x = features.eval(data, subject, m)?;
                Some(dot(coef, &x))
            }
        }
    }

    /// Pooled mean squared residual of the fit, the plug-in for the
    /// conditional variance of the pseudo-outcome. 1 for the zero model.
    pub fn residual_variance(&self) -> f64 {
        match &self.kind {
            OutcomeMeanKind::Zero => 1.0,
            OutcomeMeanKind::Fitted { residual_variance, .. } => *residual_variance,
        }
    }

    pub fn coefficients_for_lag(&self, lag: usize) -> Option<&[f64]> {
        match &self.kind {
            OutcomeMeanKind::Zero => None,
            OutcomeMeanKind::Fitted { coef_by_lag, .. } => coef_by_lag.get(&lag).map(|c| c.as_slice()),
        }
    }
}

/// Fit the outcome mean model by weighted least squares of pseudo-
/// outcomes on history features, sharing coefficients within each lag.
///
/// `prelim` supplies the blip parameters used to blip down each
/// subject's outcomes (one entry per subject, typically the preliminary
/// estimate at the subject's own location). Rows whose pseudo-outcome
/// or features are unavailable are skipped; `weights`, when given, maps
/// `(subject, m, k)` to a nonnegative row weight.
pub fn fit_outcome_mean(
    data: &PanelDataset,
    features: &FeatureMap,
    family: &BlipFamily,
    prelim: &[BlipParams],
    pairs: &[(usize, usize)],
    weights: Option<&dyn Fn(usize, usize, usize) -> f64>,
) -> Result<OutcomeMeanModel> {
    if prelim.len() != data.n_subjects() {
        return Err(Error::Validation(format!(
            "need one preliminary parameter vector per subject ({} != {})",
            prelim.len(),
            data.n_subjects()
        )));
    }
    let mut rows_by_lag: BTreeMap<usize, Vec<(Vec<f64>, f64, f64)>> = BTreeMap::new();
    for i in 0..data.n_subjects() {
        for &(m, k) in pairs {
            let Some(x) = features.eval(data, i, m) else { continue };
            let Ok(h) = blip_down(data, i, m, k, family, &prelim[i]) else { continue };
            let w = weights.map_or(1.0, |f| f(i, m, k));
            if w < 0.0 {
                return Err(Error::Validation("outcome weights must be nonnegative".into()));
            }
            if w > 0.0 {
                rows_by_lag.entry(k - m).or_default().push((x, h.value, w));
            }
        }
    }
    if rows_by_lag.is_empty() {
        return Err(Error::Validation("no usable pseudo-outcome rows".into()));
    }
    let mut coef_by_lag = BTreeMap::new();
    let mut rss = 0.0;
    let mut wsum = 0.0;
    for (lag, rows) in &rows_by_lag {
        let beta =
            linalg::weighted_least_squares(rows, features.dim(), &format!("outcome mean lag {lag}"))?;
        for (x, y, w) in rows {
            let r = y - x.iter().zip(beta.iter()).map(|(xi, bi)| xi * bi).sum::<f64>();
            rss += w * r * r;
            wsum += w;
        }
        coef_by_lag.insert(*lag, beta.iter().copied().collect());
    }
    let residual_variance = if wsum > 0.0 { rss / wsum } else { 0.0 };
    Ok(OutcomeMeanModel {
        kind: OutcomeMeanKind::Fitted {
            features: features.clone(),
            coef_by_lag,
            residual_variance,
        },
    })
}

/// Alternative outcome-mean fit restricted to subjects who followed the
/// all-control regime on `[m, k]`: regresses the raw outcome at `k` on
/// history features at `m` over that subset.
pub fn fit_outcome_mean_regime(
    data: &PanelDataset,
    features: &FeatureMap,
    m: usize,
    k: usize,
) -> Result<OutcomeMeanModel> {
    let mut rows = Vec::new();
    'subject: for (i, s) in data.subjects.iter().enumerate() {
        for l in m..=k {
            match s.treatment[l] {
                Some(0) => {}
                _ => continue 'subject,
            }
        }
        let (Some(x), Some(y)) = (features.eval(data, i, m), s.outcome[k]) else { continue };
        rows.push((x, y, 1.0));
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!(
            "no subject followed the all-control regime on [{m}, {k}]"
        )));
    }
    let beta = linalg::weighted_least_squares(&rows, features.dim(), "regime outcome mean")?;
    let mut rss = 0.0;
    for (x, y, _) in &rows {
        let r = y - x.iter().zip(beta.iter()).map(|(xi, bi)| xi * bi).sum::<f64>();
        rss += r * r;
    }
    let mut coef_by_lag = BTreeMap::new();
    coef_by_lag.insert(k - m, beta.iter().copied().collect());
    Ok(OutcomeMeanModel {
        kind: OutcomeMeanKind::Fitted {
            features: features.clone(),
            coef_by_lag,
            residual_variance: rss / rows.len() as f64,
        },
    })
}

// ---------------------------------------------------------------------
// Response probability
// ---------------------------------------------------------------------

/// Fitted logistic model for the per-time response probability.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    pub features: FeatureMap,
    pub eta: Vec<f64>,
    /// Final moment vector norm at the solution.
    pub moment_norm: f64,
    pub iterations: usize,
}

impl ResponseModel {
    pub fn predict_raw(&self, data: &PanelDataset, subject: usize, m: usize) -> Option<f64> {
        let x = self.features.eval(data, subject, m)?;
        Some(expit(dot(&self.eta, &x)))
    }

    pub fn predict(&self, data: &PanelDataset, subject: usize, m: usize) -> Option<f64> {
        self.predict_raw(data, subject, m).map(clip_probability)
    }
}

/// Empirical moment of the response system: mean over subjects of
/// `sum_m (R_m / pi_m(eta) - 1) h(Z_m, Rbar_{m-1})`.
fn response_moment(
    data: &PanelDataset,
    response_features: &FeatureMap,
    h_rows: &[Vec<Option<Vec<f64>>>],
    eta: &[f64],
    d_h: usize,
) -> Result<DVector<f64>> {
    let mut moment = DVector::<f64>::zeros(d_h);
    for (i, s) in data.subjects.iter().enumerate() {
        for m in 0..data.time_count {
            let h = h_rows[i][m]
                .as_ref()
                .ok_or_else(|| Error::Validation("instrument must be observed at all times".into()))?;
            let factor = if s.response[m] == 1 {
                let x = response_features.eval(data, i, m).ok_or_else(|| {
                    Error::Validation(format!(
                        "response features unavailable for responding subject {} at {m}",
                        s.id
                    ))
                })?;
                1.0 / expit(dot(eta, &x)) - 1.0
            } else {
                -1.0
            };
            for j in 0..d_h {
                moment[j] += factor * h[j];
            }
        }
    }
    moment /= data.n_subjects() as f64;
    Ok(moment)
}

/// Estimate the response model from the instrument moment system.
///
/// With as many moments as parameters the system is solved by damped
/// Newton to a moment norm below 1e-8; with more moments than
/// parameters the squared moment norm is minimized by Gauss-Newton.
/// Starts from zero and from a logistic fit on the always-observed
/// features; diverging iterates are reported as boundary solutions.
pub fn fit_response_gmm(
    data: &PanelDataset,
    response_features: &FeatureMap,
    h_features: &FeatureMap,
) -> Result<ResponseModel> {
    let d_eta = response_features.dim();
    let d_h = h_features.dim();
    if d_h < d_eta {
        return Err(Error::Validation(format!(
            "h has dimension {d_h} but the response model needs at least {d_eta} moments"
        )));
    }
    let everyone_responded =
        data.subjects.iter().all(|s| s.response.iter().all(|&r| r == 1));
    if everyone_responded && response_features.terms().contains(&Term::Intercept) {
        return Err(Error::BoundarySolution(
            "all subjects responded at all times; the moment equation is only satisfied as the \
             intercept diverges"
                .into(),
        ));
    }

    // Precompute h rows once; they do not depend on eta.
    let h_rows: Vec<Vec<Option<Vec<f64>>>> = (0..data.n_subjects())
        .map(|i| (0..data.time_count).map(|m| h_features.eval(data, i, m)).collect())
        .collect();

    let mut starts: Vec<DVector<f64>> = vec![DVector::zeros(d_eta)];
    if let Some(s) = mar_start(data, response_features) {
        starts.push(s);
    }

    let objective = |eta: &DVector<f64>| -> Result<(DVector<f64>, f64)> {
        let m = response_moment(data, response_features, &h_rows, eta.as_slice(), d_h)?;
        let n = m.norm();
        Ok((m, n))
    };

    let mut best: Option<(DVector<f64>, f64, usize)> = None;
    let mut boundary_seen = false;
    for start in starts {
        match gmm_solve(&objective, start, d_eta, d_h) {
            Ok((eta, norm, iters)) => {
                if best.as_ref().is_none_or(|(_, bn, _)| norm < *bn) {
                    best = Some((eta, norm, iters));
                }
            }
            Err(Error::BoundarySolution(_)) => boundary_seen = true,
            Err(_) => {}
        }
    }
    match best {
        Some((eta, moment_norm, iterations)) => Ok(ResponseModel {
            features: response_features.clone(),
            eta: eta.iter().copied().collect(),
            moment_norm,
            iterations,
        }),
        None if boundary_seen => Err(Error::BoundarySolution(
            "response moment system diverged from every start".into(),
        )),
        None => Err(Error::NonConvergence(
            "response moment system did not converge from any start".into(),
        )),
    }
}

/// Logistic fit of the response indicator on the always-computable
/// subset of the response features, used as a solver start. Treats the
/// data as missing at random, which is exactly the assumption the
/// instrument system corrects.
fn mar_start(data: &PanelDataset, response_features: &FeatureMap) -> Option<DVector<f64>> {
    let usable = response_features.always_computable(data);
    if usable.is_empty() {
        return None;
    }
    let sub = FeatureMap::new(
        usable.iter().map(|&t| response_features.terms()[t].clone()).collect(),
    );
    let mut rows = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        for m in 0..data.time_count {
            let x = sub.eval(data, i, m)?;
            rows.push((x, f64::from(s.response[m]), 1.0));
        }
    }
    let (coef, _, _) = logistic_irls(&rows, sub.dim(), "response MAR start").ok()?;
    let mut eta = DVector::zeros(response_features.dim());
    for (slot, &t) in usable.iter().enumerate() {
        eta[t] = coef[slot];
    }
    Some(eta)
}

/// Damped Newton (square) or Gauss-Newton (overidentified) on the
/// moment system, with a numeric Jacobian and step halving.
fn gmm_solve(
    objective: &dyn Fn(&DVector<f64>) -> Result<(DVector<f64>, f64)>,
    start: DVector<f64>,
    d_eta: usize,
    d_h: usize,
) -> Result<(DVector<f64>, f64, usize)> {
    let tol = 1e-8;
    let max_iter = 200;
    let mut eta = start;
    let (mut moment, mut norm) = objective(&eta)?;
    for it in 0..max_iter {
        let stationary_tol = if d_h == d_eta { f64::INFINITY } else { tol };
        if d_h == d_eta && norm <= tol {
            return Ok((eta, norm, it));
        }
        // numeric Jacobian of the moment vector
        let mut jac = DMatrix::<f64>::zeros(d_h, d_eta);
        for j in 0..d_eta {
            let h = 1e-6 * (1.0 + eta[j].abs());
            let mut shifted = eta.clone();
            shifted[j] += h;
            let (mj, _) = objective(&shifted)?;
            for r in 0..d_h {
                jac[(r, j)] = (mj[r] - moment[r]) / h;
            }
        }
        let grad = jac.transpose() * &moment;
        if d_h > d_eta && grad.norm() <= stationary_tol {
            return Ok((eta, norm, it));
        }
        let step = if d_h == d_eta {
            linalg::solve(&jac, &moment, "response moment Jacobian")?
        } else {
            let jtj = jac.transpose() * &jac;
            linalg::solve(&jtj, &grad, "response Gauss-Newton system")?
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let candidate = &eta - lambda * &step;
            match objective(&candidate) {
                Ok((m_new, n_new)) if n_new < norm => {
                    eta = candidate;
                    moment = m_new;
                    norm = n_new;
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        if eta.amax() > 30.0 {
            return Err(Error::BoundarySolution(format!(
                "response coefficients diverged (|eta|_max = {:.1})",
                eta.amax()
            )));
        }
        if !accepted {
            // no descent direction left
            if d_h > d_eta {
                return Ok((eta, norm, it));
            }
            return Err(Error::NonConvergence(
                "response Newton stalled before reaching tolerance".into(),
            ));
        }
    }
    if d_h > d_eta {
        return Ok((eta, norm, max_iter));
    }
    Err(Error::NonConvergence(format!(
        "response moment norm {norm:.2e} after {max_iter} iterations"
    )))
}

/// Inverse-probability-of-response weights `prod_{l=m..=k} R_l / pi_l`
/// for every subject. Zero as soon as any response indicator in the
/// span is zero; probabilities are floored before inversion.
pub fn response_weights(
    data: &PanelDataset,
    model: &ResponseModel,
    m: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if m > k || k > data.horizon() {
        return Err(Error::Validation(format!(
            "need m <= k <= {}, got ({m}, {k})",
            data.horizon()
        )));
    }
    let mut clipped = 0usize;
    let mut out = Vec::with_capacity(data.n_subjects());
    for (i, s) in data.subjects.iter().enumerate() {
        let mut w = 1.0;
        for l in m..=k {
            if s.response[l] == 0 {
                w = 0.0;
                break;
            }
            let raw = model.predict_raw(data, i, l).ok_or_else(|| {
                Error::Validation(format!(
                    "response features unavailable for subject {} at {l}",
                    s.id
                ))
            })?;
            if raw < PROB_FLOOR {
                clipped += 1;
            }
            w /= clip_probability(raw);
        }
        out.push(w);
    }
    if clipped > 0 {
        log::warn!("response probabilities clipped at {PROB_FLOOR} for {clipped} terms");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Location, SubjectRecord};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn complete_subject(id: &str, loc: (f64, f64), a: &[u8], y: &[f64], x: &[f64]) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            location: Location::new(loc.0, loc.1).unwrap(),
            first_time_index: 0,
            treatment: a.iter().map(|&v| Some(v)).collect(),
            covariates: x.iter().map(|&v| vec![Some(v)]).collect(),
            outcome: y.iter().map(|&v| Some(v)).collect(),
            response: vec![1; a.len()],
        }
    }

    /// Sequentially simulated logistic treatment panel matching the
    /// simulation design: logit e = -1 + 0.5 x + 0.25 cumA.
    fn logistic_panel(n: usize, times: usize, seed: u64) -> PanelDataset {
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut a = Vec::with_capacity(times);
            let mut x = Vec::with_capacity(times);
            let mut cum = 0.0;
            for _ in 0..times {
                let xv: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let p = expit(-1.0 + 0.5 * xv + 0.25 * cum);
                let av = u8::from(rng.random::<f64>() < p);
                cum += f64::from(av);
                a.push(av);
                x.push(xv);
            }
            let y = vec![0.0; times];
            subjects.push(complete_subject(&format!("s{i}"), (0.0, 0.0), &a, &y, &x));
        }
        PanelDataset::new(subjects, vec!["x1".into()]).unwrap()
    }

    fn default_propensity_features() -> FeatureMap {
        FeatureMap::new(vec![Term::Intercept, Term::Covariate(0), Term::CumTreatment])
    }

    #[test]
    fn irls_recovers_generating_coefficients() {
        let data = logistic_panel(400, 26, 11);
        let model = fit_propensity(&data, &default_propensity_features(), None).unwrap();
        let truth = [-1.0, 0.5, 0.25];
        for j in 0..3 {
            let err = (model.coefficients[j] - truth[j]).abs();
            assert!(
                err < 3.0 * model.standard_errors[j],
                "coef {j}: {} vs {} (se {})",
                model.coefficients[j],
                truth[j],
                model.standard_errors[j]
            );
        }
    }

    #[test]
    fn irls_satisfies_score_equations() {
        let data = logistic_panel(80, 10, 3);
        let fmap = default_propensity_features();
        let model = fit_propensity(&data, &fmap, None).unwrap();
        let mut score = vec![0.0; 3];
        for (i, s) in data.subjects.iter().enumerate() {
            for m in 0..data.time_count {
                let p = model.predict_raw(&data, i, m).unwrap();
                let x = fmap.eval(&data, i, m).unwrap();
                let a = f64::from(s.treatment[m].unwrap());
                for j in 0..3 {
                    score[j] += (a - p) * x[j];
                }
            }
        }
        let norm = score.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-8, "score norm {norm}");
    }

    #[test]
    fn all_treated_is_perfect_separation() {
        let subjects = (0..20)
            .map(|i| {
                complete_subject(
                    &format!("s{i}"),
                    (0.0, 0.0),
                    &[1, 1, 1],
                    &[0.0, 0.0, 0.0],
                    &[0.1 * i as f64, 0.2, 0.3],
                )
            })
            .collect();
        let data = PanelDataset::new(subjects, vec!["x1".into()]).unwrap();
        let err = fit_propensity(&data, &default_propensity_features(), None).unwrap_err();
        assert!(matches!(err, Error::PerfectSeparation(_)), "{err}");
    }

    #[test]
    fn constant_weights_leave_fit_unchanged() {
        let data = logistic_panel(60, 8, 5);
        let fmap = default_propensity_features();
        let ones = vec![vec![1.0; data.time_count]; data.n_subjects()];
        let twos = vec![vec![2.0; data.time_count]; data.n_subjects()];
        let m1 = fit_propensity(&data, &fmap, Some(&ones)).unwrap();
        let m2 = fit_propensity(&data, &fmap, Some(&twos)).unwrap();
        for j in 0..3 {
            assert_relative_eq!(m1.coefficients[j], m2.coefficients[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn outcome_mean_zero_pseudo_outcomes_give_zero_fit() {
        // outcomes equal to the blip sum leave H identically zero
        let subjects = vec![
            complete_subject("a", (0.0, 0.0), &[1, 0, 1], &[0.0, 0.5, 0.0], &[0.3, -0.2, 0.8]),
            complete_subject("b", (1.0, 1.0), &[0, 1, 0], &[0.0, 0.0, 0.5], &[-0.6, 0.4, 0.1]),
        ];
        let data = PanelDataset::new(subjects, vec!["x1".into()]).unwrap();
        let fam = BlipFamily::Lag1Linear;
        let prelim = vec![BlipParams(vec![0.5]); 2];
        let pairs = vec![(1usize, 2usize)];
        let fmap = FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]);
        let model = fit_outcome_mean(&data, &fmap, &fam, &prelim, &pairs, None).unwrap();
        let coef = model.coefficients_for_lag(1).unwrap();
        assert!(coef.iter().all(|c| c.abs() < 1e-12), "{coef:?}");
        assert!(model.residual_variance() < 1e-20);
    }

    #[test]
    fn outcome_mean_duplicate_columns_error() {
        let data = logistic_panel(30, 6, 9);
        let fam = BlipFamily::Lag1Linear;
        let prelim = vec![BlipParams(vec![0.0]); 30];
        let pairs: Vec<(usize, usize)> = (1..5).map(|m| (m, m + 1)).collect();
        let fmap = FeatureMap::new(vec![
            Term::Intercept,
            Term::Covariate(0),
            Term::Covariate(0),
        ]);
        let err = fit_outcome_mean(&data, &fmap, &fam, &prelim, &pairs, None).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn regime_fit_equals_full_fit_when_no_one_is_treated() {
        let subjects = vec![
            complete_subject("a", (0.0, 0.0), &[0, 0, 0], &[1.0, 2.0, 1.5], &[0.3, -0.2, 0.8]),
            complete_subject("b", (1.0, 1.0), &[0, 0, 0], &[0.5, 1.0, 2.5], &[-0.6, 0.4, 0.1]),
            complete_subject("c", (0.5, 0.2), &[0, 0, 0], &[0.7, 1.4, 0.9], &[0.9, -0.8, 0.4]),
        ];
        let data = PanelDataset::new(subjects, vec!["x1".into()]).unwrap();
        let fmap = FeatureMap::new(vec![Term::Intercept, Term::Covariate(0)]);
        let fam = BlipFamily::Lag1Linear;
        let prelim = vec![BlipParams(vec![0.0]); 3];
        let full = fit_outcome_mean(&data, &fmap, &fam, &prelim, &[(1, 2)], None).unwrap();
        let regime = fit_outcome_mean_regime(&data, &fmap, 1, 2).unwrap();
        let a = full.coefficients_for_lag(1).unwrap();
        let b = regime.coefficients_for_lag(1).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert_relative_eq!(x, y, epsilon = 1e-8);
        }
    }

    #[test]
    fn regime_fit_errors_when_everyone_treated() {
        let subjects = vec![complete_subject(
            "a",
            (0.0, 0.0),
            &[1, 1, 1],
            &[1.0, 2.0, 1.5],
            &[0.3, -0.2, 0.8],
        )];
        let data = PanelDataset::new(subjects, vec!["x1".into()]).unwrap();
        let fmap = FeatureMap::new(vec![Term::Intercept]);
        assert!(fit_outcome_mean_regime(&data, &fmap, 1, 2).is_err());
    }

    fn response_panel(n: usize, times: usize, seed: u64) -> PanelDataset {
        // X observed always; logit pi = -1 + 0.5 Y + 0.25 cumR with
        // Y = X + noise; A irrelevant here.
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut treatment = Vec::new();
            let mut covariates = Vec::new();
            let mut outcome = Vec::new();
            let mut response = Vec::new();
            let mut cum_r = 0.0;
            for _ in 0..times {
                let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
                let y = x + (rng.random::<f64>() - 0.5);
                let pi = expit(-1.0 + 0.5 * y + 0.25 * cum_r);
                let r = u8::from(rng.random::<f64>() < pi);
                cum_r += f64::from(r);
                covariates.push(vec![Some(x)]);
                treatment.push((r == 1).then_some(0));
                outcome.push((r == 1).then_some(y));
                response.push(r);
            }
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                location: Location::new(0.0, 0.0).unwrap(),
                first_time_index: 0,
                treatment,
                covariates,
                outcome,
                response,
            });
        }
        PanelDataset::new(subjects, vec!["x1".into()]).unwrap()
    }

    fn response_fmaps() -> (FeatureMap, FeatureMap) {
        let rmap = FeatureMap::new(vec![Term::Intercept, Term::Outcome, Term::CumResponse]);
        let hmap = FeatureMap::new(vec![
            Term::Intercept,
            Term::CumResponse,
            Term::Covariate(0),
            Term::CovariateSquared(0),
        ]);
        (rmap, hmap)
    }

    #[test]
    fn gmm_recovers_response_coefficients() {
        let data = response_panel(800, 20, 17);
        let (rmap, hmap) = response_fmaps();
        let model = fit_response_gmm(&data, &rmap, &hmap).unwrap();
        let truth = [-1.0, 0.5, 0.25];
        for j in 0..3 {
            assert!(
                (model.eta[j] - truth[j]).abs() < 0.25,
                "eta[{j}] = {} vs {}",
                model.eta[j],
                truth[j]
            );
        }
    }

    #[test]
    fn gmm_square_system_reaches_moment_tolerance() {
        let data = response_panel(200, 12, 23);
        let rmap = FeatureMap::new(vec![Term::Intercept, Term::Outcome, Term::CumResponse]);
        // exactly identified: one moment per parameter
        let hmap = FeatureMap::new(vec![Term::Intercept, Term::CumResponse, Term::Covariate(0)]);
        let model = fit_response_gmm(&data, &rmap, &hmap).unwrap();
        assert!(model.moment_norm <= 1e-8, "moment norm {}", model.moment_norm);
    }

    #[test]
    fn complete_response_is_a_boundary_solution() {
        let data = logistic_panel(20, 5, 2);
        let (rmap, hmap) = response_fmaps();
        let err = fit_response_gmm(&data, &rmap, &hmap).unwrap_err();
        assert!(matches!(err, Error::BoundarySolution(_)), "{err}");
    }

    #[test]
    fn response_weights_products() {
        let data = response_panel(50, 6, 31);
        let (rmap, hmap) = response_fmaps();
        let model = fit_response_gmm(&data, &rmap, &hmap).unwrap();
        let w = response_weights(&data, &model, 1, 3).unwrap();
        for (i, s) in data.subjects.iter().enumerate() {
            if s.response[1..=3].iter().any(|&r| r == 0) {
                assert_eq!(w[i], 0.0);
            } else {
                let mut expected = 1.0;
                for l in 1..=3 {
                    expected /= model.predict(&data, i, l).unwrap();
                }
                assert_relative_eq!(w[i], expected, epsilon = 1e-12);
                assert!(w[i] >= 1.0);
            }
        }
    }

    #[test]
    fn response_weight_direct_product_example() {
        // R = (1, 1) with pi = (0.5, 0.25) -> weight 8
        let mut data = response_panel(1, 2, 1);
        data.subjects[0].response = vec![1, 1];
        data.subjects[0].outcome = vec![Some(0.0), Some(0.0)];
        data.subjects[0].treatment = vec![Some(0), Some(0)];
        // choose eta so pi(0) = 0.5 and pi(1) = 0.25 given cumR feature:
        // pi = expit(e0 + e1 * cumR): expit(0) = 0.5, expit(-1.0986) = 0.25
        let model = ResponseModel {
            features: FeatureMap::new(vec![Term::Intercept, Term::CumResponse]),
            eta: vec![0.0, -(3.0f64).ln()],
            moment_norm: 0.0,
            iterations: 0,
        };
        let w = response_weights(&data, &model, 0, 1).unwrap();
        assert_relative_eq!(w[0], 8.0, epsilon = 1e-9);
    }

    #[test]
    fn response_weight_zero_when_missing() {
        let mut data = response_panel(1, 3, 1);
        data.subjects[0].response = vec![1, 0, 1];
        let model = ResponseModel {
            features: FeatureMap::new(vec![Term::Intercept]),
            eta: vec![0.0],
            moment_norm: 0.0,
            iterations: 0,
        };
        let w = response_weights(&data, &model, 0, 2).unwrap();
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn feature_map_parses_and_reports_unknown_terms() {
        let names = vec!["visibility".to_string()];
        let fmap = FeatureMap::parse(
            &["1".into(), "X:visibility".into(), "cumA".into()],
            &names,
        )
        .unwrap();
        assert_eq!(fmap.dim(), 3);
        assert!(FeatureMap::parse(&["bogus".into()], &names).is_err());
        assert!(FeatureMap::parse(&["X:absent".into()], &names).is_err());
    }

    #[test]
    fn feature_map_missing_values_propagate() {
        let mut s = complete_subject("a", (0.0, 0.0), &[1, 0], &[1.0, 2.0], &[0.5, 0.25]);
        s.treatment[0] = None;
        s.response[0] = 0;
        let data = PanelDataset::new(vec![s], vec!["x1".into()]).unwrap();
        let fmap = FeatureMap::new(vec![Term::Intercept, Term::CumTreatment]);
        assert!(fmap.eval(&data, 0, 1).is_none()); // cumA needs A_0
        assert_eq!(fmap.eval(&data, 0, 0), Some(vec![1.0, 0.0])); // empty sum
    }
}
