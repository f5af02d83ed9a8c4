//! Treatment-effect (blip) function families and the blip-down transform.
//!
//! A blip family gives the mean effect of the treatment taken at time `m`
//! on the outcome at time `k >= m`, as a parametric function of the
//! treatment and covariates at `m`. Blipping down subtracts the
//! accumulated effects from an observed outcome so that the residual
//! mimics the untreated potential outcome.

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// Parameter vector of a blip family.
#[derive(Debug, Clone, PartialEq)]
pub struct BlipParams(pub Vec<f64>);

impl BlipParams {
    pub fn zeros(p: usize) -> Self {
        BlipParams(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Supported blip families.
#[derive(Debug, Clone, PartialEq)]
pub enum BlipFamily {
    /// Effect only on the next outcome: `psi * a_m` when `k = m + 1`.
    /// This is the form generated by the simulation lab.
    Lag1Linear,
    /// Contemporaneous effect: `psi * a_m` when `k = m`.
    Lag1Modified,
    /// Squared-exponential effect over the time lag with parameters
    /// `(psi, mu, sigma2)`: `psi * exp(-(lag - mu)^2 / (2 sigma2)) * a_m`.
    GaussianLag,
    /// Contemporaneous effect with effect modifiers:
    /// `a_m * (1, x_m[features])' * psi` when `k = m`.
    ModifiedLinear { feature_indices: Vec<usize> },
}

impl BlipFamily {
    /// Parse a family from its configuration string. Effect-modifier
    /// features are resolved against the panel's covariate names.
    pub fn parse(spec: &str, covariate_names: &[String]) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("modified_linear:") {
            let mut idx = Vec::new();
            for name in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let i = covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Validation(format!("unknown covariate {name:?}")))?;
                idx.push(i);
            }
            if idx.is_empty() {
                return Err(Error::Validation(
                    "modified_linear needs at least one covariate".into(),
                ));
            }
            return Ok(BlipFamily::ModifiedLinear { feature_indices: idx });
        }
        match spec {
            "lag1_linear" => Ok(BlipFamily::Lag1Linear),
            "lag1_modified" => Ok(BlipFamily::Lag1Modified),
            "gaussian_lag" => Ok(BlipFamily::GaussianLag),
            other => Err(Error::Validation(format!("unknown blip family {other:?}"))),
        }
    }

    /// Dimension of the parameter vector.
    pub fn param_len(&self) -> usize {
        match self {
            BlipFamily::Lag1Linear | BlipFamily::Lag1Modified => 1,
            BlipFamily::GaussianLag => 3,
            BlipFamily::ModifiedLinear { feature_indices } => 1 + feature_indices.len(),
        }
    }

    /// Smallest and largest lag `k - m` with a structurally nonzero
    /// effect; `None` means unbounded above.
    pub fn lag_window(&self) -> (usize, Option<usize>) {
        match self {
            BlipFamily::Lag1Linear => (1, Some(1)),
            BlipFamily::Lag1Modified | BlipFamily::ModifiedLinear { .. } => (0, Some(0)),
            BlipFamily::GaussianLag => (0, None),
        }
    }

    fn check_params(&self, params: &BlipParams) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::Validation(format!(
                "blip parameter dimension {} does not match family dimension {}",
                params.len(),
                self.param_len()
            )));
        }
        if let BlipFamily::GaussianLag = self {
            if params.0[2] <= 0.0 {
                return Err(Error::Validation(format!(
                    "gaussian_lag variance must be positive, got {}",
                    params.0[2]
                )));
            }
        }
        Ok(())
    }

    /// Evaluate the blip of treatment at `m` on the outcome at `k`.
    ///
    /// `treatments` and `covariates` must cover index `m`; only the
    /// values at `m` enter. Returns 0 whenever `k < m` or the pair falls
    /// outside the family's lag structure.
    pub fn eval(
        &self,
        m: usize,
        k: usize,
        treatments: &[f64],
        covariates: &[Vec<f64>],
        params: &BlipParams,
    ) -> Result<f64> {
        self.check_params(params)?;
        if k < m {
            return Ok(0.0);
        }
        let a_m = treatments
            .get(m)
            .copied()
            .ok_or_else(|| Error::Validation(format!("treatment history does not cover {m}")))?;
        Ok(match self {
            BlipFamily::Lag1Linear => {
                if k == m + 1 {
                    params.0[0] * a_m
                } else {
                    0.0
                }
            }
            BlipFamily::Lag1Modified => {
                if k == m {
                    params.0[0] * a_m
                } else {
                    0.0
                }
            }
            BlipFamily::GaussianLag => {
                let (psi, mu, sigma2) = (params.0[0], params.0[1], params.0[2]);
                let lag = (k - m) as f64;
                psi * (-(lag - mu).powi(2) / (2.0 * sigma2)).exp() * a_m
            }
            BlipFamily::ModifiedLinear { feature_indices } => {
                if k == m {
                    let x = covariates.get(m).ok_or_else(|| {
                        Error::Validation(format!("covariate history does not cover {m}"))
                    })?;
                    let mut v = params.0[0];
                    for (c, &j) in feature_indices.iter().enumerate() {
                        v += params.0[c + 1] * x[j];
                    }
                    v * a_m
                } else {
                    0.0
                }
            }
        })
    }

    /// Gradient of the blip with respect to the parameters.
    pub fn gradient(
        &self,
        m: usize,
        k: usize,
        treatments: &[f64],
        covariates: &[Vec<f64>],
        params: &BlipParams,
    ) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let p = self.param_len();
        if k < m {
            return Ok(vec![0.0; p]);
        }
        let a_m = treatments
            .get(m)
            .copied()
            .ok_or_else(|| Error::Validation(format!("treatment history does not cover {m}")))?;
        Ok(match self {
            BlipFamily::Lag1Linear => {
                if k == m + 1 {
                    vec![a_m]
                } else {
                    vec![0.0]
                }
            }
            BlipFamily::Lag1Modified => {
                if k == m {
                    vec![a_m]
                } else {
                    vec![0.0]
                }
            }
            BlipFamily::GaussianLag => {
                let (psi, mu, sigma2) = (params.0[0], params.0[1], params.0[2]);
                let lag = (k - m) as f64;
                let z = lag - mu;
                let e = (-z * z / (2.0 * sigma2)).exp();
                vec![
                    e * a_m,
                    psi * e * a_m * z / sigma2,
                    psi * e * a_m * z * z / (2.0 * sigma2 * sigma2),
                ]
            }
            BlipFamily::ModifiedLinear { feature_indices } => {
                if k == m {
                    let x = covariates.get(m).ok_or_else(|| {
                        Error::Validation(format!("covariate history does not cover {m}"))
                    })?;
                    let mut g = vec![a_m];
                    for &j in feature_indices {
                        g.push(a_m * x[j]);
                    }
                    g
                } else {
                    vec![0.0; p]
                }
            }
        })
    }

    /// Effect-curve value for a treated unit at a real-valued time lag
    /// (for lag-structured families without effect modifiers).
    pub fn effect_at_lag(&self, lag: f64, params: &BlipParams) -> Result<f64> {
        self.check_params(params)?;
        Ok(match self {
            BlipFamily::Lag1Linear => {
                if lag == 1.0 {
                    params.0[0]
                } else {
                    0.0
                }
            }
            BlipFamily::Lag1Modified => {
                if lag == 0.0 {
                    params.0[0]
                } else {
                    0.0
                }
            }
            BlipFamily::GaussianLag => {
                let (psi, mu, sigma2) = (params.0[0], params.0[1], params.0[2]);
                psi * (-(lag - mu).powi(2) / (2.0 * sigma2)).exp()
            }
            BlipFamily::ModifiedLinear { .. } => {
                return Err(Error::Validation(
                    "effect_at_lag is undefined for effect-modifier blips".into(),
                ))
            }
        })
    }

    /// True for families whose blip is linear in the parameters, which
    /// admits a closed-form geographically weighted solution.
    pub fn is_linear(&self) -> bool {
        !matches!(self, BlipFamily::GaussianLag)
    }

    /// Whether the pair `(m, k)` can carry a nonzero blip or gradient.
    pub fn pair_active(&self, m: usize, k: usize) -> bool {
        if k < m {
            return false;
        }
        let lag = k - m;
        let (lo, hi) = self.lag_window();
        lag >= lo && hi.is_none_or(|h| lag <= h)
    }
}

/// Internal solver parameterization: `gaussian_lag` is solved over
/// `(psi, mu, log sigma2)` so the variance stays positive; the public
/// interface always reports `sigma2`.
pub(crate) fn to_internal(family: &BlipFamily, params: &[f64]) -> Vec<f64> {
    let mut v = params.to_vec();
    if matches!(family, BlipFamily::GaussianLag) {
        v[2] = v[2].ln();
    }
    v
}

pub(crate) fn from_internal(family: &BlipFamily, internal: &[f64]) -> Vec<f64> {
    let mut v = internal.to_vec();
    if matches!(family, BlipFamily::GaussianLag) {
        v[2] = v[2].exp();
    }
    v
}

/// A blipped-down outcome: the observed outcome at `k` with the summed
/// effects of treatments from `m` through `k` removed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlippedOutcome {
    pub start: usize,
    pub time: usize,
    pub value: f64,
}

/// Sum of blips `gamma_{l,k}` for `l` in `m..=k` using a subject's
/// observed treatments. Errors when a needed treatment is unobserved.
pub fn blip_sum(
    data: &PanelDataset,
    subject_idx: usize,
    m: usize,
    k: usize,
    family: &BlipFamily,
    params: &BlipParams,
) -> Result<f64> {
    let s = &data.subjects[subject_idx];
    let mut total = 0.0;
    for l in m..=k {
        if !family.pair_active(l, k) {
            continue;
        }
        let a_l = s.treatment[l].ok_or_else(|| {
            Error::Validation(format!("treatment unobserved for subject {} at {l}", s.id))
        })?;
        let mut treatments = vec![0.0; l + 1];
        treatments[l] = f64::from(a_l);
        let covs: Vec<Vec<f64>> = s.covariates[..=l]
            .iter()
            .map(|row| row.iter().map(|c| c.unwrap_or(0.0)).collect())
            .collect();
        total += family.eval(l, k, &treatments, &covs, params)?;
    }
    Ok(total)
}

/// Gradient of `blip_sum` with respect to the parameters.
pub fn blip_sum_gradient(
    data: &PanelDataset,
    subject_idx: usize,
    m: usize,
    k: usize,
    family: &BlipFamily,
    params: &BlipParams,
) -> Result<Vec<f64>> {
    let s = &data.subjects[subject_idx];
    let mut total = vec![0.0; family.param_len()];
    for l in m..=k {
        if !family.pair_active(l, k) {
            continue;
        }
        let a_l = s.treatment[l].ok_or_else(|| {
            Error::Validation(format!("treatment unobserved for subject {} at {l}", s.id))
        })?;
        let mut treatments = vec![0.0; l + 1];
        treatments[l] = f64::from(a_l);
        let covs: Vec<Vec<f64>> = s.covariates[..=l]
            .iter()
            .map(|row| row.iter().map(|c| c.unwrap_or(0.0)).collect())
            .collect();
        let g = family.gradient(l, k, &treatments, &covs, params)?;
        for (t, gi) in total.iter_mut().zip(g) {
            *t += gi;
        }
    }
    Ok(total)
}

/// Blip down the outcome at `k`, removing effects of treatments taken
/// from `m` through `k`.
pub fn blip_down(
    data: &PanelDataset,
    subject_idx: usize,
    m: usize,
    k: usize,
    family: &BlipFamily,
    params: &BlipParams,
) -> Result<BlippedOutcome> {
    if m > k || k > data.horizon() {
        return Err(Error::Validation(format!(
            "need m <= k <= {}, got ({m}, {k})",
            data.horizon()
        )));
    }
    let s = &data.subjects[subject_idx];
    let y_k = s.outcome[k].ok_or_else(|| {
        Error::Validation(format!("outcome unobserved for subject {} at {k}", s.id))
    })?;
    let value = y_k - blip_sum(data, subject_idx, m, k, family, params)?;
    Ok(BlippedOutcome { start: m, time: k, value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Location, PanelDataset, SubjectRecord};
    use approx::assert_relative_eq;

    fn toy_panel() -> PanelDataset {
        let subject = SubjectRecord {
            id: "s1".into(),
            location: Location::new(0.5, 0.5).unwrap(),
            first_time_index: 0,
            treatment: vec![Some(1), Some(0), Some(1), Some(1)],
            covariates: vec![
                vec![Some(1.0)],
                vec![Some(2.0)],
                vec![Some(-1.0)],
                vec![Some(0.5)],
            ],
            outcome: vec![Some(3.0), Some(2.0), Some(4.0), Some(2.0)],
            response: vec![1, 1, 1, 1],
        };
        PanelDataset::new(vec![subject], vec!["x1".into()]).unwrap()
    }

    #[test]
    fn lag1_linear_direct_formula() {
        let fam = BlipFamily::Lag1Linear;
        let v = fam
            .eval(2, 3, &[0.0, 0.0, 1.0], &[], &BlipParams(vec![0.5]))
            .unwrap();
        assert_relative_eq!(v, 0.5);
        // off the lag structure
        let v = fam
            .eval(2, 2, &[0.0, 0.0, 1.0], &[], &BlipParams(vec![0.5]))
            .unwrap();
        assert_relative_eq!(v, 0.0);
    }

    #[test]
    fn gaussian_lag_peaks_at_mu() {
        let fam = BlipFamily::GaussianLag;
        let params = BlipParams(vec![-1.4, 7.0, 2.9]);
        let treatments = vec![1.0];
        let at = |lag: usize| fam.eval(0, lag, &treatments, &[], &params).unwrap();
        // symmetric about mu: lags mu - 2 and mu + 2
        assert_relative_eq!(at(5), at(9), epsilon = 1e-12);
        assert_relative_eq!(
            at(5),
            -1.4 * (-(2.0f64.powi(2)) / (2.0 * 2.9)).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gaussian_lag_peak_value_is_psi() {
        // with mu on the grid the peak equals psi exactly
        let fam = BlipFamily::GaussianLag;
        let params = BlipParams(vec![-1.4, 7.0, 2.9]);
        let v = fam.eval(0, 7, &[1.0], &[], &params).unwrap();
        assert_relative_eq!(v, -1.4, epsilon = 1e-12);
        // effect curve at the (possibly off-grid) peak lag mu
        let params = BlipParams(vec![-1.4, 7.1, 2.9]);
        let v = fam.effect_at_lag(7.1, &params).unwrap();
        assert_relative_eq!(v, -1.4, epsilon = 1e-12);
    }

    #[test]
    fn zero_params_give_zero_effect() {
        for fam in [BlipFamily::Lag1Linear, BlipFamily::Lag1Modified] {
            let v = fam.eval(1, 1, &[1.0, 1.0], &[], &BlipParams(vec![0.0])).unwrap();
            assert_eq!(v, 0.0);
        }
        let fam = BlipFamily::GaussianLag;
        let v = fam.eval(0, 3, &[1.0], &[], &BlipParams(vec![0.0, 2.0, 1.0])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let fam = BlipFamily::Lag1Linear;
        assert!(fam.eval(0, 1, &[1.0], &[], &BlipParams(vec![0.5, 0.1])).is_err());
        let fam = BlipFamily::GaussianLag;
        assert!(fam.eval(0, 1, &[1.0], &[], &BlipParams(vec![0.5, 0.1, -1.0])).is_err());
    }

    #[test]
    fn gradient_matches_formula_for_linear_families() {
        let fam = BlipFamily::Lag1Linear;
        let g = fam
            .gradient(1, 2, &[0.0, 1.0], &[], &BlipParams(vec![0.7]))
            .unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn gaussian_gradient_at_peak_lag() {
        let fam = BlipFamily::GaussianLag;
        let params = BlipParams(vec![-1.4, 7.0, 2.9]);
        let g = fam.gradient(0, 7, &[1.0], &[], &params).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-12); // exp(0) * a_m
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let step = 1e-5;
        let cases: Vec<(BlipFamily, Vec<f64>)> = vec![
            (BlipFamily::Lag1Linear, vec![0.37]),
            (BlipFamily::Lag1Modified, vec![-0.8]),
            (BlipFamily::GaussianLag, vec![-1.4, 7.1, 2.9]),
            (BlipFamily::ModifiedLinear { feature_indices: vec![0] }, vec![0.3, -0.6]),
        ];
        let covs = vec![vec![0.4], vec![1.2], vec![-0.3], vec![0.9]];
        for (fam, params) in cases {
            for (m, k) in [(0usize, 0usize), (0, 1), (1, 3), (2, 2)] {
                let treatments = vec![1.0, 1.0, 1.0, 1.0];
                let g = fam
                    .gradient(m, k, &treatments, &covs, &BlipParams(params.clone()))
                    .unwrap();
                for j in 0..params.len() {
                    let mut hi = params.clone();
                    let mut lo = params.clone();
                    hi[j] += step;
                    lo[j] -= step;
                    let f_hi = fam.eval(m, k, &treatments, &covs, &BlipParams(hi)).unwrap();
                    let f_lo = fam.eval(m, k, &treatments, &covs, &BlipParams(lo)).unwrap();
                    let fd = (f_hi - f_lo) / (2.0 * step);
                    let scale = 1.0f64.max(fd.abs());
                    assert!(
                        (g[j] - fd).abs() / scale < 1e-6,
                        "family {fam:?} pair ({m},{k}) component {j}: {} vs {fd}",
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn blip_down_subtracts_accumulated_effects() {
        let data = toy_panel();
        let fam = BlipFamily::Lag1Linear;
        // Y_3 = 2.0, A_2 = 1 -> H = 2.0 - 0.5 * 1
        let h = blip_down(&data, 0, 1, 3, &fam, &BlipParams(vec![0.5])).unwrap();
        assert_relative_eq!(h.value, 1.5);
    }

    #[test]
    fn blip_down_at_zero_params_is_identity() {
        let data = toy_panel();
        for fam in [
            BlipFamily::Lag1Linear,
            BlipFamily::Lag1Modified,
            BlipFamily::ModifiedLinear { feature_indices: vec![0] },
        ] {
            let params = BlipParams::zeros(fam.param_len());
            for m in 0..=3usize {
                for k in m..=3 {
                    let h = blip_down(&data, 0, m, k, &fam, &params).unwrap();
                    assert_eq!(h.value, data.subjects[0].outcome[k].unwrap());
                }
            }
        }
        let fam = BlipFamily::GaussianLag;
        let params = BlipParams(vec![0.0, 2.0, 1.5]);
        let h = blip_down(&data, 0, 0, 3, &fam, &params).unwrap();
        assert_eq!(h.value, 2.0);
    }

    #[test]
    fn blip_down_ignores_treatments_outside_window() {
        // lag1_linear at (m, k): only A_{k-1} matters
        let data = toy_panel();
        let fam = BlipFamily::Lag1Linear;
        let h02 = blip_down(&data, 0, 0, 2, &fam, &BlipParams(vec![0.5])).unwrap();
        let h12 = blip_down(&data, 0, 1, 2, &fam, &BlipParams(vec![0.5])).unwrap();
        assert_relative_eq!(h02.value, h12.value);
    }

    #[test]
    fn blip_down_missing_outcome_errors() {
        let mut data = toy_panel();
        data.subjects[0].outcome[3] = None;
        data.subjects[0].response[3] = 0;
        let fam = BlipFamily::Lag1Linear;
        assert!(blip_down(&data, 0, 1, 3, &fam, &BlipParams(vec![0.5])).is_err());
    }

    #[test]
    fn internal_parameterization_round_trips() {
        let fam = BlipFamily::GaussianLag;
        let public = vec![-1.4, 7.1, 2.9];
        let internal = to_internal(&fam, &public);
        assert_relative_eq!(internal[2], 2.9f64.ln());
        let back = from_internal(&fam, &internal);
        assert_relative_eq!(back[2], 2.9, epsilon = 1e-12);
    }

    #[test]
    fn parse_family_strings() {
        let names = vec!["visibility".to_string(), "smoke".to_string()];
        assert_eq!(BlipFamily::parse("lag1_linear", &names).unwrap(), BlipFamily::Lag1Linear);
        assert_eq!(
            BlipFamily::parse("modified_linear:smoke", &names).unwrap(),
            BlipFamily::ModifiedLinear { feature_indices: vec![1] }
        );
        assert!(BlipFamily::parse("cubic", &names).is_err());
        assert!(BlipFamily::parse("modified_linear:absent", &names).is_err());
    }
}
