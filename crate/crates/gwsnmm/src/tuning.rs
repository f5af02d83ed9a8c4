//! Bandwidth selection by K-fold cross-validation with a balancing
//! criterion, and empirical bias correction over a bandwidth grid.
//!
//! The loss for a candidate bandwidth is the kernel-weighted balancing
//! moment of held-out subjects, evaluated at the effect estimated on
//! the training folds: small bandwidths produce noisy estimates and a
//! noisy held-out moment, large ones produce biased estimates and a
//! systematic moment, so the criterion trades the two off. The moment
//! is normalized by the kernel mass so values are comparable across
//! bandwidths.
//!
//! Bias correction fits the level of the per-bandwidth estimates as an
//! intercept plus a polynomial starting at the squared bandwidth, and
//! subtracts the fitted bias at the chosen bandwidth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blip::{self, BlipParams};
use crate::error::{Error, Result};
use crate::gwe::{
    build_linear_terms, build_nl_terms, estimating_function_by_index, fit_global,
    linear_balancing_moment, newton_solve_local, solve_linear_local, EstimatingConfig, KernelSpec,
    LinearTerms, LocalDesign, NlTerms, NuisanceSet, NuisanceSpec, QChoice, ResponseWeighting,
};
use crate::linalg;
use crate::nuisance::{fit_propensity, fit_response_gmm, OutcomeMeanModel};
use crate::panel::{Location, PanelDataset};

/// An ordered grid of candidate bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct TauGrid {
    values: Vec<f64>,
}

impl TauGrid {
    /// A grid must be positive and strictly increasing.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("bandwidth grid is empty".into()));
        }
        for w in values.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Validation("bandwidth grid must be strictly increasing".into()));
            }
        }
        if values[0] <= 0.0 || !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("bandwidths must be positive and finite".into()));
        }
        Ok(TauGrid { values })
    }

    /// `count` geometrically spaced values from `lo` to `hi` inclusive.
    pub fn geometric(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count < 2 || !(lo > 0.0) || !(hi > lo) {
            return Err(Error::Validation(format!(
                "geometric grid needs 0 < lo < hi and count >= 2, got ({lo}, {hi}, {count})"
            )));
        }
        let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
        let values = (0..count).map(|j| lo * ratio.powi(j as i32)).collect();
        Self::new(values)
    }

    /// Data-driven default: ten geometric values between the bandwidth
    /// whose mean effective sample size is about 8 subjects and the one
    /// where it reaches half the sample, clamped to the spatial scale.
    /// Very small bandwidths fit nothing and very large ones are purely
    /// global, so both ends are excluded up front; the bias polynomial
    /// is a small-bandwidth expansion and needs the grid in that range.
    pub fn auto(data: &PanelDataset) -> Result<Self> {
        let (mean_nn, diam) = data.spatial_scales();
        if !(diam > 0.0) {
            return Err(Error::Validation(
                "all subjects share one location; no spatial scale for a bandwidth grid".into(),
            ));
        }
        let n = data.n_subjects() as f64;
        let lo = bandwidth_for_ess(data, 16.0_f64.min(n / 4.0)).max(0.5 * mean_nn);
        let hi = bandwidth_for_ess(data, n / 2.0).min(diam).max(lo * 3.0);
        Self::geometric(lo, hi, 10)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Smallest bandwidth whose mean effective sample size over subject
/// locations reaches `target_ess`, found by bisection.
fn bandwidth_for_ess(data: &PanelDataset, target_ess: f64) -> f64 {
    // a deterministic subsample of evaluation points keeps this cheap
    let step = (data.n_subjects() / 64).max(1);
    let probes: Vec<usize> = (0..data.n_subjects()).step_by(step).collect();
    let mean_ess = |tau: f64| -> f64 {
        let spec = KernelSpec { tau };
        let mut total = 0.0;
        for &ti in &probes {
            let t = &data.subjects[ti];
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for s in &data.subjects {
                let w = crate::gwe::kernel_weight(&spec, &t.location, &s.location);
                sum += w;
                max = max.max(w);
            }
            total += if max > 0.0 { sum / max } else { 0.0 };
        }
        total / probes.len() as f64
    };
    let (_, diam) = data.spatial_scales();
    let mut lo = 1e-4 * diam;
    let mut hi = 4.0 * diam;
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        if mean_ess(mid) < target_ess {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Outcome of bandwidth selection.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub chosen_tau: f64,
    pub chosen_index: usize,
    /// Loss per bandwidth per fold; `None` marks a failed fit.
    pub fold_losses: Vec<Vec<Option<f64>>>,
    /// Mean loss per bandwidth over folds; `None` when any fold failed.
    pub mean_losses: Vec<Option<f64>>,
    pub folds: usize,
}

/// Deterministic fold pattern whose shape depends only on the seed and
/// the subject count.
pub fn fold_assignment(seed: u64, n_subjects: usize, folds: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n_subjects {
        return Err(Error::Validation(format!(
            "cannot split {n_subjects} subjects into {folds} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xF01D5);
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_subjects];
    for (pos, &subject) in order.iter().enumerate() {
        assignment[subject] = pos % folds;
    }
    Ok(assignment)
}

/// Subject-level fold assignment for a panel: the pattern from
/// [`fold_assignment`] applied in subject-id-hash order, so each
/// subject keeps its fold under any input permutation.
pub fn fold_assignment_for(data: &PanelDataset, seed: u64, folds: usize) -> Result<Vec<usize>> {
    let pattern = fold_assignment(seed, data.n_subjects(), folds)?;
    let mut order: Vec<usize> = (0..data.n_subjects()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&data.subjects[a], &data.subjects[b]);
        let (ha, hb) =
            (crate::inference::fnv1a64(sa.id.as_bytes()), crate::inference::fnv1a64(sb.id.as_bytes()));
        ha.cmp(&hb).then_with(|| sa.id.cmp(&sb.id))
    });
    let mut assignment = vec![0usize; data.n_subjects()];
    for (pos, &subject) in order.iter().enumerate() {
        assignment[subject] = pattern[pos];
    }
    Ok(assignment)
}

/// The balancing loss of an evaluation set at a fixed effect value:
/// max-norm of the kernel-weighted mean estimating function.
pub fn balancing_loss(
    data_eval: &PanelDataset,
    target: &Location,
    kernel: &KernelSpec,
    psi_hat: &BlipParams,
    nuis: &NuisanceSet,
    cfg: &EstimatingConfig,
) -> Result<f64> {
    let mut acc = vec![0.0; psi_hat.len()];
    let mut mass = 0.0;
    for i in 0..data_eval.n_subjects() {
        let omega = crate::gwe::kernel_weight(kernel, target, &data_eval.subjects[i].location);
        if omega == 0.0 {
            continue;
        }
        let g = estimating_function_by_index(data_eval, i, psi_hat, nuis, cfg)?;
        for (a, gi) in g.iter().enumerate() {
            acc[a] += omega * gi;
        }
        mass += omega;
    }
    if mass <= 0.0 {
        return Err(Error::Validation(
            "no subject carries kernel weight in the evaluation set".into(),
        ));
    }
    Ok(acc.iter().fold(0.0f64, |m, v| m.max(v.abs())) / mass)
}

// ---------------------------------------------------------------------
// Prepared pipeline
// ---------------------------------------------------------------------

/// Terms backing one bandwidth/fold combination.
#[derive(Debug, Clone)]
pub(crate) enum CellTerms {
    /// Linear gradient-index engine: shared base terms plus this cell's
    /// outcome coefficients (`None` for the zero outcome model).
    SharedLinear { coefs: Option<BTreeMap<usize, Vec<f64>>> },
    /// Terms rebuilt for this cell (closed-form index choice).
    OwnLinear(LinearTerms),
    /// Nonlinear terms with a Newton initialization.
    OwnNl { terms: NlTerms, init: Vec<f64> },
}

/// Pipeline configuration shared by bandwidth selection, bias
/// correction, and bootstrap inference.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub grid: TauGrid,
    pub folds: usize,
    pub bias_q: usize,
    pub seed: u64,
    pub design: LocalDesign,
    pub cfg: EstimatingConfig,
    pub nspec: NuisanceSpec,
}

/// Nuisance fits frozen for every reweighted analysis: the response
/// model and propensity are global; the outcome mean is fit once per
/// bandwidth (full data) and once per bandwidth and fold (training
/// folds), seeded by preliminary fits at each subject's location.
pub struct PreparedPipeline {
    pub(crate) config: PipelineConfig,
    /// Base fold assignment for the point-estimate analysis, keyed by
    /// the seed and the subject count only.
    pub(crate) folds: Vec<usize>,
    pub(crate) base_nuis: NuisanceSet,
    /// Gradient-index terms with no outcome correction, decomposition
    /// enabled (linear families only).
    pub(crate) base_terms: Option<LinearTerms>,
    /// Full-data terms per bandwidth; `None` marks a failed outcome
    /// fit, which disqualifies the bandwidth.
    pub(crate) cells: Vec<Option<CellTerms>>,
}

impl PreparedPipeline {
    pub fn build(data: &PanelDataset, config: PipelineConfig) -> Result<Self> {
        let n = data.n_subjects();
        let folds = fold_assignment_for(data, config.seed, config.folds)?;
        let cfg = &config.cfg;

        // global nuisances: response model first, then the propensity
        let response = if cfg.response == ResponseWeighting::InverseProbability {
            let (rmap, hmap) = match (&config.nspec.response_features, &config.nspec.h_features) {
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
        let prop_weights: Option<Vec<Vec<f64>>> = match &response {
            Some(model) => {
                let mut w = Vec::with_capacity(n);
                for i in 0..n {
                    let mut row = Vec::with_capacity(data.time_count);
                    for m in 0..data.time_count {
                        row.push(crate::gwe::span_weight(data, model, i, m, m)?);
                    }
                    w.push(row);
                }
                Some(w)
            }
            None => None,
        };
        let propensity =
            fit_propensity(data, &config.nspec.propensity_features, prop_weights.as_deref())?;
        let base_nuis =
            NuisanceSet { propensity, outcome: OutcomeMeanModel::zero(), response };

        let linear = cfg.family.is_linear();
        let shared_engine = linear && cfg.q_choice == QChoice::Gradient;

        let mut prelim_cfg = cfg.clone();
        prelim_cfg.q_choice = QChoice::Gradient;
        let base_terms = if linear {
            Some(build_linear_terms(
                data,
                &base_nuis,
                &prelim_cfg,
                config.nspec.outcome_features.as_ref(),
            )?)
        } else {
            None
        };

        let n_tau = config.grid.len();
        let mut cells: Vec<Option<CellTerms>> = Vec::with_capacity(n_tau);
        for &tau in config.grid.values() {
            let kernel = KernelSpec::new(tau)?;
            cells.push(Self::build_cell(
                data,
                &config,
                &base_nuis,
                base_terms.as_ref(),
                shared_engine,
                &kernel,
            )?);
        }
        let _ = n;
        Ok(PreparedPipeline { config, folds, base_nuis, base_terms, cells })
    }

    /// Fit the cell's outcome model on the full data (preliminary pass
    /// then per-lag least squares) and package the terms; `Ok(None)`
    /// marks a cell whose fits failed, which disqualifies its
    /// bandwidth. Outcome fits are not refit per fold: like the other
    /// nuisance models they converge faster than the local estimator
    /// and stay frozen through cross-validation and the bootstrap.
    fn build_cell(
        data: &PanelDataset,
        config: &PipelineConfig,
        base_nuis: &NuisanceSet,
        base_terms: Option<&LinearTerms>,
        shared_engine: bool,
        kernel: &KernelSpec,
    ) -> Result<Option<CellTerms>> {
        let mask: Option<&[f64]> = None;
        let cfg = &config.cfg;
        let has_outcome = config.nspec.outcome_features.is_some();

        if let Some(terms) = base_terms {
            let coefs = if has_outcome {
                match fit_cell_outcome(data, terms, &config.design, kernel, mask) {
                    Ok(c) => Some(c),
                    Err(_) => return Ok(None),
                }
            } else {
                None
            };
            if shared_engine {
                return Ok(Some(CellTerms::SharedLinear { coefs }));
            }
            // closed-form index choice: rebuild terms with the fitted
            // outcome model so the index uses its residual variance
            let outcome = match &coefs {
                None => OutcomeMeanModel::zero(),
                Some(c) => OutcomeMeanModel::from_parts(
                    config.nspec.outcome_features.clone().expect("outcome features"),
                    c.clone(),
                    residual_variance_for(terms, c, mask),
                ),
            };
            let nuis = NuisanceSet {
                propensity: base_nuis.propensity.clone(),
                outcome,
                response: base_nuis.response.clone(),
            };
            return match build_linear_terms(data, &nuis, cfg, None) {
                Ok(t) => Ok(Some(CellTerms::OwnLinear(t))),
                Err(_) => Ok(None),
            };
        }

        // nonlinear families: preliminary Newton fits at subject
        // locations seed the outcome fit, then the cell terms
        let mut prelim_cfg = cfg.clone();
        prelim_cfg.q_choice = QChoice::Gradient;
        let global = match fit_global(data, base_nuis, &prelim_cfg) {
            Ok(g) => g,
            Err(_) => return Ok(None),
        };
        let init = blip::to_internal(&cfg.family, &global.psi);
        let outcome = if has_outcome {
            let expansion = BlipParams(global.psi.clone());
            let prelim_terms = match build_nl_terms(data, base_nuis, &prelim_cfg, &expansion) {
                Ok(t) => t,
                Err(_) => return Ok(None),
            };
            let mut prelim = Vec::with_capacity(data.n_subjects());
            for i in 0..data.n_subjects() {
                if mask.is_some_and(|m| m[i] == 0.0) {
                    prelim.push(BlipParams(global.psi.clone()));
                    continue;
                }
                match newton_solve_local(
                    data,
                    &prelim_terms,
                    &prelim_cfg,
                    &config.design,
                    &data.subjects[i].location,
                    Some(kernel),
                    mask,
                    &init,
                ) {
                    Ok((u, _, _, _)) => prelim.push(BlipParams(blip::from_internal(
                        &cfg.family,
                        &u[..prelim_terms.p],
                    ))),
                    Err(_) => return Ok(None),
                }
            }
            let pairs = match cfg.resolved_pairs(data.horizon()) {
                Ok(p) => p,
                Err(_) => return Ok(None),
            };
            let fmap = config.nspec.outcome_features.as_ref().expect("outcome features");
            let response = base_nuis.response.clone();
            let data_ref = data.clone();
            let base_weight: Box<dyn Fn(usize, usize, usize) -> f64> = match response {
                Some(model) => Box::new(move |i, m, k| {
                    crate::gwe::span_weight(&data_ref, &model, i, m, k).unwrap_or(0.0)
                }),
                None => Box::new(|_, _, _| 1.0),
            };
            let masked_weight: Box<dyn Fn(usize, usize, usize) -> f64> = match mask {
                Some(m) => {
                    let m = m.to_vec();
                    Box::new(move |i, a, b| m[i] * base_weight(i, a, b))
                }
                None => base_weight,
            };
            match crate::nuisance::fit_outcome_mean(
                data,
                fmap,
                &cfg.family,
                &prelim,
                &pairs,
                Some(masked_weight.as_ref()),
            ) {
                Ok(o) => o,
                Err(_) => return Ok(None),
            }
        } else {
            OutcomeMeanModel::zero()
        };
        let nuis = NuisanceSet {
            propensity: base_nuis.propensity.clone(),
            outcome,
            response: base_nuis.response.clone(),
        };
        let expansion = BlipParams(global.psi);
        match build_nl_terms(data, &nuis, cfg, &expansion) {
            Ok(terms) => Ok(Some(CellTerms::OwnNl { terms, init })),
            Err(_) => Ok(None),
        }
    }

    /// The frozen global nuisance fits (propensity and, when
    /// weighting, the response model).
    pub fn nuisances(&self) -> &NuisanceSet {
        &self.base_nuis
    }

    fn kernel_at(&self, tau_idx: usize) -> KernelSpec {
        KernelSpec { tau: self.config.grid.values()[tau_idx] }
    }

    /// Solve this cell's system at `target` under per-subject weights.
    pub(crate) fn solve_cell(
        &self,
        data: &PanelDataset,
        cell: &CellTerms,
        tau_idx: usize,
        target: &Location,
        xi: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let kernel = self.kernel_at(tau_idx);
        match cell {
            CellTerms::SharedLinear { coefs } => {
                let terms = self.base_terms.as_ref().expect("linear engine");
                let (phi, _) = solve_linear_local(
                    data,
                    terms,
                    coefs.as_ref(),
                    &self.config.design,
                    target,
                    Some(&kernel),
                    xi,
                )?;
                Ok(phi)
            }
            CellTerms::OwnLinear(terms) => {
                let (phi, _) = solve_linear_local(
                    data,
                    terms,
                    None,
                    &self.config.design,
                    target,
                    Some(&kernel),
                    xi,
                )?;
                Ok(phi)
            }
            CellTerms::OwnNl { terms, init } => {
                let (phi, _, _, converged) = newton_solve_local(
                    data,
                    terms,
                    &self.config.cfg,
                    &self.config.design,
                    target,
                    Some(&kernel),
                    xi,
                    init,
                )?;
                if !converged {
                    return Err(Error::NonConvergence("cell solve did not converge".into()));
                }
                Ok(phi)
            }
        }
    }

    /// Balancing loss of a cell at a fixed effect value.
    pub(crate) fn cell_loss(
        &self,
        data: &PanelDataset,
        cell: &CellTerms,
        tau_idx: usize,
        target: &Location,
        psi_public: &[f64],
        xi: Option<&[f64]>,
    ) -> Result<f64> {
        let kernel = self.kernel_at(tau_idx);
        match cell {
            CellTerms::SharedLinear { coefs } => linear_balancing_moment(
                data,
                self.base_terms.as_ref().expect("linear engine"),
                coefs.as_ref(),
                psi_public,
                target,
                Some(&kernel),
                xi,
            ),
            CellTerms::OwnLinear(terms) => {
                linear_balancing_moment(data, terms, None, psi_public, target, Some(&kernel), xi)
            }
            CellTerms::OwnNl { terms, .. } => {
                nl_balancing_moment(data, terms, &self.config.cfg, psi_public, target, &kernel, xi)
            }
        }
    }

    fn solution_psi(&self, phi: &[f64]) -> Vec<f64> {
        let p = self.config.cfg.family.param_len();
        blip::from_internal(&self.config.cfg.family, &phi[..p])
    }

    /// Cross-validated bandwidth choice under per-subject weights and
    /// a fold assignment (defaulting to the pipeline's own). Returns
    /// the chosen index and the per-bandwidth fold losses.
    pub fn choose_bandwidth(
        &self,
        data: &PanelDataset,
        target: &Location,
        xi: Option<&[f64]>,
        fold_override: Option<&[usize]>,
    ) -> Result<(usize, Vec<Vec<Option<f64>>>)> {
        let n = data.n_subjects();
        let folds = fold_override.unwrap_or(&self.folds);
        let n_tau = self.config.grid.len();
        let mut fold_losses = vec![vec![None; self.config.folds]; n_tau];
        for tau_idx in 0..n_tau {
            for fold in 0..self.config.folds {
                let Some(cell) = &self.cells[tau_idx] else { continue };
                let train_mask: Vec<f64> = (0..n)
                    .map(|i| {
                        if folds[i] == fold {
                            0.0
                        } else {
                            xi.map_or(1.0, |x| x[i])
                        }
                    })
                    .collect();
                let eval_mask: Vec<f64> = (0..n)
                    .map(|i| {
                        if folds[i] == fold {
                            xi.map_or(1.0, |x| x[i])
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let Ok(phi) = self.solve_cell(data, cell, tau_idx, target, Some(&train_mask))
                else {
                    continue;
                };
                let psi = self.solution_psi(&phi);
                if let Ok(loss) = self.cell_loss(data, cell, tau_idx, target, &psi, Some(&eval_mask))
                {
                    fold_losses[tau_idx][fold] = Some(loss);
                }
            }
        }
        let mut chosen: Option<(usize, f64)> = None;
        for tau_idx in 0..n_tau {
            if fold_losses[tau_idx].iter().any(Option::is_none) {
                continue;
            }
            let mean = fold_losses[tau_idx].iter().map(|l| l.unwrap()).sum::<f64>()
                / self.config.folds as f64;
            if chosen.is_none_or(|(_, best)| mean < best) {
                chosen = Some((tau_idx, mean));
            }
        }
        match chosen {
            Some((idx, _)) => Ok((idx, fold_losses)),
            None => {
                let mut lines = Vec::new();
                for (ti, tau) in self.config.grid.values().iter().enumerate() {
                    let failed: Vec<usize> = (0..self.config.folds)
                        .filter(|&f| fold_losses[ti][f].is_none())
                        .collect();
                    lines.push(format!("tau {tau:.4}: failed folds {failed:?}"));
                }
                Err(Error::NonConvergence(format!(
                    "no bandwidth fit all folds at ({:.4}, {:.4}); {}",
                    target.s1,
                    target.s2,
                    lines.join("; ")
                )))
            }
        }
    }

    /// Full-data level estimates at every grid bandwidth (public
    /// parameterization). Bandwidths whose outcome fit or solve failed
    /// yield `None`; the bias fit runs on the available subset.
    pub fn grid_estimates(
        &self,
        data: &PanelDataset,
        target: &Location,
        xi: Option<&[f64]>,
    ) -> Vec<Option<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.config.grid.len());
        for (tau_idx, cell) in self.cells.iter().enumerate() {
            let est = cell.as_ref().and_then(|cell| {
                self.solve_cell(data, cell, tau_idx, target, xi)
                    .ok()
                    .map(|phi| self.solution_psi(&phi))
            });
            out.push(est);
        }
        out
    }
}

/// Fit per-lag outcome coefficients for one cell of the linear engine:
/// preliminary fits at every participating subject's location, then
/// weighted least squares of the blipped-down outcomes.
fn fit_cell_outcome(
    data: &PanelDataset,
    terms: &LinearTerms,
    design: &LocalDesign,
    kernel: &KernelSpec,
    mask: Option<&[f64]>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let p = terms.p;
    let dim = terms.outcome_dim.ok_or_else(|| {
        Error::Validation("terms were built without outcome decomposition support".into())
    })?;
    let mut rows_by_lag: BTreeMap<usize, Vec<(Vec<f64>, f64, f64)>> = BTreeMap::new();
    for (i, stat) in terms.stats.iter().enumerate() {
        if mask.is_some_and(|m| m[i] == 0.0) || stat.rows.is_empty() {
            continue;
        }
        let (phi, _) = solve_linear_local(
            data,
            terms,
            None,
            design,
            &data.subjects[i].location,
            Some(kernel),
            mask,
        )?;
        let psi0 = &phi[..p];
        for row in &stat.rows {
            let h = row.y_raw - row.gsum.iter().zip(psi0).map(|(g, ps)| g * ps).sum::<f64>();
            rows_by_lag
                .entry(row.lag)
                .or_default()
                .push((row.features.clone(), h, row.weight));
        }
    }
    if rows_by_lag.is_empty() {
        return Err(Error::Validation("no usable pseudo-outcome rows in the fold".into()));
    }
    let mut coefs = BTreeMap::new();
    for (lag, rows) in rows_by_lag {
        let beta = linalg::weighted_least_squares(&rows, dim, &format!("cell outcome lag {lag}"))?;
        coefs.insert(lag, beta.iter().copied().collect());
    }
    Ok(coefs)
}

/// Weighted mean squared residual of a cell outcome fit, the plug-in
/// conditional variance for the closed-form index choice.
fn residual_variance_for(
    terms: &LinearTerms,
    coefs: &BTreeMap<usize, Vec<f64>>,
    mask: Option<&[f64]>,
) -> f64 {
    let mut rss = 0.0;
    let mut wsum = 0.0;
    for (i, stat) in terms.stats.iter().enumerate() {
        if mask.is_some_and(|m| m[i] == 0.0) {
            continue;
        }
        for row in &stat.rows {
            let Some(beta) = coefs.get(&row.lag) else { continue };
            let pred: f64 = row.features.iter().zip(beta).map(|(x, b)| x * b).sum();
            let r = row.y_raw - pred;
            rss += row.weight * r * r;
            wsum += row.weight;
        }
    }
    if wsum > 0.0 {
        rss / wsum
    } else {
        1.0
    }
}

/// Balancing moment for nonlinear families at a fixed public effect.
fn nl_balancing_moment(
    data: &PanelDataset,
    terms: &NlTerms,
    cfg: &EstimatingConfig,
    psi_public: &[f64],
    target: &Location,
    kernel: &KernelSpec,
    xi: Option<&[f64]>,
) -> Result<f64> {
    let p = terms.p;
    let params = BlipParams(psi_public.to_vec());
    let mut acc = vec![0.0; p];
    let mut mass = 0.0;
    for (i, pairs) in terms.per_subject.iter().enumerate() {
        let w_i = crate::gwe::kernel_weight(kernel, target, &data.subjects[i].location)
            * xi.map_or(1.0, |x| x[i]);
        if w_i == 0.0 {
            continue;
        }
        mass += w_i;
        for t in pairs {
            let g = blip::blip_sum_gradient(data, i, t.m, t.k, &cfg.family, &params)?;
            let bsum = blip::blip_sum(data, i, t.m, t.k, &cfg.family, &params)?;
            let resid = t.resid0 - bsum;
            let scale = t.weight * t.centered;
            let q: &[f64] = match cfg.q_choice {
                QChoice::Gradient => &g,
                QChoice::Example3 => std::slice::from_ref(&t.q3),
            };
            for a in 0..p {
                acc[a] += w_i * scale * q[a] * resid;
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::Validation("no kernel weight mass in the evaluation set".into()));
    }
    Ok(acc.iter().fold(0.0f64, |m, v| m.max(v.abs())) / mass)
}

/// Select the bandwidth by subject-level K-fold cross-validation of
/// the balancing loss; ties choose the smallest bandwidth.
#[allow(clippy::too_many_arguments)]
pub fn select_bandwidth(
    data: &PanelDataset,
    target: &Location,
    grid: &TauGrid,
    folds: usize,
    seed: u64,
    design: &LocalDesign,
    cfg: &EstimatingConfig,
    nspec: &NuisanceSpec,
) -> Result<CvReport> {
    let pipeline = PreparedPipeline::build(
        data,
        PipelineConfig {
            grid: grid.clone(),
            folds,
            bias_q: 3,
            seed,
            design: *design,
            cfg: cfg.clone(),
            nspec: nspec.clone(),
        },
    )?;
    let (chosen_index, fold_losses) = pipeline.choose_bandwidth(data, target, None, None)?;
    let mean_losses = fold_losses
        .iter()
        .map(|per_fold| {
            if per_fold.iter().any(Option::is_none) {
                None
            } else {
                Some(per_fold.iter().map(|l| l.unwrap()).sum::<f64>() / folds as f64)
            }
        })
        .collect();
    Ok(CvReport {
        chosen_tau: grid.values()[chosen_index],
        chosen_index,
        fold_losses,
        mean_losses,
        folds,
    })
}

/// Relative singular-value cutoff for the bias-polynomial fit. The
/// monomial basis is nearly collinear on a short geometric grid, and
/// unregularized extrapolation to zero amplifies estimate noise; the
/// cutoff drops directions the data cannot distinguish.
const BIAS_FIT_RCOND: f64 = 3e-3;

/// Fitted bias polynomial and the debiased estimate.
#[derive(Debug, Clone)]
pub struct BiasFit {
    /// Per effect component: intercept followed by the polynomial
    /// coefficients on powers 2 through `q + 1` of the bandwidth.
    pub nu: Vec<Vec<f64>>,
    pub q: usize,
    /// Condition number of the (column-scaled) polynomial design.
    pub condition: f64,
    /// Bias-corrected effect at the chosen bandwidth.
    pub debiased: Vec<f64>,
    pub chosen_tau: f64,
}

impl BiasFit {
    /// Fitted bias at a bandwidth for one component (zero at zero).
    pub fn bias_at(&self, component: usize, tau: f64) -> f64 {
        self.nu[component]
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, v)| v * tau.powi(j as i32 + 2))
            .sum()
    }
}

/// Fit the bias polynomial to per-bandwidth estimates and debias the
/// estimate at `chosen_tau`.
///
/// The model is an intercept plus powers 2..=q+1 of the bandwidth, so
/// the fitted bias vanishes at zero; `q` must exceed 2 and the grid
/// must have at least `q + 2` points.
pub fn fit_bias_polynomial(
    grid: &TauGrid,
    estimates: &[Vec<f64>],
    chosen_tau: f64,
    q: usize,
) -> Result<BiasFit> {
    if q <= 2 {
        return Err(Error::Validation(format!("bias polynomial degree q must exceed 2, got {q}")));
    }
    let l = grid.len();
    if estimates.len() != l {
        return Err(Error::Validation("one estimate per grid bandwidth required".into()));
    }
    if l < q + 2 {
        return Err(Error::Validation(format!(
            "grid length {l} cannot fit {} coefficients with a residual degree of freedom",
            q + 1
        )));
    }
    let chosen_idx = grid
        .values()
        .iter()
        .position(|&t| t == chosen_tau)
        .ok_or_else(|| Error::Validation("chosen bandwidth is not on the grid".into()))?;
    let p = estimates[0].len();
    let n_coef = q + 1; // intercept plus q polynomial terms

    // column-scaled design for conditioning
    let mut design = DMatrix::<f64>::zeros(l, n_coef);
    for (r, &tau) in grid.values().iter().enumerate() {
        design[(r, 0)] = 1.0;
        for j in 0..q {
            design[(r, j + 1)] = tau.powi(j as i32 + 2);
        }
    }
    let mut scales = vec![0.0f64; n_coef];
    for c in 0..n_coef {
        for r in 0..l {
            scales[c] = scales[c].max(design[(r, c)].abs());
        }
        if scales[c] == 0.0 {
            scales[c] = 1.0;
        }
        for r in 0..l {
            design[(r, c)] /= scales[c];
        }
    }

    let mut nu = Vec::with_capacity(p);
    let mut condition = 0.0f64;
    let mut debiased = Vec::with_capacity(p);
    for comp in 0..p {
        let rhs = DVector::from_iterator(l, estimates.iter().map(|e| e[comp]));
        let (sol, cond) = linalg::truncated_svd_least_squares(&design, &rhs, BIAS_FIT_RCOND)?;
        condition = condition.max(cond);
        let coef: Vec<f64> = sol.iter().zip(&scales).map(|(v, s)| v / s).collect();
        let bias: f64 = coef
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, v)| v * chosen_tau.powi(j as i32 + 2))
            .sum();
        debiased.push(estimates[chosen_idx][comp] - bias);
        nu.push(coef);
    }
    Ok(BiasFit { nu, q, condition, debiased, chosen_tau })
}

/// Compute per-bandwidth estimates on the full data and debias the one
/// at `chosen_tau`.
#[allow(clippy::too_many_arguments)]
pub fn bias_correct(
    data: &PanelDataset,
    target: &Location,
    grid: &TauGrid,
    chosen_tau: f64,
    q: usize,
    seed: u64,
    design: &LocalDesign,
    cfg: &EstimatingConfig,
    nspec: &NuisanceSpec,
) -> Result<BiasFit> {
    let pipeline = PreparedPipeline::build(
        data,
        PipelineConfig {
            grid: grid.clone(),
            folds: 2,
            bias_q: q,
            seed,
            design: *design,
            cfg: cfg.clone(),
            nspec: nspec.clone(),
        },
    )?;
    let estimates = pipeline.grid_estimates(data, target, None);
    let (sub_grid, sub_estimates) = available_estimates(grid, &estimates)?;
    fit_bias_polynomial(&sub_grid, &sub_estimates, chosen_tau, q)
}

/// Restrict a grid to the bandwidths whose estimates are available.
pub(crate) fn available_estimates(
    grid: &TauGrid,
    estimates: &[Option<Vec<f64>>],
) -> Result<(TauGrid, Vec<Vec<f64>>)> {
    let mut taus = Vec::new();
    let mut ests = Vec::new();
    for (tau, est) in grid.values().iter().zip(estimates) {
        if let Some(e) = est {
            taus.push(*tau);
            ests.push(e.clone());
        }
    }
    if taus.is_empty() {
        return Err(Error::NonConvergence("no bandwidth produced an estimate".into()));
    }
    Ok((TauGrid::new(taus)?, ests))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_validation() {
        assert!(TauGrid::new(vec![]).is_err());
        assert!(TauGrid::new(vec![0.2, 0.2]).is_err());
        assert!(TauGrid::new(vec![-0.1, 0.2]).is_err());
        let g = TauGrid::geometric(0.1, 1.0, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert_relative_eq!(g.values()[0], 0.1);
        assert_relative_eq!(g.values()[4], 1.0, epsilon = 1e-12);
        let ratio = g.values()[1] / g.values()[0];
        for w in g.values().windows(2) {
            assert_relative_eq!(w[1] / w[0], ratio, epsilon = 1e-10);
        }
    }

    #[test]
    fn fold_assignment_is_deterministic_and_balanced() {
        let a = fold_assignment(9, 100, 5).unwrap();
        let b = fold_assignment(9, 100, 5).unwrap();
        assert_eq!(a, b);
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&x| x == f).count(), 20);
        }
        assert!(fold_assignment(9, 3, 5).is_err());
        assert!(fold_assignment(9, 10, 1).is_err());
    }

    #[test]
    fn bias_polynomial_recovers_exact_quadratic() {
        let grid = TauGrid::geometric(0.2, 2.0, 8).unwrap();
        let estimates: Vec<Vec<f64>> =
            grid.values().iter().map(|&t| vec![1.0 + 0.3 * t * t]).collect();
        let chosen = grid.values()[3];
        let fit = fit_bias_polynomial(&grid, &estimates, chosen, 3).unwrap();
        assert_relative_eq!(fit.nu[0][0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(fit.nu[0][1], 0.3, epsilon = 1e-9);
        for j in 2..=3 {
            assert!(fit.nu[0][j].abs() < 1e-9, "nu[{j}] = {}", fit.nu[0][j]);
        }
        assert_relative_eq!(fit.debiased[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn bias_fit_constant_estimates_pass_through() {
        let grid = TauGrid::geometric(0.1, 1.5, 9).unwrap();
        let estimates: Vec<Vec<f64>> = grid.values().iter().map(|_| vec![0.7]).collect();
        let fit = fit_bias_polynomial(&grid, &estimates, grid.values()[5], 3).unwrap();
        for j in 1..=3 {
            assert!(fit.nu[0][j].abs() < 1e-9);
        }
        assert_relative_eq!(fit.debiased[0], 0.7, epsilon = 1e-10);
    }

    #[test]
    fn bias_fit_is_equivariant_under_level_shifts() {
        let grid = TauGrid::geometric(0.2, 1.8, 10).unwrap();
        let base: Vec<Vec<f64>> = grid
            .values()
            .iter()
            .map(|&t| vec![0.4 + 0.2 * t * t - 0.05 * t * t * t])
            .collect();
        let shifted: Vec<Vec<f64>> = base.iter().map(|e| vec![e[0] + 2.5]).collect();
        let chosen = grid.values()[6];
        let a = fit_bias_polynomial(&grid, &base, chosen, 3).unwrap();
        let b = fit_bias_polynomial(&grid, &shifted, chosen, 3).unwrap();
        assert_relative_eq!(b.debiased[0] - a.debiased[0], 2.5, epsilon = 1e-8);
    }

    #[test]
    fn bias_fit_zero_at_zero_bandwidth() {
        let grid = TauGrid::geometric(0.2, 2.0, 8).unwrap();
        let estimates: Vec<Vec<f64>> =
            grid.values().iter().map(|&t| vec![1.0 + 0.3 * t * t + 0.1 * t.powi(3)]).collect();
        let fit = fit_bias_polynomial(&grid, &estimates, grid.values()[0], 3).unwrap();
        assert_eq!(fit.bias_at(0, 0.0), 0.0);
    }

    #[test]
    fn bias_fit_rejects_bad_shapes() {
        let grid = TauGrid::geometric(0.2, 2.0, 4).unwrap();
        let estimates: Vec<Vec<f64>> = grid.values().iter().map(|_| vec![1.0]).collect();
        // q = 3 needs at least 5 grid points
        assert!(fit_bias_polynomial(&grid, &estimates, grid.values()[0], 3).is_err());
        let grid5 = TauGrid::geometric(0.2, 2.0, 5).unwrap();
        let est5: Vec<Vec<f64>> = grid5.values().iter().map(|_| vec![1.0]).collect();
        assert!(fit_bias_polynomial(&grid5, &est5, grid5.values()[0], 2).is_err());
    }
}
