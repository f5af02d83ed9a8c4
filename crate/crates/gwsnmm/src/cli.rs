//! Configuration-driven command front end: simulate panels, fit
//! spatial effects, replicate the Monte Carlo tables, and convert
//! effect maps between CSV and GeoJSON.
//!
//! Every run is a pure function of the configuration, the input files,
//! and the seed; outputs are written with a resolved-configuration
//! snapshot beside them so runs can be reproduced byte for byte.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blip::BlipFamily;
use crate::error::{Error, Result};
use crate::gwe::{
    EstimatingConfig, LocalDesign, NuisanceSpec, PolyOrder, QChoice, ResponseWeighting,
};
use crate::inference::{analyze_targets, AnalysisOptions, BootstrapSpec, TargetAnalysis};
use crate::nuisance::FeatureMap;
use crate::panel::{
    impute_covariates, load_panel_csv, load_zip3_centroids, write_panel_csv, CsvSchema,
    ImputePolicy, Location, PanelDataset,
};
use crate::simlab::{
    generate, run_table1, run_table2, NuisanceCombo, ReplicationOptions, SimScenario, Surface,
    Table2Estimator,
};
use crate::tuning::{PipelineConfig, TauGrid};

fn default_true() -> bool {
    true
}

/// Full run configuration. Every field has a default so a config file
/// only needs the keys it changes; command-line flags override files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Randomness seed; required explicitly (no wall-clock default).
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub panel: PanelSection,
    pub estimator: EstimatorSection,
    pub tuning: TuningSection,
    pub inference: InferenceSection,
    pub targets: TargetsSection,
    pub simulate: SimulateSection,
    pub replicate: ReplicateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threads: 0,
            out_dir: PathBuf::from("out"),
            panel: PanelSection::default(),
            estimator: EstimatorSection::default(),
            tuning: TuningSection::default(),
            inference: InferenceSection::default(),
            targets: TargetsSection::default(),
            simulate: SimulateSection::default(),
            replicate: ReplicateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSection {
    pub path: Option<PathBuf>,
    /// Covariate imputation: "none" or "locf".
    pub impute: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub blip: String,
    /// Local polynomial order: "constant" or "linear".
    pub design: String,
    /// Index-function choice: "gradient" or "example3".
    pub q: String,
    pub ipw: bool,
    pub instrument: Option<String>,
    pub start_time: usize,
    pub lag_buffer: usize,
    /// Empty lists select the built-in defaults.
    pub propensity_features: Vec<String>,
    pub outcome_features: Vec<String>,
    pub response_features: Vec<String>,
    pub h_features: Vec<String>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            blip: "lag1_linear".into(),
            design: "linear".into(),
            q: "gradient".into(),
            ipw: false,
            instrument: None,
            start_time: 1,
            lag_buffer: 0,
            propensity_features: Vec::new(),
            outcome_features: Vec::new(),
            response_features: Vec::new(),
            h_features: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub cv_folds: usize,
    /// Explicit bandwidth grid; empty selects the data-driven default.
    pub tau_grid: Vec<f64>,
    pub bias_q: usize,
}

impl Default for TuningSection {
    fn default() -> Self {
        TuningSection { cv_folds: 5, tau_grid: Vec::new(), bias_q: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub bootstrap_b: usize,
    pub ci_level: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection { bootstrap_b: 200, ci_level: 0.95 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsSection {
    /// Grid declaration `"lo:hi:count x lo:hi:count"` over (s1, s2).
    pub grid: Option<String>,
    /// CSV of locations with columns `s1,s2`.
    pub file: Option<PathBuf>,
    /// Zip3 centroid CSV (`zip3,s1,s2`); rows become targets.
    pub zip3: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: String,
    pub n: usize,
    /// Largest time index (the panel has one more wave).
    pub horizon: usize,
    pub missingness: bool,
    /// Also write the generator's baseline series and true effects.
    #[serde(default = "default_true")]
    pub write_truth: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            scenario: "S1".into(),
            n: 400,
            horizon: 25,
            missingness: false,
            write_truth: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateSection {
    pub table: usize,
    pub reps: usize,
    pub n: usize,
    pub horizon: usize,
    pub bootstrap_b: usize,
}

impl Default for ReplicateSection {
    fn default() -> Self {
        ReplicateSection { table: 1, reps: 200, n: 400, horizon: 25, bootstrap_b: 50 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Validation("a seed is required (set `seed` or pass --seed)".into())
        })
    }

    fn snapshot(&self, out_dir: &Path, command: &str) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Computation(format!("config serialization: {e}")))?;
        std::fs::write(out_dir.join(format!("{command}_config.toml")), text)?;
        Ok(())
    }
}

fn ensure_out_dir(config: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.out_dir)?;
    Ok(config.out_dir.clone())
}

// ---------------------------------------------------------------------
// Shared parsing
// ---------------------------------------------------------------------

fn parse_design(s: &str) -> Result<LocalDesign> {
    match s {
        "constant" | "0" => Ok(LocalDesign { order: PolyOrder::Constant }),
        "linear" | "1" => Ok(LocalDesign { order: PolyOrder::Linear }),
        other => Err(Error::Validation(format!("unknown design {other:?}"))),
    }
}

fn parse_q(s: &str) -> Result<QChoice> {
    match s {
        "gradient" => Ok(QChoice::Gradient),
        "example3" => Ok(QChoice::Example3),
        other => Err(Error::Validation(format!("unknown q choice {other:?}"))),
    }
}

/// Grid declaration `"lo:hi:count x lo:hi:count"`, first axis then
/// second; a count of 1 pins the axis at `lo`.
pub fn parse_target_grid(spec: &str) -> Result<Vec<Location>> {
    let axis = |part: &str| -> Result<Vec<f64>> {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() != 3 {
            return Err(Error::Validation(format!(
                "grid axis must be lo:hi:count, got {part:?}"
            )));
        }
        let lo: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad grid bound {:?}", fields[0])))?;
        let hi: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad grid bound {:?}", fields[1])))?;
        let count: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad grid count {:?}", fields[2])))?;
        if count == 0 {
            return Err(Error::Validation("grid count must be positive".into()));
        }
        if count == 1 {
            return Ok(vec![lo]);
        }
        let step = (hi - lo) / (count - 1) as f64;
        Ok((0..count).map(|i| lo + step * i as f64).collect())
    };
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() != 2 {
        return Err(Error::Validation(format!(
            "grid must be \"lo:hi:count x lo:hi:count\", got {spec:?}"
        )));
    }
    let a1 = axis(parts[0])?;
    let a2 = axis(parts[1])?;
    let mut out = Vec::with_capacity(a1.len() * a2.len());
    for &s1 in &a1 {
        for &s2 in &a2 {
            out.push(Location::new(s1, s2)?);
        }
    }
    Ok(out)
}

fn load_targets_csv(path: &Path) -> Result<Vec<Location>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("targets file is missing column {name:?}")))
    };
    let (c1, c2) = (col("s1")?, col("s2")?);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let parse = |idx: usize| -> Result<f64> {
            record.get(idx).unwrap_or("").trim().parse().map_err(|_| Error::Parse {
                line,
                message: "target coordinates must be numeric".into(),
            })
        };
        out.push(Location::new(parse(c1)?, parse(c2)?)?);
    }
    if out.is_empty() {
        return Err(Error::Validation("targets file has no rows".into()));
    }
    Ok(out)
}

fn resolve_targets(section: &TargetsSection) -> Result<Vec<Location>> {
    match (&section.grid, &section.file, &section.zip3) {
        (Some(g), None, None) => parse_target_grid(g),
        (None, Some(f), None) => load_targets_csv(f),
        (None, None, Some(z)) => {
            let rows = load_zip3_centroids(z)?;
            if rows.is_empty() {
                return Err(Error::Validation("zip3 file has no rows".into()));
            }
            Ok(rows.into_iter().map(|(_, loc)| loc).collect())
        }
        (None, None, None) => Err(Error::Validation(
            "no targets: set targets.grid, targets.file, or targets.zip3".into(),
        )),
        _ => Err(Error::Validation("set exactly one of targets.{grid,file,zip3}".into())),
    }
}

/// Built-in default feature maps when the config leaves them empty:
/// the propensity uses an intercept, the first covariate, and the
/// cumulative treatment count; the outcome mean an intercept and the
/// first covariate; the response model intercept, current treatment
/// and outcome, and the cumulative response count; the instrument
/// moments an intercept, the cumulative response count, and the
/// instrument with its square.
fn resolve_nuisance_spec(
    est: &EstimatorSection,
    data: &PanelDataset,
    response: ResponseWeighting,
) -> Result<NuisanceSpec> {
    let names = &data.covariate_names;
    let first = names
        .first()
        .ok_or_else(|| Error::Validation("panel has no covariates".into()))?
        .clone();
    let parse_or = |given: &Vec<String>, default: Vec<String>| -> Result<FeatureMap> {
        if given.is_empty() {
            FeatureMap::parse(&default, names)
        } else {
            FeatureMap::parse(given, names)
        }
    };
    let propensity_features = parse_or(
        &est.propensity_features,
        vec!["1".into(), format!("X:{first}"), "cumA".into()],
    )?;
    let outcome_features = if est.outcome_features.iter().any(|t| t == "none") {
        None
    } else {
        Some(parse_or(&est.outcome_features, vec!["1".into(), format!("X:{first}")])?)
    };
    let (response_features, h_features) = if response == ResponseWeighting::InverseProbability {
        let rmap = parse_or(
            &est.response_features,
            vec!["1".into(), "A".into(), "Y".into(), "cumR".into()],
        )?;
        let instrument = est.instrument.clone().ok_or_else(|| {
            Error::Validation("inverse probability weighting needs `instrument`".into())
        })?;
        let hmap = parse_or(
            &est.h_features,
            vec![
                "1".into(),
                "cumR".into(),
                format!("X:{instrument}"),
                format!("X2:{instrument}"),
            ],
        )?;
        (Some(rmap), Some(hmap))
    } else {
        (None, None)
    };
    Ok(NuisanceSpec { propensity_features, outcome_features, response_features, h_features })
}

// ---------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------

/// Generate a synthetic panel and write it (plus the generator truth).
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let seed = config.require_seed()?;
    let out = ensure_out_dir(config)?;
    let scenario = SimScenario {
        surface: Surface::parse(&config.simulate.scenario)?,
        n: config.simulate.n,
        horizon: config.simulate.horizon,
        missingness: config.simulate.missingness,
        seed,
    };
    let draw = generate(&scenario);
    let panel_path = out.join("panel.csv");
    write_panel_csv(&draw.panel, &panel_path)?;

    let mut written = vec![panel_path];
    if config.simulate.write_truth {
        let truth_path = out.join("truth.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&truth_path)?);
        writeln!(f, "subject_id,time_index,psi_true,baseline_outcome")?;
        for (i, s) in draw.panel.subjects.iter().enumerate() {
            for k in 0..draw.panel.time_count {
                writeln!(
                    f,
                    "{},{},{},{}",
                    s.id,
                    k,
                    draw.truth.psi[i],
                    draw.truth.baseline[i][k]
                )?;
            }
        }
        f.flush()?;
        written.push(truth_path);
    }
    config.snapshot(&out, "simulate")?;

    let responded: usize = draw
        .panel
        .subjects
        .iter()
        .map(|s| s.response.iter().filter(|&&r| r == 1).count())
        .sum();
    let total = draw.panel.n_subjects() * draw.panel.time_count;
    println!(
        "simulated scenario {} | n={} K={} response_rate={:.3}",
        scenario.surface.label(),
        draw.panel.n_subjects(),
        draw.panel.horizon(),
        responded as f64 / total as f64
    );
    Ok(written)
}

// ---------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------

/// Significance class of the first effect component.
fn significance(ci_lower: f64, ci_upper: f64) -> &'static str {
    if ci_upper < 0.0 {
        "SN"
    } else if ci_lower > 0.0 {
        "SP"
    } else {
        "insignificant"
    }
}

/// Column names of the effects table for a given parameter dimension.
fn effects_columns(p: usize) -> Vec<String> {
    let mut cols = vec!["s1".to_string(), "s2".to_string(), "tau".to_string()];
    for j in 1..=p {
        cols.push(format!("psi_{j}"));
    }
    cols.push("converged".into());
    cols.push("ess_flag".into());
    for j in 1..=p {
        cols.push(format!("psi_bc_{j}"));
    }
    for j in 1..=p {
        cols.push(format!("se_{j}"));
    }
    for j in 1..=p {
        cols.push(format!("ci_lower_{j}"));
    }
    for j in 1..=p {
        cols.push(format!("ci_upper_{j}"));
    }
    cols.push("significance".into());
    cols
}

fn effects_row(a: &TargetAnalysis) -> Vec<String> {
    let p = a.fit.psi.len();
    let mut row = vec![
        a.target.s1.to_string(),
        a.target.s2.to_string(),
        a.fit.tau.to_string(),
    ];
    for j in 0..p {
        row.push(a.fit.psi[j].to_string());
    }
    row.push(a.fit.converged.to_string());
    row.push(if a.fit.thin_data { "thin".into() } else { "ok".into() });
    for j in 0..p {
        row.push(a.inference.psi_bc[j].to_string());
    }
    for j in 0..p {
        row.push(a.inference.variance[j].sqrt().to_string());
    }
    for j in 0..p {
        row.push(a.inference.ci_lower[j].to_string());
    }
    for j in 0..p {
        row.push(a.inference.ci_upper[j].to_string());
    }
    row.push(significance(a.inference.ci_lower[0], a.inference.ci_upper[0]).to_string());
    row
}

/// Fit the full pipeline at the configured targets and write the
/// effects table with its GeoJSON twin.
pub fn cmd_fit(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let seed = config.require_seed()?;
    let out = ensure_out_dir(config)?;
    let panel_path = config
        .panel
        .path
        .as_ref()
        .ok_or_else(|| Error::Validation("fit needs panel.path".into()))?;
    let mut data = load_panel_csv(panel_path, &CsvSchema::default())?;
    match config.panel.impute.as_deref() {
        None | Some("none") => {}
        Some("locf") => data = impute_covariates(&data, ImputePolicy::LocfThenBaselineMean)?,
        Some(other) => {
            return Err(Error::Validation(format!("unknown imputation policy {other:?}")))
        }
    }

    let complete = data.is_complete();
    let response = match (config.estimator.ipw, complete) {
        (false, true) => ResponseWeighting::FullData,
        (false, false) => {
            log::warn!("panel has non-response and ipw is off: complete-case analysis");
            ResponseWeighting::ConstantOne
        }
        (true, _) => ResponseWeighting::InverseProbability,
    };

    let family = BlipFamily::parse(&config.estimator.blip, &data.covariate_names)?;
    let mut cfg = EstimatingConfig::new(family);
    cfg.q_choice = parse_q(&config.estimator.q)?;
    cfg.response = response;
    cfg.start_time = config.estimator.start_time;
    cfg.lag_buffer = config.estimator.lag_buffer;
    let design = parse_design(&config.estimator.design)?;
    let nspec = resolve_nuisance_spec(&config.estimator, &data, response)?;
    let grid = if config.tuning.tau_grid.is_empty() {
        TauGrid::auto(&data)?
    } else {
        TauGrid::new(config.tuning.tau_grid.clone())?
    };
    let targets = resolve_targets(&config.targets)?;

    let options = AnalysisOptions {
        pipeline: PipelineConfig {
            grid,
            folds: config.tuning.cv_folds,
            bias_q: config.tuning.bias_q,
            seed,
            design,
            cfg,
            nspec,
        },
        bootstrap: BootstrapSpec::new(config.inference.bootstrap_b, seed)?,
        ci_level: config.inference.ci_level,
    };
    let analyses = analyze_targets(&data, &targets, &options)?;

    let p = analyses[0].fit.psi.len();
    let columns = effects_columns(p);
    let csv_path = out.join("effects.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(f, "{}", columns.join(","))?;
    for a in &analyses {
        writeln!(f, "{}", effects_row(a).join(","))?;
    }
    f.flush()?;

    let geojson_path = out.join("effects.geojson");
    let rows: Vec<Vec<String>> = analyses.iter().map(effects_row).collect();
    std::fs::write(&geojson_path, effects_geojson(&columns, &rows)?)?;
    config.snapshot(&out, "fit")?;

    println!(
        "fitted {} targets | blip {} | bootstrap {}",
        analyses.len(),
        config.estimator.blip,
        config.inference.bootstrap_b
    );
    Ok(vec![csv_path, geojson_path])
}

// ---------------------------------------------------------------------
// replicate
// ---------------------------------------------------------------------

/// Run the Monte Carlo tables and write CSV plus an aligned text view.
pub fn cmd_replicate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let seed = config.require_seed()?;
    let out = ensure_out_dir(config)?;
    let mut opts = ReplicationOptions::new(config.replicate.reps, seed);
    opts.n = config.replicate.n;
    opts.horizon = config.replicate.horizon;
    opts.bootstrap = config.replicate.bootstrap_b;
    opts.folds = config.tuning.cv_folds;
    if !config.tuning.tau_grid.is_empty() {
        opts.grid = Some(TauGrid::new(config.tuning.tau_grid.clone())?);
    }
    let started = std::time::Instant::now();
    let (summary, stem) = match config.replicate.table {
        1 => {
            let combos = [
                NuisanceCombo { propensity_correct: true, outcome_correct: true },
                NuisanceCombo { propensity_correct: false, outcome_correct: true },
                NuisanceCombo { propensity_correct: true, outcome_correct: false },
                NuisanceCombo { propensity_correct: false, outcome_correct: false },
            ];
            (run_table1(&opts, &combos)?, "table1")
        }
        2 => (
            run_table2(&opts, &[Table2Estimator::Ipw, Table2Estimator::ConstantOne])?,
            "table2",
        ),
        other => return Err(Error::Validation(format!("table must be 1 or 2, got {other}"))),
    };
    let elapsed = started.elapsed();
    let failures: usize = summary.rows.iter().map(|r| r.failures).sum();

    let csv_path = out.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, summary.to_csv())?;
    let txt_path = out.join(format!("{stem}.txt"));
    let mut text = summary.to_text();
    text.push_str(&format!(
        "\nreplicates: {} | failed analyses: {failures} | runtime: {:.1?}\n",
        config.replicate.reps, elapsed
    ));
    std::fs::write(&txt_path, text)?;
    config.snapshot(&out, "replicate")?;

    println!(
        "table {} done | reps {} | failures {failures} | {:.1?}",
        config.replicate.table, config.replicate.reps, elapsed
    );
    Ok(vec![csv_path, txt_path])
}

// ---------------------------------------------------------------------
// map
// ---------------------------------------------------------------------

fn escape_json(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Serialize effects rows as an RFC 7946 FeatureCollection of points
/// with coordinates `[s1, s2]`; property order follows the columns.
fn effects_geojson(columns: &[String], rows: &[Vec<String>]) -> Result<String> {
    let s1_idx = columns.iter().position(|c| c == "s1");
    let s2_idx = columns.iter().position(|c| c == "s2");
    let (Some(s1_idx), Some(s2_idx)) = (s1_idx, s2_idx) else {
        return Err(Error::Validation("effects table needs s1 and s2 columns".into()));
    };
    let mut out = String::from("{\"type\":\"FeatureCollection\",\"features\":[");
    for (ri, row) in rows.iter().enumerate() {
        if ri > 0 {
            out.push(',');
        }
        out.push_str("{\"type\":\"Feature\",\"geometry\":{\"type\":\"Point\",\"coordinates\":[");
        out.push_str(&row[s1_idx]);
        out.push(',');
        out.push_str(&row[s2_idx]);
        out.push_str("]},\"properties\":{");
        let mut first = true;
        for (ci, col) in columns.iter().enumerate() {
            if ci == s1_idx || ci == s2_idx {
                continue;
            }
            if !first {
                out.push(',');
            }
            first = false;
            out.push('"');
            out.push_str(&escape_json(col));
            out.push_str("\":");
            let value = &row[ci];
            match value.parse::<f64>() {
                Ok(v) if v.is_finite() && !value.is_empty() => out.push_str(value),
                _ => {
                    out.push('"');
                    out.push_str(&escape_json(value));
                    out.push('"');
                }
            }
        }
        out.push_str("}}");
    }
    out.push_str("]}");
    Ok(out)
}

fn read_table_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() })?;
        rows.push(record.iter().map(|f| f.to_string()).collect());
    }
    Ok((columns, rows))
}

/// GeoJSON back to the effects table (columns in canonical order when
/// recognized, alphabetical otherwise).
fn geojson_to_table(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Validation(format!("invalid GeoJSON: {e}")))?;
    let features = value
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::Validation("GeoJSON has no features array".into()))?;
    let mut prop_names: Vec<String> = Vec::new();
    for f in features {
        if let Some(props) = f.get("properties").and_then(|p| p.as_object()) {
            for k in props.keys() {
                if !prop_names.contains(k) {
                    prop_names.push(k.clone());
                }
            }
        }
    }
    // canonical ordering when the properties look like an effects table
    let p = prop_names.iter().filter(|c| c.starts_with("psi_bc_")).count();
    let canonical = effects_columns(p.max(1));
    let mut columns: Vec<String> = vec!["s1".into(), "s2".into()];
    let mut ordered: Vec<String> = canonical
        .iter()
        .filter(|c| prop_names.contains(c))
        .cloned()
        .collect();
    let mut leftover: Vec<String> = prop_names
        .iter()
        .filter(|c| !canonical.contains(c))
        .cloned()
        .collect();
    leftover.sort();
    ordered.extend(leftover);
    columns.extend(ordered.clone());

    let render = |v: &serde_json::Value| -> String {
        match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            other => other.to_string(),
        }
    };
    let mut rows = Vec::with_capacity(features.len());
    for f in features {
        let coords = f
            .get("geometry")
            .and_then(|g| g.get("coordinates"))
            .and_then(|c| c.as_array())
            .ok_or_else(|| Error::Validation("feature has no point coordinates".into()))?;
        if coords.len() < 2 {
            return Err(Error::Validation("point coordinates must have two entries".into()));
        }
        let mut row = vec![render(&coords[0]), render(&coords[1])];
        let props = f.get("properties").and_then(|x| x.as_object());
        for name in &ordered {
            row.push(props.and_then(|o| o.get(name)).map(&render).unwrap_or_default());
        }
        rows.push(row);
    }
    Ok((columns, rows))
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub input: Option<PathBuf>,
}

/// Convert an effects CSV to GeoJSON plus a plot-ready grid CSV, or a
/// GeoJSON file back to the effects CSV.
pub fn cmd_map(config: &RunConfig, input: &Path) -> Result<Vec<PathBuf>> {
    let out = ensure_out_dir(config)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("effects")
        .to_string();
    let extension = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut written = Vec::new();
    if extension.eq_ignore_ascii_case("geojson") || extension.eq_ignore_ascii_case("json") {
        let text = std::fs::read_to_string(input)?;
        let (columns, rows) = geojson_to_table(&text)?;
        let csv_path = out.join(format!("{stem}.csv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(f, "{}", columns.join(","))?;
        for row in &rows {
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        println!("converted {} features to {}", rows.len(), csv_path.display());
        written.push(csv_path);
    } else {
        let (columns, rows) = read_table_csv(input)?;
        if rows.is_empty() {
            log::warn!("effects file {} has no rows", input.display());
        }
        let geojson_path = out.join(format!("{stem}.geojson"));
        std::fs::write(&geojson_path, effects_geojson(&columns, &rows)?)?;
        written.push(geojson_path.clone());

        // plot-ready long-format grid: coordinates plus the headline
        // (first bias-corrected, else first) effect column
        let value_col = columns
            .iter()
            .position(|c| c == "psi_bc_1")
            .or_else(|| columns.iter().position(|c| c == "psi_1"))
            .ok_or_else(|| Error::Validation("no effect column (psi_1 or psi_bc_1)".into()))?;
        let s1_idx = columns.iter().position(|c| c == "s1").unwrap_or(0);
        let s2_idx = columns.iter().position(|c| c == "s2").unwrap_or(1);
        let grid_path = out.join(format!("{stem}_grid.csv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&grid_path)?);
        writeln!(f, "s1,s2,{}", columns[value_col])?;
        let mut sorted: Vec<&Vec<String>> = rows.iter().collect();
        sorted.sort_by(|a, b| {
            let k = |r: &Vec<String>| {
                (
                    r[s2_idx].parse::<f64>().unwrap_or(f64::NAN),
                    r[s1_idx].parse::<f64>().unwrap_or(f64::NAN),
                )
            };
            k(a).partial_cmp(&k(b)).unwrap_or(std::cmp::Ordering::Equal)
        });
        for row in sorted {
            writeln!(f, "{},{},{}", row[s1_idx], row[s2_idx], row[value_col])?;
        }
        f.flush()?;
        println!(
            "wrote {} features to {} and {}",
            rows.len(),
            geojson_path.display(),
            grid_path.display()
        );
        written.push(grid_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_grid_parses_counts_and_bounds() {
        let targets = parse_target_grid("0.25:0.75:2 x 0.25:0.75:2").unwrap();
        assert_eq!(targets.len(), 4);
        assert_eq!(targets[0], Location { s1: 0.25, s2: 0.25 });
        assert_eq!(targets[3], Location { s1: 0.75, s2: 0.75 });
        let strip = parse_target_grid("33:47:7 x -123:-115:8").unwrap();
        assert_eq!(strip.len(), 56);
        assert!(parse_target_grid("1:2 x 3:4:5").is_err());
        assert!(parse_target_grid("1:2:0 x 3:4:5").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = RunConfig::default();
        config.seed = Some(7);
        config.estimator.blip = "gaussian_lag".into();
        config.tuning.tau_grid = vec![0.1, 0.2];
        let text = toml::to_string_pretty(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, Some(7));
        assert_eq!(back.estimator.blip, "gaussian_lag");
        assert_eq!(back.tuning.tau_grid, vec![0.1, 0.2]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = toml::from_str::<RunConfig>("nonsense = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn geojson_encodes_and_decodes_effects_rows() {
        let columns: Vec<String> = effects_columns(1);
        let row = vec![
            "0.25".to_string(),
            "0.75".to_string(),
            "0.2".to_string(),
            "1.5".to_string(),
            "true".to_string(),
            "ok".to_string(),
            "1.45".to_string(),
            "0.1".to_string(),
            "1.25".to_string(),
            "1.65".to_string(),
            "SP".to_string(),
        ];
        let json = effects_geojson(&columns, &[row.clone()]).unwrap();
        assert!(json.contains("\"coordinates\":[0.25,0.75]"));
        assert!(json.contains("\"significance\":\"SP\""));
        let (cols2, rows2) = geojson_to_table(&json).unwrap();
        assert_eq!(cols2, columns);
        assert_eq!(rows2, vec![row]);
    }

    #[test]
    fn empty_effects_table_gives_empty_collection() {
        let columns = effects_columns(1);
        let json = effects_geojson(&columns, &[]).unwrap();
        assert_eq!(json, "{\"type\":\"FeatureCollection\",\"features\":[]}");
    }
}
