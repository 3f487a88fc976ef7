//! CSV ingestion, run configuration, and result/report serialization.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{EMConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{ActiveEffect, EffectType, ModelParams, QuadratureGrid, ResponseMatrix};
use crate::selection::{default_lambda_grid, KComparison, RegPath};
use crate::simulation::{ReplicationSummary, SimulatedDataset};

pub const SCHEMA_VERSION: u32 = 1;

fn ingest(msg: String) -> Error {
    Error::Ingest(msg)
}

/// Reads a response matrix from CSV text with a header row of item names.
/// Rows and columns in messages are 1-based, rows counting data rows only.
/// `categories` overrides the per-item category counts; otherwise each item
/// uses its largest observed value.
pub fn parse_responses<R: std::io::Read>(reader: R, categories: Option<&[usize]>) -> Result<ResponseMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let n_items = names.len();
    if n_items == 0 || names.iter().all(|n| n.is_empty()) {
        return Err(ingest("missing header row".into()));
    }
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != n_items {
            return Err(ingest(format!("row {row} has {} cells, expected {n_items}", rec.len())));
        }
        for (c, cell) in rec.iter().enumerate() {
            let col = c + 1;
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(ingest(format!("missing value at row {row}, column {col}")));
            }
            let v: i64 = cell
                .parse()
                .map_err(|_| ingest(format!("non-integer value '{cell}' at row {row}, column {col}")))?;
            if v < 1 {
                return Err(ingest(format!("category below 1 at row {row}, column {col}")));
            }
            if v > u8::MAX as i64 {
                return Err(ingest(format!("category {v} too large at row {row}, column {col}")));
            }
            values.push(v as u8);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(ingest("no data rows".into()));
    }
    let cats: Vec<usize> = match categories {
        Some(c) => {
            if c.len() != n_items {
                return Err(ingest(format!("{} category counts given for {n_items} items", c.len())));
            }
            c.to_vec()
        }
        None => (0..n_items)
            .map(|j| (0..n_rows).map(|i| values[i * n_items + j] as usize).max().unwrap_or(1))
            .collect(),
    };
    for j in 0..n_items {
        let first = values[j];
        if (0..n_rows).all(|i| values[i * n_items + j] == first) {
            return Err(ingest(format!("degenerate item: column {} ('{}') has a single category", j + 1, names[j])));
        }
        if cats[j] < 2 {
            return Err(ingest(format!("degenerate item: column {} has fewer than 2 categories", j + 1)));
        }
        if let Some(i) = (0..n_rows).find(|&i| values[i * n_items + j] as usize > cats[j]) {
            return Err(ingest(format!(
                "category above {} at row {}, column {}",
                cats[j],
                i + 1,
                j + 1
            )));
        }
    }
    ResponseMatrix::with_names(n_rows, n_items, cats, values, names)
}

pub fn read_responses(path: &Path, categories: Option<&[usize]>) -> Result<ResponseMatrix> {
    let f = File::open(path).map_err(|e| ingest(format!("cannot open {}: {e}", path.display())))?;
    parse_responses(f, categories)
}

pub fn write_responses(path: &Path, data: &ResponseMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(data.item_names())?;
    for i in 0..data.n_respondents() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Tuning grid in a config file: the string `"default"` or explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    Named(String),
    Values(Vec<f64>),
}

impl LambdaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            LambdaGrid::Named(s) if s == "default" => Ok(default_lambda_grid()),
            LambdaGrid::Named(s) => Err(Error::InvalidConfig(format!("unknown lambda grid '{s}'"))),
            LambdaGrid::Values(v) if v.is_empty() => Err(Error::InvalidConfig("empty lambda grid".into())),
            LambdaGrid::Values(v) => Ok(v.clone()),
        }
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Named("default".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes: usize,
    pub span: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            nodes: QuadratureGrid::DEFAULT_NODES,
            span: QuadratureGrid::DEFAULT_SPAN,
        }
    }
}

impl QuadratureSpec {
    pub fn grid(&self) -> Result<QuadratureGrid> {
        QuadratureGrid::uniform(self.nodes, self.span)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_path: String,
    pub k_candidates: Vec<usize>,
    pub lambda_grid: LambdaGrid,
    pub quadrature: QuadratureSpec,
    pub em: EMConfig,
    pub output_dir: String,
    pub seed: u64,
    /// Per-item category counts; inferred from the data when absent.
    pub categories: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: String::new(),
            k_candidates: vec![0, 1, 2],
            lambda_grid: LambdaGrid::default(),
            quadrature: QuadratureSpec::default(),
            em: EMConfig::default(),
            output_dir: "out".into(),
            seed: 0,
            categories: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.data_path.is_empty() {
            return bad("data_path is empty");
        }
        if self.output_dir.is_empty() {
            return bad("output_dir is empty");
        }
        if self.k_candidates.is_empty() {
            return bad("k_candidates is empty");
        }
        if self.quadrature.nodes < 11 {
            return bad("quadrature needs at least 11 nodes");
        }
        self.lambda_grid.values()?;
        self.em.validate()
    }
}

/// Serialized outcome of a fit and its confirmatory refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub item_names: Vec<String>,
    pub lambda: f64,
    pub df: usize,
    pub bic: f64,
    pub params: ModelParams,
    pub penalized_params: ModelParams,
    pub loglik: f64,
    pub penalized_objective: f64,
    pub active_set: Vec<ActiveEffect>,
    pub converged: bool,
    pub n_iters: usize,
    pub trace: Vec<f64>,
    pub refit_converged: bool,
    pub refit_trace: Vec<f64>,
    /// `[respondent][class]` posterior class probabilities under the refit.
    pub class_marginals: Vec<Vec<f64>>,
}

impl ResultDocument {
    pub fn new(data: &ResponseMatrix, fit: &FitResult, refit: &FitResult, df: usize, bic: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            item_names: data.item_names().to_vec(),
            lambda: fit.lambda,
            df,
            bic,
            params: refit.params.clone(),
            penalized_params: fit.params.clone(),
            loglik: refit.objective.loglik,
            penalized_objective: fit.objective.penalized,
            active_set: refit.active_set.clone(),
            converged: fit.converged,
            n_iters: fit.n_iters,
            trace: fit.trace.clone(),
            refit_converged: refit.converged,
            refit_trace: refit.trace.clone(),
            class_marginals: (0..refit.posterior.n_respondents())
                .map(|i| refit.posterior.class_marginals(i).to_vec())
                .collect(),
        }
    }

    pub fn from_path(data: &ResponseMatrix, path: &RegPath) -> Self {
        let e = path.selected();
        Self::new(data, &e.fit, &e.refit, e.df, e.bic)
    }
}

/// Writes JSON. serde_json prints the shortest representation that reads
/// back to the same `f64`, so parameters round-trip exactly.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub const PATH_HEADER: [&str; 7] = [
    "lambda",
    "df",
    "bic",
    "loglik",
    "n_active_uniform",
    "n_active_nonuniform",
    "converged",
];

pub fn write_path_csv<W: std::io::Write>(out: W, path: &RegPath) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PATH_HEADER)?;
    for e in &path.entries {
        w.write_record([
            e.lambda.to_string(),
            e.df.to_string(),
            e.bic.to_string(),
            e.refit.objective.loglik.to_string(),
            e.n_active(EffectType::Uniform).to_string(),
            e.n_active(EffectType::Nonuniform).to_string(),
            (e.fit.converged && e.refit.converged).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_compare_csv<W: std::io::Write>(out: W, comps: &[KComparison], best: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_classes", "lambda", "df", "loglik", "bic", "selected"])?;
    for (i, c) in comps.iter().enumerate() {
        let e = c.path.selected();
        w.write_record([
            (c.k_extra + 1).to_string(),
            e.lambda.to_string(),
            e.df.to_string(),
            e.refit.objective.loglik.to_string(),
            e.bic.to_string(),
            (i == best).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const METRICS_HEADER: [&str; 4] = ["condition", "rep", "metric", "value"];

/// One row per (replication, metric); failed replications get a single
/// `failed` row.
pub fn write_metrics_csv<W: std::io::Write>(out: W, summaries: &[ReplicationSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for s in summaries {
        for r in &s.records {
            match &r.report {
                Some(m) => {
                    for (name, v) in m.entries() {
                        w.write_record([s.condition.clone(), r.rep.to_string(), name, v.to_string()])?;
                    }
                }
                None => w.write_record([s.condition.clone(), r.rep.to_string(), "failed".into(), "1".into()])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: std::io::Write>(out: W, summaries: &[ReplicationSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["condition", "n_reps", "n_failed", "metric", "value"])?;
    for s in summaries {
        for (name, v) in &s.metrics {
            w.write_record([
                s.condition.clone(),
                s.n_reps.to_string(),
                s.n_failed.to_string(),
                name.clone(),
                v.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ground truth written next to a simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub schema_version: u32,
    pub params: ModelParams,
    pub classes: Vec<usize>,
    pub thetas: Vec<f64>,
    pub dif_items: Vec<usize>,
}

impl From<&SimulatedDataset> for TruthSidecar {
    fn from(d: &SimulatedDataset) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            params: d.true_params.clone(),
            classes: d.true_classes.clone(),
            thetas: d.true_thetas.clone(),
            dif_items: d.dif_item_indices.clone(),
        }
    }
}

/// Item tables of a fitted model: discrimination with intercept and slope
/// DIF per non-reference class, then thresholds.
pub fn render_report(params: &ModelParams, item_names: &[String]) -> String {
    let mut s = String::new();
    let nc = params.n_classes();
    let _ = writeln!(s, "Structural parameters");
    let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}", "class", "pi", "mu", "sigma");
    for k in 0..nc {
        let _ = writeln!(
            s,
            "{:<8}{:>10.3}{:>10.3}{:>10.3}",
            k + 1,
            params.class_probs[k],
            params.class_means[k],
            params.class_sds[k]
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Item discrimination and DIF");
    let mut header = format!("{:<16}{:>10}", "item", "a");
    for k in 1..nc {
        let _ = write!(header, "{:>12}{:>12}", format!("delta1[{}]", k + 1), format!("delta2[{}]", k + 1));
    }
    let _ = writeln!(s, "{header}");
    for j in 0..params.n_items() {
        let _ = write!(s, "{:<16}{:>10.3}", item_names[j], params.slopes[j]);
        for k in 1..nc {
            let _ = write!(s, "{:>12.3}{:>12.3}", params.dif_intercept[j][k], params.dif_slope[j][k]);
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Thresholds");
    let max_cut = params.thresholds.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut header = format!("{:<16}", "item");
    for m in 0..max_cut {
        let _ = write!(header, "{:>10}", format!("tau{}", m + 1));
    }
    let _ = writeln!(s, "{header}");
    for j in 0..params.n_items() {
        let _ = write!(s, "{:<16}", item_names[j]);
        for t in &params.thresholds[j] {
            let _ = write!(s, "{t:>10.3}");
        }
        let _ = writeln!(s);
    }
    s
}
