//! Experiment drivers, summary statistics and report writers.
//!
//! Each `run_*` function takes a parsed [`ExperimentConfig`], writes its
//! CSV/JSON artifacts into an output directory and returns the in-memory
//! report. The text table it returns is what the command line prints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cycles::{CycleKind, CycleSpec, Hierarchy, Solver};
use crate::error::{Error, Result};
use crate::optimizer::{
    coordinate_grid_search, local_search, Descent, omega_sweep, sweep_minimum, train, LossEstimator, PreparedProtocol,
    RateEvaluation, RateProtocol, SmootherFamily, TrainConfig, TrainOutcome,
};
use crate::par::{map_indexed, Execution};
use crate::problem::{sample_rng, EnsembleSpec};
use crate::smoothers::SmootherSpec;
use crate::spectral::{
    gelfand_estimate, improvement, rate_from_norms, spectral_radius, CoarseCorrection, RateWindow,
    SpectrumRecord,
};
use crate::transfer::{build_prolongation, ProlongationKind, MIN_COARSE};

/// Arithmetic mean, geometric mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub geometric_mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn stats(values: &[f64]) -> Result<Stats> {
    let geometric_mean = geometric_mean(values)?;
    let (mean, std) = mean_std(values)?;
    Ok(Stats {
        mean,
        geometric_mean,
        std,
        count: values.len(),
    })
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `exp(mean(ln v))`; every value must be positive.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositive(*v));
    }
    Ok((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

/// Percentage of paired samples where `candidate` is strictly below
/// `reference`. Ties are not wins.
pub fn win_percentage(candidate: &[f64], reference: &[f64]) -> Result<f64> {
    if candidate.len() != reference.len() {
        return Err(Error::Dimension {
            expected: reference.len(),
            got: candidate.len(),
        });
    }
    if candidate.is_empty() {
        return Err(Error::Empty);
    }
    let wins = candidate.iter().zip(reference).filter(|(c, r)| c < r).count();
    Ok(100.0 * wins as f64 / candidate.len() as f64)
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into the
/// end bins. Returns `(bin_lo, bin_hi, count)` per bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = ((v - lo) / width).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * i as f64, lo + width * (i + 1) as f64, c))
        .collect()
}

fn value_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        (lo, if hi > lo { hi } else { lo + 1.0 })
    } else {
        (0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSmoother {
    #[serde(default)]
    pub label: Option<String>,
    pub smoother: SmootherSpec,
}

impl NamedSmoother {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.smoother.label())
    }
}

fn default_coarsest() -> usize {
    MIN_COARSE
}

/// Multigrid rate measurement shared by `bench` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSection {
    pub samples: usize,
    #[serde(default)]
    pub delta: f64,
    pub cycle: CycleKind,
    pub pre: usize,
    #[serde(default)]
    pub post: usize,
    #[serde(default)]
    pub prolongation: ProlongationKind,
    #[serde(default = "default_coarsest")]
    pub coarsest_m: usize,
    #[serde(default)]
    pub window: RateWindow,
}

fn default_family() -> SmootherFamily {
    SmootherFamily::Jacobi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    #[serde(default = "default_family")]
    pub family: SmootherFamily,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

fn default_nu() -> usize {
    1
}
fn default_alphas() -> Vec<u32> {
    vec![10]
}
fn default_rho_tol() -> f64 {
    1e-10
}
fn default_bins() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSection {
    pub samples: usize,
    pub delta: f64,
    #[serde(default = "default_nu")]
    pub nu: usize,
    #[serde(default)]
    pub prolongation: ProlongationKind,
    pub smoother: SmootherSpec,
    /// Second smoother evaluated on the same samples for pairwise comparison.
    #[serde(default)]
    pub compare: Option<SmootherSpec>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<u32>,
    #[serde(default = "default_rho_tol")]
    pub tol: f64,
    #[serde(default)]
    pub measure_rate: bool,
    #[serde(default)]
    pub window: RateWindow,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_lr_base() -> f64 {
    1e-2
}
fn default_lr_decay() -> f64 {
    0.999
}
fn default_tol() -> f64 {
    1e-6
}
fn default_fd_step() -> f64 {
    1e-4
}

/// Training settings; grid, distribution and seed come from the enclosing
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default)]
    pub family: SmootherFamily,
    pub samples: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub regenerate_every: Option<usize>,
    pub alpha: u32,
    pub delta: f64,
    #[serde(default = "default_nu")]
    pub nu: usize,
    #[serde(default)]
    pub prolongation: ProlongationKind,
    #[serde(default = "default_lr_base")]
    pub lr_base: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub max_epochs: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub estimator: Option<LossEstimator>,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub descent: Descent,
}

fn default_step() -> f64 {
    0.01
}

/// Local-search refinement of a labelled bench row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSection {
    pub from: String,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSection {
    pub bounds: Vec<(f64, f64)>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub family: SmootherFamily,
    #[serde(default)]
    pub label: Option<String>,
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSection {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub first: u64,
    #[serde(default)]
    pub delta: f64,
}

/// One experiment file. Sections are optional; each command names the ones
/// it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub protocol: Option<ProtocolSection>,
    #[serde(default)]
    pub smoothers: Vec<NamedSmoother>,
    /// Labels of the rows used as 100% baselines for improvement columns;
    /// the first one is also the win-percentage baseline.
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub refine: Option<RefineSection>,
    #[serde(default)]
    pub grid_search: Option<GridSearchSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub spectrum: Option<SpectrumSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub generate: Option<GenerateSection>,
}

fn require<'a, T>(section: &'a Option<T>, key: &str) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.ensemble.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn rate_protocol(&self, execution: Execution) -> Result<RateProtocol> {
        let p = require(&self.protocol, "protocol")?;
        let protocol = RateProtocol {
            ensemble: self.ensemble,
            samples: p.samples,
            seed: self.seed,
            delta: p.delta,
            cycle: p.cycle,
            pre: p.pre,
            post: p.post,
            prolongation: p.prolongation,
            coarsest_m: p.coarsest_m,
            window: p.window,
            execution,
        };
        protocol.validate()?;
        Ok(protocol)
    }

    pub fn train_config(&self, execution: Execution) -> Result<TrainConfig> {
        let t = require(&self.train, "train")?;
        let config = TrainConfig {
            ensemble: self.ensemble,
            family: t.family,
            samples: t.samples,
            train_fraction: t.train_fraction,
            regenerate_every: t.regenerate_every,
            alpha: t.alpha,
            delta: t.delta,
            nu: t.nu,
            prolongation: t.prolongation,
            lr_base: t.lr_base,
            lr_decay: t.lr_decay,
            max_epochs: t.max_epochs,
            tol: t.tol,
            fd_step: t.fd_step,
            estimator: t.estimator,
            seed: self.seed,
            theta0: t.theta0.clone(),
            descent: t.descent,
            execution,
        };
        config.validate()?;
        Ok(config)
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

/// Free parameters of a smoother, empty for parameterless ones.
pub fn parameters(spec: &SmootherSpec) -> Vec<f64> {
    match spec {
        SmootherSpec::Jacobi { omega } | SmootherSpec::GaussSeidelLex { omega } => vec![*omega],
        SmootherSpec::FourColorSor { omegas } => omegas.to_vec(),
        SmootherSpec::Spai0 | SmootherSpec::ExplicitDiagonal { .. } => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub parameters: Vec<f64>,
    /// Geometric mean of the per-sample rates.
    pub rate: f64,
    pub mean: f64,
    pub std: f64,
    pub diverged: usize,
    /// Against the first reference row.
    pub win_percentage: Option<f64>,
    /// Keyed by reference label.
    pub improvement: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<ReportRow>,
    pub references: Vec<String>,
    pub config: ExperimentConfig,
}

impl BenchReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<28} {:>9} {:>9} {:>9} {:>5} {:>7}", "smoother", "rate", "mean", "std", "div", "win%");
        for r in &self.references {
            let _ = write!(s, " {:>12}", format!("imp[{}]", truncate(r, 6)));
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(
                s,
                "{:<28} {:>9.4} {:>9.4} {:>9.4} {:>5} {:>7}",
                truncate(&row.label, 28),
                row.rate,
                row.mean,
                row.std,
                row.diverged,
                row.win_percentage.map_or("-".into(), |w| format!("{w:.1}")),
            );
            for r in &self.references {
                let v = row.improvement.get(r).map_or("-".into(), |v| format!("{v:.2}"));
                let _ = write!(s, " {v:>12}");
            }
            s.push('\n');
        }
        s
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

fn build_rows(evals: &[(NamedSmoother, RateEvaluation)], references: &[String]) -> Result<Vec<ReportRow>> {
    let rates_of = |label: &str| -> Result<Vec<f64>> {
        evals
            .iter()
            .find(|(s, _)| s.label() == label)
            .map(|(_, e)| e.samples.iter().map(|s| s.rate).collect())
            .ok_or_else(|| Error::Config(format!("reference `{label}` is not a smoother label")))
    };
    let mut rows = Vec::with_capacity(evals.len());
    for (named, eval) in evals {
        let rates: Vec<f64> = eval.samples.iter().map(|s| s.rate).collect();
        let (mean, std) = mean_std(&rates)?;
        let win = match references.first() {
            Some(r) => Some(win_percentage(&rates, &rates_of(r)?)?),
            None => None,
        };
        let mut imp = BTreeMap::new();
        for r in references {
            let reference = geometric_mean(&rates_of(r)?)?;
            if let Ok(v) = improvement(eval.rate, reference) {
                imp.insert(r.clone(), v);
            }
        }
        rows.push(ReportRow {
            label: named.label(),
            parameters: parameters(&named.smoother),
            rate: eval.rate,
            mean,
            std,
            diverged: eval.diverged(),
            win_percentage: win,
            improvement: imp,
        });
    }
    Ok(rows)
}

/// Scores each configured smoother (plus the optional refined and
/// grid-searched rows) on the rate protocol. Writes `bench.txt`,
/// `bench.csv`, `bench.json`, `samples.csv` and one `history_<label>.csv`
/// per row.
pub fn run_bench(config: &ExperimentConfig, out: &Path, execution: Execution) -> Result<BenchReport> {
    let prepared = config.rate_protocol(execution)?.prepare()?;
    if config.smoothers.is_empty() && config.grid_search.is_none() {
        return Err(Error::Config("missing key `smoothers`".into()));
    }
    let mut evals: Vec<(NamedSmoother, RateEvaluation)> = Vec::new();
    for s in &config.smoothers {
        s.smoother.validate()?;
        if evals.iter().any(|(e, _)| e.label() == s.label()) {
            return Err(Error::Config(format!("duplicate smoother label `{}`", s.label())));
        }
        evals.push((s.clone(), prepared.evaluate(&s.smoother)?));
    }
    if let Some(refine) = &config.refine {
        let base = evals
            .iter()
            .find(|(s, _)| s.label() == refine.from)
            .ok_or_else(|| Error::Config(format!("refine.from `{}` is not a smoother label", refine.from)))?;
        let (family, theta) = family_of(&base.0.smoother)?;
        let found = local_search(&theta, refine.step, family, &prepared)?;
        let label = refine
            .label
            .clone()
            .unwrap_or_else(|| format!("{} +-{}", refine.from, refine.step));
        let spec = family.spec(&found.theta)?;
        let eval = prepared.evaluate(&spec)?;
        evals.push((NamedSmoother { label: Some(label), smoother: spec }, eval));
    }
    if let Some(grid) = &config.grid_search {
        let found = coordinate_grid_search(&grid.bounds, grid.step, grid.restarts, grid.seed, grid.family, &prepared)?;
        let spec = grid.family.spec(&found.theta)?;
        let label = grid.label.clone().unwrap_or_else(|| "grid search".into());
        let eval = prepared.evaluate(&spec)?;
        evals.push((NamedSmoother { label: Some(label), smoother: spec }, eval));
    }
    let references = if config.references.is_empty() {
        vec![evals[0].0.label()]
    } else {
        config.references.clone()
    };
    let rows = build_rows(&evals, &references)?;
    let report = BenchReport {
        rows,
        references,
        config: config.clone(),
    };

    create_out(out)?;
    fs::write(out.join("bench.txt"), report.table())?;
    write_bench_csv(&report, &out.join("bench.csv"))?;
    write_json(&out.join("bench.json"), &report)?;
    let mut samples = csv::Writer::from_path(out.join("samples.csv"))?;
    samples.write_record(["label", "sample_id", "rate", "diverged"])?;
    for (named, eval) in &evals {
        let label = named.label();
        for s in &eval.samples {
            samples.write_record([label.clone(), s.sample_id.to_string(), s.rate.to_string(), s.diverged.to_string()])?;
        }
        write_history(&out.join(format!("history_{}.csv", slug(&label))), eval)?;
    }
    samples.flush()?;
    Ok(report)
}

fn family_of(spec: &SmootherSpec) -> Result<(SmootherFamily, Vec<f64>)> {
    match spec {
        SmootherSpec::Jacobi { omega } => Ok((SmootherFamily::Jacobi, vec![*omega])),
        SmootherSpec::GaussSeidelLex { omega } => Ok((SmootherFamily::Sor, vec![*omega])),
        SmootherSpec::FourColorSor { omegas } => Ok((SmootherFamily::FourColor, omegas.to_vec())),
        other => Err(Error::InvalidSmoother(format!("{} has no parameters to refine", other.label()))),
    }
}

fn write_bench_csv(report: &BenchReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "label".to_string(),
        "parameters".into(),
        "rate".into(),
        "mean".into(),
        "std".into(),
        "diverged".into(),
        "win_percentage".into(),
    ];
    header.extend(report.references.iter().map(|r| format!("improvement[{r}]")));
    w.write_record(&header)?;
    for row in &report.rows {
        let params: Vec<String> = row.parameters.iter().map(|v| v.to_string()).collect();
        let mut rec = vec![
            row.label.clone(),
            params.join(" "),
            row.rate.to_string(),
            row.mean.to_string(),
            row.std.to_string(),
            row.diverged.to_string(),
            row.win_percentage.map_or(String::new(), |v| v.to_string()),
        ];
        rec.extend(
            report
                .references
                .iter()
                .map(|r| row.improvement.get(r).map_or(String::new(), |v| v.to_string())),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `sample_id,cycle,residual_norm,error_norm`, cycle 0 being the start.
pub fn write_history(path: &Path, eval: &RateEvaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "cycle", "residual_norm", "error_norm"])?;
    for s in &eval.samples {
        for (k, r) in s.residual_norms.iter().enumerate() {
            let e = s.error_norms.get(k).map_or(String::new(), |v| v.to_string());
            w.write_record([s.sample_id.to_string(), k.to_string(), r.to_string(), e])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Recomputes every rate, mean, std, win percentage and improvement of
/// `bench.csv` from `samples.csv` and returns the largest relative
/// discrepancy.
pub fn audit_bench(dir: &Path) -> Result<f64> {
    let mut per_label: Vec<(String, Vec<f64>)> = Vec::new();
    let mut samples = csv::Reader::from_path(dir.join("samples.csv"))?;
    for rec in samples.records() {
        let rec = rec?;
        let label = rec[0].to_string();
        let rate: f64 = rec[2].parse().map_err(|_| Error::Config(format!("bad rate `{}`", &rec[2])))?;
        match per_label.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(rate),
            None => per_label.push((label, vec![rate])),
        }
    }
    let rates_of = |label: &str| -> Result<&Vec<f64>> {
        per_label
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config(format!("label `{label}` missing from samples.csv")))
    };
    let mut table = csv::Reader::from_path(dir.join("bench.csv"))?;
    let header = table.headers()?.clone();
    let references: Vec<String> = header
        .iter()
        .skip(7)
        .map(|h| h.trim_start_matches("improvement[").trim_end_matches(']').to_string())
        .collect();
    let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number `{s}`"))) };
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst: f64 = 0.0;
    for rec in table.records() {
        let rec = rec?;
        let rates = rates_of(&rec[0])?;
        let s = stats(rates)?;
        worst = worst
            .max(rel(s.geometric_mean, parse(&rec[2])?))
            .max(rel(s.mean, parse(&rec[3])?))
            .max((s.std - parse(&rec[4])?).abs());
        if let Some(first) = references.first() {
            if !rec[6].is_empty() {
                worst = worst.max((win_percentage(rates, rates_of(first)?)? - parse(&rec[6])?).abs() / 100.0);
            }
        }
        for (j, r) in references.iter().enumerate() {
            let cell = &rec[7 + j];
            if cell.is_empty() {
                continue;
            }
            let expected = improvement(s.geometric_mean, geometric_mean(rates_of(r)?)?)?;
            worst = worst.max(rel(expected, parse(cell)?));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTableRow {
    pub omega: f64,
    pub rate: f64,
    pub diverged: usize,
    /// Geometric mean over the isotropic samples, when the ensemble mixes.
    pub rate_isotropic: Option<f64>,
    pub rate_anisotropic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepTableRow>,
    pub best: usize,
    pub best_isotropic: Option<usize>,
    pub best_anisotropic: Option<usize>,
}

impl SweepReport {
    pub fn best_row(&self) -> &SweepTableRow {
        &self.rows[self.best]
    }

    pub fn table(&self) -> String {
        let split = self.rows.iter().any(|r| r.rate_isotropic.is_some());
        let mut s = String::new();
        let _ = write!(s, "  {:>7} {:>9} {:>5}", "omega", "rate", "div");
        if split {
            let _ = write!(s, " {:>9} {:>9}", "iso", "aniso");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
        for (i, r) in self.rows.iter().enumerate() {
            let mark = if i == self.best { '*' } else { ' ' };
            let _ = write!(s, "{mark} {:>7.3} {:>9.4} {:>5}", r.omega, r.rate, r.diverged);
            if split {
                let _ = write!(s, " {:>9} {:>9}", opt(r.rate_isotropic), opt(r.rate_anisotropic));
            }
            s.push('\n');
        }
        s
    }
}

fn argmin(values: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    values
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Builds the sweep table from a prepared protocol. Mixed ensembles get
/// separate isotropic and anisotropic columns.
pub fn sweep_table(prepared: &PreparedProtocol, sweep: &SweepSection) -> Result<SweepReport> {
    let rows = omega_sweep(sweep.lo, sweep.hi, sweep.step, sweep.family, prepared)?;
    let best_omega = sweep_minimum(&rows).ok_or(Error::Empty)?.omega;
    let iso: Vec<bool> = prepared.aspects().iter().map(|a| *a == 1.0).collect();
    let mixed = iso.iter().any(|b| *b) && iso.iter().any(|b| !*b);
    let subset = |rates: &[f64], want: bool| -> Option<f64> {
        let v: Vec<f64> = rates.iter().zip(&iso).filter(|(_, i)| **i == want).map(|(r, _)| *r).collect();
        geometric_mean(&v).ok()
    };
    let table: Vec<SweepTableRow> = rows
        .iter()
        .map(|r| SweepTableRow {
            omega: r.omega,
            rate: r.rate,
            diverged: r.diverged_samples,
            rate_isotropic: mixed.then(|| subset(&r.sample_rates, true)).flatten(),
            rate_anisotropic: mixed.then(|| subset(&r.sample_rates, false)).flatten(),
        })
        .collect();
    let best = table.iter().position(|r| r.omega == best_omega).expect("minimum is a row");
    Ok(SweepReport {
        best_isotropic: argmin(table.iter().map(|r| r.rate_isotropic)),
        best_anisotropic: argmin(table.iter().map(|r| r.rate_anisotropic)),
        rows: table,
        best,
    })
}

/// Writes `sweep.txt`, `sweep.csv` and `sweep.json`.
pub fn run_sweep(config: &ExperimentConfig, out: &Path, execution: Execution) -> Result<SweepReport> {
    let sweep = require(&config.sweep, "sweep")?;
    let prepared = config.rate_protocol(execution)?.prepare()?;
    let report = sweep_table(&prepared, sweep)?;
    create_out(out)?;
    fs::write(out.join("sweep.txt"), report.table())?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["omega", "rate", "diverged", "rate_isotropic", "rate_anisotropic", "best"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for (i, r) in report.rows.iter().enumerate() {
        w.write_record([
            r.omega.to_string(),
            r.rate.to_string(),
            r.diverged.to_string(),
            opt(r.rate_isotropic),
            opt(r.rate_anisotropic),
            (i == report.best).to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}

/// Per-sample spectral data for one smoother.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSample {
    pub record: SpectrumRecord,
    pub max_diagonal: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub rho: Stats,
    /// Keyed by `alpha`.
    pub gelfand: BTreeMap<u32, Stats>,
    pub rho_above_one: usize,
    /// Samples where some Gelfand value fell below `rho` (should be 0).
    pub bound_violations: usize,
    pub rate: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub samples: Vec<SpectrumSample>,
    pub summary: SpectrumSummary,
    pub compare: Option<Vec<SpectrumSample>>,
    pub compare_summary: Option<SpectrumSummary>,
    /// Percentage of samples where the main smoother has strictly smaller
    /// `rho` than the comparison one.
    pub win_percentage_rho: Option<f64>,
    pub win_percentage_gelfand: Option<BTreeMap<u32, f64>>,
}

impl SpectrumReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, sum: &SpectrumSummary| {
            let _ = writeln!(
                s,
                "{name}: rho {:.4} +- {:.4} (n={}, rho>1: {})",
                sum.rho.mean, sum.rho.std, sum.rho.count, sum.rho_above_one
            );
            for (a, g) in &sum.gelfand {
                let _ = writeln!(s, "{name}: gelfand[{a}] {:.4} +- {:.4}", g.mean, g.std);
            }
            if let Some(r) = &sum.rate {
                let _ = writeln!(s, "{name}: measured rate {:.4} (geometric)", r.geometric_mean);
            }
        };
        line(&mut s, "smoother", &self.summary);
        if let Some(c) = &self.compare_summary {
            line(&mut s, "compare", c);
        }
        if let Some(w) = self.win_percentage_rho {
            let _ = writeln!(s, "win% rho {w:.2}");
        }
        if let Some(ws) = &self.win_percentage_gelfand {
            for (a, w) in ws {
                let _ = writeln!(s, "win% gelfand[{a}] {w:.2}");
            }
        }
        s
    }
}

fn spectrum_samples(
    config: &ExperimentConfig,
    section: &SpectrumSection,
    smoother: &SmootherSpec,
    execution: Execution,
) -> Result<Vec<SpectrumSample>> {
    smoother.validate()?;
    map_indexed(section.samples, execution, |i| -> Result<SpectrumSample> {
        let a = config.ensemble.operator(config.seed, i as u64, section.delta)?;
        let p = build_prolongation(&a, section.prolongation)?;
        let t = CoarseCorrection::new(&a, &p)?.propagator(&a, smoother, section.nu)?;
        let est = spectral_radius(&t.matrix, section.tol);
        let gelfand = section
            .alphas
            .iter()
            .map(|al| (*al, gelfand_estimate(&t.matrix, *al)))
            .collect();
        let rate_measured = if section.measure_rate {
            let h = Hierarchy::two_level(a.clone(), section.prolongation)?;
            let spec = CycleSpec {
                kind: CycleKind::TwoGrid,
                pre: section.nu,
                post: 0,
                smoother: smoother.clone(),
                prolongation: section.prolongation,
                coarsest_m: MIN_COARSE,
            };
            let mut rng = sample_rng(config.seed, i as u64 | 1 << 63);
            let u0: Vec<f64> = (0..a.n()).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let zeros = vec![0.0; a.n()];
            let report = Solver::new(&h, &spec)?.solve(&zeros, &u0, section.window.last, 0.0, Some(&zeros))?;
            rate_from_norms(&report.residual_norms, section.window).ok().map(|m| m.rate)
        } else {
            None
        };
        let max_diagonal = a.diagonal().into_iter().fold(f64::NEG_INFINITY, f64::max);
        Ok(SpectrumSample {
            record: SpectrumRecord {
                sample_id: i,
                rho: est.rho,
                gelfand,
                rate_measured,
            },
            max_diagonal,
            converged: est.converged,
        })
    })
    .into_iter()
    .collect()
}

fn summarize(samples: &[SpectrumSample], alphas: &[u32]) -> Result<SpectrumSummary> {
    let rhos: Vec<f64> = samples.iter().map(|s| s.record.rho).collect();
    let (mean, std) = mean_std(&rhos)?;
    let rho = Stats {
        mean,
        std,
        geometric_mean: geometric_mean(&rhos).unwrap_or(f64::NAN),
        count: rhos.len(),
    };
    let mut gelfand = BTreeMap::new();
    for a in alphas {
        let g: Vec<f64> = samples.iter().map(|s| s.record.gelfand[a]).collect();
        let (mean, std) = mean_std(&g)?;
        gelfand.insert(
            *a,
            Stats {
                mean,
                std,
                geometric_mean: geometric_mean(&g).unwrap_or(f64::NAN),
                count: g.len(),
            },
        );
    }
    let rates: Vec<f64> = samples.iter().filter_map(|s| s.record.rate_measured).collect();
    Ok(SpectrumSummary {
        rho,
        gelfand,
        rho_above_one: rhos.iter().filter(|r| **r > 1.0).count(),
        bound_violations: samples
            .iter()
            .filter(|s| s.record.gelfand.values().any(|g| *g < s.record.rho * (1.0 - 1e-9)))
            .count(),
        rate: if rates.is_empty() { None } else { stats(&rates).ok() },
    })
}

/// Computes the spectrum report without writing anything.
pub fn spectrum_report(config: &ExperimentConfig, execution: Execution) -> Result<SpectrumReport> {
    let section = require(&config.spectrum, "spectrum")?;
    if section.samples == 0 {
        return Err(Error::Config("spectrum.samples must be at least 1".into()));
    }
    if section.alphas.is_empty() || section.alphas.contains(&0) {
        return Err(Error::Config("spectrum.alphas must be positive and non-empty".into()));
    }
    let samples = spectrum_samples(config, section, &section.smoother, execution)?;
    let summary = summarize(&samples, &section.alphas)?;
    let (compare, compare_summary, win_rho, win_gelfand) = match &section.compare {
        Some(spec) => {
            let other = spectrum_samples(config, section, spec, execution)?;
            let sum = summarize(&other, &section.alphas)?;
            let mine: Vec<f64> = samples.iter().map(|s| s.record.rho).collect();
            let theirs: Vec<f64> = other.iter().map(|s| s.record.rho).collect();
            let win = win_percentage(&mine, &theirs)?;
            let mut wg = BTreeMap::new();
            for a in &section.alphas {
                let g1: Vec<f64> = samples.iter().map(|s| s.record.gelfand[a]).collect();
                let g2: Vec<f64> = other.iter().map(|s| s.record.gelfand[a]).collect();
                wg.insert(*a, win_percentage(&g1, &g2)?);
            }
            (Some(other), Some(sum), Some(win), Some(wg))
        }
        None => (None, None, None, None),
    };
    Ok(SpectrumReport {
        samples,
        summary,
        compare,
        compare_summary,
        win_percentage_rho: win_rho,
        win_percentage_gelfand: win_gelfand,
    })
}

/// Writes `spectrum.json` (one record per sample), `spectrum.csv`,
/// `histogram.csv`, `density.csv`, `summary.json` and `spectrum.txt`. With
/// a comparison smoother the histogram holds the per-sample differences
/// `rho_compare - rho`; otherwise it holds `rho`.
pub fn run_spectrum(config: &ExperimentConfig, out: &Path, execution: Execution) -> Result<SpectrumReport> {
    let section = require(&config.spectrum, "spectrum")?;
    let report = spectrum_report(config, execution)?;
    create_out(out)?;
    let records: Vec<&SpectrumRecord> = report.samples.iter().map(|s| &s.record).collect();
    write_json(&out.join("spectrum.json"), &records)?;

    let mut w = csv::Writer::from_path(out.join("spectrum.csv"))?;
    let mut header = vec!["sample_id".to_string(), "rho".into()];
    header.extend(section.alphas.iter().map(|a| format!("gelfand_{a}")));
    header.extend(["rate_measured".into(), "max_diagonal".into(), "rho_above_one".into()]);
    if report.compare.is_some() {
        header.push("rho_compare".into());
        header.extend(section.alphas.iter().map(|a| format!("gelfand_{a}_compare")));
    }
    w.write_record(&header)?;
    for (i, s) in report.samples.iter().enumerate() {
        let mut rec = vec![s.record.sample_id.to_string(), s.record.rho.to_string()];
        rec.extend(section.alphas.iter().map(|a| s.record.gelfand[a].to_string()));
        rec.push(s.record.rate_measured.map_or(String::new(), |v| v.to_string()));
        rec.push(s.max_diagonal.to_string());
        rec.push((s.record.rho > 1.0).to_string());
        if let Some(c) = &report.compare {
            rec.push(c[i].record.rho.to_string());
            rec.extend(section.alphas.iter().map(|a| c[i].record.gelfand[a].to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let rhos: Vec<f64> = report.samples.iter().map(|s| s.record.rho).collect();
    let (hist_values, ys): (Vec<f64>, Vec<f64>) = match &report.compare {
        Some(c) => (
            c.iter().zip(&rhos).map(|(c, r)| c.record.rho - r).collect(),
            c.iter().map(|c| c.record.rho).collect(),
        ),
        None => (
            rhos.clone(),
            report.samples.iter().map(|s| s.record.gelfand[&section.alphas[0]]).collect(),
        ),
    };
    let (lo, hi) = value_range(&hist_values);
    let mut h = csv::Writer::from_path(out.join("histogram.csv"))?;
    h.write_record(["bin_lo", "bin_hi", "count"])?;
    for (a, b, c) in histogram(&hist_values, lo, hi, section.bins) {
        h.write_record([a.to_string(), b.to_string(), c.to_string()])?;
    }
    h.flush()?;

    let (xlo, xhi) = value_range(&rhos);
    let (ylo, yhi) = value_range(&ys);
    let bins = section.bins.max(1);
    let mut grid = vec![0usize; bins * bins];
    let cell = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    for (x, y) in rhos.iter().zip(&ys) {
        grid[cell(*x, xlo, xhi) * bins + cell(*y, ylo, yhi)] += 1;
    }
    let mut d = csv::Writer::from_path(out.join("density.csv"))?;
    d.write_record(["x_lo", "x_hi", "y_lo", "y_hi", "count"])?;
    let (wx, wy) = ((xhi - xlo) / bins as f64, (yhi - ylo) / bins as f64);
    for i in 0..bins {
        for j in 0..bins {
            d.write_record([
                (xlo + wx * i as f64).to_string(),
                (xlo + wx * (i + 1) as f64).to_string(),
                (ylo + wy * j as f64).to_string(),
                (ylo + wy * (j + 1) as f64).to_string(),
                grid[i * bins + j].to_string(),
            ])?;
        }
    }
    d.flush()?;

    let summary = serde_json::json!({
        "summary": report.summary,
        "compare_summary": report.compare_summary,
        "win_percentage_rho": report.win_percentage_rho,
        "win_percentage_gelfand": report.win_percentage_gelfand,
        "config": config,
    });
    write_json(&out.join("summary.json"), &summary)?;
    fs::write(out.join("spectrum.txt"), report.table())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    /// Local-search refinement of the learned parameters on the rate
    /// protocol, when one is configured.
    pub refined: Option<Vec<f64>>,
    pub refined_rate: Option<f64>,
    pub learned_rate: Option<f64>,
}

/// Trains, then refines with local search when both `protocol` and `refine`
/// are present. Writes `trace.csv` and `theta.json` (with the full config).
pub fn run_train(config: &ExperimentConfig, out: &Path, execution: Execution) -> Result<TrainReport> {
    let train_config = config.train_config(execution)?;
    let outcome = train(&train_config)?;
    let (mut refined, mut refined_rate, mut learned_rate) = (None, None, None);
    if let (Some(_), Some(refine)) = (&config.protocol, &config.refine) {
        let prepared = config.rate_protocol(execution)?.prepare()?;
        learned_rate = Some(prepared.rate(train_config.family, outcome.theta.as_slice())?);
        let found = local_search(outcome.theta.as_slice(), refine.step, train_config.family, &prepared)?;
        refined = Some(found.theta);
        refined_rate = Some(found.rate);
    }
    let report = TrainReport {
        outcome,
        refined,
        refined_rate,
        learned_rate,
    };
    create_out(out)?;
    report.outcome.trace.write_csv(File::create(out.join("trace.csv"))?)?;
    let theta = serde_json::json!({
        "theta": report.outcome.theta,
        "best_epoch": report.outcome.best_epoch,
        "best_val_loss": report.outcome.best_val_loss,
        "final_theta": report.outcome.final_theta,
        "converged": report.outcome.converged,
        "learned_rate": report.learned_rate,
        "refined": report.refined,
        "refined_rate": report.refined_rate,
        "config": config,
        "train": train_config,
    });
    write_json(&out.join("theta.json"), &theta)?;
    Ok(report)
}

/// Writes `field_<i>.csv` and `operator_<i>.coo` for each requested sample.
/// Returns the written paths.
pub fn run_generate(config: &ExperimentConfig, out: &Path) -> Result<Vec<std::path::PathBuf>> {
    let default = GenerateSection {
        count: 1,
        first: 0,
        delta: 0.0,
    };
    let g = config.generate.as_ref().unwrap_or(&default);
    create_out(out)?;
    let mut written = Vec::new();
    for index in g.first..g.first + g.count as u64 {
        let field = config.ensemble.field(config.seed, index)?;
        let a = crate::problem::assemble(&field, g.delta)?;
        let fp = out.join(format!("field_{index}.csv"));
        field.save_csv(&fp)?;
        let op = out.join(format!("operator_{index}.coo"));
        a.write_coo(BufWriter::new(File::create(&op)?))?;
        written.extend([fp, op]);
    }
    Ok(written)
}
