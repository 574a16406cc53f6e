//! Learning relaxation parameters.
//!
//! The parameters are `k` free scalars: one `omega` for Jacobi or SOR, four
//! per-color coefficients for four-color SOR. [`train`] runs gradient descent
//! on the batched two-grid loss `mean ||T(theta)^alpha||_F^2`; [`local_search`]
//! and [`coordinate_grid_search`] refine on measured multigrid rates, and
//! [`omega_sweep`] tabulates rates over a single shared coefficient.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::geometric_mean;
use crate::cycles::{CycleKind, CycleSpec, Hierarchy, Solver};
use crate::error::{Error, Result};
use crate::par::{map_indexed, map_slice, Execution};
use crate::problem::{sample_rng, EnsembleSpec, StencilOperator};
use crate::smoothers::SmootherSpec;
use crate::spectral::{gelfand_loss, rate_from_norms, CoarseCorrection, ProbeEstimator, RateWindow};
use crate::transfer::{build_prolongation, ProlongationKind, MIN_COARSE};

pub const CLIP_MIN: f64 = 0.05;
pub const CLIP_MAX: f64 = 2.5;

/// Relaxation parameters, kept finite and inside `[CLIP_MIN, CLIP_MAX]` by
/// the optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSmoother(format!("non-finite parameter in {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize, value: f64) -> Self {
        Self(vec![value; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn clipped(mut self) -> Self {
        self.0.iter_mut().for_each(|v| *v = v.clamp(CLIP_MIN, CLIP_MAX));
        self
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Which smoother the parameters drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherFamily {
    Jacobi,
    Sor,
    #[default]
    FourColor,
}

impl SmootherFamily {
    pub fn dim(self) -> usize {
        match self {
            SmootherFamily::FourColor => 4,
            _ => 1,
        }
    }

    pub fn spec(self, theta: &[f64]) -> Result<SmootherSpec> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        let spec = match self {
            SmootherFamily::Jacobi => SmootherSpec::Jacobi { omega: theta[0] },
            SmootherFamily::Sor => SmootherSpec::GaussSeidelLex { omega: theta[0] },
            SmootherFamily::FourColor => SmootherSpec::four_color([theta[0], theta[1], theta[2], theta[3]]),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The same coefficient everywhere.
    pub fn common(self, omega: f64) -> SmootherSpec {
        self.spec(&vec![omega; self.dim()]).expect("dimension matches")
    }
}

/// How `||T^alpha||_F^2` is evaluated per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossEstimator {
    /// Dense `T`; needs `m <= 32`.
    Exact,
    /// Matrix-free estimate from a fixed block of random sign probes.
    Probe { probes: usize },
}

impl LossEstimator {
    /// Dense for `m <= 16`, 16 probes above.
    pub fn auto(m: usize) -> Self {
        if m <= 16 {
            LossEstimator::Exact
        } else {
            LossEstimator::Probe { probes: 16 }
        }
    }
}

/// One training sample with its smoother-independent setup done.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    operator: StencilOperator,
    eval: SampleEval,
}

#[derive(Debug, Clone)]
enum SampleEval {
    Exact(CoarseCorrection),
    Probe(ProbeEstimator),
}

impl TrainingSample {
    pub fn new(
        operator: StencilOperator,
        prolongation: ProlongationKind,
        estimator: LossEstimator,
        probe_seed: u64,
    ) -> Result<Self> {
        let eval = match estimator {
            LossEstimator::Exact => {
                let p = build_prolongation(&operator, prolongation)?;
                SampleEval::Exact(CoarseCorrection::new(&operator, &p)?)
            }
            LossEstimator::Probe { probes } => SampleEval::Probe(ProbeEstimator::new(
                operator.clone(),
                prolongation,
                probes,
                probe_seed,
            )?),
        };
        Ok(Self { operator, eval })
    }

    pub fn operator(&self) -> &StencilOperator {
        &self.operator
    }

    /// `||T^alpha||_F^2` (exact or estimated), `+inf` on overflow.
    pub fn squared_loss(&self, smoother: &SmootherSpec, nu: usize, alpha: u32) -> Result<f64> {
        match &self.eval {
            SampleEval::Exact(c) => {
                let t = c.propagator(&self.operator, smoother, nu)?;
                Ok(gelfand_loss(&t.matrix, alpha).powi(2))
            }
            SampleEval::Probe(p) => p.squared_loss(smoother, nu, alpha),
        }
    }
}

/// Search direction of [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Descent {
    /// Negative gradient.
    #[default]
    Gradient,
    /// Negative gradient scaled by a BFGS inverse-Hessian estimate.
    Bfgs,
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
fn default_fd_step() -> f64 {
    1e-4
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub family: SmootherFamily,
    /// Pool size, split into training and validation samples.
    pub samples: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Draw a fresh pool every this many epochs; `None` keeps one pool.
    #[serde(default)]
    pub regenerate_every: Option<usize>,
    pub alpha: u32,
    pub delta: f64,
    pub nu: usize,
    #[serde(default)]
    pub prolongation: ProlongationKind,
    #[serde(default = "default_lr_base")]
    pub lr_base: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    pub max_epochs: usize,
    /// Stop once an accepted step moves every coordinate by less than this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub estimator: Option<LossEstimator>,
    pub seed: u64,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub descent: Descent,
    #[serde(default)]
    pub execution: Execution,
}

impl TrainConfig {
    /// Four-color training on log-normal fields with the given grid, pool,
    /// power and shift; everything else at its default.
    pub fn four_color(m: usize, samples: usize, alpha: u32, delta: f64, seed: u64) -> Self {
        Self {
            ensemble: EnsembleSpec::lognormal(m),
            family: SmootherFamily::FourColor,
            samples,
            train_fraction: default_train_fraction(),
            regenerate_every: None,
            alpha,
            delta,
            nu: 1,
            prolongation: ProlongationKind::Blackbox,
            lr_base: default_lr_base(),
            lr_decay: default_lr_decay(),
            max_epochs: 100,
            tol: default_tol(),
            fd_step: default_fd_step(),
            estimator: None,
            seed,
            theta0: None,
            descent: Descent::Gradient,
            execution: Execution::default(),
        }
    }

    pub fn train_count(&self) -> usize {
        ((self.samples as f64 * self.train_fraction).round() as usize).clamp(1, self.samples.max(1))
    }

    pub fn estimator(&self) -> LossEstimator {
        self.estimator.unwrap_or_else(|| LossEstimator::auto(self.ensemble.m))
    }

    pub fn theta0(&self) -> Result<ParameterVector> {
        match &self.theta0 {
            Some(v) => {
                if v.len() != self.family.dim() {
                    return Err(Error::Dimension {
                        expected: self.family.dim(),
                        got: v.len(),
                    });
                }
                Ok(ParameterVector::new(v.clone())?.clipped())
            }
            None => Ok(ParameterVector::uniform(self.family.dim(), 1.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        if self.regenerate_every == Some(0) {
            return bad("regenerate_every must be at least 1".into());
        }
        if self.alpha == 0 {
            return bad("alpha must be at least 1".into());
        }
        if !(self.delta > 0.0) {
            return bad(format!("training needs delta > 0, got {}", self.delta));
        }
        if self.nu == 0 {
            return bad("nu must be at least 1".into());
        }
        if !(self.lr_base > 0.0 && self.lr_decay > 0.0 && self.fd_step > 0.0) {
            return bad("lr_base, lr_decay and fd_step must be positive".into());
        }
        if let LossEstimator::Probe { probes: 0 } = self.estimator() {
            return bad("probe count must be positive".into());
        }
        self.theta0().map(|_| ())
    }
}

/// A set of prepared samples.
#[derive(Debug, Clone)]
pub struct Batch {
    samples: Vec<TrainingSample>,
}

impl Batch {
    pub fn new(samples: Vec<TrainingSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self { samples })
    }

    /// Samples `first..first + count` of the configured ensemble.
    pub fn generate(config: &TrainConfig, first: u64, count: usize) -> Result<Self> {
        let estimator = config.estimator();
        let samples = map_indexed(count, config.execution, |i| {
            let index = first + i as u64;
            let a = config.ensemble.operator(config.seed, index, config.delta)?;
            TrainingSample::new(a, config.prolongation, estimator, config.seed ^ index.rotate_left(17))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    /// Per-sample `||T^alpha||_F^2` in sample order.
    pub fn sample_losses(&self, theta: &[f64], config: &TrainConfig) -> Result<Vec<f64>> {
        let spec = config.family.spec(theta)?;
        map_slice(&self.samples, config.execution, |s| s.squared_loss(&spec, config.nu, config.alpha))
            .into_iter()
            .collect()
    }
}

/// Mean over the batch of `||T(theta)^alpha||_F^2`.
pub fn batch_loss(theta: &[f64], batch: &Batch, config: &TrainConfig) -> Result<f64> {
    let losses = batch.sample_losses(theta, config)?;
    if losses.iter().all(|l| !l.is_finite()) {
        return Err(Error::AllDiverged);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Objective minimised by [`train`]: `ln(batch_loss) / (2 alpha)`, which has
/// the same minimiser as the batch loss and is of order `ln rho`.
fn objective(theta: &[f64], batch: &Batch, config: &TrainConfig) -> Result<f64> {
    match batch_loss(theta, batch, config) {
        Ok(l) => Ok(l.ln() / (2.0 * config.alpha as f64)),
        Err(Error::AllDiverged) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    /// Coordinates where a probe point was non-finite and a one-sided
    /// difference was used instead.
    pub one_sided: Vec<bool>,
}

/// Central finite differences with step `h`, falling back to a one-sided
/// difference when one probe point is non-finite (that coordinate becomes 0
/// when both are).
pub fn finite_difference_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Gradient>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut values = Vec::with_capacity(theta.len());
    let mut one_sided = Vec::with_capacity(theta.len());
    let mut center: Option<f64> = None;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe)?;
        probe[i] = theta[i] - h;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        let (g, flagged) = match (plus.is_finite(), minus.is_finite()) {
            (true, true) => ((plus - minus) / (2.0 * h), false),
            (p_ok, m_ok) => {
                let c = match center {
                    Some(c) => c,
                    None => *center.insert(f(theta)?),
                };
                if p_ok && c.is_finite() {
                    ((plus - c) / h, true)
                } else if m_ok && c.is_finite() {
                    ((c - minus) / h, true)
                } else {
                    (0.0, true)
                }
            }
        };
        values.push(g);
        one_sided.push(flagged);
    }
    Ok(Gradient { values, one_sided })
}

/// Gradient of the normalised training objective at `theta`.
pub fn gradient(theta: &[f64], batch: &Batch, config: &TrainConfig) -> Result<Gradient> {
    finite_difference_gradient(|t| objective(t, batch, config), theta, config.fd_step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub theta: Vec<f64>,
}

/// Per-epoch losses and parameter snapshots. Row 0 is the starting point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    /// CSV with columns `epoch,train_loss,val_loss,theta_1..theta_k`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let k = self.rows.first().map_or(0, |r| r.theta.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into()];
        header.extend((1..=k).map(|i| format!("theta_{i}")));
        out.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.epoch.to_string(), row.train_loss.to_string(), row.val_loss.to_string()];
            rec.extend(row.theta.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub theta: ParameterVector,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters at the last epoch.
    pub final_theta: ParameterVector,
    /// The step criterion was met before `max_epochs`.
    pub converged: bool,
    pub trace: TrainTrace,
}

/// Descent with Armijo backtracking from the scheduled step
/// `lr_base * lr_decay^epoch`, iterates clipped to the parameter box.
/// Training ends early once no step along the (plain) gradient decreases
/// the objective or an accepted step moves every coordinate less than `tol`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let theta0 = config.theta0()?;
    let train_n = config.train_count();
    let val_n = config.samples - train_n;
    let pool = |generation: u64| -> Result<(Batch, Option<Batch>)> {
        let first = generation * config.samples as u64;
        let train = Batch::generate(config, first, train_n)?;
        let val = if val_n > 0 {
            Some(Batch::generate(config, first + train_n as u64, val_n)?)
        } else {
            None
        };
        Ok((train, val))
    };
    let (mut train_batch, mut val_batch) = pool(0)?;
    let val_loss = |theta: &[f64], train: &Batch, val: &Option<Batch>| -> Result<f64> {
        let batch = val.as_ref().unwrap_or(train);
        match batch_loss(theta, batch, config) {
            Err(Error::AllDiverged) => Ok(f64::INFINITY),
            other => other,
        }
    };

    let mut theta = theta0.clone();
    let mut trace = TrainTrace::default();
    let start_train = batch_loss(theta.as_slice(), &train_batch, config)?;
    let start_val = val_loss(theta.as_slice(), &train_batch, &val_batch)?;
    trace.rows.push(TraceRow {
        epoch: 0,
        train_loss: start_train,
        val_loss: start_val,
        theta: theta.as_slice().to_vec(),
    });
    let (mut best, mut best_epoch, mut best_val) = (theta.clone(), 0, start_val);
    let mut converged = false;
    let mut generation = 0;

    let k = theta.len();
    let mut inverse_hessian: Option<Vec<f64>> = None;
    let mut last: Option<(Vec<f64>, Vec<f64>)> = None;
    for epoch in 1..=config.max_epochs {
        if let Some(every) = config.regenerate_every {
            if epoch > 1 && (epoch - 1) % every == 0 {
                generation += 1;
                (train_batch, val_batch) = pool(generation)?;
                inverse_hessian = None;
                last = None;
            }
        }
        let j0 = objective(theta.as_slice(), &train_batch, config)?;
        if !j0.is_finite() {
            return Err(Error::AllDiverged);
        }
        let grad = gradient(theta.as_slice(), &train_batch, config)?.values;
        if config.descent == Descent::Bfgs {
            if let Some((prev_theta, prev_grad)) = last.take() {
                bfgs_update(&mut inverse_hessian, &prev_theta, theta.as_slice(), &prev_grad, &grad);
            }
            last = Some((theta.as_slice().to_vec(), grad.clone()));
        }
        let direction: Vec<f64> = match &inverse_hessian {
            Some(h) => (0..k).map(|i| -(0..k).map(|j| h[i * k + j] * grad[j]).sum::<f64>()).collect(),
            None => grad.iter().map(|g| -g).collect(),
        };
        let mut step = config.lr_base * config.lr_decay.powi(epoch as i32 - 1);
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = theta
                .as_slice()
                .iter()
                .zip(&direction)
                .map(|(t, d)| t + step * d)
                .collect();
            let cand = ParameterVector::new(cand)?.clipped();
            let decrease: f64 = theta
                .as_slice()
                .iter()
                .zip(cand.as_slice())
                .zip(&grad)
                .map(|((t, c), g)| (t - c) * g)
                .sum();
            let j1 = objective(cand.as_slice(), &train_batch, config)?;
            if j1.is_finite() && decrease > 0.0 && j1 <= j0 - 1e-4 * decrease {
                accepted = Some(cand);
                break;
            }
            step *= 0.5;
        }
        let Some(next) = accepted else {
            if inverse_hessian.take().is_some() {
                // retry from the plain gradient before giving up
                last = None;
                continue;
            }
            converged = true;
            break;
        };
        let moved = next.max_abs_diff(&theta);
        theta = next;
        let train_loss = batch_loss(theta.as_slice(), &train_batch, config)?;
        let vl = val_loss(theta.as_slice(), &train_batch, &val_batch)?;
        trace.rows.push(TraceRow {
            epoch,
            train_loss,
            val_loss: vl,
            theta: theta.as_slice().to_vec(),
        });
        if vl < best_val {
            best = theta.clone();
            best_epoch = epoch;
            best_val = vl;
        }
        if moved < config.tol {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        theta: best,
        best_epoch,
        best_val_loss: best_val,
        final_theta: theta,
        converged,
        trace,
    })
}

/// Inverse BFGS update; skipped when the curvature condition fails. The
/// first update starts from the scaled identity.
fn bfgs_update(h: &mut Option<Vec<f64>>, x0: &[f64], x1: &[f64], g0: &[f64], g1: &[f64]) {
    let k = x0.len();
    let s: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let y: Vec<f64> = g1.iter().zip(g0).map(|(a, b)| a - b).collect();
    let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    if !(sy > 1e-12 * yy.sqrt() * s.iter().map(|v| v * v).sum::<f64>().sqrt()) {
        return;
    }
    let h = h.get_or_insert_with(|| {
        let mut id = vec![0.0; k * k];
        (0..k).for_each(|i| id[i * k + i] = sy / yy);
        id
    });
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..k).map(|i| (0..k).map(|j| h[i * k + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..k {
        for j in 0..k {
            h[i * k + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

fn default_window() -> RateWindow {
    RateWindow::default()
}
fn default_coarsest() -> usize {
    MIN_COARSE
}

/// A fixed, seeded multigrid test ensemble on which smoothers are scored by
/// measured convergence rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProtocol {
    pub ensemble: EnsembleSpec,
    pub samples: usize,
    pub seed: u64,
    pub delta: f64,
    pub cycle: CycleKind,
    pub pre: usize,
    pub post: usize,
    #[serde(default)]
    pub prolongation: ProlongationKind,
    #[serde(default = "default_coarsest")]
    pub coarsest_m: usize,
    #[serde(default = "default_window")]
    pub window: RateWindow,
    #[serde(default)]
    pub execution: Execution,
}

impl RateProtocol {
    pub fn cycle_spec(&self, smoother: SmootherSpec) -> CycleSpec {
        CycleSpec {
            kind: self.cycle,
            pre: self.pre,
            post: self.post,
            smoother,
            prolongation: self.prolongation,
            coarsest_m: self.coarsest_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::Config(format!("delta must be non-negative, got {}", self.delta)));
        }
        RateWindow::new(self.window.first, self.window.last)?;
        self.cycle_spec(SmootherSpec::common(1.0)).validate()
    }

    /// Builds every hierarchy and starting vector once.
    pub fn prepare(&self) -> Result<PreparedProtocol> {
        self.validate()?;
        let probe = self.cycle_spec(SmootherSpec::common(1.0));
        let n = self.ensemble.m * self.ensemble.m;
        let built = map_indexed(self.samples, self.execution, |i| -> Result<(Hierarchy, Vec<f64>, f64)> {
            let field = self.ensemble.field(self.seed, i as u64)?;
            let a = crate::problem::assemble(&field, self.delta)?;
            let h = Hierarchy::for_spec(a, &probe)?;
            let mut rng = sample_rng(self.seed, i as u64 | 1 << 63);
            let u0 = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let aspect = field.geometry().hy() / field.geometry().hx();
            Ok((h, u0, aspect))
        });
        let mut hierarchies = Vec::with_capacity(self.samples);
        let mut starts = Vec::with_capacity(self.samples);
        let mut aspects = Vec::with_capacity(self.samples);
        for b in built {
            let (h, u0, aspect) = b?;
            hierarchies.push(h);
            starts.push(u0);
            aspects.push(aspect);
        }
        Ok(PreparedProtocol {
            protocol: self.clone(),
            hierarchies,
            starts,
            aspects,
        })
    }
}

/// Rate of one sample. A diverged run reports its average growth factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRate {
    pub sample_id: usize,
    pub rate: f64,
    pub diverged: bool,
    pub residual_norms: Vec<f64>,
    pub error_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEvaluation {
    /// Geometric mean of the per-sample rates.
    pub rate: f64,
    pub samples: Vec<SampleRate>,
}

impl RateEvaluation {
    pub fn diverged(&self) -> usize {
        self.samples.iter().filter(|s| s.diverged).count()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedProtocol {
    protocol: RateProtocol,
    hierarchies: Vec<Hierarchy>,
    starts: Vec<Vec<f64>>,
    aspects: Vec<f64>,
}

impl PreparedProtocol {
    pub fn protocol(&self) -> &RateProtocol {
        &self.protocol
    }

    pub fn len(&self) -> usize {
        self.hierarchies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hierarchies.is_empty()
    }

    /// `hy / hx` of each sample.
    pub fn aspects(&self) -> &[f64] {
        &self.aspects
    }

    pub fn hierarchy(&self, i: usize) -> &Hierarchy {
        &self.hierarchies[i]
    }

    /// Runs `window.last` cycles of the homogeneous problem from each start.
    pub fn evaluate(&self, smoother: &SmootherSpec) -> Result<RateEvaluation> {
        let spec = self.protocol.cycle_spec(smoother.clone());
        let window = self.protocol.window;
        let samples = map_indexed(self.len(), self.protocol.execution, |i| -> Result<SampleRate> {
            let h = &self.hierarchies[i];
            let solver = Solver::new(h, &spec)?;
            let zeros = vec![0.0; h.fine().n()];
            let report = solver.solve(&zeros, &self.starts[i], window.last, 0.0, Some(&zeros))?;
            let norms = &report.residual_norms;
            let rate = if report.diverged || norms.len() <= window.last {
                let k = norms.len() - 1;
                (norms[k] / norms[0]).powf(1.0 / k.max(1) as f64)
            } else {
                rate_from_norms(norms, window)?.rate
            };
            Ok(SampleRate {
                sample_id: i,
                rate,
                diverged: report.diverged,
                residual_norms: report.residual_norms,
                error_norms: report.error_norms,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let rates: Vec<f64> = samples.iter().map(|s| s.rate).collect();
        Ok(RateEvaluation {
            rate: geometric_mean(&rates)?,
            samples,
        })
    }

    /// Ensemble rate for the parameter vector `theta` of `family`.
    pub fn rate(&self, family: SmootherFamily, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(&family.spec(theta)?)?.rate)
    }
}

/// Memoised objective on the lattice `origin + step * k`.
struct LatticeObjective<'a> {
    prepared: &'a PreparedProtocol,
    family: SmootherFamily,
    step: f64,
    origin: Vec<f64>,
    cache: HashMap<Vec<i64>, f64>,
}

impl<'a> LatticeObjective<'a> {
    fn point(&self, key: &[i64]) -> Vec<f64> {
        self.origin
            .iter()
            .zip(key)
            .map(|(o, k)| o + self.step * *k as f64)
            .collect()
    }

    fn inside(&self, key: &[i64]) -> bool {
        self.point(key).iter().all(|v| (CLIP_MIN..=CLIP_MAX).contains(v))
    }

    fn value(&mut self, key: &[i64]) -> Result<f64> {
        if let Some(v) = self.cache.get(key) {
            return Ok(*v);
        }
        let v = self.prepared.rate(self.family, &self.point(key))?;
        self.cache.insert(key.to_vec(), v);
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub theta: Vec<f64>,
    pub rate: f64,
    /// Accepted points in order, starting with the initial one.
    pub path: Vec<(Vec<f64>, f64)>,
    pub evaluations: usize,
}

/// Best-improvement hill climb over the neighbours `theta +- step e_i`,
/// scored by measured rate; stops when no neighbour improves strictly.
pub fn local_search(
    theta: &[f64],
    step: f64,
    family: SmootherFamily,
    prepared: &PreparedProtocol,
) -> Result<SearchResult> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    family.spec(theta)?;
    let mut obj = LatticeObjective {
        prepared,
        family,
        step,
        origin: theta.to_vec(),
        cache: HashMap::new(),
    };
    let mut key = vec![0i64; theta.len()];
    let mut best = obj.value(&key)?;
    let mut path = vec![(obj.point(&key), best)];
    loop {
        let mut improved: Option<(Vec<i64>, f64)> = None;
        for i in 0..key.len() {
            for d in [-1, 1] {
                let mut nb = key.clone();
                nb[i] += d;
                if !obj.inside(&nb) {
                    continue;
                }
                let v = obj.value(&nb)?;
                let current = improved.as_ref().map_or(best, |(_, b)| *b);
                if v < current {
                    improved = Some((nb, v));
                }
            }
        }
        match improved {
            Some((nb, v)) => {
                key = nb;
                best = v;
                path.push((obj.point(&key), best));
            }
            None => break,
        }
    }
    Ok(SearchResult {
        theta: obj.point(&key),
        rate: best,
        path,
        evaluations: obj.cache.len(),
    })
}

/// Coordinate descent on the `step` lattice inside `bounds`: each coordinate
/// in turn is walked in both directions while the rate improves, until a full
/// pass changes nothing. The first start is the box center, later ones are
/// uniform lattice points drawn from `seed`. Returns the best result over all
/// starts; evaluations are shared between starts.
pub fn coordinate_grid_search(
    bounds: &[(f64, f64)],
    step: f64,
    restarts: usize,
    seed: u64,
    family: SmootherFamily,
    prepared: &PreparedProtocol,
) -> Result<SearchResult> {
    if bounds.len() != family.dim() {
        return Err(Error::Dimension {
            expected: family.dim(),
            got: bounds.len(),
        });
    }
    if !(step > 0.0) || bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::Config("grid search needs finite bounds and a positive step".into()));
    }
    let lo: Vec<f64> = bounds.iter().map(|b| b.0.max(CLIP_MIN)).collect();
    let counts: Vec<i64> = bounds
        .iter()
        .zip(&lo)
        .map(|(b, l)| ((b.1.min(CLIP_MAX) - l) / step + 1e-9).floor() as i64)
        .collect();
    let mut obj = LatticeObjective {
        prepared,
        family,
        step,
        origin: lo,
        cache: HashMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut overall: Option<SearchResult> = None;
    for r in 0..restarts.max(1) {
        let mut key: Vec<i64> = if r == 0 {
            counts.iter().map(|c| c / 2).collect()
        } else {
            counts.iter().map(|c| rng.random_range(0..=*c)).collect()
        };
        let mut best = obj.value(&key)?;
        let mut path = vec![(obj.point(&key), best)];
        loop {
            let mut changed = false;
            for i in 0..key.len() {
                for d in [-1i64, 1] {
                    loop {
                        let mut nb = key.clone();
                        nb[i] += d;
                        if nb[i] < 0 || nb[i] > counts[i] {
                            break;
                        }
                        let v = obj.value(&nb)?;
                        if v < best {
                            key = nb;
                            best = v;
                            changed = true;
                            path.push((obj.point(&key), best));
                        } else {
                            break;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let result = SearchResult {
            theta: obj.point(&key),
            rate: best,
            path,
            evaluations: obj.cache.len(),
        };
        if overall.as_ref().is_none_or(|o| result.rate < o.rate) {
            overall = Some(result);
        }
    }
    let mut out = overall.expect("at least one start");
    out.evaluations = obj.cache.len();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    pub rate: f64,
    pub diverged_samples: usize,
    pub sample_rates: Vec<f64>,
}

/// Rate for each `omega` in `lo, lo + step, ..., hi`, with the coefficient
/// shared by every parameter of `family`.
pub fn omega_sweep(
    lo: f64,
    hi: f64,
    step: f64,
    family: SmootherFamily,
    prepared: &PreparedProtocol,
) -> Result<Vec<SweepRow>> {
    if !(lo <= hi) || !(step > 0.0) {
        return Err(Error::Config(format!("bad sweep range {lo}..{hi} step {step}")));
    }
    if lo < CLIP_MIN || hi > CLIP_MAX {
        return Err(Error::Config(format!(
            "sweep range must lie in [{CLIP_MIN}, {CLIP_MAX}], got {lo}..{hi}"
        )));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|i| {
            let omega = lo + step * i as f64;
            let eval = prepared.evaluate(&family.common(omega))?;
            Ok(SweepRow {
                omega,
                rate: eval.rate,
                diverged_samples: eval.diverged(),
                sample_rates: eval.samples.iter().map(|s| s.rate).collect(),
            })
        })
        .collect()
}

/// Row with the smallest rate.
pub fn sweep_minimum(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().min_by(|a, b| a.rate.total_cmp(&b.rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::four_color(8, 10, 10, 0.01, 3);
        c.prolongation = ProlongationKind::Bilinear;
        c.lr_base = 0.5;
        c.max_epochs = 60;
        c
    }

    #[test]
    fn parameter_vector_clips_and_validates() {
        let v = ParameterVector::new(vec![-1.0, 0.5, 3.0]).unwrap().clipped();
        assert_eq!(v.as_slice(), &[CLIP_MIN, 0.5, CLIP_MAX]);
        assert!(ParameterVector::new(vec![f64::NAN]).is_err());
        assert!(ParameterVector::new(vec![]).is_err());
    }

    #[test]
    fn family_specs() {
        assert_eq!(SmootherFamily::Jacobi.spec(&[0.7]).unwrap(), SmootherSpec::Jacobi { omega: 0.7 });
        assert_eq!(SmootherFamily::FourColor.common(1.1), SmootherSpec::common(1.1));
        assert!(SmootherFamily::FourColor.spec(&[1.0]).is_err());
    }

    #[test]
    fn quadratic_and_saddle_gradients() {
        let c = [0.3, -1.2, 2.0];
        let g = finite_difference_gradient(
            |t: &[f64]| Ok(t.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum()),
            &[1.0, 1.0, 1.0],
            1e-4,
        )
        .unwrap();
        for (gi, ci) in g.values.iter().zip(c) {
            assert!((gi - 2.0 * (1.0 - ci)).abs() < 1e-8);
        }
        let g = finite_difference_gradient(|t: &[f64]| Ok(t[0] * t[1]), &[0.0, 0.0], 1e-4).unwrap();
        assert!(g.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn one_sided_fallback() {
        let f = |t: &[f64]| Ok(if t[0] > 1.0 { f64::INFINITY } else { t[0] * t[0] });
        let g = finite_difference_gradient(f, &[1.0], 1e-4).unwrap();
        assert!(g.one_sided[0]);
        assert!((g.values[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn batch_loss_is_order_invariant() {
        let config = small_config();
        let batch = Batch::generate(&config, 0, 5).unwrap();
        let mut reversed = batch.samples.clone();
        reversed.reverse();
        let rev = Batch::new(reversed).unwrap();
        let theta = [0.8, 1.1, 1.1, 1.0];
        let a = batch_loss(&theta, &batch, &config).unwrap();
        let b = batch_loss(&theta, &rev, &config).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn zero_epochs_returns_the_start() {
        let mut config = small_config();
        config.max_epochs = 0;
        config.theta0 = Some(vec![0.9, 1.0, 1.1, 1.2]);
        let out = train(&config).unwrap();
        assert_eq!(out.theta.as_slice(), &[0.9, 1.0, 1.1, 1.2]);
        assert_eq!(out.trace.rows.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let mut config = small_config();
        config.max_epochs = 15;
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a, b);
        let rows = &a.trace.rows;
        for w in rows.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss);
        }
        assert!(rows.last().unwrap().train_loss < rows[0].train_loss);
        let mut buf = Vec::new();
        a.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,theta_1,theta_2,theta_3,theta_4\n"));
    }

    #[test]
    fn single_parameter_training_finds_the_scan_minimum() {
        let mut config = small_config();
        config.family = SmootherFamily::Jacobi;
        config.max_epochs = 100;
        let out = train(&config).unwrap();
        // direct scan of the same objective on the training pool
        let batch = Batch::generate(&config, 0, config.train_count()).unwrap();
        let (mut best_w, mut best_l) = (0.0, f64::INFINITY);
        for i in 0..=150 {
            let w = 0.3 + 0.01 * i as f64;
            let l = batch_loss(&[w], &batch, &config).unwrap();
            if l < best_l {
                best_l = l;
                best_w = w;
            }
        }
        assert!((out.final_theta.as_slice()[0] - best_w).abs() <= 0.02, "{:?} vs {best_w}", out.final_theta);
    }

    fn tiny_protocol() -> RateProtocol {
        RateProtocol {
            ensemble: EnsembleSpec::lognormal(16),
            samples: 3,
            seed: 5,
            delta: 0.0,
            cycle: CycleKind::V,
            pre: 1,
            post: 0,
            prolongation: ProlongationKind::Blackbox,
            coarsest_m: 4,
            window: RateWindow::new(5, 15).unwrap(),
            execution: Execution::Sequential,
        }
    }

    #[test]
    fn local_search_descends_monotonically() {
        let prepared = tiny_protocol().prepare().unwrap();
        let res = local_search(&[1.0; 4], 0.05, SmootherFamily::FourColor, &prepared).unwrap();
        for w in res.path.windows(2) {
            assert!(w[1].1 < w[0].1);
        }
        // restarting at the optimum leaves it unchanged
        let again = local_search(&res.theta, 0.05, SmootherFamily::FourColor, &prepared).unwrap();
        assert_eq!(again.path.len(), 1);
        assert!((again.rate - res.rate).abs() < 1e-15);
    }

    #[test]
    fn grid_search_on_one_dimension_hits_the_lattice_minimum() {
        let prepared = tiny_protocol().prepare().unwrap();
        let rows = omega_sweep(0.5, 1.2, 0.05, SmootherFamily::Jacobi, &prepared).unwrap();
        let best = sweep_minimum(&rows).unwrap();
        let res = coordinate_grid_search(&[(0.5, 1.2)], 0.05, 3, 1, SmootherFamily::Jacobi, &prepared).unwrap();
        assert!((res.theta[0] - best.omega).abs() < 1e-9, "{:?} vs {}", res.theta, best.omega);
        assert!((res.rate - best.rate).abs() < 1e-15);
        let single = omega_sweep(1.0, 1.0, 0.01, SmootherFamily::Jacobi, &prepared).unwrap();
        assert_eq!(single.len(), 1);
    }
}
