//! The two-grid error propagator `T = C S^nu`, the Frobenius-power loss
//! `||T^alpha||_F`, spectral radius estimation and convergence-rate metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycles::SolveReport;
use crate::dense::{matrix_power, BandedCholesky, DenseSolver};
use crate::error::{Error, Result};
use crate::problem::{StencilOperator, DENSE_LIMIT};
use crate::smoothers::{build_smoother_matrix_with_limit, smoother_matrix_from_sweeps, Smoother, SmootherSpec};
use crate::transfer::{build_prolongation, galerkin_coarsen, Prolongation, ProlongationKind};

/// Dense two-grid error propagation matrix with the settings that produced it.
#[derive(Debug, Clone)]
pub struct ErrorPropagator {
    pub matrix: DMatrix<f64>,
    pub smoother: SmootherSpec,
    pub prolongation: ProlongationKind,
    pub nu: usize,
}

impl ErrorPropagator {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

/// The coarse-grid correction `C = I - P (P^T A P)^-1 P^T A`, which does not
/// depend on the smoother and can be reused across smoother parameters.
#[derive(Debug, Clone)]
pub struct CoarseCorrection {
    matrix: DMatrix<f64>,
    prolongation: ProlongationKind,
}

impl CoarseCorrection {
    pub fn new(a: &StencilOperator, p: &Prolongation) -> Result<Self> {
        Self::with_limit(a, p, DENSE_LIMIT)
    }

    pub fn with_limit(a: &StencilOperator, p: &Prolongation, limit: usize) -> Result<Self> {
        if a.annihilates_constants() {
            return Err(Error::SingularPropagator);
        }
        if p.n_fine() != a.n() {
            return Err(Error::Dimension {
                expected: a.n(),
                got: p.n_fine(),
            });
        }
        let ad = a.to_dense_with_limit(limit)?;
        let pd = p.to_dense();
        let pt_a = pd.transpose() * &ad;
        let ac = &pt_a * &pd;
        let solver = DenseSolver::new(ac, false)?;
        let n = a.n();
        let matrix = DMatrix::identity(n, n) - pd * (solver.inverse() * pt_a);
        Ok(Self {
            matrix,
            prolongation: p.kind(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `C S^nu` with `S^nu` obtained by sweeping identity columns.
    pub fn propagator(&self, a: &StencilOperator, smoother: &SmootherSpec, nu: usize) -> Result<ErrorPropagator> {
        let sm = Smoother::new(a, smoother)?;
        let s = smoother_matrix_from_sweeps(a, &sm, nu);
        Ok(ErrorPropagator {
            matrix: &self.matrix * s,
            smoother: smoother.clone(),
            prolongation: self.prolongation,
            nu,
        })
    }
}

/// `T = (I - P (P^T A P)^-1 P^T A) S^nu` with every relaxation before the
/// correction. The operator must be nonsingular (diagonal shift `delta > 0`).
pub fn build_two_grid_propagator(
    a: &StencilOperator,
    p: &Prolongation,
    smoother: &SmootherSpec,
    nu: usize,
) -> Result<ErrorPropagator> {
    let c = CoarseCorrection::new(a, p)?;
    let s = build_smoother_matrix_with_limit(a, smoother, nu, DENSE_LIMIT)?;
    Ok(ErrorPropagator {
        matrix: c.matrix * s,
        smoother: smoother.clone(),
        prolongation: p.kind(),
        nu,
    })
}

/// `||T^alpha||_F`, or `+inf` when the power overflows.
pub fn gelfand_loss(t: &DMatrix<f64>, alpha: u32) -> f64 {
    let v = matrix_power(t, alpha).norm();
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// `||T^alpha||_F^(1/alpha)`, an upper bound on the spectral radius.
pub fn gelfand_estimate(t: &DMatrix<f64>, alpha: u32) -> f64 {
    gelfand_loss(t, alpha).powf(1.0 / alpha as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub rho: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const DEFAULT_MAX_ITER: usize = 20_000;
/// Block length of the norm-ratio estimate.
pub const BLOCK: usize = 8;

/// Power-iteration estimate of the spectral radius.
pub fn spectral_radius(t: &DMatrix<f64>, tol: f64) -> SpectralEstimate {
    spectral_radius_with(t, tol, DEFAULT_MAX_ITER, 0x5eed)
}

/// Fits `x_{k+2} = a x_{k+1} + b x_k` by least squares and returns the larger
/// root modulus of `z^2 - a z - b`. `None` when `x_k` and `x_{k+1}` are
/// numerically parallel.
fn recurrence_fit(x0: &DVector<f64>, x1: &DVector<f64>, x2: &DVector<f64>) -> Option<f64> {
    let g11 = x1.dot(x1);
    let g10 = x1.dot(x0);
    let g00 = x0.dot(x0);
    let det = g11 * g00 - g10 * g10;
    if !(det > 1e-12 * g11 * g00) {
        return None;
    }
    let b1 = x1.dot(x2);
    let b0 = x0.dot(x2);
    let a = (b1 * g00 - b0 * g10) / det;
    let b = (g11 * b0 - g10 * b1) / det;
    let disc = a * a + 4.0 * b;
    Some(if disc >= 0.0 {
        let s = disc.sqrt();
        ((a + s) / 2.0).abs().max(((a - s) / 2.0).abs())
    } else {
        (-b).sqrt()
    })
}

/// Power iteration from a seeded random start. Two estimates run side by side:
/// the block ratio `(||T^{k+8} v|| / ||T^k v||)^(1/8)` and a two-term
/// recurrence fit on consecutive iterates, which also resolves a dominant
/// complex pair. The fit is returned when available. Convergence means the
/// estimate moved by less than `tol` over the last block.
pub fn spectral_radius_with(t: &DMatrix<f64>, tol: f64, max_iter: usize, seed: u64) -> SpectralEstimate {
    let n = t.nrows();
    if n == 0 {
        return SpectralEstimate {
            rho: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    y0 /= y0.norm();
    let mut y1 = t * &y0;
    let mut log_norms: Vec<f64> = Vec::with_capacity(max_iter.min(1 << 16));
    let mut estimates: Vec<f64> = Vec::with_capacity(max_iter.min(1 << 16));
    for k in 0..max_iter {
        let s = y1.norm();
        if s == 0.0 || !s.is_finite() {
            return SpectralEstimate {
                rho: if s == 0.0 { 0.0 } else { f64::INFINITY },
                converged: s == 0.0,
                iterations: k + 1,
            };
        }
        log_norms.push(s.ln());
        let y2 = t * &y1;
        let block = if log_norms.len() >= BLOCK {
            let tail = &log_norms[log_norms.len() - BLOCK..];
            (tail.iter().sum::<f64>() / BLOCK as f64).exp()
        } else {
            s
        };
        let est = recurrence_fit(&y0, &y1, &y2).unwrap_or(block);
        estimates.push(est);
        if estimates.len() > 2 * BLOCK {
            let window = &estimates[estimates.len() - BLOCK - 1..];
            let spread = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - window.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread < tol {
                return SpectralEstimate {
                    rho: est,
                    converged: true,
                    iterations: k + 1,
                };
            }
        }
        y0 = y1 / s;
        y1 = y2 / s;
    }
    SpectralEstimate {
        rho: *estimates.last().expect("max_iter > 0"),
        converged: false,
        iterations: max_iter,
    }
}

/// Cycle window for rate measurement, inclusive of both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateWindow {
    pub first: usize,
    pub last: usize,
}

impl Default for RateWindow {
    fn default() -> Self {
        Self { first: 15, last: 40 }
    }
}

impl RateWindow {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first >= last {
            return Err(Error::Config(format!("rate window needs first < last, got {first}..{last}")));
        }
        Ok(Self { first, last })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateMeasurement {
    pub rate: f64,
    /// The residual reached exactly zero inside the window.
    pub exact_convergence: bool,
}

/// `(||r_last|| / ||r_first||)^(1/(last - first))`.
pub fn measured_rate(report: &SolveReport, window: RateWindow) -> Result<RateMeasurement> {
    rate_from_norms(&report.residual_norms, window)
}

pub fn rate_from_norms(norms: &[f64], window: RateWindow) -> Result<RateMeasurement> {
    if window.first >= window.last {
        return Err(Error::Config("rate window needs first < last".into()));
    }
    if norms.len() <= window.last {
        return Err(Error::ShortHistory {
            len: norms.len(),
            last: window.last,
        });
    }
    let slice = &norms[window.first..=window.last];
    if slice.iter().any(|v| *v == 0.0) {
        return Ok(RateMeasurement {
            rate: 0.0,
            exact_convergence: true,
        });
    }
    let ratio = norms[window.last] / norms[window.first];
    Ok(RateMeasurement {
        rate: ratio.powf(1.0 / (window.last - window.first) as f64),
        exact_convergence: false,
    })
}

/// Cycles needed by `rate` to match one cycle of `reference`, as a percentage:
/// `100 ln(reference) / ln(rate)`.
pub fn improvement(rate: f64, reference: f64) -> Result<f64> {
    let valid = |r: f64| r > 0.0 && r < 1.0;
    if !valid(rate) || !valid(reference) {
        return Err(Error::UndefinedImprovement { rate, reference });
    }
    Ok(100.0 * reference.ln() / rate.ln())
}

/// One line of a spectrum report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub sample_id: usize,
    pub rho: f64,
    /// `||T^alpha||_F^(1/alpha)` keyed by `alpha`.
    pub gelfand: BTreeMap<u32, f64>,
    pub rate_measured: Option<f64>,
}

/// Matrix-free two-grid propagator applied to blocks of vectors.
///
/// Used where the dense `T` is too large: `||T^alpha||_F^2` is estimated as
/// `||T^alpha Z||_F^2 / k` for a fixed block `Z` of `k` Rademacher probes.
/// Keeping `Z` fixed makes the estimate a smooth function of the smoother
/// parameters.
#[derive(Debug, Clone)]
pub struct ProbeEstimator {
    operator: StencilOperator,
    prolongation: Prolongation,
    coarse: BandedCholesky,
    probes: DMatrix<f64>,
}

impl ProbeEstimator {
    pub fn new(a: StencilOperator, kind: ProlongationKind, probes: usize, seed: u64) -> Result<Self> {
        if probes == 0 {
            return Err(Error::Config("probe count must be positive".into()));
        }
        if a.annihilates_constants() {
            return Err(Error::SingularPropagator);
        }
        let n = a.n();
        let prolongation = build_prolongation(&a, kind)?;
        let coarse = BandedCholesky::new(&galerkin_coarsen(&a, &prolongation)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probes = DMatrix::from_fn(n, probes, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        Ok(Self {
            operator: a,
            prolongation,
            coarse,
            probes,
        })
    }

    pub fn operator(&self) -> &StencilOperator {
        &self.operator
    }

    /// Replaces each column `e` of `block` by `T e`.
    pub fn apply(&self, smoother: &Smoother, nu: usize, block: &mut DMatrix<f64>) {
        let a = &self.operator;
        let p = &self.prolongation;
        let n = a.n();
        let zero = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut rc = DMatrix::<f64>::zeros(p.n_coarse(), block.ncols());
        for (mut col, mut rc_col) in block.column_iter_mut().zip(rc.column_iter_mut()) {
            let e = col.as_mut_slice();
            for _ in 0..nu {
                smoother.sweep_unchecked(a, e, &zero, &mut scratch);
            }
            a.apply_unchecked(e, &mut scratch);
            p.restrict_into(&scratch, rc_col.as_mut_slice());
        }
        let mut work = Vec::new();
        self.coarse.solve_block(&mut rc, &mut work);
        rc.neg_mut();
        for (mut col, rc_col) in block.column_iter_mut().zip(rc.column_iter()) {
            p.prolong_add(rc_col.as_slice(), col.as_mut_slice());
        }
    }

    /// Estimate of `||T^alpha||_F^2`, `+inf` on overflow.
    pub fn squared_loss(&self, smoother: &SmootherSpec, nu: usize, alpha: u32) -> Result<f64> {
        let sm = Smoother::new(&self.operator, smoother)?;
        let mut block = self.probes.clone();
        for _ in 0..alpha {
            self.apply(&sm, nu, &mut block);
        }
        let v = block.norm_squared() / block.ncols() as f64;
        Ok(if v.is_finite() { v } else { f64::INFINITY })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycles::{two_grid_cycle, CycleKind, CycleSpec};
    use crate::problem::{assemble, sample_lognormal_field, GridGeometry, LogNormal};
    use crate::transfer::{bilinear_prolongation, build_prolongation};

    fn operator(m: usize, seed: u64, delta: f64) -> StencilOperator {
        let field =
            sample_lognormal_field(GridGeometry::isotropic(m).unwrap(), LogNormal::default(), seed).unwrap();
        assemble(&field, delta).unwrap()
    }

    fn dense_rho(t: &DMatrix<f64>) -> f64 {
        t.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_smoother_gives_a_projector() {
        let a = operator(8, 1, 0.01);
        let p = bilinear_prolongation(8).unwrap();
        let t = build_two_grid_propagator(&a, &p, &SmootherSpec::common(0.0), 1).unwrap();
        let c = &t.matrix;
        assert!((c * c - c).amax() <= 1e-10);
        let w = DVector::from_fn(16, |i, _| (i as f64).sin());
        let tp = c * (p.to_dense() * w);
        assert!(tp.amax() <= 1e-10);
    }

    #[test]
    fn singular_operator_is_rejected() {
        let a = operator(8, 1, 0.0);
        let p = bilinear_prolongation(8).unwrap();
        assert!(matches!(
            build_two_grid_propagator(&a, &p, &SmootherSpec::Spai0, 1),
            Err(Error::SingularPropagator)
        ));
    }

    #[test]
    fn both_propagator_routes_agree() {
        let a = operator(8, 2, 0.01);
        for kind in [ProlongationKind::Bilinear, ProlongationKind::Blackbox] {
            let p = build_prolongation(&a, kind).unwrap();
            let spec = SmootherSpec::four_color([0.7, 1.1, 1.1, 1.0]);
            let t1 = build_two_grid_propagator(&a, &p, &spec, 2).unwrap();
            let t2 = CoarseCorrection::new(&a, &p).unwrap().propagator(&a, &spec, 2).unwrap();
            assert!((t1.matrix - t2.matrix).amax() <= 1e-12);
        }
    }

    #[test]
    fn cycle_reproduces_the_propagator() {
        let a = operator(8, 3, 0.01);
        let p = bilinear_prolongation(8).unwrap();
        let t = build_two_grid_propagator(&a, &p, &SmootherSpec::Spai0, 1).unwrap();
        let spec = CycleSpec::new(CycleKind::TwoGrid, 1, 0, SmootherSpec::Spai0);
        let e0: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let mut u = e0.clone();
        two_grid_cycle(&a, &mut u, &[0.0; 64], &spec).unwrap();
        let expected = &t.matrix * DVector::from_vec(e0);
        for (x, y) in u.iter().zip(expected.iter()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn gelfand_examples() {
        assert_eq!(gelfand_loss(&DMatrix::zeros(4, 4), 10), 0.0);
        for alpha in [1, 2, 7, 40] {
            assert!((gelfand_loss(&DMatrix::identity(256, 256), alpha) - 16.0).abs() < 1e-12);
        }
        let big = DMatrix::from_element(3, 3, 1e200);
        assert_eq!(gelfand_loss(&big, 4), f64::INFINITY);
    }

    #[test]
    fn spectral_radius_examples() {
        let est = spectral_radius(&DMatrix::identity(10, 10), 1e-12);
        assert!((est.rho - 1.0).abs() < 1e-12);
        assert!(est.converged);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.9]));
        assert!((spectral_radius(&d, 1e-12).rho - 0.9).abs() < 1e-9);
        // rotation scaled by 0.8: a complex pair with no real dominant eigenvalue
        let (c, s) = (0.8 * 1.1f64.cos(), 0.8 * 1.1f64.sin());
        let mut r = DMatrix::zeros(3, 3);
        r[(0, 0)] = c;
        r[(0, 1)] = -s;
        r[(1, 0)] = s;
        r[(1, 1)] = c;
        r[(2, 2)] = 0.3;
        assert!((spectral_radius(&r, 1e-12).rho - 0.8).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_matches_dense_eigenvalues() {
        for seed in 0..10 {
            let a = operator(8, seed, 0.01);
            let p = bilinear_prolongation(8).unwrap();
            for spec in [SmootherSpec::Spai0, SmootherSpec::four_color([0.7, 1.2, 1.1, 0.9])] {
                let t = build_two_grid_propagator(&a, &p, &spec, 1).unwrap().matrix;
                let est = spectral_radius(&t, 1e-12);
                let exact = dense_rho(&t);
                assert!((est.rho - exact).abs() <= 1e-6, "seed {seed}: {} vs {exact}", est.rho);
                for alpha in [1, 2, 4, 10, 25, 40] {
                    assert!(exact <= gelfand_estimate(&t, alpha) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rate_and_improvement() {
        let halving: Vec<f64> = (0..=40).map(|k| 0.5f64.powi(k)).collect();
        let r = rate_from_norms(&halving, RateWindow::default()).unwrap();
        assert!((r.rate - 0.5).abs() < 1e-12);
        let flat = vec![3.0; 41];
        assert!((rate_from_norms(&flat, RateWindow::default()).unwrap().rate - 1.0).abs() < 1e-15);
        assert!(matches!(
            rate_from_norms(&flat[..30], RateWindow::default()),
            Err(Error::ShortHistory { .. })
        ));
        let mut zeroed = halving.clone();
        zeroed[20] = 0.0;
        assert!(rate_from_norms(&zeroed, RateWindow::default()).unwrap().exact_convergence);

        assert!((improvement(0.3, 0.3).unwrap() - 100.0).abs() < 1e-12);
        assert!((improvement(0.1438, 0.1986).unwrap() - 83.35).abs() < 0.01);
        assert!((improvement(0.1438, 0.3044).unwrap() - 61.33).abs() < 0.01);
        assert!(improvement(1.0, 0.5).is_err());
    }

    #[test]
    fn probe_estimate_is_unbiased_in_the_limit() {
        let a = operator(8, 4, 0.01);
        let p = bilinear_prolongation(8).unwrap();
        let spec = SmootherSpec::four_color([0.8, 1.1, 1.1, 1.0]);
        let t = build_two_grid_propagator(&a, &p, &spec, 1).unwrap().matrix;
        let exact = gelfand_loss(&t, 3).powi(2);
        let est = ProbeEstimator::new(a, ProlongationKind::Bilinear, 4000, 9).unwrap();
        let approx = est.squared_loss(&spec, 1, 3).unwrap();
        assert!((approx / exact - 1.0).abs() < 0.1, "{approx} vs {exact}");
    }

    #[test]
    fn probe_application_matches_dense_t() {
        let a = operator(8, 5, 0.01);
        let p = crate::transfer::blackbox_prolongation(&a).unwrap();
        let spec = SmootherSpec::Jacobi { omega: 0.7 };
        let t = build_two_grid_propagator(&a, &p, &spec, 2).unwrap().matrix;
        let est = ProbeEstimator::new(a.clone(), ProlongationKind::Blackbox, 3, 1).unwrap();
        let sm = Smoother::new(&a, &spec).unwrap();
        let mut block = DMatrix::from_fn(64, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 - 3.0);
        let expected = &t * &block;
        est.apply(&sm, 2, &mut block);
        assert!((block - expected).amax() <= 1e-10);
    }
}
