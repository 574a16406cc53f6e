//! Two-grid and recursive multigrid cycles, and the outer solve loop.
//!
//! A [`Hierarchy`] holds the Galerkin operators and transfers and does not
//! depend on the smoother, so many smoother settings can share one. A
//! [`Solver`] binds a hierarchy to a [`CycleSpec`].

use serde::{Deserialize, Serialize};

use crate::dense::DenseSolver;
use crate::error::{Error, Result};
use crate::smoothers::{Smoother, SmootherSpec};
use crate::transfer::{build_prolongation, galerkin_coarsen, Prolongation, ProlongationKind, MIN_COARSE};
use crate::problem::StencilOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKind {
    TwoGrid,
    V,
    #[default]
    W,
    F,
}

impl std::str::FromStr for CycleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "two_grid" | "twogrid" => Ok(Self::TwoGrid),
            "v" => Ok(Self::V),
            "w" => Ok(Self::W),
            "f" => Ok(Self::F),
            other => Err(Error::InvalidCycle(format!("unknown cycle kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSpec {
    pub kind: CycleKind,
    pub pre: usize,
    pub post: usize,
    pub smoother: SmootherSpec,
    #[serde(default)]
    pub prolongation: ProlongationKind,
    #[serde(default = "default_coarsest")]
    pub coarsest_m: usize,
}

fn default_coarsest() -> usize {
    MIN_COARSE
}

impl CycleSpec {
    pub fn new(kind: CycleKind, pre: usize, post: usize, smoother: SmootherSpec) -> Self {
        Self {
            kind,
            pre,
            post,
            smoother,
            prolongation: ProlongationKind::Bilinear,
            coarsest_m: MIN_COARSE,
        }
    }

    pub fn with_prolongation(mut self, kind: ProlongationKind) -> Self {
        self.prolongation = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre + self.post == 0 {
            return Err(Error::InvalidCycle("pre + post relaxations must be at least 1".into()));
        }
        if self.coarsest_m < MIN_COARSE || self.coarsest_m % 2 != 0 {
            return Err(Error::InvalidCycle(format!(
                "coarsest_m must be even and at least {MIN_COARSE}, got {}",
                self.coarsest_m
            )));
        }
        self.smoother.validate()
    }
}

/// Galerkin operators from fine (index 0) to coarsest, with the transfers
/// between consecutive levels and a direct solver on the last level.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    operators: Vec<StencilOperator>,
    transfers: Vec<Prolongation>,
    coarse: DenseSolver,
}

impl Hierarchy {
    /// Coarsens until the grid side reaches `coarsest_m` or `max_levels` levels
    /// exist.
    pub fn build(
        a: StencilOperator,
        kind: ProlongationKind,
        coarsest_m: usize,
        max_levels: Option<usize>,
    ) -> Result<Self> {
        if coarsest_m < MIN_COARSE {
            return Err(Error::CoarseTooSmall(coarsest_m));
        }
        let max_levels = max_levels.unwrap_or(usize::MAX);
        if max_levels < 2 {
            return Err(Error::InvalidCycle("a hierarchy needs at least two levels".into()));
        }
        let mut operators = vec![a];
        let mut transfers = Vec::new();
        loop {
            let fine = operators.last().expect("nonempty");
            let done = operators.len() >= max_levels || fine.m() / 2 < coarsest_m.max(MIN_COARSE) || fine.m() % 2 != 0;
            if done {
                break;
            }
            let p = build_prolongation(fine, kind)?;
            let coarse = galerkin_coarsen(fine, &p)?;
            transfers.push(p);
            operators.push(coarse);
        }
        if operators.len() < 2 {
            return Err(Error::CoarseTooSmall(operators[0].m() / 2));
        }
        let last = operators.last().expect("nonempty");
        let coarse = DenseSolver::new(last.to_dense_with_limit(usize::MAX)?, last.annihilates_constants())?;
        Ok(Self {
            operators,
            transfers,
            coarse,
        })
    }

    /// Fine level plus one coarse level solved directly.
    pub fn two_level(a: StencilOperator, kind: ProlongationKind) -> Result<Self> {
        Self::build(a, kind, MIN_COARSE, Some(2))
    }

    /// Hierarchy shaped for `spec`: two levels for a two-grid cycle, otherwise
    /// coarsened down to `spec.coarsest_m`.
    pub fn for_spec(a: StencilOperator, spec: &CycleSpec) -> Result<Self> {
        match spec.kind {
            CycleKind::TwoGrid => Self::two_level(a, spec.prolongation),
            _ => Self::build(a, spec.prolongation, spec.coarsest_m, None),
        }
    }

    pub fn levels(&self) -> usize {
        self.operators.len()
    }

    pub fn operator(&self, level: usize) -> &StencilOperator {
        &self.operators[level]
    }

    pub fn fine(&self) -> &StencilOperator {
        &self.operators[0]
    }

    pub fn transfer(&self, level: usize) -> &Prolongation {
        &self.transfers[level]
    }

    /// Whether the operators annihilate constants (no diagonal shift).
    pub fn is_singular(&self) -> bool {
        self.coarse.is_singular()
    }
}

/// Direct solve of a coarse Galerkin system.
///
/// A coarse operator that annihilates constants is solved in the complement of
/// the constants: `r_c` must have (numerically) zero mean and the returned
/// `e_c` has zero mean.
pub fn coarse_solve(a_coarse: &StencilOperator, r_coarse: &[f64]) -> Result<Vec<f64>> {
    if r_coarse.len() != a_coarse.n() {
        return Err(Error::Dimension {
            expected: a_coarse.n(),
            got: r_coarse.len(),
        });
    }
    let solver = DenseSolver::new(a_coarse.to_dense_with_limit(usize::MAX)?, a_coarse.annihilates_constants())?;
    let mut out = vec![0.0; r_coarse.len()];
    solver.solve(r_coarse, &mut out)?;
    Ok(out)
}

/// Per-cycle history of one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// `||f - A u||_2`, starting with the initial guess.
    pub residual_norms: Vec<f64>,
    /// `||u* - u||_2` when the exact solution is known, same indexing.
    pub error_norms: Vec<f64>,
    pub cycles_run: usize,
    pub converged: bool,
    pub diverged: bool,
}

/// Residual growth factor that aborts a solve.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// A hierarchy bound to a cycle specification.
#[derive(Debug, Clone)]
pub struct Solver<'h> {
    hierarchy: &'h Hierarchy,
    spec: CycleSpec,
    smoothers: Vec<Smoother>,
}

impl<'h> Solver<'h> {
    pub fn new(hierarchy: &'h Hierarchy, spec: &CycleSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind == CycleKind::TwoGrid && hierarchy.levels() != 2 {
            return Err(Error::InvalidCycle(format!(
                "two-grid cycle needs a two-level hierarchy, got {} levels",
                hierarchy.levels()
            )));
        }
        let smoothed = hierarchy.levels() - 1;
        if smoothed > 1 && matches!(spec.smoother, SmootherSpec::ExplicitDiagonal { .. }) {
            return Err(Error::InvalidSmoother(
                "an explicit diagonal only fits the finest level; use a two-level hierarchy".into(),
            ));
        }
        let smoothers = (0..smoothed)
            .map(|l| Smoother::new(hierarchy.operator(l), &spec.smoother))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hierarchy,
            spec: spec.clone(),
            smoothers,
        })
    }

    pub fn spec(&self) -> &CycleSpec {
        &self.spec
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        self.hierarchy
    }

    /// One cycle on the finest level, in place.
    pub fn cycle(&self, u: &mut [f64], f: &[f64]) -> Result<()> {
        let n = self.hierarchy.fine().n();
        for len in [u.len(), f.len()] {
            if len != n {
                return Err(Error::Dimension { expected: n, got: len });
            }
        }
        let kind = match self.spec.kind {
            CycleKind::TwoGrid => CycleKind::V,
            k => k,
        };
        self.cycle_at(0, u, f, kind)
    }

    fn cycle_at(&self, level: usize, u: &mut [f64], f: &[f64], kind: CycleKind) -> Result<()> {
        let last = self.hierarchy.levels() - 1;
        if level == last {
            return self.hierarchy.coarse.solve(f, u);
        }
        let a = self.hierarchy.operator(level);
        let smoother = &self.smoothers[level];
        let mut scratch = vec![0.0; a.n()];
        for _ in 0..self.spec.pre {
            smoother.sweep_unchecked(a, u, f, &mut scratch);
        }
        a.residual_unchecked(u, f, &mut scratch);
        let p = self.hierarchy.transfer(level);
        let mut rc = vec![0.0; p.n_coarse()];
        p.restrict_into(&scratch, &mut rc);
        let mut ec = vec![0.0; p.n_coarse()];
        if level + 1 == last {
            self.hierarchy.coarse.solve(&rc, &mut ec)?;
        } else {
            match kind {
                CycleKind::V | CycleKind::TwoGrid => self.cycle_at(level + 1, &mut ec, &rc, CycleKind::V)?,
                CycleKind::W => {
                    self.cycle_at(level + 1, &mut ec, &rc, CycleKind::W)?;
                    self.cycle_at(level + 1, &mut ec, &rc, CycleKind::W)?;
                }
                CycleKind::F => {
                    self.cycle_at(level + 1, &mut ec, &rc, CycleKind::F)?;
                    self.cycle_at(level + 1, &mut ec, &rc, CycleKind::V)?;
                }
            }
        }
        p.prolong_add(&ec, u);
        for _ in 0..self.spec.post {
            smoother.sweep_unchecked(a, u, f, &mut scratch);
        }
        Ok(())
    }

    /// Runs cycles until `||r|| < tol` or `max_cycles`. With `tol = 0` every
    /// cycle runs. When the operator annihilates constants the iterate is
    /// projected to zero mean after each cycle; `exact` (if given) is compared
    /// modulo constants in that case.
    pub fn solve(
        &self,
        f: &[f64],
        u0: &[f64],
        max_cycles: usize,
        tol: f64,
        exact: Option<&[f64]>,
    ) -> Result<SolveReport> {
        if max_cycles == 0 {
            return Err(Error::InvalidCycle("max_cycles must be at least 1".into()));
        }
        let a = self.hierarchy.fine();
        let n = a.n();
        for len in [f.len(), u0.len()].into_iter().chain(exact.map(|e| e.len())) {
            if len != n {
                return Err(Error::Dimension { expected: n, got: len });
            }
        }
        let singular = self.hierarchy.is_singular();
        let mut u = u0.to_vec();
        let mut r = vec![0.0; n];
        let error_norm = |u: &[f64]| -> Option<f64> {
            let exact = exact?;
            let diff: Vec<f64> = exact.iter().zip(u).map(|(x, y)| x - y).collect();
            let shift = if singular {
                diff.iter().sum::<f64>() / n as f64
            } else {
                0.0
            };
            Some(diff.iter().map(|d| (d - shift).powi(2)).sum::<f64>().sqrt())
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

        a.residual_unchecked(&u, f, &mut r);
        let r0 = norm(&r);
        let mut report = SolveReport {
            residual_norms: vec![r0],
            error_norms: error_norm(&u).into_iter().collect(),
            cycles_run: 0,
            converged: r0 < tol || r0 == 0.0,
            diverged: false,
        };
        if report.converged {
            return Ok(report);
        }
        for _ in 0..max_cycles {
            self.cycle(&mut u, f)?;
            if singular {
                let mean = u.iter().sum::<f64>() / n as f64;
                u.iter_mut().for_each(|v| *v -= mean);
            }
            a.residual_unchecked(&u, f, &mut r);
            let rn = norm(&r);
            report.residual_norms.push(rn);
            report.error_norms.extend(error_norm(&u));
            report.cycles_run += 1;
            if !rn.is_finite() || rn > DIVERGENCE_FACTOR * r0 {
                report.diverged = true;
                break;
            }
            if rn < tol || rn == 0.0 {
                report.converged = true;
                break;
            }
        }
        Ok(report)
    }
}

/// One two-grid cycle: `pre` sweeps, exact Galerkin coarse correction,
/// `post` sweeps.
pub fn two_grid_cycle(
    a: &StencilOperator,
    u: &mut [f64],
    f: &[f64],
    spec: &CycleSpec,
) -> Result<()> {
    let hierarchy = Hierarchy::two_level(a.clone(), spec.prolongation)?;
    let spec = CycleSpec {
        kind: CycleKind::TwoGrid,
        ..spec.clone()
    };
    Solver::new(&hierarchy, &spec)?.cycle(u, f)
}

/// One multigrid cycle of kind `spec.kind` on a prebuilt hierarchy.
pub fn multigrid_cycle(
    hierarchy: &Hierarchy,
    u: &mut [f64],
    f: &[f64],
    spec: &CycleSpec,
) -> Result<()> {
    Solver::new(hierarchy, spec)?.cycle(u, f)
}

/// Builds the hierarchy for `spec` and solves `A u = f` from `u0`.
pub fn solve(
    a: &StencilOperator,
    f: &[f64],
    u0: &[f64],
    spec: &CycleSpec,
    max_cycles: usize,
    tol: f64,
) -> Result<SolveReport> {
    let hierarchy = Hierarchy::for_spec(a.clone(), spec)?;
    let homogeneous = f.iter().all(|v| *v == 0.0);
    let zeros = vec![0.0; f.len()];
    let exact = homogeneous.then_some(zeros.as_slice());
    Solver::new(&hierarchy, spec)?.solve(f, u0, max_cycles, tol, exact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{assemble, sample_lognormal_field, GridGeometry, LogNormal};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn operator(m: usize, seed: u64, delta: f64) -> StencilOperator {
        let field =
            sample_lognormal_field(GridGeometry::isotropic(m).unwrap(), LogNormal::default(), seed).unwrap();
        assemble(&field, delta).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn exact_solution_is_a_fixed_point() {
        let a = operator(8, 1, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let exact = random_vec(64, &mut rng);
        let f = a.matvec(&exact).unwrap();
        let spec = CycleSpec::new(CycleKind::TwoGrid, 1, 1, SmootherSpec::Spai0);
        let mut u = exact.clone();
        two_grid_cycle(&a, &mut u, &f, &spec).unwrap();
        for (x, y) in u.iter().zip(&exact) {
            assert!((x - y).abs() < 1e-12);
        }
        let report = solve(&a, &f, &exact, &spec, 5, 1e-8).unwrap();
        assert!(report.converged);
        assert_eq!(report.cycles_run, 0);
    }

    #[test]
    fn two_level_hierarchy_makes_all_cycles_agree() {
        let a = operator(8, 2, 0.01);
        let h = Hierarchy::build(a, ProlongationKind::Blackbox, 4, None).unwrap();
        assert_eq!(h.levels(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u0 = random_vec(64, &mut rng);
        let f = random_vec(64, &mut rng);
        let mut results = Vec::new();
        for kind in [CycleKind::TwoGrid, CycleKind::V, CycleKind::W, CycleKind::F] {
            let spec = CycleSpec::new(kind, 1, 1, SmootherSpec::common(1.0));
            let mut u = u0.clone();
            multigrid_cycle(&h, &mut u, &f, &spec).unwrap();
            results.push(u);
        }
        for r in &results[1..] {
            for (x, y) in r.iter().zip(&results[0]) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn correction_annihilates_the_range_of_p() {
        let a = operator(16, 3, 0.01);
        let h = Hierarchy::two_level(a, ProlongationKind::Bilinear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_vec(64, &mut rng);
        let mut u = h.transfer(0).prolong(&w).unwrap();
        // ν₁ = ν₂ = 0 is not a valid spec, so run the correction by hand.
        let a = h.fine();
        let r = a.residual(&u, &vec![0.0; 256]).unwrap();
        let rc = h.transfer(0).restrict(&r).unwrap();
        let ec = coarse_solve(h.operator(1), &rc).unwrap();
        h.transfer(0).prolong_add(&ec, &mut u);
        assert!(u.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn coarse_solve_regular_and_singular() {
        let a = operator(8, 4, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_vec(64, &mut rng);
        let e = coarse_solve(&a, &r).unwrap();
        let back = a.matvec(&e).unwrap();
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let res = back.iter().zip(&r).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(res <= 1e-10 * rn);
        assert!(coarse_solve(&a, &[0.0; 64]).unwrap().iter().all(|v| *v == 0.0));

        let s = operator(8, 4, 0.0);
        let mut r = random_vec(64, &mut rng);
        let mean = r.iter().sum::<f64>() / 64.0;
        r.iter_mut().for_each(|v| *v -= mean);
        let e = coarse_solve(&s, &r).unwrap();
        assert!(e.iter().sum::<f64>().abs() < 1e-9);
        let back = s.matvec(&e).unwrap();
        for (x, y) in back.iter().zip(&r) {
            assert!((x - y).abs() < 1e-9);
        }
        // pseudo-inverse oracle
        let pinv = s.to_dense().unwrap().pseudo_inverse(1e-10).unwrap();
        let expected = pinv * DVector::from_vec(r.clone());
        for (x, y) in e.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        r[0] += 1.0;
        assert!(matches!(coarse_solve(&s, &r), Err(Error::Compatibility { .. })));
    }

    #[test]
    fn homogeneous_solve_contracts_and_is_deterministic() {
        let a = operator(32, 5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0 = random_vec(1024, &mut rng);
        let f = vec![0.0; 1024];
        for kind in [CycleKind::V, CycleKind::W, CycleKind::F] {
            let spec = CycleSpec::new(kind, 1, 1, SmootherSpec::common(1.0))
                .with_prolongation(ProlongationKind::Blackbox);
            let r1 = solve(&a, &f, &u0, &spec, 20, 0.0).unwrap();
            let r2 = solve(&a, &f, &u0, &spec, 20, 0.0).unwrap();
            assert_eq!(r1, r2);
            assert!(!r1.diverged);
            assert_eq!(r1.error_norms.len(), r1.residual_norms.len());
            for w in r1.residual_norms.windows(2) {
                assert!(w[1] < w[0], "{kind:?}: {w:?}");
            }
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let a = operator(16, 6, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u0 = random_vec(256, &mut rng);
        let spec = CycleSpec::new(CycleKind::V, 1, 0, SmootherSpec::Jacobi { omega: 2.5 });
        let report = solve(&a, &vec![0.0; 256], &u0, &spec, 500, 0.0).unwrap();
        assert!(report.diverged);
        assert!(report.cycles_run < 500);
    }

    #[test]
    fn two_grid_matches_dense_propagator() {
        let a = operator(8, 7, 0.01);
        let ad = a.to_dense().unwrap();
        let p = crate::transfer::bilinear_prolongation(8).unwrap().to_dense();
        let ac = p.transpose() * &ad * &p;
        let c = DMatrix::identity(64, 64) - &p * ac.try_inverse().unwrap() * p.transpose() * &ad;
        let dinv = DMatrix::from_diagonal(&ad.diagonal().map(|d| 0.8 / d));
        let s = DMatrix::identity(64, 64) - dinv * &ad;
        let t = &c * &s;
        let spec = CycleSpec::new(CycleKind::TwoGrid, 1, 0, SmootherSpec::Jacobi { omega: 0.8 });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e0 = random_vec(64, &mut rng);
        let mut u = e0.clone();
        two_grid_cycle(&a, &mut u, &[0.0; 64], &spec).unwrap();
        let expected = t * DVector::from_vec(e0);
        for (x, y) in u.iter().zip(expected.iter()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn explicit_diagonal_needs_two_levels() {
        let a = operator(16, 8, 0.01);
        let h = Hierarchy::build(a, ProlongationKind::Bilinear, 4, None).unwrap();
        assert_eq!(h.levels(), 3);
        let spec = CycleSpec::new(
            CycleKind::V,
            1,
            0,
            SmootherSpec::ExplicitDiagonal { diag: vec![0.1; 256] },
        );
        assert!(Solver::new(&h, &spec).is_err());
        let bad = CycleSpec::new(CycleKind::V, 0, 0, SmootherSpec::Spai0);
        assert!(bad.validate().is_err());
    }
}
