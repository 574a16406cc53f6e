//! Small dense-algebra helpers shared by the coarse solver and the spectral code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::StencilOperator;

/// `t^power` by binary powering. `power = 0` gives the identity.
pub(crate) fn matrix_power(t: &DMatrix<f64>, power: u32) -> DMatrix<f64> {
    let n = t.nrows();
    let mut result: Option<DMatrix<f64>> = None;
    let mut base = t.clone();
    let mut e = power;
    loop {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => &r * &base,
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        base = &base * &base;
    }
    result.unwrap_or_else(|| DMatrix::identity(n, n))
}

/// Direct solver for a coarse Galerkin system.
///
/// A singular system whose nullspace is the constants is handled by solving
/// `(A + c 1 1^T) e = r` for zero-mean `r`, which returns the zero-mean solution.
#[derive(Debug, Clone)]
pub(crate) struct DenseSolver {
    inverse: DMatrix<f64>,
    singular: bool,
}

/// Relative mean beyond which a right-hand side is rejected as incompatible
/// with a constant nullspace.
const COMPATIBILITY_TOL: f64 = 1e-8;

impl DenseSolver {
    pub(crate) fn new(a: DMatrix<f64>, singular: bool) -> Result<Self> {
        let n = a.nrows();
        let mut m = a;
        if singular {
            let c = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n as f64;
            m.add_scalar_mut(c / n as f64);
        }
        let inverse = m.try_inverse().ok_or(Error::SingularPropagator)?;
        if inverse.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularPropagator);
        }
        Ok(Self { inverse, singular })
    }

    pub(crate) fn n(&self) -> usize {
        self.inverse.nrows()
    }

    pub(crate) fn is_singular(&self) -> bool {
        self.singular
    }

    pub(crate) fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// Solves into `out`. In the singular case `r` is first projected to
    /// zero mean; a mean that is large relative to `r` is an error.
    pub(crate) fn solve(&self, r: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n();
        if self.singular {
            let mean = r.iter().sum::<f64>() / n as f64;
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if mean.abs() * (n as f64).sqrt() > COMPATIBILITY_TOL * norm.max(f64::MIN_POSITIVE) {
                return Err(Error::Compatibility { mean });
            }
            let centered = DVector::from_iterator(n, r.iter().map(|v| v - mean));
            out.copy_from_slice((&self.inverse * centered).as_slice());
            let m = out.iter().sum::<f64>() / n as f64;
            out.iter_mut().for_each(|v| *v -= m);
        } else {
            let rhs = DVector::from_column_slice(r);
            out.copy_from_slice((&self.inverse * rhs).as_slice());
        }
        Ok(())
    }
}

/// Cholesky factor of a symmetric positive definite periodic stencil
/// operator, stored as a band after reordering the grid rows as
/// `0, m-1, 1, m-2, ...` so that wrapped neighbours stay close.
#[derive(Debug, Clone)]
pub(crate) struct BandedCholesky {
    n: usize,
    band: usize,
    /// `position[x]` is the reordered index of node `x`.
    position: Vec<usize>,
    /// Row `i` holds `L[i][i - band..=i]`.
    factor: Vec<f64>,
}

impl BandedCholesky {
    pub(crate) fn new(a: &StencilOperator) -> Result<Self> {
        let (m, n) = (a.m(), a.n());
        let mut row_order = Vec::with_capacity(m);
        let (mut lo, mut hi) = (0, m);
        while lo < hi {
            row_order.push(lo);
            lo += 1;
            if lo < hi {
                hi -= 1;
                row_order.push(hi);
            }
        }
        let mut position = vec![0; n];
        for (new_row, q) in row_order.iter().enumerate() {
            for p in 0..m {
                position[q * m + p] = new_row * m + p;
            }
        }
        let mut band = 0;
        for x in 0..n {
            for k in 0..9 {
                band = band.max(position[x].abs_diff(position[a.neighbor(x, k)]));
            }
        }
        let w = band + 1;
        let mut factor = vec![0.0; n * w];
        // scatter A into the lower band (duplicate neighbours on tiny grids add up)
        for x in 0..n {
            let i = position[x];
            for (k, v) in a.stencil(x).iter().enumerate() {
                let j = position[a.neighbor(x, k)];
                if j <= i {
                    factor[i * w + band - (i - j)] += v;
                }
            }
        }
        for i in 0..n {
            let first = i.saturating_sub(band);
            for j in first..=i {
                let start = first.max(j.saturating_sub(band));
                let mut sum = factor[i * w + band - (i - j)];
                for k in start..j {
                    sum -= factor[i * w + band - (i - k)] * factor[j * w + band - (j - k)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(Error::SingularPropagator);
                    }
                    factor[i * w + band] = sum.sqrt();
                } else {
                    factor[i * w + band - (i - j)] = sum / factor[j * w + band];
                }
            }
        }
        Ok(Self { n, band, position, factor })
    }

    /// Solves `A X = R` in place for every column of `r`; `work` is resized
    /// as needed.
    pub(crate) fn solve_block(&self, r: &mut DMatrix<f64>, work: &mut Vec<f64>) {
        let (n, band, w, k) = (self.n, self.band, self.band + 1, r.ncols());
        work.clear();
        work.resize(n * k, 0.0);
        for (c, col) in r.column_iter().enumerate() {
            for (x, v) in col.iter().enumerate() {
                work[self.position[x] * k + c] = *v;
            }
        }
        let mut acc = vec![0.0; k];
        for i in 0..n {
            let first = i.saturating_sub(band);
            let row = &self.factor[i * w..(i + 1) * w];
            acc.copy_from_slice(&work[i * k..(i + 1) * k]);
            for j in first..i {
                let l = row[band - (i - j)];
                for (a, v) in acc.iter_mut().zip(&work[j * k..(j + 1) * k]) {
                    *a -= l * v;
                }
            }
            let d = row[band];
            for (dst, a) in work[i * k..(i + 1) * k].iter_mut().zip(&acc) {
                *dst = a / d;
            }
        }
        for i in (0..n).rev() {
            let row = &self.factor[i * w..(i + 1) * w];
            let d = row[band];
            for v in &mut work[i * k..(i + 1) * k] {
                *v /= d;
            }
            acc.copy_from_slice(&work[i * k..(i + 1) * k]);
            let first = i.saturating_sub(band);
            for j in first..i {
                let l = row[band - (i - j)];
                for (v, a) in work[j * k..(j + 1) * k].iter_mut().zip(&acc) {
                    *v -= l * a;
                }
            }
        }
        for (c, mut col) in r.column_iter_mut().enumerate() {
            for (x, v) in col.iter_mut().enumerate() {
                *v = work[self.position[x] * k + c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_match_repeated_products() {
        let t = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 / 10.0 - 0.2);
        let mut expected = DMatrix::identity(5, 5);
        for k in 0..=13u32 {
            let got = matrix_power(&t, k);
            assert!((&got - &expected).amax() <= 1e-12 * expected.amax().max(1.0));
            expected = &expected * &t;
        }
    }

    #[test]
    fn singular_solve_returns_zero_mean_solution() {
        // 1-D periodic Laplacian: nullspace is the constants.
        let n = 6;
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.0
            } else if (i + 1) % n == j || (j + 1) % n == i {
                -1.0
            } else {
                0.0
            }
        });
        let solver = DenseSolver::new(a.clone(), true).unwrap();
        let r = [1.0, -2.0, 0.5, 0.5, 1.0, -1.0];
        let mut e = [0.0; 6];
        solver.solve(&r, &mut e).unwrap();
        assert!(e.iter().sum::<f64>().abs() < 1e-12);
        let back = &a * DVector::from_column_slice(&e);
        for (x, y) in back.iter().zip(r) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            solver.solve(&[1.0; 6], &mut e),
            Err(Error::Compatibility { .. })
        ));
    }

    #[test]
    fn banded_cholesky_solves_periodic_operators() {
        use crate::problem::{assemble, sample_lognormal_field, GridGeometry, LogNormal};
        for (m, seed) in [(4, 2), (6, 3), (8, 4), (16, 5)] {
            let field = sample_lognormal_field(GridGeometry::isotropic(m).unwrap(), LogNormal::default(), seed).unwrap();
            let a = assemble(&field, 0.05).unwrap();
            let chol = BandedCholesky::new(&a).unwrap();
            let mut block = DMatrix::from_fn(a.n(), 3, |i, c| ((i + 5 * c) as f64 * 0.7).sin());
            let rhs = block.clone();
            let mut work = Vec::new();
            chol.solve_block(&mut block, &mut work);
            for c in 0..3 {
                let x: Vec<f64> = block.column(c).iter().copied().collect();
                let back = a.matvec(&x).unwrap();
                let err = back.iter().zip(rhs.column(c).iter()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10, "m={m}: {err}");
            }
        }
    }
}
