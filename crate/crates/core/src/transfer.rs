//! Grid transfer: bilinear and Black Box prolongation, restriction by the
//! transpose, and Galerkin coarse operators in stencil form.
//!
//! Coarse node `(Q, P)` sits on fine node `(2Q, 2P)`. A fine node `(q, p)` has
//! its coarse parents at `(q/2 + i, p/2 + j)` with `i` ranging over `0..=q%2`
//! and `j` over `0..=p%2`, so it has 1, 2 or 4 parents depending on whether it
//! is coincident, on an edge, or at a cell center.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{slot, wrap, StencilOperator, CENTER};

/// Smallest coarse grid side produced by coarsening.
pub const MIN_COARSE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProlongationKind {
    #[default]
    Bilinear,
    Blackbox,
}

impl std::str::FromStr for ProlongationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "blackbox" => Ok(Self::Blackbox),
            other => Err(Error::Config(format!("unknown prolongation '{other}'"))),
        }
    }
}

/// Interpolation from an `m/2 x m/2` coarse grid to an `m x m` fine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prolongation {
    kind: ProlongationKind,
    m_fine: usize,
    /// Per fine node, weights of parents `(i, j)` at index `2 i + j`.
    weights: Vec<[f64; 4]>,
    /// Coarse index for each weight slot; absent parents point at `(q/2, p/2)`
    /// and carry weight 0.
    links: Vec<[usize; 4]>,
}

impl Prolongation {
    fn from_weights(kind: ProlongationKind, m_fine: usize, mut weights: Vec<[f64; 4]>) -> Self {
        let mc = m_fine / 2;
        let links = (0..m_fine * m_fine)
            .map(|x| {
                let (q, p) = (x / m_fine, x % m_fine);
                let mut l = [0; 4];
                for i in 0..2 {
                    for j in 0..2 {
                        let (di, dj) = (i.min(q % 2), j.min(p % 2));
                        if di != i || dj != j {
                            weights[x][2 * i + j] = 0.0;
                        }
                        l[2 * i + j] = ((q / 2 + di) % mc) * mc + (p / 2 + dj) % mc;
                    }
                }
                l
            })
            .collect();
        Self {
            kind,
            m_fine,
            weights,
            links,
        }
    }

    pub fn kind(&self) -> ProlongationKind {
        self.kind
    }

    pub fn m_fine(&self) -> usize {
        self.m_fine
    }

    pub fn m_coarse(&self) -> usize {
        self.m_fine / 2
    }

    pub fn n_fine(&self) -> usize {
        self.m_fine * self.m_fine
    }

    pub fn n_coarse(&self) -> usize {
        self.m_coarse() * self.m_coarse()
    }

    /// Coarse parents of fine node `x` with their weights.
    pub fn parents(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let m = self.m_fine;
        let mc = self.m_coarse();
        let (q, p) = (x / m, x % m);
        let w = &self.weights[x];
        (0..=q % 2).flat_map(move |i| {
            (0..=p % 2).map(move |j| {
                let cq = (q / 2 + i) % mc;
                let cp = (p / 2 + j) % mc;
                (cq * mc + cp, w[2 * i + j])
            })
        })
    }

    /// Scales every weight by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for w in &mut out.weights {
            w.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    fn check(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension { expected, got })
        }
    }

    /// `e_fine = P e_coarse`.
    pub fn prolong(&self, coarse: &[f64]) -> Result<Vec<f64>> {
        Self::check(self.n_coarse(), coarse.len())?;
        let mut out = vec![0.0; self.n_fine()];
        self.prolong_add(coarse, &mut out);
        Ok(out)
    }

    /// `fine += P coarse`, unchecked.
    pub(crate) fn prolong_add(&self, coarse: &[f64], fine: &mut [f64]) {
        for ((f, w), l) in fine.iter_mut().zip(&self.weights).zip(&self.links) {
            *f += w[0] * coarse[l[0]] + w[1] * coarse[l[1]] + w[2] * coarse[l[2]] + w[3] * coarse[l[3]];
        }
    }

    /// `r_coarse = P^T r_fine`.
    pub fn restrict(&self, fine: &[f64]) -> Result<Vec<f64>> {
        Self::check(self.n_fine(), fine.len())?;
        let mut out = vec![0.0; self.n_coarse()];
        self.restrict_into(fine, &mut out);
        Ok(out)
    }

    pub(crate) fn restrict_into(&self, fine: &[f64], coarse: &mut [f64]) {
        coarse.iter_mut().for_each(|v| *v = 0.0);
        for ((r, w), l) in fine.iter().zip(&self.weights).zip(&self.links) {
            for k in 0..4 {
                coarse[l[k]] += w[k] * r;
            }
        }
    }

    /// Dense `n_fine x n_coarse` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.n_fine(), self.n_coarse());
        for x in 0..self.n_fine() {
            for (c, w) in self.parents(x) {
                p[(x, c)] += w;
            }
        }
        p
    }
}

fn check_fine_side(m: usize) -> Result<()> {
    if m % 2 != 0 {
        return Err(Error::InvalidGeometry(format!(
            "prolongation needs an even fine grid side, got {m}"
        )));
    }
    if m / 2 < MIN_COARSE {
        return Err(Error::CoarseTooSmall(m / 2));
    }
    Ok(())
}

/// Bilinear interpolation: weight 1 at coincident nodes, 1/2 on edges, 1/4 at
/// cell centers.
pub fn bilinear_prolongation(m_fine: usize) -> Result<Prolongation> {
    check_fine_side(m_fine)?;
    let weights = (0..m_fine * m_fine)
        .map(|x| {
            let parents = (1 + (x / m_fine) % 2) * (1 + (x % m_fine) % 2);
            let w = 1.0 / parents as f64;
            let mut out = [0.0; 4];
            out.iter_mut().take(parents).for_each(|v| *v = w);
            // a vertical-edge node stores its second parent at index 2
            if parents == 2 && (x / m_fine) % 2 == 1 {
                out = [w, 0.0, w, 0.0];
            }
            out
        })
        .collect();
    Ok(Prolongation::from_weights(ProlongationKind::Bilinear, m_fine, weights))
}

/// Operator-dependent interpolation obtained by collapsing the fine stencil.
///
/// * Horizontal-edge nodes (even `q`, odd `p`) sum the stencil over rows, giving
///   a 1-D three-point stencil `(s_w, s_c, s_e)`; the weights are `-s_w/s_c`
///   and `-s_e/s_c`.
/// * Vertical-edge nodes do the same with columns.
/// * A cell-center node takes, for each corner parent `K`, the coupling to `K`
///   plus the couplings through the two edge neighbours adjacent to `K`
///   (weighted by their interpolation weight from `K`), divided by the negated
///   center.
pub fn blackbox_prolongation(a: &StencilOperator) -> Result<Prolongation> {
    let m = a.m();
    check_fine_side(m)?;
    let mut weights = vec![[0.0; 4]; m * m];
    let ratio = |num: f64, den: f64, q: usize, p: usize| -> Result<f64> {
        if den == 0.0 || !den.is_finite() {
            Err(Error::DegenerateStencil { q, p })
        } else {
            Ok(-num / den)
        }
    };
    // Edge nodes first; cell centers reuse their weights.
    for q in 0..m {
        for p in 0..m {
            let s = a.stencil(q * m + p);
            let w = &mut weights[q * m + p];
            match (q % 2, p % 2) {
                (0, 0) => w[0] = 1.0,
                (0, 1) => {
                    let col = |dp| (-1..=1).map(|dq| s[slot(dq, dp)]).sum::<f64>();
                    let c = col(0);
                    w[0] = ratio(col(-1), c, q, p)?;
                    w[1] = ratio(col(1), c, q, p)?;
                }
                (1, 0) => {
                    let row = |dq| (-1..=1).map(|dp| s[slot(dq, dp)]).sum::<f64>();
                    let c = row(0);
                    w[0] = ratio(row(-1), c, q, p)?;
                    w[2] = ratio(row(1), c, q, p)?;
                }
                _ => {}
            }
        }
    }
    for q in (1..m).step_by(2) {
        for p in (1..m).step_by(2) {
            let s = a.stencil(q * m + p);
            let north = weights[wrap(q, -1, m) * m + p];
            let south = weights[wrap(q, 1, m) * m + p];
            let west = weights[q * m + wrap(p, -1, m)];
            let east = weights[q * m + wrap(p, 1, m)];
            // (corner offset, parent index, north/south edge weight, west/east edge weight)
            let corners = [
                ((-1, -1), 0, north[0], west[0]),
                ((-1, 1), 1, north[1], east[0]),
                ((1, -1), 2, south[0], west[2]),
                ((1, 1), 3, south[1], east[2]),
            ];
            let mut w = [0.0; 4];
            for ((dq, dp), idx, w_vert_edge, w_horiz_edge) in corners {
                let num = s[slot(dq, dp)] + s[slot(dq, 0)] * w_vert_edge + s[slot(0, dp)] * w_horiz_edge;
                w[idx] = ratio(num, s[CENTER], q, p)?;
            }
            weights[q * m + p] = w;
        }
    }
    Ok(Prolongation::from_weights(ProlongationKind::Blackbox, m, weights))
}

pub fn build_prolongation(a: &StencilOperator, kind: ProlongationKind) -> Result<Prolongation> {
    match kind {
        ProlongationKind::Bilinear => bilinear_prolongation(a.m()),
        ProlongationKind::Blackbox => blackbox_prolongation(a),
    }
}

/// `P^T A P` as a 9-point periodic stencil operator on the coarse grid.
pub fn galerkin_coarsen(a: &StencilOperator, p: &Prolongation) -> Result<StencilOperator> {
    let m = a.m();
    if p.m_fine() != m {
        return Err(Error::Dimension {
            expected: m,
            got: p.m_fine(),
        });
    }
    let mc = p.m_coarse();
    if mc < MIN_COARSE {
        return Err(Error::CoarseTooSmall(mc));
    }
    let mut stencils = vec![[0.0; 9]; mc * mc];
    let fine_at = |q0: usize, p0: usize, a_: isize, b_: isize| wrap(q0, a_, m) * m + wrap(p0, b_, m);
    for cq in 0..mc {
        for cp in 0..mc {
            let (q0, p0) = (2 * cq, 2 * cp);
            // Column of P for this coarse node on its 3x3 fine footprint.
            let mut col = [[0.0; 3]; 3];
            for a_ in -1isize..=1 {
                for b_ in -1isize..=1 {
                    let i = (-a_.div_euclid(2)) as usize;
                    let j = (-b_.div_euclid(2)) as usize;
                    col[(a_ + 1) as usize][(b_ + 1) as usize] =
                        p.weights[fine_at(q0, p0, a_, b_)][2 * i + j];
                }
            }
            // A P e_J on the 5x5 patch, then restrict back onto coarse offsets.
            for a_ in -2isize..=2 {
                for b_ in -2isize..=2 {
                    let y = fine_at(q0, p0, a_, b_);
                    let s = a.stencil(y);
                    let mut v = 0.0;
                    for dq in -1isize..=1 {
                        for dp in -1isize..=1 {
                            let (ca, cb) = (a_ + dq, b_ + dp);
                            if ca.abs() <= 1 && cb.abs() <= 1 {
                                v += s[slot(dq, dp)] * col[(ca + 1) as usize][(cb + 1) as usize];
                            }
                        }
                    }
                    if v == 0.0 {
                        continue;
                    }
                    let w = &p.weights[y];
                    for i in 0..=(a_.rem_euclid(2) as usize) {
                        for j in 0..=(b_.rem_euclid(2) as usize) {
                            let di = a_.div_euclid(2) + i as isize;
                            let dj = b_.div_euclid(2) + j as isize;
                            let row = wrap(cq, di, mc) * mc + wrap(cp, dj, mc);
                            stencils[row][slot(-di, -dj)] += w[2 * i + j] * v;
                        }
                    }
                }
            }
        }
    }
    StencilOperator::from_stencils(mc, stencils, a.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{assemble, sample_lognormal_field, DiffusivityField, GridGeometry, LogNormal};
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
    fn bilinear_weights_and_constants() {
        let p = bilinear_prolongation(8).unwrap();
        let fine = p.prolong(&[1.0; 16]).unwrap();
        assert!(fine.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let mut e = vec![0.0; 16];
        e[5] = 1.0; // coarse (1, 1) -> fine (2, 2)
        let fine = p.prolong(&e).unwrap();
        let at = |q: usize, p_: usize| fine[q * 8 + p_];
        assert_eq!(at(2, 2), 1.0);
        for (q, p_) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(at(q, p_), 0.5);
        }
        for (q, p_) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
            assert_eq!(at(q, p_), 0.25);
        }
        assert_eq!(fine.iter().filter(|v| **v != 0.0).count(), 9);
        for x in 0..64 {
            let count = p.parents(x).count();
            assert!([1, 2, 4].contains(&count));
        }
    }

    #[test]
    fn scaled_transpose_is_full_weighting() {
        let p = bilinear_prolongation(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_vec(64, &mut rng);
        let rc = p.restrict(&r).unwrap();
        let at = |q: isize, p_: isize| r[(q.rem_euclid(8) * 8 + p_.rem_euclid(8)) as usize];
        for cq in 0..4isize {
            for cp in 0..4isize {
                let (q, p_) = (2 * cq, 2 * cp);
                let expected = at(q, p_) / 4.0
                    + (at(q - 1, p_) + at(q + 1, p_) + at(q, p_ - 1) + at(q, p_ + 1)) / 8.0
                    + (at(q - 1, p_ - 1) + at(q - 1, p_ + 1) + at(q + 1, p_ - 1) + at(q + 1, p_ + 1)) / 16.0;
                assert!((rc[(cq * 4 + cp) as usize] / 4.0 - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blackbox_is_bilinear_for_constant_coefficients() {
        for geometry in [GridGeometry::isotropic(8).unwrap(), GridGeometry::new(8, 1.0, 2.0).unwrap()] {
            let field = DiffusivityField::constant(geometry, 1.0).unwrap();
            let a = assemble(&field, 0.0).unwrap();
            let bb = blackbox_prolongation(&a).unwrap().to_dense();
            let bl = bilinear_prolongation(8).unwrap().to_dense();
            assert!((bb - bl).amax() <= 1e-12);
        }
    }

    #[test]
    fn blackbox_reproduces_constants_without_shift() {
        let a = operator(8, 6, 0.0);
        let p = blackbox_prolongation(&a).unwrap();
        for x in (0..64).filter(|x| (x / 8) % 2 == 0 && x % 2 == 0) {
            assert_eq!(p.parents(x).next().unwrap().1, 1.0);
        }
        let fine = p.prolong(&[1.0; 16]).unwrap();
        assert!(fine.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn degenerate_stencil_is_reported() {
        let mut stencils = vec![[0.0, 0.0, 0.0, -1.0, 2.0, -1.0, 0.0, 0.0, 0.0]; 64];
        // horizontal-edge node (0, 1): zero out its middle column
        stencils[1] = [0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0];
        let a = StencilOperator::from_stencils(8, stencils, 0.0).unwrap();
        assert!(matches!(
            blackbox_prolongation(&a),
            Err(Error::DegenerateStencil { q: 0, p: 1 })
        ));
    }

    #[test]
    fn restriction_is_the_adjoint() {
        let a = operator(8, 7, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in [bilinear_prolongation(8).unwrap(), blackbox_prolongation(&a).unwrap()] {
            let e = random_vec(16, &mut rng);
            let r = random_vec(64, &mut rng);
            let lhs: f64 = p.prolong(&e).unwrap().iter().zip(&r).map(|(x, y)| x * y).sum();
            let rhs: f64 = p.restrict(&r).unwrap().iter().zip(&e).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            assert!(p.restrict(&[0.0; 64]).unwrap().iter().all(|v| *v == 0.0));
            assert!(matches!(p.restrict(&[0.0; 10]), Err(Error::Dimension { .. })));
        }
    }

    #[test]
    fn zero_mean_survives_restriction() {
        let p = bilinear_prolongation(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut r = random_vec(256, &mut rng);
        let mean = r.iter().sum::<f64>() / 256.0;
        r.iter_mut().for_each(|v| *v -= mean);
        let rc = p.restrict(&r).unwrap();
        assert!(rc.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn galerkin_matches_dense_triple_product() {
        for (kind, delta) in [
            (ProlongationKind::Bilinear, 0.0),
            (ProlongationKind::Bilinear, 0.01),
            (ProlongationKind::Blackbox, 0.0),
            (ProlongationKind::Blackbox, 0.01),
        ] {
            let a = operator(8, 9, delta);
            let p = build_prolongation(&a, kind).unwrap();
            let ac = galerkin_coarsen(&a, &p).unwrap();
            let pd = p.to_dense();
            let expected = pd.transpose() * a.to_dense().unwrap() * &pd;
            let got = ac.to_dense().unwrap();
            assert!((&got - &expected).amax() <= 1e-12 * expected.amax());
            assert!((&got - got.transpose()).amax() <= 1e-12 * expected.amax());
            if delta == 0.0 {
                assert!(ac.annihilates_constants());
            }
        }
    }

    #[test]
    fn coarsening_closes_down_to_the_minimum() {
        let mut a = operator(32, 10, 0.0);
        while a.m() >= 2 * MIN_COARSE {
            let p = blackbox_prolongation(&a).unwrap();
            a = galerkin_coarsen(&a, &p).unwrap();
            assert!(a.annihilates_constants());
        }
        assert_eq!(a.m(), MIN_COARSE);
        assert!(matches!(bilinear_prolongation(6), Err(Error::CoarseTooSmall(3))));
    }

    #[test]
    fn coarse_correction_is_invariant_to_scaling_p() {
        let a = operator(8, 11, 0.01);
        let ad = a.to_dense().unwrap();
        let p = bilinear_prolongation(8).unwrap();
        let correction = |p: &Prolongation| {
            let pd = p.to_dense();
            let ac = pd.transpose() * &ad * &pd;
            &pd * ac.try_inverse().unwrap() * pd.transpose()
        };
        let base = correction(&p);
        let scaled = correction(&p.scaled(3.0));
        assert!((base - scaled).amax() <= 1e-12);
    }
}
