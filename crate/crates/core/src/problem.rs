//! Random diffusivity fields and the bilinear finite element 9-point operator
//! on an `m x m` doubly periodic grid.
//!
//! Node `(q, p)` sits at row `q` (the y direction) and column `p` (the x
//! direction) and is flattened row-major to `x = q * m + p`. The coefficient
//! of the cell whose upper-left node is `(q, p)` is stored at `g[q * m + p]`,
//! so the four cells around node `(q, p)` are `(q-1, p-1)`, `(q-1, p)`,
//! `(q, p)` and `(q, p-1)`, all indices taken modulo `m`.
//!
//! Random fields are drawn from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`; sample `i` of an ensemble uses stream `i` of the master
//! seed, so ensembles are reproducible across platforms.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stencil slot of the node itself.
pub const CENTER: usize = 4;

/// `(dq, dp)` offsets of the nine stencil slots, slot `k = (dq + 1) * 3 + (dp + 1)`.
pub const OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Largest grid side for which dense matrices are built by default.
pub const DENSE_LIMIT: usize = 32;

/// Slot of the offset `(dq, dp)`.
#[inline]
pub fn slot(dq: isize, dp: isize) -> usize {
    ((dq + 1) * 3 + (dp + 1)) as usize
}

/// Slot of the opposite offset.
#[inline]
pub fn mirror(k: usize) -> usize {
    8 - k
}

#[inline]
pub(crate) fn wrap(i: usize, d: isize, m: usize) -> usize {
    ((i as isize + d).rem_euclid(m as isize)) as usize
}

/// Flat row-major index of node `(q, p)`.
pub fn node_index(q: usize, p: usize, m: usize) -> Result<usize> {
    if q >= m || p >= m {
        return Err(Error::Index { q, p, m });
    }
    Ok(q * m + p)
}

/// ChaCha8 generator for sample `index` of an ensemble rooted at `master_seed`.
pub fn sample_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    m: usize,
    hx: f64,
    hy: f64,
}

impl GridGeometry {
    pub fn new(m: usize, hx: f64, hy: f64) -> Result<Self> {
        if m < 4 || m % 2 != 0 {
            return Err(Error::InvalidGeometry(format!(
                "grid side must be even and at least 4, got {m}"
            )));
        }
        if !(hx > 0.0 && hx.is_finite() && hy > 0.0 && hy.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "mesh sizes must be positive, got hx={hx} hy={hy}"
            )));
        }
        Ok(Self { m, hx, hy })
    }

    pub fn isotropic(m: usize) -> Result<Self> {
        Self::new(m, 1.0, 1.0)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.m * self.m
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn is_isotropic(&self) -> bool {
        self.hx == self.hy
    }
}

/// Parameters of `g = exp(mu + sigma * Z)` with `Z` standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for LogNormal {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusivityField {
    geometry: GridGeometry,
    g: Vec<f64>,
    seed: Option<u64>,
}

impl DiffusivityField {
    pub fn new(geometry: GridGeometry, g: Vec<f64>) -> Result<Self> {
        if g.len() != geometry.n() {
            return Err(Error::Dimension {
                expected: geometry.n(),
                got: g.len(),
            });
        }
        if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidField(format!(
                "coefficient {v} at cell {i} is not positive"
            )));
        }
        Ok(Self {
            geometry,
            g,
            seed: None,
        })
    }

    /// Constant field; `value = 1` gives the Poisson problem.
    pub fn constant(geometry: GridGeometry, value: f64) -> Result<Self> {
        Self::new(geometry, vec![value; geometry.n()])
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn m(&self) -> usize {
        self.geometry.m
    }

    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Coefficient of the cell whose upper-left node is `(q, p)`, periodic.
    #[inline]
    pub fn cell(&self, q: isize, p: isize) -> f64 {
        let m = self.geometry.m as isize;
        self.g[(q.rem_euclid(m) * m + p.rem_euclid(m)) as usize]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let seed = self
            .seed
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into());
        writeln!(
            w,
            "# m={} hx={} hy={} seed={}",
            self.geometry.m, self.geometry.hx, self.geometry.hy, seed
        )?;
        let m = self.geometry.m;
        for row in self.g.chunks(m) {
            let mut line = String::new();
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                write!(line, "{v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidField("empty field file".into()))??;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::InvalidField("missing '# m=...' header".into()))?;
        let (mut m, mut hx, mut hy, mut seed) = (None, None, None, None);
        for item in header.split_whitespace() {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidField(format!("bad header item '{item}'")))?;
            let bad = |_| Error::InvalidField(format!("bad header value '{item}'"));
            match key {
                "m" => m = Some(value.parse::<usize>().map_err(|_| bad(()))?),
                "hx" => hx = Some(value.parse::<f64>().map_err(|_| bad(()))?),
                "hy" => hy = Some(value.parse::<f64>().map_err(|_| bad(()))?),
                "seed" => {
                    seed = if value == "none" {
                        None
                    } else {
                        Some(value.parse::<u64>().map_err(|_| bad(()))?)
                    }
                }
                _ => {}
            }
        }
        let missing = |k: &str| Error::InvalidField(format!("header lacks '{k}'"));
        let geometry = GridGeometry::new(
            m.ok_or_else(|| missing("m"))?,
            hx.ok_or_else(|| missing("hx"))?,
            hy.ok_or_else(|| missing("hy"))?,
        )?;
        let mut g = Vec::with_capacity(geometry.n());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for v in line.split(',') {
                g.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidField(format!("bad value '{v}'")))?,
                );
            }
        }
        let mut field = Self::new(geometry, g)?;
        field.seed = seed;
        Ok(field)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Draws `g = exp(mu + sigma * Z)` i.i.d. per cell from the ChaCha8 stream
/// seeded with `seed`.
pub fn sample_lognormal_field(
    geometry: GridGeometry,
    dist: LogNormal,
    seed: u64,
) -> Result<DiffusivityField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = lognormal_from_rng(geometry, dist, &mut rng)?;
    field.seed = Some(seed);
    Ok(field)
}

/// Same as [`sample_lognormal_field`] but drawing from a caller-supplied generator.
pub fn lognormal_from_rng<R: Rng>(
    geometry: GridGeometry,
    dist: LogNormal,
    rng: &mut R,
) -> Result<DiffusivityField> {
    let g = (0..geometry.n())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (dist.mu + dist.sigma * z).exp()
        })
        .collect();
    DiffusivityField::new(geometry, g)
}

fn default_aspect() -> (f64, f64) {
    (1.0, 2.0)
}

/// How the fields of an ensemble are drawn.
///
/// Each sample is anisotropic (mesh sizes `aspect`) with probability
/// `anisotropic_fraction` and isotropic with unit mesh size otherwise. With
/// `constant` set every sample is the `g = 1` field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub m: usize,
    #[serde(default)]
    pub distribution: LogNormal,
    #[serde(default)]
    pub anisotropic_fraction: f64,
    #[serde(default = "default_aspect")]
    pub aspect: (f64, f64),
    #[serde(default)]
    pub constant: bool,
}

impl EnsembleSpec {
    pub fn lognormal(m: usize) -> Self {
        Self {
            m,
            distribution: LogNormal::default(),
            anisotropic_fraction: 0.0,
            aspect: default_aspect(),
            constant: false,
        }
    }

    pub fn constant(m: usize) -> Self {
        Self {
            constant: true,
            ..Self::lognormal(m)
        }
    }

    pub fn validate(&self) -> Result<()> {
        GridGeometry::new(self.m, self.aspect.0, self.aspect.1)?;
        if !(0.0..=1.0).contains(&self.anisotropic_fraction) {
            return Err(Error::InvalidGeometry(format!(
                "anisotropic fraction {} outside [0, 1]",
                self.anisotropic_fraction
            )));
        }
        if !(self.distribution.sigma >= 0.0 && self.distribution.mu.is_finite()) {
            return Err(Error::InvalidField(format!("bad distribution {:?}", self.distribution)));
        }
        Ok(())
    }

    /// Sample `index` of the ensemble with master seed `seed`. Random fields
    /// carry `seed` as their tag.
    pub fn field(&self, seed: u64, index: u64) -> Result<DiffusivityField> {
        let mut rng = sample_rng(seed, index);
        let anisotropic = match self.anisotropic_fraction {
            f if f <= 0.0 => false,
            f if f >= 1.0 => true,
            f => rng.random::<f64>() < f,
        };
        let geometry = if anisotropic {
            GridGeometry::new(self.m, self.aspect.0, self.aspect.1)?
        } else {
            GridGeometry::isotropic(self.m)?
        };
        if self.constant {
            return DiffusivityField::constant(geometry, 1.0);
        }
        let mut field = lognormal_from_rng(geometry, self.distribution, &mut rng)?;
        field.seed = Some(seed);
        Ok(field)
    }

    pub fn operator(&self, seed: u64, index: u64, delta: f64) -> Result<StencilOperator> {
        assemble(&self.field(seed, index)?, delta)
    }
}

/// Periodic 9-point operator stored as one stencil per node.
///
/// `stencils[x][k]` is the matrix entry `A[x, y]` where `y` is the neighbour of
/// node `x` at offset `OFFSETS[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilOperator {
    m: usize,
    stencils: Vec<[f64; 9]>,
    delta: f64,
}

impl StencilOperator {
    pub fn from_stencils(m: usize, stencils: Vec<[f64; 9]>, delta: f64) -> Result<Self> {
        if m < 3 {
            return Err(Error::InvalidGeometry(format!(
                "stencil operators need m >= 3, got {m}"
            )));
        }
        if stencils.len() != m * m {
            return Err(Error::Dimension {
                expected: m * m,
                got: stencils.len(),
            });
        }
        Ok(Self { m, stencils, delta })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.m * self.m
    }

    /// Diagonal shift used at assembly (inherited by coarse operators).
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn stencils(&self) -> &[[f64; 9]] {
        &self.stencils
    }

    #[inline]
    pub fn stencil(&self, x: usize) -> &[f64; 9] {
        &self.stencils[x]
    }

    #[inline]
    pub fn diag(&self, x: usize) -> f64 {
        self.stencils[x][CENTER]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.stencils.iter().map(|s| s[CENTER]).collect()
    }

    /// Flat index of the neighbour of `x` in slot `k`.
    #[inline]
    pub fn neighbor(&self, x: usize, k: usize) -> usize {
        let (dq, dp) = OFFSETS[k];
        let (q, p) = (x / self.m, x % self.m);
        wrap(q, dq, self.m) * self.m + wrap(p, dp, self.m)
    }

    /// Row sums of the materialised matrix.
    pub fn row_sums(&self) -> Vec<f64> {
        self.stencils.iter().map(|s| s.iter().sum()).collect()
    }

    /// True when the operator annihilates constants (to round-off), i.e. the
    /// pure periodic diffusion operator without a diagonal shift.
    pub fn annihilates_constants(&self) -> bool {
        let scale = self
            .stencils
            .iter()
            .map(|s| s[CENTER].abs())
            .fold(0.0, f64::max);
        self.stencils
            .iter()
            .all(|s| s.iter().sum::<f64>().abs() <= 1e-10 * scale)
    }

    /// `(A u)_x = sum_k stencil[x][k] * u[neighbor(x, k)]` for a single row.
    #[inline]
    pub(crate) fn row_dot(&self, x: usize, u: &[f64]) -> f64 {
        let m = self.m;
        let (q, p) = (x / m, x % m);
        let qm = if q == 0 { m - 1 } else { q - 1 } * m;
        let qc = q * m;
        let qp = if q + 1 == m { 0 } else { q + 1 } * m;
        let pm = if p == 0 { m - 1 } else { p - 1 };
        let pp = if p + 1 == m { 0 } else { p + 1 };
        let s = &self.stencils[x];
        s[0] * u[qm + pm]
            + s[1] * u[qm + p]
            + s[2] * u[qm + pp]
            + s[3] * u[qc + pm]
            + s[4] * u[qc + p]
            + s[5] * u[qc + pp]
            + s[6] * u[qp + pm]
            + s[7] * u[qp + p]
            + s[8] * u[qp + pp]
    }

    pub(crate) fn apply_unchecked(&self, u: &[f64], out: &mut [f64]) {
        let m = self.m;
        for q in 0..m {
            let qm = if q == 0 { m - 1 } else { q - 1 } * m;
            let qc = q * m;
            let qp = if q + 1 == m { 0 } else { q + 1 } * m;
            for p in 0..m {
                let pm = if p == 0 { m - 1 } else { p - 1 };
                let pp = if p + 1 == m { 0 } else { p + 1 };
                let s = &self.stencils[qc + p];
                out[qc + p] = s[0] * u[qm + pm]
                    + s[1] * u[qm + p]
                    + s[2] * u[qm + pp]
                    + s[3] * u[qc + pm]
                    + s[4] * u[qc + p]
                    + s[5] * u[qc + pp]
                    + s[6] * u[qp + pm]
                    + s[7] * u[qp + p]
                    + s[8] * u[qp + pp];
            }
        }
    }

    pub(crate) fn residual_unchecked(&self, u: &[f64], f: &[f64], out: &mut [f64]) {
        self.apply_unchecked(u, out);
        for (r, fi) in out.iter_mut().zip(f) {
            *r = fi - *r;
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                got: len,
            });
        }
        Ok(())
    }

    /// Matrix-vector product `out = A u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_len(u.len())?;
        self.check_len(out.len())?;
        self.apply_unchecked(u, out);
        Ok(())
    }

    pub fn matvec(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n()];
        self.apply(u, &mut out)?;
        Ok(out)
    }

    /// `f - A u`.
    pub fn residual(&self, u: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u.len())?;
        self.check_len(f.len())?;
        let mut out = vec![0.0; self.n()];
        self.residual_unchecked(u, f, &mut out);
        Ok(out)
    }

    /// Dense `n x n` matrix, refusing grids larger than [`DENSE_LIMIT`].
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        self.to_dense_with_limit(DENSE_LIMIT)
    }

    pub fn to_dense_with_limit(&self, limit: usize) -> Result<DMatrix<f64>> {
        if self.m > limit {
            return Err(Error::TooLarge { m: self.m, limit });
        }
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for x in 0..n {
            for k in 0..9 {
                a[(x, self.neighbor(x, k))] += self.stencils[x][k];
            }
        }
        Ok(a)
    }

    /// Coordinate-list dump, one `row col value` line per stored entry.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        for x in 0..self.n() {
            for k in 0..9 {
                writeln!(w, "{} {} {}", x, self.neighbor(x, k), self.stencils[x][k])?;
            }
        }
        Ok(())
    }

    /// Stencil-wise sum, used to check linearity in `g`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_len(other.n())?;
        let stencils = self
            .stencils
            .iter()
            .zip(&other.stencils)
            .map(|(a, b)| std::array::from_fn(|k| a[k] + b[k]))
            .collect();
        Ok(Self {
            m: self.m,
            stencils,
            delta: self.delta + other.delta,
        })
    }
}

/// Assembles the bilinear finite element diffusion operator of `field` with
/// `delta` added to every diagonal entry.
pub fn assemble(field: &DiffusivityField, delta: f64) -> Result<StencilOperator> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidField(format!(
            "diagonal shift must be non-negative, got {delta}"
        )));
    }
    let geometry = field.geometry();
    let m = geometry.m();
    let cx = 1.0 / (geometry.hx() * geometry.hx());
    let cy = 1.0 / (geometry.hy() * geometry.hy());
    let corner = -(cx + cy) / 6.0;
    let vertical = (cx - 2.0 * cy) / 6.0;
    let horizontal = (cy - 2.0 * cx) / 6.0;
    let center = (cx + cy) / 3.0;

    let mut stencils = Vec::with_capacity(m * m);
    for q in 0..m as isize {
        for p in 0..m as isize {
            let nw = field.cell(q - 1, p - 1);
            let ne = field.cell(q - 1, p);
            let se = field.cell(q, p);
            let sw = field.cell(q, p - 1);
            let mut s = [0.0; 9];
            s[slot(-1, -1)] = corner * nw;
            s[slot(-1, 1)] = corner * ne;
            s[slot(1, 1)] = corner * se;
            s[slot(1, -1)] = corner * sw;
            s[slot(-1, 0)] = vertical * (nw + ne);
            s[slot(1, 0)] = vertical * (se + sw);
            s[slot(0, 1)] = horizontal * (ne + se);
            s[slot(0, -1)] = horizontal * (sw + nw);
            s[CENTER] = center * (nw + ne + se + sw) + delta;
            stencils.push(s);
        }
    }
    StencilOperator::from_stencils(m, stencils, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
        }};
    }

    fn random_field(m: usize, seed: u64) -> DiffusivityField {
        sample_lognormal_field(GridGeometry::isotropic(m).unwrap(), LogNormal::default(), seed)
            .unwrap()
    }

    #[test]
    fn node_index_examples() {
        assert_eq!(node_index(0, 0, 16).unwrap(), 0);
        assert_eq!(node_index(1, 0, 16).unwrap(), 16);
        assert_eq!(node_index(15, 15, 16).unwrap(), 255);
        assert!(matches!(node_index(16, 0, 16), Err(Error::Index { .. })));
    }

    #[test]
    fn geometry_rejects_odd_and_small_grids() {
        assert!(GridGeometry::isotropic(5).is_err());
        assert!(GridGeometry::isotropic(2).is_err());
        assert!(GridGeometry::new(8, 0.0, 1.0).is_err());
        let field = sample_lognormal_field(
            GridGeometry::isotropic(16).unwrap(),
            LogNormal::default(),
            3,
        );
        assert!(field.is_ok());
    }

    #[test]
    fn sampling_is_deterministic_and_positive() {
        let a = random_field(16, 99);
        let b = random_field(16, 99);
        assert_eq!(a, b);
        assert_eq!(a.values().len(), 256);
        assert!(a.values().iter().all(|v| *v > 0.0));
        assert_ne!(a, random_field(16, 100));
    }

    #[test]
    fn ensemble_draws() {
        let spec = EnsembleSpec::lognormal(64);
        assert_eq!(spec.field(4, 2).unwrap(), spec.field(4, 2).unwrap());
        let logs: Vec<f64> = spec.field(4, 2).unwrap().values().iter().map(|v| v.ln()).collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let std = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05 && (std - 1.0).abs() < 0.05, "{mean} {std}");

        let constant = EnsembleSpec::constant(8).field(1, 0).unwrap();
        assert!(constant.values().iter().all(|v| *v == 1.0));

        let mixed = EnsembleSpec {
            anisotropic_fraction: 0.5,
            ..EnsembleSpec::lognormal(8)
        };
        let aniso = (0..200)
            .filter(|i| mixed.field(9, *i).unwrap().geometry().hy() == 2.0)
            .count();
        assert!((70..=130).contains(&aniso), "{aniso}");
        assert!(EnsembleSpec { anisotropic_fraction: 1.5, ..mixed }.validate().is_err());
    }

    #[test]
    fn poisson_stencil_isotropic() {
        let field = DiffusivityField::constant(GridGeometry::isotropic(8).unwrap(), 1.0).unwrap();
        let a = assemble(&field, 0.0).unwrap();
        for s in a.stencils() {
            for (k, v) in s.iter().enumerate() {
                let expected = if k == CENTER { 8.0 / 3.0 } else { -1.0 / 3.0 };
                assert_close!(*v, expected, 1e-15);
            }
            assert_close!(s.iter().sum::<f64>(), 0.0, 1e-14);
        }
    }

    #[test]
    fn poisson_stencil_anisotropic() {
        let field = DiffusivityField::constant(GridGeometry::new(8, 1.0, 2.0).unwrap(), 1.0).unwrap();
        let a = assemble(&field, 0.0).unwrap();
        let s = a.stencil(10);
        assert_close!(s[CENTER], 5.0 / 3.0, 1e-15);
        assert_close!(s[slot(-1, 0)], 1.0 / 6.0, 1e-15);
        assert_close!(s[slot(1, 0)], 1.0 / 6.0, 1e-15);
        assert_close!(s[slot(0, -1)], -7.0 / 12.0, 1e-15);
        assert_close!(s[slot(0, 1)], -7.0 / 12.0, 1e-15);
        for k in [0, 2, 6, 8] {
            assert_close!(s[k], -5.0 / 24.0, 1e-15);
        }
        assert_close!(s.iter().sum::<f64>(), 0.0, 1e-14);
    }

    #[test]
    fn delta_shifts_the_diagonal_only() {
        let field = random_field(8, 1);
        let a0 = assemble(&field, 0.0).unwrap();
        let a1 = assemble(&field, 0.25).unwrap();
        for (s0, s1) in a0.stencils().iter().zip(a1.stencils()) {
            for k in 0..9 {
                let shift = if k == CENTER { 0.25 } else { 0.0 };
                assert_close!(s1[k] - s0[k], shift, 1e-14);
            }
        }
        assert!(assemble(&field, -1.0).is_err());
    }

    #[test]
    fn dense_matrix_is_symmetric_with_zero_row_sums() {
        for m in [4, 8, 16] {
            for seed in 0..10 {
                let a = assemble(&random_field(m, seed), 0.0).unwrap();
                let d = a.to_dense().unwrap();
                assert_eq!((&d - d.transpose()).amax(), 0.0);
                let ones = nalgebra::DVector::from_element(a.n(), 1.0);
                assert!((&d * ones).amax() < 1e-12 * d.amax());
                assert!(a.annihilates_constants());
            }
        }
    }

    #[test]
    fn matvec_and_residual() {
        let a = assemble(&random_field(8, 4), 0.01).unwrap();
        let f: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        assert_eq!(a.residual(&vec![0.0; 64], &f).unwrap(), f);
        let c = assemble(&random_field(8, 4), 0.0).unwrap();
        let au = c.matvec(&vec![3.5; 64]).unwrap();
        assert!(au.iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(a.matvec(&[1.0; 10]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn assembly_is_linear_in_g() {
        let g1 = random_field(8, 5);
        let g2 = random_field(8, 6);
        let sum: Vec<f64> = g1.values().iter().zip(g2.values()).map(|(a, b)| a + b).collect();
        let g12 = DiffusivityField::new(*g1.geometry(), sum).unwrap();
        let lhs = assemble(&g12, 0.0).unwrap();
        let rhs = assemble(&g1, 0.0).unwrap().add(&assemble(&g2, 0.0).unwrap()).unwrap();
        for (a, b) in lhs.stencils().iter().zip(rhs.stencils()) {
            for k in 0..9 {
                assert_close!(a[k], b[k], 1e-12 * a[CENTER].abs());
            }
        }
    }

    #[test]
    fn shifted_operator_is_positive_definite() {
        for seed in 0..5 {
            let a = assemble(&random_field(8, seed), 0.01).unwrap();
            let eig = a.to_dense().unwrap().symmetric_eigenvalues();
            assert!(eig.min() > 0.0);
            assert!(eig.min() >= 0.01 * 0.5);
        }
    }

    #[test]
    fn field_csv_round_trip() {
        let field = random_field(8, 77);
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# m=8 hx=1 hy=1 seed=77\n"));
        let back = DiffusivityField::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, field);
    }

    #[test]
    fn dense_limit_is_enforced() {
        let a = assemble(&random_field(34, 1), 0.0).unwrap();
        assert!(matches!(a.to_dense(), Err(Error::TooLarge { .. })));
    }
}
