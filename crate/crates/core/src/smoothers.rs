//! Relaxation schemes: weighted Jacobi, lexicographic SOR, four-color SOR with
//! one coefficient per color, SPAI-0 and explicit diagonal preconditioners.
//!
//! Every scheme exists twice: as an in-place sweep ([`Smoother::sweep`]) used by
//! the solvers, and as a dense error propagation matrix
//! ([`build_smoother_matrix`]) assembled from the matrix splitting. The two are
//! kept independent so each can check the other.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{StencilOperator, CENTER, DENSE_LIMIT, OFFSETS};

/// A relaxation scheme together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SmootherConfig", into = "SmootherConfig")]
pub enum SmootherSpec {
    Jacobi { omega: f64 },
    GaussSeidelLex { omega: f64 },
    FourColorSor { omegas: [f64; 4] },
    Spai0,
    ExplicitDiagonal { diag: Vec<f64> },
}

impl SmootherSpec {
    pub fn four_color(omegas: [f64; 4]) -> Self {
        SmootherSpec::FourColorSor { omegas }
    }

    /// Four-color SOR with the same coefficient on every color.
    pub fn common(omega: f64) -> Self {
        SmootherSpec::FourColorSor { omegas: [omega; 4] }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |w: &[f64]| w.iter().all(|v| v.is_finite());
        let ok = match self {
            SmootherSpec::Jacobi { omega } | SmootherSpec::GaussSeidelLex { omega } => {
                omega.is_finite()
            }
            SmootherSpec::FourColorSor { omegas } => finite(omegas),
            SmootherSpec::Spai0 => true,
            SmootherSpec::ExplicitDiagonal { diag } => finite(diag),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSmoother(format!("non-finite parameter in {self:?}")))
        }
    }

    /// Short human-readable label, e.g. `4c(1.000,1.000,1.000,1.000)`.
    pub fn label(&self) -> String {
        match self {
            SmootherSpec::Jacobi { omega } => format!("wj({omega:.3})"),
            SmootherSpec::GaussSeidelLex { omega } => format!("sor({omega:.3})"),
            SmootherSpec::FourColorSor { omegas } => format!(
                "4c({:.3},{:.3},{:.3},{:.3})",
                omegas[0], omegas[1], omegas[2], omegas[3]
            ),
            SmootherSpec::Spai0 => "spai0".into(),
            SmootherSpec::ExplicitDiagonal { .. } => "diag".into(),
        }
    }
}

/// Config-file form: `smoother = { type = "four_color_sor", omegas = [...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omegas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag: Option<Vec<f64>>,
}

impl TryFrom<SmootherConfig> for SmootherSpec {
    type Error = Error;

    fn try_from(c: SmootherConfig) -> Result<Self> {
        let one = |name: &str| -> Result<f64> {
            match c.omegas.as_slice() {
                [] => Ok(1.0),
                [w] => Ok(*w),
                _ => Err(Error::InvalidSmoother(format!("{name} takes one omega"))),
            }
        };
        let spec = match c.kind.as_str() {
            "jacobi" | "weighted_jacobi" => SmootherSpec::Jacobi { omega: one("jacobi")? },
            "gauss_seidel" | "sor" => SmootherSpec::GaussSeidelLex {
                omega: one("gauss_seidel")?,
            },
            "four_color_sor" => match c.omegas.as_slice() {
                [w] => SmootherSpec::common(*w),
                [a, b, cc, d] => SmootherSpec::four_color([*a, *b, *cc, *d]),
                _ => {
                    return Err(Error::InvalidSmoother(
                        "four_color_sor takes exactly 4 omegas (or 1 shared)".into(),
                    ))
                }
            },
            "spai0" => SmootherSpec::Spai0,
            "explicit_diagonal" => SmootherSpec::ExplicitDiagonal {
                diag: c
                    .diag
                    .ok_or_else(|| Error::InvalidSmoother("explicit_diagonal needs 'diag'".into()))?,
            },
            other => return Err(Error::InvalidSmoother(format!("unknown smoother type '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<SmootherSpec> for SmootherConfig {
    fn from(s: SmootherSpec) -> Self {
        let (kind, omegas, diag) = match s {
            SmootherSpec::Jacobi { omega } => ("jacobi", vec![omega], None),
            SmootherSpec::GaussSeidelLex { omega } => ("gauss_seidel", vec![omega], None),
            SmootherSpec::FourColorSor { omegas } => ("four_color_sor", omegas.to_vec(), None),
            SmootherSpec::Spai0 => ("spai0", vec![], None),
            SmootherSpec::ExplicitDiagonal { diag } => ("explicit_diagonal", vec![], Some(diag)),
        };
        SmootherConfig {
            kind: kind.into(),
            omegas,
            diag,
        }
    }
}

/// Four-coloring of a periodic grid: `(even q, even p) -> 1`, `(even, odd) -> 2`,
/// `(odd, even) -> 3`, `(odd, odd) -> 4`. Colors are updated in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorMap {
    m: usize,
    colors: Vec<u8>,
}

impl ColorMap {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Color in `1..=4` of node `(q, p)`.
    pub fn color(&self, q: usize, p: usize) -> u8 {
        self.colors[q * self.m + p]
    }

    pub fn colors(&self) -> &[u8] {
        &self.colors
    }

    pub fn class_sizes(&self) -> [usize; 4] {
        let mut sizes = [0; 4];
        for &c in &self.colors {
            sizes[c as usize - 1] += 1;
        }
        sizes
    }

    /// Number of (node, neighbour) pairs in the periodic 8-neighbourhood that
    /// share a color.
    pub fn same_color_neighbor_pairs(&self) -> usize {
        let m = self.m as isize;
        let mut count = 0;
        for q in 0..m {
            for p in 0..m {
                let c = self.colors[(q * m + p) as usize];
                for &(dq, dp) in OFFSETS.iter().filter(|o| **o != (0, 0)) {
                    let y = (q + dq).rem_euclid(m) * m + (p + dp).rem_euclid(m);
                    if self.colors[y as usize] == c {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

#[inline]
fn color_of(q: usize, p: usize) -> u8 {
    (1 + 2 * (q % 2) + p % 2) as u8
}

pub fn assign_colors(m: usize) -> Result<ColorMap> {
    if m % 2 != 0 || m < 2 {
        return Err(Error::Tiling(m));
    }
    let colors = (0..m * m).map(|x| color_of(x / m, x % m)).collect();
    Ok(ColorMap { m, colors })
}

/// Diagonal `M` minimising `||I - M A||_F`: `m_k = a_kk / sum_i a_ki^2`.
pub fn spai0_diagonal(a: &StencilOperator) -> Result<Vec<f64>> {
    a.stencils()
        .iter()
        .enumerate()
        .map(|(row, s)| {
            let sq: f64 = s.iter().map(|v| v * v).sum();
            if sq == 0.0 {
                Err(Error::ZeroRow { row })
            } else {
                Ok(s[CENTER] / sq)
            }
        })
        .collect()
}

fn inverse_diagonal(a: &StencilOperator) -> Result<Vec<f64>> {
    a.stencils()
        .iter()
        .enumerate()
        .map(|(row, s)| {
            if s[CENTER] == 0.0 {
                Err(Error::ZeroRow { row })
            } else {
                Ok(1.0 / s[CENTER])
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
enum Prepared {
    Jacobi { omega: f64, inv_diag: Vec<f64> },
    GaussSeidelLex { omega: f64, inv_diag: Vec<f64> },
    FourColor { omegas: [f64; 4], inv_diag: Vec<f64> },
    Diagonal { m_diag: Vec<f64> },
}

/// A smoother bound to one operator, with its diagonal data precomputed.
#[derive(Debug, Clone)]
pub struct Smoother {
    n: usize,
    prepared: Prepared,
}

impl Smoother {
    pub fn new(a: &StencilOperator, spec: &SmootherSpec) -> Result<Self> {
        spec.validate()?;
        let prepared = match spec {
            SmootherSpec::Jacobi { omega } => Prepared::Jacobi {
                omega: *omega,
                inv_diag: inverse_diagonal(a)?,
            },
            SmootherSpec::GaussSeidelLex { omega } => Prepared::GaussSeidelLex {
                omega: *omega,
                inv_diag: inverse_diagonal(a)?,
            },
            SmootherSpec::FourColorSor { omegas } => {
                if a.m() % 2 != 0 {
                    return Err(Error::Tiling(a.m()));
                }
                Prepared::FourColor {
                    omegas: *omegas,
                    inv_diag: inverse_diagonal(a)?,
                }
            }
            SmootherSpec::Spai0 => Prepared::Diagonal {
                m_diag: spai0_diagonal(a)?,
            },
            SmootherSpec::ExplicitDiagonal { diag } => {
                if diag.len() != a.n() {
                    return Err(Error::Dimension {
                        expected: a.n(),
                        got: diag.len(),
                    });
                }
                Prepared::Diagonal {
                    m_diag: diag.clone(),
                }
            }
        };
        Ok(Self { n: a.n(), prepared })
    }

    /// Whether a sweep needs a scratch vector of length `n`.
    fn needs_scratch(&self) -> bool {
        matches!(
            self.prepared,
            Prepared::Jacobi { .. } | Prepared::Diagonal { .. }
        )
    }

    /// One relaxation sweep on `A u = f`, in place.
    pub fn sweep(&self, a: &StencilOperator, u: &mut [f64], f: &[f64]) -> Result<()> {
        for len in [a.n(), u.len(), f.len()] {
            if len != self.n {
                return Err(Error::Dimension {
                    expected: self.n,
                    got: len,
                });
            }
        }
        let mut scratch = if self.needs_scratch() {
            vec![0.0; self.n]
        } else {
            Vec::new()
        };
        self.sweep_unchecked(a, u, f, &mut scratch);
        Ok(())
    }

    /// Sweep without length checks; `scratch` must hold `n` entries for the
    /// Jacobi and diagonal variants.
    pub(crate) fn sweep_unchecked(
        &self,
        a: &StencilOperator,
        u: &mut [f64],
        f: &[f64],
        scratch: &mut [f64],
    ) {
        match &self.prepared {
            Prepared::Jacobi { omega, inv_diag } => {
                a.residual_unchecked(u, f, scratch);
                for ((ui, r), d) in u.iter_mut().zip(scratch.iter()).zip(inv_diag) {
                    *ui += omega * r * d;
                }
            }
            Prepared::Diagonal { m_diag } => {
                a.residual_unchecked(u, f, scratch);
                for ((ui, r), d) in u.iter_mut().zip(scratch.iter()).zip(m_diag) {
                    *ui += r * d;
                }
            }
            Prepared::GaussSeidelLex { omega, inv_diag } => {
                for x in 0..self.n {
                    let r = f[x] - a.row_dot(x, u);
                    u[x] += omega * r * inv_diag[x];
                }
            }
            Prepared::FourColor { omegas, inv_diag } => {
                four_color_sweep(a, u, f, omegas, inv_diag, false);
            }
        }
    }

    /// Four-color sweep visiting the nodes of each color in reverse order.
    /// Only meaningful for the four-color variant; other variants sweep normally.
    #[doc(hidden)]
    pub fn sweep_reversed_within_colors(&self, a: &StencilOperator, u: &mut [f64], f: &[f64]) -> Result<()> {
        match &self.prepared {
            Prepared::FourColor { omegas, inv_diag } => {
                four_color_sweep(a, u, f, omegas, inv_diag, true);
                Ok(())
            }
            _ => self.sweep(a, u, f),
        }
    }
}

fn four_color_sweep(
    a: &StencilOperator,
    u: &mut [f64],
    f: &[f64],
    omegas: &[f64; 4],
    inv_diag: &[f64],
    reverse: bool,
) {
    let m = a.m();
    for (c, omega) in omegas.iter().enumerate() {
        let (q0, p0) = (c / 2, c % 2);
        let rows: Vec<usize> = (q0..m).step_by(2).collect();
        let cols: Vec<usize> = (p0..m).step_by(2).collect();
        let mut visit = |q: usize, p: usize| {
            let x = q * m + p;
            let r = f[x] - a.row_dot(x, u);
            u[x] += omega * r * inv_diag[x];
        };
        if reverse {
            for &q in rows.iter().rev() {
                for &p in cols.iter().rev() {
                    visit(q, p);
                }
            }
        } else {
            for &q in &rows {
                for &p in &cols {
                    visit(q, p);
                }
            }
        }
    }
}

/// One sweep of `spec` on `A u = f`.
pub fn sweep(a: &StencilOperator, u: &mut [f64], f: &[f64], spec: &SmootherSpec) -> Result<()> {
    Smoother::new(a, spec)?.sweep(a, u, f)
}

/// Dense error propagation matrix `S^nu` built from the matrix splitting:
///
/// * Jacobi: `S = I - w D^-1 A`
/// * lexicographic SOR: `S = I - w (D + w L)^-1 A`, `L` the strict lower triangle
/// * four-color SOR: `S = F4 F3 F2 F1`, `Fc = I - w_c E_c D^-1 A` with `E_c`
///   selecting the rows of color `c`
/// * SPAI-0 / explicit diagonal: `S = I - diag(M) A`
pub fn build_smoother_matrix(
    a: &StencilOperator,
    spec: &SmootherSpec,
    nu: usize,
) -> Result<DMatrix<f64>> {
    build_smoother_matrix_with_limit(a, spec, nu, DENSE_LIMIT)
}

pub fn build_smoother_matrix_with_limit(
    a: &StencilOperator,
    spec: &SmootherSpec,
    nu: usize,
    limit: usize,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let dense = a.to_dense_with_limit(limit)?;
    let n = a.n();
    let identity = DMatrix::<f64>::identity(n, n);
    let diag: Vec<f64> = (0..n).map(|i| dense[(i, i)]).collect();
    if let Some(row) = diag.iter().position(|d| *d == 0.0) {
        if !matches!(spec, SmootherSpec::Spai0 | SmootherSpec::ExplicitDiagonal { .. }) {
            return Err(Error::ZeroRow { row });
        }
    }
    let scaled_rows = |weights: &dyn Fn(usize) -> f64| {
        let mut m = dense.clone();
        for i in 0..n {
            let w = weights(i);
            m.row_mut(i).scale_mut(w);
        }
        m
    };
    let s = match spec {
        SmootherSpec::Jacobi { omega } => &identity - scaled_rows(&|i| omega / diag[i]),
        SmootherSpec::GaussSeidelLex { omega } => {
            let mut lower = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                lower[(i, i)] = diag[i];
                for j in 0..i {
                    lower[(i, j)] = omega * dense[(i, j)];
                }
            }
            let rhs = &dense * *omega;
            let x = lower
                .solve_lower_triangular(&rhs)
                .ok_or(Error::ZeroRow { row: 0 })?;
            &identity - x
        }
        SmootherSpec::FourColorSor { omegas } => {
            if a.m() % 2 != 0 {
                return Err(Error::Tiling(a.m()));
            }
            let m = a.m();
            let mut s = identity.clone();
            for (c, omega) in omegas.iter().enumerate() {
                let c = (c + 1) as u8;
                let factor = &identity
                    - scaled_rows(&|i| {
                        if color_of(i / m, i % m) == c {
                            omega / diag[i]
                        } else {
                            0.0
                        }
                    });
                s = factor * s;
            }
            s
        }
        SmootherSpec::Spai0 => {
            let md = spai0_diagonal(a)?;
            &identity - scaled_rows(&|i| md[i])
        }
        SmootherSpec::ExplicitDiagonal { diag: md } => {
            if md.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: md.len(),
                });
            }
            &identity - scaled_rows(&|i| md[i])
        }
    };
    let mut out = identity;
    for _ in 0..nu {
        out = &s * out;
    }
    Ok(out)
}

/// `S^nu` obtained by sweeping the columns of the identity with `f = 0`.
/// Costs `O(nu * n^2)` instead of the `O(n^3)` matrix route.
pub fn smoother_matrix_from_sweeps(
    a: &StencilOperator,
    smoother: &Smoother,
    nu: usize,
) -> DMatrix<f64> {
    let n = a.n();
    let mut out = DMatrix::<f64>::identity(n, n);
    let zero = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for mut col in out.column_iter_mut() {
        let col = col.as_mut_slice();
        for _ in 0..nu {
            smoother.sweep_unchecked(a, col, &zero, &mut scratch);
        }
    }
    out
}
