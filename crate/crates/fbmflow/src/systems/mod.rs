//! Vector-field systems: the frame `V_1..V_n`, its derivatives, Lie brackets
//! and structure constants `omega`, plus the hypothesis checks the experiments
//! rely on.
//!
//! Conventions, fixed once and validated downstream by the pathwise frame
//! consistency `J_t V(x) = V(X_t) alpha_t^T`:
//!
//! - Jacobian matrices store `(dV_i)[b][a] = d_a V_i^b`;
//! - `[V_i, V_j] = (dV_j) V_i - (dV_i) V_j`;
//! - `omega_{ij}^k` are the frame coordinates of the bracket,
//!   `[V_i, V_j] = sum_k omega_{ij}^k V_k`, antisymmetric in `(i, j)`.

mod expr;

pub use expr::Expr;

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type FieldFn = Arc<dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(usize, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type OmegaFn = Arc<dyn Fn(&DVector<f64>) -> Omega + Send + Sync>;

const FD_STEP_SCALE: f64 = 1e-5;
const FRAME_COND_LIMIT: f64 = 1e8;

/// Structure constants at one point: `omega_{ij}^k`, antisymmetric in the
/// lower pair by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Omega {
    dim: usize,
    data: Vec<f64>,
}

impl Omega {
    pub fn zeros(dim: usize) -> Self {
        Omega {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dim + j) * self.dim + k]
    }

    /// Sets `omega_{ij}^k = v` and `omega_{ji}^k = -v`.
    pub fn set_pair(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let n = self.dim;
        self.data[(i * n + j) * n + k] = v;
        self.data[(j * n + i) * n + k] = -v;
    }

    /// The matrix `H_l` with `H_l[i][k] = omega_{l i}^k`, the driver-direction
    /// generator of the alpha/beta equations:
    /// `d alpha = -alpha H_l dB^l`, `d beta = H_l beta dB^l`.
    /// Skew-symmetric exactly when the system satisfies the structure
    /// hypothesis `omega_{ij}^k = -omega_{ik}^j`.
    pub fn h_matrix(&self, l: usize) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, k| self.get(l, i, k))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Gradient of the structure constants at a point:
/// `grad[(i, j, k, c)] = d_c omega_{ij}^k`.
#[derive(Debug, Clone)]
pub struct OmegaGrad {
    dim: usize,
    data: Vec<f64>,
}

impl OmegaGrad {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> f64 {
        let n = self.dim;
        self.data[((i * n + j) * n + k) * n + c]
    }

    /// Directional derivative of `omega` along `d`.
    pub fn directional(&self, d: &DVector<f64>) -> Omega {
        let n = self.dim;
        let mut out = Omega::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += self.get(i, j, k, c) * d[c];
                    }
                    out.data[(i * n + j) * n + k] = acc;
                }
            }
        }
        out
    }
}

/// Frame matrix `V(x)` (columns `V_i(x)`), its inverse and condition number.
#[derive(Debug, Clone)]
pub struct FrameMatrix {
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub cond: f64,
}

/// A system of `n` vector fields on `R^n` with optional analytic derivatives
/// and structure constants. When analytic Jacobians are absent a
/// central-difference fallback with step `1e-5 * max(1, |x|)` is used and the
/// system reports `analytic_derivatives = false`.
#[derive(Clone)]
pub struct VectorFieldSystem {
    name: String,
    dim: usize,
    field: FieldFn,
    jacobian: Option<JacobianFn>,
    omega: Option<OmegaFn>,
    zero_omega: bool,
    pub claims_hypothesis1: bool,
    pub claims_hypothesis2: bool,
}

impl std::fmt::Debug for VectorFieldSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorFieldSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_derivatives", &self.jacobian.is_some())
            .field("zero_omega", &self.zero_omega)
            .finish()
    }
}

impl VectorFieldSystem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        field: FieldFn,
        jacobian: Option<JacobianFn>,
        omega: Option<OmegaFn>,
    ) -> Self {
        VectorFieldSystem {
            name: name.into(),
            dim,
            field,
            jacobian,
            omega,
            zero_omega: false,
            claims_hypothesis1: false,
            claims_hypothesis2: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when the structure constants vanish identically (known for the
    /// constant-frame catalog entries); lets the Malliavin layer skip the
    /// D-beta propagation, which is identically zero.
    pub fn zero_omega(&self) -> bool {
        self.zero_omega
    }

    pub fn analytic_derivatives(&self) -> bool {
        self.jacobian.is_some()
    }

    /// `V_i(x)`.
    pub fn field(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        debug_assert!(i < self.dim);
        (self.field)(i, x)
    }

    /// `dV_i(x)`; analytic when available, otherwise central differences.
    pub fn jacobian(&self, i: usize, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(jac) = &self.jacobian {
            return jac(i, x);
        }
        let n = self.dim;
        let h = FD_STEP_SCALE * x.norm().max(1.0);
        let mut out = DMatrix::zeros(n, n);
        let mut xp = x.clone();
        for a in 0..n {
            xp[a] = x[a] + h;
            let plus = (self.field)(i, &xp);
            xp[a] = x[a] - h;
            let minus = (self.field)(i, &xp);
            xp[a] = x[a];
            for b in 0..n {
                out[(b, a)] = (plus[b] - minus[b]) / (2.0 * h);
            }
        }
        out
    }

    /// Matrix whose columns are the `V_i(x)`.
    pub fn frame_columns(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let mut v = DMatrix::zeros(n, n);
        for i in 0..n {
            v.set_column(i, &self.field(i, x));
        }
        v
    }

    /// Frame matrix and inverse; errors when the frame is degenerate
    /// (singular or condition number above 1e8).
    pub fn frame_matrix(&self, x: &DVector<f64>) -> Result<FrameMatrix> {
        let v = self.frame_columns(x);
        let sv = v.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > FRAME_COND_LIMIT {
            return Err(Error::DegenerateFrame {
                x: format_point(x),
                reason: format!("condition number {cond:.3e}"),
            });
        }
        let w = v.clone().try_inverse().ok_or_else(|| Error::DegenerateFrame {
            x: format_point(x),
            reason: "not invertible".into(),
        })?;
        Ok(FrameMatrix { v, w, cond })
    }

    /// `[V_i, V_j](x) = (dV_j) V_i - (dV_i) V_j`.
    pub fn lie_bracket(&self, i: usize, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let vi = self.field(i, x);
        let vj = self.field(j, x);
        &self.jacobian(j, x) * vi - &self.jacobian(i, x) * vj
    }

    /// Structure constants at `x`: analytic when the system carries them,
    /// otherwise the frame coordinates `W(x) [V_i, V_j](x)`, solved once per
    /// pair `(i < j)` and copied with sign.
    pub fn structure_constants(&self, x: &DVector<f64>) -> Result<Omega> {
        if let Some(om) = &self.omega {
            return Ok(om(x));
        }
        if self.zero_omega {
            return Ok(Omega::zeros(self.dim));
        }
        let frame = self.frame_matrix(x)?;
        let n = self.dim;
        let mut out = Omega::zeros(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let coords = &frame.w * self.lie_bracket(i, j, x);
                for k in 0..n {
                    out.set_pair(i, j, k, coords[k]);
                }
            }
        }
        Ok(out)
    }

    /// Gradient of the structure constants by central differences of
    /// [`Self::structure_constants`]; the catalog omegas are smooth so the
    /// 1e-5 step gives ~1e-10 accuracy, far below the flow's scheme error.
    pub fn omega_gradient(&self, x: &DVector<f64>) -> Result<OmegaGrad> {
        let n = self.dim;
        if self.zero_omega {
            return Ok(OmegaGrad {
                dim: n,
                data: vec![0.0; n * n * n * n],
            });
        }
        let h = FD_STEP_SCALE * x.norm().max(1.0);
        let mut data = vec![0.0; n * n * n * n];
        let mut xp = x.clone();
        for c in 0..n {
            xp[c] = x[c] + h;
            let plus = self.structure_constants(&xp)?;
            xp[c] = x[c] - h;
            let minus = self.structure_constants(&xp)?;
            xp[c] = x[c];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        data[((i * n + j) * n + k) * n + c] =
                            (plus.get(i, j, k) - minus.get(i, j, k)) / (2.0 * h);
                    }
                }
            }
        }
        Ok(OmegaGrad { dim: n, data })
    }

    /// Checks the structure hypothesis `omega_{ij}^k = -omega_{ik}^j` at the
    /// sample points; verdict at tolerance 1e-8.
    pub fn check_hypothesis_skew(&self, points: &[DVector<f64>]) -> Result<SkewReport> {
        let n = self.dim;
        let mut per_point = Vec::with_capacity(points.len());
        let mut max_violation = 0.0f64;
        for x in points {
            let om = self.structure_constants(x)?;
            let mut v = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        v = v.max((om.get(i, j, k) + om.get(i, k, j)).abs());
                    }
                }
            }
            max_violation = max_violation.max(v);
            per_point.push((x.clone(), v));
        }
        Ok(SkewReport {
            system: self.name.clone(),
            max_violation,
            passes: max_violation <= 1e-8,
            per_point,
        })
    }
}

/// Outcome of [`VectorFieldSystem::check_hypothesis_skew`].
#[derive(Debug, Clone)]
pub struct SkewReport {
    pub system: String,
    pub max_violation: f64,
    pub passes: bool,
    pub per_point: Vec<(DVector<f64>, f64)>,
}

fn format_point(x: &DVector<f64>) -> String {
    let mut s = String::from("(");
    for (i, v) in x.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{v:.4}");
    }
    s.push(')');
    s
}

// ---------------------------------------------------------------------------
// catalog
// ---------------------------------------------------------------------------

/// `V_i = e_i`: the flow is `x + B_t` and every variational process is the
/// identity.
pub fn identity_frame(dim: usize) -> VectorFieldSystem {
    let mut sys = VectorFieldSystem::new(
        format!("identity{dim}"),
        dim,
        Arc::new(move |i, x: &DVector<f64>| {
            let mut v = DVector::zeros(x.len());
            v[i] = 1.0;
            v
        }),
        Some(Arc::new(move |_i, x: &DVector<f64>| {
            DMatrix::zeros(x.len(), x.len())
        })),
        Some(Arc::new(move |_x: &DVector<f64>| Omega::zeros(dim))),
    );
    sys.zero_omega = true;
    sys.claims_hypothesis1 = true;
    sys.claims_hypothesis2 = true;
    sys
}

/// Constant frame with prescribed (invertible) columns.
pub fn constant_frame(name: impl Into<String>, columns: DMatrix<f64>) -> Result<VectorFieldSystem> {
    let dim = columns.nrows();
    if columns.ncols() != dim {
        return Err(Error::Domain("frame matrix must be square".into()));
    }
    if columns.clone().try_inverse().is_none() {
        return Err(Error::DegenerateFrame {
            x: "(constant)".into(),
            reason: "prescribed columns are singular".into(),
        });
    }
    let cols = columns.clone();
    let mut sys = VectorFieldSystem::new(
        name,
        dim,
        Arc::new(move |i, _x: &DVector<f64>| cols.column(i).into_owned()),
        Some(Arc::new(move |_i, _x: &DVector<f64>| DMatrix::zeros(dim, dim))),
        Some(Arc::new(move |_x: &DVector<f64>| Omega::zeros(dim))),
    );
    sys.zero_omega = true;
    sys.claims_hypothesis1 = true;
    sys.claims_hypothesis2 = true;
    Ok(sys)
}

/// 2D shear: `V_1 = (1, 0)`, `V_2 = (sin x_1, 1)`. Elliptic everywhere
/// (`det V = 1`) with hand-derived `omega_{12}^1 = cos x_1`, `omega_{12}^2 = 0`.
/// Satisfies Hypothesis 1 but not the skew structure hypothesis.
pub fn shear() -> VectorFieldSystem {
    let mut sys = VectorFieldSystem::new(
        "shear",
        2,
        Arc::new(|i, x: &DVector<f64>| match i {
            0 => DVector::from_row_slice(&[1.0, 0.0]),
            _ => DVector::from_row_slice(&[x[0].sin(), 1.0]),
        }),
        Some(Arc::new(|i, x: &DVector<f64>| match i {
            0 => DMatrix::zeros(2, 2),
            _ => DMatrix::from_row_slice(2, 2, &[x[0].cos(), 0.0, 0.0, 0.0]),
        })),
        Some(Arc::new(|x: &DVector<f64>| {
            let mut om = Omega::zeros(2);
            om.set_pair(0, 1, 0, x[0].cos());
            om
        })),
    );
    sys.claims_hypothesis1 = true;
    sys
}

/// 2D bounded-rotation frame: the standard basis rotated by
/// `theta(x) = tanh(x_1)`. Hand-derived structure constants
/// `omega_{12}^1 = -sech^2(x_1) cos(theta)`, `omega_{12}^2 = sech^2(x_1) sin(theta)`.
pub fn rotation() -> VectorFieldSystem {
    let sech2 = |t: f64| {
        let c = t.cosh();
        1.0 / (c * c)
    };
    let mut sys = VectorFieldSystem::new(
        "rotation",
        2,
        Arc::new(|i, x: &DVector<f64>| {
            let th = x[0].tanh();
            match i {
                0 => DVector::from_row_slice(&[th.cos(), th.sin()]),
                _ => DVector::from_row_slice(&[-th.sin(), th.cos()]),
            }
        }),
        Some(Arc::new(move |i, x: &DVector<f64>| {
            let th = x[0].tanh();
            let s = sech2(x[0]);
            match i {
                0 => DMatrix::from_row_slice(2, 2, &[-th.sin() * s, 0.0, th.cos() * s, 0.0]),
                _ => DMatrix::from_row_slice(2, 2, &[-th.cos() * s, 0.0, -th.sin() * s, 0.0]),
            }
        })),
        Some(Arc::new(move |x: &DVector<f64>| {
            let th = x[0].tanh();
            let s = sech2(x[0]);
            let mut om = Omega::zeros(2);
            om.set_pair(0, 1, 0, -s * th.cos());
            om.set_pair(0, 1, 1, s * th.sin());
            om
        })),
    );
    sys.claims_hypothesis1 = true;
    sys
}

/// System built from the expression grammar: `exprs[i * dim + b]` is component
/// `b` of `V_i`. Jacobians fall back to finite differences.
pub fn from_expressions(
    name: impl Into<String>,
    dim: usize,
    exprs: &[String],
) -> Result<VectorFieldSystem> {
    if exprs.len() != dim * dim {
        return Err(Error::Expr(format!(
            "need {} expressions for dimension {dim}, got {}",
            dim * dim,
            exprs.len()
        )));
    }
    let mut parsed = Vec::with_capacity(exprs.len());
    for src in exprs {
        let e = Expr::parse(src)?;
        if e.arity() > dim {
            return Err(Error::Expr(format!(
                "`{src}` mentions x{} but the system has dimension {dim}",
                e.arity()
            )));
        }
        parsed.push(e);
    }
    let parsed = Arc::new(parsed);
    Ok(VectorFieldSystem::new(
        name,
        dim,
        Arc::new(move |i, x: &DVector<f64>| {
            DVector::from_fn(dim, |b, _| parsed[i * dim + b].eval(x))
        }),
        None,
        None,
    ))
}

/// The catalog by name; `params` feeds the constant frame entries (row-major)
/// and the identity dimension.
pub fn catalog(name: &str, dim: usize, params: &[f64]) -> Result<VectorFieldSystem> {
    match name {
        "identity" => Ok(identity_frame(dim)),
        "constant" => {
            let mat = if params.is_empty() {
                // default: unit upper-shear columns
                let mut m = DMatrix::identity(dim, dim);
                if dim >= 2 {
                    m[(0, 1)] = 0.5;
                }
                m
            } else {
                if params.len() != dim * dim {
                    return Err(Error::Domain(format!(
                        "constant frame needs {} params, got {}",
                        dim * dim,
                        params.len()
                    )));
                }
                DMatrix::from_row_slice(dim, dim, params)
            };
            constant_frame("constant", mat)
        }
        "shear" => Ok(shear()),
        "rotation" => Ok(rotation()),
        other => Err(Error::Domain(format!(
            "unknown system `{other}` (catalog: identity, constant, shear, rotation)"
        ))),
    }
}
