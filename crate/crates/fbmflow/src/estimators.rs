//! Monte Carlo layer: semigroup values, three independent gradient
//! estimators, and the carre du champ.
//!
//! Reproducibility contract: every path is a pure function of
//! `(seed, path_index)` through counter-based substreams, per-path work is
//! mapped in parallel but collected in path order, and the statistics are
//! reduced sequentially - so results are bit-identical at any thread count.
//! All estimators for one `(system, x, t, cfg)` reuse the same path ensemble,
//! which makes cross-estimator comparisons paired.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{CholeskySampler, FbmPath, HurstParam, SeedSpec, TimeGrid};
use crate::flow::{integrate_flow, DriverPath, FlowState, Scheme, DEFAULT_SUBSTEPS};
use crate::malliavin::{ibp_weights_all, HKernelGrid, MalliavinBundle};
use crate::systems::VectorFieldSystem;

type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Test function `f` with an optional analytic gradient and boundedness
/// metadata (the rate scans need a known sup-norm).
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: ScalarFn,
    grad: Option<GradFn>,
    pub bounded: bool,
    pub sup_norm: Option<f64>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fmt.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("bounded", &self.bounded)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        f: ScalarFn,
        grad: Option<GradFn>,
        bounded: bool,
        sup_norm: Option<f64>,
    ) -> Self {
        TestFunction {
            name: name.into(),
            f,
            grad,
            bounded,
            sup_norm,
        }
    }

    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        (self.f)(y)
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.grad {
            Some(g) => Ok(g(y)),
            None => Err(Error::MissingGradient(self.name.clone())),
        }
    }

    /// Analytic gradient against central differences at the given points;
    /// part of the type's contract.
    pub fn validate_gradient(&self, points: &[DVector<f64>]) -> Result<()> {
        let Some(g) = &self.grad else {
            return Ok(());
        };
        let h = 1e-6;
        for x in points {
            let ga = g(x);
            let mut xp = x.clone();
            for c in 0..x.len() {
                xp[c] = x[c] + h;
                let plus = (self.f)(&xp);
                xp[c] = x[c] - h;
                let minus = (self.f)(&xp);
                xp[c] = x[c];
                let fd = (plus - minus) / (2.0 * h);
                if (ga[c] - fd).abs() > 1e-6 * ga[c].abs().max(1.0) {
                    return Err(Error::Domain(format!(
                        "gradient of `{}` disagrees with finite differences at {x:?}: {} vs {fd}",
                        self.name, ga[c]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn constant(c: f64) -> Self {
        TestFunction::new(
            format!("const({c})"),
            Arc::new(move |_| c),
            Some(Arc::new(|y: &DVector<f64>| DVector::zeros(y.len()))),
            true,
            Some(c.abs()),
        )
    }

    pub fn linear(coeffs: DVector<f64>) -> Self {
        let c2 = coeffs.clone();
        TestFunction::new(
            "linear",
            Arc::new(move |y: &DVector<f64>| coeffs.dot(y)),
            Some(Arc::new(move |_| c2.clone())),
            false,
            None,
        )
    }

    /// `f(y) = cos(y_1)`.
    pub fn cos_first() -> Self {
        TestFunction::new(
            "cos_y1",
            Arc::new(|y: &DVector<f64>| y[0].cos()),
            Some(Arc::new(|y: &DVector<f64>| {
                let mut g = DVector::zeros(y.len());
                g[0] = -y[0].sin();
                g
            })),
            true,
            Some(1.0),
        )
    }

    /// `f(y) = sin(y_1)`.
    pub fn sin_first() -> Self {
        TestFunction::new(
            "sin_y1",
            Arc::new(|y: &DVector<f64>| y[0].sin()),
            Some(Arc::new(|y: &DVector<f64>| {
                let mut g = DVector::zeros(y.len());
                g[0] = y[0].cos();
                g
            })),
            true,
            Some(1.0),
        )
    }

    /// `f(y) = sign(y_1)`: bounded, merely measurable (no gradient).
    pub fn sign_first() -> Self {
        TestFunction::new(
            "sign_y1",
            Arc::new(|y: &DVector<f64>| {
                if y[0] > 0.0 {
                    1.0
                } else if y[0] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            None,
            true,
            Some(1.0),
        )
    }

    /// `f(y) = sin(y_1) cos(y_2)`.
    pub fn sin1cos2() -> Self {
        TestFunction::new(
            "sin_y1_cos_y2",
            Arc::new(|y: &DVector<f64>| y[0].sin() * y[1].cos()),
            Some(Arc::new(|y: &DVector<f64>| {
                let mut g = DVector::zeros(y.len());
                g[0] = y[0].cos() * y[1].cos();
                g[1] = -y[0].sin() * y[1].sin();
                g
            })),
            true,
            Some(1.0),
        )
    }

    /// Named lookup used by configs.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sign_y1" => Ok(Self::sign_first()),
            "cos_y1" => Ok(Self::cos_first()),
            "sin_y1" => Ok(Self::sin_first()),
            "sin_y1_cos_y2" => Ok(Self::sin1cos2()),
            other => {
                if let Some(rest) = other.strip_prefix("const:") {
                    let c = rest
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad constant in f = `{other}`")))?;
                    return Ok(Self::constant(c));
                }
                Err(Error::Config(format!(
                    "unknown test function `{other}` (sign_y1, cos_y1, sin_y1, sin_y1_cos_y2, const:<c>)"
                )))
            }
        }
    }
}

/// Monte Carlo run configuration; one of these pins an entire experiment.
#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    pub paths: usize,
    pub grid: TimeGrid,
    pub hurst: HurstParam,
    pub scheme: Scheme,
    pub substeps: usize,
    pub seed: SeedSpec,
    /// Dyadic driver interpolation level; `None` means full resolution.
    pub level: Option<u32>,
    pub antithetic: bool,
}

impl MonteCarloConfig {
    pub fn new(paths: usize, grid: TimeGrid, hurst: HurstParam, seed: SeedSpec) -> Result<Self> {
        if paths < 2 {
            return Err(Error::Domain("need at least 2 paths".into()));
        }
        Ok(MonteCarloConfig {
            paths,
            grid,
            hurst,
            scheme: Scheme::Heun,
            substeps: DEFAULT_SUBSTEPS,
            seed,
            level: None,
            antithetic: false,
        })
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_paths(mut self, paths: usize) -> Self {
        self.paths = paths;
        self
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn t_index(&self, t: f64) -> Result<usize> {
        self.grid
            .index_of(t)
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Domain(format!("t = {t} is not a positive grid node")))
    }
}

/// Monte Carlo mean with standard error and 95% interval
/// (`mean +- 1.96 stderr`).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateWithCI {
    pub mean: f64,
    pub stderr: f64,
    pub ci: (f64, f64),
    pub paths: usize,
    pub aborted: usize,
    pub seed: u64,
    pub valid: bool,
}

impl EstimateWithCI {
    /// Two-pass statistics in fixed order; `requested` drives the 0.1%
    /// abort-rate validity flag. With antithetic sampling the consecutive
    /// pair means are treated as the independent samples.
    pub fn from_samples(
        values: &[f64],
        aborted: usize,
        requested: usize,
        seed: u64,
        antithetic: bool,
    ) -> Self {
        let samples: Vec<f64> = if antithetic {
            values
                .chunks(2)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect()
        } else {
            values.to_vec()
        };
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            0.0
        };
        let stderr = (var / n as f64).sqrt();
        EstimateWithCI {
            mean,
            stderr,
            ci: (mean - 1.96 * stderr, mean + 1.96 * stderr),
            paths: values.len(),
            aborted,
            seed,
            valid: aborted * 1000 <= requested,
        }
    }

    /// True when the interval `mean +- 1.96 stderr` excludes zero.
    pub fn excludes_zero(&self) -> bool {
        self.ci.0 > 0.0 || self.ci.1 < 0.0
    }

    /// True when two 95% intervals overlap.
    pub fn overlaps(&self, other: &EstimateWithCI) -> bool {
        self.ci.0 <= other.ci.1 && other.ci.0 <= self.ci.1
    }
}

fn is_path_abort(e: &Error) -> bool {
    matches!(
        e,
        Error::PathAbort { .. } | Error::DegenerateFrame { .. } | Error::DegenerateMalliavin(_)
    )
}

/// Runs `per_path` over the ensemble defined by `cfg`, in parallel, collecting
/// results in path order. Path-level failures (aborts, degenerate frames or
/// Malliavin matrices) are counted and dropped; other errors propagate.
///
/// With `antithetic` set, path `2j` and `2j+1` share substream `j` with the
/// driver negated on the odd path.
pub fn collect_paths<T: Send>(
    components: usize,
    cfg: &MonteCarloConfig,
    per_path: impl Fn(u64, &FbmPath, &DriverPath) -> Result<T> + Sync,
) -> Result<(Vec<T>, usize)> {
    let sampler = CholeskySampler::new(cfg.grid, cfg.hurst, components)?;
    let level = cfg
        .level
        .unwrap_or_else(|| cfg.grid.steps().trailing_zeros());
    let raw: Vec<Result<T>> = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|idx| {
            let substream = if cfg.antithetic { idx / 2 } else { idx };
            let mut path = sampler.sample(cfg.seed, substream)?;
            if cfg.antithetic && idx % 2 == 1 {
                path = path.negated();
            }
            let driver = DriverPath::new(path, level)?;
            per_path(idx, driver.path(), &driver)
        })
        .collect();

    let mut out = Vec::with_capacity(raw.len());
    let mut aborted = 0usize;
    for r in raw {
        match r {
            Ok(v) => out.push(v),
            Err(e) if is_path_abort(&e) => aborted += 1,
            Err(e) => return Err(e),
        }
    }
    if out.len() < 2 {
        return Err(Error::InvalidEstimate(format!(
            "only {} usable paths ({aborted} aborted)",
            out.len()
        )));
    }
    Ok((out, aborted))
}

/// Convenience: run the flow and evaluate a scalar per path.
fn mc_scalar(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    cfg: &MonteCarloConfig,
    value: impl Fn(&FlowState, &DriverPath) -> Result<f64> + Sync,
) -> Result<EstimateWithCI> {
    let (values, aborted) = collect_paths(system.dim(), cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        value(&flow, driver)
    })?;
    Ok(EstimateWithCI::from_samples(
        &values,
        aborted,
        cfg.paths,
        cfg.seed.master,
        cfg.antithetic,
    ))
}

/// `P_t f(x) = E[f(X_t^x)]` by plain Monte Carlo.
pub fn semigroup_estimate(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    t: f64,
    f: &TestFunction,
    cfg: &MonteCarloConfig,
) -> Result<EstimateWithCI> {
    let t_idx = cfg.t_index(t)?;
    mc_scalar(system, x, cfg, |flow, _| Ok(f.eval(&flow.x[t_idx])))
}

/// Gradient through the commutation `V_i P_t f = E[sum_k alpha^i_k V_k f(X_t)]`;
/// requires an analytic gradient of `f`.
pub fn gradient_commutation(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    t: f64,
    f: &TestFunction,
    cfg: &MonteCarloConfig,
) -> Result<Vec<EstimateWithCI>> {
    if !f.has_gradient() {
        return Err(Error::MissingGradient(f.name.clone()));
    }
    let t_idx = cfg.t_index(t)?;
    let n = system.dim();
    let (rows, aborted) = collect_paths(n, cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        let xt = &flow.x[t_idx];
        let grad = f.gradient(xt)?;
        let vf: Vec<f64> = (0..n).map(|k| grad.dot(&system.field(k, xt))).collect();
        let alpha = &flow.alpha[t_idx];
        Ok((0..n)
            .map(|i| (0..n).map(|k| alpha[(i, k)] * vf[k]).sum::<f64>())
            .collect::<Vec<f64>>())
    })?;
    Ok(split_components(rows, n, aborted, cfg))
}

/// Gradient through the integration-by-parts weight:
/// `V_i P_t f = E[T*_{V_i} 1 . f(X_t)]`; `f` may be merely measurable.
pub fn gradient_ibp(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    t: f64,
    f: &TestFunction,
    cfg: &MonteCarloConfig,
) -> Result<Vec<EstimateWithCI>> {
    let t_idx = cfg.t_index(t)?;
    let n = system.dim();
    let kernel = HKernelGrid::new(cfg.grid, cfg.hurst);
    let (rows, aborted) = collect_paths(n, cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        let bundle =
            MalliavinBundle::compute(system, &flow, driver, &kernel, t_idx, cfg.scheme, true)?;
        let weights = ibp_weights_all(&flow, &kernel, &bundle);
        let fx = f.eval(&flow.x[t_idx]);
        Ok((0..n).map(|i| weights[i] * fx).collect::<Vec<f64>>())
    })?;
    Ok(split_components(rows, n, aborted, cfg))
}

/// Oracle estimator: central differences of the semigroup along the frame
/// directions with common random numbers,
/// `V_i P_t f ~ [P_t f(x + e V_i(x)) - P_t f(x - e V_i(x))] / 2e`.
pub fn gradient_fd(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    t: f64,
    f: &TestFunction,
    cfg: &MonteCarloConfig,
    step: f64,
) -> Result<Vec<EstimateWithCI>> {
    let t_idx = cfg.t_index(t)?;
    let n = system.dim();
    let eps = step * x.norm().max(1.0);
    let (rows, aborted) = collect_paths(n, cfg, |_idx, _path, driver| {
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let dir = system.field(i, x);
            let xp = x + &dir * eps;
            let xm = x - &dir * eps;
            let fp = integrate_flow(system, driver, &xp, cfg.scheme, cfg.substeps)?;
            let fm = integrate_flow(system, driver, &xm, cfg.scheme, cfg.substeps)?;
            vals.push((f.eval(&fp.x[t_idx]) - f.eval(&fm.x[t_idx])) / (2.0 * eps));
        }
        Ok(vals)
    })?;
    Ok(split_components(rows, n, aborted, cfg))
}

/// Default relative finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

fn split_components(
    rows: Vec<Vec<f64>>,
    n: usize,
    aborted: usize,
    cfg: &MonteCarloConfig,
) -> Vec<EstimateWithCI> {
    (0..n)
        .map(|i| {
            let comp: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            EstimateWithCI::from_samples(&comp, aborted, cfg.paths, cfg.seed.master, cfg.antithetic)
        })
        .collect()
}

/// Carre du champ `Gamma(f)(x) = sum_i <grad f(x), V_i(x)>^2`.
pub fn carre_du_champ(
    system: &VectorFieldSystem,
    f: &TestFunction,
    x: &DVector<f64>,
) -> Result<f64> {
    let grad = f.gradient(x)?;
    Ok((0..system.dim())
        .map(|i| grad.dot(&system.field(i, x)).powi(2))
        .sum())
}

/// `sqrt(Gamma(f))` as a derived test function (bounded whenever `grad f` and
/// the fields are).
pub fn sqrt_carre_du_champ_fn(system: &VectorFieldSystem, f: &TestFunction) -> Result<TestFunction> {
    if !f.has_gradient() {
        return Err(Error::MissingGradient(f.name.clone()));
    }
    let sys = system.clone();
    let f2 = f.clone();
    Ok(TestFunction::new(
        format!("sqrt_carre({})", f.name),
        Arc::new(move |y: &DVector<f64>| {
            carre_du_champ(&sys, &f2, y).map(f64::sqrt).unwrap_or(f64::NAN)
        }),
        None,
        f.bounded,
        None,
    ))
}

/// `Gamma(f)` as a derived test function.
pub fn carre_du_champ_fn(system: &VectorFieldSystem, f: &TestFunction) -> Result<TestFunction> {
    if !f.has_gradient() {
        return Err(Error::MissingGradient(f.name.clone()));
    }
    let sys = system.clone();
    let f2 = f.clone();
    Ok(TestFunction::new(
        format!("carre({})", f.name),
        Arc::new(move |y: &DVector<f64>| carre_du_champ(&sys, &f2, y).unwrap_or(f64::NAN)),
        None,
        f.bounded,
        None,
    ))
}
