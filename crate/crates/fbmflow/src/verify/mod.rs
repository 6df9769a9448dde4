//! Experiment harness: each experiment embodies one of the gradient-bound or
//! functional-inequality statements as an empirical check with
//! confidence-interval-aware verdicts, and emits plot-ready report rows.
//!
//! Inequality verdicts are statistical, never pointwise: "holds" means
//! `LHS <= RHS + 2 * combined stderr`, so Monte Carlo noise cannot manufacture
//! violations.

pub mod report;

pub use report::{
    csv_string, format_x, read_report_json, write_report, Report, ReportRow, CSV_HEADER,
};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{
    carre_du_champ_fn, collect_paths, semigroup_estimate, sqrt_carre_du_champ_fn, EstimateWithCI,
    MonteCarloConfig, TestFunction,
};
use crate::flow::{
    alpha_orthogonality_excess, exponential_alpha_update, integrate_alpha_synthetic,
    integrate_flow, Scheme,
};
use crate::malliavin::{ibp_weights_all, DBetaField, HKernelGrid, MalliavinBundle};
use crate::systems::VectorFieldSystem;

/// One point of a rate fit.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    /// Whether the point's CI excluded zero and entered the fit.
    pub used: bool,
}

/// Least-squares fit of `log |estimate|` against `log t`.
#[derive(Debug, Clone)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub identifiable: bool,
    pub points: Vec<RatePoint>,
}

fn fit_log_log(points: &[RatePoint]) -> RateFit {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.used)
        .map(|p| (p.t.ln(), p.value.abs().ln()))
        .collect();
    if used.len() < 2 {
        return RateFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            residual: f64::NAN,
            identifiable: false,
            points: points.to_vec(),
        };
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = used.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (used
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    RateFit {
        slope,
        intercept,
        residual,
        identifiable: true,
        points: points.to_vec(),
    }
}

/// Magnitude of the IBP gradient estimate (euclidean over directions) with a
/// delta-method standard error.
fn gradient_magnitude(ests: &[EstimateWithCI]) -> (f64, f64) {
    let norm2: f64 = ests.iter().map(|e| e.mean * e.mean).sum();
    let norm = norm2.sqrt();
    if norm == 0.0 {
        let se = ests.iter().map(|e| e.stderr.powi(2)).sum::<f64>().sqrt();
        return (0.0, se);
    }
    let var: f64 = ests
        .iter()
        .map(|e| (e.mean / norm * e.stderr).powi(2))
        .sum();
    (norm, var.sqrt())
}

/// IBP gradient estimates at every `t` in one pass over a shared ensemble.
/// The D-beta field is time-independent and computed once per path.
pub fn gradient_ibp_scan(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    ts: &[f64],
    f: &TestFunction,
    cfg: &MonteCarloConfig,
) -> Result<Vec<Vec<EstimateWithCI>>> {
    let n = system.dim();
    let kernel = HKernelGrid::new(cfg.grid, cfg.hurst);
    let t_indices: Vec<usize> = ts
        .iter()
        .map(|&t| cfg.t_index(t))
        .collect::<Result<_>>()?;
    let (rows, aborted) = collect_paths(n, cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        let field = if system.zero_omega() {
            None
        } else {
            Some(Arc::new(DBetaField::compute(
                system, &flow, driver, cfg.scheme,
            )?))
        };
        let mut vals = Vec::with_capacity(t_indices.len() * n);
        for &t_idx in &t_indices {
            let bundle = MalliavinBundle::compute_shared(
                system,
                &flow,
                driver,
                &kernel,
                t_idx,
                cfg.scheme,
                field.clone(),
            )?;
            let weights = ibp_weights_all(&flow, &kernel, &bundle);
            let fx = f.eval(&flow.x[t_idx]);
            for i in 0..n {
                vals.push(weights[i] * fx);
            }
        }
        Ok(vals)
    })?;

    let mut out = Vec::with_capacity(t_indices.len());
    for (ti, _) in t_indices.iter().enumerate() {
        let mut per_i = Vec::with_capacity(n);
        for i in 0..n {
            let comp: Vec<f64> = rows.iter().map(|r| r[ti * n + i]).collect();
            per_i.push(EstimateWithCI::from_samples(
                &comp,
                aborted,
                cfg.paths,
                cfg.seed.master,
                cfg.antithetic,
            ));
        }
        out.push(per_i);
    }
    Ok(out)
}

/// Blow-up-rate scan: fits the slope of `log |V P_t f|` (from the IBP
/// estimator) against `log t`. `order = 1` is the direct first derivative;
/// `order = 2` differentiates the first-order estimator spatially by central
/// differences with common random numbers.
pub fn rate_scan(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    ts: &[f64],
    f: &TestFunction,
    order: u8,
    fd_step: f64,
    cfg: &MonteCarloConfig,
) -> Result<(RateFit, Vec<ReportRow>)> {
    if !f.bounded {
        return Err(Error::Domain(format!(
            "rate scan needs a bounded f, `{}` is not",
            f.name
        )));
    }
    if !(order == 1 || order == 2) {
        return Err(Error::Domain("order must be 1 or 2".into()));
    }
    let sorted_check = ts.windows(2).all(|w| w[0] > w[1]) || ts.windows(2).all(|w| w[0] < w[1]);
    if ts.is_empty() || !sorted_check {
        return Err(Error::Domain("t list must be sorted and nonempty".into()));
    }

    let per_t: Vec<Vec<EstimateWithCI>> = if order == 1 {
        gradient_ibp_scan(system, x, ts, f, cfg)?
    } else {
        // spatial central differences of the k = 1 estimator along V_1(x)
        let eps = fd_step * x.norm().max(1.0);
        let dir = system.field(0, x);
        let plus = gradient_ibp_scan(system, &(x + &dir * eps), ts, f, cfg)?;
        let minus = gradient_ibp_scan(system, &(x - &dir * eps), ts, f, cfg)?;
        plus.into_iter()
            .zip(minus)
            .map(|(p, m)| {
                p.into_iter()
                    .zip(m)
                    .map(|(a, b)| {
                        let mean = (a.mean - b.mean) / (2.0 * eps);
                        // CRN: correlation unknown at this level, combine conservatively
                        let stderr =
                            (a.stderr.powi(2) + b.stderr.powi(2)).sqrt() / (2.0 * eps);
                        EstimateWithCI {
                            mean,
                            stderr,
                            ci: (mean - 1.96 * stderr, mean + 1.96 * stderr),
                            paths: a.paths,
                            aborted: a.aborted + b.aborted,
                            seed: a.seed,
                            valid: a.valid && b.valid,
                        }
                    })
                    .collect()
            })
            .collect()
    };

    let mut points = Vec::with_capacity(ts.len());
    let mut rows = Vec::new();
    for (&t, ests) in ts.iter().zip(&per_t) {
        let (mag, se) = gradient_magnitude(ests);
        let used = mag > 1.96 * se;
        points.push(RatePoint {
            t,
            value: mag,
            stderr: se,
            used,
        });
        rows.push(ReportRow {
            experiment: "rate_scan".into(),
            kind: format!("k{order}_gradient_magnitude"),
            system: system.name().into(),
            h: cfg.hurst.value(),
            x: format_x(x),
            t,
            n: cfg.grid.steps(),
            paths: cfg.paths,
            estimator: "ibp".into(),
            value: mag,
            stderr: se,
            verdict: if used { "used" } else { "ci_contains_zero" }.into(),
        });
    }
    let fit = fit_log_log(&points);
    rows.push(ReportRow {
        experiment: "rate_scan".into(),
        kind: format!("k{order}_fitted_slope"),
        system: system.name().into(),
        h: cfg.hurst.value(),
        x: format_x(x),
        t: f64::NAN,
        n: cfg.grid.steps(),
        paths: cfg.paths,
        estimator: "loglog_fit".into(),
        value: fit.slope,
        stderr: fit.residual,
        verdict: if fit.identifiable {
            "fitted"
        } else {
            "rate_unidentifiable"
        }
        .into(),
    });
    Ok((fit, rows))
}

/// One `(t, ratio)` entry of the inverse-Poincare scan.
#[derive(Debug, Clone)]
pub struct PoincarePoint {
    pub t: f64,
    pub gradient_sq: f64,
    pub variance_term: f64,
    pub ratio: f64,
    pub stderr: f64,
    pub skipped: bool,
}

/// Inverse Poincare scan: `|V P_t f|^2 <= C(t, x) (P_t f^2 - (P_t f)^2)` with
/// `C = O(t^{-2H})`; fits the log-log slope of the ratio.
#[derive(Debug, Clone)]
pub struct PoincareReport {
    pub points: Vec<PoincarePoint>,
    pub fit: RateFit,
}

pub fn inverse_poincare_check(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    ts: &[f64],
    f: &TestFunction,
    cfg: &MonteCarloConfig,
) -> Result<(PoincareReport, Vec<ReportRow>)> {
    let n = system.dim();
    let grads = gradient_ibp_scan(system, x, ts, f, cfg)?;

    // semigroup of f and f^2 on a shared ensemble, all t at once
    let t_indices: Vec<usize> = ts
        .iter()
        .map(|&t| cfg.t_index(t))
        .collect::<Result<_>>()?;
    let (fvals, _aborted) = collect_paths(n, cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        Ok(t_indices
            .iter()
            .map(|&k| f.eval(&flow.x[k]))
            .collect::<Vec<f64>>())
    })?;

    let mut points = Vec::new();
    let mut rate_points = Vec::new();
    let mut rows = Vec::new();
    for (ti, &t) in ts.iter().enumerate() {
        let (mag, mag_se) = gradient_magnitude(&grads[ti]);
        let gradient_sq = mag * mag;
        let samples: Vec<f64> = fvals.iter().map(|r| r[ti]).collect();
        let np = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / np;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (np - 1.0);
        // large-sample stderr of the sample variance
        let m4 = samples.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / np;
        let var_se = ((m4 - var * var).max(0.0) / np).sqrt();

        let skipped = var <= 1.96 * var_se;
        let ratio = gradient_sq / var;
        // stderr via relative propagation
        let rel =
            ((2.0 * mag_se / mag.max(1e-300)).powi(2) + (var_se / var.max(1e-300)).powi(2)).sqrt();
        let stderr = ratio.abs() * rel;
        points.push(PoincarePoint {
            t,
            gradient_sq,
            variance_term: var,
            ratio,
            stderr,
            skipped,
        });
        rate_points.push(RatePoint {
            t,
            value: ratio,
            stderr,
            used: !skipped && gradient_sq > 0.0,
        });
        rows.push(ReportRow {
            experiment: "inverse_poincare".into(),
            kind: "ratio".into(),
            system: system.name().into(),
            h: cfg.hurst.value(),
            x: format_x(x),
            t,
            n: cfg.grid.steps(),
            paths: cfg.paths,
            estimator: "ibp_over_variance".into(),
            value: ratio,
            stderr,
            verdict: if skipped { "skipped" } else { "used" }.into(),
        });
    }
    let fit = fit_log_log(&rate_points);
    rows.push(ReportRow {
        experiment: "inverse_poincare".into(),
        kind: "ratio_slope".into(),
        system: system.name().into(),
        h: cfg.hurst.value(),
        x: format_x(x),
        t: f64::NAN,
        n: cfg.grid.steps(),
        paths: cfg.paths,
        estimator: "loglog_fit".into(),
        value: fit.slope,
        stderr: fit.residual,
        verdict: if fit.identifiable {
            format!("target_minus_2H={}", -2.0 * cfg.hurst.value())
        } else {
            "rate_unidentifiable".into()
        },
    });
    Ok((PoincareReport { points, fit }, rows))
}

/// Alpha-orthogonality input: synthetic constant skew matrices or a system.
pub enum OrthogonalityMode<'a> {
    /// Constant per-direction matrices `H_l` fed directly into the alpha
    /// equation.
    Synthetic(&'a [DMatrix<f64>]),
    /// Alpha integrated along a system's flow; refuses non-skew systems
    /// unless `observational`.
    System {
        system: &'a VectorFieldSystem,
        x0: &'a DVector<f64>,
        observational: bool,
    },
}

#[derive(Debug, Clone)]
pub struct OrthogonalityReport {
    pub exponential_excess: f64,
    pub heun_excess: f64,
    pub observational: bool,
}

/// Maximum row/column squared-norm excess of alpha over 1, over paths and
/// times: zero (up to scheme error) exactly when the structure constants are
/// skew-symmetric.
pub fn alpha_orthogonality_check(
    mode: OrthogonalityMode<'_>,
    cfg: &MonteCarloConfig,
) -> Result<(OrthogonalityReport, Vec<ReportRow>)> {
    let (exp_excess, heun_excess, observational, name, dim) = match mode {
        OrthogonalityMode::Synthetic(h_mats) => {
            let n = h_mats.len();
            for h in h_mats {
                if (h + h.transpose()).norm() > 1e-12 {
                    return Err(Error::HypothesisViolation(
                        "synthetic omega matrices must be skew-symmetric".into(),
                    ));
                }
            }
            let (vals, _) = collect_paths(n, cfg, |_idx, _path, driver| {
                let per = vec![h_mats.to_vec(); driver.intervals()];
                let exp_alphas = exponential_alpha_update(&per, driver)?;
                let heun_alphas =
                    integrate_alpha_synthetic(h_mats, driver, Scheme::Heun, cfg.substeps)?;
                Ok((
                    alpha_orthogonality_excess(&exp_alphas),
                    alpha_orthogonality_excess(&heun_alphas),
                ))
            })?;
            let exp = vals.iter().map(|v| v.0).fold(0.0, f64::max);
            let heun = vals.iter().map(|v| v.1).fold(0.0, f64::max);
            (exp, heun, false, "synthetic".to_string(), n)
        }
        OrthogonalityMode::System {
            system,
            x0,
            observational,
        } => {
            let probe: Vec<DVector<f64>> = vec![
                x0.clone(),
                DVector::zeros(system.dim()),
                DVector::from_element(system.dim(), 0.7),
            ];
            let skew = system.check_hypothesis_skew(&probe)?;
            if !skew.passes && !observational {
                return Err(Error::HypothesisViolation(format!(
                    "system `{}` violates the skew structure hypothesis \
                     (max violation {:.3e}); run check_hypothesis_skew or pass observational",
                    system.name(),
                    skew.max_violation
                )));
            }
            let (vals, _) = collect_paths(system.dim(), cfg, |_idx, _path, driver| {
                let flow = integrate_flow(system, driver, x0, cfg.scheme, cfg.substeps)?;
                // exponential route along the same flow
                let oms = crate::flow::omega_midpoints(system, &flow, driver)?;
                let exp_alphas = exponential_alpha_update(&oms, driver)?;
                Ok((
                    alpha_orthogonality_excess(&exp_alphas),
                    alpha_orthogonality_excess(&flow.alpha),
                ))
            })?;
            let exp = vals.iter().map(|v| v.0).fold(0.0, f64::max);
            let heun = vals.iter().map(|v| v.1).fold(0.0, f64::max);
            (exp, heun, observational, system.name().to_string(), system.dim())
        }
    };
    let _ = dim;
    let verdict = if observational {
        "observational".to_string()
    } else if exp_excess <= 1e-10 && heun_excess <= 1e-4 {
        "pass".to_string()
    } else {
        "fail".to_string()
    };
    let mk_row = |kind: &str, value: f64| ReportRow {
        experiment: "alpha_orthogonality".into(),
        kind: kind.into(),
        system: name.clone(),
        h: cfg.hurst.value(),
        x: String::new(),
        t: cfg.grid.horizon(),
        n: cfg.grid.steps(),
        paths: cfg.paths,
        estimator: "max_excess".into(),
        value,
        stderr: 0.0,
        verdict: verdict.clone(),
    };
    let rows = vec![
        mk_row("exponential_update", exp_excess),
        mk_row("heun_integrator", heun_excess),
    ];
    Ok((
        OrthogonalityReport {
            exponential_excess: exp_excess,
            heun_excess,
            observational,
        },
        rows,
    ))
}

/// One `(x, t)` cell of the global-bound check.
#[derive(Debug, Clone)]
pub struct GlobalBoundCell {
    pub x: DVector<f64>,
    pub t: f64,
    /// `sqrt(Gamma(P_t f))` and its stderr.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `P_t sqrt(Gamma(f))` and its stderr.
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// `Gamma(P_t f)` and `P_t Gamma(f)` for the Jensen consequence.
    pub lhs_sq: f64,
    pub rhs_jensen: f64,
    pub rhs_jensen_stderr: f64,
    pub holds: bool,
    pub jensen_holds: bool,
}

#[derive(Debug, Clone)]
pub struct GlobalBoundReport {
    pub cells: Vec<GlobalBoundCell>,
    pub observational: bool,
    pub all_hold: bool,
}

/// Global gradient bound `sqrt(Gamma(P_t f)) <= P_t sqrt(Gamma(f))` and its
/// Jensen consequence `Gamma(P_t f) <= P_t Gamma(f)`, checked per `(x, t)`
/// with CI-aware verdicts on a shared path ensemble. Requires the skew
/// structure hypothesis unless `observational`.
pub fn global_bound_check(
    system: &VectorFieldSystem,
    f: &TestFunction,
    xs: &[DVector<f64>],
    ts: &[f64],
    cfg: &MonteCarloConfig,
    observational: bool,
) -> Result<(GlobalBoundReport, Vec<ReportRow>)> {
    if !f.has_gradient() {
        return Err(Error::MissingGradient(f.name.clone()));
    }
    let probe: Vec<DVector<f64>> = xs.to_vec();
    let skew = system.check_hypothesis_skew(&probe)?;
    if !skew.passes && !observational {
        return Err(Error::HypothesisViolation(format!(
            "system `{}` violates the skew structure hypothesis; \
             pass observational to run anyway",
            system.name()
        )));
    }

    let n = system.dim();
    let t_indices: Vec<usize> = ts
        .iter()
        .map(|&t| cfg.t_index(t))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut all_hold = true;
    for x in xs {
        // per path and t: commutation integrand Y_i, sqrt(Gamma f)(X_t),
        // Gamma f(X_t)
        let (samples, _aborted) = collect_paths(n, cfg, |_idx, _path, driver| {
            let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
            let mut out = Vec::with_capacity(t_indices.len());
            for &k in &t_indices {
                let xt = &flow.x[k];
                let grad = f.gradient(xt)?;
                let vf: Vec<f64> = (0..n).map(|i| grad.dot(&system.field(i, xt))).collect();
                let alpha = &flow.alpha[k];
                let y: Vec<f64> = (0..n)
                    .map(|i| (0..n).map(|j| alpha[(i, j)] * vf[j]).sum())
                    .collect();
                let gamma_f: f64 = vf.iter().map(|v| v * v).sum();
                out.push((y, gamma_f.sqrt(), gamma_f));
            }
            Ok(out)
        })?;
        let np = samples.len() as f64;

        for (ti, &t) in ts.iter().enumerate() {
            // means
            let mut g = DVector::<f64>::zeros(n);
            let mut s_mean = 0.0;
            let mut q_mean = 0.0;
            for row in &samples {
                for i in 0..n {
                    g[i] += row[ti].0[i];
                }
                s_mean += row[ti].1;
                q_mean += row[ti].2;
            }
            g /= np;
            s_mean /= np;
            q_mean /= np;

            // covariances
            let mut cov_y = DMatrix::<f64>::zeros(n, n);
            let mut var_s = 0.0;
            let mut var_q = 0.0;
            for row in &samples {
                let dy: Vec<f64> = (0..n).map(|i| row[ti].0[i] - g[i]).collect();
                for i in 0..n {
                    for j in 0..n {
                        cov_y[(i, j)] += dy[i] * dy[j];
                    }
                }
                var_s += (row[ti].1 - s_mean).powi(2);
                var_q += (row[ti].2 - q_mean).powi(2);
            }
            cov_y /= np - 1.0;
            var_s /= np - 1.0;
            var_q /= np - 1.0;

            let lhs_sq: f64 = g.norm_squared();
            let lhs = lhs_sq.sqrt();
            // delta method for sqrt(sum g_i^2)
            let lhs_var = if lhs > 0.0 {
                (g.transpose() * &cov_y * &g)[(0, 0)] / (lhs_sq * np)
            } else {
                cov_y.trace() / np
            };
            let lhs_stderr = lhs_var.max(0.0).sqrt();
            let rhs_stderr = (var_s / np).sqrt();
            let comb = (lhs_var.max(0.0) + var_s / np).sqrt();
            let holds = lhs <= s_mean + 2.0 * comb;

            let lhs_sq_var = 4.0 * (g.transpose() * &cov_y * &g)[(0, 0)] / np;
            let comb_j = (lhs_sq_var.max(0.0) + var_q / np).sqrt();
            let jensen_holds = lhs_sq <= q_mean + 2.0 * comb_j;

            if !observational {
                all_hold &= holds && jensen_holds;
            }
            let verdict = if observational {
                "observational".to_string()
            } else if holds {
                "holds".to_string()
            } else {
                "violated".to_string()
            };
            cells.push(GlobalBoundCell {
                x: x.clone(),
                t,
                lhs,
                lhs_stderr,
                rhs: s_mean,
                rhs_stderr,
                lhs_sq,
                rhs_jensen: q_mean,
                rhs_jensen_stderr: (var_q / np).sqrt(),
                holds,
                jensen_holds,
            });
            rows.push(ReportRow {
                experiment: "global_bound".into(),
                kind: "sqrt_gamma_lhs".into(),
                system: system.name().into(),
                h: cfg.hurst.value(),
                x: format_x(x),
                t,
                n: cfg.grid.steps(),
                paths: cfg.paths,
                estimator: "commutation".into(),
                value: lhs,
                stderr: lhs_stderr,
                verdict: verdict.clone(),
            });
            rows.push(ReportRow {
                experiment: "global_bound".into(),
                kind: "semigroup_rhs".into(),
                system: system.name().into(),
                h: cfg.hurst.value(),
                x: format_x(x),
                t,
                n: cfg.grid.steps(),
                paths: cfg.paths,
                estimator: "semigroup".into(),
                value: s_mean,
                stderr: rhs_stderr,
                verdict,
            });
        }
    }
    Ok((
        GlobalBoundReport {
            cells,
            observational,
            all_hold,
        },
        rows,
    ))
}

#[derive(Debug, Clone)]
pub struct DetMomentPoint {
    pub t: f64,
    pub p: i32,
    pub estimate: EstimateWithCI,
}

#[derive(Debug, Clone)]
pub struct DetMomentReport {
    pub points: Vec<DetMomentPoint>,
    /// Fitted slope of `log E[det M^{-p}]` vs `log t` per requested `p`.
    pub trend_slopes: Vec<(i32, f64)>,
}

/// Inverse-determinant moments of the Malliavin matrix `M`:
/// `E[det M(t)^{-p}]` per `t` with a log-log trend slope; boundedness shows
/// up as a slope near zero as `t` decreases.
pub fn det_m_moments(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    ts: &[f64],
    ps: &[i32],
    cfg: &MonteCarloConfig,
) -> Result<(DetMomentReport, Vec<ReportRow>)> {
    let kernel = HKernelGrid::new(cfg.grid, cfg.hurst);
    let t_indices: Vec<usize> = ts
        .iter()
        .map(|&t| cfg.t_index(t))
        .collect::<Result<_>>()?;
    let (dets, aborted) = collect_paths(system.dim(), cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        t_indices
            .iter()
            .map(|&k| crate::malliavin::m_matrix(&flow, &kernel, k).map(|(_, det)| det))
            .collect::<Result<Vec<f64>>>()
    })?;

    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut trend_slopes = Vec::new();
    for &p in ps {
        let mut rate_points = Vec::new();
        for (ti, &t) in ts.iter().enumerate() {
            let vals: Vec<f64> = dets.iter().map(|r| r[ti].powi(-p)).collect();
            let est =
                EstimateWithCI::from_samples(&vals, aborted, cfg.paths, cfg.seed.master, cfg.antithetic);
            rate_points.push(RatePoint {
                t,
                value: est.mean,
                stderr: est.stderr,
                used: true,
            });
            rows.push(ReportRow {
                experiment: "det_m_moments".into(),
                kind: format!("inv_det_moment_p{p}"),
                system: system.name().into(),
                h: cfg.hurst.value(),
                x: format_x(x),
                t,
                n: cfg.grid.steps(),
                paths: cfg.paths,
                estimator: "mc_mean".into(),
                value: est.mean,
                stderr: est.stderr,
                verdict: String::new(),
            });
            points.push(DetMomentPoint { t, p, estimate: est });
        }
        let fit = fit_log_log(&rate_points);
        trend_slopes.push((p, fit.slope));
        rows.push(ReportRow {
            experiment: "det_m_moments".into(),
            kind: format!("trend_slope_p{p}"),
            system: system.name().into(),
            h: cfg.hurst.value(),
            x: format_x(x),
            t: f64::NAN,
            n: cfg.grid.steps(),
            paths: cfg.paths,
            estimator: "loglog_fit".into(),
            value: fit.slope,
            stderr: fit.residual,
            verdict: if fit.slope.abs() <= 0.3 { "bounded" } else { "trend" }.into(),
        });
    }
    Ok((DetMomentReport { points, trend_slopes }, rows))
}

/// Running-supremum moments `E[sup_{t <= T} |X_t|^p]`, monitoring only.
pub fn moment_diagnostics(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    ps: &[u32],
    cfg: &MonteCarloConfig,
) -> Result<(Vec<(u32, EstimateWithCI)>, Vec<ReportRow>)> {
    let (sups, aborted) = collect_paths(system.dim(), cfg, |_idx, _path, driver| {
        let flow = integrate_flow(system, driver, x, cfg.scheme, cfg.substeps)?;
        Ok(flow.x.iter().map(|v| v.norm()).fold(0.0, f64::max))
    })?;
    let mut ests = Vec::new();
    let mut rows = Vec::new();
    for &p in ps {
        let vals: Vec<f64> = sups.iter().map(|s| s.powi(p as i32)).collect();
        let est = EstimateWithCI::from_samples(&vals, aborted, cfg.paths, cfg.seed.master, cfg.antithetic);
        rows.push(ReportRow {
            experiment: "moment_diagnostics".into(),
            kind: format!("sup_moment_p{p}"),
            system: system.name().into(),
            h: cfg.hurst.value(),
            x: format_x(x),
            t: cfg.grid.horizon(),
            n: cfg.grid.steps(),
            paths: cfg.paths,
            estimator: "mc_mean".into(),
            value: est.mean,
            stderr: est.stderr,
            verdict: if est.mean.is_finite() { "finite" } else { "diverged" }.into(),
        });
        ests.push((p, est));
    }
    Ok((ests, rows))
}

/// Gaussian closed form `E|cos(x + Z)|` for `Z ~ N(0, s2)`, via the Fourier
/// series of `|cos|`; the series terms decay like `exp(-2 k^2 s2) / k^2`, so
/// a few hundred terms reach machine precision for any `s2` of interest.
/// Used as an independent oracle for the global-bound RHS.
pub fn abs_cos_gaussian_mean(x: f64, s2: f64) -> f64 {
    let mut acc = 2.0 / std::f64::consts::PI;
    for k in 1..2000 {
        let kf = k as f64;
        let term = 4.0 / std::f64::consts::PI * (if k % 2 == 1 { 1.0 } else { -1.0 })
            / (4.0 * kf * kf - 1.0)
            * (-2.0 * kf * kf * s2).exp()
            * (2.0 * kf * x).cos();
        acc += term;
        if term.abs() < 1e-16 && k > 8 {
            break;
        }
    }
    acc
}

/// Semigroup wrapper re-exported for the CLI layer: estimates `P_t f` and
/// returns a report row.
pub fn semigroup_row(
    system: &VectorFieldSystem,
    x: &DVector<f64>,
    t: f64,
    f: &TestFunction,
    cfg: &MonteCarloConfig,
) -> Result<(EstimateWithCI, ReportRow)> {
    let est = semigroup_estimate(system, x, t, f, cfg)?;
    let row = ReportRow {
        experiment: "semigroup".into(),
        kind: f.name.clone(),
        system: system.name().into(),
        h: cfg.hurst.value(),
        x: format_x(x),
        t,
        n: cfg.grid.steps(),
        paths: cfg.paths,
        estimator: "semigroup".into(),
        value: est.mean,
        stderr: est.stderr,
        verdict: if est.valid { "ok" } else { "invalid" }.into(),
    };
    Ok((est, row))
}

/// Derived test functions used by the bounds experiments.
pub fn bound_test_functions(
    system: &VectorFieldSystem,
    f: &TestFunction,
) -> Result<(TestFunction, TestFunction)> {
    Ok((
        sqrt_carre_du_champ_fn(system, f)?,
        carre_du_champ_fn(system, f)?,
    ))
}
