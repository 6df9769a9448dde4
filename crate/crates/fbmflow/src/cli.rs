//! Command-line front end: config parsing, experiment dispatch, reports.
//!
//! Exit codes: 0 on success, 1 when a verdict fails, 2 on configuration or
//! usage errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use crate::config::{defaults, RunConfig};
use crate::error::{Error, Result};
use crate::estimators::{gradient_ibp, EstimateWithCI, TestFunction};
use crate::fbm::CholeskySampler;
use crate::flow::{integrate_flow, DriverPath, FlowState};
use crate::malliavin::{HKernelGrid, MalliavinBundle};
use crate::systems;
use crate::verify::{
    alpha_orthogonality_check, det_m_moments, format_x, global_bound_check,
    inverse_poincare_check, moment_diagnostics, rate_scan, write_report, OrthogonalityMode,
    ReportRow,
};

#[derive(Parser, Debug)]
#[command(
    name = "fbmflow",
    version,
    about = "Simulation and verification laboratory for SDEs driven by fractional Brownian motion (H > 1/2)",
    after_help = "Config keys and defaults (TOML sections; flags override):
  [experiment] kind = <subcommand>     output = \"reports/run\"
  [system]     name = \"identity\"       dimension = 2   params = []   fields = []
  [fbm]        hurst = 0.75            grid_n = 128    horizon = 0.5
  [mc]         paths = 10000 (sample-fbm/integrate: 1)  seed = 42   scheme = \"heun\"
               substeps = 4            level = <full>  antithetic = false
  [sweep]      t = [0.5, 0.25, 0.125, 0.0625, 0.03125]
               x = [-0.8, 0, 0.8 on the first axis]     f = \"sin_y1\"
               order = 1               fd_step = 0.001  observational = false
The FBMFLOW_OUTDIR environment variable prefixes relative output paths."
)]
pub struct Cli {
    /// TOML config file; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Path-count override.
    #[arg(long, global = true)]
    pub paths: Option<usize>,

    /// Grid step-count override (power of two).
    #[arg(long, global = true)]
    pub grid: Option<usize>,

    /// Hurst parameter override (1/2 < H < 1).
    #[arg(long, global = true)]
    pub hurst: Option<f64>,

    /// Output base path override (reports are written as <out>.csv/.json).
    #[arg(long, global = true)]
    pub out: Option<String>,

    /// Verbose progress on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample fBm paths and write them as CSV files.
    SampleFbm,
    /// Integrate the flow and its variational processes along one path.
    Integrate {
        /// Also dump the full trajectory (one block per matrix, column-major).
        #[arg(long)]
        dump: bool,
    },
    /// Pathwise representation identity, Skorokhod duality and the Gaussian
    /// IBP closed form.
    VerifyIbp,
    /// Blow-up-rate scan of the IBP gradient estimator.
    GradientScan,
    /// Inverse Poincare, global gradient bound and alpha orthogonality.
    Bounds,
    /// Malliavin-determinant moments and running-supremum diagnostics.
    Moments,
}

/// Entry point used by `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own usage/help text; --help and --version are
            // successful exits, everything else is a usage error
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(all_verdicts_pass) => {
            if all_verdicts_pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidGrid(_) | Error::InvalidHurst(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.paths, cli.grid, cli.hurst, cli.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn output_base(cfg: &RunConfig) -> PathBuf {
    let base = PathBuf::from(&cfg.experiment.output);
    if base.is_relative() {
        if let Ok(dir) = std::env::var(defaults::OUT_ENV) {
            return PathBuf::from(dir).join(base);
        }
    }
    base
}

fn execute(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let base = output_base(&cfg);
    let verbose = cli.verbose > 0;
    match &cli.command {
        Command::SampleFbm => sample_fbm(&cfg, &base, cli.paths),
        Command::Integrate { dump } => integrate(&cfg, &base, *dump, verbose),
        Command::VerifyIbp => verify_ibp(&cfg, &base, verbose),
        Command::GradientScan => gradient_scan(&cfg, &base, verbose),
        Command::Bounds => bounds(&cfg, &base, verbose),
        Command::Moments => moments(&cfg, &base, verbose),
    }
}

fn note(verbose: bool, msg: &str) {
    if verbose {
        eprintln!("[fbmflow] {msg}");
    }
}

fn sample_fbm(cfg: &RunConfig, base: &Path, paths_flag: Option<usize>) -> Result<bool> {
    // sample-fbm writes one CSV per path; default 1 unless set explicitly
    let count = paths_flag.or(cfg.mc.paths).unwrap_or(1);
    let grid = cfg.build_grid()?;
    let hurst = cfg.build_hurst()?;
    let sampler = CholeskySampler::new(grid, hurst, cfg.system.dimension)?;
    let seed = crate::fbm::SeedSpec::new(cfg.mc.seed);
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    for p in 0..count as u64 {
        let path = sampler.sample(seed, p)?;
        let file = base.with_file_name(format!(
            "{}_path{p:04}.csv",
            base.file_name().and_then(|s| s.to_str()).unwrap_or("fbm")
        ));
        let mut buf = Vec::new();
        path.write_csv(&mut buf)?;
        std::fs::write(file, buf)?;
    }
    Ok(true)
}

fn first_t_index(cfg: &RunConfig, grid: &crate::fbm::TimeGrid) -> Result<(f64, usize)> {
    let t = *cfg
        .sweep
        .t
        .first()
        .ok_or_else(|| Error::Config("sweep.t is empty".into()))?;
    let idx = grid
        .index_of(t)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::Config(format!("t = {t} is not a positive grid node")))?;
    Ok((t, idx))
}

fn integrate(cfg: &RunConfig, base: &Path, dump: bool, verbose: bool) -> Result<bool> {
    let system = cfg.build_system()?;
    let mc = cfg.build_mc(1)?;
    let x0 = cfg
        .start_points()
        .into_iter()
        .next()
        .unwrap_or_else(|| DVector::zeros(system.dim()));
    note(verbose, &format!("integrating one path of `{}`", system.name()));
    let sampler = CholeskySampler::new(mc.grid, mc.hurst, system.dim())?;
    let path = sampler.sample(mc.seed, 0)?;
    let driver = match mc.level {
        Some(l) => DriverPath::new(path, l)?,
        None => DriverPath::full(path),
    };
    let flow = integrate_flow(&system, &driver, &x0, mc.scheme, mc.substeps)?;

    let mut rows = Vec::new();
    let mut push = |kind: &str, value: f64| {
        rows.push(ReportRow {
            experiment: "integrate".into(),
            kind: kind.into(),
            system: system.name().into(),
            h: mc.hurst.value(),
            x: format_x(&x0),
            t: mc.grid.horizon(),
            n: mc.grid.steps(),
            paths: 1,
            estimator: "pathwise".into(),
            value,
            stderr: 0.0,
            verdict: String::new(),
        });
    };
    push("jacobian_duality_residual", flow.jacobian_duality_residual());
    push("alpha_beta_duality_residual", flow.alpha_beta_duality_residual());
    push(
        "frame_consistency_residual",
        flow.frame_consistency_residual(&system),
    );
    push(
        "beta_relation_residual",
        flow.beta_relation_residual(&system)?,
    );
    write_report(&rows, cfg.mc.seed, cfg.echo(), base)?;
    if dump {
        let dump_path = base.with_extension("trajectory.csv");
        std::fs::write(&dump_path, trajectory_dump(&flow))?;
        note(verbose, &format!("trajectory dumped to {}", dump_path.display()));
    }
    Ok(true)
}

/// Per-path trajectory dump: one block per matrix, entries column-major.
fn trajectory_dump(flow: &FlowState) -> String {
    let n = flow.dim();
    let mut out = String::new();
    let matrix_block = |out: &mut String, name: &str, series: &[DMatrix<f64>]| {
        out.push_str(&format!("# {name}\n"));
        out.push('t');
        for col in 0..n {
            for row in 0..n {
                out.push_str(&format!(",{name}_{row}{col}"));
            }
        }
        out.push('\n');
        for (k, m) in series.iter().enumerate() {
            out.push_str(&flow.grid.point(k).to_string());
            for col in 0..n {
                for row in 0..n {
                    out.push_str(&format!(",{}", m[(row, col)]));
                }
            }
            out.push('\n');
        }
    };
    out.push_str("# X\nt");
    for c in 0..n {
        out.push_str(&format!(",x_{c}"));
    }
    out.push('\n');
    for (k, x) in flow.x.iter().enumerate() {
        out.push_str(&flow.grid.point(k).to_string());
        for c in 0..n {
            out.push_str(&format!(",{}", x[c]));
        }
        out.push('\n');
    }
    matrix_block(&mut out, "J", &flow.jac);
    matrix_block(&mut out, "Jinv", &flow.jac_inv);
    matrix_block(&mut out, "alpha", &flow.alpha);
    matrix_block(&mut out, "beta", &flow.beta);
    out
}

fn verify_ibp(cfg: &RunConfig, base: &Path, verbose: bool) -> Result<bool> {
    let mc = cfg.build_mc(defaults::PATHS)?;
    let (t, t_idx) = first_t_index(cfg, &mc.grid)?;
    let mut rows = Vec::new();
    let mut all_pass = true;

    // Gaussian IBP closed form: identity frame, n = 1, x = 0, f = sign.
    // E[T* 1 sign(X_t)] = 2 phi(0) / t^H.
    note(verbose, "Gaussian IBP closed form");
    let gauss_sys = systems::identity_frame(1);
    let x0 = DVector::zeros(1);
    let est = gradient_ibp(&gauss_sys, &x0, t, &TestFunction::sign_first(), &mc)?;
    let closed_form = (2.0 / std::f64::consts::PI).sqrt() / t.powf(mc.hurst.value());
    let gap = (est[0].mean - closed_form).abs();
    let pass = gap <= 3.0 * est[0].stderr && est[0].valid;
    all_pass &= pass;
    rows.push(ReportRow {
        experiment: "verify_ibp".into(),
        kind: "gaussian_ibp_closed_form".into(),
        system: gauss_sys.name().into(),
        h: mc.hurst.value(),
        x: "0".into(),
        t,
        n: mc.grid.steps(),
        paths: mc.paths,
        estimator: "ibp".into(),
        value: est[0].mean,
        stderr: est[0].stderr,
        verdict: verdict_str(pass),
    });
    note(
        verbose,
        &format!("  estimate {} vs closed form {closed_form}", est[0].mean),
    );

    // Pathwise representation identity on the configured system.
    let system = cfg.build_system()?;
    let f = rep_vf_function(&system)?;
    note(
        verbose,
        &format!("pathwise representation identity on `{}`", system.name()),
    );
    let rep_paths = mc.paths.min(64);
    let kernel = HKernelGrid::new(mc.grid, mc.hurst);
    let x0 = cfg
        .start_points()
        .into_iter()
        .next()
        .unwrap_or_else(|| DVector::zeros(system.dim()));
    let mut worst_rel = 0.0f64;
    {
        let sampler = CholeskySampler::new(mc.grid, mc.hurst, system.dim())?;
        for p in 0..rep_paths as u64 {
            let path = sampler.sample(mc.seed, p)?;
            let driver = DriverPath::full(path);
            let flow = integrate_flow(&system, &driver, &x0, mc.scheme, mc.substeps)?;
            let bundle = MalliavinBundle::compute(
                &system, &flow, &driver, &kernel, t_idx, mc.scheme, false,
            )?;
            let xt = &flow.x[t_idx];
            let grad = f.gradient(xt)?;
            for i in 0..system.dim() {
                let recon = crate::malliavin::reconstruct_vif(&system, &flow, &bundle, &grad, i);
                let direct = grad.dot(&system.field(i, xt));
                let rel = (recon - direct).abs() / direct.abs().max(0.1);
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    let rep_pass = worst_rel <= 1e-2;
    all_pass &= rep_pass;
    rows.push(ReportRow {
        experiment: "verify_ibp".into(),
        kind: "pathwise_representation_max_rel_err".into(),
        system: system.name().into(),
        h: mc.hurst.value(),
        x: format_x(&x0),
        t,
        n: mc.grid.steps(),
        paths: rep_paths,
        estimator: "two_route".into(),
        value: worst_rel,
        stderr: 0.0,
        verdict: verdict_str(rep_pass),
    });

    // Skorokhod duality E[B^j_s delta h_i] = E<1_{[0,s]} e_j, h_i>, paired.
    note(verbose, "Skorokhod duality");
    let s_idx = (t_idx / 2).max(1);
    let dual_paths = mc.paths.min(2000);
    let mut dual_cfg = mc.clone();
    dual_cfg.paths = dual_paths;
    let (i_dir, j_dir) = (system.dim() - 1, 0usize);
    let (diffs, _aborted) =
        crate::estimators::collect_paths(system.dim(), &dual_cfg, |_idx, path, driver| {
            let flow = integrate_flow(&system, driver, &x0, mc.scheme, mc.substeps)?;
            let bundle = MalliavinBundle::compute(
                &system, &flow, driver, &kernel, t_idx, mc.scheme, true,
            )?;
            let lhs = path.value(j_dir, s_idx) * bundle.delta_h[i_dir];
            let rhs = bundle.indicator_pairing(s_idx, j_dir, i_dir);
            Ok(lhs - rhs)
        })?;
    let dual = EstimateWithCI::from_samples(&diffs, 0, dual_paths, mc.seed.master, mc.antithetic);
    let dual_pass = dual.mean.abs() <= 3.0 * dual.stderr;
    all_pass &= dual_pass;
    rows.push(ReportRow {
        experiment: "verify_ibp".into(),
        kind: "skorokhod_duality_gap".into(),
        system: system.name().into(),
        h: mc.hurst.value(),
        x: format_x(&x0),
        t,
        n: mc.grid.steps(),
        paths: dual_paths,
        estimator: "paired_mc".into(),
        value: dual.mean,
        stderr: dual.stderr,
        verdict: verdict_str(dual_pass),
    });

    write_report(&rows, cfg.mc.seed, cfg.echo(), base)?;
    Ok(all_pass)
}

fn rep_vf_function(system: &systems::VectorFieldSystem) -> Result<TestFunction> {
    Ok(if system.dim() >= 2 {
        TestFunction::sin1cos2()
    } else {
        TestFunction::sin_first()
    })
}

fn verdict_str(pass: bool) -> String {
    if pass { "pass" } else { "fail" }.into()
}

fn gradient_scan(cfg: &RunConfig, base: &Path, verbose: bool) -> Result<bool> {
    let system = cfg.build_system()?;
    let mc = cfg.build_mc(defaults::PATHS)?;
    let f = cfg.build_test_function()?;
    let x0 = cfg
        .start_points()
        .into_iter()
        .next()
        .unwrap_or_else(|| DVector::zeros(system.dim()));
    note(
        verbose,
        &format!(
            "rate scan (order {}) on `{}`, f = {}",
            cfg.sweep.order,
            system.name(),
            f.name
        ),
    );
    let (fit, rows) = rate_scan(
        &system,
        &x0,
        &cfg.sweep.t,
        &f,
        cfg.sweep.order,
        cfg.sweep.fd_step,
        &mc,
    )?;
    note(
        verbose,
        &format!("fitted slope {} (residual {})", fit.slope, fit.residual),
    );
    write_report(&rows, cfg.mc.seed, cfg.echo(), base)?;
    Ok(fit.identifiable)
}

fn bounds(cfg: &RunConfig, base: &Path, verbose: bool) -> Result<bool> {
    let system = cfg.build_system()?;
    let mc = cfg.build_mc(defaults::PATHS)?;
    let f = cfg.build_test_function()?;
    let xs = cfg.start_points();
    let mut rows = Vec::new();
    let mut all_pass = true;

    note(verbose, "alpha orthogonality (synthetic so(3) skew)");
    let gens = so3_generators();
    let mut orth_cfg = mc.clone();
    orth_cfg.paths = mc.paths.min(100);
    let (orth, orth_rows) =
        alpha_orthogonality_check(OrthogonalityMode::Synthetic(&gens), &orth_cfg)?;
    all_pass &= orth.exponential_excess <= 1e-10 && orth.heun_excess <= 1e-4;
    rows.extend(orth_rows);

    note(verbose, &format!("global gradient bound on `{}`", system.name()));
    let observational = cfg.sweep.observational
        || !system
            .check_hypothesis_skew(&xs)
            .map(|r| r.passes)
            .unwrap_or(false);
    let (global, global_rows) =
        global_bound_check(&system, &f, &xs, &cfg.sweep.t, &mc, observational)?;
    if !observational {
        all_pass &= global.all_hold;
    }
    rows.extend(global_rows);

    note(verbose, "inverse Poincare scan");
    let (_poincare, poincare_rows) =
        inverse_poincare_check(&system, &xs[0], &cfg.sweep.t, &f, &mc)?;
    rows.extend(poincare_rows);

    write_report(&rows, cfg.mc.seed, cfg.echo(), base)?;
    Ok(all_pass)
}

fn so3_generators() -> Vec<DMatrix<f64>> {
    let eps = |i: usize, j: usize, k: usize| -> f64 {
        match (i, j, k) {
            (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
            (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
            _ => 0.0,
        }
    };
    (0..3)
        .map(|k| DMatrix::from_fn(3, 3, |i, j| eps(i, k, j)))
        .collect()
}

fn moments(cfg: &RunConfig, base: &Path, verbose: bool) -> Result<bool> {
    let system = cfg.build_system()?;
    let mc = cfg.build_mc(defaults::PATHS)?;
    let x0 = cfg
        .start_points()
        .into_iter()
        .next()
        .unwrap_or_else(|| DVector::zeros(system.dim()));
    note(
        verbose,
        &format!("det M moments and sup diagnostics on `{}`", system.name()),
    );
    let mut rows = Vec::new();
    let (det_rep, det_rows) = det_m_moments(&system, &x0, &cfg.sweep.t, &[1, 2], &mc)?;
    rows.extend(det_rows);
    let (_ests, diag_rows) = moment_diagnostics(&system, &x0, &[2, 4, 8], &mc)?;
    rows.extend(diag_rows);
    write_report(&rows, cfg.mc.seed, cfg.echo(), base)?;
    let bounded = det_rep
        .trend_slopes
        .iter()
        .all(|(_p, slope)| slope.abs() <= 0.3);
    Ok(bounded)
}
