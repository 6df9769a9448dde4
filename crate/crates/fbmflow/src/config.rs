//! Experiment configuration: a flat, human-writable key/value format with one
//! section per module. Unknown keys are rejected with their exact names, all
//! offenders listed at once, and every default lives in this file (the CLI
//! `--help` and the README defaults table mirror it).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{MonteCarloConfig, TestFunction};
use crate::fbm::{HurstParam, SeedSpec, TimeGrid};
use crate::flow::Scheme;
use crate::systems::{self, VectorFieldSystem};

pub mod defaults {
    //! Single source of truth for configuration defaults.
    pub const HURST: f64 = 0.75;
    pub const GRID_N: usize = 128;
    pub const HORIZON: f64 = 0.5;
    pub const PATHS: usize = 10_000;
    pub const SEED: u64 = 42;
    pub const SUBSTEPS: usize = 4;
    pub const SYSTEM: &str = "identity";
    pub const DIMENSION: usize = 2;
    pub const F: &str = "sin_y1";
    pub const ORDER: u8 = 1;
    pub const FD_STEP: f64 = 1e-3;
    pub const T_SWEEP: [f64; 5] = [0.5, 0.25, 0.125, 0.0625, 0.03125];
    pub const X_AXIS_POINTS: [f64; 3] = [-0.8, 0.0, 0.8];
    pub const OUTPUT: &str = "reports/run";
    /// Environment variable overriding the default output directory.
    pub const OUT_ENV: &str = "FBMFLOW_OUTDIR";
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub kind: Option<String>,
    pub output: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            kind: None,
            output: defaults::OUTPUT.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub name: String,
    pub dimension: usize,
    pub params: Vec<f64>,
    /// Expression-grammar fields (`dimension^2` entries, `V_i` component `b`
    /// at index `i * dimension + b`); overrides `name` when nonempty.
    pub fields: Vec<String>,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            name: defaults::SYSTEM.into(),
            dimension: defaults::DIMENSION,
            params: Vec::new(),
            fields: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbmSection {
    pub hurst: f64,
    pub grid_n: usize,
    pub horizon: f64,
}

impl Default for FbmSection {
    fn default() -> Self {
        FbmSection {
            hurst: defaults::HURST,
            grid_n: defaults::GRID_N,
            horizon: defaults::HORIZON,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub paths: Option<usize>,
    pub seed: u64,
    pub scheme: Scheme,
    pub substeps: usize,
    pub level: Option<u32>,
    pub antithetic: bool,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            paths: None,
            seed: defaults::SEED,
            scheme: Scheme::Heun,
            substeps: defaults::SUBSTEPS,
            level: None,
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub f: String,
    pub order: u8,
    pub fd_step: f64,
    pub observational: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            t: defaults::T_SWEEP.to_vec(),
            x: Vec::new(),
            f: defaults::F.into(),
            order: defaults::ORDER,
            fd_step: defaults::FD_STEP,
            observational: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    pub system: SystemSection,
    pub fbm: FbmSection,
    pub mc: McSection,
    pub sweep: SweepSection,
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("experiment", &["kind", "output"]),
    ("system", &["name", "dimension", "params", "fields"]),
    ("fbm", &["hurst", "grid_n", "horizon"]),
    ("mc", &["paths", "seed", "scheme", "substeps", "level", "antithetic"]),
    (
        "sweep",
        &["t", "x", "f", "order", "fd_step", "observational"],
    ),
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;

        // collect every unknown section and key before typed deserialization
        let mut offenders = Vec::new();
        if let toml::Value::Table(table) = &value {
            for (section, content) in table {
                match SECTIONS.iter().find(|(name, _)| name == section) {
                    None => offenders.push(format!("unknown section `{section}`")),
                    Some((_, keys)) => {
                        if let toml::Value::Table(inner) = content {
                            for key in inner.keys() {
                                if !keys.contains(&key.as_str()) {
                                    offenders.push(format!("unknown key `{section}.{key}`"));
                                }
                            }
                        } else {
                            offenders.push(format!("section `{section}` must be a table"));
                        }
                    }
                }
            }
        } else {
            offenders.push("top level must be a table of sections".into());
        }
        if !offenders.is_empty() {
            return Err(Error::Config(offenders.join("\n")));
        }

        let cfg: RunConfig = RunConfig::deserialize(value)
            .map_err(|e| Error::Config(format!("invalid value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Collects every validation failure at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.fbm.hurst > 0.5 && self.fbm.hurst < 1.0) {
            problems.push(format!(
                "fbm.hurst = {} must lie in (1/2, 1)",
                self.fbm.hurst
            ));
        }
        if !(self.fbm.horizon > 0.0 && self.fbm.horizon <= 1.0) {
            problems.push(format!(
                "fbm.horizon = {} must lie in (0, 1]",
                self.fbm.horizon
            ));
        }
        if !self.fbm.grid_n.is_power_of_two() {
            problems.push(format!(
                "fbm.grid_n = {} must be a power of two",
                self.fbm.grid_n
            ));
        }
        if let Some(p) = self.mc.paths {
            if p < 1 {
                problems.push("mc.paths must be positive".into());
            }
        }
        if self.mc.substeps == 0 {
            problems.push("mc.substeps must be positive".into());
        }
        if self.sweep.t.is_empty() {
            problems.push("sweep.t must be nonempty".into());
        }
        if self.sweep.t.iter().any(|t| *t <= 0.0) {
            problems.push("sweep.t entries must be strictly positive".into());
        }
        let sorted = self.sweep.t.windows(2).all(|w| w[0] < w[1])
            || self.sweep.t.windows(2).all(|w| w[0] > w[1]);
        if !sorted {
            problems.push("sweep.t must be sorted".into());
        }
        if !(self.sweep.order == 1 || self.sweep.order == 2) {
            problems.push(format!("sweep.order = {} must be 1 or 2", self.sweep.order));
        }
        for x in &self.sweep.x {
            if x.len() != self.system.dimension {
                problems.push(format!(
                    "sweep.x entry {:?} does not match system.dimension = {}",
                    x, self.system.dimension
                ));
            }
        }
        if !self.system.fields.is_empty()
            && self.system.fields.len() != self.system.dimension * self.system.dimension
        {
            problems.push(format!(
                "system.fields needs dimension^2 = {} entries, got {}",
                self.system.dimension * self.system.dimension,
                self.system.fields.len()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// CLI override flags; `None` leaves the config value in place.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        paths: Option<usize>,
        grid: Option<usize>,
        hurst: Option<f64>,
        out: Option<String>,
    ) {
        if let Some(s) = seed {
            self.mc.seed = s;
        }
        if let Some(p) = paths {
            self.mc.paths = Some(p);
        }
        if let Some(g) = grid {
            self.fbm.grid_n = g;
        }
        if let Some(h) = hurst {
            self.fbm.hurst = h;
        }
        if let Some(o) = out {
            self.experiment.output = o;
        }
    }

    pub fn build_system(&self) -> Result<VectorFieldSystem> {
        if !self.system.fields.is_empty() {
            systems::from_expressions("custom", self.system.dimension, &self.system.fields)
        } else {
            systems::catalog(&self.system.name, self.system.dimension, &self.system.params)
        }
    }

    pub fn build_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.fbm.horizon, self.fbm.grid_n)
    }

    pub fn build_hurst(&self) -> Result<HurstParam> {
        HurstParam::new(self.fbm.hurst)
    }

    /// Monte Carlo config with `default_paths` used when neither the file nor
    /// an override set `mc.paths`.
    pub fn build_mc(&self, default_paths: usize) -> Result<MonteCarloConfig> {
        let mut mc = MonteCarloConfig::new(
            self.mc.paths.unwrap_or(default_paths).max(2),
            self.build_grid()?,
            self.build_hurst()?,
            SeedSpec::new(self.mc.seed),
        )?;
        mc.scheme = self.mc.scheme;
        mc.substeps = self.mc.substeps;
        mc.level = self.mc.level;
        mc.antithetic = self.mc.antithetic;
        Ok(mc)
    }

    pub fn build_test_function(&self) -> Result<TestFunction> {
        TestFunction::by_name(&self.sweep.f)
    }

    /// Start points: configured list, or the default 3-point axis-aligned set
    /// scaled to the system dimension.
    pub fn start_points(&self) -> Vec<nalgebra::DVector<f64>> {
        if self.sweep.x.is_empty() {
            defaults::X_AXIS_POINTS
                .iter()
                .map(|&v| {
                    let mut x = nalgebra::DVector::zeros(self.system.dimension);
                    x[0] = v;
                    x
                })
                .collect()
        } else {
            self.sweep
                .x
                .iter()
                .map(|v| nalgebra::DVector::from_row_slice(v))
                .collect()
        }
    }

    /// JSON echo embedded in reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert!(cfg.build_system().is_ok());
        assert!(cfg.build_mc(100).is_ok());
        assert_eq!(cfg.build_mc(100).unwrap().paths, 100);
    }

    #[test]
    fn parses_full_config() {
        let text = r#"
[experiment]
kind = "bounds"
output = "out/exp"

[system]
name = "shear"
dimension = 2

[fbm]
hurst = 0.6
grid_n = 64
horizon = 1.0

[mc]
paths = 500
seed = 7
scheme = "euler"
substeps = 2
antithetic = true

[sweep]
t = [0.5, 0.25]
x = [[0.0, 0.0], [1.0, 0.0]]
f = "sin_y1_cos_y2"
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.mc.paths, Some(500));
        assert_eq!(cfg.fbm.hurst, 0.6);
        assert_eq!(cfg.mc.scheme, Scheme::Euler);
        assert!(cfg.mc.antithetic);
        assert_eq!(cfg.start_points().len(), 2);
        assert_eq!(cfg.build_system().unwrap().name(), "shear");
    }

    #[test]
    fn unknown_keys_are_all_reported_by_name() {
        let text = r#"
[fbm]
hurstt = 0.7
grid_n = 64

[mc]
paaths = 10

[nosuch]
a = 1
"#;
        let err = RunConfig::from_toml_str(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fbm.hurstt"), "{msg}");
        assert!(msg.contains("mc.paaths"), "{msg}");
        assert!(msg.contains("`nosuch`"), "{msg}");
    }

    #[test]
    fn validation_lists_every_problem() {
        let text = r#"
[fbm]
hurst = 0.3
grid_n = 100

[sweep]
t = [0.5, -0.25]
order = 3
"#;
        let err = RunConfig::from_toml_str(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("hurst"), "{msg}");
        assert!(msg.contains("grid_n"), "{msg}");
        assert!(msg.contains("strictly positive"), "{msg}");
        assert!(msg.contains("order"), "{msg}");
    }

    #[test]
    fn expression_fields_build_a_system() {
        let text = r#"
[system]
dimension = 2
fields = ["1", "0", "sin(x1)", "1"]
"#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let sys = cfg.build_system().unwrap();
        assert_eq!(sys.dim(), 2);
        assert!(!sys.analytic_derivatives());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(Some(9), Some(33), Some(256), Some(0.9), Some("o".into()));
        assert_eq!(cfg.mc.seed, 9);
        assert_eq!(cfg.mc.paths, Some(33));
        assert_eq!(cfg.fbm.grid_n, 256);
        assert_eq!(cfg.fbm.hurst, 0.9);
        assert_eq!(cfg.experiment.output, "o");
        cfg.validate().unwrap();
    }
}
