//! Experiment configuration: one TOML file, unknown keys rejected, every
//! default spelled out in the serialized effective config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constants::ParameterPoint;
use crate::dynamics::Integrator;
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::model::{StructureTarget, TrigSeries, WModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
    pub lattice: LatticeConfig,
    pub parameters: ParametersConfig,
    #[serde(default)]
    pub v: TrigSeries,
    pub w: WConfig,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub smoothing: SmoothingConfig,
    #[serde(default)]
    pub kam: KamConfig,
    #[serde(default)]
    pub evolution: EvolutionSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_output() -> String {
    "output".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub d: usize,
    pub n: usize,
    /// Spatial radius J.
    pub j_max: i64,
    /// Angle radius L.
    pub l_max: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametersConfig {
    pub omega: Vec<f64>,
    pub nu: Vec<f64>,
    pub eps: f64,
    /// Either γ directly or through γ = ε^𝔞.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_exponent: Option<f64>,
    pub tau: f64,
    /// Order gain 𝔢 of the perturbation W (order 1 − 𝔢).
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WConfig {
    pub structure: StructureTarget,
    pub model: WModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    /// Compare against a direct integration after the reduction.
    pub dynamics: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { dynamics: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub straighten: f64,
    pub straighten_max_iter: usize,
    pub max_eps_over_gamma: f64,
    /// Relative truncation of the commutator series.
    pub series: f64,
    /// Relative homological residual accepted at every smoothing and KAM step.
    pub homological: f64,
    pub kam_stop_rel: f64,
    pub neumann: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            straighten: 1e-10,
            straighten_max_iter: 200,
            max_eps_over_gamma: 0.5,
            series: 1e-16,
            homological: 1e-10,
            kam_stop_rel: 1e-13,
            neumann: 1e-16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub m_cap: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { m_cap: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KamConfig {
    pub max_steps: usize,
    pub sigma: f64,
}

impl Default for KamConfig {
    fn default() -> Self {
        Self { max_steps: 12, sigma: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDatum {
    /// U(0) e_j for the reduced mode j; the mode with the largest Re λ when absent.
    ReducedMode {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        j: Option<Vec<i64>>,
    },
    Modes { entries: Vec<ModeValue> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeValue {
    pub j: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionSection {
    pub t_final: f64,
    pub dt: f64,
    pub integrator: Integrator,
    pub sigma: f64,
    pub record_every: usize,
    /// Also integrate towards negative times.
    pub both_directions: bool,
    pub tol_rate: f64,
    pub initial: InitialDatum,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        Self {
            t_final: 100.0,
            dt: 0.01,
            integrator: Integrator::StrangSplitting,
            sigma: 1.0,
            record_every: 100,
            both_directions: true,
            tol_rate: crate::dynamics::TOL_RATE,
            initial: InitialDatum::ReducedMode { j: None },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenvalueModel {
    FirstOrder,
    FullPipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureConfig {
    pub samples: usize,
    pub gammas: Vec<f64>,
    pub model: EigenvalueModel,
    /// Fraction of samples also run through the full pipeline.
    pub spot_check_fraction: f64,
    /// Largest accepted fraction of spot checks where the two models disagree.
    pub max_model_gap: f64,
    /// Scan radius for l and j; max(32, 2/γ^{1/τ}) over the γ grid when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<i64>,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            gammas: vec![0.2, 0.1, 0.05, 0.025],
            model: EigenvalueModel::FirstOrder,
            spot_check_fraction: 0.05,
            max_model_gap: 0.05,
            radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Dotted config key → list of values; the sweep runs the Cartesian product.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parse, apply `key.path=value` overrides, then validate.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> Result<LatticeSpec> {
        let l = &self.lattice;
        LatticeSpec::new(l.d, l.n, l.j_max, l.l_max)
    }

    pub fn gamma(&self) -> Result<f64> {
        let p = &self.parameters;
        match (p.gamma, p.gamma_exponent) {
            (Some(g), None) => Ok(g),
            (None, Some(a)) if a > 0.0 && p.eps > 0.0 => Ok(p.eps.powf(a)),
            (None, Some(_)) => Err(Error::Config("γ = ε^a needs a > 0 and ε > 0".into())),
            (Some(_), Some(_)) => Err(Error::Config("give parameters.gamma or parameters.gamma_exponent, not both".into())),
            (None, None) => Err(Error::Config("parameters.gamma is missing".into())),
        }
    }

    pub fn point(&self) -> Result<ParameterPoint> {
        let p = &self.parameters;
        Ok(ParameterPoint {
            omega: p.omega.clone(),
            nu: p.nu.clone(),
            eps: p.eps,
            gamma: self.gamma()?,
            tau: p.tau,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        self.point()?.validate(spec.n, spec.d)?;
        let p = &self.parameters;
        if !(p.gain > 0.0 && p.gain <= 1.0) {
            return Err(Error::Config("parameters.gain must lie in (0, 1]".into()));
        }
        self.v.validate(spec.n, spec.d, spec.d)?;
        self.w.model.build(spec, p.gain)?;
        if let WModel::MultiplierTimesPotential(mp) = &self.w.model {
            let ok = match self.w.structure {
                StructureTarget::Reversible => mp.b.is_even() && mp.growth == 0.0,
                StructureTarget::SymmetricHyperbolicOnly => mp.growth == 0.0,
                StructureTarget::PlantedGrowth => mp.growth != 0.0,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "w.model does not realize the structure target {:?}",
                    self.w.structure
                )));
            }
        }
        if self.w.structure == StructureTarget::Reversible && !self.v.is_even() {
            return Err(Error::Config("a reversible run needs an even transport field V".into()));
        }
        let e = &self.evolution;
        if !(e.dt > 0.0) || e.record_every == 0 || !(e.tol_rate > 0.0) {
            return Err(Error::Config("evolution needs dt > 0, record_every ≥ 1 and tol_rate > 0".into()));
        }
        if let InitialDatum::ReducedMode { j: Some(j) } = &e.initial {
            if spec.spatial().index_of(j).is_none() {
                return Err(Error::Config(format!("evolution.initial.j = {j:?} is outside the lattice")));
            }
        }
        if let Some(m) = &self.measure {
            if m.samples < 100 {
                return Err(Error::Config("measure.samples must be at least 100".into()));
            }
            if m.gammas.is_empty() || m.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
                return Err(Error::Config("measure.gammas must be non-empty and inside (0, 1)".into()));
            }
            if !(0.0..=1.0).contains(&m.spot_check_fraction) {
                return Err(Error::Config("measure.spot_check_fraction must lie in [0, 1]".into()));
            }
            let tau_min = spec.n.max(spec.d) as f64;
            if p.tau <= tau_min {
                return Err(Error::Config(format!("measure needs tau > {tau_min}")));
            }
        }
        if let Some(s) = &self.sweep {
            if s.workers == 0 || s.grid.values().any(|v| v.is_empty()) {
                return Err(Error::Config("sweep needs workers ≥ 1 and non-empty value lists".into()));
            }
        }
        Ok(())
    }
}

impl SweepConfig {
    /// Cartesian product of the grid as override lists, last key varying fastest.
    pub fn points(&self) -> Vec<Vec<String>> {
        self.grid.iter().fold(vec![Vec::new()], |acc, (key, values)| {
            acc.iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(format!("{key}={v}"));
                        p
                    })
                })
                .collect()
        })
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = parse_value(raw.trim());
    set_path(table, key.trim(), value)
}

pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}` passes through a non-table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const DESK: &str = r#"
seed = 7

[lattice]
d = 1
n = 1
j_max = 16
l_max = 8

[parameters]
omega = [1.618033988749895]
nu = [1.4142135623730951]
eps = 1e-3
gamma = 0.05
tau = 3.0
gain = 0.75

[[v.terms]]
l = [1]
k = [1]
amplitude = 1.0

[w]
structure = "reversible"

[w.model]
kind = "multiplier_times_potential"
c = [1.0]

[[w.model.b.terms]]
l = [1]
k = [0]
amplitude = 1.0

[[w.model.b.terms]]
l = [0]
k = [1]
amplitude = 0.5
"#;

    #[test]
    fn desk_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(DESK).unwrap();
        assert_eq!(cfg.smoothing.m_cap, 4);
        assert_eq!(cfg.tolerances.straighten, 1e-10);
        assert_eq!(cfg.gamma().unwrap(), 0.05);
        assert!(cfg.measure.is_none());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(DESK).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        // defaults are spelled out
        assert!(text.contains("m_cap = 4"));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let bad = DESK.replace("gain = 0.75", "gain = 0.75\ngian = 1.0");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("gian"), "{err}");
    }

    #[test]
    fn overrides_apply_and_parse_literals() {
        let cfg = ExperimentConfig::with_overrides(
            DESK,
            &["parameters.eps=2e-3".into(), "evolution.integrator=rk4".into(), "smoothing.m_cap=2".into()],
        )
        .unwrap();
        assert_eq!(cfg.parameters.eps, 2e-3);
        assert_eq!(cfg.evolution.integrator, Integrator::Rk4);
        assert_eq!(cfg.smoothing.m_cap, 2);
        assert!(ExperimentConfig::with_overrides(DESK, &["noequals".into()]).is_err());
    }

    #[test]
    fn sweep_grid_expands_to_overrides() {
        let text = format!("{DESK}\n[sweep]\nworkers = 2\n[sweep.grid]\n\"parameters.eps\" = [1e-4, 1e-3]\n\"evolution.integrator\" = [\"rk4\", \"strang_splitting\"]\n");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let pts = cfg.sweep.as_ref().unwrap().points();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0], vec!["evolution.integrator=\"rk4\"".to_string(), "parameters.eps=0.0001".to_string()]);
        for p in &pts {
            ExperimentConfig::with_overrides(&text, p).unwrap();
        }
    }

    #[test]
    fn gamma_from_exponent() {
        let text = DESK.replace("gamma = 0.05", "gamma_exponent = 0.5");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!((cfg.gamma().unwrap() - 1e-3f64.sqrt()).abs() < 1e-15);
        let both = DESK.replace("gamma = 0.05", "gamma = 0.05\ngamma_exponent = 0.5");
        assert!(ExperimentConfig::from_toml_str(&both).is_err());
    }

    #[test]
    fn structure_target_is_enforced() {
        let odd = DESK.replace("amplitude = 0.5", "amplitude = 0.5\nparity = \"sin\"");
        assert!(ExperimentConfig::from_toml_str(&odd).is_err());
        let planted = DESK.replace("structure = \"reversible\"", "structure = \"planted_growth\"");
        assert!(ExperimentConfig::from_toml_str(&planted).is_err());
        let ok = planted.replace("c = [1.0]", "c = [1.0]\ngrowth = 1.0");
        assert!(ExperimentConfig::from_toml_str(&ok).is_ok());
    }
}
