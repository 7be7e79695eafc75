use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mfsim::kernels::{InteractionKernel, SourceKernel};
use mfsim::macroscheme::{level_for, SchemeConfig};
use mfsim::measures::{grid_from_density, GridMeasure};
use mfsim::micro::{quadrature_initial_state, Integrator, MassConvention, MicroConfig, ParticleState};
use serde::{Deserialize, Serialize};

/// Largest `dt * S_bar` used when the refinement level is chosen automatically.
pub const AUTO_STEP_BOUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "m1_paper")]
    M1Paper,
    #[serde(rename = "appendixB")]
    AppendixB,
    #[serde(rename = "custom")]
    Custom,
}

/// Declarative description of a run, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Interaction preset for `custom`, e.g. `sin2(0.3)`.
    pub interaction: Option<String>,
    /// Source preset for `custom`, e.g. `m1(50, 0.3)`.
    pub source: Option<String>,
    pub n_list: Vec<usize>,
    pub grid: usize,
    pub domain: [f64; 2],
    /// Dyadic level `k`; chosen from the source bound when absent.
    pub level: Option<u32>,
    pub horizon: f64,
    pub beta: f64,
    pub radius: f64,
    pub mass_convention: MassConvention,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to four uniform times in `(0, T]`.
    pub sample_times: Option<Vec<f64>>,
    pub micro_dt: f64,
    pub integrator: Integrator,
    /// Stop the micro run once every particle is slower than this.
    pub stationary_speed: Option<f64>,
    pub counting_bins: usize,
    pub cluster_gap: f64,
    pub transport_substeps: usize,
    /// Step sizes of the two-atom scheme comparison.
    pub comparison_dts: Vec<f64>,
    pub comparison_steps: usize,
    pub metric_pairs: usize,
    pub metric_radius: f64,
    pub metric_orders: Vec<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::M1Paper,
            interaction: None,
            source: None,
            n_list: vec![20, 50, 100],
            grid: 400,
            domain: [0.0, 1.0],
            level: None,
            horizon: 10.0,
            beta: 100.0,
            radius: 0.2,
            mass_convention: MassConvention::N,
            seed: 0,
            output_dir: PathBuf::from("out"),
            sample_times: None,
            micro_dt: 1e-2,
            integrator: Integrator::Rk4,
            stationary_speed: Some(1e-6),
            counting_bins: 41,
            cluster_gap: 1e-3,
            transport_substeps: 4,
            comparison_dts: vec![0.1, 0.01],
            comparison_steps: 2,
            metric_pairs: 100,
            metric_radius: 1.0,
            metric_orders: vec![1, 2, 3],
        }
    }
}

/// Initial density used by the `m1_paper` preset, restricted to `[0, 1]`.
pub fn competition_density(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    let c = 1.0 / (0.4 * PI).sqrt();
    3.5 * c * (-5.0 * (x - 0.25f64).powi(2) / 4.0).exp()
        + c * (-5.0 * (x - 0.90f64).powi(2) / 4.0).exp()
}

impl ExperimentConfig {
    pub fn appendix_b() -> Self {
        Self {
            preset: Preset::AppendixB,
            domain: [-2.0, 2.0],
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            bail!("n_list must hold positive particle counts");
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            bail!("n_list must be strictly increasing");
        }
        if self.grid == 0 {
            bail!("grid must have at least one cell");
        }
        if !(self.domain[0] < self.domain[1]) {
            bail!("domain must be a proper interval");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bail!("horizon must be positive");
        }
        if !(self.micro_dt > 0.0 && self.micro_dt <= self.horizon) {
            bail!("micro_dt must lie in (0, horizon]");
        }
        if !(self.radius > 0.0) {
            bail!("radius must be positive");
        }
        if self.counting_bins == 0 {
            bail!("counting_bins must be positive");
        }
        if let Some(ts) = &self.sample_times {
            if ts.is_empty() || ts.iter().any(|&t| !(t > 0.0 && t <= self.horizon)) {
                bail!("sample_times must be non-empty and lie in (0, horizon]");
            }
        }
        if self.comparison_dts.iter().any(|&d| !(d > 0.0)) {
            bail!("comparison_dts must be positive");
        }
        if self.metric_orders.iter().any(|&p| p == 0) {
            bail!("metric_orders must be at least 1");
        }
        if self.preset == Preset::Custom && (self.interaction.is_none() || self.source.is_none()) {
            bail!("custom preset needs `interaction` and `source`");
        }
        self.kernels()?;
        Ok(())
    }

    pub fn kernels(&self) -> Result<(InteractionKernel, SourceKernel)> {
        Ok(match self.preset {
            Preset::M1Paper => (
                InteractionKernel::sin2(self.radius)?,
                SourceKernel::m1(self.beta, self.radius)?,
            ),
            Preset::AppendixB => (InteractionKernel::SaturatedLinear, SourceKernel::Linear),
            Preset::Custom => (
                self.interaction.as_deref().unwrap_or_default().parse()?,
                self.source.as_deref().unwrap_or_default().parse()?,
            ),
        })
    }

    pub fn sample_times(&self) -> Vec<f64> {
        self.sample_times
            .clone()
            .unwrap_or_else(|| (1..=4).map(|i| self.horizon * i as f64 / 4.0).collect())
    }

    pub fn micro_config(&self) -> Result<MicroConfig> {
        let (kernel, source) = self.kernels()?;
        Ok(MicroConfig {
            integrator: self.integrator,
            stationary_speed: self.stationary_speed,
            ..MicroConfig::new(kernel, source, self.micro_dt, self.horizon)
        })
    }

    /// Bound on `|S|` over the macroscopic domain.
    pub fn source_bound(&self) -> Result<f64> {
        Ok(self.kernels()?.1.bound_on_interval(self.domain[0], self.domain[1]))
    }

    pub fn level(&self) -> Result<u32> {
        Ok(match self.level {
            Some(k) => k,
            None => level_for(self.horizon, self.source_bound()?, AUTO_STEP_BOUND),
        })
    }

    pub fn scheme_config(&self) -> Result<SchemeConfig> {
        let (kernel, source) = self.kernels()?;
        Ok(SchemeConfig {
            transport_substeps: self.transport_substeps,
            ..SchemeConfig::new(kernel, source, self.horizon, self.level()?)
        })
    }

    pub fn initial_grid(&self) -> Result<GridMeasure> {
        Ok(grid_from_density(
            competition_density,
            1.0,
            self.domain[0],
            self.domain[1],
            self.grid,
        )?)
    }

    pub fn initial_state(&self, n: usize) -> Result<ParticleState> {
        Ok(quadrature_initial_state(
            competition_density,
            n,
            self.mass_convention.total_mass(n),
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_pick_level() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let k = cfg.level().unwrap();
        let dt = cfg.horizon / 2f64.powi(k as i32);
        assert!(dt * cfg.source_bound().unwrap() <= AUTO_STEP_BOUND);
        assert_eq!(cfg.sample_times(), vec![2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig {
            n_list: vec![10, 20],
            level: Some(7),
            ..ExperimentConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: ExperimentConfig =
            toml::from_str("preset = \"appendixB\"\nmass_convention = \"unit\"\n").unwrap();
        assert_eq!(cfg.preset, Preset::AppendixB);
        assert_eq!(cfg.mass_convention, MassConvention::Unit);
        assert_eq!(cfg.grid, 400);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            ExperimentConfig { n_list: vec![50, 20], ..Default::default() },
            ExperimentConfig { grid: 0, ..Default::default() },
            ExperimentConfig { sample_times: Some(vec![20.0]), ..Default::default() },
            ExperimentConfig { preset: Preset::Custom, ..Default::default() },
            ExperimentConfig {
                preset: Preset::Custom,
                interaction: Some("sin2(-1)".into()),
                source: Some("m1(1, 1)".into()),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(toml::from_str::<ExperimentConfig>("unknown_key = 1").is_err());
    }

    #[test]
    fn competition_density_is_heavier_on_the_left() {
        assert!(competition_density(0.25) > competition_density(0.90));
        assert_eq!(competition_density(1.5), 0.0);
    }
}
