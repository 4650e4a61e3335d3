use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alsuv::AttackConfig;
use crate::diagnostics::DiagnosticsConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_FARS;
use crate::rng::derive_seed;
use crate::worldgen::WorldParams;

pub const CONFIG_VERSION: u32 = 1;

const DOMAIN_WORLD: u64 = 1;
const DOMAIN_ATTACK: u64 = 2;
const DOMAIN_DIAGNOSTICS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsToggles {
    /// Curvature at the averaged and final iterate of each selected track.
    pub flatness: bool,
    /// Loss slices for the first `surface_identities` identities.
    pub surfaces: bool,
    pub surface_identities: usize,
    pub settings: DiagnosticsConfig,
}

impl Default for DiagnosticsToggles {
    fn default() -> Self {
        Self {
            flatness: true,
            surfaces: true,
            surface_identities: 1,
            settings: DiagnosticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub n: Vec<usize>,
    pub averaging: Vec<bool>,
    pub validation: Vec<bool>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            n: vec![1, 20, 50, 100],
            averaging: vec![false, true],
            validation: vec![false, true],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperparameter {
    N,
    T0,
    KTop,
}

impl std::fmt::Display for Hyperparameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::N => "n",
            Self::T0 => "t0",
            Self::KTop => "k_top",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    /// Mean cosine to the true template over unseen encoders.
    UnseenSimilarity,
    SeenSimilarity,
    /// Pass rate of type-II comparisons at the accuracy threshold, averaged
    /// over unseen encoders.
    UnseenSar,
    /// Cosine distance of the selection's validation feature to the truth.
    ValidationDistance,
}

impl std::fmt::Display for SweepMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::UnseenSimilarity => "unseen_similarity",
            Self::SeenSimilarity => "seen_similarity",
            Self::UnseenSar => "unseen_sar",
            Self::ValidationDistance => "validation_distance",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: Hyperparameter,
    pub values: Vec<usize>,
    pub metrics: Vec<SweepMetric>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parameter: Hyperparameter::KTop,
            values: vec![1, 2, 5, 10, 20],
            metrics: vec![SweepMetric::UnseenSimilarity],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldParams,
    pub attack: AttackConfig,
    pub fars: Vec<f64>,
    pub diagnostics: DiagnosticsToggles,
    pub ablation: AblationGrid,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            world: WorldParams::default(),
            attack: AttackConfig::default(),
            fars: DEFAULT_FARS.to_vec(),
            diagnostics: DiagnosticsToggles::default(),
            ablation: AblationGrid::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version {
                expected: CONFIG_VERSION,
                found: cfg.version,
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the world, the attack and the metric settings.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.attack.validate()?;
        if self.fars.is_empty() {
            return Err(invalid("fars must not be empty"));
        }
        if let Some(f) = self.fars.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(invalid(format!("far {f} must lie in (0, 1)")));
        }
        let d = &self.diagnostics.settings;
        if d.power_iters == 0 || d.probes == 0 {
            return Err(invalid("diagnostics need power_iters >= 1 and probes >= 1"));
        }
        if d.resolution < 2 || !(d.radius >= 0.0 && d.radius.is_finite()) {
            return Err(invalid("surface slices need resolution >= 2 and a finite radius >= 0"));
        }
        Ok(())
    }

    pub fn validate_ablation(&self) -> Result<()> {
        self.validate()?;
        let g = &self.ablation;
        if g.n.is_empty() || g.averaging.is_empty() || g.validation.is_empty() {
            return Err(invalid("ablation grid must be nonempty on every axis"));
        }
        if g.n.contains(&0) {
            return Err(invalid("ablation n values must be >= 1"));
        }
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<()> {
        self.validate()?;
        let s = &self.sweep;
        if s.values.is_empty() || s.metrics.is_empty() {
            return Err(Error::MissingSweep);
        }
        for &v in &s.values {
            let mut attack = self.attack.clone();
            match s.parameter {
                Hyperparameter::N => {
                    attack.n = v;
                    attack.k_top = attack.k_top.min(v);
                }
                Hyperparameter::T0 => attack.t0 = v,
                Hyperparameter::KTop => attack.k_top = v,
            }
            attack
                .validate()
                .map_err(|e| invalid(format!("sweep {} = {v}: {e}", s.parameter)))?;
        }
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        derive_seed(self.seed, DOMAIN_WORLD, 0)
    }

    /// Seed of the latent streams for one identity.
    pub fn attack_seed(&self, identity: usize) -> u64 {
        derive_seed(derive_seed(self.seed, DOMAIN_ATTACK, self.attack.seed), 0, identity as u64)
    }

    pub fn diagnostics_seed(&self, identity: usize) -> u64 {
        derive_seed(
            derive_seed(self.seed, DOMAIN_DIAGNOSTICS, self.diagnostics.settings.seed),
            0,
            identity as u64,
        )
    }

    pub fn attack_for(&self, identity: usize) -> AttackConfig {
        AttackConfig {
            seed: self.attack_seed(identity),
            ..self.attack.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.validate_ablation().unwrap();
        cfg.validate_sweep().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        // the echo of a sparse config resolves every default
        let sparse = ExperimentConfig::from_json(r#"{"seed": 9, "attack": {"n": 4, "k_top": 2}}"#).unwrap();
        let echoed = ExperimentConfig::from_json(&sparse.to_json().unwrap()).unwrap();
        assert_eq!(echoed, sparse);
        assert_eq!(echoed.attack.t0, 70);
        assert_eq!(echoed.world, WorldParams::default());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"sed": 1}"#),
            Err(Error::InvalidConfig(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"attack": {"kTop": 3}}"#).is_err());
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"version": 7}"#),
            Err(Error::Version { .. })
        ));
        let cfg = ExperimentConfig {
            fars: vec![0.0],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.attack.k_top = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.ablation.n = vec![];
        assert!(cfg.validate_ablation().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.values = vec![];
        assert!(matches!(cfg.validate_sweep(), Err(Error::MissingSweep)));
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.parameter = Hyperparameter::T0;
        cfg.sweep.values = vec![101];
        assert!(cfg.validate_sweep().is_err());
    }

    #[test]
    fn seeds_differ_per_identity() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.attack_seed(0), cfg.attack_seed(1));
        let mut other = cfg.clone();
        other.attack.seed = 1;
        assert_ne!(cfg.attack_seed(0), other.attack_seed(0));
        assert_ne!(cfg.world_seed(), cfg.attack_seed(0));
    }
}
