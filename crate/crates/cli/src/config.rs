//! File configuration for the `regcma` tool. Flags are applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use regcma::evaluation::{BenchmarkConfig, MethodSpec, DEFAULT_CLASSIC_POPULATION};
use regcma::lra::LraParams;
use regcma::registration::{DEFAULT_GENERATIONS, DEFAULT_SIGMA0};
use regcma::{CameraGeometry, OptimizerKind, RegistrationConfig, SimilarityConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub camera: CameraGeometry,
    pub similarity: SimilarityConfig,
    pub optimizer: OptimizerSection,
    pub registration: RegistrationSection,
    pub benchmark: BenchmarkSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            camera: CameraGeometry::downsampled(),
            similarity: SimilarityConfig::default(),
            optimizer: OptimizerSection::default(),
            registration: RegistrationSection::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub sigma0: f64,
    /// `null` picks 4 + floor(ln 6) = 5.
    pub population: Option<usize>,
    pub lra: LraParams,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: OptimizerKind::LraCma,
            sigma0: DEFAULT_SIGMA0,
            population: None,
            lra: LraParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    pub generations: usize,
    pub step_mm: f64,
    pub seed: u64,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        let r = RegistrationConfig::default();
        RegistrationSection {
            generations: DEFAULT_GENERATIONS,
            step_mm: r.step_mm,
            seed: r.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub cases: usize,
    pub seed: u64,
    pub classic_population: usize,
    /// Per-component `[rot_deg, trans_mm]` bounds on the initial offset.
    pub truncate_offset: Option<[f64; 2]>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            cases: 5,
            seed: 0,
            classic_population: DEFAULT_CLASSIC_POPULATION,
            truncate_offset: None,
        }
    }
}

impl CliConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            similarity: self.similarity,
            optimizer: self.optimizer.kind,
            sigma0: self.optimizer.sigma0,
            generations: self.registration.generations,
            population: self.optimizer.population,
            seed: self.registration.seed,
            step_mm: self.registration.step_mm,
            lra: self.optimizer.lra,
        }
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            cases: self.benchmark.cases,
            seed: self.benchmark.seed,
            methods: vec![
                MethodSpec::lra_cma(),
                MethodSpec::cma_es(self.benchmark.classic_population),
            ],
            truncate_offset: self.benchmark.truncate_offset,
            registration: self.registration(),
        }
    }
}
