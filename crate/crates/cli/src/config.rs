//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ugsep_core::quant::QuantFormat;
use ugsep_core::serving::{CandidateDist, WorkloadSpec};
use ugsep_core::synthetic::{stack_config, ModelConfig, RatioSpec, SyntheticConfig, TrainConfig, Variant};
use ugsep_core::ugsep::StackConfig;

use crate::CliError;

pub const SEED_ENV: &str = "UGSEP_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_hidden: usize,
    pub d_attn: usize,
    pub layers: usize,
    pub variant: Variant,
    pub quant: QuantFormat,
    /// Opens one masked entry in the first block; `verify` must then fail.
    pub fault_inject_mask: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_hidden: m.d_hidden,
            d_attn: m.d_attn,
            layers: m.layers,
            variant: Variant::Ugsep {
                c_u: 4,
                c_g: 4,
                compensation: false,
                residual: None,
            },
            quant: QuantFormat::Int8,
            fault_inject_mask: false,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_hidden: self.d_hidden,
            d_attn: self.d_attn,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            steps: t.steps,
            log_every: t.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub ratios: Vec<String>,
    pub compensation_ratios: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            ratios: vec!["1:2".into(), "1:1".into(), "3:1".into()],
            compensation_ratios: vec!["3:1".into(), "1:1".into()],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Benchmark model and workload. The model takes its token counts from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub d_model: usize,
    pub d_hidden: usize,
    pub layers: usize,
    pub c_u: usize,
    pub c_g: usize,
    pub compensation: bool,
    pub repetitions: usize,
    pub workload: WorkloadSpec,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_hidden: 512,
            layers: 4,
            c_u: 4,
            c_g: 4,
            compensation: false,
            repetitions: 5,
            workload: WorkloadSpec {
                seed: 11,
                users: 4,
                candidates: CandidateDist::Fixed { size: 32 },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub trials: usize,
    pub requests: usize,
    pub max_users: usize,
    pub max_candidates: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            trials: 100,
            requests: 50,
            max_users: 8,
            max_candidates: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelSection,
    pub data: SyntheticConfig,
    pub train: TrainSection,
    pub ablate: AblateSection,
    pub serve: ServeSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            seed: 1,
            model: ModelSection::default(),
            data: SyntheticConfig::default(),
            train: TrainSection::default(),
            ablate: AblateSection::default(),
            serve: ServeSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `UGSEP_SEED`, then an explicit `--seed`.
    pub fn with_seed_overrides(mut self, env: Option<&str>, flag: Option<u64>) -> Result<Self, CliError> {
        if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not a u64")))?;
        }
        if let Some(s) = flag {
            self.seed = s;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != 1 {
            return Err(CliError::Usage(format!("unsupported schema_version {}", self.schema_version)));
        }
        self.stack_config()?;
        self.bench_stack_config()?;
        self.ratio_specs(&self.ablate.ratios)?;
        self.ratio_specs(&self.ablate.compensation_ratios)?;
        self.serve.workload.validate()?;
        let v = &self.verify;
        if v.trials == 0 || v.requests == 0 || v.max_users == 0 || v.max_candidates == 0 {
            return Err(CliError::Usage("verify section values must be positive".into()));
        }
        Ok(())
    }

    pub fn stack_config(&self) -> Result<StackConfig, CliError> {
        Ok(stack_config(&self.model.variant, &self.model.model_config(), &self.data)?)
    }

    pub fn bench_stack_config(&self) -> Result<StackConfig, CliError> {
        let s = &self.serve;
        let mut cfg = StackConfig::ugsep(
            self.data.u_tokens,
            self.data.g_tokens,
            s.c_u,
            s.c_g,
            s.layers,
            s.d_model,
            s.d_hidden,
        )?
        .with_compensation(s.compensation);
        cfg.d_attn = s.d_model;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: self.seed,
            log_every: t.log_every,
            variant: self.model.variant.clone(),
        }
    }

    pub fn ratio_specs(&self, labels: &[String]) -> Result<Vec<RatioSpec>, CliError> {
        let heads = self.data.u_tokens + self.data.g_tokens;
        Ok(labels
            .iter()
            .map(|l| RatioSpec::parse(l, heads))
            .collect::<ugsep_core::Result<Vec<_>>>()?)
    }
}
