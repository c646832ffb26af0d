//! Flat run configuration: every tunable is one top-level key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dinterp::datasets::{DatasetSpec, MarkovSpec, ShapesSpec, TableEntry, DEFAULT_SUPPORT_CAP};
use dinterp::eval::SweepGrid;
use dinterp::loss::{TrainConfig, WeightMode};
use dinterp::predictor::{CfgMode, NetConfig, Variant};
use dinterp::sampler::{ConfidenceMode, GumbelMode, SamplerConfig, SamplerKind};
use dinterp::schedule::{Schedule, DEFAULT_EPSILON};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // dataset generation
    pub dataset_kind: String,
    pub length: usize,
    pub data_size: u32,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub support_cap: usize,
    pub allow_truncation: bool,
    pub entries: Vec<TableEntry>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub rect_min: usize,
    pub rect_max: usize,
    pub colors: u32,
    pub classes: u32,

    // inputs
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub samples: Option<PathBuf>,

    // model
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,

    // training
    pub schedule: Schedule,
    pub weight_mode: WeightMode,
    pub epsilon: f64,
    pub cond_dropout_p: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub masking_ce: bool,
    pub grad_clip_norm: f64,
    pub smoothing_s: f64,
    pub coupling_ratio: f64,

    // sampling
    pub kind: SamplerKind,
    pub nfe: usize,
    /// Sampling schedule; the training schedule when unset.
    pub sample_schedule: Option<Schedule>,
    pub temperature: f64,
    pub top_p: f64,
    pub cfg_omega: f64,
    pub cfg_mode: CfgMode,
    pub gumbel_mode: GumbelMode,
    pub gumbel_temp: f64,
    pub confidence: ConfidenceMode,
    pub argmax_finalize: bool,
    pub chains: usize,
    pub dump_chains: usize,
    pub class: Option<u32>,
    /// Segment clamped during conditional sampling of a joint dataset.
    pub condition_on: Option<String>,
    pub observed: Vec<u32>,

    // sweep
    pub sweep_nfe: Vec<usize>,
    pub sweep_temperature: Vec<f64>,
    pub sweep_cfg_omega: Vec<f64>,
    pub sweep_gumbel: Vec<GumbelMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sample = SamplerConfig::default();
        let net = NetConfig::default();
        let grid = SweepGrid::default();
        Self {
            seed: 0,
            dataset_kind: "markov".into(),
            length: 4,
            data_size: 3,
            initial: Vec::new(),
            transition: Vec::new(),
            support_cap: DEFAULT_SUPPORT_CAP,
            allow_truncation: false,
            entries: Vec::new(),
            num_classes: 0,
            height: 4,
            width: 4,
            rect_min: 1,
            rect_max: 4,
            colors: 2,
            classes: 3,
            dataset: None,
            checkpoint: None,
            oracle: None,
            samples: None,
            variant: net.variant,
            embed_dim: net.embed_dim,
            hidden_dim: net.hidden_dim,
            schedule: Schedule::linear(),
            weight_mode: train.weight_mode,
            epsilon: DEFAULT_EPSILON,
            cond_dropout_p: train.cond_dropout_p,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            batch_size: train.batch_size,
            steps: train.steps,
            masking_ce: train.masking_ce,
            grad_clip_norm: train.grad_clip_norm,
            smoothing_s: train.smoothing_s,
            coupling_ratio: train.coupling_ratio,
            kind: sample.kind,
            nfe: sample.nfe,
            sample_schedule: None,
            temperature: sample.temperature,
            top_p: sample.top_p,
            cfg_omega: sample.cfg_omega,
            cfg_mode: sample.cfg_mode,
            gumbel_mode: sample.gumbel_mode,
            gumbel_temp: sample.gumbel_temp,
            confidence: sample.confidence,
            argmax_finalize: sample.argmax_finalize,
            chains: 1000,
            dump_chains: 8,
            class: None,
            condition_on: None,
            observed: Vec::new(),
            sweep_nfe: grid.nfe,
            sweep_temperature: grid.temperature,
            sweep_cfg_omega: grid.cfg_omega,
            sweep_gumbel: grid.gumbel,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text)
            .map_err(|e| anyhow::anyhow!("invalid config: {}", e.to_string().trim_end()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        if self.seed > i64::MAX as u64 {
            bail!("invalid config `seed`: must be at most {}", i64::MAX);
        }
        Ok(toml::to_string(self)?)
    }

    pub fn dataset_spec(&self) -> anyhow::Result<DatasetSpec> {
        Ok(match self.dataset_kind.as_str() {
            "table" => DatasetSpec::Table {
                length: self.length,
                data_size: self.data_size,
                entries: self.entries.clone(),
                num_classes: self.num_classes,
            },
            "markov" => {
                let uniform = MarkovSpec::uniform(self.length, self.data_size);
                DatasetSpec::Markov(MarkovSpec {
                    initial: if self.initial.is_empty() { uniform.initial } else { self.initial.clone() },
                    transition: if self.transition.is_empty() {
                        uniform.transition
                    } else {
                        self.transition.clone()
                    },
                    support_cap: self.support_cap,
                    allow_truncation: self.allow_truncation,
                    ..uniform
                })
            }
            "shapes_pair" => DatasetSpec::ShapesPair(ShapesSpec {
                height: self.height,
                width: self.width,
                rect_min: self.rect_min,
                rect_max: self.rect_max,
                colors: self.colors,
                classes: self.classes,
                support_cap: self.support_cap,
            }),
            other => bail!("invalid config `dataset_kind`: unknown kind `{other}` (table, markov or shapes_pair)"),
        })
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            variant: self.variant,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let config = TrainConfig {
            weight_mode: self.weight_mode,
            epsilon: self.epsilon,
            cond_dropout_p: self.cond_dropout_p,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            steps: self.steps,
            masking_ce: self.masking_ce,
            grad_clip_norm: self.grad_clip_norm,
            smoothing_s: self.smoothing_s,
            coupling_ratio: self.coupling_ratio,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn sampler_config(&self) -> anyhow::Result<SamplerConfig> {
        let config = SamplerConfig {
            kind: self.kind,
            nfe: self.nfe,
            schedule: self
                .sample_schedule
                .clone()
                .unwrap_or_else(|| self.schedule.clone()),
            epsilon: self.epsilon,
            temperature: self.temperature,
            top_p: self.top_p,
            cfg_omega: self.cfg_omega,
            cfg_mode: self.cfg_mode,
            gumbel_mode: self.gumbel_mode,
            gumbel_temp: self.gumbel_temp,
            confidence: self.confidence,
            argmax_finalize: self.argmax_finalize,
            seed: self.seed,
        };
        config.validate()?;
        if self.chains == 0 {
            bail!("invalid config `chains`: must be positive");
        }
        Ok(config)
    }

    pub fn sweep_grid(&self) -> anyhow::Result<SweepGrid> {
        let grid = SweepGrid {
            nfe: self.sweep_nfe.clone(),
            temperature: self.sweep_temperature.clone(),
            cfg_omega: self.sweep_cfg_omega.clone(),
            gumbel: self.sweep_gumbel.clone(),
        };
        for (field, empty) in [
            ("sweep_nfe", grid.nfe.is_empty()),
            ("sweep_temperature", grid.temperature.is_empty()),
            ("sweep_cfg_omega", grid.cfg_omega.is_empty()),
            ("sweep_gumbel", grid.gumbel.is_empty()),
        ] {
            if empty {
                bail!("invalid config `{field}`: needs at least one value");
            }
        }
        Ok(grid)
    }
}
