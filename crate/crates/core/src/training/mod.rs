//! Next-token-prediction training of the motion decoder and road encoder.

mod optim;
mod trainer;

pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use trainer::{evaluate_loss, scene_loss, train, CurvePoint, LossBreakdown, TrainReport, Trainer, CHECKPOINT_FILE, CURVE_FILE};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::dataset::{TokenizeOptions, DEFAULT_ROAD_HOPS};
use crate::model::{ModelConfig, ModelError};
use crate::tokens::NoiseConfig;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config field {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("no valid targets to score")]
    NoTargets,
    #[error("non-finite loss at step {step}: motion {motion}, road {road}")]
    NonFinite { step: usize, motion: f64, road: f64 },
    #[error("empty training set")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(Box<crate::Error>),
}

impl From<crate::Error> for TrainError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Model(m) => TrainError::Model(m),
            other => TrainError::Data(Box::new(other)),
        }
    }
}

impl From<crate::autodiff::AdError> for TrainError {
    fn from(e: crate::autodiff::AdError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFlags {
    /// Embed road segments through the road vocabulary (otherwise a linear
    /// projection of raw segment descriptors).
    #[serde(alias = "rvt")]
    pub road_vocab_tokens: bool,
    /// Replace matched motion tokens by random near neighbors at data time.
    #[serde(alias = "nat")]
    pub motion_noise: bool,
    /// Replace matched road tokens by random near neighbors at data time.
    #[serde(alias = "nrvt")]
    pub road_noise: bool,
    /// Train the road encoder with next-road-token prediction.
    #[serde(alias = "rvntp")]
    pub road_prediction: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        TrainFlags { road_vocab_tokens: true, motion_noise: true, road_noise: true, road_prediction: true }
    }
}

impl TrainFlags {
    /// Flags of the four ablation rows, from the continuous-map baseline to
    /// the full method.
    pub fn ablation(row: usize) -> Option<Self> {
        let f = |rvt, nat, nrvt, rvntp| TrainFlags { road_vocab_tokens: rvt, motion_noise: nat, road_noise: nrvt, road_prediction: rvntp };
        match row {
            1 => Some(f(false, false, false, false)),
            2 => Some(f(true, false, false, false)),
            3 => Some(f(true, true, false, false)),
            4 => Some(f(true, true, true, false)),
            5 => Some(f(true, true, true, true)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.road_noise && !self.road_vocab_tokens {
            return Err(TrainError::Config { field: "flags.road_noise".into(), reason: "requires flags.road_vocab_tokens".into() });
        }
        if self.road_prediction && !self.road_vocab_tokens {
            return Err(TrainError::Config { field: "flags.road_prediction".into(), reason: "requires flags.road_vocab_tokens".into() });
        }
        Ok(())
    }

    pub fn tokenize_options(&self, seed: u64) -> TokenizeOptions {
        TokenizeOptions {
            motion_noise: if self.motion_noise { NoiseConfig::motion_default() } else { NoiseConfig::OFF },
            road_noise: if self.road_noise { NoiseConfig::road_default() } else { NoiseConfig::OFF },
            seed,
            road_hops: DEFAULT_ROAD_HOPS,
        }
    }
}

/// Model given by preset name or spelled out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(Box<ModelConfig>),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig, TrainError> {
        match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name)
                .ok_or_else(|| TrainError::Config { field: "model".into(), reason: format!("unknown preset '{name}'") }),
            ModelSpec::Custom(c) => Ok((**c).clone()),
        }
    }
}

/// Training hyperparameters; the JSON config file mirrors these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema: u32,
    pub model: ModelSpec,
    pub lr_start: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub flags: TrainFlags,
    pub road_loss_weight: f64,
    /// Fraction of scenarios held out for validation.
    pub val_fraction: f64,
    /// Vocabulary files keyed by class (`vehicle`, `pedestrian`, `cyclist`,
    /// `road`), relative to the data directory unless absolute.
    pub vocabs: BTreeMap<String, String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema: crate::io::SCHEMA_VERSION,
            model: ModelSpec::Preset("smart-1m".into()),
            lr_start: 2e-4,
            weight_decay: 0.1,
            dropout: 0.1,
            batch_size: 4,
            max_steps: 20_000,
            eval_every: 1_000,
            seed: 0,
            flags: TrainFlags::default(),
            road_loss_weight: 1.0,
            val_fraction: 0.1,
            vocabs: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, reason: &str| Err(TrainError::Config { field: field.into(), reason: reason.into() });
        if self.schema != crate::io::SCHEMA_VERSION {
            return bad("schema", "unsupported schema version");
        }
        if !(self.lr_start.is_finite() && self.lr_start >= 0.0) {
            return bad("lr_start", "must be finite and non-negative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if !(self.road_loss_weight.is_finite() && self.road_loss_weight >= 0.0) {
            return bad("road_loss_weight", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 1)");
        }
        self.flags.validate()?;
        let model = self.model.resolve()?;
        model.validate().map_err(|e| match e {
            ModelError::Config { field, reason } => TrainError::Config { field: format!("model.{field}"), reason },
            other => TrainError::Model(other),
        })?;
        Ok(())
    }

    /// Model architecture with the road pathway set by the flags.
    pub fn model_config(&self) -> Result<ModelConfig, TrainError> {
        let mut m = self.model.resolve()?;
        m.road_vocab_tokens = self.flags.road_vocab_tokens;
        Ok(m)
    }
}

/// Mean cross-entropy in nats of `logits` rows against `targets`, each row
/// scored over its column range `(start, len)`; rows with `valid == false`
/// are ignored.
pub fn mean_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    ranges: &[(usize, usize)],
    valid: &[bool],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in 0..logits.rows {
        if !valid[r] {
            continue;
        }
        let (start, len) = ranges[r];
        let row: Vec<f64> = logits.row(r)[start..start + len].iter().map(|v| v.to_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::NoTargets);
    }
    Ok(total / n as f64)
}

/// Motion next-token loss: mean over valid `(agent, step)` pairs.
pub fn motion_ntp_loss<S: Scalar>(logits: &Tensor<S>, targets: &[usize], ranges: &[(usize, usize)], valid: &[bool]) -> Result<f64, TrainError> {
    mean_cross_entropy(logits, targets, ranges, valid)
}

/// Road next-token loss: mean over all sequence transitions; zero (with a
/// warning) when there are none.
pub fn road_ntp_loss<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        log::warn!("no road sequences with two or more tokens; road loss is zero");
        return 0.0;
    }
    let ranges = vec![(0, logits.cols); targets.len()];
    mean_cross_entropy(logits, targets, &ranges, &vec![true; targets.len()]).unwrap_or(0.0)
}
