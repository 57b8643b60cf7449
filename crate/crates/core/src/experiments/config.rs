use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::asnn::{AsnnConfig, TrainOptions};
use crate::attnset::ScrambleStrategy;
use crate::coloring::RewardParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::Config(format!(
                "unknown scale `{s}` (expected desk or paper)"
            ))),
        }
    }
}

/// Image datasets generated per task and repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_items: usize,
    /// Test images per task; the sender's attention is recorded on these.
    pub test_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp1Config {
    pub repetitions: usize,
    /// Sender/receiver task pairs per repetition, taken from (A→B, B→C, C→A).
    pub assignments: usize,
    pub scramble: ScrambleStrategy,
    /// Attention records are multiplied by this before reaching the
    /// receiver; 0 selects the sender's token count, which maps a uniform
    /// attention row to ones.
    pub input_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp2Config {
    pub repetitions: usize,
    pub assignments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp3Config {
    pub repetitions: usize,
    pub epochs: usize,
    pub turns_per_epoch: usize,
    pub canvas_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub learning_rate: f64,
    /// Turns between optimiser steps.
    pub update_every: usize,
    pub baseline_decay: f64,
    /// Initial bias of every pixel logit.
    pub init_logit_bias: f64,
    /// Distinct canvases drawn per repetition.
    pub canvas_pool: usize,
    pub reward: RewardParams,
}

/// Every tunable of the experiments, grouped as `section.field` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub scale: Scale,
    /// Architecture of image classifiers; `has_schema` and the loss weights
    /// are set per model.
    pub model: AsnnConfig,
    pub data: DataConfig,
    pub pretrain: TrainOptions,
    /// Head-only training on frozen features.
    pub transfer: TrainOptions,
    pub exp1: Exp1Config,
    pub exp2: Exp2Config,
    pub exp3: Exp3Config,
}

impl Settings {
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            model: AsnnConfig::desk(false),
            data: DataConfig {
                train_items: 256,
                test_items: 400,
            },
            pretrain: TrainOptions {
                epochs: 6,
                batch_size: 16,
                learning_rate: 1e-3,
            },
            transfer: TrainOptions {
                epochs: 200,
                batch_size: 16,
                learning_rate: 1e-3,
            },
            exp1: Exp1Config {
                repetitions: 5,
                assignments: 3,
                scramble: ScrambleStrategy::PerHeadTokenPermute,
                input_scale: 1.0,
            },
            exp2: Exp2Config {
                repetitions: 5,
                assignments: 3,
            },
            exp3: Exp3Config {
                repetitions: 5,
                epochs: 30,
                turns_per_epoch: 256,
                canvas_size: 16,
                patch_size: 4,
                embed_dim: 32,
                n_heads: 4,
                head_dim: 8,
                learning_rate: 1e-3,
                update_every: 16,
                baseline_decay: 0.99,
                init_logit_bias: -2.0,
                canvas_pool: 32,
                reward: RewardParams::default(),
            },
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            scale: Scale::Paper,
            model: AsnnConfig::paper(false),
            data: DataConfig {
                train_items: 1912,
                test_items: 730,
            },
            pretrain: TrainOptions {
                epochs: 20,
                ..desk.pretrain
            },
            transfer: TrainOptions {
                epochs: 800,
                ..desk.transfer
            },
            exp1: Exp1Config {
                repetitions: 9,
                ..desk.exp1
            },
            exp2: Exp2Config {
                repetitions: 9,
                ..desk.exp2
            },
            exp3: Exp3Config {
                repetitions: 15,
                epochs: 50,
                turns_per_epoch: 6000,
                ..desk.exp3
            },
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    /// Applies `section.field = value` (nested sections allowed, e.g.
    /// `exp3.reward.alpha_overlap`). The value is parsed according to the
    /// current field's type; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown setting `{key}`")))?;
        }
        *slot = parse_like(slot, value)
            .ok_or_else(|| Error::Config(format!("cannot parse `{value}` for setting `{key}`")))?;
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("invalid value for `{key}`: {e}")))?;
        self.validate()
    }

    /// Flattened `key = value` view, in declaration order.
    pub fn entries(&self) -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, child, out);
                    }
                }
                Value::String(s) => out.push((prefix.to_string(), s.clone())),
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut out = Vec::new();
        walk(
            "",
            &serde_json::to_value(self).expect("settings serialise"),
            &mut out,
        );
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("data.train_items", self.data.train_items),
            ("data.test_items", self.data.test_items),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("transfer.batch_size", self.transfer.batch_size),
            ("exp1.repetitions", self.exp1.repetitions),
            ("exp2.repetitions", self.exp2.repetitions),
            ("exp3.repetitions", self.exp3.repetitions),
            ("exp3.epochs", self.exp3.epochs),
            ("exp3.turns_per_epoch", self.exp3.turns_per_epoch),
            ("exp3.update_every", self.exp3.update_every),
            ("exp3.canvas_pool", self.exp3.canvas_pool),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.data.train_items < 2 || self.data.test_items < 4 {
            return Err(Error::Config(
                "need at least 2 train and 4 test items per task".into(),
            ));
        }
        for (k, v) in [
            ("exp1.assignments", self.exp1.assignments),
            ("exp2.assignments", self.exp2.assignments),
        ] {
            if !(1..=3).contains(&v) {
                return Err(Error::Config(format!(
                    "`{k}` must be between 1 and 3, got {v}"
                )));
            }
        }
        if !(self.exp1.input_scale >= 0.0) {
            return Err(Error::Config(
                "`exp1.input_scale` must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.exp3.baseline_decay) {
            return Err(Error::Config(
                "`exp3.baseline_decay` must lie in [0, 1)".into(),
            ));
        }
        self.exp3.reward.validate()?;
        self.exp3_policy(false).validate()
    }

    /// Pretrained image classifier architecture for one variant.
    pub fn classifier(&self, has_schema: bool) -> AsnnConfig {
        self.model.clone().with_schema(has_schema)
    }

    /// Coloring policy backbone: canvas channels plus the two paint masks.
    pub fn exp3_policy(&self, has_schema: bool) -> AsnnConfig {
        let e = &self.exp3;
        AsnnConfig {
            image_size: e.canvas_size,
            channels: 5,
            patch_size: e.patch_size,
            embed_dim: e.embed_dim,
            n_heads: e.n_heads,
            head_dim: e.head_dim,
            ..self.model.clone()
        }
        .with_schema(has_schema)
    }
}

fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().ok().map(Value::from),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::from),
        Value::String(_) => Some(Value::String(raw.to_string())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Settings::desk().validate().unwrap();
        Settings::paper().validate().unwrap();
        assert_eq!(Settings::paper().exp3.turns_per_epoch, 6000);
        assert_eq!(Settings::paper().exp3.epochs, 50);
    }

    #[test]
    fn set_parses_by_type() {
        let mut s = Settings::desk();
        s.set("exp3.reward.alpha_overlap", "2.5").unwrap();
        s.set("exp1.repetitions", "7").unwrap();
        s.set("model.gumbel_hard", "false").unwrap();
        s.set("exp1.scramble", "head_axis_permute").unwrap();
        s.set("transfer.learning_rate", "1").unwrap();
        assert_eq!(s.exp3.reward.alpha_overlap, 2.5);
        assert_eq!(s.exp1.repetitions, 7);
        assert!(!s.model.gumbel_hard);
        assert_eq!(s.exp1.scramble, ScrambleStrategy::HeadAxisPermute);
        assert_eq!(s.transfer.learning_rate, 1.0);
    }

    #[test]
    fn set_rejects_bad_input() {
        let mut s = Settings::desk();
        assert!(matches!(s.set("exp1.nonsense", "1"), Err(Error::Config(_))));
        assert!(matches!(s.set("exp1", "1"), Err(Error::Config(_))));
        assert!(matches!(
            s.set("exp1.repetitions", "-1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            s.set("exp1.scramble", "rows"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            s.set("exp1.repetitions", "0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn entries_round_trip() {
        let desk = Settings::desk();
        let mut s = Settings::paper();
        for (k, v) in desk.entries() {
            s.set(&k, &v).unwrap();
        }
        assert_eq!(s, desk);
    }
}
