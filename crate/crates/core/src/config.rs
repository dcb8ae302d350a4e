//! Model and run configuration, built-in profiles, and JSON layering.
//!
//! A full configuration is `{"model": ModelConfig, "run": RunConfig}`.
//! It is assembled from a profile, then an optional JSON file merged on
//! top, then dotted-path overrides such as `run.seed=7`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pretrain::MaskingConfig;

/// Attention function used by one sub-layer of a cross-modality block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Queries, keys and values from the branch's own stream.
    #[serde(rename = "self")]
    SelfAtt,
    /// Own queries against the other stream's keys, own values.
    Cross1,
    /// Weights computed entirely in the other stream, own values.
    Cross2,
}

impl AttentionKind {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::SelfAtt => "self",
            AttentionKind::Cross1 => "cross1",
            AttentionKind::Cross2 => "cross2",
        }
    }
}

/// Named cross-block layouts, including the ablations that fill the slot of
/// a removed function with the remaining one.
pub mod layouts {
    use super::AttentionKind::{self, *};

    pub fn full() -> Vec<AttentionKind> {
        vec![Cross1, SelfAtt, Cross2, SelfAtt]
    }

    pub fn without_cross1() -> Vec<AttentionKind> {
        vec![Cross2, SelfAtt, Cross2, SelfAtt]
    }

    pub fn without_cross2() -> Vec<AttentionKind> {
        vec![Cross1, SelfAtt, Cross1, SelfAtt]
    }

    pub fn without_cross() -> Vec<AttentionKind> {
        vec![SelfAtt; 4]
    }

    pub fn by_name(name: &str) -> Option<Vec<AttentionKind>> {
        match name {
            "full" => Some(full()),
            "no_cross1" => Some(without_cross1()),
            "no_cross2" => Some(without_cross2()),
            "no_cross" => Some(without_cross()),
            _ => None,
        }
    }
}

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d_h / n_heads)`.
    HeadDim,
    /// `sqrt(n_heads)`.
    NumHeads,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub n_heads: usize,
    pub n_single_layers: usize,
    pub n_cross_blocks: usize,
    pub cross_layout: Vec<AttentionKind>,
    pub d_lang: usize,
    pub d_visn: usize,
    pub attention_scale: AttentionScale,
    pub dropout: f64,
    pub ff_mult: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Hidden width of the modality-adaptive attention network; `d_h` when unset.
    #[serde(default)]
    pub maa_hidden: Option<usize>,
    pub n_classes: usize,
    /// Size of an optional precomputed whole-page visual vector.
    #[serde(default)]
    pub d_global: Option<usize>,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            d_h: 64,
            n_heads: 4,
            n_single_layers: 4,
            n_cross_blocks: 2,
            cross_layout: layouts::full(),
            d_lang: 16,
            d_visn: 32,
            attention_scale: AttentionScale::HeadDim,
            dropout: 0.0,
            ff_mult: 4,
            ln_eps: 1e-12,
            init_std: 0.02,
            maa_hidden: None,
            n_classes: 4,
            d_global: None,
        }
    }

    pub fn base() -> Self {
        Self {
            d_h: 768,
            n_heads: 12,
            d_lang: 1024,
            d_visn: 2048,
            n_classes: 16,
            ..Self::tiny()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }

    pub fn maa_hidden(&self) -> usize {
        self.maa_hidden.unwrap_or(self.d_h)
    }

    pub fn attention_divisor(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::HeadDim => (self.head_dim() as f64).sqrt(),
            AttentionScale::NumHeads => (self.n_heads as f64).sqrt(),
            AttentionScale::Fixed(v) => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_h,
            self.n_heads,
            self.d_lang,
            self.d_visn,
            self.ff_mult,
            self.n_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_h = {} is not divisible by n_heads = {}",
                self.d_h, self.n_heads
            )));
        }
        if self.n_cross_blocks > 0 && self.cross_layout.is_empty() {
            return Err(Error::Config("cross_layout is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 || self.init_std <= 0.0 || self.attention_divisor() <= 0.0 {
            return Err(Error::Config(
                "ln_eps, init_std and attention scale must be positive".into(),
            ));
        }
        if self.maa_hidden == Some(0) || self.d_global == Some(0) {
            return Err(Error::Config(
                "maa_hidden and d_global must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Freeze the backbone; when unset, entity recognition freezes and
    /// classification does not.
    #[serde(default)]
    pub freeze: Option<bool>,
    /// Learning rate used instead of `lr` when the backbone is frozen.
    #[serde(default)]
    pub frozen_lr: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 5e-5,
            batch_size: 16,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            freeze: None,
            frozen_lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub group_threshold: usize,
    pub masking: MaskingConfig,
    /// Reservoir size per modality for random replacement.
    pub pool_size: usize,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub workers: usize,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 768,
            total_iters: 72_000,
            base_lr: 1e-4,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            max_len: crate::data::DEFAULT_MAX_LEN,
            group_threshold: crate::data::DEFAULT_GROUP_THRESHOLD,
            masking: MaskingConfig::default(),
            pool_size: 10_000,
            checkpoint_every: 0,
            precision: Precision::F64,
            workers: 1,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale run settings used with the `tiny` profile.
    pub fn tiny() -> Self {
        Self {
            batch_size: 8,
            total_iters: 2_000,
            base_lr: 1e-3,
            finetune: FinetuneConfig {
                epochs: 20,
                lr: 1e-3,
                frozen_lr: Some(1e-2),
                batch_size: 16,
                ..FinetuneConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes and max_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.finetune.warmup_ratio) {
            return Err(Error::Config("warmup ratios must lie in [0, 1]".into()));
        }
        if self.base_lr < 0.0 || self.finetune.lr < 0.0 || self.finetune.frozen_lr.is_some_and(|r| r < 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        self.masking.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub run: RunConfig,
}

impl Config {
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self {
                model: ModelConfig::tiny(),
                run: RunConfig::tiny(),
            }),
            "base" => Ok(Self {
                model: ModelConfig::base(),
                run: RunConfig::default(),
            }),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected tiny or base)"
            ))),
        }
    }

    /// Profile, then `file` merged on top, then `key.path=value` overrides.
    pub fn layered(profile: &str, file: Option<&Value>, overrides: &[(String, Value)]) -> Result<Self> {
        Self::profile(profile)?.layer(file, overrides)
    }

    /// `self`, then `file` merged on top, then the overrides.
    pub fn layer(&self, file: Option<&Value>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        if let Some(f) = file {
            merge(&mut v, f);
        }
        for (path, val) in overrides {
            set_path(&mut v, path, val.clone())?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.run.validate()?;
        Ok(cfg)
    }
}

/// Recursively overlays `src` onto `dst`; objects merge, everything else replaces.
pub fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                merge(d.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Sets `a.b.c` inside `root`, creating objects along the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one component")
}

/// Parses `key.path=value`; the value is JSON when it parses as JSON,
/// otherwise a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn profiles_validate() {
        for p in ["tiny", "base"] {
            let c = Config::profile(p).unwrap();
            c.model.validate().unwrap();
            c.run.validate().unwrap();
        }
        assert!(Config::profile("huge").is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let file = json!({"run": {"seed": 3, "batch_size": 4}});
        let cfg = Config::layered("tiny", Some(&file), &[parse_override("run.seed=9").unwrap()]).unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.run.batch_size, 4);
        assert_eq!(cfg.model.d_h, 64);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let err = Config::layered("tiny", None, &[parse_override("model.n_heads=5").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn attention_scale_modes() {
        let mut m = ModelConfig::tiny();
        assert_eq!(m.attention_divisor(), 4.0);
        m.attention_scale = AttentionScale::NumHeads;
        assert_eq!(m.attention_divisor(), 2.0);
        m.attention_scale = AttentionScale::Fixed(3.0);
        assert_eq!(m.attention_divisor(), 3.0);
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let ov = [parse_override("run.finetune.epoch=3").unwrap()];
        assert!(matches!(Config::layered("tiny", None, &ov), Err(Error::Config(_))));
        let ov = [parse_override("run.finetune.epochs=3").unwrap()];
        assert_eq!(Config::layered("tiny", None, &ov).unwrap().run.finetune.epochs, 3);
    }
}
