use std::path::{Path, PathBuf};

use adkit_core::backbone::BackboneSpec;
use adkit_core::data::Layout;
use adkit_core::fewshot::ImageScoreMap;
use adkit_core::metrics::DEFAULT_FPR_LIMIT;
use adkit_core::zeroshot::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Zero,
    Few,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// `clip` for pretrained weights, `synthetic` for the seeded stand-in.
    pub name: String,
    /// Directory with `config.json`, `model.safetensors`, `tokenizer.json`.
    pub weights: Option<PathBuf>,
    /// Seed of the synthetic image and text encoders.
    pub seed: u64,
    /// Overrides the default geometry for `name`.
    pub spec: Option<BackboneSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: "clip".into(),
            weights: None,
            seed: 0,
            spec: None,
        }
    }
}

impl BackboneConfig {
    pub fn resolved_spec(&self) -> BackboneSpec {
        match (&self.spec, self.name.as_str()) {
            (Some(spec), _) => spec.clone(),
            (None, "synthetic") => BackboneSpec::synthetic(),
            (None, _) => BackboneSpec::vit_large_patch14(),
        }
    }
}

/// Prompt asset files; unset entries use the built-in lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub templates: Option<PathBuf>,
    pub normal_states: Option<PathBuf>,
    pub abnormal_states: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Annotated dataset whose test split trains the heads.
    pub train: Option<PathBuf>,
    /// Dataset evaluated per category; its normal train images are the
    /// few-shot references.
    pub eval: Option<PathBuf>,
    /// Autodetected when unset.
    pub layout: Option<Layout>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Min-max rescale both maps before adding them.
    pub normalize: bool,
    pub image_score_map: ImageScoreMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Side of the maps and masks fed to pixel metrics; the backbone input
    /// side when unset.
    pub side: Option<usize>,
    pub fpr_limit: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            side: None,
            fpr_limit: DEFAULT_FPR_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Reference images per category in few-shot mode.
    pub k: usize,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Head checkpoint read by `eval` and `predict`.
    pub checkpoint: Option<PathBuf>,
    /// Memory banks read by few-shot `predict`.
    pub banks: Option<PathBuf>,
    pub fusion: FusionConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            prompts: PromptConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            k: 0,
            seeds: vec![0],
            mode: Mode::Zero,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            banks: None,
            fusion: FusionConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config, applies `key=value` overrides (dotted keys,
    /// values parsed as JSON when possible, else taken as strings) and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("invalid config {}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.backbone.resolved_spec();
        spec.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        match self.backbone.name.as_str() {
            "synthetic" | "clip" => {}
            other => {
                return Err(CliError::config(format!(
                    "unknown backbone {other:?} (clip|synthetic)"
                )))
            }
        }
        if self.train.image_side != spec.input_side {
            return Err(CliError::config(format!(
                "train.image_side is {} but the backbone input side is {}; set them equal",
                self.train.image_side, spec.input_side
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds must not be empty"));
        }
        if self.mode == Mode::Few && self.k == 0 {
            return Err(CliError::config("few-shot mode needs k ≥ 1"));
        }
        if !(self.metrics.fpr_limit > 0.0 && self.metrics.fpr_limit <= 1.0) {
            return Err(CliError::config("metrics.fpr_limit must lie in (0, 1]"));
        }
        if self.metrics.side == Some(0) {
            return Err(CliError::config("metrics.side must be positive"));
        }
        Ok(())
    }

    pub fn metric_side(&self) -> usize {
        self.metrics.side.unwrap_or(self.train.image_side)
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::config(format!(
                "override key {key:?} has an empty segment"
            )));
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(CliError::config(format!(
                    "override key {key:?} descends into a non-object"
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert(Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(extra: &[&str]) -> Result<RunConfig, CliError> {
        let mut o = vec![
            "backbone.name=synthetic".to_string(),
            "train.image_side=64".to_string(),
        ];
        o.extend(extra.iter().map(|s| s.to_string()));
        RunConfig::load(None, &o)
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = synthetic(&[
            "k=4",
            "train.epochs=1",
            "seeds=[1,2,3]",
            "output_dir=out/x",
            "data.layout=visa",
        ])
        .unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.data.layout, Some(Layout::Visa));
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(synthetic(&["seeds=[]"]).is_err());
        assert!(synthetic(&["mode=few"]).is_err());
        assert!(synthetic(&["train.mosaic_prob=1.5"]).is_err());
        assert!(synthetic(&["no_such_field=1"]).is_err());
        assert!(synthetic(&["k"]).is_err());
        assert!(RunConfig::load(None, &["backbone.name=synthetic".into()]).is_err());
        assert!(synthetic(&["backbone.name=resnet"]).is_err());
    }

    #[test]
    fn clip_defaults() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(
            cfg.backbone.resolved_spec(),
            BackboneSpec::vit_large_patch14()
        );
        assert_eq!(cfg.metric_side(), 518);
        assert_eq!(cfg.train.epochs, 3);
    }
}
