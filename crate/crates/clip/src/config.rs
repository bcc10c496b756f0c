use std::path::Path;

use adkit_core::backbone::BackboneSpec;
use adkit_core::{Error, Result};
use serde::Deserialize;

/// The subset of a Hugging Face `config.json` the encoders need.
#[derive(Debug, Clone, Deserialize)]
pub struct ClipConfig {
    pub projection_dim: usize,
    pub text_config: TowerConfig,
    pub vision_config: TowerConfig,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TowerConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    #[serde(default)]
    pub image_size: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub max_position_embeddings: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub eos_token_id: Option<u32>,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_act() -> String {
    "quick_gelu".into()
}

impl ClipConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }

    /// Checks the vision tower against the configured backbone geometry.
    pub fn check_spec(&self, spec: &BackboneSpec) -> Result<()> {
        let v = &self.vision_config;
        let mismatch = |what: &str, want: usize, have: usize| {
            Err(Error::Load(format!(
                "backbone spec {what} is {want} but the weights have {have}"
            )))
        };
        if v.num_hidden_layers != spec.num_layers {
            return mismatch("num_layers", spec.num_layers, v.num_hidden_layers);
        }
        if v.patch_size != spec.patch_size {
            return mismatch("patch_size", spec.patch_size, v.patch_size);
        }
        if v.hidden_size != spec.internal_width {
            return mismatch("internal_width", spec.internal_width, v.hidden_size);
        }
        if self.projection_dim != spec.joint_width {
            return mismatch("joint_width", spec.joint_width, self.projection_dim);
        }
        if !v.image_size.is_multiple_of(v.patch_size)
            || !v.hidden_size.is_multiple_of(v.num_attention_heads)
        {
            return Err(Error::Load("inconsistent vision tower geometry".into()));
        }
        Ok(())
    }
}
