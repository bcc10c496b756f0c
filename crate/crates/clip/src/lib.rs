//! Pretrained CLIP encoders on CPU: the vision tower as an
//! [`adkit_core::backbone::Backbone`] with stage taps and the text tower as an
//! [`adkit_core::prompts::TextEncoder`].
//!
//! Weights are read from a Hugging Face style directory holding
//! `config.json`, `model.safetensors` and `tokenizer.json`.

mod config;
mod interp;
mod transformer;

use std::path::{Path, PathBuf};

use adkit_core::backbone::{
    Backbone, BackboneSpec, ClassEmbedding, Features, ImageTensor, PatchFeatureGrid,
};
use adkit_core::prompts::TextEncoder;
use adkit_core::{Error, Result};
use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{
    layer_norm, linear_no_bias, Conv2d, Conv2dConfig, LayerNorm, LayerNormConfig, Linear,
    VarBuilder,
};
use ndarray::{Array1, Array3};
use tokenizers::Tokenizer;

pub use config::{ClipConfig, TowerConfig};
pub use interp::bicubic;

use transformer::{causal_mask, CResult, Encoder};

fn load_err(e: impl std::fmt::Display) -> Error {
    Error::Load(e.to_string())
}

fn run_err(e: candle_core::Error) -> Error {
    Error::Encoder(e.to_string())
}

/// Files of a weights directory.
#[derive(Debug, Clone)]
pub struct WeightsDir {
    pub config: PathBuf,
    pub weights: PathBuf,
    pub tokenizer: PathBuf,
}

impl WeightsDir {
    pub fn new(dir: &Path) -> Result<Self> {
        let files = Self {
            config: dir.join("config.json"),
            weights: dir.join("model.safetensors"),
            tokenizer: dir.join("tokenizer.json"),
        };
        for p in [&files.config, &files.weights] {
            if !p.is_file() {
                return Err(Error::Load(format!("missing {}", p.display())));
            }
        }
        Ok(files)
    }

    fn var_builder(&self) -> Result<VarBuilder<'static>> {
        // SAFETY: the file is memory-mapped read-only and not modified while loaded
        unsafe { VarBuilder::from_mmaped_safetensors(&[&self.weights], DType::F32, &Device::Cpu) }
            .map_err(load_err)
    }
}

/// CLIP vision tower returning raw residual-stream patch tokens at the
/// stage boundaries and the projected classification token.
pub struct ClipBackbone {
    spec: BackboneSpec,
    patch: Conv2d,
    class_token: Tensor,
    positions: Tensor,
    pre_norm: LayerNorm,
    encoder: Encoder,
    post_norm: LayerNorm,
    projection: Linear,
    fingerprint: String,
}

impl ClipBackbone {
    pub fn load(dir: &Path, spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let files = WeightsDir::new(dir)?;
        let cfg = ClipConfig::read(&files.config)?;
        cfg.check_spec(&spec)?;
        let vb = files.var_builder()?;
        Self::build(vb, &cfg, spec, &files.weights).map_err(load_err)
    }

    fn build(
        vb: VarBuilder,
        cfg: &ClipConfig,
        spec: BackboneSpec,
        weights: &Path,
    ) -> CResult<Self> {
        let v = &cfg.vision_config;
        let vm = vb.pp("vision_model");
        let emb = vm.pp("embeddings");
        let conv = Conv2dConfig {
            stride: v.patch_size,
            ..Default::default()
        };
        let patch = candle_nn::conv2d_no_bias(
            3,
            v.hidden_size,
            v.patch_size,
            conv,
            emb.pp("patch_embedding"),
        )?;
        let class_token = emb.get(v.hidden_size, "class_embedding")?;
        let trained = v.image_size / v.patch_size;
        let table = emb.get(
            (trained * trained + 1, v.hidden_size),
            "position_embedding.weight",
        )?;
        let positions = resize_positions(&table, trained, spec.grid_side())?;
        let ln = LayerNormConfig {
            eps: v.layer_norm_eps,
            ..Default::default()
        };
        Ok(Self {
            patch,
            class_token,
            positions,
            pre_norm: layer_norm(v.hidden_size, ln, vm.pp("pre_layrnorm"))?,
            encoder: Encoder::new(vm.clone(), v)?,
            post_norm: layer_norm(v.hidden_size, ln, vm.pp("post_layernorm"))?,
            projection: linear_no_bias(
                v.hidden_size,
                cfg.projection_dim,
                vb.pp("visual_projection"),
            )?,
            fingerprint: format!("clip:{}:{:?}", weights.display(), spec),
            spec,
        })
    }

    fn forward(&self, image: &ImageTensor) -> CResult<(Vec<f32>, Vec<Vec<f32>>)> {
        let side = self.spec.input_side;
        let (mean, std) = (self.spec.image_mean, self.spec.image_std);
        let mut chw = vec![0f32; 3 * side * side];
        for ((r, c, k), v) in image.pixels.indexed_iter() {
            chw[(k * side + r) * side + c] = (v - mean[k]) / std[k];
        }
        let x = Tensor::from_vec(chw, (1, 3, side, side), &Device::Cpu)?;
        let tokens = self.patch.forward(&x)?.flatten_from(2)?.transpose(1, 2)?;
        let width = self.spec.internal_width;
        let cls = self.class_token.reshape((1, 1, width))?;
        let h = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.positions)?;
        let h = self.pre_norm.forward(&h)?;
        let taps = self
            .encoder
            .forward_taps(&h, None, &self.spec.stage_boundaries)?;
        let last = taps.last().expect("at least one stage");
        let pooled = self.post_norm.forward(&last.narrow(1, 0, 1)?.squeeze(1)?)?;
        let class = self
            .projection
            .forward(&pooled)?
            .squeeze(0)?
            .to_vec1::<f32>()?;
        let grids = taps
            .iter()
            .map(|t| {
                t.narrow(1, 1, t.dim(1)? - 1)?
                    .squeeze(0)?
                    .flatten_all()?
                    .to_vec1::<f32>()
            })
            .collect::<CResult<_>>()?;
        Ok((class, grids))
    }
}

/// Class position kept; the `trained × trained` patch table is resampled to
/// `grid × grid` when the sizes differ.
fn resize_positions(table: &Tensor, trained: usize, grid: usize) -> CResult<Tensor> {
    if trained == grid {
        return table.unsqueeze(0);
    }
    let width = table.dim(1)?;
    let cls = table.narrow(0, 0, 1)?;
    let patches = table
        .narrow(0, 1, trained * trained)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let resized = bicubic(&patches, trained, trained, width, grid, grid);
    let resized = Tensor::from_vec(resized, (grid * grid, width), table.device())?;
    Tensor::cat(&[&cls, &resized], 0)?.unsqueeze(0)
}

impl Backbone for ClipBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn extract(&self, image: &ImageTensor) -> Result<Features> {
        self.spec.check_input(image)?;
        let (class, grids) = self.forward(image).map_err(run_err)?;
        let side = self.spec.grid_side();
        let stages = grids
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let grid = Array3::from_shape_vec((side, side, self.spec.internal_width), g)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                PatchFeatureGrid::new(i + 1, grid)
            })
            .collect::<Result<_>>()?;
        Ok(Features {
            class_embedding: ClassEmbedding::from_unnormalized(Array1::from(class))?,
            stages,
        })
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// CLIP text tower with its tokenizer. Each sentence is pooled at its
/// end-of-text token and projected to the joint space.
pub struct ClipTextEncoder {
    tokenizer: Tokenizer,
    token_embedding: candle_nn::Embedding,
    positions: Tensor,
    encoder: Encoder,
    final_norm: LayerNorm,
    projection: Linear,
    joint_width: usize,
    max_len: usize,
    eos: u32,
}

impl ClipTextEncoder {
    pub fn load(dir: &Path) -> Result<Self> {
        let files = WeightsDir::new(dir)?;
        if !files.tokenizer.is_file() {
            return Err(Error::Load(format!(
                "missing {}",
                files.tokenizer.display()
            )));
        }
        let cfg = ClipConfig::read(&files.config)?;
        let tokenizer = Tokenizer::from_file(&files.tokenizer).map_err(load_err)?;
        let eos = cfg
            .text_config
            .eos_token_id
            .filter(|id| *id != 2)
            .or_else(|| tokenizer.token_to_id("<|endoftext|>"))
            .ok_or_else(|| Error::Load("cannot determine the end-of-text token".into()))?;
        let vb = files.var_builder()?;
        Self::build(vb, &cfg, tokenizer, eos).map_err(load_err)
    }

    fn build(vb: VarBuilder, cfg: &ClipConfig, tokenizer: Tokenizer, eos: u32) -> CResult<Self> {
        let t = &cfg.text_config;
        let tm = vb.pp("text_model");
        let emb = tm.pp("embeddings");
        let ln = LayerNormConfig {
            eps: t.layer_norm_eps,
            ..Default::default()
        };
        Ok(Self {
            tokenizer,
            token_embedding: candle_nn::embedding(
                t.vocab_size,
                t.hidden_size,
                emb.pp("token_embedding"),
            )?,
            positions: emb.get(
                (t.max_position_embeddings, t.hidden_size),
                "position_embedding.weight",
            )?,
            encoder: Encoder::new(tm.clone(), t)?,
            final_norm: layer_norm(t.hidden_size, ln, tm.pp("final_layer_norm"))?,
            projection: linear_no_bias(
                t.hidden_size,
                cfg.projection_dim,
                vb.pp("text_projection"),
            )?,
            joint_width: cfg.projection_dim,
            max_len: t.max_position_embeddings,
            eos,
        })
    }

    /// Token ids with start and end markers, truncated to the context length
    /// while keeping the end marker.
    pub fn tokenize(&self, sentence: &str) -> Result<Vec<u32>> {
        let enc = self
            .tokenizer
            .encode(sentence, true)
            .map_err(|e| Error::Encoder(e.to_string()))?;
        let mut ids = enc.get_ids().to_vec();
        if ids.len() > self.max_len {
            ids.truncate(self.max_len);
            *ids.last_mut().expect("non-empty") = self.eos;
        }
        Ok(ids)
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<Array1<f32>> {
        let pooled_at = ids
            .iter()
            .position(|t| *t == self.eos)
            .ok_or_else(|| Error::Encoder("token sequence has no end-of-text token".into()))?;
        self.forward(ids, pooled_at)
            .map(Array1::from)
            .map_err(run_err)
    }

    fn forward(&self, ids: &[u32], pooled_at: usize) -> CResult<Vec<f32>> {
        let n = ids.len();
        let ids = Tensor::new(ids, &Device::Cpu)?.unsqueeze(0)?;
        let h = self
            .token_embedding
            .forward(&ids)?
            .broadcast_add(&self.positions.narrow(0, 0, n)?.unsqueeze(0)?)?;
        let mask = causal_mask(n, &Device::Cpu)?;
        let h = self
            .final_norm
            .forward(&self.encoder.forward(&h, Some(&mask))?)?;
        let pooled = h.narrow(1, pooled_at, 1)?.squeeze(1)?;
        self.projection
            .forward(&pooled)?
            .squeeze(0)?
            .to_vec1::<f32>()
    }
}

impl TextEncoder for ClipTextEncoder {
    fn joint_width(&self) -> usize {
        self.joint_width
    }

    fn encode(&self, sentences: &[String]) -> Result<Vec<Array1<f32>>> {
        sentences
            .iter()
            .map(|s| self.encode_ids(&self.tokenize(s)?))
            .collect()
    }
}
