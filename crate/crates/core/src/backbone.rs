//! Image encoders that yield a classification embedding plus raw patch-token
//! grids tapped at the end of each encoder stage.

use ndarray::{s, Array1, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{precondition, shape, Error, Result};
use crate::resample;

pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// An RGB image with values in `[0, 1]`, laid out `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Array3<f32>,
    pub category: String,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f32>, category: impl Into<String>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(shape(format!(
                "expected 3 channels, got {}",
                pixels.dim().2
            )));
        }
        if pixels
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(precondition("pixel values must be finite and in [0, 1]"));
        }
        Ok(Self {
            pixels,
            category: category.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Resize the shorter side to `side`, then centre-crop to `side × side`.
    pub fn preprocess(&self, side: usize) -> ImageTensor {
        ImageTensor {
            pixels: resize_and_crop(self.pixels.view(), side),
            category: self.category.clone(),
        }
    }
}

pub fn resize_and_crop(pixels: ArrayView3<'_, f32>, side: usize) -> Array3<f32> {
    let (h, w, _) = pixels.dim();
    let (rh, rw) = if h <= w {
        (
            side,
            ((w * side) as f64 / h as f64).round().max(side as f64) as usize,
        )
    } else {
        (
            ((h * side) as f64 / w as f64).round().max(side as f64) as usize,
            side,
        )
    };
    let resized = resample::resize_image(pixels, rh, rw);
    let top = (rh - side) / 2;
    let left = (rw - side) / 2;
    resized
        .slice(s![top..top + side, left..left + side, ..])
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Unit-norm image embedding in the joint image-text space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding(Array1<f32>);

impl ClassEmbedding {
    /// L2-normalizes `vector`. Fails on a zero or non-finite vector.
    pub fn from_unnormalized(vector: Array1<f32>) -> Result<Self> {
        let norm = vector
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(precondition("class embedding has zero or non-finite norm"));
        }
        Ok(Self(vector.mapv(|v| (v as f64 / norm) as f32)))
    }

    /// Wraps an already unit-norm vector unchanged, e.g. one read back from
    /// a feature cache. Fails when the norm is off by more than `1e-4`.
    pub fn from_unit(vector: Array1<f32>) -> Result<Self> {
        let norm = vector
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm.is_nan() || (norm - 1.0).abs() > 1e-4 {
            return Err(precondition(format!(
                "class embedding norm {norm} is not 1"
            )));
        }
        Ok(Self(vector))
    }

    pub fn as_array(&self) -> &Array1<f32> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Raw (unprojected, unnormalized) patch tokens of one stage, `h × w × C_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureGrid {
    /// One-based stage index.
    pub stage: usize,
    pub grid: Array3<f32>,
}

impl PatchFeatureGrid {
    pub fn new(stage: usize, grid: Array3<f32>) -> Result<Self> {
        let (h, w, c) = grid.dim();
        if h * w == 0 || c == 0 {
            return Err(shape(format!("empty patch grid {h}×{w}×{c}")));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(precondition(format!(
                "stage {stage} features are not finite"
            )));
        }
        Ok(Self { stage, grid })
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn channels(&self) -> usize {
        self.grid.dim().2
    }

    /// Row-major `(h·w) × C_s` view of the tokens as `f64`.
    pub fn rows_f64(&self) -> Array2<f64> {
        let (h, w, c) = self.grid.dim();
        let flat = self
            .grid
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("standard layout reshape");
        flat.mapv(f64::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub num_layers: usize,
    /// Layer counts after which a stage ends; strictly increasing, the last
    /// one equal to `num_layers`.
    pub stage_boundaries: Vec<usize>,
    pub patch_size: usize,
    /// Width of the encoder's residual stream (`C_s`).
    pub internal_width: usize,
    /// Width of the joint image-text space (`C`).
    pub joint_width: usize,
    pub input_side: usize,
    #[serde(default = "default_mean")]
    pub image_mean: [f32; 3],
    #[serde(default = "default_std")]
    pub image_std: [f32; 3],
}

fn default_mean() -> [f32; 3] {
    CLIP_MEAN
}

fn default_std() -> [f32; 3] {
    CLIP_STD
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::vit_large_patch14()
    }
}

impl BackboneSpec {
    /// ViT-L/14 pretrained at 336, run at 518 with four 6-layer stages.
    pub fn vit_large_patch14() -> Self {
        Self {
            name: "clip-vit-large-patch14-336".into(),
            num_layers: 24,
            stage_boundaries: vec![6, 12, 18, 24],
            patch_size: 14,
            internal_width: 1024,
            joint_width: 768,
            input_side: 518,
            image_mean: CLIP_MEAN,
            image_std: CLIP_STD,
        }
    }

    /// Small spec for the synthetic encoder; no channel normalization.
    pub fn synthetic() -> Self {
        Self {
            name: "synthetic".into(),
            num_layers: 4,
            stage_boundaries: vec![1, 2, 3, 4],
            patch_size: 8,
            internal_width: 32,
            joint_width: 16,
            input_side: 64,
            image_mean: [0.0; 3],
            image_std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_boundaries.is_empty() {
            return Err(precondition("backbone needs at least one stage"));
        }
        if self.stage_boundaries.windows(2).any(|w| w[0] >= w[1]) || self.stage_boundaries[0] == 0 {
            return Err(precondition(format!(
                "stage boundaries {:?} must be strictly increasing and positive",
                self.stage_boundaries
            )));
        }
        if *self.stage_boundaries.last().unwrap() != self.num_layers {
            return Err(precondition(format!(
                "last stage boundary {:?} must equal num_layers {}",
                self.stage_boundaries.last(),
                self.num_layers
            )));
        }
        if self.patch_size == 0 || self.input_side < self.patch_size {
            return Err(precondition(format!(
                "input side {} too small for patch size {}",
                self.input_side, self.patch_size
            )));
        }
        if self.internal_width == 0 || self.joint_width == 0 {
            return Err(precondition("feature widths must be positive"));
        }
        if self.image_std.iter().any(|s| *s <= 0.0) {
            return Err(precondition("image_std entries must be positive"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_boundaries.len()
    }

    /// Patch-grid side; integer division drops the partial border patch.
    pub fn grid_side(&self) -> usize {
        self.input_side / self.patch_size
    }

    pub fn check_input(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.input_side || image.width() != self.input_side {
            return Err(precondition(format!(
                "image is {}×{}, backbone expects {}×{} (preprocess first)",
                image.height(),
                image.width(),
                self.input_side,
                self.input_side
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub class_embedding: ClassEmbedding,
    pub stages: Vec<PatchFeatureGrid>,
}

/// A frozen image encoder.
pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// Classification embedding plus one raw patch grid per stage. The image
    /// must already be preprocessed to `spec().input_side`.
    fn extract(&self, image: &ImageTensor) -> Result<Features>;

    /// Identifies the weights; used to key feature caches.
    fn fingerprint(&self) -> String {
        format!("{:?}", self.spec())
    }
}

/// Deterministic stand-in encoder. Every patch token is a seeded random
/// feature map of that patch's pixels alone, so identical image regions give
/// identical tokens and a change in one patch touches only its grid cell.
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    spec: BackboneSpec,
    seed: u64,
    stage_weights: Vec<(Array2<f32>, Array1<f32>)>,
    class_weights: Array2<f32>,
}

impl SyntheticBackbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let patch_dim = spec.patch_size * spec.patch_size * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edba_5e0f_cafe);
        let gain = Normal::new(0.0f32, (3.0 / patch_dim as f32).sqrt()).expect("valid std");
        let shift = Normal::new(0.0f32, 0.5).expect("valid std");
        let stage_weights = (0..spec.num_stages())
            .map(|_| {
                let w = Array2::from_shape_fn((spec.internal_width, patch_dim), |_| {
                    gain.sample(&mut rng)
                });
                let b = Array1::from_shape_fn(spec.internal_width, |_| shift.sample(&mut rng));
                (w, b)
            })
            .collect();
        let class_gain =
            Normal::new(0.0f32, (1.0 / spec.internal_width as f32).sqrt()).expect("valid std");
        let class_weights = Array2::from_shape_fn((spec.joint_width, spec.internal_width), |_| {
            class_gain.sample(&mut rng)
        });
        Ok(Self {
            spec,
            seed,
            stage_weights,
            class_weights,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn patch_vectors(&self, image: &ImageTensor) -> Array2<f32> {
        let p = self.spec.patch_size;
        let g = self.spec.grid_side();
        let mut out = Array2::<f32>::zeros((g * g, p * p * 3));
        for i in 0..g {
            for j in 0..g {
                let patch = image
                    .pixels
                    .slice(s![i * p..(i + 1) * p, j * p..(j + 1) * p, ..]);
                let mut row = out.row_mut(i * g + j);
                for (dst, src) in row.iter_mut().zip(patch.iter()) {
                    *dst = src - 0.5;
                }
            }
        }
        out
    }
}

impl Backbone for SyntheticBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn extract(&self, image: &ImageTensor) -> Result<Features> {
        self.spec.check_input(image)?;
        let g = self.spec.grid_side();
        let patches = self.patch_vectors(image);

        let mut stages = Vec::with_capacity(self.spec.num_stages());
        let mut pooled = Array1::<f32>::zeros(self.spec.internal_width);
        for (idx, (w, b)) in self.stage_weights.iter().enumerate() {
            let tokens = (patches.dot(&w.t()) + b).mapv(f32::tanh);
            if idx + 1 == self.stage_weights.len() {
                pooled = tokens.mean_axis(ndarray::Axis(0)).expect("non-empty grid");
            }
            let grid = tokens
                .into_shape_with_order((g, g, self.spec.internal_width))
                .map_err(|e| Error::Shape(e.to_string()))?;
            stages.push(PatchFeatureGrid::new(idx + 1, grid)?);
        }
        let class_embedding = ClassEmbedding::from_unnormalized(self.class_weights.dot(&pooled))?;
        Ok(Features {
            class_embedding,
            stages,
        })
    }

    fn fingerprint(&self) -> String {
        format!("synthetic:{}:{:?}", self.seed, self.spec)
    }
}

/// Runs the synthetic encoder with `seed`.
pub fn synthetic_extract(image: &ImageTensor, seed: u64, spec: &BackboneSpec) -> Result<Features> {
    SyntheticBackbone::new(spec.clone(), seed)?.extract(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(side: usize, salt: u32) -> ImageTensor {
        let px = Array3::from_shape_fn((side, side, 3), |(r, c, k)| {
            (((r as u32 * 31 + c as u32 * 17 + k as u32 * 7 + salt) % 97) as f32) / 96.0
        });
        ImageTensor::new(px, "widget").unwrap()
    }

    #[test]
    fn default_spec_is_four_six_layer_stages() {
        let spec = BackboneSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.stage_boundaries, vec![6, 12, 18, 24]);
        assert_eq!(spec.grid_side(), 37);
    }

    #[test]
    fn invalid_boundaries_rejected() {
        let mut spec = BackboneSpec::synthetic();
        spec.stage_boundaries = vec![2, 2, 4];
        assert!(spec.validate().is_err());
        spec.stage_boundaries = vec![1, 3];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        let px = Array3::from_elem((2, 2, 3), 1.5f32);
        assert!(ImageTensor::new(px, "x").is_err());
    }

    #[test]
    fn mismatched_side_is_precondition_error() {
        let spec = BackboneSpec::synthetic();
        let err = synthetic_extract(&image(32, 0), 0, &spec).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn single_stage_spec_gives_one_grid() {
        let mut spec = BackboneSpec::synthetic();
        spec.stage_boundaries = vec![4];
        let f = synthetic_extract(&image(64, 1), 3, &spec).unwrap();
        assert_eq!(f.stages.len(), 1);
    }

    #[test]
    fn extraction_is_deterministic() {
        let spec = BackboneSpec::synthetic();
        let img = image(64, 2);
        let a = synthetic_extract(&img, 7, &spec).unwrap();
        let b = synthetic_extract(&img, 7, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seed_changes_class_embedding() {
        let spec = BackboneSpec::synthetic();
        let img = image(64, 2);
        let a = synthetic_extract(&img, 0, &spec).unwrap();
        let b = synthetic_extract(&img, 1, &spec).unwrap();
        assert_ne!(a.class_embedding, b.class_embedding);
    }

    #[test]
    fn single_patch_edit_is_local() {
        let spec = BackboneSpec::synthetic();
        let a = image(64, 5);
        let mut b = a.clone();
        // patch (2, 5) spans rows 16..24 and cols 40..48
        b.pixels.slice_mut(s![16..24, 40..48, ..]).fill(0.9);
        let fa = synthetic_extract(&a, 11, &spec).unwrap();
        let fb = synthetic_extract(&b, 11, &spec).unwrap();
        for (ga, gb) in fa.stages.iter().zip(&fb.stages) {
            for i in 0..8 {
                for j in 0..8 {
                    let same = ga.grid.slice(s![i, j, ..]) == gb.grid.slice(s![i, j, ..]);
                    assert_eq!(same, (i, j) != (2, 5), "cell ({i},{j}) stage {}", ga.stage);
                }
            }
        }
    }

    #[test]
    fn preprocess_resizes_and_crops_to_square() {
        let px = Array3::from_elem((40, 80, 3), 0.25f32);
        let img = ImageTensor::new(px, "x").unwrap().preprocess(64);
        assert_eq!(img.pixels.dim(), (64, 64, 3));
        assert!(img.pixels.iter().all(|v| (*v - 0.25).abs() < 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shapes_follow_spec(
            stages in 1usize..5,
            patch in 2usize..6,
            cells in 1usize..5,
            width in 1usize..12,
            joint in 1usize..8,
            seed in any::<u64>(),
        ) {
            let spec = BackboneSpec {
                num_layers: stages * 2,
                stage_boundaries: (1..=stages).map(|s| s * 2).collect(),
                patch_size: patch,
                internal_width: width,
                joint_width: joint,
                input_side: patch * cells,
                ..BackboneSpec::synthetic()
            };
            let f = synthetic_extract(&image(patch * cells, seed as u32), seed, &spec).unwrap();
            prop_assert_eq!(f.stages.len(), stages);
            for (n, g) in f.stages.iter().enumerate() {
                prop_assert_eq!(g.stage, n + 1);
                prop_assert_eq!(g.grid.dim(), (cells, cells, width));
            }
            let norm: f64 = f.class_embedding.as_array().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-5);
            prop_assert_eq!(f.class_embedding.dim(), joint);
        }
    }
}
