//! Head training: focal + dice on the stage-averaged anomaly map, Adam
//! updates, frozen backbone.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::head::{normalize_rows, ProjectionHead};
use super::loss::{dice_loss_grad, focal_loss_grad};
use crate::backbone::{Backbone, BackboneSpec, ImageTensor, PatchFeatureGrid};
use crate::data::{mosaic_tile, Sample, SampleSource};
use crate::error::{precondition, shape, Error, Result};
use crate::prompts::TextFeatureMatrix;
use crate::resample::{bilinear_adjoint, bilinear_with, AxisTaps};
use crate::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub image_side: usize,
    pub mosaic_prob: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub temperature: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Heads for evaluation on VisA, trained on MVTec AD.
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            image_side: 518,
            mosaic_prob: 0.2,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            focal_weight: 1.0,
            dice_weight: 1.0,
            temperature: super::DEFAULT_TEMPERATURE,
            init_std: 0.01,
            seed: 111,
        }
    }
}

impl TrainConfig {
    /// Heads for evaluation on MVTec AD, trained on VisA: 15 epochs.
    pub fn for_eval_on_mvtec() -> Self {
        Self {
            epochs: 15,
            ..Self::default()
        }
    }

    pub fn for_eval_on_visa() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(precondition("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mosaic_prob) {
            return Err(precondition(format!(
                "mosaic_prob {} not in [0, 1]",
                self.mosaic_prob
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(precondition("temperature must be positive"));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.init_std.is_nan()
            || self.init_std < 0.0
        {
            return Err(precondition(
                "learning_rate must be positive and init_std non-negative",
            ));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
            smooth: self.dice_smooth,
            focal_weight: self.focal_weight,
            dice_weight: self.dice_weight,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub smooth: f64,
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub temperature: f64,
}

/// `f64` head parameters, also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadParams {
    pub fn from_head(head: &ProjectionHead) -> Self {
        Self {
            weight: head.weight.mapv(f64::from),
            bias: head.bias.mapv(f64::from),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn to_head(&self, stage: usize) -> Result<ProjectionHead> {
        ProjectionHead::new(
            stage,
            self.weight.mapv(|v| v as f32),
            self.bias.mapv(|v| v as f32),
        )
    }
}

/// Gaussian weights with standard deviation `std`, zero bias.
pub fn init_heads(spec: &BackboneSpec, std: f64, seed: u64) -> Vec<ProjectionHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, std as f32).expect("finite std");
    (1..=spec.num_stages())
        .map(|stage| ProjectionHead {
            stage,
            weight: Array2::from_shape_fn((spec.internal_width, spec.joint_width), |_| {
                normal.sample(&mut rng)
            }),
            bias: Array1::zeros(spec.joint_width),
        })
        .collect()
}

struct StageForward {
    rows: Array2<f64>,
    unit: Array2<f64>,
    norms: Array1<f64>,
    abnormal: Array1<f64>,
    dims: (usize, usize),
}

/// Loss of one sample and its gradient with respect to every head.
///
/// Each stage's tokens are projected, normalized and scored against the text
/// rows; the abnormal maps are resized to the mask, averaged over stages and
/// scored with `focal_weight · focal + dice_weight · dice`.
pub fn sample_loss_and_grad(
    stages: &[PatchFeatureGrid],
    params: &[HeadParams],
    text: &TextFeatureMatrix,
    mask: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, Vec<HeadParams>)> {
    if stages.is_empty() || stages.len() != params.len() {
        return Err(shape(format!(
            "{} stage grids but {} heads",
            stages.len(),
            params.len()
        )));
    }
    let (out_h, out_w) = mask.dim();
    let text = text.to_f64();
    let direction = (&text.row(1) - &text.row(0)) / cfg.temperature;
    let num_stages = stages.len() as f64;

    let mut forwards = Vec::with_capacity(stages.len());
    let mut averaged = Array2::<f64>::zeros((out_h, out_w));
    for (grid, p) in stages.iter().zip(params) {
        if grid.channels() != p.weight.nrows() || p.weight.ncols() != text.ncols() {
            return Err(shape(format!(
                "stage {}: {} channels into head {:?}, text width {}",
                grid.stage,
                grid.channels(),
                p.weight.dim(),
                text.ncols()
            )));
        }
        let rows = grid.rows_f64();
        let mut unit = rows.dot(&p.weight) + &p.bias;
        let norms = normalize_rows(&mut unit);
        let logit_gap = unit.dot(&direction);
        let abnormal = logit_gap.mapv(|z| 1.0 / (1.0 + (-z).exp()));
        let dims = (grid.height(), grid.width());
        let map = abnormal
            .view()
            .into_shape_with_order(dims)
            .expect("h·w rows");
        let taps = (
            AxisTaps::bilinear(dims.0, out_h),
            AxisTaps::bilinear(dims.1, out_w),
        );
        averaged += &bilinear_with(map, &taps.0, &taps.1);
        forwards.push(StageForward {
            rows,
            unit,
            norms,
            abnormal,
            dims,
        });
    }
    averaged /= num_stages;

    let (focal, g_focal) = focal_loss_grad(averaged.view(), mask.view(), cfg.gamma, cfg.alpha)?;
    let (dice, g_dice) = dice_loss_grad(averaged.view(), mask.view(), cfg.smooth)?;
    let loss = cfg.focal_weight * focal + cfg.dice_weight * dice;
    let d_stage = (g_focal * cfg.focal_weight + g_dice * cfg.dice_weight) / num_stages;

    let mut grads = Vec::with_capacity(stages.len());
    for f in forwards {
        let taps = (
            AxisTaps::bilinear(f.dims.0, out_h),
            AxisTaps::bilinear(f.dims.1, out_w),
        );
        let d_map = bilinear_adjoint(d_stage.view(), &taps.0, &taps.1);
        let d_gap = Zip::from(
            d_map
                .view()
                .into_shape_with_order(f.abnormal.len())
                .expect("flat"),
        )
        .and(&f.abnormal)
        .map_collect(|g, a| g * a * (1.0 - a));
        // d unit_i = d_gap_i · direction, then back through the normalization
        let mut d_pre = Array2::<f64>::zeros(f.unit.dim());
        for (i, mut row) in d_pre.rows_mut().into_iter().enumerate() {
            let n = f.norms[i];
            if n == 0.0 {
                continue;
            }
            let u = f.unit.row(i);
            let du = &direction * d_gap[i];
            let along = u.dot(&du);
            row.assign(&((&du - &(&u * along)) / n));
        }
        grads.push(HeadParams {
            weight: f.rows.t().dot(&d_pre),
            bias: d_pre.sum_axis(Axis(0)),
        });
    }
    Ok((loss, grads))
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<HeadParams>,
    v: Vec<HeadParams>,
}

impl Adam {
    fn new(lr: f64, params: &[HeadParams]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(HeadParams::zeros_like).collect(),
            v: params.iter().map(HeadParams::zeros_like).collect(),
        }
    }

    fn update(&mut self, params: &mut [HeadParams], grads: &[HeadParams]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, g, m, v| apply(p, *g, m, v));
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, g, m, v| apply(p, *g, m, v));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub heads: Vec<ProjectionHead>,
    pub epochs: Vec<EpochLog>,
}

/// Fits one projection head per backbone stage. Sample order, mosaic draws
/// and head initialization all derive from `cfg.seed`.
pub fn train_heads(
    source: &dyn SampleSource,
    backbone: &dyn Backbone,
    text: &BTreeMap<String, TextFeatureMatrix>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let spec = backbone.spec();
    if source.is_empty() {
        return Err(precondition("training set is empty"));
    }
    if spec.input_side != cfg.image_side {
        return Err(precondition(format!(
            "training side {} differs from backbone input side {}",
            cfg.image_side, spec.input_side
        )));
    }

    let init = init_heads(spec, cfg.init_std, cfg.seed);
    if cfg.epochs == 0 {
        return Ok(TrainReport {
            heads: init,
            epochs: Vec::new(),
        });
    }

    let mut pools: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..source.len() {
        pools
            .entry(source.category(i).to_string())
            .or_default()
            .push(i);
    }
    for category in pools.keys() {
        if !text.contains_key(category) {
            return Err(precondition(format!(
                "no text features for category {category}"
            )));
        }
    }

    let loss_cfg = cfg.loss();
    let mut params: Vec<HeadParams> = init.iter().map(HeadParams::from_head).collect();
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<HeadParams> = params.iter().map(HeadParams::zeros_like).collect();
            for &idx in batch {
                let sample = draw_sample(source, idx, &pools, cfg, &mut rng)?;
                let features = backbone.extract(&sample.image)?;
                let ft = &text[&sample.image.category];
                let (loss, g) =
                    sample_loss_and_grad(&features.stages, &params, ft, &sample.mask, &loss_cfg)?;
                epoch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(g) {
                    acc.weight += &g.weight;
                    acc.bias += &g.bias;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.weight *= scale;
                g.bias *= scale;
            }
            adam.update(&mut params, &grads);
            steps += 1;
        }
        let mean_loss = epoch_loss / source.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Precondition(format!(
                "loss diverged in epoch {epoch}"
            )));
        }
        logs.push(EpochLog {
            epoch,
            mean_loss,
            steps,
            samples: source.len(),
        });
    }

    let heads = params
        .iter()
        .enumerate()
        .map(|(i, p)| p.to_head(i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        heads,
        epochs: logs,
    })
}

/// Loads sample `idx`; with probability `mosaic_prob` it is tiled with three
/// more images drawn uniformly from the same category.
fn draw_sample(
    source: &dyn SampleSource,
    idx: usize,
    pools: &BTreeMap<String, Vec<usize>>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let first = source.load(idx, cfg.image_side)?;
    if cfg.mosaic_prob == 0.0 || rng.random::<f64>() >= cfg.mosaic_prob {
        return Ok(first);
    }
    let pool = &pools[source.category(idx)];
    let mut four = vec![first];
    for _ in 0..3 {
        let pick = pool[rng.random_range(0..pool.len())];
        four.push(source.load(pick, cfg.image_side)?);
    }
    let (pixels, mask) = mosaic_tile(&four, cfg.image_side)?;
    let label = four.iter().any(|s| s.label != 0) as u8;
    Ok(Sample {
        image: ImageTensor::new(pixels, four[0].image.category.clone())?,
        mask,
        label,
    })
}
