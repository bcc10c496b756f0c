//! Zero-shot scoring: prompt-similarity image classification and anomaly
//! maps from per-stage projection heads, plus the head training loop.

mod head;
mod loss;
mod map;
mod train;

pub use head::{load_heads, project_stage_features, save_heads, ProjectionHead};
pub use loss::{dice_loss, dice_loss_grad, focal_loss, focal_loss_grad, PROB_EPS};
pub use map::{compute_anomaly_map, stage_probabilities, AnomalyMap, MapResolution};
pub use train::{
    init_heads, sample_loss_and_grad, train_heads, EpochLog, HeadParams, LossConfig, TrainConfig,
    TrainReport,
};

use crate::backbone::ClassEmbedding;
use crate::error::{precondition, shape, Result};
use crate::prompts::TextFeatureMatrix;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Softmax probabilities of the normal and abnormal prompt classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub normal_prob: f64,
    pub abnormal_prob: f64,
}

impl ScorePair {
    /// Two-way softmax of `(normal, abnormal)` logits.
    pub fn from_logits(normal: f64, abnormal: f64) -> Self {
        let m = normal.max(abnormal);
        let en = (normal - m).exp();
        let ea = (abnormal - m).exp();
        let z = en + ea;
        Self {
            normal_prob: en / z,
            abnormal_prob: ea / z,
        }
    }

    /// The image-level anomaly score.
    pub fn anomaly_score(&self) -> f64 {
        self.abnormal_prob
    }
}

/// Image anomaly probability from the cosine similarity of the class
/// embedding to both text rows, scaled by `1 / temperature`.
pub fn classify_zero_shot(
    class_embedding: &ClassEmbedding,
    text: &TextFeatureMatrix,
    temperature: f64,
) -> Result<ScorePair> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(precondition(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if class_embedding.dim() != text.dim() {
        return Err(shape(format!(
            "class embedding width {} != text width {}",
            class_embedding.dim(),
            text.dim()
        )));
    }
    let fc = class_embedding.as_array().mapv(f64::from);
    let ft = text.to_f64();
    let logits = ft.dot(&fc) / temperature;
    Ok(ScorePair::from_logits(logits[0], logits[1]))
}
