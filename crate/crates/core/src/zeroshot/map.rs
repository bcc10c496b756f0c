use ndarray::{Array2, ArrayView2, Zip};

use super::head::{project_stage_features, ProjectionHead};
use super::ScorePair;
use crate::backbone::PatchFeatureGrid;
use crate::error::{precondition, shape, Result};
use crate::prompts::TextFeatureMatrix;
use crate::resample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapResolution {
    PatchGrid,
    Image,
}

/// Non-negative per-pixel anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub grid: Array2<f64>,
    pub resolution: MapResolution,
}

impl AnomalyMap {
    pub fn new(grid: Array2<f64>, resolution: MapResolution) -> Result<Self> {
        if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(precondition(
                "anomaly map values must be finite and non-negative",
            ));
        }
        Ok(Self { grid, resolution })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            grid: Array2::zeros((side, side)),
            resolution: MapResolution::Image,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.grid.view()
    }

    /// Min-max rescaled copy in `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> Array2<f64> {
        let lo = self.grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.max();
        let range = hi - lo;
        if range > 0.0 {
            self.grid.mapv(|v| (v - lo) / range)
        } else {
            Array2::zeros(self.grid.dim())
        }
    }
}

/// Per-pixel `(normal, abnormal)` softmax of the projected tokens against the
/// text rows; `(h·w) × 2`, each row summing to one.
pub fn stage_probabilities(
    grid: &PatchFeatureGrid,
    head: &ProjectionHead,
    text: &TextFeatureMatrix,
    temperature: f64,
) -> Result<Array2<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(precondition(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if head.output_width() != text.dim() {
        return Err(shape(format!(
            "head {} projects to width {} but text features have width {}",
            head.stage,
            head.output_width(),
            text.dim()
        )));
    }
    let projected = project_stage_features(grid, head)?;
    let logits = projected.dot(&text.to_f64().t()) / temperature;
    let mut probs = Array2::<f64>::zeros((logits.nrows(), 2));
    Zip::from(probs.rows_mut())
        .and(logits.rows())
        .for_each(|mut p, l| {
            let s = ScorePair::from_logits(l[0], l[1]);
            p[0] = s.normal_prob;
            p[1] = s.abnormal_prob;
        });
    Ok(probs)
}

/// Sum over stages of the abnormal-probability map, each stage bilinearly
/// resized to `out_side × out_side` first. Values lie in `[0, stages]`.
pub fn compute_anomaly_map(
    grids: &[PatchFeatureGrid],
    heads: &[ProjectionHead],
    text: &TextFeatureMatrix,
    temperature: f64,
    out_side: usize,
) -> Result<AnomalyMap> {
    if grids.is_empty() {
        return Err(precondition("no stage features to score"));
    }
    if grids.len() != heads.len() {
        return Err(shape(format!(
            "{} stage grids but {} heads",
            grids.len(),
            heads.len()
        )));
    }
    let mut total = Array2::<f64>::zeros((out_side, out_side));
    for (grid, head) in grids.iter().zip(heads) {
        if grid.stage != head.stage {
            return Err(shape(format!(
                "stage order mismatch: grid {} paired with head {}",
                grid.stage, head.stage
            )));
        }
        let probs = stage_probabilities(grid, head, text, temperature)?;
        let abnormal = probs
            .column(1)
            .to_owned()
            .into_shape_with_order((grid.height(), grid.width()))
            .expect("row count equals h·w");
        total += &resample::bilinear(abnormal.view(), out_side, out_side);
    }
    AnomalyMap::new(total, MapResolution::Image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array3};

    fn text() -> TextFeatureMatrix {
        TextFeatureMatrix::from_rows(array![1.0, 0.0, 0.0].view(), array![0.0, 1.0, 0.0].view())
            .unwrap()
    }

    fn identity_heads(n: usize) -> Vec<ProjectionHead> {
        (1..=n)
            .map(|s| ProjectionHead::new(s, Array2::eye(3), Array1::zeros(3)).unwrap())
            .collect()
    }

    /// Unit tokens with the given cosines to the (normal, abnormal) rows.
    fn grid_with_cosines(stage: usize, side: usize, cos: &[(f64, f64)]) -> PatchFeatureGrid {
        let data: Vec<f32> = cos
            .iter()
            .flat_map(|(n, a)| [*n as f32, *a as f32, (1.0 - n * n - a * a).sqrt() as f32])
            .collect();
        PatchFeatureGrid::new(
            stage,
            Array3::from_shape_vec((side, side, 3), data).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn equidistant_tokens_give_half_per_stage() {
        let grids: Vec<_> = (1..=4)
            .map(|s| grid_with_cosines(s, 2, &[(0.0, 0.0); 4]))
            .collect();
        let m = compute_anomaly_map(&grids, &identity_heads(4), &text(), 0.01, 6).unwrap();
        assert_eq!(m.dim(), (6, 6));
        assert!(m.grid.iter().all(|v| (*v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn tokens_on_abnormal_direction_saturate() {
        let g = grid_with_cosines(1, 2, &[(0.0, 1.0); 4]);
        let m = compute_anomaly_map(&[g], &identity_heads(1), &text(), 1e-4, 2).unwrap();
        assert!(m.grid.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn native_resolution_matches_scalar_softmax() {
        let cos = [(0.0, 0.5), (0.5, 0.0), (0.3, 0.3), (0.1, 0.4)];
        let g = grid_with_cosines(1, 2, &cos);
        let m = compute_anomaly_map(&[g], &identity_heads(1), &text(), 0.1, 2).unwrap();
        // e^{a/τ} / (e^{n/τ} + e^{a/τ}) with τ = 0.1
        let expected = [
            1.0 / (1.0 + (-5.0f64).exp()),
            1.0 / (1.0 + 5.0f64.exp()),
            0.5,
            1.0 / (1.0 + (-3.0f64).exp()),
        ];
        for (v, e) in m.grid.iter().zip(expected) {
            assert!((v - e).abs() < 1e-6, "{v} vs {e}");
        }
    }

    #[test]
    fn stage_channels_sum_to_one() {
        let cos = [(0.9, -0.1), (-0.7, 0.7), (0.2, 0.25), (0.0, 0.0)];
        let g = grid_with_cosines(1, 2, &cos);
        let p = stage_probabilities(&g, &identity_heads(1)[0], &text(), 0.001).unwrap();
        for row in p.rows() {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&row[1]));
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        assert!(compute_anomaly_map(&[], &[], &text(), 0.01, 4).is_err());
        let g = grid_with_cosines(2, 2, &[(0.0, 0.0); 4]);
        assert!(compute_anomaly_map(&[g], &identity_heads(1), &text(), 0.01, 4).is_err());
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let cos = [(0.1, 0.2), (0.5, -0.2), (-0.3, 0.6), (0.0, 0.9)];
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| cos[i]).collect();
        let a = compute_anomaly_map(
            &[grid_with_cosines(1, 2, &cos)],
            &identity_heads(1),
            &text(),
            0.05,
            2,
        )
        .unwrap();
        let b = compute_anomaly_map(
            &[grid_with_cosines(1, 2, &permuted)],
            &identity_heads(1),
            &text(),
            0.05,
            2,
        )
        .unwrap();
        let fa: Vec<f64> = a.grid.iter().copied().collect();
        let fb: Vec<f64> = b.grid.iter().copied().collect();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(fb[k], fa[i]);
        }
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let m = AnomalyMap::new(Array2::from_elem((3, 3), 0.7), MapResolution::Image).unwrap();
        assert!(m.min_max_normalized().iter().all(|v| *v == 0.0));
        assert!(AnomalyMap::new(array![[-1.0]], MapResolution::Image).is_err());
    }
}
