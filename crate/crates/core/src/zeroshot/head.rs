use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::backbone::{BackboneSpec, PatchFeatureGrid};
use crate::container::Container;
use crate::error::{shape, Error, Result};

/// Per-stage linear map from the encoder width `C_s` into the joint space `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// One-based stage index this head reads.
    pub stage: usize,
    /// `C_s × C`
    pub weight: Array2<f32>,
    /// length `C`
    pub bias: Array1<f32>,
}

impl ProjectionHead {
    pub fn new(stage: usize, weight: Array2<f32>, bias: Array1<f32>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(shape(format!(
                "head {stage}: weight is {:?} but bias has {} entries",
                weight.dim(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "head {stage} has non-finite entries"
            )));
        }
        Ok(Self {
            stage,
            weight,
            bias,
        })
    }

    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }
}

/// L2-normalizes every row in place; all-zero rows are left at zero.
pub(crate) fn normalize_rows(rows: &mut Array2<f64>) -> Array1<f64> {
    let norms = rows.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    for (mut row, n) in rows.rows_mut().into_iter().zip(norms.iter()) {
        if *n > 0.0 {
            row /= *n;
        }
    }
    norms
}

/// Affine map of every patch token, then row-wise L2 normalization.
/// Returns `(h·w) × C`.
pub fn project_stage_features(
    grid: &PatchFeatureGrid,
    head: &ProjectionHead,
) -> Result<Array2<f64>> {
    if grid.channels() != head.input_width() {
        return Err(shape(format!(
            "stage {} grid has {} channels but head {} expects {}",
            grid.stage,
            grid.channels(),
            head.stage,
            head.input_width()
        )));
    }
    let weight = head.weight.mapv(f64::from);
    let bias = head.bias.mapv(f64::from);
    let mut projected = grid.rows_f64().dot(&weight) + &bias;
    normalize_rows(&mut projected);
    Ok(projected)
}

fn weight_name(stage: usize) -> String {
    format!("head.stage{stage}.weight")
}

fn bias_name(stage: usize) -> String {
    format!("head.stage{stage}.bias")
}

pub fn save_heads(path: &Path, heads: &[ProjectionHead]) -> Result<()> {
    let mut c = Container::new()
        .with_metadata("kind", "projection-heads")
        .with_metadata("num_stages", heads.len().to_string());
    for h in heads {
        c.push(
            weight_name(h.stage),
            vec![h.input_width(), h.output_width()],
            h.weight.iter().copied().collect(),
        )?;
        c.push(bias_name(h.stage), vec![h.output_width()], h.bias.to_vec())?;
    }
    c.write(path)
}

/// Loads heads and checks them against `spec`: one head per stage with
/// `C_s × C` weights.
pub fn load_heads(path: &Path, spec: &BackboneSpec) -> Result<Vec<ProjectionHead>> {
    let c = Container::read(path)?;
    let stored = c
        .metadata
        .get("num_stages")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            offset: 13,
            message: "checkpoint header lacks num_stages".into(),
        })?;
    if stored != spec.num_stages() {
        return Err(shape(format!(
            "checkpoint holds {stored} stage heads, backbone has {} stages",
            spec.num_stages()
        )));
    }
    (1..=spec.num_stages())
        .map(|stage| {
            let w = c.require(&weight_name(stage))?;
            let b = c.require(&bias_name(stage))?;
            let want = [spec.internal_width, spec.joint_width];
            if w.shape != want || b.shape != [spec.joint_width] {
                return Err(shape(format!(
                    "stage {stage}: checkpoint weight {:?} / bias {:?}, backbone needs {want:?} / [{}]",
                    w.shape, b.shape, spec.joint_width
                )));
            }
            let weight = Array2::from_shape_vec((want[0], want[1]), w.data.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            ProjectionHead::new(stage, weight, Array1::from(b.data.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zeroshot::init_heads;
    use ndarray::{array, Array3};

    fn grid(rows: &[[f32; 2]]) -> PatchFeatureGrid {
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        PatchFeatureGrid::new(1, Array3::from_shape_vec((1, rows.len(), 2), data).unwrap()).unwrap()
    }

    #[test]
    fn identity_head_keeps_unit_rows() {
        let g = grid(&[[0.6, 0.8], [1.0, 0.0]]);
        let head = ProjectionHead::new(1, Array2::eye(2), Array1::zeros(2)).unwrap();
        let p = project_stage_features(&g, &head).unwrap();
        assert!((p[[0, 0]] - 0.6).abs() < 1e-7 && (p[[0, 1]] - 0.8).abs() < 1e-7);
        assert_eq!(p.row(1), array![1.0, 0.0].view());
    }

    #[test]
    fn zero_weight_maps_onto_bias_direction() {
        let g = grid(&[[0.3, -2.0], [5.0, 1.0]]);
        let head = ProjectionHead::new(1, Array2::zeros((2, 2)), array![0.0, 1.0]).unwrap();
        let p = project_stage_features(&g, &head).unwrap();
        for row in p.rows() {
            assert_eq!(row, array![0.0, 1.0].view());
        }
    }

    #[test]
    fn hand_multiplied_projection() {
        let g = grid(&[[1.0, 1.0]]);
        let head =
            ProjectionHead::new(1, array![[1.0, 0.0], [0.0, 2.0]], array![0.0, 1.0]).unwrap();
        let p = project_stage_features(&g, &head).unwrap();
        let n = 10f64.sqrt();
        assert!((p[[0, 0]] - 1.0 / n).abs() < 1e-12);
        assert!((p[[0, 1]] - 3.0 / n).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let g = grid(&[[1.0, 1.0]]);
        let head = ProjectionHead::new(1, Array2::zeros((3, 2)), Array1::zeros(2)).unwrap();
        assert!(matches!(
            project_stage_features(&g, &head),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heads.adkh");
        let spec = BackboneSpec::synthetic();
        let heads = init_heads(&spec, 0.01, 9);
        save_heads(&path, &heads).unwrap();
        let back = load_heads(&path, &spec).unwrap();
        for (a, b) in heads.iter().zip(&back) {
            assert_eq!(a.stage, b.stage);
            assert!(a
                .weight
                .iter()
                .zip(&b.weight)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a
                .bias
                .iter()
                .zip(&b.bias)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let mut one = spec.clone();
        one.stage_boundaries = vec![4];
        assert!(matches!(load_heads(&path, &one), Err(Error::Shape(_))));

        let mut wide = spec.clone();
        wide.joint_width += 1;
        assert!(matches!(load_heads(&path, &wide), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_checkpoint_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heads.adkh");
        let spec = BackboneSpec::synthetic();
        save_heads(&path, &init_heads(&spec, 0.01, 1)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_heads(&path, &spec), Err(Error::Parse { .. })));
    }
}
