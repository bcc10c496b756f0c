//! Few-shot scoring with per-stage memory banks of normal reference patch
//! tokens. The distance map adds, over stages, each test token's smallest
//! cosine distance to its stage's bank.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::backbone::{Backbone, Features, ImageTensor, PatchFeatureGrid};
use crate::container::Container;
use crate::error::{precondition, shape, Error, Result};
use crate::resample;
use crate::zeroshot::{AnomalyMap, MapResolution};

/// Bank entries are scanned in blocks of this many rows.
const SCAN_BLOCK: usize = 256;

/// Unit-norm reference tokens of one stage, `entries × C_s`, no deduplication.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub stage: usize,
    pub entries: Array2<f32>,
    pub source_count: usize,
}

impl MemoryBank {
    /// Stores every token of every grid, L2-normalized.
    pub fn from_grids(stage: usize, grids: &[&PatchFeatureGrid]) -> Result<Self> {
        let width = grids
            .first()
            .map(|g| g.channels())
            .ok_or_else(|| precondition("memory bank needs at least one reference"))?;
        let total: usize = grids.iter().map(|g| g.height() * g.width()).sum();
        let mut entries = Array2::<f32>::zeros((total, width));
        let mut at = 0;
        for g in grids {
            if g.channels() != width || g.stage != stage {
                return Err(shape(format!(
                    "reference grid stage {} width {} does not match bank stage {stage} width {width}",
                    g.stage,
                    g.channels()
                )));
            }
            for row in g.rows_f64().rows() {
                entries.row_mut(at).assign(&unit(row).mapv(|v| v as f32));
                at += 1;
            }
        }
        Ok(Self {
            stage,
            entries,
            source_count: grids.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.entries.ncols()
    }
}

/// Divides by the L2 norm, squares summed in index order.
fn unit(row: ArrayView1<'_, f64>) -> ndarray::Array1<f64> {
    let mut sq = 0.0;
    for v in row {
        sq += v * v;
    }
    let n = sq.sqrt();
    if n > 0.0 {
        &row / n
    } else {
        row.to_owned()
    }
}

/// One bank per stage from already-extracted reference features.
pub fn banks_from_features(references: &[Features]) -> Result<Vec<MemoryBank>> {
    let first = references
        .first()
        .ok_or_else(|| precondition("few-shot scoring needs at least one reference image"))?;
    (0..first.stages.len())
        .map(|s| {
            let grids: Vec<&PatchFeatureGrid> = references
                .iter()
                .map(|f| {
                    f.stages
                        .get(s)
                        .ok_or_else(|| shape("references differ in stage count"))
                })
                .collect::<Result<_>>()?;
            MemoryBank::from_grids(first.stages[s].stage, &grids)
        })
        .collect()
}

/// Extracts every reference with the frozen backbone and banks its tokens.
pub fn build_memory_banks(
    references: &[ImageTensor],
    backbone: &dyn Backbone,
) -> Result<Vec<MemoryBank>> {
    if references.is_empty() {
        return Err(precondition(
            "few-shot scoring needs at least one reference image",
        ));
    }
    let features = references
        .iter()
        .map(|img| backbone.extract(img))
        .collect::<Result<Vec<_>>>()?;
    banks_from_features(&features)
}

/// `min_f (1 - <x, f>)` for every token of `grid`, as an `h × w` map.
///
/// Test tokens are normalized in `f64`; each cosine accumulates over channels
/// in index order.
pub fn stage_distance_map(grid: &PatchFeatureGrid, bank: &MemoryBank) -> Result<Array2<f64>> {
    if bank.is_empty() {
        return Err(precondition(format!(
            "memory bank for stage {} is empty",
            bank.stage
        )));
    }
    if grid.stage != bank.stage || grid.channels() != bank.width() {
        return Err(shape(format!(
            "grid stage {} width {} vs bank stage {} width {}",
            grid.stage,
            grid.channels(),
            bank.stage,
            bank.width()
        )));
    }
    let mut tokens = grid.rows_f64();
    for mut row in tokens.rows_mut() {
        let u = unit(row.view());
        row.assign(&u);
    }
    let bank = bank.entries.mapv(f64::from);
    let mut best = vec![f64::INFINITY; tokens.nrows()];
    for block in bank.axis_chunks_iter(Axis(0), SCAN_BLOCK) {
        for (token, best) in tokens.rows().into_iter().zip(best.iter_mut()) {
            let x = token.as_slice().expect("standard layout");
            for entry in block.rows() {
                let f = entry.as_slice().expect("standard layout");
                let mut dot = 0.0;
                for k in 0..x.len() {
                    dot += x[k] * f[k];
                }
                let d = 1.0 - dot;
                if d < *best {
                    *best = d;
                }
            }
        }
    }
    Ok(Array2::from_shape_vec((grid.height(), grid.width()), best).expect("h·w tokens"))
}

/// Few-shot distance map: per-stage nearest-neighbour cosine distance,
/// resized to `out_side` and summed over stages. Values lie in `[0, 2·stages]`
/// up to rounding, clamped below at zero.
pub fn score_few_shot_map(
    grids: &[PatchFeatureGrid],
    banks: &[MemoryBank],
    out_side: usize,
) -> Result<AnomalyMap> {
    if grids.is_empty() || grids.len() != banks.len() {
        return Err(shape(format!(
            "{} stage grids but {} memory banks",
            grids.len(),
            banks.len()
        )));
    }
    let mut total = Array2::<f64>::zeros((out_side, out_side));
    for (grid, bank) in grids.iter().zip(banks) {
        let d = stage_distance_map(grid, bank)?;
        total += &resample::bilinear(d.view(), out_side, out_side);
    }
    // a token identical to a stored entry can land a few ulps below zero
    total.mapv_inplace(|v| v.max(0.0));
    AnomalyMap::new(total, MapResolution::Image)
}

/// Element-wise sum; with `normalize`, each map is min-max rescaled first.
pub fn fuse_maps(
    zero_shot: &AnomalyMap,
    few_shot: &AnomalyMap,
    normalize: bool,
) -> Result<AnomalyMap> {
    if zero_shot.dim() != few_shot.dim() {
        return Err(shape(format!(
            "cannot fuse maps of size {:?} and {:?}",
            zero_shot.dim(),
            few_shot.dim()
        )));
    }
    let grid = if normalize {
        zero_shot.min_max_normalized() + few_shot.min_max_normalized()
    } else {
        &zero_shot.grid + &few_shot.grid
    };
    AnomalyMap::new(grid, zero_shot.resolution)
}

/// Text score plus the maximum of the anomaly map.
pub fn classify_few_shot(text_score: f64, map: &AnomalyMap) -> f64 {
    text_score + map.max()
}

/// Which map's maximum feeds the few-shot image score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageScoreMap {
    #[default]
    Fused,
    FewShotOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotResult {
    pub map_f: AnomalyMap,
    pub fused_map: AnomalyMap,
    pub image_score: f64,
}

pub fn few_shot_result(
    grids: &[PatchFeatureGrid],
    banks: &[MemoryBank],
    zero_shot_map: &AnomalyMap,
    text_score: f64,
    normalize: bool,
    score_map: ImageScoreMap,
) -> Result<FewShotResult> {
    let (side, _) = zero_shot_map.dim();
    let map_f = score_few_shot_map(grids, banks, side)?;
    let fused_map = fuse_maps(zero_shot_map, &map_f, normalize)?;
    let image_score = match score_map {
        ImageScoreMap::Fused => classify_few_shot(text_score, &fused_map),
        ImageScoreMap::FewShotOnly => classify_few_shot(text_score, &map_f),
    };
    Ok(FewShotResult {
        map_f,
        fused_map,
        image_score,
    })
}

pub fn save_banks(path: &Path, banks: &[MemoryBank]) -> Result<()> {
    let source_count = banks.first().map_or(0, |b| b.source_count);
    let mut c = Container::new()
        .with_metadata("kind", "memory-banks")
        .with_metadata("num_stages", banks.len().to_string())
        .with_metadata("source_count", source_count.to_string());
    for b in banks {
        c.push(
            format!("bank.stage{}", b.stage),
            vec![b.len(), b.width()],
            b.entries.iter().copied().collect(),
        )?;
    }
    c.write(path)
}

pub fn load_banks(path: &Path) -> Result<Vec<MemoryBank>> {
    let c = Container::read(path)?;
    let meta = |key: &str| {
        c.metadata
            .get(key)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                offset: 13,
                message: format!("bank header lacks {key}"),
            })
    };
    let stages = meta("num_stages")?;
    let source_count = meta("source_count")?;
    (1..=stages)
        .map(|stage| {
            let t = c.require(&format!("bank.stage{stage}"))?;
            if t.shape.len() != 2 {
                return Err(shape(format!("bank.stage{stage} has shape {:?}", t.shape)));
            }
            let entries = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            Ok(MemoryBank {
                stage,
                entries,
                source_count,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneSpec, SyntheticBackbone};
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn image(salt: usize) -> ImageTensor {
        let px = Array3::from_shape_fn((64, 64, 3), |(r, c, k)| {
            ((r * 13 + c * 7 + k * 3 + salt) % 29) as f32 / 28.0
        });
        ImageTensor::new(px, "part").unwrap()
    }

    fn grid(stage: usize, h: usize, w: usize, data: Vec<f32>) -> PatchFeatureGrid {
        let c = data.len() / (h * w);
        PatchFeatureGrid::new(stage, Array3::from_shape_vec((h, w, c), data).unwrap()).unwrap()
    }

    #[test]
    fn bank_size_is_references_times_grid() {
        let backbone = SyntheticBackbone::new(BackboneSpec::synthetic(), 0).unwrap();
        let one = build_memory_banks(&[image(0)], &backbone).unwrap();
        assert_eq!(one.len(), 4);
        assert!(one.iter().all(|b| b.len() == 64 && b.source_count == 1));
        let four =
            build_memory_banks(&[image(0), image(1), image(2), image(3)], &backbone).unwrap();
        assert!(four.iter().all(|b| b.len() == 4 * 64));
        let dup = build_memory_banks(&[image(5), image(5)], &backbone).unwrap();
        assert_eq!(dup[0].len(), 128);
        assert_eq!(
            dup[0].entries.slice(ndarray::s![..64, ..]),
            dup[0].entries.slice(ndarray::s![64.., ..])
        );
        for row in dup[2].entries.rows() {
            let n: f64 = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(build_memory_banks(&[], &backbone).is_err());
    }

    #[test]
    fn self_bank_scores_zero() {
        let backbone = SyntheticBackbone::new(BackboneSpec::synthetic(), 4).unwrap();
        let img = image(9);
        let banks = build_memory_banks(std::slice::from_ref(&img), &backbone).unwrap();
        let f = backbone.extract(&img).unwrap();
        let m = score_few_shot_map(&f.stages, &banks, 64).unwrap();
        assert!(m.grid.iter().all(|v| *v <= 1e-5));
    }

    #[test]
    fn orthogonal_tokens_score_one_per_stage() {
        let grids: Vec<_> = (1..=4)
            .map(|s| grid(s, 1, 2, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]))
            .collect();
        let banks: Vec<_> = (1..=4)
            .map(|s| MemoryBank::from_grids(s, &[&grid(s, 1, 1, vec![0.0, 0.0, 3.0])]).unwrap())
            .collect();
        let m = score_few_shot_map(&grids, &banks, 2).unwrap();
        assert!(m.grid.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn stage_mismatch_rejected() {
        let g = grid(1, 1, 1, vec![1.0, 0.0]);
        let b = MemoryBank::from_grids(2, &[&grid(2, 1, 1, vec![1.0, 0.0])]).unwrap();
        assert!(score_few_shot_map(&[g], &[b], 1).is_err());
    }

    #[test]
    fn fusion_and_classification() {
        let a = AnomalyMap::new(array![[1.0, 0.0], [0.0, 1.0]], MapResolution::Image).unwrap();
        let b = AnomalyMap::new(array![[0.5, 0.5], [0.0, 0.0]], MapResolution::Image).unwrap();
        assert_eq!(
            fuse_maps(&a, &b, false).unwrap().grid,
            array![[1.5, 0.5], [0.0, 1.0]]
        );
        assert_eq!(
            fuse_maps(&a, &b, false).unwrap(),
            fuse_maps(&b, &a, false).unwrap()
        );
        let zero = AnomalyMap::new(Array2::zeros((2, 2)), MapResolution::Image).unwrap();
        assert_eq!(fuse_maps(&a, &zero, false).unwrap(), a);
        let small = AnomalyMap::zeros(3);
        assert!(fuse_maps(&a, &small, false).is_err());
        assert_eq!(classify_few_shot(0.5, &zero), 0.5);
        let m = AnomalyMap::new(array![[1.3, 0.2]], MapResolution::Image).unwrap();
        assert!((classify_few_shot(0.5, &m) - 1.8).abs() < 1e-15);
    }

    #[test]
    fn shared_shift_preserves_ranking() {
        let maps: Vec<AnomalyMap> = (0..6)
            .map(|i| {
                AnomalyMap::new(
                    array![[0.1 * i as f64, 0.05], [0.3, 0.0]],
                    MapResolution::Image,
                )
                .unwrap()
            })
            .collect();
        let texts = [0.9, 0.1, 0.4, 0.35, 0.8, 0.2];
        let score = |shift: f64| -> Vec<f64> {
            maps.iter()
                .zip(texts)
                .map(|(m, t)| {
                    let shifted =
                        AnomalyMap::new(m.grid.mapv(|v| v + shift), MapResolution::Image).unwrap();
                    classify_few_shot(t, &shifted)
                })
                .collect()
        };
        let rank = |s: Vec<f64>| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|a, b| s[*a].total_cmp(&s[*b]));
            idx
        };
        assert_ne!(score(0.0), score(2.0));
        assert_eq!(rank(score(0.0)), rank(score(2.0)));
    }

    #[test]
    fn bank_file_round_trip() {
        let backbone = SyntheticBackbone::new(BackboneSpec::synthetic(), 1).unwrap();
        let banks = build_memory_banks(&[image(1), image(2)], &backbone).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("banks.adkh");
        save_banks(&path, &banks).unwrap();
        assert_eq!(load_banks(&path).unwrap(), banks);
    }

    fn brute_force(grid: &PatchFeatureGrid, bank: &MemoryBank) -> Vec<f64> {
        let (h, w, c) = grid.grid.dim();
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let norm = (0..c)
                    .map(|k| (grid.grid[[i, j, k]] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                out.push(
                    bank.entries
                        .rows()
                        .into_iter()
                        .map(|e| {
                            1.0 - (0..c)
                                .map(|k| grid.grid[[i, j, k]] as f64 / norm * e[k] as f64)
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min),
                );
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn growth_never_increases_and_order_is_irrelevant(
            test in prop::collection::vec(-1.0f32..1.0, 16),
            bank in prop::collection::vec(-1.0f32..1.0, 20),
            extra in prop::collection::vec(-1.0f32..1.0, 4),
        ) {
            prop_assume!(test.chunks(4).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            prop_assume!(bank.chunks(4).chain(extra.chunks(4)).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let g = grid(1, 2, 2, test);
            let small = MemoryBank::from_grids(1, &[&grid(1, 1, 5, bank.clone())]).unwrap();
            let mut grown_data = bank.clone();
            grown_data.extend(&extra);
            let grown = MemoryBank::from_grids(1, &[&grid(1, 1, 6, grown_data)]).unwrap();
            let a = stage_distance_map(&g, &small).unwrap();
            let b = stage_distance_map(&g, &grown).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!(y <= x);
            }
            let mut reversed = small.clone();
            reversed.entries.invert_axis(Axis(0));
            prop_assert_eq!(stage_distance_map(&g, &reversed).unwrap(), a.clone());
            prop_assert!(a.iter().zip(brute_force(&g, &small)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
