use ndarray::{Array2, ArrayView2};

use crate::error::{precondition, shape, Result};
use crate::zeroshot::AnomalyMap;
use crate::Mask;

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// 8-connected labeling of the non-zero pixels. Background is 0 and regions
/// are numbered from 1 in raster order of their first pixel.
pub fn label_components(mask: ArrayView2<'_, u8>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || labels[[r, c]] != 0 {
                continue;
            }
            count += 1;
            labels[[r, c]] = count;
            stack.push((r, c));
            while let Some((y, x)) = stack.pop() {
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// One operating point: predictions are `score ≥ threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Operating points for every unique score plus `+∞`, in descending
/// threshold order. `pro` is the mean per-region recall; `fpr` is pooled over
/// all normal pixels of all maps.
pub fn pro_curve(
    maps: &[ArrayView2<'_, f64>],
    masks: &[ArrayView2<'_, u8>],
) -> Result<Vec<ProPoint>> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(shape(format!(
            "{} maps and {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut sizes: Vec<usize> = vec![0];
    let mut pixels: Vec<(f64, u32)> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(shape(format!(
                "map {:?} vs mask {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        let (labels, n) = label_components(mask.view());
        let offset = sizes.len() as u32 - 1;
        sizes.resize(sizes.len() + n, 0);
        for (score, label) in map.iter().zip(labels.iter()) {
            if !score.is_finite() {
                return Err(precondition("anomaly maps must be finite"));
            }
            let id = if *label == 0 { 0 } else { label + offset };
            sizes[id as usize] += 1;
            pixels.push((*score, id));
        }
    }
    let regions = sizes.len() - 1;
    let normal = sizes[0];
    if regions == 0 {
        return Err(precondition("PRO needs at least one anomalous region"));
    }
    if normal == 0 {
        return Err(precondition("PRO needs at least one normal pixel"));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut hits = vec![0usize; sizes.len()];
    let mut full = 0usize;
    let mut partial = 0usize;
    let mut partial_sum = 0.0f64;
    let mut points = vec![ProPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        pro: 0.0,
    }];
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            let id = pixels[i].1 as usize;
            hits[id] += 1;
            if id != 0 {
                let size = sizes[id] as f64;
                if hits[id] > 1 {
                    partial_sum -= (hits[id] - 1) as f64 / size;
                    partial -= 1;
                }
                if hits[id] == sizes[id] {
                    full += 1;
                } else {
                    partial_sum += hits[id] as f64 / size;
                    partial += 1;
                }
                if partial == 0 {
                    partial_sum = 0.0;
                }
            }
            i += 1;
        }
        points.push(ProPoint {
            threshold: t,
            fpr: hits[0] as f64 / normal as f64,
            pro: (full as f64 + partial_sum) / regions as f64,
        });
    }
    Ok(points)
}

/// Area under the PRO-vs-FPR curve on `[0, fpr_limit]`, divided by
/// `fpr_limit`. Between operating points the curve holds the PRO of the last
/// point reached, so a perfect map scores exactly 1 and a constant map 0.
pub fn pro(maps: &[AnomalyMap], masks: &[Mask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(precondition(format!(
            "fpr_limit must lie in (0, 1], got {fpr_limit}"
        )));
    }
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    let mask_views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    let points = pro_curve(&views, &mask_views)?;
    Ok(integrate_steps(&points, fpr_limit) / fpr_limit)
}

fn integrate_steps(points: &[ProPoint], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.fpr >= limit {
            break;
        }
        area += a.pro * (b.fpr.min(limit) - a.fpr);
    }
    // the lowest threshold predicts everything, so the curve reaches fpr = 1
    if let Some(last) = points.last() {
        if last.fpr < limit {
            area += last.pro * (limit - last.fpr);
        }
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zeroshot::MapResolution;
    use ndarray::array;

    fn amap(g: Array2<f64>) -> AnomalyMap {
        AnomalyMap::new(g, MapResolution::Image).unwrap()
    }

    #[test]
    fn eight_connectivity() {
        let m = array![[1u8, 0, 0, 1], [0, 1, 0, 1], [0, 0, 0, 0], [1, 1, 0, 0]];
        let (labels, n) = label_components(m.view());
        assert_eq!(n, 3);
        assert_eq!(labels[[0, 0]], labels[[1, 1]]);
        assert_eq!(labels[[0, 3]], labels[[1, 3]]);
        assert_eq!(labels[[3, 0]], 3);
    }

    #[test]
    fn perfect_and_blank_maps() {
        let mask = array![[0u8, 1, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [1, 0, 0, 1]];
        let perfect = amap(mask.mapv(f64::from));
        assert_eq!(
            pro(&[perfect], std::slice::from_ref(&mask), 0.3).unwrap(),
            1.0
        );
        let blank = amap(Array2::zeros((4, 4)));
        assert_eq!(
            pro(&[blank], std::slice::from_ref(&mask), 0.3).unwrap(),
            0.0
        );
        let ten = Array2::from_shape_fn((5, 5), |(r, c)| u8::from(r < 2 && c < 5));
        assert_eq!(pro(&[amap(ten.mapv(f64::from))], &[ten], 0.3).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let blank = amap(Array2::zeros((2, 2)));
        assert!(pro(std::slice::from_ref(&blank), &[Array2::zeros((2, 2))], 0.3).is_err());
        assert!(pro(std::slice::from_ref(&blank), &[Array2::ones((2, 2))], 0.3).is_err());
        assert!(pro(std::slice::from_ref(&blank), &[Array2::zeros((3, 3))], 0.3).is_err());
        assert!(pro(&[blank], &[array![[1u8, 0], [0, 0]]], 0.0).is_err());
    }

    #[test]
    fn partial_overlap() {
        // one region of 2 pixels, 2 normal pixels
        let mask = array![[1u8, 1], [0, 0]];
        let map = amap(array![[0.9, 0.1], [0.5, 0.0]]);
        // points: (0, 0), (0, 0.5) at 0.9, (0.5, 0.5) at 0.5, (0.5, 1) at 0.1, (1, 1) at 0
        let points = pro_curve(&[map.view()], &[mask.view()]).unwrap();
        assert_eq!(points.len(), 5);
        assert_eq!(
            pro(std::slice::from_ref(&map), std::slice::from_ref(&mask), 0.3).unwrap(),
            0.5
        );
        assert_eq!(pro(&[map], &[mask], 1.0).unwrap(), 0.75);
    }
}
