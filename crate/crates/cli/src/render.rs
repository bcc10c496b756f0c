//! Display-only renderings of anomaly maps. Nothing here feeds a metric.

use adkit_core::zeroshot::AnomalyMap;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)].map(|c| (c * 255.0).round() as u8)
}

/// Per-image min-max normalized map in jet colours.
pub fn heatmap(map: &AnomalyMap) -> RgbImage {
    let norm = map.min_max_normalized();
    let (h, w) = norm.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(jet(norm[[y as usize, x as usize]]))
    })
}

/// Blends the normalized map over the original image at its full size. The
/// map covers the centered square the model saw (shorter side resized to
/// the map side, then center-cropped); pixels outside it stay untouched.
pub fn overlay(original: &Array3<f32>, map: &AnomalyMap, alpha: f64) -> RgbImage {
    let norm: Array2<f64> = map.min_max_normalized();
    let (side, _) = norm.dim();
    let (h, w, _) = original.dim();
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
    let (top, left) = ((rh - side) / 2, (rw - side) / 2);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = [0, 1, 2].map(|k| original[[y as usize, x as usize, k]] as f64 * 255.0);
        let ry = ((y as f64 + 0.5) * rh as f64 / h as f64) as usize;
        let rx = ((x as f64 + 0.5) * rw as f64 / w as f64) as usize;
        let inside = ry >= top && ry < top + side && rx >= left && rx < left + side;
        let px = if inside {
            let heat = jet(norm[[ry - top, rx - left]]);
            [0, 1, 2].map(|k| {
                ((1.0 - alpha) * base[k] + alpha * heat[k] as f64)
                    .round()
                    .clamp(0.0, 255.0) as u8
            })
        } else {
            base.map(|v| v.round().clamp(0.0, 255.0) as u8)
        };
        Rgb(px)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use adkit_core::zeroshot::MapResolution;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    #[test]
    fn constant_map_gives_uniform_overlay() {
        let map = AnomalyMap::new(Array2::from_elem((8, 8), 0.7), MapResolution::Image).unwrap();
        let square = overlay(&Array3::from_elem((12, 12, 3), 0.5f32), &map, 0.5);
        let first = *square.get_pixel(0, 0);
        assert!(square.pixels().all(|p| *p == first));
        assert!(heatmap(&map).pixels().all(|p| *p == Rgb(jet(0.0))));
    }

    #[test]
    fn overlay_keeps_original_size_and_tints_only_the_crop() {
        let map = AnomalyMap::new(Array2::from_elem((6, 6), 0.0), MapResolution::Image).unwrap();
        let img = Array3::from_elem((12, 24, 3), 0.5f32);
        let out = overlay(&img, &map, 0.5);
        assert_eq!(out.dimensions(), (24, 12));
        // the crop spans columns 6..18 of the 24-wide image
        let plain = Rgb([128, 128, 128]);
        let tinted = Rgb([64, 64, 128]);
        for x in 0..24 {
            let want = if (6..18).contains(&x) { tinted } else { plain };
            assert_eq!(*out.get_pixel(x, 0), want, "column {x}");
            assert_eq!(*out.get_pixel(x, 11), want, "column {x}");
        }
    }
}
