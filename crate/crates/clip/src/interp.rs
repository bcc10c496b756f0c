//! Bicubic resampling of position-embedding grids with half-pixel centers
//! and clamped borders (the `align_corners = false` convention).

const A: f32 = -0.75;

fn cubic_weights(t: f32) -> [f32; 4] {
    let near = |x: f32| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f32| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

fn taps(input: usize, output: usize) -> Vec<([usize; 4], [f32; 4])> {
    let scale = input as f32 / output as f32;
    (0..output)
        .map(|o| {
            let src = (o as f32 + 0.5) * scale - 0.5;
            let base = src.floor();
            let w = cubic_weights(src - base);
            let idx = [-1, 0, 1, 2].map(|d| (base as i64 + d).clamp(0, input as i64 - 1) as usize);
            (idx, w)
        })
        .collect()
}

/// Resizes a row-major `h × w × c` grid to `oh × ow × c`.
pub fn bicubic(data: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(data.len(), h * w * c, "grid size");
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    // columns first, then rows
    let mut wide = vec![0f32; h * ow * c];
    for r in 0..h {
        for (o, (idx, wt)) in tx.iter().enumerate() {
            let dst = &mut wide[(r * ow + o) * c..][..c];
            for (i, wv) in idx.iter().zip(wt) {
                let src = &data[(r * w + i) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    let mut out = vec![0f32; oh * ow * c];
    for (o, (idx, wt)) in ty.iter().enumerate() {
        for col in 0..ow {
            let dst = &mut out[(o * ow + col) * c..][..c];
            for (i, wv) in idx.iter().zip(wt) {
                let src = &wide[(i * ow + col) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for t in [0.0, 0.25, 0.5, 0.9] {
            let s: f32 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f32> = (0..3 * 4 * 2).map(|v| v as f32 * 0.3 - 1.0).collect();
        let out = bicubic(&data, 3, 4, 2, 3, 4);
        for (a, b) in data.iter().zip(&out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_grid_stays_constant() {
        let out = bicubic(&[2.5; 16], 4, 4, 1, 7, 5);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-5));
    }
}
