//! Grid resampling: bilinear (half-pixel centres, no corner alignment) with its
//! adjoint for back-propagation, and nearest-neighbour for binary masks.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Per-output-index source taps along one axis.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    taps: Vec<(usize, usize, f64)>,
    input_len: usize,
}

impl AxisTaps {
    pub fn bilinear(input_len: usize, output_len: usize) -> Self {
        assert!(input_len > 0 && output_len > 0, "empty axis");
        let scale = input_len as f64 / output_len as f64;
        let taps = (0..output_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(input_len - 1);
                let hi = (lo + 1).min(input_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        Self { taps, input_len }
    }

    pub fn output_len(&self) -> usize {
        self.taps.len()
    }
}

/// Resamples `input` to `out_h × out_w`. At equal size every tap has zero
/// weight on its neighbour, so the input is reproduced exactly.
pub fn bilinear(input: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = input.dim();
    let rows = AxisTaps::bilinear(h, out_h);
    let cols = AxisTaps::bilinear(w, out_w);
    bilinear_with(input, &rows, &cols)
}

pub fn bilinear_with(input: ArrayView2<'_, f64>, rows: &AxisTaps, cols: &AxisTaps) -> Array2<f64> {
    let (h, w) = input.dim();
    debug_assert_eq!((h, w), (rows.input_len, cols.input_len));
    // separable: columns first into an h × out_w buffer
    let mut tmp = Array2::<f64>::zeros((h, cols.output_len()));
    for r in 0..h {
        for (c, &(lo, hi, t)) in cols.taps.iter().enumerate() {
            tmp[[r, c]] = input[[r, lo]] * (1.0 - t) + input[[r, hi]] * t;
        }
    }
    let mut out = Array2::<f64>::zeros((rows.output_len(), cols.output_len()));
    for (r, &(lo, hi, t)) in rows.taps.iter().enumerate() {
        for c in 0..cols.output_len() {
            out[[r, c]] = tmp[[lo, c]] * (1.0 - t) + tmp[[hi, c]] * t;
        }
    }
    out
}

/// Transpose of [`bilinear_with`]: maps a gradient on the output grid back
/// onto the input grid.
pub fn bilinear_adjoint(
    grad: ArrayView2<'_, f64>,
    rows: &AxisTaps,
    cols: &AxisTaps,
) -> Array2<f64> {
    let mut tmp = Array2::<f64>::zeros((rows.input_len, cols.output_len()));
    for (r, &(lo, hi, t)) in rows.taps.iter().enumerate() {
        for c in 0..cols.output_len() {
            let g = grad[[r, c]];
            tmp[[lo, c]] += g * (1.0 - t);
            tmp[[hi, c]] += g * t;
        }
    }
    let mut out = Array2::<f64>::zeros((rows.input_len, cols.input_len));
    for r in 0..rows.input_len {
        for (c, &(lo, hi, t)) in cols.taps.iter().enumerate() {
            let g = tmp[[r, c]];
            out[[r, lo]] += g * (1.0 - t);
            out[[r, hi]] += g * t;
        }
    }
    out
}

/// Bilinear resize of an `H × W × channels` image.
pub fn resize_image(input: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, ch) = input.dim();
    if (h, w) == (out_h, out_w) {
        return input.to_owned();
    }
    let rows = AxisTaps::bilinear(h, out_h);
    let cols = AxisTaps::bilinear(w, out_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, ch));
    for c in 0..ch {
        let plane = input.index_axis(ndarray::Axis(2), c).mapv(f64::from);
        let resized = bilinear_with(plane.view(), &rows, &cols);
        out.index_axis_mut(ndarray::Axis(2), c)
            .zip_mut_with(&resized, |o, v| *o = *v as f32);
    }
    out
}

/// Nearest-neighbour resize (`src = floor(dst · in / out)`); keeps masks binary.
pub fn nearest<T: Copy>(input: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = input.dim();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let sr = ((r * h) / out_h).min(h - 1);
        let sc = ((c * w) / out_w).min(w - 1);
        input[[sr, sc]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_size_is_exact_identity() {
        let a = array![[0.3, -1.0, 2.5], [4.0, 1e-9, 7.0]];
        assert_eq!(bilinear(a.view(), 2, 3), a);
    }

    #[test]
    fn upsample_two_by_two_to_four() {
        // half-pixel centres: output centre 0.5 maps to source -0.25 -> clamped 0
        let a = array![[0.0, 1.0], [2.0, 3.0]];
        let up = bilinear(a.view(), 4, 4);
        assert_eq!(up[[0, 0]], 0.0);
        assert!((up[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((up[[1, 1]] - 0.75).abs() < 1e-12);
        assert_eq!(up[[3, 3]], 3.0);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let x = Array2::from_shape_fn((3, 5), |(r, c)| ((r * 7 + c * 3) % 11) as f64 - 4.0);
        let y = Array2::from_shape_fn((7, 4), |(r, c)| ((r * 5 + c) % 13) as f64 * 0.1);
        let rows = AxisTaps::bilinear(3, 7);
        let cols = AxisTaps::bilinear(5, 4);
        let lhs = (bilinear_with(x.view(), &rows, &cols) * &y).sum();
        let rhs = (bilinear_adjoint(y.view(), &rows, &cols) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_keeps_values_binary() {
        let m = array![[0u8, 1], [1, 0]];
        let up = nearest(m.view(), 5, 3);
        assert!(up.iter().all(|v| *v <= 1));
        assert_eq!(up[[0, 0]], 0);
        assert_eq!(up[[4, 0]], 1);
    }
}
