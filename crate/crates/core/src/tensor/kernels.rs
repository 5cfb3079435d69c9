//! Dense kernels shared by the tape ops: im2col/col2im and small helpers.

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayViewMut3};

/// Unfold a padded [Cin, H, W] map into columns [Cin*k*k, H*W] for a stride-1
/// same-padding convolution with odd kernel size `k`.
pub fn im2col(x: ArrayView3<f32>, k: usize) -> Array2<f32> {
    let (cin, h, w) = x.dim();
    let pad = k / 2;
    let mut cols = Array2::<f32>::zeros((cin * k * k, h * w));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_off = row * h * w;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    // ix = x + kx - pad must fall in [0, w)
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w + (x_lo + kx - pad);
                    let dst = row_off + y * w + x_lo;
                    let n = x_hi - x_lo;
                    cs[dst..dst + n].copy_from_slice(&xs[src..src + n]);
                }
            }
        }
    }
    cols
}

/// Fold column gradients [Cin*k*k, H*W] back into an input gradient
/// [Cin, H, W]; the exact adjoint of [`im2col`].
pub fn col2im(cols: ArrayView2<f32>, mut dx: ArrayViewMut3<f32>, k: usize) {
    let (cin, h, w) = dx.dim();
    let pad = k / 2;
    let cs = cols.as_slice().expect("contiguous cols");
    let xs = dx.as_slice_mut().expect("contiguous grad");
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_off = row * h * w;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w + (x_lo + kx - pad);
                    let src = row_off + y * w + x_lo;
                    for i in 0..(x_hi - x_lo) {
                        xs[dst + i] += cs[src + i];
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array2};

    #[test]
    fn im2col_center_tap_is_identity() {
        let x = Array3::from_shape_fn((2, 4, 5), |(c, y, xx)| (c * 20 + y * 5 + xx) as f32);
        let cols = im2col(x.view(), 3);
        // center tap of a 3x3 kernel is row index (c*3+1)*3+1
        for c in 0..2 {
            let row = (c * 3 + 1) * 3 + 1;
            for y in 0..4 {
                for xx in 0..5 {
                    assert_eq!(cols[[row, y * 5 + xx]], x[[c, y, xx]]);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish x and c.
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| ((c + 2 * y + 3 * xx) as f32).sin());
        let cols = im2col(x.view(), 3);
        let c = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 7 + j) as f32 * 0.1).cos());
        let lhs: f32 = (&cols * &c).sum();
        let mut dx = Array3::zeros((2, 4, 4));
        col2im(c.view(), dx.view_mut(), 3);
        let rhs: f32 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
