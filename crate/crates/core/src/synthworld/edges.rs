//! Edge maps: Sobel gradient magnitude thresholded at the 90th percentile.

use super::render::luminance;
use super::Image;
use ndarray::Array2;

/// Binary edge map, same spatial size as its source image.
pub type EdgeMap = Array2<f32>;

/// Sobel gradients of a luminance map with clamp-to-edge borders, normalized
/// so a unit step produces magnitude ~1.
pub fn sobel(lum: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = lum.dim();
    let at = |y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        lum[[yy, xx]]
    };
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1) + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let sy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            gx[[y as usize, x as usize]] = sx * 0.25;
            gy[[y as usize, x as usize]] = sy * 0.25;
        }
    }
    (gx, gy)
}

/// Sobel gradients of an image's luminance.
pub fn sobel_luminance(img: &Image) -> (Array2<f32>, Array2<f32>) {
    sobel(&luminance(img))
}

/// Binary edge map: Sobel magnitude strictly above the 90th percentile of the
/// per-image magnitudes. A constant image yields an all-zero map.
pub fn extract_edges(img: &Image) -> EdgeMap {
    let (gx, gy) = sobel_luminance(img);
    let (h, w) = gx.dim();
    let mut mags: Vec<f32> = Vec::with_capacity(h * w);
    let mut mag = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let m = (gx[[y, x]].powi(2) + gy[[y, x]].powi(2)).sqrt();
            mag[[y, x]] = m;
            mags.push(m);
        }
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let p90 = mags[((mags.len() - 1) as f32 * 0.90) as usize];
    let thresh = p90.max(1e-6);
    mag.mapv(|m| if m > thresh { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorspace::FactorTuple;
    use crate::synthworld::{render_scene, RenderConfig, SceneObject, SceneSpec, Shape};
    use ndarray::Array3;

    #[test]
    fn constant_image_has_zero_edges() {
        let img = Array3::from_elem((3, 32, 32), 0.5);
        let e = extract_edges(&img);
        assert_eq!(e.sum(), 0.0);
    }

    #[test]
    fn edges_are_deterministic() {
        let scene = SceneSpec::sample(11);
        let t = FactorTuple::new("normal", "rgb", "front", "real");
        let img = render_scene(&scene, &t, &RenderConfig::default()).unwrap();
        assert_eq!(extract_edges(&img), extract_edges(&img));
    }

    #[test]
    fn edges_land_on_known_perimeters() {
        // one square, clean domain, no horizon layout, no warp
        let scene = SceneSpec::new(
            5,
            vec![SceneObject { shape: Shape::Square, x: 0.5, y: 0.5, size: 0.20, hue: 0.6 }],
        )
        .unwrap();
        let cfg = RenderConfig::default();
        let t = FactorTuple::new("normal", "rgb", "drone", "simulation");
        let img = render_scene(&scene, &t, &cfg).unwrap();
        let e = extract_edges(&img);
        let (h, w) = e.dim();

        // rasterize the square perimeter and the border rectangle as 1px lines
        let mut expected = ndarray::Array2::<f32>::zeros((h, w));
        let cx = (0.06 + 0.88 * 0.5) * w as f32;
        let cy = (0.06 + 0.88 * 0.5) * h as f32;
        let r = 0.20 * h as f32 * 0.5 * 0.85;
        let mut mark = |y: f32, x: f32, exp: &mut ndarray::Array2<f32>| {
            let yy = (y.round() as i32).clamp(0, h as i32 - 1) as usize;
            let xx = (x.round() as i32).clamp(0, w as i32 - 1) as usize;
            exp[[yy, xx]] = 1.0;
        };
        let steps = 400;
        for i in 0..steps {
            let f = i as f32 / steps as f32 * 4.0;
            let (py, px) = match f as usize {
                0 => (cy - r, cx - r + 2.0 * r * f.fract()),
                1 => (cy - r + 2.0 * r * f.fract(), cx + r),
                2 => (cy + r, cx + r - 2.0 * r * f.fract()),
                _ => (cy + r - 2.0 * r * f.fract(), cx - r),
            };
            mark(py, px, &mut expected);
        }
        let inset = 0.10 * h as f32;
        for i in 0..steps {
            let f = i as f32 / steps as f32;
            let span = h as f32 - 2.0 * inset;
            mark(inset, inset + span * f, &mut expected);
            mark(h as f32 - inset, inset + span * f, &mut expected);
            mark(inset + span * f, inset, &mut expected);
            mark(inset + span * f, w as f32 - inset, &mut expected);
        }

        // IoU with 1px alignment tolerance on the intersection
        let near = |m: &ndarray::Array2<f32>, y: usize, x: usize| -> bool {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    if m[[yy, xx]] > 0.5 {
                        return true;
                    }
                }
            }
            false
        };
        let mut inter = 0.0f64;
        let mut n_edges = 0.0f64;
        let mut n_expected = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                if e[[y, x]] > 0.5 {
                    n_edges += 1.0;
                    if near(&expected, y, x) {
                        inter += 1.0;
                    }
                }
                if expected[[y, x]] > 0.5 {
                    n_expected += 1.0;
                }
            }
        }
        let iou = inter / (n_edges + n_expected - inter);
        assert!(iou >= 0.5, "edge IoU with rasterized perimeters = {iou}");
    }
}
