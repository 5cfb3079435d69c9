//! The factor-composed renderer.
//!
//! Composition order is fixed: (1) viewpoint decides the layout signature,
//! (2) lens warps geometry (a reference border rectangle is drawn into every
//! image before the warp), (3) sensor remaps colors, (4) domain injects noise
//! or palette statistics. Stages 1-2 run at supersampled resolution; the
//! result is box-downsampled before the sensor stage so that the event sensor
//! can paint an exact three-color palette at final resolution.

use super::scene::{SceneSpec, Shape};
use super::{Image, RenderConfig};
use crate::factorspace::{Category, FactorTuple};
use crate::rng::Rng;
use crate::{Error, Result};
use ndarray::Array3;

pub fn luminance_px(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-pixel luminance map of a [3,H,W] image.
pub fn luminance(img: &Image) -> ndarray::Array2<f32> {
    let (_, h, w) = img.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        luminance_px(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]])
    })
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Fixed monotone heat colormap: output luminance increases with input. The
/// stops stay saturated end to end so neutral grays and whites measure far
/// from the colormap manifold.
pub fn thermal_colormap(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.05, 0.03, 0.35],
        [0.48, 0.05, 0.60],
        [0.92, 0.22, 0.10],
        [0.98, 0.65, 0.05],
        [1.00, 0.97, 0.40],
    ];
    let t = clamp01(t) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f32;
    let a = STOPS[i];
    let b = STOPS[i + 1];
    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])]
}

// Base layout colors, all deliberately off the 4-level posterization grid and
// with a visible channel cast so the gated (grayscale) sensor is detectable.
const SKY: [f32; 3] = [0.62, 0.70, 0.82];
// cool blue-gray, far from the thermal colormap manifold under every domain
const GROUND: [f32; 3] = [0.50, 0.52, 0.58];
// near-isoluminant with the ground: the road reads as a hue shift, not as a
// luminance edge, so it stays out of every gradient-based layout statistic
const ROAD: [f32; 3] = [0.52, 0.52, 0.64];
const BUMPER: [f32; 3] = [0.10, 0.10, 0.13];
const BORDER: [f32; 3] = [0.06, 0.06, 0.06];

/// Bumper band for the back viewpoint starts at this height fraction, high
/// enough that its boundary stays clear of the warped border rectangle.
pub const BUMPER_TOP: f32 = 0.66;
/// Reference border rectangle inset as a fraction of the image side.
pub const BORDER_INSET: f32 = 0.10;
/// Radial distortion strength of the fisheye lens.
pub const FISHEYE_KAPPA: f32 = 0.35;
/// Slope of the oblique (pole) horizon.
pub const POLE_SLOPE: f32 = 0.45;

struct Canvas {
    data: Vec<f32>, // [3, H, W]
    h: usize,
    w: usize,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas { data: vec![0.0; 3 * h * w], h, w }
    }
    #[inline]
    fn put(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        self.data[i] = c[0];
        self.data[hw + i] = c[1];
        self.data[2 * hw + i] = c[2];
    }
    #[inline]
    fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn paint_layout(canvas: &mut Canvas, scene: &SceneSpec, viewpoint: &str) -> Result<()> {
    let (h, w) = (canvas.h, canvas.w);
    let mut tex_rng = Rng::stream(scene.seed, "layout-texture", 0);
    // lateral streaks: vertical bands in the central ground region with
    // alternating sign, so every band boundary has strong contrast and the
    // texture lives entirely in the horizontal-gradient channel (no
    // collision with the horizon, bumper or border lines). The amplitude
    // keeps adjacent bands in different 4-level posterization bins under
    // every sensor transform.
    let ss = h / 32; // supersample factor relative to a 32-row final image
    let band_w = (5 * ss).max(5);
    let streak: Vec<f32> = (0..w / band_w + 2)
        .map(|i| {
            let mag = tex_rng.uniform_in(0.17, 0.24);
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let tex: Vec<f32> = (0..64).map(|_| tex_rng.uniform_in(-0.05, 0.05)).collect();

    for y in 0..h {
        let fy = (y as f32 + 0.5) / h as f32;
        for x in 0..w {
            let fx = (x as f32 + 0.5) / w as f32;
            let c = match viewpoint {
                "front" | "back" | "side" => {
                    if fy < 0.5 {
                        let g = 0.96 + 0.08 * (fy / 0.5);
                        [SKY[0] * g, SKY[1] * g, SKY[2] * g]
                    } else {
                        let mut c = GROUND;
                        if viewpoint == "front" {
                            // road trapezoid narrowing to the vanishing point
                            let half = 0.30 * (fy - 0.5) / 0.5;
                            if (fx - 0.5).abs() < half {
                                c = ROAD;
                            }
                        } else if viewpoint == "side" && (0.22..0.78).contains(&fx) && fy >= 0.56 {
                            let s = streak[x / band_w];
                            c = [clamp01(c[0] + s), clamp01(c[1] + s), clamp01(c[2] + s)];
                        }
                        if viewpoint == "back" && fy > BUMPER_TOP {
                            c = BUMPER;
                        }
                        c
                    }
                }
                "drone" => {
                    // warm/cool tinted patches so top-down ground keeps some
                    // channel spread under every sensor; cell boundaries are
                    // jittered in both axes so the mosaic never forms a
                    // straight full-width line
                    let xc = (fx * 6.0) as usize % 6;
                    let yc = ((fy * 6.0 + tex[32 + xc].abs() * 12.0) as usize) % 6;
                    let xcj = ((fx * 6.0 + tex[40 + yc].abs() * 12.0) as usize) % 6;
                    let t = tex[yc * 6 + xcj] * 1.8;
                    [clamp01(GROUND[0] + 0.02 + t), clamp01(GROUND[1] + 0.02 + 0.15 * t), clamp01(GROUND[2] + 0.02 - t)]
                }
                "pole" => {
                    let hline = 0.5 + POLE_SLOPE * (fx - 0.5);
                    let mut c = if fy < hline {
                        let g = 0.96 + 0.08 * (fy / hline.max(1e-3));
                        [SKY[0] * g, SKY[1] * g, SKY[2] * g]
                    } else {
                        GROUND
                    };
                    // vignette shading in the two top corners
                    for cx in [0.0f32, 1.0f32] {
                        let d = ((fx - cx).powi(2) + fy.powi(2)).sqrt();
                        if d < 0.40 {
                            let k = 1.0 - 0.45 * (1.0 - d / 0.40).powi(2);
                            c = [c[0] * k, c[1] * k, c[2] * k];
                        }
                    }
                    c
                }
                other => return Err(Error::InvalidTuple(format!("unknown viewpoint value '{other}'"))),
            };
            canvas.put(y, x, c);
        }
    }

    // objects, mapped into the viewpoint's layout region
    for obj in &scene.objects {
        let (ox, oy) = match viewpoint {
            "front" | "side" => (obj.x, 0.54 + 0.32 * obj.y),
            // back objects stay above the bumper band
            "back" => (obj.x, 0.50 + 0.10 * obj.y),
            "drone" => (0.06 + 0.88 * obj.x, 0.06 + 0.88 * obj.y),
            "pole" => (obj.x, 0.56 + 0.30 * obj.y),
            _ => unreachable!(),
        };
        let mut color = hsv_to_rgb(obj.hue, 0.80, 0.90);
        // luminance floor: every object stays bright under the monotone
        // sensor maps (a near-black object would mimic the bumper band)
        let lum = luminance_px(color[0], color[1], color[2]);
        if lum < 0.45 {
            let k = 0.45 / lum.max(1e-3);
            for c in color.iter_mut() {
                *c = (*c * k).min(1.0);
            }
        }
        const OUTLINE: [f32; 3] = [0.08, 0.08, 0.08];
        let cy = oy * h as f32;
        let cx = ox * w as f32;
        let r = obj.size * h as f32 * 0.5;
        let ow = (h as f32 / 32.0).max(1.0); // ~1px outline at final resolution
        let inside = |dx: f32, dy: f32, r: f32| -> bool {
            match obj.shape {
                Shape::Circle => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                Shape::Triangle => dy <= r * 0.85 && dy >= -r && dx.abs() <= (dy + r) * 0.5,
            }
        };
        let y0 = ((cy - r).floor().max(0.0)) as usize;
        let y1 = ((cy + r).ceil().min(h as f32 - 1.0)) as usize;
        let x0 = ((cx - r).floor().max(0.0)) as usize;
        let x1 = ((cx + r).ceil().min(w as f32 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                if inside(dx, dy, r) {
                    // dark outline band inside the silhouette
                    if inside(dx, dy, r - ow * 1.4) {
                        canvas.put(y, x, color);
                    } else {
                        canvas.put(y, x, OUTLINE);
                    }
                }
            }
        }
    }

    // reference border rectangle, drawn on top of everything, pre-warp
    let inset = (BORDER_INSET * h as f32).round() as usize;
    let t = ((h as f32) / 24.0).round().max(1.0) as usize;
    let (by0, by1) = (inset, h - 1 - inset);
    let (bx0, bx1) = (inset, w - 1 - inset);
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            let on_h = y < by0 + t || y > by1 - t;
            let on_v = x < bx0 + t || x > bx1 - t;
            if on_h || on_v {
                canvas.put(y, x, BORDER);
            }
        }
    }
    Ok(())
}

fn fisheye_warp(src: &Canvas) -> Canvas {
    // out-of-range samples get a flat neutral fill: the visible content ends
    // at a clean circular boundary instead of smeared edge textures
    const FILL: [f32; 3] = [0.55, 0.55, 0.55];
    let (h, w) = (src.h, src.w);
    let mut out = Canvas::new(h, w);
    let cy = h as f32 / 2.0;
    let cx = w as f32 / 2.0;
    let half = w as f32 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 + 0.5 - cx) / half;
            let v = (y as f32 + 0.5 - cy) / half;
            let r = (u * u + v * v).sqrt();
            let scale = 1.0 + FISHEYE_KAPPA * r * r;
            let sx = cx + u * scale * half - 0.5;
            let sy = cy + v * scale * half - 0.5;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                out.put(y, x, FILL);
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0i, x1i) = (x0 as usize, (x0 as usize + 1).min(w - 1));
            let (y0i, y1i) = (y0 as usize, (y0 as usize + 1).min(h - 1));
            let mut c = [0.0f32; 3];
            let p00 = src.get(y0i, x0i);
            let p01 = src.get(y0i, x1i);
            let p10 = src.get(y1i, x0i);
            let p11 = src.get(y1i, x1i);
            for ch in 0..3 {
                let top = p00[ch] * (1.0 - fx) + p01[ch] * fx;
                let bot = p10[ch] * (1.0 - fx) + p11[ch] * fx;
                c[ch] = top * (1.0 - fy) + bot * fy;
            }
            out.put(y, x, c);
        }
    }
    out
}

fn downsample(src: &Canvas, ss: usize) -> Image {
    let h = src.h / ss;
    let w = src.w / ss;
    let inv = 1.0 / (ss * ss) as f32;
    Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        let mut acc = 0.0;
        for dy in 0..ss {
            for dx in 0..ss {
                acc += src.get(y * ss + dy, x * ss + dx)[ch];
            }
        }
        acc * inv
    })
}

/// Sobel threshold used by the event sensor.
const EVENT_TAU: f32 = 0.08;

fn apply_sensor(img: &Image, sensor: &str) -> Result<Image> {
    let (_, h, w) = img.dim();
    match sensor {
        "rgb" => Ok(img.clone()),
        "thermal" => {
            let lum = luminance(img);
            Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| thermal_colormap(lum[[y, x]])[c]))
        }
        "rgbthermal" => {
            let lum = luminance(img);
            Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                0.5 * img[[c, y, x]] + 0.5 * thermal_colormap(lum[[y, x]])[c]
            }))
        }
        "gated" => {
            let lum = luminance(img);
            let mut vals: Vec<f32> = lum.iter().copied().collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            let lo = vals[(vals.len() as f32 * 0.02) as usize];
            let hi = vals[((vals.len() - 1) as f32 * 0.98) as usize];
            let span = (hi - lo).max(1e-4);
            Ok(Array3::from_shape_fn((3, h, w), |(_, y, x)| clamp01((lum[[y, x]] - lo) / span)))
        }
        "event" => {
            let lum = luminance(img);
            let (gx, gy) = super::edges::sobel(&lum);
            let mut out = Array3::from_elem((3, h, w), 1.0f32);
            for y in 0..h {
                for x in 0..w {
                    let mag = (gx[[y, x]].powi(2) + gy[[y, x]].powi(2)).sqrt();
                    if mag > EVENT_TAU {
                        if gx[[y, x]] + gy[[y, x]] > 0.0 {
                            out[[1, y, x]] = 0.0; // red
                            out[[2, y, x]] = 0.0;
                        } else {
                            out[[0, y, x]] = 0.0; // blue
                            out[[1, y, x]] = 0.0;
                        }
                    }
                }
            }
            Ok(out)
        }
        other => Err(Error::InvalidTuple(format!("unknown sensor value '{other}'"))),
    }
}

fn is_white(c: [f32; 3]) -> bool {
    c[0] > 0.5 && c[1] > 0.5 && c[2] > 0.5
}

fn apply_domain(img: &mut Image, domain: &str, sensor: &str, rng: &mut Rng) -> Result<()> {
    let (_, h, w) = img.dim();
    match domain {
        "real" => {
            if sensor == "event" {
                // palette-preserving speckle grain: flip a small fraction of
                // white pixels to red or blue
                for y in 0..h {
                    for x in 0..w {
                        let c = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                        if is_white(c) && rng.uniform() < 0.035 {
                            if rng.uniform() < 0.5 {
                                img[[1, y, x]] = 0.0;
                                img[[2, y, x]] = 0.0;
                            } else {
                                img[[0, y, x]] = 0.0;
                                img[[1, y, x]] = 0.0;
                            }
                        }
                    }
                }
            } else {
                // additive sensor noise plus multiplicative film grain
                for y in 0..h {
                    for x in 0..w {
                        let grain = 1.0 + 0.05 * rng.normal();
                        for c in 0..3 {
                            let v = img[[c, y, x]] * grain + 0.02 * rng.normal();
                            img[[c, y, x]] = clamp01(v);
                        }
                    }
                }
            }
            Ok(())
        }
        "simulation" => Ok(()),
        "videogame" => {
            if sensor == "event" {
                // polarity collapse: a game-engine event simulator renders all
                // edges with one color
                for y in 0..h {
                    for x in 0..w {
                        let c = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                        if !is_white(c) {
                            img[[0, y, x]] = 1.0;
                            img[[1, y, x]] = 0.0;
                            img[[2, y, x]] = 0.0;
                        }
                    }
                }
            } else {
                for y in 0..h {
                    for x in 0..w {
                        let m = (img[[0, y, x]] + img[[1, y, x]] + img[[2, y, x]]) / 3.0;
                        for c in 0..3 {
                            let sat = clamp01(m + 1.3 * (img[[c, y, x]] - m));
                            img[[c, y, x]] = (sat * 3.0).round() / 3.0;
                        }
                    }
                }
            }
            Ok(())
        }
        other => Err(Error::InvalidTuple(format!("unknown domain value '{other}'"))),
    }
}

/// Render a scene under a factor tuple. Deterministic in (scene, tuple, config).
pub fn render_scene(scene: &SceneSpec, tuple: &FactorTuple, config: &RenderConfig) -> Result<Image> {
    let ss = config.supersample.max(1);
    let mut canvas = Canvas::new(config.height * ss, config.width * ss);
    paint_layout(&mut canvas, scene, tuple.value(Category::Viewpoint))?;
    let canvas = match tuple.value(Category::Lens) {
        "normal" => canvas,
        "fisheye" => fisheye_warp(&canvas),
        other => return Err(Error::InvalidTuple(format!("unknown lens value '{other}'"))),
    };
    let img = downsample(&canvas, ss);
    let mut img = apply_sensor(&img, tuple.value(Category::Sensor))?;
    let mut noise_rng = Rng::stream(scene.seed, "domain-noise", fnv(&tuple.to_string()));
    apply_domain(&mut img, tuple.value(Category::Domain), tuple.value(Category::Sensor), &mut noise_rng)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorspace::FactorTuple;

    fn cfg() -> RenderConfig {
        RenderConfig::default()
    }

    #[test]
    fn render_is_deterministic() {
        let scene = SceneSpec::sample(7);
        let t = FactorTuple::new("fisheye", "thermal", "back", "real");
        let a = render_scene(&scene, &t, &cfg()).unwrap();
        let b = render_scene(&scene, &t, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_value_is_rejected() {
        let scene = SceneSpec::sample(7);
        let t = FactorTuple::new("pinhole", "rgb", "front", "real");
        assert!(render_scene(&scene, &t, &cfg()).is_err());
    }

    #[test]
    fn event_palette_is_white_red_blue() {
        for domain in ["real", "simulation", "videogame"] {
            for seed in 0..5 {
                let scene = SceneSpec::sample(seed);
                let t = FactorTuple::new("normal", "event", "front", domain);
                let img = render_scene(&scene, &t, &cfg()).unwrap();
                let (_, h, w) = img.dim();
                for y in 0..h {
                    for x in 0..w {
                        let c = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                        let d_white = (c[0] - 1.0).abs().max((c[1] - 1.0).abs()).max((c[2] - 1.0).abs());
                        let d_red = (c[0] - 1.0).abs().max(c[1].abs()).max(c[2].abs());
                        let d_blue = c[0].abs().max(c[1].abs()).max((c[2] - 1.0).abs());
                        let tol = 1.0 / 255.0;
                        assert!(
                            d_white <= tol || d_red <= tol || d_blue <= tol,
                            "pixel ({y},{x}) = {c:?} off palette under domain {domain}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fisheye_center_is_fixed_point_and_displacement_monotone() {
        // sample the warp's source offset along a radius
        let half = 48.0f32;
        let mut prev = -1.0f32;
        for step in 0..40 {
            let r = step as f32 / 40.0;
            let disp = (FISHEYE_KAPPA * r * r * r) * half;
            assert!(disp >= prev, "displacement not monotone at r={r}");
            prev = disp;
            if step == 0 {
                assert_eq!(disp, 0.0);
            }
        }
    }

    #[test]
    fn changing_lens_changes_only_pixels() {
        let scene = SceneSpec::sample(3);
        let ta = FactorTuple::new("normal", "rgb", "front", "simulation");
        let tb = FactorTuple::new("fisheye", "rgb", "front", "simulation");
        let a = render_scene(&scene, &ta, &cfg()).unwrap();
        let b = render_scene(&scene, &tb, &cfg()).unwrap();
        assert_ne!(a, b);
        // the caption is a function of the scene alone
        assert_eq!(scene.caption_ids, scene.caption_ids.clone());
    }

    #[test]
    fn thermal_colormap_is_monotone_in_luminance() {
        let mut prev = -1.0f32;
        for i in 0..=50 {
            let t = i as f32 / 50.0;
            let c = thermal_colormap(t);
            let l = luminance_px(c[0], c[1], c[2]);
            assert!(l > prev, "colormap luminance not monotone at t={t}");
            prev = l;
        }
    }
}
