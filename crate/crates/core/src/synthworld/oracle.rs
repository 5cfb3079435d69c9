//! Heuristic oracle detectors: recover the factor tuple from pixels alone.
//!
//! These detectors are deliberately independent of both the renderer's
//! internals and the learned pipeline; acceptance tests use them to
//! cross-check generated images. Each category reports a confidence flag that
//! goes false inside the dead zone of its test statistic.
//!
//! The geometric detectors lean on two exact properties of the world: a
//! radial warp about the center maps any line through the center onto itself
//! (so the horizon's slope survives the fisheye), and the reference border
//! rectangle appears at inset 0.10 of the side for a straight lens versus
//! ~0.163 after the warp. Line searches use per-column peaks combined with
//! Theil-Sen fits or medians, which tolerate scene objects crossing the
//! scan bands.

use super::edges::sobel;
use super::render::{luminance, thermal_colormap};
use super::Image;
use crate::factorspace::FactorTuple;
use ndarray::Array2;

/// Oracle estimate with per-category confidence flags ordered
/// (lens, sensor, viewpoint, domain).
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub tuple: FactorTuple,
    pub confident: [bool; 4],
}

// Lens: measured border inset as a fraction of the image side.
const LENS_NORMAL_MAX: f32 = 0.125;
const LENS_FISHEYE_MIN: f32 = 0.142;
const LENS_MIN_PEAK: f32 = 0.05;

// Viewpoint.
const VIEW_SLOPE_POLE: f32 = 0.15;
const VIEW_HORIZON_MAG: f32 = 0.055;
const VIEW_RESID_MAX: f32 = 1.6; // pixels at 32x32, scaled by h/32
const VIEW_LINE_TAU: f32 = 0.035; // full-width line strength
const VIEW_STREAK_PERIOD: f32 = 0.42; // shift-overlap periodicity score
const VIEW_BACK_DARK: f32 = 0.35; // lower-strip mean luminance split

// Sensor.
const SENSOR_EVENT_FRAC: f32 = 0.995;
const SENSOR_COLORFUL_RANGE: f32 = 0.15;
const SENSOR_GRAY_FRAC: f32 = 0.02;
const SENSOR_THERMAL_TAU: f32 = 0.13;
const SENSOR_RGBTHERMAL_TAU: f32 = 0.42;

// Domain.
const DOMAIN_POSTER_FRAC: f32 = 0.70;
const DOMAIN_NOISE_REAL: f32 = 0.0085;
const DOMAIN_NOISE_SIM: f32 = 0.0050;
const DOMAIN_SPECKLE_TAU: f32 = 0.0045;
const DOMAIN_RED_FRAC: f32 = 0.92;

struct Stats {
    lum: Array2<f32>,
    gx: Array2<f32>,
    gy: Array2<f32>,
    /// Gradients of the box3-smoothed luminance: stripe-scale structure
    /// survives, pixel noise and speckle mostly do not.
    gxs: Array2<f32>,
    h: usize,
    w: usize,
    /// Median per-pixel |dy| over the quiet sky band (raw and smoothed):
    /// the per-image noise floors the detectors scale against.
    noise_raw: f32,
    noise_smooth: f32,
}

impl Stats {
    fn new(img: &Image) -> Self {
        let lum = luminance(img);
        let (gx, gy) = sobel(&lum);
        let (h, w) = lum.dim();
        let mut smooth = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                        let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                        acc += lum[[yy, xx]];
                    }
                }
                smooth[[y, x]] = acc / 9.0;
            }
        }
        let (gxs, gys) = sobel(&smooth);
        let q0 = (0.26 * h as f32) as usize;
        let q1 = (0.42 * h as f32) as usize;
        let x0 = (0.15 * w as f32) as usize;
        let x1 = (0.85 * w as f32) as usize;
        let mut raw: Vec<f32> = Vec::with_capacity((q1 - q0) * (x1 - x0));
        let mut sm: Vec<f32> = Vec::with_capacity((q1 - q0) * (x1 - x0));
        for y in q0..q1 {
            for x in x0..x1 {
                raw.push(gy[[y, x]].abs());
                sm.push(gys[[y, x]].abs());
            }
        }
        let noise_raw = median(&mut raw);
        let noise_smooth = median(&mut sm);
        Stats { lum, gx, gy, gxs, h, w, noise_raw, noise_smooth }
    }

    fn lum_std(&self) -> f32 {
        let n = (self.h * self.w) as f64;
        let mean = self.lum.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.lum.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() as f32
    }
}

fn median(values: &mut [f32]) -> f32 {
    if values.is_empty() {
        return f32::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    values[values.len() / 2]
}

/// Midpoint of the gap-bridged support around the argmax of a 1-d profile:
/// from the peak, extend in both directions over values >= 40% of the peak,
/// bridging interior gaps of up to `gap` samples. A single line yields its
/// center; the event sensor's double line (one colored line on each side of
/// the source line) yields the pair midpoint, i.e. again the source position.
/// Structures further away than the gap never join the support.
fn support_midpoint(profile: &[f32], gap: usize) -> Option<(f32, f32)> {
    let mut best_i = 0;
    let mut best = 0.0f32;
    for (i, &v) in profile.iter().enumerate() {
        if v > best {
            best = v;
            best_i = i;
        }
    }
    if best <= 1e-6 {
        return None;
    }
    let tau = 0.4 * best;
    let mut lo = best_i;
    let mut misses = 0;
    let mut i = best_i;
    while i > 0 {
        i -= 1;
        if profile[i] >= tau {
            lo = i;
            misses = 0;
        } else {
            misses += 1;
            if misses > gap {
                break;
            }
        }
    }
    let mut hi = best_i;
    misses = 0;
    i = best_i;
    while i + 1 < profile.len() {
        i += 1;
        if profile[i] >= tau {
            hi = i;
            misses = 0;
        } else {
            misses += 1;
            if misses > gap {
                break;
            }
        }
    }
    Some(((lo + hi) as f32 * 0.5, best))
}

/// Per-column horizontal-line position estimates: (x, y_estimate, peak).
fn column_peaks(s: &Stats, x_lo: f32, x_hi: f32, y_lo: f32, y_hi: f32) -> Vec<(usize, f32, f32)> {
    let x0 = (x_lo * s.w as f32) as usize;
    let x1 = ((x_hi * s.w as f32) as usize).min(s.w);
    let y0 = ((y_lo * s.h as f32) as usize).max(1);
    let y1 = (((y_hi * s.h as f32) as usize).min(s.h - 1)).max(y0 + 1);
    let gap = (3 * s.h / 32).max(3);
    let mut out = Vec::with_capacity(x1 - x0);
    for x in x0..x1 {
        let profile: Vec<f32> = (y0..y1).map(|y| s.gy[[y, x]].abs()).collect();
        if let Some((pos, peak)) = support_midpoint(&profile, gap) {
            out.push((x, y0 as f32 + pos, peak));
        }
    }
    out
}

/// Per-row vertical-line position estimates: (y, x_estimate, peak).
fn row_peaks(s: &Stats, y_lo: f32, y_hi: f32, x_lo: f32, x_hi: f32) -> Vec<(usize, f32, f32)> {
    let y0 = (y_lo * s.h as f32) as usize;
    let y1 = ((y_hi * s.h as f32) as usize).min(s.h);
    let x0 = ((x_lo * s.w as f32) as usize).max(1);
    let x1 = (((x_hi * s.w as f32) as usize).min(s.w - 1)).max(x0 + 1);
    let gap = (3 * s.w / 32).max(3);
    let mut out = Vec::with_capacity(y1 - y0);
    for y in y0..y1 {
        let profile: Vec<f32> = (x0..x1).map(|x| s.gx[[y, x]].abs()).collect();
        if let Some((pos, peak)) = support_midpoint(&profile, gap) {
            out.push((y, x0 as f32 + pos, peak));
        }
    }
    out
}

/// Theil-Sen line fit: median slope over all point pairs, median intercept,
/// median absolute residual. Robust to a minority of outlier points.
fn theil_sen(points: &[(f32, f32)]) -> Option<(f32, f32, f32)> {
    if points.len() < 4 {
        return None;
    }
    let mut slopes = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dx = points[j].0 - points[i].0;
            if dx.abs() > 1e-6 {
                slopes.push((points[j].1 - points[i].1) / dx);
            }
        }
    }
    let slope = median(&mut slopes);
    let mut intercepts: Vec<f32> = points.iter().map(|(x, y)| y - slope * x).collect();
    let intercept = median(&mut intercepts);
    let mut residuals: Vec<f32> =
        points.iter().map(|(x, y)| (y - (slope * x + intercept)).abs()).collect();
    let resid = median(&mut residuals);
    Some((slope, intercept, resid))
}

/// Full-width horizontal-line strength per row: the minimum over three
/// sub-bands of the mean |dy|. A line spanning the whole band scores high; a
/// local object cannot cover all three sub-bands.
fn full_width_line(s: &Stats, y: usize, x_lo: f32, x_hi: f32) -> f32 {
    let x0 = (x_lo * s.w as f32) as usize;
    let x1 = ((x_hi * s.w as f32) as usize).min(s.w);
    let third = (x1 - x0) / 3;
    let mut min_mean = f32::MAX;
    for b in 0..3 {
        let lo = x0 + b * third;
        let hi = if b == 2 { x1 } else { lo + third };
        let mut acc = 0.0;
        for x in lo..hi {
            // allow the line to wobble by one row
            let m = s.gy[[y, x]]
                .abs()
                .max(s.gy[[y.saturating_sub(1), x]].abs())
                .max(s.gy[[(y + 1).min(s.h - 1), x]].abs());
            acc += m;
        }
        min_mean = min_mean.min(acc / (hi - lo) as f32);
    }
    min_mean
}

/// Returns (value, confident, measured inset fraction).
fn detect_lens(s: &Stats, event_like: bool) -> (&'static str, bool, f32) {
    // per-border median inset from the top, left and right borders (the
    // bottom border collides with the bumper band), then the median of the
    // three: one border fully occluded by scene objects cannot flip the vote
    let mut border_meds: Vec<f32> = Vec::new();
    let mut peaks: Vec<f32> = Vec::new();
    let mut top: Vec<f32> = Vec::new();
    for (_, y, m) in column_peaks(s, 0.30, 0.70, 0.02, 0.30) {
        top.push(y / s.h as f32);
        peaks.push(m);
    }
    let mut left: Vec<f32> = Vec::new();
    for (_, x, m) in row_peaks(s, 0.30, 0.70, 0.02, 0.30) {
        left.push(x / s.w as f32);
        peaks.push(m);
    }
    let mut right: Vec<f32> = Vec::new();
    for (_, x, m) in row_peaks(s, 0.30, 0.70, 0.70, 0.98) {
        right.push(1.0 - x / s.w as f32);
        peaks.push(m);
    }
    for b in [&mut top, &mut left, &mut right] {
        let v = median(b);
        if v.is_finite() {
            border_meds.push(v);
        }
    }
    let peak = median(&mut peaks);
    if border_meds.is_empty() || !peak.is_finite() || peak < LENS_MIN_PEAK {
        return ("normal", false, 0.10);
    }
    let inset = median(&mut border_meds);
    // the fisheye fill boundary adds an inner line that drags event-image
    // estimates down by about a pixel, so event images use tighter cuts
    let (lo, hi) = if event_like { (0.116, 0.1265) } else { (LENS_NORMAL_MAX, LENS_FISHEYE_MIN) };
    if inset <= lo {
        ("normal", true, inset)
    } else if inset >= hi {
        ("fisheye", true, inset)
    } else {
        (if inset < (lo + hi) / 2.0 { "normal" } else { "fisheye" }, false, inset)
    }
}

fn detect_viewpoint(s: &Stats, border_inset: f32, event_like: bool) -> (&'static str, bool) {
    let h = s.h as f32;
    let px_scale = h / 32.0;
    // the strength threshold scales with the per-image noise floor so
    // amplified texture (gated stretch) never qualifies as line evidence
    let tau_h = (3.0 * s.noise_raw).max(VIEW_HORIZON_MAG);

    // pole first, over a window tall enough for the oblique horizon's full
    // reach (the radial warp maps a line through the center onto itself, so
    // the slope survives the fisheye)
    let pole_peaks = column_peaks(s, 0.15, 0.85, 0.30, 0.70);
    let pole_strong: Vec<(f32, f32)> = pole_peaks
        .iter()
        .filter(|(_, _, m)| *m > tau_h)
        .map(|(x, y, _)| (*x as f32, *y))
        .collect();
    let band_w = ((0.85 - 0.15) * s.w as f32) as usize;
    if let Some((slope, intercept, _)) = theil_sen(&pole_strong) {
        if slope.abs() > VIEW_SLOPE_POLE {
            let inliers = pole_strong
                .iter()
                .filter(|(x, y)| (y - (slope * x + intercept)).abs() < 2.0 * px_scale)
                .count();
            if inliers as f32 / band_w.max(1) as f32 > 0.62 {
                return ("pole", slope.abs() > VIEW_SLOPE_POLE * 1.4);
            }
        }
    }
    // level-horizon fit in a band clear of the bumper boundary
    let peaks = column_peaks(s, 0.15, 0.85, 0.34, 0.62);
    let strong: Vec<(f32, f32)> = peaks
        .iter()
        .filter(|(_, _, m)| *m > tau_h)
        .map(|(x, y, _)| (*x as f32, *y))
        .collect();
    let coverage = strong.len() as f32 / band_w.max(1) as f32;
    let fit = theil_sen(&strong);

    let horizon = match fit {
        Some((slope, intercept, resid)) if coverage > 0.6 && resid <= VIEW_RESID_MAX * px_scale => {
            // the fitted line must also explain most columns (scatter from
            // objects or texture can fit a line without supporting one)
            let inliers = strong
                .iter()
                .filter(|(x, y)| (y - (slope * x + intercept)).abs() < 2.0 * px_scale)
                .count();
            if inliers as f32 / band_w.max(1) as f32 > 0.72 {
                Some((slope, intercept, resid))
            } else {
                None
            }
        }
        _ => None,
    };

    match horizon {
        None => {
            // no consistent full-width line: top-down scatter
            let confident = coverage < 0.45 || fit.map(|(_, _, r)| r > 2.5 * px_scale).unwrap_or(true);
            ("drone", confident)
        }
        Some((slope, _intercept, _resid)) => {
            // streaks: vertical stripe bands in the central ground region,
            // living in a gradient channel the horizon/bumper/border lines
            // never touch. Two statistics must agree: the median |dx| over
            // the window (stripes cover two thirds of every row; a scene
            // object covers less than half) and a shift-overlap periodicity
            // score (stripes repeat every few columns; object edges do not).
            let g0 = (0.56 * h).ceil() as usize;
            let g1 = (0.80 * h) as usize;
            let x0 = (0.30 * s.w as f32) as usize;
            let x1 = (0.70 * s.w as f32) as usize;
            // orientation contrast |gx| - |gy|: stripes are purely vertical
            // while sensor noise, speckle and posterization contours are
            // isotropic or horizontal, so they cancel or go negative
            let tau_s = 0.04f32;
            let mut row_meds: Vec<f32> = (g0..g1)
                .map(|y| {
                    let mut cols: Vec<f32> = (x0..x1)
                        .map(|x| (s.gx[[y, x]].abs() - s.gy[[y, x]].abs()).max(0.0))
                        .collect();
                    cols.sort_by(|a, b| a.total_cmp(b));
                    cols[(cols.len() * 11) / 20]
                })
                .collect();
            let stripe_energy = median(&mut row_meds);
            let profile: Vec<f32> = (x0..x1)
                .map(|x| (g0..g1).map(|y| s.gx[[y, x]].abs()).sum::<f32>() / (g1 - g0) as f32)
                .collect();
            let mut periodicity = 0.0f32;
            for lag in 2..=6usize {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..profile.len() - lag {
                    num += profile[i].min(profile[i + lag]);
                    den += profile[i].max(profile[i + lag]);
                }
                if den > 1e-6 {
                    periodicity = periodicity.max(num / den);
                }
            }
            if stripe_energy > tau_s && periodicity > VIEW_STREAK_PERIOD {
                return ("side", stripe_energy > tau_s * 1.5 && periodicity > VIEW_STREAK_PERIOD * 1.15);
            }
            // back vs front: the bumper band darkens the whole lower strip
            // for every sensor except event, where it instead contributes an
            // extra pair of full-width lines above the border's.
            let cx0 = (0.28 * s.w as f32) as usize;
            let cx1 = (0.72 * s.w as f32) as usize;
            let is_back;
            let back_conf;
            if event_like {
                // the bumper band swallows the bottom border (no contrast),
                // so back means: bumper line present, border lines absent.
                // Both probe windows hang off the measured border position,
                // which also keeps the fisheye fill boundary's own line out.
                let cov = |y: usize| -> f32 {
                    (cx0..cx1).filter(|&x| s.gy[[y, x]].abs() > 0.13).count() as f32
                        / (cx1 - cx0) as f32
                };
                let border_c = 1.0 - border_inset;
                let bb0 = ((border_c - 0.085) * h) as usize;
                let bb1 = (((border_c - 0.04) * h) as usize).max(bb0 + 1).min(s.h);
                let mut border_presence = 0.0f32;
                for y in bb0..bb1 {
                    border_presence = border_presence.max(cov(y));
                }
                let ub0 = (0.60 * h) as usize;
                let ub1 = (((border_c - 0.106) * h) as usize).max(ub0 + 1);
                let mut bumper_presence = 0.0f32;
                for y in ub0..ub1 {
                    bumper_presence = bumper_presence.max(cov(y));
                }
                is_back = bumper_presence > 0.55 && border_presence < 0.35;
                back_conf = (bumper_presence - border_presence).abs() > 0.4;
            } else {
                // mean luminance of the strip between ground and border:
                // the bumper band darkens it under every non-event sensor
                let y0 = (0.76 * h) as usize;
                let y1 = (((1.0 - border_inset) * h - 2.0 * px_scale) as usize).max(y0 + 1).min(s.h);
                let mut acc = 0.0f64;
                let mut n = 0usize;
                for y in y0..y1 {
                    for x in cx0..cx1 {
                        acc += s.lum[[y, x]] as f64;
                        n += 1;
                    }
                }
                let dark_mean = (acc / n.max(1) as f64) as f32;
                is_back = dark_mean < VIEW_BACK_DARK;
                back_conf = dark_mean < VIEW_BACK_DARK - 0.08 || dark_mean > VIEW_BACK_DARK + 0.08;
            }
            if is_back {
                return ("back", back_conf);
            }
            ("front", slope.abs() < VIEW_SLOPE_POLE * 0.6 && back_conf)
        }
    }
}

struct SensorStats {
    event_frac: f32,
    red_frac: f32,
    speckle_frac: f32,
    colorful_frac: f32,
    thermal_med: f32,
}

fn sensor_stats(img: &Image) -> SensorStats {
    let (_, h, w) = img.dim();
    let mut near_palette = 0usize;
    let mut colored = Vec::new();
    let mut ranges = Vec::with_capacity(h * w);
    let mut dists = Vec::with_capacity(h * w);
    let curve: Vec<[f32; 3]> = (0..64).map(|i| thermal_colormap(i as f32 / 63.0)).collect();
    for y in 0..h {
        for x in 0..w {
            let c = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
            let d_white = (c[0] - 1.0).abs().max((c[1] - 1.0).abs()).max((c[2] - 1.0).abs());
            let d_red = (c[0] - 1.0).abs().max(c[1].abs()).max(c[2].abs());
            let d_blue = c[0].abs().max(c[1].abs()).max((c[2] - 1.0).abs());
            if d_white.min(d_red).min(d_blue) < 0.08 {
                near_palette += 1;
                if d_white >= 0.08 {
                    colored.push((y, x, d_red < d_blue));
                }
            }
            let mx = c[0].max(c[1]).max(c[2]);
            let mn = c[0].min(c[1]).min(c[2]);
            ranges.push(mx - mn);
            // very dark pixels (bumper band, borders, outlines) say nothing
            // about the sensor's color family
            let lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            if lum >= 0.2 {
                let mut best = f32::MAX;
                for p in &curve {
                    let d = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt();
                    if d < best {
                        best = d;
                    }
                }
                dists.push(best);
            }
        }
    }
    let event_frac = near_palette as f32 / (h * w) as f32;
    let red_frac = if colored.is_empty() {
        0.0
    } else {
        colored.iter().filter(|(_, _, r)| *r).count() as f32 / colored.len() as f32
    };
    let mut is_colored = Array2::<bool>::from_elem((h, w), false);
    for &(y, x, _) in &colored {
        is_colored[[y, x]] = true;
    }
    let mut isolated = 0usize;
    for &(y, x, _) in &colored {
        let mut nb = 0;
        for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
            let yy = y as i32 + dy;
            let xx = x as i32 + dx;
            if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32 && is_colored[[yy as usize, xx as usize]] {
                nb += 1;
            }
        }
        if nb == 0 {
            isolated += 1;
        }
    }
    // isolated colored pixels relative to the whole image: speckle grain has
    // no neighbors while event lines always do
    let speckle_frac = isolated as f32 / (h * w) as f32;
    let colorful = ranges.iter().filter(|&&r| r > SENSOR_COLORFUL_RANGE).count();
    SensorStats {
        event_frac,
        red_frac,
        speckle_frac,
        colorful_frac: colorful as f32 / ranges.len() as f32,
        thermal_med: if dists.len() >= (h * w) / 5 { median(&mut dists) } else { 1.0 },
    }
}

fn detect_sensor(ss: &SensorStats) -> (&'static str, bool) {
    if ss.event_frac > SENSOR_EVENT_FRAC {
        return ("event", true);
    }
    if ss.colorful_frac < SENSOR_GRAY_FRAC {
        return ("gated", ss.colorful_frac < SENSOR_GRAY_FRAC * 0.5);
    }
    if ss.thermal_med < SENSOR_THERMAL_TAU {
        return ("thermal", ss.thermal_med < SENSOR_THERMAL_TAU * 0.75);
    }
    if ss.thermal_med < SENSOR_RGBTHERMAL_TAU {
        return (
            "rgbthermal",
            ss.thermal_med > SENSOR_THERMAL_TAU * 1.3 && ss.thermal_med < SENSOR_RGBTHERMAL_TAU * 0.85,
        );
    }
    ("rgb", ss.thermal_med > SENSOR_RGBTHERMAL_TAU * 1.1)
}

fn detect_domain(img: &Image, s: &Stats, ss: &SensorStats, sensor: &str) -> (&'static str, bool) {
    if sensor == "event" {
        if ss.speckle_frac > DOMAIN_SPECKLE_TAU {
            return ("real", ss.speckle_frac > DOMAIN_SPECKLE_TAU * 1.5);
        }
        if ss.red_frac > DOMAIN_RED_FRAC {
            return ("videogame", true);
        }
        return ("simulation", ss.red_frac < 0.8 && ss.speckle_frac < DOMAIN_SPECKLE_TAU * 0.5);
    }
    let (_, h, w) = img.dim();
    let mut on_grid = 0usize;
    for v in img.iter() {
        let q = (v * 3.0).round() / 3.0;
        if (v - q).abs() < 0.02 {
            on_grid += 1;
        }
    }
    let poster = on_grid as f32 / (3 * h * w) as f32;
    if poster > DOMAIN_POSTER_FRAC {
        return ("videogame", poster > 0.85);
    }
    // high-frequency residual measured on flat pixels only, so texture and
    // anti-aliased edges do not masquerade as sensor noise
    let mut residuals = Vec::with_capacity(h * w);
    let mut flat_residuals = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    acc += s.lum[[yy, xx]];
                }
            }
            let r = (s.lum[[y, x]] - acc / 9.0).abs();
            residuals.push(r);
            let mag = (s.gx[[y, x]].powi(2) + s.gy[[y, x]].powi(2)).sqrt();
            if mag < 0.06 {
                flat_residuals.push(r);
            }
        }
    }
    let noise = if flat_residuals.len() >= residuals.len() / 5 {
        median(&mut flat_residuals)
    } else {
        median(&mut residuals)
    };
    if noise > DOMAIN_NOISE_REAL {
        ("real", noise > DOMAIN_NOISE_REAL * 1.4)
    } else if noise < DOMAIN_NOISE_SIM {
        ("simulation", noise < DOMAIN_NOISE_SIM * 0.6 && poster < 0.5)
    } else {
        ("real", false)
    }
}

/// Estimate the factor tuple of an image with per-category confidence flags.
pub fn oracle_classify(img: &Image) -> OracleReport {
    let s = Stats::new(img);
    // degenerate input: nothing to measure
    if s.lum_std() < 0.02 {
        return OracleReport {
            tuple: FactorTuple::new("normal", "rgb", "front", "real"),
            confident: [false; 4],
        };
    }
    let ss = sensor_stats(img);
    let (sensor, sensor_ok) = detect_sensor(&ss);
    let (lens, lens_ok, inset) = detect_lens(&s, sensor == "event");
    let (view, view_ok) = detect_viewpoint(&s, inset, sensor == "event");
    let (domain, domain_ok) = detect_domain(img, &s, &ss, sensor);
    OracleReport {
        tuple: FactorTuple::new(lens, sensor, view, domain),
        confident: [lens_ok, sensor_ok, view_ok, domain_ok],
    }
}

/// Dump every internal detector statistic for threshold calibration.
#[doc(hidden)]
pub fn debug_dump(img: &Image) -> String {
    use std::fmt::Write;
    let s = Stats::new(img);
    let ss = sensor_stats(img);
    let mut out = String::new();
    let h = s.h as f32;
    let px_scale = h / 32.0;
    writeln!(out, "lum_std {:.4}", s.lum_std()).ok();
    let mut top: Vec<f32> = column_peaks(&s, 0.30, 0.70, 0.02, 0.30).iter().map(|(_, y, _)| y / h).collect();
    let mut tm: Vec<f32> = column_peaks(&s, 0.30, 0.70, 0.02, 0.30).iter().map(|(_, _, m)| *m).collect();
    writeln!(out, "lens top med {:.4} peak_med {:.4}", median(&mut top), median(&mut tm)).ok();
    writeln!(out, "noise_raw {:.4} noise_smooth {:.4}", s.noise_raw, s.noise_smooth).ok();
    let peaks = column_peaks(&s, 0.15, 0.85, 0.34, 0.62);
    let strong: Vec<(f32, f32)> = peaks.iter().filter(|(_, _, m)| *m > VIEW_HORIZON_MAG).map(|(x, y, _)| (*x as f32, *y)).collect();
    let band_w = ((0.85 - 0.15) * s.w as f32) as usize;
    writeln!(out, "horizon coverage {:.3}", strong.len() as f32 / band_w as f32).ok();
    if let Some((slope, icpt, resid)) = theil_sen(&strong) {
        writeln!(out, "horizon slope {slope:.3} intercept {icpt:.2} resid {:.2} (max {:.2})", resid, VIEW_RESID_MAX * px_scale).ok();
    }
    let g0 = (0.585 * h).ceil() as usize;
    let g1 = (0.68 * h) as usize;
    for y in g0..g1 {
        writeln!(out, "streak row {y}: {:.4}", full_width_line(&s, y, 0.15, 0.85)).ok();
    }
    let (lens, lc, inset) = detect_lens(&s, sensor_stats(img).event_frac > SENSOR_EVENT_FRAC);
    let border_row = (1.0 - inset) * h;
    let b0 = (0.70 * h) as usize;
    let b1 = (((border_row - 3.0 * px_scale) as usize).min((0.82 * h) as usize)).max(b0 + 1);
    for y in b0..b1 {
        writeln!(out, "bumper row {y}: {:.4}", full_width_line(&s, y, 0.15, 0.85)).ok();
    }
    writeln!(
        out,
        "sensor event_frac {:.4} red_frac {:.3} speckle {:.4} colorful {:.4} thermal_med {:.4}",
        ss.event_frac, ss.red_frac, ss.speckle_frac, ss.colorful_frac, ss.thermal_med
    )
    .ok();
    let (view, vc) = detect_viewpoint(&s, inset, sensor_stats(img).event_frac > SENSOR_EVENT_FRAC);
    let (sensor, sc) = detect_sensor(&ss);
    let (domain, dc) = detect_domain(img, &s, &ss, sensor);
    writeln!(out, "=> lens {lens}({inset:.3})/{lc} sensor {sensor}/{sc} view {view}/{vc} domain {domain}/{dc}").ok();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn uniform_gray_image_is_all_low_confidence() {
        let img = Array3::from_elem((3, 32, 32), 0.5);
        let report = oracle_classify(&img);
        assert_eq!(report.confident, [false; 4]);
    }

    #[test]
    fn theil_sen_ignores_minority_outliers() {
        let mut pts: Vec<(f32, f32)> = (0..20).map(|i| (i as f32, 3.0 + 0.5 * i as f32)).collect();
        pts[3].1 = 40.0;
        pts[11].1 = -7.0;
        let (slope, intercept, resid) = theil_sen(&pts).unwrap();
        assert!((slope - 0.5).abs() < 0.02, "slope {slope}");
        assert!((intercept - 3.0).abs() < 0.3, "intercept {intercept}");
        assert!(resid < 0.5, "residual {resid}");
    }
}

#[doc(hidden)]
pub fn debug_streaks(img: &Image) -> String {
    use std::fmt::Write;
    let s = Stats::new(img);
    let h = s.h as f32;
    let mut out = String::new();
    let g0 = (0.56 * h).ceil() as usize;
    let g1 = (0.80 * h) as usize;
    let x0 = (0.30 * s.w as f32) as usize;
    let x1 = (0.70 * s.w as f32) as usize;
    let tau_s = 0.04f32;
    let mut row_meds: Vec<f32> = (g0..g1)
        .map(|y| {
            let mut cols: Vec<f32> = (x0..x1)
                .map(|x| (s.gx[[y, x]].abs() - s.gy[[y, x]].abs()).max(0.0))
                .collect();
            cols.sort_by(|a, b| a.total_cmp(b));
            cols[(cols.len() * 11) / 20]
        })
        .collect();
    let stripe_energy = median(&mut row_meds);
    let profile: Vec<f32> = (x0..x1)
        .map(|x| (g0..g1).map(|y| s.gx[[y, x]].abs()).sum::<f32>() / (g1 - g0) as f32)
        .collect();
    let mut periodicity = 0.0f32;
    for lag in 2..=6usize {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..profile.len() - lag {
            num += profile[i].min(profile[i + lag]);
            den += profile[i].max(profile[i + lag]);
        }
        if den > 1e-6 {
            periodicity = periodicity.max(num / den);
        }
    }
    writeln!(
        out,
        "tau_s {tau_s:.4} stripe_energy {stripe_energy:.4} periodicity {periodicity:.3} (need > {VIEW_STREAK_PERIOD})"
    )
    .ok();
    out
}
