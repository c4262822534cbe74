//! Lowe-style SIFT: Gaussian scale space, DoG extrema with sub-pixel
//! refinement, gradient-histogram orientations and 4x4x8 descriptors.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

use super::{Descriptor2D, Image, Keypoint2D};

const BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_SCALE: f32 = 3.0;
const DESC_CLIP: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftParams {
    /// `None` picks `floor(log2(min(width, height))) - 3`, at least 1.
    pub octaves: Option<usize>,
    pub scales_per_octave: usize,
    pub sigma: f32,
    pub contrast_thresh: f32,
    pub edge_thresh: f32,
    /// Blur already present in the input image.
    pub assumed_blur: f32,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            octaves: None,
            scales_per_octave: 3,
            sigma: 1.6,
            contrast_thresh: 0.04,
            edge_thresh: 10.0,
            assumed_blur: 0.5,
        }
    }
}

/// Separable Gaussian blur with mirrored borders.
fn blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (w, h) = (img.width as isize, img.height as isize);
    let reflect = |i: isize, n: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = vec![0.0f32; img.pixels.len()];
    for y in 0..h {
        let row = &img.pixels[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x + k as isize - radius, w)];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; img.pixels.len()];
    for y in 0..h {
        for (k, &kv) in kernel.iter().enumerate() {
            let sy = reflect(y + k as isize - radius, h);
            let src = &tmp[sy * w as usize..(sy + 1) * w as usize];
            let dst = &mut out[(y * w) as usize..((y + 1) * w) as usize];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    Image {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

fn downsample(img: &Image) -> Image {
    let (w, h) = (img.width.div_ceil(2), img.height.div_ceil(2));
    Image::from_fn(w, h, |x, y| img.at(2 * x, 2 * y))
}

/// Gaussian and difference-of-Gaussian scale space.
pub struct ScaleSpace {
    pub gaussians: Vec<Vec<Image>>,
    pub dogs: Vec<Vec<Image>>,
    params: SiftParams,
}

impl ScaleSpace {
    pub fn build(image: &Image, params: &SiftParams) -> Result<Self> {
        if image.width < 32 || image.height < 32 {
            return Err(Error::InvalidParameter(format!(
                "SIFT needs at least 32x32 pixels, got {}x{}",
                image.width, image.height
            )));
        }
        if params.scales_per_octave == 0 || !(params.sigma > 0.0) {
            return Err(Error::InvalidParameter("SIFT needs scales_per_octave > 0 and sigma > 0".into()));
        }
        let auto = ((image.width.min(image.height) as f32).log2().floor() as usize).saturating_sub(3);
        let octaves = params.octaves.unwrap_or(auto).max(1);
        let s = params.scales_per_octave;
        let k = 2f32.powf(1.0 / s as f32);
        let increments: Vec<f32> = (1..s + 3)
            .map(|i| {
                let prev = params.sigma * k.powi(i as i32 - 1);
                let cur = prev * k;
                (cur * cur - prev * prev).sqrt()
            })
            .collect();
        let base_inc = (params.sigma * params.sigma - params.assumed_blur * params.assumed_blur).max(0.01).sqrt();
        let mut base = blur(image, base_inc);
        let mut gaussians = Vec::with_capacity(octaves);
        for o in 0..octaves {
            if o > 0 {
                let prev: &Vec<Image> = &gaussians[o - 1];
                base = downsample(&prev[s]);
                if base.width < 2 * BORDER + 3 || base.height < 2 * BORDER + 3 {
                    break;
                }
            }
            let mut layers = Vec::with_capacity(s + 3);
            layers.push(base.clone());
            for inc in &increments {
                let next = blur(layers.last().expect("non-empty"), *inc);
                layers.push(next);
            }
            gaussians.push(layers);
        }
        let dogs = gaussians
            .iter()
            .map(|layers| {
                layers
                    .windows(2)
                    .map(|w| Image {
                        width: w[0].width,
                        height: w[0].height,
                        pixels: w[1].pixels.iter().zip(&w[0].pixels).map(|(a, b)| a - b).collect(),
                    })
                    .collect()
            })
            .collect();
        Ok(ScaleSpace {
            gaussians,
            dogs,
            params: *params,
        })
    }

    fn layer_sigma(&self, layer: f32) -> f32 {
        self.params.sigma * 2f32.powf(layer / self.params.scales_per_octave as f32)
    }

    /// Octave and Gaussian layer a keypoint of this scale was detected on.
    /// Detected layers sit in `(0.5, s + 0.5)` so the inverse is exact.
    fn locate(&self, scale: f32) -> Option<(usize, usize)> {
        if !(scale > 0.0) {
            return None;
        }
        let s = self.params.scales_per_octave as f32;
        let total = s * (scale / self.params.sigma).log2();
        let octave = ((total - 0.5) / s).floor().clamp(0.0, (self.gaussians.len() - 1) as f32) as usize;
        let layer = (total - octave as f32 * s).round().clamp(1.0, s) as usize;
        Some((octave, layer))
    }
}

/// Keypoint location in octave coordinates, before orientation assignment.
#[derive(Debug, Clone, Copy)]
struct Extremum {
    octave: usize,
    layer: usize,
    x: f32,
    y: f32,
    /// Fractional layer, used for the scale.
    sub_layer: f32,
}

fn is_extremum(dogs: &[Image], layer: usize, x: usize, y: usize) -> bool {
    let v = dogs[layer].at(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for img in &dogs[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let o = img.at(xx, yy);
                if std::ptr::eq(img, &dogs[layer]) && xx == x && yy == y {
                    continue;
                }
                is_max &= v > o;
                is_min &= v < o;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Quadratic sub-pixel/sub-scale refinement with contrast and edge tests.
fn refine(space: &ScaleSpace, octave: usize, layer: usize, x: usize, y: usize) -> Option<Extremum> {
    let dogs = &space.dogs[octave];
    let s = space.params.scales_per_octave;
    let (w, h) = (dogs[0].width, dogs[0].height);
    let (mut xi, mut yi, mut li) = (x, y, layer);
    for _ in 0..MAX_REFINE_STEPS {
        let d = |l: usize, dx: isize, dy: isize| -> f64 {
            dogs[l].at((xi as isize + dx) as usize, (yi as isize + dy) as usize) as f64
        };
        let v = d(li, 0, 0);
        let g = nalgebra::Vector3::new(
            0.5 * (d(li, 1, 0) - d(li, -1, 0)),
            0.5 * (d(li, 0, 1) - d(li, 0, -1)),
            0.5 * (d(li + 1, 0, 0) - d(li - 1, 0, 0)),
        );
        let dxx = d(li, 1, 0) + d(li, -1, 0) - 2.0 * v;
        let dyy = d(li, 0, 1) + d(li, 0, -1) - 2.0 * v;
        let dss = d(li + 1, 0, 0) + d(li - 1, 0, 0) - 2.0 * v;
        let dxy = 0.25 * (d(li, 1, 1) - d(li, 1, -1) - d(li, -1, 1) + d(li, -1, -1));
        let dxs = 0.25 * (d(li + 1, 1, 0) - d(li + 1, -1, 0) - d(li - 1, 1, 0) + d(li - 1, -1, 0));
        let dys = 0.25 * (d(li + 1, 0, 1) - d(li + 1, 0, -1) - d(li - 1, 0, 1) + d(li - 1, 0, -1));
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let offset = -(hess.try_inverse()? * g);
        if offset.iter().all(|o| o.abs() < 0.5) {
            let contrast = v + 0.5 * g.dot(&offset);
            if contrast.abs() * (s as f64) < space.params.contrast_thresh as f64 {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = space.params.edge_thresh as f64;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            return Some(Extremum {
                octave,
                layer: li,
                x: (xi as f64 + offset.x) as f32,
                y: (yi as f64 + offset.y) as f32,
                sub_layer: (li as f64 + offset.z) as f32,
            });
        }
        if offset.iter().any(|o| o.abs() > 1e6) {
            return None;
        }
        let nx = xi as isize + offset.x.round() as isize;
        let ny = yi as isize + offset.y.round() as isize;
        let nl = li as isize + offset.z.round() as isize;
        if nl < 1 || nl > s as isize || nx < BORDER as isize || ny < BORDER as isize || nx >= (w - BORDER) as isize || ny >= (h - BORDER) as isize {
            return None;
        }
        (xi, yi, li) = (nx as usize, ny as usize, nl as usize);
    }
    None
}

fn gradient(img: &Image, x: usize, y: usize) -> (f32, f32) {
    (
        img.at(x + 1, y) - img.at(x - 1, y),
        img.at(x, y + 1) - img.at(x, y - 1),
    )
}

/// Dominant gradient orientations (radians in `[0, 2pi)`) around an extremum.
fn orientations(space: &ScaleSpace, e: &Extremum) -> Vec<f32> {
    let img = &space.gaussians[e.octave][e.layer];
    let sigma = ORI_SIGMA_FACTOR * space.layer_sigma(e.sub_layer);
    let radius = (3.0 * sigma).round() as isize;
    let (cx, cy) = (e.x.round() as isize, e.y.round() as isize);
    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (x, y) = (cx + dx, cy + dy);
            if x < 1 || y < 1 || x >= img.width as isize - 1 || y >= img.height as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, x as usize, y as usize);
            let w = (-((dx * dx + dy * dy) as f32) / (2.0 * sigma * sigma)).exp();
            let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
            let bin = ((ang / (2.0 * PI) * ORI_BINS as f32).round() as usize) % ORI_BINS;
            hist[bin] += w * gx.hypot(gy);
        }
    }
    let mut smooth = [0.0f32; ORI_BINS];
    for i in 0..ORI_BINS {
        let at = |o: isize| hist[(i as isize + o).rem_euclid(ORI_BINS as isize) as usize];
        smooth[i] = (at(-2) + at(2)) / 16.0 + 4.0 * (at(-1) + at(1)) / 16.0 + 6.0 * at(0) / 16.0;
    }
    let max = smooth.iter().cloned().fold(0.0, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = smooth[(i + ORI_BINS - 1) % ORI_BINS];
        let r = smooth[(i + 1) % ORI_BINS];
        let c = smooth[i];
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = (i as f32 + shift).rem_euclid(ORI_BINS as f32);
            out.push(bin / ORI_BINS as f32 * 2.0 * PI);
        }
    }
    out
}

/// Detects DoG keypoints. Coordinates are in input-image pixels.
pub fn detect_sift_keypoints(image: &Image, params: &SiftParams) -> Result<Vec<Keypoint2D>> {
    let space = ScaleSpace::build(image, params)?;
    Ok(detect_in(&space, image))
}

fn detect_in(space: &ScaleSpace, image: &Image) -> Vec<Keypoint2D> {
    let s = space.params.scales_per_octave;
    let pre = 0.5 * space.params.contrast_thresh / s as f32;
    let mut jobs = Vec::new();
    for (o, dogs) in space.dogs.iter().enumerate() {
        for (layer, d) in dogs.iter().enumerate().take(s + 1).skip(1) {
            jobs.push((o, layer, d.width, d.height));
        }
    }
    let per_layer = par::map_slice(&jobs, |&(o, layer, w, h)| {
        let dogs = &space.dogs[o];
        let mut found = Vec::new();
        for y in BORDER..h.saturating_sub(BORDER) {
            for x in BORDER..w.saturating_sub(BORDER) {
                if dogs[layer].at(x, y).abs() > pre && is_extremum(dogs, layer, x, y) {
                    if let Some(e) = refine(space, o, layer, x, y) {
                        found.push(e);
                    }
                }
            }
        }
        found
    });
    let mut kps = Vec::new();
    for e in per_layer.into_iter().flatten() {
        let scale_factor = (1usize << e.octave) as f32;
        let u = e.x * scale_factor;
        let v = e.y * scale_factor;
        if !(u >= 0.0 && v >= 0.0 && (u as usize) < image.width && (v as usize) < image.height) {
            continue;
        }
        for angle in orientations(space, &e) {
            kps.push(Keypoint2D {
                u: u as f64,
                v: v as f64,
                scale: (space.layer_sigma(e.sub_layer) * scale_factor) as f64,
                orientation: angle as f64,
            });
        }
    }
    kps
}

fn describe(space: &ScaleSpace, kp: &Keypoint2D) -> Descriptor2D {
    let invalid = Descriptor2D {
        values: vec![0.0; DESC_WIDTH * DESC_WIDTH * DESC_BINS],
        valid: false,
    };
    let Some((octave, layer)) = space.locate(kp.scale as f32) else {
        return invalid;
    };
    let img = &space.gaussians[octave][layer];
    let factor = (1usize << octave) as f32;
    let (x, y) = ((kp.u as f32 / factor).round() as isize, (kp.v as f32 / factor).round() as isize);
    let sigma = kp.scale as f32 / factor;
    let hist_width = DESC_SCALE * sigma;
    let radius = (hist_width * std::f32::consts::SQRT_2 * (DESC_WIDTH as f32 + 1.0) * 0.5).round() as isize;
    let (sin, cos) = (kp.orientation as f32).sin_cos();
    // The rotated 4x4-cell square must lie inside the image.
    let half = hist_width * DESC_WIDTH as f32 * 0.5;
    for (a, b) in [(-half, -half), (-half, half), (half, -half), (half, half)] {
        let cx = x as f32 + cos * a - sin * b;
        let cy = y as f32 + sin * a + cos * b;
        if cx < 1.0 || cy < 1.0 || cx > (img.width - 2) as f32 || cy > (img.height - 2) as f32 {
            return invalid;
        }
    }
    let inside = |px: isize, py: isize| px >= 1 && py >= 1 && px < img.width as isize - 1 && py < img.height as isize - 1;
    let d = DESC_WIDTH as f32;
    let nb = DESC_BINS as f32;
    let mut hist = vec![0.0f32; (DESC_WIDTH + 2) * (DESC_WIDTH + 2) * (DESC_BINS + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (DESC_WIDTH + 2) + c) * (DESC_BINS + 2) + o;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let rx = (cos * dx as f32 + sin * dy as f32) / hist_width;
            let ry = (-sin * dx as f32 + cos * dy as f32) / hist_width;
            let rbin = ry + d / 2.0 - 0.5;
            let cbin = rx + d / 2.0 - 0.5;
            if !(rbin > -1.0 && rbin < d && cbin > -1.0 && cbin < d) {
                continue;
            }
            if !inside(x + dx, y + dy) {
                continue;
            }
            let (gx, gy) = gradient(img, (x + dx) as usize, (y + dy) as usize);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let ori = (gy.atan2(gx) - kp.orientation as f32).rem_euclid(2.0 * PI);
            let obin = ori / (2.0 * PI) * nb;
            let weight = (-(rx * rx + ry * ry) / (2.0 * (0.5 * d) * (0.5 * d))).exp() * mag;
            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 + 1.0) as usize, (c0 + 1.0) as usize);
            let o0 = (o0 as usize) % DESC_BINS;
            for (ri, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (ci, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (oi, wo) in [(0, 1.0 - fo), (1, fo)] {
                        hist[idx(r0 + ri, c0 + ci, o0 + oi)] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut values = Vec::with_capacity(DESC_WIDTH * DESC_WIDTH * DESC_BINS);
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            for o in 0..DESC_BINS {
                let mut v = hist[idx(r + 1, c + 1, o)];
                if o == 0 {
                    v += hist[idx(r + 1, c + 1, DESC_BINS)];
                }
                if o == 1 {
                    v += hist[idx(r + 1, c + 1, DESC_BINS + 1)];
                }
                values.push(v as f64);
            }
        }
    }
    match normalize_clip(values) {
        Some(values) => Descriptor2D { values, valid: true },
        None => invalid,
    }
}

/// Unit L2 norm, clip entries at 0.2, renormalize. `None` for a zero vector.
pub(crate) fn normalize_clip(mut values: Vec<f64>) -> Option<Vec<f64>> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return None;
    }
    values.iter_mut().for_each(|v| *v = (*v / norm).min(DESC_CLIP as f64));
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    values.iter_mut().for_each(|v| *v /= norm);
    Some(values)
}

/// One descriptor per keypoint, index-aligned. Keypoints must come from
/// [`detect_sift_keypoints`] on the same image with the same parameters.
pub fn extract_sift_descriptors(image: &Image, keypoints: &[Keypoint2D], params: &SiftParams) -> Result<Vec<Descriptor2D>> {
    let space = ScaleSpace::build(image, params)?;
    Ok(par::map_slice(keypoints, |kp| describe(&space, kp)))
}

/// Detection and description sharing one scale space.
pub fn sift(image: &Image, params: &SiftParams) -> Result<(Vec<Keypoint2D>, Vec<Descriptor2D>)> {
    let space = ScaleSpace::build(image, params)?;
    let kps = detect_in(&space, image);
    let desc = par::map_slice(&kps, |kp| describe(&space, kp));
    Ok((kps, desc))
}
