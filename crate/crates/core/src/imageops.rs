//! Deterministic image-structure pipeline: Sobel gradient maps, Canny edges,
//! Gaussian edge-weight masks, nearest-neighbour pyramids and image IO.
//!
//! Planes are stored height-major with interleaved channels (h, w, c).

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

/// Dense (h, w, c) real plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err(
                "plane",
                format!("({h}, {w}, {c}) needs {} values, got {}", h * w * c, data.len()),
            ));
        }
        Ok(Plane { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Plane { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Plane { h, w, c, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// One channel as a standalone (h, w, 1) plane.
    pub fn channel(&self, ch: usize) -> Plane {
        Plane::from_fn(self.h, self.w, 1, |y, x, _| self.get(y, x, ch))
    }

    /// Layout change to a (1, c, h, w) tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for ch in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.push(T::from_f64_lossy(self.get(y, x, ch)));
                }
            }
        }
        Tensor::from_vec([1, self.c, self.h, self.w], out).expect("plane size matches tensor")
    }

    /// Sample `n` of an (n, c, h, w) tensor as a plane.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Plane {
        let [_, c, h, w] = t.shape();
        Plane::from_fn(h, w, c, |y, x, ch| t.get(n, ch, y, x).as_f64())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Typed wrapper over a [`Plane`] whose invariants survive spatial
/// resampling and masking.
pub trait PlaneMap: Sized {
    fn plane(&self) -> &Plane;
    #[doc(hidden)]
    fn from_plane_unchecked(p: Plane) -> Self;
}

macro_rules! plane_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Plane);

        impl PlaneMap for $name {
            fn plane(&self) -> &Plane {
                &self.0
            }
            fn from_plane_unchecked(p: Plane) -> Self {
                $name(p)
            }
        }

        impl $name {
            pub fn into_plane(self) -> Plane {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = Plane;
            fn deref(&self) -> &Plane {
                &self.0
            }
        }
    };
}

plane_newtype!(
    /// Image with values in [0, 1] and 1, 3 or 6 channels.
    ImagePlane
);
plane_newtype!(
    /// Six Sobel planes ordered (R_x, R_y, G_x, G_y, B_x, B_y).
    GradMap
);
plane_newtype!(
    /// Binary edge plane, 1 marks an edge pixel.
    EdgeMap
);

impl PlaneMap for Plane {
    fn plane(&self) -> &Plane {
        self
    }
    fn from_plane_unchecked(p: Plane) -> Self {
        p
    }
}

impl ImagePlane {
    /// Builds an image, clamping every value into [0, 1].
    pub fn new(plane: Plane) -> Result<Self> {
        if ![1, 3, 6].contains(&plane.c) {
            return Err(shape_err(
                "image",
                format!("images have 1, 3 or 6 channels, got {}", plane.c),
            ));
        }
        Ok(ImagePlane(plane.map(|v| v.clamp(0.0, 1.0))))
    }

    /// Luma (0.299, 0.587, 0.114) of an RGB image; single-channel images pass through.
    pub fn luma(&self) -> Result<Plane> {
        match self.c {
            1 => Ok(self.0.clone()),
            3 => Ok(Plane::from_fn(self.h, self.w, 1, |y, x, _| {
                0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
            })),
            c => Err(shape_err("luma", format!("expected 1 or 3 channels, got {c}"))),
        }
    }
}

impl GradMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if plane.c != 6 {
            return Err(shape_err("gradient map", format!("expected 6 channels, got {}", plane.c)));
        }
        Ok(GradMap(plane))
    }
}

impl EdgeMap {
    /// Binarizes: any value > 0.5 becomes 1.
    pub fn from_plane(plane: Plane) -> Result<Self> {
        if plane.c != 1 {
            return Err(shape_err("edge map", format!("expected 1 channel, got {}", plane.c)));
        }
        Ok(EdgeMap(plane.map(|v| if v > 0.5 { 1.0 } else { 0.0 })))
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Number of pyramid scales; factors run coarse to fine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub n_s: usize,
}

impl PyramidSpec {
    pub fn new(n_s: usize) -> Result<Self> {
        if n_s == 0 {
            return Err(arg_err("pyramid", "n_s must be >= 1"));
        }
        Ok(PyramidSpec { n_s })
    }

    /// Downscale factors, coarse to fine: `[2^(n_s-1), ..., 2, 1]`.
    pub fn factors(&self) -> Vec<usize> {
        (0..self.n_s).rev().map(|s| 1 << s).collect()
    }
}

// ---- Sobel -----------------------------------------------------------------

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses of channel `ch`, replicate-padded.
fn sobel_channel(p: &Plane, ch: usize) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (p.h, p.w);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        let ym = clamp_idx(y as isize - 1, h);
        let yp = clamp_idx(y as isize + 1, h);
        for x in 0..w {
            let xm = clamp_idx(x as isize - 1, w);
            let xp = clamp_idx(x as isize + 1, w);
            let v = |yy: usize, xx: usize| p.get(yy, xx, ch);
            gx[y * w + x] = (v(ym, xp) + 2.0 * v(y, xp) + v(yp, xp))
                - (v(ym, xm) + 2.0 * v(y, xm) + v(yp, xm));
            gy[y * w + x] = (v(yp, xm) + 2.0 * v(yp, x) + v(yp, xp))
                - (v(ym, xm) + 2.0 * v(ym, x) + v(ym, xp));
        }
    }
    (gx, gy)
}

/// Six-channel gradient map of an RGB image.
pub fn sobel_gradient_map(img: &ImagePlane) -> Result<GradMap> {
    if img.c != 3 {
        return Err(shape_err(
            "sobel_gradient_map",
            format!("expected a 3-channel image, got {} channels", img.c),
        ));
    }
    let (h, w) = (img.h, img.w);
    let mut out = Plane::zeros(h, w, 6);
    for ch in 0..3 {
        let (gx, gy) = sobel_channel(img, ch);
        for i in 0..h * w {
            out.data[i * 6 + 2 * ch] = gx[i];
            out.data[i * 6 + 2 * ch + 1] = gy[i];
        }
    }
    Ok(GradMap(out))
}

// ---- Gaussian --------------------------------------------------------------

/// Square 2-D kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::MIN, f64::max)
    }
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Sampled 2-D Gaussian normalized to unit sum. Even sizes use a
/// half-integer grid so the kernel stays symmetric.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size == 0 || !(sigma > 0.0) {
        return Err(arg_err(
            "gaussian_kernel",
            format!("size must be >= 1 and sigma > 0, got size {size}, sigma {sigma}"),
        ));
    }
    let g = gaussian_1d(size, sigma);
    let mut data: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Ok(Kernel { size, data })
}

/// Separable Gaussian blur of a single-channel plane with replicate borders.
fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = gaussian_1d(2 * radius + 1, sigma);
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (h, w) = (p.h, p.w);
    let r = radius as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * p.get(y, clamp_idx(x as isize + i as isize - r, w), 0))
                .sum();
        }
    }
    let mut out = Plane::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp_idx(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

// ---- Canny -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { sigma: 1.0, low: 0.1, high: 0.2 }
    }
}

/// Quantization grid for gradient components; removes last-bit rounding noise
/// so ties in non-maximum suppression resolve identically for equivalent inputs.
const GRAD_QUANTUM: f64 = 1e-9;

fn quantize(v: f64) -> f64 {
    (v / GRAD_QUANTUM).round() * GRAD_QUANTUM
}

/// Canny edge detector. Magnitudes are Sobel magnitudes divided by 4, so an
/// ideal unit step has magnitude 1 and `low`/`high` are in intensity units.
pub fn canny_edges(img: &ImagePlane, params: CannyParams) -> Result<EdgeMap> {
    let CannyParams { sigma, low, high } = params;
    if !(low > 0.0 && low < high) || !(sigma > 0.0) {
        return Err(arg_err(
            "canny_edges",
            format!("need sigma > 0 and 0 < low < high, got sigma {sigma}, low {low}, high {high}"),
        ));
    }
    let gray = img.luma()?;
    let smooth = gaussian_blur(&gray, sigma);
    let (gx, gy) = sobel_channel(&smooth, 0);
    let (h, w) = (img.h, img.w);
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for i in 0..h * w {
        let (x, y) = (quantize(gx[i] / 4.0), quantize(gy[i] / 4.0));
        mag[i] = quantize(x.hypot(y));
        let mut angle = y.atan2(x).to_degrees();
        if angle < 0.0 {
            angle += 180.0;
        }
        dir[i] = if !(22.5..157.5).contains(&angle) {
            0
        } else if angle < 67.5 {
            1
        } else if angle < 112.5 {
            2
        } else {
            3
        };
    }

    // Non-maximum suppression along the quantized gradient direction. Ties
    // keep the pixel further along the gradient, so plateaus stay one pixel wide.
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let m = mag[y * w + x];
            if m <= 0.0 {
                continue;
            }
            let (dx, dy): (isize, isize) = match dir[y * w + x] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let at = |ox: isize, oy: isize| {
                mag[clamp_idx(y as isize + oy, h) * w + clamp_idx(x as isize + ox, w)]
            };
            if m >= at(-dx, -dy) && m > at(dx, dy) {
                thin[y * w + x] = m;
            }
        }
    }

    // Hysteresis: flood from strong pixels through 8-connected weak ones.
    let mut out = Plane::zeros(h, w, 1);
    let mut queue = VecDeque::new();
    for i in 0..h * w {
        if thin[i] >= high {
            out.data[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.data[j] == 0.0 && thin[j] >= low {
                    out.data[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(EdgeMap(out))
}

/// `g * E`: each edge pixel stamps the kernel (anchored at `size / 2`) into a
/// zero-padded real mask.
pub fn edge_weight_mask(edges: &EdgeMap, g: &Kernel) -> Plane {
    let (h, w) = (edges.h, edges.w);
    let anchor = (g.size / 2) as isize;
    let mut out = Plane::zeros(h, w, 1);
    for qy in 0..h {
        for qx in 0..w {
            if edges.get(qy, qx, 0) <= 0.5 {
                continue;
            }
            for i in 0..g.size {
                let y = qy as isize + i as isize - anchor;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in 0..g.size {
                    let x = qx as isize + j as isize - anchor;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    out.data[y as usize * w + x as usize] += g.at(i, j);
                }
            }
        }
    }
    out
}

/// Keeps the top-left pixel of every `factor`×`factor` block.
pub fn downscale_nearest<P: PlaneMap>(map: &P, factor: usize) -> Result<P> {
    let p = map.plane();
    if factor == 0 || p.h % factor != 0 || p.w % factor != 0 {
        return Err(shape_err(
            "downscale_nearest",
            format!("{}x{} is not divisible by factor {factor}", p.h, p.w),
        ));
    }
    let out = Plane::from_fn(p.h / factor, p.w / factor, p.c, |y, x, ch| {
        p.get(y * factor, x * factor, ch)
    });
    Ok(P::from_plane_unchecked(out))
}

/// Bilinear resampling with half-pixel centres.
pub fn resize_bilinear(p: &Plane, th: usize, tw: usize) -> Plane {
    if (th, tw) == (p.h, p.w) {
        return p.clone();
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
        let s = s.clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..th).map(|y| coord(y, p.h, th)).collect();
    let xs: Vec<_> = (0..tw).map(|x| coord(x, p.w, tw)).collect();
    Plane::from_fn(th, tw, p.c, |y, x, ch| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let top = p.get(y0, x0, ch) * (1.0 - tx) + p.get(y0, x1, ch) * tx;
        let bottom = p.get(y1, x0, ch) * (1.0 - tx) + p.get(y1, x1, ch) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Decodes a PNG/JPEG as RGB (grayscale replicated) at its native size,
/// scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<ImagePlane> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImagePlane::new(Plane::new(h, w, 3, data)?)
}

/// [`load_image`] followed by a bilinear resize to `target` (h, w).
pub fn ingest_image(path: &Path, target: (usize, usize)) -> Result<ImagePlane> {
    let img = load_image(path)?;
    ImagePlane::new(resize_bilinear(&img, target.0, target.1))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.to_path_buf(), source }
}

/// Writes an RGB or grayscale image in [0, 1] as an 8-bit PNG.
pub fn save_png(img: &Plane, path: &Path) -> Result<()> {
    let (h, w, c) = img.shape();
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer size")
            .save(path)
            .map_err(|e| save_err(path, e)),
        3 => image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer size")
            .save(path)
            .map_err(|e| save_err(path, e)),
        _ => Err(shape_err("save_png", format!("cannot write {c} channels as PNG"))),
    }
}

/// Grayscale visualization: values affinely mapped from [min, max] to [0, 255];
/// a constant plane maps to 0.
pub fn visualize(p: &Plane) -> Plane {
    let (lo, hi) = p
        .data
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Plane::zeros(p.h, p.w, p.c);
    }
    p.map(|v| (v - lo) / (hi - lo))
}

/// Per-pixel magnitude of a gradient map, `sqrt(sum of squares)` over its six planes.
pub fn gradient_magnitude(g: &GradMap) -> Plane {
    Plane::from_fn(g.h, g.w, 1, |y, x, _| {
        (0..6).map(|ch| g.get(y, x, ch).powi(2)).sum::<f64>().sqrt()
    })
}
