//! Corruption masks (0 = known, 1 = missing) and the masking/composition
//! rules that join predictions with known content.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::imageops::{Plane, PlaneMap};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Binary (h, w, 1) plane; 1 marks a missing pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Plane);

impl PlaneMap for Mask {
    fn plane(&self) -> &Plane {
        &self.0
    }
    fn from_plane_unchecked(p: Plane) -> Self {
        Mask(p)
    }
}

impl std::ops::Deref for Mask {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

impl Mask {
    /// Any value > 0.5 is missing.
    pub fn from_plane(p: Plane) -> Result<Self> {
        if p.channels() != 1 {
            return Err(shape_err("mask", format!("expected 1 channel, got {}", p.channels())));
        }
        Ok(Mask(p.map(|v| if v > 0.5 { 1.0 } else { 0.0 })))
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask(Plane::zeros(h, w, 1))
    }

    pub fn full(h: usize, w: usize) -> Self {
        Mask(Plane::from_fn(h, w, 1, |_, _, _| 1.0))
    }

    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.get(y, x, 0) > 0.5
    }

    pub fn missing_count(&self) -> usize {
        self.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Fraction of missing pixels.
    pub fn area_ratio(&self) -> f64 {
        self.missing_count() as f64 / (self.height() * self.width()) as f64
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Center,
    Random,
}

/// Random free-form strokes. Widths and lengths are given at
/// `reference_size` pixels and scale linearly with the image side.
/// Strokes reflect off the image border. When `area` is set, draws whose
/// masked fraction falls outside it are redrawn, up to a fixed budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrokeSpec {
    pub strokes: (usize, usize),
    pub width: (f64, f64),
    pub length: (f64, f64),
    pub vertices: (usize, usize),
    pub reference_size: usize,
    pub area: Option<(f64, f64)>,
}

impl Default for StrokeSpec {
    fn default() -> Self {
        StrokeSpec {
            strokes: (1, 5),
            width: (5.0, 28.0),
            length: (40.0, 110.0),
            vertices: (4, 12),
            reference_size: 256,
            area: Some((0.05, 0.60)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    Regular { hole: (usize, usize), position: Placement },
    Irregular(StrokeSpec),
    /// No missing pixels; useful for identity checks.
    Empty,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::Irregular(StrokeSpec::default())
    }
}

impl MaskSpec {
    /// A centered regular hole covering the same fraction as 128 of 256.
    pub fn regular_half(size: usize) -> Self {
        MaskSpec::Regular { hole: (size / 2, size / 2), position: Placement::Center }
    }

    pub fn validate(&self, size: (usize, usize)) -> Result<()> {
        match *self {
            MaskSpec::Regular { hole, .. } => {
                if hole.0 > size.0 || hole.1 > size.1 {
                    return Err(arg_err(
                        "regular_mask",
                        format!("hole {hole:?} does not fit a {size:?} image"),
                    ));
                }
            }
            MaskSpec::Irregular(s) => {
                let ok = s.strokes.0 <= s.strokes.1
                    && s.width.0 > 0.0
                    && s.width.0 <= s.width.1
                    && s.length.0 > 0.0
                    && s.length.0 <= s.length.1
                    && s.vertices.0 >= 2
                    && s.vertices.0 <= s.vertices.1
                    && s.reference_size > 0
                    && s.area.map_or(true, |(lo, hi)| (0.0..=1.0).contains(&lo) && lo <= hi && hi <= 1.0);
                if !ok {
                    return Err(arg_err("irregular_mask", format!("invalid stroke spec {s:?}")));
                }
            }
            MaskSpec::Empty => {}
        }
        Ok(())
    }

    pub fn generate<R: Rng>(&self, size: (usize, usize), rng: &mut R) -> Result<Mask> {
        match *self {
            MaskSpec::Regular { hole, position } => regular_mask(size, hole, position, rng),
            MaskSpec::Irregular(s) => irregular_mask_with(size, &s, rng),
            MaskSpec::Empty => Ok(Mask::empty(size.0, size.1)),
        }
    }
}

/// Axis-aligned rectangular hole of `hole` = (hh, hw) pixels.
pub fn regular_mask<R: Rng>(
    size: (usize, usize),
    hole: (usize, usize),
    position: Placement,
    rng: &mut R,
) -> Result<Mask> {
    let (h, w) = size;
    let (hh, hw) = hole;
    if hh > h || hw > w {
        return Err(arg_err(
            "regular_mask",
            format!("hole {hh}x{hw} does not fit a {h}x{w} image"),
        ));
    }
    let (top, left) = match position {
        Placement::Center => ((h - hh) / 2, (w - hw) / 2),
        Placement::Random => (rng.gen_range(0..=h - hh), rng.gen_range(0..=w - hw)),
    };
    Ok(Mask(Plane::from_fn(h, w, 1, |y, x, _| {
        let inside = (top..top + hh).contains(&y) && (left..left + hw).contains(&x);
        if inside {
            1.0
        } else {
            0.0
        }
    })))
}

/// Free-form stroke mask, deterministic for a fixed seed.
pub fn irregular_mask(size: (usize, usize), spec: &StrokeSpec, seed: u64) -> Result<Mask> {
    irregular_mask_with(size, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn irregular_mask_with<R: Rng>(
    size: (usize, usize),
    spec: &StrokeSpec,
    rng: &mut R,
) -> Result<Mask> {
    MaskSpec::Irregular(*spec).validate(size)?;
    let mut mask = draw_strokes(size, spec, rng);
    if let (Some((lo, hi)), true) = (spec.area, spec.strokes.1 > 0) {
        for _ in 1..REDRAW_BUDGET {
            let r = mask.area_ratio();
            if (lo..=hi).contains(&r) {
                break;
            }
            mask = draw_strokes(size, spec, rng);
        }
    }
    Ok(mask)
}

const REDRAW_BUDGET: usize = 64;

fn draw_strokes<R: Rng>(size: (usize, usize), spec: &StrokeSpec, rng: &mut R) -> Mask {
    let (h, w) = size;
    let scale = h.max(w) as f64 / spec.reference_size as f64;
    let mut plane = Plane::zeros(h, w, 1);
    let strokes = rng.gen_range(spec.strokes.0..=spec.strokes.1);
    for _ in 0..strokes {
        let vertices = rng.gen_range(spec.vertices.0..=spec.vertices.1);
        let radius = rng.gen_range(spec.width.0..=spec.width.1) * scale / 2.0;
        let mut p = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        for _ in 1..vertices {
            heading += rng.gen_range(-1.2..1.2);
            let len = rng.gen_range(spec.length.0..=spec.length.1) * scale;
            let (mut dy, mut dx) = (heading.sin(), heading.cos());
            let mut left = len;
            while left > 1e-9 {
                let step = left.min(max_leg(p, (dy, dx), (h, w)));
                let q = (p.0 + step * dy, p.1 + step * dx);
                stamp_capsule(&mut plane, p, q, radius);
                p = q;
                left -= step;
                if left > 1e-9 {
                    if p.0 <= 1e-9 || p.0 >= (h - 1) as f64 - 1e-9 {
                        dy = -dy;
                    }
                    if p.1 <= 1e-9 || p.1 >= (w - 1) as f64 - 1e-9 {
                        dx = -dx;
                    }
                }
            }
            heading = dy.atan2(dx);
        }
    }
    Mask(plane)
}

/// Distance along a unit direction before the point leaves the pixel-centre box.
fn max_leg(p: (f64, f64), d: (f64, f64), (h, w): (usize, usize)) -> f64 {
    let axis = |pos: f64, dir: f64, hi: f64| {
        if dir > 1e-12 {
            (hi - pos) / dir
        } else if dir < -1e-12 {
            -pos / dir
        } else {
            f64::INFINITY
        }
    };
    axis(p.0, d.0, (h - 1) as f64).min(axis(p.1, d.1, (w - 1) as f64)).max(0.0).max(1e-6)
}

/// Marks every pixel centre within `radius` of the segment p–q.
fn stamp_capsule(plane: &mut Plane, p: (f64, f64), q: (f64, f64), radius: f64) {
    let (h, w) = (plane.height(), plane.width());
    let y0 = (p.0.min(q.0) - radius).floor().max(0.0) as usize;
    let y1 = ((p.0.max(q.0) + radius).ceil() as usize).min(h - 1);
    let x0 = (p.1.min(q.1) - radius).floor().max(0.0) as usize;
    let x1 = ((p.1.max(q.1) + radius).ceil() as usize).min(w - 1);
    let (dy, dx) = (q.0 - p.0, q.1 - p.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 - p.0, x as f64 - p.1);
            let t = if len2 > 0.0 { ((py * dy + px * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= r2 {
                plane.set(y, x, 0, 1.0);
            }
        }
    }
}

fn check_spatial(op: &'static str, p: &Plane, m: &Mask) -> Result<()> {
    if (p.height(), p.width()) != (m.height(), m.width()) {
        return Err(shape_err(
            op,
            format!(
                "plane is {}x{} but mask is {}x{}",
                p.height(),
                p.width(),
                m.height(),
                m.width()
            ),
        ));
    }
    Ok(())
}

/// `I ⊙ (1 − M)`, broadcasting the mask over channels.
pub fn apply_mask<P: PlaneMap>(map: &P, mask: &Mask) -> Result<P> {
    let p = map.plane();
    check_spatial("apply_mask", p, mask)?;
    let out = Plane::from_fn(p.height(), p.width(), p.channels(), |y, x, c| {
        p.get(y, x, c) * (1.0 - mask.get(y, x, 0))
    });
    Ok(P::from_plane_unchecked(out))
}

/// `known + pred ⊙ M`.
pub fn compose<P: PlaneMap>(known: &P, pred: &P, mask: &Mask) -> Result<P> {
    let (k, p) = (known.plane(), pred.plane());
    if k.shape() != p.shape() {
        return Err(shape_err(
            "compose",
            format!("known {:?} vs prediction {:?}", k.shape(), p.shape()),
        ));
    }
    check_spatial("compose", k, mask)?;
    let out = Plane::from_fn(k.height(), k.width(), k.channels(), |y, x, c| {
        k.get(y, x, c) + p.get(y, x, c) * mask.get(y, x, 0)
    });
    Ok(P::from_plane_unchecked(out))
}

/// 8-bit grayscale PNG, 255 = missing.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    crate::imageops::save_png(mask.plane(), path)
}

/// Loads a mask PNG, mapping 0 to known and anything else to missing.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect();
    Ok(Mask(Plane::new(h, w, 1, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_regular_hole_matches_the_reference_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = regular_mask((256, 256), (128, 128), Placement::Center, &mut rng).unwrap();
        assert_eq!(m.missing_count(), 128 * 128);
        for y in 0..256 {
            for x in 0..256 {
                let inside = (64..=191).contains(&y) && (64..=191).contains(&x);
                assert_eq!(m.is_missing(y, x), inside);
            }
        }
    }

    #[test]
    fn full_size_hole_and_oversized_hole() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = regular_mask((8, 6), (8, 6), Placement::Random, &mut rng).unwrap();
        assert_eq!(m.missing_count(), 48);
        assert!(regular_mask((8, 6), (9, 6), Placement::Center, &mut rng).is_err());
    }

    #[test]
    fn random_single_pixel_hole_is_reproducible() {
        let gen = |seed| {
            regular_mask((16, 16), (1, 1), Placement::Random, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
        };
        assert_eq!(gen(42), gen(42));
        assert_eq!(gen(42).missing_count(), 1);
    }

    #[test]
    fn zero_strokes_give_an_empty_mask() {
        let spec = StrokeSpec { strokes: (0, 0), ..StrokeSpec::default() };
        assert_eq!(irregular_mask((64, 64), &spec, 3).unwrap().missing_count(), 0);
    }

    #[test]
    fn irregular_masks_are_deterministic_per_seed() {
        let spec = StrokeSpec::default();
        assert_eq!(irregular_mask((64, 64), &spec, 9).unwrap(), irregular_mask((64, 64), &spec, 9).unwrap());
        assert_ne!(irregular_mask((64, 64), &spec, 9).unwrap(), irregular_mask((64, 64), &spec, 10).unwrap());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = irregular_mask((32, 40), &StrokeSpec::default(), 1).unwrap();
        save_mask_png(&m, &path).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), m);
    }
}
