use crate::error::{arg_err, Result};
use crate::imageops::{
    canny_edges, downscale_nearest, ingest_image, sobel_gradient_map, CannyParams, EdgeMap, GradMap, ImagePlane, Plane,
    PlaneMap,
};
use crate::losses::edge_weight_maps;
use crate::maskgen::{apply_mask, Mask, MaskSpec};
use crate::model::GeneratorInput;
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

const MIN_CONTRAST: f64 = 0.35;

/// Procedural shapes-on-gradient images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub shapes: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { count: 2000, size: 64, shapes: (2, 5) }
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn contrasting<R: Rng>(rng: &mut R, against: f64) -> [f64; 3] {
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if (luma(c) - against).abs() >= MIN_CONTRAST {
            return c;
        }
    }
}

fn synth_image<R: Rng>(rng: &mut R, size: usize, shapes: (usize, usize)) -> Plane {
    let s = size as f64;
    let c0: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let mut c1 = c0;
    for v in &mut c1 {
        *v = (*v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0);
    }
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let mut p = Plane::from_fn(size, size, 3, |y, x, c| {
        let t = ((y as f64 / s - 0.5) * dy + (x as f64 / s - 0.5) * dx + 0.71) / 1.42;
        c0[c] + (c1[c] - c0[c]) * t
    });
    let bg = luma([(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0, (c0[2] + c1[2]) / 2.0]);
    let n = rng.gen_range(shapes.0..=shapes.1);
    for _ in 0..n {
        let color = contrasting(rng, bg);
        match rng.gen_range(0..3) {
            0 => {
                let (h, w) = (rng.gen_range(0.15..0.5) * s, rng.gen_range(0.15..0.5) * s);
                let (y0, x0) = (rng.gen_range(0.0..s - h), rng.gen_range(0.0..s - w));
                fill(&mut p, color, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w);
            }
            1 => {
                let r = rng.gen_range(0.08..0.25) * s;
                let (cy, cx) = (rng.gen_range(r..s - r), rng.gen_range(r..s - r));
                fill(&mut p, color, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
            }
            _ => {
                let a = rng.gen_range(0.0..std::f64::consts::PI);
                let (ny, nx) = (a.sin(), a.cos());
                let period = rng.gen_range(0.12..0.3) * s;
                let (y0, x0) = (rng.gen_range(0.0..s * 0.5), rng.gen_range(0.0..s * 0.5));
                let ext = rng.gen_range(0.3..0.5) * s;
                fill(&mut p, color, |y, x| {
                    let inside = y >= y0 && y < y0 + ext && x >= x0 && x < x0 + ext;
                    inside && ((y * ny + x * nx) / period).rem_euclid(1.0) < 0.5
                });
            }
        }
    }
    p
}

fn fill(p: &mut Plane, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
    for y in 0..p.height() {
        for x in 0..p.width() {
            if inside(y as f64 + 0.5, x as f64 + 0.5) {
                for (c, v) in color.iter().enumerate() {
                    p.set(y, x, c, *v);
                }
            }
        }
    }
}

fn image_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Deterministic synthetic image set; every image has a non-empty edge map
/// under `canny`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, canny: CannyParams) -> Result<Vec<ImagePlane>> {
    if spec.size < 8 || spec.shapes.0 == 0 || spec.shapes.0 > spec.shapes.1 {
        return Err(arg_err("synth_dataset", format!("invalid spec {spec:?}")));
    }
    let make = |i: usize| -> Result<ImagePlane> {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, i));
        loop {
            let img = ImagePlane::new(synth_image(&mut rng, spec.size, spec.shapes))?;
            if canny_edges(&img, canny)?.count() > 0 {
                return Ok(img);
            }
        }
    };
    crate::exec::map_indexed(spec.count, make).into_iter().collect()
}

/// SHA-256 over image shapes and f64 values.
pub fn images_digest(images: &[ImagePlane]) -> String {
    let mut h = Sha256::new();
    for img in images {
        let (a, b, c) = img.shape();
        for d in [a, b, c] {
            h.update((d as u64).to_le_bytes());
        }
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Directory { path: PathBuf, size: usize },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Loads images from a source; unreadable files are skipped with a warning.
pub fn load_images(source: &DataSource, seed: u64, canny: CannyParams) -> Result<Vec<ImagePlane>> {
    match source {
        DataSource::Synthetic(spec) => synth_dataset(spec, seed, canny),
        DataSource::Directory { path, size } => {
            let mut out = Vec::new();
            for p in list_images(path)? {
                match ingest_image(&p, (*size, *size)) {
                    Ok(img) => out.push(img),
                    Err(e) => log::warn!("skipping {}: {e}", p.display()),
                }
            }
            Ok(out)
        }
    }
}

/// Image with its ground-truth structure.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImagePlane,
    pub grads: GradMap,
    pub edges: EdgeMap,
}

impl Sample {
    pub fn prepare(image: ImagePlane, canny: CannyParams) -> Result<Sample> {
        let grads = sobel_gradient_map(&image)?;
        let edges = canny_edges(&image, canny)?;
        Ok(Sample { image, grads, edges })
    }
}

/// Prepared samples plus a digest of their source images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub digest: String,
}

impl Dataset {
    pub fn new(images: Vec<ImagePlane>, canny: CannyParams) -> Result<Dataset> {
        let digest = images_digest(&images);
        let samples = crate::exec::map_indexed(images.len(), |i| Sample::prepare(images[i].clone(), canny))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, digest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n >= self.samples.len() {
            return Err(arg_err("dataset split", format!("cannot hold out {n} of {} samples", self.samples.len())));
        }
        let tail = self.samples.split_off(self.samples.len() - n);
        let digest = self.digest.clone();
        Ok((Dataset { samples: self.samples, digest: digest.clone() }, Dataset { samples: tail, digest }))
    }
}

/// Ground truth at one structure scale.
#[derive(Clone, Debug)]
pub struct ScaleTargets<T> {
    pub factor: usize,
    pub grads: Tensor<T>,
    pub edges: Tensor<T>,
    pub mask: Tensor<T>,
    /// Gaussian-smoothed edges for the edge-weighted term.
    pub edge_weights: Tensor<T>,
}

/// One training batch: ground truth, masked inputs and structure pyramid.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub image: Tensor<T>,
    pub grads: Tensor<T>,
    pub edges: Tensor<T>,
    pub mask: Tensor<T>,
    pub input: GeneratorInput<T>,
    /// Coarse to fine.
    pub pyramid: Vec<ScaleTargets<T>>,
}

fn stack<'a, T: Real, P: PlaneMap + 'a>(maps: impl IntoIterator<Item = &'a P>) -> Result<Tensor<T>> {
    Tensor::stack(&maps.into_iter().map(|p| p.plane().to_tensor::<T>()).collect::<Vec<_>>())
}

/// Builds a batch from explicit samples and masks. `factors` lists the
/// pyramid downscale factors, coarse to fine.
pub fn assemble_batch<T: Real>(samples: &[&Sample], masks: &[Mask], factors: &[usize]) -> Result<Batch<T>> {
    if samples.is_empty() || samples.len() != masks.len() {
        return Err(arg_err("make_batch", format!("{} samples for {} masks", samples.len(), masks.len())));
    }
    let mut hat_i = Vec::new();
    let mut hat_c = Vec::new();
    let mut hat_e = Vec::new();
    for (s, m) in samples.iter().zip(masks) {
        hat_i.push(apply_mask(&s.image, m)?);
        hat_c.push(apply_mask(&s.grads, m)?);
        hat_e.push(apply_mask(&s.edges, m)?);
    }
    let mask: Tensor<T> = stack(masks)?;
    let input = GeneratorInput { image: stack(&hat_i)?, grads: stack(&hat_c)?, edges: stack(&hat_e)?, mask: mask.clone() };
    let mut pyramid = Vec::with_capacity(factors.len());
    for &f in factors {
        let mut g = Vec::new();
        let mut e = Vec::new();
        let mut m = Vec::new();
        for (s, mk) in samples.iter().zip(masks) {
            g.push(downscale_nearest(&s.grads, f)?);
            e.push(downscale_nearest(&s.edges, f)?);
            m.push(downscale_nearest(mk, f)?);
        }
        let edges: Tensor<T> = stack(&e)?;
        pyramid.push(ScaleTargets {
            factor: f,
            grads: stack(&g)?,
            edge_weights: edge_weight_maps(&edges)?,
            edges,
            mask: stack(&m)?,
        });
    }
    Ok(Batch {
        image: stack(samples.iter().map(|s| &s.image))?,
        grads: stack(samples.iter().map(|s| &s.grads))?,
        edges: stack(samples.iter().map(|s| &s.edges))?,
        mask,
        input,
        pyramid,
    })
}

/// Draws `batch_size` samples and masks from `rng`.
pub fn make_batch<T: Real, R: Rng>(
    data: &Dataset,
    mask: &MaskSpec,
    batch_size: usize,
    factors: &[usize],
    rng: &mut R,
) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(arg_err("make_batch", "dataset is empty"));
    }
    if batch_size == 0 {
        return Err(arg_err("make_batch", "batch size must be positive"));
    }
    let mut picked = Vec::with_capacity(batch_size);
    let mut masks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &data.samples[rng.gen_range(0..data.len())];
        masks.push(mask.generate((s.image.height(), s.image.width()), rng)?);
        picked.push(s);
    }
    assemble_batch(&picked, &masks, factors)
}
