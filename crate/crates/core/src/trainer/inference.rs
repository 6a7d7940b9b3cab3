use super::data::{assemble_batch, Dataset, Sample};
use crate::error::{shape_err, Result};
use crate::imageops::{CannyParams, GradMap, ImagePlane, Plane};
use crate::losses::FeatureExtractor;
use crate::maskgen::{apply_mask, compose, Mask, MaskSpec};
use crate::metrics::{evaluate_set, EvalPair, MetricsReport};
use crate::model::{generate, GeneratorConfig, ModelParams};
use crate::tensor::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const HOLDOUT_SALT: u64 = 0x401d_0u64;
const CHUNK: usize = 8;

/// Generator output for one image.
#[derive(Clone, Debug)]
pub struct Inpainted {
    /// `Î + I_pred ⊙ M`.
    pub composite: ImagePlane,
    pub raw: ImagePlane,
    /// Predicted gradient maps, coarse to fine.
    pub structure: Vec<GradMap>,
}

fn check_size(cfg: &GeneratorConfig, img: &Plane, mask: &Mask) -> Result<()> {
    let s = cfg.image_size;
    if img.height() != s || img.width() != s {
        return Err(shape_err(
            "inpaint",
            format!("image is {}x{} but the model expects {s}x{s}", img.height(), img.width()),
        ));
    }
    if mask.height() != s || mask.width() != s {
        return Err(shape_err(
            "inpaint",
            format!("mask is {}x{} but the model expects {s}x{s}", mask.height(), mask.width()),
        ));
    }
    Ok(())
}

/// Inpaints prepared samples with their masks, processing in small chunks.
pub fn inpaint_batch<T: Real>(
    params: &ModelParams<T>,
    cfg: &GeneratorConfig,
    samples: &[&Sample],
    masks: &[Mask],
) -> Result<Vec<Inpainted>> {
    let factors: Vec<usize> = cfg.structure_scales().into_iter().map(GeneratorConfig::scale_factor).collect();
    let mut out = Vec::with_capacity(samples.len());
    for (ss, ms) in samples.chunks(CHUNK).zip(masks.chunks(CHUNK)) {
        for (s, m) in ss.iter().zip(ms) {
            check_size(cfg, &s.image, m)?;
        }
        let batch = assemble_batch::<T>(ss, ms, &factors)?;
        let pred = generate(params, cfg, &batch.input)?;
        for (i, (s, m)) in ss.iter().zip(ms).enumerate() {
            let raw = ImagePlane::new(Plane::from_tensor(&pred.i_pred, i))?;
            let known = apply_mask(&s.image, m)?;
            let composite = compose(&known, &raw, m)?;
            let structure = pred
                .c_pred
                .iter()
                .map(|c| GradMap::new(Plane::from_tensor(c, i)))
                .collect::<Result<Vec<_>>>()?;
            out.push(Inpainted { composite, raw, structure });
        }
    }
    Ok(out)
}

/// Inpaints one image. Structure inputs are extracted from `image` and then
/// masked, so pixel values under the hole only influence the one-pixel
/// Sobel border around it.
pub fn inpaint<T: Real>(
    params: &ModelParams<T>,
    cfg: &GeneratorConfig,
    image: &ImagePlane,
    mask: &Mask,
    canny: CannyParams,
) -> Result<Inpainted> {
    check_size(cfg, image, mask)?;
    let sample = Sample::prepare(image.clone(), canny)?;
    Ok(inpaint_batch(params, cfg, &[&sample], std::slice::from_ref(mask))?.remove(0))
}

/// Fills the hole with the per-channel mean of the known pixels.
pub fn mean_fill(image: &ImagePlane, mask: &Mask) -> Result<ImagePlane> {
    let known = apply_mask(image, mask)?;
    let n = (mask.height() * mask.width() - mask.missing_count()) as f64;
    let means: Vec<f64> = (0..image.channels())
        .map(|c| {
            if n == 0.0 {
                return 0.5;
            }
            let mut s = 0.0;
            for y in 0..image.height() {
                for x in 0..image.width() {
                    if !mask.is_missing(y, x) {
                        s += image.get(y, x, c);
                    }
                }
            }
            s / n
        })
        .collect();
    let fill = ImagePlane::new(Plane::from_fn(image.height(), image.width(), image.channels(), |_, _, c| means[c]))?;
    compose(&known, &fill, mask)
}

/// Deterministic evaluation masks, identical for every model trained with
/// the same seed.
pub fn holdout_masks(spec: &MaskSpec, size: usize, count: usize, seed: u64) -> Result<Vec<Mask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HOLDOUT_SALT);
    (0..count).map(|_| spec.generate((size, size), &mut rng)).collect()
}

/// Metrics of the model and of the mean-fill baseline on held-out images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HoldoutEval {
    pub model: MetricsReport,
    pub mean_fill: MetricsReport,
    /// Σ_s mean |C_pred − C| over the held-out set, when structure heads exist.
    pub structure_l1: Option<f64>,
    /// Σ_s mean edge-weighted |C_pred − C|.
    pub structure_edge: Option<f64>,
}

pub fn evaluate_holdout<T: Real>(
    params: &ModelParams<T>,
    cfg: &GeneratorConfig,
    holdout: &Dataset,
    masks: &[Mask],
    fx: &dyn FeatureExtractor<f64>,
) -> Result<HoldoutEval> {
    let samples: Vec<&Sample> = holdout.samples.iter().collect();
    let outputs = inpaint_batch(params, cfg, &samples, masks)?;
    let name = |i: usize| format!("holdout-{i:04}");
    let model_pairs: Vec<EvalPair> = outputs
        .iter()
        .zip(&samples)
        .enumerate()
        .map(|(i, (o, s))| EvalPair { name: name(i), output: o.composite.clone(), truth: s.image.clone() })
        .collect();
    let fill_pairs = samples
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (s, m))| Ok(EvalPair { name: name(i), output: mean_fill(&s.image, m)?, truth: s.image.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let (structure_l1, structure_edge) = structure_errors(cfg, &samples, &outputs)?;
    Ok(HoldoutEval {
        model: evaluate_set(&model_pairs, fx)?,
        mean_fill: evaluate_set(&fill_pairs, fx)?,
        structure_l1,
        structure_edge,
    })
}

fn structure_errors(cfg: &GeneratorConfig, samples: &[&Sample], outputs: &[super::Inpainted]) -> Result<(Option<f64>, Option<f64>)> {
    let scales = cfg.structure_scales();
    if scales.is_empty() || samples.is_empty() {
        return Ok((None, None));
    }
    let kernel = crate::losses::edge_kernel();
    let (mut l1, mut edge) = (0.0, 0.0);
    for (k, &scale) in scales.iter().enumerate() {
        let f = GeneratorConfig::scale_factor(scale);
        let (mut sa, mut se) = (0.0, 0.0);
        for (s, o) in samples.iter().zip(outputs) {
            let gt = crate::imageops::downscale_nearest(&s.grads, f)?;
            let e = crate::imageops::downscale_nearest(&s.edges, f)?;
            let w = crate::imageops::edge_weight_mask(&e, &kernel);
            let pred = &o.structure[k];
            let n = gt.data().len() as f64;
            let c = gt.channels();
            for (i, (a, b)) in pred.data().iter().zip(gt.data()).enumerate() {
                let d = (a - b).abs();
                sa += d / n;
                se += d * w.data()[i / c] / n;
            }
        }
        l1 += sa / samples.len() as f64;
        edge += se / samples.len() as f64;
    }
    Ok((Some(l1), Some(edge)))
}
