//! Training objectives.

mod features;

pub use features::{global_pool, FeatureExtractor, IdentityExtractor, RandomConvExtractor, EXTRACTOR_CHANNELS};

use crate::error::{arg_err, shape_err, Result};
use crate::imageops::{edge_weight_mask, gaussian_kernel, EdgeMap, Kernel, Plane};
use crate::tensor::{Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Edge-weighting kernel of the structure loss.
pub const EDGE_KERNEL_SIZE: usize = 10;
pub const EDGE_KERNEL_SIGMA: f64 = 1.0;
const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub style: f64,
    pub adversarial: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { perceptual: 0.1, style: 250.0, adversarial: 0.1, alpha: 0.1, beta: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("adversarial", self.adversarial),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(arg_err("loss weights", format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn edge_kernel() -> Kernel {
    gaussian_kernel(EDGE_KERNEL_SIZE, EDGE_KERNEL_SIGMA).expect("fixed kernel is valid")
}

/// Gaussian-smoothed edge weights `g ∗ E` for a (n, 1, h, w) edge batch.
pub fn edge_weight_maps<T: Real>(edges: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, _, _] = edges.shape();
    if c != 1 {
        return Err(shape_err("edge_weight_maps", format!("expected 1 channel, got {:?}", edges.shape())));
    }
    let kernel = edge_kernel();
    let parts = (0..n)
        .map(|i| {
            let e = EdgeMap::from_plane(Plane::from_tensor(edges, i))?;
            Ok(edge_weight_mask(&e, &kernel).to_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Per-scale structure terms.
#[derive(Clone, Debug)]
pub struct StructureTerms {
    /// mean |C_pred − C| per scale.
    pub l1: Vec<Var>,
    /// mean (|C_pred − C| ⊙ M_E) per scale.
    pub edge: Vec<Var>,
    /// Σ_s l1_s + β·edge_s.
    pub total: Var,
}

/// Multi-scale gradient-map loss with edge-weighted regularization.
/// `edge_weights[s]` is `g ∗ E` at scale s, shape (n, 1, h_s, w_s).
pub fn structure_loss<T: Real>(
    g: &mut Graph<T>,
    c_pred: &[Var],
    c_gt: &[Var],
    edge_weights: &[Var],
    beta: f64,
) -> Result<StructureTerms> {
    if c_pred.is_empty() || c_pred.len() != c_gt.len() || c_pred.len() != edge_weights.len() {
        return Err(arg_err(
            "structure_loss",
            format!(
                "scale counts differ: {} predictions, {} targets, {} edge maps",
                c_pred.len(),
                c_gt.len(),
                edge_weights.len()
            ),
        ));
    }
    let mut l1 = Vec::new();
    let mut edge = Vec::new();
    let mut total = None;
    for ((&p, &t), &m) in c_pred.iter().zip(c_gt).zip(edge_weights) {
        let (sp, st, sm) = (g.shape(p), g.shape(t), g.shape(m));
        if sp != st || sm != [sp[0], 1, sp[2], sp[3]] {
            return Err(shape_err(
                "structure_loss",
                format!("prediction {sp:?}, target {st:?}, edge weights {sm:?}"),
            ));
        }
        let diff = g.sub(p, t)?;
        let abs = g.abs(diff)?;
        let a = g.mean(abs)?;
        let weighted = g.mul(abs, m)?;
        let e = g.mean(weighted)?;
        let term = g.affine(e, T::from_f64_lossy(beta), T::zero())?;
        let term = g.add(a, term)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        l1.push(a);
        edge.push(e);
    }
    Ok(StructureTerms { l1, edge, total: total.expect("non-empty") })
}

pub fn rec_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    g.mean_abs_diff(pred, gt)
}

fn sum_vars<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or_else(|| arg_err("loss", "no terms to sum"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Σ_i mean |φ_i(pred) − φ_i(gt)|.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    fx: &dyn FeatureExtractor<T>,
    pred: Var,
    gt: Var,
) -> Result<Var> {
    let (fp, fg) = (fx.features(g, pred)?, fx.features(g, gt)?);
    let terms = fp
        .iter()
        .zip(&fg)
        .map(|(&a, &b)| g.mean_abs_diff(a, b))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(g, &terms)
}

/// Channel Gram matrices (n, 1, c, c), normalized by c·h·w.
pub fn gram<T: Real>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let [n, c, h, w] = g.shape(features);
    let flat = g.reshape(features, [n, 1, c, h * w])?;
    let prod = g.matmul(flat, flat, false, true)?;
    g.scale(prod, T::one() / T::from_usize(c * h * w).expect("size fits"))
}

/// Σ_i mean |G(φ_i(pred)) − G(φ_i(gt))|.
pub fn style_loss<T: Real>(g: &mut Graph<T>, fx: &dyn FeatureExtractor<T>, pred: Var, gt: Var) -> Result<Var> {
    let (fp, fg) = (fx.features(g, pred)?, fx.features(g, gt)?);
    let mut terms = Vec::with_capacity(fp.len());
    for (&a, &b) in fp.iter().zip(&fg) {
        let (ga, gb) = (gram(g, a)?, gram(g, b)?);
        terms.push(g.mean_abs_diff(ga, gb)?);
    }
    sum_vars(g, &terms)
}

fn log_prob<T: Real>(g: &mut Graph<T>, logits: Var, real: bool) -> Result<Var> {
    let z = if real { logits } else { g.scale(logits, -T::one())? };
    // σ(−z) = 1 − σ(z)
    let p = g.sigmoid(z)?;
    let eps = T::from_f64_lossy(LOG_EPS);
    let p = g.clamp(p, eps, T::one() - eps)?;
    let l = g.ln(p)?;
    g.mean(l)
}

fn check_scores<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    crate::tensor::check_finite(g.value(v), &format!("{what} discriminator scores"))
}

/// −mean log σ(D(I)) − mean log(1 − σ(D(I_comp))).
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    check_scores(g, real_logits, "real")?;
    check_scores(g, fake_logits, "fake")?;
    let a = log_prob(g, real_logits, true)?;
    let b = log_prob(g, fake_logits, false)?;
    let s = g.add(a, b)?;
    g.scale(s, -T::one())
}

/// mean log(1 − σ(D(I_comp))), or −mean log σ(D(I_comp)) when
/// `non_saturating`.
pub fn generator_adv_loss<T: Real>(g: &mut Graph<T>, fake_logits: Var, non_saturating: bool) -> Result<Var> {
    check_scores(g, fake_logits, "fake")?;
    if non_saturating {
        let l = log_prob(g, fake_logits, true)?;
        g.scale(l, -T::one())
    } else {
        log_prob(g, fake_logits, false)
    }
}

/// Scalar loss parts of the generator objective. `structure` is `None`
/// when no structure heads are active.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<V> {
    pub rec: V,
    pub perceptual: V,
    pub style: V,
    pub adversarial: V,
    pub structure: Option<V>,
}

/// rec + λ1·perc + λ2·style + λ3·adv + α·structure.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let c = T::from_f64_lossy;
    let mut terms = vec![parts.rec];
    for (v, k) in [(parts.perceptual, w.perceptual), (parts.style, w.style), (parts.adversarial, w.adversarial)] {
        terms.push(g.scale(v, c(k))?);
    }
    if let Some(s) = parts.structure {
        terms.push(g.scale(s, c(w.alpha))?);
    }
    sum_vars(g, &terms)
}

/// Same combination on plain numbers.
pub fn total_value(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(parts.rec
        + w.perceptual * parts.perceptual
        + w.style * parts.style
        + w.adversarial * parts.adversarial
        + w.alpha * parts.structure.unwrap_or(0.0))
}

/// One training step's loss values, serialized as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    #[serde(flatten)]
    pub terms: IndexMap<String, f64>,
}

impl LossReport {
    pub fn new(step: u64) -> Self {
        LossReport { step, terms: IndexMap::new() }
    }

    pub fn set(&mut self, name: impl Into<String>, v: f64) {
        self.terms.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn structure_scales(&self) -> usize {
        self.terms.keys().filter(|k| k.starts_with("structure_s")).count()
    }

    /// Recomputes the generator total from the recorded parts.
    pub fn recombine(&self, w: &LossWeights) -> Result<f64> {
        let part = |k: &str| {
            self.get(k).ok_or_else(|| arg_err("loss report", format!("missing term {k}")))
        };
        let n = self.structure_scales();
        let structure = if n == 0 {
            None
        } else {
            let mut s = 0.0;
            for i in 0..n {
                s += part(&format!("structure_s{i}"))? + w.beta * part(&format!("edge_s{i}"))?;
            }
            Some(s)
        };
        total_value(
            &LossParts {
                rec: part("rec")?,
                perceptual: part("perc")?,
                style: part("style")?,
                adversarial: part("adv_g")?,
                structure,
            },
            w,
        )
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// First term whose value is not finite, in recording order.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.terms.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.as_str())
    }
}
