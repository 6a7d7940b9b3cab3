//! Image quality metrics and set-level evaluation.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::exec;
use crate::imageops::{gaussian_kernel, ImagePlane, Kernel, Plane};
use crate::losses::FeatureExtractor;
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub const PSNR_CAP: f64 = 99.0;
pub const REPORT_VERSION: u32 = 1;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const UQI_WINDOW: usize = 8;
const VIF_SIGMA_NSQ: f64 = 2.0;
const VIF_SCALES: u32 = 4;
const VIF_EPS: f64 = 1e-10;

fn same_shape(op: &'static str, a: &Plane, b: &Plane) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// 100 · mean |a − b| over all channels.
pub fn l1_percent(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape("l1_percent", a, b)?;
    let n = a.data().len() as f64;
    Ok(100.0 * a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// 10·log10(1 / MSE) for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Single-channel image as a row-major buffer.
struct Gray {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Gray {
    fn of(img: &ImagePlane) -> Result<Gray> {
        let p = img.luma()?;
        Ok(Gray { h: p.height(), w: p.width(), data: p.data().to_vec() })
    }

    fn map2(&self, other: &Gray, f: impl Fn(f64, f64) -> f64) -> Gray {
        Gray { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect() }
    }

    /// Correlation with `k` over fully covered positions.
    fn filter_valid(&self, k: &Kernel) -> Gray {
        let (oh, ow) = (self.h + 1 - k.size, self.w + 1 - k.size);
        let mut data = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for i in 0..k.size {
                    let row = &self.data[(y + i) * self.w + x..(y + i) * self.w + x + k.size];
                    let krow = &k.data[i * k.size..(i + 1) * k.size];
                    acc += row.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                data[y * ow + x] = acc;
            }
        }
        Gray { h: oh, w: ow, data }
    }

    fn subsample2(&self) -> Gray {
        let (oh, ow) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let data = (0..oh).flat_map(|y| (0..ow).map(move |x| (y, x))).map(|(y, x)| self.data[2 * y * self.w + 2 * x]).collect();
        Gray { h: oh, w: ow, data }
    }
}

/// Windowed first and second moments of a pair.
struct Moments {
    mx: Gray,
    my: Gray,
    vx: Gray,
    vy: Gray,
    cxy: Gray,
}

fn moments(x: &Gray, y: &Gray, k: &Kernel) -> Moments {
    let mx = x.filter_valid(k);
    let my = y.filter_valid(k);
    let sxx = x.map2(x, |a, b| a * b).filter_valid(k);
    let syy = y.map2(y, |a, b| a * b).filter_valid(k);
    let sxy = x.map2(y, |a, b| a * b).filter_valid(k);
    let vx = sxx.map2(&mx, |s, m| s - m * m);
    let vy = syy.map2(&my, |s, m| s - m * m);
    let cxy = Gray { h: sxy.h, w: sxy.w, data: (0..sxy.data.len()).map(|i| sxy.data[i] - mx.data[i] * my.data[i]).collect() };
    Moments { mx, my, vx, vy, cxy }
}

fn check_window(op: &'static str, g: &Gray, size: usize) -> Result<()> {
    if g.h < size || g.w < size {
        return Err(arg_err(op, format!("image {}x{} is smaller than the {size}x{size} window", g.h, g.w)));
    }
    Ok(())
}

/// Gaussian-window SSIM (11×11, σ = 1.5, unit dynamic range) on luma.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (x, y) = (Gray::of(a)?, Gray::of(b)?);
    check_window("ssim", &x, 11)?;
    let k = gaussian_kernel(11, 1.5)?;
    let m = moments(&x, &y, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = m.mx.data.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (m.mx.data[i], m.my.data[i]);
            ((2.0 * mx * my + c1) * (2.0 * m.cxy.data[i] + c2))
                / ((mx * mx + my * my + c1) * (m.vx.data[i] + m.vy.data[i] + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Universal quality index over sliding 8×8 uniform windows on luma.
/// Windows whose denominator is below 1e-12 are skipped; if every window is
/// skipped the result is 1 for identical images and 0 otherwise.
pub fn uqi(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_shape("uqi", a, b)?;
    let (x, y) = (Gray::of(a)?, Gray::of(b)?);
    check_window("uqi", &x, UQI_WINDOW)?;
    let area = (UQI_WINDOW * UQI_WINDOW) as f64;
    let k = Kernel { size: UQI_WINDOW, data: vec![1.0 / area; UQI_WINDOW * UQI_WINDOW] };
    let m = moments(&x, &y, &k);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..m.mx.data.len() {
        let (mx, my) = (m.mx.data[i], m.my.data[i]);
        let den = (m.vx.data[i] + m.vy.data[i]) * (mx * mx + my * my);
        if den < 1e-12 {
            continue;
        }
        total += 4.0 * m.cxy.data[i] * mx * my / den;
        count += 1;
    }
    if count == 0 {
        return Ok(if x.data == y.data { 1.0 } else { 0.0 });
    }
    Ok(total / count as f64)
}

/// Whether a side length survives all VIF scales with at least one window.
fn vif_fits(mut side: usize) -> bool {
    for scale in 1..=VIF_SCALES {
        let n = vif_window(scale);
        if scale > 1 {
            if side < n {
                return false;
            }
            side = (side + 1 - n).div_ceil(2);
        }
        if side < n {
            return false;
        }
    }
    true
}

/// Smallest side accepted by [`vif_p`].
pub fn vif_min_size() -> usize {
    (1..).find(|&s| vif_fits(s)).expect("some size fits")
}

fn vif_window(scale: u32) -> usize {
    (1usize << (VIF_SCALES - scale + 1)) + 1
}

/// Pixel-domain visual information fidelity of `dist` against `reference`
/// (reference first; the measure is not symmetric). Luma is rescaled to
/// 0..255 so the noise variance σ_nsq = 2 keeps its usual meaning.
pub fn vif_p(reference: &ImagePlane, dist: &ImagePlane) -> Result<f64> {
    same_shape("vif_p", reference, dist)?;
    let scale255 = |g: Gray| Gray { data: g.data.iter().map(|v| v * 255.0).collect(), ..g };
    let mut r = scale255(Gray::of(reference)?);
    let mut d = scale255(Gray::of(dist)?);
    let min = vif_min_size();
    if r.h < min || r.w < min {
        return Err(arg_err("vif_p", format!("image {}x{} is smaller than the {min}x{min} minimum", r.h, r.w)));
    }
    let identical = r.data == d.data;
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let n = vif_window(scale);
        let k = gaussian_kernel(n, n as f64 / 5.0)?;
        if scale > 1 {
            r = r.filter_valid(&k).subsample2();
            d = d.filter_valid(&k).subsample2();
        }
        let m = moments(&r, &d, &k);
        for i in 0..m.mx.data.len() {
            let s1 = m.vx.data[i].max(0.0);
            let s2 = m.vy.data[i].max(0.0);
            let s12 = m.cxy.data[i];
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            let mut s1 = s1;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(VIF_EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + s1 / VIF_SIGMA_NSQ).log10();
        }
    }
    if den <= 0.0 {
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

fn mean_cov(set: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for v in e.eigenvalues.iter_mut() {
        if *v < -1e-8 {
            return Err(arg_err("fid", format!("{what} has eigenvalue {v:.3e} < -1e-8")));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(e)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map(Vec::len).unwrap_or(0);
    if d == 0 {
        return Err(arg_err("fid", "feature vectors are empty"));
    }
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(shape_err("fid", "feature vectors have differing lengths"));
    }
    if a.iter().chain(b).any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("fid features".into()));
    }
    for set in [a, b] {
        if set.len() < d + 1 {
            return Err(Error::InsufficientSamples { what: "fid", need: d + 1, got: set.len() });
        }
    }
    let (mu_a, cov_a) = mean_cov(a, d);
    let (mu_b, cov_b) = mean_cov(b, d);
    let ea = psd_eigen(cov_a.clone(), "covariance")?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &cov_b * &root_a;
    let ei = psd_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub l1_percent: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
    pub vif: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub l1_percent: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
    pub vif: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidEntry {
    pub value: Option<f64>,
    pub status: String,
    pub extractor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: u32,
    pub count: usize,
    pub means: MeanMetrics,
    pub fid: FidEntry,
    pub per_image: Vec<ImageMetrics>,
    #[serde(default)]
    pub skipped: Vec<Skipped>,
}

/// One evaluated pair: a composited output and its ground truth.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub output: ImagePlane,
    pub truth: ImagePlane,
}

pub fn image_metrics(name: &str, output: &ImagePlane, truth: &ImagePlane) -> Result<ImageMetrics> {
    let vif = if truth.height().min(truth.width()) >= vif_min_size() { Some(vif_p(truth, output)?) } else { None };
    Ok(ImageMetrics {
        name: name.to_string(),
        l1_percent: l1_percent(output, truth)?,
        psnr: psnr(output, truth)?,
        ssim: ssim(output, truth)?,
        uqi: uqi(output, truth)?,
        vif,
    })
}

fn embed_all(fx: &dyn FeatureExtractor<f64>, images: &[&ImagePlane]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let batch = Tensor::stack(&chunk.iter().map(|p| p.to_tensor::<f64>()).collect::<Vec<_>>())?;
        out.extend(fx.embed(&batch)?);
    }
    Ok(out)
}

/// Per-image metrics, means and proxy-FID over `pairs`, in input order.
pub fn evaluate_set(pairs: &[EvalPair], fx: &dyn FeatureExtractor<f64>) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(arg_err("evaluate_set", "no image pairs to evaluate"));
    }
    let per_image = exec::map_indexed(pairs.len(), |i| image_metrics(&pairs[i].name, &pairs[i].output, &pairs[i].truth))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let vif = if per_image.iter().all(|m| m.vif.is_some()) {
        Some(per_image.iter().map(|m| m.vif.unwrap_or(0.0)).sum::<f64>() / n)
    } else {
        None
    };
    let means = MeanMetrics {
        l1_percent: mean(|m| m.l1_percent),
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        uqi: mean(|m| m.uqi),
        vif,
    };
    let outs: Vec<&ImagePlane> = pairs.iter().map(|p| &p.output).collect();
    let truths: Vec<&ImagePlane> = pairs.iter().map(|p| &p.truth).collect();
    let extractor = "proxy: fixed random conv features, not comparable to Inception FID".to_string();
    let fid = match fid(&embed_all(fx, &outs)?, &embed_all(fx, &truths)?) {
        Ok(v) => FidEntry { value: Some(v), status: "ok".into(), extractor },
        Err(Error::InsufficientSamples { need, got, .. }) => FidEntry {
            value: None,
            status: format!("unavailable: insufficient samples (need {need}, got {got})"),
            extractor,
        },
        Err(e) => return Err(e),
    };
    Ok(MetricsReport { report_version: REPORT_VERSION, count: pairs.len(), means, fid, per_image, skipped: Vec::new() })
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.prec$}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Column values in table order: l1%, PSNR, SSIM, UQI, VIF, FID.
    pub fn row(&self) -> [Option<f64>; 6] {
        let m = &self.means;
        [Some(m.l1_percent), Some(m.psnr), Some(m.ssim), Some(m.uqi), m.vif, self.fid.value]
    }

    pub fn table(&self, label: &str) -> String {
        metrics_table(&[(label.to_string(), self.row())])
    }
}

pub const TABLE_COLUMNS: [&str; 6] = ["l1%", "PSNR", "SSIM", "UQI", "VIF", "FID"];

/// Aligned plain-text table with one row per label.
pub fn metrics_table(rows: &[(String, [Option<f64>; 6])]) -> String {
    let lw = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<lw$}", "model");
    for c in TABLE_COLUMNS {
        s.push_str(&format!(" {c:>9}"));
    }
    s.push('\n');
    for (label, vals) in rows {
        s.push_str(&format!("{label:<lw$}"));
        for (i, v) in vals.iter().enumerate() {
            let prec = if i == 1 { 2 } else { 4 };
            s.push_str(&format!(" {:>9}", cell(*v, prec)));
        }
        s.push('\n');
    }
    s
}
