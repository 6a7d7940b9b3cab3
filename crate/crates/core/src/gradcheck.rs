//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, max_rel_err: f64, threshold: f64, coords: usize) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_err,
            threshold,
            coords_checked: coords,
            passed: max_rel_err.is_finite() && max_rel_err < threshold,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<40} max_rel_err={:.3e} (< {:.0e}, {} coords)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.threshold,
            self.coords_checked
        )
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates per input; inputs with more elements are subsampled.
    pub max_coords: usize,
    pub floor: f64,
    pub seed: u64,
    /// Combine steps h and h/2 as `(4·D(h/2) − D(h)) / 3`, cancelling the
    /// O(h²) truncation term of the central difference.
    pub richardson: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-3, max_coords: 64, floor: 1e-8, seed: 0, richardson: true }
    }
}

/// (input index, flat coordinate).
pub type Coord = (usize, usize);

impl GradCheck {
    pub fn coords(&self, inputs: &[Tensor<f64>]) -> Vec<Coord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for (i, t) in inputs.iter().enumerate() {
            if t.numel() <= self.max_coords {
                out.extend((0..t.numel()).map(|c| (i, c)));
            } else {
                let mut picked = sample(&mut rng, t.numel(), self.max_coords).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|c| (i, c)));
            }
        }
        out
    }

    /// Central differences of a scalar function at the given coordinates.
    pub fn numeric(
        &self,
        inputs: &[Tensor<f64>],
        coords: &[Coord],
        mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let mut work = inputs.to_vec();
        coords
            .iter()
            .map(|&(i, c)| {
                let orig = work[i].data()[c];
                let mut central = |h: f64| -> Result<f64> {
                    work[i].data_mut()[c] = orig + h;
                    let plus = f(&work)?;
                    work[i].data_mut()[c] = orig - h;
                    let minus = f(&work)?;
                    work[i].data_mut()[c] = orig;
                    Ok((plus - minus) / (2.0 * h))
                };
                let coarse = central(self.step)?;
                if self.richardson {
                    let fine = central(self.step / 2.0)?;
                    Ok((4.0 * fine - coarse) / 3.0)
                } else {
                    Ok(coarse)
                }
            })
            .collect()
    }

    /// Checks the backward pass of the scalar graph built by `build`.
    pub fn check<F>(&self, name: &str, inputs: &[Tensor<f64>], threshold: f64, build: F) -> Result<CheckResult>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        self.check_with_hook(name, inputs, threshold, build, |_| {})
    }

    /// Like [`GradCheck::check`], but lets `hook` alter the analytic gradients
    /// before comparison.
    pub fn check_with_hook<F>(
        &self,
        name: &str,
        inputs: &[Tensor<f64>],
        threshold: f64,
        build: F,
        hook: impl FnOnce(&mut [Tensor<f64>]),
    ) -> Result<CheckResult>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;
        let mut analytic: Vec<Tensor<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        hook(&mut analytic);
        let coords = self.coords(inputs);
        let numeric = self.numeric(inputs, &coords, |xs| {
            let mut g = Graph::new();
            let vars = xs
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).item())
        })?;
        let max = coords
            .iter()
            .zip(&numeric)
            .map(|(&(i, c), &n)| rel_err(analytic[i].data()[c], n, self.floor))
            .fold(0.0, f64::max);
        Ok(CheckResult::new(name, max, threshold, coords.len()))
    }
}
