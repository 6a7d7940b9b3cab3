use crate::error::{arg_err, Result};
use crate::tensor::{Axis, Graph, Real, Tensor, Var};

const NORM_EPS: f64 = 1e-8;

/// Attention weights, (n, 1, h·w, m): row i holds the softmax over the m
/// key patches for the window centred at pixel i.
pub fn attention_scores<T: Real>(g: &mut Graph<T>, x: Var, k: usize, stride: usize) -> Result<Var> {
    Ok(scores_and_patches(g, x, k, stride)?.0)
}

fn scores_and_patches<T: Real>(g: &mut Graph<T>, x: Var, k: usize, stride: usize) -> Result<(Var, Var)> {
    let [_, _, h, w] = g.shape(x);
    if k == 0 || k % 2 == 0 || k > h || k > w {
        return Err(arg_err("attention", format!("patch size {k} invalid for {h}x{w} features")));
    }
    if stride == 0 {
        return Err(arg_err("attention", "stride must be positive"));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let patches = g.unfold(x, k, stride, 0)?;
    let keys = g.l2_normalize(patches, Axis::Height, eps)?;
    let windows = g.unfold(x, k, 1, k / 2)?;
    let queries = g.l2_normalize(windows, Axis::Height, eps)?;
    let scores = g.matmul(queries, keys, true, false)?;
    Ok((g.softmax(scores, Axis::Width)?, patches))
}

/// Patch attention: every k×k window of `x` attends over the valid k×k
/// patches (taken at `stride`) by cosine similarity, and the attended
/// patches are folded back and averaged per pixel. Returns `x + γ·o`.
pub fn attention_forward<T: Real>(g: &mut Graph<T>, x: Var, k: usize, stride: usize, gamma: Var) -> Result<Var> {
    let [_, c, h, w] = g.shape(x);
    let (weights, patches) = scores_and_patches(g, x, k, stride)?;
    let attended = g.matmul(patches, weights, false, true)?;
    let summed = g.fold(attended, (c, h, w), k, 1, k / 2)?;
    let inv = g.constant(overlap_inverse(c, h, w, k)?)?;
    let o = g.mul(summed, inv)?;
    let scaled = g.mul(o, gamma)?;
    g.add(x, scaled)
}

/// 1 / (number of k×k windows covering each pixel), zero padding at borders.
fn overlap_inverse<T: Real>(c: usize, h: usize, w: usize, k: usize) -> Result<Tensor<T>> {
    let r = (k / 2) as isize;
    let mut t = Tensor::zeros([1, c, h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut cnt = 0usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        cnt += 1;
                    }
                }
            }
            let v = T::one() / T::from_usize(cnt).expect("small count");
            for ch in 0..c {
                t.set(0, ch, y as usize, x as usize, v);
            }
        }
    }
    Ok(t)
}
