use super::{Real, Tensor};
use crate::error::{arg_err, shape_err, Result};
use crate::exec;
use serde::{Deserialize, Serialize};

/// Hyper-parameters of a 2-D cross-correlation layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize) -> Self {
        ConvSpec { out_channels, kernel: (kernel, kernel), stride: 1, dilation: 1, padding: 0 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Output (h, w) for an input of spatial size (h, w).
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 || self.dilation == 0 || kh == 0 || kw == 0 {
            return Err(arg_err(
                "conv2d",
                format!("stride, dilation and kernel must be >= 1, got {self:?}"),
            ));
        }
        let out = |size: usize, k: usize, dim: &str| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = size + 2 * self.padding;
            if padded < span {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "{dim}: padded size {padded} is smaller than the dilated kernel span {span}"
                    ),
                ));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((out(h, kh, "height")?, out(w, kw, "width")?))
    }

    pub(crate) fn geometry(&self, c: usize, h: usize, w: usize) -> Result<Geometry> {
        let (oh, ow) = self.output_size(h, w)?;
        Ok(Geometry {
            c,
            h,
            w,
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            dilation: self.dilation,
            pad: self.padding,
            oh,
            ow,
        })
    }
}

/// Resolved sliding-window geometry for one (c, h, w) sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Maps an output coordinate and kernel tap to an input coordinate.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Unrolls one sample into a (c·kh·kw) × (oh·ow) matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let l = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = g.src(ox, kj, g.w).map_or(T::zero(), |ix| src_row[ix]);
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a sample.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let l = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.oh {
                    if let Some(iy) = g.src(oy, ki, g.h) {
                        let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                        for ox in 0..g.ow {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                dst_row[ix] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.shape();
    let [oc, ic, kh, kw] = w.shape();
    if ic != c {
        return Err(shape_err(
            "conv2d",
            format!("kernel expects {ic} input channels, input has {c}"),
        ));
    }
    if oc != spec.out_channels || (kh, kw) != spec.kernel {
        return Err(shape_err(
            "conv2d",
            format!(
                "kernel shape {:?} disagrees with spec (out_channels {}, kernel {:?})",
                w.shape(),
                spec.out_channels,
                spec.kernel
            ),
        ));
    }
    if let Some(b) = b {
        if b.numel() != oc {
            return Err(shape_err(
                "conv2d",
                format!("bias has {} values for {oc} output channels", b.numel()),
            ));
        }
    }
    let g = spec.geometry(c, h, wd)?;
    let (k, l) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([n, oc, g.oh, g.ow]);
    let in_len = c * h * wd;
    let wdata = w.data();
    exec::for_each_chunk_mut(out.data_mut(), oc * l, |i, dst| {
        let xs = &x.data()[i * in_len..(i + 1) * in_len];
        let owned;
        let cols: &[T] = if g.pointwise() {
            xs
        } else {
            let mut buf = vec![T::zero(); k * l];
            im2col(xs, &g, &mut buf);
            owned = buf;
            &owned
        };
        if let Some(b) = b {
            for (o, row) in dst.chunks_mut(l).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            oc, k, l, T::one(), wdata, k as isize, 1, cols, l as isize, 1, beta, dst, l as isize, 1,
        );
    });
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (need_dx, need_dw, need_db) = need;
    let [n, c, h, wd] = x.shape();
    let [oc, _, _, _] = w.shape();
    let g = spec.geometry(c, h, wd)?;
    let (k, l) = (g.rows(), g.cols());
    let in_len = c * h * wd;
    let wdata = w.data();

    let per_sample = exec::map_indexed(n, |i| {
        let xs = &x.data()[i * in_len..(i + 1) * in_len];
        let dys = &dy.data()[i * oc * l..(i + 1) * oc * l];
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); in_len];
            if g.pointwise() {
                T::gemm(
                    k, oc, l, T::one(), wdata, 1, k as isize, dys, l as isize, 1, T::zero(),
                    &mut dx, l as isize, 1,
                );
            } else {
                let mut dcols = vec![T::zero(); k * l];
                T::gemm(
                    k, oc, l, T::one(), wdata, 1, k as isize, dys, l as isize, 1, T::zero(),
                    &mut dcols, l as isize, 1,
                );
                col2im(&dcols, &g, &mut dx);
            }
            dx
        });
        let dw = need_dw.then(|| {
            let owned;
            let cols: &[T] = if g.pointwise() {
                xs
            } else {
                let mut buf = vec![T::zero(); k * l];
                im2col(xs, &g, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![T::zero(); oc * k];
            T::gemm(
                oc, l, k, T::one(), dys, l as isize, 1, cols, 1, l as isize, T::zero(), &mut dw,
                k as isize, 1,
            );
            dw
        });
        (dx, dw)
    });

    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * in_len));
    let mut dw_sum = need_dw.then(|| Tensor::zeros(w.shape()));
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
        if let (Some(sum), Some(dw)) = (dw_sum.as_mut(), dw) {
            for (a, b) in sum.data_mut().iter_mut().zip(dw) {
                *a += b;
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = Tensor::zeros([1, oc, 1, 1]);
        for i in 0..n {
            for o in 0..oc {
                let s: T = dy.data()[(i * oc + o) * l..(i * oc + o + 1) * l].iter().copied().sum();
                db.data_mut()[o] += s;
            }
        }
        db
    });
    Ok(ConvGrads {
        dx: dx_all.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
        dw: dw_sum,
        db,
    })
}
