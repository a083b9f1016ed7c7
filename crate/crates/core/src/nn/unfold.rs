//! `im2col` and its adjoint `col2im` as autograd-aware custom ops.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.channels, self.height, self.width))
    }

    fn cols_shape(&self) -> Shape {
        let k = self.kernel;
        Shape::from((self.channels * k * k, self.batch * self.out_h() * self.out_w()))
    }

    /// Calls `f(image_start, col_start, len)` for every run of in-bounds
    /// taps; runs step by `stride` in the image and by 1 in the columns.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (ho, wo) = (self.out_h(), self.out_w());
        let ncols = self.batch * ho * wo;
        for c in 0..self.channels {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (c * k + dy) * k + dx;
                    // Valid outputs satisfy 0 <= ox * s + dx - p < width.
                    let lo = p.saturating_sub(dx).div_ceil(s);
                    let hi = (self.width + p).saturating_sub(dx).div_ceil(s).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        for oy in 0..ho {
                            let y = oy * s + dy;
                            if y < p || y - p >= self.height {
                                continue;
                            }
                            let src = plane + (y - p) * self.width + lo * s + dx - p;
                            let dst = row * ncols + (b * ho + oy) * wo + lo;
                            f(src, dst, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("unfold expects a contiguous input".into())),
    }
}

/// `(B, C, H, W)` to `(C k k, B Ho Wo)`.
pub(crate) struct Im2Col(pub Geometry);

/// `(C k k, B Ho Wo)` to `(B, C, H, W)`, summing overlapping taps.
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if layout.shape() != &g.image_shape() {
            return Err(candle_core::Error::Msg(format!("im2col: unexpected shape {:?}", layout.shape())));
        }
        fn run<T: Copy + Default>(g: Geometry, src: &[T]) -> Vec<T> {
            let mut out = vec![T::default(); g.cols_shape().elem_count()];
            let s = g.stride;
            g.for_each_run(|i, o, n| {
                if s == 1 {
                    out[o..o + n].copy_from_slice(&src[i..i + n]);
                } else {
                    for (d, v) in out[o..o + n].iter_mut().zip(src[i..].iter().step_by(s)) {
                        *d = *v;
                    }
                }
            });
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(g, contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(run(g, contiguous(v, layout)?)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col")),
        };
        Ok((out, g.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if layout.shape() != &g.cols_shape() {
            return Err(candle_core::Error::Msg(format!("col2im: unexpected shape {:?}", layout.shape())));
        }
        fn run<T: Copy + Default + std::ops::AddAssign>(g: Geometry, src: &[T]) -> Vec<T> {
            let mut out = vec![T::default(); g.image_shape().elem_count()];
            let s = g.stride;
            g.for_each_run(|i, o, n| {
                for (d, v) in out[i..].iter_mut().step_by(s).zip(&src[o..o + n]) {
                    *d += *v;
                }
            });
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(run(g, contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(run(g, contiguous(v, layout)?)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "col2im")),
        };
        Ok((out, g.image_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}
