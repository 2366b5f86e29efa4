//! 2-D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::invalid(op, format!("kernel {k} larger than padded input {padded}")));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::invalid(
            op,
            format!("non-integral output extent: ({size} + 2*{pad} - {k}) / {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Column matrix of shape `[C*kh*kw, N*Ho*Wo]`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let l = g.ho * g.wo;
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = n * l + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let l = g.ho * g.wo;
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * l + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

struct Conv2dRule<T> {
    geo: Geometry,
    cols: Vec<T>,
}

impl<T: Scalar> Backward<T> for Conv2dRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = &self.geo;
        let l = g.ho * g.wo;
        let (rows, ncols) = (g.rows(), g.cols());
        // [N, F, L] -> [F, N*L]
        let dy = ctx.grad.data();
        let mut dyf = vec![T::zero(); g.f * ncols];
        for n in 0..g.n {
            for f in 0..g.f {
                dyf[f * ncols + n * l..f * ncols + (n + 1) * l]
                    .copy_from_slice(&dy[(n * g.f + f) * l..(n * g.f + f + 1) * l]);
            }
        }

        let dx = ctx.needs[0].then(|| {
            let w = ctx.inputs[1].data();
            let mut dcols = vec![T::zero(); rows * ncols];
            T::gemm(rows, g.f, ncols, T::one(), w, 1, rows, &dyf, ncols, 1, T::zero(), &mut dcols);
            Tensor::from_parts(vec![g.n, g.c, g.h, g.w], col2im(&dcols, g))
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![T::zero(); g.f * rows];
            T::gemm(g.f, ncols, rows, T::one(), &dyf, ncols, 1, &self.cols, 1, ncols, T::zero(), &mut dw);
            Tensor::from_parts(vec![g.f, g.c, g.kh, g.kw], dw)
        });
        vec![dx, dw]
    }
}

impl<T: Scalar> Graph<T> {
    /// `input [N,C,H,W] * weight [F,C,kh,kw]`, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::invalid(OP, format!("expected 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(OP, &[xs[0], ws[1], xs[2], xs[3]], &xs));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        let geo = Geometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho: out_extent(OP, xs[2], ws[2], stride, padding)?,
            wo: out_extent(OP, xs[3], ws[3], stride, padding)?,
        };
        let cols = im2col(self.value(input).data(), &geo);
        let (rows, ncols, l) = (geo.rows(), geo.cols(), geo.ho * geo.wo);
        let mut yf = vec![T::zero(); geo.f * ncols];
        T::gemm(geo.f, rows, ncols, T::one(), self.value(weight).data(), rows, 1, &cols, ncols, 1, T::zero(), &mut yf);
        let mut y = vec![T::zero(); geo.n * geo.f * l];
        for n in 0..geo.n {
            for f in 0..geo.f {
                y[(n * geo.f + f) * l..(n * geo.f + f + 1) * l]
                    .copy_from_slice(&yf[f * ncols + n * l..f * ncols + (n + 1) * l]);
            }
        }
        let out = Tensor::from_parts(vec![geo.n, geo.f, geo.ho, geo.wo], y);
        let saved = if self.any_requires_grad(&[input, weight]) { cols } else { Vec::new() };
        self.push(OP, out, vec![input, weight], Box::new(Conv2dRule { geo, cols: saved }))
    }
}
