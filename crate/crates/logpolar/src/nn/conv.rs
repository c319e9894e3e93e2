//! Strided 2-D convolution (cross-correlation semantics) via im2col and a
//! tuned GEMM, with exact backward passes for input, weights and bias.

use rayon::prelude::*;

use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Samples per work unit when parallelizing across the batch. Gradients
/// are accumulated per chunk and then summed in chunk order, so results
/// are identical for any thread count.
const CHUNK: usize = 16;

/// Reusable per-thread buffers. Every use fully overwrites the slice it
/// takes, so stale contents never leak between chunks.
struct Scratch<T> {
    col: Vec<T>,
    tmp: Vec<T>,
    d_out_t: Vec<T>,
    d_col: Vec<T>,
}

impl<T: Scalar> Default for Scratch<T> {
    fn default() -> Self {
        Scratch {
            col: Vec::new(),
            tmp: Vec::new(),
            d_out_t: Vec::new(),
            d_col: Vec::new(),
        }
    }
}

/// Grow-only view: zero-fills at most once per capacity increase.
fn take<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Weights, `[out_channels][in_channels * kernel * kernel]` row-major.
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub grad_w: Vec<T>,
    pub grad_b: Vec<T>,
    pub mom_w: Vec<T>,
    pub mom_b: Vec<T>,
    /// Skip the input-gradient computation; set on the first layer.
    pub skip_input_grad: bool,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!(
                "convolution stride must be 1 or 2, got {stride}"
            )));
        }
        let wn = out_channels * in_channels * kernel * kernel;
        Ok(ConvLayer {
            out_channels,
            in_channels,
            kernel,
            stride,
            pad,
            w: vec![T::zero(); wn],
            b: vec![T::zero(); out_channels],
            grad_w: vec![T::zero(); wn],
            grad_b: vec![T::zero(); out_channels],
            mom_w: vec![T::zero(); wn],
            mom_b: vec![T::zero(); out_channels],
            skip_input_grad: false,
        })
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let padded_h = h + 2 * self.pad;
        let padded_w = w + 2 * self.pad;
        if self.kernel > padded_h || self.kernel > padded_w {
            return Err(Error::Shape {
                expected: format!("padded input at least {0}x{0}", self.kernel),
                actual: format!("{padded_h}x{padded_w}"),
            });
        }
        Ok((
            (padded_h - self.kernel) / self.stride + 1,
            (padded_w - self.kernel) / self.stride + 1,
        ))
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<(usize, usize)> {
        if x.c != self.in_channels {
            return Err(Error::Shape {
                expected: format!("{} input channels", self.in_channels),
                actual: format!("{} channels ({:?})", x.c, x.dims()),
            });
        }
        self.out_spatial(x.h, x.w)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (oh, ow) = self.check_input(x)?;
        let mut out = Tensor4::zeros(x.n, self.out_channels, oh, ow);
        let pix = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let in_stride = x.c * x.h * x.w;
        let out_stride = self.out_channels * pix;
        let geo = Geometry::new(self, x.h, x.w, oh, ow);

        // Samples are grouped so each GEMM sees CHUNK*pix columns; small
        // per-sample matrices waste most of the GEMM kernel's throughput.
        out.data
            .par_chunks_mut(CHUNK * out_stride)
            .zip(x.data.par_chunks(CHUNK * in_stride))
            .for_each_init(Scratch::<T>::default, |scratch, (out_chunk, x_chunk)| {
                let m = x_chunk.len() / in_stride;
                let cols = m * pix;
                let col = take(&mut scratch.col, kk * cols);
                for s in 0..m {
                    geo.im2col(
                        &x_chunk[s * in_stride..(s + 1) * in_stride],
                        col,
                        s * pix,
                        cols,
                    );
                }
                // tmp (out_c x cols) = W (out_c x kk) * col (kk x cols)
                let tmp = take(&mut scratch.tmp, self.out_channels * cols);
                unsafe {
                    T::gemm(
                        self.out_channels,
                        kk,
                        cols,
                        T::one(),
                        self.w.as_ptr(),
                        kk as isize,
                        1,
                        col.as_ptr(),
                        cols as isize,
                        1,
                        T::zero(),
                        tmp.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                // regroup tmp's sample-major columns into per-sample planes
                for s in 0..m {
                    let out_s = &mut out_chunk[s * out_stride..(s + 1) * out_stride];
                    for o in 0..self.out_channels {
                        let bias = self.b[o];
                        let src = &tmp[o * cols + s * pix..o * cols + (s + 1) * pix];
                        for (dst, v) in out_s[o * pix..(o + 1) * pix].iter_mut().zip(src) {
                            *dst = *v + bias;
                        }
                    }
                }
            });
        Ok(out)
    }

    /// Backward pass; accumulates weight/bias gradients and returns the
    /// input gradient (zeros when `skip_input_grad` is set).
    pub fn backward(&mut self, x: &Tensor4<T>, d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (oh, ow) = self.check_input(x)?;
        if d_out.dims() != (x.n, self.out_channels, oh, ow) {
            return Err(Error::Shape {
                expected: format!("{:?}", (x.n, self.out_channels, oh, ow)),
                actual: format!("{:?}", d_out.dims()),
            });
        }
        let pix = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let geo = Geometry::new(self, x.h, x.w, oh, ow);
        let mut d_in = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let in_stride = x.c * x.h * x.w;
        let out_stride = self.out_channels * pix;
        let skip_input = self.skip_input_grad;
        let w = &self.w;
        let out_channels = self.out_channels;

        // One partial weight/bias gradient per chunk, reduced in order.
        // As in forward, each chunk's samples share one wide GEMM.
        let n = x.n;
        let n_chunks = n.div_ceil(CHUNK);
        let partials: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
            .into_par_iter()
            .zip(d_in.data.par_chunks_mut(CHUNK * in_stride))
            .map_init(Scratch::<T>::default, |scratch, (ci, d_in_chunk)| {
                let lo = ci * CHUNK;
                let hi = (lo + CHUNK).min(n);
                let m = hi - lo;
                let cols = m * pix;
                let col = take(&mut scratch.col, kk * cols);
                for s in 0..m {
                    geo.im2col(
                        &x.data[(lo + s) * in_stride..(lo + s + 1) * in_stride],
                        col,
                        s * pix,
                        cols,
                    );
                }
                // d_out regrouped to (out_c x cols), sample-major columns
                let d_out_t = take(&mut scratch.d_out_t, out_channels * cols);
                for s in 0..m {
                    let d_out_s = &d_out.data[(lo + s) * out_stride..(lo + s + 1) * out_stride];
                    for o in 0..out_channels {
                        d_out_t[o * cols + s * pix..o * cols + (s + 1) * pix]
                            .copy_from_slice(&d_out_s[o * pix..(o + 1) * pix]);
                    }
                }
                // gw (out_c x kk) = d_out_t (out_c x cols) * col^T (cols x kk)
                let mut gw = vec![T::zero(); w.len()];
                unsafe {
                    T::gemm(
                        out_channels,
                        cols,
                        kk,
                        T::one(),
                        d_out_t.as_ptr(),
                        cols as isize,
                        1,
                        col.as_ptr(),
                        1,
                        cols as isize,
                        T::zero(),
                        gw.as_mut_ptr(),
                        kk as isize,
                        1,
                    );
                }
                let mut gb = vec![T::zero(); out_channels];
                for (o, row) in d_out_t.chunks(cols).enumerate() {
                    gb[o] = row.iter().copied().sum::<T>();
                }
                if !skip_input {
                    // d_col (kk x cols) = W^T (kk x out_c) * d_out_t
                    let d_col = take(&mut scratch.d_col, kk * cols);
                    unsafe {
                        T::gemm(
                            kk,
                            out_channels,
                            cols,
                            T::one(),
                            w.as_ptr(),
                            1,
                            kk as isize,
                            d_out_t.as_ptr(),
                            cols as isize,
                            1,
                            T::zero(),
                            d_col.as_mut_ptr(),
                            cols as isize,
                            1,
                        );
                    }
                    for s in 0..m {
                        geo.col2im(
                            &d_col,
                            s * pix,
                            cols,
                            &mut d_in_chunk[s * in_stride..(s + 1) * in_stride],
                        );
                    }
                }
                (gw, gb)
            })
            .collect();
        for (gw, gb) in partials {
            for (a, b) in self.grad_w.iter_mut().zip(&gw) {
                *a += *b;
            }
            for (a, b) in self.grad_b.iter_mut().zip(&gb) {
                *a += *b;
            }
        }
        Ok(d_in)
    }
}

/// Precomputed spatial bookkeeping for im2col/col2im on one input shape.
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    pad: isize,
}

impl Geometry {
    fn new<T>(conv: &ConvLayer<T>, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Geometry {
            in_c: conv.in_channels,
            in_h,
            in_w,
            out_h,
            out_w,
            kernel: conv.kernel,
            stride: conv.stride,
            pad: conv.pad as isize,
        }
    }

    /// Fill one sample's `out_h*out_w` columns of a `in_c*k*k`-row column
    /// matrix with leading dimension `ld`, starting at column `offset`;
    /// out-of-bounds taps are zero.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T], offset: usize, ld: usize) {
        let pix = self.out_h * self.out_w;
        let mut row = 0usize;
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let dest = &mut col[row * ld + offset..row * ld + offset + pix];
                    let mut i = 0usize;
                    for oy in 0..self.out_h {
                        let sy = (oy * self.stride) as isize + ky as isize - self.pad;
                        if sy < 0 || sy >= self.in_h as isize {
                            for _ in 0..self.out_w {
                                dest[i] = T::zero();
                                i += 1;
                            }
                            continue;
                        }
                        let base = sy as usize * self.in_w;
                        for ox in 0..self.out_w {
                            let sx = (ox * self.stride) as isize + kx as isize - self.pad;
                            dest[i] = if sx < 0 || sx >= self.in_w as isize {
                                T::zero()
                            } else {
                                plane[base + sx as usize]
                            };
                            i += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-add one sample's columns (starting at `offset`, leading
    /// dimension `ld`) of a column gradient back onto its input gradient.
    fn col2im<T: Scalar>(&self, col: &[T], offset: usize, ld: usize, d_x: &mut [T]) {
        let pix = self.out_h * self.out_w;
        let mut row = 0usize;
        for c in 0..self.in_c {
            let plane_off = c * self.in_h * self.in_w;
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let src = &col[row * ld + offset..row * ld + offset + pix];
                    let mut i = 0usize;
                    for oy in 0..self.out_h {
                        let sy = (oy * self.stride) as isize + ky as isize - self.pad;
                        if sy < 0 || sy >= self.in_h as isize {
                            i += self.out_w;
                            continue;
                        }
                        let base = plane_off + sy as usize * self.in_w;
                        for ox in 0..self.out_w {
                            let sx = (ox * self.stride) as isize + kx as isize - self.pad;
                            if sx >= 0 && sx < self.in_w as isize {
                                d_x[base + sx as usize] += src[i];
                            }
                            i += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
