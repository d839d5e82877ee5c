//! Dilated 2-D convolution via explicit im2col gather plus GEMM, with a
//! per-pixel fast path for 1x1 kernels. A direct-loop reference lives in the
//! verification module and stays independent of this path.

use super::{joint_tape, record_output, GradBuf, Shape, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
    d: usize,
    p: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }
}

/// Gather input patches into a `(ci*k*k, n*oh*ow)` matrix. Out-of-image taps
/// read zero (zero padding).
fn im2col<T: Scalar>(src: &[T], dm: &ConvDims) -> Vec<T> {
    let ncols = dm.cols();
    let mut col = vec![T::zero(); dm.rows() * ncols];
    for ci in 0..dm.ci {
        for ky in 0..dm.k {
            for kx in 0..dm.k {
                let row = (ci * dm.k + ky) * dm.k + kx;
                let dy = (ky * dm.d) as isize - dm.p as isize;
                let dx = (kx * dm.d) as isize - dm.p as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((dm.w as isize - dx).min(dm.ow as isize)).max(0) as usize;
                for n in 0..dm.n {
                    let in_base = (n * dm.ci + ci) * dm.h * dm.w;
                    for y in 0..dm.oh {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= dm.h as isize {
                            continue;
                        }
                        if x_lo >= x_hi {
                            continue;
                        }
                        let src_base = in_base + iy as usize * dm.w + (x_lo as isize + dx) as usize;
                        let dst_base = row * ncols + (n * dm.oh + y) * dm.ow + x_lo;
                        col[dst_base..dst_base + (x_hi - x_lo)]
                            .copy_from_slice(&src[src_base..src_base + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    col
}

/// Scatter a column-space gradient back onto the input layout (accumulating).
fn col2im_add<T: Scalar>(gcol: &[T], dm: &ConvDims, gin: &mut [T]) {
    let ncols = dm.cols();
    for ci in 0..dm.ci {
        for ky in 0..dm.k {
            for kx in 0..dm.k {
                let row = (ci * dm.k + ky) * dm.k + kx;
                let dy = (ky * dm.d) as isize - dm.p as isize;
                let dx = (kx * dm.d) as isize - dm.p as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((dm.w as isize - dx).min(dm.ow as isize)).max(0) as usize;
                for n in 0..dm.n {
                    let in_base = (n * dm.ci + ci) * dm.h * dm.w;
                    for y in 0..dm.oh {
                        let iy = y as isize + dy;
                        if iy < 0 || iy >= dm.h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let dst_base = in_base + iy as usize * dm.w + (x_lo as isize + dx) as usize;
                        let src_base = row * ncols + (n * dm.oh + y) * dm.ow + x_lo;
                        for i in 0..x_hi - x_lo {
                            gin[dst_base + i] += gcol[src_base + i];
                        }
                    }
                }
            }
        }
    }
}

/// `(co, n*oh*ow)` -> `(n, co, oh*ow)` copy (and its inverse).
fn cols_to_nchw<T: Scalar>(src: &[T], dm: &ConvDims, dst: &mut [T]) {
    let plane = dm.oh * dm.ow;
    let ncols = dm.cols();
    for co in 0..dm.co {
        for n in 0..dm.n {
            let s = co * ncols + n * plane;
            let d = (n * dm.co + co) * plane;
            dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
        }
    }
}

fn nchw_to_cols<T: Scalar>(src: &[T], dm: &ConvDims) -> Vec<T> {
    let plane = dm.oh * dm.ow;
    let ncols = dm.cols();
    let mut dst = vec![T::zero(); dm.co * ncols];
    for co in 0..dm.co {
        for n in 0..dm.n {
            let s = (n * dm.co + co) * plane;
            let d = co * ncols + n * plane;
            dst[d..d + plane].copy_from_slice(&src[s..s + plane]);
        }
    }
    dst
}

/// 2-D convolution with square odd kernel, stride 1, zero padding.
///
/// `weight` is `(c_out, c_in, k, k)`, `bias` is `(1, c_out, 1, 1)`. With
/// `padding = dilation * (k - 1) / 2` the spatial shape is preserved.
/// Differentiable w.r.t. input, weight, and bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dilation: usize,
    padding: usize,
) -> Tensor<T> {
    let is = input.shape();
    let ws = weight.shape();
    assert_eq!(ws.h, ws.w, "conv2d: kernel must be square");
    let k = ws.h;
    assert!(k % 2 == 1, "conv2d: kernel size must be odd, got {k}");
    assert_eq!(is.c, ws.c, "conv2d: input has {} channels, weight expects {}", is.c, ws.c);
    assert!(dilation >= 1, "conv2d: dilation must be >= 1");
    if let Some(b) = bias {
        assert_eq!(b.shape(), Shape::new(1, ws.n, 1, 1), "conv2d: bias shape");
    }
    let span = dilation * (k - 1);
    assert!(
        is.h + 2 * padding > span && is.w + 2 * padding > span,
        "conv2d: kernel span exceeds padded input"
    );
    let dm = ConvDims {
        n: is.n,
        ci: is.c,
        co: ws.n,
        k,
        d: dilation,
        p: padding,
        h: is.h,
        w: is.w,
        oh: is.h + 2 * padding - span,
        ow: is.w + 2 * padding - span,
    };
    let out_shape = Shape::new(dm.n, dm.co, dm.oh, dm.ow);

    let mut out = vec![T::zero(); out_shape.len()];
    if k == 1 && padding == 0 {
        let plane = dm.h * dm.w;
        for n in 0..dm.n {
            T::gemm(
                dm.co,
                dm.ci,
                plane,
                T::one(),
                weight.data(),
                dm.ci as isize,
                1,
                &input.data()[n * dm.ci * plane..(n + 1) * dm.ci * plane],
                plane as isize,
                1,
                T::zero(),
                &mut out[n * dm.co * plane..(n + 1) * dm.co * plane],
                plane as isize,
                1,
            );
        }
    } else {
        let col = im2col(input.data(), &dm);
        let ncols = dm.cols();
        let mut outm = vec![T::zero(); dm.co * ncols];
        T::gemm(
            dm.co,
            dm.rows(),
            ncols,
            T::one(),
            weight.data(),
            dm.rows() as isize,
            1,
            &col,
            ncols as isize,
            1,
            T::zero(),
            &mut outm,
            ncols as isize,
            1,
        );
        cols_to_nchw(&outm, &dm, &mut out);
    }
    if let Some(b) = bias {
        let plane = dm.oh * dm.ow;
        for n in 0..dm.n {
            for co in 0..dm.co {
                let bv = b.data()[co];
                for v in &mut out[(n * dm.co + co) * plane..(n * dm.co + co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }

    let mut tracked: Vec<&Tensor<T>> = vec![input, weight];
    if let Some(b) = bias {
        tracked.push(b);
    }
    let tape = joint_tape(&tracked);
    let (ii, iw, ib) = (
        input.node_id(),
        weight.node_id(),
        bias.and_then(|b| b.node_id()),
    );
    let (din, dw) = (input.data_arc(), weight.data_arc());
    record_output("conv2d", tape, out_shape, out, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            let plane = dm.oh * dm.ow;
            if let Some(id) = ib {
                let dst = buf.accum(id, dm.co);
                for n in 0..dm.n {
                    for co in 0..dm.co {
                        let mut acc = T::zero();
                        for v in &g[(n * dm.co + co) * plane..(n * dm.co + co + 1) * plane] {
                            acc += *v;
                        }
                        dst[co] += acc;
                    }
                }
            }
            if dm.k == 1 && dm.p == 0 {
                let plane = dm.h * dm.w;
                if let Some(id) = iw {
                    let dst = buf.accum(id, dm.co * dm.ci);
                    for n in 0..dm.n {
                        T::gemm(
                            dm.co,
                            plane,
                            dm.ci,
                            T::one(),
                            &g[n * dm.co * plane..(n + 1) * dm.co * plane],
                            plane as isize,
                            1,
                            &din[n * dm.ci * plane..(n + 1) * dm.ci * plane],
                            1,
                            plane as isize,
                            T::one(),
                            dst,
                            dm.ci as isize,
                            1,
                        );
                    }
                }
                if let Some(id) = ii {
                    let dst = buf.accum(id, dm.n * dm.ci * plane);
                    for n in 0..dm.n {
                        T::gemm(
                            dm.ci,
                            dm.co,
                            plane,
                            T::one(),
                            &dw,
                            1,
                            dm.ci as isize,
                            &g[n * dm.co * plane..(n + 1) * dm.co * plane],
                            plane as isize,
                            1,
                            T::one(),
                            &mut dst[n * dm.ci * plane..(n + 1) * dm.ci * plane],
                            plane as isize,
                            1,
                        );
                    }
                }
                return;
            }
            let ncols = dm.cols();
            let goutm = nchw_to_cols(g, &dm);
            if let Some(id) = iw {
                let col = im2col(&din, &dm);
                let dst = buf.accum(id, dm.co * dm.rows());
                T::gemm(
                    dm.co,
                    ncols,
                    dm.rows(),
                    T::one(),
                    &goutm,
                    ncols as isize,
                    1,
                    &col,
                    1,
                    ncols as isize,
                    T::one(),
                    dst,
                    dm.rows() as isize,
                    1,
                );
            }
            if let Some(id) = ii {
                let mut gcol = vec![T::zero(); dm.rows() * ncols];
                T::gemm(
                    dm.rows(),
                    dm.co,
                    ncols,
                    T::one(),
                    &dw,
                    1,
                    dm.rows() as isize,
                    &goutm,
                    ncols as isize,
                    1,
                    T::zero(),
                    &mut gcol,
                    ncols as isize,
                    1,
                );
                let dst = buf.accum(id, dm.n * dm.ci * dm.h * dm.w);
                col2im_add(&gcol, &dm, dst);
            }
        })
    })
}
