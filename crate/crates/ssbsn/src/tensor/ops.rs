//! Differentiable tensor operations: elementwise suite, row softmax, cosine
//! similarity, channel layer norm, batched matrix products, and the exact
//! space<->batch rearrangements behind grid attention and pixel-shuffle
//! downsampling.

use super::{joint_tape, record_output, GradBuf, Shape, Tensor};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Denominator guard for cosine similarity of near-zero rows.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance guard for channel layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn add_scaled<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += *v * s;
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape, rhs.shape, "add: shape mismatch");
        let tape = joint_tape(&[self, rhs]);
        let data: Vec<T> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a + *b).collect();
        let (ia, ib) = (self.node_id(), rhs.node_id());
        let len = self.shape.len();
        record_output("add", tape, self.shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    add_scaled(buf.accum(id, len), g, T::one());
                }
                if let Some(id) = ib {
                    add_scaled(buf.accum(id, len), g, T::one());
                }
            })
        })
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape, rhs.shape, "sub: shape mismatch");
        let tape = joint_tape(&[self, rhs]);
        let data: Vec<T> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a - *b).collect();
        let (ia, ib) = (self.node_id(), rhs.node_id());
        let len = self.shape.len();
        record_output("sub", tape, self.shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    add_scaled(buf.accum(id, len), g, T::one());
                }
                if let Some(id) = ib {
                    add_scaled(buf.accum(id, len), g, -T::one());
                }
            })
        })
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape, rhs.shape, "mul: shape mismatch");
        let tape = joint_tape(&[self, rhs]);
        let data: Vec<T> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a * *b).collect();
        let (ia, ib) = (self.node_id(), rhs.node_id());
        let (da, db) = (Arc::clone(&self.data), Arc::clone(&rhs.data));
        let len = self.shape.len();
        record_output("mul", tape, self.shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    let dst = buf.accum(id, len);
                    for ((d, gv), bv) in dst.iter_mut().zip(g).zip(db.iter()) {
                        *d += *gv * *bv;
                    }
                }
                if let Some(id) = ib {
                    let dst = buf.accum(id, len);
                    for ((d, gv), av) in dst.iter_mut().zip(g).zip(da.iter()) {
                        *d += *gv * *av;
                    }
                }
            })
        })
    }

    /// `a * x + b` elementwise with scalar coefficients.
    pub fn affine(&self, a: f64, b: f64) -> Tensor<T> {
        let (ta, tb) = (T::from_f64(a), T::from_f64(b));
        let tape = joint_tape(&[self]);
        let data: Vec<T> = self.data.iter().map(|x| ta * *x + tb).collect();
        let ia = self.node_id();
        let len = self.shape.len();
        record_output("affine", tape, self.shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    add_scaled(buf.accum(id, len), g, ta);
                }
            })
        })
    }

    pub fn scale(&self, a: f64) -> Tensor<T> {
        self.affine(a, 0.0)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&self) -> Tensor<T> {
        let tape = joint_tape(&[self]);
        let data: Vec<T> = self.data.iter().map(|x| x.max(T::zero())).collect();
        let ia = self.node_id();
        let src = Arc::clone(&self.data);
        let len = self.shape.len();
        record_output("relu", tape, self.shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    let dst = buf.accum(id, len);
                    for ((d, gv), xv) in dst.iter_mut().zip(g).zip(src.iter()) {
                        if *xv > T::zero() {
                            *d += *gv;
                        }
                    }
                }
            })
        })
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Tensor<T> {
        let tape = joint_tape(&[self]);
        let data: Vec<T> = self.data.iter().map(|x| x.abs()).collect();
        let ia = self.node_id();
        let src = Arc::clone(&self.data);
        let len = self.shape.len();
        record_output("abs", tape, self.shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    let dst = buf.accum(id, len);
                    for ((d, gv), xv) in dst.iter_mut().zip(g).zip(src.iter()) {
                        if *xv > T::zero() {
                            *d += *gv;
                        } else if *xv < T::zero() {
                            *d -= *gv;
                        }
                    }
                }
            })
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let tape = joint_tape(&[self]);
        let mut acc = T::zero();
        for v in self.data.iter() {
            acc += *v;
        }
        let ia = self.node_id();
        let len = self.shape.len();
        record_output("sum", tape, Shape::scalar(), vec![acc], move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    let gv = g[0];
                    for d in buf.accum(id, len) {
                        *d += gv;
                    }
                }
            })
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.shape.len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: Shape) -> Tensor<T> {
        assert_eq!(shape.len(), self.shape.len(), "reshape: length mismatch");
        let tape = joint_tape(&[self]);
        let data = self.data.as_ref().clone();
        let ia = self.node_id();
        let len = self.shape.len();
        record_output("reshape", tape, shape, data, move || {
            Box::new(move |g, buf: &mut GradBuf<T>| {
                if let Some(id) = ia {
                    add_scaled(buf.accum(id, len), g, T::one());
                }
            })
        })
    }
}

/// Channel concatenation of two equally sized batches.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(
        sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
        "concat_channels: incompatible shapes {sa} vs {sb}"
    );
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut data = vec![T::zero(); out_shape.len()];
    for n in 0..sa.n {
        let dst = &mut data[n * out_shape.c * plane..(n + 1) * out_shape.c * plane];
        dst[..sa.c * plane].copy_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        dst[sa.c * plane..].copy_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    let tape = joint_tape(&[a, b]);
    let (ia, ib) = (a.node_id(), b.node_id());
    record_output("concat_channels", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            let cs = sa.c * plane;
            let co = out_shape.c * plane;
            if let Some(id) = ia {
                let dst = buf.accum(id, sa.len());
                for n in 0..sa.n {
                    add_scaled(&mut dst[n * cs..(n + 1) * cs], &g[n * co..n * co + cs], T::one());
                }
            }
            if let Some(id) = ib {
                let csb = sb.c * plane;
                let dst = buf.accum(id, sb.len());
                for n in 0..sa.n {
                    add_scaled(
                        &mut dst[n * csb..(n + 1) * csb],
                        &g[n * co + cs..(n + 1) * co],
                        T::one(),
                    );
                }
            }
        })
    })
}

/// `(n, c, h, w)` -> `(n*s^2, c, h/s, w/s)`; sub-image `(i, j)` collects the
/// pixels `(i + a*s, j + b*s)`. Sub-images are ordered raster by `(i, j)`.
pub fn space_to_batch<T: Scalar>(t: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = t.shape();
    assert!(s >= 1, "stride must be >= 1");
    assert!(
        sh.h.is_multiple_of(s) && sh.w.is_multiple_of(s),
        "space_to_batch: {s} does not divide spatial dims of {sh}"
    );
    let out_shape = Shape::new(sh.n * s * s, sh.c, sh.h / s, sh.w / s);
    let mut data = vec![T::zero(); out_shape.len()];
    scatter_space_to_batch(t.data(), sh, s, &mut data, true);
    let tape = joint_tape(&[t]);
    let ia = t.node_id();
    record_output("space_to_batch", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sh.len());
                gather_batch_to_space(g, sh, s, dst);
            }
        })
    })
}

/// Inverse of [`space_to_batch`]: exact bijection, `n_orig` is the original
/// batch count.
pub fn batch_to_space<T: Scalar>(t: &Tensor<T>, s: usize, n_orig: usize) -> Tensor<T> {
    let sh = t.shape();
    assert_eq!(sh.n, n_orig * s * s, "batch_to_space: batch count mismatch");
    let out_shape = Shape::new(n_orig, sh.c, sh.h * s, sh.w * s);
    let mut data = vec![T::zero(); out_shape.len()];
    gather_batch_to_space_into(t.data(), out_shape, s, &mut data);
    let tape = joint_tape(&[t]);
    let ia = t.node_id();
    record_output("batch_to_space", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sh.len());
                scatter_space_to_batch_add(g, out_shape, s, dst);
            }
        })
    })
}

fn scatter_space_to_batch<T: Scalar>(src: &[T], sh: Shape, s: usize, dst: &mut [T], assign: bool) {
    let (hh, ww) = (sh.h / s, sh.w / s);
    let out = Shape::new(sh.n * s * s, sh.c, hh, ww);
    for n in 0..sh.n {
        for i in 0..s {
            for j in 0..s {
                let on = n * s * s + i * s + j;
                for c in 0..sh.c {
                    for a in 0..hh {
                        for b in 0..ww {
                            let d = out.at(on, c, a, b);
                            let v = src[sh.at(n, c, i + a * s, j + b * s)];
                            if assign {
                                dst[d] = v;
                            } else {
                                dst[d] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn scatter_space_to_batch_add<T: Scalar>(src: &[T], sh: Shape, s: usize, dst: &mut [T]) {
    scatter_space_to_batch(src, sh, s, dst, false)
}

/// Accumulate `src` laid out as `(n*s^2, c, h/s, w/s)` back onto the original
/// `(n, c, h, w)` layout (`dst` indexed by `sh`).
fn gather_batch_to_space<T: Scalar>(src: &[T], sh: Shape, s: usize, dst: &mut [T]) {
    let (hh, ww) = (sh.h / s, sh.w / s);
    let sub = Shape::new(sh.n * s * s, sh.c, hh, ww);
    for n in 0..sh.n {
        for i in 0..s {
            for j in 0..s {
                let on = n * s * s + i * s + j;
                for c in 0..sh.c {
                    for a in 0..hh {
                        for b in 0..ww {
                            dst[sh.at(n, c, i + a * s, j + b * s)] += src[sub.at(on, c, a, b)];
                        }
                    }
                }
            }
        }
    }
}

fn gather_batch_to_space_into<T: Scalar>(src: &[T], out: Shape, s: usize, dst: &mut [T]) {
    let sub = Shape::new(out.n * s * s, out.c, out.h / s, out.w / s);
    for n in 0..out.n {
        for i in 0..s {
            for j in 0..s {
                let on = n * s * s + i * s + j;
                for c in 0..out.c {
                    for a in 0..sub.h {
                        for b in 0..sub.w {
                            dst[out.at(n, c, i + a * s, j + b * s)] = src[sub.at(on, c, a, b)];
                        }
                    }
                }
            }
        }
    }
}

/// The d-hat grid decomposition of a tensor: each of the `d̂²` groups holds
/// the pixels of one stride-d̂ lattice, as a `(n*d̂², c, h/d̂, w/d̂)` tensor.
pub struct GridView<T: Scalar> {
    pub tensor: Tensor<T>,
    pub d_hat: usize,
    orig: Shape,
}

impl<T: Scalar> GridView<T> {
    pub fn groups(&self) -> usize {
        self.orig.n * self.d_hat * self.d_hat
    }

    /// Grid origin `(row_phase, col_phase)` of group `g` within its sample.
    pub fn origin(&self, g: usize) -> (usize, usize) {
        let p = g % (self.d_hat * self.d_hat);
        (p / self.d_hat, p % self.d_hat)
    }

    pub fn orig_shape(&self) -> Shape {
        self.orig
    }
}

/// Partition into the `d̂ x d̂` grid. Requires `d̂` to divide both spatial dims;
/// callers pad beforehand (see the pixel-shuffle pipeline).
pub fn grid_partition<T: Scalar>(t: &Tensor<T>, d_hat: usize) -> GridView<T> {
    GridView {
        tensor: space_to_batch(t, d_hat),
        d_hat,
        orig: t.shape(),
    }
}

/// Exact inverse of [`grid_partition`].
pub fn grid_merge<T: Scalar>(view: &GridView<T>) -> Tensor<T> {
    batch_to_space(&view.tensor, view.d_hat, view.orig.n)
}

/// `(n, c, h, w)` -> `(n, 1, h*w, c)`: pixels as rows, channels as columns.
pub fn to_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let sh = t.shape();
    let out_shape = Shape::new(sh.n, 1, sh.h * sh.w, sh.c);
    let mut data = vec![T::zero(); out_shape.len()];
    transpose_cp_to_pc(t.data(), sh, &mut data);
    let tape = joint_tape(&[t]);
    let ia = t.node_id();
    record_output("to_rows", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sh.len());
                transpose_pc_to_cp_add(g, sh, dst);
            }
        })
    })
}

/// Inverse of [`to_rows`] for the given original shape.
pub fn from_rows<T: Scalar>(t: &Tensor<T>, orig: Shape) -> Tensor<T> {
    let sh = t.shape();
    assert_eq!(sh.n, orig.n);
    assert_eq!(sh.h, orig.h * orig.w);
    assert_eq!(sh.w, orig.c);
    let mut data = vec![T::zero(); orig.len()];
    transpose_pc_to_cp(t.data(), orig, &mut data);
    let tape = joint_tape(&[t]);
    let ia = t.node_id();
    record_output("from_rows", tape, orig, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sh.len());
                transpose_cp_to_pc_add(g, orig, dst);
            }
        })
    })
}

fn transpose_cp_to_pc<T: Scalar>(src: &[T], sh: Shape, dst: &mut [T]) {
    let plane = sh.h * sh.w;
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = (n * sh.c + c) * plane;
            for p in 0..plane {
                dst[(n * plane + p) * sh.c + c] = src[base + p];
            }
        }
    }
}

fn transpose_cp_to_pc_add<T: Scalar>(src: &[T], sh: Shape, dst: &mut [T]) {
    let plane = sh.h * sh.w;
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = (n * sh.c + c) * plane;
            for p in 0..plane {
                dst[(n * plane + p) * sh.c + c] += src[base + p];
            }
        }
    }
}

fn transpose_pc_to_cp<T: Scalar>(src: &[T], sh: Shape, dst: &mut [T]) {
    let plane = sh.h * sh.w;
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = (n * sh.c + c) * plane;
            for p in 0..plane {
                dst[base + p] = src[(n * plane + p) * sh.c + c];
            }
        }
    }
}

fn transpose_pc_to_cp_add<T: Scalar>(src: &[T], sh: Shape, dst: &mut [T]) {
    let plane = sh.h * sh.w;
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = (n * sh.c + c) * plane;
            for p in 0..plane {
                dst[base + p] += src[(n * plane + p) * sh.c + c];
            }
        }
    }
}

/// Batched matrix product: `(N,1,r,k) x (N or 1,1,k,s) -> (N,1,r,s)`.
/// A second operand with batch 1 broadcasts across the batch.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.c, 1);
    assert_eq!(sb.c, 1);
    assert_eq!(sa.w, sb.h, "bmm: inner dims {} vs {}", sa.w, sb.h);
    assert!(sb.n == sa.n || sb.n == 1, "bmm: batch mismatch");
    let (r, k, s) = (sa.h, sa.w, sb.w);
    let out_shape = Shape::new(sa.n, 1, r, s);
    let mut data = vec![T::zero(); out_shape.len()];
    for n in 0..sa.n {
        let bn = if sb.n == 1 { 0 } else { n };
        T::gemm(
            r,
            k,
            s,
            T::one(),
            &a.data()[n * r * k..(n + 1) * r * k],
            k as isize,
            1,
            &b.data()[bn * k * s..(bn + 1) * k * s],
            s as isize,
            1,
            T::zero(),
            &mut data[n * r * s..(n + 1) * r * s],
            s as isize,
            1,
        );
    }
    let tape = joint_tape(&[a, b]);
    let (ia, ib) = (a.node_id(), b.node_id());
    let (da, db) = (a.data_arc(), b.data_arc());
    record_output("bmm", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sa.len());
                for n in 0..sa.n {
                    let bn = if sb.n == 1 { 0 } else { n };
                    // ga = g x b^T
                    T::gemm(
                        r,
                        s,
                        k,
                        T::one(),
                        &g[n * r * s..(n + 1) * r * s],
                        s as isize,
                        1,
                        &db[bn * k * s..(bn + 1) * k * s],
                        1,
                        s as isize,
                        T::one(),
                        &mut dst[n * r * k..(n + 1) * r * k],
                        k as isize,
                        1,
                    );
                }
            }
            if let Some(id) = ib {
                let dst = buf.accum(id, sb.len());
                for n in 0..sa.n {
                    let bn = if sb.n == 1 { 0 } else { n };
                    // gb = a^T x g (accumulates across the batch on broadcast)
                    T::gemm(
                        k,
                        r,
                        s,
                        T::one(),
                        &da[n * r * k..(n + 1) * r * k],
                        1,
                        k as isize,
                        &g[n * r * s..(n + 1) * r * s],
                        s as isize,
                        1,
                        T::one(),
                        &mut dst[bn * k * s..(bn + 1) * k * s],
                        s as isize,
                        1,
                    );
                }
            }
        })
    })
}

/// Batched `a x b^T`: `(N,1,r,c) x (N,1,s,c) -> (N,1,r,s)`.
pub fn bmm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.c, 1);
    assert_eq!(sb.c, 1);
    assert_eq!(sa.n, sb.n, "bmm_nt: batch mismatch");
    assert_eq!(sa.w, sb.w, "bmm_nt: feature dims {} vs {}", sa.w, sb.w);
    let (r, c, s) = (sa.h, sa.w, sb.h);
    let out_shape = Shape::new(sa.n, 1, r, s);
    let mut data = vec![T::zero(); out_shape.len()];
    for n in 0..sa.n {
        T::gemm(
            r,
            c,
            s,
            T::one(),
            &a.data()[n * r * c..(n + 1) * r * c],
            c as isize,
            1,
            &b.data()[n * s * c..(n + 1) * s * c],
            1,
            c as isize,
            T::zero(),
            &mut data[n * r * s..(n + 1) * r * s],
            s as isize,
            1,
        );
    }
    let tape = joint_tape(&[a, b]);
    let (ia, ib) = (a.node_id(), b.node_id());
    let (da, db) = (a.data_arc(), b.data_arc());
    record_output("bmm_nt", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sa.len());
                for n in 0..sa.n {
                    // ga = g x b
                    T::gemm(
                        r,
                        s,
                        c,
                        T::one(),
                        &g[n * r * s..(n + 1) * r * s],
                        s as isize,
                        1,
                        &db[n * s * c..(n + 1) * s * c],
                        c as isize,
                        1,
                        T::one(),
                        &mut dst[n * r * c..(n + 1) * r * c],
                        c as isize,
                        1,
                    );
                }
            }
            if let Some(id) = ib {
                let dst = buf.accum(id, sb.len());
                for n in 0..sa.n {
                    // gb = g^T x a
                    T::gemm(
                        s,
                        r,
                        c,
                        T::one(),
                        &g[n * r * s..(n + 1) * r * s],
                        1,
                        s as isize,
                        &da[n * r * c..(n + 1) * r * c],
                        c as isize,
                        1,
                        T::one(),
                        &mut dst[n * s * c..(n + 1) * s * c],
                        c as isize,
                        1,
                    );
                }
            }
        })
    })
}

/// Row-wise softmax over the last axis, computed with max-subtraction.
pub fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let sh = t.shape();
    let w = sh.w;
    assert!(w > 0);
    let rows = sh.len() / w;
    let mut data = vec![T::zero(); sh.len()];
    let src = t.data();
    for r in 0..rows {
        let row = &src[r * w..(r + 1) * w];
        let out = &mut data[r * w..(r + 1) * w];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, v) in out.iter_mut().zip(row) {
            *o = (*v - m).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    let tape = joint_tape(&[t]);
    let ia = t.node_id();
    let y = Arc::new(data.clone());
    record_output("softmax_rows", tape, sh, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = ia {
                let dst = buf.accum(id, sh.len());
                for r in 0..rows {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let mut dot = T::zero();
                    for (gv, yv) in gr.iter().zip(yr) {
                        dot += *gv * *yv;
                    }
                    let dr = &mut dst[r * w..(r + 1) * w];
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (*gv - dot) * *yv;
                    }
                }
            }
        })
    })
}

/// Pairwise row cosine similarities: `(N,1,r,c) x (N,1,r,c) -> (N,1,r,r)`.
/// Rows with norm below [`COSINE_EPS`] use the guard as denominator, so a
/// zero row yields similarity 0. Values are clamped into `[-1, 1]`.
pub fn cosine_matrix<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Tensor<T> {
    let (sq, sk) = (q.shape(), k.shape());
    assert_eq!(sq, sk, "cosine_matrix: shape mismatch");
    assert_eq!(sq.c, 1);
    let (nb, r, c) = (sq.n, sq.h, sq.w);
    let eps = T::from_f64(COSINE_EPS);

    let row_norms = |data: &[T]| -> Vec<T> {
        (0..nb * r)
            .map(|i| {
                let mut s = T::zero();
                for v in &data[i * c..(i + 1) * c] {
                    s += *v * *v;
                }
                s.sqrt()
            })
            .collect()
    };
    let nq: Vec<T> = row_norms(q.data());
    let nk: Vec<T> = row_norms(k.data());

    let out_shape = Shape::new(nb, 1, r, r);
    // raw dot products
    let mut dots = vec![T::zero(); out_shape.len()];
    for n in 0..nb {
        T::gemm(
            r,
            c,
            r,
            T::one(),
            &q.data()[n * r * c..(n + 1) * r * c],
            c as isize,
            1,
            &k.data()[n * r * c..(n + 1) * r * c],
            1,
            c as isize,
            T::zero(),
            &mut dots[n * r * r..(n + 1) * r * r],
            r as isize,
            1,
        );
    }
    let mut data = vec![T::zero(); out_shape.len()];
    for n in 0..nb {
        for i in 0..r {
            let ai = nq[n * r + i].max(eps);
            for j in 0..r {
                let aj = nk[n * r + j].max(eps);
                let v = dots[(n * r + i) * r + j] / (ai * aj);
                data[(n * r + i) * r + j] = v.min(T::one()).max(-T::one());
            }
        }
    }

    let tape = joint_tape(&[q, k]);
    let (iq, ik) = (q.node_id(), k.node_id());
    let (dq, dk) = (q.data_arc(), k.data_arc());
    let dots = Arc::new(dots);
    let (nq, nk) = (Arc::new(nq), Arc::new(nk));
    record_output("cosine_matrix", tape, out_shape, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            // grad w.r.t. the raw dot products
            let mut gs = vec![T::zero(); nb * r * r];
            for n in 0..nb {
                for i in 0..r {
                    let ai = nq[n * r + i].max(eps);
                    for j in 0..r {
                        let aj = nk[n * r + j].max(eps);
                        gs[(n * r + i) * r + j] = g[(n * r + i) * r + j] / (ai * aj);
                    }
                }
            }
            if let Some(id) = iq {
                let dst = buf.accum(id, sq.len());
                for n in 0..nb {
                    // dot-path: gq += gs x k
                    T::gemm(
                        r,
                        r,
                        c,
                        T::one(),
                        &gs[n * r * r..(n + 1) * r * r],
                        r as isize,
                        1,
                        &dk[n * r * c..(n + 1) * r * c],
                        c as isize,
                        1,
                        T::one(),
                        &mut dst[n * r * c..(n + 1) * r * c],
                        c as isize,
                        1,
                    );
                    // norm-path
                    for i in 0..r {
                        let norm = nq[n * r + i];
                        if norm <= eps {
                            continue;
                        }
                        let ai = norm;
                        let mut coef = T::zero();
                        for j in 0..r {
                            let aj = nk[n * r + j].max(eps);
                            coef += g[(n * r + i) * r + j] * dots[(n * r + i) * r + j]
                                / (ai * ai * aj);
                        }
                        let qi = &dq[(n * r + i) * c..(n * r + i + 1) * c];
                        let dsti = &mut dst[(n * r + i) * c..(n * r + i + 1) * c];
                        let scale = coef / ai;
                        for (d, qv) in dsti.iter_mut().zip(qi) {
                            *d -= scale * *qv;
                        }
                    }
                }
            }
            if let Some(id) = ik {
                let dst = buf.accum(id, sk.len());
                for n in 0..nb {
                    // dot-path: gk += gs^T x q
                    T::gemm(
                        r,
                        r,
                        c,
                        T::one(),
                        &gs[n * r * r..(n + 1) * r * r],
                        1,
                        r as isize,
                        &dq[n * r * c..(n + 1) * r * c],
                        c as isize,
                        1,
                        T::one(),
                        &mut dst[n * r * c..(n + 1) * r * c],
                        c as isize,
                        1,
                    );
                    // norm-path
                    for j in 0..r {
                        let norm = nk[n * r + j];
                        if norm <= eps {
                            continue;
                        }
                        let aj = norm;
                        let mut coef = T::zero();
                        for i in 0..r {
                            let ai = nq[n * r + i].max(eps);
                            coef += g[(n * r + i) * r + j] * dots[(n * r + i) * r + j]
                                / (ai * aj * aj);
                        }
                        let kj = &dk[(n * r + j) * c..(n * r + j + 1) * c];
                        let dstj = &mut dst[(n * r + j) * c..(n * r + j + 1) * c];
                        let scale = coef / aj;
                        for (d, kv) in dstj.iter_mut().zip(kj) {
                            *d -= scale * *kv;
                        }
                    }
                }
            }
        })
    })
}

/// Per-pixel layer norm over the channel axis, followed by a per-channel
/// affine (`scale`, `shift` shaped `(1, C, 1, 1)`).
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Tensor<T> {
    let sh = x.shape();
    let cdim = sh.c;
    assert_eq!(scale.shape(), Shape::new(1, cdim, 1, 1), "layer_norm: scale shape");
    assert_eq!(shift.shape(), Shape::new(1, cdim, 1, 1), "layer_norm: shift shape");
    let plane = sh.h * sh.w;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let cf = T::from_f64(cdim as f64);

    let mut xhat = vec![T::zero(); sh.len()];
    let mut inv = vec![T::zero(); sh.n * plane];
    let src = x.data();
    for n in 0..sh.n {
        for p in 0..plane {
            let mut mu = T::zero();
            for c in 0..cdim {
                mu += src[(n * cdim + c) * plane + p];
            }
            mu /= cf;
            let mut var = T::zero();
            for c in 0..cdim {
                let d = src[(n * cdim + c) * plane + p] - mu;
                var += d * d;
            }
            var /= cf;
            let iv = (var + eps).sqrt().recip();
            inv[n * plane + p] = iv;
            for c in 0..cdim {
                xhat[(n * cdim + c) * plane + p] = (src[(n * cdim + c) * plane + p] - mu) * iv;
            }
        }
    }
    let mut data = vec![T::zero(); sh.len()];
    for n in 0..sh.n {
        for c in 0..cdim {
            let (sc, sf) = (scale.data()[c], shift.data()[c]);
            for p in 0..plane {
                data[(n * cdim + c) * plane + p] = sc * xhat[(n * cdim + c) * plane + p] + sf;
            }
        }
    }

    let tape = joint_tape(&[x, scale, shift]);
    let (ix, is, ib) = (x.node_id(), scale.node_id(), shift.node_id());
    let dscale = scale.data_arc();
    let xhat = Arc::new(xhat);
    let inv = Arc::new(inv);
    record_output("layer_norm_channels", tape, sh, data, move || {
        Box::new(move |g, buf: &mut GradBuf<T>| {
            if let Some(id) = is {
                let dst = buf.accum(id, cdim);
                for n in 0..sh.n {
                    for c in 0..cdim {
                        let mut acc = T::zero();
                        for p in 0..plane {
                            acc += g[(n * cdim + c) * plane + p]
                                * xhat[(n * cdim + c) * plane + p];
                        }
                        dst[c] += acc;
                    }
                }
            }
            if let Some(id) = ib {
                let dst = buf.accum(id, cdim);
                for n in 0..sh.n {
                    for c in 0..cdim {
                        let mut acc = T::zero();
                        for p in 0..plane {
                            acc += g[(n * cdim + c) * plane + p];
                        }
                        dst[c] += acc;
                    }
                }
            }
            if let Some(id) = ix {
                let dst = buf.accum(id, sh.len());
                for n in 0..sh.n {
                    for p in 0..plane {
                        // per-pixel reduction over channels
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for c in 0..cdim {
                            let gh = g[(n * cdim + c) * plane + p] * dscale[c];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[(n * cdim + c) * plane + p];
                        }
                        mean_gh /= cf;
                        mean_ghx /= cf;
                        let iv = inv[n * plane + p];
                        for c in 0..cdim {
                            let gh = g[(n * cdim + c) * plane + p] * dscale[c];
                            dst[(n * cdim + c) * plane + p] +=
                                iv * (gh - mean_gh - xhat[(n * cdim + c) * plane + p] * mean_ghx);
                        }
                    }
                }
            }
        })
    })
}
