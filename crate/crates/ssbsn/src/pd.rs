//! Pixel-shuffle downsampling (PD): an exact bijection between an image and a
//! batch of stride-`s` sub-images. Training runs the network on stride-5
//! sub-images; testing on stride-2, which breaks noise correlation while
//! keeping more structure. Includes reflect padding so arbitrary image sizes
//! fit the stride and attention grids, and the dihedral-8 transforms used for
//! augmentation and self-ensembling.

use crate::layers::Ctx;
use crate::net::SsbsnModel;
use crate::scalar::Scalar;
use crate::tensor::{batch_to_space, space_to_batch, Shape, Tensor};

/// Strides for the asymmetric train/test pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PdConfig {
    pub s_train: usize,
    pub s_test: usize,
}

impl Default for PdConfig {
    fn default() -> Self {
        PdConfig {
            s_train: 5,
            s_test: 2,
        }
    }
}

/// Split `(n, c, h, w)` into `(n*s*s, c, h/s, w/s)` stride-`s` sub-images.
/// Sub-image `i*s + j` of sample `n` holds the pixels at offsets `(i, j)`
/// modulo `s`. Exact inverse of [`pd_up`].
pub fn pd_down<T: Scalar>(t: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = t.shape();
    assert!(
        s >= 1 && sh.h.is_multiple_of(s) && sh.w.is_multiple_of(s),
        "pd_down: stride {s} does not divide {sh}"
    );
    space_to_batch(t, s)
}

/// Reassemble the output of [`pd_down`]. `n` is the original batch size.
pub fn pd_up<T: Scalar>(t: &Tensor<T>, s: usize, n: usize) -> Tensor<T> {
    assert!(t.shape().n == n * s * s, "pd_up: batch is not n*s*s");
    batch_to_space(t, s, n)
}

/// Pad on the bottom/right by reflecting without repeating the border pixel
/// ("bounce" indexing: ... 2 1 0 1 2 ... n-2 n-1 n-2 ...). Requires the pad
/// amount to stay below the image size in each padded dimension.
pub fn reflect_pad<T: Scalar>(t: &Tensor<T>, pad_h: usize, pad_w: usize) -> Tensor<T> {
    let sh = t.shape();
    assert!(
        (pad_h == 0 || sh.h > pad_h) && (pad_w == 0 || sh.w > pad_w),
        "reflect_pad: pad ({pad_h},{pad_w}) too large for {sh}"
    );
    let out_shape = Shape::new(sh.n, sh.c, sh.h + pad_h, sh.w + pad_w);
    let mut out = vec![T::zero(); out_shape.len()];
    let src = t.data();
    let bounce = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    for n in 0..sh.n {
        for c in 0..sh.c {
            for y in 0..out_shape.h {
                let sy = bounce(y, sh.h);
                for x in 0..out_shape.w {
                    let sx = bounce(x, sh.w);
                    out[out_shape.at(n, c, y, x)] = src[sh.at(n, c, sy, sx)];
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Crop to the top-left `(h, w)` window.
pub fn crop<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let sh = t.shape();
    assert!(h <= sh.h && w <= sh.w, "crop: target exceeds {sh}");
    let out_shape = Shape::new(sh.n, sh.c, h, w);
    let mut out = vec![T::zero(); out_shape.len()];
    let src = t.data();
    for n in 0..sh.n {
        for c in 0..sh.c {
            for y in 0..h {
                let s = sh.at(n, c, y, 0);
                let d = out_shape.at(n, c, y, 0);
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Round `v` up to a multiple of `m`.
fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Full inference pipeline for one image `(1, 3, h, w)`: reflect-pad so the
/// size is a multiple of `s` times the network's attention-grid lcm, shuffle
/// down with stride `s`, run all sub-images through the network as one batch,
/// shuffle back up, and crop to the original size.
pub fn denoise_pd<T: Scalar>(model: &SsbsnModel<T>, image: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = image.shape();
    assert_eq!(sh.n, 1, "denoise_pd expects a single image");
    let unit = s * model.config.grid_lcm();
    let ph = round_up(sh.h, unit) - sh.h;
    let pw = round_up(sh.w, unit) - sh.w;
    let padded = reflect_pad(image, ph, pw);
    let sub = pd_down(&padded, s);
    let mut ctx = Ctx::infer();
    let out = model.forward(&mut ctx, &sub);
    let up = pd_up(&out, s, 1);
    crop(&up, sh.h, sh.w)
}

/// The eight symmetries of the square, indexed 0..8: index & 3 selects the
/// quarter-turn count, index & 4 adds a horizontal flip before rotating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral(0),
        Dihedral(1),
        Dihedral(2),
        Dihedral(3),
        Dihedral(4),
        Dihedral(5),
        Dihedral(6),
        Dihedral(7),
    ];

    /// Apply the symmetry (flip, if selected, then clockwise quarter-turns)
    /// to every sample of `t`.
    pub fn apply<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        let sh = t.shape();
        let rot = (self.0 & 3) as usize;
        let flip = self.0 & 4 != 0;
        let (oh, ow) = if rot % 2 == 1 {
            (sh.w, sh.h)
        } else {
            (sh.h, sh.w)
        };
        let out_shape = Shape::new(sh.n, sh.c, oh, ow);
        let mut out = vec![T::zero(); out_shape.len()];
        let src = t.data();
        for n in 0..sh.n {
            for c in 0..sh.c {
                for y in 0..sh.h {
                    for x in 0..sh.w {
                        let (mut yy, mut xx) = (y, if flip { sh.w - 1 - x } else { x });
                        let (mut ch, mut cw) = (sh.h, sh.w);
                        for _ in 0..rot {
                            // One clockwise quarter turn: (y, x) in an h x w
                            // image lands at (x, h-1-y) in a w x h image.
                            let (ny, nx) = (xx, ch - 1 - yy);
                            yy = ny;
                            xx = nx;
                            std::mem::swap(&mut ch, &mut cw);
                        }
                        out[out_shape.at(n, c, yy, xx)] = src[sh.at(n, c, y, x)];
                    }
                }
            }
        }
        Tensor::from_vec(out_shape, out)
    }

    /// The symmetry undoing `self`.
    pub fn inverse(self) -> Dihedral {
        if self.0 & 4 != 0 {
            // Flip-then-rotate elements are involutions.
            self
        } else {
            Dihedral((4 - (self.0 & 3)) & 3)
        }
    }
}

/// Self-ensemble: average the denoiser over all eight dihedral symmetries.
pub fn denoise_ensemble<T: Scalar>(
    model: &SsbsnModel<T>,
    image: &Tensor<T>,
    s: usize,
) -> Tensor<T> {
    let mut acc: Option<Tensor<T>> = None;
    for g in Dihedral::ALL {
        let out = g.inverse().apply(&denoise_pd(model, &g.apply(image), s));
        acc = Some(match acc {
            Some(a) => a.add(&out),
            None => out,
        });
    }
    acc.unwrap().scale(1.0 / 8.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride2_subimage_enumeration() {
        // 4x4 single-channel image 0..16: the four stride-2 sub-images.
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(f64::from).collect());
        let y = pd_down(&x, 2);
        assert_eq!(y.shape(), Shape::new(4, 1, 2, 2));
        assert_eq!(&y.data()[0..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(&y.data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(&y.data()[8..12], &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(&y.data()[12..16], &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(pd_up(&y, 2, 1).data(), x.data());
    }

    #[test]
    fn reflect_pad_bounces_without_repeating_edge() {
        // Row 0 1 2 padded by 2 on the right: 0 1 2 1 0.
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 2.0]);
        let y = reflect_pad(&x, 0, 2);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn reflect_pad_two_dims() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = reflect_pad(&x, 1, 1);
        // rows: [1 2 1], [3 4 3], then bounce row back to [1 2 1]
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 3.0, 4.0, 3.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn crop_takes_top_left() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), (0..9).map(f64::from).collect());
        let y = crop(&x, 2, 2);
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn dihedral_rotation_maps_known_pixels() {
        // 2x3 image, one quarter turn clockwise -> 3x2.
        let x = Tensor::from_vec(
            Shape::new(1, 1, 2, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        );
        let y = Dihedral(1).apply(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 2));
        // clockwise: first column becomes last row reversed
        assert_eq!(y.data(), &[4.0, 1.0, 5.0, 2.0, 6.0, 3.0]);
    }

    #[test]
    fn dihedral_elements_are_distinct_and_invertible() {
        let x = Tensor::from_vec(
            Shape::new(1, 2, 3, 3),
            (0..18).map(|i| i as f64).collect(),
        );
        let mut images: Vec<Vec<f64>> = Vec::new();
        for g in Dihedral::ALL {
            let y = g.apply(&x);
            assert_eq!(g.inverse().apply(&y).data(), x.data(), "{g:?}");
            if y.shape() == x.shape() {
                images.push(y.data().to_vec());
            }
        }
        // The four same-shape images (0, 180, and the two flips) differ.
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                assert_ne!(images[i], images[j]);
            }
        }
    }
}
