//! Synthetic clean images with repeating structure (so self-similarity has
//! something to find) and seeded noise synthesis, i.i.d. or spatially
//! correlated.

use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Families of periodic clean images.
#[derive(Clone, Copy, Debug)]
pub enum PatternKind {
    /// Checkerboard-like colored tiles with the given period.
    Tiles { period: usize },
    /// Diagonal color stripes with the given period.
    Stripes { period: usize },
    /// A periodic tiling of one smooth random texture motif.
    TextureMosaic { period: usize },
}

/// Deterministic clean image `(1, 3, h, w)` in `[0, 1]`. `variant` picks the
/// palette / motif so a corpus of distinct images can share one kind.
pub fn make_image<T: Scalar>(kind: PatternKind, h: usize, w: usize, variant: u64) -> Tensor<T> {
    let shape = Shape::new(1, 3, h, w);
    let mut data = vec![T::zero(); shape.len()];
    let mut rng = substream(variant, "pattern");
    match kind {
        PatternKind::Tiles { period } => {
            assert!(period >= 2, "tile period must be >= 2");
            // A small palette per variant; each tile cell gets a palette color
            // from a deterministic hash so the image repeats with `period`.
            let palette: Vec<[f64; 3]> = (0..4)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let (ty, tx) = ((y % period) * 2 / period, (x % period) * 2 / period);
                    let color = palette[ty * 2 + tx];
                    for c in 0..3 {
                        data[shape.at(0, c, y, x)] = T::from_f64(color[c]);
                    }
                }
            }
        }
        PatternKind::Stripes { period } => {
            assert!(period >= 2, "stripe period must be >= 2");
            let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let b: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            for y in 0..h {
                for x in 0..w {
                    // Smooth diagonal ramp, periodic with `period`.
                    let t = ((y + x) % period) as f64 / period as f64;
                    let s = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t).cos();
                    for c in 0..3 {
                        data[shape.at(0, c, y, x)] = T::from_f64(a[c] * (1.0 - s) + b[c] * s);
                    }
                }
            }
        }
        PatternKind::TextureMosaic { period } => {
            assert!(period >= 4, "mosaic period must be >= 4");
            // One smooth motif = sum of a few random low-frequency waves over
            // the motif cell, tiled across the image.
            let mut motif = vec![[0.0f64; 3]; period * period];
            let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(1.0..3.0f64).round(),
                        rng.random_range(1.0..3.0f64).round(),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        [rng.random(), rng.random(), rng.random()],
                    )
                })
                .collect();
            for my in 0..period {
                for mx in 0..period {
                    for &(fy, fx, phase, amp) in &waves {
                        let v = (std::f64::consts::TAU
                            * (fy * my as f64 + fx * mx as f64)
                            / period as f64
                            + phase)
                            .sin();
                        for c in 0..3 {
                            motif[my * period + mx][c] += amp[c] * v / 4.0;
                        }
                    }
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let m = motif[(y % period) * period + (x % period)];
                    for c in 0..3 {
                        data[shape.at(0, c, y, x)] = T::from_f64(0.5 + 0.5 * m[c].clamp(-1.0, 1.0));
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// Noise model.
#[derive(Clone, Debug)]
pub enum NoiseKind {
    /// Pixel-wise independent Gaussian.
    GaussianIid,
    /// White Gaussian convolved (per channel) with the kernel, which is
    /// normalized so the marginal standard deviation stays `sigma`.
    GaussianCorrelated { kernel: Vec<Vec<f64>> },
}

#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation in `[0, 1]` units (e.g. 25/255).
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::GaussianIid,
            sigma,
            seed,
        }
    }

    /// 3x3 box-correlated Gaussian noise.
    pub fn correlated(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::GaussianCorrelated {
                kernel: vec![vec![1.0; 3]; 3],
            },
            sigma,
            seed,
        }
    }
}

/// Zero-mean noise field matching `shape`. `index` distinguishes draws for
/// different images under the same spec.
pub fn gen_noise<T: Scalar>(spec: &NoiseSpec, shape: Shape, index: u64) -> Tensor<T> {
    let mut rng = substream(spec.seed ^ index.wrapping_mul(0x9e3779b97f4a7c15), "noise");
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut field = vec![0.0f64; shape.len()];
    match &spec.kind {
        NoiseKind::GaussianIid => {
            for v in &mut field {
                *v = spec.sigma * normal(&mut rng);
            }
        }
        NoiseKind::GaussianCorrelated { kernel } => {
            // L2-normalize the kernel: convolving unit white noise with it
            // then keeps unit marginal variance.
            let kh = kernel.len();
            let kw = kernel[0].len();
            let norm = kernel
                .iter()
                .flatten()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let white: Vec<f64> = (0..shape.len()).map(|_| normal(&mut rng)).collect();
            for n in 0..shape.n {
                for c in 0..shape.c {
                    for y in 0..shape.h {
                        for x in 0..shape.w {
                            let mut acc = 0.0;
                            for (ky, row) in kernel.iter().enumerate() {
                                for (kx, &kv) in row.iter().enumerate() {
                                    let iy = y as isize + ky as isize - (kh / 2) as isize;
                                    let ix = x as isize + kx as isize - (kw / 2) as isize;
                                    if iy >= 0
                                        && iy < shape.h as isize
                                        && ix >= 0
                                        && ix < shape.w as isize
                                    {
                                        acc += kv
                                            * white[shape.at(n, c, iy as usize, ix as usize)];
                                    }
                                }
                            }
                            field[shape.at(n, c, y, x)] = spec.sigma * acc / norm;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, field.into_iter().map(T::from_f64).collect())
}

/// Clean image + noise, clamped to `[0, 1]`.
pub fn add_noise<T: Scalar>(clean: &Tensor<T>, spec: &NoiseSpec, index: u64) -> Tensor<T> {
    let noise = gen_noise::<T>(spec, clean.shape(), index);
    let data: Vec<T> = clean
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&c, &n)| T::from_f64((c.as_f64() + n.as_f64()).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(clean.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_periodic_and_in_range() {
        for kind in [
            PatternKind::Tiles { period: 8 },
            PatternKind::Stripes { period: 8 },
            PatternKind::TextureMosaic { period: 8 },
        ] {
            let img = make_image::<f64>(kind, 24, 24, 3);
            let sh = img.shape();
            let d = img.data();
            assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(
                            d[sh.at(0, c, y, x)],
                            d[sh.at(0, c, y + 8, x + 8)],
                            "{kind:?} not periodic at ({y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_indexed() {
        let spec = NoiseSpec::gaussian(0.1, 7);
        let shape = Shape::new(1, 3, 8, 8);
        let a = gen_noise::<f64>(&spec, shape, 0);
        let b = gen_noise::<f64>(&spec, shape, 0);
        let c = gen_noise::<f64>(&spec, shape, 1);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn iid_noise_has_roughly_the_requested_sigma() {
        let spec = NoiseSpec::gaussian(0.1, 1);
        let n = gen_noise::<f64>(&spec, Shape::new(1, 3, 64, 64), 0);
        let var: f64 =
            n.data().iter().map(|v| v * v).sum::<f64>() / n.data().len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "sd {}", var.sqrt());
    }

    fn neighbor_correlation(t: &Tensor<f64>) -> f64 {
        let sh = t.shape();
        let d = t.data();
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..sh.c {
            for y in 0..sh.h {
                for x in 0..sh.w - 1 {
                    num += d[sh.at(0, c, y, x)] * d[sh.at(0, c, y, x + 1)];
                    den += d[sh.at(0, c, y, x)] * d[sh.at(0, c, y, x)];
                }
            }
        }
        num / den
    }

    #[test]
    fn correlated_noise_correlates_neighbors_iid_does_not() {
        let shape = Shape::new(1, 3, 64, 64);
        let iid = gen_noise::<f64>(&NoiseSpec::gaussian(0.1, 2), shape, 0);
        let corr = gen_noise::<f64>(&NoiseSpec::correlated(0.1, 2), shape, 0);
        let ri = neighbor_correlation(&iid).abs();
        let rc = neighbor_correlation(&corr);
        assert!(ri < 0.1, "iid neighbor correlation {ri}");
        assert!(rc > 0.5, "correlated neighbor correlation {rc}");
        // L2-normalized kernel keeps the marginal deviation near sigma.
        let var: f64 =
            corr.data().iter().map(|v| v * v).sum::<f64>() / corr.data().len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.01, "sd {}", var.sqrt());
    }

    #[test]
    fn add_noise_clamps_to_unit_range() {
        let clean = make_image::<f64>(PatternKind::Stripes { period: 6 }, 16, 16, 0);
        let noisy = add_noise(&clean, &NoiseSpec::gaussian(0.5, 3), 0);
        assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(noisy.data(), clean.data());
    }
}
