//! Image quality metrics over `[0, 1]` images: PSNR and SSIM.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB against a peak of 1.0. Identical images
/// give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr: shape mismatch");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.shape().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -r..=r {
        for x in -r..=r {
            w.push((-((y * y + x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), computed over the valid (fully covered) region and averaged
/// across channels. Requires images at least 11x11.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let sh = a.shape();
    assert_eq!(sh, b.shape(), "ssim: shape mismatch");
    assert!(
        sh.h >= SSIM_WINDOW && sh.w >= SSIM_WINDOW,
        "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {sh}"
    );
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..sh.n {
        for ch in 0..sh.c {
            for cy in r..sh.h - r {
                for cx in r..sh.w - r {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    let mut wi = 0;
                    for y in cy - r..=cy + r {
                        for x in cx - r..=cx + r {
                            let w = win[wi];
                            wi += 1;
                            let pa = da[sh.at(n, ch, y, x)].as_f64();
                            let pb = db[sh.at(n, ch, y, x)].as_f64();
                            ma += w * pa;
                            mb += w * pb;
                            va += w * pa * pa;
                            vb += w * pb * pb;
                            cov += w * pa * pb;
                        }
                    }
                    va -= ma * ma;
                    vb -= mb * mb;
                    cov -= ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}
