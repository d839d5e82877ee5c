//! Image I/O, synthetic data generation, quality metrics, and the on-disk
//! dataset layout. Images are `(n, 3, h, w)` tensors with values in `[0, 1]`.

pub mod dataset;
pub mod metrics;
pub mod ppm;
pub mod synth;

pub use dataset::{MemDataset, NoisyImages};
pub use metrics::{psnr, ssim};
pub use ppm::{read_ppm, write_ppm};
pub use synth::{add_noise, gen_noise, make_image, NoiseKind, NoiseSpec, PatternKind};
