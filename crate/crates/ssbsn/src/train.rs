//! Self-supervised training: L1 between the network output and its own noisy
//! input on stride-5 pixel-shuffled sub-images, optimized with Adam. The
//! blind spot makes the identity solution unreachable, so minimizing this
//! loss denoises. Fully deterministic for a fixed seed: per-step RNGs are
//! derived from (seed, step), which also makes resumption exact.

use crate::data::{psnr, ssim, MemDataset, NoisyImages};
use crate::layers::{Ctx, Param};
use crate::net::{save_checkpoint, SsbsnModel};
use crate::pd::{denoise_pd, pd_down, Dihedral, PdConfig};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};
use rand::Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Epoch (0-based) at which the learning rate is multiplied once.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub pd: PdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 120,
            batch_size: 4,
            lr: 1e-4,
            epochs: 20,
            lr_drop_epoch: 16,
            lr_drop_factor: 0.1,
            steps_per_epoch: 1000,
            seed: 0,
            pd: PdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !self.patch_size.is_multiple_of(self.pd.s_train) {
            return err(format!(
                "patch_size {} must be divisible by the training stride {}",
                self.patch_size, self.pd.s_train
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return err("batch_size, epochs, and steps_per_epoch must be positive".into());
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.lr_drop_factor) {
            return err("learning rate and drop factor must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (single scheduled drop).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "l1_loss: shape mismatch");
    a.sub(b).abs().mean()
}

/// Random `size x size` crop of `image`.
pub fn sample_patch<T: Scalar, R: Rng>(rng: &mut R, image: &Tensor<T>, size: usize) -> Tensor<T> {
    let sh = image.shape();
    assert!(
        sh.h >= size && sh.w >= size,
        "image {sh} smaller than patch size {size}"
    );
    let y0 = rng.random_range(0..=sh.h - size);
    let x0 = rng.random_range(0..=sh.w - size);
    let mut out = vec![T::zero(); sh.n * sh.c * size * size];
    let dst_shape = crate::tensor::Shape::new(sh.n, sh.c, size, size);
    let src = image.data();
    for n in 0..sh.n {
        for c in 0..sh.c {
            for y in 0..size {
                let s = sh.at(n, c, y0 + y, x0);
                let d = dst_shape.at(n, c, y, 0);
                out[d..d + size].copy_from_slice(&src[s..s + size]);
            }
        }
    }
    Tensor::from_vec(dst_shape, out)
}

/// Uniform random dihedral-8 augmentation.
pub fn augment<T: Scalar, R: Rng>(rng: &mut R, patch: &Tensor<T>) -> Tensor<T> {
    Dihedral(rng.random_range(0..8u8)).apply(patch)
}

/// Adam optimizer state, keyed by parameter id.
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<usize, Vec<T>>,
    v: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One bias-corrected Adam update over `(param, gradient)` pairs.
    pub fn step(&mut self, lr: f64, updates: Vec<(&mut Param<T>, &[T])>) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (p, g) in updates {
            assert_eq!(p.shape.len(), g.len(), "gradient size mismatch");
            let m = self
                .m
                .entry(p.id)
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .v
                .entry(p.id)
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let vals = p.values_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                // Bias-corrected first/second moments.
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                vals[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One optimization step on an already-assembled batch `(n, 3, p, p)`.
/// Returns the loss value.
pub fn train_step<T: Scalar>(
    model: &mut SsbsnModel<T>,
    adam: &mut AdamState<T>,
    lr: f64,
    batch: &Tensor<T>,
    s_train: usize,
) -> f64 {
    let sub = pd_down(batch, s_train);
    let tape = Tape::new();
    let mut ctx = Ctx::train(&tape);
    let input = tape.leaf(&sub);
    let out = model.forward(&mut ctx, &input);
    let loss = l1_loss(&out, &input.detach());
    let loss_v = loss.item().as_f64();
    let grads = loss.backward();
    let bound = std::mem::take(&mut ctx.bound);
    let mut grad_by_id: HashMap<usize, Vec<T>> = HashMap::new();
    for (id, leaf) in &bound {
        if let Some(g) = grads.get(leaf) {
            grad_by_id.insert(*id, g.data().to_vec());
        }
    }
    let params = model.params_mut();
    let updates: Vec<(&mut Param<T>, &[T])> = params
        .into_iter()
        .filter_map(|p| grad_by_id.get(&p.id).map(|g| (p, g.as_slice())))
        .collect();
    adam.step(lr, updates);
    loss_v
}

/// Per-epoch validation against clean references (evaluation only).
pub fn validate<T: Scalar>(
    model: &SsbsnModel<T>,
    val: &MemDataset<T>,
    s_test: usize,
) -> Option<(f64, f64)> {
    if val.is_empty() || val.clean_for_eval(0).is_none() {
        return None;
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for i in 0..val.len() {
        let noisy = val.noisy(i);
        let clean = val.clean_for_eval(i)?;
        let den = denoise_pd(model, &noisy, s_test);
        psnr_sum += psnr(&den, clean);
        ssim_sum += ssim(&den, clean);
    }
    Some((psnr_sum / val.len() as f64, ssim_sum / val.len() as f64))
}

/// Run (or resume) training. Emits one `step,epoch,lr,loss` line per
/// `log_every` steps and one `epoch,val_psnr,val_ssim` line per epoch when
/// validation data is available; saves a checkpoint after every epoch when
/// `ckpt_dir` is given. `start_step` > 0 resumes mid-schedule and reproduces
/// the exact step sequence of an uninterrupted run.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Scalar>(
    model: &mut SsbsnModel<T>,
    adam: &mut AdamState<T>,
    cfg: &TrainConfig,
    data: &dyn NoisyImages<T>,
    val: Option<&MemDataset<T>>,
    log: &mut dyn Write,
    ckpt_dir: Option<&Path>,
    start_step: u64,
    log_every: u64,
) -> Result<()> {
    cfg.validate()?;
    assert!(!data.is_empty(), "training dataset is empty");
    let total_steps = (cfg.epochs * cfg.steps_per_epoch) as u64;
    let mut step = start_step;
    while step < total_steps {
        let epoch = (step / cfg.steps_per_epoch as u64) as usize;
        let lr = cfg.lr_at(epoch);
        let batch = assemble_batch(cfg, data, step);
        let loss = train_step(model, adam, lr, &batch, cfg.pd.s_train);
        if !loss.is_finite() {
            return Err(Error::TrainAbort {
                step,
                lr,
                param_norm: model.param_norm(),
                msg: format!("non-finite loss {loss}"),
            });
        }
        step += 1;
        if step.is_multiple_of(log_every) || step == total_steps {
            writeln!(log, "step,{step},{epoch},{lr:e},{loss:.6}")?;
        }
        if step.is_multiple_of(cfg.steps_per_epoch as u64) {
            let norm = model.param_norm();
            if !norm.is_finite() {
                return Err(Error::TrainAbort {
                    step,
                    lr,
                    param_norm: norm,
                    msg: "non-finite parameters".into(),
                });
            }
            if let Some(v) = val {
                if let Some((p, s)) = validate(model, v, cfg.pd.s_test) {
                    writeln!(log, "epoch,{epoch},{p:.4},{s:.5}")?;
                }
            }
            if let Some(dir) = ckpt_dir {
                save_checkpoint(model, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
                save_checkpoint(model, &dir.join("latest.ckpt"))?;
            }
        }
    }
    Ok(())
}

/// Deterministic batch for `step`: patches sampled and augmented with an RNG
/// derived from (seed, step), concatenated along the batch axis.
pub fn assemble_batch<T: Scalar>(
    cfg: &TrainConfig,
    data: &dyn NoisyImages<T>,
    step: u64,
) -> Tensor<T> {
    let mut rng = substream(cfg.seed ^ step.wrapping_mul(0x9e3779b97f4a7c15), "sampling");
    let sh0 = data.noisy(0).shape();
    let p = cfg.patch_size;
    let out_shape = crate::tensor::Shape::new(cfg.batch_size, sh0.c, p, p);
    let mut out = vec![T::zero(); out_shape.len()];
    let per = sh0.c * p * p;
    for b in 0..cfg.batch_size {
        let idx = rng.random_range(0..data.len());
        let img = data.noisy(idx);
        let raw = sample_patch(&mut rng, &img, p);
        let patch = augment(&mut rng, &raw);
        out[b * per..(b + 1) * per].copy_from_slice(patch.data());
    }
    Tensor::from_vec(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{add_noise, make_image, NoiseSpec, PatternKind};
    use crate::net::{build_network, NetworkConfig};
    use crate::tensor::Shape;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            channels: 4,
            modules_per_path: 2,
            m: 1,
            seed: 11,
            ..NetworkConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            patch_size: 60,
            batch_size: 2,
            epochs: 2,
            lr_drop_epoch: 1,
            steps_per_epoch: 3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> MemDataset<f64> {
        let spec = NoiseSpec::gaussian(25.0 / 255.0, 9);
        let noisy: Vec<_> = (0..3)
            .map(|i| {
                let clean = make_image(PatternKind::Stripes { period: 12 }, 70, 70, i);
                add_noise(&clean, &spec, i)
            })
            .collect();
        MemDataset::new(noisy, None)
    }

    #[test]
    fn lr_schedule_drops_once() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(15), 1e-4);
        assert_eq!(cfg.lr_at(16), 1e-5);
        assert_eq!(cfg.lr_at(19), 1e-5);
    }

    #[test]
    fn validate_catches_indivisible_patch() {
        let cfg = TrainConfig {
            patch_size: 63,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn l1_loss_is_mean_absolute_error() {
        let a = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, -1.0, 2.0, 0.0]);
        let b = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 1.0, 2.0, -3.0]);
        assert!((l1_loss(&a, &b).item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr_signed() {
        // With zero state, the first bias-corrected update is lr * sign(g)
        // up to the epsilon in the denominator.
        let mut adam = AdamState::<f64>::new();
        let mut p = Param {
            id: 0,
            shape: Shape::new(1, 1, 1, 3),
            data: std::sync::Arc::new(vec![1.0, 1.0, 1.0]),
        };
        let g = [0.5, -2.0, 0.0];
        adam.step(0.01, vec![(&mut p, &g)]);
        let v = &p.data;
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((v[1] - (1.0 + 0.01)).abs() < 1e-6);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn batches_are_deterministic_per_step() {
        let cfg = tiny_train();
        let data = tiny_data();
        let a = assemble_batch(&cfg, &data, 5);
        let b = assemble_batch(&cfg, &data, 5);
        let c = assemble_batch(&cfg, &data, 6);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert_eq!(a.shape(), Shape::new(2, 3, 60, 60));
    }

    #[test]
    fn augmentation_uses_all_eight_symmetries() {
        let patch = make_image::<f64>(PatternKind::Tiles { period: 4 }, 8, 8, 0);
        let mut rng = substream(0, "aug-test");
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let aug = augment(&mut rng, &patch);
            let key: Vec<u64> = aug.data().iter().map(|v| v.to_bits()).collect();
            seen.insert(key);
        }
        // The tile pattern has a diagonal symmetry, so at least 4 of the 8
        // orbit elements must be distinct; stripes guarantee more below.
        assert!(seen.len() >= 4, "only {} distinct augmentations", seen.len());
        let asym = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0],
        );
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let aug = augment(&mut rng, &asym);
            let key: Vec<u64> = aug.data().iter().map(|v| v.to_bits()).collect();
            seen.insert(key);
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn short_training_runs_are_reproducible_and_logged() {
        let data = tiny_data();
        let cfg = tiny_train();
        let run = || {
            let mut model = build_network::<f64>(&tiny_net()).unwrap();
            let mut adam = AdamState::new();
            let mut log = Vec::new();
            train_loop(&mut model, &mut adam, &cfg, &data, None, &mut log, None, 0, 1)
                .unwrap();
            (model, String::from_utf8(log).unwrap())
        };
        let (m1, log1) = run();
        let (m2, log2) = run();
        assert_eq!(log1, log2);
        for (a, b) in m1.params().iter().zip(m2.params()) {
            assert_eq!(a.data, b.data);
        }
        let steps: Vec<&str> = log1.lines().filter(|l| l.starts_with("step,")).collect();
        assert_eq!(steps.len(), 6);
        assert!(steps[0].starts_with("step,1,0,1e-4,"));
        assert!(steps[5].starts_with("step,6,1,1e-5,"), "{}", steps[5]);
    }

    #[test]
    fn training_reduces_the_loss_on_a_simple_pattern() {
        let data = tiny_data();
        let mut cfg = tiny_train();
        cfg.lr = 1e-3;
        cfg.epochs = 1;
        cfg.steps_per_epoch = 40;
        let mut model = build_network::<f64>(&tiny_net()).unwrap();
        let mut adam = AdamState::new();
        let probe = assemble_batch(&cfg, &data, 999);
        let loss_of = |m: &SsbsnModel<f64>| {
            let sub = pd_down(&probe, cfg.pd.s_train);
            let mut ctx = Ctx::infer();
            let out = m.forward(&mut ctx, &sub);
            l1_loss(&out, &sub).item()
        };
        let before = loss_of(&model);
        let mut log = Vec::new();
        train_loop(&mut model, &mut adam, &cfg, &data, None, &mut log, None, 0, 10)
            .unwrap();
        let after = loss_of(&model);
        assert!(
            after < before,
            "held-out batch loss did not improve: {before} -> {after}"
        );
    }
}
