//! End-to-end acceptance suite. Each numbered criterion prints exactly one
//! `[PASS]`/`[FAIL]` line (run with `--nocapture` to see them as they
//! complete); the test fails if any criterion fails. Criterion 6 trains two
//! small networks for 2000 steps each and dominates the runtime.

use rand::Rng;
use ssbsn::analysis::{attention_row_for_pixel, msa_flops, ss_flops};
use ssbsn::data::ppm::{read_ppm, write_ppm};
use ssbsn::data::{add_noise, make_image, psnr, MemDataset, NoiseSpec, PatternKind};
use ssbsn::layers::{Ctx, GridSpec, ParamInit, SsAttention};
use ssbsn::net::{
    ablation_variant, blind_spot_probe, build_network, NetworkConfig, SsbsnModel,
};
use ssbsn::pd::{denoise_pd, PdConfig};
use ssbsn::rng::substream;
use ssbsn::tensor::{Shape, Tensor};
use ssbsn::train::{train_loop, AdamState, TrainConfig};
use ssbsn::verify;
use std::time::Instant;

struct Criteria {
    results: Vec<bool>,
}

impl Criteria {
    fn record(&mut self, number: usize, title: &str, pass: bool, detail: String) {
        let tag = if pass { "[PASS]" } else { "[FAIL]" };
        println!("{tag} criterion {number} ({title}): {detail}");
        self.results.push(pass);
    }
}

fn rand_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor<f64> {
    let data = (0..3 * h * w).map(|_| rng.random_range(0.1..1.0)).collect();
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Make every gradient path structurally live: weights get their magnitude
/// (with a floor), biases a small positive constant, so with positive inputs
/// no ReLU can die and a zero gradient can only be architectural.
fn positivize(model: &mut SsbsnModel<f64>) {
    for p in model.params_mut() {
        let bias_like = p.shape.len() == p.shape.c || p.shape.len() == 1;
        for v in p.values_mut() {
            *v = if bias_like { 0.05 } else { v.abs().max(0.01) };
        }
    }
}

/// Network output at pixel `p`, summed over channels.
fn output_at(model: &SsbsnModel<f64>, image: &Tensor<f64>, p: (usize, usize)) -> f64 {
    let mut ctx = Ctx::infer();
    let out = model.forward(&mut ctx, image);
    let sh = out.shape();
    (0..3).map(|c| out.data()[sh.at(0, c, p.1, p.0)]).sum()
}

const ABLATIONS: [(bool, bool, bool, bool); 5] = [
    (true, true, true, true),
    (false, true, true, true),
    (true, false, true, true),
    (true, true, false, true),
    (true, true, true, false),
];

/// Criterion 1: the output at a pixel never depends on the input at that
/// pixel — exact zero gradient over 50 random parameterizations spanning all
/// ablation variants, corroborated by finite differences, with a sabotaged
/// mask as negative control.
fn criterion_blind_spot(c: &mut Criteria) {
    let mut rng = substream(101, "acceptance-bs");
    let (h, w) = (12, 12);
    let mut worst_grad = 0.0f64;
    let mut min_live = f64::INFINITY;
    let mut worst_fd = 0.0f64;
    for i in 0..50 {
        let (ss, qk, cs, df) = ABLATIONS[i % ABLATIONS.len()];
        let cfg = ablation_variant(&verify::tiny_config(rng.random()), ss, qk, cs, df);
        let mut model = build_network::<f64>(&cfg).expect("valid config");
        positivize(&mut model);
        let image = rand_image(&mut rng, h, w);
        for _ in 0..10 {
            let p = (rng.random_range(0..w), rng.random_range(0..h));
            let g = blind_spot_probe(&model, &image, p);
            let sh = g.shape();
            for ch in 0..3 {
                worst_grad = worst_grad.max(g.data()[sh.at(0, ch, p.1, p.0)].abs());
            }
            min_live = min_live.min(g.data().iter().map(|v| v.abs()).sum());
        }
        // Finite-difference corroboration on one pixel per model: perturbing
        // the input at p by +-1e-3 must not move the output at p.
        let p = (rng.random_range(0..w), rng.random_range(0..h));
        let base = output_at(&model, &image, p);
        for ch in 0..3 {
            for delta in [1e-3, -1e-3] {
                let mut bumped = image.data().to_vec();
                bumped[image.shape().at(0, ch, p.1, p.0)] += delta;
                let moved = output_at(
                    &model,
                    &Tensor::from_vec(image.shape(), bumped),
                    p,
                );
                worst_fd = worst_fd.max((moved - base).abs());
            }
        }
    }
    // Negative control: unmask the center weight; the gradient must leak.
    let mut model = build_network::<f64>(&verify::tiny_config(5)).expect("valid config");
    positivize(&mut model);
    for path in &mut model.paths {
        path.masked.mask_center = 1.0;
    }
    let image = rand_image(&mut rng, h, w);
    let mut leak = 0.0f64;
    for p in [(5, 7), (2, 3), (8, 4)] {
        let g = blind_spot_probe(&model, &image, p);
        let sh = g.shape();
        leak += (0..3).map(|ch| g.data()[sh.at(0, ch, p.1, p.0)].abs()).sum::<f64>();
    }
    let pass = worst_grad == 0.0 && min_live > 0.0 && worst_fd < 1e-9 && leak > 0.0;
    c.record(
        1,
        "blind spot",
        pass,
        format!(
            "50 models x 10 pixels: max |dout(p)/din(p)| = {worst_grad:.1e} (exact 0 required), \
             min total |grad| = {min_live:.2e} (> 0), max FD |delta out| = {worst_fd:.2e} (< 1e-9), \
             unmasked-center control leaks {leak:.2e} (> 0)"
        ),
    );
}

/// Criterion 2: receptive fields equal the predicted lattices exactly.
fn criterion_receptive_field(c: &mut Criteria) {
    let results = verify::receptive_field_checks();
    let pass = results.iter().all(|r| r.pass);
    let fails: Vec<&str> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    c.record(
        2,
        "receptive-field lattices",
        pass,
        if pass {
            format!(
                "{} checks: dilated stacks (d in {{2,3}}, depth 1-3) match the d-lattice \
                 exactly; attention support stays on the d-hat lattice for d-hat in {{4,6}}",
                results.len()
            )
        } else {
            format!("failed: {fails:?}")
        },
    );
}

/// Criterion 3: reverse-mode gradients agree with central finite differences
/// for every layer and the full small network.
fn criterion_gradients(c: &mut Criteria) {
    let results = verify::gradient_checks(20);
    let pass = results.iter().all(|r| r.pass);
    let fails: Vec<&str> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    c.record(
        3,
        "gradient fidelity",
        pass,
        if pass {
            format!(
                "{} cases x 20 trials vs central finite differences, max relative error \
                 below {:.0e}",
                results.len(),
                verify::GRAD_TOL
            )
        } else {
            format!("failed: {fails:?}")
        },
    );
}

/// Criterion 4: the shuffles are exact bijections and image files round-trip
/// byte-identically.
fn criterion_bijections(c: &mut Criteria) {
    let results = verify::bijection_checks();
    let mut pass = results.iter().all(|r| r.pass);
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("rt.ppm");
    let mut rng = substream(104, "acceptance-ppm");
    let img = rand_image(&mut rng, 19, 23);
    write_ppm(&path, &img).expect("write");
    let bytes = std::fs::read(&path).expect("read bytes");
    let back = read_ppm::<f64>(&path).expect("read");
    let path2 = dir.path().join("rt2.ppm");
    write_ppm(&path2, &back).expect("rewrite");
    let roundtrip = bytes == std::fs::read(&path2).expect("read bytes");
    pass &= roundtrip;
    c.record(
        4,
        "exact bijections",
        pass,
        format!(
            "{} shuffle/dihedral round trips bit-identical; P6 save/load byte-identical: \
             {roundtrip}",
            results.len()
        ),
    );
}

/// Criterion 5: the instrumented attention operation count equals the closed
/// form exactly across a size sweep, and the cost ratio approaches 1/d-hat^2.
fn criterion_flops(c: &mut Criteria) {
    let mut rng = substream(105, "acceptance-flops");
    let mut init = ParamInit::new(substream(105, "acceptance-flops-init"));
    let mut all_exact = true;
    for (h, w) in [(24, 24), (48, 48), (128, 128)] {
        for ch in [8usize, 32] {
            for d_hat in [4usize, 6] {
                if h % d_hat != 0 {
                    // 128 is not a multiple of 6; pad the sweep point to the
                    // nearest valid size and count that size instead.
                    continue;
                }
                let attn =
                    SsAttention::<f32>::new(&mut init, ch, GridSpec { d: d_hat, gamma: 1 }, true, true);
                let data = (0..ch * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = Tensor::from_vec(Shape::new(1, ch, h, w), data);
                let mut ctx = Ctx::infer().with_flops();
                let _ = attn.forward(&mut ctx, &x);
                let dynamic = ctx.flops.unwrap().total();
                all_exact &= dynamic == ss_flops(h, w, ch, d_hat);
            }
        }
    }
    // 132 = the nearest multiple of both grids above 128.
    for ch in [8usize, 32] {
        for d_hat in [4usize, 6] {
            let attn =
                SsAttention::<f32>::new(&mut init, ch, GridSpec { d: d_hat, gamma: 1 }, true, true);
            let data = (0..ch * 132 * 132).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(Shape::new(1, ch, 132, 132), data);
            let mut ctx = Ctx::infer().with_flops();
            let _ = attn.forward(&mut ctx, &x);
            all_exact &= ctx.flops.unwrap().total() == ss_flops(132, 132, ch, d_hat);
        }
    }
    // Asymptotic ratio at hw = 2^16.
    let mut asymptote_ok = true;
    let mut worst_dev = 0.0f64;
    for d_hat in [4usize, 6] {
        let ratio = ss_flops(256, 256, 32, d_hat) as f64 / msa_flops(256, 256, 32) as f64;
        let target = 1.0 / (d_hat * d_hat) as f64;
        let dev = (ratio - target).abs() / target;
        worst_dev = worst_dev.max(dev);
        asymptote_ok &= dev < 1e-3;
    }
    // Informational two-path mean at a typical working size (not pass/fail):
    // the published figure of about 3.8% is configuration-dependent.
    let mean = [4usize, 6]
        .iter()
        .map(|&d| ss_flops(128, 128, 128, d) as f64 / msa_flops(128, 128, 128) as f64)
        .sum::<f64>()
        / 2.0;
    let pass = all_exact && asymptote_ok;
    c.record(
        5,
        "complexity accounting",
        pass,
        format!(
            "dynamic count == closed form over the (h,w,C,d-hat) sweep: {all_exact}; \
             ratio at hw=2^16 within 0.1% of 1/d-hat^2 (worst dev {worst_dev:.2e}); \
             informational two-path mean ratio at 128x128 = {:.2}%",
            mean * 100.0
        ),
    );
}

/// Shared fixture for criteria 6-7: the trained small network and its
/// training-loss history, plus the m=0 control's history.
struct TrainedFixture {
    model: SsbsnModel<f32>,
    gain_db: f64,
    noisy_db: f64,
    denoised_db: f64,
    loss_m3: f64,
    loss_m0: f64,
}

fn net_config(m: usize) -> NetworkConfig {
    NetworkConfig {
        channels: 32,
        modules_per_path: 3,
        m,
        gamma: 2,
        seed: 11,
        ..NetworkConfig::default()
    }
}

fn train_config(steps: usize) -> TrainConfig {
    // Five epochs with the x0.1 drop entering the last one mirrors the
    // reference recipe's drop at epoch 16 of 20, scaled down.
    TrainConfig {
        patch_size: 60,
        batch_size: 1,
        lr: 1e-3,
        epochs: 5,
        lr_drop_epoch: 4,
        lr_drop_factor: 0.1,
        steps_per_epoch: steps.div_ceil(5),
        seed: 11,
        pd: PdConfig::default(),
    }
}

/// Mean of the losses logged over the final tenth of training.
fn tail_loss(log: &str) -> f64 {
    let losses: Vec<f64> = log
        .lines()
        .filter(|l| l.starts_with("step,"))
        .filter_map(|l| l.split(',').nth(4)?.parse().ok())
        .collect();
    let tail = &losses[losses.len() - losses.len() / 10..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn train_fixture(steps: usize) -> TrainedFixture {
    let sigma = 25.0 / 255.0;
    let spec = NoiseSpec::gaussian(sigma, 600);
    let kinds = [
        PatternKind::TextureMosaic { period: 16 },
        PatternKind::Tiles { period: 8 },
        PatternKind::Stripes { period: 12 },
    ];
    let noisy: Vec<Tensor<f32>> = (0..64)
        .map(|i| {
            let clean = make_image(kinds[i % kinds.len()], 64, 64, 700 + i as u64);
            add_noise(&clean, &spec, i as u64)
        })
        .collect();
    let data = MemDataset::new(noisy, None);
    let held_out: Vec<(Tensor<f32>, Tensor<f32>)> = (0..8)
        .map(|i| {
            let clean = make_image(kinds[i % kinds.len()], 64, 64, 900 + i as u64);
            let noisy = add_noise(&clean, &spec, 1000 + i as u64);
            (clean, noisy)
        })
        .collect();

    let cfg = train_config(steps);
    let run = |m: usize| {
        let mut model = build_network::<f32>(&net_config(m)).expect("valid config");
        let mut adam = AdamState::new();
        let mut log = Vec::new();
        train_loop(&mut model, &mut adam, &cfg, &data, None, &mut log, None, 0, 10)
            .expect("training completes");
        (model, String::from_utf8(log).expect("utf8 log"))
    };
    let (model, log_m3) = run(3);
    let (_, log_m0) = run(0);

    let mut noisy_db = 0.0;
    let mut denoised_db = 0.0;
    for (clean, noisy) in &held_out {
        noisy_db += psnr(noisy, clean);
        let den = denoise_pd(&model, noisy, cfg.pd.s_test);
        denoised_db += psnr(&den, clean);
    }
    noisy_db /= held_out.len() as f64;
    denoised_db /= held_out.len() as f64;
    TrainedFixture {
        model,
        gain_db: denoised_db - noisy_db,
        noisy_db,
        denoised_db,
        loss_m3: tail_loss(&log_m3),
        loss_m0: tail_loss(&log_m0),
    }
}

/// Criterion 6: desk-scale training efficacy — the trained network beats the
/// noisy input by at least 2 dB on held-out images, and placing SS blocks
/// (m=3) trains at least as well as the all-convolution control (m=0).
fn criterion_training(c: &mut Criteria, fx: &TrainedFixture) {
    let pass = fx.gain_db >= 2.0 && fx.loss_m3 <= fx.loss_m0;
    c.record(
        6,
        "training efficacy",
        pass,
        format!(
            "held-out PSNR {:.2} dB vs noisy {:.2} dB (gain {:.2} dB, need >= 2); \
             final training loss m=3 {:.5} <= m=0 {:.5}: {}",
            fx.denoised_db,
            fx.noisy_db,
            fx.gain_db,
            fx.loss_m3,
            fx.loss_m0,
            fx.loss_m3 <= fx.loss_m0
        ),
    );
}

/// Criterion 7: on a period-aligned tiled image, the deepest SS-Block's top-4
/// attention weights for an interior pixel include at least two exact motif
/// repeats.
fn criterion_self_similarity(c: &mut Criteria, fx: &TrainedFixture) {
    let period = 12;
    let image = make_image::<f32>(PatternKind::TextureMosaic { period }, 60, 60, 77);
    let mut ctx = Ctx::infer().with_attention_capture();
    let _ = fx.model.forward(&mut ctx, &image);
    // Deepest SS module of the small-kernel path (d-hat 4).
    let deepest = fx.model.config.modules_per_path - 1;
    let cap = ctx
        .attention
        .iter()
        .find(|cap| cap.module_index == deepest)
        .expect("deepest module captured attention");
    let (qx, qy) = (26usize, 30usize);
    let peers = attention_row_for_pixel(cap, 60, qx, qy);
    let top4 = &peers[..4];
    let repeats = top4
        .iter()
        .filter(|p| {
            (p.x != qx || p.y != qy)
                && p.x % period == qx % period
                && p.y % period == qy % period
        })
        .count();
    let listed: Vec<(usize, usize)> = top4.iter().map(|p| (p.x, p.y)).collect();
    c.record(
        7,
        "self-similarity signal",
        repeats >= 2,
        format!(
            "query ({qx},{qy}) on a period-{period} texture: top-4 attended pixels {listed:?} \
             contain {repeats} motif repeats (need >= 2)"
        ),
    );
}

/// Criterion 8: identical config and seed reproduce bit-identical checkpoints
/// and metrics logs.
fn criterion_determinism(c: &mut Criteria) {
    let net = verify::tiny_config(3);
    let cfg = TrainConfig {
        patch_size: 60,
        batch_size: 1,
        lr: 1e-3,
        epochs: 1,
        lr_drop_epoch: 1,
        lr_drop_factor: 0.1,
        steps_per_epoch: 20,
        seed: 8,
        pd: PdConfig::default(),
    };
    let spec = NoiseSpec::gaussian(25.0 / 255.0, 5);
    let noisy: Vec<Tensor<f32>> = (0..4)
        .map(|i| {
            let clean = make_image(PatternKind::Stripes { period: 10 }, 70, 70, i);
            add_noise(&clean, &spec, i)
        })
        .collect();
    let clean: Vec<Tensor<f32>> = (0..4)
        .map(|i| make_image(PatternKind::Stripes { period: 10 }, 70, 70, i))
        .collect();
    let data = MemDataset::new(noisy, Some(clean));
    let run = || {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut model = build_network::<f32>(&net).expect("valid config");
        let mut adam = AdamState::new();
        let mut log = Vec::new();
        train_loop(
            &mut model,
            &mut adam,
            &cfg,
            &data,
            Some(&data),
            &mut log,
            Some(dir.path()),
            0,
            5,
        )
        .expect("training completes");
        let ckpt = std::fs::read(dir.path().join("latest.ckpt")).expect("checkpoint");
        (ckpt, String::from_utf8(log).expect("utf8 log"))
    };
    let (ckpt1, log1) = run();
    let (ckpt2, log2) = run();
    let pass = ckpt1 == ckpt2 && log1 == log2 && !log1.is_empty();
    c.record(
        8,
        "determinism",
        pass,
        format!(
            "two identical runs: checkpoints byte-identical = {}, metrics logs identical = {} \
             ({} log lines incl. validation)",
            ckpt1 == ckpt2,
            log1 == log2,
            log1.lines().count()
        ),
    );
}

#[test]
fn acceptance() {
    let mut c = Criteria { results: Vec::new() };
    let t0 = Instant::now();
    criterion_blind_spot(&mut c);
    criterion_receptive_field(&mut c);
    criterion_gradients(&mut c);
    criterion_bijections(&mut c);
    criterion_flops(&mut c);
    let fx = train_fixture(2000);
    criterion_training(&mut c, &fx);
    criterion_self_similarity(&mut c, &fx);
    criterion_determinism(&mut c);
    println!("acceptance suite finished in {:.1}s", t0.elapsed().as_secs_f64());
    assert!(
        c.results.iter().all(|&p| p),
        "acceptance criteria failed: {:?}",
        c.results
            .iter()
            .enumerate()
            .filter(|(_, &p)| !p)
            .map(|(i, _)| i + 1)
            .collect::<Vec<_>>()
    );
}
