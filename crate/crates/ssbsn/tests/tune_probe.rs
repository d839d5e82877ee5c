use ssbsn::data::{add_noise, make_image, psnr, MemDataset, NoiseSpec, PatternKind};
use ssbsn::net::{build_network, NetworkConfig};
use ssbsn::pd::{denoise_ensemble, denoise_pd, PdConfig};
use ssbsn::tensor::Tensor;
use ssbsn::train::{assemble_batch, train_step, AdamState, TrainConfig};

fn scale_contrast(t: &Tensor<f32>, alpha: f32) -> Tensor<f32> {
    let d: Vec<f32> = t.data().iter().map(|v| 0.5 + alpha * (v - 0.5)).collect();
    Tensor::from_vec(t.shape(), d)
}

#[allow(clippy::type_complexity)]
fn data(
    kinds: [PatternKind; 3],
    alpha: f32,
) -> (MemDataset<f32>, Vec<(Tensor<f32>, Tensor<f32>)>) {
    let spec = NoiseSpec::gaussian(25.0 / 255.0, 600);
    let noisy: Vec<Tensor<f32>> = (0..64)
        .map(|i| {
            let c = scale_contrast(&make_image(kinds[i as usize % 3], 64, 64, 700 + i), alpha);
            add_noise(&c, &spec, i)
        })
        .collect();
    let held: Vec<(Tensor<f32>, Tensor<f32>)> = (0..8u64)
        .map(|i| {
            let c = scale_contrast(&make_image(kinds[i as usize % 3], 24, 24, 900 + i), alpha);
            let n = add_noise(&c, &spec, 1024 + i);
            (c, n)
        })
        .collect();
    (MemDataset::new(noisy, None), held)
}

#[test]
#[ignore]
fn tune() {
    let mosaic40 = [
        PatternKind::TextureMosaic { period: 40 },
        PatternKind::TextureMosaic { period: 40 },
        PatternKind::TextureMosaic { period: 40 },
    ];
    let corpus_a = [
        PatternKind::Tiles { period: 40 },
        PatternKind::TextureMosaic { period: 48 },
        PatternKind::Stripes { period: 45 },
    ];
    for (name, kinds, alpha, drop_at) in [
        ("plain-a0.5-drop1000", corpus_a, 0.5f32, 1000u64),
        ("mosaic40-a0.5", mosaic40, 0.5, 1600),
    ] {
        let (train, held) = data(kinds, alpha);
        let b24: f64 =
            held.iter().map(|(c, n)| psnr(n, c)).sum::<f64>() / held.len() as f64;
        for m in [3usize, 0] {
            let lr = 1e-3;
            let cfg = TrainConfig {
                patch_size: 60,
                batch_size: 2,
                lr,
                epochs: 1,
                lr_drop_epoch: 1,
                lr_drop_factor: 0.1,
                steps_per_epoch: 2000,
                seed: 11,
                pd: PdConfig::default(),
            };
            let net = NetworkConfig {
                channels: 32,
                modules_per_path: 3,
                m,
                gamma: 2,
                seed: 11,
                ..NetworkConfig::default()
            };
            let mut model = build_network::<f32>(&net).unwrap();
            let mut adam = AdamState::new();
            let mut losses = Vec::new();
            let t0 = std::time::Instant::now();
            for step in 0..2000u64 {
                let batch = assemble_batch(&cfg, &train, step);
                let step_lr = if step >= drop_at { lr * 0.1 } else { lr };
                losses.push(train_step(&mut model, &mut adam, step_lr, &batch, 5));
            }
            let tail: f64 = losses[1800..].iter().sum::<f64>() / 200.0;
            let plain: f64 = held
                .iter()
                .map(|(c, n)| psnr(&denoise_pd(&model, n, 2), c))
                .sum::<f64>()
                / held.len() as f64;
            let ens: f64 = held
                .iter()
                .map(|(c, n)| psnr(&denoise_ensemble(&model, n, 2), c))
                .sum::<f64>()
                / held.len() as f64;
            println!(
                "{name} m {m} tail200 {tail:.5} psnr24 {plain:.2} ens {ens:.2} (noisy {b24:.2}) elapsed {:.0}s",
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
