use ssbsn::data::{add_noise, psnr, MemDataset, NoiseSpec};
use ssbsn::net::{build_network, NetworkConfig};
use ssbsn::pd::{denoise_pd, PdConfig};
use ssbsn::tensor::{Shape, Tensor};
use ssbsn::train::{assemble_batch, train_step, AdamState, TrainConfig};

#[test]
#[ignore]
fn flat() {
    let spec = NoiseSpec::gaussian(25.0 / 255.0, 600);
    let clean: Vec<Tensor<f32>> = (0..16)
        .map(|_| Tensor::full(Shape::new(1, 3, 64, 64), 0.5))
        .collect();
    let noisy: Vec<Tensor<f32>> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| add_noise(c, &spec, i as u64))
        .collect();
    let data = MemDataset::new(noisy.clone(), None);
    for m in [0usize, 3] {
        let cfg = TrainConfig {
            patch_size: 60,
            batch_size: 1,
            lr: 3e-4,
            epochs: 1,
            lr_drop_epoch: 1,
            lr_drop_factor: 0.1,
            steps_per_epoch: 500,
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
        for step in 0..500u64 {
            let batch = assemble_batch(&cfg, &data, step);
            let loss = train_step(&mut model, &mut adam, cfg.lr, &batch, 5);
            if step % 100 == 0 || step == 499 {
                println!("m {m} step {step} loss {loss:.4}");
            }
        }
        let p = psnr(&denoise_pd(&model, &noisy[0], 2), &clean[0]);
        println!("m {m} flat psnr {p:.2} (noisy {:.2})", psnr(&noisy[0], &clean[0]));
    }
}
