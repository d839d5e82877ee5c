use ssbsn::data::{add_noise, MemDataset, NoiseSpec};
use ssbsn::net::{build_network, NetworkConfig};
use ssbsn::pd::{denoise_pd, PdConfig};
use ssbsn::tensor::{Shape, Tensor};
use ssbsn::train::{assemble_batch, train_step, AdamState, TrainConfig};

#[test]
#[ignore]
fn flat2() {
    let spec = NoiseSpec::gaussian(25.0 / 255.0, 600);
    let clean: Vec<Tensor<f32>> = (0..16)
        .map(|_| Tensor::full(Shape::new(1, 3, 64, 64), 0.5))
        .collect();
    let noisy: Vec<Tensor<f32>> = clean
        .iter().enumerate()
        .map(|(i, c)| add_noise(c, &spec, i as u64))
        .collect();
    let data = MemDataset::new(noisy.clone(), None);
    let cfg = TrainConfig {
        patch_size: 60, batch_size: 1, lr: 3e-4, epochs: 1,
        lr_drop_epoch: 1, lr_drop_factor: 0.1, steps_per_epoch: 500,
        seed: 11, pd: PdConfig::default(),
    };
    let net = NetworkConfig {
        channels: 32, modules_per_path: 3, m: 3, gamma: 2, seed: 11,
        ..NetworkConfig::default()
    };
    let mut model = build_network::<f32>(&net).unwrap();
    let mut adam = AdamState::new();
    for step in 0..500u64 {
        let batch = assemble_batch(&cfg, &data, step);
        train_step(&mut model, &mut adam, cfg.lr, &batch, 5);
    }
    for s in [5usize, 2] {
        let den = denoise_pd(&model, &noisy[0], s);
        let sh = den.shape();
        let d = den.data();
        let err = |y0: usize, y1: usize, x0: usize, x1: usize| {
            let mut e = 0.0f64; let mut n = 0;
            for c in 0..3 { for y in y0..y1 { for x in x0..x1 {
                e += (d[sh.at(0, c, y, x)] as f64 - 0.5).abs(); n += 1; } } }
            e / n as f64
        };
        println!(
            "s={s}: mean|err| all {:.4} interior(16..48) {:.4} border-top(0..4) {:.4} corner(0..4,0..4) {:.4} center px {:.4}",
            err(0, 64, 0, 64), err(16, 48, 16, 48), err(0, 4, 0, 64), err(0, 4, 0, 4),
            d[sh.at(0, 0, 32, 32)]
        );
    }
}
