use ssbsn::data::{add_noise, MemDataset, NoiseSpec};
use ssbsn::layers::Ctx;
use ssbsn::net::{build_network, NetworkConfig};
use ssbsn::pd::{pd_down, pd_up, PdConfig};
use ssbsn::tensor::{Shape, Tensor};
use ssbsn::train::{assemble_batch, train_step, AdamState, TrainConfig};

#[test]
#[ignore]
fn flat3() {
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
    // Fresh flat-noisy images at exact multiples of the geometry; run the
    // model on stride-s sub-images directly (no padding).
    for (side, s) in [(60usize, 5usize), (120, 5), (24, 2), (72, 2), (120, 2)] {
        let c = Tensor::<f32>::full(Shape::new(1, 3, side, side), 0.5);
        let n = add_noise(&c, &spec, 999 + side as u64 + s as u64);
        let sub = pd_down(&n, s);
        let ss = sub.shape();
        let mut ctx = Ctx::infer();
        let out = model.forward(&mut ctx, &sub);
        let up = pd_up(&out, s, 1);
        let d = up.data();
        let mut e = 0.0f64;
        for v in d { e += (*v as f64 - 0.5).abs(); }
        e /= d.len() as f64;
        println!("side={side} s={s} sub={}x{} err={:.4}", ss.h, ss.w, e);
    }
}
