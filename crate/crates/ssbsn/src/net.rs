//! The full SS-BSN assembly: a shared 1x1 feature head, two masked-convolution
//! paths (3x3 and 5x5) of nine dilated modules each with the last `m` replaced
//! by SS-Blocks, channel concatenation, and a 1x1 aggregation tail. Also the
//! verification probes (blind spot, receptive field) and checkpoint I/O.

use crate::layers::{
    derive_dilation, Conv1x1, Ctx, DConvBlock, FeatureHead, FeatureTail, GridSpec, MaskedConv,
    Param, ParamInit, SsAttention, SsBlock,
};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, conv2d, Shape, Tape, Tensor};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SSBSN1";

/// Architecture and ablation configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub channels: usize,
    pub modules_per_path: usize,
    /// Number of trailing dilated modules per path replaced by SS-Blocks.
    pub m: usize,
    /// Attention-grid sparsity factor; the effective grid is `gamma * d`.
    pub gamma: usize,
    /// Masked-convolution kernel sizes, one per path.
    pub kernel_sizes: [usize; 2],
    pub use_ss_attention: bool,
    pub qk_integration: bool,
    pub cosine_similarity: bool,
    /// When true (default) SS-Blocks take the last `m` slots, i.e.
    /// self-similarities are determined on denoised features; when false
    /// they take the first `m` slots (ablation).
    pub denoised_feature_placement: bool,
    pub ffn_residual: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: 32,
            modules_per_path: 9,
            m: 3,
            gamma: 2,
            kernel_sizes: [3, 5],
            use_ss_attention: true,
            qk_integration: true,
            cosine_similarity: true,
            denoised_feature_placement: true,
            ffn_residual: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Full-scale preset (C=128); the default is the desk-scale preset.
    pub fn full_scale() -> Self {
        NetworkConfig {
            channels: 128,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if !self.channels.is_multiple_of(2) || self.channels < 4 {
            return err(format!("channels must be even and >= 4, got {}", self.channels));
        }
        if self.m > self.modules_per_path {
            return err(format!(
                "m = {} exceeds modules_per_path = {}",
                self.m, self.modules_per_path
            ));
        }
        for k in self.kernel_sizes {
            if k % 2 == 0 || k < 3 {
                return err(format!("masked-conv kernel must be odd and >= 3, got {k}"));
            }
        }
        if self.gamma == 0 {
            return err("gamma must be >= 1".into());
        }
        Ok(())
    }

    /// Effective attention grids, one per path.
    pub fn d_hats(&self) -> Vec<usize> {
        self.kernel_sizes
            .iter()
            .map(|&k| self.gamma * derive_dilation(k))
            .collect()
    }

    /// Least common multiple of the grids the forward pass actually needs;
    /// 1 when no SS-Block is present.
    pub fn grid_lcm(&self) -> usize {
        if !self.use_ss_attention || self.m == 0 {
            return 1;
        }
        self.d_hats().into_iter().fold(1, lcm)
    }

    /// Canonical key = value rendering (embedded in checkpoints).
    pub fn to_text(&self) -> String {
        format!(
            "channels = {}\nmodules_per_path = {}\nm = {}\ngamma = {}\nkernel_small = {}\n\
             kernel_large = {}\nuse_ss_attention = {}\nqk_integration = {}\n\
             cosine_similarity = {}\ndenoised_feature_placement = {}\nffn_residual = {}\nseed = {}\n",
            self.channels,
            self.modules_per_path,
            self.m,
            self.gamma,
            self.kernel_sizes[0],
            self.kernel_sizes[1],
            self.use_ss_attention,
            self.qk_integration,
            self.cosine_similarity,
            self.denoised_feature_placement,
            self.ffn_residual,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line: {line}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value for {key}: {v}")))
        }
        match key {
            "channels" => self.channels = p(key, value)?,
            "modules_per_path" => self.modules_per_path = p(key, value)?,
            "m" => self.m = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "kernel_small" => self.kernel_sizes[0] = p(key, value)?,
            "kernel_large" => self.kernel_sizes[1] = p(key, value)?,
            "use_ss_attention" => self.use_ss_attention = p(key, value)?,
            "qk_integration" => self.qk_integration = p(key, value)?,
            "cosine_similarity" => self.cosine_similarity = p(key, value)?,
            "denoised_feature_placement" => self.denoised_feature_placement = p(key, value)?,
            "ffn_residual" => self.ffn_residual = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown network key: {key}"))),
        }
        Ok(())
    }
}

/// Derive the configuration for one ablation row: SS (attention at all),
/// QK (query/key integration), CS (cosine similarity), DF (SS-Blocks placed
/// on denoised features, i.e. last rather than first).
pub fn ablation_variant(
    base: &NetworkConfig,
    ss: bool,
    qk: bool,
    cs: bool,
    df: bool,
) -> NetworkConfig {
    NetworkConfig {
        use_ss_attention: ss,
        qk_integration: qk,
        cosine_similarity: cs,
        denoised_feature_placement: df,
        ..base.clone()
    }
}

// The variants differ in size, but modules live in a small Vec per path and
// are never moved after construction, so boxing would only add indirection.
#[allow(clippy::large_enum_variant)]
pub enum Module<T> {
    DConv(DConvBlock<T>),
    Ss(SsBlock<T>),
}

impl<T: Scalar> Module<T> {
    pub fn is_ss(&self) -> bool {
        matches!(self, Module::Ss(_))
    }
}

pub struct PathModel<T> {
    pub masked: MaskedConv<T>,
    pub dilation: usize,
    pub grid: GridSpec,
    pub modules: Vec<Module<T>>,
}

pub struct SsbsnModel<T> {
    pub config: NetworkConfig,
    pub head: FeatureHead<T>,
    pub paths: Vec<PathModel<T>>,
    pub tail: FeatureTail<T>,
}

/// Build a network with deterministic, seeded initialization: conv weights
/// uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)), biases 0, shared Q/K
/// transforms uniform in (-1/sqrt(C), +1/sqrt(C)), norm scale 1 / shift 0.
pub fn build_network<T: Scalar>(config: &NetworkConfig) -> Result<SsbsnModel<T>> {
    config.validate()?;
    let mut init = ParamInit::new(substream(config.seed, "init"));
    let c = config.channels;
    let head = FeatureHead::new(&mut init, c);
    let mut paths = Vec::new();
    for &k in &config.kernel_sizes {
        let d = derive_dilation(k);
        let grid = GridSpec {
            d,
            gamma: config.gamma,
        };
        let masked = MaskedConv::new(&mut init, c, c, k);
        let mut modules = Vec::new();
        for i in 0..config.modules_per_path {
            let ss_here = config.use_ss_attention
                && if config.denoised_feature_placement {
                    i >= config.modules_per_path - config.m
                } else {
                    i < config.m
                };
            if ss_here {
                let attn = SsAttention::new(
                    &mut init,
                    c,
                    grid,
                    config.qk_integration,
                    config.cosine_similarity,
                );
                let ffn = DConvBlock::new(&mut init, c, d, config.ffn_residual);
                modules.push(Module::Ss(SsBlock { attn, ffn }));
            } else {
                modules.push(Module::DConv(DConvBlock::new(
                    &mut init,
                    c,
                    d,
                    config.ffn_residual,
                )));
            }
        }
        paths.push(PathModel {
            masked,
            dilation: d,
            grid,
            modules,
        });
    }
    let tail = FeatureTail::new(&mut init, c);
    Ok(SsbsnModel {
        config: config.clone(),
        head,
        paths,
        tail,
    })
}

impl<T: Scalar> SsbsnModel<T> {
    /// Full forward pass. Spatial dims must be divisible by every active
    /// attention grid; callers pad (see the pixel-shuffle pipeline).
    pub fn forward(&self, ctx: &mut Ctx<T>, image: &Tensor<T>) -> Tensor<T> {
        let sh = image.shape();
        assert_eq!(sh.c, 3, "network input must have 3 channels, got {}", sh.c);
        for path in &self.paths {
            if path.modules.iter().any(Module::is_ss) {
                let dh = path.grid.d_hat();
                assert!(
                    sh.h.is_multiple_of(dh) && sh.w.is_multiple_of(dh),
                    "input {sh} not divisible by attention grid {dh}; pad first"
                );
            }
        }
        let features = self.head.forward(ctx, image);
        let mut outputs = Vec::new();
        for (pi, path) in self.paths.iter().enumerate() {
            let mut z = path.masked.forward(ctx, &features);
            for (mi, module) in path.modules.iter().enumerate() {
                ctx.module_index = pi * self.config.modules_per_path + mi;
                z = match module {
                    Module::DConv(b) => b.forward(ctx, &z),
                    Module::Ss(b) => b.forward(ctx, &z),
                };
            }
            outputs.push(z);
        }
        let merged = concat_channels(&outputs[0], &outputs[1]);
        self.tail.forward(ctx, &merged)
    }

    /// Parameters in declaration (= id) order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = Vec::new();
        fn push_c1<'a, T: Scalar>(v: &mut Vec<&'a Param<T>>, c: &'a Conv1x1<T>) {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        push_c1(&mut out, &self.head.conv);
        for path in &self.paths {
            out.push(&path.masked.weight);
            out.push(&path.masked.bias);
            for module in &path.modules {
                match module {
                    Module::DConv(b) => {
                        out.push(&b.conv1.weight);
                        out.push(&b.conv1.bias);
                        out.push(&b.conv2.weight);
                        out.push(&b.conv2.bias);
                        push_c1(&mut out, &b.proj);
                    }
                    Module::Ss(b) => {
                        out.push(&b.attn.w_qk);
                        if let Some(wk) = &b.attn.w_k {
                            out.push(wk);
                        }
                        out.push(&b.attn.norm_scale);
                        out.push(&b.attn.norm_shift);
                        out.push(&b.ffn.conv1.weight);
                        out.push(&b.ffn.conv1.bias);
                        out.push(&b.ffn.conv2.weight);
                        out.push(&b.ffn.conv2.bias);
                        push_c1(&mut out, &b.ffn.proj);
                    }
                }
            }
        }
        push_c1(&mut out, &self.tail.c1);
        push_c1(&mut out, &self.tail.c2);
        push_c1(&mut out, &self.tail.c3);
        debug_assert!(out.windows(2).all(|w| w[0].id < w[1].id));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        fn push_c1<'a, T: Scalar>(v: &mut Vec<&'a mut Param<T>>, c: &'a mut Conv1x1<T>) {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        push_c1(&mut out, &mut self.head.conv);
        for path in &mut self.paths {
            out.push(&mut path.masked.weight);
            out.push(&mut path.masked.bias);
            for module in &mut path.modules {
                match module {
                    Module::DConv(b) => {
                        out.push(&mut b.conv1.weight);
                        out.push(&mut b.conv1.bias);
                        out.push(&mut b.conv2.weight);
                        out.push(&mut b.conv2.bias);
                        push_c1(&mut out, &mut b.proj);
                    }
                    Module::Ss(b) => {
                        out.push(&mut b.attn.w_qk);
                        if let Some(wk) = &mut b.attn.w_k {
                            out.push(wk);
                        }
                        out.push(&mut b.attn.norm_scale);
                        out.push(&mut b.attn.norm_shift);
                        out.push(&mut b.ffn.conv1.weight);
                        out.push(&mut b.ffn.conv1.bias);
                        out.push(&mut b.ffn.conv2.weight);
                        out.push(&mut b.ffn.conv2.bias);
                        push_c1(&mut out, &mut b.ffn.proj);
                    }
                }
            }
        }
        push_c1(&mut out, &mut self.tail.c1);
        push_c1(&mut out, &mut self.tail.c2);
        push_c1(&mut out, &mut self.tail.c3);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.shape.len()).sum()
    }

    /// L2 norm over all parameters (training diagnostics).
    pub fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| {
                let x = T::as_f64(*v);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Exact input-gradient of the channel-summed output at pixel `(x, y)`.
/// The blind-spot property demands the returned tensor is exactly zero at
/// `(x, y)` in every channel.
pub fn blind_spot_probe<T: Scalar>(
    model: &SsbsnModel<T>,
    image: &Tensor<T>,
    pixel: (usize, usize),
) -> Tensor<T> {
    let sh = image.shape();
    assert_eq!(sh.n, 1);
    let (px, py) = pixel;
    assert!(px < sh.w && py < sh.h, "probe pixel outside image");
    let tape = Tape::new();
    let input = tape.leaf(image);
    let mut ctx = Ctx::train(&tape);
    let out = model.forward(&mut ctx, &input);
    let mut ind = vec![T::zero(); sh.len()];
    for c in 0..3 {
        ind[sh.at(0, c, py, px)] = T::one();
    }
    let picked = out.mul(&Tensor::from_vec(sh, ind)).sum();
    let grads = picked.backward();
    grads.get(&input).expect("input unreachable from output")
}

/// A layer in a receptive-field probe stack.
#[derive(Clone, Copy, Debug)]
pub enum ProbeLayer {
    /// Plain dilated k x k convolution (shape preserving), all-nonzero
    /// positive weights, no activation.
    Dilated { k: usize, d: usize },
    /// Center-masked k x k convolution, dilation 1.
    Masked { k: usize },
    /// SS-Attention with random parameters on the d-hat grid.
    Attention { d_hat: usize },
}

/// Boolean mask over pixels with nonzero input-gradient for the output at
/// `(x, y)` after the given module stack.
pub fn receptive_field_probe<T: Scalar>(
    stack: &[ProbeLayer],
    h: usize,
    w: usize,
    pixel: (usize, usize),
) -> Vec<bool> {
    let channels = 2;
    let sh = Shape::new(1, channels, h, w);
    let mut rng_init = ParamInit::new(substream(7, "rf-probe"));
    let tape: Tape<T> = Tape::new();
    // Positive input so attention norms are well-conditioned.
    let base: Vec<T> = (0..sh.len())
        .map(|i| T::from_f64(0.5 + 0.01 * ((i % 13) as f64)))
        .collect();
    let input = tape.leaf(&Tensor::from_vec(sh, base));
    let mut z = input.clone();
    for layer in stack {
        z = match *layer {
            ProbeLayer::Dilated { k, d } => {
                // All-nonzero positive weights: no cancellation possible.
                let ws = Shape::new(channels, channels, k, k);
                let wdata: Vec<T> = (0..ws.len())
                    .map(|i| T::from_f64(0.3 + 0.01 * ((i % 7) as f64)))
                    .collect();
                conv2d(&z, &Tensor::from_vec(ws, wdata), None, d, d * (k - 1) / 2)
            }
            ProbeLayer::Masked { k } => {
                let ws = Shape::new(channels, channels, k, k);
                let kc = k / 2;
                let mut wdata: Vec<T> = (0..ws.len())
                    .map(|i| T::from_f64(0.3 + 0.01 * ((i % 7) as f64)))
                    .collect();
                for co in 0..channels {
                    for ci in 0..channels {
                        wdata[ws.at(co, ci, kc, kc)] = T::zero();
                    }
                }
                conv2d(&z, &Tensor::from_vec(ws, wdata), None, 1, (k - 1) / 2)
            }
            ProbeLayer::Attention { d_hat } => {
                let attn = SsAttention::new(
                    &mut rng_init,
                    channels,
                    GridSpec { d: d_hat, gamma: 1 },
                    true,
                    true,
                );
                let mut ctx = Ctx::infer();
                attn.forward(&mut ctx, &z)
            }
        };
    }
    let (px, py) = pixel;
    let mut ind = vec![T::zero(); sh.len()];
    for c in 0..channels {
        ind[sh.at(0, c, py, px)] = T::one();
    }
    let picked = z.mul(&Tensor::from_vec(sh, ind)).sum();
    let grads = picked.backward();
    let g = grads.get(&input).expect("input unreachable");
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                if g.data()[sh.at(0, c, y, x)] != T::zero() {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    mask
}

/// The lattice `{p + (nx*d, ny*d) : |nx|,|ny| <= l}` clipped to the image.
pub fn lattice_mask(h: usize, w: usize, pixel: (usize, usize), d: usize, l: usize) -> Vec<bool> {
    let (px, py) = pixel;
    let mut mask = vec![false; h * w];
    let r = (l * d) as isize;
    let step = d as isize;
    let mut y = py as isize - r;
    while y <= py as isize + r {
        if y >= 0 && y < h as isize {
            let mut x = px as isize - r;
            while x <= px as isize + r {
                if x >= 0 && x < w as isize {
                    mask[y as usize * w + x as usize] = true;
                }
                x += step;
            }
        }
        y += step;
    }
    mask
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

// --- checkpoint I/O -------------------------------------------------------

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Versioned binary checkpoint: magic `SSBSN1`, the config record, then the
/// parameter tensors in declaration order as little-endian f32, each prefixed
/// by rank and dims as u32.
pub fn save_checkpoint<T: Scalar>(model: &SsbsnModel<T>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let cfg = model.config.to_text();
    write_u32(&mut w, cfg.len() as u32)?;
    w.write_all(cfg.as_bytes())?;
    for p in model.params() {
        write_u32(&mut w, 4)?;
        for d in [p.shape.n, p.shape.c, p.shape.h, p.shape.w] {
            write_u32(&mut w, d as u32)?;
        }
        for v in p.data.iter() {
            w.write_all(&(T::as_f64(*v) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SsbsnModel<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("config record is not UTF-8: {e}")))?;
    let config = NetworkConfig::from_text(&cfg_text)?;
    let mut model = build_network::<T>(&config)?;
    for p in model.params_mut() {
        let rank = read_u32(&mut r)?;
        if rank != 4 {
            return Err(Error::Checkpoint(format!("unexpected rank {rank}")));
        }
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let expect = p.shape;
        if dims != [expect.n, expect.c, expect.h, expect.w] {
            return Err(Error::Checkpoint(format!(
                "parameter {} has dims {dims:?}, expected {expect}",
                p.id
            )));
        }
        let vals = p.values_mut();
        for v in vals.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = T::from_f64(f32::from_le_bytes(b) as f64);
        }
    }
    Ok(model)
}
