//! Network building blocks: masked convolution (the blind spot), dilated
//! convolution blocks, and the grid-based self-similarity attention pair.

use crate::scalar::Scalar;
use crate::tensor::{
    batch_to_space, bmm, bmm_nt, conv2d, cosine_matrix, from_rows, grid_partition,
    layer_norm_channels, softmax_rows, to_rows, Shape, Tape, Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// A trainable parameter: plain values plus a stable id fixing its position
/// in checkpoints and optimizer state.
#[derive(Clone)]
pub struct Param<T> {
    pub id: usize,
    pub shape: Shape,
    pub data: Arc<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn values_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }
}

/// Allocates parameters with sequential ids and seeded initial values.
pub struct ParamInit {
    rng: ChaCha8Rng,
    next_id: usize,
}

impl ParamInit {
    pub fn new(rng: ChaCha8Rng) -> Self {
        ParamInit { rng, next_id: 0 }
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform<T: Scalar>(&mut self, shape: Shape, bound: f64) -> Param<T> {
        let data = (0..shape.len())
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        self.alloc(shape, data)
    }

    pub fn constant<T: Scalar>(&mut self, shape: Shape, v: f64) -> Param<T> {
        self.alloc(shape, vec![T::from_f64(v); shape.len()])
    }

    fn alloc<T: Scalar>(&mut self, shape: Shape, data: Vec<T>) -> Param<T> {
        let id = self.next_id;
        self.next_id += 1;
        Param {
            id,
            shape,
            data: Arc::new(data),
        }
    }
}

/// One attention map captured during a forward pass, for overlay export.
pub struct AttnCapture<T> {
    /// Global module index (path * modules_per_path + position).
    pub module_index: usize,
    pub d_hat: usize,
    /// Spatial dims of one grid group.
    pub group_h: usize,
    pub group_w: usize,
    /// `groups x rows x rows` softmax weights, row-major.
    pub weights: Vec<T>,
    pub groups: usize,
}

/// Multiply-accumulate tally for one forward pass.
///
/// Counting conventions (chosen to reproduce the closed-form complexity
/// expressions exactly): convolutions count 2 units per tap per output
/// element (multiply + add), attention-map products count 1 unit per
/// multiply-accumulate, and attention linear transforms count 1 unit per
/// produced element.
#[derive(Default)]
pub struct FlopTally {
    pub entries: Vec<(String, u128)>,
}

impl FlopTally {
    pub fn total(&self) -> u128 {
        self.entries.iter().map(|(_, c)| c).sum()
    }
}

/// Per-forward context: optional tape binding, parameter registry for the
/// optimizer, and optional instrumentation.
pub struct Ctx<'t, T: Scalar> {
    pub tape: Option<&'t Tape<T>>,
    /// `(param id, bound leaf)` pairs in binding order.
    pub bound: Vec<(usize, Tensor<T>)>,
    pub flops: Option<FlopTally>,
    pub capture_attention: bool,
    pub attention: Vec<AttnCapture<T>>,
    pub(crate) module_index: usize,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn infer() -> Self {
        Ctx {
            tape: None,
            bound: Vec::new(),
            flops: None,
            capture_attention: false,
            attention: Vec::new(),
            module_index: 0,
        }
    }

    pub fn train(tape: &'t Tape<T>) -> Self {
        Ctx {
            tape: Some(tape),
            ..Ctx::infer()
        }
    }

    pub fn with_flops(mut self) -> Self {
        self.flops = Some(FlopTally::default());
        self
    }

    pub fn with_attention_capture(mut self) -> Self {
        self.capture_attention = true;
        self
    }

    /// Bind a parameter into this pass. On a tape it becomes a leaf whose
    /// gradient the optimizer can collect afterwards.
    pub fn param(&mut self, p: &Param<T>) -> Tensor<T> {
        let t = Tensor::from_arc(p.shape, Arc::clone(&p.data));
        match self.tape {
            Some(tape) => {
                let leaf = tape.leaf(&t);
                self.bound.push((p.id, leaf.clone()));
                leaf
            }
            None => t,
        }
    }

    pub fn tally(&mut self, name: &str, count: u128) {
        if let Some(f) = &mut self.flops {
            f.entries.push((name.to_string(), count));
        }
    }
}

/// Dilation rule of the dilated blind-spot architecture: `d = (k_mc + 1) / 2`.
pub fn derive_dilation(k_mc: usize) -> usize {
    assert!(k_mc % 2 == 1, "masked-conv kernel size must be odd, got {k_mc}");
    k_mc.div_ceil(2)
}

/// Base dilation `d` and sparsity factor `gamma`; the attention grid is
/// `d_hat = gamma * d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub d: usize,
    pub gamma: usize,
}

impl GridSpec {
    pub fn d_hat(&self) -> usize {
        self.gamma * self.d
    }
}

/// Per-pixel channel mixing (1x1 convolution).
pub struct Conv1x1<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv1x1<T> {
    pub fn new(init: &mut ParamInit, c_in: usize, c_out: usize) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Conv1x1 {
            weight: init.uniform(Shape::new(c_out, c_in, 1, 1), bound),
            bias: init.constant(Shape::new(1, c_out, 1, 1), 0.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let sh = x.shape();
        let ws = self.weight.shape;
        ctx.tally(
            "conv1x1",
            2 * (ws.n * ws.c * sh.n * sh.h * sh.w) as u128,
        );
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        conv2d(x, &w, Some(&b), 1, 0)
    }
}

/// Square convolution with configurable dilation, shape-preserving padding.
pub struct ConvLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub dilation: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(init: &mut ParamInit, c_in: usize, c_out: usize, k: usize, dilation: usize) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        ConvLayer {
            weight: init.uniform(Shape::new(c_out, c_in, k, k), bound),
            bias: init.constant(Shape::new(1, c_out, 1, 1), 0.0),
            dilation,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let sh = x.shape();
        let ws = self.weight.shape;
        let k = ws.h;
        ctx.tally(
            "conv",
            2 * (k * k * ws.c * ws.n * sh.n * sh.h * sh.w) as u128,
        );
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        conv2d(x, &w, Some(&b), self.dilation, self.dilation * (k - 1) / 2)
    }
}

/// Convolution whose kernel center is forced to zero at every forward call,
/// creating the blind spot. The mask multiplies the weights, so the center
/// weight also receives zero gradient and can never train back in.
pub struct MaskedConv<T> {
    pub k: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// 0.0 in normal operation. Verification's negative control sets it to
    /// 1.0 to prove the blind-spot check actually bites.
    pub mask_center: f64,
}

impl<T: Scalar> MaskedConv<T> {
    pub fn new(init: &mut ParamInit, c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1 && k >= 3, "masked conv needs odd k >= 3, got {k}");
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        MaskedConv {
            k,
            weight: init.uniform(Shape::new(c_out, c_in, k, k), bound),
            bias: init.constant(Shape::new(1, c_out, 1, 1), 0.0),
            mask_center: 0.0,
        }
    }

    /// The binary mask of the kernel: zero exactly at the center.
    pub fn mask_tensor(&self) -> Tensor<T> {
        let ws = self.weight.shape;
        let kc = self.k / 2;
        let mut m = vec![T::one(); ws.len()];
        for co in 0..ws.n {
            for ci in 0..ws.c {
                m[ws.at(co, ci, kc, kc)] = T::from_f64(self.mask_center);
            }
        }
        Tensor::from_vec(ws, m)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let sh = x.shape();
        let ws = self.weight.shape;
        let taps = if self.mask_center == 0.0 {
            self.k * self.k - 1
        } else {
            self.k * self.k
        };
        ctx.tally(
            "masked_conv",
            2 * (taps * ws.c * ws.n * sh.n * sh.h * sh.w) as u128,
        );
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let masked = w.mul(&self.mask_tensor());
        conv2d(x, &masked, Some(&b), 1, (self.k - 1) / 2)
    }
}

/// Feed-forward block: two dilated 3x3 convolutions with ReLU, then a 1x1
/// projection, optionally with a residual connection around the block.
pub struct DConvBlock<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub proj: Conv1x1<T>,
    pub residual: bool,
}

impl<T: Scalar> DConvBlock<T> {
    pub fn new(init: &mut ParamInit, channels: usize, dilation: usize, residual: bool) -> Self {
        DConvBlock {
            conv1: ConvLayer::new(init, channels, channels, 3, dilation),
            conv2: ConvLayer::new(init, channels, channels, 3, dilation),
            proj: Conv1x1::new(init, channels, channels),
            residual,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = self.conv1.forward(ctx, x).relu();
        let y = self.conv2.forward(ctx, &y).relu();
        let y = self.proj.forward(ctx, &y);
        if self.residual {
            y.add(x)
        } else {
            y
        }
    }
}

/// Grid self-attention with a shared query/key transform and cosine-softmax
/// weights. Output at pixel p mixes only pixels on p's d-hat lattice, plus p
/// itself through the residual.
pub struct SsAttention<T> {
    /// Shared Q/K transform, `(1, 1, C, C)`.
    pub w_qk: Param<T>,
    /// Present only with query/key integration disabled (ablation): an
    /// independent key transform.
    pub w_k: Option<Param<T>>,
    pub norm_scale: Param<T>,
    pub norm_shift: Param<T>,
    pub grid: GridSpec,
    /// When false (ablation), scaled dot-product logits replace cosine ones.
    pub cosine: bool,
}

impl<T: Scalar> SsAttention<T> {
    pub fn new(
        init: &mut ParamInit,
        channels: usize,
        grid: GridSpec,
        qk_integration: bool,
        cosine: bool,
    ) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let w_qk = init.uniform(Shape::new(1, 1, channels, channels), bound);
        let w_k = if qk_integration {
            None
        } else {
            Some(init.uniform(Shape::new(1, 1, channels, channels), bound))
        };
        SsAttention {
            w_qk,
            w_k,
            norm_scale: init.constant(Shape::new(1, channels, 1, 1), 1.0),
            norm_shift: init.constant(Shape::new(1, channels, 1, 1), 0.0),
            grid,
            cosine,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, z: &Tensor<T>) -> Tensor<T> {
        let sh = z.shape();
        let dh = self.grid.d_hat();
        assert!(
            sh.h.is_multiple_of(dh) && sh.w.is_multiple_of(dh),
            "ss_attention: grid {dh} does not divide spatial dims of {sh}"
        );
        let c = sh.c;
        let hw = (sh.h * sh.w) as u128;
        let transforms = if self.w_k.is_some() { 2u128 } else { 1 };
        ctx.tally(
            "ss_attention",
            sh.n as u128 * (transforms * hw * c as u128 + 2 * hw * hw * c as u128 / (dh * dh) as u128),
        );

        let view = grid_partition(z, dh);
        let gridded = view.tensor.clone();
        let gsh = gridded.shape();
        let scale = ctx.param(&self.norm_scale);
        let shift = ctx.param(&self.norm_shift);
        let y = layer_norm_channels(&gridded, &scale, &shift);
        let yr = to_rows(&y);
        let vr = to_rows(&gridded);
        let wq = ctx.param(&self.w_qk);
        let q = bmm(&yr, &wq);
        let k = match &self.w_k {
            Some(wk) => {
                let wk = ctx.param(wk);
                bmm(&yr, &wk)
            }
            None => q.clone(),
        };
        let inv_sqrt_c = 1.0 / (c as f64).sqrt();
        let logits = if self.cosine {
            cosine_matrix(&q, &k).affine(inv_sqrt_c, inv_sqrt_c)
        } else {
            bmm_nt(&q, &k).scale(inv_sqrt_c)
        };
        let a = softmax_rows(&logits);
        if ctx.capture_attention {
            ctx.attention.push(AttnCapture {
                module_index: ctx.module_index,
                d_hat: dh,
                group_h: gsh.h,
                group_w: gsh.w,
                weights: a.data().to_vec(),
                groups: gsh.n,
            });
        }
        let out = bmm(&a, &vr).add(&vr);
        batch_to_space(&from_rows(&out, gsh), dh, sh.n)
    }
}

/// SS-Attention followed by its feed-forward block.
pub struct SsBlock<T> {
    pub attn: SsAttention<T>,
    pub ffn: DConvBlock<T>,
}

impl<T: Scalar> SsBlock<T> {
    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = self.attn.forward(ctx, x);
        self.ffn.forward(ctx, &y)
    }
}

/// Feature extraction: one 1x1 convolution + ReLU lifting 3 -> C channels.
pub struct FeatureHead<T> {
    pub conv: Conv1x1<T>,
}

impl<T: Scalar> FeatureHead<T> {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        FeatureHead {
            conv: Conv1x1::new(init, 3, channels),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        self.conv.forward(ctx, x).relu()
    }
}

/// Feature aggregation: three 1x1 convolutions 2C -> C -> C/2 -> 3 with ReLU
/// between them. Purely per-pixel.
pub struct FeatureTail<T> {
    pub c1: Conv1x1<T>,
    pub c2: Conv1x1<T>,
    pub c3: Conv1x1<T>,
}

impl<T: Scalar> FeatureTail<T> {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        assert!(channels.is_multiple_of(2), "channel width must be even");
        FeatureTail {
            c1: Conv1x1::new(init, 2 * channels, channels),
            c2: Conv1x1::new(init, channels, channels / 2),
            c3: Conv1x1::new(init, channels / 2, 3),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = self.c1.forward(ctx, x).relu();
        let y = self.c2.forward(ctx, &y).relu();
        self.c3.forward(ctx, &y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn dilation_rule() {
        assert_eq!(derive_dilation(3), 2);
        assert_eq!(derive_dilation(5), 3);
        assert_eq!(derive_dilation(7), 4);
    }

    #[test]
    #[should_panic(expected = "odd")]
    fn dilation_rejects_even_kernels() {
        derive_dilation(4);
    }

    #[test]
    fn grid_spec_combines_dilation_and_sparsity() {
        assert_eq!(GridSpec { d: 2, gamma: 2 }.d_hat(), 4);
        assert_eq!(GridSpec { d: 3, gamma: 2 }.d_hat(), 6);
        assert_eq!(GridSpec { d: 3, gamma: 1 }.d_hat(), 3);
    }

    #[test]
    fn conv1x1_flop_tally() {
        // 2 -> 3 channels over a 1x2x2 map: 2 * 2*3 * 4 = 48 units.
        let mut init = ParamInit::new(substream(1, "t"));
        let layer = Conv1x1::<f64>::new(&mut init, 2, 3);
        let mut ctx = Ctx::infer().with_flops();
        let x = Tensor::full(Shape::new(1, 2, 2, 2), 1.0);
        let _ = layer.forward(&mut ctx, &x);
        assert_eq!(ctx.flops.unwrap().total(), 48);
    }

    #[test]
    fn masked_conv_tally_excludes_center() {
        let mut init = ParamInit::new(substream(1, "t"));
        let layer = MaskedConv::<f64>::new(&mut init, 2, 2, 3);
        let mut ctx = Ctx::infer().with_flops();
        let x = Tensor::full(Shape::new(1, 2, 4, 4), 1.0);
        let _ = layer.forward(&mut ctx, &x);
        // 8 taps * 2*2 channels * 16 pixels * 2 units
        assert_eq!(ctx.flops.unwrap().total(), 2 * 8 * 4 * 16);
    }

    #[test]
    fn masked_conv_kernel_center_is_zeroed() {
        let mut init = ParamInit::new(substream(2, "t"));
        let layer = MaskedConv::<f64>::new(&mut init, 1, 1, 3);
        // Delta input: output at the same pixel must not see the input.
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = Tensor::from_vec(Shape::new(1, 1, 5, 5), img);
        let mut ctx = Ctx::infer();
        let y = layer.forward(&mut ctx, &x);
        assert_eq!(y.data()[y.shape().at(0, 0, 2, 2)], layer.bias.data[0]);
    }

    #[test]
    fn param_ids_are_sequential() {
        let mut init = ParamInit::new(substream(3, "t"));
        let a = Conv1x1::<f64>::new(&mut init, 2, 2);
        let b = Conv1x1::<f64>::new(&mut init, 2, 2);
        assert_eq!(
            [a.weight.id, a.bias.id, b.weight.id, b.bias.id],
            [0, 1, 2, 3]
        );
    }

    #[test]
    fn attention_is_shape_preserving_and_tallies() {
        let mut init = ParamInit::new(substream(4, "t"));
        let attn = SsAttention::<f64>::new(&mut init, 4, GridSpec { d: 2, gamma: 2 }, true, true);
        let x = Tensor::full(Shape::new(2, 4, 8, 8), 0.3);
        let mut ctx = Ctx::infer().with_flops();
        let y = attn.forward(&mut ctx, &x);
        assert_eq!(y.shape(), x.shape());
        // n * (hw*C + 2*(hw)^2*C/d^2) = 2 * (64*4 + 2*4096*4/16)
        assert_eq!(ctx.flops.unwrap().total(), 2 * (64 * 4 + 2 * 4096 * 4 / 16));
    }

    #[test]
    fn attention_capture_has_softmax_rows() {
        let mut init = ParamInit::new(substream(5, "t"));
        let attn = SsAttention::<f64>::new(&mut init, 4, GridSpec { d: 2, gamma: 1 }, true, true);
        let x = Tensor::from_vec(
            Shape::new(1, 4, 4, 4),
            (0..64).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let mut ctx = Ctx::infer().with_attention_capture();
        let _ = attn.forward(&mut ctx, &x);
        assert_eq!(ctx.attention.len(), 1);
        let cap = &ctx.attention[0];
        assert_eq!(cap.d_hat, 2);
        assert_eq!(cap.groups, 4);
        let rows = cap.group_h * cap.group_w;
        for r in 0..cap.groups * rows {
            let s: f64 = cap.weights[r * rows..(r + 1) * rows].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
