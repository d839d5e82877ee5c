//! Complexity accounting and attention inspection.
//!
//! Closed-form operation counts for one attention layer over an `h x w`
//! feature map with `C` channels:
//!
//! - full multi-head-style self-attention: `4*h*w*C + 2*(h*w)^2*C`
//! - grid self-similarity attention:       `h*w*C + 2*(h*w)^2*C / d_hat^2`
//!
//! The instrumented forward pass (see the layer FLOP tally) uses matching
//! conventions, so dynamic counts equal these expressions exactly.

use crate::data::ppm::{quantize, write_ppm};
use crate::layers::{AttnCapture, Ctx};
use crate::net::SsbsnModel;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::Result;
use std::io::Write as _;
use std::path::Path;

/// Cost of one full (ungridded, shared-QK-free) self-attention layer.
pub fn msa_flops(h: usize, w: usize, c: usize) -> u128 {
    let hw = (h * w) as u128;
    let c = c as u128;
    4 * hw * c + 2 * hw * hw * c
}

/// Cost of one grid self-similarity attention layer (shared Q/K transform,
/// groups of stride `d_hat`).
pub fn ss_flops(h: usize, w: usize, c: usize, d_hat: usize) -> u128 {
    let hw = (h * w) as u128;
    let c = c as u128;
    hw * c + 2 * hw * hw * c / (d_hat * d_hat) as u128
}

/// One row of the complexity comparison.
#[derive(Debug, Clone)]
pub struct FlopRow {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d_hat: usize,
    pub msa: u128,
    pub ss: u128,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
}

impl FlopReport {
    pub fn render(&self) -> String {
        let mut out = String::from("    h     w    C  d^  full-attention        grid-attention  ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:5} {:5} {:4} {:3} {:15} {:21} {:.5}\n",
                r.h, r.w, r.c, r.d_hat, r.msa, r.ss, r.ratio
            ));
        }
        out
    }
}

/// Compare the two closed forms over a size sweep. As `h*w` grows the ratio
/// approaches `1 / d_hat^2`; at typical image scales it lands near a few
/// percent (about 3.8% for `d_hat` 4-6 mixes at megapixel scale, reported
/// here as context, not a check).
pub fn flop_ratio_report(sizes: &[(usize, usize)], channels: &[usize], d_hats: &[usize]) -> FlopReport {
    let mut report = FlopReport::default();
    for &(h, w) in sizes {
        for &c in channels {
            for &d_hat in d_hats {
                let msa = msa_flops(h, w, c);
                let ss = ss_flops(h, w, c, d_hat);
                report.rows.push(FlopRow {
                    h,
                    w,
                    c,
                    d_hat,
                    msa,
                    ss,
                    ratio: ss as f64 / msa as f64,
                });
            }
        }
    }
    report
}

/// Total instrumented operation count of one network forward pass, with the
/// per-layer breakdown.
pub fn dynamic_flop_count<T: Scalar>(
    model: &SsbsnModel<T>,
    input: &Tensor<T>,
) -> (u128, Vec<(String, u128)>) {
    let mut ctx = Ctx::infer().with_flops();
    let _ = model.forward(&mut ctx, input);
    let tally = ctx.flops.take().expect("flop tally was requested");
    (tally.total(), tally.entries)
}

/// Sum of the instrumented attention entries only.
pub fn dynamic_attention_flops<T: Scalar>(model: &SsbsnModel<T>, input: &Tensor<T>) -> u128 {
    dynamic_flop_count(model, input)
        .1
        .iter()
        .filter(|(name, _)| name == "ss_attention")
        .map(|(_, c)| c)
        .sum()
}

/// One attended pixel in an overlay.
#[derive(Debug, Clone, Copy)]
pub struct AttnPeer {
    pub x: usize,
    pub y: usize,
    pub weight: f64,
}

/// Attention weights for query pixel `(x, y)` in the capture, mapped back to
/// image coordinates and sorted by weight descending (ties broken by lowest
/// linear index, making top-k deterministic).
pub fn attention_row_for_pixel<T: Scalar>(
    cap: &AttnCapture<T>,
    image_w: usize,
    x: usize,
    y: usize,
) -> Vec<AttnPeer> {
    let dh = cap.d_hat;
    // Which grid group the pixel belongs to, and its row inside the group.
    let group = (y % dh) * dh + (x % dh);
    let row = (y / dh) * cap.group_w + (x / dh);
    let rows = cap.group_h * cap.group_w;
    assert!(group < cap.groups, "pixel outside captured groups");
    let base = (group * rows + row) * rows;
    let mut peers: Vec<AttnPeer> = (0..rows)
        .map(|r| {
            let (gy, gx) = (r / cap.group_w, r % cap.group_w);
            AttnPeer {
                x: gx * dh + x % dh,
                y: gy * dh + y % dh,
                weight: cap.weights[base + r].as_f64(),
            }
        })
        .collect();
    peers.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then_with(|| (a.y * image_w + a.x).cmp(&(b.y * image_w + b.x)))
    });
    peers
}

/// Run the network capturing attention maps, then render the weights of one
/// SS-Block for one query pixel as an overlay: the input image dimmed, the
/// top-k attended pixels circled in yellow with radius growing with weight,
/// and the query pixel circled in red. Writes `<out>.ppm` plus a `<out>.txt`
/// sidecar listing `x y weight` in descending weight order.
pub fn export_attention_overlay<T: Scalar>(
    model: &SsbsnModel<T>,
    image: &Tensor<T>,
    module_index: usize,
    pixel: (usize, usize),
    top_k: usize,
    out_base: &Path,
) -> Result<Vec<AttnPeer>> {
    let sh = image.shape();
    assert_eq!(sh.n, 1, "overlay export expects a single image");
    let mut ctx = Ctx::infer().with_attention_capture();
    let _ = model.forward(&mut ctx, image);
    let cap = ctx
        .attention
        .iter()
        .find(|c| c.module_index == module_index)
        .unwrap_or_else(|| {
            panic!(
                "module {module_index} captured no attention (captured: {:?})",
                ctx.attention.iter().map(|c| c.module_index).collect::<Vec<_>>()
            )
        });
    let (x, y) = pixel;
    assert!(x < sh.w && y < sh.h, "query pixel outside image");
    let peers = attention_row_for_pixel(cap, sh.w, x, y);
    let k = top_k.min(peers.len());

    // Dimmed grayscale-ish base so circles stand out.
    let mut canvas = vec![[0.0f64; 3]; sh.h * sh.w];
    for py in 0..sh.h {
        for px in 0..sh.w {
            let cell = &mut canvas[py * sh.w + px];
            for (c, slot) in cell.iter_mut().enumerate() {
                *slot = 0.5 * image.data()[sh.at(0, c, py, px)].as_f64();
            }
        }
    }
    let wmax = peers.first().map(|p| p.weight).unwrap_or(1.0).max(1e-12);
    for p in &peers[..k] {
        let radius = 1.0 + 3.0 * (p.weight / wmax);
        draw_circle(&mut canvas, sh.w, sh.h, p.x, p.y, radius, [1.0, 0.9, 0.1]);
    }
    draw_circle(&mut canvas, sh.w, sh.h, x, y, 2.0, [1.0, 0.1, 0.1]);

    let mut data = vec![T::zero(); sh.len()];
    let out_shape = Shape::new(1, 3, sh.h, sh.w);
    for py in 0..sh.h {
        for px in 0..sh.w {
            for c in 0..3 {
                data[out_shape.at(0, c, py, px)] =
                    T::from_f64(quantize(canvas[py * sh.w + px][c]) as f64 / 255.0);
            }
        }
    }
    write_ppm(
        &out_base.with_extension("ppm"),
        &Tensor::from_vec(out_shape, data),
    )?;
    let mut side = std::io::BufWriter::new(std::fs::File::create(out_base.with_extension("txt"))?);
    for p in &peers[..k] {
        writeln!(side, "{} {} {:.6}", p.x, p.y, p.weight)?;
    }
    Ok(peers[..k].to_vec())
}

/// Stamp a filled circle onto the canvas.
fn draw_circle(
    canvas: &mut [[f64; 3]],
    w: usize,
    h: usize,
    cx: usize,
    cy: usize,
    radius: f64,
    color: [f64; 3],
) {
    let r = radius.ceil() as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx * dx + dy * dy) as f64 > radius * radius {
                continue;
            }
            let (px, py) = (cx as isize + dx, cy as isize + dy);
            if px >= 0 && (px as usize) < w && py >= 0 && (py as usize) < h {
                canvas[py as usize * w + px as usize] = color;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{GridSpec, ParamInit, SsAttention};
    use crate::rng::substream;

    #[test]
    fn closed_forms_match_hand_counts() {
        // 2x2 map, 1 channel: hw = 4.
        assert_eq!(msa_flops(2, 2, 1), 4 * 4 + 2 * 16);
        assert_eq!(ss_flops(2, 2, 1, 2), 4 + 2 * 16 / 4);
        // Grid attention over the whole map (d_hat 1) still saves the three
        // extra per-pixel transforms.
        assert_eq!(msa_flops(2, 2, 1) - ss_flops(2, 2, 1, 1), 3 * 4);
    }

    #[test]
    fn ratio_approaches_inverse_grid_area() {
        let r = flop_ratio_report(&[(4096, 4096)], &[32], &[4]).rows[0].ratio;
        assert!((r - 1.0 / 16.0).abs() < 1e-4, "ratio {r}");
    }

    #[test]
    fn dynamic_count_matches_closed_form_for_one_layer() {
        let mut init = ParamInit::new(substream(1, "t"));
        let attn = SsAttention::<f64>::new(&mut init, 8, GridSpec { d: 4, gamma: 1 }, true, true);
        let x = Tensor::from_vec(
            Shape::new(1, 8, 16, 16),
            (0..8 * 256).map(|i| (i as f64 * 0.01).sin()).collect(),
        );
        let mut ctx = Ctx::infer().with_flops();
        let _ = attn.forward(&mut ctx, &x);
        assert_eq!(ctx.flops.unwrap().total(), ss_flops(16, 16, 8, 4));
    }

    #[test]
    fn pixel_rows_map_back_to_grid_positions() {
        let cap = AttnCapture {
            module_index: 0,
            d_hat: 2,
            group_h: 2,
            group_w: 2,
            groups: 4,
            // Group of pixel (1, 3): (1%2)*2 + (3%2) = 3; row (0)*2 + 1 = 1.
            // 4 groups x 4 rows x 4 cols; mark that one row.
            weights: {
                let mut w = vec![0.25f64; 4 * 4 * 4];
                let base = (3 * 4 + 1) * 4;
                w[base..base + 4].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
                w
            },
        };
        let peers = attention_row_for_pixel(&cap, 4, 3, 1);
        // Highest weight (0.4) is row 3 of the group: grid cell (1,1), so
        // image pixel x = 1*2 + 3%2 = 3, y = 1*2 + 1%2 = 3.
        assert_eq!((peers[0].x, peers[0].y), (3, 3));
        assert!((peers[0].weight - 0.4).abs() < 1e-12);
        // Lowest (0.1) is grid cell (0,0) -> pixel (1, 1).
        assert_eq!((peers[3].x, peers[3].y), (1, 1));
        // All four peers share the query's parity classes.
        assert!(peers.iter().all(|p| p.x % 2 == 1 && p.y % 2 == 1));
    }
}
