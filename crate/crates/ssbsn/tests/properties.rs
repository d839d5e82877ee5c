//! Randomized structural properties: the exact bijections hold for arbitrary
//! compatible shapes and contents, softmax rows are distributions, and image
//! quantization stays in range.

use proptest::prelude::*;
use ssbsn::pd::{crop, pd_down, pd_up, reflect_pad, Dihedral};
use ssbsn::tensor::{
    batch_to_space, from_rows, grid_merge, grid_partition, softmax_rows, space_to_batch, to_rows,
    Shape, Tensor,
};

fn tensor_strategy(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-10.0..10.0f64, n * c * h * w)
        .prop_map(move |v| Tensor::from_vec(Shape::new(n, c, h, w), v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn space_to_batch_roundtrips(
        (s, t) in (1usize..5).prop_flat_map(|s| {
            (1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(move |(n, c, hb, wb)| {
                tensor_strategy(n, c, hb * s, wb * s).prop_map(move |t| (s, t))
            })
        })
    ) {
        let n = t.shape().n;
        let down = space_to_batch(&t, s);
        prop_assert_eq!(down.shape().n, n * s * s);
        let back = batch_to_space(&down, s, n);
        prop_assert_eq!(back.data(), t.data());
        // Values are permuted, never altered.
        let mut a = down.data().to_vec();
        let mut b = t.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pd_and_grid_agree_with_their_inverses(
        (s, t) in (2usize..5).prop_flat_map(|s| {
            (1usize..3, 2usize..4).prop_flat_map(move |(hb, wb)| {
                tensor_strategy(1, 3, hb * s, wb * s).prop_map(move |t| (s, t))
            })
        })
    ) {
        let pd_back = pd_up(&pd_down(&t, s), s, 1);
        prop_assert_eq!(pd_back.data(), t.data());
        let grid_back = grid_merge(&grid_partition(&t, s));
        prop_assert_eq!(grid_back.data(), t.data());
    }

    #[test]
    fn rows_roundtrip(t in (1usize..3, 1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(n, c, h, w)| tensor_strategy(n, c, h, w)))
    {
        let sh = t.shape();
        let back = from_rows(&to_rows(&t), sh);
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn dihedral_inverses_and_composition(
        t in tensor_strategy(1, 2, 4, 6),
        g in 0u8..8,
    ) {
        let g = Dihedral(g);
        let fwd_back = g.inverse().apply(&g.apply(&t));
        prop_assert_eq!(fwd_back.data(), t.data());
        let back_fwd = g.apply(&g.inverse().apply(&t));
        prop_assert_eq!(back_fwd.data(), t.data());
    }

    #[test]
    fn reflect_pad_then_crop_is_identity(
        (t, ph, pw) in tensor_strategy(1, 3, 6, 7).prop_flat_map(|t| {
            (Just(t), 0usize..5, 0usize..6)
        })
    ) {
        let sh = t.shape();
        let padded = reflect_pad(&t, ph, pw);
        let cropped = crop(&padded, sh.h, sh.w);
        prop_assert_eq!(cropped.data(), t.data());
    }

    #[test]
    fn softmax_rows_are_distributions(t in tensor_strategy(2, 1, 3, 5)) {
        let y = softmax_rows(&t);
        for v in y.data() {
            prop_assert!(*v > 0.0 && *v <= 1.0);
        }
        let sh = y.shape();
        for r in 0..sh.n * sh.h {
            let s: f64 = y.data()[r * sh.w..(r + 1) * sh.w].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantization_is_monotone_and_bounded(a in -2.0..3.0f64, b in -2.0..3.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ssbsn::data::ppm::quantize(lo) <= ssbsn::data::ppm::quantize(hi));
    }
}
