use infocom::smg::{dequantize, quantize, retained_count, topk_filter, BitWidth, DenseMask};
use proptest::prelude::*;

const GRID: usize = 1_000_000;

#[test]
fn round_trip_error_within_half_step() {
    for b in 1..=8u8 {
        let bits = BitWidth::new(b).unwrap();
        let half = bits.step() / 2.0;
        let worst = (0..=GRID)
            .map(|i| {
                let v = i as f64 / GRID as f64;
                (bits.dequantize_code(bits.quantize_value(v)) - v).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst <= half + 1e-15, "b={b}: {worst} > {half}");
        assert!(worst >= half * 0.99, "b={b}: grid never reaches a midpoint");
    }
}

#[test]
fn four_bit_quantizer_is_monotone() {
    let bits = BitWidth::new(4).unwrap();
    let codes: Vec<u8> = (0..=GRID).map(|i| bits.quantize_value(i as f64 / GRID as f64)).collect();
    assert!(codes.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(codes[0], 0);
    assert_eq!(codes[GRID], 15);
    // Every code is reachable.
    for c in 0..=15u8 {
        assert!(codes.contains(&c));
        assert_eq!(bits.quantize_value(bits.dequantize_code(c)), c);
    }
}

#[test]
fn out_of_range_values_clamp() {
    let bits = BitWidth::new(3).unwrap();
    assert_eq!(bits.quantize_value(-0.4), 0);
    assert_eq!(bits.quantize_value(1.7), 7);
    assert_eq!(bits.dequantize_code(7), 1.0);
    assert!(BitWidth::new(0).is_err());
    assert!(BitWidth::new(9).is_err());
}

#[test]
fn retained_count_floors_with_minimum_one() {
    assert_eq!(retained_count(0.1, 200 * 704), 14080);
    assert_eq!(retained_count(0.1, 200 * 504), 10080);
    assert_eq!(retained_count(0.29, 100), 29);
    assert_eq!(retained_count(0.001, 10), 1);
    assert_eq!(retained_count(1.0, 10), 10);
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=10, 1usize..=10).prop_flat_map(|(h, w)| {
        // Coarse values so ties are common.
        (Just(h), Just(w), prop::collection::vec((0u8..=8).prop_map(|x| f64::from(x) / 8.0), h * w))
    })
}

proptest! {
    #[test]
    fn topk_keeps_the_largest(((h, w, v), alpha) in (mask_strategy(), 0.01f64..=1.0)) {
        let m = DenseMask::new(h, w, v.clone()).unwrap();
        let s = topk_filter(&m, alpha).unwrap();
        let k = retained_count(alpha, h * w);
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.indices.windows(2).all(|p| p[0] < p[1]));
        for (&i, &x) in s.indices.iter().zip(&s.values) {
            prop_assert_eq!(x, v[i as usize]);
        }
        // Nothing dropped beats anything kept; ties go to the lower index.
        let kept: Vec<bool> = (0..h * w).map(|i| s.indices.contains(&(i as u32))).collect();
        for i in 0..h * w {
            for j in 0..h * w {
                if kept[i] && !kept[j] {
                    prop_assert!(v[i] > v[j] || (v[i] == v[j] && i < j));
                }
            }
        }
    }

    #[test]
    fn quantize_round_trip_on_sparse_masks(((h, w, v), alpha, b) in (mask_strategy(), 0.01f64..=1.0, 1u8..=8)) {
        let s = topk_filter(&DenseMask::new(h, w, v).unwrap(), alpha).unwrap();
        let q = quantize(&s, b).unwrap();
        q.validate().unwrap();
        let back = dequantize(&q);
        prop_assert_eq!(&back.indices, &s.indices);
        for (a, b) in back.values.iter().zip(&s.values) {
            prop_assert!((a - b).abs() <= q.step() / 2.0 + 1e-15);
        }
        let dense = back.to_dense_tensor();
        prop_assert_eq!(dense.data().iter().filter(|&&x| x != 0.0).count(), back.values.iter().filter(|&&x| x != 0.0).count());
    }
}

#[test]
fn topk_rejects_bad_alpha() {
    let m = DenseMask::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert!(topk_filter(&m, 0.0).is_err());
    assert!(topk_filter(&m, 1.5).is_err());
}
