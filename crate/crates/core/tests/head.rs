//! Dense head pieces against direct formulas.

use densetrf::head::{bce_with_logits, combine, upsample_bilinear, upsample_bilinear_adjoint, AdaptedFeatureMap};
use densetrf::slot::SlotDecodeResult;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| rng.gen_range(-2.0..2.0))
}

/// Tent-kernel interpolation at half-pixel centres, clamped to the grid.
fn bilinear_oracle(g: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = g.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
    };
    Array3::from_shape_fn((oh, ow, c), |(y, x, ch)| {
        let (sy, sx) = (coord(y, h, oh), coord(x, w, ow));
        let mut v = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wy = (1.0 - (sy - i as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - j as f64).abs()).max(0.0);
                v += wy * wx * g[[i, j, ch]];
            }
        }
        v
    })
}

#[test]
fn bilinear_matches_tent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(h, w, f) in &[(2, 2, 4), (3, 5, 8), (4, 4, 1), (1, 3, 2)] {
        let g = random3(&mut rng, (h, w, 2));
        let up = upsample_bilinear(g.view(), h * f, w * f);
        let oracle = bilinear_oracle(&g, h * f, w * f);
        assert!((&up - &oracle).iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn bilinear_adjoint_is_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random3(&mut rng, (3, 4, 2));
    let y = random3(&mut rng, (12, 16, 2));
    let lhs = (&upsample_bilinear(x.view(), 12, 16) * &y).sum();
    let rhs = (&x * &upsample_bilinear_adjoint(y.view(), 3, 4)).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

fn decode_result(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize, c: usize) -> SlotDecodeResult {
    SlotDecodeResult::from_parts(
        random3(rng, (k, h * w, c)),
        Array2::from_shape_fn((k, h * w), |_| rng.gen_range(-1.0..1.0)),
        h,
        w,
    )
}

#[test]
fn combine_layout_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, ca, cr, k) = (2, 3, 4, 5, 3);
    let adapted = AdaptedFeatureMap {
        data: Array2::from_shape_fn((h * w, ca), |_| rng.gen_range(-1.0..1.0)),
        height: h,
        width: w,
    };
    let dec = decode_result(&mut rng, k, h, w, cr);
    let z = combine(&adapted, &dec).unwrap();
    assert_eq!(z.channels(), ca + cr + k);
    for n in 0..h * w {
        for ch in 0..ca + cr + k {
            let expected = if ch < ca {
                adapted.data[[n, ch]]
            } else if ch < ca + cr {
                dec.reconstruction[[n, ch - ca]]
            } else {
                dec.masks[[ch - ca - cr, n]]
            };
            assert_eq!(z.data[[n, ch]], expected);
        }
    }
}

#[test]
fn mask_perturbation_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (3, 3);
    let adapted = AdaptedFeatureMap {
        data: Array2::from_shape_fn((h * w, 2), |_| rng.gen_range(-1.0..1.0)),
        height: h,
        width: w,
    };
    let dec = decode_result(&mut rng, 2, h, w, 3);
    let base = combine(&adapted, &dec).unwrap();
    let mut bumped = dec.clone();
    bumped.masks[[1, 4]] += 0.25;
    let z = combine(&adapted, &bumped).unwrap();
    let diff = &z.data - &base.data;
    for ((n, ch), d) in diff.indexed_iter() {
        if (n, ch) == (4, 2 + 3 + 1) {
            assert!((d - 0.25).abs() < 1e-15);
        } else {
            assert_eq!(*d, 0.0);
        }
    }
}

#[test]
fn combine_rejects_grid_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let adapted = AdaptedFeatureMap { data: Array2::zeros((4, 2)), height: 2, width: 2 };
    assert!(combine(&adapted, &decode_result(&mut rng, 2, 1, 4, 2)).is_err());
}

proptest! {
    #[test]
    fn bce_matches_direct_formula(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random3(&mut rng, (3, 4, 2)) * 3.0;
        let labels = Array3::from_shape_fn((3, 4, 2), |_| rng.gen_range(0..2u8));
        let (loss, grad) = bce_with_logits(logits.view(), labels.view()).unwrap();
        let n = logits.len() as f64;
        let mut expected = 0.0;
        for (&x, &y) in logits.iter().zip(labels.iter()) {
            let p = 1.0 / (1.0 + (-x).exp());
            expected -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        prop_assert!((loss - expected / n).abs() < 1e-12);
        for ((&g, &x), &y) in grad.iter().zip(logits.iter()).zip(labels.iter()) {
            let p = 1.0 / (1.0 + (-x).exp());
            prop_assert!((g - (p - y as f64) / n).abs() < 1e-12);
        }
    }
}

#[test]
fn bce_rejects_bad_labels() {
    let logits = Array3::zeros((2, 2, 1));
    assert!(bce_with_logits(logits.view(), Array3::from_elem((2, 2, 1), 2u8).view()).is_err());
    assert!(bce_with_logits(logits.view(), Array3::zeros((2, 2, 2)).view()).is_err());
    let (l, _) = bce_with_logits(logits.view(), Array3::zeros((2, 2, 1)).view()).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
}
