//! Metrics against brute force and closed forms.

use densetrf::metrics::{aggregate_runs, dice, evaluate_stacks, hausdorff, iou, BinaryMask, MetricReport};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(Array2::from_shape_fn((h, w), |_| rng.gen_bool(density))).unwrap()
}

fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let directed = |p: &[(usize, usize)], q: &[(usize, usize)]| {
        p.iter()
            .map(|&(y0, x0)| {
                q.iter()
                    .map(|&(y1, x1)| {
                        let (dy, dx) = (y0 as f64 - y1 as f64, x0 as f64 - x1 as f64);
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    let (pa, pb) = (a.points(), b.points());
    directed(&pa, &pb).max(directed(&pb, &pa))
}

#[test]
fn hausdorff_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut checked = 0;
    while checked < 50 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let d = rng.gen_range(0.02..0.5);
        let (a, b) = (random_mask(&mut rng, h, w, d), random_mask(&mut rng, h, w, d));
        if a.is_empty() || b.is_empty() {
            assert_eq!(hausdorff(&a, &b).unwrap(), None);
            continue;
        }
        assert_eq!(hausdorff(&a, &b).unwrap(), Some(brute_hausdorff(&a, &b)));
        checked += 1;
    }
}

#[test]
fn closed_form_cases() {
    let m = |pts: &[(usize, usize)]| BinaryMask::from_points((4, 4), pts).unwrap();
    let a = m(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let b = m(&[(1, 1), (1, 2), (2, 1), (2, 2)]);
    assert_eq!(dice(&a, &b).unwrap(), 0.25);
    assert_eq!(iou(&a, &b).unwrap(), 1.0 / 7.0);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &m(&[(3, 3)])).unwrap(), 0.0);
    assert_eq!(dice(&m(&[]), &m(&[])).unwrap(), 1.0);
    assert_eq!(iou(&m(&[]), &a).unwrap(), 0.0);
    assert_eq!(hausdorff(&m(&[(0, 0)]), &m(&[(3, 3)])).unwrap(), Some(18f64.sqrt()));
    assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
    assert!(dice(&a, &BinaryMask::from_points((3, 4), &[]).unwrap()).is_err());
}

#[test]
fn dice_iou_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let (a, b) = (random_mask(&mut rng, 8, 8, 0.4), random_mask(&mut rng, 8, 8, 0.4));
        let (d, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
    }
}

#[test]
fn evaluation_averages_images_then_classes() {
    let pred = Array3::from_shape_fn((2, 2, 2), |(y, _, c)| c == 0 || y == 0);
    let gt = Array3::from_shape_fn((2, 2, 2), |(_, x, c)| (c == 0 || x == 0) as u8);
    let empty_pred = Array3::from_elem((2, 2, 2), false);
    let r = evaluate_stacks([(pred.view(), gt.view()), (empty_pred.view(), gt.view())]).unwrap();
    assert_eq!(r.per_class[0].dice, 0.5);
    assert_eq!(r.per_class[1].dice, 0.25);
    assert_eq!(r.dice, 0.375);
    assert_eq!(r.per_class[1].hd_undefined, 1);
    assert_eq!(r.per_class[1].hd, Some(1.0));
}

#[test]
fn aggregation_uses_sample_std() {
    let rep = |d: f64| MetricReport::from_classes(vec![densetrf::metrics::ClassMetrics { dice: d, iou: d, hd: None, hd_undefined: 1 }]);
    let s = aggregate_runs(&[rep(0.2), rep(0.4), rep(0.6)]).unwrap();
    assert!((s.dice.mean - 0.4).abs() < 1e-15);
    assert!((s.dice.std - 0.2).abs() < 1e-12);
    assert_eq!((s.hd, s.hd_excluded), (None, 3));
    assert_eq!(aggregate_runs(&[rep(0.3)]).unwrap().dice.std, 0.0);
}

proptest! {
    #[test]
    fn metric_properties(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, h, w, 0.3);
        let b = random_mask(&mut rng, h, w, 0.3);
        let (d, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && j <= d + 1e-15);
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        if let Some(hd) = hausdorff(&a, &b).unwrap() {
            prop_assert!(hd <= ((h * h + w * w) as f64).sqrt());
        }
    }
}
