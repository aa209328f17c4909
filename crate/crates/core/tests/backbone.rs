//! Mock extractor against a direct re-derivation of its statistics.

use densetrf::backbone::{
    extract_features, import_precomputed_features, ExtractorKind, ExtractorSpec, FeatureMap, ImageTensor,
};
use ndarray::Array3;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

fn checkerboard(size: usize, cell: usize) -> ImageTensor {
    let px = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let on = (y / cell + x / cell).is_multiple_of(2);
        let base = if on { 0.8 } else { 0.2 };
        (base + 0.05 * c as f64) as f32
    });
    ImageTensor::new(px).unwrap()
}

/// Statistics written out from their definitions: population moments,
/// forward differences and a windowed complex exponential per filter.
fn oracle_stats(img: &ImageTensor, y0: usize, x0: usize, p: usize) -> Vec<f64> {
    let px = img.pixels();
    let n = (p * p) as f64;
    let mut means = vec![];
    let mut stds = vec![];
    let mut grads = vec![];
    for c in 0..3 {
        let vals: Vec<f64> = (0..p * p).map(|i| px[[y0 + i / p, x0 + i % p, c]] as f64).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut g = 0.0;
        for y in 0..p {
            for x in 0..p {
                let v = vals[y * p + x];
                if x + 1 < p {
                    g += (vals[y * p + x + 1] - v).powi(2);
                }
                if y + 1 < p {
                    g += (vals[(y + 1) * p + x] - v).powi(2);
                }
            }
        }
        means.push(2.0 * (mean - 0.5));
        stds.push(4.0 * var.sqrt());
        grads.push(2.0 * (g / (2.0 * n)).sqrt());
    }
    let lum: Vec<f64> = (0..p * p)
        .map(|i| (0..3).map(|c| px[[y0 + i / p, x0 + i % p, c]] as f64).sum::<f64>() / 3.0)
        .collect();
    let lm = lum.iter().sum::<f64>() / n;
    let centre = (p as f64 - 1.0) / 2.0;
    let s2 = (p as f64 / 3.0).powi(2);
    let mut filters = vec![];
    for freq in [0.125, 0.25] {
        for deg in [0.0f64, 45.0, 90.0, 135.0] {
            let (st, ct) = deg.to_radians().sin_cos();
            let mut acc = Complex64::new(0.0, 0.0);
            let mut mass = 0.0;
            for (i, &l) in lum.iter().enumerate() {
                let (dx, dy) = ((i % p) as f64 - centre, (i / p) as f64 - centre);
                let win = (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
                acc += Complex64::from_polar(win * (l - lm), 2.0 * PI * freq * (dx * ct + dy * st));
                mass += win;
            }
            filters.push(8.0 * acc.norm() / mass);
        }
    }
    [means, stds, grads, filters].concat()
}

#[test]
fn matches_oracle_on_checkerboard_seed_17() {
    let img = checkerboard(32, 4);
    let spec = ExtractorSpec::default();
    assert_eq!(spec.seed, 17);
    let fm = extract_features(&img, &spec).unwrap();
    assert_eq!((fm.height(), fm.width(), fm.channels()), (4, 4, 32));

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let proj: Vec<f64> = (0..32 * 17)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / 17f64.sqrt()
        })
        .collect();
    for i in 0..4 {
        for j in 0..4 {
            let stats = oracle_stats(&img, i * 8, j * 8, 8);
            for c in 0..32 {
                let v: f64 = (0..17).map(|s| proj[c * 17 + s] * stats[s]).sum();
                assert!((fm.data()[[i, j, c]] as f64 - v).abs() < 1e-5, "({i},{j},{c})");
            }
        }
    }
}

#[test]
fn extractor_is_frozen() {
    let img = checkerboard(16, 3);
    let spec = ExtractorSpec::default();
    let a = extract_features(&img, &spec).unwrap();
    let b = extract_features(&img, &spec).unwrap();
    assert_eq!(a, b);
    let other = ExtractorSpec { seed: 18, ..spec };
    assert_ne!(a, extract_features(&img, &other).unwrap());
}

#[test]
fn constant_image_has_no_texture_energy() {
    let img = ImageTensor::constant(16, 16, 0.5);
    let stats = oracle_stats(&img, 0, 0, 8);
    assert!(stats.iter().all(|v| v.abs() < 1e-12));
    let fm = extract_features(&img, &ExtractorSpec::default()).unwrap();
    assert!(fm.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn feature_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let fm = extract_features(&checkerboard(24, 5), &ExtractorSpec::default()).unwrap();
    fm.write(&path).unwrap();
    assert_eq!(import_precomputed_features(&path).unwrap(), fm);
    assert_eq!(FeatureMap::read(&path).unwrap(), fm);
}

#[test]
fn rejects_bad_inputs() {
    let spec = ExtractorSpec::default();
    assert!(extract_features(&checkerboard(20, 4), &spec).is_err());
    let ext = ExtractorSpec { kind: ExtractorKind::ExternalImport, ..spec };
    assert!(extract_features(&checkerboard(16, 4), &ext).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.bin");
    std::fs::write(&path, b"not a feature file").unwrap();
    assert!(import_precomputed_features(&path).is_err());
}
