//! Frozen feature extraction.
//!
//! The model never trains the backbone: features are computed once per image
//! and cached. The built-in extractor is a deterministic mock that summarises
//! each `P × P` patch with texture statistics and projects them through a
//! fixed random matrix. Real foundation-model features can be exported
//! offline into the feature file format and imported instead.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 6] = b"DTRF-F";
pub const PREDICTION_MAGIC: &[u8; 6] = b"DTRF-P";
pub const GRID_FORMAT_VERSION: u16 = 1;

/// Number of per-patch statistics fed to the mock projection.
pub const MOCK_STAT_DIM: usize = 17;
const FILTER_ORIENTATIONS: [f64; 4] = [0.0, 0.25, 0.5, 0.75]; // fractions of pi
const FILTER_FREQUENCIES: [f64; 2] = [0.125, 0.25]; // cycles per pixel

/// RGB image with values in `[0, 1]`, stored `height × width × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f32>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::Shape(format!("image must be H×W×3, got {h}×{w}×{c}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape("image values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self::new(Array3::from_elem((height, width, 3), value)).expect("valid constant image")
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Feature grid `H × W × C_r` plus the geometry it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
    patch_size: usize,
    source_image_shape: (usize, usize),
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, patch_size: usize) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        let (h, w, _) = data.dim();
        Ok(Self {
            data,
            patch_size,
            source_image_shape: (h * patch_size, w * patch_size),
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn num_locations(&self) -> usize {
        self.height() * self.width()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn source_image_shape(&self) -> (usize, usize) {
        self.source_image_shape
    }

    /// Features as `(H·W) × C_r`, row index `i·W + j`.
    pub fn to_matrix(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        Array2::from_shape_fn((h * w, c), |(n, k)| self.data[[n / w, n % w, k]] as f64)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_grid(path, FEATURE_MAGIC, self.data.view(), self.patch_size)
    }

    pub fn read(path: &Path) -> Result<Self> {
        import_precomputed_features(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    MockPatch,
    ExternalImport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub patch_size: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::MockPatch,
            patch_size: 8,
            out_channels: 32,
            seed: 17,
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::Config(format!("patch_size must be >= 2, got {}", self.patch_size)));
        }
        if self.out_channels < 4 {
            return Err(Error::Config(format!(
                "out_channels must be >= 4, got {}",
                self.out_channels
            )));
        }
        Ok(())
    }

    /// The frozen `C_r × MOCK_STAT_DIM` projection, drawn row-major from a
    /// ChaCha8 stream seeded with `seed` and scaled by `1/sqrt(MOCK_STAT_DIM)`.
    pub fn projection(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (MOCK_STAT_DIM as f64).sqrt();
        Array2::from_shape_fn((self.out_channels, MOCK_STAT_DIM), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
    }
}

/// Runs the frozen extractor on one image.
pub fn extract_features(image: &ImageTensor, spec: &ExtractorSpec) -> Result<FeatureMap> {
    spec.validate()?;
    if spec.kind != ExtractorKind::MockPatch {
        return Err(Error::Config(
            "external_import features are loaded with import_precomputed_features".into(),
        ));
    }
    let p = spec.patch_size;
    let (hi, wi) = (image.height(), image.width());
    if hi % p != 0 || wi % p != 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {hi}×{wi} is not a multiple of patch size {p}"
        )));
    }
    let projection = spec.projection();
    let (h, w) = (hi / p, wi / p);
    let mut data = Array3::<f32>::zeros((h, w, spec.out_channels));
    for i in 0..h {
        for j in 0..w {
            let stats = patch_statistics(image.pixels(), i * p, j * p, p);
            for c in 0..spec.out_channels {
                let v: f64 = (0..MOCK_STAT_DIM).map(|s| projection[[c, s]] * stats[s]).sum();
                data[[i, j, c]] = v as f32;
            }
        }
    }
    FeatureMap::new(data, p)
}

/// Texture summary of the patch with top-left corner `(y0, x0)`.
///
/// Layout: 3 centred channel means, 3 channel standard deviations,
/// 3 gradient energies, then 8 quadrature filter energies on the
/// mean-removed luminance (4 orientations × 2 frequencies), each
/// normalized by the window mass. Only pixels inside the patch contribute.
pub fn patch_statistics(pixels: &Array3<f32>, y0: usize, x0: usize, p: usize) -> [f64; MOCK_STAT_DIM] {
    let mut stats = [0.0; MOCK_STAT_DIM];
    let n = (p * p) as f64;
    let px = |y: usize, x: usize, c: usize| pixels[[y0 + y, x0 + x, c]] as f64;

    for c in 0..3 {
        let mut sum = 0.0;
        for y in 0..p {
            for x in 0..p {
                sum += px(y, x, c);
            }
        }
        let mean = sum / n;
        let mut var = 0.0;
        let mut grad = 0.0;
        for y in 0..p {
            for x in 0..p {
                let v = px(y, x, c);
                var += (v - mean) * (v - mean);
                if x + 1 < p {
                    let dx = px(y, x + 1, c) - v;
                    grad += dx * dx;
                }
                if y + 1 < p {
                    let dy = px(y + 1, x, c) - v;
                    grad += dy * dy;
                }
            }
        }
        stats[c] = 2.0 * (mean - 0.5);
        stats[3 + c] = 4.0 * (var / n).sqrt();
        stats[6 + c] = 2.0 * (grad / (2.0 * n)).sqrt();
    }

    let mut lum = vec![0.0; p * p];
    for y in 0..p {
        for x in 0..p {
            lum[y * p + x] = (px(y, x, 0) + px(y, x, 1) + px(y, x, 2)) / 3.0;
        }
    }
    let lum_mean = lum.iter().sum::<f64>() / n;
    let centre = (p as f64 - 1.0) / 2.0;
    let sigma = p as f64 / 3.0;
    let mut k = 9;
    for &freq in &FILTER_FREQUENCIES {
        for &orient in &FILTER_ORIENTATIONS {
            let theta = orient * std::f64::consts::PI;
            let (st, ct) = theta.sin_cos();
            let (mut even, mut odd, mut mass) = (0.0, 0.0, 0.0);
            for y in 0..p {
                for x in 0..p {
                    let (dx, dy) = (x as f64 - centre, y as f64 - centre);
                    let window = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let phase = 2.0 * std::f64::consts::PI * freq * (dx * ct + dy * st);
                    let l = lum[y * p + x] - lum_mean;
                    even += window * phase.cos() * l;
                    odd += window * phase.sin() * l;
                    mass += window;
                }
            }
            stats[k] = 8.0 * (even * even + odd * odd).sqrt() / mass;
            k += 1;
        }
    }
    stats
}

/// Reads a feature file written by [`FeatureMap::write`] or an external exporter.
pub fn import_precomputed_features(path: &Path) -> Result<FeatureMap> {
    let (data, patch_size) = read_grid(path, FEATURE_MAGIC)?;
    FeatureMap::new(data, patch_size)
}

/// Writes a `H × W × C` float grid: 6-byte magic, u16 version, then
/// H, W, C and patch size as u32, all little-endian, followed by the
/// row-major f32 payload.
pub fn write_grid(path: &Path, magic: &[u8; 6], data: ArrayView3<f32>, patch_size: usize) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    let (h, w, c) = data.dim();
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(magic);
    header.extend_from_slice(&GRID_FORMAT_VERSION.to_le_bytes());
    for v in [h, w, c, patch_size] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.write_all(&header).map_err(|e| Error::io(ctx(), e))?;
    for v in data.iter() {
        out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_grid(path: &Path, magic: &[u8; 6]) -> Result<(Array3<f32>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_grid(&bytes, magic)
}

pub fn parse_grid(bytes: &[u8], magic: &[u8; 6]) -> Result<(Array3<f32>, usize)> {
    const HEADER: usize = 6 + 2 + 16;
    if bytes.len() < HEADER {
        return Err(Error::Parse(format!("header needs {HEADER} bytes, got {}", bytes.len())));
    }
    if &bytes[..6] != magic {
        return Err(Error::Parse(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..6]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != GRID_FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported version {version}")));
    }
    let field = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (h, w, c, patch) = (field(0), field(1), field(2), field(3));
    let payload = &bytes[HEADER..];
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Parse("header dimensions overflow".into()))?;
    if payload.len() != expected * 4 {
        return Err(Error::Shape(format!(
            "header declares {h}×{w}×{c} = {expected} floats, payload holds {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let data = Array3::from_shape_vec((h, w, c), values).expect("length checked");
    Ok((data, patch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(size: usize, cell: usize) -> ImageTensor {
        let px = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            let on = ((y / cell) + (x / cell)).is_multiple_of(2);
            if on {
                0.9 - 0.1 * c as f32
            } else {
                0.1 + 0.05 * c as f32
            }
        });
        ImageTensor::new(px).unwrap()
    }

    #[test]
    fn output_shape_follows_patch_grid() {
        let img = checkerboard(64, 4);
        let f = extract_features(&img, &ExtractorSpec::default()).unwrap();
        assert_eq!(f.data().dim(), (8, 8, 32));
        assert_eq!(f.source_image_shape(), (64, 64));
    }

    #[test]
    fn constant_image_gives_identical_vectors() {
        let img = ImageTensor::constant(32, 32, 0.3);
        let f = extract_features(&img, &ExtractorSpec::default()).unwrap();
        let m = f.to_matrix();
        for row in m.rows() {
            assert_eq!(row, m.row(0));
        }
    }

    #[test]
    fn non_multiple_size_is_rejected() {
        let img = ImageTensor::constant(30, 32, 0.3);
        let err = extract_features(&img, &ExtractorSpec::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut px = Array3::from_elem((8, 8, 3), 0.5f32);
        px[[1, 1, 1]] = f32::NAN;
        assert!(matches!(ImageTensor::new(px), Err(Error::NonFinite(_))));
    }

    #[test]
    fn editing_one_patch_changes_one_vector() {
        let img = checkerboard(32, 3);
        let spec = ExtractorSpec::default();
        let before = extract_features(&img, &spec).unwrap();
        let mut px = img.pixels().clone();
        for y in 8..16 {
            for x in 16..24 {
                px[[y, x, 0]] = 1.0 - px[[y, x, 0]];
            }
        }
        let after = extract_features(&ImageTensor::new(px).unwrap(), &spec).unwrap();
        let mut changed = vec![];
        for i in 0..4 {
            for j in 0..4 {
                let a = before.data().slice(ndarray::s![i, j, ..]);
                let b = after.data().slice(ndarray::s![i, j, ..]);
                if a != b {
                    changed.push((i, j));
                }
            }
        }
        assert_eq!(changed, vec![(1, 2)]);
    }

    #[test]
    fn header_arithmetic_accepts_exact_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(FEATURE_MAGIC);
        bytes.extend_from_slice(&1u16.to_le_bytes());
        for v in [8u32, 8, 32, 8] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 2048 * 4));
        let (data, patch) = parse_grid(&bytes, FEATURE_MAGIC).unwrap();
        assert_eq!(data.dim(), (8, 8, 32));
        assert_eq!(patch, 8);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(parse_grid(&bytes, FEATURE_MAGIC), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let bytes = b"DTRF-X\x01\x00aaaaaaaaaaaaaaaa".to_vec();
        assert!(matches!(parse_grid(&bytes, FEATURE_MAGIC), Err(Error::Parse(_))));
    }
}
