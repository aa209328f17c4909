//! Procedural texture-shift benchmark and image-folder ingestion.
//!
//! Each image is a background texture with smooth random blobs of one or
//! more foreground textures. Textures are multi-octave value-noise modulated
//! sinusoidal gratings; blob shapes come from thresholded, anisotropically
//! smoothed random fields. Two domains that share texture descriptors but
//! differ in shape and photometric parameters give a shift where appearance
//! statistics are stable and geometry is not.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{patch_statistics, ImageTensor, MOCK_STAT_DIM};
use crate::error::{Error, Result};
use crate::io::{load_gray_png, load_rgb_png, save_gray_png, save_rgb_png};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureDescriptor {
    /// Grating frequency in cycles per pixel.
    pub base_frequency: f64,
    /// Grating orientation in degrees.
    pub orientation: f64,
    pub noise_octaves: u32,
    /// Phase modulation strength of the value noise, in cycles.
    pub noise_strength: f64,
    /// Colors at the grating's troughs and crests.
    pub palette: [[f64; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Gaussian bumps per class and image.
    pub blobs: usize,
    /// Geometric mean of a bump's two standard deviations, in pixels.
    pub smoothness: f64,
    /// Ratio of a bump's long to short standard deviation; 1 gives round blobs.
    pub elongation: f64,
    /// Weight of a fine-scale field added before thresholding.
    pub deformation: f64,
    /// Fraction of the image each foreground class covers.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: (f64, f64),
    /// Additive per-channel offset range.
    pub tint: [(f64, f64); 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Index 0 is the background; the rest are foreground classes.
    pub textures: Vec<TextureDescriptor>,
    pub shape: ShapeParams,
    pub photometric: Photometric,
    pub image_size: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn num_foreground(&self) -> usize {
        self.textures.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.textures.len() < 2 {
            return Err(Error::DegenerateSpec(format!(
                "`{}` needs a background and at least one foreground texture",
                self.name
            )));
        }
        for i in 0..self.textures.len() {
            for j in (i + 1)..self.textures.len() {
                if self.textures[i] == self.textures[j] {
                    return Err(Error::DegenerateSpec(format!(
                        "`{}`: textures {i} and {j} are identical",
                        self.name
                    )));
                }
            }
        }
        let s = &self.shape;
        if !(s.smoothness > 0.0 && s.elongation >= 1.0 && (0.0..1.0).contains(&s.coverage) && s.coverage > 0.0) {
            return Err(Error::DegenerateSpec(format!("`{}`: bad shape parameters", self.name)));
        }
        let p = &self.photometric;
        if p.brightness.0 > p.brightness.1 || p.brightness.0 <= 0.0 || p.tint.iter().any(|t| t.0 > t.1) {
            return Err(Error::DegenerateSpec(format!("`{}`: bad photometric ranges", self.name)));
        }
        if self.image_size == 0 {
            return Err(Error::DegenerateSpec("image_size must be positive".into()));
        }
        Ok(())
    }

    /// Default source domain: background plus two foreground textures, round blobs.
    pub fn default_source() -> Self {
        Self {
            name: "source".into(),
            textures: default_textures(),
            shape: ShapeParams {
                blobs: 3,
                smoothness: 7.0,
                elongation: 1.0,
                deformation: 0.05,
                coverage: 0.2,
            },
            photometric: Photometric {
                brightness: (0.95, 1.05),
                tint: [(-0.02, 0.02); 3],
            },
            image_size: 64,
            seed: 1001,
        }
    }

    /// Default target domain: same textures, elongated and ragged blobs,
    /// darker and tinted.
    pub fn default_target() -> Self {
        Self {
            name: "target".into(),
            textures: default_textures(),
            shape: ShapeParams {
                blobs: 3,
                smoothness: 6.0,
                elongation: 5.0,
                deformation: 0.12,
                coverage: 0.2,
            },
            photometric: Photometric {
                brightness: (0.92, 1.0),
                tint: [(0.06, 0.1), (-0.04, 0.0), (-0.08, -0.04)],
            },
            image_size: 64,
            seed: 2002,
        }
    }
}

fn default_textures() -> Vec<TextureDescriptor> {
    vec![
        TextureDescriptor {
            base_frequency: 0.05,
            orientation: 0.0,
            noise_octaves: 2,
            noise_strength: 0.6,
            palette: [[0.55, 0.35, 0.3], [0.7, 0.45, 0.4]],
        },
        TextureDescriptor {
            base_frequency: 0.25,
            orientation: 45.0,
            noise_octaves: 1,
            noise_strength: 0.2,
            palette: [[0.5, 0.3, 0.3], [0.85, 0.6, 0.55]],
        },
        TextureDescriptor {
            base_frequency: 0.125,
            orientation: 135.0,
            noise_octaves: 3,
            noise_strength: 0.4,
            palette: [[0.4, 0.3, 0.25], [0.75, 0.55, 0.4]],
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainUnlabeled,
    TrainLabeled,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::TrainUnlabeled => "train_unlabeled",
            Split::TrainLabeled => "train_labeled",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    /// `H × W × C_fg` binary stack.
    pub label: Option<Array3<u8>>,
    pub domain: String,
    pub split: Split,
}

impl Sample {
    pub fn num_classes(&self) -> Option<usize> {
        self.label.as_ref().map(|l| l.dim().2)
    }
}

fn sample_seed(base: u64, salt: u64, index: usize) -> u64 {
    // splitmix64 over the combined key
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` samples from one domain; the first `round(n · labeled_fraction)`
/// carry labels.
pub fn generate_domain(spec: &DomainSpec, n: usize, labeled_fraction: f64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Empty("generate_domain needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::Config(format!("labeled_fraction {labeled_fraction} outside [0, 1]")));
    }
    let labeled = (n as f64 * labeled_fraction).round() as usize;
    generate_pool(spec, n, 0, |i| {
        if i < labeled {
            Split::TrainLabeled
        } else {
            Split::TrainUnlabeled
        }
    })
}

fn generate_pool(spec: &DomainSpec, n: usize, salt: u64, split_of: impl Fn(usize) -> Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..n)
        .map(|i| {
            let split = split_of(i);
            let (image, label) = render(spec, sample_seed(spec.seed, salt, i));
            Ok(Sample {
                id: format!("{}-{salt}-{i:05}", spec.name),
                image,
                label: (split != Split::TrainUnlabeled).then_some(label),
                domain: spec.name.clone(),
                split,
            })
        })
        .collect()
}

/// Renders one image and its label stack.
pub fn render(spec: &DomainSpec, seed: u64) -> (ImageTensor, Array3<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let fg = spec.num_foreground();

    let mut class_map = Array2::<usize>::zeros((size, size));
    let mut best = Array2::from_elem((size, size), f64::NEG_INFINITY);
    for c in 1..=fg {
        let field = blob_field(&mut rng, size, &spec.shape);
        let threshold = quantile(field.iter().copied().collect(), 1.0 - spec.shape.coverage);
        for ((y, x), &v) in field.indexed_iter() {
            if v > threshold && v - threshold > best[[y, x]] {
                best[[y, x]] = v - threshold;
                class_map[[y, x]] = c;
            }
        }
    }

    let brightness = rng.gen_range(spec.photometric.brightness.0..=spec.photometric.brightness.1);
    let tint: Vec<f64> = spec
        .photometric
        .tint
        .iter()
        .map(|&(lo, hi)| rng.gen_range(lo..=hi))
        .collect();
    let layers: Vec<Array3<f64>> = spec
        .textures
        .iter()
        .map(|t| texture_layer(&mut rng, size, t))
        .collect();

    let mut pixels = Array3::<f32>::zeros((size, size, 3));
    let mut label = Array3::<u8>::zeros((size, size, fg));
    for y in 0..size {
        for x in 0..size {
            let c = class_map[[y, x]];
            if c > 0 {
                label[[y, x, c - 1]] = 1;
            }
            for ch in 0..3 {
                let v = brightness * layers[c][[y, x, ch]] + tint[ch];
                pixels[[y, x, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (ImageTensor::new(pixels).expect("rendered pixels are in range"), label)
}

fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((values.len() - 1) as f64 * q).round() as usize;
    values[idx]
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable blur with wrap-around borders.
fn blur(field: &Array2<f64>, sigma_y: f64, sigma_x: f64) -> Array2<f64> {
    let (h, w) = field.dim();
    let kx = gaussian_kernel(sigma_x);
    let ky = gaussian_kernel(sigma_y);
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kx
                .iter()
                .enumerate()
                .map(|(i, k)| k * field[[y, (x as isize + i as isize - rx).rem_euclid(w as isize) as usize]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = ky
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[[(y as isize + i as isize - ry).rem_euclid(h as isize) as usize, x]])
                .sum();
        }
    }
    out
}

fn standardize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let std = (a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    a.mapv_inplace(|v| (v - mean) / std);
    a
}

fn white_noise<R: Rng>(rng: &mut R, size: usize) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |_| rng.sample(StandardNormal))
}

/// Sum of randomly placed, randomly oriented Gaussian bumps plus a
/// fine-scale perturbation.
fn blob_field<R: Rng>(rng: &mut R, size: usize, shape: &ShapeParams) -> Array2<f64> {
    let stretch = shape.elongation.sqrt();
    let (long, short) = (shape.smoothness * stretch, shape.smoothness / stretch);
    let mut field = Array2::<f64>::zeros((size, size));
    for _ in 0..shape.blobs.max(1) {
        let cy = rng.gen_range(0.0..size as f64);
        let cx = rng.gen_range(0.0..size as f64);
        let angle = rng.gen_range(0.0..PI);
        let amp = rng.gen_range(0.7..1.0);
        let (sa, ca) = angle.sin_cos();
        for ((y, x), v) in field.indexed_iter_mut() {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = (dx * ca + dy * sa) / long;
            let w = (-dx * sa + dy * ca) / short;
            *v += amp * (-0.5 * (u * u + w * w)).exp();
        }
    }
    let fine = standardize(blur(&white_noise(rng, size), 1.0, 1.0));
    field + fine * shape.deformation
}

/// Lattice value noise with smoothstep interpolation, octaves halving the
/// cell size and amplitude. Output roughly in `[-1, 1]`.
fn value_noise<R: Rng>(rng: &mut R, size: usize, octaves: u32) -> Array2<f64> {
    let mut out = Array2::zeros((size, size));
    let mut cell = 16.0;
    let mut amp = 1.0;
    let mut total = 0.0;
    for _ in 0..octaves.max(1) {
        let cells = (size as f64 / cell).ceil() as usize + 2;
        let lattice = Array2::from_shape_fn((cells, cells), |_| rng.gen_range(-1.0..1.0));
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 / cell, x as f64 / cell);
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
                let top = lattice[[iy, ix]] * (1.0 - tx) + lattice[[iy, ix + 1]] * tx;
                let bottom = lattice[[iy + 1, ix]] * (1.0 - tx) + lattice[[iy + 1, ix + 1]] * tx;
                out[[y, x]] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    out / total
}

fn texture_layer<R: Rng>(rng: &mut R, size: usize, t: &TextureDescriptor) -> Array3<f64> {
    let noise = value_noise(rng, size, t.noise_octaves);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let theta = t.orientation.to_radians();
    let (st, ct) = theta.sin_cos();
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let arg = 2.0 * PI * (t.base_frequency * (x as f64 * ct + y as f64 * st) + t.noise_strength * noise[[y, x]])
            + phase;
        let mix = 0.5 + 0.5 * arg.sin();
        t.palette[0][c] * (1.0 - mix) + t.palette[1][c] * mix
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSizes {
    pub source_labeled: usize,
    /// Size of both the source and the target unlabeled pools.
    pub unlabeled: usize,
    /// Size of both the target test split and the held-out source test split.
    pub test: usize,
}

impl From<(usize, usize, usize)> for BenchmarkSizes {
    fn from((source_labeled, unlabeled, test): (usize, usize, usize)) -> Self {
        Self {
            source_labeled,
            unlabeled,
            test,
        }
    }
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        Self {
            source_labeled: 24,
            unlabeled: 200,
            test: 40,
        }
    }
}

/// Everything needed to regenerate a benchmark bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub sizes: BenchmarkSizes,
    /// Pool name → sample count.
    pub counts: BTreeMap<String, usize>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("manifest: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkBundle {
    pub source_labeled: Vec<Sample>,
    pub source_unlabeled: Vec<Sample>,
    pub target_unlabeled: Vec<Sample>,
    pub target_test: Vec<Sample>,
    pub source_test: Vec<Sample>,
    pub manifest: Manifest,
}

const SALT_LABELED: u64 = 1;
const SALT_UNLABELED: u64 = 2;
const SALT_TEST: u64 = 3;

pub fn make_shift_benchmark(
    source: &DomainSpec,
    target: &DomainSpec,
    sizes: impl Into<BenchmarkSizes>,
) -> Result<BenchmarkBundle> {
    let sizes = sizes.into();
    if source.num_foreground() != target.num_foreground() {
        return Err(Error::IncompatibleClasses {
            source_classes: source.textures.len(),
            target_classes: target.textures.len(),
        });
    }
    if source.name == target.name {
        return Err(Error::Config("source and target domains need distinct names".into()));
    }
    let pool = |spec, n, salt, split| -> Result<Vec<Sample>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        generate_pool(spec, n, salt, |_| split)
    };
    let source_labeled = pool(source, sizes.source_labeled, SALT_LABELED, Split::TrainLabeled)?;
    let source_unlabeled = pool(source, sizes.unlabeled, SALT_UNLABELED, Split::TrainUnlabeled)?;
    let target_unlabeled = pool(target, sizes.unlabeled, SALT_UNLABELED, Split::TrainUnlabeled)?;
    let target_test = pool(target, sizes.test, SALT_TEST, Split::Test)?;
    let source_test = pool(source, sizes.test, SALT_TEST, Split::Test)?;
    let counts = [
        ("source_labeled", source_labeled.len()),
        ("source_unlabeled", source_unlabeled.len()),
        ("target_unlabeled", target_unlabeled.len()),
        ("target_test", target_test.len()),
        ("source_test", source_test.len()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(BenchmarkBundle {
        source_labeled,
        source_unlabeled,
        target_unlabeled,
        target_test,
        source_test,
        manifest: Manifest {
            format_version: 1,
            source: source.clone(),
            target: target.clone(),
            sizes,
            counts,
        },
    })
}

impl BenchmarkBundle {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        make_shift_benchmark(&manifest.source, &manifest.target, manifest.sizes)
    }

    fn pools(&self) -> [&[Sample]; 5] {
        [
            &self.source_labeled,
            &self.source_unlabeled,
            &self.target_unlabeled,
            &self.target_test,
            &self.source_test,
        ]
    }

    /// Writes `<root>/<domain>/<split>/images/<id>.png`, per-class masks under
    /// `masks/<class>/`, and the manifest.
    pub fn write(&self, root: &Path) -> Result<()> {
        for pool in self.pools() {
            write_samples(root, pool)?;
        }
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_toml()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Loads a dataset written by [`BenchmarkBundle::write`].
    pub fn read(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
        let classes: Vec<String> = (1..=manifest.source.num_foreground()).map(class_dir_name).collect();
        let load = |domain: &str, split: Split| -> Result<Vec<Sample>> {
            let dir = root.join(domain).join(split.as_str());
            if !dir.exists() {
                return Ok(Vec::new());
            }
            let labels = (split != Split::TrainUnlabeled).then(|| dir.join("masks"));
            let opts = FolderOptions {
                patch_size: 1,
                resize_to: None,
                masks: MaskLayout::ClassDirs(classes.clone()),
                domain: domain.to_string(),
                split,
            };
            load_image_folder(&dir.join("images"), labels.as_deref(), &opts)
        };
        let (s, t) = (&manifest.source.name, &manifest.target.name);
        Ok(Self {
            source_labeled: load(s, Split::TrainLabeled)?,
            source_unlabeled: load(s, Split::TrainUnlabeled)?,
            target_unlabeled: load(t, Split::TrainUnlabeled)?,
            target_test: load(t, Split::Test)?,
            source_test: load(s, Split::Test)?,
            manifest,
        })
    }
}

/// Patch-statistic entries before this index are color means.
pub const TEXTURE_STAT_OFFSET: usize = 3;

pub fn class_dir_name(class: usize) -> String {
    format!("class_{class}")
}

/// Writes samples under `<root>/<domain>/<split>/`.
pub fn write_samples(root: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let dir = root.join(&s.domain).join(s.split.as_str());
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
        save_rgb_png(&images.join(format!("{}.png", s.id)), s.image.pixels())?;
        if let Some(label) = &s.label {
            for c in 0..label.dim().2 {
                let mdir = dir.join("masks").join(class_dir_name(c + 1));
                fs::create_dir_all(&mdir).map_err(|e| Error::io(format!("creating {}", mdir.display()), e))?;
                let mask = label.index_axis(ndarray::Axis(2), c).mapv(|v| v * 255);
                save_gray_png(&mdir.join(format!("{}.png", s.id)), &mask)?;
            }
        }
    }
    Ok(())
}

/// How mask images encode classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLayout {
    /// One grayscale mask per class in `<labels>/<class_dir>/<basename>.png`,
    /// foreground where the value exceeds 127.
    ClassDirs(Vec<String>),
    /// One RGB mask per image in `<labels>/<basename>.png`; class `c`
    /// (1-based) wherever the pixel equals `colors[c - 1]`.
    ColorMap(Vec<[u8; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FolderOptions {
    /// Images are center-cropped (after any resize) to a multiple of this.
    pub patch_size: usize,
    pub resize_to: Option<(usize, usize)>,
    pub masks: MaskLayout,
    pub domain: String,
    pub split: Split,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn crop_offsets(len: usize, multiple: usize) -> (usize, usize) {
    let keep = len / multiple * multiple;
    ((len - keep) / 2, keep)
}

/// Reads every PNG in `images` (sorted by name), with optional masks.
pub fn load_image_folder(images: &Path, labels: Option<&Path>, opts: &FolderOptions) -> Result<Vec<Sample>> {
    let p = opts.patch_size.max(1);
    let mut out = Vec::new();
    for path in list_pngs(images)? {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parse(format!("bad file name {}", path.display())))?
            .to_string();
        let rgb = load_rgb_png(&path, opts.resize_to)?;
        let (h, w, _) = rgb.dim();
        let (oy, hh) = crop_offsets(h, p);
        let (ox, ww) = crop_offsets(w, p);
        if hh == 0 || ww == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} is smaller than one patch",
                path.display()
            )));
        }
        let pixels = rgb.slice(ndarray::s![oy..oy + hh, ox..ox + ww, ..]).to_owned();
        let label = match labels {
            None => None,
            Some(dir) => {
                let stack = load_mask_stack(dir, &stem, &opts.masks, opts.resize_to)?;
                if stack.dim().0 != h || stack.dim().1 != w {
                    return Err(Error::Shape(format!("mask for `{stem}` does not match its image size")));
                }
                Some(stack.slice(ndarray::s![oy..oy + hh, ox..ox + ww, ..]).to_owned())
            }
        };
        out.push(Sample {
            id: stem,
            image: ImageTensor::new(pixels)?,
            label,
            domain: opts.domain.clone(),
            split: opts.split,
        });
    }
    Ok(out)
}

fn load_mask_stack(dir: &Path, stem: &str, layout: &MaskLayout, resize: Option<(usize, usize)>) -> Result<Array3<u8>> {
    match layout {
        MaskLayout::ClassDirs(classes) => {
            let mut planes = Vec::with_capacity(classes.len());
            for class in classes {
                let path = dir.join(class).join(format!("{stem}.png"));
                if !path.exists() {
                    return Err(Error::MissingMask(format!("{stem} (class {class})")));
                }
                planes.push(load_gray_png(&path, resize)?);
            }
            let (h, w) = planes[0].dim();
            if planes.iter().any(|p| p.dim() != (h, w)) {
                return Err(Error::Shape(format!("class masks for `{stem}` differ in size")));
            }
            Ok(Array3::from_shape_fn((h, w, planes.len()), |(y, x, c)| {
                (planes[c][[y, x]] > 127) as u8
            }))
        }
        MaskLayout::ColorMap(colors) => {
            let path = dir.join(format!("{stem}.png"));
            if !path.exists() {
                return Err(Error::MissingMask(stem.to_string()));
            }
            let rgb = load_rgb_png(&path, resize)?;
            let (h, w, _) = rgb.dim();
            Ok(Array3::from_shape_fn((h, w, colors.len()), |(y, x, c)| {
                let px = [0, 1, 2].map(|ch| (rgb[[y, x, ch]] * 255.0).round() as u8);
                (px == colors[c]) as u8
            }))
        }
    }
}

/// Mean appearance statistics of the patches lying entirely inside each
/// class (index 0 = background), restricted to the texture entries of the
/// mock extractor's patch statistics (contrast, gradient and oriented-filter
/// energies; the color means are left out). `None` for a class with no pure
/// patch.
pub fn class_texture_statistics(samples: &[Sample], patch_size: usize) -> Result<Vec<Option<Array1<f64>>>> {
    let p = patch_size.max(1);
    let dim = MOCK_STAT_DIM - TEXTURE_STAT_OFFSET;
    let mut sums: Vec<(Array1<f64>, usize)> = Vec::new();
    for s in samples {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Empty(format!("sample {} has no label", s.id)))?;
        let classes = label.dim().2;
        if sums.is_empty() {
            sums = vec![(Array1::zeros(dim), 0); classes + 1];
        }
        let class_at = |y: usize, x: usize| (0..classes).find(|&c| label[[y, x, c]] == 1).map_or(0, |c| c + 1);
        for i in 0..s.image.height() / p {
            for j in 0..s.image.width() / p {
                let c = class_at(i * p, j * p);
                let pure = (i * p..(i + 1) * p).all(|y| (j * p..(j + 1) * p).all(|x| class_at(y, x) == c));
                if pure {
                    let stats = patch_statistics(s.image.pixels(), i * p, j * p, p);
                    sums[c].0 += &Array1::from(stats[TEXTURE_STAT_OFFSET..].to_vec());
                    sums[c].1 += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Eccentricity `sqrt(1 − λ_min/λ_max)` of each 4-connected foreground
/// component with at least `min_area` pixels, averaged over all components
/// of all classes and samples.
pub fn mean_blob_eccentricity(samples: &[Sample], min_area: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Empty(format!("sample {} has no label", s.id)))?;
        let (h, w, classes) = label.dim();
        for c in 0..classes {
            let mut seen = Array2::from_elem((h, w), false);
            for y0 in 0..h {
                for x0 in 0..w {
                    if label[[y0, x0, c]] == 0 || seen[[y0, x0]] {
                        continue;
                    }
                    let mut stack = vec![(y0, x0)];
                    seen[[y0, x0]] = true;
                    let mut pts = Vec::new();
                    while let Some((y, x)) = stack.pop() {
                        pts.push((y as f64, x as f64));
                        let neighbours = [
                            (y.wrapping_sub(1), x),
                            (y + 1, x),
                            (y, x.wrapping_sub(1)),
                            (y, x + 1),
                        ];
                        for (ny, nx) in neighbours {
                            if ny < h && nx < w && !seen[[ny, nx]] && label[[ny, nx, c]] == 1 {
                                seen[[ny, nx]] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                    if pts.len() < min_area {
                        continue;
                    }
                    let n = pts.len() as f64;
                    let my = pts.iter().map(|p| p.0).sum::<f64>() / n;
                    let mx = pts.iter().map(|p| p.1).sum::<f64>() / n;
                    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
                    for &(y, x) in &pts {
                        syy += (y - my) * (y - my);
                        sxx += (x - mx) * (x - mx);
                        sxy += (y - my) * (x - mx);
                    }
                    let (syy, sxx, sxy) = (syy / n, sxx / n, sxy / n);
                    let tr = syy + sxx;
                    let disc = ((syy - sxx) * (syy - sxx) / 4.0 + sxy * sxy).sqrt();
                    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
                    if l1 > 0.0 {
                        total += (1.0 - (l2 / l1).max(0.0)).sqrt();
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no blobs large enough".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlabeled_when_fraction_is_zero() {
        let s = generate_domain(&DomainSpec::default_source(), 4, 0.0).unwrap();
        assert!(s.iter().all(|s| s.label.is_none() && s.split == Split::TrainUnlabeled));
        let s = generate_domain(&DomainSpec::default_source(), 4, 0.5).unwrap();
        assert_eq!(s.iter().filter(|s| s.label.is_some()).count(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec::default_target();
        assert_eq!(generate_domain(&spec, 3, 1.0).unwrap(), generate_domain(&spec, 3, 1.0).unwrap());
    }

    #[test]
    fn identical_textures_are_degenerate() {
        let mut spec = DomainSpec::default_source();
        spec.textures[2] = spec.textures[1].clone();
        assert!(matches!(generate_domain(&spec, 1, 0.0), Err(Error::DegenerateSpec(_))));
    }

    #[test]
    fn labels_match_image_shape_and_classes_cover_the_image() {
        let s = generate_domain(&DomainSpec::default_source(), 3, 1.0).unwrap();
        for sample in &s {
            let l = sample.label.as_ref().unwrap();
            assert_eq!((l.dim().0, l.dim().1), (64, 64));
            assert_eq!(l.dim().2, 2);
            let fg: usize = l.iter().map(|&v| v as usize).sum();
            assert!(fg > 0 && fg < 64 * 64);
            // classes are exclusive
            for y in 0..64 {
                for x in 0..64 {
                    assert!(l[[y, x, 0]] + l[[y, x, 1]] <= 1);
                }
            }
        }
    }

    #[test]
    fn benchmark_rejects_class_mismatch() {
        let mut t = DomainSpec::default_target();
        t.textures.pop();
        assert!(matches!(
            make_shift_benchmark(&DomainSpec::default_source(), &t, (1, 1, 1)),
            Err(Error::IncompatibleClasses { .. })
        ));
    }

    #[test]
    fn blur_preserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = white_noise(&mut rng, 16);
        let b = blur(&f, 2.0, 3.0);
        assert!((f.sum() - b.sum()).abs() < 1e-9);
    }
}
