//! On-disk formats: PNG images, parameter checkpoints, history and result CSVs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{write_grid, PREDICTION_MAGIC};
use crate::error::{Error, Result};
use crate::head::DensePrediction;
use crate::params::{ParameterSet, Tensor};
use crate::slot::SlotDecodeResult;

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    Ok(())
}

/// Writes an `H × W × 3` image with values in `[0, 1]`.
pub fn save_rgb_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn save_gray_png(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([values[[y as usize, x as usize]]]));
    ensure_parent(path)?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads any PNG as RGB in `[0, 1]`, optionally resized (bilinear) to
/// `(height, width)`.
pub fn load_rgb_png(path: &Path, resize: Option<(usize, usize)>) -> Result<Array3<f32>> {
    let mut img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    if let Some((h, w)) = resize {
        img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    }
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Reads a PNG as 8-bit luminance, optionally resized with nearest-neighbour
/// sampling so mask values stay binary.
pub fn load_gray_png(path: &Path, resize: Option<(usize, usize)>) -> Result<Array2<u8>> {
    let mut img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    if let Some((h, w)) = resize {
        img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
    }
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DTRF-C";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes parameters as: magic, `u16` version, `u32` entry count, then
/// per entry the name length and UTF-8 name, rank, dims and `f32` values,
/// all little-endian.
pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Parse("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Parse("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.index_of(&name).is_some() {
            return Err(Error::Parse(format!("duplicate checkpoint entry `{name}`")));
        }
        params.push(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

/// Metadata stored next to a checkpoint as `<file>.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub round: Option<usize>,
    pub phase: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".toml");
    path.with_file_name(name)
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, meta: &CheckpointMeta) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&encode_checkpoint(params))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let side = sidecar_path(path);
    let text = toml::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&side, text).map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

/// Loads a checkpoint; a missing file is reported as a missing prerequisite.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, Option<CheckpointMeta>)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let params = decode_checkpoint(&bytes)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
        Some(toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", side.display())))?)
    } else {
        None
    };
    Ok((params, meta))
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: usize,
    pub step: usize,
    pub branch: String,
    pub loss_recon: Option<f64>,
    pub loss_bce: Option<f64>,
    pub loss_total: Option<f64>,
    pub param_drift: Option<f64>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One row of the per-class results table. `hd` is empty when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub class: String,
    pub dice: f64,
    pub iou: f64,
    pub hd: Option<f64>,
}

/// Mean ± std row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub variant: String,
    pub runs: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    pub hd_excluded: usize,
}

/// Path of the summary file belonging to a results CSV.
pub fn summary_path(results: &Path) -> PathBuf {
    let stem = results.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    results.with_file_name(format!("{stem}_summary.csv"))
}

/// Saves each slot's mask, nearest-upsampled by `scale`, as
/// `<dir>/<prefix>_slot<k>.png`.
pub fn save_slot_masks(dir: &Path, prefix: &str, decode: &SlotDecodeResult, scale: usize) -> Result<Vec<PathBuf>> {
    let scale = scale.max(1);
    let mut out = Vec::new();
    for k in 0..decode.masks.nrows() {
        let grid = decode.mask_grid(k);
        let (h, w) = grid.dim();
        let img = Array2::from_shape_fn((h * scale, w * scale), |(y, x)| {
            (grid[[y / scale, x / scale]].clamp(0.0, 1.0) * 255.0).round() as u8
        });
        let path = dir.join(format!("{prefix}_slot{k}.png"));
        save_gray_png(&path, &img)?;
        out.push(path);
    }
    Ok(out)
}

/// Writes thresholded class masks as `<dir>/<prefix>_class<c>.png` and the
/// raw logits as `<dir>/<prefix>.dtrfp`.
pub fn save_prediction(dir: &Path, prefix: &str, pred: &DensePrediction) -> Result<()> {
    let mask = pred.threshold();
    for c in 0..pred.class_count() {
        let plane = mask.index_axis(ndarray::Axis(2), c).mapv(|v| if v { 255 } else { 0 });
        save_gray_png(&dir.join(format!("{prefix}_class{}.png", c + 1)), &plane)?;
    }
    let logits = pred.logits.mapv(|v| v as f32);
    let path = dir.join(format!("{prefix}.dtrfp"));
    ensure_parent(&path)?;
    write_grid(&path, PREDICTION_MAGIC, logits.view(), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.25, 3.0, -0.125]).unwrap());
        p.push("b", Tensor::new(vec![1], vec![7.0]).unwrap());
        p
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = params();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&p)).unwrap(), p);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = encode_checkpoint(&params());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Parse(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn missing_checkpoint_is_a_missing_prerequisite() {
        let err = load_checkpoint(Path::new("/nonexistent/theta.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px = Array3::from_shape_fn((4, 6, 3), |(y, x, c)| ((y * 6 + x + c) % 5) as f32 / 4.0);
        let path = dir.path().join("img.png");
        save_rgb_png(&path, &px).unwrap();
        let back = load_rgb_png(&path, None).unwrap();
        assert_eq!(back.dim(), (4, 6, 3));
        for (a, b) in px.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn sidecar_and_summary_names() {
        assert_eq!(sidecar_path(Path::new("x/theta.ckpt")), PathBuf::from("x/theta.ckpt.toml"));
        assert_eq!(summary_path(Path::new("out/results.csv")), PathBuf::from("out/results_summary.csv"));
    }
}
