//! Region overlap (DICE, IoU) and boundary (Hausdorff) metrics, plus
//! multi-seed aggregation.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean foreground grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Array2<bool>,
}

impl BinaryMask {
    pub fn new(grid: Array2<bool>) -> Result<Self> {
        if grid.nrows() == 0 || grid.ncols() == 0 {
            return Err(Error::Shape("mask must be at least 1×1".into()));
        }
        Ok(Self { grid })
    }

    pub fn from_points(shape: (usize, usize), points: &[(usize, usize)]) -> Result<Self> {
        let mut grid = Array2::from_elem(shape, false);
        for &(y, x) in points {
            grid[[y, x]] = true;
        }
        Self::new(grid)
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.grid.iter().any(|&v| v)
    }

    pub fn points(&self) -> Vec<(usize, usize)> {
        self.grid
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|(p, _)| p)
            .collect()
    }
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.grid.dim() != b.grid.dim() {
        return Err(Error::Shape(format!(
            "mask shapes {:?} vs {:?}",
            a.grid.dim(),
            b.grid.dim()
        )));
    }
    Ok(())
}

fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.grid.iter().zip(b.grid.iter()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    (inter, na, nb)
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, na, nb) = overlap_counts(pred, gt);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (inter, na, nb) = overlap_counts(pred, gt);
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Symmetric Hausdorff distance in pixels between the foreground sets.
/// `None` when either mask is empty.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let to_gt = squared_distance_transform(gt.grid.view());
    let to_pred = squared_distance_transform(pred.grid.view());
    let directed = |from: &BinaryMask, field: &Array2<f64>| {
        from.grid
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|(p, _)| field[p])
            .fold(0.0f64, f64::max)
    };
    let h = directed(pred, &to_gt).max(directed(gt, &to_pred));
    Ok(Some(h.sqrt()))
}

/// Exact squared Euclidean distance to the nearest `true` cell, via two
/// passes of the lower-envelope-of-parabolas transform. Cells with no
/// foreground anywhere get `+inf`.
pub fn squared_distance_transform(mask: ArrayView2<bool>) -> Array2<f64> {
    let mut field = mask.mapv(|v| if v { 0.0 } else { f64::INFINITY });
    let mut buf = Vec::new();
    for axis in [Axis(1), Axis(0)] {
        for mut lane in field.axis_iter_mut(axis) {
            buf.clear();
            buf.extend(lane.iter().copied());
            let out = edt_1d(&buf);
            lane.iter_mut().zip(out).for_each(|(c, v)| *c = v);
        }
    }
    field
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    // parabola apexes and the left boundary of each one's region
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        let qf = q as f64;
        let mut s = f64::NEG_INFINITY;
        while let Some(&top) = v.last() {
            let tf = top as f64;
            s = ((f[q] + qf * qf) - (f[top] + tf * tf)) / (2.0 * qf - 2.0 * tf);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        return vec![f64::INFINITY; n];
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    (0..n)
        .map(|q| {
            let qf = q as f64;
            while z[k + 1] < qf {
                k += 1;
            }
            let diff = qf - v[k] as f64;
            diff * diff + f[v[k]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub iou: f64,
    /// Mean over images where both masks are non-empty.
    pub hd: Option<f64>,
    /// Images excluded from the HD mean because a mask was empty.
    pub hd_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub dice: f64,
    pub iou: f64,
    pub hd: Option<f64>,
}

impl MetricReport {
    pub fn from_classes(per_class: Vec<ClassMetrics>) -> Self {
        let n = per_class.len().max(1) as f64;
        let dice = per_class.iter().map(|c| c.dice).sum::<f64>() / n;
        let iou = per_class.iter().map(|c| c.iou).sum::<f64>() / n;
        let hds: Vec<f64> = per_class.iter().filter_map(|c| c.hd).collect();
        let hd = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
        Self {
            per_class,
            dice,
            iou,
            hd,
        }
    }
}

/// Per-class metrics averaged over images, then the unweighted class mean.
/// Masks are `H × W × C` stacks.
pub fn evaluate_stacks<'a>(
    pairs: impl IntoIterator<Item = (ArrayView3<'a, bool>, ArrayView3<'a, u8>)>,
) -> Result<MetricReport> {
    let mut sums: Vec<(f64, f64, f64, usize, usize)> = Vec::new();
    let mut images = 0usize;
    for (pred, gt) in pairs {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs label {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let classes = pred.dim().2;
        if sums.is_empty() {
            sums = vec![(0.0, 0.0, 0.0, 0, 0); classes];
        } else if sums.len() != classes {
            return Err(Error::Shape("class count changes between images".into()));
        }
        for (c, acc) in sums.iter_mut().enumerate() {
            let p = BinaryMask::new(pred.index_axis(Axis(2), c).to_owned())?;
            let g = BinaryMask::new(gt.index_axis(Axis(2), c).mapv(|v| v > 0))?;
            acc.0 += dice(&p, &g)?;
            acc.1 += iou(&p, &g)?;
            match hausdorff(&p, &g)? {
                Some(h) => {
                    acc.2 += h;
                    acc.3 += 1;
                }
                None => acc.4 += 1,
            }
        }
        images += 1;
    }
    if images == 0 {
        return Err(Error::Empty("no images to evaluate".into()));
    }
    let n = images as f64;
    let per_class = sums
        .into_iter()
        .map(|(d, i, h, hn, undefined)| {
            if undefined > 0 {
                log::debug!("hausdorff undefined on {undefined} of {images} images");
            }
            ClassMetrics {
                dice: d / n,
                iou: i / n,
                hd: (hn > 0).then(|| h / hn as f64),
                hd_undefined: undefined,
            }
        })
        .collect();
    Ok(MetricReport::from_classes(per_class))
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn single_run(&self) -> bool {
        self.n == 1
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("no values to aggregate".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dice: Summary,
    pub iou: Summary,
    pub hd: Option<Summary>,
    /// Runs whose HD was undefined and therefore left out.
    pub hd_excluded: usize,
}

/// Mean ± std across seeds of the class-mean metrics.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to aggregate".into()));
    }
    let dice: Vec<f64> = reports.iter().map(|r| r.dice).collect();
    let iou: Vec<f64> = reports.iter().map(|r| r.iou).collect();
    let hd: Vec<f64> = reports.iter().filter_map(|r| r.hd).collect();
    Ok(RunSummary {
        dice: summarize(&dice)?,
        iou: summarize(&iou)?,
        hd: summarize(&hd).ok(),
        hd_excluded: reports.len() - hd.len(),
    })
}
