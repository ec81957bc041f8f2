//! Overlap and boundary metrics: Dice, IoU and HD95.
//!
//! Conventions: Dice and IoU are 1 when both masks lack the class; HD95 is
//! undefined when either side lacks it. Boundary pixels are foreground
//! pixels with a 4-neighbour that is background or outside the image.
//! The 95th percentile interpolates linearly between order statistics of
//! the pooled pred-to-truth and truth-to-pred nearest distances.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMask;

fn check_shapes(pred: &LabelMask, truth: &LabelMask) -> Result<()> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    Ok(())
}

fn overlap_counts(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut t = 0;
    for (a, b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (*a == class_id, *b == class_id);
        p += usize::from(ia);
        t += usize::from(ib);
        inter += usize::from(ia && ib);
    }
    (inter, p, t)
}

pub fn dice(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (i, p, t) = overlap_counts(pred, truth, class_id);
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + t) as f64)
}

pub fn iou(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (i, p, t) = overlap_counts(pred, truth, class_id);
    let union = p + t - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

/// Boundary indicator of `class_id` under 4-connectivity.
pub fn boundary(mask: &LabelMask, class_id: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) == class_id
    };
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != class_id {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            out[y * w + x] = !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1));
        }
    }
    out
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of
/// parabolas) of the sampled function `f`.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dx = q as f64 - p as f64;
        *dq = dx * dx + f[p];
    }
    d
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `seeds`.
pub fn squared_distance_transform(seeds: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|s| if *s { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        for (y, v) in edt_1d(&col).into_iter().enumerate() {
            grid[y * width + x] = v;
        }
    }
    for y in 0..height {
        let row = edt_1d(&grid[y * width..(y + 1) * width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&row);
    }
    grid
}

/// Linear interpolation between order statistics of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pooled directed nearest boundary distances in both directions, sorted.
pub fn boundary_distances(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<Option<Vec<f64>>> {
    check_shapes(pred, truth)?;
    let (h, w) = (pred.height(), pred.width());
    let bp = boundary(pred, class_id);
    let bt = boundary(truth, class_id);
    if !bp.iter().any(|b| *b) || !bt.iter().any(|b| *b) {
        return Ok(None);
    }
    let dt_truth = squared_distance_transform(&bt, h, w);
    let dt_pred = squared_distance_transform(&bp, h, w);
    let mut d: Vec<f64> = bp
        .iter()
        .zip(&dt_truth)
        .filter(|(b, _)| **b)
        .map(|(_, s)| s.sqrt())
        .chain(bt.iter().zip(&dt_pred).filter(|(b, _)| **b).map(|(_, s)| s.sqrt()))
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(Some(d))
}

/// 95th percentile symmetric boundary distance in pixels, or `None` when
/// either mask lacks the class.
pub fn hd95(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, truth, class_id)?.map(|d| percentile_sorted(&d, 95.0)))
}

/// Classic (100th percentile) Hausdorff distance on the same boundaries.
pub fn hausdorff(pred: &LabelMask, truth: &LabelMask, class_id: u8) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, truth, class_id)?.map(|d| *d.last().expect("non-empty")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub dice: f64,
    pub iou: f64,
    /// Mean over slices where HD95 is defined.
    pub hd95: Option<f64>,
    pub n: usize,
    pub undefined_hd95: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
    pub n: usize,
    pub undefined_hd95: usize,
}

impl MetricReport {
    fn from_classes(per_class: Vec<ClassMetrics>, n: usize) -> Self {
        let k = per_class.len() as f64;
        let defined: Vec<f64> = per_class.iter().filter_map(|c| c.hd95).collect();
        Self {
            mean_dice: per_class.iter().map(|c| c.dice).sum::<f64>() / k,
            mean_iou: per_class.iter().map(|c| c.iou).sum::<f64>() / k,
            mean_hd95: if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            },
            undefined_hd95: per_class.iter().map(|c| c.undefined_hd95).sum(),
            n,
            per_class,
        }
    }

    pub fn dice_per_class(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.dice).collect()
    }

    pub fn to_csv_string(&self, header_comment: Option<&str>) -> Result<String> {
        let mut out = Vec::new();
        if let Some(c) = header_comment {
            writeln!(out, "# {c}").expect("write to vec");
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["class", "dice", "iou", "hd95", "n", "undefined_hd95"])?;
            let row = |name: &str, dice: f64, iou: f64, hd: Option<f64>, n: usize, u: usize| {
                vec![
                    name.to_string(),
                    dice.to_string(),
                    iou.to_string(),
                    hd.map(|v| v.to_string()).unwrap_or_default(),
                    n.to_string(),
                    u.to_string(),
                ]
            };
            for c in &self.per_class {
                w.write_record(row(&c.name, c.dice, c.iou, c.hd95, c.n, c.undefined_hd95))?;
            }
            w.write_record(row("AVG", self.mean_dice, self.mean_iou, self.mean_hd95, self.n, self.undefined_hd95))?;
            w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
        }
        Ok(String::from_utf8(out).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path, header_comment: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_csv_string(header_comment)?).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::InvalidArgument(format!("bad number '{s}' in metric csv")))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::InvalidArgument(format!("bad count '{s}' in metric csv")))
        };
        let mut classes = Vec::new();
        let mut avg = None;
        for rec in r.records() {
            let rec = rec?;
            let hd = if rec[3].is_empty() { None } else { Some(parse_f(&rec[3])?) };
            let m = ClassMetrics {
                name: rec[0].to_string(),
                dice: parse_f(&rec[1])?,
                iou: parse_f(&rec[2])?,
                hd95: hd,
                n: parse_u(&rec[4])?,
                undefined_hd95: parse_u(&rec[5])?,
            };
            if m.name == "AVG" {
                avg = Some(m);
            } else {
                classes.push(m);
            }
        }
        let avg = avg.ok_or_else(|| Error::InvalidArgument("metric csv has no AVG row".into()))?;
        Ok(Self {
            per_class: classes,
            mean_dice: avg.dice,
            mean_iou: avg.iou,
            mean_hd95: avg.hd95,
            n: avg.n,
            undefined_hd95: avg.undefined_hd95,
        })
    }
}

/// Per-class means over aligned prediction/truth pairs.
pub fn evaluate(preds: &[LabelMask], truths: &[LabelMask], class_names: &[String]) -> Result<MetricReport> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut per_class = Vec::with_capacity(class_names.len());
    for (ci, name) in class_names.iter().enumerate() {
        let class_id = (ci + 1) as u8;
        let mut d = 0.0;
        let mut j = 0.0;
        let mut hd_sum = 0.0;
        let mut hd_n = 0usize;
        for (p, t) in preds.iter().zip(truths) {
            d += dice(p, t, class_id)?;
            j += iou(p, t, class_id)?;
            if let Some(h) = hd95(p, t, class_id)? {
                hd_sum += h;
                hd_n += 1;
            }
        }
        let n = preds.len();
        per_class.push(ClassMetrics {
            name: name.clone(),
            dice: d / n as f64,
            iou: j / n as f64,
            hd95: (hd_n > 0).then(|| hd_sum / hd_n as f64),
            n,
            undefined_hd95: n - hd_n,
        });
    }
    Ok(MetricReport::from_classes(per_class, preds.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> LabelMask {
        LabelMask::new(h, w, 1, (0..h * w).map(|i| u8::from(f(i / w, i % w))).collect()).unwrap()
    }

    #[test]
    fn dice_iou_basics() {
        let full = mask(8, 8, |_, _| true);
        let left = mask(8, 8, |_, x| x < 4);
        let right = mask(8, 8, |_, x| x >= 4);
        assert_eq!(dice(&full, &full, 1).unwrap(), 1.0);
        assert_eq!(dice(&left, &right, 1).unwrap(), 0.0);
        assert!((dice(&left, &full, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&left, &full, 1).unwrap(), 0.5);
        let empty = mask(8, 8, |_, _| false);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(iou(&empty, &empty, 1).unwrap(), 1.0);
        assert!(dice(&empty, &mask(8, 9, |_, _| false), 1).is_err());
    }

    #[test]
    fn hd95_single_pixels() {
        let a = mask(8, 8, |y, x| y == 0 && x == 0);
        let b = mask(8, 8, |y, x| y == 3 && x == 4);
        assert_eq!(hd95(&a, &b, 1).unwrap(), Some(5.0));
        assert_eq!(hd95(&a, &a, 1).unwrap(), Some(0.0));
        assert_eq!(hd95(&a, &mask(8, 8, |_, _| false), 1).unwrap(), None);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 95.0), 3.8);
        assert_eq!(percentile_sorted(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn evaluate_identity_and_csv_round_trip() {
        let t = mask(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
        let p = mask(8, 8, |y, x| (2..7).contains(&y) && (1..5).contains(&x));
        let names = vec!["fg".to_string()];
        let same = evaluate(&[t.clone()], &[t.clone()], &names).unwrap();
        assert_eq!(same.mean_dice, 1.0);
        assert_eq!(same.mean_hd95, Some(0.0));
        let r = evaluate(&[p, t.clone()], &[t.clone(), t], &names).unwrap();
        let text = r.to_csv_string(Some("seed=1")).unwrap();
        assert!(text.starts_with("# seed=1\nclass,dice,iou,hd95,n,undefined_hd95\n"));
        assert_eq!(MetricReport::from_csv_str(&text).unwrap(), r);
    }
}
