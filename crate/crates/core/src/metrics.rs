//! Overlap metrics and the 95th-percentile Hausdorff distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Empty union counts as a perfect score.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn acc(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() || pred.rank() != 2 {
        return Err(Error::contract(format!(
            "masks must be equal 2D planes, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    for (name, m) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(v) = m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("{name} mask value {v} is not binary")));
        }
    }
    Ok((pred.shape()[0], pred.shape()[1]))
}

pub fn confusion(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Foreground pixels with a background 4-neighbour or on the image edge.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if edge
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1]
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line,
/// with sample spacing `s`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let s2 = s * s;
    let meet = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    let mut v = vec![sites[0]];
    let mut z = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &q in &sites[1..] {
        let mut x = meet(q, *v.last().unwrap());
        while x <= z[v.len() - 1] {
            v.pop();
            z.pop();
            x = meet(q, *v.last().unwrap());
        }
        *z.last_mut().unwrap() = x;
        v.push(q);
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_distance_map(seeds: &[(usize, usize)], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, spacing.0, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], spacing.1, &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Linear interpolation between order statistics; `q` in `[0, 1]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Image diagonal, used when exactly one mask is empty.
pub fn diagonal(h: usize, w: usize, spacing: (f64, f64)) -> f64 {
    (h as f64 * spacing.0).hypot(w as f64 * spacing.1)
}

/// Both directed boundary distance sets, pooled.
fn surface_distances(pred: &[bool], gt: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let to_gt = squared_distance_map(&bg, h, w, spacing);
    let to_pred = squared_distance_map(&bp, h, w, spacing);
    bp.iter()
        .map(|&(y, x)| to_gt[y * w + x].sqrt())
        .chain(bg.iter().map(|&(y, x)| to_pred[y * w + x].sqrt()))
        .collect()
}

fn as_bools(m: &Tensor<f32>) -> Vec<bool> {
    m.data().iter().map(|&v| v == 1.0).collect()
}

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries.
/// Both empty gives 0 and exactly one empty gives the image diagonal.
pub fn hd95(pred: &Tensor<f32>, gt: &Tensor<f32>, spacing: (f64, f64)) -> Result<f64> {
    let (h, w) = check_pair(pred, gt)?;
    let (p, g) = (as_bools(pred), as_bools(gt));
    match (p.iter().any(|&v| v), g.iter().any(|&v| v)) {
        (false, false) => Ok(0.0),
        (true, false) | (false, true) => Ok(diagonal(h, w, spacing)),
        (true, true) => Ok(percentile(&mut surface_distances(&p, &g, h, w, spacing), 0.95)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_image: Vec<ImageMetrics>,
    pub mean: MeanMetrics,
    pub count: usize,
}

pub fn image_metrics(id: &str, pred: &Tensor<f32>, gt: &Tensor<f32>, spacing: (f64, f64)) -> Result<ImageMetrics> {
    let c = confusion(pred, gt)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        iou: c.iou(),
        f1: c.f1(),
        acc: c.acc(),
        hd95: hd95(pred, gt, spacing)?,
    })
}

/// Per-image metrics sorted by id, plus their means.
pub fn evaluate_dataset(
    ids: &[String],
    preds: &[Tensor<f32>],
    gts: &[Tensor<f32>],
    spacing: (f64, f64),
) -> Result<Report> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} ids, {} predictions and {} ground truths",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let mut rows: Vec<ImageMetrics> = (0..ids.len())
        .into_par_iter()
        .map(|i| image_metrics(&ids[i], &preds[i], &gts[i], spacing))
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(Report {
        mean: MeanMetrics {
            iou: mean(|r| r.iou),
            f1: mean(|r| r.f1),
            acc: mean(|r| r.acc),
            hd95: mean(|r| r.hd95),
        },
        count: rows.len(),
        per_image: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor<f32> {
        let mut d = vec![0.0; h * w];
        for &(y, x) in on {
            d[y * w + x] = 1.0;
        }
        Tensor::new(vec![h, w], d).unwrap()
    }

    #[test]
    fn two_by_two_counts() {
        let p = mask(2, 2, &[(0, 0), (0, 1)]);
        let g = mask(2, 2, &[(0, 1), (1, 1)]);
        let c = confusion(&p, &g).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!(c.iou(), 1.0 / 3.0);
        assert_eq!(c.f1(), 0.5);
        assert_eq!(c.acc(), 0.5);
        let all = mask(2, 2, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(confusion(&all, &mask(2, 2, &[])).unwrap().fp, 4);
    }

    #[test]
    fn empty_conventions() {
        let e = mask(4, 4, &[]);
        let c = confusion(&e, &e).unwrap();
        assert_eq!((c.iou(), c.f1(), c.acc()), (1.0, 1.0, 1.0));
        assert_eq!(hd95(&e, &e, (1.0, 1.0)).unwrap(), 0.0);
        let one = mask(4, 4, &[(1, 1)]);
        assert_eq!(hd95(&one, &e, (1.0, 1.0)).unwrap(), 32f64.sqrt());
        assert_eq!(hd95(&e, &one, (2.0, 1.0)).unwrap(), 80f64.sqrt());
    }

    #[test]
    fn three_four_five() {
        let p = mask(8, 8, &[(0, 0)]);
        let g = mask(8, 8, &[(3, 4)]);
        assert_eq!(hd95(&p, &g, (1.0, 1.0)).unwrap(), 5.0);
    }

    #[test]
    fn anisotropic_spacing_scales_axes() {
        let p = mask(8, 8, &[(0, 0)]);
        let g = mask(8, 8, &[(3, 4)]);
        let d = hd95(&p, &g, (2.0, 0.5)).unwrap();
        assert!((d - (36.0f64 + 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let mut p = mask(2, 2, &[]);
        p.data_mut()[0] = 0.5;
        assert!(matches!(confusion(&p, &mask(2, 2, &[])), Err(Error::Contract(_))));
        assert!(confusion(&mask(2, 2, &[]), &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 0.0];
        assert_eq!(percentile(&mut v, 0.5), 2.0);
        assert!((percentile(&mut v, 0.95) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn filled_square_boundary_is_its_ring() {
        let on: Vec<_> = (1..5).flat_map(|y| (1..5).map(move |x| (y, x))).collect();
        let m = mask(6, 6, &on);
        let b = boundary(&as_bools(&m), 6, 6);
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn report_is_sorted_and_averaged() {
        let m = mask(4, 4, &[(1, 1), (1, 2)]);
        let ids = vec!["b".to_string(), "a".to_string()];
        let r = evaluate_dataset(&ids, &[m.clone(), m.clone()], &[m.clone(), m], (1.0, 1.0)).unwrap();
        assert_eq!(r.count, 2);
        assert_eq!(r.per_image[0].id, "a");
        assert_eq!(r.mean, MeanMetrics { iou: 1.0, f1: 1.0, acc: 1.0, hd95: 0.0 });
        let json = serde_json::to_value(&r).unwrap();
        for key in ["iou", "f1", "acc", "hd95"] {
            assert!(json["mean"].get(key).is_some());
        }
        assert!(evaluate_dataset(&ids, &[], &[], (1.0, 1.0)).is_err());
    }
}
