//! Overlap and surface-distance metrics and the combined challenge score.
//!
//! Distances are in pixels. The score normalizes HD and ASD by 100 px.

use serde::Serialize;

use crate::data::{BinaryMask, LabelMask};
use crate::error::{Error, GeometryError, Result};
use crate::geometry::{aop_from_labels, AopConvention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_binary(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        same_size(pred.width, pred.height, gt.width, gt.height)?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// `2TP / (2TP + FP + FN)`, 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }

    /// `TP / (TP + FP + FN)`, 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

fn same_size(w1: usize, h1: usize, w2: usize, h2: usize) -> Result<()> {
    if (w1, h1) != (w2, h2) {
        return Err(Error::Shape(format!("prediction {w1}x{h1} vs ground truth {w2}x{h2}")));
    }
    Ok(())
}

pub fn confusion_counts(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<ConfusionCounts> {
    ConfusionCounts::from_binary(&pred.select(&[class]), &gt.select(&[class]))
}

pub fn dice(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    Ok(confusion_counts(pred, gt, class)?.dice())
}

pub fn iou(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    Ok(confusion_counts(pred, gt, class)?.iou())
}

/// Mean IoU over classes 0, 1 and 2.
pub fn mean_iou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    let mut s = 0.0;
    for c in 0..3 {
        s += iou(pred, gt, c)?;
    }
    Ok(s / 3.0)
}

pub fn pixel_accuracy(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    same_size(pred.width, pred.height, gt.width, gt.height)?;
    let eq = pred.data.iter().zip(&gt.data).filter(|(a, b)| a == b).count();
    Ok(eq as f64 / pred.data.len() as f64)
}

/// Foreground pixels with a background 4-neighbor or lying on the image
/// edge.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinaryMask::empty(w, h);
    for (x, y) in mask.pixels() {
        let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
        if edge
            || !mask.get(x - 1, y)
            || !mask.get(x + 1, y)
            || !mask.get(x, y - 1)
            || !mask.get(x, y + 1)
        {
            out.set(x, y, true);
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas), in place over `f`.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    // skip leading infinite sites
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `sites`. All entries are infinite when `sites` is empty.
pub fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    let (w, h) = (sites.width, sites.height);
    let mut d: Vec<f64> = sites
        .data
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let m = w.max(h);
    let (mut v, mut z, mut out) = (vec![0usize; m], vec![0f64; m + 1], vec![0f64; m]);
    let mut col = vec![0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        edt_1d(&mut col, &mut v, &mut z, &mut out[..h]);
        for y in 0..h {
            d[y * w + x] = col[y];
        }
    }
    for y in 0..h {
        edt_1d(&mut d[y * w..(y + 1) * w], &mut v, &mut z, &mut out[..w]);
    }
    d
}

/// Boundary-to-boundary distances of each boundary pixel of one mask to
/// the boundary of the other.
struct SurfaceDistances {
    a_to_b: Vec<f64>,
    b_to_a: Vec<f64>,
}

fn surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<SurfaceDistances> {
    same_size(a.width, a.height, b.width, b.height)?;
    if a.is_empty() {
        return Err(GeometryError::UndefinedDistance("first").into());
    }
    if b.is_empty() {
        return Err(GeometryError::UndefinedDistance("second").into());
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (da, db) = (squared_distance_transform(&ba), squared_distance_transform(&bb));
    let w = a.width;
    let collect = |from: &BinaryMask, dist: &[f64]| -> Vec<f64> {
        from.pixels().map(|(x, y)| dist[y * w + x].sqrt()).collect()
    };
    Ok(SurfaceDistances {
        a_to_b: collect(&ba, &db),
        b_to_a: collect(&bb, &da),
    })
}

/// Symmetric Hausdorff distance between the boundaries, in pixels.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let s = surface_distances(a, b)?;
    Ok(s.a_to_b.iter().chain(&s.b_to_a).fold(0.0, |m, &d| m.max(d)))
}

/// Average symmetric surface distance, in pixels.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let s = surface_distances(a, b)?;
    let total: f64 = s.a_to_b.iter().chain(&s.b_to_a).sum();
    Ok(total / (s.a_to_b.len() + s.b_to_a.len()) as f64)
}

/// A value per evaluated structure: PS (class 1), FH (class 2) and ALL
/// (union of classes 1 and 2).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PerStructure {
    pub ps: f64,
    pub fh: f64,
    pub all: f64,
}

impl PerStructure {
    pub fn mean(&self) -> f64 {
        (self.ps + self.fh + self.all) / 3.0
    }

    fn map(f: impl Fn(&[u8]) -> Result<f64>) -> Result<Self> {
        Ok(PerStructure {
            ps: f(&[1])?,
            fh: f(&[2])?,
            all: f(&[1, 2])?,
        })
    }
}

pub const STRUCTURES: [(&str, &[u8]); 3] = [("ps", &[1]), ("fh", &[2]), ("all", &[1, 2])];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ScoreInputs {
    pub dice: PerStructure,
    pub hd: PerStructure,
    pub asd: PerStructure,
    pub delta_aop: f64,
}

/// `0.25·mean(DSC) + 0.25·(0.5·mean(1 − HD/100) + 0.5·mean(1 − ASD/100))
/// + 0.5·(1 − ΔAoP/180)`.
pub fn final_score(s: &ScoreInputs) -> f64 {
    let hd_term = 1.0 - s.hd.mean() / 100.0;
    let asd_term = 1.0 - s.asd.mean() / 100.0;
    0.25 * s.dice.mean() + 0.25 * (0.5 * hd_term + 0.5 * asd_term) + 0.5 * (1.0 - s.delta_aop / 180.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageReport {
    pub name: String,
    pub dice: PerStructure,
    pub hd: Option<PerStructure>,
    pub asd: Option<PerStructure>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub aop_pred: Option<f64>,
    pub aop_gt: Option<f64>,
    pub delta_aop: Option<f64>,
    pub score: Option<f64>,
    pub errors: Vec<String>,
}

impl ImageReport {
    pub fn score_inputs(&self) -> Option<ScoreInputs> {
        Some(ScoreInputs {
            dice: self.dice,
            hd: self.hd?,
            asd: self.asd?,
            delta_aop: self.delta_aop?,
        })
    }
}

/// All per-image metrics for one prediction / ground-truth pair.
pub fn evaluate_pair(name: &str, pred: &LabelMask, gt: &LabelMask, convention: AopConvention) -> Result<ImageReport> {
    same_size(pred.width, pred.height, gt.width, gt.height)?;
    let mut errors = Vec::new();
    let dice = PerStructure::map(|c| {
        Ok(ConfusionCounts::from_binary(&pred.select(c), &gt.select(c))?.dice())
    })?;
    let mut distance = |f: fn(&BinaryMask, &BinaryMask) -> Result<f64>, what: &str| {
        let r = PerStructure::map(|c| f(&pred.select(c), &gt.select(c)));
        r.map_err(|e| errors.push(format!("{what}: {e}"))).ok()
    };
    let hd = distance(hausdorff, "hd");
    let asd = distance(asd, "asd");
    let mut angle = |m: &LabelMask, which: &str| {
        aop_from_labels(m, convention)
            .map(|r| r.angle_deg)
            .map_err(|e| errors.push(format!("aop ({which}): {e}")))
            .ok()
    };
    let aop_pred = angle(pred, "prediction");
    let aop_gt = angle(gt, "ground truth");
    let delta_aop = aop_pred.zip(aop_gt).map(|(a, b)| (a - b).abs());
    let mut report = ImageReport {
        name: name.to_string(),
        dice,
        hd,
        asd,
        mean_iou: mean_iou(pred, gt)?,
        pixel_accuracy: pixel_accuracy(pred, gt)?,
        aop_pred,
        aop_gt,
        delta_aop,
        score: None,
        errors,
    };
    report.score = report.score_inputs().map(|s| final_score(&s));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub images: usize,
    /// Images with every score input defined.
    pub complete: usize,
    pub distance_failures: usize,
    pub aop_failures: usize,
    pub mean_dice: PerStructure,
    pub mean_hd: Option<PerStructure>,
    pub mean_asd: Option<PerStructure>,
    pub mean_iou: f64,
    pub mean_pixel_accuracy: f64,
    pub mean_delta_aop: Option<f64>,
    /// Score of the metric means over complete images.
    pub score_of_means: Option<f64>,
    /// Mean of per-image scores over complete images.
    pub mean_of_scores: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub units: &'static str,
    pub images: Vec<ImageReport>,
    pub aggregate: Aggregate,
}

fn mean_ps(items: &[PerStructure]) -> Option<PerStructure> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    Some(PerStructure {
        ps: items.iter().map(|p| p.ps).sum::<f64>() / n,
        fh: items.iter().map(|p| p.fh).sum::<f64>() / n,
        all: items.iter().map(|p| p.all).sum::<f64>() / n,
    })
}

fn mean(items: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = items.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregates per-image reports; the result does not depend on input order.
pub fn aggregate(mut images: Vec<ImageReport>) -> Report {
    images.sort_by(|a, b| a.name.cmp(&b.name));
    let dice: Vec<_> = images.iter().map(|r| r.dice).collect();
    let hd: Vec<_> = images.iter().filter_map(|r| r.hd).collect();
    let asd: Vec<_> = images.iter().filter_map(|r| r.asd).collect();
    let complete: Vec<ScoreInputs> = images.iter().filter_map(|r| r.score_inputs()).collect();
    let score_of_means = mean_ps(&complete.iter().map(|s| s.dice).collect::<Vec<_>>()).map(|d| {
        let c = |f: fn(&ScoreInputs) -> PerStructure| {
            mean_ps(&complete.iter().map(f).collect::<Vec<_>>()).unwrap()
        };
        final_score(&ScoreInputs {
            dice: d,
            hd: c(|s| s.hd),
            asd: c(|s| s.asd),
            delta_aop: mean(complete.iter().map(|s| s.delta_aop)).unwrap(),
        })
    });
    let aggregate = Aggregate {
        images: images.len(),
        complete: complete.len(),
        distance_failures: images.iter().filter(|r| r.hd.is_none() || r.asd.is_none()).count(),
        aop_failures: images.iter().filter(|r| r.delta_aop.is_none()).count(),
        mean_dice: mean_ps(&dice).unwrap_or_default(),
        mean_hd: mean_ps(&hd),
        mean_asd: mean_ps(&asd),
        mean_iou: mean(images.iter().map(|r| r.mean_iou)).unwrap_or(0.0),
        mean_pixel_accuracy: mean(images.iter().map(|r| r.pixel_accuracy)).unwrap_or(0.0),
        mean_delta_aop: mean(images.iter().filter_map(|r| r.delta_aop)),
        score_of_means,
        mean_of_scores: mean(complete.iter().map(final_score)),
    };
    Report {
        units: "distances in pixels; HD and ASD normalized by 100 px in the score",
        images,
        aggregate,
    }
}

impl Report {
    /// One CSV row per image followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from(
            "name,dice_ps,dice_fh,dice_all,hd_ps,hd_fh,hd_all,asd_ps,asd_fh,asd_all,mean_iou,pixel_accuracy,aop_pred,aop_gt,delta_aop,score\n",
        );
        let mut row = |name: &str, dice: PerStructure, hd: Option<PerStructure>, asd: Option<PerStructure>, miou: f64, pa: f64, ap: Option<f64>, ag: Option<f64>, da: Option<f64>, s: Option<f64>| {
            out.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{},{},{},{},{},{},{miou:.6},{pa:.6},{},{},{},{}\n",
                dice.ps,
                dice.fh,
                dice.all,
                opt(hd.map(|v| v.ps)),
                opt(hd.map(|v| v.fh)),
                opt(hd.map(|v| v.all)),
                opt(asd.map(|v| v.ps)),
                opt(asd.map(|v| v.fh)),
                opt(asd.map(|v| v.all)),
                opt(ap),
                opt(ag),
                opt(da),
                opt(s)
            ));
        };
        for r in &self.images {
            row(&r.name, r.dice, r.hd, r.asd, r.mean_iou, r.pixel_accuracy, r.aop_pred, r.aop_gt, r.delta_aop, r.score);
        }
        let a = &self.aggregate;
        row("MEAN", a.mean_dice, a.mean_hd, a.mean_asd, a.mean_iou, a.mean_pixel_accuracy, None, None, a.mean_delta_aop, a.mean_of_scores);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, rows: &[u8]) -> LabelMask {
        LabelMask::new(w, rows.len() / w, rows.to_vec()).unwrap()
    }

    fn bin(w: usize, h: usize, px: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(w, h);
        for &(x, y) in px {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn confusion_extremes() {
        let gt = LabelMask::zeros(4, 3);
        let pred = mask(4, &[1; 12]);
        let c = confusion_counts(&pred, &gt, 1).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 12, tn: 0, fn_: 0 });
        let c = confusion_counts(&gt, &gt, 0).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
    }

    #[test]
    fn dice_iou_examples() {
        let a = mask(4, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(4, &[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert!((iou(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 2).unwrap(), 1.0);
        let c = mask(4, &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(iou(&a, &c, 1).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let a = mask(2, &[0, 1, 2, 1]);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &mask(2, &[1, 0, 0, 0])).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&a, &mask(2, &[0, 1, 2, 0])).unwrap(), 0.75);
    }

    #[test]
    fn distance_examples() {
        let a = bin(8, 8, &[(0, 0)]);
        let b = bin(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        let l1 = bin(8, 8, &(0..8).map(|y| (1, y)).collect::<Vec<_>>());
        let l2 = bin(8, 8, &(0..8).map(|y| (4, y)).collect::<Vec<_>>());
        assert_eq!(asd(&l1, &l2).unwrap(), 3.0);
        assert!(matches!(
            hausdorff(&a, &BinaryMask::empty(8, 8)),
            Err(Error::Geometry(GeometryError::UndefinedDistance(_)))
        ));
    }

    #[test]
    fn boundary_excludes_interior() {
        let full = BinaryMask::new(5, 5, vec![true; 25]);
        let b = boundary(&full);
        assert_eq!(b.count(), 16);
        assert!(!b.get(2, 2));
    }

    #[test]
    fn perfect_score() {
        let s = ScoreInputs {
            dice: PerStructure { ps: 1.0, fh: 1.0, all: 1.0 },
            ..Default::default()
        };
        assert_eq!(final_score(&s), 1.0);
    }

    #[test]
    fn identical_pair_scores_one() {
        let mut data = vec![0u8; 64 * 64];
        for y in 30..34 {
            for x in 5..25 {
                data[y * 64 + x] = 1;
            }
        }
        for y in 20..50 {
            for x in 35..60 {
                if (x as f64 - 47.0).powi(2) + (y as f64 - 35.0).powi(2) < 100.0 {
                    data[y * 64 + x] = 2;
                }
            }
        }
        let m = LabelMask::new(64, 64, data).unwrap();
        let r = evaluate_pair("x", &m, &m, AopConvention::Standard).unwrap();
        assert_eq!(r.score, Some(1.0), "{:?}", r.errors);
        let rep = aggregate(vec![r]);
        assert_eq!(rep.aggregate.score_of_means, Some(1.0));
        assert!(rep.to_csv().lines().count() == 3);
    }
}
