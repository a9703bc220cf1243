//! Angle of progression from a PS / FH label mask.
//!
//! Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`; all geometry is
//! carried out in f64 in image coordinates (y pointing down).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, LabelMask};
use crate::error::GeometryError;

/// Minimum ratio of the principal second moments for the PS axis to count
/// as well defined.
pub const MIN_AXIS_RATIO: f64 = 1.2;
/// Cross-product tolerance of the tangent certificate, in px².
pub const TANGENT_TOLERANCE: f64 = 1e-6;

pub type GeoResult<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn center_of(px: (usize, usize)) -> Self {
        Point::new(px.0 as f64 + 0.5, px.1 as f64 + 0.5)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

fn cross3(o: Point, a: Point, b: Point) -> f64 {
    a.sub(o).cross(b.sub(o))
}

/// Keeps the largest 8-connected component. Among equally large
/// components the one reached first in scan order wins.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    BinaryMask::new(w, h, label.iter().map(|&l| l != 0 && l == best.1).collect())
}

/// Mean of pixel centers.
pub fn centroid(mask: &BinaryMask) -> Option<Point> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in mask.pixels() {
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        n += 1;
    }
    (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64))
}

/// Unoriented principal axis of a pixel set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub centroid: Point,
    /// Unit eigenvector of the larger second moment.
    pub direction: Point,
    /// Ratio of the larger to the smaller second moment (may be infinite).
    pub ratio: f64,
    /// Axis points at the minimum and maximum projection of the pixels.
    pub ends: [Point; 2],
}

/// Second-moment axis of the mask's pixel centers. The two ends are the
/// projections onto the axis line of the pixels with extreme projection.
pub fn principal_axis(mask: &BinaryMask) -> GeoResult<Axis> {
    let pts: Vec<Point> = mask.pixels().map(Point::center_of).collect();
    if pts.len() < 2 {
        return Err(GeometryError::TooFewPixels(pts.len()));
    }
    let n = pts.len() as f64;
    let c = Point::new(
        pts.iter().map(|p| p.x).sum::<f64>() / n,
        pts.iter().map(|p| p.y).sum::<f64>() / n,
    );
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let d = p.sub(c);
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let (sxx, sxy, syy) = (sxx / n, sxy / n, syy / n);
    let half_tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    let ratio = if l2 > 0.0 { l1 / l2 } else { f64::INFINITY };
    if !(ratio >= MIN_AXIS_RATIO) {
        return Err(GeometryError::AxisIllDefined { ratio });
    }
    // eigenvector of [[sxx, sxy], [sxy, syy]] for l1
    let v = if sxy.abs() > 1e-12 * (sxx.abs() + syy.abs()) {
        Point::new(l1 - syy, sxy)
    } else if sxx >= syy {
        Point::new(1.0, 0.0)
    } else {
        Point::new(0.0, 1.0)
    };
    let dir = Point::new(v.x / v.norm(), v.y / v.norm());
    let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        let t = p.sub(c).dot(dir);
        tmin = tmin.min(t);
        tmax = tmax.max(t);
    }
    let at = |t: f64| Point::new(c.x + t * dir.x, c.y + t * dir.y);
    Ok(Axis {
        centroid: c,
        direction: dir,
        ratio,
        ends: [at(tmin), at(tmax)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsAxis {
    pub superior: Point,
    pub inferior: Point,
    /// Unit vector from superior to inferior.
    pub direction: Point,
}

/// The inferior end is the axis end nearer the FH centroid.
pub fn orient_axis(axis: &Axis, fh: &BinaryMask) -> GeoResult<PsAxis> {
    let c = centroid(fh).ok_or(GeometryError::EmptyMask("fetal head"))?;
    let (d0, d1) = (axis.ends[0].dist(c), axis.ends[1].dist(c));
    if (d0 - d1).abs() <= 1e-9 {
        return Err(GeometryError::AmbiguousOrientation);
    }
    let (superior, inferior) = if d0 < d1 {
        (axis.ends[1], axis.ends[0])
    } else {
        (axis.ends[0], axis.ends[1])
    };
    let d = inferior.sub(superior);
    let len = d.norm();
    let direction = if len > 0.0 {
        Point::new(d.x / len, d.y / len)
    } else {
        axis.direction
    };
    Ok(PsAxis {
        superior,
        inferior,
        direction,
    })
}

/// Convex hull by monotone chain: positive orientation (`cross > 0` for
/// consecutive turns), collinear points dropped, duplicates removed.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross3(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() == 2 && hull[0] == hull[1] {
        hull.pop();
    }
    hull
}

/// Hull of the mask's pixel centers. Only the first and last pixel of
/// each row can be hull vertices, so only those are considered.
pub fn mask_hull(mask: &BinaryMask) -> Vec<Point> {
    let mut pts = Vec::new();
    for y in 0..mask.height {
        let row = &mask.data[y * mask.width..(y + 1) * mask.width];
        if let Some(first) = row.iter().position(|&v| v) {
            let last = row.iter().rposition(|&v| v).unwrap();
            pts.push(Point::center_of((first, y)));
            if last != first {
                pts.push(Point::center_of((last, y)));
            }
        }
    }
    convex_hull(&pts)
}

/// True when `p` lies inside or on the boundary of the hull.
pub fn hull_contains(hull: &[Point], p: Point) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0].dist(p) <= 1e-9,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross3(a, b, p).abs() <= 1e-9 && p.sub(a).dot(p.sub(b)) <= 0.0
        }
        n => (0..n).all(|i| cross3(hull[i], hull[(i + 1) % n], p) >= -1e-9),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AopConvention {
    /// Angle between the superior→inferior PS direction and the tangent.
    #[default]
    Standard,
    /// `180° − standard`.
    Flip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AopResult {
    pub angle_deg: f64,
    pub tangent_point: Point,
    pub ps_axis: PsAxis,
}

/// Angle of progression from separate PS and FH masks. Both masks are
/// reduced to their largest component first.
pub fn aop(ps: &BinaryMask, fh: &BinaryMask, convention: AopConvention) -> GeoResult<AopResult> {
    let ps = largest_component(ps);
    let fh = largest_component(fh);
    if ps.is_empty() {
        return Err(GeometryError::EmptyMask("pubic symphysis"));
    }
    if fh.is_empty() {
        return Err(GeometryError::EmptyMask("fetal head"));
    }
    let axis = orient_axis(&principal_axis(&ps)?, &fh)?;
    let hull = mask_hull(&fh);
    let e = axis.inferior;
    if hull_contains(&hull, e) {
        return Err(GeometryError::OverlapAtApex);
    }
    let mut best = (f64::NEG_INFINITY, hull[0]);
    for &v in &hull {
        let d = v.sub(e);
        let cos = (d.dot(axis.direction) / d.norm()).clamp(-1.0, 1.0);
        let angle = cos.acos();
        if angle > best.0 {
            best = (angle, v);
        }
    }
    let (angle, t) = best;
    let line = t.sub(e);
    let (mut lo, mut hi) = (0f64, 0f64);
    for &v in &hull {
        let c = line.cross(v.sub(e));
        lo = lo.min(c);
        hi = hi.max(c);
    }
    if lo < -TANGENT_TOLERANCE && hi > TANGENT_TOLERANCE {
        return Err(GeometryError::TangentCertificate { cross: lo.abs().min(hi) });
    }
    let deg = angle.to_degrees();
    Ok(AopResult {
        angle_deg: match convention {
            AopConvention::Standard => deg,
            AopConvention::Flip => 180.0 - deg,
        },
        tangent_point: t,
        ps_axis: axis,
    })
}

/// AoP of a label mask: class 1 is PS, class 2 is FH.
pub fn aop_from_labels(mask: &LabelMask, convention: AopConvention) -> GeoResult<AopResult> {
    aop(&mask.select(&[1]), &mask.select(&[2]), convention)
}

pub fn delta_aop(a: &AopResult, b: &AopResult) -> f64 {
    (a.angle_deg - b.angle_deg).abs()
}
