//! Synthetic transperineal scenes: a PS bar, an FH disk or ellipse and a
//! speckled background, with the true angle of progression.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ByteImage, LabelMask};
use crate::error::{Error, Result};
use crate::geometry::{aop_from_labels, AopConvention, Point};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub center: Point,
    pub length: f64,
    pub width: f64,
    /// Direction of the long axis from the superior to the inferior end.
    pub angle_deg: f64,
}

impl Bar {
    pub fn direction(&self) -> Point {
        let a = self.angle_deg.to_radians();
        Point::new(a.cos(), a.sin())
    }

    pub fn inferior(&self) -> Point {
        let u = self.direction();
        Point::new(self.center.x + 0.5 * self.length * u.x, self.center.y + 0.5 * self.length * u.y)
    }

    pub fn superior(&self) -> Point {
        let u = self.direction();
        Point::new(self.center.x - 0.5 * self.length * u.x, self.center.y - 0.5 * self.length * u.y)
    }

    pub fn contains(&self, p: Point) -> bool {
        let u = self.direction();
        let d = p.sub(self.center);
        d.dot(u).abs() <= 0.5 * self.length && d.cross(u).abs() <= 0.5 * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Point,
    /// Semi-axis along `angle_deg`.
    pub radius_a: f64,
    pub radius_b: f64,
    pub angle_deg: f64,
}

impl Ellipse {
    pub fn is_circle(&self) -> bool {
        self.radius_a == self.radius_b
    }

    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let d = p.sub(self.center);
        let (u, v) = (d.x * c + d.y * s, -d.x * s + d.y * c);
        (u / self.radius_a).powi(2) + (v / self.radius_b).powi(2) <= 1.0
    }

    pub fn boundary_point(&self, t: f64) -> Point {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (u, v) = (self.radius_a * t.cos(), self.radius_b * t.sin());
        Point::new(self.center.x + u * c - v * s, self.center.y + u * s + v * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub ps: Bar,
    pub fh: Ellipse,
    /// Multiplicative speckle strength.
    pub noise: f64,
    /// Gaussian blur applied after speckle; 0 disables it.
    pub blur_sigma: f64,
    /// Base intensities of background, PS and FH in `[0, 1]`.
    pub intensities: [f64; 3],
}

/// Largest angle at `apex` between `dir` and a ray to the ellipse, in
/// degrees: closed form for circles, dense boundary search otherwise.
pub fn tangent_angle(apex: Point, dir: Point, e: &Ellipse) -> f64 {
    let angle_to = |p: Point| {
        let d = p.sub(apex);
        (d.dot(dir) / d.norm()).clamp(-1.0, 1.0).acos()
    };
    if e.is_circle() {
        let d = e.center.dist(apex);
        return (angle_to(e.center) + (e.radius_a / d).asin()).to_degrees();
    }
    let n = 20_000;
    (0..n)
        .map(|i| angle_to(e.boundary_point(i as f64 * std::f64::consts::TAU / n as f64)))
        .fold(f64::NEG_INFINITY, f64::max)
        .to_degrees()
}

/// Sampled scenes whose rasterized mask measures an AoP further than this
/// from the analytic value are redrawn.
pub const MAX_RASTER_ERROR_DEG: f64 = 1.5;

impl PhantomSpec {
    pub fn true_aop(&self) -> f64 {
        tangent_angle(self.ps.inferior(), self.ps.direction(), &self.fh)
    }

    /// `|measured − analytic|` AoP on the rasterized mask, `None` when the
    /// mask cannot be measured.
    pub fn raster_fidelity(&self) -> Option<f64> {
        let mask = self.rasterize().ok()?;
        let measured = aop_from_labels(&mask, AopConvention::Standard).ok()?;
        Some((measured.angle_deg - self.true_aop()).abs())
    }

    pub fn rasterize(&self) -> Result<LabelMask> {
        let n = self.size;
        let mut data = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                let p = Point::center_of((x, y));
                let (ps, fh) = (self.ps.contains(p), self.fh.contains(p));
                if ps && fh {
                    return Err(Error::Data(format!("PS and FH overlap at pixel ({x}, {y})")));
                }
                data[y * n + x] = if ps { 1 } else if fh { 2 } else { 0 };
            }
        }
        LabelMask::new(n, n, data)
    }

    /// Checks that both structures lie inside the image and are separated,
    /// that the inferior end is the end nearer the head and lies outside it.
    pub fn validate(&self) -> Result<()> {
        let n = self.size as f64;
        let margin = 2.0;
        let inside = |p: Point, pad: f64| p.x - pad >= margin && p.y - pad >= margin && p.x + pad <= n - margin && p.y + pad <= n - margin;
        let half_w = 0.5 * self.ps.width;
        if !inside(self.ps.inferior(), half_w) || !inside(self.ps.superior(), half_w) {
            return Err(Error::Data("PS bar leaves the image".into()));
        }
        if !inside(self.fh.center, self.fh.radius_a.max(self.fh.radius_b)) {
            return Err(Error::Data("FH leaves the image".into()));
        }
        let e = self.ps.inferior();
        let r_max = self.fh.radius_a.max(self.fh.radius_b);
        if e.dist(self.fh.center) - r_max < half_w + 3.0 {
            return Err(Error::Data("FH too close to the inferior PS end".into()));
        }
        if self.ps.superior().dist(self.fh.center) < e.dist(self.fh.center) + 2.0 {
            return Err(Error::Data("superior PS end is nearer the FH".into()));
        }
        self.rasterize().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub size: usize,
    pub aop_range: (f64, f64),
    pub noise: f64,
    pub blur_sigma: f64,
    /// Probability that the head is an ellipse rather than a circle.
    pub ellipse_prob: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 256,
            aop_range: (30.0, 120.0),
            noise: 0.2,
            blur_sigma: 0.8,
            ellipse_prob: 0.5,
        }
    }
}

/// Smallest canvas that fits the absolute structure size floors.
pub const MIN_PHANTOM_SIZE: usize = 96;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.aop_range;
        if !(lo > 5.0 && lo <= hi && hi < 175.0) {
            return Err(Error::Config(format!("aop range {lo}:{hi} must satisfy 5 < lo <= hi < 175")));
        }
        if self.size < MIN_PHANTOM_SIZE {
            return Err(Error::Config(format!(
                "phantom size {} below {MIN_PHANTOM_SIZE}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.ellipse_prob) {
            return Err(Error::Config("noise and ellipse_prob must be in [0, 1]".into()));
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::Config("blur_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draws scene geometry whose true AoP falls inside the configured range.
pub fn sample_spec<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<PhantomSpec> {
    cfg.validate()?;
    let n = cfg.size as f64;
    for _ in 0..10_000 {
        // absolute floors keep small images within rasterization accuracy
        let length = (rng.random_range(0.2..0.3) * n).max(rng.random_range(36.0..44.0));
        let width = (rng.random_range(0.03..0.05) * n).max(rng.random_range(6.0..8.0));
        let angle = rng.random_range(-30.0..30.0f64);
        let target = rng.random_range(cfg.aop_range.0..=cfg.aop_range.1);
        let r = (rng.random_range(0.12..0.2) * n).max(rng.random_range(24.0..30.0));
        let d = rng.random_range(1.5 * r..0.55 * n);
        let half = (r / d).asin().to_degrees();
        let theta = target - half;
        if !(0.0..=95.0).contains(&theta) || half > target - 5.0 {
            continue;
        }
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let center_dir = (angle + side * theta).to_radians();
        let cx = rng.random_range(0.15..0.45) * n;
        let cy = rng.random_range(0.25..0.75) * n;
        let ps = Bar {
            center: Point::new(cx, cy),
            length,
            width,
            angle_deg: angle,
        };
        let e = ps.inferior();
        let (radius_a, radius_b, tilt) = if rng.random_bool(cfg.ellipse_prob) {
            (r, r * rng.random_range(0.8..0.95), rng.random_range(0.0..180.0))
        } else {
            (r, r, 0.0)
        };
        let spec = PhantomSpec {
            size: cfg.size,
            ps,
            fh: Ellipse {
                center: Point::new(e.x + d * center_dir.cos(), e.y + d * center_dir.sin()),
                radius_a,
                radius_b,
                angle_deg: tilt,
            },
            noise: cfg.noise,
            blur_sigma: cfg.blur_sigma,
            intensities: [0.2, 0.75, 0.5],
        };
        let aop = spec.true_aop();
        if aop < cfg.aop_range.0 || aop > cfg.aop_range.1 {
            continue;
        }
        if spec.validate().is_ok() && spec.raster_fidelity().is_some_and(|e| e <= MAX_RASTER_ERROR_DEG) {
            return Ok(spec);
        }
    }
    Err(Error::Config("could not place a phantom for this configuration".into()))
}

fn gaussian_blur(img: &mut [f64], n: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let clampi = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; img.len()];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[y * n + clampi(x as isize + k as isize - radius)])
                .sum();
        }
    }
    for y in 0..n {
        for x in 0..n {
            img[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(y as isize + k as isize - radius) * n + x])
                .sum();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub image: ByteImage,
    pub mask: LabelMask,
    pub true_aop: f64,
}

/// Renders the scene. `noise_rng` only drives the speckle; the mask and
/// true angle depend on `spec` alone.
pub fn gen_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, noise_rng: &mut R) -> Result<Phantom> {
    spec.validate()?;
    let mask = spec.rasterize()?;
    let n = spec.size;
    let mut img: Vec<f64> = mask
        .data
        .iter()
        .map(|&c| {
            let base = spec.intensities[c as usize];
            let z: f64 = StandardNormal.sample(noise_rng);
            (base * (1.0 + spec.noise * z)).clamp(0.0, 1.0)
        })
        .collect();
    gaussian_blur(&mut img, n, spec.blur_sigma);
    let gray: Vec<u8> = img.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Ok(Phantom {
        spec: *spec,
        image: ByteImage::from_gray(n, n, &gray)?,
        mask,
        true_aop: spec.true_aop(),
    })
}

/// Phantom `index` of the set identified by `seed`: geometry and speckle
/// use separate streams keyed by the index.
pub fn generate_one(cfg: &PhantomConfig, seed: u64, index: u64) -> Result<Phantom> {
    let spec = sample_spec(cfg, &mut stream_rng(seed, &[index, 0]))?;
    gen_phantom(&spec, &mut stream_rng(seed, &[index, 1]))
}

pub fn generate(cfg: &PhantomConfig, seed: u64, count: usize) -> Result<Vec<Phantom>> {
    (0..count as u64).map(|i| generate_one(cfg, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn on_axis_spec(noise: f64, blur: f64) -> PhantomSpec {
        let ps = Bar {
            center: Point::new(60.0, 128.0),
            length: 60.0,
            width: 6.0,
            angle_deg: 0.0,
        };
        let e = ps.inferior();
        PhantomSpec {
            size: 256,
            ps,
            fh: Ellipse {
                center: Point::new(e.x + 64.0, e.y),
                radius_a: 32.0,
                radius_b: 32.0,
                angle_deg: 0.0,
            },
            noise,
            blur_sigma: blur,
            intensities: [0.2, 0.75, 0.5],
        }
    }

    #[test]
    fn on_axis_circle_truth() {
        let spec = on_axis_spec(0.0, 0.0);
        assert!((spec.true_aop() - 30.0).abs() < 1e-9);
        let p = gen_phantom(&spec, &mut stream_rng(0, &[])).unwrap();
        let measured = aop_from_labels(&p.mask, AopConvention::Standard).unwrap();
        assert!((measured.angle_deg - 30.0).abs() < 2.0, "{}", measured.angle_deg);
    }

    #[test]
    fn noiseless_image_has_three_levels() {
        let p = gen_phantom(&on_axis_spec(0.0, 0.0), &mut stream_rng(0, &[])).unwrap();
        let mut levels: Vec<u8> = p.image.data.clone();
        levels.sort();
        levels.dedup();
        assert_eq!(levels.len(), 3);
    }

    #[test]
    fn speckle_independent_of_geometry() {
        let spec = on_axis_spec(0.3, 0.8);
        let a = gen_phantom(&spec, &mut stream_rng(1, &[])).unwrap();
        let b = gen_phantom(&spec, &mut stream_rng(2, &[])).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn ellipse_search_matches_circle_formula() {
        let spec = on_axis_spec(0.0, 0.0);
        let mut e = spec.fh;
        e.radius_b = 32.0 - 1e-9;
        let numeric = tangent_angle(spec.ps.inferior(), spec.ps.direction(), &e);
        assert!((numeric - 30.0).abs() < 1e-3, "{numeric}");
    }

    #[test]
    fn overlapping_spec_is_rejected() {
        let mut spec = on_axis_spec(0.0, 0.0);
        spec.fh.center = spec.ps.center;
        assert!(gen_phantom(&spec, &mut stream_rng(0, &[])).is_err());
    }

    #[test]
    fn sampled_phantoms_agree_with_measured_aop() {
        let cfg = PhantomConfig { size: 128, ..Default::default() };
        for i in 0..20 {
            let p = generate_one(&cfg, 9, i).unwrap();
            assert!((30.0..=120.0).contains(&p.true_aop));
            let m = aop_from_labels(&p.mask, AopConvention::Standard).unwrap();
            assert!((m.angle_deg - p.true_aop).abs() < 2.0, "phantom {i}: {} vs {}", m.angle_deg, p.true_aop);
        }
    }
}
