//! Images, label masks, one-hot targets and training augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image stored planar, `[3, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ByteImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "image buffer of {} bytes for 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(ByteImage { width, height, data })
    }

    /// Replicates a single-channel buffer into three planes.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::Data("gray buffer does not match size".into()));
        }
        ByteImage::new(width, height, gray.repeat(3))
    }
}

/// `H×W` grid of class labels in `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "mask buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!(
                "label {} at pixel (x={}, y={}) is outside {{0,1,2}}",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(LabelMask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        LabelMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Binary mask of pixels whose label is in `classes`.
    pub fn select(&self, classes: &[u8]) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| classes.contains(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "binary mask size");
        BinaryMask { width, height, data }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask::new(width, height, vec![false; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Pixel coordinates of set pixels in scan order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i % self.width, i / self.width))
    }
}

/// Float image `[3, H, W]`, planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    /// Bytes scaled to `[0, 1]`.
    pub fn from_bytes(img: &ByteImage) -> Self {
        Image {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

/// `[3, H, W]` one-hot encoding of a label mask.
pub fn one_hot(mask: &LabelMask) -> Tensor<f32> {
    let n = mask.width * mask.height;
    let mut data = vec![0f32; NUM_CLASSES * n];
    for (i, &v) in mask.data.iter().enumerate() {
        data[v as usize * n + i] = 1.0;
    }
    Tensor::new(data, &[NUM_CLASSES, mask.height, mask.width]).expect("mask has positive size")
}

/// Checked one-hot encoding of raw labels.
pub fn one_hot_raw(width: usize, height: usize, labels: &[u8]) -> Result<Tensor<f32>> {
    Ok(one_hot(&LabelMask::new(width, height, labels.to_vec())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Cutout count is uniform on `0..=cutout_max`.
    pub cutout_max: usize,
    pub cutout_size: usize,
    /// Rotation angle is uniform on `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            cutout_max: 4,
            cutout_size: 4,
            rotation_deg: 25.0,
            hflip_prob: 0.5,
            vflip_prob: 0.3,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::Config("rotation_deg must be a finite value >= 0".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Normalizes a float image in place: `(x - mean) / std` per channel.
pub fn standardize(img: &mut Image, cfg: &AugmentConfig) {
    let n = img.width * img.height;
    for c in 0..3 {
        for v in &mut img.data[c * n..(c + 1) * n] {
            *v = (*v - cfg.mean[c]) / cfg.std[c];
        }
    }
}

/// Scale to `[0, 1]`, then standardize.
pub fn normalize(img: &ByteImage, cfg: &AugmentConfig) -> Image {
    let mut out = Image::from_bytes(img);
    standardize(&mut out, cfg);
    out
}

/// The random choices of one augmentation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    /// Top-left corners of the zeroed squares.
    pub cutouts: Vec<(usize, usize)>,
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            cutouts: Vec::new(),
            angle_deg: 0.0,
            hflip: false,
            vflip: false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let count = rng.random_range(0..=cfg.cutout_max);
        let s = cfg.cutout_size.min(width).min(height);
        let cutouts = (0..count)
            .map(|_| (rng.random_range(0..=width - s), rng.random_range(0..=height - s)))
            .collect();
        let angle_deg = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        let hflip = rng.random_bool(cfg.hflip_prob);
        let vflip = rng.random_bool(cfg.vflip_prob);
        AugmentPlan {
            cutouts,
            angle_deg,
            hflip,
            vflip,
        }
    }

    /// Cutout (image only), rotation about the image center, then flips.
    pub fn apply(&self, cfg: &AugmentConfig, image: &Image, mask: &LabelMask) -> Result<(Image, LabelMask)> {
        let (w, h) = (image.width, image.height);
        if mask.width != w || mask.height != h {
            return Err(Error::Data(format!(
                "image {w}x{h} and mask {}x{} differ",
                mask.width, mask.height
            )));
        }
        let mut img = image.clone();
        let s = cfg.cutout_size.min(w).min(h);
        for &(x0, y0) in &self.cutouts {
            for c in 0..3 {
                for y in y0..y0 + s {
                    let row = (c * h + y) * w;
                    img.data[row + x0..row + x0 + s].fill(0.0);
                }
            }
        }
        let (mut img, mut mask) = if self.angle_deg != 0.0 {
            rotate(&img, mask, self.angle_deg)
        } else {
            (img, mask.clone())
        };
        if self.hflip {
            flip(&mut img.data, &mut mask.data, w, h, true);
        }
        if self.vflip {
            flip(&mut img.data, &mut mask.data, w, h, false);
        }
        Ok((img, mask))
    }
}

fn flip(img: &mut [f32], mask: &mut [u8], w: usize, h: usize, horizontal: bool) {
    let planes = img.len() / (w * h);
    if horizontal {
        for row in img.chunks_exact_mut(w) {
            row.reverse();
        }
        for row in mask.chunks_exact_mut(w) {
            row.reverse();
        }
    } else {
        for c in 0..planes {
            let plane = &mut img[c * w * h..(c + 1) * w * h];
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
        for y in 0..h / 2 {
            let (top, bottom) = mask.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

/// Rotates counter-clockwise (in image coordinates, y down) by `deg` about
/// the image center. Image samples bilinearly, mask takes the nearest
/// label; both fill with zero outside the source.
pub fn rotate(img: &Image, mask: &LabelMask, deg: f64) -> (Image, LabelMask) {
    let (w, h) = (img.width, img.height);
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Image {
        width: w,
        height: h,
        data: vec![0.0; img.data.len()],
    };
    let mut out_mask = LabelMask::zeros(w, h);
    let n = w * h;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // inverse rotation maps the output pixel back to the source
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (nx, ny) = (sx.floor(), sy.floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                out_mask.data[y * w + x] = mask.get(nx as usize, ny as usize);
            }
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let taps = [
                (x0, y0, (1.0 - ax) * (1.0 - ay)),
                (x0 + 1.0, y0, ax * (1.0 - ay)),
                (x0, y0 + 1.0, (1.0 - ax) * ay),
                (x0 + 1.0, y0 + 1.0, ax * ay),
            ];
            for c in 0..3 {
                let src = &img.data[c * n..(c + 1) * n];
                let mut acc = 0.0;
                for &(tx, ty, wt) in &taps {
                    if tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h {
                        acc += wt * src[ty as usize * w + tx as usize] as f64;
                    }
                }
                out.data[c * n + y * w + x] = acc as f32;
            }
        }
    }
    (out, out_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> Image {
        Image {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|v| v as f32).collect(),
        }
    }

    #[test]
    fn one_hot_examples() {
        let t = one_hot(&LabelMask::zeros(2, 2));
        assert_eq!(t.to_vec(), [vec![1.0; 4], vec![0.0; 8]].concat());
        let t = one_hot(&LabelMask::new(1, 1, vec![2]).unwrap());
        assert_eq!(t.to_vec(), vec![0.0, 0.0, 1.0]);
        let err = one_hot_raw(2, 2, &[0, 1, 3, 0]).unwrap_err().to_string();
        assert!(err.contains("label 3") && err.contains("x=0, y=1"), "{err}");
    }

    #[test]
    fn normalize_endpoints() {
        let img = ByteImage::from_gray(3, 1, &[0, 51, 255]).unwrap();
        let out = normalize(&img, &AugmentConfig::default());
        assert_eq!(&out.data[..3], &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn null_plan_is_identity() {
        let img = ramp(5, 4);
        let mask = LabelMask::new(5, 4, (0..20).map(|v| (v % 3) as u8).collect()).unwrap();
        let (i2, m2) = AugmentPlan::identity().apply(&AugmentConfig::default(), &img, &mask).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn forced_flips() {
        let img = ramp(4, 3);
        let mask = LabelMask::new(4, 3, vec![0, 1, 2, 0, 1, 1, 0, 2, 2, 0, 0, 1]).unwrap();
        let plan = AugmentPlan { hflip: true, ..AugmentPlan::identity() };
        let (i2, m2) = plan.apply(&AugmentConfig::default(), &img, &mask).unwrap();
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(i2.data[(c * 3 + y) * 4 + x], img.data[(c * 3 + y) * 4 + 3 - x]);
                }
            }
        }
        assert_eq!(m2, mask.flip_horizontal());
        let plan = AugmentPlan { vflip: true, ..AugmentPlan::identity() };
        let (i3, m3) = plan.apply(&AugmentConfig::default(), &img, &mask).unwrap();
        assert_eq!(m3.get(1, 0), mask.get(1, 2));
        assert_eq!(i3.data[2], img.data[2 * 4 + 2]);
        assert_eq!(i3.data[4 + 2], img.data[4 + 2]);
    }

    #[test]
    fn cutout_zeroes_image_only() {
        let img = Image { width: 8, height: 8, data: vec![1.0; 192] };
        let mask = LabelMask::new(8, 8, vec![1; 64]).unwrap();
        let plan = AugmentPlan { cutouts: vec![(2, 3)], ..AugmentPlan::identity() };
        let (i2, m2) = plan.apply(&AugmentConfig::default(), &img, &mask).unwrap();
        assert_eq!(i2.data.iter().filter(|&&v| v == 0.0).count(), 3 * 16);
        assert_eq!(i2.data[3 * 8 + 2], 0.0);
        assert_eq!(i2.data[3 * 8 + 6], 1.0);
        assert_eq!(m2, mask);
    }

    #[test]
    fn rotated_disk_is_stable() {
        let (w, r) = (64usize, 20.0);
        let disk: Vec<u8> = (0..w * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5 - 32.0, (i / w) as f64 + 0.5 - 32.0);
                u8::from(x * x + y * y <= r * r) * 2
            })
            .collect();
        let mask = LabelMask::new(w, w, disk).unwrap();
        let img = Image { width: w, height: w, data: vec![0.0; 3 * w * w] };
        let (_, rot) = rotate(&img, &mask, 25.0);
        for y in 0..w {
            for x in 0..w {
                if rot.get(x, y) != mask.get(x, y) {
                    let d = ((x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2)).sqrt();
                    assert!((d - r).abs() <= 1.0, "changed pixel ({x},{y}) at radius {d}");
                }
            }
        }
        assert!(rot.data.iter().all(|&v| v == 0 || v == 2));
    }

    #[test]
    fn sampled_plans_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = AugmentConfig::default();
        for _ in 0..200 {
            let p = AugmentPlan::sample(&cfg, 10, 6, &mut rng);
            assert!(p.cutouts.len() <= 4);
            assert!(p.cutouts.iter().all(|&(x, y)| x <= 6 && y <= 2));
            assert!(p.angle_deg.abs() <= 25.0);
        }
    }
}
