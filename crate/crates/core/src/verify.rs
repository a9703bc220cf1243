//! Finite-difference gradient checks and brute-force oracles. Shared by the
//! test suites and the `selftest` subcommand.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{BinaryMask, LabelMask};
use crate::decoder::{DecoderConfig, MiTUNet, ModelConfig};
use crate::encoder::{EncoderConfig, TransformerBlock};
use crate::error::Result;
use crate::geometry::{aop_from_labels, convex_hull, AopConvention, Point};
use crate::loss::segmentation_loss;
use crate::metrics::{self, boundary, ConfusionCounts};
use crate::nn::VarStore;
use crate::phantom::{Bar, Ellipse, PhantomSpec};
use crate::tensor::{no_grad, Conv2dSpec, RunningStats, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Step for whole-network checks. Thousands of decoder ReLUs sit within
/// 1e-3 of their kink, so a wider step measures a secant across kinks.
pub const MODEL_FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name, flat index, analytic and numeric value of the worst
    /// entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < GRAD_TOLERANCE
    }
}

/// Compares autodiff gradients of `loss` against central differences.
/// `picks` lists `(input, flat index)` pairs to probe; `None` probes every
/// element of every input.
pub fn check_gradients(
    name: &str,
    inputs: &[(String, Tensor<f64>)],
    picks: Option<Vec<(usize, usize)>>,
    loss: impl Fn() -> Result<Tensor<f64>>,
) -> Result<GradCheck> {
    check_gradients_with_step(name, inputs, picks, FD_STEP, loss)
}

pub fn check_gradients_with_step(
    name: &str,
    inputs: &[(String, Tensor<f64>)],
    picks: Option<Vec<(usize, usize)>>,
    step: f64,
    loss: impl Fn() -> Result<Tensor<f64>>,
) -> Result<GradCheck> {
    for (_, t) in inputs {
        t.zero_grad();
    }
    loss()?.backward()?;
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let picks = picks.unwrap_or_else(|| {
        inputs
            .iter()
            .enumerate()
            .flat_map(|(i, (_, t))| (0..t.numel()).map(move |j| (i, j)))
            .collect()
    });
    let eval = || -> Result<f64> { no_grad(|| loss().map(|l| l.item())) };
    let mut out = GradCheck {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (i, j) in picks {
        let t = &inputs[i].1;
        let orig = t.data()[j];
        t.data_mut()[j] = orig + step;
        let up = eval()?;
        t.data_mut()[j] = orig - step;
        let down = eval()?;
        t.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = rel_err(grads[i][j], numeric);
        out.checked += 1;
        if err >= out.max_rel_err {
            out.max_rel_err = err;
            out.worst = Some((inputs[i].0.clone(), j, grads[i][j], numeric));
        }
    }
    Ok(out)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); scale * z }).collect();
    Tensor::leaf(data, shape, true).expect("positive shape")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::leaf(data, shape, true).expect("positive shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::leaf(data, shape, true).expect("positive shape")
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct cotangent.
fn probe(y: &Tensor<f64>, w: &[f64]) -> Result<Tensor<f64>> {
    let w = Tensor::new(w[..y.numel()].to_vec(), y.shape())?;
    Ok(y.mul(&w)?.sum())
}

type OpFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let mut add = |name, inputs, f: OpFn| cases.push(OpCase { name, inputs, f });
    let s = [2, 3, 4];

    add("add", vec![randn(rng, &s, 1.0), randn(rng, &s, 1.0)], Box::new(|x| x[0].add(&x[1])));
    add("sub", vec![randn(rng, &s, 1.0), randn(rng, &s, 1.0)], Box::new(|x| x[0].sub(&x[1])));
    add("mul", vec![randn(rng, &s, 1.0), randn(rng, &s, 1.0)], Box::new(|x| x[0].mul(&x[1])));
    add("div", vec![randn(rng, &s, 1.0), positive(rng, &s)], Box::new(|x| x[0].div(&x[1])));
    add("scale", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].scale(-1.7))));
    add("add_scalar", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].add_scalar(0.3))));
    add("neg", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].neg())));
    add("square", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].square())));
    add("relu", vec![away_from_zero(rng, &s)], Box::new(|x| Ok(x[0].relu())));
    add("gelu", vec![randn(rng, &s, 1.5)], Box::new(|x| Ok(x[0].gelu())));
    add("ln", vec![positive(rng, &s)], Box::new(|x| Ok(x[0].ln())));
    add("exp", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].exp())));
    add("clamp", vec![away_from_zero(rng, &s)], Box::new(|x| Ok(x[0].clamp(-0.05, 0.6))));
    add("sum", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].sum())));
    add("mean", vec![randn(rng, &s, 1.0)], Box::new(|x| Ok(x[0].mean())));
    add("sum_except", vec![randn(rng, &s, 1.0)], Box::new(|x| x[0].sum_except(1)));
    add("reshape", vec![randn(rng, &s, 1.0)], Box::new(|x| x[0].reshape(&[6, 4])));
    add("permute", vec![randn(rng, &s, 1.0)], Box::new(|x| x[0].permute(&[2, 0, 1])));
    add("transpose_last", vec![randn(rng, &s, 1.0)], Box::new(|x| x[0].transpose_last()));
    add(
        "matmul",
        vec![randn(rng, &[2, 3, 4], 1.0), randn(rng, &[2, 4, 5], 1.0)],
        Box::new(|x| x[0].matmul(&x[1])),
    );
    add(
        "matmul_t",
        vec![randn(rng, &[2, 3, 4], 1.0), randn(rng, &[2, 5, 4], 1.0)],
        Box::new(|x| x[0].matmul_t(&x[1])),
    );
    add(
        "linear",
        vec![randn(rng, &[2, 3, 4], 1.0), randn(rng, &[5, 4], 0.5), randn(rng, &[5], 0.5)],
        Box::new(|x| x[0].linear(&x[1], Some(&x[2]))),
    );
    add("softmax", vec![randn(rng, &s, 2.0)], Box::new(|x| x[0].softmax(1)));
    add(
        "concat",
        vec![randn(rng, &[2, 3, 2], 1.0), randn(rng, &[2, 1, 2], 1.0)],
        Box::new(|x| Tensor::concat(&[&x[0], &x[1]], 1)),
    );
    add(
        "conv2d",
        vec![randn(rng, &[2, 3, 6, 5], 1.0), randn(rng, &[4, 3, 3, 3], 0.5), randn(rng, &[4], 0.5)],
        Box::new(|x| {
            x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec { stride: 1, padding: 1, groups: 1 })
        }),
    );
    add(
        "conv2d_strided",
        vec![randn(rng, &[1, 2, 9, 9], 1.0), randn(rng, &[3, 2, 7, 7], 0.3)],
        Box::new(|x| x[0].conv2d(&x[1], None, Conv2dSpec { stride: 4, padding: 3, groups: 1 })),
    );
    add(
        "conv2d_depthwise",
        vec![randn(rng, &[2, 4, 5, 5], 1.0), randn(rng, &[4, 1, 3, 3], 0.5), randn(rng, &[4], 0.5)],
        Box::new(|x| {
            x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec { stride: 1, padding: 1, groups: 4 })
        }),
    );
    add(
        "conv2d_pointwise",
        vec![randn(rng, &[2, 3, 4, 4], 1.0), randn(rng, &[2, 3, 1, 1], 0.5)],
        Box::new(|x| x[0].conv2d(&x[1], None, Conv2dSpec::default())),
    );
    add(
        "conv_transpose2d",
        vec![randn(rng, &[2, 3, 3, 2], 1.0), randn(rng, &[3, 2, 2, 2], 0.5), randn(rng, &[2], 0.5)],
        Box::new(|x| x[0].conv_transpose2d(&x[1], Some(&x[2]), 2)),
    );
    add(
        "upsample2x_bilinear",
        vec![randn(rng, &[2, 2, 3, 4], 1.0)],
        Box::new(|x| x[0].upsample2x_bilinear()),
    );
    add(
        "batchnorm2d",
        vec![randn(rng, &[3, 2, 3, 3], 1.0), randn(rng, &[2], 1.0), randn(rng, &[2], 1.0)],
        Box::new(|x| {
            let mean = Tensor::zeros(&[2]);
            let var = Tensor::full(&[2], 1.0);
            x[0].batchnorm2d(&x[1], &x[2], RunningStats { mean: &mean, var: &var }, true)
        }),
    );
    add(
        "layernorm",
        vec![randn(rng, &[2, 3, 6], 1.0), randn(rng, &[6], 1.0), randn(rng, &[6], 1.0)],
        Box::new(|x| x[0].layernorm(&x[1], &x[2])),
    );
    cases
}

/// Every differentiable op, each input element probed.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..4096).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
    op_cases(&mut rng)
        .into_iter()
        .map(|case| {
            let named: Vec<(String, Tensor<f64>)> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("in{i}"), t.clone()))
                .collect();
            let (f, inputs) = (case.f, case.inputs);
            check_gradients(case.name, &named, None, || probe(&f(&inputs)?, &weights))
        })
        .collect()
}

fn sample_picks(rng: &mut ChaCha8Rng, params: &[(String, Tensor<f64>)], count: usize) -> Vec<(usize, usize)> {
    // spread probes over tensors first, then over elements
    let mut picks = Vec::with_capacity(count);
    let order = sample(rng, params.len(), count.min(params.len())).into_vec();
    for k in 0..count {
        let i = if k < order.len() { order[k] } else { rng.random_range(0..params.len()) };
        picks.push((i, rng.random_range(0..params[i].1.numel())));
    }
    picks
}

/// One transformer block (dim 16, 2 heads, reduction 2) on a 4×4 grid.
pub fn encoder_block_check(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = VarStore::<f64>::new(seed);
    let block = TransformerBlock::new(&vars.path("block"), 16, 2, 2, 4)?;
    let x = randn(&mut rng, &[2, 16, 16], 1.0);
    let weights: Vec<f64> = (0..512).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
    let mut params = vars.trainable_named();
    params.push(("input".into(), x.clone()));
    let picks = sample_picks(&mut rng, &params, samples);
    check_gradients("encoder_block", &params, Some(picks), || probe(&block.forward(&x, 4, 4)?, &weights))
}

/// Full model forward plus loss on a batch of two 3×32×32 images.
pub fn model_check(seed: u64, samples: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        encoder: EncoderConfig::default(),
        decoder: DecoderConfig::default(),
    };
    let model = MiTUNet::<f64>::new(&cfg, seed)?;
    let x = randn(&mut rng, &[2, 3, 32, 32], 1.0);
    let labels: Vec<usize> = (0..2 * 32 * 32).map(|_| rng.random_range(0..3)).collect();
    let mut target = vec![0.0; 2 * 3 * 32 * 32];
    for (i, &c) in labels.iter().enumerate() {
        let (b, p) = (i / 1024, i % 1024);
        target[(b * 3 + c) * 1024 + p] = 1.0;
    }
    let target = Tensor::new(target, &[2, 3, 32, 32])?;
    let params = model.vars.trainable_named();
    let picks = sample_picks(&mut rng, &params, samples);
    check_gradients_with_step("model", &params, Some(picks), MODEL_FD_STEP, || {
        Ok(segmentation_loss(&target, &model.forward(&x, true)?)?.total)
    })
}

pub fn brute_counts(pred: &BinaryMask, gt: &BinaryMask) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn brute_directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(x, y)| {
            to.iter()
                .map(|&(u, v)| {
                    let (dx, dy) = (x as f64 - u as f64, y as f64 - v as f64);
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Symmetric boundary distances by exhaustive search: `(hd, asd)`, or
/// `None` when either mask is empty.
pub fn brute_surface(a: &BinaryMask, b: &BinaryMask) -> Option<(f64, f64)> {
    let ba: Vec<_> = boundary(a).pixels().collect();
    let bb: Vec<_> = boundary(b).pixels().collect();
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let mut all = brute_directed(&ba, &bb);
    all.extend(brute_directed(&bb, &ba));
    let hd = all.iter().copied().fold(0.0, f64::max);
    let asd = all.iter().sum::<f64>() / all.len() as f64;
    Some((hd, asd))
}

/// Hull vertices by exhaustion: a point is a vertex unless it lies in a
/// closed triangle (or segment) spanned by other points.
pub fn brute_hull(points: &[Point]) -> Vec<Point> {
    let mut uniq: Vec<Point> = Vec::new();
    for &p in points {
        if !uniq.contains(&p) {
            uniq.push(p);
        }
    }
    uniq.iter()
        .copied()
        .filter(|&p| {
            let others: Vec<Point> = uniq.iter().copied().filter(|&q| q != p).collect();
            let n = others.len();
            !(0..n).any(|i| {
                (i..n).any(|j| (j..n).any(|k| in_closed_triangle(p, others[i], others[j], others[k])))
            })
        })
        .collect()
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    a.sub(p).cross(b.sub(p)) == 0.0 && a.sub(p).dot(b.sub(p)) <= 0.0
}

fn in_closed_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    if b.sub(a).cross(c.sub(a)) == 0.0 {
        return on_segment(p, a, b) || on_segment(p, b, c) || on_segment(p, a, c);
    }
    let d = [b.sub(a).cross(p.sub(a)), c.sub(b).cross(p.sub(b)), a.sub(c).cross(p.sub(c))];
    !(d.iter().any(|&v| v < 0.0) && d.iter().any(|&v| v > 0.0))
}

/// Random binary mask: blobs of random rectangles and disks, sometimes
/// empty.
pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    let shapes = rng.random_range(0..4);
    for _ in 0..shapes {
        let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let r = rng.random_range(1.0..(w.min(h) as f64 / 2.0).max(1.5));
        let disk = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disk { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= 0.6 * r };
                if inside {
                    m.set(x, y, true);
                }
            }
        }
    }
    // a little salt so masks are not always convex
    for _ in 0..rng.random_range(0..6) {
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        m.set(x, y, !m.get(x, y));
    }
    m
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub pairs: usize,
    pub count_mismatches: usize,
    pub max_distance_err: f64,
    pub max_identity_err: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.count_mismatches == 0 && self.max_distance_err < 1e-9 && self.max_identity_err <= 1e-12
    }
}

/// Dice/IoU/HD/ASD against exhaustive implementations on random pairs of
/// masks up to 64×64.
pub fn metric_oracle(seed: u64, pairs: usize) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport {
        pairs,
        ..Default::default()
    };
    for _ in 0..pairs {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let a = random_mask(&mut rng, w, h);
        let b = random_mask(&mut rng, w, h);
        let fast = ConfusionCounts::from_binary(&a, &b)?;
        let slow = brute_counts(&a, &b);
        if fast != slow {
            rep.count_mismatches += 1;
        }
        let (d, j) = (fast.dice(), fast.iou());
        rep.max_identity_err = rep.max_identity_err.max((d - 2.0 * j / (1.0 + j)).abs());
        match (brute_surface(&a, &b), metrics::hausdorff(&a, &b), metrics::asd(&a, &b)) {
            (Some((hd, asd)), Ok(fhd), Ok(fasd)) => {
                rep.max_distance_err = rep.max_distance_err.max((hd - fhd).abs()).max((asd - fasd).abs());
            }
            (None, Err(_), Err(_)) => {}
            _ => rep.count_mismatches += 1,
        }
    }
    Ok(rep)
}

/// A bar and a circular head on an `n`×`n` canvas with noise-free
/// geometry, for checking measured AoP against `θ + asin(r/d)`.
pub fn random_disk_scene(rng: &mut impl Rng, n: usize) -> PhantomSpec {
    let nf = n as f64;
    loop {
        let angle = rng.random_range(-30.0..30.0f64);
        let r = rng.random_range(0.08..0.16) * nf;
        let d = rng.random_range(1.6 * r..0.5 * nf);
        let theta = rng.random_range(5.0..80.0f64);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let ps = Bar {
            center: Point::new(rng.random_range(0.2..0.45) * nf, rng.random_range(0.3..0.7) * nf),
            length: rng.random_range(0.2..0.3) * nf,
            width: rng.random_range(0.03..0.05) * nf,
            angle_deg: angle,
        };
        let e = ps.inferior();
        let dir = (angle + side * theta).to_radians();
        let spec = PhantomSpec {
            size: n,
            ps,
            fh: Ellipse {
                center: Point::new(e.x + d * dir.cos(), e.y + d * dir.sin()),
                radius_a: r,
                radius_b: r,
                angle_deg: 0.0,
            },
            noise: 0.0,
            blur_sigma: 0.0,
            intensities: [0.2, 0.75, 0.5],
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AopOracleReport {
    pub scenes: usize,
    pub failures: usize,
    pub max_err_deg: f64,
}

impl AopOracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.max_err_deg < 2.0
    }
}

/// Measured AoP on rasterized disk scenes against the closed form. A
/// measurement error (including a failed tangent certificate) counts as a
/// failure.
pub fn aop_oracle(seed: u64, scenes: usize, size: usize) -> Result<AopOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = AopOracleReport {
        scenes,
        ..Default::default()
    };
    for _ in 0..scenes {
        let spec = random_disk_scene(&mut rng, size);
        let mask: LabelMask = spec.rasterize()?;
        let truth = spec.true_aop();
        match aop_from_labels(&mask, AopConvention::Standard) {
            Ok(a) => rep.max_err_deg = rep.max_err_deg.max((a.angle_deg - truth).abs()),
            Err(_) => rep.failures += 1,
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Default)]
pub struct HullOracleReport {
    pub sets: usize,
    pub mismatches: usize,
}

/// Monotone-chain hull against the pairwise brute force on random integer
/// point sets of 30 points.
pub fn hull_oracle(seed: u64, sets: usize) -> HullOracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = HullOracleReport { sets, mismatches: 0 };
    for _ in 0..sets {
        let pts: Vec<Point> = (0..30)
            .map(|_| Point::new(rng.random_range(0..40) as f64, rng.random_range(0..40) as f64))
            .collect();
        let mut fast = convex_hull(&pts);
        let mut slow = brute_hull(&pts);
        let key = |p: &Point| (p.x as i64, p.y as i64);
        fast.sort_by_key(key);
        slow.sort_by_key(key);
        if fast != slow {
            rep.mismatches += 1;
        }
    }
    rep
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient and oracle suites run by `mitu selftest`.
pub fn selftest(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        out.push(SuiteResult {
            name: name.to_string(),
            passed,
            detail,
        })
    };
    for g in op_gradient_suite(seed)? {
        push(&format!("grad/{}", g.name), g.passed(), format!("{} entries, max rel err {:.2e}", g.checked, g.max_rel_err));
    }
    for g in [encoder_block_check(seed, 48)?, model_check(seed, 48)?] {
        push(&format!("grad/{}", g.name), g.passed(), format!("{} entries, max rel err {:.2e}", g.checked, g.max_rel_err));
    }
    let m = metric_oracle(seed, 200)?;
    push(
        "oracle/metrics",
        m.passed(),
        format!(
            "{} pairs, {} count mismatches, max distance err {:.1e}, max D/J identity err {:.1e}",
            m.pairs, m.count_mismatches, m.max_distance_err, m.max_identity_err
        ),
    );
    let h = hull_oracle(seed, 200);
    push("oracle/hull", h.mismatches == 0, format!("{} sets, {} mismatches", h.sets, h.mismatches));
    let a = aop_oracle(seed, 100, 512)?;
    push(
        "oracle/aop",
        a.passed(),
        format!("{} scenes, {} failures, max err {:.3} deg", a.scenes, a.failures, a.max_err_deg),
    );
    Ok(out)
}
