use mitunet::data::LabelMask;
use mitunet::error::GeometryError;
use mitunet::geometry::*;
use mitunet::phantom::{sample_spec, PhantomConfig};
use mitunet::verify::{aop_oracle, brute_hull, hull_oracle, random_disk_scene};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rotate90(m: &LabelMask) -> LabelMask {
    // (x, y) -> (H - 1 - y, x)
    let (w, h) = (m.width, m.height);
    let mut data = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            data[x * h + (h - 1 - y)] = m.get(x, y);
        }
    }
    LabelMask::new(h, w, data).unwrap()
}

fn upscale2(m: &LabelMask) -> LabelMask {
    let (w, h) = (2 * m.width, 2 * m.height);
    let data = (0..w * h).map(|i| m.get((i % w) / 2, (i / w) / 2)).collect();
    LabelMask::new(w, h, data).unwrap()
}

fn scenes(seed: u64, count: usize, size: usize) -> Vec<LabelMask> {
    let cfg = PhantomConfig { size, ..PhantomConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_spec(&cfg, &mut rng).unwrap().rasterize().unwrap()).collect()
}

#[test]
fn hull_matches_brute_force_on_random_sets() {
    let rep = hull_oracle(21, 200);
    assert_eq!(rep.mismatches, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hull_is_brute_force_hull(pts in prop::collection::vec((0i32..25, 0i32..25), 1..30)) {
        let pts: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        let key = |p: &Point| (p.x as i64, p.y as i64);
        let mut fast = convex_hull(&pts);
        let mut slow = brute_hull(&pts);
        fast.sort_by_key(key);
        slow.sort_by_key(key);
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn hull_contains_its_points(pts in prop::collection::vec((0i32..25, 0i32..25), 3..30)) {
        let pts: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
        let hull = convex_hull(&pts);
        for &p in &pts {
            prop_assert!(hull_contains(&hull, p));
        }
    }
}

#[test]
fn quarter_turns_preserve_the_angle() {
    for m in scenes(5, 12, 128) {
        let a = aop_from_labels(&m, AopConvention::Standard).unwrap().angle_deg;
        let mut r = m.clone();
        for _ in 0..3 {
            r = rotate90(&r);
            let b = aop_from_labels(&r, AopConvention::Standard).unwrap().angle_deg;
            assert!((a - b).abs() < 0.5, "{a} vs {b}");
        }
    }
}

#[test]
fn doubling_resolution_keeps_the_angle() {
    // pixel-center hulls dilate by a quarter of an original pixel under a
    // nearest ×2 upscale, so agreement is only up to raster accuracy
    for m in scenes(6, 8, 96) {
        let a = aop_from_labels(&m, AopConvention::Standard).unwrap().angle_deg;
        let b = aop_from_labels(&upscale2(&m), AopConvention::Standard).unwrap().angle_deg;
        assert!((a - b).abs() < 2.0, "{a} vs {b}");
    }
}

#[test]
fn growing_the_head_never_decreases_the_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 20 {
        let mut spec = random_disk_scene(&mut rng, 256);
        let mut last = aop_from_labels(&spec.rasterize().unwrap(), AopConvention::Standard).unwrap().angle_deg;
        for _ in 0..4 {
            spec.fh.radius_a += 1.5;
            spec.fh.radius_b += 1.5;
            if spec.validate().is_err() {
                break;
            }
            let a = aop_from_labels(&spec.rasterize().unwrap(), AopConvention::Standard).unwrap().angle_deg;
            assert!(a >= last, "{a} < {last}");
            last = a;
        }
        checked += 1;
    }
}

#[test]
fn disk_scenes_match_closed_form_and_certificate() {
    let rep = aop_oracle(17, 25, 256).unwrap();
    assert!(rep.passed(), "{rep:?}");
    // the certificate is asserted inside aop(); check it again from outside
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..10 {
        let m = random_disk_scene(&mut rng, 256).rasterize().unwrap();
        let r = aop_from_labels(&m, AopConvention::Standard).unwrap();
        let hull = mask_hull(&largest_component(&m.select(&[2])));
        let e = r.ps_axis.inferior;
        let line = r.tangent_point.sub(e);
        let sides: Vec<f64> = hull.iter().map(|v| line.cross(v.sub(e))).collect();
        let one_side = sides.iter().all(|&c| c >= -TANGENT_TOLERANCE) || sides.iter().all(|&c| c <= TANGENT_TOLERANCE);
        assert!(one_side);
    }
}

#[test]
fn flip_convention_is_supplement() {
    for m in scenes(9, 4, 128) {
        let s = aop_from_labels(&m, AopConvention::Standard).unwrap().angle_deg;
        let f = aop_from_labels(&m, AopConvention::Flip).unwrap().angle_deg;
        assert!((s + f - 180.0).abs() < 1e-12);
    }
}

#[test]
fn stray_blobs_are_ignored() {
    let m = scenes(10, 1, 128).pop().unwrap();
    let clean = aop_from_labels(&m, AopConvention::Standard).unwrap().angle_deg;
    let mut noisy = m.clone();
    for (x, y) in [(1, 1), (2, 1), (120, 3), (5, 124)] {
        noisy.data[y * 128 + x] = 2;
    }
    noisy.data[126 * 128 + 126] = 1;
    let a = aop_from_labels(&noisy, AopConvention::Standard).unwrap().angle_deg;
    assert_eq!(a, clean);
}

#[test]
fn empty_structures_are_errors() {
    let m = LabelMask::zeros(16, 16);
    assert!(matches!(aop_from_labels(&m, AopConvention::Standard), Err(GeometryError::EmptyMask(_))));
}
