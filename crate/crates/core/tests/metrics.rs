use mitunet::data::{BinaryMask, LabelMask};
use mitunet::geometry::AopConvention;
use mitunet::metrics::*;
use mitunet::phantom::{generate, PhantomConfig};
use mitunet::verify::{brute_counts, brute_surface, metric_oracle, random_mask};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flip(m: &BinaryMask) -> BinaryMask {
    let mut out = BinaryMask::empty(m.width, m.height);
    for (x, y) in m.pixels() {
        out.set(m.width - 1 - x, y, true);
    }
    out
}

#[test]
fn oracle_suite_on_200_pairs() {
    let rep = metric_oracle(11, 200).unwrap();
    assert_eq!(rep.count_mismatches, 0);
    assert!(rep.max_distance_err < 1e-9, "{}", rep.max_distance_err);
    assert!(rep.max_identity_err <= 1e-12, "{}", rep.max_identity_err);
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (any::<u64>(), 1usize..=40, 1usize..=40).prop_map(|(seed, w, h)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_mask(&mut rng, w, h), random_mask(&mut rng, w, h))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_and_distances_match_brute_force((a, b) in mask_pair()) {
        prop_assert_eq!(ConfusionCounts::from_binary(&a, &b).unwrap(), brute_counts(&a, &b));
        match brute_surface(&a, &b) {
            Some((hd, sd)) => {
                prop_assert!((hausdorff(&a, &b).unwrap() - hd).abs() < 1e-9);
                prop_assert!((asd(&a, &b).unwrap() - sd).abs() < 1e-9);
            }
            None => prop_assert!(hausdorff(&a, &b).is_err()),
        }
    }

    #[test]
    fn hausdorff_bounds_asd((a, b) in mask_pair()) {
        if let (Ok(hd), Ok(sd)) = (hausdorff(&a, &b), asd(&a, &b)) {
            prop_assert!(hd >= sd && sd >= 0.0);
        }
    }

    #[test]
    fn dice_iou_identity((a, b) in mask_pair()) {
        let c = ConfusionCounts::from_binary(&a, &b).unwrap();
        let (d, j) = (c.dice(), c.iou());
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn metrics_ignore_horizontal_flip((a, b) in mask_pair()) {
        let (fa, fb) = (flip(&a), flip(&b));
        prop_assert_eq!(ConfusionCounts::from_binary(&a, &b).unwrap(), ConfusionCounts::from_binary(&fa, &fb).unwrap());
        if let Ok(hd) = hausdorff(&a, &b) {
            prop_assert!((hd - hausdorff(&fa, &fb).unwrap()).abs() < 1e-12);
            prop_assert!((asd(&a, &b).unwrap() - asd(&fa, &fb).unwrap()).abs() < 1e-9);
        }
    }
}

fn phantom_reports() -> Vec<ImageReport> {
    // predictions: ground truth of neighbouring phantoms, so scores vary
    let ph = generate(&PhantomConfig { size: 96, ..PhantomConfig::default() }, 4, 8).unwrap();
    (0..ph.len())
        .map(|i| {
            let pred = &ph[(i + 1) % ph.len()].mask;
            evaluate_pair(&format!("img{i}"), pred, &ph[i].mask, AopConvention::Standard).unwrap()
        })
        .collect()
}

#[test]
fn score_is_linear_in_the_averaged_metrics() {
    let rep = aggregate(phantom_reports());
    assert!(rep.aggregate.complete >= 4);
    let (a, b) = (rep.aggregate.score_of_means.unwrap(), rep.aggregate.mean_of_scores.unwrap());
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
}

#[test]
fn aggregate_ignores_order() {
    let reports = phantom_reports();
    let base = aggregate(reports.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut shuffled = reports.clone();
        shuffled.shuffle(&mut rng);
        let rep = aggregate(shuffled);
        assert_eq!(rep.aggregate, base.aggregate);
        assert_eq!(rep.to_csv(), base.to_csv());
    }
}

#[test]
fn phantom_against_itself_is_perfect() {
    let ph = generate(&PhantomConfig { size: 128, ..PhantomConfig::default() }, 9, 3).unwrap();
    let reports: Vec<_> = ph
        .iter()
        .enumerate()
        .map(|(i, p)| evaluate_pair(&i.to_string(), &p.mask, &p.mask, AopConvention::Standard).unwrap())
        .collect();
    let rep = aggregate(reports);
    assert_eq!(rep.aggregate.score_of_means, Some(1.0));
    assert_eq!(rep.aggregate.mean_of_scores, Some(1.0));
}

#[test]
fn all_is_the_union_not_the_mean() {
    // PS predicted perfectly, FH shifted: the union Dice weighs FH by area
    let mut gt = vec![0u8; 32 * 32];
    let mut pred = gt.clone();
    for x in 2..10 {
        gt[3 * 32 + x] = 1;
        pred[3 * 32 + x] = 1;
    }
    for y in 10..30 {
        for x in 10..30 {
            gt[y * 32 + x] = 2;
            pred[y * 32 + x + 2] = 2;
        }
    }
    let (p, g) = (LabelMask::new(32, 32, pred).unwrap(), LabelMask::new(32, 32, gt).unwrap());
    let r = evaluate_pair("u", &p, &g, AopConvention::Standard).unwrap();
    assert_eq!(r.dice.ps, 1.0);
    assert!(r.dice.all != 0.5 * (r.dice.ps + r.dice.fh));
    let all = ConfusionCounts::from_binary(&p.select(&[1, 2]), &g.select(&[1, 2])).unwrap().dice();
    assert_eq!(r.dice.all, all);
}
