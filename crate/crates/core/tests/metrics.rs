use picanet::metrics::{
    f_measure, image_pr, mae, max_f_measure, pr_curve, s_measure, MetricsReport, SaliencyMap, BETA2,
};
use proptest::prelude::*;

fn hand_case() -> (SaliencyMap, SaliencyMap) {
    let pred = SaliencyMap::from_u8(3, 3, &[200, 100, 50, 150, 220, 0, 0, 30, 255]).unwrap();
    let gt = SaliencyMap::from_u8(3, 3, &[255, 255, 0, 255, 0, 0, 0, 0, 0]).unwrap();
    (pred, gt)
}

#[test]
fn hand_computed_precision_recall() {
    let (pred, gt) = hand_case();
    let c = image_pr(&pred, &gt).unwrap();
    assert_eq!(c.precision[128], 0.5);
    assert_eq!(c.recall[128], 2.0 / 3.0);
    assert!((f_measure(0.5, 2.0 / 3.0, BETA2) - 0.530_612_244_897_959).abs() < 1e-12);
    assert_eq!(c.precision[60], 0.6);
    assert_eq!(c.recall[60], 1.0);
    assert_eq!(c.precision[0], 3.0 / 9.0);
    assert_eq!(c.recall[0], 1.0);
    assert_eq!(c.precision[255], 0.0);
    assert_eq!(c.recall[255], 0.0);
}

#[test]
fn hand_computed_max_f_and_mae() {
    let (pred, gt) = hand_case();
    let c = image_pr(&pred, &gt).unwrap();
    assert!((max_f_measure(&c, BETA2) - 39.0 / 59.0).abs() < 1e-15);
    assert!((mae(&pred, &gt).unwrap() - 870.0 / 2295.0).abs() < 1e-15);
}

#[test]
fn empty_prediction_and_empty_truth_conventions() {
    let zeros = SaliencyMap::new(2, 2, vec![0.0; 4]).unwrap();
    let c = image_pr(&zeros, &zeros).unwrap();
    // Nothing predicted above level 0 and nothing to find.
    assert_eq!(c.precision[1], 1.0);
    assert_eq!(c.recall[1], 1.0);
    assert_eq!(mae(&zeros, &zeros).unwrap(), 0.0);
}

fn oracle_gt() -> Vec<bool> {
    let mut gt = vec![false; 30];
    for y in 1..4 {
        for x in 2..5 {
            gt[y * 6 + x] = true;
        }
    }
    gt[4 * 6] = true;
    gt
}

fn map_from(f: impl Fn(usize, usize) -> f64) -> SaliencyMap {
    SaliencyMap::new(5, 6, (0..30).map(|i| f(i / 6, i % 6)).collect()).unwrap()
}

#[test]
fn s_measure_matches_reference_implementation() {
    let gt_bits = oracle_gt();
    let gt = map_from(|y, x| if gt_bits[y * 6 + x] { 1.0 } else { 0.0 });
    let cases: [(&str, SaliencyMap, f64); 4] = [
        ("constant_half", map_from(|_, _| 0.5), 0.400000000000000),
        (
            "ramp",
            map_from(|y, x| (y * 6 + x) as f64 / 29.0),
            0.411118275493684,
        ),
        (
            "soft",
            map_from(|y, x| {
                let base = if gt_bits[y * 6 + x] { 0.8 } else { 0.15 };
                (base + 0.05 * (y as f64 * 1.3 + x as f64 * 0.7).sin()).clamp(0.0, 1.0)
            }),
            0.921487739230567,
        ),
        (
            "inverted",
            map_from(|y, x| if gt_bits[y * 6 + x] { 0.0 } else { 1.0 }),
            0.0,
        ),
    ];
    for (name, pred, want) in cases {
        let got = s_measure(&pred, &gt).unwrap();
        assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
    }
}

#[test]
fn report_json_and_csv() {
    let (pred, gt) = hand_case();
    let r = MetricsReport::compute(&["a".into()], &[pred], &[gt]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["images"], 1);
    assert_eq!(v["pr_curve"].as_array().unwrap().len(), 256);
    assert!((v["maxF"].as_f64().unwrap() - 39.0 / 59.0).abs() < 1e-15);
    assert!(r.to_csv().starts_with("image,maxF,MAE,S_m\na,"));
    assert!(r.to_svg().starts_with("<svg"));
}

fn map_strategy() -> impl Strategy<Value = (SaliencyMap, SaliencyMap)> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0.0f64..=1.0, h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(p, g)| {
                let gt = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                (
                    SaliencyMap::new(h, w, p).unwrap(),
                    SaliencyMap::new(h, w, gt).unwrap(),
                )
            })
    })
}

proptest! {
    #[test]
    fn mae_is_symmetric_and_bounded((p, g) in map_strategy()) {
        let a = mae(&p, &g).unwrap();
        prop_assert_eq!(a, mae(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(mae(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn ground_truth_scores_perfectly((_p, g) in map_strategy()) {
        prop_assert!(s_measure(&g, &g).unwrap() >= 1.0 - 1e-6);
        prop_assert!((max_f_measure(&image_pr(&g, &g).unwrap(), BETA2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_never_increases_with_threshold((p, g) in map_strategy()) {
        let c = image_pr(&p, &g).unwrap();
        for t in 1..256 {
            prop_assert!(c.recall[t] <= c.recall[t - 1]);
        }
        let f = max_f_measure(&c, BETA2);
        prop_assert!((0.0..=1.0).contains(&f));
        let s = s_measure(&p, &g).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn dataset_curve_ignores_image_order(pairs in proptest::collection::vec(map_strategy(), 1..5), rot in 0usize..5) {
        let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let k = rot % preds.len();
        let mut p2 = preds.clone();
        let mut g2 = gts.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        let a = pr_curve(&preds, &gts).unwrap();
        let b = pr_curve(&p2, &g2).unwrap();
        for t in 0..256 {
            prop_assert!((a.precision[t] - b.precision[t]).abs() < 1e-12);
            prop_assert!((a.recall[t] - b.recall[t]).abs() < 1e-12);
        }
    }
}
