use super::*;
use crate::rng::stream;
use crate::synth::{self, ubc_analog, DatasetSpec, RenderConfig};
use rand::Rng;

// ── independent PR oracle ────────────────────────────────────────────
// Same metric, different route: no envelope precompute, direct max scan
// over raw PR points at each of the 101 recall levels.

fn oracle_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn oracle_ap(
    detections: &[DetectionRecord],
    gt: &BTreeMap<usize, Vec<Vec<bool>>>,
    thresholds: &[f64],
) -> Option<f64> {
    let total_gt: usize = gt.values().map(Vec::len).sum();
    if total_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.partial_cmp(&detections[a].score).unwrap());

    let mut ap_total = 0.0;
    for &tau in thresholds {
        let mut taken: BTreeMap<usize, Vec<bool>> =
            gt.iter().map(|(&i, g)| (i, vec![false; g.len()])).collect();
        let mut prec = vec![];
        let mut rec = vec![];
        let mut tp = 0.0;
        for (k, &d) in order.iter().enumerate() {
            let det = &detections[d];
            let mut best_g = None;
            let mut best_iou = tau;
            if let Some(gts) = gt.get(&det.image) {
                for (gix, gmask) in gts.iter().enumerate() {
                    if taken[&det.image][gix] {
                        continue;
                    }
                    let iou = oracle_iou(&det.mask, gmask);
                    if iou >= best_iou && (best_g.is_none() || iou > best_iou) {
                        best_iou = iou;
                        best_g = Some(gix);
                    }
                }
            }
            if let Some(gix) = best_g {
                taken.get_mut(&det.image).unwrap()[gix] = true;
                tp += 1.0;
            }
            prec.push(tp / (k + 1) as f64);
            rec.push(tp / total_gt as f64);
        }
        let mut acc = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let mut best = 0.0;
            for k in 0..prec.len() {
                if rec[k] >= r - 1e-12 && prec[k] > best {
                    best = prec[k];
                }
            }
            acc += best;
        }
        ap_total += acc / 101.0;
    }
    Some(ap_total / thresholds.len() as f64)
}

// ── mask IoU ─────────────────────────────────────────────────────────

#[test]
fn iou_identical_disjoint_and_partial() {
    let a = vec![true, true, true, true, false, false, false, false];
    let b = vec![false, false, false, false, true, true, true, true];
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
    // 2 px overlap between two 4 px masks: 2 / 6
    let c = vec![false, false, true, true, true, true, false, false];
    assert!((mask_iou(&a, &c).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    // empty vs empty is 0 by convention
    let e = vec![false; 8];
    assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
    assert!(mask_iou(&a, &vec![true; 4]).is_err());
}

// ── average precision ────────────────────────────────────────────────

fn det(image: usize, score: f64, mask: &[bool]) -> DetectionRecord {
    DetectionRecord { image, score, mask: mask.to_vec() }
}

#[test]
fn perfect_detections_score_full_ap() {
    let m1 = vec![true, true, false, false];
    let m2 = vec![false, false, true, true];
    let mut gt = BTreeMap::new();
    gt.insert(0, vec![m1.clone(), m2.clone()]);
    let dets = vec![det(0, 0.9, &m1), det(0, 0.8, &m2)];
    let ap = average_precision(&dets, &gt, &default_iou_thresholds()).unwrap().unwrap();
    assert!((ap - 1.0).abs() < 1e-12);
}

#[test]
fn no_detections_scores_zero() {
    let mut gt = BTreeMap::new();
    gt.insert(0, vec![vec![true, false]]);
    let ap = average_precision(&[], &gt, &default_iou_thresholds()).unwrap().unwrap();
    assert_eq!(ap, 0.0);
}

#[test]
fn class_without_ground_truth_is_excluded() {
    let gt = BTreeMap::new();
    let dets = vec![det(0, 0.9, &[true, false])];
    assert!(average_precision(&dets, &gt, &default_iou_thresholds()).unwrap().is_none());
}

#[test]
fn three_detections_two_gt_matches_hand_curve() {
    let gt1 = vec![true, true, true, true, false, false, false, false, false, false, false, false];
    let gt2 = vec![false, false, false, false, false, false, false, false, true, true, true, true];
    let fp = vec![false, false, false, false, true, true, true, true, false, false, false, false];
    let mut gt = BTreeMap::new();
    gt.insert(0, vec![gt1.clone(), gt2.clone()]);
    let dets = vec![det(0, 0.9, &gt1), det(0, 0.8, &fp), det(0, 0.7, &gt2)];
    let ap = average_precision(&dets, &gt, &default_iou_thresholds()).unwrap().unwrap();
    // ranks: TP (p=1, r=.5), FP, TP (p=2/3, r=1)
    let want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((ap - want).abs() < 1e-9, "{ap} vs {want}");
}

#[test]
fn ap_matches_brute_force_oracle_on_random_sets() {
    let mut rng = stream(1, "ap-oracle");
    let thresholds = default_iou_thresholds();
    let mut compared = 0;
    for _ in 0..50 {
        let n_images = rng.random_range(1..=3usize);
        let mut gt = BTreeMap::new();
        let mut dets = vec![];
        for img in 0..n_images {
            let n_gt = rng.random_range(0..=3usize);
            let gts: Vec<Vec<bool>> = (0..n_gt)
                .map(|_| (0..16).map(|_| rng.random::<f64>() < 0.4).collect())
                .collect();
            if !gts.is_empty() {
                gt.insert(img, gts.clone());
            }
            for _ in 0..rng.random_range(0..=5usize) {
                // half the detections perturb a gt mask, half are noise
                let mask: Vec<bool> = if !gts.is_empty() && rng.random::<f64>() < 0.5 {
                    let base = &gts[rng.random_range(0..gts.len())];
                    base.iter().map(|&b| if rng.random::<f64>() < 0.15 { !b } else { b }).collect()
                } else {
                    (0..16).map(|_| rng.random::<f64>() < 0.4).collect()
                };
                dets.push(det(img, rng.random::<f64>(), &mask));
            }
        }
        let got = average_precision(&dets, &gt, &thresholds).unwrap();
        let want = oracle_ap(&dets, &gt, &thresholds);
        match (got, want) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                compared += 1;
            }
            (None, None) => {}
            _ => panic!("oracle and engine disagree on exclusion"),
        }
    }
    assert!(compared >= 30);
}

#[test]
fn ap_is_invariant_under_monotone_score_transforms() {
    let mut rng = stream(2, "monotone");
    let thresholds = default_iou_thresholds();
    let mut gt = BTreeMap::new();
    gt.insert(0, vec![(0..16).map(|i| i < 6).collect::<Vec<bool>>()]);
    gt.insert(1, vec![(0..16).map(|i| i >= 10).collect::<Vec<bool>>()]);
    let dets: Vec<DetectionRecord> = (0..8)
        .map(|i| {
            let mask: Vec<bool> = (0..16).map(|_| rng.random::<f64>() < 0.4).collect();
            det(i % 2, 0.1 + 0.1 * i as f64, &mask)
        })
        .collect();
    let base = average_precision(&dets, &gt, &thresholds).unwrap().unwrap();
    let transformed: Vec<DetectionRecord> = dets
        .iter()
        .map(|d| det(d.image, (d.score * 3.0).tanh(), &d.mask))
        .collect();
    let mapped = average_precision(&transformed, &gt, &thresholds).unwrap().unwrap();
    assert!((base - mapped).abs() < 1e-12);
}

#[test]
fn adding_a_top_scoring_true_positive_never_hurts() {
    let mut rng = stream(3, "monotone-tp");
    let thresholds = default_iou_thresholds();
    for _ in 0..20 {
        let gt_mask: Vec<bool> = (0..16).map(|_| rng.random::<f64>() < 0.5).collect();
        let extra: Vec<bool> = (0..16).map(|i| i < 8).collect();
        let mut gt = BTreeMap::new();
        gt.insert(0, vec![gt_mask, extra.clone()]);
        let dets: Vec<DetectionRecord> = (0..4)
            .map(|_| {
                let mask: Vec<bool> = (0..16).map(|_| rng.random::<f64>() < 0.4).collect();
                det(0, rng.random::<f64>() * 0.8, &mask)
            })
            .collect();
        let before = average_precision(&dets, &gt, &thresholds).unwrap().unwrap();
        let mut with_tp = dets.clone();
        with_tp.push(det(0, 0.99, &extra));
        let after = average_precision(&with_tp, &gt, &thresholds).unwrap().unwrap();
        assert!(after >= before - 1e-12);
    }
}

// ── metric arithmetic ────────────────────────────────────────────────

#[test]
fn relative_drop_matches_published_rows() {
    assert!((relative_drop(15.0, 4.0) - 0.733).abs() < 1e-3);
    assert!((relative_drop(16.8, 7.1) - 0.577).abs() < 1e-3);
    assert!(relative_drop(10.0, 10.0).abs() < 1e-8);
}

#[test]
fn and_efficiency_cases() {
    let mut groups = BTreeMap::new();
    groups.insert("roof".to_string(), 7.5);
    groups.insert("use".to_string(), 9.0);
    assert!((and_efficiency(4.0, &groups).unwrap() - 0.5333333).abs() < 1e-6);

    let mut equal = BTreeMap::new();
    equal.insert("roof".to_string(), 5.0);
    assert!((and_efficiency(5.0, &equal).unwrap() - 1.0).abs() < 1e-12);

    let mut pair = BTreeMap::new();
    pair.insert("g1".to_string(), 8.0);
    pair.insert("g2".to_string(), 6.0);
    assert!((and_efficiency(3.0, &pair).unwrap() - 0.5).abs() < 1e-12);

    let mut zero = BTreeMap::new();
    zero.insert("g1".to_string(), 0.0);
    assert!(matches!(and_efficiency(1.0, &zero), Err(EvalError::UndefinedAndEfficiency)));
}

// ── protocol ─────────────────────────────────────────────────────────

fn tiny_dataset() -> synth::Dataset {
    let spec = DatasetSpec {
        space: ubc_analog(),
        train_scenes: 0,
        test_seen_scenes: 8,
        test_unseen_scenes: 12,
        seed: 31,
        render: RenderConfig::default(),
    };
    synth::generate(&spec).unwrap()
}

#[test]
fn oracle_model_scores_perfectly() {
    let ds = tiny_dataset();
    let report = evaluate(&OracleDetector, &ds, &ProtocolConfig::default()).unwrap();
    assert!((report.ap_seen - 100.0).abs() < 1e-9);
    assert!((report.ap_unseen - 100.0).abs() < 1e-9);
    assert!(report.r_d.abs() < 1e-6);
    assert!((report.and_eff.unwrap() - 1.0).abs() < 1e-9);
    assert!(!report.and_eff_undefined);
}

#[test]
fn silent_model_flags_undefined_and_efficiency() {
    let ds = tiny_dataset();
    let report = evaluate(&SilentDetector, &ds, &ProtocolConfig::default()).unwrap();
    assert_eq!(report.ap_seen, 0.0);
    assert_eq!(report.ap_unseen, 0.0);
    assert!(report.and_eff.is_none());
    assert!(report.and_eff_undefined);
}

#[test]
fn report_metrics_recompute_from_their_own_fields() {
    let ds = tiny_dataset();
    let report = evaluate(&OracleDetector, &ds, &ProtocolConfig::default()).unwrap();
    assert_eq!(report.r_d.to_bits(), relative_drop(report.ap_seen, report.ap_unseen).to_bits());
    assert_eq!(
        report.and_eff.unwrap().to_bits(),
        and_efficiency(report.ap_unseen, &report.per_group_ap).unwrap().to_bits()
    );
}

#[test]
fn missing_split_is_a_protocol_error() {
    let spec = DatasetSpec {
        space: ubc_analog(),
        train_scenes: 0,
        test_seen_scenes: 4,
        test_unseen_scenes: 0,
        seed: 5,
        render: RenderConfig::default(),
    };
    let ds = synth::generate(&spec).unwrap();
    assert!(matches!(
        evaluate(&OracleDetector, &ds, &ProtocolConfig::default()),
        Err(EvalError::MissingSplit(_))
    ));
}

#[test]
fn table_column_order_is_unseen_seen_drop_andeff() {
    let ds = tiny_dataset();
    let report = evaluate(&OracleDetector, &ds, &ProtocolConfig::default()).unwrap();
    let table = report.table();
    let header = table.lines().next().unwrap();
    let cols: Vec<usize> = ["AP_unseen", "AP_seen", "R_d", "AND-Eff"]
        .iter()
        .map(|c| header.find(c).expect("column present"))
        .collect();
    assert!(cols.windows(2).all(|w| w[0] < w[1]));
}
