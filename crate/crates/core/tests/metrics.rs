//! Dice, volume difference, detection AUC and report aggregation.

use mmis::metrics::{avd, detection_auc, dice_score, evaluate_predictions, VolumeMasks};
use proptest::prelude::*;

fn grid(rows: [&str; 4]) -> Vec<bool> {
    rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()
}

fn with_count(n: usize, len: usize) -> Vec<bool> {
    (0..len).map(|i| i < n).collect()
}

#[test]
fn dice_four_by_four_toy() {
    let p = grid(["##..", "....", "....", "...."]);
    let g = grid(["##..", "##..", "....", "...."]);
    let d = dice_score(&p, &g).unwrap();
    assert!((d - 2.0 * 2.0 / 6.0).abs() < 1e-12);
    assert_eq!(format!("{d:.4}"), "0.6667");
}

#[test]
fn avd_counts() {
    let a = avd(&with_count(30, 100), &with_count(50, 100), 0.001).unwrap();
    assert!((a.mm3 - 0.02).abs() < 1e-15);
    assert!((a.normalized - 0.2).abs() < 1e-15);
    assert_eq!(avd(&with_count(7, 9), &with_count(7, 9), 2.0).unwrap().mm3, 0.0);
    assert!(avd(&with_count(1, 2), &with_count(1, 2), 0.0).is_err());
}

#[test]
fn auc_pairwise_example() {
    let auc = detection_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
    assert_eq!(auc, 0.75);
}

#[test]
fn self_evaluation_is_perfect() {
    let vols = |masks: &[Vec<bool>]| -> Vec<VolumeMasks> {
        masks
            .iter()
            .map(|m| VolumeMasks {
                pred: m.clone(),
                gt: m.clone(),
                voxel_volume: 0.5,
            })
            .collect()
    };
    let organ = vols(&[with_count(5, 16), with_count(9, 16)]);
    let lesion = vols(&[with_count(0, 16), with_count(3, 16), with_count(4, 16)]);
    let r = evaluate_predictions(&[("d/organ".into(), organ), ("d/lesion".into(), lesion)]).unwrap();
    for c in &r.classes {
        assert_eq!((c.ds, c.avd_mm3, c.avd_norm), (1.0, 0.0, 0.0), "{}", c.name);
    }
    assert_eq!(r.class("d/lesion").unwrap().auc, Some(1.0));
    // every organ volume is positive, so its AUC is undefined
    assert_eq!(r.class("d/organ").unwrap().auc, None);
    assert_eq!(r.mean_auc, Some(1.0));
}

#[test]
fn empty_prediction_on_nonempty_truth_scores_zero() {
    assert_eq!(dice_score(&with_count(0, 8), &with_count(3, 8)).unwrap(), 0.0);
}

#[test]
fn three_volume_report_equals_hand_count() {
    // (pred count, gt count, overlap) per volume over 10 voxels
    let spec = [(4usize, 4usize, 4usize), (2, 5, 1), (3, 0, 0)];
    let vols: Vec<VolumeMasks> = spec
        .iter()
        .map(|&(p, g, o)| {
            let pred: Vec<bool> = (0..10).map(|i| i < p).collect();
            // overlap first, then gt-only voxels from the end
            let gt: Vec<bool> = (0..10).map(|i| i < o || (i >= 10 - (g - o) && g > o)).collect();
            VolumeMasks {
                pred,
                gt,
                voxel_volume: 2.0,
            }
        })
        .collect();
    let r = evaluate_predictions(&[("c".into(), vols)]).unwrap();
    let c = &r.classes[0];
    // dice: 1, 2*1/7, 0 ; avd voxels: 0, 3, 3
    let ds = (1.0 + 2.0 / 7.0 + 0.0) / 3.0;
    assert!((c.ds - ds).abs() < 1e-12);
    assert!((c.avd_mm3 - (0.0 + 6.0 + 6.0) / 3.0).abs() < 1e-12);
    assert!((c.avd_norm - (0.0 + 0.3 + 0.3) / 3.0).abs() < 1e-12);
    // scores 4, 2 (positives) vs 3 (negative): one of two pairs concordant
    assert_eq!(c.auc, Some(0.5));
    assert_eq!(c.volumes, 3);
    assert_eq!(r.mean_ds, c.ds);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("class,ds,avd_mm3,avd_norm,auc\nc,"));
}

fn mask_pair() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dice_symmetric_and_bounded((p, g) in mask_pair()) {
        let a = dice_score(&p, &g).unwrap();
        prop_assert_eq!(a, dice_score(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        if p.iter().any(|&b| b) {
            prop_assert_eq!(a == 1.0, p == g);
        }
        let n = avd(&p, &g, 1.5).unwrap().normalized;
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn auc_invariant_under_monotone_maps(
        scores in prop::collection::vec(-5.0f64..5.0, 2..20),
        flags in prop::collection::vec(any::<bool>(), 20),
    ) {
        let mut labels: Vec<bool> = flags[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let base = detection_auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(base, detection_auc(&mapped, &labels).unwrap());
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert_eq!(base, detection_auc(&cubed, &labels).unwrap());
    }
}
