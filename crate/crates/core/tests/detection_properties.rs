use ctxlens::detection::{label_for, roc_auc, scenario, youden_threshold, Label, Scenario};
use ctxlens::dist::{SupportSet, TokenDistribution};
use proptest::prelude::*;

fn labelled(max: usize) -> impl Strategy<Value = Vec<(f64, Label)>> {
    // few distinct values so ties are common
    prop::collection::vec(((0u8..12).prop_map(|v| v as f64 / 4.0), any::<bool>()), 2..=max)
        .prop_map(|v| {
            v.into_iter()
                .map(|(s, long)| (s, if long { Label::Long } else { Label::Short }))
                .collect::<Vec<_>>()
        })
        .prop_filter("both classes", |v| {
            v.iter().any(|x| x.1 == Label::Long) && v.iter().any(|x| x.1 == Label::Short)
        })
}

/// J at every cut of the sorted scores, including "all long" and "none".
fn brute_youden(scores: &[(f64, Label)]) -> f64 {
    let pos = scores.iter().filter(|s| s.1 == Label::Long).count() as f64;
    let neg = scores.len() as f64 - pos;
    let mut candidates: Vec<f64> = scores.iter().map(|s| s.0).collect();
    candidates.push(f64::INFINITY);
    candidates
        .into_iter()
        .map(|theta| {
            let tp = scores.iter().filter(|s| s.0 >= theta && s.1 == Label::Long).count() as f64;
            let fp = scores.iter().filter(|s| s.0 >= theta && s.1 == Label::Short).count() as f64;
            tp / pos - fp / neg
        })
        .fold(0.0, f64::max)
}

fn brute_auc(scores: &[(f64, Label)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in scores.iter().filter(|s| s.1 == Label::Long) {
        for b in scores.iter().filter(|s| s.1 == Label::Short) {
            pairs += 1.0;
            wins += if a.0 > b.0 { 1.0 } else if a.0 == b.0 { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn youden_matches_brute_force(scores in labelled(50)) {
        let y = youden_threshold(&scores).unwrap();
        prop_assert!((y.j - brute_youden(&scores)).abs() < 1e-12);
        // the reported threshold realizes the reported rates
        let pos = scores.iter().filter(|s| s.1 == Label::Long).count() as f64;
        let tp = scores.iter().filter(|s| label_for(s.0, y.theta) == Label::Long && s.1 == Label::Long).count() as f64;
        prop_assert!((tp / pos - y.tpr).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_count_and_ignores_monotone_maps(scores in labelled(50)) {
        let auc = roc_auc(&scores).unwrap();
        prop_assert!((auc - brute_auc(&scores)).abs() < 1e-12);
        let mapped: Vec<(f64, Label)> = scores.iter().map(|&(s, l)| ((3.0 * s).exp() - 7.0, l)).collect();
        prop_assert!((roc_auc(&mapped).unwrap() - auc).abs() < 1e-12);
    }

    #[test]
    fn classification_monotone_in_tau(score in 0.0f64..0.84, t1 in 0.0f64..0.84, t2 in 0.0f64..0.84) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if label_for(score, lo) == Label::Short {
            prop_assert_eq!(label_for(score, hi), Label::Short);
        }
    }
}

#[test]
fn all_equal_scores_give_zero_j() {
    let s = vec![(0.3, Label::Long), (0.3, Label::Short), (0.3, Label::Long)];
    assert_eq!(youden_threshold(&s).unwrap().j, 0.0);
}

/// Every combination of: empty B, t̂ in B, t̂ holding the largest
/// probability within B.
#[test]
fn scenario_case_analysis() {
    let d = TokenDistribution::new(vec![0.1, 0.5, 0.3, 0.1]).unwrap();
    let set = |ids: &[u32]| ids.iter().copied().collect::<SupportSet>();
    for t_hat in 0..4u32 {
        for mask in 0u32..16 {
            let ids: Vec<u32> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
            let b = set(&ids);
            let got = scenario(t_hat, &b, &d);
            let want = if ids.is_empty() {
                Scenario::Neutral
            } else if !ids.contains(&t_hat) {
                Scenario::Worst
            } else if ids.iter().all(|&u| d.prob(u) <= d.prob(t_hat)) {
                Scenario::Best
            } else {
                Scenario::Bad
            };
            assert_eq!(got, want, "t_hat={t_hat} B={ids:?}");
        }
    }
}
