use ctxlens::boosting::{cad_step, cad_weights, taboo_step, BoostConfig};
use ctxlens::decoding::apply_strategy;
use ctxlens::dist::TokenDistribution;
use ctxlens::oracle::{MockOracle, Oracle, OracleRequest};
use ctxlens::{DecodingStrategy, TokenId};
use proptest::prelude::*;

const SEQ: [TokenId; 48] = [0; 48];

fn distribution(n: usize) -> impl Strategy<Value = TokenDistribution> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(|w| TokenDistribution::from_weights(w).unwrap())
}

fn pair() -> impl Strategy<Value = (TokenDistribution, TokenDistribution)> {
    (2usize..10).prop_flat_map(|n| (distribution(n), distribution(n)))
}

fn switch(short: TokenDistribution, full: TokenDistribution) -> MockOracle {
    MockOracle::switch(33, short, full).unwrap()
}

fn cfg(lambda: f64, p: f64) -> BoostConfig {
    BoostConfig {
        gamma: 0.0,
        epsilon: 0.01,
        strategy: DecodingStrategy::Nucleus(p),
        ..BoostConfig::with_lambda(lambda)
    }
}

fn rank(d: &TokenDistribution, t: TokenId) -> usize {
    d.probs().iter().filter(|&&q| q > d.prob(t)).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn boosted_ranks_never_worsen((short, full) in pair(), l1 in 1.0f64..20.0, dl in 0.0f64..20.0, p in 0.5f64..=1.0) {
        let m = switch(short, full);
        let (a, report) = taboo_step(&SEQ, &cfg(l1, p), &m).unwrap();
        let (b, _) = taboo_step(&SEQ, &cfg(l1 + dl, p), &m).unwrap();
        prop_assert!((b.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for t in report.boosted_set.iter() {
            prop_assert!(b.prob(t) > 0.0);
            prop_assert!(rank(&b, t) <= rank(&a, t));
        }
    }

    #[test]
    fn unit_lambda_is_vanilla((short, full) in pair(), p in 0.5f64..=1.0) {
        let m = switch(short, full.clone());
        let (post, _) = taboo_step(&SEQ, &cfg(1.0, p), &m).unwrap();
        let vanilla = apply_strategy(&full, DecodingStrategy::Nucleus(p)).unwrap();
        prop_assert_eq!(post, vanilla);
    }

    #[test]
    fn closed_gate_is_vanilla((short, full) in pair(), lambda in 1.0f64..50.0) {
        let m = switch(short, full.clone());
        let c = BoostConfig { gamma: f64::INFINITY, ..cfg(lambda, 0.9) };
        let (post, report) = taboo_step(&SEQ, &c, &m).unwrap();
        prop_assert!(report.boosted_set.is_empty());
        prop_assert_eq!(post, apply_strategy(&full, DecodingStrategy::Nucleus(0.9)).unwrap());
    }

    #[test]
    fn huge_lambda_promotes_the_best_boosted_token((short, full) in pair()) {
        let m = switch(short, full.clone());
        let (post, report) = taboo_step(&SEQ, &cfg(1e9, 1.0), &m).unwrap();
        if let Some(best) = report.boosted_set.iter().max_by(|&a, &b| full.prob(a).total_cmp(&full.prob(b))) {
            prop_assert_eq!(ctxlens::decoding::top1(&post), best);
        }
    }

    #[test]
    fn cad_matches_log_space((short, full) in pair(), alpha in 0.0f64..3.0) {
        let got = cad_weights(&full, &short, alpha).unwrap();
        let logits: Vec<f64> = full
            .probs()
            .iter()
            .zip(short.probs())
            .map(|(f, s)| (1.0 + alpha) * f.ln() - alpha * s.max(1e-6).ln())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for (g, l) in got.probs().iter().zip(&logits) {
            prop_assert!((g - (l - top).exp() / z).abs() < 1e-9);
        }
    }

    #[test]
    fn cad_without_contrast_is_vanilla((short, full) in pair(), p in 0.5f64..=1.0) {
        let m = switch(short, full.clone());
        let s = DecodingStrategy::Nucleus(p);
        let got = cad_step(&SEQ, 0.0, s, 32, &m).unwrap();
        let want = apply_strategy(&m.next_token_distribution(&OracleRequest::full(&SEQ)).unwrap(), s).unwrap();
        for (a, b) in got.probs().iter().zip(want.probs()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cad_is_continuous_in_alpha((short, full) in pair(), alpha in 0.0f64..3.0) {
        let a = cad_weights(&full, &short, alpha).unwrap();
        let b = cad_weights(&full, &short, alpha + 1e-6).unwrap();
        let l1: f64 = a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!(l1 <= 1e-3);
    }
}

#[test]
fn hand_example() {
    let m = switch(
        TokenDistribution::new(vec![0.6, 0.3, 0.1]).unwrap(),
        TokenDistribution::new(vec![0.2, 0.5, 0.3]).unwrap(),
    );
    let c = BoostConfig { epsilon: 0.05, ..cfg(2.0, 1.0) };
    let (post, report) = taboo_step(&SEQ, &c, &m).unwrap();
    assert_eq!(report.boosted_set.iter().collect::<Vec<_>>(), vec![1, 2]);
    for (got, want) in post.probs().iter().zip([1.0 / 9.0, 5.0 / 9.0, 3.0 / 9.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn cad_closed_form() {
    let full = TokenDistribution::new(vec![0.5, 0.5]).unwrap();
    let short = TokenDistribution::new(vec![0.9, 0.1]).unwrap();
    let out = cad_weights(&full, &short, 1.0).unwrap();
    assert!((out.prob(0) - 0.1).abs() < 1e-12);
    assert!((out.prob(1) - 0.9).abs() < 1e-12);
}
