use ctxlens::decoding::{apply_strategy, selected_tokens, top1};
use ctxlens::dist::TokenDistribution;
use ctxlens::{DecodingStrategy, TokenId};
use proptest::prelude::*;

/// Continuous random weights: ties have probability zero, so the brute-force
/// optimum is unique.
fn distribution() -> impl Strategy<Value = TokenDistribution> {
    prop::collection::vec(0.001f64..1.0, 1..=12).prop_map(|w| TokenDistribution::from_weights(w).unwrap())
}

fn subsets(n: usize) -> impl Iterator<Item = Vec<TokenId>> {
    (1u32..(1 << n)).map(move |mask| (0..n as TokenId).filter(|i| mask & (1 << i) != 0).collect())
}

fn mass(d: &TokenDistribution, set: &[TokenId]) -> f64 {
    set.iter().map(|&t| d.prob(t)).sum()
}

/// Among all subsets reaching mass `p`, the smallest, heaviest one.
fn brute_nucleus(d: &TokenDistribution, p: f64) -> Vec<TokenId> {
    subsets(d.vocab_size())
        .filter(|s| mass(d, s) >= p - 1e-12)
        .min_by(|a, b| a.len().cmp(&b.len()).then(mass(d, b).total_cmp(&mass(d, a))))
        .unwrap()
}

fn brute_top_k(d: &TokenDistribution, k: usize) -> Vec<TokenId> {
    let k = k.min(d.vocab_size());
    subsets(d.vocab_size())
        .filter(|s| s.len() == k)
        .max_by(|a, b| mass(d, a).total_cmp(&mass(d, b)))
        .unwrap()
}

fn sorted(mut v: Vec<TokenId>) -> Vec<TokenId> {
    v.sort_unstable();
    v
}

fn check_renormalized(d: &TokenDistribution, out: &TokenDistribution, keep: &[TokenId]) -> Result<(), TestCaseError> {
    let m = mass(d, keep);
    for t in 0..d.vocab_size() as TokenId {
        let want = if keep.contains(&t) { d.prob(t) / m } else { 0.0 };
        prop_assert!((out.prob(t) - want).abs() < 1e-12);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn nucleus_matches_subset_scan(d in distribution(), p in 0.05f64..=1.0) {
        let want = sorted(brute_nucleus(&d, p));
        let got = sorted(selected_tokens(&d, DecodingStrategy::Nucleus(p)).unwrap());
        prop_assert_eq!(&got, &want);
        check_renormalized(&d, &apply_strategy(&d, DecodingStrategy::Nucleus(p)).unwrap(), &want)?;
    }

    #[test]
    fn top_k_matches_subset_scan(d in distribution(), k in 1usize..14) {
        let want = sorted(brute_top_k(&d, k));
        let got = sorted(selected_tokens(&d, DecodingStrategy::TopK(k)).unwrap());
        prop_assert_eq!(&got, &want);
        check_renormalized(&d, &apply_strategy(&d, DecodingStrategy::TopK(k)).unwrap(), &want)?;
    }

    #[test]
    fn greedy_keeps_the_argmax(d in distribution()) {
        prop_assert_eq!(selected_tokens(&d, DecodingStrategy::Greedy).unwrap(), vec![top1(&d)]);
    }

    #[test]
    fn idempotent_except_nucleus(d in distribution(), k in 1usize..14, eps in 0.001f64..0.5) {
        for s in [DecodingStrategy::Greedy, DecodingStrategy::TopK(k), DecodingStrategy::Adaptive(eps)] {
            let once = apply_strategy(&d, s).unwrap();
            let twice = apply_strategy(&once, s).unwrap();
            for (a, b) in once.probs().iter().zip(twice.probs()) {
                prop_assert!((a - b).abs() < 1e-12, "{s}");
            }
        }
    }
}

/// Renormalizing a nucleus raises every kept mass, so a second pass can
/// cut deeper than the first.
#[test]
fn nucleus_is_not_idempotent() {
    let d = TokenDistribution::new(vec![0.88, 0.07, 0.05]).unwrap();
    let s = DecodingStrategy::Nucleus(0.9);
    let once = apply_strategy(&d, s).unwrap();
    assert_eq!(once.support().iter().collect::<Vec<_>>(), vec![0, 1]);
    let twice = apply_strategy(&once, s).unwrap();
    assert_eq!(twice.support().iter().collect::<Vec<_>>(), vec![0]);
}
