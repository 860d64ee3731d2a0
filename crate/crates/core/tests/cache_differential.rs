use std::num::NonZeroUsize;

use ctxlens::oracle::{CachedOracle, CountingOracle, MockOracle, Oracle, OracleRequest};
use ctxlens::{seed, TokenId};
use rand::Rng;

#[test]
fn cached_results_equal_uncached() {
    let plain = MockOracle::planted(40, 12, 3, 0.9).unwrap();
    let cached = CachedOracle::new(CountingOracle::new(plain.clone()), NonZeroUsize::new(64).unwrap());
    let mut rng = seed::rng(99);
    // a small pool of prefixes so that most calls repeat
    let pool: Vec<Vec<TokenId>> = (0..40)
        .map(|_| (0..rng.random_range(1..30)).map(|_| rng.random_range(0..40)).collect())
        .collect();
    for _ in 0..1000 {
        let tokens = &pool[rng.random_range(0..pool.len())];
        let req = OracleRequest::full(tokens);
        assert_eq!(
            cached.next_token_distribution(&req).unwrap(),
            plain.next_token_distribution(&req).unwrap()
        );
    }
    assert!(cached.inner().calls() <= pool.len() as u64);
}
