use bet_core::syntax::{build_hint_targets, extract_hint, parse_treebank, DependencyTree};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random tree as one-based heads (0 = root).
fn random_heads(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut heads = vec![0; n];
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        heads[order[k]] = parent + 1;
    }
    heads
}

/// Ancestor distances by transitive closure; hint = nearest ancestor of
/// `t + 1` that sits before it, else `t`.
fn oracle_hint(heads: &[usize], t: usize) -> usize {
    let n = heads.len();
    let mut dist = vec![vec![usize::MAX; n]; n];
    for (i, &h) in heads.iter().enumerate() {
        if h > 0 {
            dist[i][h - 1] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if dist[i][k] != usize::MAX && dist[k][j] != usize::MAX {
                    dist[i][j] = dist[i][j].min(dist[i][k] + dist[k][j]);
                }
            }
        }
    }
    let next = t + 1;
    (0..next)
        .filter(|&j| dist[next][j] != usize::MAX)
        .min_by_key(|&j| dist[next][j])
        .unwrap_or(t)
}

fn tree(heads: &[usize]) -> DependencyTree {
    let tokens = (0..heads.len()).map(|i| format!("w{i}")).collect();
    DependencyTree::from_one_based(tokens, heads).unwrap()
}

#[test]
fn matches_closure_oracle_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut fallbacks = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=12);
        let heads = random_heads(&mut rng, n);
        let t = tree(&heads);
        let targets = build_hint_targets(&t).unwrap();
        for i in 0..n - 1 {
            let want = oracle_hint(&heads, i);
            assert_eq!(extract_hint(&t, i).unwrap(), want, "heads {heads:?} t {i}");
            assert_eq!(targets.target_index(i), Some(want));
            fallbacks += usize::from(want == i && heads[i + 1] != i + 1);
        }
        assert_eq!(targets.target_index(n - 1), None);
    }
    assert!(fallbacks > 0, "fallback path never exercised");
}

#[test]
fn treebank_text_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trees: Vec<DependencyTree> = (0..20)
        .map(|_| {
            let n = rng.gen_range(1..=9);
            tree(&random_heads(&mut rng, n))
        })
        .collect();
    let text: Vec<String> = trees.iter().map(|t| t.to_string()).collect();
    let back = parse_treebank(&text.join("\n")).unwrap();
    assert_eq!(back, trees);
}

proptest! {
    #[test]
    fn hints_point_backwards(seed in any::<u64>(), n in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = tree(&random_heads(&mut rng, n));
        for i in 0..n - 1 {
            let h = extract_hint(&t, i).unwrap();
            prop_assert!(h <= i);
        }
    }
}
