use bet_core::bet::DiagPolicy;
use bet_core::harness::{Model, ModelConfig, Variant};
use bet_core::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits(model: &Model, ids: &[usize]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &[ids], false).unwrap();
    let v = tape.value(f.logits);
    (0..v.rows()).map(|i| v.row(i).to_vec()).collect()
}

fn config(variant: Variant, policy: DiagPolicy) -> ModelConfig {
    ModelConfig {
        variant,
        diag_policy: policy,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 7,
        max_seq_len: 10,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn future_tokens_never_reach_earlier_logits(
        seed in any::<u64>(),
        ids in prop::collection::vec(0usize..7, 2..10),
        pos in any::<prop::sample::Index>(),
        replacement in 0usize..7,
        kind in 0usize..4,
    ) {
        let (variant, policy) = [
            (Variant::Standard, DiagPolicy::Keep),
            (Variant::Standard, DiagPolicy::MaskOut),
            (Variant::BetSf, DiagPolicy::MaskOut),
            (Variant::BetSf, DiagPolicy::Keep),
        ][kind];
        let model = Model::init(&config(variant, policy), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let p = pos.index(ids.len());
        let mut other = ids.clone();
        other[p] = replacement;
        let (a, b) = (logits(&model, &ids), logits(&model, &other));
        for i in 0..p {
            let diff = a[i].iter().zip(&b[i]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12, "row {i} moved by {diff}");
        }
    }

    #[test]
    fn batching_matches_single_sequences(
        seed in any::<u64>(),
        a in prop::collection::vec(0usize..7, 1..10),
        b in prop::collection::vec(0usize..7, 1..10),
    ) {
        let model = Model::init(&config(Variant::BetSf, DiagPolicy::MaskOut), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &[&a, &b], false).unwrap();
        let v = tape.value(f.logits);
        let solo: Vec<Vec<f64>> = logits(&model, &a).into_iter().chain(logits(&model, &b)).collect();
        for (i, row) in solo.iter().enumerate() {
            for (x, y) in v.row(i).iter().zip(row) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
