use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surgphase_core::autograd::Graph;
use surgphase_core::encoder::{BackboneSpec, LogitHead};
use surgphase_core::prompt::{interpolate_first_token, interpolation_plan, PromptBank, PromptBankConfig};
use surgphase_core::stage1::Stage1Model;
use surgphase_core::Tensor;

fn sorted_refs(phases: usize, picks: &[usize]) -> Vec<usize> {
    let mut r: Vec<usize> = picks.iter().map(|&x| 1 + x % phases).collect();
    r.push(1);
    r.push(phases);
    r.sort_unstable();
    r.dedup();
    r
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn interpolation_is_convex_and_recovers_references(
        phases in 2usize..12,
        picks in proptest::collection::vec(0usize..12, 0..4),
        seed in any::<u64>(),
    ) {
        let refs = sorted_refs(phases, &picks);
        let e = Tensor::randn([refs.len(), 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for (i, &r) in refs.iter().enumerate() {
            prop_assert_eq!(interpolate_first_token(&e, &refs, r), e.row(i).to_vec());
        }
        for term in interpolation_plan(phases, &refs) {
            prop_assert!((0.0..=1.0).contains(&term.lambda));
            prop_assert!(term.hi == term.lo || term.hi == term.lo + 1);
        }
    }

    #[test]
    fn tokens_move_monotonically_between_references(
        phases in 4usize..16,
        picks in proptest::collection::vec(0usize..16, 0..3),
        seed in any::<u64>(),
    ) {
        let refs = sorted_refs(phases, &picks);
        let e = Tensor::randn([refs.len(), 6], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for (i, w) in refs.windows(2).enumerate() {
            let (lo, hi) = (w[0], w[1]);
            let (a, b) = (e.row(i), e.row(i + 1));
            for p in lo + 1..hi {
                let tp = interpolate_first_token(&e, &refs, p);
                let lambda = (p - lo) as f64 / (hi - lo) as f64;
                for k in 0..6 {
                    prop_assert!((tp[k] - (a[k] + lambda * (b[k] - a[k]))).abs() < 1e-12);
                }
                for q in p + 1..hi {
                    let tq = interpolate_first_token(&e, &refs, q);
                    prop_assert!(norm(&tp, a) < norm(&tq, a));
                }
            }
        }
    }

    #[test]
    fn gradient_reaches_only_bracketing_tokens(
        phases in 3usize..10,
        n_extra in 0usize..2,
        p_pick in 0usize..10,
        ordinal in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let p = 1 + p_pick % phases;
        let cfg = if ordinal {
            PromptBankConfig::ordinal(phases, 2, 4, (2 + n_extra).min(phases)).unwrap()
        } else {
            PromptBankConfig::independent(phases, 2, 4)
        };
        let bank = PromptBank::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed), &|_| None).unwrap();
        let mut g = Graph::new();
        let tokens = bank.materialize(&mut g, p, true).unwrap();
        let w = Tensor::randn([3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let wv = g.constant(w);
        let proj = g.matmul_nt(tokens, wv);
        let loss = g.sum(proj);
        let grads = g.named_grads(&g.backward(loss));
        let first = &grads["prompt.first"];
        let allowed: Vec<usize> = if ordinal {
            let t = interpolation_plan(phases, &cfg.reference_indices)[p - 1];
            if t.lambda == 0.0 { vec![t.lo] } else { vec![t.lo, t.hi] }
        } else {
            vec![p - 1]
        };
        for r in 0..first.shape()[0] {
            let nonzero = first.row(r).iter().any(|&v| v != 0.0);
            prop_assert_eq!(nonzero, allowed.contains(&r), "row {}", r);
        }
        prop_assert!(grads["prompt.context"].data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn ordinal_with_every_reference_equals_independent() {
    for phases in [2usize, 5, 7] {
        let backbone = BackboneSpec::default();
        let ind = Stage1Model::init(&backbone, PromptBankConfig::independent(phases, 3, 32), LogitHead::default(), 1)
            .unwrap();
        let mut ord = Stage1Model::init(
            &backbone,
            PromptBankConfig::ordinal(phases, 3, 32, phases).unwrap(),
            LogitHead::default(),
            2,
        )
        .unwrap();
        ord.bank.params = ind.bank.params.clone();
        let images = Tensor::randn([4, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(phases as u64));
        let logits = |m: &Stage1Model| {
            let mut g = Graph::new();
            let x = g.constant(images.clone());
            let l = m.logits(&mut g, x, false).unwrap();
            g.value(l).clone()
        };
        assert_eq!(logits(&ind).data(), logits(&ord).data());
    }
}
