use nasbnn::costmodel::{count_params, total_ops};
use nasbnn::data::synthetic;
use nasbnn::evosearch::{dominates, pareto_filter, ParetoEntry};
use nasbnn::nn::{BnMode, ParamKind};
use nasbnn::presets;
use nasbnn::searchspace::{crossover, largest, mutate, sample_uniform_seeded, smallest, validate, Architecture};
use nasbnn::supernet::{ExecMode, NetConfig, Supernet};
use nasbnn::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probe(n: usize) -> Tensor {
    let space = presets::tiny_space();
    let d = synthetic(n, space.num_classes, space.input_resolution, 0.4, 99);
    d.batch(&(0..n).collect::<Vec<_>>(), None).0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_mutated_and_crossed_archs_are_valid(seed in any::<u64>(), prob in 0.0f64..1.0) {
        for space in [presets::paper_space(), presets::desk_cifar_space(), presets::tiny_space()] {
            let a = sample_uniform_seeded(&space, seed, true).unwrap();
            let b = sample_uniform_seeded(&space, seed ^ 0x5555, true).unwrap();
            prop_assert!(validate(&space, &a).is_empty());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = mutate(&space, &a, prob, &mut rng).unwrap();
            prop_assert!(validate(&space, &m).is_empty(), "{}", m.compact());
            let c = crossover(&space, &a, &b, &mut rng).unwrap();
            prop_assert!(validate(&space, &c).is_empty(), "{}", c.compact());
        }
    }

    #[test]
    fn ops_lie_between_smallest_and_largest(seed in any::<u64>()) {
        let space = presets::paper_space();
        let a = sample_uniform_seeded(&space, seed, true).unwrap();
        let lo = total_ops(&space, &smallest(&space)).unwrap().total_ops;
        let hi = total_ops(&space, &largest(&space)).unwrap().total_ops;
        let x = total_ops(&space, &a).unwrap().total_ops;
        prop_assert!(lo <= x && x <= hi);
    }

    #[test]
    fn arch_json_round_trips(seed in any::<u64>()) {
        let space = presets::paper_space();
        let a = sample_uniform_seeded(&space, seed, true).unwrap();
        let b = Architecture::from_json(&a.to_json()).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pareto_front_is_nondominated_and_covers(
        pts in prop::collection::vec((0u64..50, 0u32..20), 1..60)
    ) {
        let space = presets::tiny_space();
        let arch = smallest(&space);
        let entries: Vec<ParetoEntry> = pts
            .iter()
            .map(|&(o, a)| ParetoEntry { arch: arch.clone(), ops: o, acc: a as f64 / 20.0 })
            .collect();
        let front = pareto_filter(&entries);
        for f in &front {
            prop_assert!(!entries.iter().any(|e| dominates(e, f)));
        }
        for e in &entries {
            prop_assert!(front.iter().any(|f| dominates(f, e) || (f.ops == e.ops && f.acc == e.acc)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn activation_order_does_not_change_logits(s1 in any::<u64>(), s2 in any::<u64>()) {
        let space = presets::tiny_space();
        let a = sample_uniform_seeded(&space, s1, true).unwrap();
        let b = sample_uniform_seeded(&space, s2, true).unwrap();
        let x = probe(4);
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        net.activate(&a).unwrap();
        let direct = net.forward(&x, ExecMode::Bwba, BnMode::Eval).unwrap();
        net.activate(&b).unwrap();
        net.forward(&x, ExecMode::Fwba, BnMode::Eval).unwrap();
        net.activate(&a).unwrap();
        let again = net.forward(&x, ExecMode::Bwba, BnMode::Eval).unwrap();
        prop_assert_eq!(direct, again);
    }

    #[test]
    fn gradients_stay_inside_the_active_slice(seed in any::<u64>()) {
        let space = presets::tiny_space();
        let a = sample_uniform_seeded(&space, seed, true).unwrap();
        let x = probe(2);
        let mut net = Supernet::build(&space, NetConfig::default()).unwrap();
        net.activate(&a).unwrap();
        let y = net.forward(&x, ExecMode::Fwfa, BnMode::Train).unwrap();
        let dy = y.map(|_| 1.0);
        net.backward(&dy, true).unwrap();
        let touched: usize = net
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && p.name.starts_with("stage"))
            .map(|p| p.grad.data().iter().filter(|g| **g != 0.0).count())
            .sum();
        prop_assert!(touched as u64 <= count_params(&space, &a).binary_params);
    }
}
