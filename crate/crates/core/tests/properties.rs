mod common;

use proptest::prelude::*;
use rand::Rng;
use shield_core::eval::{augment8, heuristic_baseline, optimality_gap};
use shield_core::generate::{generate_batch, read_instances, write_instances, DistributionSource, GenConfig};
use shield_core::rng::{stream_rng, RngSnapshot};
use shield_core::tensor::Tensor;
use shield_core::train::{Checkpoint, TrainConfig};
use shield_core::vrp::{
    brute_force_optimal, feasible_mask, initial_state, solution_cost, step, tours_length, validate, Instance,
    Solution, TaskSpec,
};

fn task() -> impl Strategy<Value = TaskSpec> {
    (0usize..16).prop_map(|i| TaskSpec::all()[i])
}

fn instance(max_n: usize) -> impl Strategy<Value = Instance> {
    (task(), 2..=max_n, 9.0f64..40.0, any::<u64>()).prop_map(|(task, n, cap, seed)| {
        generate_batch(&DistributionSource::uniform(), task, &GenConfig::new(n, cap, seed), 1)
            .expect("generation succeeds")
            .remove(0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_mask_walks_are_valid(inst in instance(15), seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let mut state = initial_state(&inst).unwrap();
        let mut actions = Vec::new();
        while !state.done {
            let mask = feasible_mask(&state, &inst).unwrap();
            let allowed: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
            prop_assert!(!allowed.is_empty());
            let j = allowed[rng.gen_range(0..allowed.len())];
            state = step(&state, &inst, j).unwrap();
            actions.push(j);
            prop_assert!(actions.len() <= 2 * inst.n() + 1);
        }
        let sol = Solution::from_actions(&actions, inst.task.open);
        prop_assert_eq!(validate(&inst, &sol), vec![]);
        prop_assert_eq!(sol.customer_routes().concat().len(), inst.n());
    }

    #[test]
    fn heuristic_is_valid_and_costed(inst in instance(20)) {
        let sol = heuristic_baseline(&inst).unwrap();
        prop_assert_eq!(validate(&inst, &sol), vec![]);
        prop_assert_eq!(solution_cost(&inst, &sol).unwrap(), tours_length(&inst, &sol));
    }

    #[test]
    fn dropping_a_customer_is_caught(inst in instance(10), pick in any::<prop::sample::Index>()) {
        let sol = heuristic_baseline(&inst).unwrap();
        let victim = sol.customer_routes().concat()[pick.index(inst.n())];
        let tours = sol
            .tours
            .iter()
            .map(|t| t.iter().copied().filter(|&v| v != victim).collect::<Vec<_>>())
            .filter(|t| t.iter().any(|&v| v != 0))
            .collect();
        prop_assert!(!validate(&inst, &Solution::new(tours)).is_empty());
    }

    #[test]
    fn isometries_preserve_any_tour(inst in instance(12)) {
        let sol = heuristic_baseline(&inst).unwrap();
        let base = tours_length(&inst, &sol);
        for a in augment8(&inst) {
            prop_assert!((tours_length(&a, &sol) - base).abs() < 1e-9);
        }
    }

    #[test]
    fn gap_is_scale_invariant(pairs in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..20), c in 0.01f64..100.0) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let g = optimality_gap(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        prop_assert!((optimality_gap(&xs, &ys).unwrap() - g).abs() < 1e-9 * (1.0 + g.abs()));
    }

    #[test]
    fn instances_round_trip_bit_exact(insts in prop::collection::vec(instance(10), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.jsonl");
        write_instances(&path, &insts).unwrap();
        prop_assert_eq!(read_instances(&path).unwrap(), insts);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exhaustive_search_matches_dp(inst in instance(7)) {
        let (sol, opt) = brute_force_optimal(&inst).unwrap();
        prop_assert_eq!(validate(&inst, &sol), vec![]);
        prop_assert!((solution_cost(&inst, &sol).unwrap() - opt).abs() < 1e-9);
        if let Some(dp) = common::dp_optimal(&inst) {
            prop_assert!((dp - opt).abs() < 1e-9, "dp {} vs search {}", dp, opt);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_detect_flips(
        shapes in prop::collection::vec((1usize..4, 1usize..4), 1..4),
        seed in any::<u64>(),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut rng = stream_rng(seed, 1);
        let mut table = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let params: Vec<Tensor> = shapes.iter().map(|&(r, c)| table(r, c)).collect();
        let adam_m: Vec<Tensor> = shapes.iter().map(|&(r, c)| table(r, c)).collect();
        let adam_v: Vec<Tensor> = shapes.iter().map(|&(r, c)| table(r, c)).collect();
        let ckpt = Checkpoint {
            config: TrainConfig::default(),
            epoch: seed % 1000,
            adam_t: seed % 77,
            rng: RngSnapshot::capture(&stream_rng(seed, 3)),
            params,
            adam_m,
            adam_v,
        };
        let bytes = ckpt.to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        let mut bad = bytes.clone();
        bad[flip.index(bytes.len())] ^= 0x01;
        prop_assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
