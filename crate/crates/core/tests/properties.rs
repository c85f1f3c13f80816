mod common;

use oto::optim::half_space_project;
use oto::prune::{equivalence_check, prune, PruneOptions};
use oto::regularizer::{group_norm_value, group_prox, subgradient};
use oto::zig::{partition_zig, zero_groups, GroupPartition, ZigOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blocks() -> impl Strategy<Value = (GroupPartition, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(count, size)| {
        let n = count * size;
        (
            Just(GroupPartition::contiguous_blocks(count, size)),
            prop::collection::vec(prop_oneof![Just(0.0), -5.0..5.0f64], n),
            prop::collection::vec(-5.0..5.0f64, n),
        )
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zig_partition_is_disjoint_and_covering(seed in any::<u64>()) {
        let m = common::random_model(&mut ChaCha8Rng::seed_from_u64(seed));
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        prop_assert_eq!(p.dim(), m.flat_params().len());
        p.validate(true).unwrap();
        let covered: usize = p.groups().iter().map(|g| g.len()).sum();
        prop_assert_eq!(covered, p.dim());
    }

    #[test]
    fn subgradient_inequality((p, x, y) in blocks(), lambda in 0.0..2.0f64) {
        let g = subgradient(&x, &p, lambda);
        let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let lhs = lambda * group_norm_value(&y, &p);
        let rhs = lambda * group_norm_value(&x, &p) + dot(&g, &diff);
        prop_assert!(lhs >= rhs - 1e-9 * (1.0 + lhs.abs()), "{lhs} < {rhs}");
    }

    #[test]
    fn prox_zeroes_exactly_inside_the_ball((p, _, v) in blocks(), tau in 0.0..6.0f64) {
        let u = group_prox(&v, &p, tau);
        for g in p.groups() {
            let norm = g.flat().iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
            let zero = g.flat().iter().all(|&i| u[i] == 0.0);
            prop_assert_eq!(zero, norm <= tau);
        }
    }

    #[test]
    fn epsilon_zero_projection_keeps_acute_groups((p, x, z) in blocks()) {
        let before = z.clone();
        let mut z = z;
        let zeroed = half_space_project(&mut z, &x, &p, 0.0);
        for g in p.groups() {
            let inner: f64 = g.flat().iter().map(|&i| before[i] * x[i]).sum();
            if inner >= 0.0 {
                prop_assert!(!zeroed.contains(&g.id));
                for &i in g.flat() {
                    prop_assert_eq!(z[i], before[i]);
                }
            }
        }
    }

    #[test]
    fn pruning_matches_zeroed_model(seed in any::<u64>(), rate in 0.0..0.7f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = common::random_model(&mut rng);
        m.randomize_params(&mut rng);
        let p = partition_zig(&m, ZigOptions::default()).unwrap();
        let chosen: Vec<usize> = p.penalized().map(|g| g.id).filter(|_| rng.random_bool(rate)).collect();
        zero_groups(&mut m, &p, &chosen);
        let (slim, r) = prune(&m, &p, PruneOptions { keep_one: true }).unwrap();
        prop_assert_eq!(r.after.params, r.before.params - r.pruned_group_params - r.removed_input_params);
        prop_assert_eq!(r.after.params, slim.flat_params().len());
        prop_assert!(equivalence_check(&m, &slim, 20, seed).unwrap() <= 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// On a 2-D group the prox output beats every point of a fine polar grid.
    #[test]
    fn prox_is_the_minimizer_in_two_dimensions(v0 in -3.0..3.0f64, v1 in -3.0..3.0f64, tau in 0.0..3.0f64) {
        let p = GroupPartition::contiguous_blocks(1, 2);
        let u = group_prox(&[v0, v1], &p, tau);
        let obj = |a: f64, b: f64| 0.5 * ((a - v0).powi(2) + (b - v1).powi(2)) + tau * (a * a + b * b).sqrt();
        let best = obj(u[0], u[1]);
        let mut grid = obj(0.0, 0.0);
        for i in 1..=120 {
            let r = 4.5 * i as f64 / 120.0;
            for j in 0..360 {
                let t = (j as f64).to_radians();
                grid = grid.min(obj(r * t.cos(), r * t.sin()));
            }
        }
        prop_assert!(best <= grid + 1e-12, "prox {best} vs grid {grid}");
        // and the grid gets close, so the minimizer is not something else
        prop_assert!(grid - best < 1e-3);
    }
}
