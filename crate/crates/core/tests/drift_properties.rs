mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use driftpolicy::drift::{aggregate_multi_temp, drift_field_single_temp, normalize_scale, DEFAULT_TEMPERATURES};
use driftpolicy::Tensor64;

use common::{max_abs_diff, oracle_scale, oracle_single, oracle_total, random_rows, tensor, Rows};

/// `(x, y)` with `n, m ≤ max_rows`, `d ≤ max_dim`, entries in `[-2, 2]`.
fn batch(max_rows: usize, max_dim: usize) -> impl Strategy<Value = (Rows, Rows)> {
    (1..=max_rows, 1..=max_rows, 1..=max_dim).prop_flat_map(|(n, m, d)| {
        let row = prop::collection::vec(-2.0f64..2.0, d);
        (
            prop::collection::vec(row.clone(), n),
            prop::collection::vec(row, m),
        )
    })
}

fn spread_ok(x: &Rows, y: &Rows) -> bool {
    oracle_scale(x, y).is_finite() && oracle_scale(x, y) < 1e6
}

#[test]
fn brute_force_oracle_on_200_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..200 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let x = random_rows(&mut rng, n, d, 1.5);
        let y = random_rows(&mut rng, m, d, 1.5);
        let tau = DEFAULT_TEMPERATURES[i % 3];

        let norm = normalize_scale(&tensor(&x), &tensor(&y)).unwrap();
        assert!((norm.scale - oracle_scale(&x, &y)).abs() <= 1e-12 * norm.scale);

        let s = norm.scale;
        let xs: Rows = x.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let ys: Rows = y.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
        let single = drift_field_single_temp(&tensor(&xs), &tensor(&ys), tau).unwrap();
        assert!(max_abs_diff(&single, &oracle_single(&xs, &ys, tau)) <= 1e-12, "instance {i}");

        let total = aggregate_multi_temp(&tensor(&x), &tensor(&y), &DEFAULT_TEMPERATURES).unwrap().total;
        assert!(max_abs_diff(&total, &oracle_total(&x, &y, &DEFAULT_TEMPERATURES)) <= 1e-12, "instance {i}");
    }
}

fn permute(rows: &Rows, perm: &[usize]) -> Rows {
    perm.iter().map(|&i| rows[i].clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn identical_sets_give_zero_drift(x in batch(8, 5).prop_map(|(x, _)| x)) {
        prop_assume!(x.len() >= 2 && spread_ok(&x, &x));
        let t = tensor(&x);
        let v = aggregate_multi_temp(&t, &t, &DEFAULT_TEMPERATURES).unwrap();
        prop_assert!(v.total.max_abs() <= 1e-8);
    }

    #[test]
    fn drift_is_bounded_by_the_pool_diameter((x, y) in batch(6, 4), k in 0usize..3) {
        prop_assume!(spread_ok(&x, &y));
        let norm = normalize_scale(&tensor(&x), &tensor(&y)).unwrap();
        let v = drift_field_single_temp(&norm.predictions, &norm.positives, DEFAULT_TEMPERATURES[k]).unwrap();
        let pool: Vec<&[f64]> = norm.predictions.rows().chain(norm.positives.rows()).collect();
        let mut diameter = 0.0f64;
        for a in &pool {
            for b in &pool {
                let d: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                diameter = diameter.max(d.sqrt());
            }
        }
        for row in v.rows() {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(n <= diameter * (1.0 + 1e-12), "{n} > {diameter}");
        }
    }

    #[test]
    fn scaling_and_translation_carry_through(
        (x, y) in batch(6, 4),
        c in 0.05f64..20.0,
        shift in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        prop_assume!(spread_ok(&x, &y));
        let base = aggregate_multi_temp(&tensor(&x), &tensor(&y), &DEFAULT_TEMPERATURES).unwrap().total;
        let map = |r: &Rows, f: &dyn Fn(usize, f64) -> f64| -> Tensor64 {
            tensor(&r.iter().map(|row| row.iter().enumerate().map(|(k, &v)| f(k, v)).collect()).collect())
        };
        let scaled = aggregate_multi_temp(&map(&x, &|_, v| c * v), &map(&y, &|_, v| c * v), &DEFAULT_TEMPERATURES)
            .unwrap()
            .total;
        let moved = aggregate_multi_temp(&map(&x, &|k, v| v + shift[k]), &map(&y, &|k, v| v + shift[k]), &DEFAULT_TEMPERATURES)
            .unwrap()
            .total;
        prop_assert!(scaled.zip_map(&base, |a, b| a - c * b).unwrap().max_abs() <= 1e-9);
        prop_assert!(moved.zip_map(&base, |a, b| a - b).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn row_permutations_act_as_expected(
        (x, y) in batch(6, 3),
        seed in any::<u64>(),
    ) {
        prop_assume!(spread_ok(&x, &y));
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut px: Vec<usize> = (0..x.len()).collect();
        let mut py: Vec<usize> = (0..y.len()).collect();
        px.shuffle(&mut rng);
        py.shuffle(&mut rng);
        let base = aggregate_multi_temp(&tensor(&x), &tensor(&y), &DEFAULT_TEMPERATURES).unwrap().total;
        let shuffled_y = aggregate_multi_temp(&tensor(&x), &tensor(&permute(&y, &py)), &DEFAULT_TEMPERATURES)
            .unwrap()
            .total;
        prop_assert!(shuffled_y.zip_map(&base, |a, b| a - b).unwrap().max_abs() <= 1e-12);
        let shuffled_x = aggregate_multi_temp(&tensor(&permute(&x, &px)), &tensor(&y), &DEFAULT_TEMPERATURES)
            .unwrap()
            .total;
        let expected: Rows = px.iter().map(|&i| base.row(i).to_vec()).collect();
        prop_assert!(max_abs_diff(&shuffled_x, &expected) <= 1e-12);
    }
}
