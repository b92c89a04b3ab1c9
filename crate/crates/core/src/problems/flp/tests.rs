use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{finite_difference_check, grad};
use crate::problems::generate::gen_flp;

fn soft(dist: &Tensor, x: &[f64], beta: f64) -> Result<f64> {
    let (v, _) = grad(|t, a| flp_soft_objective(t, a[0], dist, beta), &[Tensor::vector(x.to_vec())])?;
    Ok(v)
}

#[test]
fn one_hot_soft_cost_is_row_sum() {
    let inst = gen_flp(6, 1, 2, Metric::Euclidean, false).unwrap();
    for beta in [1.0, 50.0, 200.0] {
        let mut x = vec![0.0; 6];
        x[3] = 1.0;
        let row: f64 = inst.dist.row(3).iter().sum();
        assert!((soft(&inst.dist, &x, beta).unwrap() - row).abs() < 1e-12);
    }
}

#[test]
fn equidistant_facilities_split_evenly() {
    // Customer 2 sits midway between sites 0 and 1.
    let inst = FlpInstance::from_coords(vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]], 2, Metric::Euclidean).unwrap();
    let mut t = Tape::new();
    let x = t.input(Tensor::vector(vec![0.5, 0.5, 0.0])).unwrap();
    let v = flp_soft_objective(&mut t, x, &inst.dist, 3.0).unwrap();
    // Customer 2 pays 0.5 whatever the split; weights 1/2 each give exactly that.
    let c0 = (0.0 + (-3.0f64).exp()) / (1.0 + (-3.0f64).exp());
    assert!((t.scalar(v) - (2.0 * c0 + 0.5)).abs() < 1e-12);
}

#[test]
fn zero_mass_is_an_error() {
    let inst = gen_flp(4, 1, 0, Metric::Euclidean, false).unwrap();
    assert!(matches!(soft(&inst.dist, &[0.0; 4], 10.0), Err(Error::NoFacilityMass)));
}

#[test]
fn soft_approaches_hard_at_high_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..20 {
        let inst = gen_flp(20, 3, seed, Metric::Euclidean, false).unwrap();
        let mut sel: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            sel.swap(i, rng.gen_range(0..=i));
        }
        sel.truncate(3);
        sel.sort_unstable();
        let mut x = vec![0.0; 20];
        for &i in &sel {
            x[i] = 1.0;
        }
        let s = soft(&inst.dist, &x, 200.0).unwrap();
        let h = flp_hard_objective(&sel, &inst.dist).unwrap();
        assert!((s - h).abs() / h <= 0.01, "{s} vs {h}");
    }
}

#[test]
fn soft_objective_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = gen_flp(5, 2, 1, Metric::Euclidean, false).unwrap();
    for beta in [10.0, 50.0] {
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.95)).collect();
            let err = finite_difference_check(|t, a| flp_soft_objective(t, a[0], &inst.dist, beta), &[Tensor::vector(x)], 1e-6)
                .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }
}

#[test]
fn hard_min_surrogate_matches_hard_objective_on_binary_points() {
    let inst = gen_flp(8, 3, 4, Metric::Manhattan, false).unwrap();
    let sel = [1, 4, 6];
    let mut x = vec![0.0; 8];
    for &i in &sel {
        x[i] = 1.0;
    }
    let (v, g) = grad(|t, a| flp_hardmin_objective(t, a[0], &inst.dist), &[Tensor::vector(x)]).unwrap();
    assert!((v - flp_hard_objective(&sel, &inst.dist).unwrap()).abs() < 1e-12);
    assert!(g[0].data().iter().all(|v| v.is_finite()));
}

#[test]
fn hard_objective_examples() {
    let d = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert_eq!(flp_hard_objective(&[0, 1], &d).unwrap(), 0.0);
    let line = FlpInstance::from_coords(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1, Metric::Euclidean).unwrap();
    assert_eq!(flp_hard_objective(&[0], &line.dist).unwrap(), 3.0);
    assert!(matches!(flp_hard_objective(&[], &d), Err(Error::EmptySelection)));
}

#[test]
fn decode_examples() {
    assert_eq!(flp_decode(&[0.9, 0.1, 0.8], 2), vec![0, 2]);
    assert_eq!(flp_decode(&[0.4; 5], 2), vec![0, 1]);
}

#[test]
fn neighborhood_fixed_point_on_medoids() {
    // Two tight clusters; their centers are already the medoids.
    let pts = vec![[0.0, 0.0], [0.1, 0.0], [-0.1, 0.0], [5.0, 0.0], [5.1, 0.0], [4.9, 0.0]];
    let inst = FlpInstance::from_coords(pts, 2, Metric::Euclidean).unwrap();
    assert_eq!(flp_neighborhood(&[0, 3], &inst.dist), vec![0, 3]);
}

#[test]
fn neighborhood_moves_off_medoid_facilities() {
    let pts = vec![[0.0, 0.0], [0.1, 0.0], [-0.1, 0.0], [5.0, 0.0], [5.1, 0.0], [4.9, 0.0]];
    let inst = FlpInstance::from_coords(pts, 2, Metric::Euclidean).unwrap();
    // Hand count: {1, 4} costs 0.1 + 0.2 per cluster = 0.6; {0, 3} costs 0.4.
    let before = flp_hard_objective(&[1, 4], &inst.dist).unwrap();
    assert!((before - 0.6).abs() < 1e-9);
    let after = flp_neighborhood(&[1, 4], &inst.dist);
    assert_eq!(after, vec![0, 3]);
    assert!((flp_hard_objective(&after, &inst.dist).unwrap() - 0.4).abs() < 1e-9);
}

#[test]
fn neighborhood_never_increases_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..50 {
        let inst = gen_flp(25, 4, seed, Metric::Euclidean, false).unwrap();
        let mut sel: Vec<usize> = (0..25).collect();
        for i in (1..25).rev() {
            sel.swap(i, rng.gen_range(0..=i));
        }
        sel.truncate(4);
        let before = flp_hard_objective(&sel, &inst.dist).unwrap();
        let after_sel = flp_neighborhood(&sel, &inst.dist);
        assert_eq!(after_sel.len(), 4);
        assert!(flp_hard_objective(&after_sel, &inst.dist).unwrap() <= before + 1e-12);
    }
}

#[test]
fn greedy_first_pick_is_one_median() {
    let inst = gen_flp(12, 1, 9, Metric::Euclidean, false).unwrap();
    let best = (0..12)
        .min_by(|&a, &b| {
            let ra: f64 = inst.dist.row(a).iter().sum();
            let rb: f64 = inst.dist.row(b).iter().sum();
            ra.total_cmp(&rb)
        })
        .unwrap();
    assert_eq!(flp_greedy(&inst), vec![best]);
}

#[test]
fn greedy_with_every_site_costs_nothing() {
    let inst = gen_flp(6, 6, 1, Metric::Euclidean, false).unwrap();
    assert_eq!(flp_hard_objective(&flp_greedy(&inst), &inst.dist).unwrap(), 0.0);
}

#[test]
fn brute_force_examples() {
    let d = Tensor::from_rows(&[
        vec![0.0, 2.0, 3.0, 4.0],
        vec![2.0, 0.0, 1.0, 1.0],
        vec![3.0, 1.0, 0.0, 5.0],
        vec![4.0, 1.0, 5.0, 0.0],
    ]);
    let inst = FlpInstance::from_distances(d, 1).unwrap();
    let s = flp_brute_force(&inst).unwrap();
    assert_eq!(s.selection(), &[1]);
    assert_eq!(s.objective, 4.0);
    let all = FlpInstance::from_distances(inst.dist.clone(), 4).unwrap();
    assert_eq!(flp_brute_force(&all).unwrap().selection(), &[0, 1, 2, 3]);
}

#[test]
fn oracle_dominates_greedy() {
    for seed in 0..100 {
        let inst = gen_flp(12, 3, seed, Metric::Euclidean, false).unwrap();
        let opt = flp_brute_force(&inst).unwrap();
        let g = flp_hard_objective(&flp_greedy(&inst), &inst.dist).unwrap();
        assert!(opt.objective <= g + 1e-12);
    }
    let inst = gen_flp(25, 3, 5, Metric::Euclidean, false).unwrap();
    let g = flp_hard_objective(&flp_greedy(&inst), &inst.dist).unwrap();
    assert!(flp_brute_force(&inst).unwrap().objective <= g);
}

#[test]
fn brute_force_matches_its_reported_selection() {
    let inst = gen_flp(30, 4, 1, Metric::Euclidean, false).unwrap();
    let opt = flp_brute_force(&inst).unwrap();
    assert_eq!(opt.objective, flp_hard_objective(opt.selection(), &inst.dist).unwrap());
}

#[test]
fn brute_force_size_guard() {
    let inst = gen_flp(80, 10, 0, Metric::Euclidean, false).unwrap();
    assert!(matches!(flp_brute_force(&inst), Err(Error::SizeGuard(_))));
}

#[test]
fn invalid_distances_are_rejected() {
    let asym = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]);
    assert!(FlpInstance::from_distances(asym, 1).is_err());
    let diag = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]);
    assert!(FlpInstance::from_distances(diag, 1).is_err());
}
