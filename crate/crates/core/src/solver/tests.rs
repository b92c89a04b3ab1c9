use super::*;
use crate::problems::flp::{flp_brute_force, FlpProblem, Metric};
use crate::problems::generate::{gen_flp, gen_mcp};
use crate::problems::mcp::McpProblem;

fn small_cfg(steps: usize) -> SearchConfig {
    SearchConfig {
        steps,
        batch: 16,
        ..SearchConfig::default()
    }
}

#[test]
fn zero_steps_return_the_decoded_initial_point() {
    let inst = gen_flp(12, 3, 1, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 50.0).unwrap();
    let y0 = init_latent(&p, InitMode::Random, 4).unwrap();
    let (sol, trace) = latent_search(&p, &y0, &small_cfg(0)).unwrap();
    let proj = project(&y0, p.constraints(), &LinSatConfig::default()).unwrap();
    assert_eq!(sol, p.decode(&proj.x).unwrap());
    assert_eq!(trace.records.len(), 1);
    assert_eq!(trace.records[0].best_objective, sol.objective);
}

#[test]
fn incumbent_is_monotone() {
    let inst = gen_flp(15, 3, 2, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 50.0).unwrap();
    let y0 = init_latent(&p, InitMode::Random, 2).unwrap();
    let (sol, trace) = latent_search(&p, &y0, &small_cfg(30)).unwrap();
    assert!(trace.is_monotone(Sense::Minimize));
    assert_eq!(trace.records.last().unwrap().best_objective, sol.objective);

    let p = McpProblem::new(gen_mcp(15, 30, 3, 3).unwrap());
    let (sol, trace) = latent_search(&p, &vec![0.0; 15], &small_cfg(30)).unwrap();
    assert!(trace.is_monotone(Sense::Maximize));
    assert!(sol.feasible && sol.selection().len() == 3);
}

#[test]
fn noiseless_batch_loss_equals_deterministic_loss() {
    let inst = gen_flp(10, 2, 3, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 20.0).unwrap();
    let y = init_latent(&p, InitMode::Random, 9).unwrap();
    let cfg = SearchConfig {
        sigma: 0.0,
        batch: 5,
        ..SearchConfig::default()
    };
    let batch = run_batch(&p, &y, &cfg, 1).unwrap();
    let (loss, _) = evaluate_point(&p, &y, &cfg.linsat).unwrap();
    assert!((batch.loss - loss).abs() <= 1e-12 * loss.abs());
}

#[test]
fn same_seed_same_trace_and_thread_count_does_not_matter() {
    let inst = gen_flp(12, 3, 5, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 50.0).unwrap();
    let y0 = vec![0.0; 12];
    let cfg = small_cfg(15);
    let strip = |t: SearchTrace| -> Vec<(usize, f64, f64)> {
        t.records.into_iter().map(|r| (r.step, r.loss, r.best_objective)).collect()
    };
    let (a, ta) = latent_search(&p, &y0, &cfg).unwrap();
    let (b, tb) = latent_search(&p, &y0, &cfg).unwrap();
    assert_eq!(a, b);
    let ta = strip(ta);
    assert_eq!(ta, strip(tb));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (c, tc) = pool.install(|| latent_search(&p, &y0, &cfg)).unwrap();
    assert_eq!(a, c);
    assert_eq!(ta, strip(tc));
}

#[test]
fn pairwise_sum_matches_plain_sum() {
    let parts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 1.0]).collect();
    assert_eq!(pairwise_sum(&parts), vec![21.0, 7.0]);
    assert_eq!(pairwise_scalar(&[1.0, 2.0, 3.0]), 6.0);
}

#[test]
fn bad_configs_and_shapes_are_rejected() {
    let inst = gen_flp(6, 2, 1, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 50.0).unwrap();
    let bad_lr = SearchConfig {
        lr: 0.0,
        ..SearchConfig::default()
    };
    assert!(latent_search(&p, &[0.0; 6], &bad_lr).is_err());
    assert!(matches!(
        latent_search(&p, &[0.0; 5], &small_cfg(1)),
        Err(Error::Shape { .. })
    ));
    assert!(init_latent(&p, InitMode::Encoder, 0).is_err());
}

#[test]
fn random_init_is_reproducible_and_bounded() {
    let inst = gen_flp(30, 2, 1, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 50.0).unwrap();
    let a = init_latent(&p, InitMode::Random, 11).unwrap();
    assert_eq!(a, init_latent(&p, InitMode::Random, 11).unwrap());
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_ne!(a, init_latent(&p, InitMode::Random, 12).unwrap());
}

#[test]
fn zeros_init_spreads_the_budget_evenly() {
    let inst = gen_flp(8, 2, 1, Metric::Euclidean, false).unwrap();
    let p = FlpProblem::softmin(inst, 50.0).unwrap();
    let y0 = init_latent(&p, InitMode::Zeros, 0).unwrap();
    let x = project(&y0, p.constraints(), &LinSatConfig::default()).unwrap().x;
    assert!(x.iter().all(|v| (v - x[0]).abs() < 1e-12));
}

#[test]
fn single_variant_ablation_equals_direct_search() {
    let inst = gen_flp(10, 2, 7, Metric::Euclidean, false).unwrap();
    let optimum = flp_brute_force(&inst).unwrap().objective;
    let y0 = vec![0.0; 10];
    let cfg = small_cfg(10);
    let testbed = vec![AblationInstance {
        inst: inst.clone(),
        optimum,
        y0: y0.clone(),
    }];
    let rows = ablation_run(&testbed, &[Variant::SoftminSearch { beta: 50.0 }], &cfg).unwrap();
    let direct_cfg = SearchConfig {
        seed: derive_seed(cfg.seed, 0),
        ..cfg
    };
    let (sol, _) = latent_search(&FlpProblem::softmin(inst, 50.0).unwrap(), &y0, &direct_cfg).unwrap();
    assert_eq!(rows[0].gaps, vec![Sense::Minimize.gap(sol.objective, optimum)]);
}

#[test]
fn flp_search_reaches_small_gap() {
    let mut hits = 0;
    for seed in 0..20 {
        let inst = gen_flp(20, 3, seed, Metric::Euclidean, false).unwrap();
        let opt = flp_brute_force(&inst).unwrap().objective;
        let p = FlpProblem::softmin(inst, 50.0).unwrap();
        let cfg = SearchConfig {
            steps: 150,
            seed,
            ..SearchConfig::default()
        };
        let (sol, _) = latent_search(&p, &vec![0.0; 20], &cfg).unwrap();
        assert!(sol.objective >= opt - 1e-9);
        if Sense::Minimize.gap(sol.objective, opt) <= 0.02 {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}");
}

