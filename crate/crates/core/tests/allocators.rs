//! Allocator checks against closed forms and limiting cases.

mod common;

use dualscale_core::allocators::{self, evaluate_allocation};
use dualscale_core::corpus::{self, Layout};
use dualscale_core::pattern::pattern_count;
use dualscale_core::scenario::EffTable;
use dualscale_core::{Allocation, AllocationFile, AllocatorOptions, Error, Method, Pattern, Start};

fn opts() -> AllocatorOptions {
    AllocatorOptions::default()
}

#[test]
fn single_ap_every_method_gives_mm1() {
    // Solo rate 3 packets/s, λ = 1: d = 1/(s-λ) = 0.5 s.
    let s = corpus::single_ap(3.0, 1.0);
    for m in Method::ALL {
        let sol = allocators::solve(m, &s, &opts()).unwrap();
        assert!((sol.report.network_mean_s - 0.5).abs() < 1e-9, "{m}: {}", sol.report.network_mean_s);
        assert!((sol.allocation.y[Pattern::singleton(0).index()] - 1.0).abs() < 1e-9, "{m}");
        assert!((sol.state.rho[0] - 1.0 / 3.0).abs() < 1e-9);
    }
}

#[test]
fn overloaded_single_ap_is_reported() {
    let s = corpus::single_ap(2.0, 3.0);
    for m in [Method::P1, Method::P2, Method::FullReuse] {
        match allocators::solve(m, &s, &opts()) {
            Err(Error::Infeasible(_) | Error::UnstableQueue { .. }) => {}
            other => panic!("{m}: expected infeasible, got {:?}", other.map(|s| s.objective)),
        }
    }
}

#[test]
fn isolated_aps_reuse_everything() {
    // Two cells a kilometer apart: interference is negligible, each cell is
    // an M/M/1 queue at its solo rate and full reuse is optimal.
    let s = corpus::line(2, 1000.0, 10.0, &Layout::default());
    let eff = EffTable::build(&s).unwrap();
    let p1 = allocators::solve_p1(&s, &opts()).unwrap();
    let p2 = allocators::solve_p2(&s, &opts()).unwrap();
    let full = Pattern::full(2).index();
    assert!(p1.allocation.y[full] > 0.999, "y = {:?}", p1.allocation.y);
    for i in 0..2 {
        let solo = eff.served(i, Pattern::singleton(i));
        let mm1 = 1.0 / (solo - 5.0);
        assert!((p1.delays[i] - mm1).abs() / mm1 < 1e-3, "AP {i}: {} vs {mm1}", p1.delays[i]);
    }
    assert!((p2.objective - p1.objective).abs() / p1.objective < 1e-6);
}

#[test]
fn dual_timescale_never_loses_to_its_restrictions() {
    for s in corpus::three_ap_corpus() {
        let cons = allocators::baseline_conservative(&s, &opts()).unwrap();
        let p1 = allocators::solve_p1(&s, &opts()).unwrap();
        let p2 = allocators::solve_p2(&s, &opts()).unwrap();
        assert!(p1.objective <= cons.objective + 1e-9);
        assert!(p2.objective <= p1.objective + 1e-9);
        if let Ok(fr) = allocators::baseline_full_reuse(&s, &opts()) {
            assert!(p2.objective <= fr.objective + 1e-9);
        }
    }
}

#[test]
fn solutions_evaluate_to_their_own_objective() {
    let s = corpus::random_fixed(3, 2, &Layout::default()).scaled_load(3.0);
    for m in [Method::P1, Method::P2, Method::P3, Method::Conservative] {
        let sol = allocators::solve(m, &s, &opts()).unwrap();
        let again = evaluate_allocation(&s, &sol.allocation, &opts()).unwrap();
        let rel = (again.objective - sol.objective).abs() / sol.objective;
        assert!(rel < 1e-6, "{m}: {} vs {}", again.objective, sol.objective);
    }
}

#[test]
fn conservative_is_one_slow_iteration() {
    let s = corpus::random_fixed(3, 1, &Layout::default()).scaled_load(2.0);
    let cons = allocators::baseline_conservative(&s, &opts()).unwrap();
    let one = allocators::solve_p1(&s, &AllocatorOptions { max_outer: 1, ..opts() }).unwrap();
    assert_eq!(cons.allocation, one.allocation);
    assert_eq!(cons.trace.records.len(), 1);
}

#[test]
fn flexible_association_runs_and_beats_full_reuse() {
    let s = corpus::random_flexible(3, 4, 9, &Layout::default()).scaled_load(2.0);
    let p3 = allocators::solve_p3(&s, &opts()).unwrap();
    p3.allocation.validate(&s).unwrap();
    assert!(p3.trace.converged);
    assert!(p3.state.sigma.is_some());
    if let Ok(fr) = allocators::baseline_full_reuse(&s, &opts()) {
        assert!(p3.objective <= fr.objective + 1e-9);
    }
}

#[test]
fn single_start_runs_report_their_start() {
    let s = corpus::random_fixed(3, 3, &Layout::default()).scaled_load(2.0);
    for start in Start::ALL {
        let sol = allocators::solve_p2(&s, &AllocatorOptions { starts: vec![start], ..opts() }).unwrap();
        assert_eq!(sol.trace.start, Some(start));
    }
}

#[test]
fn pattern_space_limits_are_enforced() {
    let nine = corpus::random_fixed(9, 1, &Layout::default());
    assert!(matches!(allocators::solve_p1(&nine, &opts()), Err(Error::PatternSpaceTooLarge { .. })));
    let seven = corpus::random_fixed(7, 1, &Layout::default());
    assert!(matches!(allocators::solve_p3(&seven, &opts()), Err(Error::PatternSpaceTooLarge { .. })));
}

#[test]
fn allocation_files_round_trip() {
    let s = corpus::random_flexible(2, 3, 4, &Layout::default());
    let p3 = allocators::solve_p3(&s, &opts()).unwrap();
    let file = p3.allocation.to_file(&s, "p3");
    let text = serde_json::to_string(&file).unwrap();
    let back: AllocationFile = serde_json::from_str(&text).unwrap();
    let alloc = back.into_allocation(&s).unwrap();
    assert_eq!(alloc.n, p3.allocation.n);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15);
    assert!(close(&alloc.y, &p3.allocation.y));
    assert!(close(&alloc.z, &p3.allocation.z));
    assert!(close(alloc.x.as_ref().unwrap(), p3.allocation.x.as_ref().unwrap()));
}

#[test]
fn allocation_file_keys_are_bitmasks() {
    let s = corpus::random_fixed(2, 1, &Layout::default());
    let file = Allocation::full_reuse(2, 2).to_file(&s, "full-reuse");
    assert_eq!(file.y.keys().collect::<Vec<_>>(), vec!["3"]);
    let mut bad = file.clone();
    bad.y.insert("4".into(), 0.0);
    assert!(bad.into_allocation(&s).is_err());
    let mut short = file;
    short.z.insert("3".into(), 0.5);
    assert!(matches!(short.into_allocation(&s), Err(Error::InvalidAllocation(_))));
    assert_eq!(pattern_count(2), 4);
}

#[test]
fn symmetric_interfering_pair_splits_orthogonally() {
    // Two identical cells 20 m apart with users 15 m out: under worst-case
    // interference each cell is better off alone on half the band.
    let s = corpus::line(2, 20.0, 15.0, &Layout::default()).scaled_load(4.0);
    let cons = allocators::baseline_conservative(&s, &opts()).unwrap();
    let y = &cons.allocation.y;
    let (a, b) = (Pattern::singleton(0).index(), Pattern::singleton(1).index());
    assert!((y[a] - 0.5).abs() < 1e-3 && (y[b] - 0.5).abs() < 1e-3, "y = {y:?}");
    assert!(y[Pattern::full(2).index()] < 1e-3, "y = {y:?}");
}

fn one_ap_split(t: f64) -> Allocation {
    // x^{1->1}_{1} = t, x^{1->2}_{1} = 1 - t.
    Allocation { n: 1, k: 2, y: vec![0.0, 1.0], z: vec![0.0, 1.0], x: Some(vec![0.0, t, 0.0, 1.0 - t]) }
}

#[test]
fn one_ap_two_groups_matches_split_grid() {
    let s = corpus::random_flexible(1, 2, 3, &Layout::default()).scaled_load(2.0);
    let p3 = allocators::solve_p3(&s, &opts()).unwrap();
    let (mut best, mut best_t) = (f64::INFINITY, 0.0);
    for step in 1..1000 {
        let t = step as f64 / 1000.0;
        if let Ok(sol) = evaluate_allocation(&s, &one_ap_split(t), &opts()) {
            if sol.objective < best {
                (best, best_t) = (sol.objective, t);
            }
        }
    }
    // The outer loop stops at a stationary split, which need not be the
    // joint minimizer; it lands within the usual grid tolerance.
    assert!(best.is_finite());
    let rel = (p3.objective - best).abs() / best;
    assert!(rel <= 1e-3, "p3 {} grid {best}", p3.objective);
    let t = p3.allocation.x.as_ref().unwrap()[1];
    assert!((t - best_t).abs() < 0.01, "split {t} vs grid {best_t}");
}

#[test]
fn idle_group_gets_no_spectrum() {
    let mut s = corpus::random_flexible(2, 3, 5, &Layout::default()).scaled_load(2.0);
    s.groups[2].lambda = 0.0;
    let p3 = allocators::solve_p3(&s, &opts()).unwrap();
    let x = p3.allocation.x.as_ref().unwrap();
    let idle: f64 = (0..2)
        .flat_map(|i| Pattern::all(2).map(move |f| (i, f)))
        .map(|(i, f)| x[dualscale_core::allocation::x_index(2, 3, i, 2, f)])
        .sum();
    assert!(idle < 1e-6, "idle group holds {idle}");
    assert!(p3.objective.is_finite());
}
