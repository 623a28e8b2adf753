mod common;

use common::{direct_residual, pinv_solve, random_matrix, rel_err, rng, stacked_design, two_pass_variance};
use comp_core::masktune::{mask_variance, reconstruction_error, tune_mask, Solver, TuneProblem, TuneSystem};
use comp_core::Matrix;
use proptest::prelude::*;
use rand::Rng;

struct Case {
    w: Matrix,
    x: Matrix,
    target: Option<Matrix>,
    mask: Vec<bool>,
    eps: f64,
}

fn case(seed: u64, propagated: bool) -> Case {
    let mut r = rng(seed);
    let q = r.gen_range(2..=12);
    let p = r.gen_range(1..=10);
    let t = r.gen_range(q..=3 * q + 4);
    let w = random_matrix(&mut r, p, q);
    let x = random_matrix(&mut r, t, q);
    let target = propagated.then(|| {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
        y
    });
    let c = r.gen_range(1..q);
    let mut idx: Vec<usize> = (0..q).collect();
    for i in (1..q).rev() {
        idx.swap(i, r.gen_range(0..=i));
    }
    let mut mask = vec![true; q];
    idx[..c].iter().for_each(|&j| mask[j] = false);
    Case {
        w,
        x,
        target,
        mask,
        eps: 10f64.powf(r.gen_range(-8.0..-3.0)),
    }
}

fn problem(c: &Case, solver: Solver) -> TuneProblem<'_> {
    TuneProblem {
        weight: &c.w,
        inputs: &c.x,
        targets: c.target.as_ref(),
        mask: &c.mask,
        epsilon: c.eps,
        solver,
    }
}

fn oracle(c: &Case) -> Vec<f64> {
    let retained: Vec<usize> = (0..c.mask.len()).filter(|&j| c.mask[j]).collect();
    let (a, y) = stacked_design(&c.w, &c.x, c.target.as_ref().unwrap_or(&c.x), &retained);
    let sol = pinv_solve(&a, &y, c.eps);
    let mut z = vec![0.0; c.mask.len()];
    retained.iter().zip(sol).for_each(|(&j, v)| z[j] = v);
    z
}

fn binary(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

#[test]
fn tuned_mask_matches_pseudo_inverse() {
    for seed in 0..60 {
        for propagated in [false, true] {
            let c = case(seed, propagated);
            let got = tune_mask(&problem(&c, Solver::Direct)).unwrap();
            let want = oracle(&c);
            assert!(rel_err(&got.tuned, &want) <= 1e-6, "seed {seed}: {}", rel_err(&got.tuned, &want));
        }
    }
}

#[test]
fn direct_and_iterative_agree() {
    for seed in 0..60 {
        let c = case(seed, seed % 2 == 1);
        let d = tune_mask(&problem(&c, Solver::Direct)).unwrap();
        let i = tune_mask(&problem(&c, Solver::Iterative)).unwrap();
        assert!(rel_err(&i.tuned, &d.tuned) <= 1e-6, "seed {seed}");
        assert!(i.solver_iterations > 0);
    }
}

#[test]
fn residual_forms_match_direct_sum() {
    for seed in 0..20 {
        let c = case(seed, seed % 2 == 0);
        let sys = TuneSystem::new(&c.w, &c.x, c.target.as_ref(), c.eps).unwrap();
        let mut r = rng(seed + 1000);
        let z: Vec<f64> = (0..c.mask.len()).map(|_| r.gen_range(-1.0..2.0)).collect();
        let want = direct_residual(&c.w, &c.x, c.target.as_ref().unwrap_or(&c.x), &z);
        assert!((sys.residual_squared(&z) - want).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn tuning_beats_the_binary_mask_and_is_stationary() {
    for seed in 0..40 {
        let c = case(seed, false);
        let sys = TuneSystem::new(&c.w, &c.x, None, c.eps).unwrap();
        let res = sys.solve(&c.mask, Solver::Direct).unwrap();
        let best = sys.objective(&res.tuned);
        assert!(best <= sys.objective(&binary(&c.mask)) * (1.0 + 1e-12) + 1e-12);
        let mut r = rng(seed);
        for _ in 0..5 {
            let mut z = res.tuned.0.clone();
            for j in 0..z.len() {
                if c.mask[j] {
                    z[j] += r.gen_range(-1e-3..1e-3);
                }
            }
            assert!(sys.objective(&z) >= best * (1.0 - 1e-12));
        }
        let rms = reconstruction_error(&c.w, &c.x, &c.mask, &res.tuned);
        assert!((rms - res.residual).abs() <= 1e-9 * rms.max(1e-6));
    }
}

#[test]
fn objective_grows_with_nested_masks() {
    let mut r = rng(77);
    let (p, q, t) = (6, 10, 40);
    let w = random_matrix(&mut r, p, q);
    let x = random_matrix(&mut r, t, q);
    let sys = TuneSystem::new(&w, &x, None, 1e-6).unwrap();
    let mut mask = vec![true; q];
    let mut last = 0.0;
    for j in 0..q - 1 {
        mask[j] = false;
        let res = sys.solve(&mask, Solver::Direct).unwrap();
        let obj = sys.objective(&res.tuned);
        assert!(obj >= last * (1.0 - 1e-10));
        last = obj;
    }
}

#[test]
fn unpruned_mask_is_exact() {
    let c = case(5, false);
    let mask = vec![true; c.mask.len()];
    let res = tune_mask(&TuneProblem {
        mask: &mask,
        ..problem(&c, Solver::Direct)
    })
    .unwrap();
    assert!(res.tuned.iter().all(|&v| v == 1.0));
    assert_eq!((res.residual, res.variance), (0.0, 0.0));
}

#[test]
fn singular_gram_falls_back_or_regularizes() {
    // Duplicating an input column and its weight column makes G singular
    // without ε; the ridge term then splits the shared scale evenly.
    let mut r = rng(8);
    let mut w = random_matrix(&mut r, 4, 5);
    for i in 0..4 {
        let v = w.get(i, 0);
        w.set(i, 1, v);
    }
    let mut x = random_matrix(&mut r, 20, 5);
    for t in 0..20 {
        let v = x.get(t, 0);
        x.set(t, 1, v);
    }
    let mask = vec![true, true, true, false, true];
    let res = tune_mask(&TuneProblem {
        weight: &w,
        inputs: &x,
        targets: None,
        mask: &mask,
        epsilon: 1e-10,
        solver: Solver::Direct,
    })
    .unwrap();
    assert!(res.tuned.iter().all(|v| v.is_finite()));
    assert!((res.tuned[0] - res.tuned[1]).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tuned_never_worse_than_binary(seed in any::<u64>(), propagated in any::<bool>()) {
        let c = case(seed, propagated);
        let sys = TuneSystem::new(&c.w, &c.x, c.target.as_ref(), c.eps).unwrap();
        let res = sys.solve(&c.mask, Solver::Direct).unwrap();
        prop_assert!(sys.objective(&res.tuned) <= sys.objective(&binary(&c.mask)) * (1.0 + 1e-12) + 1e-12);
        for j in 0..c.mask.len() {
            if !c.mask[j] {
                prop_assert_eq!(res.tuned[j], 0.0);
            }
        }
        prop_assert!(res.variance >= 0.0);
    }

    #[test]
    fn variance_matches_two_pass(seed in any::<u64>()) {
        let c = case(seed, false);
        let res = tune_mask(&problem(&c, Solver::Direct)).unwrap();
        let kept: Vec<f64> = (0..c.mask.len()).filter(|&j| c.mask[j]).map(|j| res.tuned[j]).collect();
        let want = two_pass_variance(&kept);
        prop_assert!((res.variance - want).abs() <= 1e-12 * (1.0 + want));
        prop_assert!((mask_variance(&res.tuned, &c.mask).unwrap() - res.variance).abs() <= 1e-15 * (1.0 + want));
    }

    #[test]
    fn solvers_agree(seed in any::<u64>()) {
        let c = case(seed, seed % 3 == 0);
        let d = tune_mask(&problem(&c, Solver::Direct)).unwrap();
        let i = tune_mask(&problem(&c, Solver::Iterative)).unwrap();
        prop_assert!(rel_err(&i.tuned, &d.tuned) <= 1e-6);
    }
}
