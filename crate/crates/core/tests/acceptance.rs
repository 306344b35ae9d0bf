//! Acceptance gate: eight end-to-end checks covering the identifiability
//! decision procedure, the reparameterization split, the Riccati solver,
//! the low-rank designs, the adversary identifiers, and the
//! finite-difference cross-oracle. Each test prints one `[PASS]`/`[FAIL]`
//! line for its criterion.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unident::adversary::{
    identify_markov, monte_carlo, random_input, random_system, rank_limited_input,
    restricted_markov_error, LearningRate, MaskKind, McFamily, McPlan, McRow, RankSweepParams,
    SampleSweepParams,
};
use unident::controller::{
    design_low_rank, expected_infinite_cost, gain_for_k, input_rank, lqr_infinite,
    simulate_closed_loop, unit_ball_sample, ControllerMode, LqrCost, SnapshotConfig,
};
use unident::error::Error;
use unident::identifiability::{analyze, reparameterize};
use unident::numerics::{spectral_radius, svd_rank, Tolerances};
use unident::sensitivity::{build_bundle_fd, build_bundle_lti, g_ijk, LtiEvaluator, FD_STEP};
use unident::system_model::{markov_params, simulate, LtiSystem};

fn conclude(criterion: usize, label: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("[PASS] criterion {criterion}: {label}");
    } else {
        for f in failures.iter().take(10) {
            eprintln!("  - {f}");
        }
        panic!(
            "[FAIL] criterion {criterion}: {label} ({} failure(s))",
            failures.len()
        );
    }
}

/// Keep a random subset of `n` mask entries (the rest become fixed).
fn subset_mask(sys: &LtiSystem, n: usize, rng: &mut ChaCha8Rng) -> LtiSystem {
    let mut entries = sys.mask.clone();
    entries.shuffle(rng);
    entries.truncate(n);
    LtiSystem::new(
        sys.a.clone(),
        sys.b.clone(),
        sys.c.clone(),
        entries,
        DVector::zeros(sys.p()),
    )
    .expect("subset mask stays valid")
}

fn is_controllable_observable(sys: &LtiSystem, tol: &Tolerances) -> bool {
    let p = sys.p();
    let mut ctrb = DMatrix::zeros(p, p * sys.l());
    let mut obsv = DMatrix::zeros(p * sys.m(), p);
    let mut akb = sys.b.clone();
    let mut cak = sys.c.clone();
    for k in 0..p {
        ctrb.columns_mut(k * sys.l(), sys.l()).copy_from(&akb);
        obsv.rows_mut(k * sys.m(), sys.m()).copy_from(&cak);
        akb = &sys.a * akb;
        cak *= &sys.a;
    }
    svd_rank(&ctrb, tol).unwrap() == p && svd_rank(&obsv, tol).unwrap() == p
}

fn controllable_observable_system(
    p: usize,
    l: usize,
    m: usize,
    rho: f64,
    rng: &mut ChaCha8Rng,
    tol: &Tolerances,
) -> LtiSystem {
    for _ in 0..20 {
        let sys = random_system(p, l, m, rho, MaskKind::Full, rng).unwrap();
        if is_controllable_observable(&sys, tol) {
            return sys;
        }
    }
    panic!("no controllable+observable draw in 20 tries");
}

#[test]
fn criterion_1_span_and_rank_tests_agree() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut failures = Vec::new();
    for trial in 0..200 {
        let p = rng.random_range(2..=5);
        let l = rng.random_range(2..=4);
        let m = rng.random_range(2..=4);
        let full = random_system(p, l, m, 0.7, MaskKind::Full, &mut rng).unwrap();
        let n_cap = full.n_params().min(20);
        let n = rng.random_range(2..=n_cap);
        let sys = subset_mask(&full, n, &mut rng);
        let t_lo = 10usize.max(2 * p).max((2 * n).div_ceil(m));
        let t = rng.random_range(t_lo..=(t_lo + 12).min(50));
        let u = random_input(t, l, &mut rng);

        let bundle = build_bundle_lti(&sys, &u).unwrap();
        let report = analyze(&bundle, &tol).unwrap();
        let rank_w = svd_rank(&bundle.w, &tol).unwrap();
        for i in 0..n {
            let dropped = svd_rank(&bundle.w.clone().remove_column(i), &tol).unwrap();
            let rank_drop_says_identifiable = dropped < rank_w;
            if report.per_param[i].identifiable != rank_drop_says_identifiable {
                failures.push(format!(
                    "trial {trial}: span test and rank-drop test disagree on column {i}"
                ));
            }
        }
        if report.rank_f != rank_w {
            failures.push(format!(
                "trial {trial}: rank(F) = {} but rank(W) = {rank_w}",
                report.rank_f
            ));
        }
        if report.param_identifiable != (report.rank_f == n) {
            failures.push(format!("trial {trial}: whole-vector verdict inconsistent"));
        }
        let all_cols = report.per_param.iter().all(|v| v.identifiable);
        if report.param_identifiable != all_cols {
            failures.push(format!(
                "trial {trial}: rank verdict {} vs per-column verdicts {}",
                report.param_identifiable, all_cols
            ));
        }
    }
    conclude(
        1,
        "span vs rank-drop agreement over 200 random bundles, zero disagreements",
        &failures,
    );
}

#[test]
fn criterion_2_similarity_orbit_and_rank_limited_inputs() {
    let tol = Tolerances::default();
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let sys = random_system(4, 4, 4, 0.9, MaskKind::Full, &mut rng).unwrap();
        assert_eq!(sys.n_params(), 48);

        let u_full = random_input(50, 4, &mut rng);
        let bundle = build_bundle_lti(&sys, &u_full).unwrap();
        let report = analyze(&bundle, &tol).unwrap();
        if report.param_identifiable {
            failures.push(format!("seed {seed}: full-rank input claims parameter identifiability"));
        }
        if report.rank_f != 32 {
            failures.push(format!(
                "seed {seed}: rank(F) = {} instead of 48 - 16",
                report.rank_f
            ));
        }
        if !report.dynamic_identifiable {
            failures.push(format!("seed {seed}: full-rank input fails the dynamics verdict"));
        }

        let u3 = rank_limited_input(50, 4, 3, &mut rng);
        let bundle3 = build_bundle_lti(&sys, &u3).unwrap();
        let report3 = analyze(&bundle3, &tol).unwrap();
        if report3.dynamic_identifiable {
            failures.push(format!("seed {seed}: rank-3 input not detected"));
            continue;
        }
        let wv = report3.residuals.wv.unwrap();
        let hv_rel = report3.residuals.hv_rel.unwrap();
        if wv > 1e-7 * bundle3.w.norm() {
            failures.push(format!("seed {seed}: witness W-residual {wv:e} too large"));
        }
        if hv_rel < 1e-4 {
            failures.push(format!("seed {seed}: witness H-residual {hv_rel:e} too small"));
        }
        if report3.witness_vector().is_none() {
            failures.push(format!("seed {seed}: missing witness"));
        }
    }
    conclude(
        2,
        "48-parameter plants: orbit-only null space vs rank-3 input witness, 50/50 seeds",
        &failures,
    );
}

fn check_reparameterization(
    label: &str,
    bundle: &unident::sensitivity::SensitivityBundle,
    tol: &Tolerances,
    failures: &mut Vec<String>,
) {
    let split = reparameterize(bundle, tol).unwrap();
    let n = bundle.n;
    if svd_rank(&split.p, tol).unwrap() != n {
        failures.push(format!("{label}: P is singular"));
    }
    let rank_f = svd_rank(&bundle.f, tol).unwrap();
    if split.r != rank_f {
        failures.push(format!("{label}: split size {} vs rank(F) {rank_f}", split.r));
    }
    let wp = &bundle.w * &split.p;
    if split.r < n {
        let f_tail = (&bundle.f * split.p.columns(split.r, n - split.r)).norm();
        if f_tail > 1e-7 * bundle.f.norm() {
            failures.push(format!("{label}: F tail residual {f_tail:e}"));
        }
        let w_tail = wp.columns(split.r, n - split.r).norm();
        if w_tail > 1e-7 * bundle.w.norm() {
            failures.push(format!("{label}: W tail residual {w_tail:e}"));
        }
    }
    if split.r > 0 {
        let lead_rank = svd_rank(&wp.columns(0, split.r).into_owned(), tol).unwrap();
        if lead_rank != rank_f {
            failures.push(format!(
                "{label}: leading block rank {lead_rank} vs rank(F) {rank_f}"
            ));
        }
    }
}

#[test]
fn criterion_3_reparameterization_residuals() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3001);
    let mut failures = Vec::new();
    // Mixed-mask ensembles under full-rank inputs.
    for trial in 0..60 {
        let p = rng.random_range(2..=5);
        let l = rng.random_range(2..=4);
        let m = rng.random_range(2..=4);
        let full = random_system(p, l, m, 0.7, MaskKind::Full, &mut rng).unwrap();
        let n = rng.random_range(2..=full.n_params().min(20));
        let sys = subset_mask(&full, n, &mut rng);
        let t_lo = 10usize.max(2 * p).max((2 * n).div_ceil(m));
        let u = random_input(t_lo + 5, l, &mut rng);
        let bundle = build_bundle_lti(&sys, &u).unwrap();
        check_reparameterization(&format!("mixed trial {trial}"), &bundle, &tol, &mut failures);
    }
    // Fully free 48-parameter plants, full-rank and rank-limited inputs.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let sys = random_system(4, 4, 4, 0.9, MaskKind::Full, &mut rng).unwrap();
        let u_full = random_input(50, 4, &mut rng);
        let bundle = build_bundle_lti(&sys, &u_full).unwrap();
        check_reparameterization(&format!("orbit seed {seed}"), &bundle, &tol, &mut failures);
        let u3 = rank_limited_input(50, 4, 3, &mut rng);
        let bundle3 = build_bundle_lti(&sys, &u3).unwrap();
        check_reparameterization(&format!("rank-3 seed {seed}"), &bundle3, &tol, &mut failures);
    }
    conclude(
        3,
        "orthogonal split isolates the unidentifiable directions on 80 bundles",
        &failures,
    );
}

#[test]
fn criterion_4_riccati_solutions_are_stabilizing_fixed_points() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let p = rng.random_range(1..=8);
        let l = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let sys = random_system(p, l, m, 0.85, MaskKind::Full, &mut rng).unwrap();
        let cost = LqrCost::scalars(1.0, 1.0, m, l).unwrap();
        let sol = match lqr_infinite(&sys, &cost, &tol) {
            Ok(sol) => sol,
            Err(e) => {
                failures.push(format!("trial {trial}: solver failed: {e}"));
                continue;
            }
        };
        let qx = sys.c.transpose() * &cost.q * &sys.c;
        let residual = unident::numerics::dare_residual(&sys.a, &sys.b, &qx, &sol);
        if residual > 1e-8 * (1.0 + sol.p.norm()) {
            failures.push(format!("trial {trial}: residual {residual:e}"));
        }
        let rho = spectral_radius(&(&sys.a - &sys.b * &sol.gain)).unwrap();
        if rho >= 1.0 {
            failures.push(format!("trial {trial}: closed loop radius {rho}"));
        }
    }
    // Scalar closed form.
    let scalar = LtiSystem::fully_masked(
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let sol = lqr_infinite(&scalar, &LqrCost::scalars(1.0, 1.0, 1, 1).unwrap(), &tol).unwrap();
    if (sol.p[(0, 0)] - 1.1327822185373186).abs() > 1e-9 {
        failures.push(format!("scalar case: P = {}", sol.p[(0, 0)]));
    }
    conclude(
        4,
        "Riccati fixed points and stabilizing gains on 100 plants plus the scalar closed form",
        &failures,
    );
}

#[test]
fn criterion_5_wide_plants_hide_dynamics_under_plain_lqr() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let p = rng.random_range(1..=3);
        let l = rng.random_range(p + 1..=4);
        let m = rng.random_range(2..=4);
        let sys = random_system(p, l, m, 0.7, MaskKind::Full, &mut rng).unwrap();
        let cost = LqrCost::scalars(1.0, 1.0, m, l).unwrap();
        let snap = SnapshotConfig::default_for(&sys);
        let ctl = match design_low_rank(&sys, &cost, None, &snap, 50_000 + trial as u64, &tol) {
            Ok(ctl) => ctl,
            Err(e) => {
                failures.push(format!("trial {trial}: design failed: {e}"));
                continue;
            }
        };
        if ctl.mode != ControllerMode::PlainLqr {
            failures.push(format!("trial {trial}: expected the plain-feedback branch"));
            continue;
        }
        let x0 = unit_ball_sample(&mut rng, p);
        let traj = simulate_closed_loop(&sys, &ctl.effective_feedback(), &x0, 50).unwrap();
        let rank_u = input_rank(&traj.u, &tol).unwrap();
        if rank_u > p {
            failures.push(format!("trial {trial}: input rank {rank_u} > state dim {p}"));
        }
        let bundle = build_bundle_lti(&sys, &traj.u).unwrap();
        let report = analyze(&bundle, &tol).unwrap();
        if report.dynamic_identifiable {
            failures.push(format!("trial {trial}: dynamics still identifiable"));
        }
    }
    conclude(
        5,
        "plain feedback on 50 wide plants: input rank capped at p and dynamics hidden",
        &failures,
    );
}

#[test]
fn criterion_6_low_rank_designs_trade_cost_for_concealment() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut failures = Vec::new();
    let mut unstable = 0usize;
    let mut raw_curve_violations = 0usize;
    let mut raw_curve_total = 0usize;
    for trial in 0..50 {
        let p = rng.random_range(4..=6);
        let sys = controllable_observable_system(p, 4, 4, 0.5, &mut rng, &tol);
        let cost = LqrCost::scalars(1.0, 1.0, 4, 4).unwrap();
        let snap = SnapshotConfig::default_for(&sys);
        let seed = 60_000 + trial as u64;
        let ctl = match design_low_rank(&sys, &cost, Some(3), &snap, seed, &tol) {
            Ok(ctl) => ctl,
            Err(Error::ReducedLoopUnstable { .. }) => {
                unstable += 1;
                continue;
            }
            Err(e) => {
                failures.push(format!("trial {trial}: design failed: {e}"));
                continue;
            }
        };
        if ctl.mode != ControllerMode::StateFeedbackReduced || ctl.r != 3 {
            failures.push(format!("trial {trial}: wrong mode or order"));
            continue;
        }
        if svd_rank(&ctl.k, &tol).unwrap() != 3 {
            failures.push(format!("trial {trial}: K is not rank 3"));
        }
        let gram = ctl.v1.transpose() * &ctl.v2 - DMatrix::identity(3, 3);
        if gram.norm() > 1e-10 {
            failures.push(format!("trial {trial}: V1'V2 off identity by {:e}", gram.norm()));
        }
        let fb = ctl.effective_feedback();
        let rho = spectral_radius(&(&sys.a - &sys.b * &fb)).unwrap();
        if rho >= 1.0 {
            failures.push(format!("trial {trial}: accepted design is unstable ({rho})"));
            continue;
        }
        let x0 = unit_ball_sample(&mut rng, p);
        let traj = simulate_closed_loop(&sys, &fb, &x0, 50).unwrap();
        let rank_u = input_rank(&traj.u, &tol).unwrap();
        if rank_u > 3 {
            failures.push(format!("trial {trial}: closed-loop input rank {rank_u} > 3"));
        }
        let report = analyze(&build_bundle_lti(&sys, &traj.u).unwrap(), &tol).unwrap();
        if report.dynamic_identifiable {
            failures.push(format!("trial {trial}: dynamics still identifiable"));
        }

        let full = lqr_infinite(&sys, &cost, &tol).unwrap();
        let j_designed = expected_infinite_cost(&sys, &fb, &cost).unwrap();
        let j_full = expected_infinite_cost(&sys, &full.gain, &cost).unwrap();
        if j_designed < j_full * (1.0 - 1e-9) {
            failures.push(format!(
                "trial {trial}: designed cost {j_designed} beats the unrestricted optimum {j_full}"
            ));
        }
        // Cost monotonicity in the feedback order: nested input ranges
        // (leading columns of K) must give non-increasing optimal cost.
        let mut j_min = Vec::new();
        for r in 1..=3usize {
            let k_r = ctl.k.columns(0, r).into_owned();
            match gain_for_k(&sys, &cost, &k_r, &tol) {
                Ok(sol) => j_min.push(sol.p.trace()),
                Err(e) => failures.push(format!("trial {trial}: rank-{r} subproblem: {e}")),
            }
        }
        for pair in j_min.windows(2) {
            if pair[1] > pair[0] * (1.0 + 1e-9) {
                failures.push(format!(
                    "trial {trial}: nested cost rose from {} to {}",
                    pair[0], pair[1]
                ));
            }
        }
        // The per-order emitted designs themselves are reported, not
        // asserted: each order re-derives its own snapshot basis, so the
        // emitted costs need not be monotone.
        let mut raw = Vec::new();
        for r in 1..=3usize {
            if let Ok(c) = design_low_rank(&sys, &cost, Some(r), &snap, seed, &tol) {
                if let Ok(j) = expected_infinite_cost(&sys, &c.effective_feedback(), &cost) {
                    raw.push(j);
                }
            }
        }
        for pair in raw.windows(2) {
            raw_curve_total += 1;
            if pair[1] > pair[0] * (1.0 + 1e-9) {
                raw_curve_violations += 1;
            }
        }
    }
    if unstable > 5 {
        failures.push(format!("{unstable}/50 designs rejected as unstable (budget 5)"));
    }
    conclude(
        6,
        &format!(
            "rank-3 designs conceal dynamics at bounded cost ({unstable}/50 typed-unstable; \
             emitted per-order cost curve non-monotone on {raw_curve_violations}/{raw_curve_total} \
             adjacent pairs, informational)"
        ),
        &failures,
    );
}

fn mc_metric(rows: &[McRow], metric: &str) -> Vec<McRow> {
    rows.iter().filter(|r| r.metric == metric).cloned().collect()
}

#[test]
fn criterion_7_adversary_succeeds_on_rich_data_and_fails_on_designed_data() {
    let tol = Tolerances::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let mut failures = Vec::new();

    for trial in 0..10 {
        let sys = random_system(4, 4, 4, 0.3, MaskKind::Full, &mut rng).unwrap();

        // Persistently exciting data: near-exact recovery.
        let u_pe = random_input(200, 4, &mut rng);
        let traj_pe = simulate(&sys, &u_pe, None).unwrap();
        let res_pe = identify_markov(&traj_pe, 20, 0.0, None, Some(&sys), &tol).unwrap();
        let m_err = res_pe.markov_error.unwrap();
        if m_err > 1e-8 {
            failures.push(format!("trial {trial}: PE markov error {m_err:e}"));
        }

        // Rank-3 training inputs with a full-rank held-out tail.
        let u3 = rank_limited_input(950, 4, 3, &mut rng);
        let u_tail = random_input(50, 4, &mut rng);
        let mut u_mix = DMatrix::zeros(1000, 4);
        u_mix.rows_mut(0, 950).copy_from(&u3);
        u_mix.rows_mut(950, 50).copy_from(&u_tail);
        let traj_mix = simulate(&sys, &u_mix, None).unwrap();
        let res_mix =
            identify_markov(&traj_mix, 20, 0.0, Some((950, 50)), Some(&sys), &tol).unwrap();

        let u_ctrl = random_input(1000, 4, &mut rng);
        let traj_ctrl = simulate(&sys, &u_ctrl, None).unwrap();
        let res_ctrl =
            identify_markov(&traj_ctrl, 20, 0.0, Some((950, 50)), Some(&sys), &tol).unwrap();
        if res_mix.pred_error < 100.0 * res_ctrl.pred_error {
            failures.push(format!(
                "trial {trial}: held-out error {:e} not >= 100x the PE-trained {:e}",
                res_mix.pred_error, res_ctrl.pred_error
            ));
        }

        // On the excited subspace the rank-3 estimate still agrees.
        let truth = markov_params(&sys, 20);
        let restricted =
            restricted_markov_error(&res_mix.markov_estimate, &truth, &u3, &tol).unwrap();
        if restricted > 1e-6 {
            failures.push(format!("trial {trial}: restricted error {restricted:e}"));
        }
    }

    // Monte Carlo: parameter error shrinks with sample size down to the
    // noise floor.
    let sweep = monte_carlo(
        &McPlan {
            family: McFamily::SampleSweepGradDescent(SampleSweepParams {
                p: 4,
                l: 4,
                m: 4,
                rho: 0.6,
                v_amp: 0.02,
                sizes: vec![10, 25, 50, 100],
                lr: LearningRate::AutoScaled(0.45),
                iters: 400,
            }),
            runs: 100,
        },
        777,
        None,
    )
    .unwrap();
    let errs = mc_metric(&sweep, "param_error");
    let floors = mc_metric(&sweep, "noise_floor");
    if errs.iter().any(|r| r.runs != 100) {
        failures.push("sample sweep lost runs to divergence".into());
    }
    for pair in errs.windows(2) {
        if pair[1].mean >= pair[0].mean {
            failures.push(format!(
                "mean error not strictly decreasing: {} then {}",
                pair[0].mean, pair[1].mean
            ));
        }
    }
    let final_err = errs.last().unwrap().mean;
    let final_floor = floors.last().unwrap().mean;
    if final_err > 3.0 * final_floor {
        failures.push(format!(
            "final error {final_err:e} above 3x the noise floor {final_floor:e}"
        ));
    }

    // Monte Carlo: richer training-input rank means better held-out
    // prediction, up to one standard error per adjacent pair.
    let ranks = monte_carlo(
        &McPlan {
            family: McFamily::RankSweepMarkov(RankSweepParams {
                p: 4,
                l: 4,
                m: 4,
                rho: 0.3,
                v_amp: 0.02,
                ranks: vec![1, 2, 3, 4],
                train: 950,
                test: 50,
                t_m: 20,
            }),
            runs: 100,
        },
        778,
        None,
    )
    .unwrap();
    let pred = mc_metric(&ranks, "pred_error");
    for pair in pred.windows(2) {
        let rise = pair[1].mean - pair[0].mean;
        let se = (pair[0].std.powi(2) + pair[1].std.powi(2)).sqrt()
            / (pair[1].runs as f64).sqrt();
        if rise > se {
            failures.push(format!(
                "rank sweep rose by {rise:e} (> 1 SE {se:e}) between ranks {} and {}",
                pair[0].sample_size, pair[1].sample_size
            ));
        }
    }
    conclude(
        7,
        "exact recovery under PE data, blindness off the excited subspace, \
         and the two Monte Carlo trends",
        &failures,
    );
}

#[test]
fn criterion_8_finite_differences_cross_check_every_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let mut failures = Vec::new();
    for trial in 0..20 {
        let p = rng.random_range(1..=3);
        let l = rng.random_range(1..=3);
        let m = rng.random_range(1..=3);
        let sys = random_system(p, l, m, 0.4, MaskKind::Full, &mut rng).unwrap();
        let t = rng.random_range(5..=10);
        let u = random_input(t, l, &mut rng);

        let exact = build_bundle_lti(&sys, &u).unwrap();
        let eval = LtiEvaluator::new(sys.clone());
        let theta = sys.extract_params();
        let fd = build_bundle_fd(&eval, &theta, &u, FD_STEP).unwrap();
        let w_rel = (&exact.w - &fd.w).norm() / exact.w.norm();
        let ja_rel = (&exact.ja - &fd.ja).norm() / exact.ja.norm();
        let h_rel = (&exact.h - &fd.h).norm() / exact.h.norm();
        if w_rel > 1e-6 {
            failures.push(format!("trial {trial}: W differs by {w_rel:e}"));
        }
        if ja_rel > 1e-6 {
            failures.push(format!("trial {trial}: Ja differs by {ja_rel:e}"));
        }
        if h_rel > 1e-4 {
            failures.push(format!("trial {trial}: H differs by {h_rel:e}"));
        }

        // Direct check of the derivative table against differenced
        // impulse-response coefficients.
        for i in 0..sys.n_params() {
            for d in 0..t {
                let g = g_ijk(&sys, i, d).unwrap();
                let h_step = FD_STEP * (1.0 + theta[i].abs());
                let mut plus = theta.clone();
                plus[i] += h_step;
                let mut minus = theta.clone();
                minus[i] -= h_step;
                let m_plus = markov_params(&sys.apply_params(&plus).unwrap(), d + 1)
                    .pop()
                    .unwrap();
                let m_minus = markov_params(&sys.apply_params(&minus).unwrap(), d + 1)
                    .pop()
                    .unwrap();
                let diffed = (m_plus - m_minus) / (2.0 * h_step);
                let err = (&g - &diffed).norm();
                if err > 1e-6 * (1.0 + g.norm()) {
                    failures.push(format!(
                        "trial {trial}: derivative {i} at delay {d} differs by {err:e}"
                    ));
                }
            }
        }
    }
    conclude(
        8,
        "analytic sensitivities match finite differences on 20 plants",
        &failures,
    );
}
