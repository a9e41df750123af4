//! The acceptance gate. Each numbered criterion below runs at its stated
//! tolerance and contributes one PASS/FAIL line; the test fails if any
//! criterion does, with the full table in the failure message.
//!
//! Criteria 6, 7, 9, and 10 reuse the optimized schedule produced by
//! criterion 5, so the whole gate exercises one coherent pipeline.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsim_cli::files::{ReportFile, ScheduleFile};
use wsim_core::analysis::{
    generation_fidelities, generation_run, overlap_fidelity, random_w_states, sweep_damping,
    sweep_time, trivial_time_to_target, DampingAxis, Method, SweepTimeOptions, WState,
};
use wsim_core::control::{optimize_crab, trivial_schedule, CrabConfig, OptimizationReport};
use wsim_core::dynamics::{
    evolve_emission, evolve_injection, evolve_reduced, reduced_closed_form, ReducedState,
    TimeGrid, TimeReverse,
};
use wsim_core::model::{
    dark_basis, frame_rotation_rate, interaction_hamiltonian, ConstantRatioSchedule,
    CouplingSchedule, CouplingVector, CrabSchedule, ExcitationState, RatioProfile, SystemParams,
};
use wsim_core::Complex64;

type Outcome = Result<String, String>;

fn err_str<E: std::fmt::Display>(e: E) -> String {
    format!("errored: {e}")
}

fn random_unit_reduced(rng: &mut ChaCha8Rng, n: usize) -> ReducedState {
    let mut c: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
        .collect();
    let norm: f64 = c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut c {
        *z /= norm;
    }
    ReducedState::from_slice(&c).expect("unit reduced state")
}

/// 100 random coupling vectors: interaction-Hamiltonian eigenvalues equal
/// {0 x n, +s_n, -s_n} within 1e-10 s_n, in under a second.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=6usize);
        let g = CouplingVector::new((0..=n).map(|_| rng.random_range(0.05..=3.0)).collect())
            .map_err(err_str)?;
        let sn = g.total_norm();
        let mut eigs: Vec<f64> = interaction_hamiltonian(&g)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigs.sort_by(f64::total_cmp);
        let mut expected = vec![0.0; n + 2];
        expected[0] = -sn;
        expected[n + 1] = sn;
        let dev = eigs
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / sn;
        worst = worst.max(dev);
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "spectrum of 100 random draws, n in 1..=6: max relative deviation {worst:.2e} (bound 1e-10), {secs:.2} s (limit 1 s)"
    );
    if worst <= 1e-10 && secs < 1.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Frame-rotation antisymmetry on 20 random smooth schedules plus
/// closed-port norm conservation of the reduced model, in under 10 s.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let duration = 100.0;
    let h = duration * 1e-7;
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=4usize);
        let m = 4;
        let amps = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..=2.0));
        let shifts: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..=1.0)).collect();
        let sched = CouplingSchedule::Crab(
            CrabSchedule::new(duration, 1.0, amps, shifts).map_err(err_str)?,
        );
        let mut max_sym = 0.0f64;
        let mut max_v = 0.0f64;
        for k in 1..=24 {
            let t = duration * k as f64 / 25.0;
            let Ok(v) = frame_rotation_rate(&sched, t, h) else {
                continue;
            };
            max_sym = max_sym.max((&v + v.transpose()).amax());
            max_v = max_v.max(v.amax());
        }
        if max_v > 0.0 {
            worst_rel = worst_rel.max(max_sym / max_v);
        }
    }

    let p = SystemParams::lossless(3, 0.0).map_err(err_str)?;
    let base = CouplingVector::new(vec![1.0, 0.9, 1.4, 0.7]).map_err(err_str)?;
    let sched = CouplingSchedule::ConstantRatio(
        ConstantRatioSchedule::new(100.0, base, RatioProfile::Sine { amplitude: 0.4 })
            .map_err(err_str)?,
    );
    let c0 = random_unit_reduced(&mut rng, 3);
    let grid = TimeGrid::new(100.0, 8192).map_err(err_str)?;
    let drift = evolve_reduced(&p, &sched, &c0, &grid)
        .map_err(err_str)?
        .iter()
        .map(|s| (s.norm_squared() - 1.0).abs())
        .fold(0.0, f64::max);

    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "max|V+V^T|/max|V| = {worst_rel:.2e} over 20 random smooth schedules (bound 1e-8); closed-port norm drift {drift:.2e} over g0 T = 100 (bound 1e-6); {secs:.2} s (limit 10 s)"
    );
    if worst_rel <= 1e-8 && drift <= 1e-6 && secs < 10.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Reduced-model integrator against the time-independent closed form, and
/// rank-one decay of the emission direction to below 1e-8 by t = 20/(kappa_0 w).
fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let kappa0 = 4.0;
    let p = SystemParams::lossless(3, kappa0).map_err(err_str)?;
    let mut sup = 0.0f64;
    let mut worst_leftover = 0.0f64;
    for _ in 0..3 {
        let g = CouplingVector::new((0..=3).map(|_| rng.random_range(0.3..=2.0)).collect())
            .map_err(err_str)?;
        let duration = 30.0;
        let sched = CouplingSchedule::ConstantRatio(
            ConstantRatioSchedule::new(duration, g.clone(), RatioProfile::Constant)
                .map_err(err_str)?,
        );
        let grid = TimeGrid::new(duration, 8192).map_err(err_str)?;
        let c0 = random_unit_reduced(&mut rng, 3);
        let numeric = evolve_reduced(&p, &sched, &c0, &grid).map_err(err_str)?;
        for (k, state) in numeric.iter().enumerate() {
            let exact = reduced_closed_form(&g, kappa0, &c0, grid.node(k)).map_err(err_str)?;
            let diff = state.coefficients() - exact.coefficients();
            sup = sup.max(diff.iter().map(|z| z.norm()).fold(0.0, f64::max));
        }

        let basis = dark_basis(&g).map_err(err_str)?;
        let w = basis.emission_weight();
        let phi0 = basis.emission_direction().map_err(err_str)?;
        let c_decay = ReducedState::new(phi0.map(|x| Complex64::new(x, 0.0))).map_err(err_str)?;
        let t_star = 20.0 / (kappa0 * w);
        let decay_sched = CouplingSchedule::ConstantRatio(
            ConstantRatioSchedule::new(t_star, g.clone(), RatioProfile::Constant)
                .map_err(err_str)?,
        );
        let decay_grid = TimeGrid::new(t_star, 8192).map_err(err_str)?;
        let leftover = evolve_reduced(&p, &decay_sched, &c_decay, &decay_grid)
            .map_err(err_str)?
            .last()
            .expect("nonempty")
            .norm_squared();
        worst_leftover = worst_leftover.max(leftover);
    }
    let msg = format!(
        "sup-norm vs closed form {sup:.2e} (bound 1e-6); emission-direction leftover {worst_leftover:.2e} at t = 20/(kappa_0 w) (bound 1e-8), 3 coupling draws"
    );
    if sup <= 1e-6 && worst_leftover <= 1e-8 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Lossless emission from 10 random W states: emitted flux plus leftover
/// norm accounts for the whole excitation within 1e-6.
fn criterion_4() -> Outcome {
    let p = SystemParams::lossless(3, 10.0).map_err(err_str)?;
    let sched = trivial_schedule(&p, 1.0, 120.0, 12.0).map_err(err_str)?;
    let grid = TimeGrid::with_default_resolution(120.0, 10.0).map_err(err_str)?;
    let mut worst = 0.0f64;
    for w in random_w_states(3, 10, 404) {
        let run = evolve_emission(&p, &sched, &w.embed(), &grid).map_err(err_str)?;
        let total = run.ledger().total_emitted() + run.final_state().norm_squared();
        worst = worst.max((total - 1.0).abs());
    }
    let msg = format!(
        "emitted flux + leftover norm over 10 random W states: worst |total - 1| = {worst:.2e} (bound 1e-6)"
    );
    if worst <= 1e-6 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Everything criteria 6, 7, 9, and 10 reuse from the headline scenario.
struct Headline {
    params: SystemParams,
    crab_cfg: CrabConfig,
    report: OptimizationReport,
    schedule: CouplingSchedule,
    grid: TimeGrid,
    psi1: WState,
}

/// The headline scenario: n = 3, kappa_0 = 10 g0, kappa_i = 1e-5 g0,
/// gamma_m = 1e-3 g0, g0 T = 100. The optimized schedule must carry both
/// benchmark states with fidelity in [0.985, 1.0]; the gap to the reference
/// values 0.9973 and 0.9971 is reported rather than asserted.
fn criterion_5() -> Result<(Headline, String), String> {
    let params = SystemParams::uniform(3, 10.0, 1e-5, 1e-3).map_err(err_str)?;
    let crab_cfg = CrabConfig::new(3, 100.0, 1.0)
        .with_seed(7)
        .with_restarts(3)
        .with_max_evals(1200)
        .with_objective_steps(8192);
    let search_start = Instant::now();
    let report = optimize_crab(&params, &crab_cfg).map_err(err_str)?;
    let search_secs = search_start.elapsed().as_secs_f64();
    let schedule = report.schedule().clone();
    let grid = TimeGrid::with_default_resolution(100.0, 10.0).map_err(err_str)?;

    let psi1 = WState::normalized(DVector::from_vec(vec![
        Complex64::new(0.5f64.sqrt(), 0.0),
        Complex64::new((1.0f64 / 3.0).sqrt(), 0.0),
        Complex64::new((1.0f64 / 6.0).sqrt(), 0.0),
    ]))
    .map_err(err_str)?;
    let psi2 = WState::normalized(DVector::from_vec(vec![
        Complex64::new((1.0f64 / 3.0).sqrt(), 0.0),
        Complex64::new(-(1.0f64 / 3.0).sqrt(), 0.0),
        Complex64::new(-(1.0f64 / 3.0).sqrt(), 0.0),
    ]))
    .map_err(err_str)?;

    let rt_start = Instant::now();
    let f1 = generation_run(&params, &schedule, &psi1, &grid)
        .map_err(err_str)?
        .fidelity;
    let rt1_secs = rt_start.elapsed().as_secs_f64();
    let rt_start = Instant::now();
    let f2 = generation_run(&params, &schedule, &psi2, &grid)
        .map_err(err_str)?
        .fidelity;
    let rt2_secs = rt_start.elapsed().as_secs_f64();

    let band = 0.985..=1.0;
    let msg = format!(
        "F1 = {f1:.5} (0.9973 - F1 = {:+.4}), F2 = {f2:.5} (0.9971 - F2 = {:+.4}), band [0.985, 1.0]; search objective {:.2e} in {search_secs:.1} s (limit 900 s), roundtrips {rt1_secs:.2} s / {rt2_secs:.2} s (limit 5 s each)",
        0.9973 - f1,
        0.9971 - f2,
        report.objective()
    );
    let ok = band.contains(&f1)
        && band.contains(&f2)
        && search_secs < 900.0
        && rt1_secs < 5.0
        && rt2_secs < 5.0;
    if ok {
        Ok((
            Headline {
                params,
                crab_cfg,
                report,
                schedule,
                grid,
                psi1,
            },
            msg,
        ))
    } else {
        Err(msg)
    }
}

/// The one schedule from criterion 5 must carry 20 seeded random W states
/// at fidelity 0.98 or better, each.
fn criterion_6(h: &Headline) -> Outcome {
    let targets = random_w_states(3, 20, 42);
    let fs = generation_fidelities(&h.params, &h.schedule, &targets, &h.grid).map_err(err_str)?;
    let min = fs.iter().copied().fold(f64::INFINITY, f64::min);
    let msg = format!("20 seeded random W states through the criterion-5 schedule: min fidelity {min:.5} (bound 0.98)");
    if min >= 0.98 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Damping trends: fidelity monotone nonincreasing in each damping rate over
/// [1e-4, 1e-1] (tolerance 1e-3), and F at gamma_m = 1e-2 with kappa_i = 0
/// must reach 0.99.
fn criterion_7(h: &Headline) -> Outcome {
    let values = [1e-4, 1e-3, 1e-2, 3e-2, 1e-1];
    let kappa_curve = sweep_damping(
        &h.params,
        &h.schedule,
        DampingAxis::CavityLoss,
        &values,
        Method::Optimized,
    )
    .map_err(err_str)?;
    let gamma_curve = sweep_damping(
        &h.params,
        &h.schedule,
        DampingAxis::MechanicalLoss,
        &values,
        Method::Optimized,
    )
    .map_err(err_str)?;
    let max_rise = |f: &[f64]| {
        f.windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let rise_k = max_rise(kappa_curve.fidelities());
    let rise_g = max_rise(gamma_curve.fidelities());
    let f_gamma_2 = gamma_curve.fidelities()[2];
    let monotone_ok = rise_k <= 1e-3 && rise_g <= 1e-3;
    let cap_ok = f_gamma_2 >= 0.99;
    let msg = format!(
        "monotone vs kappa_i: max rise {rise_k:.1e} (tol 1e-3) {}; monotone vs gamma_m: max rise {rise_g:.1e} {}; F(gamma_m = 1e-2, kappa_i = 0) = {f_gamma_2:.4} vs required 0.99 {} [every emitted photon transits the mechanical mode, so its integrated occupancy is at least kappa_0/(4 g0^2) = 2.5 and two lossy legs cap F near exp(-2e-2 * 2.5) = 0.951 for any schedule at these ratios]",
        if rise_k <= 1e-3 { "PASS" } else { "FAIL" },
        if rise_g <= 1e-3 { "PASS" } else { "FAIL" },
        if cap_ok { "PASS" } else { "FAIL" },
    );
    if monotone_ok && cap_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Duration trends for n = 1..4 with both dampings off: fidelity
/// nondecreasing in g0 T, the optimized method at least matching the
/// baseline for n >= 2 (within the stated 5e-3 optimizer noise), and the
/// baseline's 0.99-crossing time scaling linearly with n within [0.7, 1.3].
fn criterion_8() -> Outcome {
    let opts = SweepTimeOptions {
        seed: 808,
        restarts: 2,
        max_evals: 600,
        objective_steps: Some(8192),
        stage_margin: 12.0,
    };
    let mut problems: Vec<String> = Vec::new();
    let mut crossings = Vec::new();
    for n in 1..=4usize {
        let template = SystemParams::lossless(n, 10.0).map_err(err_str)?;
        let durations: Vec<f64> = [25.0, 35.0, 50.0]
            .iter()
            .map(|d| d * n as f64)
            .collect();
        let methods: Vec<Method> = if n >= 2 {
            vec![Method::Trivial, Method::Optimized]
        } else {
            vec![Method::Trivial]
        };
        let results =
            sweep_time(&template, 1.0, &[n], &durations, &methods, &opts).map_err(err_str)?;
        let trivial = results
            .iter()
            .find(|r| r.method() == Method::Trivial)
            .expect("trivial curve");
        for (k, w) in trivial.fidelities().windows(2).enumerate() {
            if w[1] < w[0] - 1e-9 {
                problems.push(format!(
                    "trivial n={n} decreases {:.5} -> {:.5} between T={} and T={}",
                    w[0],
                    w[1],
                    durations[k],
                    durations[k + 1]
                ));
            }
        }
        if let Some(optimized) = results.iter().find(|r| r.method() == Method::Optimized) {
            for (k, w) in optimized.fidelities().windows(2).enumerate() {
                if w[1] < w[0] - 5e-3 {
                    problems.push(format!(
                        "optimized n={n} decreases {:.5} -> {:.5} between T={} and T={}",
                        w[0],
                        w[1],
                        durations[k],
                        durations[k + 1]
                    ));
                }
            }
            for ((ft, fo), t) in trivial
                .fidelities()
                .iter()
                .zip(optimized.fidelities())
                .zip(&durations)
            {
                if *fo < ft - 5e-3 {
                    problems.push(format!(
                        "optimized {fo:.5} below trivial {ft:.5} at n={n}, T={t}"
                    ));
                }
            }
        }
        let t99 = trivial_time_to_target(&template, 1.0, 0.99, 10.0 * n as f64, 90.0 * n as f64)
            .map_err(err_str)?;
        crossings.push(t99);
    }
    let t1 = crossings[0];
    let mut ratios = Vec::new();
    for (i, tn) in crossings.iter().enumerate().skip(1) {
        let n = i + 1;
        let ratio = tn / (n as f64 * t1);
        ratios.push(format!("T_{n}/({n} T_1) = {ratio:.2}"));
        if !(0.7..=1.3).contains(&ratio) {
            problems.push(format!(
                "crossing ratio T_{n}/({n} T_1) = {ratio:.2} outside [0.7, 1.3]"
            ));
        }
    }
    let msg = format!(
        "n = 1..4 duration curves nondecreasing, optimized >= trivial - 5e-3 for n >= 2; baseline 0.99-crossings T = {:.1?}, {}",
        crossings,
        ratios.join(", ")
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; PROBLEMS: {}", problems.join("; ")))
    }
}

/// Injecting the reversed pulse into the empty system versus into the
/// conjugated emission leftover: the two fidelities agree within 1e-3.
fn criterion_9(h: &Headline) -> Outcome {
    let emission = evolve_emission(&h.params, &h.schedule, &h.psi1.conjugated().embed(), &h.grid)
        .map_err(err_str)?;
    let pulse = emission.emitted().time_reverse();
    let reversed = h.schedule.time_reverse();
    let target = h.psi1.embed();

    let direct = evolve_injection(
        &h.params,
        &reversed,
        &pulse,
        &ExcitationState::empty(3),
        &h.grid,
    )
    .map_err(err_str)?;
    let f_direct = overlap_fidelity(&target, direct.final_state()).map_err(err_str)?;

    let leftover = emission.final_state().conjugated();
    let roundtrip =
        evolve_injection(&h.params, &reversed, &pulse, &leftover, &h.grid).map_err(err_str)?;
    let f_roundtrip = overlap_fidelity(&target, roundtrip.final_state()).map_err(err_str)?;

    let diff = (f_direct - f_roundtrip).abs();
    let msg = format!(
        "direct injection F = {f_direct:.6}, roundtrip-with-leftover F = {f_roundtrip:.6}, |diff| = {diff:.2e} (bound 1e-3)"
    );
    if diff <= 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Rerunning the criterion-5 search with the same seed must reproduce the
/// schedule and report files byte for byte.
fn criterion_10(h: &Headline) -> Outcome {
    let rerun = optimize_crab(&h.params, &h.crab_cfg).map_err(err_str)?;
    let dir = tempfile::tempdir().map_err(err_str)?;
    let mut paths = Vec::new();
    for (tag, report) in [("a", &h.report), ("b", &rerun)] {
        let sched_path = dir.path().join(format!("schedule_{tag}.json"));
        let report_path = dir.path().join(format!("report_{tag}.json"));
        ScheduleFile::from_crab(&h.crab_cfg, report)
            .save(&sched_path)
            .map_err(err_str)?;
        wsim_cli::files::write_json(&report_path, &ReportFile::from_report(&h.crab_cfg, report))
            .map_err(err_str)?;
        paths.push((sched_path, report_path));
    }
    let sched_a = std::fs::read(&paths[0].0).map_err(err_str)?;
    let sched_b = std::fs::read(&paths[1].0).map_err(err_str)?;
    let rep_a = std::fs::read(&paths[0].1).map_err(err_str)?;
    let rep_b = std::fs::read(&paths[1].1).map_err(err_str)?;
    let msg = format!(
        "seed {} rerun: schedule file {} bytes, report file {} bytes, both byte-identical",
        h.crab_cfg.seed(),
        sched_a.len(),
        rep_a.len()
    );
    if sched_a == sched_b && rep_a == rep_b {
        Ok(msg)
    } else {
        Err(format!(
            "rerun artifacts differ (schedule identical: {}, report identical: {})",
            sched_a == sched_b,
            rep_a == rep_b
        ))
    }
}

#[test]
fn acceptance_criteria() {
    let mut rows: Vec<(usize, Outcome, f64)> = Vec::new();
    let timed = |idx: usize, f: &mut dyn FnMut() -> Outcome, rows: &mut Vec<(usize, Outcome, f64)>| {
        let start = Instant::now();
        let outcome = f();
        rows.push((idx, outcome, start.elapsed().as_secs_f64()));
    };

    timed(1, &mut criterion_1, &mut rows);
    timed(2, &mut criterion_2, &mut rows);
    timed(3, &mut criterion_3, &mut rows);
    timed(4, &mut criterion_4, &mut rows);

    let start5 = Instant::now();
    let headline = match criterion_5() {
        Ok((headline, msg)) => {
            rows.push((5, Ok(msg), start5.elapsed().as_secs_f64()));
            Some(headline)
        }
        Err(msg) => {
            rows.push((5, Err(msg), start5.elapsed().as_secs_f64()));
            None
        }
    };

    match &headline {
        Some(h) => {
            timed(6, &mut || criterion_6(h), &mut rows);
            timed(7, &mut || criterion_7(h), &mut rows);
        }
        None => {
            for idx in [6, 7] {
                rows.push((idx, Err("prerequisite: criterion 5 schedule unavailable".into()), 0.0));
            }
        }
    }

    timed(8, &mut criterion_8, &mut rows);

    match &headline {
        Some(h) => {
            timed(9, &mut || criterion_9(h), &mut rows);
            timed(10, &mut || criterion_10(h), &mut rows);
        }
        None => {
            for idx in [9, 10] {
                rows.push((idx, Err("prerequisite: criterion 5 schedule unavailable".into()), 0.0));
            }
        }
    }

    rows.sort_by_key(|(idx, _, _)| *idx);
    let mut lines = Vec::new();
    let mut failures = 0;
    for (idx, outcome, secs) in &rows {
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        lines.push(format!("criterion {idx:>2}: {verdict} [{secs:.1} s] {detail}"));
    }
    for line in &lines {
        println!("{line}");
    }
    assert!(
        failures == 0,
        "{failures} acceptance criterion(s) failed:\n{}",
        lines.join("\n")
    );
}
