//! Implementations of the six subcommands. Each takes a resolved
//! configuration and an output directory, writes its artifacts atomically,
//! and prints a short plain-text summary to stdout.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use wsim_core::analysis::{
    canonical_targets, generation_run, sweep_damping, sweep_time, DampingAxis, Method,
    SweepTimeOptions, WState,
};
use wsim_core::control::{optimize_crab, trivial_schedule, CrabConfig};
use wsim_core::dynamics::{
    evolve_emission, evolve_injection, TimeGrid, TimeReverse,
};
use wsim_core::model::{CouplingSchedule, ExcitationState};

use crate::config::{
    Resolved, ResolvedSchedule, ResolvedState, ResolvedTargets, SweepAxis, SweepMethod,
};
use crate::error::{CliError, CliResult};
use crate::files::{
    write_json, write_pulse_csv, write_sweep_csv, write_trajectory_csv, ReportFile, ScheduleFile,
};
use crate::verify::run_verify;

const DEFAULT_STAGE_MARGIN: f64 = 12.0;

/// A concrete schedule plus the labels the outputs carry.
struct LoadedSchedule {
    schedule: CouplingSchedule,
    method: Method,
    kind: String,
}

fn load_schedule(cfg: &Resolved) -> CliResult<LoadedSchedule> {
    match &cfg.schedule {
        None => Err(CliError::config(
            "this command needs a schedule (file, trivial, or crab via optimize)",
        )),
        Some(ResolvedSchedule::File(path)) => {
            let file = ScheduleFile::load(path)?;
            let schedule = file.to_schedule(&cfg.params)?;
            let method = if file.kind == "trivial" {
                Method::Trivial
            } else {
                Method::Optimized
            };
            Ok(LoadedSchedule {
                schedule,
                method,
                kind: file.kind,
            })
        }
        Some(ResolvedSchedule::Trivial(t)) => {
            let margin = t.stage_margin.unwrap_or(DEFAULT_STAGE_MARGIN);
            let schedule = trivial_schedule(&cfg.params, cfg.g0, t.duration, margin)?;
            Ok(LoadedSchedule {
                schedule,
                method: Method::Trivial,
                kind: "trivial".to_string(),
            })
        }
        Some(ResolvedSchedule::Crab(_)) => Err(CliError::config(
            "inline crab settings describe a search; run `wsim optimize` and point schedule.file at its output",
        )),
    }
}

fn grid_for(cfg: &Resolved, duration: f64) -> CliResult<TimeGrid> {
    match cfg.grid_steps {
        Some(steps) => TimeGrid::new(duration, steps).map_err(CliError::from),
        None => {
            TimeGrid::with_default_resolution(duration, cfg.params.kappa0()).map_err(CliError::from)
        }
    }
}

fn targets_of(cfg: &Resolved) -> CliResult<Vec<WState>> {
    match &cfg.targets {
        None | Some(ResolvedTargets::Canonical) => Ok(canonical_targets(cfg.params.n())),
        Some(ResolvedTargets::List(lists)) => lists
            .iter()
            .map(|c| {
                WState::normalized(DVector::from_row_slice(c))
                    .map_err(|e| CliError::config(e.to_string()))
            })
            .collect(),
    }
}

fn initial_state_of(cfg: &Resolved) -> CliResult<ExcitationState> {
    match &cfg.initial_state {
        None | Some(ResolvedState::Empty) => Ok(ExcitationState::empty(cfg.params.n())),
        Some(ResolvedState::Microwave(c)) => {
            ExcitationState::from_microwave(c).map_err(|e| CliError::config(e.to_string()))
        }
    }
}

fn meta_lines(cfg: &Resolved, extra: &[String]) -> Vec<String> {
    let mut lines = cfg.unit_header();
    lines.push(format!("seed: {}", cfg.seed));
    lines.extend_from_slice(extra);
    lines
}

pub fn cmd_verify(seed: u64, flip_io_sign: bool, out: &Path) -> CliResult<()> {
    let report = run_verify(seed, flip_io_sign)?;
    for line in report.lines() {
        println!("{line}");
    }
    write_json(&out.join("verify_report.json"), &report)?;
    println!("wrote {}", out.join("verify_report.json").display());
    if report.all_passed {
        println!("verify: all checks passed");
        Ok(())
    } else {
        Err(CliError::Check(
            "one or more verification checks failed".to_string(),
        ))
    }
}

pub fn cmd_optimize(cfg: &Resolved, out: &Path) -> CliResult<()> {
    let settings = match &cfg.schedule {
        Some(ResolvedSchedule::Crab(c)) => c.clone(),
        _ => {
            return Err(CliError::config(
                "optimize needs inline crab settings under schedule.crab",
            ))
        }
    };
    let mut crab_cfg = CrabConfig::new(cfg.params.n(), settings.duration, cfg.g0)
        .with_seed(cfg.seed);
    if let Some(m) = settings.harmonics {
        crab_cfg = crab_cfg.with_harmonics(m);
    }
    if let Some(b) = settings.amplitude_bound {
        crab_cfg = crab_cfg.with_amplitude_bound(b);
    }
    if let Some(r) = settings.restarts {
        crab_cfg = crab_cfg.with_restarts(r);
    }
    if let Some(e) = settings.max_evals {
        crab_cfg = crab_cfg.with_max_evals(e);
    }
    if let Some(s) = settings.objective_steps {
        crab_cfg = crab_cfg.with_objective_steps(s);
    }

    let report = optimize_crab(&cfg.params, &crab_cfg)?;

    let schedule_path = out.join("schedule.json");
    let report_path = out.join("optimize_report.json");
    ScheduleFile::from_crab(&crab_cfg, &report).save(&schedule_path)?;
    write_json(&report_path, &ReportFile::from_report(&crab_cfg, &report))?;

    println!(
        "optimize: objective {:.6e} after {} evaluations (seed {})",
        report.objective(),
        report.evaluations(),
        report.seed()
    );
    for (i, r) in report.per_basis_residuals().iter().enumerate() {
        println!("  residual cavity {}: {:.6e}", i + 1, r);
    }
    if report.budget_exhausted() {
        println!("  note: evaluation budget exhausted; a larger max_evals may improve the result");
    }
    println!("wrote {}", schedule_path.display());
    println!("wrote {}", report_path.display());
    Ok(())
}

pub fn cmd_emit(cfg: &Resolved, out: &Path) -> CliResult<()> {
    let loaded = load_schedule(cfg)?;
    let psi0 = initial_state_of(cfg)?;
    let grid = grid_for(cfg, loaded.schedule.duration())?;
    let run = evolve_emission(&cfg.params, &loaded.schedule, &psi0, &grid)?;

    let extra = vec![
        format!("schedule: kind={} duration={} n={}", loaded.kind, loaded.schedule.duration(), cfg.params.n()),
        "command: emit".to_string(),
    ];
    let meta = meta_lines(cfg, &extra);
    write_trajectory_csv(&out.join("emit_trajectory.csv"), &meta, &run)?;
    write_pulse_csv(&out.join("emit_pulse.csv"), &meta, run.emitted())?;

    println!(
        "emit: emitted {:.6} of the excitation, {:.3e} left in the system, ledger residual {:.3e}",
        run.ledger().total_emitted(),
        run.final_state().norm_squared(),
        run.ledger().max_balance_error()
    );
    println!("wrote {}", out.join("emit_trajectory.csv").display());
    println!("wrote {}", out.join("emit_pulse.csv").display());
    Ok(())
}

pub fn cmd_inject(
    cfg: &Resolved,
    out: &Path,
    reverse_pulse: bool,
    reverse_schedule: bool,
) -> CliResult<()> {
    let loaded = load_schedule(cfg)?;
    let pulse_path = cfg
        .pulse_file
        .as_ref()
        .ok_or_else(|| CliError::config("inject needs pulse_file"))?;
    let mut pulse = crate::files::read_pulse_csv(pulse_path)?;
    if reverse_pulse {
        pulse = pulse.time_reverse();
    }
    let schedule = if reverse_schedule {
        loaded.schedule.time_reverse()
    } else {
        loaded.schedule
    };
    let psi0 = initial_state_of(cfg)?;
    let grid = grid_for(cfg, schedule.duration())?;
    let run = evolve_injection(&cfg.params, &schedule, &pulse, &psi0, &grid)?;

    let extra = vec![
        format!(
            "schedule: kind={} duration={} n={} reversed={}",
            loaded.kind,
            schedule.duration(),
            cfg.params.n(),
            reverse_schedule
        ),
        format!("pulse: {} reversed={}", pulse_path.display(), reverse_pulse),
        "command: inject".to_string(),
    ];
    let meta = meta_lines(cfg, &extra);
    write_trajectory_csv(&out.join("inject_trajectory.csv"), &meta, &run)?;

    println!(
        "inject: final norm^2 {:.6} from {:.6} injected, ledger residual {:.3e}",
        run.final_state().norm_squared(),
        run.ledger().total_injected(),
        run.ledger().max_balance_error()
    );
    if cfg.targets.is_some() {
        for (i, t) in targets_of(cfg)?.iter().enumerate() {
            let f = wsim_core::analysis::overlap_fidelity(&t.embed(), run.final_state())?;
            println!("  overlap with target {}: {:.6}", i + 1, f);
        }
    }
    println!("wrote {}", out.join("inject_trajectory.csv").display());
    Ok(())
}

pub fn cmd_roundtrip(cfg: &Resolved, out: &Path) -> CliResult<()> {
    let loaded = load_schedule(cfg)?;
    let targets = targets_of(cfg)?;
    let grid = grid_for(cfg, loaded.schedule.duration())?;

    let mut fidelities = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let run = generation_run(&cfg.params, &loaded.schedule, target, &grid)?;
        let extra = vec![
            format!(
                "schedule: kind={} duration={} n={}",
                loaded.kind,
                loaded.schedule.duration(),
                cfg.params.n()
            ),
            format!("command: roundtrip target {}", i + 1),
        ];
        let meta = meta_lines(cfg, &extra);
        let pulse = run
            .injection
            .absorbed()
            .expect("injection records its drive");
        write_pulse_csv(&out.join(format!("roundtrip_pulse_{}.csv", i + 1)), &meta, pulse)?;
        write_trajectory_csv(
            &out.join(format!("roundtrip_trajectory_{}.csv", i + 1)),
            &meta,
            &run.injection,
        )?;
        println!("F_{} = {:.6}", i + 1, run.fidelity);
        fidelities.push(run.fidelity);
    }
    let mean = fidelities.iter().sum::<f64>() / fidelities.len() as f64;
    println!("mean fidelity = {mean:.6}");

    #[derive(serde::Serialize)]
    struct RoundtripReport {
        schedule_kind: String,
        n: usize,
        duration: f64,
        fidelities: Vec<f64>,
        mean: f64,
    }
    write_json(
        &out.join("roundtrip_report.json"),
        &RoundtripReport {
            schedule_kind: loaded.kind,
            n: cfg.params.n(),
            duration: loaded.schedule.duration(),
            fidelities,
            mean,
        },
    )?;
    println!("wrote {}", out.join("roundtrip_report.json").display());
    Ok(())
}

pub fn cmd_sweep(cfg: &Resolved, out: &Path) -> CliResult<()> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::config("sweep needs a sweep section"))?;

    let mut written: Vec<PathBuf> = Vec::new();
    match sweep.axis {
        SweepAxis::KappaI | SweepAxis::GammaM => {
            let loaded = load_schedule(cfg)?;
            let axis = match sweep.axis {
                SweepAxis::KappaI => DampingAxis::CavityLoss,
                _ => DampingAxis::MechanicalLoss,
            };
            let result = sweep_damping(
                &cfg.params,
                &loaded.schedule,
                axis,
                &sweep.values,
                loaded.method,
            )?;
            let path = out.join(format!(
                "sweep_{}_{}_n{}.csv",
                sweep.axis.label(),
                result.method().label(),
                result.n()
            ));
            let meta = meta_lines(
                cfg,
                &[format!(
                    "sweep: axis={} schedule={} duration={}",
                    sweep.axis.label(),
                    loaded.kind,
                    loaded.schedule.duration()
                )],
            );
            write_sweep_csv(&path, &meta, &result)?;
            written.push(path);
        }
        SweepAxis::Duration => {
            let ns = sweep
                .ns
                .clone()
                .unwrap_or_else(|| vec![cfg.params.n()]);
            let defaults = SweepTimeOptions::default();
            let opts = SweepTimeOptions {
                seed: cfg.seed,
                restarts: sweep.restarts.unwrap_or(defaults.restarts),
                max_evals: sweep.max_evals.unwrap_or(defaults.max_evals),
                objective_steps: sweep.objective_steps.or(defaults.objective_steps),
                stage_margin: sweep.stage_margin.unwrap_or(defaults.stage_margin),
            };
            let methods: Vec<Method> = sweep
                .methods
                .iter()
                .map(|m| match m {
                    SweepMethod::Trivial => Method::Trivial,
                    SweepMethod::Optimized => Method::Optimized,
                })
                .collect();
            let results = sweep_time(&cfg.params, cfg.g0, &ns, &sweep.values, &methods, &opts)?;
            for result in &results {
                let path = out.join(format!(
                    "sweep_{}_{}_n{}.csv",
                    sweep.axis.label(),
                    result.method().label(),
                    result.n()
                ));
                let meta = meta_lines(
                    cfg,
                    &[format!(
                        "sweep: axis={} method={} n={}",
                        sweep.axis.label(),
                        result.method().label(),
                        result.n()
                    )],
                );
                write_sweep_csv(&path, &meta, result)?;
                written.push(path);
            }
        }
    }
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
