//! On-disk artifact formats: the schedule file, optimization report, CSV
//! export, and atomic writes.
//!
//! All files are UTF-8. JSON artifacts serialize with a fixed field order
//! and shortest-roundtrip float formatting, so a rerun with the same seed
//! reproduces them byte for byte. CSV columns print floats with 17
//! significant digits, enough to reconstruct every `f64` exactly; lines
//! starting with `#` are metadata comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use wsim_core::analysis::SweepResult;
use wsim_core::control::{trivial_schedule, CrabConfig, OptimizationReport};
use wsim_core::dynamics::{PulseShape, TimeGrid, Trajectory};
use wsim_core::model::{CouplingSchedule, CrabSchedule, SystemParams};
use wsim_core::Complex64;

use crate::error::{CliError, CliResult};

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

/// Serialized coupling schedule. Amplitudes are stored in multiples of
/// `g0_fixed` (row-major, `harmonics` rows by `n` columns) so the file stays
/// meaningful if the reference coupling is rescaled.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub format_version: u32,
    pub kind: String,
    pub duration: f64,
    pub g0_fixed: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harmonics: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harmonic_shifts: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ScheduleFile {
    pub fn from_crab(cfg: &CrabConfig, report: &OptimizationReport) -> Self {
        let a = report.amplitudes();
        let g0 = cfg.g0_fixed();
        // Row-major flatten in multiples of g0_fixed.
        let mut amplitudes = Vec::with_capacity(a.nrows() * a.ncols());
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                amplitudes.push(a[(i, j)] / g0);
            }
        }
        Self {
            format_version: SCHEDULE_FORMAT_VERSION,
            kind: "crab".to_string(),
            duration: cfg.duration(),
            g0_fixed: g0,
            n: cfg.n(),
            harmonics: Some(cfg.harmonics()),
            amplitudes: Some(amplitudes),
            harmonic_shifts: Some(report.harmonic_shifts().to_vec()),
            stage_margin: None,
            seed: Some(report.seed()),
        }
    }

    pub fn from_trivial(n: usize, g0_fixed: f64, duration: f64, stage_margin: f64) -> Self {
        Self {
            format_version: SCHEDULE_FORMAT_VERSION,
            kind: "trivial".to_string(),
            duration,
            g0_fixed,
            n,
            harmonics: None,
            amplitudes: None,
            harmonic_shifts: None,
            stage_margin: Some(stage_margin),
            seed: None,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let file: ScheduleFile = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("cannot parse {}: {e}", path.display())))?;
        if file.format_version != SCHEDULE_FORMAT_VERSION {
            return Err(CliError::config(format!(
                "{}: unsupported schedule format_version {} (this build reads {})",
                path.display(),
                file.format_version,
                SCHEDULE_FORMAT_VERSION
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }

    /// Reconstruct the runnable schedule. The sequential baseline needs the
    /// port decay rate to size its stage peaks, hence the parameter set.
    pub fn to_schedule(&self, p: &SystemParams) -> CliResult<CouplingSchedule> {
        if self.n != p.n() {
            return Err(CliError::config(format!(
                "schedule file is for n = {} but the system has n = {}",
                self.n,
                p.n()
            )));
        }
        match self.kind.as_str() {
            "crab" => {
                let m = self.harmonics.ok_or_else(|| {
                    CliError::config("crab schedule file is missing harmonics")
                })?;
                let flat = self.amplitudes.as_ref().ok_or_else(|| {
                    CliError::config("crab schedule file is missing amplitudes")
                })?;
                let shifts = self.harmonic_shifts.as_ref().ok_or_else(|| {
                    CliError::config("crab schedule file is missing harmonic_shifts")
                })?;
                if flat.len() != m * self.n {
                    return Err(CliError::config(format!(
                        "amplitudes holds {} values, expected {} ({} harmonics x {} cavities)",
                        flat.len(),
                        m * self.n,
                        m,
                        self.n
                    )));
                }
                let scaled: Vec<f64> = flat.iter().map(|a| a * self.g0_fixed).collect();
                let a = DMatrix::from_row_slice(m, self.n, &scaled);
                // The file is the authority on its own amplitudes; no search
                // bound applies when replaying a stored schedule.
                let crab = CrabSchedule::new(self.duration, self.g0_fixed, a, shifts.clone())?;
                Ok(CouplingSchedule::Crab(crab))
            }
            "trivial" => {
                let margin = self.stage_margin.ok_or_else(|| {
                    CliError::config("trivial schedule file is missing stage_margin")
                })?;
                trivial_schedule(p, self.g0_fixed, self.duration, margin).map_err(CliError::from)
            }
            other => Err(CliError::config(format!(
                "unknown schedule kind {other:?} (expected \"crab\" or \"trivial\")"
            ))),
        }
    }
}

/// Optimization summary written next to the schedule file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub n: usize,
    pub duration: f64,
    pub g0_fixed: f64,
    pub harmonics: usize,
    pub restarts: usize,
    pub max_evals: usize,
    pub seed: u64,
    pub objective: f64,
    pub per_basis_residuals: Vec<f64>,
    pub evaluations: usize,
    /// True when any restart ran out of evaluations before converging; the
    /// result is still the best point seen, but a larger budget may improve it.
    pub budget_exhausted: bool,
    pub objective_history: Vec<f64>,
}

impl ReportFile {
    pub fn from_report(cfg: &CrabConfig, report: &OptimizationReport) -> Self {
        Self {
            format_version: SCHEDULE_FORMAT_VERSION,
            n: cfg.n(),
            duration: cfg.duration(),
            g0_fixed: cfg.g0_fixed(),
            harmonics: cfg.harmonics(),
            restarts: cfg.restarts(),
            max_evals: cfg.max_evals(),
            seed: report.seed(),
            objective: report.objective(),
            per_basis_residuals: report.per_basis_residuals().to_vec(),
            evaluations: report.evaluations(),
            budget_exhausted: report.budget_exhausted(),
            objective_history: report.objective_history().to_vec(),
        }
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => Path::new(".").to_path_buf(),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| CliError::Runtime(format!("cannot persist {}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// 17 significant digits: lossless for `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_meta(out: &mut String, meta: &[String]) {
    for line in meta {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
}

/// Pulse CSV: `t,re_f,im_f` per grid node.
pub fn write_pulse_csv(path: &Path, meta: &[String], pulse: &PulseShape) -> CliResult<()> {
    let mut out = String::new();
    push_meta(&mut out, meta);
    out.push_str("t,re_f,im_f\n");
    for (t, z) in pulse.grid().times().zip(pulse.samples()) {
        out.push_str(&fmt17(t));
        out.push(',');
        out.push_str(&fmt17(z.re));
        out.push(',');
        out.push_str(&fmt17(z.im));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Trajectory CSV: `t`, the complex amplitude pairs in basis order (optical
/// first, microwave cavities, mechanical last), then the running norm and
/// cumulative output flux.
pub fn write_trajectory_csv(path: &Path, meta: &[String], traj: &Trajectory) -> CliResult<()> {
    let n = traj.final_state().n();
    let mut out = String::new();
    push_meta(&mut out, meta);
    out.push_str("t");
    for i in 0..=n {
        out.push_str(&format!(",re_d{i},im_d{i}"));
    }
    out.push_str(",re_dm,im_dm,norm2,flux_out_cum\n");
    let norms = traj.ledger().norm_squared();
    let flux = traj.ledger().flux_out();
    for (k, t) in traj.grid().times().enumerate() {
        let amp = traj.state(k).amplitudes();
        out.push_str(&fmt17(t));
        for z in amp.iter() {
            out.push(',');
            out.push_str(&fmt17(z.re));
            out.push(',');
            out.push_str(&fmt17(z.im));
        }
        out.push(',');
        out.push_str(&fmt17(norms[k]));
        out.push(',');
        out.push_str(&fmt17(flux[k]));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Sweep CSV: `axis_value,fidelity,method,n` per point.
pub fn write_sweep_csv(path: &Path, meta: &[String], result: &SweepResult) -> CliResult<()> {
    let mut out = String::new();
    push_meta(&mut out, meta);
    out.push_str("axis_value,fidelity,method,n\n");
    for (v, f) in result.axis_values().iter().zip(result.fidelities()) {
        out.push_str(&fmt17(*v));
        out.push(',');
        out.push_str(&fmt17(*f));
        out.push(',');
        out.push_str(result.method().label());
        out.push(',');
        out.push_str(&result.n().to_string());
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Read a pulse CSV back into a [`PulseShape`]. Accepts exactly the layout
/// [`write_pulse_csv`] produces: uniform time nodes from 0 to the duration.
pub fn read_pulse_csv(path: &Path) -> CliResult<PulseShape> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("t,") {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| -> CliResult<f64> {
            fields
                .next()
                .ok_or_else(|| {
                    CliError::config(format!(
                        "{}:{}: missing {name}",
                        path.display(),
                        lineno + 1
                    ))
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| {
                    CliError::config(format!("{}:{}: bad {name}: {e}", path.display(), lineno + 1))
                })
        };
        let t = next("t")?;
        let re = next("re_f")?;
        let im = next("im_f")?;
        times.push(t);
        samples.push(Complex64::new(re, im));
    }
    if samples.len() < 2 {
        return Err(CliError::config(format!(
            "{}: a pulse needs at least two samples",
            path.display()
        )));
    }
    let duration = *times.last().expect("nonempty");
    let steps = samples.len() - 1;
    let grid = TimeGrid::new(duration, steps)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    // The layout promise is uniform spacing; verify instead of trusting it.
    let dt = grid.dt();
    for (k, &t) in times.iter().enumerate() {
        if (t - grid.node(k)).abs() > 1e-9 * duration.max(1.0) {
            return Err(CliError::config(format!(
                "{}: sample {k} at t = {t} is off the uniform grid (expected {})",
                path.display(),
                grid.node(k)
            )));
        }
    }
    let _ = dt;
    PulseShape::new(grid, samples).map_err(CliError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt17_roundtrips_f64() {
        for &x in &[
            0.0,
            1.0,
            -1.0,
            std::f64::consts::PI,
            1.0 / 3.0,
            6.02e23,
            -2.5e-19,
        ] {
            let back: f64 = fmt17(x).parse().expect("parse back");
            assert_eq!(back, x, "fmt17 must be lossless for {x}");
        }
    }

    #[test]
    fn pulse_csv_roundtrips() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("pulse.csv");
        let grid = TimeGrid::new(2.0, 512).expect("grid");
        let samples: Vec<Complex64> = grid
            .times()
            .map(|t| Complex64::new((1.3 * t).sin(), (0.7 * t).cos()))
            .collect();
        let pulse = PulseShape::new(grid, samples.clone()).expect("pulse");
        write_pulse_csv(&path, &["units: g0".to_string()], &pulse).expect("write");
        let back = read_pulse_csv(&path).expect("read");
        assert_eq!(back.samples(), pulse.samples());
        assert!(back.grid().compatible(pulse.grid()));
    }

    #[test]
    fn schedule_file_rejects_future_versions() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("sched.json");
        fs::write(
            &path,
            r#"{"format_version": 99, "kind": "crab", "duration": 1.0, "g0_fixed": 1.0, "n": 1}"#,
        )
        .expect("write");
        let err = ScheduleFile::load(&path).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn crab_schedule_file_roundtrips_through_save_and_load() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("sched.json");
        let file = ScheduleFile {
            format_version: SCHEDULE_FORMAT_VERSION,
            kind: "crab".to_string(),
            duration: 100.0,
            g0_fixed: 1.0,
            n: 3,
            harmonics: Some(2),
            amplitudes: Some(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]),
            harmonic_shifts: Some(vec![0.25, 0.75]),
            stage_margin: None,
            seed: Some(7),
        };
        file.save(&path).expect("save");
        let loaded = ScheduleFile::load(&path).expect("load");
        let again = dir.path().join("sched2.json");
        loaded.save(&again).expect("save again");
        let bytes_a = fs::read(&path).expect("read a");
        let bytes_b = fs::read(&again).expect("read b");
        assert_eq!(bytes_a, bytes_b, "load -> save must be idempotent");

        let p = SystemParams::lossless(3, 10.0).expect("params");
        let sched = loaded.to_schedule(&p).expect("schedule");
        assert_eq!(sched.n(), 3);
        assert!((sched.duration() - 100.0).abs() < 1e-12);
        let g = sched.sample(0.0);
        assert!((g.optical() - 1.0).abs() < 1e-12);
    }
}
