//! Run configuration: JSON layout, unit normalization, and validation.
//!
//! Configurations are written either in normalized units (`"units": "g0"`,
//! every rate a multiple of the reference coupling, every time in units of
//! its inverse) or in raw laboratory units (`"units": "raw"`, rates in
//! rad/s, times in seconds, with `g0_ref` giving the reference coupling in
//! rad/s). Raw inputs are rescaled on load: rates divide by `g0_ref`,
//! durations multiply by it. Everything downstream of [`RunConfig::resolve`]
//! works in normalized units only.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use wsim_core::model::SystemParams;
use wsim_core::Complex64;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Dimensionless multiples of the reference coupling.
    G0,
    /// rad/s and seconds, rescaled by `g0_ref` on load.
    Raw,
}

impl Units {
    pub fn label(&self) -> &'static str {
        match self {
            Units::G0 => "g0",
            Units::Raw => "raw",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n: usize,
    pub kappa0: f64,
    /// Microwave cavity loss: one shared value or one per cavity.
    pub kappa: KappaSpec,
    pub gamma_m: f64,
    #[serde(default)]
    pub omega_m: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Uniform(f64),
    PerCavity(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrabSection {
    pub duration: f64,
    #[serde(default)]
    pub harmonics: Option<usize>,
    #[serde(default)]
    pub amplitude_bound: Option<f64>,
    #[serde(default)]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub max_evals: Option<usize>,
    #[serde(default)]
    pub objective_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrivialSection {
    pub duration: f64,
    #[serde(default)]
    pub stage_margin: Option<f64>,
}

/// Exactly one of the fields selects where the schedule comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSource {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub crab: Option<CrabSection>,
    #[serde(default)]
    pub trivial: Option<TrivialSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    /// `"canonical"`: the single-cavity basis states.
    Keyword(String),
    /// Explicit W coefficient lists, one `[re, im]` pair per cavity.
    List(Vec<Vec<[f64; 2]>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    /// `"empty"`: vacuum.
    Keyword(String),
    /// Microwave amplitudes, one `[re, im]` pair per cavity.
    List(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KappaI,
    GammaM,
    Duration,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::KappaI => "kappa_i",
            SweepAxis::GammaM => "gamma_m",
            SweepAxis::Duration => "g0_T",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Duration axis only: number of cavities per curve (default: system n).
    #[serde(default)]
    pub ns: Option<Vec<usize>>,
    /// Duration axis only: which schedule families to run (default: both).
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default)]
    pub stage_margin: Option<f64>,
    #[serde(default)]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub max_evals: Option<usize>,
    #[serde(default)]
    pub objective_steps: Option<usize>,
}

/// The on-disk configuration. Field-by-field normalization happens in
/// [`RunConfig::resolve`]; until then raw and normalized configs look alike.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub units: Option<Units>,
    #[serde(default)]
    pub g0_ref: Option<f64>,
    pub system: SystemSection,
    #[serde(default = "default_g0")]
    pub g0: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub grid_steps: Option<usize>,
    #[serde(default)]
    pub schedule: Option<ScheduleSource>,
    #[serde(default)]
    pub targets: Option<TargetSpec>,
    #[serde(default)]
    pub initial_state: Option<StateSpec>,
    #[serde(default)]
    pub pulse_file: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_g0() -> f64 {
    1.0
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("cannot parse {}: {e}", path.display())))
    }

    /// Normalize units, apply command-line overrides, and validate the parts
    /// every command shares. `base_dir` anchors relative file references
    /// (conventionally the config file's directory).
    pub fn resolve(
        &self,
        base_dir: &Path,
        units_override: Option<Units>,
        seed_override: Option<u64>,
    ) -> CliResult<Resolved> {
        let units = units_override.or(self.units).unwrap_or(Units::G0);
        let g0_ref = match units {
            Units::G0 => self.g0_ref.unwrap_or(1.0),
            Units::Raw => self.g0_ref.ok_or_else(|| {
                CliError::config("raw units need g0_ref (reference coupling in rad/s)")
            })?,
        };
        if !(g0_ref.is_finite() && g0_ref > 0.0) {
            return Err(CliError::config("g0_ref must be positive and finite"));
        }
        // Rates divide by the reference, durations multiply by it. In
        // normalized mode both factors are 1 and the numbers pass through.
        let (rate, time) = match units {
            Units::G0 => (1.0, 1.0),
            Units::Raw => (1.0 / g0_ref, g0_ref),
        };

        let sys = &self.system;
        let kappa = match &sys.kappa {
            KappaSpec::Uniform(k) => vec![*k * rate; sys.n],
            KappaSpec::PerCavity(ks) => {
                if ks.len() != sys.n {
                    return Err(CliError::config(format!(
                        "kappa lists {} values for n = {}",
                        ks.len(),
                        sys.n
                    )));
                }
                ks.iter().map(|k| k * rate).collect()
            }
        };
        let mut params = SystemParams::new(sys.n, sys.kappa0 * rate, kappa, sys.gamma_m * rate)
            .map_err(|e| CliError::config(e.to_string()))?
            .with_g0_ref(g0_ref)
            .map_err(|e| CliError::config(e.to_string()))?;
        if let Some(w) = sys.omega_m {
            params = params.with_omega_m(w * rate);
        }

        let g0 = self.g0 * rate;
        if !(g0.is_finite() && g0 > 0.0) {
            return Err(CliError::config("g0 must be positive and finite"));
        }

        let schedule = match &self.schedule {
            None => None,
            Some(src) => Some(resolve_schedule(src, base_dir, rate, time)?),
        };

        let targets = match &self.targets {
            None => None,
            Some(spec) => Some(resolve_targets(spec, sys.n)?),
        };

        let initial_state = match &self.initial_state {
            None => None,
            Some(spec) => Some(resolve_state(spec, sys.n)?),
        };

        let sweep = match &self.sweep {
            None => None,
            Some(section) => Some(resolve_sweep(section, rate, time)?),
        };

        Ok(Resolved {
            params,
            g0,
            seed: seed_override.or(self.seed).unwrap_or(0),
            grid_steps: self.grid_steps,
            schedule,
            targets,
            initial_state,
            pulse_file: self.pulse_file.as_ref().map(|p| anchored(base_dir, p)),
            sweep,
            units,
            g0_ref,
        })
    }
}

fn anchored(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_schedule(
    src: &ScheduleSource,
    base_dir: &Path,
    rate: f64,
    time: f64,
) -> CliResult<ResolvedSchedule> {
    let given = src.file.is_some() as usize + src.crab.is_some() as usize
        + src.trivial.is_some() as usize;
    if given != 1 {
        return Err(CliError::config(
            "schedule must name exactly one source: file, crab, or trivial",
        ));
    }
    if let Some(f) = &src.file {
        return Ok(ResolvedSchedule::File(anchored(base_dir, f)));
    }
    if let Some(c) = &src.crab {
        return Ok(ResolvedSchedule::Crab(CrabSettings {
            duration: c.duration * time,
            harmonics: c.harmonics,
            amplitude_bound: c.amplitude_bound.map(|b| b * rate),
            restarts: c.restarts,
            max_evals: c.max_evals,
            objective_steps: c.objective_steps,
        }));
    }
    let t = src.trivial.as_ref().expect("one source present");
    Ok(ResolvedSchedule::Trivial(TrivialSettings {
        duration: t.duration * time,
        stage_margin: t.stage_margin,
    }))
}

fn resolve_targets(spec: &TargetSpec, n: usize) -> CliResult<ResolvedTargets> {
    match spec {
        TargetSpec::Keyword(word) if word == "canonical" => Ok(ResolvedTargets::Canonical),
        TargetSpec::Keyword(word) => Err(CliError::config(format!(
            "unknown targets keyword {word:?} (expected \"canonical\" or a coefficient list)"
        ))),
        TargetSpec::List(lists) => {
            if lists.is_empty() {
                return Err(CliError::config("targets list is empty"));
            }
            let mut out = Vec::with_capacity(lists.len());
            for (idx, coeffs) in lists.iter().enumerate() {
                if coeffs.len() != n {
                    return Err(CliError::config(format!(
                        "target {idx} lists {} coefficients for n = {n}",
                        coeffs.len()
                    )));
                }
                out.push(complex_vec(coeffs)?);
            }
            Ok(ResolvedTargets::List(out))
        }
    }
}

fn resolve_state(spec: &StateSpec, n: usize) -> CliResult<ResolvedState> {
    match spec {
        StateSpec::Keyword(word) if word == "empty" => Ok(ResolvedState::Empty),
        StateSpec::Keyword(word) => Err(CliError::config(format!(
            "unknown initial_state keyword {word:?} (expected \"empty\" or a coefficient list)"
        ))),
        StateSpec::List(coeffs) => {
            if coeffs.len() != n {
                return Err(CliError::config(format!(
                    "initial_state lists {} coefficients for n = {n}",
                    coeffs.len()
                )));
            }
            let amps = complex_vec(coeffs)?;
            let norm2: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
            if norm2 > 1.0 + 1e-9 {
                return Err(CliError::config(format!(
                    "initial_state norm^2 = {norm2} exceeds the single-excitation bound"
                )));
            }
            Ok(ResolvedState::Microwave(amps))
        }
    }
}

fn resolve_sweep(section: &SweepSection, rate: f64, time: f64) -> CliResult<ResolvedSweep> {
    if section.values.is_empty() {
        return Err(CliError::config("sweep.values is empty"));
    }
    let factor = match section.axis {
        SweepAxis::KappaI | SweepAxis::GammaM => rate,
        SweepAxis::Duration => time,
    };
    let methods = match &section.methods {
        None => vec![SweepMethod::Trivial, SweepMethod::Optimized],
        Some(names) => {
            let mut out = Vec::with_capacity(names.len());
            for name in names {
                out.push(match name.as_str() {
                    "trivial" => SweepMethod::Trivial,
                    "optimized" => SweepMethod::Optimized,
                    other => {
                        return Err(CliError::config(format!(
                            "unknown sweep method {other:?} (expected \"trivial\" or \"optimized\")"
                        )))
                    }
                });
            }
            out
        }
    };
    Ok(ResolvedSweep {
        axis: section.axis,
        values: section.values.iter().map(|v| v * factor).collect(),
        ns: section.ns.clone(),
        methods,
        stage_margin: section.stage_margin,
        restarts: section.restarts,
        max_evals: section.max_evals,
        objective_steps: section.objective_steps,
    })
}

fn complex_vec(coeffs: &[[f64; 2]]) -> CliResult<Vec<Complex64>> {
    let out: Vec<Complex64> = coeffs
        .iter()
        .map(|&[re, im]| Complex64::new(re, im))
        .collect();
    if out
        .iter()
        .any(|z| !(z.re.is_finite() && z.im.is_finite()))
    {
        return Err(CliError::config("coefficients must be finite"));
    }
    Ok(out)
}

/// A configuration after unit normalization and validation. All numbers are
/// in normalized units from here on.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub params: SystemParams,
    pub g0: f64,
    pub seed: u64,
    pub grid_steps: Option<usize>,
    pub schedule: Option<ResolvedSchedule>,
    pub targets: Option<ResolvedTargets>,
    pub initial_state: Option<ResolvedState>,
    pub pulse_file: Option<PathBuf>,
    pub sweep: Option<ResolvedSweep>,
    pub units: Units,
    pub g0_ref: f64,
}

#[derive(Debug, Clone)]
pub enum ResolvedSchedule {
    File(PathBuf),
    Crab(CrabSettings),
    Trivial(TrivialSettings),
}

#[derive(Debug, Clone)]
pub struct CrabSettings {
    pub duration: f64,
    pub harmonics: Option<usize>,
    pub amplitude_bound: Option<f64>,
    pub restarts: Option<usize>,
    pub max_evals: Option<usize>,
    pub objective_steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrivialSettings {
    pub duration: f64,
    pub stage_margin: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum ResolvedTargets {
    Canonical,
    List(Vec<Vec<Complex64>>),
}

#[derive(Debug, Clone)]
pub enum ResolvedState {
    Empty,
    Microwave(Vec<Complex64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMethod {
    Trivial,
    Optimized,
}

#[derive(Debug, Clone)]
pub struct ResolvedSweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub ns: Option<Vec<usize>>,
    pub methods: Vec<SweepMethod>,
    pub stage_margin: Option<f64>,
    pub restarts: Option<usize>,
    pub max_evals: Option<usize>,
    pub objective_steps: Option<usize>,
}

impl Resolved {
    /// Header comment lines recording the unit convention, prepended to every
    /// CSV this run writes.
    pub fn unit_header(&self) -> Vec<String> {
        match self.units {
            Units::G0 => vec![
                "units: g0 (rates in multiples of the reference coupling, times in its inverse)"
                    .to_string(),
            ],
            Units::Raw => vec![format!(
                "units: raw input normalized by g0_ref = {:e} rad/s; values below are dimensionless",
                self.g0_ref
            )],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("config.json");
        fs::write(&path, text).expect("write config");
        (dir, path)
    }

    #[test]
    fn normalized_config_passes_through() {
        let (_dir, path) = write_tmp(
            r#"{
                "system": {"n": 3, "kappa0": 10.0, "kappa": 1e-5, "gamma_m": 1e-3},
                "g0": 1.0,
                "seed": 7,
                "schedule": {"crab": {"duration": 100.0}}
            }"#,
        );
        let cfg = RunConfig::load(&path).expect("load");
        let r = cfg
            .resolve(path.parent().unwrap(), None, None)
            .expect("resolve");
        assert_eq!(r.params.n(), 3);
        assert_eq!(r.params.kappa0(), 10.0);
        assert_eq!(r.seed, 7);
        assert_eq!(r.g0, 1.0);
        match r.schedule {
            Some(ResolvedSchedule::Crab(ref c)) => assert_eq!(c.duration, 100.0),
            other => panic!("expected crab schedule, got {other:?}"),
        }
    }

    #[test]
    fn raw_units_rescale_rates_and_durations() {
        let (_dir, path) = write_tmp(
            r#"{
                "units": "raw",
                "g0_ref": 1e7,
                "system": {"n": 3, "kappa0": 1e8, "kappa": 1e2, "gamma_m": 1e4},
                "g0": 1e7,
                "schedule": {"crab": {"duration": 1e-5}}
            }"#,
        );
        let cfg = RunConfig::load(&path).expect("load");
        let r = cfg
            .resolve(path.parent().unwrap(), None, None)
            .expect("resolve");
        assert!((r.params.kappa0() - 10.0).abs() < 1e-12);
        assert!((r.params.kappa()[0] - 1e-5).abs() < 1e-18);
        assert!((r.params.gamma_m() - 1e-3).abs() < 1e-15);
        assert!((r.g0 - 1.0).abs() < 1e-12);
        match r.schedule {
            Some(ResolvedSchedule::Crab(ref c)) => {
                assert!((c.duration - 100.0).abs() < 1e-9)
            }
            other => panic!("expected crab schedule, got {other:?}"),
        }
    }

    #[test]
    fn raw_units_without_reference_are_rejected() {
        let (_dir, path) = write_tmp(
            r#"{
                "units": "raw",
                "system": {"n": 1, "kappa0": 1e8, "kappa": 0.0, "gamma_m": 0.0}
            }"#,
        );
        let cfg = RunConfig::load(&path).expect("load");
        let err = cfg.resolve(path.parent().unwrap(), None, None).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let (_dir, path) = write_tmp(
            r#"{
                "system": {"n": 1, "kappa0": 10.0, "kappa": 0.0, "gamma_m": 0.0},
                "spelling_mistake": true
            }"#,
        );
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn schedule_source_must_be_unique() {
        let (_dir, path) = write_tmp(
            r#"{
                "system": {"n": 1, "kappa0": 10.0, "kappa": 0.0, "gamma_m": 0.0},
                "schedule": {
                    "crab": {"duration": 50.0},
                    "trivial": {"duration": 50.0}
                }
            }"#,
        );
        let cfg = RunConfig::load(&path).expect("load");
        let err = cfg.resolve(path.parent().unwrap(), None, None).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn seed_override_wins() {
        let (_dir, path) = write_tmp(
            r#"{
                "system": {"n": 1, "kappa0": 10.0, "kappa": 0.0, "gamma_m": 0.0},
                "seed": 3
            }"#,
        );
        let cfg = RunConfig::load(&path).expect("load");
        let r = cfg
            .resolve(path.parent().unwrap(), None, Some(11))
            .expect("resolve");
        assert_eq!(r.seed, 11);
    }

    #[test]
    fn target_dimension_mismatch_is_rejected() {
        let (_dir, path) = write_tmp(
            r#"{
                "system": {"n": 3, "kappa0": 10.0, "kappa": 0.0, "gamma_m": 0.0},
                "targets": [[[1.0, 0.0], [0.0, 0.0]]]
            }"#,
        );
        let cfg = RunConfig::load(&path).expect("load");
        let err = cfg.resolve(path.parent().unwrap(), None, None).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
