//! Schedule construction and coupling optimization.
//!
//! One schedule has to empty every canonical single-cavity state at once:
//! because the dynamics is linear, a schedule that fully emits each basis
//! state also emits any superposition of them, so a single optimized pulse
//! family serves arbitrary targets. The optimizer minimizes the summed
//! leftover norm of the basis states at the final time over the amplitude
//! matrix of a sine-harmonic ansatz. A sequential baseline schedule that
//! empties the cavities one stage at a time is provided for comparison.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{emission_final_states, TimeGrid};
use crate::error::{Error, Result};
use crate::model::{
    CouplingSchedule, CouplingVector, CrabSchedule, Envelope, ExcitationState, PiecewiseSchedule,
    Segment, SystemParams,
};

/// Default number of sine harmonics in the ansatz.
pub const DEFAULT_HARMONICS: usize = 6;

/// Default amplitude bound in units of the optical coupling.
pub const DEFAULT_AMPLITUDE_BOUND_FACTOR: f64 = 5.0;

/// Default number of independent optimizer restarts.
pub const DEFAULT_RESTARTS: usize = 5;

/// Default objective-evaluation budget per restart.
pub const DEFAULT_MAX_EVALS: usize = 2000;

/// Default per-stage decay exponent target of [`trivial_schedule`].
pub const DEFAULT_STAGE_MARGIN: f64 = 12.0;

/// Initial simplex spread in units of the optical coupling.
const SIMPLEX_STEP_FACTOR: f64 = 0.5;

/// Objective-spread convergence threshold.
const OBJECTIVE_TOL: f64 = 1e-12;

/// Simplex-extent convergence threshold in units of the optical coupling.
const AMPLITUDE_TOL_FACTOR: f64 = 1e-9;

/// Configuration of the sine-harmonic amplitude search.
///
/// The ansatz is `g_i(t) = (1/m) sum_k A_k^(i) sin(2 pi k (1 + r_k) t / T)`
/// for the microwave couplings, with the optical coupling held constant at
/// `g0_fixed`. The harmonic shifts `r_k` are drawn uniformly from `[0, 1]`
/// once per restart from the seeded generator, so runs replay exactly.
#[derive(Debug, Clone)]
pub struct CrabConfig {
    n: usize,
    harmonics: usize,
    duration: f64,
    g0_fixed: f64,
    amplitude_bound: f64,
    seed: u64,
    restarts: usize,
    max_evals: usize,
    objective_steps: Option<usize>,
    init_amplitudes: Option<DMatrix<f64>>,
}

impl CrabConfig {
    /// Configuration with default search settings for `n` microwave cavities.
    pub fn new(n: usize, duration: f64, g0_fixed: f64) -> Self {
        Self {
            n,
            harmonics: DEFAULT_HARMONICS,
            duration,
            g0_fixed,
            amplitude_bound: DEFAULT_AMPLITUDE_BOUND_FACTOR * g0_fixed,
            seed: 0,
            restarts: DEFAULT_RESTARTS,
            max_evals: DEFAULT_MAX_EVALS,
            objective_steps: None,
            init_amplitudes: None,
        }
    }

    pub fn with_harmonics(mut self, m: usize) -> Self {
        self.harmonics = m;
        self
    }

    pub fn with_amplitude_bound(mut self, bound: f64) -> Self {
        self.amplitude_bound = bound;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_max_evals(mut self, max_evals: usize) -> Self {
        self.max_evals = max_evals;
        self
    }

    /// Fix the number of integration steps used by the objective. Defaults
    /// to the damping-resolved grid of [`TimeGrid::with_default_resolution`].
    pub fn with_objective_steps(mut self, steps: usize) -> Self {
        self.objective_steps = Some(steps);
        self
    }

    /// Warm-start the first restart from a known amplitude matrix.
    pub fn with_init_amplitudes(mut self, a: DMatrix<f64>) -> Self {
        self.init_amplitudes = Some(a);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn harmonics(&self) -> usize {
        self.harmonics
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn g0_fixed(&self) -> f64 {
        self.g0_fixed
    }

    pub fn amplitude_bound(&self) -> f64 {
        self.amplitude_bound
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    pub fn max_evals(&self) -> usize {
        self.max_evals
    }

    /// The canonical single-cavity states the schedule must empty.
    pub fn basis_states(&self) -> Vec<ExcitationState> {
        (1..=self.n)
            .map(|i| ExcitationState::single_cavity(self.n, i).expect("index in range"))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter(
                "need at least one microwave cavity".into(),
            ));
        }
        if self.harmonics == 0 {
            return Err(Error::InvalidParameter(
                "need at least one harmonic".into(),
            ));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidParameter(
                "duration must be positive and finite".into(),
            ));
        }
        if !(self.g0_fixed.is_finite() && self.g0_fixed > 0.0) {
            return Err(Error::InvalidParameter(
                "optical coupling must be positive and finite".into(),
            ));
        }
        if !(self.amplitude_bound.is_finite() && self.amplitude_bound > 0.0) {
            return Err(Error::InvalidParameter(
                "amplitude bound must be positive and finite".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter(
                "need at least one restart".into(),
            ));
        }
        let dim = self.harmonics * self.n;
        if self.max_evals < dim + 2 {
            return Err(Error::InvalidParameter(format!(
                "evaluation budget {} cannot cover the initial simplex of {} points",
                self.max_evals,
                dim + 1
            )));
        }
        if let Some(a) = &self.init_amplitudes {
            check_amplitudes(a, self.harmonics, self.n, self.amplitude_bound)?;
        }
        Ok(())
    }

    fn objective_grid(&self, p: &SystemParams) -> Result<TimeGrid> {
        match self.objective_steps {
            Some(steps) => TimeGrid::new(self.duration, steps),
            None => TimeGrid::with_default_resolution(self.duration, p.kappa0()),
        }
    }
}

fn check_amplitudes(a: &DMatrix<f64>, m: usize, n: usize, bound: f64) -> Result<()> {
    if a.nrows() != m || a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: m * n,
            actual: a.nrows() * a.ncols(),
        });
    }
    for &v in a.iter() {
        if !v.is_finite() || v.abs() > bound {
            return Err(Error::AmplitudeBound { value: v, bound });
        }
    }
    Ok(())
}

/// Build the sine-harmonic schedule for an explicit amplitude matrix
/// (harmonics in rows, cavities in columns) and shift vector.
pub fn crab_schedule(cfg: &CrabConfig, a: &DMatrix<f64>, r: &[f64]) -> Result<CouplingSchedule> {
    cfg.validate()?;
    check_amplitudes(a, cfg.harmonics, cfg.n, cfg.amplitude_bound)?;
    Ok(CouplingSchedule::Crab(CrabSchedule::new(
        cfg.duration,
        cfg.g0_fixed,
        a.clone(),
        r.to_vec(),
    )?))
}

/// Outcome of [`optimize_crab`]: the best schedule found plus enough
/// bookkeeping to reproduce and audit the search.
#[derive(Debug, Clone)]
pub struct OptimizationReport {
    schedule: CouplingSchedule,
    amplitudes: DMatrix<f64>,
    harmonic_shifts: Vec<f64>,
    objective_history: Vec<f64>,
    per_basis_residuals: Vec<f64>,
    evaluations: usize,
    seed: u64,
    budget_exhausted: bool,
}

impl OptimizationReport {
    pub fn schedule(&self) -> &CouplingSchedule {
        &self.schedule
    }

    pub fn amplitudes(&self) -> &DMatrix<f64> {
        &self.amplitudes
    }

    pub fn harmonic_shifts(&self) -> &[f64] {
        &self.harmonic_shifts
    }

    /// Running best objective, recorded at every strict improvement.
    pub fn objective_history(&self) -> &[f64] {
        &self.objective_history
    }

    /// Final (best) objective value: the summed leftover norm of the basis
    /// states at the final time.
    pub fn objective(&self) -> f64 {
        *self
            .objective_history
            .last()
            .expect("history holds at least the initial value")
    }

    /// Leftover `norm^2` of each basis state under the returned schedule.
    pub fn per_basis_residuals(&self) -> &[f64] {
        &self.per_basis_residuals
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// True when some restart stopped on its evaluation budget rather than
    /// on the convergence thresholds; the report still carries the best
    /// point found.
    pub fn budget_exhausted(&self) -> bool {
        self.budget_exhausted
    }
}

/// Objective shared by all evaluations of one restart: total leftover
/// population of the canonical basis states after emission.
struct Objective<'a> {
    p: &'a SystemParams,
    cfg: &'a CrabConfig,
    r: Vec<f64>,
    basis: Vec<ExcitationState>,
    grid: TimeGrid,
}

impl Objective<'_> {
    fn amplitude_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.cfg.harmonics, self.cfg.n, x)
    }

    fn components(&self, x: &[f64]) -> Result<Vec<f64>> {
        let sched = CouplingSchedule::Crab(CrabSchedule::new(
            self.cfg.duration,
            self.cfg.g0_fixed,
            self.amplitude_matrix(x),
            self.r.clone(),
        )?);
        let finals = emission_final_states(self.p, &sched, &self.basis, &self.grid)?;
        Ok(finals.iter().map(|s| s.norm_squared()).collect())
    }

    /// Total objective; non-finite or failed evaluations rank as worst so
    /// the search simply moves away from them.
    fn eval(&self, x: &[f64]) -> f64 {
        match self.components(x) {
            Ok(parts) => {
                let j: f64 = parts.iter().sum();
                if j.is_finite() {
                    j
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    }
}

struct SimplexOutcome {
    x: Vec<f64>,
    f: f64,
    history: Vec<f64>,
    evals: usize,
    exhausted: bool,
}

/// Downhill-simplex minimization with box projection.
///
/// Standard reflect/expand/contract/shrink moves (1, 2, 1/2, 1/2); every
/// candidate is clamped into the box before evaluation, which keeps the
/// whole simplex feasible. Stops on the evaluation budget, on objective
/// spread, or on simplex collapse.
fn downhill_simplex(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    bound: f64,
    max_evals: usize,
    xtol: f64,
) -> SimplexOutcome {
    let d = x0.len();
    let clamp = |x: &mut [f64]| {
        for v in x.iter_mut() {
            *v = v.clamp(-bound, bound);
        }
    };

    let mut evals = 0usize;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    let mut values: Vec<f64> = Vec::with_capacity(d + 1);
    let mut base = x0.to_vec();
    clamp(&mut base);
    points.push(base.clone());
    values.push(f(&base));
    evals += 1;
    for j in 0..d {
        let mut x = base.clone();
        // step inward when the start sits on the box edge
        x[j] = if x[j] + step <= bound {
            x[j] + step
        } else {
            x[j] - step
        };
        clamp(&mut x);
        values.push(f(&x));
        evals += 1;
        points.push(x);
    }

    let mut order: Vec<usize> = (0..=d).collect();
    let sort = |order: &mut Vec<usize>, values: &[f64]| {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    };
    sort(&mut order, &values);

    let mut history = vec![values[order[0]]];
    let mut exhausted = false;

    loop {
        if evals >= max_evals {
            exhausted = true;
            break;
        }
        let best = order[0];
        let worst = order[d];
        let spread = values[worst] - values[best];
        if spread.abs() <= OBJECTIVE_TOL * (1.0 + values[best].abs()) {
            break;
        }
        let extent = points
            .iter()
            .flat_map(|p| {
                p.iter()
                    .zip(points[best].iter())
                    .map(|(a, b)| (a - b).abs())
            })
            .fold(0.0, f64::max);
        if extent <= xtol {
            break;
        }

        let mut centroid = vec![0.0; d];
        for &i in order.iter().take(d) {
            for (c, v) in centroid.iter_mut().zip(points[i].iter()) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= d as f64;
        }

        let blend = |towards: &[f64], weight: f64| {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(towards.iter())
                .map(|(c, w)| c + weight * (w - c))
                .collect();
            clamp(&mut x);
            x
        };

        let reflected = blend(&points[worst], -1.0);
        let f_r = f(&reflected);
        evals += 1;

        if f_r < values[order[0]] {
            let expanded = blend(&points[worst], -2.0);
            let f_e = f(&expanded);
            evals += 1;
            if f_e < f_r {
                points[worst] = expanded;
                values[worst] = f_e;
            } else {
                points[worst] = reflected;
                values[worst] = f_r;
            }
        } else if f_r < values[order[d - 1]] {
            points[worst] = reflected;
            values[worst] = f_r;
        } else if f_r < values[worst] {
            let outside = blend(&reflected, 0.5);
            let f_c = f(&outside);
            evals += 1;
            if f_c <= f_r {
                points[worst] = outside;
                values[worst] = f_c;
            } else {
                shrink(&mut points, &mut values, order[0], f, &mut evals);
            }
        } else {
            let inside = blend(&points[worst], 0.5);
            let f_c = f(&inside);
            evals += 1;
            if f_c < values[worst] {
                points[worst] = inside;
                values[worst] = f_c;
            } else {
                shrink(&mut points, &mut values, order[0], f, &mut evals);
            }
        }

        sort(&mut order, &values);
        let current_best = values[order[0]];
        if current_best < *history.last().expect("nonempty") {
            history.push(current_best);
        }
    }

    let best = order[0];
    SimplexOutcome {
        x: points[best].clone(),
        f: values[best],
        history,
        evals,
        exhausted,
    }
}

fn shrink(
    points: &mut [Vec<f64>],
    values: &mut [f64],
    best: usize,
    f: &dyn Fn(&[f64]) -> f64,
    evals: &mut usize,
) {
    let anchor = points[best].clone();
    for i in 0..points.len() {
        if i == best {
            continue;
        }
        for (v, a) in points[i].iter_mut().zip(anchor.iter()) {
            *v = a + 0.5 * (*v - a);
        }
        values[i] = f(&points[i]);
        *evals += 1;
    }
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(restart as u64 + 1))
}

struct RestartOutcome {
    r: Vec<f64>,
    simplex: SimplexOutcome,
}

/// Search the amplitude matrix so the schedule simultaneously empties all
/// canonical basis states.
///
/// Restarts are independent: each draws its own harmonic shifts from the
/// seeded generator and runs the simplex from the configured start (zero
/// amplitudes by default, so the returned objective never exceeds the
/// do-nothing value). Restarts run concurrently; the winner is picked
/// deterministically by objective value with the restart index as
/// tie-breaker, so a given configuration and seed always reproduce the same
/// report.
pub fn optimize_crab(p: &SystemParams, cfg: &CrabConfig) -> Result<OptimizationReport> {
    cfg.validate()?;
    if p.n() != cfg.n {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            actual: cfg.n,
        });
    }
    let grid = cfg.objective_grid(p)?;
    let basis = cfg.basis_states();
    let x0: Vec<f64> = match &cfg.init_amplitudes {
        Some(a) => a.transpose().as_slice().to_vec(), // row-major flattening
        None => vec![0.0; cfg.harmonics * cfg.n],
    };
    let step = SIMPLEX_STEP_FACTOR * cfg.g0_fixed;
    let xtol = AMPLITUDE_TOL_FACTOR * cfg.g0_fixed;

    let outcomes: Vec<RestartOutcome> = (0..cfg.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(cfg.seed, restart));
            let r: Vec<f64> = (0..cfg.harmonics)
                .map(|_| rng.random_range(0.0..=1.0))
                .collect();
            let objective = Objective {
                p,
                cfg,
                r: r.clone(),
                basis: basis.clone(),
                grid,
            };
            let simplex = downhill_simplex(
                &|x| objective.eval(x),
                &x0,
                step,
                cfg.amplitude_bound,
                cfg.max_evals,
                xtol,
            );
            RestartOutcome { r, simplex }
        })
        .collect();

    let winner = outcomes
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.simplex
                .f
                .total_cmp(&b.simplex.f)
                .then(ia.cmp(ib))
        })
        .map(|(_, o)| o)
        .expect("at least one restart");

    let mut history = Vec::new();
    let mut best_so_far = f64::INFINITY;
    for outcome in &outcomes {
        for &value in &outcome.simplex.history {
            if value < best_so_far {
                best_so_far = value;
                history.push(value);
            }
        }
    }

    let objective = Objective {
        p,
        cfg,
        r: winner.r.clone(),
        basis,
        grid,
    };
    let per_basis_residuals = objective.components(&winner.simplex.x)?;
    let amplitudes = objective.amplitude_matrix(&winner.simplex.x);
    let schedule = crab_schedule(cfg, &amplitudes, &winner.r)?;

    Ok(OptimizationReport {
        schedule,
        amplitudes,
        harmonic_shifts: winner.r.clone(),
        objective_history: history,
        per_basis_residuals,
        evaluations: outcomes.iter().map(|o| o.simplex.evals).sum(),
        seed: cfg.seed,
        budget_exhausted: outcomes.iter().any(|o| o.simplex.exhausted),
    })
}

/// Sequential baseline: empty the cavities one at a time.
///
/// The window splits into `n` equal stages; stage `i` raises only coupling
/// `i` as a half-sine bump while the others stay off, so each stage is an
/// independent single-cavity transfer. The peak is set from the stage decay
/// exponent `kappa_0 * (T/n) * (1 - g_0 / sqrt(g_0^2 + peak^2))`, targeting
/// `per_stage_margin` so the leftover population per stage is about
/// `exp(-margin)`. When the stage is too short to reach the margin the
/// exponent fraction saturates at 0.9 and the transfer stays incomplete:
/// that is the honest behavior of the baseline at short durations.
pub fn trivial_schedule(
    p: &SystemParams,
    g0_fixed: f64,
    duration: f64,
    per_stage_margin: f64,
) -> Result<CouplingSchedule> {
    let n = p.n();
    if n == 0 {
        return Err(Error::InvalidParameter(
            "need at least one microwave cavity".into(),
        ));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::InvalidParameter(
            "duration must be positive and finite".into(),
        ));
    }
    if !(g0_fixed.is_finite() && g0_fixed > 0.0) {
        return Err(Error::InvalidParameter(
            "optical coupling must be positive and finite".into(),
        ));
    }
    if !(per_stage_margin.is_finite() && per_stage_margin > 0.0) {
        return Err(Error::InvalidParameter(
            "per-stage margin must be positive and finite".into(),
        ));
    }

    let stage = duration / n as f64;
    let fraction = (per_stage_margin / (p.kappa0() * stage)).min(0.9);
    let peak = g0_fixed * ((1.0 - fraction).powi(-2) - 1.0).sqrt();

    let mut segments = Vec::with_capacity(n);
    for i in 1..=n {
        let mut g = vec![0.0; n + 1];
        g[0] = g0_fixed;
        g[i] = peak;
        segments.push(Segment {
            duration: stage,
            couplings: CouplingVector::new(g)?,
            envelope: Envelope::HalfSine,
        });
    }
    Ok(CouplingSchedule::Piecewise(PiecewiseSchedule::new(
        segments,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::evolve_emission;
    use crate::Complex64;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_amplitudes_leave_microwave_couplings_off() {
        let cfg = CrabConfig::new(3, 40.0, 1.0);
        let a = DMatrix::zeros(cfg.harmonics(), 3);
        let r = vec![0.5; cfg.harmonics()];
        let sched = crab_schedule(&cfg, &a, &r).unwrap();
        for &t in &[0.0, 7.3, 21.0, 40.0] {
            let g = sched.sample(t);
            assert_eq!(g.optical(), 1.0);
            assert!(g.values()[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_harmonic_reduces_to_plain_sine() {
        let cfg = CrabConfig::new(1, 25.0, 1.0).with_harmonics(1);
        let a = DMatrix::from_row_slice(1, 1, &[1.7]);
        let sched = crab_schedule(&cfg, &a, &[0.0]).unwrap();
        for &t in &[0.0, 3.1, 12.5, 20.0, 25.0] {
            let expected = 1.7 * (2.0 * std::f64::consts::PI * t / 25.0).sin();
            assert_abs_diff_eq!(sched.sample(t).values()[1], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn amplitude_bound_is_enforced() {
        let cfg = CrabConfig::new(2, 30.0, 1.0).with_amplitude_bound(2.0);
        let mut a = DMatrix::zeros(cfg.harmonics(), 2);
        a[(3, 1)] = -2.5;
        let r = vec![0.1; cfg.harmonics()];
        match crab_schedule(&cfg, &a, &r) {
            Err(Error::AmplitudeBound { value, bound }) => {
                assert_eq!(value, -2.5);
                assert_eq!(bound, 2.0);
            }
            other => panic!("expected amplitude bound error, got {other:?}"),
        }
    }

    fn small_config(seed: u64) -> (SystemParams, CrabConfig) {
        let p = SystemParams::lossless(1, 10.0).unwrap();
        let cfg = CrabConfig::new(1, 20.0, 1.0)
            .with_harmonics(3)
            .with_seed(seed)
            .with_restarts(2)
            .with_max_evals(160)
            .with_objective_steps(2048);
        (p, cfg)
    }

    #[test]
    fn optimizer_is_deterministic_for_a_seed() {
        let (p, cfg) = small_config(11);
        let first = optimize_crab(&p, &cfg).unwrap();
        let second = optimize_crab(&p, &cfg).unwrap();
        assert_eq!(first.amplitudes(), second.amplitudes());
        assert_eq!(first.harmonic_shifts(), second.harmonic_shifts());
        assert_eq!(first.objective_history(), second.objective_history());
        assert_eq!(first.per_basis_residuals(), second.per_basis_residuals());
        assert_eq!(first.evaluations(), second.evaluations());

        let different = optimize_crab(&p, &cfg.clone().with_seed(12)).unwrap();
        assert_ne!(first.harmonic_shifts(), different.harmonic_shifts());
    }

    #[test]
    fn report_invariants_hold() {
        let (p, cfg) = small_config(5);
        let report = optimize_crab(&p, &cfg).unwrap();
        let history = report.objective_history();
        assert!(!history.is_empty());
        for pair in history.windows(2) {
            assert!(pair[1] < pair[0], "history must strictly improve");
        }
        // do-nothing schedule keeps the basis state put, so J(0) = 1
        assert!(report.objective() <= 1.0 + 1e-12);
        let total: f64 = report.per_basis_residuals().iter().sum();
        assert_abs_diff_eq!(report.objective(), total, epsilon = 0.0);
    }

    #[test]
    fn single_cavity_search_converges() {
        let p = SystemParams::lossless(1, 10.0).unwrap();
        let cfg = CrabConfig::new(1, 100.0, 1.0)
            .with_seed(3)
            .with_restarts(3)
            .with_max_evals(800)
            .with_objective_steps(8192);
        let report = optimize_crab(&p, &cfg).unwrap();
        assert!(
            report.objective() < 1e-3,
            "single-cavity residual {}",
            report.objective()
        );
    }

    #[test]
    fn trivial_schedule_stages_are_disjoint() {
        let p = SystemParams::lossless(3, 10.0).unwrap();
        let sched = trivial_schedule(&p, 1.0, 60.0, DEFAULT_STAGE_MARGIN).unwrap();
        assert_eq!(sched.duration(), 60.0);
        for stage in 0..3 {
            let mid = 20.0 * stage as f64 + 10.0;
            let g = sched.sample(mid);
            assert_eq!(g.optical(), 1.0);
            for i in 1..=3 {
                if i == stage + 1 {
                    assert!(g.values()[i] > 0.0, "active coupling must be on");
                } else {
                    assert_eq!(g.values()[i], 0.0);
                }
            }
        }
        // bumps vanish at the stage boundaries
        for &t in &[0.0, 20.0, 40.0, 60.0] {
            let g = sched.sample(t);
            let microwave_max = g.values()[1..]
                .iter()
                .fold(0.0f64, |acc, &v| acc.max(v.abs()));
            assert!(microwave_max < 1e-12, "boundary leakage at t = {t}");
        }
    }

    #[test]
    fn trivial_peak_matches_stage_decay_target() {
        // The peak formula equates the half-sine stage decay exponent
        // integral(kappa0 w dt) with the requested margin; check the
        // closed-form integral against quadrature.
        let p = SystemParams::lossless(1, 10.0).unwrap();
        let g0 = 1.0;
        let duration = 8.0;
        let margin = 12.0;
        let sched = trivial_schedule(&p, g0, duration, margin).unwrap();
        let fraction: f64 = margin / (10.0 * duration);
        let peak = g0 * ((1.0 - fraction).powi(-2) - 1.0).sqrt();
        assert_abs_diff_eq!(
            sched.sample(duration / 2.0).values()[1],
            peak,
            epsilon = 1e-12
        );

        let samples = 200_000;
        let dt = duration / samples as f64;
        let mut exponent = 0.0;
        for k in 0..samples {
            let t = (k as f64 + 0.5) * dt;
            let g1 = sched.sample(t).values()[1];
            let w = g1 * g1 / (g0 * g0 + g1 * g1);
            exponent += 10.0 * w * dt;
        }
        assert_abs_diff_eq!(exponent, margin, epsilon = 1e-3 * margin);
    }

    #[test]
    fn trivial_schedule_emits_each_cavity_in_its_own_stage() {
        let p = SystemParams::lossless(3, 10.0).unwrap();
        let duration = 120.0;
        let sched = trivial_schedule(&p, 1.0, duration, DEFAULT_STAGE_MARGIN).unwrap();
        let grid = TimeGrid::with_default_resolution(duration, p.kappa0()).unwrap();
        for cavity in 1..=3 {
            let psi0 = ExcitationState::single_cavity(3, cavity).unwrap();
            let traj = evolve_emission(&p, &sched, &psi0, &grid).unwrap();
            let pulse = traj.emitted();
            let total = pulse.photon_content();
            assert!(total > 0.99, "stage transfer incomplete: {total}");
            let dt = grid.dt();
            let mut in_stage = 0.0;
            let samples = pulse.samples();
            for k in 0..grid.steps() {
                let t = grid.node(k) + 0.5 * dt;
                let mid = 0.5 * (samples[k].norm_sqr() + samples[k + 1].norm_sqr());
                if (t / (duration / 3.0)).floor() as usize == cavity - 1 {
                    in_stage += mid * dt;
                }
            }
            assert!(
                in_stage / total >= 0.95,
                "cavity {cavity} emitted {:.4} of its flux in its stage",
                in_stage / total
            );
        }
    }

    #[test]
    fn superposition_residual_obeys_linearity_bound() {
        // For any schedule, the leftover amplitude of a W state is the
        // coefficient-weighted sum of the basis leftovers, so its norm is
        // bounded by the triangle inequality.
        let p = SystemParams::new(3, 10.0, vec![1e-5; 3], 1e-3).unwrap();
        let cfg = CrabConfig::new(3, 30.0, 1.0).with_harmonics(2);
        let a = DMatrix::from_row_slice(2, 3, &[0.9, -1.4, 0.7, 0.4, 1.1, -0.8]);
        let sched = crab_schedule(&cfg, &a, &[0.3, 0.8]).unwrap();
        let grid = TimeGrid::new(30.0, 4096).unwrap();

        let basis = cfg.basis_states();
        let finals = emission_final_states(&p, &sched, &basis, &grid).unwrap();
        let basis_norms: Vec<f64> = finals.iter().map(|s| s.norm_squared().sqrt()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..20 {
            let mut w: Vec<Complex64> = (0..3)
                .map(|_| {
                    Complex64::new(
                        rng.sample(rand_distr::StandardNormal),
                        rng.sample(rand_distr::StandardNormal),
                    )
                })
                .collect();
            let norm: f64 = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for z in w.iter_mut() {
                *z /= norm;
            }
            let psi0 = ExcitationState::from_microwave(&w).unwrap();
            let final_state = emission_final_states(&p, &sched, &[psi0], &grid).unwrap();
            let residual = final_state[0].norm_squared();
            let bound: f64 = w
                .iter()
                .zip(basis_norms.iter())
                .map(|(z, b)| z.norm() * b)
                .sum();
            assert!(
                residual <= bound * bound + 1e-12,
                "residual {residual} exceeds linearity bound {}",
                bound * bound
            );
        }
    }
}
