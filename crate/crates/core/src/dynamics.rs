//! Time evolution of the full and reduced models.
//!
//! The full model integrates `d psi / dt = -i H_c(t) psi (+ source)` on a
//! fixed grid with classic fourth-order Runge-Kutta, sampling the coupling
//! schedule on the half grid so every stage sees the schedule at its own
//! time. The optical port obeys the input-output relation
//!
//! ```text
//! f_out(t) = sqrt(kappa_0) psi_0(t) - f_in(t)
//! ```
//!
//! and an injected field enters as the source `sqrt(kappa_0) f_in(t)` on the
//! optical amplitude. With those conventions the ledger identity
//!
//! ```text
//! d|psi|^2/dt + |f_out|^2 - |f_in|^2 = -sum_i kappa_i |psi_i|^2 - gamma_m |psi_m|^2
//! ```
//!
//! holds exactly, and its cumulative form is tracked alongside every
//! trajectory as a discretization diagnostic.
//!
//! The reduced model propagates dark coefficients through
//! `dC/dt = -(kappa_0/2) M(t) C`, with the rotating-frame variant
//! `d alpha / dt = (-(kappa_0/2) Lambda(t) + V(t)) alpha` available for
//! checking frame effects, and a closed form when the coupling ratios are
//! frozen.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{
    dark_basis, default_rotation_step, frame_rotation_rate, CouplingSchedule, CouplingVector,
    ExcitationState, SystemParams,
};

/// Uniform time grid over `[0, T]` with `steps` intervals (`steps + 1` nodes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    duration: f64,
    steps: usize,
}

impl TimeGrid {
    /// Fewer intervals than this cannot resolve the fast port dynamics the
    /// toolkit is built around, so it is the hard floor.
    pub const MIN_STEPS: usize = 512;

    pub fn new(duration: f64, steps: usize) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::InvalidParameter("duration must be positive".into()));
        }
        if steps < Self::MIN_STEPS {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least {} steps, got {steps}",
                Self::MIN_STEPS
            )));
        }
        Ok(Self { duration, steps })
    }

    /// Default resolution: `max(4096, ceil(40 kappa_0 T))` intervals, i.e. at
    /// least 40 steps per optical decay time.
    pub fn with_default_resolution(duration: f64, kappa0: f64) -> Result<Self> {
        if !(kappa0.is_finite() && kappa0 >= 0.0) {
            return Err(Error::InvalidParameter("kappa0 must be nonnegative".into()));
        }
        let steps = ((40.0 * kappa0 * duration).ceil() as usize).max(4096);
        Self::new(duration, steps)
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.steps as f64
    }

    /// Time of node `k`, for `k in 0..=steps`.
    pub fn node(&self, k: usize) -> f64 {
        self.duration * k as f64 / self.steps as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.node(k))
    }

    /// Same node count and the same duration up to roundoff.
    pub fn compatible(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps
            && (self.duration - other.duration).abs() <= 1e-9 * self.duration.max(other.duration)
    }
}

/// Complex field amplitude sampled on the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseShape {
    grid: TimeGrid,
    samples: Vec<Complex64>,
}

impl PulseShape {
    pub fn new(grid: TimeGrid, samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != grid.steps() + 1 {
            return Err(Error::DimensionMismatch {
                expected: grid.steps() + 1,
                actual: samples.len(),
            });
        }
        if samples
            .iter()
            .any(|z| !(z.re.is_finite() && z.im.is_finite()))
        {
            return Err(Error::InvalidParameter("pulse samples must be finite".into()));
        }
        Ok(Self { grid, samples })
    }

    pub fn zero(grid: TimeGrid) -> Self {
        Self {
            samples: vec![Complex64::ZERO; grid.steps() + 1],
            grid,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    /// Trapezoid integral of `|f|^2` over the grid: the photon content of the
    /// pulse.
    pub fn photon_content(&self) -> f64 {
        trapezoid_norm2(&self.samples, self.grid.dt())
    }

    /// Linear interpolation between nodes, clamped at the ends.
    pub fn value_at(&self, t: f64) -> Complex64 {
        let steps = self.grid.steps();
        let x = (t / self.grid.duration()).clamp(0.0, 1.0) * steps as f64;
        let k = (x.floor() as usize).min(steps - 1);
        let frac = x - k as f64;
        self.samples[k] * (1.0 - frac) + self.samples[k + 1] * frac
    }
}

fn trapezoid_norm2(samples: &[Complex64], dt: f64) -> f64 {
    let sum: f64 = samples.iter().map(|z| z.norm_sqr()).sum();
    let ends = 0.5 * (samples[0].norm_sqr() + samples[samples.len() - 1].norm_sqr());
    dt * (sum - ends)
}

/// Reversal against the midpoint of the time window, `x(t) -> x~(t)` with
/// `x~(t) = conj(x(T - t))`. Applying it twice restores the original exactly.
pub trait TimeReverse {
    #[must_use]
    fn time_reverse(&self) -> Self;
}

impl TimeReverse for PulseShape {
    fn time_reverse(&self) -> Self {
        let samples = self.samples.iter().rev().map(|z| z.conj()).collect();
        Self {
            grid: self.grid,
            samples,
        }
    }
}

impl TimeReverse for CouplingSchedule {
    /// Couplings are real, so reversal is pure retiming: `g~(t) = g(T - t)`.
    fn time_reverse(&self) -> Self {
        match self {
            CouplingSchedule::Reversed(inner) => (**inner).clone(),
            other => CouplingSchedule::Reversed(Box::new(other.clone())),
        }
    }
}

/// Cumulative norm accounting along a trajectory. Entry `k` integrates up to
/// node `k` with the trapezoid rule, so
/// `norm_squared[k] + flux_out[k] - flux_in[k] + intrinsic_loss[k] + mechanical_loss[k]`
/// should stay pinned at `norm_squared[0]` up to discretization error.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLedger {
    norm_squared: Vec<f64>,
    flux_out: Vec<f64>,
    flux_in: Vec<f64>,
    intrinsic_loss: Vec<f64>,
    mechanical_loss: Vec<f64>,
}

impl NormLedger {
    pub fn norm_squared(&self) -> &[f64] {
        &self.norm_squared
    }

    /// Cumulative `int |f_out|^2`.
    pub fn flux_out(&self) -> &[f64] {
        &self.flux_out
    }

    /// Cumulative `int |f_in|^2`.
    pub fn flux_in(&self) -> &[f64] {
        &self.flux_in
    }

    /// Cumulative `int sum_i kappa_i |psi_i|^2` over the microwave cavities.
    pub fn intrinsic_loss(&self) -> &[f64] {
        &self.intrinsic_loss
    }

    /// Cumulative `int gamma_m |psi_m|^2`.
    pub fn mechanical_loss(&self) -> &[f64] {
        &self.mechanical_loss
    }

    pub fn total_emitted(&self) -> f64 {
        *self.flux_out.last().unwrap()
    }

    pub fn total_injected(&self) -> f64 {
        *self.flux_in.last().unwrap()
    }

    /// Signed balance residual at node `k`.
    pub fn balance_error(&self, k: usize) -> f64 {
        self.norm_squared[k] + self.flux_out[k] - self.flux_in[k] + self.intrinsic_loss[k]
            + self.mechanical_loss[k]
            - self.norm_squared[0]
    }

    pub fn max_balance_error(&self) -> f64 {
        (0..self.norm_squared.len())
            .map(|k| self.balance_error(k).abs())
            .fold(0.0, f64::max)
    }
}

/// A full-model run: the state at every node, the outgoing field, and the
/// norm ledger. `absorbed` carries the injected field when there was one.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<ExcitationState>,
    emitted: PulseShape,
    absorbed: Option<PulseShape>,
    ledger: NormLedger,
}

impl Trajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &[ExcitationState] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &ExcitationState {
        &self.states[k]
    }

    pub fn final_state(&self) -> &ExcitationState {
        self.states.last().unwrap()
    }

    /// Outgoing field `f_out` on the grid nodes.
    pub fn emitted(&self) -> &PulseShape {
        &self.emitted
    }

    /// Injected field, if this trajectory came from [`evolve_injection`].
    pub fn absorbed(&self) -> Option<&PulseShape> {
        self.absorbed.as_ref()
    }

    pub fn ledger(&self) -> &NormLedger {
        &self.ledger
    }

    /// Excitation left in the system at the end of the run.
    pub fn residual_norm_squared(&self) -> f64 {
        self.final_state().norm_squared()
    }
}

/// Couplings sampled on the half grid (`2 steps + 1` points), so each RK
/// stage reads the schedule at its own time. Built once per run and shared
/// across initial states.
struct CouplingTable {
    width: usize,
    data: Vec<f64>,
}

impl CouplingTable {
    fn build(schedule: &CouplingSchedule, grid: &TimeGrid) -> Self {
        let width = schedule.n() + 1;
        let points = 2 * grid.steps() + 1;
        let mut data = vec![0.0; width * points];
        let half_dt = 0.5 * grid.dt();
        for (j, row) in data.chunks_exact_mut(width).enumerate() {
            schedule.sample_into(j as f64 * half_dt, row);
        }
        Self { width, data }
    }

    #[inline]
    fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }
}

/// `d psi / dt` for the conditional evolution plus optical source.
#[inline]
fn deriv(g: &[f64], half_damp: &[f64], src: Complex64, psi: &[Complex64], out: &mut [Complex64]) {
    let mech = psi.len() - 1;
    let bm = psi[mech];
    let mut acc_re = 0.0;
    let mut acc_im = 0.0;
    for j in 0..mech {
        out[j] = Complex64::new(
            g[j] * bm.im - half_damp[j] * psi[j].re,
            -g[j] * bm.re - half_damp[j] * psi[j].im,
        );
        acc_re += g[j] * psi[j].re;
        acc_im += g[j] * psi[j].im;
    }
    out[mech] = Complex64::new(
        acc_im - half_damp[mech] * bm.re,
        -acc_re - half_damp[mech] * bm.im,
    );
    out[0] += src;
}

struct StepBuffers {
    k1: Vec<Complex64>,
    k2: Vec<Complex64>,
    k3: Vec<Complex64>,
    k4: Vec<Complex64>,
    tmp: Vec<Complex64>,
}

impl StepBuffers {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![Complex64::ZERO; d],
            k2: vec![Complex64::ZERO; d],
            k3: vec![Complex64::ZERO; d],
            k4: vec![Complex64::ZERO; d],
            tmp: vec![Complex64::ZERO; d],
        }
    }
}

/// One RK4 step from node `s`, using half-grid rows `2s`, `2s+1`, `2s+2` and
/// sources `(start, mid, end)` already scaled by `sqrt(kappa_0)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn rk4_step(
    table: &CouplingTable,
    s: usize,
    dt: f64,
    half_damp: &[f64],
    src: (Complex64, Complex64, Complex64),
    psi: &mut [Complex64],
    buf: &mut StepBuffers,
) {
    let d = psi.len();
    deriv(table.row(2 * s), half_damp, src.0, psi, &mut buf.k1);
    for j in 0..d {
        buf.tmp[j] = psi[j] + 0.5 * dt * buf.k1[j];
    }
    deriv(table.row(2 * s + 1), half_damp, src.1, &buf.tmp, &mut buf.k2);
    for j in 0..d {
        buf.tmp[j] = psi[j] + 0.5 * dt * buf.k2[j];
    }
    deriv(table.row(2 * s + 1), half_damp, src.1, &buf.tmp, &mut buf.k3);
    for j in 0..d {
        buf.tmp[j] = psi[j] + dt * buf.k3[j];
    }
    deriv(table.row(2 * s + 2), half_damp, src.2, &buf.tmp, &mut buf.k4);
    let w = dt / 6.0;
    for j in 0..d {
        psi[j] += w * (buf.k1[j] + 2.0 * (buf.k2[j] + buf.k3[j]) + buf.k4[j]);
    }
}

fn check_finite(psi: &[Complex64], t: f64) -> Result<()> {
    if psi.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure { t })
    }
}

fn check_run_inputs(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    psi0: &ExcitationState,
    grid: &TimeGrid,
) -> Result<()> {
    if schedule.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n() + 1,
            actual: schedule.n() + 1,
        });
    }
    if psi0.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n() + 2,
            actual: psi0.dim(),
        });
    }
    let t = schedule.duration();
    if (t - grid.duration()).abs() > 1e-9 * t.max(grid.duration()) {
        return Err(Error::DurationMismatch {
            left: t,
            right: grid.duration(),
        });
    }
    Ok(())
}

/// Options for [`evolve_injection_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InjectionOptions {
    /// Flip the sign of the reflected term, `f_out = sqrt(kappa_0) psi_0 + f_in`.
    /// This is wrong on purpose: it breaks the ledger identity and serves as a
    /// negative control for the balance check.
    pub flip_reflection_sign: bool,
}

fn run_full(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    psi0: &ExcitationState,
    grid: &TimeGrid,
    f_in: Option<&PulseShape>,
    reflection_sign: f64,
) -> Result<Trajectory> {
    check_run_inputs(p, schedule, psi0, grid)?;
    if let Some(pulse) = f_in {
        if !pulse.grid().compatible(grid) {
            return Err(Error::DurationMismatch {
                left: pulse.grid().duration(),
                right: grid.duration(),
            });
        }
    }

    let d = p.n() + 2;
    let steps = grid.steps();
    let dt = grid.dt();
    let half_damp: Vec<f64> = p.damping_diagonal().iter().map(|&k| 0.5 * k).collect();
    let kappa = p.kappa();
    let gamma_m = p.gamma_m();
    let sqrt_k0 = p.kappa0().sqrt();
    let table = CouplingTable::build(schedule, grid);

    let mut psi: Vec<Complex64> = psi0.amplitudes().iter().copied().collect();
    let mut buf = StepBuffers::new(d);

    let mut states = Vec::with_capacity(steps + 1);
    let mut f_out = Vec::with_capacity(steps + 1);
    let mut norm_squared = Vec::with_capacity(steps + 1);
    let mut flux_out = Vec::with_capacity(steps + 1);
    let mut flux_in = Vec::with_capacity(steps + 1);
    let mut intrinsic_loss = Vec::with_capacity(steps + 1);
    let mut mechanical_loss = Vec::with_capacity(steps + 1);

    // Integrand values at the previous node, for cumulative trapezoids.
    let mut prev = [0.0f64; 4];
    for k in 0..=steps {
        if k > 0 {
            let in_node = f_in.map_or(Complex64::ZERO, |pf| pf.samples()[k - 1]);
            let in_next = f_in.map_or(Complex64::ZERO, |pf| pf.samples()[k]);
            let src = (
                sqrt_k0 * in_node,
                sqrt_k0 * 0.5 * (in_node + in_next),
                sqrt_k0 * in_next,
            );
            rk4_step(&table, k - 1, dt, &half_damp, src, &mut psi, &mut buf);
            if k % 256 == 0 {
                check_finite(&psi, grid.node(k))?;
            }
        }

        let fin_k = f_in.map_or(Complex64::ZERO, |pf| pf.samples()[k]);
        let fout_k = sqrt_k0 * psi[0] + reflection_sign * fin_k;
        let n2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        let cav: f64 = kappa
            .iter()
            .enumerate()
            .map(|(i, &ki)| ki * psi[i + 1].norm_sqr())
            .sum();
        let mech = gamma_m * psi[d - 1].norm_sqr();
        let cur = [fout_k.norm_sqr(), fin_k.norm_sqr(), cav, mech];

        if k == 0 {
            flux_out.push(0.0);
            flux_in.push(0.0);
            intrinsic_loss.push(0.0);
            mechanical_loss.push(0.0);
        } else {
            let half_dt = 0.5 * dt;
            flux_out.push(flux_out[k - 1] + half_dt * (prev[0] + cur[0]));
            flux_in.push(flux_in[k - 1] + half_dt * (prev[1] + cur[1]));
            intrinsic_loss.push(intrinsic_loss[k - 1] + half_dt * (prev[2] + cur[2]));
            mechanical_loss.push(mechanical_loss[k - 1] + half_dt * (prev[3] + cur[3]));
        }
        prev = cur;
        norm_squared.push(n2);
        f_out.push(fout_k);
        states.push(ExcitationState::from_unchecked(DVector::from_iterator(
            d,
            psi.iter().copied(),
        )));
    }
    check_finite(&psi, grid.duration())?;

    Ok(Trajectory {
        grid: *grid,
        states,
        emitted: PulseShape::new(*grid, f_out)?,
        absorbed: f_in.cloned(),
        ledger: NormLedger {
            norm_squared,
            flux_out,
            flux_in,
            intrinsic_loss,
            mechanical_loss,
        },
    })
}

/// Free decay through the optical port: no input field. The emitted pulse is
/// `f_out = sqrt(kappa_0) psi_0`.
pub fn evolve_emission(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    psi0: &ExcitationState,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    run_full(p, schedule, psi0, grid, None, -1.0)
}

/// Drive the optical port with `f_in`. The emitted pulse of the result is the
/// reflected field `sqrt(kappa_0) psi_0 - f_in`.
pub fn evolve_injection(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    f_in: &PulseShape,
    psi0: &ExcitationState,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    run_full(p, schedule, psi0, grid, Some(f_in), -1.0)
}

/// [`evolve_injection`] with diagnostics options.
pub fn evolve_injection_with(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    f_in: &PulseShape,
    psi0: &ExcitationState,
    grid: &TimeGrid,
    options: InjectionOptions,
) -> Result<Trajectory> {
    let sign = if options.flip_reflection_sign { 1.0 } else { -1.0 };
    run_full(p, schedule, psi0, grid, Some(f_in), sign)
}

/// Final states of a batch of emissions sharing one schedule and grid.
/// Nothing is recorded along the way, which makes this the cheap path for
/// optimizer objectives.
pub fn emission_final_states(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    initial: &[ExcitationState],
    grid: &TimeGrid,
) -> Result<Vec<ExcitationState>> {
    for psi0 in initial {
        check_run_inputs(p, schedule, psi0, grid)?;
    }
    let d = p.n() + 2;
    let steps = grid.steps();
    let dt = grid.dt();
    let half_damp: Vec<f64> = p.damping_diagonal().iter().map(|&k| 0.5 * k).collect();
    let table = CouplingTable::build(schedule, grid);
    let zero_src = (Complex64::ZERO, Complex64::ZERO, Complex64::ZERO);

    let mut finals = Vec::with_capacity(initial.len());
    let mut buf = StepBuffers::new(d);
    for psi0 in initial {
        let mut psi: Vec<Complex64> = psi0.amplitudes().iter().copied().collect();
        for s in 0..steps {
            rk4_step(&table, s, dt, &half_damp, zero_src, &mut psi, &mut buf);
            if (s + 1) % 256 == 0 {
                check_finite(&psi, grid.node(s + 1))?;
            }
        }
        check_finite(&psi, grid.duration())?;
        finals.push(ExcitationState::from_unchecked(DVector::from_iterator(
            d,
            psi.iter().copied(),
        )));
    }
    Ok(finals)
}

/// Dark-subspace coefficients `(c_1, ..., c_n)`, optionally carrying the
/// rotated coordinates `alpha = U^T C` where the decay frame exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedState {
    c: DVector<Complex64>,
    alpha: Option<DVector<Complex64>>,
}

impl ReducedState {
    pub fn new(c: DVector<Complex64>) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::InvalidParameter(
                "reduced state needs at least one coefficient".into(),
            ));
        }
        if c.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::InvalidParameter("coefficients must be finite".into()));
        }
        if c.norm_squared() > 1.0 + 1e-9 {
            return Err(Error::InvalidParameter(
                "reduced state exceeds the single-excitation bound".into(),
            ));
        }
        Ok(Self { c, alpha: None })
    }

    pub fn from_slice(c: &[Complex64]) -> Result<Self> {
        Self::new(DVector::from_row_slice(c))
    }

    pub fn coefficients(&self) -> &DVector<Complex64> {
        &self.c
    }

    /// Frame coordinates `alpha = U^T C`, populated by [`evolve_reduced`] at
    /// nodes where the frame exists (`None` where it is singular, or on
    /// states that never went through the integrator).
    pub fn alpha(&self) -> Option<&DVector<Complex64>> {
        self.alpha.as_ref()
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn norm_squared(&self) -> f64 {
        self.c.norm_squared()
    }
}

#[inline]
fn real_apply(a: &DMatrix<f64>, y: &DVector<Complex64>, out: &mut DVector<Complex64>) {
    let n = y.len();
    for i in 0..n {
        let mut re = 0.0;
        let mut im = 0.0;
        for j in 0..n {
            let aij = a[(i, j)];
            re += aij * y[j].re;
            im += aij * y[j].im;
        }
        out[i] = Complex64::new(re, im);
    }
}

/// RK4 on a linear system `dy/dt = A(t) y` with `A` real, evaluated on the
/// half grid by the supplied closure. `start` skips the first `start` nodes
/// (the state there is held at `y0`).
fn integrate_real_linear(
    mut a_at: impl FnMut(usize) -> Result<DMatrix<f64>>,
    y0: &DVector<Complex64>,
    grid: &TimeGrid,
    start: usize,
) -> Result<Vec<DVector<Complex64>>> {
    let n = y0.len();
    let dt = grid.dt();
    let mut states = Vec::with_capacity(grid.steps() + 1);
    for _ in 0..=start.min(grid.steps()) {
        states.push(y0.clone());
    }
    let mut y = y0.clone();
    let mut k1 = DVector::zeros(n);
    let mut k2 = DVector::zeros(n);
    let mut k3 = DVector::zeros(n);
    let mut k4 = DVector::zeros(n);
    let mut tmp = DVector::zeros(n);
    let mut a_start = if start < grid.steps() {
        Some(a_at(2 * start)?)
    } else {
        None
    };
    for s in start..grid.steps() {
        let a0 = a_start.take().unwrap();
        let am = a_at(2 * s + 1)?;
        let a1 = a_at(2 * s + 2)?;
        real_apply(&a0, &y, &mut k1);
        tmp.zip_zip_apply(&y, &k1, |t, yi, ki| *t = yi + 0.5 * dt * ki);
        real_apply(&am, &tmp, &mut k2);
        tmp.zip_zip_apply(&y, &k2, |t, yi, ki| *t = yi + 0.5 * dt * ki);
        real_apply(&am, &tmp, &mut k3);
        tmp.zip_zip_apply(&y, &k3, |t, yi, ki| *t = yi + dt * ki);
        real_apply(&a1, &tmp, &mut k4);
        let w = dt / 6.0;
        for j in 0..n {
            y[j] += w * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]);
        }
        states.push(y.clone());
        a_start = Some(a1);
    }
    Ok(states)
}

/// Integrate the reduced model `dC/dt = -(kappa_0/2) M(t) C` on the grid.
///
/// If the dark basis is singular exactly at `t = 0` (for example a schedule
/// that starts with both `g_0` and `g_1` off), integration starts at the
/// first node instead, holding `c0` across the skipped step. A singular basis
/// anywhere later is an error.
pub fn evolve_reduced(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    c0: &ReducedState,
    grid: &TimeGrid,
) -> Result<Vec<ReducedState>> {
    if schedule.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n() + 1,
            actual: schedule.n() + 1,
        });
    }
    if c0.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            actual: c0.n(),
        });
    }
    let t_total = schedule.duration();
    if (t_total - grid.duration()).abs() > 1e-9 * t_total.max(grid.duration()) {
        return Err(Error::DurationMismatch {
            left: t_total,
            right: grid.duration(),
        });
    }

    let half_dt = 0.5 * grid.dt();
    let scale = -0.5 * p.kappa0();
    let start = match dark_basis(&schedule.sample(0.0)) {
        Ok(_) => 0,
        Err(_) => 1,
    };
    let a_at = |j: usize| -> Result<DMatrix<f64>> {
        let t = j as f64 * half_dt;
        let basis =
            dark_basis(&schedule.sample(t)).map_err(|_| Error::SingularBasisAtTime { t })?;
        Ok(scale * basis.decay_projector())
    };
    let states = integrate_real_linear(a_at, c0.coefficients(), grid, start)?;
    Ok(states
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let alpha = dark_basis(&schedule.sample(grid.node(k)))
                .ok()
                .and_then(|b| b.decay_frame().ok())
                .map(|u| {
                    let mut a = DVector::zeros(c.len());
                    real_apply(&u.transpose(), &c, &mut a);
                    a
                });
            ReducedState { c, alpha }
        })
        .collect())
}

/// Closed form of the reduced model for a fixed coupling vector (any
/// constant-ratio schedule, since the dark basis only sees ratios):
///
/// ```text
/// C(t) = C0 + (exp(-kappa_0 w t / 2) - 1) <phi_0|C0> phi_0
/// ```
///
/// `t = f64::INFINITY` is allowed and gives the steady state, `C0` minus its
/// component along the emission direction.
pub fn reduced_closed_form(
    g: &CouplingVector,
    kappa0: f64,
    c0: &ReducedState,
    t: f64,
) -> Result<ReducedState> {
    if !(kappa0 >= 0.0) {
        return Err(Error::InvalidParameter("kappa0 must be nonnegative".into()));
    }
    if t < 0.0 || t.is_nan() {
        return Err(Error::InvalidParameter("time must be nonnegative".into()));
    }
    if g.n() != c0.n() {
        return Err(Error::DimensionMismatch {
            expected: g.n(),
            actual: c0.n(),
        });
    }
    let basis = dark_basis(g)?;
    let w = basis.emission_weight();
    if w <= crate::model::SINGULARITY_TOL {
        return Ok(c0.clone());
    }
    let phi0 = basis.emission_direction()?;
    let proj: Complex64 = phi0
        .iter()
        .zip(c0.coefficients().iter())
        .map(|(&p, &c)| p * c)
        .sum();
    let decay = (-0.5 * kappa0 * w * t).exp() - 1.0;
    let mut c = c0.coefficients().clone();
    for (ci, &p) in c.iter_mut().zip(phi0.iter()) {
        *ci += decay * proj * p;
    }
    Ok(ReducedState { c, alpha: None })
}

/// Worst residual of the rotating-frame equation
/// `d alpha / dt = -(kappa_0/2) Lambda(t) alpha + V(t) alpha` along a reduced
/// trajectory produced by [`evolve_reduced`].
///
/// At each interior node the time derivative is estimated by a central
/// difference of `alpha = U^T C`, with the neighboring frames branch-aligned
/// to the center one, and `V` comes from the finite-difference rotation rate.
/// Nodes where any frame in the stencil is missing, or where the emission
/// weight sits below `weight_floor`, are skipped: the frame turns
/// ill-conditioned as the weight vanishes and the residual there measures
/// conditioning, not dynamics.
///
/// Returns the maximum sup-norm residual over the checked nodes; it is an
/// error if no node qualifies. The residual scales as O(dt^2) for smooth
/// schedules.
pub fn rotating_frame_residual(
    p: &SystemParams,
    schedule: &CouplingSchedule,
    grid: &TimeGrid,
    states: &[ReducedState],
    weight_floor: f64,
) -> Result<f64> {
    if states.len() != grid.steps() + 1 {
        return Err(Error::DimensionMismatch {
            expected: grid.steps() + 1,
            actual: states.len(),
        });
    }
    let n = p.n();
    let dt = grid.dt();
    let h = default_rotation_step(grid.duration());
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut rhs = DVector::zeros(n);
    for k in 1..grid.steps() {
        let t = grid.node(k);
        let basis = match dark_basis(&schedule.sample(t)) {
            Ok(b) => b,
            Err(_) => continue,
        };
        if basis.emission_weight() < weight_floor {
            continue;
        }
        let u0 = match basis.decay_frame() {
            Ok(u) => u,
            Err(_) => continue,
        };
        let frame_at = |tt: f64| -> Option<DMatrix<f64>> {
            dark_basis(&schedule.sample(tt))
                .ok()
                .and_then(|b| b.decay_frame().ok())
        };
        let (Some(mut um), Some(mut up)) = (frame_at(grid.node(k - 1)), frame_at(grid.node(k + 1)))
        else {
            continue;
        };
        crate::model::align_completion(&mut um, &u0);
        crate::model::align_completion(&mut up, &u0);

        let mut a0 = DVector::zeros(n);
        let mut am = DVector::zeros(n);
        let mut ap = DVector::zeros(n);
        real_apply(&u0.transpose(), states[k].coefficients(), &mut a0);
        real_apply(&um.transpose(), states[k - 1].coefficients(), &mut am);
        real_apply(&up.transpose(), states[k + 1].coefficients(), &mut ap);

        let v = if n == 1 {
            DMatrix::zeros(1, 1)
        } else {
            frame_rotation_rate(schedule, t, h)?
        };
        real_apply(&v, &a0, &mut rhs);
        rhs[0] -= 0.5 * p.kappa0() * basis.emission_weight() * a0[0];

        let residual = (0..n)
            .map(|i| ((ap[i] - am[i]) / (2.0 * dt) - rhs[i]).norm())
            .fold(0.0, f64::max);
        worst = worst.max(residual);
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::InvalidParameter(
            "no regular interior nodes to check".into(),
        ));
    }
    Ok(worst)
}
