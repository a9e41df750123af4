//! Static structure of the coupled system: parameters, coupling schedules,
//! the single-excitation Hamiltonians, and the closed-form eigenbasis.
//!
//! Conventions used throughout:
//!
//! * Amplitude vectors have length `n + 2` and are ordered
//!   `(a_0, a_1, ..., a_n, b_m)`: optical cavity, microwave cavities,
//!   mechanical mode.
//! * A coupling vector `g = (g_0, g_1, ..., g_n)` collects the optical
//!   coupling `g_0` followed by the `n` microwave couplings. Its partial
//!   norms are `s_i = sqrt(g_0^2 + ... + g_i^2)`.
//! * The interaction Hamiltonian couples every cavity to the mechanical mode
//!   and nothing else, so its spectrum is `{0 (n-fold), +s_n, -s_n}`. The
//!   `n`-dimensional null space is spanned by "dark" vectors with no
//!   mechanical component:
//!
//!   ```text
//!   phi_1 = (g_1, -g_0, 0, ..., 0) / s_1
//!   phi_k = (g_0 g_k, ..., g_{k-1} g_k, -s_{k-1}^2, 0, ..., 0) / (s_{k-1} s_k)
//!   ```
//!
//!   and the `+/- s_n` eigenvectors are `(g_0, ..., g_n, +/- s_n) / (sqrt(2) s_n)`.
//! * When the system is driven slowly compared to `s_n`, the bright pair can
//!   be eliminated and the dark coefficients `C = (c_1, ..., c_n)` obey
//!   `dC/dt = -(kappa_0 / 2) M C`, where `M_kl = phi_k[0] * phi_l[0]` is the
//!   rank-one matrix built from the optical components of the dark vectors.
//!   `M = w |phi_0><phi_0|` with `w = 1 - g_0^2 / s_n^2` and `phi_0` the unit
//!   vector along `(phi_1[0], ..., phi_n[0])`; `phi_0` is the one dark
//!   combination that decays through the optical port.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative threshold below which a dark-basis denominator counts as singular,
/// measured against `s_n^2`.
pub const SINGULARITY_TOL: f64 = 1e-12;

/// Default central-difference step for [`frame_rotation_rate`], as a fraction
/// of the schedule duration. Small enough that the O(h^2) truncation error of
/// the difference sits below the antisymmetry tolerances used in tests while
/// staying far from roundoff dominance.
pub const ROTATION_STEP_FRACTION: f64 = 1e-7;

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be finite")))
    }
}

/// Damping rates and bookkeeping for one system instance.
///
/// Rates are in units of the reference coupling `g0_ref`; the reference itself
/// is stored only so results can be rescaled to laboratory units.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    n: usize,
    kappa0: f64,
    kappa: Vec<f64>,
    gamma_m: f64,
    omega_m: Option<f64>,
    g0_ref: f64,
}

impl SystemParams {
    /// `n` microwave cavities with per-cavity intrinsic losses `kappa`.
    pub fn new(n: usize, kappa0: f64, kappa: Vec<f64>, gamma_m: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter(
                "at least one microwave cavity is required".into(),
            ));
        }
        if kappa.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: kappa.len(),
            });
        }
        ensure_finite(&kappa, "kappa")?;
        ensure_finite(&[kappa0, gamma_m], "damping rates")?;
        if kappa0 < 0.0 || gamma_m < 0.0 || kappa.iter().any(|&k| k < 0.0) {
            return Err(Error::InvalidParameter(
                "damping rates must be nonnegative".into(),
            ));
        }
        Ok(Self {
            n,
            kappa0,
            kappa,
            gamma_m,
            omega_m: None,
            g0_ref: 1.0,
        })
    }

    /// Same intrinsic loss on every microwave cavity.
    pub fn uniform(n: usize, kappa0: f64, kappa_each: f64, gamma_m: f64) -> Result<Self> {
        Self::new(n, kappa0, vec![kappa_each; n], gamma_m)
    }

    /// All intrinsic losses zero; only the optical port damps the system.
    pub fn lossless(n: usize, kappa0: f64) -> Result<Self> {
        Self::uniform(n, kappa0, 0.0, 0.0)
    }

    /// Record the mechanical frequency (used only for validity reporting).
    pub fn with_omega_m(mut self, omega_m: f64) -> Self {
        self.omega_m = Some(omega_m);
        self
    }

    /// Record the laboratory value of the reference coupling rate.
    pub fn with_g0_ref(mut self, g0_ref: f64) -> Result<Self> {
        if !(g0_ref.is_finite() && g0_ref > 0.0) {
            return Err(Error::InvalidParameter("g0_ref must be positive".into()));
        }
        self.g0_ref = g0_ref;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn gamma_m(&self) -> f64 {
        self.gamma_m
    }

    pub fn omega_m(&self) -> Option<f64> {
        self.omega_m
    }

    pub fn g0_ref(&self) -> f64 {
        self.g0_ref
    }

    /// Replace the intrinsic cavity losses, keeping everything else.
    pub fn with_kappa(mut self, kappa_each: f64) -> Result<Self> {
        if !(kappa_each.is_finite() && kappa_each >= 0.0) {
            return Err(Error::InvalidParameter(
                "kappa must be finite and nonnegative".into(),
            ));
        }
        self.kappa = vec![kappa_each; self.n];
        Ok(self)
    }

    /// Replace the mechanical damping, keeping everything else.
    pub fn with_gamma_m(mut self, gamma_m: f64) -> Result<Self> {
        if !(gamma_m.is_finite() && gamma_m >= 0.0) {
            return Err(Error::InvalidParameter(
                "gamma_m must be finite and nonnegative".into(),
            ));
        }
        self.gamma_m = gamma_m;
        Ok(self)
    }

    /// Diagonal of damping rates in basis order: `(kappa_0, kappa_1, ..., kappa_n, gamma_m)`.
    pub fn damping_diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.n + 2);
        d[0] = self.kappa0;
        for (i, &k) in self.kappa.iter().enumerate() {
            d[i + 1] = k;
        }
        d[self.n + 1] = self.gamma_m;
        d
    }

    /// Check the regime assumptions behind the model, with a factor-of-ten
    /// margin on each ratio.
    pub fn validity(&self) -> ValidityFlags {
        let resolved_sideband = self.omega_m.map(|w| w >= 10.0 * self.kappa0);
        let max_intrinsic = self
            .kappa
            .iter()
            .copied()
            .fold(self.gamma_m, f64::max);
        ValidityFlags {
            resolved_sideband,
            damping_hierarchy: self.kappa0 >= 10.0 * max_intrinsic,
        }
    }
}

/// Regime checks for one parameter set. `resolved_sideband` is `None` when no
/// mechanical frequency was recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidityFlags {
    /// `omega_m >= 10 * kappa_0`: the sideband picture behind the beam-splitter
    /// interaction holds.
    pub resolved_sideband: Option<bool>,
    /// `kappa_0 >= 10 * max(gamma_m, kappa_i)`: the optical port dominates all
    /// intrinsic losses.
    pub damping_hierarchy: bool,
}

impl ValidityFlags {
    pub fn all_hold(&self) -> bool {
        self.resolved_sideband.unwrap_or(true) && self.damping_hierarchy
    }
}

/// Instantaneous couplings `(g_0, g_1, ..., g_n)`: optical first, then the
/// microwave cavities.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingVector {
    g: Vec<f64>,
}

impl CouplingVector {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        if g.len() < 2 {
            return Err(Error::InvalidParameter(
                "coupling vector needs an optical and at least one microwave entry".into(),
            ));
        }
        ensure_finite(&g, "couplings")?;
        Ok(Self { g })
    }

    /// Number of microwave cavities (`len - 1`).
    pub fn n(&self) -> usize {
        self.g.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn optical(&self) -> f64 {
        self.g[0]
    }

    /// Partial norms `s_i = sqrt(g_0^2 + ... + g_i^2)` for `i = 0..=n`.
    /// The sequence is nondecreasing; an all-zero vector is rejected because
    /// no scale survives.
    pub fn partial_norms(&self) -> Result<Vec<f64>> {
        let mut acc = 0.0;
        let s: Vec<f64> = self
            .g
            .iter()
            .map(|&gj| {
                acc += gj * gj;
                acc.sqrt()
            })
            .collect();
        if s[self.g.len() - 1] == 0.0 {
            return Err(Error::DegenerateCoupling);
        }
        Ok(s)
    }

    /// `s_n`, the overall coupling scale.
    pub fn total_norm(&self) -> f64 {
        self.g.iter().map(|&gj| gj * gj).sum::<f64>().sqrt()
    }
}

/// Randomized-harmonic ansatz for the microwave couplings:
///
/// ```text
/// g_i(t) = (1/m) * sum_{k=1..m} A[k][i] * sin(2 pi k (1 + r_k) t / T)
/// ```
///
/// with the optical coupling held constant. The shifts `r_k` detune each
/// harmonic away from the commensurate comb so that restarts explore
/// different function bases. Every `g_i` vanishes at `t = 0` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrabSchedule {
    duration: f64,
    g0: f64,
    /// `m x n`, row `k` holding the amplitudes of harmonic `k + 1`.
    amplitudes: DMatrix<f64>,
    harmonic_shifts: Vec<f64>,
}

impl CrabSchedule {
    pub fn new(
        duration: f64,
        g0: f64,
        amplitudes: DMatrix<f64>,
        harmonic_shifts: Vec<f64>,
    ) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::InvalidParameter("duration must be positive".into()));
        }
        if !g0.is_finite() {
            return Err(Error::InvalidParameter("g0 must be finite".into()));
        }
        let (m, n) = amplitudes.shape();
        if m == 0 || n == 0 {
            return Err(Error::InvalidParameter(
                "amplitude matrix must be nonempty".into(),
            ));
        }
        if harmonic_shifts.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: harmonic_shifts.len(),
            });
        }
        ensure_finite(amplitudes.as_slice(), "amplitudes")?;
        ensure_finite(&harmonic_shifts, "harmonic shifts")?;
        if harmonic_shifts.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidParameter(
                "harmonic shifts must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            duration,
            g0,
            amplitudes,
            harmonic_shifts,
        })
    }

    pub fn harmonics(&self) -> usize {
        self.amplitudes.nrows()
    }

    pub fn amplitudes(&self) -> &DMatrix<f64> {
        &self.amplitudes
    }

    pub fn harmonic_shifts(&self) -> &[f64] {
        &self.harmonic_shifts
    }

    pub fn g0(&self) -> f64 {
        self.g0
    }

    fn sample_into(&self, t: f64, out: &mut [f64]) {
        let (m, n) = self.amplitudes.shape();
        out[0] = self.g0;
        out[1..=n].fill(0.0);
        let base = 2.0 * std::f64::consts::PI * t / self.duration;
        for k in 0..m {
            let phase = base * (k as f64 + 1.0) * (1.0 + self.harmonic_shifts[k]);
            let s = phase.sin();
            for i in 0..n {
                out[i + 1] += self.amplitudes[(k, i)] * s;
            }
        }
        let scale = 1.0 / m as f64;
        for v in &mut out[1..=n] {
            *v *= scale;
        }
    }
}

/// Shape applied to the microwave entries of a piecewise segment. The optical
/// entry is never enveloped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Envelope {
    Constant,
    /// `sin(pi tau / delta)` over the segment: off at both ends, peak in the
    /// middle.
    HalfSine,
}

/// One stage of a piecewise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub couplings: CouplingVector,
    pub envelope: Envelope,
}

/// Concatenated stages, each with its own envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSchedule {
    segments: Vec<Segment>,
}

impl PiecewiseSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidParameter(
                "piecewise schedule needs at least one segment".into(),
            ));
        }
        let n = segments[0].couplings.n();
        for seg in &segments {
            if !(seg.duration.is_finite() && seg.duration > 0.0) {
                return Err(Error::InvalidParameter(
                    "segment durations must be positive".into(),
                ));
            }
            if seg.couplings.n() != n {
                return Err(Error::DimensionMismatch {
                    expected: n + 1,
                    actual: seg.couplings.n() + 1,
                });
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    fn sample_into(&self, t: f64, out: &mut [f64]) {
        let mut start = 0.0;
        let last = self.segments.len() - 1;
        for (idx, seg) in self.segments.iter().enumerate() {
            let end = start + seg.duration;
            if t <= end || idx == last {
                let tau = (t - start).clamp(0.0, seg.duration);
                out.copy_from_slice(seg.couplings.values());
                if let Envelope::HalfSine = seg.envelope {
                    let shape = (std::f64::consts::PI * tau / seg.duration).sin();
                    for v in &mut out[1..] {
                        *v *= shape;
                    }
                }
                return;
            }
            start = end;
        }
    }
}

/// Time profile multiplying a fixed coupling direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioProfile {
    Constant,
    /// `f(t) = 1 + a sin(2 pi t / T)`, with `|a| < 1` so the overall scale
    /// never crosses zero.
    Sine { amplitude: f64 },
}

/// Couplings `g(t) = f(t) * base` with all ratios frozen. The dark basis is
/// then time independent and the reduced model has a closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantRatioSchedule {
    duration: f64,
    base: CouplingVector,
    profile: RatioProfile,
}

impl ConstantRatioSchedule {
    pub fn new(duration: f64, base: CouplingVector, profile: RatioProfile) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::InvalidParameter("duration must be positive".into()));
        }
        if let RatioProfile::Sine { amplitude } = profile {
            if !(amplitude.is_finite() && amplitude.abs() < 1.0) {
                return Err(Error::InvalidParameter(
                    "sine profile amplitude must satisfy |a| < 1".into(),
                ));
            }
        }
        Ok(Self {
            duration,
            base,
            profile,
        })
    }

    pub fn base(&self) -> &CouplingVector {
        &self.base
    }

    fn sample_into(&self, t: f64, out: &mut [f64]) {
        let f = match self.profile {
            RatioProfile::Constant => 1.0,
            RatioProfile::Sine { amplitude } => {
                1.0 + amplitude * (2.0 * std::f64::consts::PI * t / self.duration).sin()
            }
        };
        for (o, &b) in out.iter_mut().zip(self.base.values()) {
            *o = f * b;
        }
    }
}

/// A time-dependent coupling vector on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingSchedule {
    Crab(CrabSchedule),
    Piecewise(PiecewiseSchedule),
    ConstantRatio(ConstantRatioSchedule),
    /// Runs the inner schedule backwards: `sample(t) = inner.sample(T - t)`.
    Reversed(Box<CouplingSchedule>),
}

impl CouplingSchedule {
    pub fn duration(&self) -> f64 {
        match self {
            Self::Crab(s) => s.duration,
            Self::Piecewise(s) => s.duration(),
            Self::ConstantRatio(s) => s.duration,
            Self::Reversed(inner) => inner.duration(),
        }
    }

    /// Number of microwave cavities addressed by the schedule.
    pub fn n(&self) -> usize {
        match self {
            Self::Crab(s) => s.amplitudes.ncols(),
            Self::Piecewise(s) => s.segments[0].couplings.n(),
            Self::ConstantRatio(s) => s.base.n(),
            Self::Reversed(inner) => inner.n(),
        }
    }

    /// Sample at time `t`, clamped to `[0, T]` so that endpoint roundoff in
    /// callers cannot step outside the schedule.
    pub fn sample(&self, t: f64) -> CouplingVector {
        let mut g = vec![0.0; self.n() + 1];
        self.sample_into(t, &mut g);
        CouplingVector { g }
    }

    pub fn sample_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n() + 1);
        let t = t.clamp(0.0, self.duration());
        match self {
            Self::Crab(s) => s.sample_into(t, out),
            Self::Piecewise(s) => s.sample_into(t, out),
            Self::ConstantRatio(s) => s.sample_into(t, out),
            Self::Reversed(inner) => inner.sample_into(inner.duration() - t, out),
        }
    }
}

/// Interaction Hamiltonian in the single-excitation basis: every cavity
/// couples to the mechanical mode with rate `g_j`, nothing else.
pub fn interaction_hamiltonian(g: &CouplingVector) -> DMatrix<f64> {
    let d = g.n() + 2;
    let mut h = DMatrix::zeros(d, d);
    for (j, &gj) in g.values().iter().enumerate() {
        h[(j, d - 1)] = gj;
        h[(d - 1, j)] = gj;
    }
    h
}

/// Conditional Hamiltonian `H_I - (i/2) diag(kappa_0, kappa_1, ..., kappa_n, gamma_m)`
/// generating the no-click evolution `d psi / dt = -i H_c psi`.
pub fn conditional_hamiltonian(g: &CouplingVector, p: &SystemParams) -> Result<DMatrix<Complex64>> {
    if g.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n() + 1,
            actual: g.n() + 1,
        });
    }
    let d = p.n() + 2;
    let damping = p.damping_diagonal();
    let mut h = interaction_hamiltonian(g).map(|x| Complex64::new(x, 0.0));
    for j in 0..d {
        h[(j, j)] -= Complex64::new(0.0, 0.5 * damping[j]);
    }
    Ok(h)
}

/// The closed-form eigenbasis of the interaction Hamiltonian at one instant:
/// `n` dark vectors spanning the null space plus the `+/- s_n` bright pair,
/// along with the reduced-model quantities derived from it.
#[derive(Debug, Clone)]
pub struct DarkBasis {
    dark: Vec<DVector<f64>>,
    bright_plus: DVector<f64>,
    bright_minus: DVector<f64>,
    partial: Vec<f64>,
    /// Optical components `(phi_1[0], ..., phi_n[0])` of the dark vectors.
    optical_components: DVector<f64>,
    /// `|optical_components|^2 = 1 - g_0^2 / s_n^2`, the weight of the one
    /// dark direction that decays through the optical port.
    weight: f64,
}

impl DarkBasis {
    /// Dark vectors `phi_1, ..., phi_n`, each of length `n + 2` with zero
    /// mechanical component.
    pub fn dark(&self) -> &[DVector<f64>] {
        &self.dark
    }

    pub fn bright_plus(&self) -> &DVector<f64> {
        &self.bright_plus
    }

    pub fn bright_minus(&self) -> &DVector<f64> {
        &self.bright_minus
    }

    /// Partial norms `s_0..=s_n` of the coupling vector the basis was built from.
    pub fn partial_norms(&self) -> &[f64] {
        &self.partial
    }

    /// `s_n`.
    pub fn total_norm(&self) -> f64 {
        self.partial[self.partial.len() - 1]
    }

    /// Weight `w = 1 - g_0^2 / s_n^2` of the optically decaying dark direction.
    pub fn emission_weight(&self) -> f64 {
        self.weight
    }

    /// Unit vector `phi_0` (in dark-coefficient space) along which the reduced
    /// state decays. Undefined when all microwave couplings vanish.
    pub fn emission_direction(&self) -> Result<DVector<f64>> {
        if self.weight <= SINGULARITY_TOL {
            return Err(Error::EmissionDirectionUndefined);
        }
        Ok(&self.optical_components / self.weight.sqrt())
    }

    /// Rank-one decay matrix `M_kl = phi_k[0] * phi_l[0]` acting on dark
    /// coefficients. Built directly from the optical components, so it is
    /// well defined (and zero) even where `phi_0` is not.
    pub fn decay_projector(&self) -> DMatrix<f64> {
        let n = self.dark.len();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            for l in 0..n {
                m[(k, l)] = self.optical_components[k] * self.optical_components[l];
            }
        }
        m
    }

    /// Orthogonal frame with `phi_0` as its first column, completed by a
    /// Householder reflection. In this frame the decay matrix is
    /// `diag(w, 0, ..., 0)`.
    ///
    /// The completion columns are sign-fixed so that the largest-magnitude
    /// entry of each is positive, which pins the frame to a deterministic
    /// branch; the first column is left exactly `phi_0`.
    pub fn decay_frame(&self) -> Result<DMatrix<f64>> {
        let phi0 = self.emission_direction()?;
        let n = phi0.len();
        let mut u = DMatrix::identity(n, n);
        let mut v = phi0.clone();
        v[0] -= 1.0;
        let vv = v.norm_squared();
        if vv > 1e-30 {
            // I - 2 v v^T / |v|^2 maps e_1 to phi_0 and is orthogonal.
            for j in 0..n {
                for i in 0..n {
                    u[(i, j)] -= 2.0 * v[i] * v[j] / vv;
                }
            }
        }
        u.set_column(0, &phi0);
        for j in 1..n {
            let mut imax = 0;
            let mut vmax = 0.0;
            for i in 0..n {
                let a = u[(i, j)].abs();
                if a > vmax {
                    vmax = a;
                    imax = i;
                }
            }
            if u[(imax, j)] < 0.0 {
                for i in 0..n {
                    u[(i, j)] = -u[(i, j)];
                }
            }
        }
        Ok(u)
    }
}

/// Build the dark/bright eigenbasis for one coupling vector.
///
/// Denominators are tested against `SINGULARITY_TOL * s_n^2`; a failure means
/// the closed forms are numerically unusable at this point (for example
/// `g_0 = g_1 = 0` with later couplings on). The all-microwave-off point
/// `g = (g_0, 0, ..., 0)` is regular: the dark vectors reduce to
/// `phi_k = -e_{a_k}` there.
pub fn dark_basis(g: &CouplingVector) -> Result<DarkBasis> {
    let n = g.n();
    let d = n + 2;
    let s = g.partial_norms()?;
    let sn2 = s[n] * s[n];
    let tol = SINGULARITY_TOL * sn2;
    let gv = g.values();

    let mut dark = Vec::with_capacity(n);
    if s[1] * s[1] <= tol {
        return Err(Error::SingularDarkBasis { index: 1 });
    }
    let mut phi1 = DVector::zeros(d);
    phi1[0] = gv[1] / s[1];
    phi1[1] = -gv[0] / s[1];
    dark.push(phi1);
    for k in 2..=n {
        let den = s[k - 1] * s[k];
        if den <= tol {
            return Err(Error::SingularDarkBasis { index: k });
        }
        let mut phi = DVector::zeros(d);
        for j in 0..k {
            phi[j] = gv[j] * gv[k] / den;
        }
        phi[k] = -(s[k - 1] * s[k - 1]) / den;
        dark.push(phi);
    }

    let mut bright_plus = DVector::zeros(d);
    let mut bright_minus = DVector::zeros(d);
    let root2_sn = std::f64::consts::SQRT_2 * s[n];
    for j in 0..=n {
        bright_plus[j] = gv[j] / root2_sn;
        bright_minus[j] = gv[j] / root2_sn;
    }
    bright_plus[d - 1] = 1.0 / std::f64::consts::SQRT_2;
    bright_minus[d - 1] = -1.0 / std::f64::consts::SQRT_2;

    let optical_components = DVector::from_iterator(n, dark.iter().map(|v| v[0]));
    let weight = optical_components.norm_squared();

    Ok(DarkBasis {
        dark,
        bright_plus,
        bright_minus,
        partial: s,
        optical_components,
        weight,
    })
}

/// Convenience wrapper: unit emission direction `phi_0` at one coupling vector.
pub fn emission_direction(g: &CouplingVector) -> Result<DVector<f64>> {
    dark_basis(g)?.emission_direction()
}

/// Convenience wrapper: rank-one decay matrix `M` at one coupling vector.
pub fn decay_projector(g: &CouplingVector) -> Result<DMatrix<f64>> {
    Ok(dark_basis(g)?.decay_projector())
}

/// Convenience wrapper: orthogonal decay frame `U` at one coupling vector.
pub fn decay_frame(g: &CouplingVector) -> Result<DMatrix<f64>> {
    dark_basis(g)?.decay_frame()
}

/// Default central-difference step for [`frame_rotation_rate`] on a schedule
/// of duration `t_total`.
pub fn default_rotation_step(t_total: f64) -> f64 {
    t_total * ROTATION_STEP_FRACTION
}

/// Flip the sign of completion columns (all but the first) of `frame` so each
/// has positive overlap with the matching column of `reference`. The first
/// column is the emission direction, which is continuous on its own and never
/// adjusted.
///
/// The sign convention of [`DarkBasis::decay_frame`] is global, so two nearby
/// frames can land on opposite branches when a column's largest entry changes
/// place; differencing across such a jump would be meaningless. Aligning to a
/// common reference restores the continuous local branch.
pub(crate) fn align_completion(frame: &mut DMatrix<f64>, reference: &DMatrix<f64>) {
    let n = frame.ncols();
    for j in 1..n {
        let dot = frame.column(j).dot(&reference.column(j));
        if dot < 0.0 {
            for i in 0..n {
                frame[(i, j)] = -frame[(i, j)];
            }
        }
    }
}

/// Frame rotation rate `V(t) = d(U^T)/dt * U`, approximated by a central
/// difference with step `h`. The frames at `t - h` and `t + h` are
/// branch-aligned to the frame at `t` (see [`align_completion`]) so the
/// difference follows one continuous completion. `V` is antisymmetric up to
/// the O(h^2) truncation error of the difference.
///
/// Requires `0 <= t - h` and `t + h <= T` and a regular frame at all three
/// sample points.
pub fn frame_rotation_rate(
    schedule: &CouplingSchedule,
    t: f64,
    h: f64,
) -> Result<DMatrix<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParameter(
            "difference step must be positive".into(),
        ));
    }
    if t - h < 0.0 || t + h > schedule.duration() {
        return Err(Error::InvalidParameter(format!(
            "stencil [{} - {h}, {} + {h}] leaves the schedule",
            t, t
        )));
    }
    let frame_at = |tt: f64| -> Result<DMatrix<f64>> {
        dark_basis(&schedule.sample(tt))
            .and_then(|b| b.decay_frame())
            .map_err(|_| Error::SingularBasisAtTime { t: tt })
    };
    let u0 = frame_at(t)?;
    let mut up = frame_at(t + h)?;
    let mut um = frame_at(t - h)?;
    align_completion(&mut up, &u0);
    align_completion(&mut um, &u0);
    Ok((up.transpose() - um.transpose()) * u0 / (2.0 * h))
}

/// Same difference evaluated at `h` and `2h`, returning the `h` result and a
/// Richardson estimate of its truncation error (`max |V_h - V_{2h}| / 3` for
/// a second-order stencil).
pub fn frame_rotation_rate_refined(
    schedule: &CouplingSchedule,
    t: f64,
    h: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let v_h = frame_rotation_rate(schedule, t, h)?;
    let v_2h = frame_rotation_rate(schedule, t, 2.0 * h)?;
    let err = (&v_h - &v_2h).amax() / 3.0;
    Ok((v_h, err))
}

/// Single-excitation amplitude vector `(a_0, a_1, ..., a_n, b_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationState {
    amp: DVector<Complex64>,
}

impl ExcitationState {
    /// Validates length (`>= 3`), finiteness, and the subspace norm bound
    /// `|psi|^2 <= 1` (small tolerance for integrator roundoff).
    pub fn new(amp: DVector<Complex64>) -> Result<Self> {
        if amp.len() < 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                actual: amp.len(),
            });
        }
        if amp.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::InvalidParameter("amplitudes must be finite".into()));
        }
        let n2 = amp.norm_squared();
        if n2 > 1.0 + 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "norm^2 = {n2} exceeds the single-excitation bound"
            )));
        }
        Ok(Self { amp })
    }

    pub(crate) fn from_unchecked(amp: DVector<Complex64>) -> Self {
        Self { amp }
    }

    /// Vacuum of the tracked subspace: all amplitudes zero.
    pub fn empty(n: usize) -> Self {
        Self {
            amp: DVector::zeros(n + 2),
        }
    }

    /// One excitation in microwave cavity `i` (1-based), everything else empty.
    pub fn single_cavity(n: usize, i: usize) -> Result<Self> {
        if i == 0 || i > n {
            return Err(Error::InvalidParameter(format!(
                "cavity index {i} outside 1..={n}"
            )));
        }
        let mut amp = DVector::zeros(n + 2);
        amp[i] = Complex64::new(1.0, 0.0);
        Ok(Self { amp })
    }

    /// Build from microwave amplitudes `(w_1, ..., w_n)` with optical and
    /// mechanical slots empty.
    pub fn from_microwave(w: &[Complex64]) -> Result<Self> {
        let n = w.len();
        if n == 0 {
            return Err(Error::InvalidParameter(
                "need at least one microwave amplitude".into(),
            ));
        }
        let mut amp = DVector::zeros(n + 2);
        for (i, &wi) in w.iter().enumerate() {
            amp[i + 1] = wi;
        }
        Self::new(amp)
    }

    pub fn dim(&self) -> usize {
        self.amp.len()
    }

    pub fn n(&self) -> usize {
        self.amp.len() - 2
    }

    pub fn amplitudes(&self) -> &DVector<Complex64> {
        &self.amp
    }

    pub fn optical(&self) -> Complex64 {
        self.amp[0]
    }

    pub fn mechanical(&self) -> Complex64 {
        self.amp[self.amp.len() - 1]
    }

    pub fn microwave(&self) -> &[Complex64] {
        &self.amp.as_slice()[1..self.amp.len() - 1]
    }

    pub fn norm_squared(&self) -> f64 {
        self.amp.norm_squared()
    }

    /// Elementwise complex conjugate.
    pub fn conjugated(&self) -> Self {
        Self {
            amp: self.amp.map(|z| z.conj()),
        }
    }

    /// Dark coefficients `c_k = <phi_k | psi>` (the dark vectors are real, so
    /// no conjugation is involved).
    pub fn dark_coefficients(&self, basis: &DarkBasis) -> DVector<Complex64> {
        DVector::from_iterator(
            basis.dark.len(),
            basis.dark.iter().map(|phi| {
                phi.iter()
                    .zip(self.amp.iter())
                    .map(|(&p, &a)| p * a)
                    .sum::<Complex64>()
            }),
        )
    }

    /// Bright coefficients `(<phi_+ | psi>, <phi_- | psi>)`.
    pub fn bright_coefficients(&self, basis: &DarkBasis) -> (Complex64, Complex64) {
        let dot = |phi: &DVector<f64>| {
            phi.iter()
                .zip(self.amp.iter())
                .map(|(&p, &a)| p * a)
                .sum::<Complex64>()
        };
        (dot(&basis.bright_plus), dot(&basis.bright_minus))
    }
}
