//! Simulation and pulse-shaping toolkit for routing a single microwave
//! excitation through a mechanically mediated optical interface.
//!
//! The physical setting is `n` microwave cavities coupled to one mechanical
//! mode, which is in turn coupled to an optical cavity that leaks into a
//! transmission channel. Restricted to the single-excitation subspace, the
//! state is an `(n + 2)`-component complex amplitude vector ordered as
//! `(a_0, a_1, ..., a_n, b_m)`: the optical cavity first, then the microwave
//! cavities, then the mechanical mode. Damping is treated with a conditional
//! (non-Hermitian) Hamiltonian, and the leaked field is tracked through
//! input-output relations so that emitted pulses can be reshaped and
//! re-absorbed.
//!
//! Module layout:
//!
//! * [`model`]: parameter types, coupling schedules, the conditional
//!   Hamiltonian, and the closed-form dark/bright eigenbasis with the
//!   reduced-model matrices built from it.
//! * [`dynamics`]: fixed-step integration of the full and reduced models,
//!   emission and injection with input-output bookkeeping, and time reversal.
//! * [`control`]: the randomized-harmonic coupling ansatz, a seeded
//!   Nelder-Mead optimizer for it, and the sequential single-cavity baseline.
//! * [`analysis`]: fidelity measures, the emit/reverse/reinject round trip,
//!   and parameter sweeps.
//!
//! All quantities are expressed in units of a reference coupling rate, so a
//! coupling of `1.0` means "equal to the reference" and times are in inverse
//! reference-rate units. [`model::SystemParams::g0_ref`] records the physical
//! value of that reference for converting back to laboratory units.

pub mod analysis;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod model;

pub use error::{Error, Result};
pub use num_complex::Complex64;
