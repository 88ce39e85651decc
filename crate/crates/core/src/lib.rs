//! Simulator and analysis toolkit for phonon coupling in two-dimensional
//! arrays of individually trapped ions.
//!
//! Ions in separate microtraps exchange motional excitation through the
//! Coulomb interaction. The crate models a lattice of such sites and
//! provides:
//!
//! * the analytic coupling laws — resonant rate, detuned rate and exchange
//!   efficiency, and the in-plane mode-rotation factor ([`lattice`]);
//! * time evolution of coherent motional amplitudes, as exactly unitary
//!   rotating-frame dynamics or as the full second-order equations of
//!   motion, with optional Duffing frequency pulling, Ornstein-Uhlenbeck
//!   frequency noise, and heating ([`dynamics`]);
//! * experiment sequences (cool / excite / tune / rotate / couple /
//!   detect) with adiabaticity validation, smoothstep compilation, and
//!   repeated execution with detection statistics ([`protocol`]);
//! * damped-sinusoid exchange fits with curvature-based uncertainties and
//!   conservation-residual diagnostics ([`estimation`]);
//! * the plot-ready CSV exchange format ([`io`]).
//!
//! All internal frequencies are angular (rad/s); user-facing layers report
//! ω/2π. Populations are mean phonon numbers n̄ (|β|² for the coherent
//! part plus a thermal baseline).

pub mod constants;
pub mod dynamics;
pub mod estimation;
pub mod io;
pub mod lattice;
pub mod ode;
pub mod protocol;
