//! Physical constants (CODATA 2018 / SI-2019 exact values).
//!
//! All frequencies in this crate are angular (rad/s); user-facing layers
//! divide by 2π before printing.

/// Elementary charge, C (exact).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Vacuum permittivity, F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Unified atomic mass unit, kg.
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27;

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Coulomb constant 1/(4π ε0), N·m²/C².
pub fn coulomb_constant() -> f64 {
    1.0 / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY)
}
