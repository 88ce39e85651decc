//! Site geometry, ion species, and the analytic inter-site coupling laws.
//!
//! Two ions of charge `q` and mass `m` in separate harmonic wells a distance
//! `d` apart exchange motional excitation at the resonant rate
//!
//! ```text
//! Ω_res = 1/(4π ε0) · 2 q² / (d³ m ω)
//! ```
//!
//! A frequency difference Δω between the wells raises the exchange rate to
//! `Ω_det = √(Ω_res² + Δω²)` while capping the transferred fraction at the
//! exchange efficiency `κ = (Ω_res / Ω_det)²`. Rotating the mode orientations
//! by in-plane angles (α0, α1) relative to the inter-site axis scales the
//! rate by the dipole-dipole anisotropy factor
//! `cos α0 cos α1 − 0.5 sin α0 sin α1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

use crate::constants;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Wrap an angle into (−π, π].
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}

/// Ion species: all sites of a lattice hold the same species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    /// Ion mass, kg.
    pub mass: f64,
    /// Ion charge, C.
    pub charge: f64,
}

impl IonSpecies {
    pub fn new(mass: f64, charge: f64) -> Result<Self, LatticeError> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(LatticeError::InvalidArgument(format!(
                "ion mass must be positive, got {mass}"
            )));
        }
        if charge == 0.0 || !charge.is_finite() {
            return Err(LatticeError::InvalidArgument(format!(
                "ion charge must be nonzero, got {charge}"
            )));
        }
        Ok(Self { mass, charge })
    }

    /// Singly ionized magnesium-24 at nominal mass 24 u.
    pub fn magnesium_24() -> Self {
        Self {
            mass: 24.0 * constants::ATOMIC_MASS,
            charge: constants::ELEMENTARY_CHARGE,
        }
    }
}

/// One lattice site: local trap parameters of the selected coupling mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapSite {
    /// Site index; must equal the site's position in the lattice list.
    pub id: usize,
    /// Trap centre, m. Mode orientations live in the xy plane.
    pub position: [f64; 3],
    /// Coupling-mode frequency ω_C, rad/s.
    pub mode_frequency: f64,
    /// In-plane mode angle relative to the lattice reference axis (+x),
    /// stored normalized to (−π, π].
    pub mode_angle: f64,
    /// Amplitude-dependent frequency shift χ, rad/s per quantum:
    /// ω_eff = ω_C + χ·n̄.
    pub anharmonic_coefficient: f64,
    /// Phase convention offset of the local oscillator, rad.
    pub motional_phase: f64,
}

impl TrapSite {
    pub fn new(
        id: usize,
        position: [f64; 3],
        mode_frequency: f64,
        mode_angle: f64,
    ) -> Result<Self, LatticeError> {
        if !(mode_frequency > 0.0) || !mode_frequency.is_finite() {
            return Err(LatticeError::InvalidArgument(format!(
                "mode frequency must be positive, got {mode_frequency}"
            )));
        }
        if position.iter().any(|x| !x.is_finite()) {
            return Err(LatticeError::InvalidArgument(
                "site position must be finite".into(),
            ));
        }
        Ok(Self {
            id,
            position,
            mode_frequency,
            mode_angle: normalize_angle(mode_angle),
            anharmonic_coefficient: 0.0,
            motional_phase: 0.0,
        })
    }

    pub fn with_anharmonicity(mut self, chi: f64) -> Self {
        self.anharmonic_coefficient = chi;
        self
    }

    pub fn with_motional_phase(mut self, phase: f64) -> Self {
        self.motional_phase = normalize_angle(phase);
        self
    }
}

/// Full lattice description: species plus an ordered list of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub species: IonSpecies,
    pub sites: Vec<TrapSite>,
    /// Vacuum permittivity, F/m. Defaults to the CODATA value; kept as data
    /// so scaled-unit test systems remain expressible.
    pub vacuum_permittivity: f64,
}

impl LatticeConfig {
    pub fn new(species: IonSpecies, sites: Vec<TrapSite>) -> Result<Self, LatticeError> {
        if sites.len() < 2 {
            return Err(LatticeError::InvalidConfig(format!(
                "a lattice needs at least 2 sites, got {}",
                sites.len()
            )));
        }
        for (k, site) in sites.iter().enumerate() {
            if site.id != k {
                return Err(LatticeError::InvalidConfig(format!(
                    "site ids must match list order: slot {k} holds id {}",
                    site.id
                )));
            }
        }
        for i in 0..sites.len() {
            for j in (i + 1)..sites.len() {
                if pair_distance(&sites[i], &sites[j]) <= 0.0 {
                    return Err(LatticeError::InvalidGeometry(format!(
                        "sites {i} and {j} are coincident"
                    )));
                }
            }
        }
        Ok(Self {
            species,
            sites,
            vacuum_permittivity: constants::VACUUM_PERMITTIVITY,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

fn pair_distance(a: &TrapSite, b: &TrapSite) -> f64 {
    let dx = b.position[0] - a.position[0];
    let dy = b.position[1] - a.position[1];
    let dz = b.position[2] - a.position[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn coupling_rate_with_permittivity(
    eps0: f64,
    species: IonSpecies,
    distance: f64,
    omega: f64,
) -> Result<f64, LatticeError> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(LatticeError::InvalidArgument(format!(
            "distance must be positive, got {distance}"
        )));
    }
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(LatticeError::InvalidArgument(format!(
            "mode frequency must be positive, got {omega}"
        )));
    }
    let q = species.charge;
    Ok(1.0 / (4.0 * PI * eps0) * 2.0 * q * q
        / (distance.powi(3) * species.mass * omega))
}

/// Resonant exchange rate between two identical, mode-aligned oscillators,
/// rad/s. Scales as d⁻³ and ω⁻¹.
pub fn resonant_coupling_rate(
    species: IonSpecies,
    distance: f64,
    omega: f64,
) -> Result<f64, LatticeError> {
    coupling_rate_with_permittivity(constants::VACUUM_PERMITTIVITY, species, distance, omega)
}

/// Exchange rate and efficiency of a detuned pair:
/// `rate = √(Ω_res² + Δω²)`, `efficiency = (Ω_res / rate)²`.
///
/// The identity `efficiency · rate² = Ω_res²` holds exactly.
pub fn detuned_rate_and_efficiency(
    omega_res: f64,
    delta_omega: f64,
) -> Result<(f64, f64), LatticeError> {
    if !(omega_res > 0.0) || !omega_res.is_finite() {
        return Err(LatticeError::InvalidArgument(format!(
            "resonant rate must be positive, got {omega_res}"
        )));
    }
    let rate = omega_res.hypot(delta_omega);
    let ratio = omega_res / rate;
    Ok((rate, ratio * ratio))
}

/// Dipole-dipole anisotropy factor for in-plane mode angles measured from
/// the inter-site axis: `cos α0 cos α1 − 0.5 sin α0 sin α1`.
///
/// Symmetric in its arguments, even under joint sign flip, bounded in
/// [−1, 1]. Vanishes at α0 = α1 = arctan √2 ≈ 54.74°.
pub fn rotation_factor(alpha0: f64, alpha1: f64) -> f64 {
    let a0 = normalize_angle(alpha0);
    let a1 = normalize_angle(alpha1);
    a0.cos() * a1.cos() - 0.5 * a0.sin() * a1.sin()
}

/// Split an effective (rate, efficiency) pair into the (Ω_res, Δω) that
/// realizes it: Ω_res = Ω√κ, Δω = Ω√(1−κ).
pub fn bare_from_effective(
    omega_eff: f64,
    efficiency: f64,
) -> Result<(f64, f64), LatticeError> {
    if !(omega_eff > 0.0) {
        return Err(LatticeError::InvalidArgument(format!(
            "effective rate must be positive, got {omega_eff}"
        )));
    }
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(LatticeError::InvalidArgument(format!(
            "efficiency must lie in (0, 1], got {efficiency}"
        )));
    }
    Ok((
        omega_eff * efficiency.sqrt(),
        omega_eff * (1.0 - efficiency).sqrt(),
    ))
}

/// Solve for the pair frequencies (ω0, ω1 = ω0 + Δω) whose geometric mean
/// yields the requested resonant rate at distance `d`.
pub fn pair_frequencies_for_rate(
    species: IonSpecies,
    distance: f64,
    omega_res: f64,
    delta_omega: f64,
) -> Result<(f64, f64), LatticeError> {
    if !(omega_res > 0.0) {
        return Err(LatticeError::InvalidArgument(format!(
            "target rate must be positive, got {omega_res}"
        )));
    }
    // Ω_res(ω̄) = K/ω̄ with K = 2q²/(4πε0 d³ m), so ω̄ = K/Ω_res; then
    // ω0 ω1 = ω̄² with ω1 = ω0 + Δω gives a quadratic in ω0.
    let k = coupling_rate_with_permittivity(
        constants::VACUUM_PERMITTIVITY,
        species,
        distance,
        1.0,
    )?;
    let mean = k / omega_res;
    let omega0 = 0.5 * (-delta_omega + (delta_omega * delta_omega + 4.0 * mean * mean).sqrt());
    if !(omega0 > 0.0) {
        return Err(LatticeError::InvalidArgument(
            "no positive frequency solves the requested rate".into(),
        ));
    }
    Ok((omega0, omega0 + delta_omega))
}

/// Hermitian generator of the rotating-frame amplitude dynamics:
/// detunings δ_i = ω_C,i − ω_ref on the diagonal, pairwise half-rates
/// g_ij (|g_ij| = Ω_ij/2) off the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    matrix: DMatrix<Complex64>,
}

impl CouplingMatrix {
    /// Wrap a matrix, validating Hermiticity and a real diagonal.
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self, LatticeError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(LatticeError::InvalidArgument(format!(
                "coupling matrix must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.norm().max(1.0);
        for i in 0..matrix.nrows() {
            if matrix[(i, i)].im.abs() > 1e-12 * scale {
                return Err(LatticeError::InvalidArgument(format!(
                    "diagonal entry {i} is not real"
                )));
            }
            for j in (i + 1)..matrix.ncols() {
                let asym = (matrix[(i, j)] - matrix[(j, i)].conj()).norm();
                if asym > 1e-12 * scale {
                    return Err(LatticeError::InvalidArgument(format!(
                        "matrix is not Hermitian at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { matrix })
    }

    /// Two-site matrix with the reference frame on site 0:
    /// diag(0, Δω), off-diagonal Ω_res/2.
    pub fn two_site(omega_res: f64, delta_omega: f64) -> Self {
        let g = Complex64::new(0.5 * omega_res, 0.0);
        let matrix = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(0.0, 0.0),
                g,
                g.conj(),
                Complex64::new(delta_omega, 0.0),
            ],
        );
        Self { matrix }
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    /// Detuning δ_i of site `i` relative to the reference frequency, rad/s.
    pub fn detuning(&self, i: usize) -> f64 {
        self.matrix[(i, i)].re
    }

    /// Complex half-rate g_ij, rad/s.
    pub fn coupling(&self, i: usize, j: usize) -> Complex64 {
        self.matrix[(i, j)]
    }

    /// Pairwise exchange rate magnitude Ω_ij = 2|g_ij|, rad/s.
    pub fn pair_rate(&self, i: usize, j: usize) -> f64 {
        2.0 * self.matrix[(i, j)].norm()
    }

    pub fn as_matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// Hermitian eigendecomposition (real eigenvalues, unitary basis).
    pub fn eigen(&self) -> (DVector<f64>, DMatrix<Complex64>) {
        let eig = self.matrix.clone().symmetric_eigen();
        (eig.eigenvalues, eig.eigenvectors)
    }

    /// Unitary propagator U = exp(−i M t).
    pub fn propagator(&self, duration: f64) -> DMatrix<Complex64> {
        let (vals, vecs) = self.eigen();
        let phases = DMatrix::from_diagonal(&vals.map(|l| {
            Complex64::from_polar(1.0, -l * duration)
        }));
        &vecs * phases * vecs.adjoint()
    }

    /// Reorder sites by `perm` (new index k holds old site perm[k]).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, LatticeError> {
        let n = self.dimension();
        if perm.len() != n {
            return Err(LatticeError::InvalidArgument(
                "permutation length must match dimension".into(),
            ));
        }
        let mut out = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                out[(a, b)] = self.matrix[(perm[a], perm[b])];
            }
        }
        Ok(Self { matrix: out })
    }
}

/// Assemble the coupling matrix of a lattice in the frame rotating at
/// `reference_frequency`.
///
/// For each pair the rate uses the geometric-mean frequency √(ω_i ω_j), the
/// pair distance, and mode angles re-expressed relative to that pair's own
/// axis; the stored motional phases enter as e^{i(φ_i − φ_j)}.
pub fn build_coupling_matrix(
    config: &LatticeConfig,
    reference_frequency: f64,
) -> Result<CouplingMatrix, LatticeError> {
    if !(reference_frequency > 0.0) || !reference_frequency.is_finite() {
        return Err(LatticeError::InvalidArgument(format!(
            "reference frequency must be positive, got {reference_frequency}"
        )));
    }
    let n = config.sites.len();
    let mut matrix = DMatrix::<Complex64>::zeros(n, n);
    for (i, site) in config.sites.iter().enumerate() {
        matrix[(i, i)] = Complex64::new(site.mode_frequency - reference_frequency, 0.0);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let rate = pair_coupling_rate(config, i, j)?;
            let phase = config.sites[i].motional_phase - config.sites[j].motional_phase;
            let g = Complex64::from_polar(0.5 * rate.abs(), phase) * rate.signum();
            matrix[(i, j)] = g;
            matrix[(j, i)] = g.conj();
        }
    }
    Ok(CouplingMatrix { matrix })
}

/// Signed pairwise exchange rate Ω_ij, rad/s: resonant-rate magnitude at the
/// pair's geometric-mean frequency times the rotation factor of the mode
/// angles seen from the pair axis.
pub fn pair_coupling_rate(
    config: &LatticeConfig,
    i: usize,
    j: usize,
) -> Result<f64, LatticeError> {
    let (a, b) = (&config.sites[i], &config.sites[j]);
    let d = pair_distance(a, b);
    if d <= 0.0 {
        return Err(LatticeError::InvalidGeometry(format!(
            "sites {i} and {j} are coincident"
        )));
    }
    let dx = b.position[0] - a.position[0];
    let dy = b.position[1] - a.position[1];
    if dx.hypot(dy) < 1e-9 * d {
        return Err(LatticeError::InvalidGeometry(format!(
            "pair ({i}, {j}) axis has no in-plane component; mode angles are undefined"
        )));
    }
    let axis = dy.atan2(dx);
    let mean_omega = (a.mode_frequency * b.mode_frequency).sqrt();
    let rate = coupling_rate_with_permittivity(
        config.vacuum_permittivity,
        config.species,
        d,
        mean_omega,
    )?;
    Ok(rate * rotation_factor(a.mode_angle - axis, b.mode_angle - axis))
}
