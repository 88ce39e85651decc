//! Full second-order engine: Newtonian dynamics of the site displacements.
//!
//! Each site contributes one coordinate u_i along its instantaneous mode
//! direction:
//!
//! ```text
//! ü_i = −ω_i(t)² u_i − ε_i u_i³ − (1/m) Σ_j c_ij(t) u_j
//! ```
//!
//! with geometric spring constants c_ij(t) = (2q²/4πε0 d³)·rot(α_i, α_j)
//! matched to the rotating-frame coupling coefficients, and the Duffing
//! stiffness ε_i = 4 m ω_i² χ_i / (3ħ) reproducing the frequency pull
//! ω_eff = ω + χ·n̄.

use super::{DynamicsError, PhaseSpaceState};
use crate::constants;
use crate::lattice::rotation_factor;
use crate::ode::{integrate, OdeOptions};
use crate::protocol::CompiledTimeline;

/// Per-site frequency noise sampled on a uniform grid, looked up by the
/// integrator (piecewise constant).
#[derive(Debug, Clone)]
pub(crate) struct NoisePath {
    pub t0: f64,
    pub dt: f64,
    /// values[step][site], rad/s offsets
    pub values: Vec<Vec<f64>>,
}

impl NoisePath {
    fn value(&self, site: usize, t: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let idx = (((t - self.t0) / self.dt).floor().max(0.0) as usize)
            .min(self.values.len() - 1);
        self.values[idx][site]
    }
}

struct PairGeometry {
    i: usize,
    j: usize,
    /// 2q²/(4πε0 d³), N/m
    spring: f64,
    /// pair-axis angle in the mode plane
    axis: f64,
}

struct EngineContext<'a> {
    timeline: &'a CompiledTimeline,
    pairs: Vec<PairGeometry>,
    mass: f64,
    chi: Vec<f64>,
    noise: Option<&'a NoisePath>,
}

impl<'a> EngineContext<'a> {
    fn new(timeline: &'a CompiledTimeline, noise: Option<&'a NoisePath>) -> Result<Self, DynamicsError> {
        let lattice = timeline.lattice();
        let n = lattice.len();
        let q = lattice.species.charge;
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &lattice.sites[i];
                let b = &lattice.sites[j];
                let dx = b.position[0] - a.position[0];
                let dy = b.position[1] - a.position[1];
                let dz = b.position[2] - a.position[2];
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                if d <= 0.0 || dx.hypot(dy) < 1e-9 * d {
                    return Err(DynamicsError::InvalidArgument(format!(
                        "pair ({i}, {j}) has no usable in-plane axis"
                    )));
                }
                let spring = 2.0 * q * q
                    / (4.0 * std::f64::consts::PI * lattice.vacuum_permittivity * d.powi(3));
                pairs.push(PairGeometry {
                    i,
                    j,
                    spring,
                    axis: dy.atan2(dx),
                });
            }
        }
        Ok(Self {
            timeline,
            pairs,
            mass: lattice.species.mass,
            chi: lattice
                .sites
                .iter()
                .map(|s| s.anharmonic_coefficient)
                .collect(),
            noise,
        })
    }

    fn site_count(&self) -> usize {
        self.chi.len()
    }

    /// y = [u..., v...]; dy = [v..., a...]
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.site_count();
        let (u, v) = y.split_at(n);
        let (du, dv) = dy.split_at_mut(n);
        du.copy_from_slice(v);
        for i in 0..n {
            let mut omega = self.timeline.omega(i, t);
            if let Some(path) = self.noise {
                omega += path.value(i, t);
            }
            let eps = 4.0 * self.mass * omega * omega * self.chi[i] / (3.0 * constants::HBAR);
            dv[i] = -omega * omega * u[i] - (eps / self.mass) * u[i] * u[i] * u[i];
        }
        for pair in &self.pairs {
            let rot = rotation_factor(
                self.timeline.angle(pair.i, t) - pair.axis,
                self.timeline.angle(pair.j, t) - pair.axis,
            );
            let c = pair.spring * rot;
            dv[pair.i] -= c * u[pair.j] / self.mass;
            dv[pair.j] -= c * u[pair.i] / self.mass;
        }
    }
}

fn pack(state: &PhaseSpaceState, mass: f64) -> Vec<f64> {
    let n = state.site_count();
    let mut y = Vec::with_capacity(2 * n);
    y.extend_from_slice(&state.displacements);
    y.extend(state.momenta.iter().map(|p| p / mass));
    y
}

fn unpack(y: &[f64], mass: f64) -> PhaseSpaceState {
    let n = y.len() / 2;
    PhaseSpaceState {
        displacements: y[..n].to_vec(),
        momenta: y[n..].iter().map(|v| v * mass).collect(),
    }
}

fn tolerance_scales(timeline: &CompiledTimeline, y: &[f64], t: f64) -> Vec<f64> {
    let n = y.len() / 2;
    let mut u_char = 0.0f64;
    let mut omega_max = 0.0f64;
    for i in 0..n {
        let omega = timeline.omega(i, t);
        omega_max = omega_max.max(omega);
        u_char = u_char.max(y[i].abs()).max(y[n + i].abs() / omega);
    }
    if u_char == 0.0 {
        // zero motion: fall back to the zero-point scale of site 0
        let omega = timeline.omega(0, t);
        u_char = (constants::HBAR / (timeline.lattice().species.mass * omega)).sqrt();
    }
    let mut scales = vec![u_char; 2 * n];
    for s in scales[n..].iter_mut() {
        *s = u_char * omega_max;
    }
    scales
}

/// Default-tolerance evolution from `t0` to `t1`.
pub fn evolve_full(
    timeline: &CompiledTimeline,
    state: &PhaseSpaceState,
    t0: f64,
    t1: f64,
) -> Result<PhaseSpaceState, DynamicsError> {
    evolve_full_with(timeline, state, t0, t1, &OdeOptions::default())
}

/// Evolution with explicit integrator options.
pub fn evolve_full_with(
    timeline: &CompiledTimeline,
    state: &PhaseSpaceState,
    t0: f64,
    t1: f64,
    opts: &OdeOptions,
) -> Result<PhaseSpaceState, DynamicsError> {
    let (end, _) = evolve_full_sampled(timeline, state, t0, t1, &[], opts)?;
    Ok(end)
}

/// Evolution that also reports dense-output snapshots at `samples`.
pub fn evolve_full_sampled(
    timeline: &CompiledTimeline,
    state: &PhaseSpaceState,
    t0: f64,
    t1: f64,
    samples: &[f64],
    opts: &OdeOptions,
) -> Result<(PhaseSpaceState, Vec<PhaseSpaceState>), DynamicsError> {
    evolve_full_noisy(timeline, state, t0, t1, samples, opts, None)
}

pub(crate) fn evolve_full_noisy(
    timeline: &CompiledTimeline,
    state: &PhaseSpaceState,
    t0: f64,
    t1: f64,
    samples: &[f64],
    opts: &OdeOptions,
    noise: Option<&NoisePath>,
) -> Result<(PhaseSpaceState, Vec<PhaseSpaceState>), DynamicsError> {
    if state.site_count() != timeline.site_count() {
        return Err(DynamicsError::DimensionMismatch {
            matrix: timeline.site_count(),
            state: state.site_count(),
        });
    }
    if !(t1 >= t0) {
        return Err(DynamicsError::InvalidArgument(format!(
            "reversed time span [{t0}, {t1}]"
        )));
    }
    if !timeline.covers(t0, t1) {
        return Err(DynamicsError::TimelineGap { t0, t1 });
    }
    let ctx = EngineContext::new(timeline, noise)?;
    let mass = ctx.mass;
    let y0 = pack(state, mass);
    let opts = OdeOptions {
        scale: tolerance_scales(timeline, &y0, t0),
        ..opts.clone()
    };
    let mut snapshots = Vec::with_capacity(samples.len());
    let (y_end, _stats) = integrate(
        |t, y, dy| ctx.rhs(t, y, dy),
        t0,
        t1,
        &y0,
        &opts,
        samples,
        |_, y| snapshots.push(unpack(y, mass)),
    )?;
    Ok((unpack(&y_end, mass), snapshots))
}

/// Local oscillator energy of one site (kinetic + harmonic + quartic), J.
pub fn site_energy(timeline: &CompiledTimeline, state: &PhaseSpaceState, site: usize, t: f64) -> f64 {
    let mass = timeline.lattice().species.mass;
    let omega = timeline.omega(site, t);
    let chi = timeline.lattice().sites[site].anharmonic_coefficient;
    let u = state.displacements[site];
    let p = state.momenta[site];
    let eps = 4.0 * mass * omega * omega * chi / (3.0 * constants::HBAR);
    p * p / (2.0 * mass) + 0.5 * mass * omega * omega * u * u + 0.25 * eps * u.powi(4)
}

/// Population equivalent of the local energy: n̄ = E/(ħω) at the site's
/// instantaneous frequency.
pub fn site_population(
    timeline: &CompiledTimeline,
    state: &PhaseSpaceState,
    site: usize,
    t: f64,
) -> f64 {
    site_energy(timeline, state, site, t) / (constants::HBAR * timeline.omega(site, t))
}

/// Total mechanical energy including the pair coupling terms, J.
pub fn total_energy(timeline: &CompiledTimeline, state: &PhaseSpaceState, t: f64) -> f64 {
    let lattice = timeline.lattice();
    let n = lattice.len();
    let mut e = 0.0;
    for i in 0..n {
        e += site_energy(timeline, state, i, t);
    }
    let q = lattice.species.charge;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &lattice.sites[i];
            let b = &lattice.sites[j];
            let dx = b.position[0] - a.position[0];
            let dy = b.position[1] - a.position[1];
            let dz = b.position[2] - a.position[2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            let axis = dy.atan2(dx);
            let spring = 2.0 * q * q
                / (4.0 * std::f64::consts::PI * lattice.vacuum_permittivity * d.powi(3));
            let rot = rotation_factor(
                timeline.angle(i, t) - axis,
                timeline.angle(j, t) - axis,
            );
            e += spring * rot * state.displacements[i] * state.displacements[j];
        }
    }
    e
}
