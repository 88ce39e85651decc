//! Rotating-frame stepping with frequency noise and amplitude-dependent
//! detuning.
//!
//! Piecewise-constant stretches evolve by the exact unitary propagator.
//! Noise and the Duffing pull enter through a Strang-split step
//! `D(dt/2) · U(dt) · D(dt/2)`, where `D` applies per-site diagonal phases
//! exp(−i(ξ_i + χ_i|β_i|²)dt/2). Both factors are unitary, so Σ|β_i|² is
//! conserved exactly by construction; heating acts on the thermal baseline
//! only.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use super::{DynamicsError, LatticeState, NoiseModel, OuProcess};
use crate::lattice::CouplingMatrix;

/// One realization: states sampled on a uniform grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<LatticeState>,
}

impl Trajectory {
    /// Coherent population of `site` along the trajectory.
    pub fn coherent_population(&self, site: usize) -> Vec<f64> {
        self.states
            .iter()
            .map(|s| s.coherent_population(site))
            .collect()
    }

    /// Detection-level population of `site` along the trajectory.
    pub fn detected_population(&self, site: usize) -> Vec<f64> {
        self.states
            .iter()
            .map(|s| s.detected_population(site))
            .collect()
    }
}

/// Per-site Duffing frequency pull, rad/s per quantum.
#[derive(Debug, Clone)]
pub struct ChiTerm {
    per_site: Vec<f64>,
}

impl ChiTerm {
    pub fn per_site(chi: Vec<f64>) -> Self {
        Self { per_site: chi }
    }

    pub fn is_zero(&self) -> bool {
        self.per_site.iter().all(|&c| c == 0.0)
    }

    fn value(&self, site: usize) -> f64 {
        self.per_site[site]
    }
}

/// Stochastic drive of one repetition: an Ornstein-Uhlenbeck frequency
/// process plus heating of the thermal baselines. Owns its RNG so that
/// detection noise can draw from an independent stream.
pub(crate) struct NoiseDriver {
    pub ou: OuProcess,
    pub rng: ChaCha12Rng,
    pub heating_rate: f64,
    pub stochastic_heating: bool,
}

impl NoiseDriver {
    pub fn from_model(model: &NoiseModel, sites: usize, mut rng: ChaCha12Rng) -> Self {
        let ou = OuProcess::stationary(
            model.dephasing_sigma,
            model.dephasing_corr_time,
            model.common_mode_dephasing,
            sites,
            &mut rng,
        );
        Self {
            ou,
            rng,
            heating_rate: model.heating_rate,
            stochastic_heating: model.stochastic_heating,
        }
    }

    pub(crate) fn heat(&mut self, baselines: &mut [f64], dt: f64) {
        if self.heating_rate <= 0.0 {
            return;
        }
        let mean = self.heating_rate * dt;
        for b in baselines.iter_mut() {
            if self.stochastic_heating {
                let poisson = Poisson::new(mean).expect("positive heating increment");
                *b += poisson.sample(&mut self.rng);
            } else {
                *b += mean;
            }
        }
    }

    pub(crate) fn is_active(&self) -> bool {
        self.ou.is_active() || self.heating_rate > 0.0
    }
}

/// Evolution over a stretch with a fixed coupling matrix, optionally with
/// a Duffing pull; noise comes in per call.
pub struct RwaInterval {
    matrix: CouplingMatrix,
    chi: Option<ChiTerm>,
    cached: Option<(f64, DMatrix<Complex64>)>,
}

impl RwaInterval {
    pub fn constant(matrix: CouplingMatrix, chi: Option<ChiTerm>) -> Self {
        Self {
            matrix,
            chi,
            cached: None,
        }
    }

    /// Swap in a new matrix (ramp stepping); invalidates the cached
    /// propagator.
    pub fn set_matrix(&mut self, matrix: CouplingMatrix) {
        self.matrix = matrix;
        self.cached = None;
    }

    fn propagator(&mut self, dt: f64) -> DMatrix<Complex64> {
        let rebuild = match &self.cached {
            Some((cached_dt, _)) => (cached_dt - dt).abs() > 1e-18 * dt.abs().max(1e-30),
            None => true,
        };
        if rebuild {
            self.cached = Some((dt, self.matrix.propagator(dt)));
        }
        self.cached.as_ref().unwrap().1.clone()
    }

    fn chi_active(&self) -> bool {
        self.chi.as_ref().map(|c| !c.is_zero()).unwrap_or(false)
    }

    /// Advance `state` by `duration` in sub-steps of at most `dt_max`,
    /// advancing `state.time` alongside. The optional observer sees the
    /// state after every sub-step.
    pub(crate) fn advance(
        &mut self,
        state: &mut LatticeState,
        duration: f64,
        dt_max: f64,
        mut noise: Option<&mut NoiseDriver>,
        mut observer: Option<&mut dyn FnMut(&LatticeState)>,
    ) {
        if duration <= 0.0 {
            return;
        }
        let noisy = noise.as_ref().map(|n| n.is_active()).unwrap_or(false);
        if !noisy && !self.chi_active() && observer.is_none() {
            let u = self.matrix.propagator(duration);
            apply_propagator(&u, state);
            state.set_time(state.time() + duration);
            return;
        }
        let n_steps = (duration / dt_max).ceil().max(1.0) as usize;
        let dt = duration / n_steps as f64;
        let u = self.propagator(dt);
        for _ in 0..n_steps {
            let half = dt / 2.0;
            self.apply_diagonal(state, noise.as_deref(), half);
            apply_propagator(&u, state);
            self.apply_diagonal(state, noise.as_deref(), half);
            if let Some(n) = noise.as_deref_mut() {
                let NoiseDriver { ou, rng, .. } = n;
                ou.step(dt, rng);
                n.heat(state.baselines_mut(), dt);
            }
            state.set_time(state.time() + dt);
            if let Some(obs) = observer.as_deref_mut() {
                obs(state);
            }
        }
    }

    fn apply_diagonal(&self, state: &mut LatticeState, noise: Option<&NoiseDriver>, half_dt: f64) {
        let chi = &self.chi;
        let xi = noise.map(|n| n.ou.values());
        for (i, beta) in state.amplitudes_mut().iter_mut().enumerate() {
            let mut extra = xi.map(|x| x[i]).unwrap_or(0.0);
            if let Some(c) = chi {
                extra += c.value(i) * beta.norm_sqr();
            }
            if extra != 0.0 {
                *beta *= Complex64::from_polar(1.0, -extra * half_dt);
            }
        }
    }
}

fn apply_propagator(u: &DMatrix<Complex64>, state: &mut LatticeState) {
    let beta = nalgebra::DVector::from_column_slice(state.amplitudes());
    let evolved = u * beta;
    state.amplitudes_mut().copy_from_slice(evolved.as_slice());
}

/// Monte-Carlo ensemble of rotating-frame evolutions under Ornstein-
/// Uhlenbeck frequency noise and heating. Deterministic for a given
/// `noise.rng_seed`; samples are independent (per-sample RNG streams) and
/// evaluated in parallel, so the result does not depend on thread count.
pub fn sample_noisy_trajectory(
    matrix: &CouplingMatrix,
    state: &LatticeState,
    duration: f64,
    noise: &NoiseModel,
    n_samples: usize,
) -> Result<Vec<Trajectory>, DynamicsError> {
    if matrix.dimension() != state.site_count() {
        return Err(DynamicsError::DimensionMismatch {
            matrix: matrix.dimension(),
            state: state.site_count(),
        });
    }
    if n_samples == 0 {
        return Err(DynamicsError::InvalidArgument(
            "ensemble needs at least one sample".into(),
        ));
    }
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!(
            "duration must be non-negative, got {duration}"
        )));
    }
    noise.validate()?;

    let n_steps = noise_step_count(noise, duration);
    let dt = duration / n_steps as f64;

    let trajectories: Vec<Trajectory> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha12Rng::seed_from_u64(noise.rng_seed);
            rng.set_stream(k as u64 + 1);
            let mut driver = NoiseDriver::from_model(noise, state.site_count(), rng);
            let mut interval = RwaInterval::constant(matrix.clone(), None);
            let mut current = state.clone();
            let mut times = Vec::with_capacity(n_steps + 1);
            let mut states = Vec::with_capacity(n_steps + 1);
            times.push(current.time());
            states.push(current.clone());
            {
                let mut observer = |s: &LatticeState| {
                    times.push(s.time());
                    states.push(s.clone());
                };
                interval.advance(
                    &mut current,
                    duration,
                    dt,
                    Some(&mut driver),
                    Some(&mut observer),
                );
            }
            Trajectory { times, states }
        })
        .collect();
    Ok(trajectories)
}

fn noise_step_count(noise: &NoiseModel, duration: f64) -> usize {
    if duration == 0.0 {
        return 1;
    }
    let base = 400usize;
    if noise.dephasing_sigma > 0.0 {
        let corr_limited = (8.0 * duration / noise.dephasing_corr_time).ceil() as usize;
        base.max(corr_limited)
    } else {
        base
    }
}

/// Ensemble mean and standard error of the detected population of `site`.
/// Returns (times, mean, sem).
pub fn ensemble_mean_population(
    trajectories: &[Trajectory],
    site: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = trajectories.len();
    let len = trajectories[0].times.len();
    let times = trajectories[0].times.clone();
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    for (count, traj) in trajectories.iter().enumerate() {
        for (k, s) in traj.states.iter().enumerate() {
            let x = s.detected_population(site);
            let delta = x - mean[k];
            mean[k] += delta / (count as f64 + 1.0);
            m2[k] += delta * (x - mean[k]);
        }
    }
    let sem = m2
        .iter()
        .map(|&v| {
            if n > 1 {
                (v / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    (times, mean, sem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::TAU;

    #[test]
    fn zero_noise_matches_unitary_evolution() {
        let matrix = CouplingMatrix::two_site(TAU * 2e3, TAU * 0.7e3);
        let state = LatticeState::single_excitation(2, 0, 50.0);
        let noise = NoiseModel::off(7);
        let trajectories = sample_noisy_trajectory(&matrix, &state, 400e-6, &noise, 3).unwrap();
        for traj in &trajectories {
            for (t, s) in traj.times.iter().zip(&traj.states) {
                let reference = super::super::evolve_rwa(&matrix, &state, *t).unwrap();
                for i in 0..2 {
                    assert_abs_diff_eq!(
                        s.coherent_population(i),
                        reference.coherent_population(i),
                        epsilon = 1e-9 * 50.0
                    );
                }
            }
        }
    }

    #[test]
    fn heating_only_grows_mean_population() {
        let matrix = CouplingMatrix::two_site(1e-6, 0.0); // negligible coupling
        let state = LatticeState::vacuum(2);
        let mut noise = NoiseModel::off(3);
        noise.heating_rate = 5_000.0; // quanta/s
        let duration = 1e-3;
        let trajectories = sample_noisy_trajectory(&matrix, &state, duration, &noise, 2).unwrap();
        let last = trajectories[0].states.last().unwrap();
        assert_relative_eq!(
            last.detected_population(0),
            noise.heating_rate * duration,
            max_relative = 1e-9
        );
    }

    #[test]
    fn stochastic_heating_has_poisson_scale_scatter() {
        let matrix = CouplingMatrix::two_site(1e-6, 0.0);
        let state = LatticeState::vacuum(2);
        let mut noise = NoiseModel::off(17);
        noise.heating_rate = 3_000.0;
        noise.stochastic_heating = true;
        let duration = 1e-3;
        let trajectories =
            sample_noisy_trajectory(&matrix, &state, duration, &noise, 64).unwrap();
        let finals: Vec<f64> = trajectories
            .iter()
            .map(|t| t.states.last().unwrap().detected_population(0))
            .collect();
        let mean: f64 = finals.iter().sum::<f64>() / finals.len() as f64;
        let expectation = noise.heating_rate * duration; // 3 quanta
        assert_relative_eq!(mean, expectation, max_relative = 0.5);
        let var: f64 =
            finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64;
        assert!(var > 0.0, "stochastic heating must scatter");
    }

    #[test]
    fn noisy_samples_are_deterministic_and_independent() {
        let matrix = CouplingMatrix::two_site(TAU * 2e3, 0.0);
        let state = LatticeState::single_excitation(2, 0, 100.0);
        let noise = NoiseModel {
            dephasing_sigma: TAU * 1e3,
            dephasing_corr_time: 20e-6,
            heating_rate: 0.0,
            rng_seed: 11,
            common_mode_dephasing: false,
            stochastic_heating: false,
        };
        let a = sample_noisy_trajectory(&matrix, &state, 300e-6, &noise, 4).unwrap();
        let b = sample_noisy_trajectory(&matrix, &state, 300e-6, &noise, 4).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            for (sa, sb) in ta.states.iter().zip(&tb.states) {
                assert_eq!(sa.amplitude(0), sb.amplitude(0));
            }
        }
        // different samples genuinely differ
        let end0 = a[0].states.last().unwrap().coherent_population(1);
        let end1 = a[1].states.last().unwrap().coherent_population(1);
        assert!((end0 - end1).abs() > 1e-6);
    }

    #[test]
    fn noise_conserves_total_coherent_population() {
        let matrix = CouplingMatrix::two_site(TAU * 2e3, TAU * 1e3);
        let state = LatticeState::single_excitation(2, 0, 100.0);
        let noise = NoiseModel {
            dephasing_sigma: TAU * 2e3,
            dephasing_corr_time: 10e-6,
            heating_rate: 0.0,
            rng_seed: 5,
            common_mode_dephasing: false,
            stochastic_heating: false,
        };
        let trajectories = sample_noisy_trajectory(&matrix, &state, 500e-6, &noise, 2).unwrap();
        for traj in &trajectories {
            for s in &traj.states {
                assert_relative_eq!(s.total_coherent(), 100.0, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn common_mode_noise_does_not_dephase_exchange() {
        let omega = TAU * 2e3;
        let matrix = CouplingMatrix::two_site(omega, 0.0);
        let state = LatticeState::single_excitation(2, 0, 1.0);
        let noise = NoiseModel {
            dephasing_sigma: TAU * 3e3,
            dephasing_corr_time: 20e-6,
            heating_rate: 0.0,
            rng_seed: 13,
            common_mode_dephasing: true,
            stochastic_heating: false,
        };
        let duration = std::f64::consts::PI / omega; // full exchange
        let trajectories =
            sample_noisy_trajectory(&matrix, &state, duration, &noise, 3).unwrap();
        for traj in &trajectories {
            let last = traj.states.last().unwrap();
            assert_relative_eq!(last.coherent_population(1), 1.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn independent_noise_dephases_ensemble_mean() {
        let omega = TAU * 2e3;
        let matrix = CouplingMatrix::two_site(omega, 0.0);
        let state = LatticeState::single_excitation(2, 0, 1.0);
        let noise = NoiseModel {
            dephasing_sigma: TAU * 2e3,
            dephasing_corr_time: 20e-6,
            heating_rate: 0.0,
            rng_seed: 29,
            common_mode_dephasing: false,
            stochastic_heating: false,
        };
        // after many would-be beats the ensemble mean settles toward 1/2
        let duration = 40.0 * std::f64::consts::PI / omega;
        let trajectories =
            sample_noisy_trajectory(&matrix, &state, duration, &noise, 200).unwrap();
        let (_, mean, _) = ensemble_mean_population(&trajectories, 1);
        let tail = mean[mean.len() - 1];
        assert!(
            (tail - 0.5).abs() < 0.15,
            "dephased exchange should settle near half transfer, got {tail}"
        );
    }
}
