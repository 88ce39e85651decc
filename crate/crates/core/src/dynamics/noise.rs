//! Frequency-noise and heating models.
//!
//! Dephasing of the exchange contrast is produced by Ornstein-Uhlenbeck
//! fluctuations of the site frequencies (added to the diagonal detunings).
//! In the motional-narrowing regime (σ·τ_c ≪ 1) independent per-site noise
//! dephases the two-site beat at the rate Γ ≈ 2σ²τ_c, which seeds the
//! calibration loop that matches a target exponential timescale.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::{sample_noisy_trajectory, DynamicsError, LatticeState};
use crate::estimation;
use crate::lattice::CouplingMatrix;

/// Stochastic environment of a run. All rates are angular where applicable.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    /// RMS frequency fluctuation per site, rad/s.
    pub dephasing_sigma: f64,
    /// Correlation time of the frequency noise, s.
    pub dephasing_corr_time: f64,
    /// Thermal-baseline growth rate, quanta/s.
    pub heating_rate: f64,
    /// Master seed; repetitions and ensemble members derive independent
    /// streams from it.
    pub rng_seed: u64,
    /// Apply one shared noise process to every site instead of independent
    /// ones. Shared noise shifts only the global phase and does not dephase
    /// inter-site exchange.
    pub common_mode_dephasing: bool,
    /// Draw heating increments from a Poisson law instead of growing the
    /// baseline deterministically.
    pub stochastic_heating: bool,
}

impl NoiseModel {
    /// Quiet environment: evolution is exactly the noiseless one.
    pub fn off(rng_seed: u64) -> Self {
        Self {
            dephasing_sigma: 0.0,
            dephasing_corr_time: 20e-6,
            heating_rate: 0.0,
            rng_seed,
            common_mode_dephasing: false,
            stochastic_heating: false,
        }
    }

    pub fn is_quiet(&self) -> bool {
        self.dephasing_sigma == 0.0 && self.heating_rate == 0.0
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.dephasing_sigma < 0.0
            || self.heating_rate < 0.0
            || self.dephasing_corr_time < 0.0
        {
            return Err(DynamicsError::InvalidArgument(
                "noise parameters must be non-negative".into(),
            ));
        }
        if self.dephasing_sigma > 0.0 && self.dephasing_corr_time <= 0.0 {
            return Err(DynamicsError::InvalidArgument(
                "dephasing noise needs a positive correlation time".into(),
            ));
        }
        Ok(())
    }
}

/// Ornstein-Uhlenbeck process per site, stepped with the exact discrete
/// update ξ' = c·ξ + σ√(1−c²)·z, c = e^{−dt/τ}.
#[derive(Debug, Clone)]
pub struct OuProcess {
    sigma: f64,
    corr_time: f64,
    common_mode: bool,
    xi: Vec<f64>,
}

impl OuProcess {
    /// Start from the stationary distribution ξ ~ N(0, σ²).
    pub fn stationary(
        sigma: f64,
        corr_time: f64,
        common_mode: bool,
        sites: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mut xi = vec![0.0; sites];
        if sigma > 0.0 {
            if common_mode {
                let z: f64 = rng.sample(StandardNormal);
                xi.iter_mut().for_each(|x| *x = sigma * z);
            } else {
                for x in xi.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *x = sigma * z;
                }
            }
        }
        Self {
            sigma,
            corr_time,
            common_mode,
            xi,
        }
    }

    pub fn is_active(&self) -> bool {
        self.sigma > 0.0
    }

    /// Current frequency offsets per site, rad/s.
    pub fn values(&self) -> &[f64] {
        &self.xi
    }

    pub fn step(&mut self, dt: f64, rng: &mut ChaCha12Rng) {
        if self.sigma == 0.0 {
            return;
        }
        let c = (-dt / self.corr_time).exp();
        let kick = self.sigma * (1.0 - c * c).sqrt();
        if self.common_mode {
            let z: f64 = rng.sample(StandardNormal);
            for x in self.xi.iter_mut() {
                *x = c * *x + kick * z;
            }
        } else {
            for x in self.xi.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x = c * *x + kick * z;
            }
        }
    }
}

/// Find the noise amplitude σ whose ensemble-averaged two-site exchange
/// dephases with the requested timescale.
///
/// Starts from the motional-narrowing estimate σ₀ = √(1/(2 τ τ_c)) and
/// refines multiplicatively against the fitted decay of a simulated
/// ensemble (Γ scales as σ², so σ ← σ·√(τ_fit/τ_target)). Deterministic
/// for a fixed seed.
pub fn calibrate_dephasing_sigma(
    omega_res: f64,
    delta_omega: f64,
    target_tau: f64,
    corr_time: f64,
    n_samples: usize,
    rng_seed: u64,
) -> Result<f64, DynamicsError> {
    if !(target_tau > 0.0) || !(corr_time > 0.0) {
        return Err(DynamicsError::InvalidArgument(
            "calibration needs positive timescales".into(),
        ));
    }
    let matrix = CouplingMatrix::two_site(omega_res, delta_omega);
    let rate = omega_res.hypot(delta_omega);
    let n_tot = 1000.0;
    let state = LatticeState::single_excitation(2, 0, n_tot);
    let duration = (2.5 * target_tau).max(6.0 * std::f64::consts::TAU / rate);

    let mut sigma = (1.0 / (2.0 * target_tau * corr_time)).sqrt();
    for _ in 0..4 {
        let noise = NoiseModel {
            dephasing_sigma: sigma,
            dephasing_corr_time: corr_time,
            heating_rate: 0.0,
            rng_seed,
            common_mode_dephasing: false,
            stochastic_heating: false,
        };
        let ensemble = sample_noisy_trajectory(&matrix, &state, duration, &noise, n_samples)?;
        let (times, mean0, sem0) = super::rwa::ensemble_mean_population(&ensemble, 0);
        let (_, mean1, sem1) = super::rwa::ensemble_mean_population(&ensemble, 1);
        let s0 = estimation::TimeSeries::new(
            0,
            times
                .iter()
                .zip(mean0.iter().zip(&sem0))
                .map(|(&t, (&n, &s))| estimation::Sample {
                    time: t,
                    nbar: n,
                    sem: s,
                })
                .collect(),
        )?;
        let s1 = estimation::TimeSeries::new(
            1,
            times
                .iter()
                .zip(mean1.iter().zip(&sem1))
                .map(|(&t, (&n, &s))| estimation::Sample {
                    time: t,
                    nbar: n,
                    sem: s,
                })
                .collect(),
        )?;
        let fit = estimation::fit_exchange(&s0, &s1, n_tot)?;
        let ratio = fit.dephasing_time / target_tau;
        if (ratio - 1.0).abs() < 0.03 {
            break;
        }
        sigma *= ratio.sqrt().clamp(0.25, 4.0);
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ou_statistics_match_stationary_law() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let sigma = 2.0;
        let corr = 1.0;
        let mut ou = OuProcess::stationary(sigma, corr, false, 1, &mut rng);
        let dt = 0.05;
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut lag_prod = 0.0;
        let mut prev = ou.values()[0];
        for _ in 0..n {
            ou.step(dt, &mut rng);
            let x = ou.values()[0];
            sum += x;
            sum_sq += x * x;
            lag_prod += x * prev;
            prev = x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let lag1 = lag_prod / n as f64 / var;
        assert!(mean.abs() < 0.05 * sigma, "mean {mean}");
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma, "var {var}");
        let expected_lag = (-dt / corr as f64).exp();
        assert!((lag1 - expected_lag).abs() < 0.02, "lag1 {lag1}");
    }

    #[test]
    fn common_mode_process_is_identical_across_sites() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ou = OuProcess::stationary(1.0, 1.0, true, 3, &mut rng);
        for _ in 0..10 {
            ou.step(0.1, &mut rng);
            let v = ou.values();
            assert_eq!(v[0], v[1]);
            assert_eq!(v[0], v[2]);
        }
    }

    #[test]
    fn noise_model_validation() {
        let mut m = NoiseModel::off(1);
        assert!(m.validate().is_ok());
        m.dephasing_sigma = 100.0;
        m.dephasing_corr_time = 0.0;
        assert!(m.validate().is_err());
        m.dephasing_corr_time = 1e-5;
        assert!(m.validate().is_ok());
        m.heating_rate = -1.0;
        assert!(m.validate().is_err());
    }
}
