//! Fitting and statistics for exchange time series.
//!
//! The exchange model assumes constant total excitation with an exponential
//! loss of oscillation contrast:
//!
//! ```text
//! n̄_recv(t) = offset + A·(1 − cos(Ω t + φ)·e^{−t/τ})/2
//! n̄_donor(t) = n_tot − n̄_recv(t)
//! ```
//!
//! Both series are fit jointly (weighted by inverse variance), and the
//! exchange efficiency is κ = A / n_tot. Parameter uncertainties come from
//! the curvature of the weighted objective at the optimum, scaled by the
//! reduced chi-square.

mod exchange;
mod multisine;
mod optimize;

pub use exchange::fit_exchange;
pub use multisine::{fit_multisine, fit_multisine_with, DecayMode, MultisineFit, SineComponent};
pub use optimize::{minimize, nelder_mead, Bounds, MinimizeOptions, Optimum};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("optimizer did not converge (best cost {cost:.6e})")]
    NonConvergence { best: Vec<f64>, cost: f64 },
    #[error("series is under-sampled: {0}")]
    UnderSampled(String),
    #[error("invalid time series: {0}")]
    InvalidSeries(String),
    #[error("series timestamps do not match at index {index}")]
    TimestampMismatch { index: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

/// One detection point: time (s), mean population (quanta), standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub nbar: f64,
    pub sem: f64,
}

/// Site id used by [`total_excitation_residuals`] for its output series.
pub const TOTAL_EXCITATION_SITE: usize = usize::MAX;

/// Population time series of one site; times strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub site: usize,
    samples: Vec<Sample>,
}

impl TimeSeries {
    pub fn new(site: usize, samples: Vec<Sample>) -> Result<Self, EstimationError> {
        if samples.is_empty() {
            return Err(EstimationError::InvalidSeries("series is empty".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(EstimationError::InvalidSeries(format!(
                    "times must be strictly increasing ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        if samples
            .iter()
            .any(|s| !s.time.is_finite() || !s.nbar.is_finite() || !(s.sem >= 0.0))
        {
            return Err(EstimationError::InvalidSeries(
                "samples must be finite with non-negative sem".into(),
            ));
        }
        Ok(Self { site, samples })
    }

    pub fn from_values(site: usize, times: &[f64], values: &[f64]) -> Result<Self, EstimationError> {
        if times.len() != values.len() {
            return Err(EstimationError::InvalidSeries(
                "times and values differ in length".into(),
            ));
        }
        Self::new(
            site,
            times
                .iter()
                .zip(values)
                .map(|(&t, &n)| Sample {
                    time: t,
                    nbar: n,
                    sem: 0.0,
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.time)
    }

    pub fn span(&self) -> f64 {
        self.samples.last().unwrap().time - self.samples[0].time
    }

    /// Inverse-sem fitting weights; zero-sem samples take the series'
    /// median positive sem, and a fully noiseless series gets unit weights.
    pub(crate) fn weights(&self) -> Vec<f64> {
        let mut positive: Vec<f64> = self
            .samples
            .iter()
            .map(|s| s.sem)
            .filter(|&s| s > 0.0)
            .collect();
        if positive.is_empty() {
            return vec![1.0; self.samples.len()];
        }
        positive.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = positive[positive.len() / 2];
        self.samples
            .iter()
            .map(|s| 1.0 / if s.sem > 0.0 { s.sem } else { median })
            .collect()
    }
}

/// Damped-sinusoid exchange fit: rate, efficiency, dephasing time, phase,
/// offset, amplitude, their standard errors, and the reduced chi-square.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Fitted exchange rate Ω, rad/s.
    pub rate: f64,
    /// Exchange efficiency κ = amplitude / n_tot, in [0, 1].
    pub efficiency: f64,
    /// Exponential contrast decay time τ, s.
    pub dephasing_time: f64,
    /// Oscillation phase at t = 0, rad.
    pub phase: f64,
    /// Receiver offset at zero contrast, quanta.
    pub offset: f64,
    /// Full exchange amplitude A, quanta.
    pub amplitude: f64,
    pub uncertainty: FitUncertainty,
    pub reduced_chi_square: f64,
}

/// 1σ parameter uncertainties from the local curvature.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitUncertainty {
    pub rate: f64,
    pub efficiency: f64,
    pub dephasing_time: f64,
    pub phase: f64,
    pub offset: f64,
    pub amplitude: f64,
}

/// Deviation of the summed excitation from its time average:
/// Δn̄_tot(t) = Σ_i n̄_i(t) − ⟨Σ_i n̄_i⟩_t, with sem propagated in
/// quadrature. All series must share their timestamps.
pub fn total_excitation_residuals(series: &[TimeSeries]) -> Result<TimeSeries, EstimationError> {
    if series.is_empty() {
        return Err(EstimationError::InvalidSeries("no series given".into()));
    }
    let reference = &series[0];
    let len = reference.len();
    for s in series.iter().skip(1) {
        if s.len() != len {
            return Err(EstimationError::TimestampMismatch { index: s.len().min(len) });
        }
        for (idx, (a, b)) in reference.samples().iter().zip(s.samples()).enumerate() {
            let scale = a.time.abs().max(b.time.abs()).max(1e-30);
            if (a.time - b.time).abs() > 1e-9 * scale {
                return Err(EstimationError::TimestampMismatch { index: idx });
            }
        }
    }
    let totals: Vec<f64> = (0..len)
        .map(|k| series.iter().map(|s| s.samples()[k].nbar).sum())
        .collect();
    let sems: Vec<f64> = (0..len)
        .map(|k| {
            series
                .iter()
                .map(|s| s.samples()[k].sem.powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / len as f64;
    TimeSeries::new(
        TOTAL_EXCITATION_SITE,
        reference
            .samples()
            .iter()
            .zip(totals.iter().zip(&sems))
            .map(|(s, (&tot, &sem))| Sample {
                time: s.time,
                nbar: tot - mean,
                sem,
            })
            .collect(),
    )
}

/// Coarse spectral peak of a detrended series, rad/s, for fit
/// initialization. Returns the peak angular frequency and its power
/// relative to the spectrum median.
pub(crate) fn periodogram_peak(series: &TimeSeries) -> (f64, f64) {
    let n = series.len();
    let span = series.span();
    if span <= 0.0 || n < 4 {
        return (0.0, 0.0);
    }
    let mean = series.samples().iter().map(|s| s.nbar).sum::<f64>() / n as f64;
    let f_min = 0.5 / span;
    let f_max = 0.5 * n as f64 / span;
    let grid = 512usize;
    let mut best = (0.0, 0.0);
    let mut powers = Vec::with_capacity(grid);
    for k in 0..grid {
        let f = f_min * (f_max / f_min).powf(k as f64 / (grid - 1) as f64);
        let omega = std::f64::consts::TAU * f;
        let (mut re, mut im) = (0.0, 0.0);
        for s in series.samples() {
            let y = s.nbar - mean;
            re += y * (omega * s.time).cos();
            im += y * (omega * s.time).sin();
        }
        let power = re * re + im * im;
        powers.push(power);
        if power > best.1 {
            best = (omega, power);
        }
    }
    powers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = powers[powers.len() / 2].max(1e-300);
    (best.0, best.1 / median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn series_validation() {
        assert!(TimeSeries::from_values(0, &[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).is_ok());
        assert!(TimeSeries::from_values(0, &[0.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(TimeSeries::from_values(0, &[2.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(TimeSeries::new(
            0,
            vec![Sample {
                time: 0.0,
                nbar: 1.0,
                sem: -1.0
            }]
        )
        .is_err());
    }

    #[test]
    fn residuals_of_conserved_data_vanish() {
        let times: Vec<f64> = (0..10).map(|k| k as f64 * 1e-5).collect();
        let a: Vec<f64> = times.iter().map(|t| 50.0 + 10.0 * (1e4 * t).sin()).collect();
        let b: Vec<f64> = a.iter().map(|x| 100.0 - x).collect();
        let s0 = TimeSeries::from_values(0, &times, &a).unwrap();
        let s1 = TimeSeries::from_values(1, &times, &b).unwrap();
        let res = total_excitation_residuals(&[s0, s1]).unwrap();
        for s in res.samples() {
            assert_abs_diff_eq!(s.nbar, 0.0, epsilon = 1e-9);
        }
        assert_eq!(res.site, TOTAL_EXCITATION_SITE);
    }

    #[test]
    fn residuals_of_heated_data_form_centred_line() {
        let times: Vec<f64> = (0..11).map(|k| k as f64 * 1e-4).collect();
        let rate = 3e4; // quanta/s
        let a: Vec<f64> = times.iter().map(|t| 100.0 + rate * t).collect();
        let b = vec![50.0; times.len()];
        let s0 = TimeSeries::from_values(0, &times, &a).unwrap();
        let s1 = TimeSeries::from_values(1, &times, &b).unwrap();
        let res = total_excitation_residuals(&[s0, s1]).unwrap();
        let mid = times[times.len() / 2];
        for (t, s) in times.iter().zip(res.samples()) {
            assert_abs_diff_eq!(s.nbar, rate * (t - mid), epsilon = 1e-9);
        }
    }

    #[test]
    fn residuals_reject_mismatched_timestamps() {
        let s0 = TimeSeries::from_values(0, &[0.0, 1.0], &[1.0, 2.0]).unwrap();
        let s1 = TimeSeries::from_values(1, &[0.0, 1.5], &[1.0, 2.0]).unwrap();
        assert!(matches!(
            total_excitation_residuals(&[s0, s1]),
            Err(EstimationError::TimestampMismatch { .. })
        ));
    }

    #[test]
    fn residual_sem_propagates_in_quadrature() {
        let mk = |site, sem| {
            TimeSeries::new(
                site,
                vec![
                    Sample {
                        time: 0.0,
                        nbar: 1.0,
                        sem,
                    },
                    Sample {
                        time: 1.0,
                        nbar: 2.0,
                        sem,
                    },
                ],
            )
            .unwrap()
        };
        let res = total_excitation_residuals(&[mk(0, 3.0), mk(1, 4.0)]).unwrap();
        assert_relative_eq!(res.samples()[0].sem, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn periodogram_finds_dominant_frequency() {
        let omega = std::f64::consts::TAU * 1.9e3;
        let times: Vec<f64> = (0..61).map(|k| k as f64 * 20e-6).collect();
        let vals: Vec<f64> = times.iter().map(|&t| 3.0 + (omega * t).cos()).collect();
        let series = TimeSeries::from_values(0, &times, &vals).unwrap();
        let (peak, contrast) = periodogram_peak(&series);
        assert_relative_eq!(peak, omega, max_relative = 0.05);
        assert!(contrast > 10.0);
    }
}
