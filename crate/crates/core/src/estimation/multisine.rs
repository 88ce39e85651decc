//! Per-site damped sinusoids with an optionally shared decay constant.
//!
//! Interference among simultaneously coupled sites shows up as one
//! dominant oscillation per site with its own frequency, peak-to-peak
//! amplitude and phase; the contrast decay is shared across sites by
//! default.

use nalgebra::DMatrix;

use super::optimize::{minimize, Bounds, MinimizeOptions};
use super::{periodogram_peak, EstimationError, TimeSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// One decay constant for every site.
    Shared,
    /// Each site fits its own decay constant.
    Independent,
}

/// One site's fitted oscillation: y(t) = offset + (pp/2)·cos(ωt + φ)·e^{−t/τ}.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SineComponent {
    pub site: usize,
    /// Angular frequency ω, rad/s (0 when unidentifiable).
    pub frequency: f64,
    pub frequency_sigma: f64,
    /// Peak-to-peak amplitude, quanta.
    pub peak_to_peak: f64,
    pub peak_to_peak_sigma: f64,
    /// Phase at t = 0, rad.
    pub phase: f64,
    pub phase_sigma: f64,
    pub offset: f64,
    /// Decay constant seen by this site (the shared value in shared mode).
    pub decay_time: f64,
    /// False when the series carries no resolvable oscillation; frequency
    /// and phase are then meaningless.
    pub identifiable: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MultisineFit {
    pub components: Vec<SineComponent>,
    /// (value, sigma) of the shared decay constant, when shared.
    pub shared_decay: Option<(f64, f64)>,
    pub reduced_chi_square: f64,
}

/// Shared-decay fit of one damped sinusoid per series.
pub fn fit_multisine(
    series: &[TimeSeries],
    n_components: usize,
) -> Result<MultisineFit, EstimationError> {
    fit_multisine_with(series, n_components, DecayMode::Shared)
}

struct SeriesInfo {
    index: usize,
    omega0: f64,
    phase0: f64,
    p2p: f64,
    mean: f64,
    identifiable: bool,
}

/// Block layout inside the parameter vector for fitted series
/// (shared mode: global τ at slot 0, then [offset, pp, ω, φ] per series;
/// independent mode: [offset, pp, ω, φ, τ] per series).
fn block_base(mode: DecayMode, fitted_pos: usize) -> usize {
    match mode {
        DecayMode::Shared => 1 + 4 * fitted_pos,
        DecayMode::Independent => 5 * fitted_pos,
    }
}

fn block_len(mode: DecayMode) -> usize {
    match mode {
        DecayMode::Shared => 4,
        DecayMode::Independent => 5,
    }
}

pub fn fit_multisine_with(
    series: &[TimeSeries],
    n_components: usize,
    mode: DecayMode,
) -> Result<MultisineFit, EstimationError> {
    if series.is_empty() {
        return Err(EstimationError::InvalidSeries("no series given".into()));
    }
    if n_components != series.len() {
        return Err(EstimationError::InvalidSeries(format!(
            "{n_components} components requested for {} series; one oscillation is fit per site",
            series.len()
        )));
    }

    let mut infos = Vec::with_capacity(series.len());
    for (index, s) in series.iter().enumerate() {
        if s.len() < 8 {
            return Err(EstimationError::UnderSampled(format!(
                "series {index} has {} samples, need at least 8",
                s.len()
            )));
        }
        let vals: Vec<f64> = s.samples().iter().map(|x| x.nbar).collect();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = vals.iter().cloned().fold(f64::MAX, f64::min);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let p2p = max - min;
        let mut sems: Vec<f64> = s.samples().iter().map(|x| x.sem).filter(|&x| x > 0.0).collect();
        sems.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let noise_floor = sems.get(sems.len() / 2).copied().unwrap_or(0.0);
        let (omega0, contrast) = periodogram_peak(s);
        let identifiable = p2p > (4.0 * noise_floor).max(1e-9 * mean.abs().max(1.0))
            && omega0 > 0.0
            && contrast > 4.0;
        let phase0 = if identifiable {
            initial_phase(s, omega0, mean)
        } else {
            0.0
        };
        infos.push(SeriesInfo {
            index,
            omega0,
            phase0,
            p2p,
            mean,
            identifiable,
        });
    }

    let fitted: Vec<&SeriesInfo> = infos.iter().filter(|i| i.identifiable).collect();
    if fitted.is_empty() {
        // nothing oscillates: constants only
        let components = infos
            .iter()
            .map(|info| SineComponent {
                site: series[info.index].site,
                frequency: 0.0,
                frequency_sigma: f64::INFINITY,
                peak_to_peak: 0.0,
                peak_to_peak_sigma: f64::INFINITY,
                phase: 0.0,
                phase_sigma: f64::INFINITY,
                offset: info.mean,
                decay_time: f64::INFINITY,
                identifiable: false,
            })
            .collect();
        return Ok(MultisineFit {
            components,
            shared_decay: None,
            reduced_chi_square: 0.0,
        });
    }

    let span = fitted
        .iter()
        .map(|i| series[i.index].span())
        .fold(0.0f64, f64::max);
    let n_params = match mode {
        DecayMode::Shared => 1 + 4 * fitted.len(),
        DecayMode::Independent => 5 * fitted.len(),
    };

    let weights: Vec<Vec<f64>> = fitted.iter().map(|i| series[i.index].weights()).collect();

    let residuals = |p: &[f64]| -> Option<Vec<f64>> {
        let mut out = Vec::new();
        for (pos, info) in fitted.iter().enumerate() {
            let base = block_base(mode, pos);
            let tau = match mode {
                DecayMode::Shared => p[0],
                DecayMode::Independent => p[base + 4],
            };
            if tau <= 0.0 {
                return None;
            }
            let (c, pp, omega, phase) = (p[base], p[base + 1], p[base + 2], p[base + 3]);
            for (s, w) in series[info.index].samples().iter().zip(&weights[pos]) {
                let y = c + 0.5 * pp * (omega * s.time + phase).cos() * (-s.time / tau).exp();
                out.push((y - s.nbar) * w);
            }
        }
        out.iter().all(|r| r.is_finite()).then_some(out)
    };

    let jacobian = |p: &[f64]| -> Option<DMatrix<f64>> {
        let m: usize = fitted.iter().map(|i| series[i.index].len()).sum();
        let mut jac = DMatrix::zeros(m, n_params);
        let mut row = 0;
        for (pos, info) in fitted.iter().enumerate() {
            let base = block_base(mode, pos);
            let tau = match mode {
                DecayMode::Shared => p[0],
                DecayMode::Independent => p[base + 4],
            };
            if tau <= 0.0 {
                return None;
            }
            let (_, pp, omega, phase) = (p[base], p[base + 1], p[base + 2], p[base + 3]);
            for (s, w) in series[info.index].samples().iter().zip(&weights[pos]) {
                let t = s.time;
                let decay = (-t / tau).exp();
                let arg = omega * t + phase;
                let (sin, cos) = arg.sin_cos();
                jac[(row, base)] = *w;
                jac[(row, base + 1)] = 0.5 * cos * decay * w;
                jac[(row, base + 2)] = -0.5 * pp * t * sin * decay * w;
                jac[(row, base + 3)] = -0.5 * pp * sin * decay * w;
                let dtau = 0.5 * pp * cos * decay * t / (tau * tau) * w;
                match mode {
                    DecayMode::Shared => jac[(row, 0)] = dtau,
                    DecayMode::Independent => jac[(row, base + 4)] = dtau,
                }
                row += 1;
            }
        }
        Some(jac)
    };

    // bounds and scales
    let mut lower = vec![0.0; n_params];
    let mut upper = vec![0.0; n_params];
    let mut scale = vec![1.0; n_params];
    if mode == DecayMode::Shared {
        lower[0] = span / 50.0;
        upper[0] = span * 1e4;
        scale[0] = span;
    }
    for (pos, info) in fitted.iter().enumerate() {
        let base = block_base(mode, pos);
        let amp_scale = info.p2p.max(1e-12);
        lower[base] = info.mean - 2.0 * amp_scale;
        upper[base] = info.mean + 2.0 * amp_scale;
        scale[base] = info.mean.abs().max(amp_scale);
        lower[base + 1] = 0.0;
        upper[base + 1] = 10.0 * amp_scale;
        scale[base + 1] = amp_scale;
        lower[base + 2] = 0.02 * info.omega0;
        upper[base + 2] = 50.0 * info.omega0;
        scale[base + 2] = info.omega0;
        lower[base + 3] = -std::f64::consts::PI;
        upper[base + 3] = std::f64::consts::PI;
        scale[base + 3] = 1.0;
        if mode == DecayMode::Independent {
            lower[base + 4] = span / 50.0;
            upper[base + 4] = span * 1e4;
            scale[base + 4] = span;
        }
    }
    let bounds = Bounds { lower, upper };
    let opts = MinimizeOptions {
        typical_scale: scale,
        ..Default::default()
    };

    let mut best: Option<super::Optimum> = None;
    for &factor in &[1.0, 0.6, 0.8, 1.3, 1.8] {
        let mut start = vec![0.0; n_params];
        if mode == DecayMode::Shared {
            start[0] = span;
        }
        for (pos, info) in fitted.iter().enumerate() {
            let base = block_base(mode, pos);
            start[base] = info.mean;
            start[base + 1] = info.p2p;
            start[base + 2] = info.omega0 * factor;
            start[base + 3] = info.phase0;
            if mode == DecayMode::Independent {
                start[base + 4] = span;
            }
        }
        if let Ok(opt) = minimize(&residuals, Some(&jacobian), &start, Some(&bounds), &opts) {
            let better = best.as_ref().map(|b| opt.cost < b.cost).unwrap_or(true);
            if better {
                best = Some(opt);
            }
        }
    }
    let opt = best.ok_or(EstimationError::NonConvergence {
        best: vec![],
        cost: f64::INFINITY,
    })?;
    let p = &opt.point;

    let m: usize = fitted.iter().map(|i| series[i.index].len()).sum();
    let dof = (m.saturating_sub(n_params)).max(1) as f64;
    let chi2_red = opt.cost / dof;
    let sigmas = {
        let jac = jacobian(p).ok_or_else(|| {
            EstimationError::NumericalFailure("jacobian failed at optimum".into())
        })?;
        let jtj = jac.transpose() * &jac;
        match jtj.try_inverse() {
            Some(inv) => (0..n_params)
                .map(|j| {
                    let v = inv[(j, j)] * chi2_red.max(f64::MIN_POSITIVE);
                    if v >= 0.0 {
                        v.sqrt()
                    } else {
                        f64::INFINITY
                    }
                })
                .collect::<Vec<f64>>(),
            None => vec![f64::INFINITY; n_params],
        }
    };

    let shared_decay = match mode {
        DecayMode::Shared => Some((p[0], sigmas[0])),
        DecayMode::Independent => None,
    };

    let mut components = Vec::with_capacity(series.len());
    let mut fitted_pos = 0usize;
    for info in &infos {
        if info.identifiable {
            let base = block_base(mode, fitted_pos);
            let tau = match mode {
                DecayMode::Shared => p[0],
                DecayMode::Independent => p[base + 4],
            };
            components.push(SineComponent {
                site: series[info.index].site,
                frequency: p[base + 2],
                frequency_sigma: sigmas[base + 2],
                peak_to_peak: p[base + 1],
                peak_to_peak_sigma: sigmas[base + 1],
                phase: crate::lattice::normalize_angle(p[base + 3]),
                phase_sigma: sigmas[base + 3],
                offset: p[base],
                decay_time: tau,
                identifiable: true,
            });
            fitted_pos += 1;
        } else {
            components.push(SineComponent {
                site: series[info.index].site,
                frequency: 0.0,
                frequency_sigma: f64::INFINITY,
                peak_to_peak: 0.0,
                peak_to_peak_sigma: f64::INFINITY,
                phase: 0.0,
                phase_sigma: f64::INFINITY,
                offset: info.mean,
                decay_time: f64::INFINITY,
                identifiable: false,
            });
        }
    }
    let _ = block_len(mode);

    Ok(MultisineFit {
        components,
        shared_decay,
        reduced_chi_square: chi2_red,
    })
}

/// Phase estimate from the discrete spectrum at the peak frequency.
fn initial_phase(series: &TimeSeries, omega: f64, mean: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for s in series.samples() {
        let y = s.nbar - mean;
        re += y * (omega * s.time).cos();
        im += y * (omega * s.time).sin();
    }
    // y ≈ (pp/2)cos(ωt+φ): Σ y e^{−iωt} ≈ (pp N/4) e^{iφ}
    (-im).atan2(re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn damped_sine(
        site: usize,
        offset: f64,
        pp: f64,
        freq_hz: f64,
        phase: f64,
        tau: f64,
        times: &[f64],
        sem: f64,
    ) -> TimeSeries {
        TimeSeries::new(
            site,
            times
                .iter()
                .map(|&t| super::super::Sample {
                    time: t,
                    nbar: offset
                        + 0.5 * pp * (TAU * freq_hz * t + phase).cos() * (-t / tau).exp(),
                    sem,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_site_recovery_at_reference_values() {
        let times: Vec<f64> = (0..81).map(|k| k as f64 * 15e-6).collect();
        let freqs = [2.09e3, 1.80e3, 2.02e3];
        let pps = [470.0, 381.0, 447.0];
        let phases = [0.3, -1.2, 2.0];
        let tau = 500e-6;
        let series: Vec<TimeSeries> = (0..3)
            .map(|i| damped_sine(i, 600.0, pps[i], freqs[i], phases[i], tau, &times, 0.0))
            .collect();
        let fit = fit_multisine(&series, 3).unwrap();
        for (i, comp) in fit.components.iter().enumerate() {
            assert!(comp.identifiable);
            assert_relative_eq!(comp.frequency / TAU, freqs[i], max_relative = 1e-6);
            assert_relative_eq!(comp.peak_to_peak, pps[i], max_relative = 1e-6);
            let dphi = crate::lattice::normalize_angle(comp.phase - phases[i]);
            assert!(dphi.abs() < 1e-5, "phase mismatch {dphi}");
        }
        let (tau_fit, _) = fit.shared_decay.unwrap();
        assert_relative_eq!(tau_fit, tau, max_relative = 1e-5);
    }

    #[test]
    fn constant_series_flagged_unidentifiable() {
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 1e-5).collect();
        let flat = TimeSeries::from_values(0, &times, &vec![42.0; times.len()]).unwrap();
        let osc = damped_sine(1, 100.0, 50.0, 2e3, 0.0, 1e-3, &times, 0.0);
        let fit = fit_multisine(&[flat, osc], 2).unwrap();
        assert!(!fit.components[0].identifiable);
        assert_eq!(fit.components[0].peak_to_peak, 0.0);
        assert_relative_eq!(fit.components[0].offset, 42.0, max_relative = 1e-12);
        assert!(fit.components[1].identifiable);
    }

    #[test]
    fn single_series_matches_exchange_fit() {
        let times: Vec<f64> = (0..61).map(|k| k as f64 * 20e-6).collect();
        let n_tot = 2202.0;
        let (omega, kappa, tau) = (TAU * 1.92e3, 0.46, 800e-6);
        let recv: Vec<f64> = times
            .iter()
            .map(|&t| n_tot * kappa * 0.5 * (1.0 - (omega * t).cos() * (-t / tau).exp()))
            .collect();
        let donor: Vec<f64> = recv.iter().map(|r| n_tot - r).collect();
        let s_recv = TimeSeries::from_values(1, &times, &recv).unwrap();
        let s_donor = TimeSeries::from_values(0, &times, &donor).unwrap();
        let exchange = super::super::fit_exchange(&s_donor, &s_recv, n_tot).unwrap();
        let multi = fit_multisine(std::slice::from_ref(&s_recv), 1).unwrap();
        let comp = &multi.components[0];
        assert_relative_eq!(comp.frequency, exchange.rate, max_relative = 1e-6);
        let (tau_fit, _) = multi.shared_decay.unwrap();
        assert_relative_eq!(tau_fit, exchange.dephasing_time, max_relative = 1e-4);
    }

    #[test]
    fn component_count_must_match_series() {
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 1e-5).collect();
        let s = damped_sine(0, 1.0, 1.0, 2e3, 0.0, 1.0, &times, 0.0);
        assert!(fit_multisine(&[s], 3).is_err());
    }

    #[test]
    fn independent_decay_mode_fits_per_site_decays() {
        let times: Vec<f64> = (0..81).map(|k| k as f64 * 15e-6).collect();
        let a = damped_sine(0, 500.0, 400.0, 2.0e3, 0.0, 300e-6, &times, 0.0);
        let b = damped_sine(1, 500.0, 400.0, 2.2e3, 0.5, 900e-6, &times, 0.0);
        let fit = fit_multisine_with(&[a, b], 2, DecayMode::Independent).unwrap();
        assert!(fit.shared_decay.is_none());
        assert_relative_eq!(fit.components[0].decay_time, 300e-6, max_relative = 1e-4);
        assert_relative_eq!(fit.components[1].decay_time, 900e-6, max_relative = 1e-4);
    }
}
