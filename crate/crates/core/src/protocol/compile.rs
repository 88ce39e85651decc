//! Sequence validation (adiabaticity windows, control grid) and compilation
//! into a timeline.
//!
//! A ramp of duration t must sit inside the adiabaticity window: long
//! against the oscillation period (t > c_slow/ω, or local excitation
//! changes) yet short against the inverse transfer rate (t < c_fast/Ω_leak,
//! or excitation leaks across sites while tuning). The leak rate of a pair
//! is Ω²/Ω_det = Ω√κ, so parked (far-detuned) neighbours do not forbid
//! slow ramps.

use super::{
    Action, CompiledTimeline, CoolEvent, DetectionEvent, Impulse, ParamTrack, ProtocolError,
    Segment, Sequence,
};
use crate::lattice::{normalize_angle, pair_coupling_rate, LatticeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ViolationKind {
    /// Ramp too fast against the oscillation period.
    NonAdiabaticRamp,
    /// Ramp so slow that inter-site transfer acts while tuning.
    CouplingLeak,
    /// Frequency target off the control grid.
    OffGridFrequency,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub segment: usize,
    pub kind: ViolationKind,
    pub message: String,
    pub blocking: bool,
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Lower-window factor: flag when t_ramp ≤ c_slow / ω.
    pub c_slow: f64,
    /// Upper-window factor: flag when t_ramp ≥ c_fast / Ω_leak.
    pub c_fast: f64,
    /// Check frequency targets against the control grid.
    pub enforce_grid: bool,
    /// Control grid pitch, rad/s.
    pub grid_step: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            c_slow: 10.0,
            c_fast: 0.5,
            enforce_grid: false,
            grid_step: std::f64::consts::TAU * 200.0,
        }
    }
}

/// Walk the sequence tracking the site parameters and flag every ramp that
/// violates the adiabaticity window (blocking) or the control grid
/// (warning). An empty list means the sequence is executable as planned.
pub fn validate(sequence: &Sequence, opts: &ValidationOptions) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut config = sequence.lattice.clone();
    for (k, segment) in sequence.segments.iter().enumerate() {
        match segment {
            Segment::RampFrequency { site, target, duration } => {
                let omega_min = config.sites[*site].mode_frequency.min(*target);
                check_window(&mut violations, k, *duration, omega_min, &[
                    leak_rate(&config),
                    {
                        let mut end = config.clone();
                        end.sites[*site].mode_frequency = *target;
                        leak_rate(&end)
                    },
                ], opts);
                if opts.enforce_grid {
                    let steps = target / opts.grid_step;
                    if (steps - steps.round()).abs() > 1e-6 {
                        violations.push(Violation {
                            segment: k,
                            kind: ViolationKind::OffGridFrequency,
                            message: format!(
                                "target {:.6} kHz is off the {:.1} Hz control grid",
                                target / std::f64::consts::TAU / 1e3,
                                opts.grid_step / std::f64::consts::TAU
                            ),
                            blocking: false,
                        });
                    }
                }
                config.sites[*site].mode_frequency = *target;
            }
            Segment::RampAngle { site, target, duration } => {
                let omega = config.sites[*site].mode_frequency;
                check_window(&mut violations, k, *duration, omega, &[
                    leak_rate(&config),
                    {
                        let mut end = config.clone();
                        end.sites[*site].mode_angle = normalize_angle(*target);
                        leak_rate(&end)
                    },
                ], opts);
                config.sites[*site].mode_angle = normalize_angle(*target);
            }
            _ => {}
        }
    }
    violations
}

fn check_window(
    violations: &mut Vec<Violation>,
    segment: usize,
    duration: f64,
    omega: f64,
    leak_rates: &[f64],
    opts: &ValidationOptions,
) {
    let lower = opts.c_slow / omega;
    if duration <= lower {
        violations.push(Violation {
            segment,
            kind: ViolationKind::NonAdiabaticRamp,
            message: format!(
                "ramp of {:.3} µs is not adiabatic against the {:.3} µs oscillation bound",
                duration * 1e6,
                lower * 1e6
            ),
            blocking: true,
        });
    }
    let leak = leak_rates.iter().cloned().fold(0.0f64, f64::max);
    if leak > 0.0 {
        let upper = opts.c_fast / leak;
        if duration >= upper {
            violations.push(Violation {
                segment,
                kind: ViolationKind::CouplingLeak,
                message: format!(
                    "ramp of {:.3} µs exceeds the {:.3} µs transfer-leak bound",
                    duration * 1e6,
                    upper * 1e6
                ),
                blocking: true,
            });
        }
    }
}

/// Fastest actual transfer rate among all pairs: Ω_ij²/√(Ω_ij² + δ_ij²).
fn leak_rate(config: &LatticeConfig) -> f64 {
    let n = config.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let Ok(rate) = pair_coupling_rate(config, i, j) else {
                continue;
            };
            let delta = config.sites[i].mode_frequency - config.sites[j].mode_frequency;
            let det = rate.hypot(delta);
            if det > 0.0 {
                worst = worst.max(rate * rate.abs() / det);
            }
        }
    }
    worst.abs()
}

/// Realize a sequence as parameter trajectories, impulses, and detection
/// timestamps. Fails when validation reports blocking violations.
pub fn compile(sequence: &Sequence) -> Result<CompiledTimeline, ProtocolError> {
    let violations = validate(sequence, &ValidationOptions::default());
    let blocking: Vec<&Violation> = violations.iter().filter(|v| v.blocking).collect();
    if !blocking.is_empty() {
        return Err(ProtocolError::InvalidSequence(
            blocking.len(),
            format!("segment {}: {}", blocking[0].segment, blocking[0].message),
        ));
    }

    let n = sequence.lattice.len();
    let mut frequency_tracks: Vec<ParamTrack> = sequence
        .lattice
        .sites
        .iter()
        .map(|s| ParamTrack::constant(s.mode_frequency))
        .collect();
    let mut angle_tracks: Vec<ParamTrack> = sequence
        .lattice
        .sites
        .iter()
        .map(|s| ParamTrack::constant(s.mode_angle))
        .collect();
    let mut impulses = Vec::new();
    let mut detections = Vec::new();
    let mut cools = Vec::new();
    let mut actions = Vec::new();
    let mut cursor = 0.0f64;

    for segment in &sequence.segments {
        match segment {
            Segment::Cool { targets } => {
                actions.push(Action::Cool(cools.len()));
                cools.push(CoolEvent {
                    time: cursor,
                    targets: targets.clone(),
                });
            }
            Segment::Excite { site, amplitude, phase } => {
                actions.push(Action::Excite(impulses.len()));
                impulses.push(Impulse {
                    time: cursor,
                    site: *site,
                    amplitude: *amplitude,
                    phase: *phase,
                });
            }
            Segment::RampFrequency { site, target, duration } => {
                frequency_tracks[*site].push_ramp(cursor, cursor + duration, *target);
                actions.push(Action::Evolve {
                    t0: cursor,
                    t1: cursor + duration,
                });
                cursor += duration;
            }
            Segment::RampAngle { site, target, duration } => {
                // unwrap the target next to the current value so the ramp
                // takes the short way around
                let current = angle_tracks[*site].final_value();
                let mut goal = normalize_angle(*target);
                while goal - current > std::f64::consts::PI {
                    goal -= std::f64::consts::TAU;
                }
                while current - goal > std::f64::consts::PI {
                    goal += std::f64::consts::TAU;
                }
                angle_tracks[*site].push_ramp(cursor, cursor + duration, goal);
                actions.push(Action::Evolve {
                    t0: cursor,
                    t1: cursor + duration,
                });
                cursor += duration;
            }
            Segment::Hold { duration } => {
                actions.push(Action::Evolve {
                    t0: cursor,
                    t1: cursor + duration,
                });
                cursor += duration;
            }
            Segment::Detect { sites } => {
                actions.push(Action::Detect(detections.len()));
                detections.push(DetectionEvent {
                    time: cursor,
                    sites: sites.clone(),
                });
            }
        }
    }

    let total = cursor;
    for track in frequency_tracks.iter_mut().chain(angle_tracks.iter_mut()) {
        track.close(total);
    }
    debug_assert_eq!(frequency_tracks.len(), n);

    Ok(CompiledTimeline {
        lattice: sequence.lattice.clone(),
        reference_frequency: sequence.lattice.sites[0].mode_frequency,
        frequency_tracks,
        angle_tracks,
        impulses,
        detections,
        cools,
        actions,
        total_duration: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseModel;
    use crate::lattice::{IonSpecies, LatticeConfig, TrapSite};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::TAU;

    /// Pair tuned so the resonant exchange rate is ≈ 2π·2 kHz at 40 µm.
    fn coupled_pair(delta: f64) -> LatticeConfig {
        let (w0, w1) = crate::lattice::pair_frequencies_for_rate(
            IonSpecies::magnesium_24(),
            40e-6,
            TAU * 2e3,
            delta,
        )
        .unwrap();
        LatticeConfig::new(
            IonSpecies::magnesium_24(),
            vec![
                TrapSite::new(0, [0.0, 0.0, 0.0], w0, 0.0).unwrap(),
                TrapSite::new(1, [40e-6, 0.0, 0.0], w1, 0.0).unwrap(),
            ],
        )
        .unwrap()
    }

    fn tune_sequence(lattice: LatticeConfig, t_tune: f64) -> Sequence {
        let target = lattice.sites[0].mode_frequency + TAU * 100e3;
        Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::RampFrequency {
                    site: 0,
                    target,
                    duration: t_tune,
                },
                Segment::Detect { sites: vec![0, 1] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap()
    }

    #[test]
    fn reference_window_is_clean() {
        // 10 µs sits well inside [1/ω ≈ 40 ns, 1/Ω ≈ 80 µs]·factors
        let seq = tune_sequence(coupled_pair(0.0), 10e-6);
        let violations = validate(&seq, &ValidationOptions::default());
        assert!(violations.is_empty(), "unexpected: {violations:?}");
    }

    #[test]
    fn too_fast_ramp_flagged_non_adiabatic() {
        let seq = tune_sequence(coupled_pair(0.0), 10e-9);
        let violations = validate(&seq, &ValidationOptions::default());
        assert!(violations
            .iter()
            .any(|v| v.kind == ViolationKind::NonAdiabaticRamp && v.blocking));
        assert!(compile(&seq).is_err());
    }

    #[test]
    fn too_slow_ramp_flagged_as_leak() {
        let seq = tune_sequence(coupled_pair(0.0), 1e-3);
        let violations = validate(&seq, &ValidationOptions::default());
        assert!(violations
            .iter()
            .any(|v| v.kind == ViolationKind::CouplingLeak && v.blocking));
    }

    #[test]
    fn parked_pair_permits_slow_angle_ramps() {
        // at 100 kHz detuning the transfer rate collapses, so a 100 µs
        // rotation is fine
        let lattice = coupled_pair(TAU * 100e3);
        let seq = Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::RampAngle {
                    site: 0,
                    target: 1.0,
                    duration: 100e-6,
                },
                Segment::Detect { sites: vec![0] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap();
        let violations = validate(&seq, &ValidationOptions::default());
        assert!(violations.is_empty(), "unexpected: {violations:?}");
    }

    #[test]
    fn off_grid_target_warns_when_enforced() {
        let lattice = coupled_pair(0.0);
        let target = lattice.sites[0].mode_frequency + TAU * 100.05e3; // off 0.2 kHz grid
        let seq = Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::RampFrequency {
                    site: 0,
                    target,
                    duration: 10e-6,
                },
                Segment::Detect { sites: vec![0] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap();
        let opts = ValidationOptions {
            enforce_grid: true,
            ..Default::default()
        };
        let violations = validate(&seq, &opts);
        let grid: Vec<&Violation> = violations
            .iter()
            .filter(|v| v.kind == ViolationKind::OffGridFrequency)
            .collect();
        assert_eq!(grid.len(), 1);
        assert!(!grid[0].blocking);
        // warnings do not block compilation
        assert!(compile(&seq).is_ok());
    }

    #[test]
    fn cool_detect_compiles_to_constant_trajectories() {
        let lattice = coupled_pair(0.0);
        let omega0 = lattice.sites[0].mode_frequency;
        let seq = Sequence::new(
            vec![
                Segment::Cool { targets: vec![5.0, 5.0] },
                Segment::Detect { sites: vec![0, 1] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap();
        let timeline = compile(&seq).unwrap();
        assert_eq!(timeline.total_duration(), 0.0);
        assert_eq!(timeline.detections().len(), 1);
        assert_abs_diff_eq!(timeline.omega(0, 0.0), omega0);
    }

    #[test]
    fn compiled_trajectories_are_continuous() {
        // stay parked throughout: retune by 50 kHz (still decoupled) and
        // rotate while decoupled
        let lattice = coupled_pair(TAU * 100e3);
        let w_mid = lattice.sites[0].mode_frequency + TAU * 50e3;
        let seq = Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::RampFrequency { site: 0, target: w_mid, duration: 10e-6 },
                Segment::Hold { duration: 100e-6 },
                Segment::RampAngle { site: 0, target: 0.6, duration: 100e-6 },
                Segment::Hold { duration: 50e-6 },
                Segment::Detect { sites: vec![0, 1] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap();
        let timeline = compile(&seq).unwrap();
        let total = timeline.total_duration();
        assert_relative_eq!(total, 260e-6, max_relative = 1e-12);
        // max jump between adjacent samples bounded by peak slope × step:
        // smoothstep peak slope is 1.5·Δ/T_ramp
        let steps = 2600;
        let dt = total / steps as f64;
        for site in 0..2 {
            for k in 0..steps {
                let a = timeline.omega(site, k as f64 * dt);
                let b = timeline.omega(site, (k + 1) as f64 * dt);
                let bound = 1.5 * (TAU * 50e3) / 10e-6 * dt * 1.0001;
                assert!((b - a).abs() <= bound, "jump {} at {}", (b - a).abs(), k);
                let aa = timeline.angle(site, k as f64 * dt);
                let ab = timeline.angle(site, (k + 1) as f64 * dt);
                let abound = 1.5 * 0.6 / 100e-6 * dt * 1.0001;
                assert!((ab - aa).abs() <= abound);
            }
        }
        // ramp flagged exactly where it happens
        assert!(timeline.is_ramping(5e-6, 8e-6));
        assert!(!timeline.is_ramping(50e-6, 100e-6));
    }
}
