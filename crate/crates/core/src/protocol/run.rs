//! Timeline execution: repetitions through either engine, with detection
//! statistics aggregated across repetitions.
//!
//! Repetitions are independent and run in parallel; each derives its own
//! noise and detection RNG streams from the sequence seed, so results are
//! identical for any thread count and merge order.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{compile, Action, CompiledTimeline, DetectionRecord, ProtocolError, Sequence};
use crate::dynamics::{
    self, phase_space_from_amplitude, ChiTerm, LatticeState, PhaseSpaceState, RwaInterval,
};
use crate::dynamics::rwa::NoiseDriver;
use crate::dynamics::full::{evolve_full_noisy, NoisePath};
use crate::ode::OdeOptions;

/// Which dynamics backend executes the timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Rotating-frame amplitude dynamics (fast, norm-conserving).
    Rwa,
    /// Full second-order equations of motion.
    Full,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub engine: Engine,
    pub repetitions: usize,
    /// Integrator options for the full engine.
    pub ode: OdeOptions,
    /// Sub-step ceiling for rotating-frame ramps, noise and Duffing terms.
    pub substep: f64,
}

impl RunOptions {
    pub fn new(engine: Engine, repetitions: usize) -> Self {
        Self {
            engine,
            repetitions,
            ode: OdeOptions::default(),
            substep: 1e-6,
        }
    }
}

/// Run with default options.
pub fn run(
    sequence: &Sequence,
    engine: Engine,
    repetitions: usize,
) -> Result<Vec<DetectionRecord>, ProtocolError> {
    run_with(sequence, &RunOptions::new(engine, repetitions))
}

/// Execute all repetitions and aggregate detection statistics.
pub fn run_with(
    sequence: &Sequence,
    opts: &RunOptions,
) -> Result<Vec<DetectionRecord>, ProtocolError> {
    if opts.repetitions == 0 {
        return Err(ProtocolError::Structure(
            "at least one repetition is required".into(),
        ));
    }
    sequence.noise.validate()?;
    let timeline = compile(sequence)?;

    let per_rep: Result<Vec<Vec<Vec<f64>>>, ProtocolError> = (0..opts.repetitions)
        .into_par_iter()
        .map(|rep| execute_repetition(&timeline, sequence, opts, rep as u64))
        .collect();
    let per_rep = per_rep?;

    // aggregate: records ordered by detection event, then listed site
    let mut records = Vec::new();
    for (event_idx, event) in timeline.detections().iter().enumerate() {
        for (pos, &site) in event.sites.iter().enumerate() {
            let readings: Vec<f64> = per_rep.iter().map(|r| r[event_idx][pos]).collect();
            let n = readings.len() as f64;
            let mean = readings.iter().sum::<f64>() / n;
            let sem = if readings.len() > 1 {
                let var = readings.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                sequence.detection.relative_sigma * mean.abs()
            };
            records.push(DetectionRecord {
                site,
                time: event.time,
                nbar: mean,
                sem,
                repetitions: readings.len(),
            });
        }
    }
    Ok(records)
}

fn noise_rng(seed: u64, rep: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x4000_0000_0000_0000 | rep);
    rng
}

fn detection_rng(seed: u64, rep: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0x8000_0000_0000_0000 | rep);
    rng
}

fn execute_repetition(
    timeline: &CompiledTimeline,
    sequence: &Sequence,
    opts: &RunOptions,
    rep: u64,
) -> Result<Vec<Vec<f64>>, ProtocolError> {
    match opts.engine {
        Engine::Rwa => execute_rwa(timeline, sequence, opts, rep),
        Engine::Full => execute_full(timeline, sequence, opts, rep),
    }
}

fn read_out(true_population: f64, sigma: f64, rng: &mut ChaCha12Rng) -> f64 {
    if sigma <= 0.0 {
        return true_population;
    }
    let z: f64 = rng.sample(StandardNormal);
    (true_population * (1.0 + sigma * z)).max(0.0)
}

/// Sub-step ceiling: resolve the noise correlation time and keep the
/// split-step commutator error negligible.
fn substep_for(sequence: &Sequence, opts: &RunOptions) -> f64 {
    let mut dt = opts.substep;
    if sequence.noise.dephasing_sigma > 0.0 {
        dt = dt.min(sequence.noise.dephasing_corr_time / 8.0);
    }
    dt
}

fn execute_rwa(
    timeline: &CompiledTimeline,
    sequence: &Sequence,
    opts: &RunOptions,
    rep: u64,
) -> Result<Vec<Vec<f64>>, ProtocolError> {
    let n = timeline.site_count();
    let chi: Vec<f64> = timeline
        .lattice()
        .sites
        .iter()
        .map(|s| s.anharmonic_coefficient)
        .collect();
    let chi_term = ChiTerm::per_site(chi);
    let mut driver = (!sequence.noise.is_quiet()).then(|| {
        NoiseDriver::from_model(&sequence.noise, n, noise_rng(sequence.noise.rng_seed, rep))
    });
    let mut detect_rng = detection_rng(sequence.noise.rng_seed, rep);
    let dt_max = substep_for(sequence, opts);

    let mut state = LatticeState::vacuum(n);
    let mut readings: Vec<Vec<f64>> = Vec::with_capacity(timeline.detections().len());

    for action in &timeline.actions {
        match action {
            Action::Cool(idx) => {
                let event = &timeline.cools()[*idx];
                for beta in state.amplitudes_mut() {
                    *beta = Complex64::new(0.0, 0.0);
                }
                state.baselines_mut().copy_from_slice(&event.targets);
            }
            Action::Excite(idx) => {
                let imp = &timeline.impulses()[*idx];
                state.amplitudes_mut()[imp.site] +=
                    Complex64::from_polar(imp.amplitude.sqrt(), imp.phase);
            }
            Action::Detect(idx) => {
                let event = &timeline.detections()[*idx];
                let row = event
                    .sites
                    .iter()
                    .map(|&site| {
                        read_out(
                            state.detected_population(site),
                            sequence.detection.relative_sigma,
                            &mut detect_rng,
                        )
                    })
                    .collect();
                readings.push(row);
            }
            Action::Evolve { t0, t1 } => {
                let span = t1 - t0;
                if span <= 0.0 {
                    continue;
                }
                if timeline.is_ramping(*t0, *t1) {
                    // rebuild the matrix at each sub-step midpoint
                    let steps = (span / dt_max.min(span / 16.0)).ceil() as usize;
                    let dt = span / steps as f64;
                    let mut interval = RwaInterval::constant(
                        timeline.matrix_at(*t0).map_err(|e| engine_err(*t0, e.into()))?,
                        Some(chi_term.clone()),
                    );
                    for k in 0..steps {
                        let mid = t0 + (k as f64 + 0.5) * dt;
                        interval.set_matrix(
                            timeline.matrix_at(mid).map_err(|e| engine_err(mid, e.into()))?,
                        );
                        interval.advance(&mut state, dt, dt, driver.as_mut(), None);
                    }
                } else {
                    let mut interval = RwaInterval::constant(
                        timeline.matrix_at(*t0).map_err(|e| engine_err(*t0, e.into()))?,
                        Some(chi_term.clone()),
                    );
                    interval.advance(&mut state, span, dt_max, driver.as_mut(), None);
                }
            }
        }
    }
    Ok(readings)
}

fn execute_full(
    timeline: &CompiledTimeline,
    sequence: &Sequence,
    opts: &RunOptions,
    rep: u64,
) -> Result<Vec<Vec<f64>>, ProtocolError> {
    let n = timeline.site_count();
    let mass = timeline.lattice().species.mass;
    let omega_ref = timeline.reference_frequency();
    let mut driver = (!sequence.noise.is_quiet()).then(|| {
        NoiseDriver::from_model(&sequence.noise, n, noise_rng(sequence.noise.rng_seed, rep))
    });
    let mut detect_rng = detection_rng(sequence.noise.rng_seed, rep);
    let dt_noise = substep_for(sequence, opts);

    let mut state = PhaseSpaceState::at_rest(n);
    let mut baselines = vec![0.0; n];
    let mut readings: Vec<Vec<f64>> = Vec::with_capacity(timeline.detections().len());

    for action in &timeline.actions {
        match action {
            Action::Cool(idx) => {
                let event = &timeline.cools()[*idx];
                state = PhaseSpaceState::at_rest(n);
                baselines.copy_from_slice(&event.targets);
            }
            Action::Excite(idx) => {
                let imp = &timeline.impulses()[*idx];
                // rotating-frame phase φ mapped to the lab frame at the
                // impulse timestamp
                let beta_lab = Complex64::from_polar(
                    imp.amplitude.sqrt(),
                    imp.phase - omega_ref * imp.time,
                );
                let omega = timeline.omega(imp.site, imp.time);
                let (du, dp) = phase_space_from_amplitude(beta_lab, mass, omega);
                state.displacements[imp.site] += du;
                state.momenta[imp.site] += dp;
            }
            Action::Detect(idx) => {
                let event = &timeline.detections()[*idx];
                let row = event
                    .sites
                    .iter()
                    .map(|&site| {
                        let n_true = dynamics::site_population(timeline, &state, site, event.time)
                            + baselines[site];
                        read_out(n_true, sequence.detection.relative_sigma, &mut detect_rng)
                    })
                    .collect();
                readings.push(row);
            }
            Action::Evolve { t0, t1 } => {
                let span = t1 - t0;
                if span <= 0.0 {
                    continue;
                }
                let path = driver.as_mut().and_then(|d| {
                    if d.ou.is_active() {
                        Some(generate_noise_path(d, *t0, span, dt_noise, n))
                    } else {
                        None
                    }
                });
                let (next, _) = evolve_full_noisy(
                    timeline,
                    &state,
                    *t0,
                    *t1,
                    &[],
                    &opts.ode,
                    path.as_ref(),
                )
                .map_err(|e| engine_err(*t0, e))?;
                state = next;
                if let Some(d) = driver.as_mut() {
                    d.heat(&mut baselines, span);
                }
            }
        }
    }
    Ok(readings)
}

fn generate_noise_path(
    driver: &mut NoiseDriver,
    t0: f64,
    span: f64,
    dt: f64,
    sites: usize,
) -> NoisePath {
    let steps = (span / dt).ceil().max(1.0) as usize;
    let dt = span / steps as f64;
    let mut values = Vec::with_capacity(steps);
    for _ in 0..steps {
        values.push(driver.ou.values().to_vec());
        let NoiseDriver { ou, rng, .. } = driver;
        ou.step(dt, rng);
    }
    debug_assert_eq!(values[0].len(), sites);
    NoisePath { t0, dt, values }
}

fn engine_err(time: f64, source: crate::dynamics::DynamicsError) -> ProtocolError {
    ProtocolError::Engine {
        time_us: time * 1e6,
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseModel;
    use crate::lattice::{pair_frequencies_for_rate, IonSpecies, LatticeConfig, TrapSite};
    use crate::protocol::{DetectionModel, Segment};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::TAU;

    /// Pair at the working point: site 0 parked 100 kHz below, tuned in by
    /// a ramp.
    fn exchange_sequence(hold: f64, omega_res: f64, delta: f64) -> Sequence {
        let park = TAU * 100e3;
        let (w0, w1) =
            pair_frequencies_for_rate(IonSpecies::magnesium_24(), 40e-6, omega_res, delta)
                .unwrap();
        let lattice = LatticeConfig::new(
            IonSpecies::magnesium_24(),
            vec![
                TrapSite::new(0, [0.0, 0.0, 0.0], w0 - park, 0.0).unwrap(),
                TrapSite::new(1, [40e-6, 0.0, 0.0], w1, 0.0).unwrap(),
            ],
        )
        .unwrap();
        Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::Excite { site: 0, amplitude: 100.0, phase: 0.0 },
                Segment::RampFrequency { site: 0, target: w0, duration: 10e-6 },
                Segment::Hold { duration: hold },
                Segment::RampFrequency { site: 0, target: w0 - park, duration: 10e-6 },
                Segment::Detect { sites: vec![0, 1] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap()
        .with_detection(DetectionModel::noiseless())
    }

    #[test]
    fn noiseless_single_repetition_matches_envelope() {
        let omega = TAU * 2e3;
        // a full exchange sits at a stationary point of the envelope, so
        // the small extra rotation from the tune ramps barely moves it
        let hold = std::f64::consts::PI / omega;
        let records = run(&exchange_sequence(hold, omega, 0.0), Engine::Rwa, 1).unwrap();
        assert_eq!(records.len(), 2);
        assert!(
            records[1].nbar > 0.98 * 100.0,
            "expected near-complete transfer, got {}",
            records[1].nbar
        );
        assert_eq!(records[1].repetitions, 1);
        assert_eq!(records[1].sem, 0.0);
        // total conserved exactly
        assert_relative_eq!(records[0].nbar + records[1].nbar, 100.0, max_relative = 1e-9);
    }

    #[test]
    fn decoupled_hold_leaks_nothing_measurable() {
        // parked at 100 kHz for a full millisecond: below 0.1% transfer
        let omega = TAU * 1.5e3;
        let park = TAU * 100e3;
        let (w0, w1) =
            pair_frequencies_for_rate(IonSpecies::magnesium_24(), 40e-6, omega, 0.0).unwrap();
        let lattice = LatticeConfig::new(
            IonSpecies::magnesium_24(),
            vec![
                TrapSite::new(0, [0.0, 0.0, 0.0], w0 - park, 0.0).unwrap(),
                TrapSite::new(1, [40e-6, 0.0, 0.0], w1, 0.0).unwrap(),
            ],
        )
        .unwrap();
        let seq = Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::Excite { site: 0, amplitude: 1000.0, phase: 0.0 },
                Segment::Hold { duration: 1e-3 },
                Segment::Detect { sites: vec![0, 1] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap()
        .with_detection(DetectionModel::noiseless());
        let records = run(&seq, Engine::Rwa, 1).unwrap();
        assert!(records[1].nbar < 1e-3 * 1000.0);
        assert!(records[0].nbar > 0.999 * 1000.0);
    }

    #[test]
    fn repetitions_are_deterministic_across_thread_counts() {
        let mut seq = exchange_sequence(100e-6, TAU * 2e3, TAU * 1e3);
        seq.noise.dephasing_sigma = TAU * 1.5e3;
        seq.noise.dephasing_corr_time = 20e-6;
        seq.detection = DetectionModel::default();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run(&seq, Engine::Rwa, 24).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| run(&seq, Engine::Rwa, 24).unwrap());
        assert_eq!(single, many);
    }

    #[test]
    fn sem_scales_with_inverse_sqrt_repetitions() {
        let seq = exchange_sequence(120e-6, TAU * 2e3, 0.0)
            .with_detection(DetectionModel { relative_sigma: 0.45 });
        let r100 = run(&seq, Engine::Rwa, 100).unwrap();
        let r400 = run(&seq, Engine::Rwa, 400).unwrap();
        // quadrupling repetitions should roughly halve the s.e.m.
        let ratio = r100[1].sem / r400[1].sem;
        assert!(
            (1.2..3.4).contains(&ratio),
            "sem ratio {ratio} not near 2 (sampling scatter allowed)"
        );
    }

    #[test]
    fn full_engine_matches_rwa_on_partial_exchange() {
        let omega = TAU * 4e3; // rate/frequency ratio ≈ 1e-3
        let hold = 0.5 * std::f64::consts::PI / omega;
        let seq = exchange_sequence(hold, omega, 0.0);
        let rwa = run(&seq, Engine::Rwa, 1).unwrap();
        let mut opts = RunOptions::new(Engine::Full, 1);
        opts.ode = OdeOptions::with_rtol(1e-9);
        let full = run_with(&seq, &opts).unwrap();
        for (a, b) in rwa.iter().zip(&full) {
            assert_abs_diff_eq!(a.nbar, b.nbar, epsilon = 0.02 * 100.0);
        }
    }

    #[test]
    fn adiabatic_rotation_preserves_population() {
        let omega = TAU * 2e3;
        let park = TAU * 100e3;
        let (w0, w1) =
            pair_frequencies_for_rate(IonSpecies::magnesium_24(), 40e-6, omega, 0.0).unwrap();
        let lattice = LatticeConfig::new(
            IonSpecies::magnesium_24(),
            vec![
                TrapSite::new(0, [0.0, 0.0, 0.0], w0 - park, 1.0).unwrap(),
                TrapSite::new(1, [40e-6, 0.0, 0.0], w1, 0.0).unwrap(),
            ],
        )
        .unwrap();
        let seq = Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::Excite { site: 0, amplitude: 500.0, phase: 0.0 },
                Segment::Detect { sites: vec![0] },
                Segment::RampAngle { site: 0, target: 0.0, duration: 100e-6 },
                Segment::Detect { sites: vec![0] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap()
        .with_detection(DetectionModel::noiseless());
        for engine in [Engine::Rwa, Engine::Full] {
            let records = run(&seq, engine, 1).unwrap();
            let before = records[0].nbar;
            let after = records[1].nbar;
            assert!(
                (after - before).abs() < 0.01 * before,
                "{engine:?}: rotation changed population {before} -> {after}"
            );
        }
    }
}
