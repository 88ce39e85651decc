//! Experiment sequences: cool, excite, tune, rotate, couple, detect.
//!
//! A [`Sequence`] is an ordered list of segments over a lattice. Compiling
//! realizes it as piecewise-smooth parameter trajectories (smoothstep
//! ramps, C¹ at the endpoints), instantaneous excitation impulses, and
//! detection timestamps; running evolves repetitions through the compiled
//! timeline with either engine and aggregates detection statistics.

mod compile;
mod run;
mod templates;

pub use compile::{compile, validate, ValidationOptions, Violation, ViolationKind};
pub use run::{run, run_with, Engine, RunOptions};
pub use templates::{
    builtin_sequences, BuiltinSequence, Fig2Template, Fig3Template, Fig4Template,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, NoiseModel};
use crate::lattice::{
    build_coupling_matrix, CouplingMatrix, LatticeConfig, LatticeError, TrapSite,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid sequence: {0} blocking violation(s); first: {1}")]
    InvalidSequence(usize, String),
    #[error("sequence structure: {0}")]
    Structure(String),
    #[error("segment {segment}: site {site} is not part of the lattice")]
    SiteOutOfRange { segment: usize, site: usize },
    #[error("engine failed at t = {time_us:.3} µs: {source}")]
    Engine {
        time_us: f64,
        #[source]
        source: DynamicsError,
    },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// One protocol step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// Reset every site to a thermal state (coherent motion quenched).
    Cool { targets: Vec<f64> },
    /// Instantaneous coherent displacement: β += √amplitude · e^{iφ}.
    Excite { site: usize, amplitude: f64, phase: f64 },
    /// Smoothstep retune of one site's mode frequency, rad/s.
    RampFrequency { site: usize, target: f64, duration: f64 },
    /// Smoothstep reorientation of one site's mode angle, rad.
    RampAngle { site: usize, target: f64, duration: f64 },
    /// Free evolution; coupling acts wherever detunings permit.
    Hold { duration: f64 },
    /// Record populations at the listed sites.
    Detect { sites: Vec<usize> },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match self {
            Segment::RampFrequency { duration, .. }
            | Segment::RampAngle { duration, .. }
            | Segment::Hold { duration } => *duration,
            _ => 0.0,
        }
    }
}

/// Detection statistics: single-shot readings scatter with this relative
/// sigma around the true population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub relative_sigma: f64,
}

impl Default for DetectionModel {
    fn default() -> Self {
        // picked so ~300 repetitions give a few-percent s.e.m.
        Self {
            relative_sigma: 0.45,
        }
    }
}

impl DetectionModel {
    pub fn noiseless() -> Self {
        Self {
            relative_sigma: 0.0,
        }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sequence {
    pub segments: Vec<Segment>,
    pub lattice: LatticeConfig,
    pub noise: NoiseModel,
    #[serde(default)]
    pub detection: DetectionModel,
}

impl Sequence {
    /// Structural validation: non-empty, starts with a cool, all referenced
    /// sites exist, durations and amplitudes are sane.
    pub fn new(
        segments: Vec<Segment>,
        lattice: LatticeConfig,
        noise: NoiseModel,
    ) -> Result<Self, ProtocolError> {
        let n = lattice.len();
        if segments.is_empty() {
            return Err(ProtocolError::Structure("sequence is empty".into()));
        }
        if !matches!(segments[0], Segment::Cool { .. }) {
            return Err(ProtocolError::Structure(
                "a sequence must begin with a cool segment".into(),
            ));
        }
        for (k, seg) in segments.iter().enumerate() {
            match seg {
                Segment::Cool { targets } => {
                    if targets.len() != n {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: cool lists {} targets for {n} sites",
                            targets.len()
                        )));
                    }
                    if targets.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: cool targets must be non-negative"
                        )));
                    }
                }
                Segment::Excite { site, amplitude, phase } => {
                    if *site >= n {
                        return Err(ProtocolError::SiteOutOfRange { segment: k, site: *site });
                    }
                    if !(*amplitude >= 0.0) || !amplitude.is_finite() || !phase.is_finite() {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: excitation amplitude must be non-negative"
                        )));
                    }
                }
                Segment::RampFrequency { site, target, duration } => {
                    if *site >= n {
                        return Err(ProtocolError::SiteOutOfRange { segment: k, site: *site });
                    }
                    if !(*target > 0.0) || !(*duration >= 0.0) {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: ramp needs positive target and non-negative duration"
                        )));
                    }
                }
                Segment::RampAngle { site, target, duration } => {
                    if *site >= n {
                        return Err(ProtocolError::SiteOutOfRange { segment: k, site: *site });
                    }
                    if !target.is_finite() || !(*duration >= 0.0) {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: angle ramp needs finite target and non-negative duration"
                        )));
                    }
                }
                Segment::Hold { duration } => {
                    if !(*duration >= 0.0) || !duration.is_finite() {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: hold duration must be non-negative"
                        )));
                    }
                }
                Segment::Detect { sites } => {
                    if sites.is_empty() {
                        return Err(ProtocolError::Structure(format!(
                            "segment {k}: detect lists no sites"
                        )));
                    }
                    for &s in sites {
                        if s >= n {
                            return Err(ProtocolError::SiteOutOfRange { segment: k, site: s });
                        }
                    }
                }
            }
        }
        Ok(Self {
            segments,
            lattice,
            noise,
            detection: DetectionModel::default(),
        })
    }

    pub fn with_detection(mut self, detection: DetectionModel) -> Self {
        self.detection = detection;
        self
    }
}

/// Aggregated detection statistics at one timestamp and site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub site: usize,
    /// Timeline position of the detection, s.
    pub time: f64,
    /// Mean estimated population over all repetitions, quanta.
    pub nbar: f64,
    /// Standard error of the mean, quanta.
    pub sem: f64,
    pub repetitions: usize,
}

/// Instantaneous coherent displacement in the compiled timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Impulse {
    pub time: f64,
    pub site: usize,
    pub amplitude: f64,
    pub phase: f64,
}

/// One detection timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub time: f64,
    pub sites: Vec<usize>,
}

/// One state-reset timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct CoolEvent {
    pub time: f64,
    pub targets: Vec<f64>,
}

/// Execution plan entries, in segment order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Action {
    Cool(usize),
    Excite(usize),
    Detect(usize),
    /// Evolve the state from `t0` to `t1` under the timeline parameters.
    Evolve { t0: f64, t1: f64 },
}

/// Piecewise parameter trajectory with full coverage of [0, T]: constant
/// stretches joined by smoothstep ramps.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamTrack {
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    t0: f64,
    t1: f64,
    from: f64,
    to: f64,
}

impl ParamTrack {
    fn constant(value: f64) -> Self {
        Self {
            pieces: vec![Piece {
                t0: 0.0,
                t1: 0.0,
                from: value,
                to: value,
            }],
        }
    }

    fn push_ramp(&mut self, t0: f64, t1: f64, to: f64) {
        let from = self.final_value();
        // extend the preceding constant stretch to the ramp start
        let last_end = self.pieces.last().map(|p| p.t1).unwrap_or(0.0);
        if last_end < t0 {
            self.pieces.push(Piece {
                t0: last_end,
                t1: t0,
                from,
                to: from,
            });
        }
        self.pieces.push(Piece { t0, t1, from, to });
    }

    fn close(&mut self, total: f64) {
        let value = self.final_value();
        let t_last = self.pieces.last().map(|p| p.t1).unwrap_or(0.0);
        if t_last < total {
            self.pieces.push(Piece {
                t0: t_last,
                t1: total,
                from: value,
                to: value,
            });
        }
    }

    fn final_value(&self) -> f64 {
        self.pieces.last().map(|p| p.to).unwrap_or(0.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        // pieces are sorted and contiguous
        let idx = self
            .pieces
            .partition_point(|p| p.t1 < t)
            .min(self.pieces.len() - 1);
        let p = &self.pieces[idx];
        if t <= p.t0 || p.t1 <= p.t0 {
            return if t <= p.t0 { p.from } else { p.to };
        }
        if t >= p.t1 {
            return p.to;
        }
        let x = (t - p.t0) / (p.t1 - p.t0);
        let s = x * x * (3.0 - 2.0 * x);
        p.from + (p.to - p.from) * s
    }

    /// True when the parameter changes anywhere inside (t0, t1).
    pub fn is_ramping(&self, t0: f64, t1: f64) -> bool {
        self.pieces
            .iter()
            .any(|p| p.from != p.to && p.t0 < t1 && t0 < p.t1)
    }

    fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.pieces.iter().flat_map(|p| [p.t0, p.t1])
    }
}

/// A sequence realized as parameter trajectories over [0, T].
#[derive(Debug, Clone)]
pub struct CompiledTimeline {
    lattice: LatticeConfig,
    reference_frequency: f64,
    frequency_tracks: Vec<ParamTrack>,
    angle_tracks: Vec<ParamTrack>,
    impulses: Vec<Impulse>,
    detections: Vec<DetectionEvent>,
    cools: Vec<CoolEvent>,
    pub(crate) actions: Vec<Action>,
    total_duration: f64,
}

impl CompiledTimeline {
    pub fn site_count(&self) -> usize {
        self.lattice.len()
    }

    pub fn lattice(&self) -> &LatticeConfig {
        &self.lattice
    }

    /// Common rotating-frame frequency, rad/s (site 0's initial frequency).
    pub fn reference_frequency(&self) -> f64 {
        self.reference_frequency
    }

    pub fn total_duration(&self) -> f64 {
        self.total_duration
    }

    /// Instantaneous mode frequency of `site`, rad/s.
    pub fn omega(&self, site: usize, t: f64) -> f64 {
        self.frequency_tracks[site].value(t)
    }

    /// Instantaneous mode angle of `site`, rad.
    pub fn angle(&self, site: usize, t: f64) -> f64 {
        self.angle_tracks[site].value(t)
    }

    pub fn impulses(&self) -> &[Impulse] {
        &self.impulses
    }

    pub fn detections(&self) -> &[DetectionEvent] {
        &self.detections
    }

    pub fn cools(&self) -> &[CoolEvent] {
        &self.cools
    }

    pub fn covers(&self, t0: f64, t1: f64) -> bool {
        t0 >= -1e-12 && t1 <= self.total_duration + 1e-9 * self.total_duration.max(1.0) && t1 >= t0
    }

    /// True when any site parameter changes inside (t0, t1).
    pub fn is_ramping(&self, t0: f64, t1: f64) -> bool {
        self.frequency_tracks
            .iter()
            .chain(self.angle_tracks.iter())
            .any(|track| track.is_ramping(t0, t1))
    }

    /// Lattice with site frequencies and angles evaluated at time `t`.
    pub fn config_at(&self, t: f64) -> LatticeConfig {
        let mut config = self.lattice.clone();
        for (i, site) in config.sites.iter_mut().enumerate() {
            *site = TrapSite {
                mode_frequency: self.omega(i, t),
                mode_angle: crate::lattice::normalize_angle(self.angle(i, t)),
                ..*site
            };
        }
        config
    }

    /// Coupling matrix at time `t` in the timeline's rotating frame.
    pub fn matrix_at(&self, t: f64) -> Result<CouplingMatrix, LatticeError> {
        build_coupling_matrix(&self.config_at(t), self.reference_frequency)
    }

    /// Times where any trajectory changes smoothness, sorted and deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .frequency_tracks
            .iter()
            .chain(self.angle_tracks.iter())
            .flat_map(|track| track.breakpoints())
            .collect();
        times.push(0.0);
        times.push(self.total_duration);
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        times
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::IonSpecies;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::TAU;

    fn pair_lattice() -> LatticeConfig {
        let omega = TAU * 4e6;
        LatticeConfig::new(
            IonSpecies::magnesium_24(),
            vec![
                TrapSite::new(0, [0.0, 0.0, 0.0], omega, 0.0).unwrap(),
                TrapSite::new(1, [40e-6, 0.0, 0.0], omega, 0.0).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn sequence_must_begin_with_cool() {
        let lattice = pair_lattice();
        let err = Sequence::new(
            vec![Segment::Hold { duration: 1e-5 }],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::Structure(_)));
    }

    #[test]
    fn detect_site_must_exist() {
        let lattice = pair_lattice();
        let err = Sequence::new(
            vec![
                Segment::Cool { targets: vec![0.0, 0.0] },
                Segment::Detect { sites: vec![2] },
            ],
            lattice,
            NoiseModel::off(1),
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::SiteOutOfRange { .. }));
    }

    #[test]
    fn param_track_smoothstep_shape() {
        let mut track = ParamTrack::constant(1.0);
        track.push_ramp(1.0, 2.0, 3.0);
        track.close(4.0);
        assert_abs_diff_eq!(track.value(0.5), 1.0);
        assert_abs_diff_eq!(track.value(1.0), 1.0);
        assert_abs_diff_eq!(track.value(1.5), 2.0); // midpoint of smoothstep
        assert_abs_diff_eq!(track.value(2.0), 3.0);
        assert_abs_diff_eq!(track.value(3.7), 3.0);
        // monotone along the ramp
        let mut prev = track.value(1.0);
        for k in 1..=100 {
            let v = track.value(1.0 + k as f64 / 100.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        assert!(track.is_ramping(1.2, 1.3));
        assert!(!track.is_ramping(2.5, 3.0));
    }
}
