//! Adaptive embedded Runge-Kutta integrator (Dormand-Prince 5(4)) with
//! fourth-order dense output.
//!
//! Error control uses the weighted RMS norm with weights
//! `w_i = rtol · (scale_i + max(|y_i|, |y'_i|))`, so `scale` plays the role
//! of a per-component absolute-tolerance floor in natural units.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e}); the problem is too stiff for the requested tolerance")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps at t = {t:.6e}")]
    MaxStepsExceeded { t: f64, max_steps: usize },
    #[error("sample times must be ascending and inside the integration span")]
    BadSampleTimes,
}

#[derive(Debug, Clone)]
pub struct OdeOptions {
    /// Relative tolerance of the embedded error estimate.
    pub rtol: f64,
    /// Per-component characteristic magnitudes (absolute floor = rtol·scale).
    /// Length 1 broadcasts to every component.
    pub scale: Vec<f64>,
    /// Hard cap on the step size, seconds. Unlimited when infinite.
    pub max_step: f64,
    /// Abort threshold for the step size, as a fraction of the span.
    pub min_step_fraction: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            scale: vec![1.0],
            max_step: f64::INFINITY,
            min_step_fraction: 1e-14,
            max_steps: 50_000_000,
        }
    }
}

impl OdeOptions {
    pub fn with_rtol(rtol: f64) -> Self {
        Self {
            rtol,
            ..Self::default()
        }
    }

    pub fn scaled(mut self, scale: Vec<f64>) -> Self {
        self.scale = scale;
        self
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// b − b̂: weights of the embedded error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense-output weights of the fourth-order interpolant.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Dense-output coefficients of one accepted step over [t, t+h].
struct DenseStep {
    t: f64,
    h: f64,
    cont: [Vec<f64>; 5],
}

impl DenseStep {
    fn eval(&self, time: f64, out: &mut [f64]) {
        let theta = ((time - self.t) / self.h).clamp(0.0, 1.0);
        let om = 1.0 - theta;
        for i in 0..out.len() {
            out[i] = self.cont[0][i]
                + theta
                    * (self.cont[1][i]
                        + om * (self.cont[2][i]
                            + theta * (self.cont[3][i] + om * self.cont[4][i])));
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Integrate dy/dt = f(t, y) from `t0` to `t1` (t1 ≥ t0), reporting dense
/// samples at the ascending times in `samples` through `on_sample(index, y)`.
/// Returns the state at `t1`.
pub fn integrate<F, S>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    opts: &OdeOptions,
    samples: &[f64],
    mut on_sample: S,
) -> Result<(Vec<f64>, OdeStats), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    S: FnMut(usize, &[f64]),
{
    let n = y0.len();
    let span = t1 - t0;
    let mut stats = OdeStats::default();
    if span < 0.0 {
        return Err(OdeError::BadSampleTimes);
    }
    if !samples.windows(2).all(|w| w[0] <= w[1])
        || samples
            .iter()
            .any(|&s| s < t0 - 1e-9 * span.max(1e-300) || s > t1 + 1e-9 * span.max(1e-300))
    {
        return Err(OdeError::BadSampleTimes);
    }
    let mut y = y0.to_vec();
    let mut sample_idx = 0;
    // leading samples that coincide with t0
    while sample_idx < samples.len() && samples[sample_idx] <= t0 {
        on_sample(sample_idx, &y);
        sample_idx += 1;
    }
    if span == 0.0 {
        return Ok((y, stats));
    }

    let weight = |y_a: &[f64], y_b: &[f64], i: usize| -> f64 {
        let scale = if opts.scale.len() == 1 {
            opts.scale[0]
        } else {
            opts.scale[i]
        };
        opts.rtol * (scale + y_a[i].abs().max(y_b[i].abs()))
    };

    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut y_stage = vec![0.0; n];
    let mut y_next = vec![0.0; n];
    let mut interp = vec![0.0; n];

    f(t0, &y, &mut k[0]);
    stats.rhs_evals += 1;

    // initial step heuristic
    let mut h = {
        let mut ynorm: f64 = 0.0;
        let mut fnorm: f64 = 0.0;
        for i in 0..n {
            let w = weight(&y, &y, i);
            ynorm += (y[i] / w).powi(2);
            fnorm += (k[0][i] / w).powi(2);
        }
        let ratio = if fnorm > 0.0 {
            (ynorm / fnorm).sqrt().max(1e-6)
        } else {
            1.0
        };
        (0.01 * ratio).min(span / 10.0).min(opts.max_step)
    };
    let h_min = opts.min_step_fraction * span;

    let mut t = t0;
    let mut rejected_last = false;
    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(OdeError::MaxStepsExceeded {
                t,
                max_steps: opts.max_steps,
            });
        }
        let mut last = false;
        if t + h >= t1 {
            h = t1 - t;
            last = true;
        }

        for stage in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage) {
                    let a = A[stage - 1][j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                y_stage[i] = y[i] + h * acc;
            }
            if stage == 6 {
                // stage 7 shares the final-point ordinate (FSAL)
                y_next.copy_from_slice(&y_stage);
            }
            let (head, tail) = k.split_at_mut(stage);
            let _ = head;
            f(t + C[stage] * h, &y_stage, &mut tail[0]);
            stats.rhs_evals += 1;
        }

        // weighted RMS error of the embedded pair
        let mut err_sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    e += E[j] * kj[i];
                }
            }
            let w = weight(&y, &y_next, i);
            let r = h * e / w;
            err_sq += r * r;
        }
        let mut err = (err_sq / n as f64).sqrt();
        if !err.is_finite() {
            err = 2.0; // force rejection on overflow/NaN states
        }

        if err <= 1.0 {
            // dense output for samples inside this step
            if sample_idx < samples.len() && samples[sample_idx] <= t + h {
                let dense = build_dense(&y, &y_next, &k, h, t);
                while sample_idx < samples.len() && samples[sample_idx] <= t + h {
                    dense.eval(samples[sample_idx], &mut interp);
                    on_sample(sample_idx, &interp);
                    sample_idx += 1;
                }
            }
            t += h;
            std::mem::swap(&mut y, &mut y_next);
            k.swap(0, 6); // FSAL
            stats.accepted += 1;
            if last {
                while sample_idx < samples.len() {
                    on_sample(sample_idx, &y);
                    sample_idx += 1;
                }
                return Ok((y, stats));
            }
            let facmax = if rejected_last { 1.0 } else { 5.0 };
            h = (h * (0.9 * err.powf(-0.2)).clamp(0.2, facmax)).min(opts.max_step);
            rejected_last = false;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            rejected_last = true;
            if h < h_min {
                return Err(OdeError::StepSizeUnderflow { t, h });
            }
        }
    }
}

fn build_dense(y0: &[f64], y1: &[f64], k: &[Vec<f64>; 7], h: f64, t: f64) -> DenseStep {
    let n = y0.len();
    let mut cont: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    for i in 0..n {
        let ydiff = y1[i] - y0[i];
        let bspl = h * k[0][i] - ydiff;
        cont[0][i] = y0[i];
        cont[1][i] = ydiff;
        cont[2][i] = bspl;
        cont[3][i] = ydiff - h * k[6][i] - bspl;
        let mut d = 0.0;
        for (j, kj) in k.iter().enumerate() {
            if D[j] != 0.0 {
                d += D[j] * kj[i];
            }
        }
        cont[4][i] = h * d;
    }
    DenseStep { t, h, cont }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_decay() {
        let (y, _) = integrate(
            |_, y, dy| dy[0] = -y[0],
            0.0,
            5.0,
            &[1.0],
            &OdeOptions::with_rtol(1e-10),
            &[],
            |_, _| {},
        )
        .unwrap();
        assert_relative_eq!(y[0], (-5.0f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn harmonic_oscillator_many_periods() {
        let omega = 2.0 * std::f64::consts::PI;
        let opts = OdeOptions::with_rtol(1e-10).scaled(vec![1.0, omega]);
        let (y, stats) = integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -omega * omega * y[0];
            },
            0.0,
            100.0,
            &[1.0, 0.0],
            &opts,
            &[],
            |_, _| {},
        )
        .unwrap();
        // 100 full periods: back to the start
        assert_relative_eq!(y[0], 1.0, max_relative = 1e-6);
        assert!(y[1].abs() < 1e-5 * omega);
        assert!(stats.accepted > 100);
    }

    #[test]
    fn dense_output_matches_analytic_solution() {
        let omega = 3.0;
        let samples: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
        let mut worst: f64 = 0.0;
        integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -omega * omega * y[0];
            },
            0.0,
            10.0,
            &[1.0, 0.0],
            &OdeOptions::with_rtol(1e-9),
            &samples,
            |idx, y| {
                let t = samples[idx];
                worst = worst.max((y[0] - (omega * t).cos()).abs());
            },
        )
        .unwrap();
        assert!(worst < 1e-7, "dense output error {worst}");
    }

    #[test]
    fn blowup_reports_stiffness() {
        // y' = y² from y(0)=1 diverges at t = 1
        let result = integrate(
            |_, y, dy| dy[0] = y[0] * y[0],
            0.0,
            2.0,
            &[1.0],
            &OdeOptions::with_rtol(1e-8),
            &[],
            |_, _| {},
        );
        assert!(matches!(
            result,
            Err(OdeError::StepSizeUnderflow { .. }) | Err(OdeError::MaxStepsExceeded { .. })
        ));
    }

    #[test]
    fn zero_span_returns_input() {
        let (y, _) = integrate(
            |_, y, dy| dy[0] = -y[0],
            1.0,
            1.0,
            &[3.0],
            &OdeOptions::default(),
            &[1.0],
            |_, y| assert_eq!(y[0], 3.0),
        )
        .unwrap();
        assert_eq!(y[0], 3.0);
    }

    #[test]
    fn rejects_unsorted_samples() {
        let err = integrate(
            |_, _, dy| dy[0] = 0.0,
            0.0,
            1.0,
            &[0.0],
            &OdeOptions::default(),
            &[0.5, 0.2],
            |_, _| {},
        )
        .unwrap_err();
        assert_eq!(err, OdeError::BadSampleTimes);
    }
}
