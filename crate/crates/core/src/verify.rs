//! Algebraic self-check of the forward/reverse transparency process.

use rand::Rng;

use crate::diffusion::{forward_sample, reverse_step, ScheduleShape, TransparencySchedule};
use crate::error::Result;
use crate::inference::{run_reverse, OracleModel, DEFAULT_TAU};
use crate::raster::{AnomalyMask, ImageTensor};
use crate::rng::rng_for;
use crate::synthesis::{sample_anomaly_mask, SynthesisConfig};

pub const SINGLE_STEP_TOLERANCE: f64 = 1e-6;
pub const TELESCOPING_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyCase {
    pub shape: ScheduleShape,
    pub steps: usize,
    /// Largest `|reverse_step(x_t) - x_{t-1}|` over all `t`.
    pub single_step_error: f64,
    /// `|x_0 - N|` after the full reverse chain.
    pub telescoping_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub cases: Vec<VerifyCase>,
}

impl VerifyReport {
    pub fn max_single_step_error(&self) -> f64 {
        self.cases.iter().map(|c| c.single_step_error).fold(0.0, f64::max)
    }

    pub fn max_telescoping_error(&self) -> f64 {
        self.cases.iter().map(|c| c.telescoping_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_single_step_error() < SINGLE_STEP_TOLERANCE && self.max_telescoping_error() < TELESCOPING_TOLERANCE
    }
}

/// Random decompositions cycled over every schedule shape and `T` in
/// `{5, 20}`; odd cases use soft masks, even ones Perlin-thresholded masks.
pub fn verify_process(seed: u64, cases: usize, size: usize) -> Result<VerifyReport> {
    let synth = SynthesisConfig::default();
    let mut out = Vec::with_capacity(cases);
    for i in 0..cases {
        let mut rng = rng_for(&[seed, i as u64]);
        let shape = ScheduleShape::ALL[i % 3];
        let steps = [5, 20][(i / 3) % 2];
        let schedule = TransparencySchedule::new(shape, steps)?;
        let normal = ImageTensor::from_fn(3, size, size, |_, _, _| rng.random_range(-1.0..=1.0));
        let anomaly = ImageTensor::from_fn(3, size, size, |_, _, _| rng.random_range(-1.0..=1.0));
        let mask = if i % 2 == 1 {
            AnomalyMask::from_fn(size, size, |_, _| rng.random_range(0.0..=1.0))
        } else {
            sample_anomaly_mask(size, size, &synth, &mut rng)?.1.mask
        };
        let mut single: f64 = 0.0;
        for t in 1..=steps {
            let x_t = forward_sample(&normal, &anomaly, &mask, &schedule, t)?;
            let expect = forward_sample(&normal, &anomaly, &mask, &schedule, t - 1)?;
            let got = reverse_step(&x_t, &mask, &anomaly, &normal, &schedule, t)?;
            single = single.max(got.max_abs_diff(&expect));
        }
        let x_top = forward_sample(&normal, &anomaly, &mask, &schedule, steps)?;
        let oracle = OracleModel {
            mask,
            anomaly,
            normal: normal.clone(),
        };
        let trace = run_reverse(&oracle, &x_top, &schedule, DEFAULT_TAU, None)?;
        out.push(VerifyCase {
            shape,
            steps,
            single_step_error: single,
            telescoping_error: trace.x0.max_abs_diff(&normal),
        });
    }
    Ok(VerifyReport { cases: out })
}
