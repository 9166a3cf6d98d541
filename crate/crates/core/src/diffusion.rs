//! Transparency-blending algebra.
//!
//! An image is a per-pixel blend of a normal appearance `N` and an anomaly
//! appearance `A` inside a mask `M`:
//!
//! ```text
//! I = (1 - M) * N + beta * (M * A) + (1 - beta) * (M * N)
//! ```
//!
//! The forward process raises `beta` from 0 to 1 along a schedule; one reverse
//! transition lowers it by `beta_t - beta_{t-1}` using estimates of `M`, `A`
//! and `N`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_domain, Error, Result};
use crate::raster::{AnomalyMask, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
    Quadratic,
    Root,
}

impl ScheduleShape {
    pub const ALL: [ScheduleShape; 3] = [Self::Linear, Self::Quadratic, Self::Root];

    fn beta(self, t: usize, steps: usize) -> f64 {
        if t == steps {
            return 1.0;
        }
        let r = t as f64 / steps as f64;
        match self {
            Self::Linear => r,
            Self::Quadratic => r * r,
            Self::Root => r.sqrt(),
        }
    }
}

impl fmt::Display for ScheduleShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
            Self::Root => "root",
        })
    }
}

impl FromStr for ScheduleShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            "root" | "sqrt" => Ok(Self::Root),
            other => Err(Error::Config(format!("unknown schedule shape `{other}`"))),
        }
    }
}

/// `beta_0 = 0 < beta_1 < ... < beta_T = 1`, indexed `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransparencySchedule {
    shape: ScheduleShape,
    betas: Vec<f64>,
}

impl TransparencySchedule {
    pub fn new(shape: ScheduleShape, steps: usize) -> Result<Self> {
        ensure_domain!(steps >= 1, "a schedule needs at least one step");
        let betas = (0..=steps).map(|t| shape.beta(t, steps)).collect();
        Ok(Self { shape, betas })
    }

    pub fn shape(&self) -> ScheduleShape {
        self.shape
    }

    /// Number of reverse transitions `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.betas[t])
    }

    /// `beta_t - beta_{t-1}`; requires `t >= 1`.
    pub fn delta(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        ensure_domain!(t >= 1, "timestep 0 has no preceding transition");
        Ok(self.betas[t] - self.betas[t - 1])
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        ensure_domain!(
            t <= self.steps(),
            "timestep {t} outside [0, {}]",
            self.steps()
        );
        Ok(())
    }
}

pub fn make_schedule(shape: ScheduleShape, steps: usize) -> Result<TransparencySchedule> {
    TransparencySchedule::new(shape, steps)
}

/// Blends `anomaly` into `normal` inside `mask` at opacity `beta`.
pub fn compose(
    normal: &ImageTensor,
    anomaly: &ImageTensor,
    mask: &AnomalyMask,
    beta: f64,
) -> Result<ImageTensor> {
    normal.ensure_same_dims(anomaly, "compose normal/anomaly")?;
    normal.ensure_mask_dims(mask, "compose")?;
    ensure_domain!((0.0..=1.0).contains(&beta), "beta {beta} outside [0, 1]");
    if beta == 0.0 {
        return Ok(normal.clone());
    }
    let plane = normal.plane_len();
    let m = mask.data();
    let mut out = normal.clone();
    for (i, (o, &a)) in out.data_mut().iter_mut().zip(anomaly.data()).enumerate() {
        let n = *o;
        let mi = m[i % plane];
        *o = (1.0 - mi) * n + beta * (mi * a) + (1.0 - beta) * (mi * n);
    }
    Ok(out)
}

/// `x_t` for a known decomposition.
pub fn forward_sample(
    normal: &ImageTensor,
    anomaly: &ImageTensor,
    mask: &AnomalyMask,
    schedule: &TransparencySchedule,
    t: usize,
) -> Result<ImageTensor> {
    let beta = schedule.beta(t)?;
    compose(normal, anomaly, mask, beta)
}

/// One reverse transition `x_t -> x_{t-1}`, clamped to `[-1, 1]`.
pub fn reverse_step(
    x_t: &ImageTensor,
    mask_est: &AnomalyMask,
    anomaly_est: &ImageTensor,
    normal_est: &ImageTensor,
    schedule: &TransparencySchedule,
    t: usize,
) -> Result<ImageTensor> {
    x_t.ensure_same_dims(anomaly_est, "reverse_step anomaly estimate")?;
    x_t.ensure_same_dims(normal_est, "reverse_step normal estimate")?;
    x_t.ensure_mask_dims(mask_est, "reverse_step")?;
    let d = schedule.delta(t)?;
    let plane = x_t.plane_len();
    let m = mask_est.data();
    let mut out = x_t.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mi = m[i % plane];
        let v = *o - d * (mi * anomaly_est.data()[i]) + d * (mi * normal_est.data()[i]);
        *o = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn const_image(v: f64) -> ImageTensor {
        ImageTensor::filled(3, 4, 4, v)
    }

    #[test]
    fn linear_schedule_twenty_steps() {
        let s = make_schedule(ScheduleShape::Linear, 20).unwrap();
        assert_eq!(s.betas().len(), 21);
        assert_eq!(s.betas()[0], 0.0);
        assert_eq!(s.betas()[20], 1.0);
        assert_eq!(s.beta(10).unwrap(), 0.5);
        for (t, b) in s.betas().iter().enumerate() {
            assert!((b - 0.05 * t as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_and_root_schedules() {
        let q = make_schedule(ScheduleShape::Quadratic, 2).unwrap();
        assert_eq!(q.betas(), &[0.0, 0.25, 1.0]);
        let r = make_schedule(ScheduleShape::Root, 4).unwrap();
        let expect = [0.0, 0.5, 0.5f64.sqrt(), 0.75f64.sqrt(), 1.0];
        for (a, b) in r.betas().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(r.betas().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            make_schedule(ScheduleShape::Linear, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn compose_endpoints() {
        let n = ImageTensor::from_fn(3, 4, 4, |c, y, x| (c + y * x) as f64 / 20.0 - 0.3);
        let a = ImageTensor::from_fn(3, 4, 4, |c, y, x| 0.7 - (c * y + x) as f64 / 15.0);
        let soft = AnomalyMask::from_fn(4, 4, |y, x| (y * 4 + x) as f64 / 15.0);
        assert_eq!(compose(&n, &a, &soft, 0.0).unwrap(), n);
        assert_eq!(compose(&n, &a, &AnomalyMask::ones(4, 4), 1.0).unwrap(), a);
    }

    #[test]
    fn compose_half_mask_by_hand() {
        let n = const_image(0.5);
        let a = const_image(-0.5);
        let m = AnomalyMask::from_fn(4, 4, |_, x| if x < 2 { 1.0 } else { 0.0 });
        let out = compose(&n, &a, &m, 0.5).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let expect = if x < 2 { 0.0 } else { 0.5 };
                    assert_eq!(out.get(c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn compose_rejects_bad_inputs() {
        let n = const_image(0.0);
        let m = AnomalyMask::zeros(4, 4);
        assert!(matches!(compose(&n, &n, &m, 1.5), Err(Error::Domain(_))));
        let small = ImageTensor::zeros(3, 2, 2);
        assert!(matches!(compose(&n, &small, &m, 0.5), Err(Error::Shape(_))));
        assert!(matches!(
            compose(&n, &n, &AnomalyMask::zeros(3, 4), 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_sample_endpoints_and_midpoint() {
        let s = make_schedule(ScheduleShape::Linear, 20).unwrap();
        let n = const_image(0.2);
        let a = const_image(-0.6);
        let m = AnomalyMask::ones(4, 4);
        assert_eq!(forward_sample(&n, &a, &m, &s, 0).unwrap(), n);
        assert_eq!(
            forward_sample(&n, &a, &m, &s, 20).unwrap(),
            compose(&n, &a, &m, 1.0).unwrap()
        );
        assert_eq!(
            forward_sample(&n, &a, &m, &s, 10).unwrap(),
            compose(&n, &a, &m, 0.5).unwrap()
        );
        assert!(matches!(
            forward_sample(&n, &a, &m, &s, 21),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reverse_step_zero_mask_is_identity() {
        let s = make_schedule(ScheduleShape::Linear, 5).unwrap();
        let x = ImageTensor::from_fn(3, 4, 4, |c, y, x| ((c + y + x) as f64 / 9.0) - 0.5);
        let junk = const_image(0.9);
        let out = reverse_step(&x, &AnomalyMask::zeros(4, 4), &junk, &junk, &s, 3).unwrap();
        assert_eq!(out, x);
        assert!(matches!(
            reverse_step(&x, &AnomalyMask::zeros(4, 4), &junk, &junk, &s, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reverse_step_clamps_overshoot() {
        let s = make_schedule(ScheduleShape::Linear, 1).unwrap();
        let x = const_image(0.9);
        let out = reverse_step(
            &x,
            &AnomalyMask::ones(4, 4),
            &const_image(-1.0),
            &const_image(1.0),
            &s,
            1,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    fn tensors(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..=1.0, len)
    }

    proptest! {
        #[test]
        fn single_step_and_telescoping(
            n in tensors(3 * 16),
            a in tensors(3 * 16),
            bits in prop::collection::vec(any::<bool>(), 16),
            shape in prop::sample::select(ScheduleShape::ALL.to_vec()),
            steps in 1usize..25,
        ) {
            let n = ImageTensor::from_vec(3, 4, 4, n).unwrap();
            let a = ImageTensor::from_vec(3, 4, 4, a).unwrap();
            let m = AnomalyMask::from_vec(4, 4, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            let s = make_schedule(shape, steps).unwrap();
            let mut x = forward_sample(&n, &a, &m, &s, steps).unwrap();
            for t in (1..=steps).rev() {
                let expect = forward_sample(&n, &a, &m, &s, t - 1).unwrap();
                let direct = reverse_step(&forward_sample(&n, &a, &m, &s, t).unwrap(), &m, &a, &n, &s, t).unwrap();
                prop_assert!(direct.max_abs_diff(&expect) < 1e-6);
                x = reverse_step(&x, &m, &a, &n, &s, t).unwrap();
            }
            prop_assert!(x.max_abs_diff(&n) < 1e-5);
            // untouched pixels stay bit-identical
            for c in 0..3 {
                for p in 0..16 {
                    if m.data()[p] == 0.0 {
                        prop_assert_eq!(x.data()[c * 16 + p].to_bits(), n.data()[c * 16 + p].to_bits());
                    }
                }
            }
        }

        #[test]
        fn prominence_grows_with_t(nv in -1.0f64..0.0, av in 0.0f64..=1.0, shape in prop::sample::select(ScheduleShape::ALL.to_vec())) {
            let n = ImageTensor::filled(1, 1, 1, nv);
            let a = ImageTensor::filled(1, 1, 1, av);
            let m = AnomalyMask::ones(1, 1);
            let s = make_schedule(shape, 20).unwrap();
            let vals: Vec<f64> = (0..=20).map(|t| forward_sample(&n, &a, &m, &s, t).unwrap().data()[0]).collect();
            prop_assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }

        #[test]
        fn compose_linear_in_beta(nv in -1.0f64..=1.0, av in -1.0f64..=1.0, b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0) {
            let n = ImageTensor::filled(1, 1, 1, nv);
            let a = ImageTensor::filled(1, 1, 1, av);
            let m = AnomalyMask::ones(1, 1);
            let mid = compose(&n, &a, &m, 0.5 * (b1 + b2)).unwrap().data()[0];
            let avg = 0.5 * (compose(&n, &a, &m, b1).unwrap().data()[0] + compose(&n, &a, &m, b2).unwrap().data()[0]);
            prop_assert!((mid - avg).abs() < 1e-12);
        }
    }
}
