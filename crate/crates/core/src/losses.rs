//! Training losses for the three prediction heads plus the step-consistency
//! term.
//!
//! Every kernel returns the loss value together with its gradient w.r.t. the
//! prediction, so the same code drives both the tape ops used in training and
//! the plain evaluation helpers on [`ImageTensor`]/[`AnomalyMask`].

use crate::diffusion::{forward_sample, TransparencySchedule};
use crate::error::{ensure_domain, ensure_shape, Result};
use crate::nn::Scalar;
use crate::raster::{AnomalyMask, ImageTensor};

/// Weight of the focal term inside the mask loss.
pub const FOCAL_WEIGHT: f64 = 5.0;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_EPS: f64 = 1e-7;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of images in `[-1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub normal: f64,
    pub mask: f64,
    pub anomaly: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(normal: f64, mask: f64, anomaly: f64, consistency: f64) -> Self {
        Self {
            normal,
            mask,
            anomaly,
            consistency,
            total: normal + mask + anomaly + consistency,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.normal, self.mask, self.anomaly, self.consistency, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which terms contribute to the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossTerms {
    pub normal: bool,
    pub mask: bool,
    pub anomaly: bool,
    pub consistency: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            normal: true,
            mask: true,
            anomaly: true,
            consistency: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let n = T::of(pred.len() as f64);
    let two = T::of(2.0);
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let d = p - y;
            sum += d * d;
            two * d / n
        })
        .collect();
    (sum / n, grad)
}

pub fn l1<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let n = T::of(pred.len() as f64);
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let d = p - y;
            sum += d.abs();
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    (sum / n, grad)
}

/// Huber loss with transition point 1, mean-reduced.
pub fn smooth_l1<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let n = T::of(pred.len() as f64);
    let half = T::of(0.5);
    let mut sum = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let d = p - y;
            if d.abs() < T::one() {
                sum += half * d * d;
                d / n
            } else {
                sum += d.abs() - half;
                d.signum() / n
            }
        })
        .collect();
    (sum / n, grad)
}

/// Mean of `-(1 - p_t)^gamma * ln(p_t)`, `p_t` the probability of the true
/// class; predictions are clamped to `[eps, 1 - eps]`.
pub fn focal<T: Scalar>(prob: &[T], target: &[T], gamma: f64) -> (T, Vec<T>) {
    let n = T::of(prob.len() as f64);
    let lo = T::of(PROB_EPS);
    let hi = T::one() - lo;
    let g = T::of(gamma);
    let mut sum = T::zero();
    let grad = prob
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pc = p.max(lo).min(hi);
            let pt = y * pc + (T::one() - y) * (T::one() - pc);
            let q = T::one() - pt;
            let w = if gamma == 0.0 { T::one() } else { q.powf(g) };
            let ln = pt.ln();
            sum += -w * ln;
            if p < lo || p > hi {
                return T::zero();
            }
            // d/dpt of -(1-pt)^g ln pt
            let mut dpt = -w / pt;
            if gamma != 0.0 {
                dpt += g * q.powf(g - T::one()) * ln;
            }
            let dpt_dp = y + y - T::one();
            dpt * dpt_dp / n
        })
        .collect();
    (sum / n, grad)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Same-size separable filtering of one plane with zero padding.
fn filter_plane<T: Scalar>(src: &[T], h: usize, w: usize, taps: &[T], tmp: &mut [T], out: &mut [T]) {
    let r = taps.len() / 2;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = T::zero();
            for xi in lo..=hi {
                acc += taps[xi + r - x] * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = T::zero();
            for yi in lo..=hi {
                acc += taps[yi + r - y] * tmp[yi * w + x];
            }
            out[y * w + x] = acc;
        }
    }
}

/// `1 - mean SSIM` over all channels, with the gradient w.r.t. `pred`.
///
/// Uses an 11x11 Gaussian window (sigma 1.5), zero padding so the map keeps
/// the input size, and stability constants for a dynamic range of 2.
pub fn ssim<T: Scalar>(pred: &[T], target: &[T], channels: usize, h: usize, w: usize) -> (T, Vec<T>) {
    let taps: Vec<T> = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
        .into_iter()
        .map(T::of)
        .collect();
    let c1 = T::of((0.01 * SSIM_RANGE).powi(2));
    let c2 = T::of((0.03 * SSIM_RANGE).powi(2));
    let plane = h * w;
    let n = T::of((channels * plane) as f64);
    let two = T::of(2.0);
    let mut tmp = vec![T::zero(); plane];
    let mut buf = |src: &[T]| {
        let mut out = vec![T::zero(); plane];
        filter_plane(src, h, w, &taps, &mut tmp, &mut out);
        out
    };
    let mut total = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for c in 0..channels {
        let x = &pred[c * plane..(c + 1) * plane];
        let y = &target[c * plane..(c + 1) * plane];
        let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
        let (mx, my) = (buf(x), buf(y));
        let (sxx, syy, sxy) = (buf(&xx), buf(&yy), buf(&xy));
        let mut g_mu = vec![T::zero(); plane];
        let mut g_sxx = vec![T::zero(); plane];
        let mut g_sxy = vec![T::zero(); plane];
        for i in 0..plane {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = two * ux * uy + c1;
            let a2 = two * (sxy[i] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = (sxx[i] - ux * ux) + (syy[i] - uy * uy) + c2;
            let den = b1 * b2;
            let s = a1 * a2 / den;
            total += s;
            let d_a1 = a2 / den;
            let d_a2 = a1 / den;
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            // loss = 1 - mean(s): flip sign and scale by 1/n
            let k = -T::one() / n;
            g_mu[i] = k * (two * uy * d_a1 - two * uy * d_a2 + two * ux * d_b1 - two * ux * d_b2);
            g_sxx[i] = k * d_b2;
            g_sxy[i] = k * two * d_a2;
        }
        // symmetric kernel + zero padding: the filter is self-adjoint
        let (f_mu, f_xx, f_xy) = (buf(&g_mu), buf(&g_sxx), buf(&g_sxy));
        for i in 0..plane {
            grad[c * plane + i] = f_mu[i] + two * x[i] * f_xx[i] + y[i] * f_xy[i];
        }
    }
    (T::one() - total / n, grad)
}

/// Pieces of one reverse transition needed for the consistency loss.
pub struct StepTargets<'a, T> {
    pub x_t: &'a [T],
    /// Ground-truth `x_{t-1}`.
    pub x_prev: &'a [T],
    pub delta_beta: T,
    pub channels: usize,
}

/// MSE between the clamped predicted `x_{t-1}` and its ground truth.
/// Returns gradients w.r.t. `(mask, anomaly, normal)`.
pub fn consistency<T: Scalar>(
    mask: &[T],
    anomaly: &[T],
    normal: &[T],
    st: &StepTargets<'_, T>,
) -> (T, [Vec<T>; 3]) {
    let plane = mask.len();
    let n = T::of(st.x_t.len() as f64);
    let two = T::of(2.0);
    let lo = -T::one();
    let d = st.delta_beta;
    let mut sum = T::zero();
    let mut g_m = vec![T::zero(); plane];
    let mut g_a = vec![T::zero(); anomaly.len()];
    let mut g_n = vec![T::zero(); normal.len()];
    for i in 0..st.x_t.len() {
        let p = i % plane;
        let m = mask[p];
        let raw = st.x_t[i] - d * (m * anomaly[i]) + d * (m * normal[i]);
        let v = raw.max(lo).min(T::one());
        let r = v - st.x_prev[i];
        sum += r * r;
        if raw < lo || raw > T::one() {
            continue;
        }
        let g = two * r / n;
        g_a[i] = -g * d * m;
        g_n[i] = g * d * m;
        g_m[p] += g * d * (normal[i] - anomaly[i]);
    }
    debug_assert_eq!(st.x_t.len(), plane * st.channels);
    (sum / n, [g_m, g_a, g_n])
}

// ---------------------------------------------------------------------------
// Evaluation helpers on domain types
// ---------------------------------------------------------------------------

pub fn ssim_loss(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    pred.ensure_same_dims(target, "ssim_loss")?;
    Ok(ssim(pred.data(), target.data(), pred.channels(), pred.height(), pred.width()).0)
}

/// SSIM term plus mean absolute error.
pub fn normal_loss(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    let s = ssim_loss(pred, target)?;
    Ok(s + l1(pred.data(), target.data()).0)
}

pub fn focal_loss(pred: &AnomalyMask, target: &AnomalyMask, gamma: f64) -> Result<f64> {
    pred.ensure_same_dims(target, "focal_loss")?;
    Ok(focal(pred.data(), target.data(), gamma).0)
}

/// `5 * focal + smooth_l1`.
pub fn mask_loss(pred: &AnomalyMask, target: &AnomalyMask) -> Result<f64> {
    pred.ensure_same_dims(target, "mask_loss")?;
    let f = focal(pred.data(), target.data(), FOCAL_GAMMA).0;
    Ok(FOCAL_WEIGHT * f + smooth_l1(pred.data(), target.data()).0)
}

pub fn anomaly_loss(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    pred.ensure_same_dims(target, "anomaly_loss")?;
    Ok(mse(pred.data(), target.data()).0)
}

/// Predicted head outputs for one sample.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub mask: AnomalyMask,
    pub anomaly: ImageTensor,
    pub normal: ImageTensor,
}

/// Ground truth decomposition of one training sample.
#[derive(Debug, Clone, Copy)]
pub struct Decomposition<'a> {
    pub mask: &'a AnomalyMask,
    pub anomaly: &'a ImageTensor,
    pub normal: &'a ImageTensor,
}

pub fn consistency_loss(
    x_t: &ImageTensor,
    preds: &HeadOutputs,
    gt: Decomposition<'_>,
    schedule: &TransparencySchedule,
    t: usize,
) -> Result<f64> {
    ensure_domain!(t >= 1, "consistency loss needs t >= 1");
    x_t.ensure_same_dims(&preds.anomaly, "consistency_loss anomaly")?;
    x_t.ensure_same_dims(&preds.normal, "consistency_loss normal")?;
    x_t.ensure_mask_dims(&preds.mask, "consistency_loss")?;
    let x_prev = forward_sample(gt.normal, gt.anomaly, gt.mask, schedule, t - 1)?;
    let st = StepTargets {
        x_t: x_t.data(),
        x_prev: x_prev.data(),
        delta_beta: schedule.delta(t)?,
        channels: x_t.channels(),
    };
    Ok(consistency(preds.mask.data(), preds.anomaly.data(), preds.normal.data(), &st).0)
}

/// All four terms for one sample.
pub fn loss_breakdown(
    x_t: &ImageTensor,
    preds: &HeadOutputs,
    gt: Decomposition<'_>,
    schedule: &TransparencySchedule,
    t: usize,
) -> Result<LossBreakdown> {
    ensure_shape!(preds.normal.same_dims(gt.normal), "prediction/ground-truth dims differ");
    Ok(LossBreakdown::new(
        normal_loss(&preds.normal, gt.normal)?,
        mask_loss(&preds.mask, gt.mask)?,
        anomaly_loss(&preds.anomaly, gt.anomaly)?,
        consistency_loss(x_t, preds, gt, schedule, t)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn check_grad(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x: &[f64]) {
        let (_, g) = f(x);
        let h = 1e-6;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp).0;
            xp[i] = x[i] - h;
            let dn = f(&xp).0;
            xp[i] = x[i];
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-8 + 1e-4 * fd.abs().max(g[i].abs()),
                "component {i}: fd {fd} analytic {}",
                g[i]
            );
        }
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_vec(&mut rng, 2 * 36, -1.0, 1.0);
        let x = rand_vec(&mut rng, 2 * 36, -1.0, 1.0);
        check_grad(|p| mse(p, &y), &x);
        check_grad(|p| l1(p, &y), &x);
        check_grad(|p| smooth_l1(p, &y), &x.iter().map(|v| v * 2.5).collect::<Vec<_>>());
        check_grad(|p| ssim(p, &y, 2, 6, 6), &x);
        let probs = rand_vec(&mut rng, 36, 0.05, 0.95);
        let labels: Vec<f64> = (0..36).map(|i| (i % 3 == 0) as u8 as f64).collect();
        check_grad(|p| focal(p, &labels, 2.0), &probs);
        check_grad(|p| focal(p, &labels, 0.0), &probs);
    }

    #[test]
    fn consistency_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = rand_vec(&mut rng, 3 * 16, -0.8, 0.8);
        let x_prev = rand_vec(&mut rng, 3 * 16, -0.8, 0.8);
        let m = rand_vec(&mut rng, 16, 0.0, 1.0);
        let a = rand_vec(&mut rng, 48, -1.0, 1.0);
        let n = rand_vec(&mut rng, 48, -1.0, 1.0);
        let st = StepTargets {
            x_t: &x_t,
            x_prev: &x_prev,
            delta_beta: 0.25,
            channels: 3,
        };
        let (_, [gm, ga, gn]) = consistency(&m, &a, &n, &st);
        check_grad(|p| { let (v, g) = consistency(p, &a, &n, &st); (v, g[0].clone()) }, &m);
        check_grad(|p| { let (v, g) = consistency(&m, p, &n, &st); (v, g[1].clone()) }, &a);
        check_grad(|p| { let (v, g) = consistency(&m, &a, p, &st); (v, g[2].clone()) }, &n);
        assert_eq!((gm.len(), ga.len(), gn.len()), (16, 48, 48));
    }

    #[test]
    fn ssim_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ImageTensor::from_vec(3, 8, 8, rand_vec(&mut rng, 192, -1.0, 1.0)).unwrap();
        assert!(ssim_loss(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn focal_closed_form_at_half() {
        let p = AnomalyMask::filled(4, 4, 0.5);
        let y = AnomalyMask::from_fn(4, 4, |r, c| ((r + c) % 2) as f64);
        let v = focal_loss(&p, &y, 2.0).unwrap();
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_of_perfect_prediction_vanishes() {
        let y = AnomalyMask::from_fn(4, 4, |r, _| (r < 2) as u8 as f64);
        assert!(focal_loss(&y, &y, 2.0).unwrap() < 1e-5);
        assert!(mask_loss(&y, &y).unwrap() < 1e-5);
    }

    #[test]
    fn smooth_l1_quadratic_branch() {
        let p = AnomalyMask::filled(3, 3, 0.5);
        let y = AnomalyMask::zeros(3, 3);
        assert_eq!(smooth_l1(p.data(), y.data()).0, 0.125);
    }

    #[test]
    fn constant_offsets() {
        let y = ImageTensor::from_fn(3, 8, 8, |c, r, x| ((c + r * x) % 7) as f64 / 7.0 - 0.5);
        let shifted = y.map(|v| v + 0.2);
        assert!((anomaly_loss(&shifted, &y).unwrap() - 0.04).abs() < 1e-12);
        let shifted = y.map(|v| v + 0.1);
        assert!((l1(shifted.data(), y.data()).0 - 0.1).abs() < 1e-12);
        let expect = ssim_loss(&shifted, &y).unwrap() + 0.1;
        assert!((normal_loss(&shifted, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn consistency_with_perfect_predictions() {
        let s = make_schedule(ScheduleShape::Linear, 20).unwrap();
        let n = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c + y + x) % 5) as f64 / 5.0 - 0.4);
        let a = ImageTensor::from_fn(3, 8, 8, |c, y, x| 0.6 - ((c * y + x) % 4) as f64 / 4.0);
        let m = AnomalyMask::from_fn(8, 8, |y, x| (y > 2 && x < 5) as u8 as f64);
        let gt = Decomposition {
            mask: &m,
            anomaly: &a,
            normal: &n,
        };
        for t in 1..=20 {
            let x_t = forward_sample(&n, &a, &m, &s, t).unwrap();
            let preds = HeadOutputs {
                mask: m.clone(),
                anomaly: a.clone(),
                normal: n.clone(),
            };
            assert!(consistency_loss(&x_t, &preds, gt, &s, t).unwrap() < 1e-10);
        }
        let x_t = forward_sample(&n, &a, &m, &s, 20).unwrap();
        assert!(consistency_loss(
            &x_t,
            &HeadOutputs {
                mask: m.clone(),
                anomaly: a.clone(),
                normal: n.clone()
            },
            gt,
            &s,
            0
        )
        .is_err());
    }

    #[test]
    fn breakdown_total_is_sum() {
        let b = LossBreakdown::new(0.3, 1.25, 0.01, 0.002);
        assert_eq!(b.total, 0.3 + 1.25 + 0.01 + 0.002);
    }
}
