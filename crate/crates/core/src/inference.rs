//! Reverse process on test images, mask accumulation and fusion into the
//! final anomaly map and image score.

use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_step, TransparencySchedule};
use crate::error::{ensure_domain, Result};
use crate::losses::HeadOutputs;
use crate::model::DenoiserModel;
use crate::nn::Scalar;
use crate::raster::{AnomalyMask, ImageTensor};

/// Anything that maps `(x_t, previous mask, t)` to the three head outputs.
pub trait Predictor {
    fn predict_step(&self, x_t: &ImageTensor, prev_mask: &AnomalyMask, t: usize) -> Result<HeadOutputs>;
}

impl<T: Scalar> Predictor for DenoiserModel<T> {
    fn predict_step(&self, x_t: &ImageTensor, prev_mask: &AnomalyMask, t: usize) -> Result<HeadOutputs> {
        DenoiserModel::predict_step(self, x_t, prev_mask, t)
    }
}

/// Returns a fixed, known decomposition at every step.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub mask: AnomalyMask,
    pub anomaly: ImageTensor,
    pub normal: ImageTensor,
}

impl Predictor for OracleModel {
    fn predict_step(&self, x_t: &ImageTensor, _prev: &AnomalyMask, _t: usize) -> Result<HeadOutputs> {
        x_t.ensure_same_dims(&self.normal, "oracle")?;
        Ok(HeadOutputs {
            mask: self.mask.clone(),
            anomaly: self.anomaly.clone(),
            normal: self.normal.clone(),
        })
    }
}

/// Predicts an empty mask and echoes the input as both appearances.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroMaskModel;

impl Predictor for ZeroMaskModel {
    fn predict_step(&self, x_t: &ImageTensor, _prev: &AnomalyMask, _t: usize) -> Result<HeadOutputs> {
        Ok(HeadOutputs {
            mask: AnomalyMask::zeros(x_t.height(), x_t.width()),
            anomaly: x_t.clone(),
            normal: x_t.clone(),
        })
    }
}

/// Values `>= tau` become 1, the rest 0.
pub fn binarize(mask: &AnomalyMask, tau: f64) -> AnomalyMask {
    let mut out = mask.clone();
    for v in out.data_mut() {
        *v = if *v >= tau { 1.0 } else { 0.0 };
    }
    out
}

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.95;
pub const DEFAULT_KERNEL: usize = 7;

/// Output of the reverse process before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseTrace {
    /// `x_T, x_{T-1}, .., x_1`: the input to each step.
    pub states: Vec<ImageTensor>,
    /// Soft `M_t` in the same order.
    pub masks: Vec<AnomalyMask>,
    pub x0: ImageTensor,
    /// Threshold used to turn each mask into the next step's input.
    pub tau: f64,
}

impl ReverseTrace {
    pub fn input(&self) -> &ImageTensor {
        &self.states[0]
    }

    pub fn steps(&self) -> usize {
        self.masks.len()
    }
}

/// Runs `T = schedule.steps()` reverse steps from `x`. The first step sees an
/// all-zero mask; later steps see the previous prediction binarized at `tau`.
/// With `model_steps`, the model is queried at `round(t * model_steps / T)`
/// so a network trained on another step count sees matching transparencies.
pub fn run_reverse(
    predictor: &dyn Predictor,
    x: &ImageTensor,
    schedule: &TransparencySchedule,
    tau: f64,
    model_steps: Option<usize>,
) -> Result<ReverseTrace> {
    let steps = schedule.steps();
    let mut states = Vec::with_capacity(steps);
    let mut masks = Vec::with_capacity(steps);
    let mut prev = AnomalyMask::zeros(x.height(), x.width());
    let mut cur = x.clone();
    for t in (1..=steps).rev() {
        let model_t = match model_steps {
            Some(ms) if ms != steps => ((t * ms) as f64 / steps as f64).round().max(1.0) as usize,
            _ => t,
        };
        let out = predictor.predict_step(&cur, &prev, model_t)?;
        let next = reverse_step(&cur, &out.mask, &out.anomaly, &out.normal, schedule, t)?;
        prev = binarize(&out.mask, tau);
        states.push(std::mem::replace(&mut cur, next));
        masks.push(out.mask);
    }
    Ok(ReverseTrace {
        states,
        masks,
        x0: cur,
        tau,
    })
}

/// Which masks feed the discriminative map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscSource {
    /// Mean of the soft masks over all steps.
    #[default]
    MeanSoft,
    /// Mean of the binarized masks over all steps.
    MeanBinarized,
    /// Only the last step's mask (`M_1`).
    LastOnly,
}

/// The default kernel rescaled from a 224-pixel image to `size`, rounded to
/// the nearest odd size (at least 1).
pub fn kernel_for_size(size: usize) -> usize {
    let k = (DEFAULT_KERNEL as f64 * size as f64 / 224.0).round() as usize;
    if k.is_multiple_of(2) {
        (k + 1).max(1)
    } else {
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
    pub kernel: usize,
    pub disc: DiscSource,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            kernel: DEFAULT_KERNEL,
            disc: DiscSource::MeanSoft,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedMasks {
    pub m_disc: AnomalyMask,
    pub m_recon: AnomalyMask,
    pub m_final: AnomalyMask,
    pub score: f64,
}

pub fn disc_mask(trace: &ReverseTrace, source: DiscSource) -> Result<AnomalyMask> {
    ensure_domain!(!trace.masks.is_empty(), "trace holds no masks");
    let first = &trace.masks[0];
    Ok(match source {
        DiscSource::LastOnly => trace.masks[trace.masks.len() - 1].clone(),
        DiscSource::MeanSoft | DiscSource::MeanBinarized => {
            let mut acc = vec![0.0; first.len()];
            for m in &trace.masks {
                let m = if source == DiscSource::MeanBinarized {
                    binarize(m, trace.tau)
                } else {
                    m.clone()
                };
                for (a, v) in acc.iter_mut().zip(m.data()) {
                    *a += v;
                }
            }
            let n = trace.masks.len() as f64;
            AnomalyMask::from_vec(first.height(), first.width(), acc.into_iter().map(|v| v / n).collect())?
        }
    })
}

/// Channel-mean squared difference scaled by 1/4, so a full `[-1, 1]`
/// swing maps to 1.
pub fn recon_mask(x: &ImageTensor, x0: &ImageTensor) -> Result<AnomalyMask> {
    x.ensure_same_dims(x0, "recon_mask")?;
    let plane = x.plane_len();
    let c = x.channels() as f64;
    let mut out = vec![0.0; plane];
    for (i, (a, b)) in x.data().iter().zip(x0.data()).enumerate() {
        out[i % plane] += (a - b) * (a - b);
    }
    AnomalyMask::from_vec(x.height(), x.width(), out.into_iter().map(|v| v / c / 4.0).collect())
}

/// `n x n` box average with zero padding.
pub fn mean_filter(mask: &AnomalyMask, n: usize) -> Result<AnomalyMask> {
    ensure_domain!(n % 2 == 1, "mean filter size must be odd, got {n}");
    let (h, w) = (mask.height(), mask.width());
    let r = n / 2;
    let src = mask.data();
    // separable box sums; terms outside the image are zero
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = src[y * w + x.saturating_sub(r)..y * w + (x + r + 1).min(w)].iter().sum();
        }
    }
    let area = (n * n) as f64;
    Ok(AnomalyMask::from_fn(h, w, |y, x| {
        let s: f64 = (y.saturating_sub(r)..(y + r + 1).min(h)).map(|yy| rows[yy * w + x]).sum();
        s / area
    }))
}

fn finish(m_disc: AnomalyMask, m_recon: AnomalyMask, combined: &AnomalyMask, kernel: usize) -> Result<FusedMasks> {
    let m_final = mean_filter(combined, kernel)?;
    let score = m_final.max();
    Ok(FusedMasks {
        m_disc,
        m_recon,
        m_final,
        score,
    })
}

/// `mean_filter(lambda * M_disc + (1 - lambda) * M_recon)` and its maximum.
pub fn fuse_masks(trace: &ReverseTrace, cfg: &FusionConfig) -> Result<FusedMasks> {
    let lambda = cfg.lambda;
    ensure_domain!((0.0..=1.0).contains(&lambda), "lambda must be in [0, 1], got {lambda}");
    ensure_domain!(cfg.kernel % 2 == 1, "kernel must be odd, got {}", cfg.kernel);
    let d = disc_mask(trace, cfg.disc)?;
    let r = recon_mask(trace.input(), &trace.x0)?;
    let combined = AnomalyMask::from_vec(
        d.height(),
        d.width(),
        d.data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
    )?;
    finish(d, r, &combined, cfg.kernel)
}

/// Single-source ablations computed without the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    OnlyDisc,
    OnlyRecon,
    OnlyLast,
}

pub fn fuse_ablation(trace: &ReverseTrace, which: Ablation, kernel: usize) -> Result<FusedMasks> {
    let r = recon_mask(trace.input(), &trace.x0)?;
    match which {
        Ablation::OnlyDisc => {
            let d = disc_mask(trace, DiscSource::MeanSoft)?;
            let m = d.clone();
            finish(d, r, &m, kernel)
        }
        Ablation::OnlyLast => {
            let d = disc_mask(trace, DiscSource::LastOnly)?;
            let m = d.clone();
            finish(d, r, &m, kernel)
        }
        Ablation::OnlyRecon => {
            let d = disc_mask(trace, DiscSource::MeanSoft)?;
            let m = r.clone();
            finish(d, r, &m, kernel)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub reverse: ReverseTrace,
    pub fused: FusedMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub tau: f64,
    pub lambda: f64,
    pub kernel: usize,
    pub disc: DiscSource,
    /// Step count the model was trained with, if different from the
    /// schedule used here.
    pub model_steps: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        Self {
            tau: DEFAULT_TAU,
            lambda: f.lambda,
            kernel: f.kernel,
            disc: f.disc,
            model_steps: None,
        }
    }
}

impl InferenceConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            lambda: self.lambda,
            kernel: self.kernel,
            disc: self.disc,
        }
    }
}

pub fn infer(
    predictor: &dyn Predictor,
    x: &ImageTensor,
    schedule: &TransparencySchedule,
    cfg: &InferenceConfig,
) -> Result<InferenceTrace> {
    let reverse = run_reverse(predictor, x, schedule, cfg.tau, cfg.model_steps)?;
    let fused = fuse_masks(&reverse, &cfg.fusion())?;
    Ok(InferenceTrace { reverse, fused })
}

/// [`infer`] over many images, concurrently when the `parallel` feature is on.
pub fn infer_all<P: Predictor + Sync>(
    predictor: &P,
    images: &[ImageTensor],
    schedule: &TransparencySchedule,
    cfg: &InferenceConfig,
) -> Result<Vec<InferenceTrace>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        images.par_iter().map(|x| infer(predictor, x, schedule, cfg)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        images.iter().map(|x| infer(predictor, x, schedule, cfg)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{compose, make_schedule, ScheduleShape};
    use proptest::prelude::*;

    fn scene(h: usize, w: usize, r: usize) -> (ImageTensor, ImageTensor, AnomalyMask) {
        let normal = ImageTensor::from_fn(3, h, w, |c, y, x| ((x * 3 + y + c) % 7) as f64 / 3.5 - 1.0);
        let anomaly = ImageTensor::from_fn(3, h, w, |c, y, x| if (x + y + c) % 2 == 0 { 0.9 } else { -0.9 });
        let mask = AnomalyMask::from_fn(h, w, |y, x| if y >= 2 && y < 2 + r && x >= 3 && x < 3 + r { 1.0 } else { 0.0 });
        (normal, anomaly, mask)
    }

    #[test]
    fn binarize_ties_go_up_and_is_idempotent() {
        let m = AnomalyMask::from_vec(1, 3, vec![0.2, 0.5, 0.8]).unwrap();
        let b = binarize(&m, 0.5);
        assert_eq!(b.data(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize(&b, 0.5), b);
        assert_eq!(binarize(&AnomalyMask::filled(2, 2, 0.49), 0.5).max(), 0.0);
    }

    #[test]
    fn oracle_restores_clean_image() {
        let (n, a, m) = scene(12, 12, 5);
        let s = make_schedule(ScheduleShape::Linear, 20).unwrap();
        let x = compose(&n, &a, &m, 1.0).unwrap();
        let oracle = OracleModel {
            mask: m.clone(),
            anomaly: a,
            normal: n.clone(),
        };
        let tr = run_reverse(&oracle, &x, &s, DEFAULT_TAU, None).unwrap();
        assert_eq!(tr.steps(), 20);
        assert!(tr.x0.max_abs_diff(&n) < 1e-4);
        for (i, (&xv, &x0v)) in x.data().iter().zip(tr.x0.data()).enumerate() {
            if m.data()[i % 144] == 0.0 {
                assert_eq!(xv, x0v);
            }
        }
    }

    #[test]
    fn zero_mask_model_keeps_input() {
        let (n, _, _) = scene(8, 8, 2);
        let s = make_schedule(ScheduleShape::Root, 6).unwrap();
        let t = infer(&ZeroMaskModel, &n, &s, &InferenceConfig::default()).unwrap();
        assert_eq!(t.reverse.x0, n);
        assert_eq!(t.fused.m_disc.max(), 0.0);
        assert_eq!(t.fused.m_recon.max(), 0.0);
        assert_eq!(t.fused.score, 0.0);
    }

    #[test]
    fn disc_is_exact_mean() {
        let masks: Vec<AnomalyMask> = (0..4).map(|k| AnomalyMask::filled(2, 2, k as f64 * 0.25)).collect();
        let tr = ReverseTrace {
            states: vec![ImageTensor::zeros(1, 2, 2); 4],
            masks,
            x0: ImageTensor::zeros(1, 2, 2),
            tau: 0.5,
        };
        assert_eq!(disc_mask(&tr, DiscSource::MeanSoft).unwrap().data(), &[0.375; 4]);
        assert_eq!(disc_mask(&tr, DiscSource::MeanBinarized).unwrap().data(), &[0.5; 4]);
        assert_eq!(disc_mask(&tr, DiscSource::LastOnly).unwrap().data(), &[0.75; 4]);
    }

    #[test]
    fn uniform_maps_score_their_value() {
        let c = 0.3;
        let tr = ReverseTrace {
            states: vec![ImageTensor::zeros(1, 16, 16)],
            masks: vec![AnomalyMask::filled(16, 16, c)],
            // (x - x0)^2 / 4 = c
            x0: ImageTensor::filled(1, 16, 16, -(4.0 * c).sqrt()),
            tau: 0.5,
        };
        let f = fuse_masks(&tr, &FusionConfig::default()).unwrap();
        assert!((f.score - c).abs() < 1e-12);
    }

    #[test]
    fn fusion_rejects_bad_parameters() {
        let tr = ReverseTrace {
            states: vec![ImageTensor::zeros(1, 4, 4)],
            masks: vec![AnomalyMask::zeros(4, 4)],
            x0: ImageTensor::zeros(1, 4, 4),
            tau: 0.5,
        };
        let bad = |lambda, kernel| {
            fuse_masks(
                &tr,
                &FusionConfig {
                    lambda,
                    kernel,
                    ..FusionConfig::default()
                },
            )
            .is_err()
        };
        assert!(bad(1.5, 7));
        assert!(bad(-0.1, 7));
        assert!(bad(0.5, 4));
        assert!(!bad(0.5, 1));
    }

    #[test]
    fn kernel_scales_with_resolution() {
        assert_eq!(kernel_for_size(224), 7);
        assert_eq!(kernel_for_size(32), 1);
        assert_eq!(kernel_for_size(64), 3);
        assert_eq!(kernel_for_size(448), 15);
    }

    #[test]
    fn mean_filter_zero_pads() {
        let m = AnomalyMask::ones(5, 5);
        let f = mean_filter(&m, 3).unwrap();
        assert_eq!(f.get(2, 2), 1.0);
        assert!((f.get(0, 0) - 4.0 / 9.0).abs() < 1e-15);
        assert!((f.get(0, 2) - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(mean_filter(&m, 1).unwrap(), m);
    }

    proptest! {
        #[test]
        fn larger_region_never_lowers_oracle_score(r in 1usize..6, extra in 1usize..3) {
            let s = make_schedule(ScheduleShape::Linear, 5).unwrap();
            let score = |r: usize| {
                let (n, a, m) = scene(12, 12, r);
                let x = compose(&n, &a, &m, 1.0).unwrap();
                let o = OracleModel { mask: m, anomaly: a, normal: n };
                infer(&o, &x, &s, &InferenceConfig::default()).unwrap().fused.score
            };
            prop_assert!(score(r + extra) >= score(r) - 1e-12);
        }
    }
}
