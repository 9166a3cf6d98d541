//! Synthetic anomalies for training: Perlin-thresholded masks, out-of-distribution
//! appearance sources, transparency-aware compositing, and simulated imperfect
//! previous-step mask estimates.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, TransparencySchedule};
use crate::error::{ensure_domain, Error, Result};
use crate::noise::{perlin_noise_with_cells, PerlinField};
use crate::raster::{AnomalyMask, ImageTensor};
use crate::rng::{derive_seed, rng_for};

/// Attempts at a fresh threshold before falling back to a fixed rectangle.
pub const MASK_RESAMPLE_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub octaves: usize,
    /// First-octave lattice cells are `2^k`, `k` drawn from this range.
    pub min_cells_log2: u32,
    pub max_cells_log2: u32,
    /// Bounds on the fraction of the image covered by a synthetic anomaly.
    pub min_area: f64,
    pub max_area: f64,
    /// Probability of taking the appearance from the image itself.
    pub self_augment_prob: f64,
    pub prev_mask_dropout: f64,
    /// Threshold perturbation for the simulated previous mask, as a fraction
    /// of the noise field's value range.
    pub prev_mask_delta: f64,
    /// Random quarter-turn rotation of normal images before compositing.
    pub rotate: bool,
    /// Count of built-in procedural textures when no directory is given.
    pub procedural_textures: usize,
    pub texture_dir: Option<PathBuf>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            octaves: 2,
            min_cells_log2: 1,
            max_cells_log2: 3,
            min_area: 0.02,
            max_area: 0.5,
            self_augment_prob: 0.5,
            prev_mask_dropout: 0.25,
            prev_mask_delta: 0.2,
            rotate: true,
            procedural_textures: 64,
            texture_dir: None,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.octaves == 0 {
            return bad("synthesis.octaves must be >= 1");
        }
        if self.min_cells_log2 > self.max_cells_log2 {
            return bad("synthesis.min_cells_log2 exceeds max_cells_log2");
        }
        if !(0.0 < self.min_area && self.min_area <= self.max_area && self.max_area <= 1.0) {
            return bad("synthesis area bounds must satisfy 0 < min <= max <= 1");
        }
        for (name, p) in [
            ("self_augment_prob", self.self_augment_prob),
            ("prev_mask_dropout", self.prev_mask_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synthesis.{name} must be a probability")));
            }
        }
        if self.prev_mask_delta < 0.0 {
            return bad("synthesis.prev_mask_delta must be >= 0");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// `field > threshold` as a binary mask.
pub fn threshold_mask(field: &PerlinField, threshold: f64) -> AnomalyMask {
    AnomalyMask::from_vec(
        field.height(),
        field.width(),
        field
            .values()
            .iter()
            .map(|&v| if v > threshold { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("field dims")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDraw {
    pub mask: AnomalyMask,
    /// Threshold that produced the mask; `None` for the rectangle fallback.
    pub threshold: Option<f64>,
}

/// Thresholds the field; empty results are retried with thresholds drawn
/// uniformly from the field's range, then replaced by a centred rectangle.
pub fn generate_mask(field: &PerlinField, threshold: f64, rng: &mut impl Rng) -> MaskDraw {
    let mask = threshold_mask(field, threshold);
    if mask.area() > 0 {
        return MaskDraw {
            mask,
            threshold: Some(threshold),
        };
    }
    let (lo, hi) = (field.min(), field.max());
    for _ in 0..MASK_RESAMPLE_ATTEMPTS {
        let thr = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let mask = threshold_mask(field, thr);
        if mask.area() > 0 {
            return MaskDraw {
                mask,
                threshold: Some(thr),
            };
        }
    }
    MaskDraw {
        mask: fallback_rectangle(field.height(), field.width()),
        threshold: None,
    }
}

/// Centred rectangle covering half of each axis.
pub fn fallback_rectangle(height: usize, width: usize) -> AnomalyMask {
    let (y0, y1) = (height / 4, height / 4 + (height / 2).max(1));
    let (x0, x1) = (width / 4, width / 4 + (width / 2).max(1));
    AnomalyMask::from_fn(height, width, |y, x| {
        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

/// A fresh Perlin field drawn with the configured lattice range.
pub fn sample_field(height: usize, width: usize, cfg: &SynthesisConfig, rng: &mut impl Rng) -> Result<PerlinField> {
    let k = rng.random_range(cfg.min_cells_log2..=cfg.max_cells_log2);
    perlin_noise_with_cells(height, width, rng.random(), cfg.octaves, 1 << k)
}

/// Draws a field and a threshold whose mask area lies in the configured range.
pub fn sample_anomaly_mask(
    height: usize,
    width: usize,
    cfg: &SynthesisConfig,
    rng: &mut impl Rng,
) -> Result<(PerlinField, MaskDraw)> {
    let field = sample_field(height, width, cfg, rng)?;
    let area = rng.random_range(cfg.min_area..=cfg.max_area);
    let threshold = field.quantile(1.0 - area);
    let mut draw = generate_mask(&field, threshold, rng);
    if draw.mask.area_fraction() > cfg.max_area {
        // ties at the quantile can overshoot; tighten to the next value up
        let thr = field.quantile(1.0 - cfg.max_area);
        let mask = threshold_mask(&field, thr);
        draw = if mask.area() > 0 {
            MaskDraw {
                mask,
                threshold: Some(thr),
            }
        } else {
            generate_mask(&field, f64::INFINITY, rng)
        };
    }
    Ok((field, draw))
}

/// Mask from the same field at `threshold + delta`.
pub fn perturbed_mask(field: &PerlinField, threshold: f64, delta: f64) -> AnomalyMask {
    threshold_mask(field, threshold + delta)
}

/// An imperfect previous-step estimate of the mask made from `field` at
/// `gt_threshold`: dropped to all zeros with probability `dropout`, otherwise
/// re-thresholded at a uniformly perturbed level.
pub fn simulate_prev_mask(
    field: &PerlinField,
    gt_threshold: f64,
    dropout: f64,
    delta_frac: f64,
    rng: &mut impl Rng,
) -> AnomalyMask {
    if rng.random::<f64>() < dropout {
        return AnomalyMask::zeros(field.height(), field.width());
    }
    let span = (field.max() - field.min()) * delta_frac;
    let delta = if span > 0.0 { rng.random_range(-span..=span) } else { 0.0 };
    perturbed_mask(field, gt_threshold, delta)
}

// ---------------------------------------------------------------------------
// Appearance sources
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TexturePool {
    textures: Vec<ImageTensor>,
}

impl TexturePool {
    pub fn new(textures: Vec<ImageTensor>) -> Result<Self> {
        if textures.is_empty() {
            return Err(Error::Config("texture pool is empty".into()));
        }
        Ok(Self { textures })
    }

    /// Built-in textures: checkerboards, stripes, coloured noise, and flat
    /// colour fields with a gradient.
    pub fn procedural(count: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        ensure_domain!(count > 0, "procedural texture count must be positive");
        let textures = (0..count)
            .map(|i| {
                let mut rng = rng_for(&[seed, i as u64]);
                procedural_texture(i % 4, height, width, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(textures)
    }

    pub fn len(&self) -> usize {
        self.textures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.textures.is_empty()
    }

    pub fn textures(&self) -> &[ImageTensor] {
        &self.textures
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ]
}

fn procedural_texture(kind: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let a = random_color(rng);
    let b = random_color(rng);
    let mix = |c: usize, t: f64| a[c] + (b[c] - a[c]) * t;
    Ok(match kind {
        0 => {
            let cell = rng.random_range(2..=(h.min(w) / 4).max(2));
            ImageTensor::from_fn(3, h, w, |c, y, x| mix(c, (((y / cell) + (x / cell)) % 2) as f64))
        }
        1 => {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(3.0..(h.min(w) as f64 / 2.0).max(4.0));
            let (s, co) = angle.sin_cos();
            ImageTensor::from_fn(3, h, w, |c, y, x| {
                let u = (x as f64 * co + y as f64 * s) / period;
                mix(c, 0.5 + 0.5 * (u * std::f64::consts::TAU).sin())
            })
        }
        2 => {
            let field = perlin_noise_with_cells(h, w, rng.random(), 3, rng.random_range(2..=6))?;
            let (lo, hi) = (field.min(), field.max());
            let span = (hi - lo).max(1e-9);
            ImageTensor::from_fn(3, h, w, |c, y, x| mix(c, (field.get(y, x) - lo) / span))
        }
        _ => {
            let gy = rng.random_range(-0.5..0.5);
            let gx = rng.random_range(-0.5..0.5);
            ImageTensor::from_fn(3, h, w, |c, y, x| {
                let t = 0.5 + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
                mix(c, t)
            })
        }
    })
}

/// Brightness/contrast/inversion/channel-order perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub invert: bool,
    pub channel_order: [usize; 3],
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 1.0,
        invert: false,
        channel_order: [0, 1, 2],
    };

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut order = [0, 1, 2];
        order.shuffle(rng);
        Self {
            brightness: rng.random_range(-0.3..=0.3),
            contrast: rng.random_range(0.6..=1.4),
            invert: rng.random_bool(0.3),
            channel_order: order,
        }
    }

    /// A jitter guaranteed to change colours: either inverted or permuted.
    pub fn random_visible(rng: &mut impl Rng) -> Self {
        let mut j = Self::random(rng);
        if !j.invert && j.channel_order == [0, 1, 2] {
            j.channel_order = [2, 0, 1];
        }
        j
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let permute = img.channels() == 3;
        ImageTensor::from_fn(img.channels(), img.height(), img.width(), |c, y, x| {
            let src = if permute { self.channel_order[c] } else { c };
            let mut v = img.get(src, y, x);
            if self.invert {
                v = -v;
            }
            (v * self.contrast + self.brightness).clamp(-1.0, 1.0)
        })
    }
}

/// Rotated and colour-jittered copy of the normal image itself.
pub fn self_augment(normal: &ImageTensor, quarters: usize, jitter: &ColorJitter) -> ImageTensor {
    let rotated = if normal.height() == normal.width() || quarters.is_multiple_of(2) {
        normal.rotate90(quarters)
    } else {
        normal.rotate90(2)
    };
    jitter.apply(&rotated)
}

/// Bilinear resampling to `h x w` (pixel-centre aligned).
pub fn resize_bilinear(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    if img.height() == h && img.width() == w {
        return img.clone();
    }
    let sy = img.height() as f64 / h as f64;
    let sx = img.width() as f64 / w as f64;
    let coord = |o: usize, s: f64, n: usize| {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n - 1), p - i0 as f64)
    };
    ImageTensor::from_fn(img.channels(), h, w, |c, y, x| {
        let (y0, y1, fy) = coord(y, sy, img.height());
        let (x0, x1, fx) = coord(x, sx, img.width());
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Anomaly appearance with the dims of `normal`: an augmented pool texture,
/// or (with probability `self_augment_prob`) a self-augmented copy of `normal`.
pub fn make_anomaly_source(
    normal: &ImageTensor,
    pool: &TexturePool,
    self_augment_prob: f64,
    seed: u64,
) -> Result<ImageTensor> {
    let mut rng = rng_for(&[seed]);
    anomaly_source(normal, pool, self_augment_prob, &mut rng)
}

pub(crate) fn anomaly_source(
    normal: &ImageTensor,
    pool: &TexturePool,
    self_augment_prob: f64,
    rng: &mut impl Rng,
) -> Result<ImageTensor> {
    if pool.is_empty() {
        return Err(Error::Config("texture pool is empty".into()));
    }
    if rng.random::<f64>() < self_augment_prob {
        let q = rng.random_range(1..4);
        return Ok(self_augment(normal, q, &ColorJitter::random_visible(rng)));
    }
    let tex = &pool.textures()[rng.random_range(0..pool.len())];
    let q = rng.random_range(0..4);
    let tex = if tex.height() == tex.width() { tex.rotate90(q) } else { tex.clone() };
    let tex = resize_bilinear(&tex, normal.height(), normal.width());
    Ok(ColorJitter::random(rng).apply(&tex))
}

// ---------------------------------------------------------------------------
// Samples and batches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `x_t`: the normal image with the anomaly blended at `beta_t`.
    pub image_t: ImageTensor,
    pub gt_mask: AnomalyMask,
    pub gt_anomaly: ImageTensor,
    pub gt_normal: ImageTensor,
    /// Simulated estimate of the previous step's mask.
    pub prev_mask: AnomalyMask,
    pub t: usize,
    pub anomalous: bool,
}

/// Mask, appearance, and the field/threshold the mask came from.
#[derive(Debug, Clone)]
pub struct AnomalyDraw {
    pub field: PerlinField,
    pub mask: MaskDraw,
    pub appearance: ImageTensor,
}

pub fn draw_anomaly(
    normal: &ImageTensor,
    pool: &TexturePool,
    cfg: &SynthesisConfig,
    rng: &mut impl Rng,
) -> Result<AnomalyDraw> {
    let (field, mask) = sample_anomaly_mask(normal.height(), normal.width(), cfg, rng)?;
    let appearance = anomaly_source(normal, pool, cfg.self_augment_prob, rng)?;
    Ok(AnomalyDraw {
        field,
        mask,
        appearance,
    })
}

fn prev_mask_for(draw: &AnomalyDraw, cfg: &SynthesisConfig, rng: &mut impl Rng) -> AnomalyMask {
    match draw.mask.threshold {
        Some(thr) => simulate_prev_mask(&draw.field, thr, cfg.prev_mask_dropout, cfg.prev_mask_delta, rng),
        None if rng.random::<f64>() < cfg.prev_mask_dropout => {
            AnomalyMask::zeros(draw.field.height(), draw.field.width())
        }
        None => draw.mask.mask.clone(),
    }
}

/// One training sample from `normal`, seeded independently of its neighbours.
pub fn make_sample(
    normal: &ImageTensor,
    anomalous: bool,
    schedule: &TransparencySchedule,
    pool: &TexturePool,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<SyntheticSample> {
    let mut rng = rng_for(&[seed]);
    let normal = if cfg.rotate {
        let q = if normal.height() == normal.width() {
            rng.random_range(0..4)
        } else {
            2 * rng.random_range(0..2)
        };
        normal.rotate90(q)
    } else {
        normal.clone()
    };
    let t = rng.random_range(1..=schedule.steps());
    let (h, w) = (normal.height(), normal.width());
    if anomalous {
        let draw = draw_anomaly(&normal, pool, cfg, &mut rng)?;
        let prev_mask = prev_mask_for(&draw, cfg, &mut rng);
        let image_t = forward_sample(&normal, &draw.appearance, &draw.mask.mask, schedule, t)?;
        Ok(SyntheticSample {
            image_t,
            gt_mask: draw.mask.mask,
            gt_anomaly: draw.appearance,
            gt_normal: normal,
            prev_mask,
            t,
            anomalous: true,
        })
    } else {
        // a spurious prior from an unrelated field, so the model cannot treat
        // any nonzero previous mask as evidence of an anomaly
        let (field, draw) = sample_anomaly_mask(h, w, cfg, &mut rng)?;
        let spurious = AnomalyDraw {
            field,
            mask: draw,
            appearance: ImageTensor::zeros(normal.channels(), h, w),
        };
        let prev_mask = prev_mask_for(&spurious, cfg, &mut rng);
        Ok(SyntheticSample {
            image_t: normal.clone(),
            gt_mask: AnomalyMask::zeros(h, w),
            gt_anomaly: ImageTensor::zeros(normal.channels(), h, w),
            gt_normal: normal,
            prev_mask,
            t,
            anomalous: false,
        })
    }
}

/// Which batch slots receive a synthetic anomaly: `floor(n / 2)` of them.
pub fn anomalous_slots(n: usize, seed: u64) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(&[seed, u64::MAX]));
    let mut flags = vec![false; n];
    for &i in &idx[..n / 2] {
        flags[i] = true;
    }
    flags
}

/// Half the batch gets a synthetic anomaly at a uniformly drawn `t` in
/// `[1, T]`; the other half stays normal.
pub fn make_training_batch(
    normals: &[ImageTensor],
    schedule: &TransparencySchedule,
    pool: &TexturePool,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    ensure_domain!(!normals.is_empty(), "training batch needs at least one image");
    let flags = anomalous_slots(normals.len(), seed);
    normals
        .iter()
        .zip(flags)
        .enumerate()
        .map(|(i, (img, anom))| make_sample(img, anom, schedule, pool, cfg, derive_seed(&[seed, i as u64])))
        .collect()
}

/// [`make_training_batch`] on the rayon pool. Every sample has its own seed,
/// so the result is identical to the sequential version.
#[cfg(feature = "parallel")]
pub fn make_training_batch_par(
    normals: &[ImageTensor],
    schedule: &TransparencySchedule,
    pool: &TexturePool,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    use rayon::prelude::*;
    ensure_domain!(!normals.is_empty(), "training batch needs at least one image");
    let flags = anomalous_slots(normals.len(), seed);
    normals
        .par_iter()
        .zip(flags)
        .enumerate()
        .map(|(i, (img, anom))| make_sample(img, anom, schedule, pool, cfg, derive_seed(&[seed, i as u64])))
        .collect()
}
