//! WebAssembly bindings for the single-page demo in `www/`.
//!
//! The page draws a synthetic defect on a procedural texture, scrubs the
//! forward blend over `t`, and replays the reverse process with a known
//! decomposition standing in for the network.

use translucid::data::toy_normal;
use translucid::diffusion::{forward_sample, ScheduleShape, TransparencySchedule};
use translucid::inference::{fuse_masks, run_reverse, DiscSource, FusionConfig, OracleModel, ReverseTrace, DEFAULT_TAU};
use translucid::raster::{AnomalyMask, ImageTensor};
use translucid::rng::rng_for;
use translucid::synthesis::{draw_anomaly, SynthesisConfig, TexturePool};
use wasm_bindgen::prelude::*;

fn js(e: translucid::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major RGBA bytes for a `[-1, 1]` image.
pub fn image_rgba(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (img.get(c, y, x).clamp(-1.0, 1.0) + 1.0) * 127.5;
                out.push(v.round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Black-red-yellow-white ramp for a `[0, 1]` map.
pub fn heat_rgba(mask: &AnomalyMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.len() * 4);
    for &v in mask.data() {
        let v = v.clamp(0.0, 1.0);
        let ch = |lo: f64| (((v - lo) * 3.0).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0), 255]);
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    normal: ImageTensor,
    pool: TexturePool,
    synthesis: SynthesisConfig,
    mask: AnomalyMask,
    anomaly: ImageTensor,
    schedule: TransparencySchedule,
    trace: Option<ReverseTrace>,
}

impl Demo {
    pub fn create(size: usize, seed: u32) -> translucid::Result<Self> {
        let normal = toy_normal(size, seed as u64)?;
        let pool = TexturePool::procedural(8, size, size, seed as u64 ^ 0x7E47)?;
        let mut demo = Self {
            mask: AnomalyMask::zeros(size, size),
            anomaly: normal.clone(),
            normal,
            pool,
            synthesis: SynthesisConfig::default(),
            schedule: TransparencySchedule::new(ScheduleShape::Linear, 10)?,
            trace: None,
        };
        demo.redraw(seed)?;
        Ok(demo)
    }

    pub fn redraw(&mut self, seed: u32) -> translucid::Result<()> {
        let mut rng = rng_for(&[seed as u64, 0xDE40]);
        let d = draw_anomaly(&self.normal, &self.pool, &self.synthesis, &mut rng)?;
        self.mask = d.mask.mask;
        self.anomaly = d.appearance;
        self.trace = None;
        Ok(())
    }

    pub fn configure(&mut self, shape: &str, steps: usize) -> translucid::Result<()> {
        self.schedule = TransparencySchedule::new(shape.parse()?, steps)?;
        self.trace = None;
        Ok(())
    }

    pub fn forward(&self, t: usize) -> translucid::Result<ImageTensor> {
        forward_sample(&self.normal, &self.anomaly, &self.mask, &self.schedule, t)
    }

    /// Reverse trace from the fully opaque `x_T`, cached until the scene or
    /// schedule changes.
    pub fn reverse(&mut self) -> translucid::Result<&ReverseTrace> {
        if self.trace.is_none() {
            let oracle = OracleModel {
                mask: self.mask.clone(),
                anomaly: self.anomaly.clone(),
                normal: self.normal.clone(),
            };
            let x = self.forward(self.schedule.steps())?;
            self.trace = Some(run_reverse(&oracle, &x, &self.schedule, DEFAULT_TAU, None)?);
        }
        Ok(self.trace.as_ref().expect("trace just filled"))
    }

    /// Image after `done` reverse steps.
    pub fn reverse_state(&mut self, done: usize) -> translucid::Result<ImageTensor> {
        let trace = self.reverse()?;
        Ok(trace.states.get(done).unwrap_or(&trace.x0).clone())
    }

    pub fn fused(&mut self, lambda: f64, kernel: usize) -> translucid::Result<(AnomalyMask, f64)> {
        let cfg = FusionConfig {
            lambda,
            kernel,
            disc: DiscSource::MeanSoft,
        };
        let f = fuse_masks(self.reverse()?, &cfg)?;
        Ok((f.m_final, f.score))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u32) -> Result<Demo, JsError> {
        Self::create(size, seed).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.normal.width()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// New defect shape and appearance.
    pub fn draw(&mut self, seed: u32) -> Result<(), JsError> {
        self.redraw(seed).map_err(js)
    }

    /// `shape` is `linear`, `quadratic` or `root`.
    pub fn set_schedule(&mut self, shape: &str, steps: usize) -> Result<(), JsError> {
        self.configure(shape, steps).map_err(js)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        heat_rgba(&self.mask)
    }

    pub fn beta(&self, t: usize) -> Result<f64, JsError> {
        self.schedule.beta(t).map_err(js)
    }

    pub fn forward_rgba(&self, t: usize) -> Result<Vec<u8>, JsError> {
        self.forward(t).map(|x| image_rgba(&x)).map_err(js)
    }

    pub fn reverse_rgba(&mut self, done: usize) -> Result<Vec<u8>, JsError> {
        self.reverse_state(done).map(|x| image_rgba(&x)).map_err(js)
    }

    pub fn fused_rgba(&mut self, lambda: f64, kernel: usize) -> Result<Vec<u8>, JsError> {
        self.fused(lambda, kernel).map(|(m, _)| heat_rgba(&m)).map_err(js)
    }

    pub fn score(&mut self, lambda: f64, kernel: usize) -> Result<f64, JsError> {
        self.fused(lambda, kernel).map(|(_, s)| s).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_restoration() {
        let mut d = Demo::create(32, 4).unwrap();
        assert!(d.mask.area() > 0);
        assert_eq!(d.forward(0).unwrap(), d.normal);
        let restored = d.reverse_state(d.schedule.steps()).unwrap();
        assert!(restored.max_abs_diff(&d.normal) < 1e-9);
        let (m, score) = d.fused(1.0, 1).unwrap();
        assert_eq!(m, d.mask);
        assert_eq!(score, 1.0);
    }

    #[test]
    fn rgba_layout() {
        let img = ImageTensor::from_fn(3, 2, 3, |c, _, x| if c == 0 && x == 1 { 1.0 } else { -1.0 });
        let px = image_rgba(&img);
        assert_eq!(px.len(), 24);
        assert_eq!(&px[4..8], &[255, 0, 0, 255]);
        let heat = heat_rgba(&AnomalyMask::from_fn(1, 2, |_, x| x as f64));
        assert_eq!(heat, vec![0, 0, 0, 255, 255, 255, 255, 255]);
    }

    #[test]
    fn schedule_changes_reset_the_trace() {
        let mut d = Demo::create(16, 1).unwrap();
        d.reverse().unwrap();
        d.configure("root", 4).unwrap();
        assert_eq!(d.reverse().unwrap().steps(), 4);
        assert!(d.configure("cubic", 4).is_err());
    }
}
