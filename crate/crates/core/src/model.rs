//! Residual U-Net denoiser with timestep conditioning and three heads.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, NamedArray};
use crate::error::{ensure_shape, Error, Result};
use crate::losses::HeadOutputs;
use crate::nn::{Graph, Scalar, Var};
use crate::raster::{AnomalyMask, ImageTensor};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub pe_channels: usize,
    pub base_width: usize,
    /// Resolution levels; inputs must be divisible by `2^(levels - 1)`.
    pub levels: usize,
    pub blocks_per_level: usize,
    pub time_dim: usize,
    /// Upper bound on group-norm groups; the actual count divides the width.
    pub groups: usize,
    /// Channel multiplier cap for deeper levels.
    pub max_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            pe_channels: 4,
            base_width: 32,
            levels: 3,
            blocks_per_level: 2,
            time_dim: 32,
            groups: 8,
            max_mult: 4,
        }
    }
}

impl ModelConfig {
    /// Small network for 32x32 experiments on one CPU core.
    pub fn toy() -> Self {
        Self {
            base_width: 16,
            blocks_per_level: 1,
            time_dim: 16,
            groups: 4,
            max_mult: 2,
            ..Self::default()
        }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + 1 + self.pe_channels
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width * (1usize << level).min(self.max_mult.max(1))
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_channels == 0 {
            return bad("image_channels must be positive");
        }
        if self.base_width == 0 || self.levels == 0 || self.blocks_per_level == 0 {
            return bad("base_width, levels and blocks_per_level must be positive");
        }
        if self.levels > 8 {
            return bad("at most 8 levels supported");
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be an even number >= 2");
        }
        if self.groups == 0 {
            return bad("groups must be positive");
        }
        Ok(())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        ensure_shape!(
            height > 0 && width > 0 && height.is_multiple_of(m) && width.is_multiple_of(m),
            "input {height}x{width} not divisible by {m} (levels = {})",
            self.levels
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encodings
// ---------------------------------------------------------------------------

/// Per-pixel sinusoidal coordinates. Channel `j` uses frequency `2^(j / 4)`;
/// the four slots are `sin u, cos u, sin v, cos v` with `u, v` the normalized
/// column/row centres scaled by pi.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    planes: ImageTensor,
}

impl PositionalEncoding {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        let planes = ImageTensor::from_fn(channels, height, width, |c, y, x| {
            let freq = (1u64 << (c / 4).min(62)) as f64 * std::f64::consts::PI;
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            match c % 4 {
                0 => (freq * u).sin(),
                1 => (freq * u).cos(),
                2 => (freq * v).sin(),
                _ => (freq * v).cos(),
            }
        });
        Self { planes }
    }

    pub fn planes(&self) -> &ImageTensor {
        &self.planes
    }

    pub fn channels(&self) -> usize {
        self.planes.channels()
    }
}

/// `[sin(t w_0) .. sin(t w_{d/2-1}), cos(t w_0) .. ]`, `w_i = 10000^(-i / (d/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

/// Stacks `[x_t | prev_mask | pe]` along channels.
pub fn build_input(x_t: &ImageTensor, prev_mask: &AnomalyMask, pe: &PositionalEncoding) -> Result<ImageTensor> {
    x_t.ensure_mask_dims(prev_mask, "build_input")?;
    ensure_shape!(
        pe.planes.height() == x_t.height() && pe.planes.width() == x_t.width(),
        "positional encoding is {}x{}, image is {}x{}",
        pe.planes.height(),
        pe.planes.width(),
        x_t.height(),
        x_t.width()
    );
    let mut data = Vec::with_capacity(x_t.data().len() + prev_mask.len() + pe.planes.data().len());
    data.extend_from_slice(x_t.data());
    data.extend_from_slice(prev_mask.data());
    data.extend_from_slice(pe.planes.data());
    ImageTensor::from_vec(x_t.channels() + 1 + pe.channels(), x_t.height(), x_t.width(), data)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    k: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Dense,
    time2: Dense,
    stem: Conv,
    down: Vec<(Vec<ResBlock>, Option<Conv>)>,
    mid: ResBlock,
    up: Vec<Vec<ResBlock>>,
    normal_head: Conv,
    anomaly_head: Conv,
    mask_norm: Norm,
    mask_head: Conv,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zero,
    Const(f64),
}

struct Builder<R> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    rng: R,
    groups: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl<R: Rng> Builder<R> {
    fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize, init: Init) -> usize {
        let n = shape.iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = match init {
            Init::Uniform => (0..n).map(|_| self.rng.random_range(-bound..bound)).collect(),
            Init::Zero => vec![0.0; n],
            Init::Const(c) => vec![c; n],
        };
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        self.values.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Conv {
        let fan = cin * k * k;
        let w = self.add(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            fan,
            match init {
                Init::Const(_) => Init::Uniform,
                other => other,
            },
        );
        let b = self.add(format!("{name}.bias"), vec![cout], fan, init);
        Conv { w, b, k, stride }
    }

    fn norm(&mut self, name: &str, ch: usize) -> Norm {
        let gamma = self.add(format!("{name}.gamma"), vec![ch], 1, Init::Const(1.0));
        let beta = self.add(format!("{name}.beta"), vec![ch], 1, Init::Zero);
        Norm {
            gamma,
            beta,
            groups: gcd(self.groups, ch),
        }
    }

    fn dense(&mut self, name: &str, nin: usize, nout: usize) -> Dense {
        let w = self.add(format!("{name}.weight"), vec![nout, nin], nin, Init::Uniform);
        let b = self.add(format!("{name}.bias"), vec![nout], nin, Init::Uniform);
        Dense { w, b }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, Init::Uniform),
            time: self.dense(&format!("{name}.time"), tdim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            // residual branch starts as identity
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, Init::Zero),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, Init::Uniform)),
        }
    }
}

fn build_layout<R: Rng>(cfg: &ModelConfig, b: &mut Builder<R>) -> Layout {
    let td = cfg.time_dim;
    let time1 = b.dense("time.0", td, td);
    let time2 = b.dense("time.1", td, td);
    let w0 = cfg.base_width;
    let stem = b.conv("stem", cfg.input_channels(), w0, 3, 1, Init::Uniform);
    let mut cur = w0;
    let mut down = Vec::new();
    for l in 0..cfg.levels {
        let ch = cfg.width_at(l);
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks_per_level {
            blocks.push(b.res_block(&format!("down.{l}.{i}"), cur, ch, td));
            cur = ch;
        }
        let ds = (l + 1 < cfg.levels).then(|| b.conv(&format!("down.{l}.pool"), ch, ch, 3, 2, Init::Uniform));
        down.push((blocks, ds));
    }
    let mid = b.res_block("mid", cur, cur, td);
    let mut up = Vec::new();
    for l in (0..cfg.levels).rev() {
        let ch = cfg.width_at(l);
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks_per_level {
            let cin = if i == 0 { cur + ch } else { cur };
            blocks.push(b.res_block(&format!("up.{l}.{i}"), cin, ch, td));
            cur = ch;
        }
        up.push(blocks);
    }
    let c = cfg.image_channels;
    let normal_head = b.conv("head.normal", cur, c, 3, 1, Init::Uniform);
    let anomaly_head = b.conv("head.anomaly", cur, c, 3, 1, Init::Uniform);
    let mask_norm = b.norm("head.mask.norm", cur);
    // start from a low anomaly prior, p = 0.01
    let mask_head = b.conv("head.mask", cur, 1, 3, 1, Init::Const(-(99f64.ln())));
    Layout {
        time1,
        time2,
        stem,
        down,
        mid,
        up,
        normal_head,
        anomaly_head,
        mask_norm,
        mask_head,
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Graph handles of the three heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub mask: Var,
    pub anomaly: Var,
    pub normal: Var,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<T>>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct MetaDoc {
    model: ModelConfig,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            rng: rng_for(&[seed, 0x5EED]),
            groups: config.groups,
        };
        let layout = build_layout(&config, &mut b);
        Ok(Self {
            config,
            names: b.names,
            shapes: b.shapes,
            params: b.values.into_iter().map(|v| v.into_iter().map(T::of).collect()).collect(),
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Zeroed buffers matching every parameter.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| U::of(v.as_f64())).collect())
                .collect(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, g: &mut Graph<T>, id: usize) -> Var {
        g.param(id, &self.params[id])
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: Conv) -> Var {
        let w = self.p(g, c.w);
        let b = self.p(g, c.b);
        g.conv2d(x, w, b, c.k, c.stride, c.k / 2)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Var {
        let gamma = self.p(g, n.gamma);
        let beta = self.p(g, n.beta);
        g.group_norm(x, gamma, beta, n.groups)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, d: Dense) -> Var {
        let w = self.p(g, d.w);
        let b = self.p(g, d.b);
        g.linear(x, w, b)
    }

    fn res_block(&self, g: &mut Graph<T>, x: Var, temb: Var, r: &ResBlock) -> Var {
        let h = self.norm(g, x, r.norm1);
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv1);
        let tproj = self.dense(g, temb, r.time);
        let h = g.add_channel(h, tproj);
        let h = self.norm(g, h, r.norm2);
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv2);
        let skip = match r.skip {
            Some(c) => self.conv(g, x, c),
            None => x,
        };
        g.add(h, skip)
    }

    /// Records the network on `g`. `stacked` is the `[x_t | prev | pe]` input.
    pub fn forward(&self, g: &mut Graph<T>, stacked: Var, t: usize) -> HeadVars {
        let lay = &self.layout;
        let emb = timestep_embedding(t, self.config.time_dim);
        let temb = g.input(emb.into_iter().map(T::of).collect(), [self.config.time_dim, 1, 1]);
        let temb = self.dense(g, temb, lay.time1);
        let temb = g.silu(temb);
        let temb = self.dense(g, temb, lay.time2);
        let temb = g.silu(temb);

        let mut h = self.conv(g, stacked, lay.stem);
        let mut skips = Vec::with_capacity(lay.down.len());
        for (blocks, ds) in &lay.down {
            for r in blocks {
                h = self.res_block(g, h, temb, r);
            }
            skips.push(h);
            if let Some(c) = ds {
                h = self.conv(g, h, *c);
            }
        }
        h = self.res_block(g, h, temb, &lay.mid);
        for (i, blocks) in lay.up.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            if i > 0 {
                h = g.upsample2x(h);
            }
            h = g.concat(h, skip);
            for r in blocks {
                h = self.res_block(g, h, temb, r);
            }
        }
        let normal = self.conv(g, h, lay.normal_head);
        let anomaly = self.conv(g, h, lay.anomaly_head);
        let m = self.norm(g, h, lay.mask_norm);
        let m = g.silu(m);
        let m = self.conv(g, m, lay.mask_head);
        let mask = g.sigmoid(m);
        HeadVars { mask, anomaly, normal }
    }

    /// Evaluates the heads on a pre-stacked input.
    pub fn predict(&self, stacked: &ImageTensor, t: usize) -> Result<HeadOutputs> {
        let (c, h, w) = (stacked.channels(), stacked.height(), stacked.width());
        ensure_shape!(
            c == self.config.input_channels(),
            "model expects {} input channels, got {c}",
            self.config.input_channels()
        );
        self.config.check_dims(h, w)?;
        let mut g = Graph::inference();
        let x = g.input(stacked.data().iter().map(|&v| T::of(v)).collect(), [c, h, w]);
        let heads = self.forward(&mut g, x, t);
        let to64 = |v: Var| g.value(v).iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let ic = self.config.image_channels;
        let out = HeadOutputs {
            mask: AnomalyMask::from_vec(h, w, to64(heads.mask))?,
            anomaly: ImageTensor::from_vec(ic, h, w, to64(heads.anomaly))?,
            normal: ImageTensor::from_vec(ic, h, w, to64(heads.normal))?,
        };
        Ok(out)
    }

    /// Stacks the input with a fresh positional encoding and predicts.
    pub fn predict_step(&self, x_t: &ImageTensor, prev_mask: &AnomalyMask, t: usize) -> Result<HeadOutputs> {
        let pe = PositionalEncoding::new(x_t.height(), x_t.width(), self.config.pe_channels);
        self.predict(&build_input(x_t, prev_mask, &pe)?, t)
    }

    pub fn meta_toml(&self) -> String {
        toml::to_string(&MetaDoc {
            model: self.config.clone(),
        })
        .expect("model config serializes")
    }

    pub fn to_container(&self) -> Container<T> {
        Container {
            meta: self.meta_toml(),
            arrays: self
                .names
                .iter()
                .zip(&self.shapes)
                .zip(&self.params)
                .map(|((n, s), p)| NamedArray {
                    name: n.clone(),
                    shape: s.clone(),
                    data: p.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model; fails if `expected` is given and differs from the
    /// stored configuration, or if any parameter is missing or misshapen.
    pub fn from_container(c: &Container<T>, expected: Option<&ModelConfig>) -> Result<Self> {
        let meta: MetaDoc = toml::from_str(&c.meta)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        if let Some(exp) = expected {
            if *exp != meta.model {
                return Err(Error::Checkpoint(format!(
                    "config mismatch: checkpoint has {:?}, expected {:?}",
                    meta.model, exp
                )));
            }
        }
        let mut model = Self::new(meta.model, 0)?;
        for i in 0..model.names.len() {
            let name = &model.names[i];
            let arr = c
                .array(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if arr.shape != model.shapes[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    arr.shape, model.shapes[i]
                )));
            }
            model.params[i].clone_from(&arr.data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_container(&Container::load(path)?, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            levels: 2,
            blocks_per_level: 1,
            time_dim: 4,
            groups: 2,
            max_mult: 2,
            ..ModelConfig::default()
        }
    }

    fn input(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = rng_for(&[seed]);
        ImageTensor::from_fn(cfg.input_channels(), h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn stacked_channel_count() {
        let x = ImageTensor::zeros(3, 32, 32);
        let pe = PositionalEncoding::new(32, 32, 4);
        let s = build_input(&x, &AnomalyMask::zeros(32, 32), &pe).unwrap();
        assert_eq!((s.channels(), s.height(), s.width()), (8, 32, 32));
        assert!(s.plane(3).iter().all(|&v| v == 0.0));
        let bad = build_input(&x, &AnomalyMask::zeros(16, 32), &pe);
        assert!(bad.is_err());
    }

    #[test]
    fn encodings_are_bounded_and_injective() {
        let pe = PositionalEncoding::new(10, 14, 8);
        assert!(pe.planes().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, PositionalEncoding::new(10, 14, 8));
        let embs: Vec<Vec<f64>> = (0..=20).map(|t| timestep_embedding(t, 2)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-3, "t={i} and t={j} collide");
            }
        }
    }

    #[test]
    fn heads_keep_spatial_dims() {
        let cfg = tiny();
        let m = DenoiserModel::<f32>::new(cfg.clone(), 1).unwrap();
        for (h, w) in [(8, 8), (16, 8), (6, 10)] {
            let out = m.predict(&input(&cfg, h, w, 3), 4).unwrap();
            assert_eq!((out.mask.height(), out.mask.width()), (h, w));
            assert_eq!((out.normal.height(), out.normal.width()), (h, w));
            assert_eq!((out.anomaly.height(), out.anomaly.width()), (h, w));
            assert!(out.mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(m.predict(&input(&cfg, 7, 8, 3), 1).is_err());
        assert!(m.predict(&ImageTensor::zeros(3, 8, 8), 1).is_err());
    }

    #[test]
    fn deterministic_and_time_sensitive() {
        let cfg = tiny();
        let mut m = DenoiserModel::<f64>::new(cfg.clone(), 5).unwrap();
        // zero-initialized residual convs hide t; perturb them
        let mut rng = rng_for(&[9]);
        for p in m.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let x = input(&cfg, 8, 8, 2);
        let a = m.predict(&x, 1).unwrap();
        let b = m.predict(&x, 1).unwrap();
        assert_eq!(a.normal, b.normal);
        assert_eq!(a.mask, b.mask);
        let c = m.predict(&x, 20).unwrap();
        assert!(a.normal.max_abs_diff(&c.normal) > 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = tiny();
        let m = DenoiserModel::<f32>::new(cfg.clone(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = DenoiserModel::<f32>::load(&path, Some(&cfg)).unwrap();
        let x = input(&cfg, 8, 8, 4);
        let (a, b) = (m.predict(&x, 3).unwrap(), back.predict(&x, 3).unwrap());
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.normal, b.normal);
        let other = ModelConfig { base_width: 8, ..cfg };
        let err = DenoiserModel::<f32>::load(&path, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("mismatch"));
    }

    #[test]
    fn default_presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        assert!(ModelConfig { time_dim: 3, ..tiny() }.validate().is_err());
    }
}
