//! Training loop: batch synthesis, per-sample forward/backward, AdamW updates,
//! loss logging and resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, NamedArray};
use crate::diffusion::{forward_sample, ScheduleShape, TransparencySchedule};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossTerms, StepTargets, FOCAL_GAMMA, FOCAL_WEIGHT};
use crate::model::{build_input, DenoiserModel, ModelConfig, PositionalEncoding};
use crate::nn::{Graph, Scalar, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, rng_for};
use crate::synthesis::{make_training_batch, SynthesisConfig, SyntheticSample, TexturePool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_drop_factor` for every epoch
    /// after this one (1-based).
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub steps: usize,
    pub schedule: ScheduleShape,
    pub seed: u64,
    pub image_size: usize,
    pub desk_scale: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Synthesize batches on the rayon pool (same output, per-sample seeds).
    pub parallel_synthesis: bool,
    pub losses: LossTerms,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub synthesis: SynthesisConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl TrainConfig {
    /// Full-resolution regime: 1500 epochs of batch 8 at 224x224.
    pub fn full_size() -> Self {
        Self {
            epochs: 1500,
            batch_size: 8,
            lr: 1e-5,
            lr_drop_epoch: 800,
            lr_drop_factor: 0.1,
            steps: 20,
            schedule: ScheduleShape::Linear,
            seed: 0,
            image_size: 224,
            desk_scale: false,
            checkpoint_every: 100,
            parallel_synthesis: false,
            losses: LossTerms::default(),
            optimizer: AdamWConfig::default(),
            model: ModelConfig::default(),
            synthesis: SynthesisConfig::default(),
        }
    }

    /// 32x32, 200 epochs, small network and a larger step size.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            lr: 2e-3,
            lr_drop_epoch: 150,
            image_size: 32,
            desk_scale: true,
            checkpoint_every: 0,
            model: ModelConfig::toy(),
            synthesis: SynthesisConfig {
                procedural_textures: 32,
                ..SynthesisConfig::default()
            },
            ..Self::full_size()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.steps == 0 || self.image_size == 0 {
            return bad("epochs, batch_size, steps and image_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_drop_epoch == 0 || self.lr_drop_epoch >= self.epochs {
            return bad(format!(
                "lr_drop_epoch ({}) must be in 1..epochs ({})",
                self.lr_drop_epoch, self.epochs
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor must be in (0, 1]".into());
        }
        self.model.validate()?;
        self.model.check_dims(self.image_size, self.image_size)?;
        self.synthesis.validate()
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    pub fn schedule(&self) -> Result<TransparencySchedule> {
        TransparencySchedule::new(self.schedule, self.steps)
    }

    /// Texture pool used when no texture directory is configured.
    pub fn procedural_pool(&self) -> Result<TexturePool> {
        TexturePool::procedural(
            self.synthesis.procedural_textures.max(1),
            self.image_size,
            self.image_size,
            derive_seed(&[self.seed, 0x7E47]),
        )
    }
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// Records the model and the enabled loss terms for one sample. Returns the
/// scalar objective node and the per-term values (disabled terms are still
/// reported but carry no gradient).
pub fn sample_objective<T: Scalar>(
    model: &DenoiserModel<T>,
    g: &mut Graph<T>,
    sample: &SyntheticSample,
    schedule: &TransparencySchedule,
    terms: LossTerms,
) -> Result<(Var, LossBreakdown)> {
    let x = &sample.image_t;
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let pe = PositionalEncoding::new(h, w, model.config().pe_channels);
    let stacked = build_input(x, &sample.prev_mask, &pe)?;
    let input = g.input(to_t(stacked.data()), [stacked.channels(), h, w]);
    let heads = model.forward(g, input, sample.t);

    let mask: Vec<T> = g.value(heads.mask).to_vec();
    let anomaly: Vec<T> = g.value(heads.anomaly).to_vec();
    let normal: Vec<T> = g.value(heads.normal).to_vec();
    let gt_mask: Vec<T> = to_t(sample.gt_mask.data());
    let gt_anomaly: Vec<T> = to_t(sample.gt_anomaly.data());
    let gt_normal: Vec<T> = to_t(sample.gt_normal.data());

    let mut g_mask = vec![T::zero(); mask.len()];
    let mut g_anom = vec![T::zero(); anomaly.len()];
    let mut g_norm = vec![T::zero(); normal.len()];
    let add = |dst: &mut [T], src: &[T], k: T| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += k * s;
        }
    };

    let (ssim, gs) = losses::ssim(&normal, &gt_normal, c, h, w);
    let (l1, gl) = losses::l1(&normal, &gt_normal);
    let l_normal = ssim + l1;
    if terms.normal {
        add(&mut g_norm, &gs, T::one());
        add(&mut g_norm, &gl, T::one());
    }

    let (focal, gf) = losses::focal(&mask, &gt_mask, FOCAL_GAMMA);
    let (sl1, gsl) = losses::smooth_l1(&mask, &gt_mask);
    let fw = T::of(FOCAL_WEIGHT);
    let l_mask = fw * focal + sl1;
    if terms.mask {
        add(&mut g_mask, &gf, fw);
        add(&mut g_mask, &gsl, T::one());
    }

    let (l_anom, ga) = losses::mse(&anomaly, &gt_anomaly);
    if terms.anomaly {
        add(&mut g_anom, &ga, T::one());
    }

    let x_prev = forward_sample(&sample.gt_normal, &sample.gt_anomaly, &sample.gt_mask, schedule, sample.t - 1)?;
    let st = StepTargets {
        x_t: &to_t::<T>(x.data()),
        x_prev: &to_t::<T>(x_prev.data()),
        delta_beta: T::of(schedule.delta(sample.t)?),
        channels: c,
    };
    let (l_cons, [gcm, gca, gcn]) = losses::consistency(&mask, &anomaly, &normal, &st);
    if terms.consistency {
        add(&mut g_mask, &gcm, T::one());
        add(&mut g_anom, &gca, T::one());
        add(&mut g_norm, &gcn, T::one());
    }

    let pick = |on: bool, v: T| if on { v } else { T::zero() };
    let objective = pick(terms.normal, l_normal)
        + pick(terms.mask, l_mask)
        + pick(terms.anomaly, l_anom)
        + pick(terms.consistency, l_cons);
    let root = g.fused_scalar(
        objective,
        vec![(heads.mask, g_mask), (heads.anomaly, g_anom), (heads.normal, g_norm)],
    );
    let breakdown = LossBreakdown::new(l_normal.as_f64(), l_mask.as_f64(), l_anom.as_f64(), l_cons.as_f64());
    Ok((root, breakdown))
}

/// Mean objective and summed-then-averaged gradients over a batch. Samples
/// are processed in order so the reduction is reproducible.
pub fn batch_gradients<T: Scalar>(
    model: &DenoiserModel<T>,
    batch: &[SyntheticSample],
    schedule: &TransparencySchedule,
    terms: LossTerms,
) -> Result<(Vec<Vec<T>>, LossBreakdown)> {
    let mut grads = model.zero_grads();
    let mut sum = [0.0f64; 4];
    for (i, s) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let (root, br) = sample_objective(model, &mut g, s, schedule, terms)?;
        if !br.is_finite() {
            return Err(Error::NonFinite(format!(
                "sample {i} (t = {}, anomalous = {}): {br:?}",
                s.t, s.anomalous
            )));
        }
        g.backward_into(root, &mut grads);
        for (acc, v) in sum.iter_mut().zip([br.normal, br.mask, br.anomaly, br.consistency]) {
            *acc += v;
        }
    }
    let n = batch.len() as f64;
    let inv = T::of(1.0 / n);
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((grads, LossBreakdown::new(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n)))
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "epoch,lr,normal,mask,anomaly,consistency,total";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = r.loss;
        let _ = writeln!(
            s,
            "{},{:e},{},{},{},{},{}",
            r.epoch, r.lr, l.normal, l.mask, l.anomaly, l.consistency, l.total
        );
    }
    s
}

/// Resumable training state.
pub struct Trainer {
    config: TrainConfig,
    schedule: TransparencySchedule,
    pool: TexturePool,
    model: DenoiserModel<f32>,
    optimizer: AdamW<f32>,
    epochs_done: usize,
    log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    epochs_done: usize,
    optimizer_step: u64,
    config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: Option<TrainMeta>,
}

impl Trainer {
    pub fn new(config: TrainConfig, pool: TexturePool) -> Result<Self> {
        config.validate()?;
        let model = DenoiserModel::new(config.model.clone(), derive_seed(&[config.seed, 0x1417]))?;
        let optimizer = AdamW::new(config.optimizer, model.params());
        Ok(Self {
            schedule: config.schedule()?,
            config,
            pool,
            model,
            optimizer,
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DenoiserModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel<f32> {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn schedule(&self) -> &TransparencySchedule {
        &self.schedule
    }

    fn check_data(&self, data: &[crate::raster::ImageTensor]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let s = self.config.image_size;
        let c = self.config.model.image_channels;
        if let Some((i, img)) = data
            .iter()
            .enumerate()
            .find(|(_, im)| im.height() != s || im.width() != s || im.channels() != c)
        {
            return Err(Error::Shape(format!(
                "training image {i} is {}x{}x{}, expected {c}x{s}x{s}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Synthetic batches for 1-based `epoch`, in the order they are used.
    pub fn epoch_batches(&self, data: &[crate::raster::ImageTensor], epoch: usize) -> Result<Vec<Vec<SyntheticSample>>> {
        let cfg = &self.config;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(&[cfg.seed, epoch as u64, 0x5AFF]));
        order
            .chunks(cfg.batch_size)
            .enumerate()
            .map(|(b, idx)| {
                let normals: Vec<_> = idx.iter().map(|&i| data[i].clone()).collect();
                let seed = derive_seed(&[cfg.seed, epoch as u64, b as u64]);
                self.synthesize(&normals, seed)
            })
            .collect()
    }

    fn synthesize(&self, normals: &[crate::raster::ImageTensor], seed: u64) -> Result<Vec<SyntheticSample>> {
        #[cfg(feature = "parallel")]
        if self.config.parallel_synthesis {
            return crate::synthesis::make_training_batch_par(
                normals,
                &self.schedule,
                &self.pool,
                &self.config.synthesis,
                seed,
            );
        }
        make_training_batch(normals, &self.schedule, &self.pool, &self.config.synthesis, seed)
    }

    /// Runs the next epoch and returns its mean losses.
    pub fn run_epoch(&mut self, data: &[crate::raster::ImageTensor]) -> Result<EpochLog> {
        self.check_data(data)?;
        let epoch = self.epochs_done + 1;
        let lr = self.config.lr_at(epoch);
        let mut sum = [0.0f64; 4];
        let mut count = 0usize;
        for (b, batch) in self.epoch_batches(data, epoch)?.into_iter().enumerate() {
            let (grads, br) = batch_gradients(&self.model, &batch, &self.schedule, self.config.losses)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            self.optimizer
                .step(self.model.params_mut(), &grads, lr)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            let n = batch.len() as f64;
            for (acc, v) in sum.iter_mut().zip([br.normal, br.mask, br.anomaly, br.consistency]) {
                *acc += v * n;
            }
            count += batch.len();
        }
        let n = count as f64;
        let row = EpochLog {
            epoch,
            lr,
            loss: LossBreakdown::new(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n),
        };
        self.epochs_done = epoch;
        self.log.push(row);
        Ok(row)
    }

    /// Trains until `config.epochs`, calling `on_epoch` after each one.
    /// Checkpoints go to `checkpoint_dir` when given.
    pub fn train(
        &mut self,
        data: &[crate::raster::ImageTensor],
        checkpoint_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            let row = self.run_epoch(data)?;
            on_epoch(&row);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && row.epoch % every == 0 && row.epoch < self.config.epochs {
                    self.save(&epoch_checkpoint_path(dir, row.epoch))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// Model weights, optimizer moments and loop position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.config.model.clone(),
            train: Some(TrainMeta {
                epochs_done: self.epochs_done,
                optimizer_step: self.optimizer.step,
                config: self.config.clone(),
            }),
        };
        let mut c = self.model.to_container();
        c.meta = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (prefix, bufs) in [("adam.m/", &self.optimizer.m), ("adam.v/", &self.optimizer.v)] {
            for ((name, shape), data) in self.model.param_names().iter().zip(self.model.param_shapes()).zip(bufs) {
                c.arrays.push(NamedArray {
                    name: format!("{prefix}{name}"),
                    shape: shape.clone(),
                    data: data.clone(),
                });
            }
        }
        let log_csv_text = log_csv(&self.log);
        c.meta.push_str(&format!("\n# log\n{}", comment_lines(&log_csv_text)));
        c.save(path)
    }

    /// Restores a state written by [`Trainer::save`]. The stored training
    /// configuration must equal `config` apart from `epochs` and
    /// `checkpoint_every`.
    pub fn resume(path: &Path, config: TrainConfig, pool: TexturePool) -> Result<Self> {
        let c: Container<f32> = Container::load(path)?;
        let meta: CheckpointMeta =
            toml::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        let Some(tm) = meta.train else {
            return Err(Error::Checkpoint("checkpoint has no training state".into()));
        };
        let mut stored = tm.config.clone();
        stored.epochs = config.epochs;
        stored.checkpoint_every = config.checkpoint_every;
        if stored != config {
            return Err(Error::Checkpoint(
                "config mismatch: checkpoint was written with a different training configuration".into(),
            ));
        }
        let mut t = Self::new(config, pool)?;
        t.model = DenoiserModel::from_container(&c, Some(&t.config.model))?;
        for (i, name) in t.model.param_names().to_vec().iter().enumerate() {
            for (prefix, buf) in [("adam.m/", &mut t.optimizer.m), ("adam.v/", &mut t.optimizer.v)] {
                let a = c
                    .array(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {prefix}{name}")))?;
                if a.data.len() != buf[i].len() {
                    return Err(Error::Checkpoint(format!("optimizer state {prefix}{name} has wrong size")));
                }
                buf[i].clone_from(&a.data);
            }
        }
        t.optimizer.step = tm.optimizer_step;
        t.epochs_done = tm.epochs_done;
        t.log = parse_log_comment(&c.meta);
        Ok(t)
    }
}

/// Training configuration stored in a checkpoint written by [`Trainer::save`],
/// or `None` for a bare model file.
pub fn stored_train_config(path: &Path) -> Result<Option<TrainConfig>> {
    let c: Container<f32> = Container::load(path)?;
    let meta: CheckpointMeta =
        toml::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    Ok(meta.train.map(|t| t.config))
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:05}.ckpt"))
}

fn comment_lines(s: &str) -> String {
    s.lines().map(|l| format!("# {l}\n")).collect()
}

fn parse_log_comment(meta: &str) -> Vec<EpochLog> {
    let Some(start) = meta.find("\n# log\n") else {
        return Vec::new();
    };
    meta[start + 7..]
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .skip(1)
        .filter_map(|row| {
            let f: Vec<&str> = row.split(',').collect();
            if f.len() != 7 {
                return None;
            }
            let num = |i: usize| f[i].parse::<f64>().ok();
            Some(EpochLog {
                epoch: f[0].parse().ok()?,
                lr: num(1)?,
                loss: LossBreakdown::new(num(2)?, num(3)?, num(4)?, num(5)?),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ImageTensor;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 3,
            lr: 1e-3,
            lr_drop_epoch: 2,
            steps: 5,
            image_size: 8,
            model: ModelConfig {
                base_width: 4,
                levels: 2,
                blocks_per_level: 1,
                time_dim: 4,
                groups: 2,
                max_mult: 2,
                ..ModelConfig::default()
            },
            synthesis: SynthesisConfig {
                procedural_textures: 4,
                ..SynthesisConfig::default()
            },
            ..TrainConfig::desk()
        }
    }

    fn data(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| ImageTensor::from_fn(3, 8, 8, |c, y, x| ((x + y * 2 + c + i) % 5) as f64 / 2.5 - 0.8))
            .collect()
    }

    #[test]
    fn lr_drops_after_configured_epoch() {
        let cfg = TrainConfig::full_size();
        assert_eq!(cfg.lr_at(800), 1e-5);
        assert!((cfg.lr_at(801) - 1e-6).abs() < 1e-20);
        let mut t = Trainer::new(tiny_config(), tiny_config().procedural_pool().unwrap()).unwrap();
        let d = data(5);
        let lrs: Vec<f64> = (0..3).map(|_| t.run_epoch(&d).unwrap().lr).collect();
        assert_eq!(lrs[1], 1e-3);
        assert!((lrs[2] - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_configs_and_data() {
        assert!(TrainConfig {
            lr_drop_epoch: 4,
            ..tiny_config()
        }
        .validate()
        .is_err());
        let mut t = Trainer::new(tiny_config(), tiny_config().procedural_pool().unwrap()).unwrap();
        assert!(matches!(t.run_epoch(&[]), Err(Error::Config(_))));
        assert!(t.run_epoch(&[ImageTensor::zeros(3, 16, 16)]).is_err());
    }

    #[test]
    fn partial_batches_cover_dataset() {
        let t = Trainer::new(tiny_config(), tiny_config().procedural_pool().unwrap()).unwrap();
        let b = t.epoch_batches(&data(7), 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 1]);
        for batch in &b {
            assert_eq!(batch.iter().filter(|s| s.anomalous).count(), batch.len() / 2);
        }
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let d = data(5);
        let cfg = tiny_config();
        let pool = cfg.procedural_pool().unwrap();
        let mut full = Trainer::new(cfg.clone(), pool.clone()).unwrap();
        full.train(&d, None, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = Trainer::new(cfg.clone(), pool.clone()).unwrap();
        first.run_epoch(&d).unwrap();
        first.run_epoch(&d).unwrap();
        first.save(&path).unwrap();
        let mut resumed = Trainer::resume(&path, cfg.clone(), pool).unwrap();
        assert_eq!(resumed.log(), first.log());
        resumed.train(&d, None, |_| {}).unwrap();
        assert_eq!(resumed.model().params(), full.model().params());
        assert_eq!(resumed.log(), full.log());

        let other = TrainConfig { seed: 99, ..cfg };
        let pool = other.procedural_pool().unwrap();
        assert!(Trainer::resume(&path, other, pool).is_err());
    }

    #[test]
    fn small_step_decreases_frozen_batch_loss() {
        let cfg = tiny_config();
        let t = Trainer::new(cfg.clone(), cfg.procedural_pool().unwrap()).unwrap();
        let batch = t.epoch_batches(&data(4), 1).unwrap().remove(0);
        let model = t.model().cast::<f64>();
        let (grads, before) = batch_gradients(&model, &batch, t.schedule(), cfg.losses).unwrap();
        let mut stepped = model.clone();
        let norm2: f64 = grads.iter().flatten().map(|g| g * g).sum();
        let lr = 1e-3 / norm2.sqrt();
        for (p, g) in stepped.params_mut().iter_mut().zip(&grads) {
            for (v, d) in p.iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
        let (_, after) = batch_gradients(&stepped, &batch, t.schedule(), cfg.losses).unwrap();
        assert!(after.total < before.total, "{} -> {}", before.total, after.total);
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let rows = vec![EpochLog {
            epoch: 1,
            lr: 1e-3,
            loss: LossBreakdown::new(1.0, 2.0, 3.0, 4.0),
        }];
        let csv = log_csv(&rows);
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().count(), 2);
        let meta = format!("x = 1\n# log\n{}", comment_lines(&csv));
        assert_eq!(parse_log_comment(&meta), rows);
    }
}
