use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use translucid::config::AppConfig;
use translucid::data::{
    self, load_dataset, load_eval_set, load_score_map, load_texture_pool, save_image_png, save_mask_png16,
    save_mask_png8, IMAGE_EXTENSIONS,
};
use translucid::diffusion::ScheduleShape;
use translucid::evaluation::{self, EvalRecord, EvalSet, SweepParam};
use translucid::inference::{infer_all, kernel_for_size, InferenceConfig, InferenceTrace};
use translucid::model::DenoiserModel;
use translucid::raster::ImageTensor;
use translucid::rng::derive_seed;
use translucid::synthesis::{make_sample, TexturePool};
use translucid::training::{log_csv, stored_train_config, Trainer};
use translucid::verify;

use crate::{
    ConfigArgs, EvalArgs, FusionArgs, InferArgs, SweepArgs, SweepParamName, SynthArgs, ToyArgs, TrainArgs, VerifyArgs,
};

fn load_config(a: &ConfigArgs) -> Result<AppConfig> {
    let mut cfg = match &a.config {
        Some(p) => AppConfig::load(p)?,
        None if a.desk => AppConfig::desk(),
        None => AppConfig::default(),
    };
    if let Some(r) = &a.data_root {
        cfg.data.root.clone_from(r);
    }
    if let Some(c) = &a.category {
        cfg.data.category.clone_from(c);
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.schedule {
        cfg.train.schedule = s.into();
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn apply_fusion(inf: &mut InferenceConfig, f: &FusionArgs) {
    if let Some(l) = f.lambda {
        inf.lambda = l;
    }
    if let Some(k) = f.kernel {
        inf.kernel = k;
    }
    if let Some(t) = f.tau {
        inf.tau = t;
    }
    if let Some(d) = f.disc {
        inf.disc = d.into();
    }
}

fn texture_pool(cfg: &AppConfig) -> Result<TexturePool> {
    Ok(match &cfg.train.synthesis.texture_dir {
        Some(dir) => load_texture_pool(dir, cfg.train.image_size)?,
        None => cfg.train.procedural_pool()?,
    })
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.cfg)?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.lr_drop_epoch {
        t.lr_drop_epoch = v;
    }
    cfg.validate()?;
    let layout = load_dataset(&cfg.data.root, &cfg.data.category)?;
    let images = data::load_train_images(&layout, &cfg.data.preprocessor()?)?;
    eprintln!("{} training images from {}", images.len(), cfg.data.root.join(&cfg.data.category).display());
    let pool = texture_pool(&cfg)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(p, cfg.train.clone(), pool)?,
        None => Trainer::new(cfg.train.clone(), pool)?,
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("config.toml"), cfg.to_toml())?;
    let log_path = a.out_dir.join("train_log.csv");
    let result = trainer.train(&images, Some(&a.out_dir), |r| {
        eprintln!(
            "epoch {:>5}  lr {:.1e}  total {:.5}  normal {:.4}  mask {:.4}  anomaly {:.4}  consistency {:.6}",
            r.epoch, r.lr, r.loss.total, r.loss.normal, r.loss.mask, r.loss.anomaly, r.loss.consistency
        );
    });
    fs::write(&log_path, log_csv(trainer.log()))?;
    result?;
    println!("{}", a.out_dir.join("final.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

/// Images under `dir` with their extension-free relative paths, sorted.
fn walk_images(dir: &Path, skip: Option<&str>) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                if skip.is_some_and(|s| p.file_name().is_some_and(|n| n == s)) {
                    continue;
                }
                stack.push(p);
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            {
                let rel = p.strip_prefix(dir)?.with_extension("");
                let id = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.push((id, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Config for commands that run a trained model. Without `--config`, the
/// checkpoint's own step count, schedule and image size are adopted.
fn model_config(a: &ConfigArgs, checkpoint: &Path) -> Result<(AppConfig, InferenceConfig)> {
    let stored = stored_train_config(checkpoint)?;
    let mut cfg = load_config(&ConfigArgs {
        steps: None,
        schedule: None,
        ..a.clone()
    })?;
    if let (None, Some(tc)) = (&a.config, &stored) {
        cfg.train.steps = tc.steps;
        cfg.train.schedule = tc.schedule;
        if cfg.train.image_size != tc.image_size {
            cfg.train.image_size = tc.image_size;
            cfg.data.resize = tc.image_size as u32;
            cfg.data.crop = tc.image_size as u32;
            cfg.inference.kernel = kernel_for_size(tc.image_size);
        }
    }
    let trained_steps = stored.as_ref().map_or(cfg.train.steps, |t| t.steps);
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.schedule {
        cfg.train.schedule = s.into();
    }
    let mut inf = cfg.inference.clone();
    if inf.model_steps.is_none() {
        inf.model_steps = Some(trained_steps);
    }
    Ok((cfg, inf))
}

fn save_trace(dir: &Path, trace: &InferenceTrace) -> Result<()> {
    let r = &trace.reverse;
    let steps = r.steps();
    for (i, (x, m)) in r.states.iter().zip(&r.masks).enumerate() {
        let t = steps - i;
        save_image_png(x, &dir.join(format!("x_{t:03}.png")))?;
        save_mask_png8(m, &dir.join(format!("mask_{t:03}.png")))?;
    }
    save_image_png(&r.x0, &dir.join("x_000.png"))?;
    save_mask_png16(&trace.fused.m_disc, &dir.join("m_disc.png"))?;
    save_mask_png16(&trace.fused.m_recon, &dir.join("m_recon.png"))?;
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<ExitCode> {
    let (cfg, mut inf) = model_config(&a.cfg, &a.checkpoint)?;
    apply_fusion(&mut inf, &a.fusion);
    let model = DenoiserModel::<f32>::load(&a.checkpoint, None)?;
    let pre = cfg.data.preprocessor()?;
    let files = walk_images(&a.input_dir, None)?;
    if files.is_empty() {
        bail!("no images found under {}", a.input_dir.display());
    }
    let images = files
        .iter()
        .map(|(_, p)| pre.load_image(p))
        .collect::<translucid::Result<Vec<ImageTensor>>>()?;
    let schedule = cfg.train.schedule()?;
    let traces = infer_all(&model, &images, &schedule, &inf)?;
    let mut csv = String::from("image,score\n");
    for ((id, _), trace) in files.iter().zip(&traces) {
        save_mask_png16(&trace.fused.m_final, &a.out_dir.join(format!("{id}.png")))?;
        csv.push_str(&format!("{id},{}\n", trace.fused.score));
        if a.save_trace {
            save_trace(&a.out_dir.join("trace").join(id), trace)?;
        }
    }
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("scores.csv"), csv)?;
    eprintln!("wrote {} maps to {}", traces.len(), a.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn read_scores(path: &Path) -> Result<HashMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let Some((id, s)) = line.rsplit_once(',') else {
            bail!("{}:{}: expected `image,score`", path.display(), n + 1);
        };
        out.insert(id.to_string(), s.trim().parse::<f64>().with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.cfg)?;
    let pre = cfg.data.preprocessor()?;
    let scores_path = a.pred_dir.join("scores.csv");
    let scores = if scores_path.is_file() {
        Some(read_scores(&scores_path)?)
    } else {
        None
    };
    let mut records = Vec::new();
    for (id, path) in walk_images(&a.pred_dir, Some("trace"))? {
        let pred_map = load_score_map(&path)?;
        let score = match scores.as_ref().and_then(|s| s.get(&id)) {
            Some(&s) => s,
            None => pred_map.max(),
        };
        let gt_path = a.gt_dir.join(format!("{id}_mask.png"));
        let gt_map = if gt_path.is_file() {
            let m = pre.load_mask(&gt_path)?;
            if !m.same_dims(&pred_map) {
                bail!(
                    "{}: mask is {}x{} after preprocessing, prediction is {}x{}",
                    gt_path.display(),
                    m.height(),
                    m.width(),
                    pred_map.height(),
                    pred_map.width()
                );
            }
            Some(m)
        } else {
            None
        };
        records.push(EvalRecord {
            id,
            score,
            anomalous: gt_map.is_some(),
            pred_map,
            gt_map,
        });
    }
    let fpr = a.fpr_limit.unwrap_or(cfg.eval.fpr_limit);
    let metrics = evaluation::evaluate(&records, fpr)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, evaluation::report_csv(&records, &metrics))?;
    println!("AUROC {:.4}  AUPRO@{fpr} {:.4}  ({} images)", metrics.auroc, metrics.aupro, records.len());
    Ok(ExitCode::SUCCESS)
}

pub fn synth_preview(a: SynthArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.cfg)?;
    let t = &cfg.train;
    let size = t.image_size;
    let normals: Vec<ImageTensor> = match load_dataset(&cfg.data.root, &cfg.data.category) {
        Ok(layout) => data::load_train_images(&layout, &cfg.data.preprocessor()?)?,
        Err(_) => {
            eprintln!("no dataset at {}; using toy normals", cfg.data.root.join(&cfg.data.category).display());
            data::toy_train_set(a.count.max(1), size, t.seed)?
        }
    };
    let schedule = t.schedule()?;
    let pool = texture_pool(&cfg)?;
    for i in 0..a.count {
        let normal = &normals[i % normals.len()];
        let s = make_sample(normal, true, &schedule, &pool, &t.synthesis, derive_seed(&[t.seed, 0x9E7, i as u64]))?;
        save_image_png(&s.image_t, &a.out_dir.join(format!("{i:03}_image.png")))?;
        save_mask_png8(&s.gt_mask, &a.out_dir.join(format!("{i:03}_mask.png")))?;
        save_mask_png8(&s.prev_mask, &a.out_dir.join(format!("{i:03}_prev.png")))?;
        eprintln!("{i:03}: t = {}, mask area {:.3}", s.t, s.gt_mask.area_fraction());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_values(name: SweepParamName, values: &[String]) -> Result<SweepParam> {
    fn all<T: std::str::FromStr>(v: &[String]) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        v.iter()
            .map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad sweep value `{s}`: {e}")))
            .collect()
    }
    Ok(match name {
        SweepParamName::Lambda => SweepParam::Lambda(all(values)?),
        SweepParamName::Kernel => SweepParam::Kernel(all(values)?),
        SweepParamName::Steps => SweepParam::Steps(all(values)?),
        SweepParamName::Schedule => SweepParam::Schedule(all::<ScheduleShape>(values)?),
    })
}

pub fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let (cfg, mut inf) = model_config(&a.cfg, &a.checkpoint)?;
    apply_fusion(&mut inf, &a.fusion);
    let param = parse_values(a.param, &a.values)?;
    let model = DenoiserModel::<f32>::load(&a.checkpoint, None)?;
    let layout = load_dataset(&cfg.data.root, &cfg.data.category)?;
    let set: EvalSet = load_eval_set(&layout, &cfg.data.preprocessor()?)?;
    let schedule = cfg.train.schedule()?;
    let rows = match param {
        SweepParam::Lambda(_) | SweepParam::Kernel(_) => {
            let traces = infer_all(&model, &set.images, &schedule, &inf)?;
            evaluation::sweep_fusion(&set, &traces, &inf.fusion(), &param, cfg.eval.fpr_limit)?
        }
        _ => evaluation::sweep_reverse(&model, &set, &schedule, &inf, &param, cfg.eval.fpr_limit)?,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let csv = evaluation::sweep_csv(&rows);
    fs::write(&a.out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

pub fn verify_process(a: VerifyArgs) -> Result<ExitCode> {
    let r = verify::verify_process(a.seed, a.cases, a.size)?;
    let single = r.max_single_step_error();
    let tele = r.max_telescoping_error();
    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} single-step: max error {single:.3e} (limit {:.0e}) over {} cases",
        mark(single < verify::SINGLE_STEP_TOLERANCE),
        verify::SINGLE_STEP_TOLERANCE,
        r.cases.len()
    );
    println!(
        "{} telescoping: max error {tele:.3e} (limit {:.0e})",
        mark(tele < verify::TELESCOPING_TOLERANCE),
        verify::TELESCOPING_TOLERANCE
    );
    Ok(if r.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

pub fn make_toy(a: ToyArgs) -> Result<ExitCode> {
    data::write_toy_dataset(&a.root, &a.category, a.train, a.test_normal, a.test_anomalous, a.size, a.seed)?;
    println!("{}", a.root.join(&a.category).display());
    Ok(ExitCode::SUCCESS)
}
