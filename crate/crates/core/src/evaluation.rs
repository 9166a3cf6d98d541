//! Image-level AUROC, region-level AUPRO and parameter sweeps.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::diffusion::{ScheduleShape, TransparencySchedule};
use crate::error::{ensure_domain, ensure_shape, Error, Result};
use crate::inference::{fuse_masks, infer_all, FusionConfig, InferenceConfig, InferenceTrace, Predictor};
use crate::raster::{AnomalyMask, ImageTensor};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
/// Above this many distinct predicted values the PRO curve is sampled at
/// [`QUANTILE_THRESHOLDS`] quantiles instead of every distinct value.
pub const EXACT_THRESHOLD_LIMIT: usize = 50_000;
pub const QUANTILE_THRESHOLDS: usize = 200;

/// Mann-Whitney AUROC; tied pairs count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure_shape!(scores.len() == labels.len(), "{} scores but {} labels", scores.len(), labels.len());
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUROC input contains a non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both normal and anomalous samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the U statistic, kept integral so ties stay exact
    let mut two_u: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        two_u += pos_g as u128 * (2 * neg_below + neg_g) as u128;
        neg_below += neg_g;
        i = j;
    }
    Ok(two_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// 8-connected labelling of pixels `> 0`; labels start at 1, background is 0.
pub fn connected_components(mask: &AnomalyMask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data()[start] <= 0.0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data()[q] > 0.0 && labels[q] == 0 {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// `(fpr, pro)` pairs for decreasing thresholds, starting at `(0, 0)`.
pub fn pro_curve(preds: &[AnomalyMask], gts: &[AnomalyMask]) -> Result<Vec<(f64, f64)>> {
    ensure_shape!(preds.len() == gts.len(), "{} predictions but {} ground truths", preds.len(), gts.len());
    let mut region_size: Vec<u64> = Vec::new();
    // (value, region index + 1 or 0 for normal pixels)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        p.ensure_same_dims(g, "pro_curve")?;
        let (labels, n) = connected_components(g);
        let base = region_size.len();
        region_size.extend(std::iter::repeat_n(0, n));
        for (&v, &l) in p.data().iter().zip(&labels) {
            if !v.is_finite() {
                return Err(Error::NonFinite("AUPRO input contains a non-finite value".into()));
            }
            let r = if l == 0 { 0 } else { base + l as usize };
            if r > 0 {
                region_size[r - 1] += 1;
            }
            pixels.push((v, r));
        }
    }
    if region_size.is_empty() {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous region".into()));
    }
    let n_normal = pixels.iter().filter(|p| p.1 == 0).count();
    if n_normal == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs normal pixels for the false-positive rate".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut distinct = 1;
    for w in pixels.windows(2) {
        if w[0].0 != w[1].0 {
            distinct += 1;
        }
    }
    // positions in the descending order after which a curve point is emitted
    let cut_after: Option<Vec<f64>> = (distinct > EXACT_THRESHOLD_LIMIT).then(|| {
        (1..=QUANTILE_THRESHOLDS)
            .map(|k| {
                let q = 1.0 - k as f64 / QUANTILE_THRESHOLDS as f64;
                let i = ((pixels.len() - 1) as f64 * q).round() as usize;
                // ascending-quantile value = descending index from the end
                pixels[pixels.len() - 1 - i].0
            })
            .collect()
    });

    let n_regions = region_size.len() as f64;
    let mut hits = vec![0u64; region_size.len()];
    let mut fp = 0u64;
    let mut curve = vec![(0.0, 0.0)];
    let mut next_cut = 0;
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            match pixels[i].1 {
                0 => fp += 1,
                r => hits[r - 1] += 1,
            }
            i += 1;
        }
        let emit = match &cut_after {
            None => true,
            Some(cuts) => {
                let mut e = false;
                while next_cut < cuts.len() && cuts[next_cut] >= v {
                    next_cut += 1;
                    e = true;
                }
                e || i == pixels.len()
            }
        };
        if emit {
            let pro = hits
                .iter()
                .zip(&region_size)
                .map(|(&h, &s)| h as f64 / s as f64)
                .sum::<f64>()
                / n_regions;
            curve.push((fp as f64 / n_normal as f64, pro));
        }
    }
    Ok(curve)
}

/// Trapezoid area under a monotone-in-x curve up to `limit`, divided by
/// `limit`; the segment crossing `limit` is linearly interpolated.
pub fn area_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

pub fn aupro(preds: &[AnomalyMask], gts: &[AnomalyMask], fpr_limit: f64) -> Result<f64> {
    ensure_domain!(fpr_limit > 0.0 && fpr_limit <= 1.0, "FPR limit must be in (0, 1], got {fpr_limit}");
    Ok(area_to_limit(&pro_curve(preds, gts)?, fpr_limit))
}

// ---------------------------------------------------------------------------
// Records and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub score: f64,
    pub anomalous: bool,
    pub pred_map: AnomalyMask,
    /// Absent for normal images, which count as all-zero.
    pub gt_map: Option<AnomalyMask>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub auroc: f64,
    pub aupro: f64,
}

pub fn evaluate(records: &[EvalRecord], fpr_limit: f64) -> Result<Metrics> {
    for r in records {
        if r.anomalous && r.gt_map.as_ref().is_none_or(|g| g.area() == 0) {
            return Err(Error::Validation(format!("anomalous record {} has an empty ground truth", r.id)));
        }
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.anomalous).collect();
    let preds: Vec<AnomalyMask> = records.iter().map(|r| r.pred_map.clone()).collect();
    let gts: Vec<AnomalyMask> = records
        .iter()
        .map(|r| {
            r.gt_map
                .clone()
                .unwrap_or_else(|| AnomalyMask::zeros(r.pred_map.height(), r.pred_map.width()))
        })
        .collect();
    Ok(Metrics {
        auroc: auroc(&scores, &labels)?,
        aupro: aupro(&preds, &gts, fpr_limit)?,
    })
}

pub fn report_csv(records: &[EvalRecord], metrics: &Metrics) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "auroc,{}", metrics.auroc);
    let _ = writeln!(s, "aupro,{}", metrics.aupro);
    s.push_str("\nimage,label,score\n");
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.id, u8::from(r.anomalous), r.score);
    }
    s
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Labelled test images.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
    /// `None` for normal images.
    pub gts: Vec<Option<AnomalyMask>>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn records(&self, traces: &[InferenceTrace]) -> Vec<EvalRecord> {
        self.records_with(traces.iter().map(|t| (t.fused.score, t.fused.m_final.clone())))
    }

    fn records_with(&self, maps: impl Iterator<Item = (f64, AnomalyMask)>) -> Vec<EvalRecord> {
        maps.zip(self.ids.iter().zip(&self.gts))
            .map(|((score, pred_map), (id, gt))| EvalRecord {
                id: id.clone(),
                score,
                anomalous: gt.is_some(),
                pred_map,
                gt_map: gt.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepParam {
    Lambda(Vec<f64>),
    Kernel(Vec<usize>),
    Steps(Vec<usize>),
    Schedule(Vec<ScheduleShape>),
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Lambda(_) => "lambda",
            SweepParam::Kernel(_) => "kernel",
            SweepParam::Steps(_) => "steps",
            SweepParam::Schedule(_) => "schedule",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: String,
    pub metrics: Metrics,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("param,value,auroc,aupro\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.param, r.value, r.metrics.auroc, r.metrics.aupro);
    }
    s
}

/// Re-fuses cached traces for each value of a lambda or kernel sweep.
pub fn sweep_fusion(
    set: &EvalSet,
    traces: &[InferenceTrace],
    base: &FusionConfig,
    param: &SweepParam,
    fpr_limit: f64,
) -> Result<Vec<SweepRow>> {
    ensure_shape!(traces.len() == set.len(), "{} traces for {} images", traces.len(), set.len());
    let configs: Vec<(String, FusionConfig)> = match param {
        SweepParam::Lambda(v) => v.iter().map(|&l| (l.to_string(), FusionConfig { lambda: l, ..*base })).collect(),
        SweepParam::Kernel(v) => v.iter().map(|&k| (k.to_string(), FusionConfig { kernel: k, ..*base })).collect(),
        _ => {
            return Err(Error::Config(format!(
                "{} sweeps need fresh inference; use sweep_reverse",
                param.name()
            )))
        }
    };
    configs
        .into_iter()
        .map(|(value, cfg)| {
            let fused = traces
                .iter()
                .map(|t| fuse_masks(&t.reverse, &cfg).map(|f| (f.score, f.m_final)))
                .collect::<Result<Vec<_>>>()?;
            let metrics = evaluate(&set.records_with(fused.into_iter()), fpr_limit)?;
            Ok(SweepRow {
                param: param.name(),
                value,
                metrics,
            })
        })
        .collect()
}

/// Runs the reverse process again for each step count or schedule shape.
pub fn sweep_reverse<P: Predictor + Sync>(
    predictor: &P,
    set: &EvalSet,
    base_schedule: &TransparencySchedule,
    cfg: &InferenceConfig,
    param: &SweepParam,
    fpr_limit: f64,
) -> Result<Vec<SweepRow>> {
    let schedules: Vec<(String, TransparencySchedule)> = match param {
        SweepParam::Steps(v) => v
            .iter()
            .map(|&n| Ok((n.to_string(), TransparencySchedule::new(base_schedule.shape(), n)?)))
            .collect::<Result<_>>()?,
        SweepParam::Schedule(v) => v
            .iter()
            .map(|&s| Ok((s.to_string(), TransparencySchedule::new(s, base_schedule.steps())?)))
            .collect::<Result<_>>()?,
        other => return sweep_fusion(set, &infer_all(predictor, &set.images, base_schedule, cfg)?, &cfg.fusion(), other, fpr_limit),
    };
    schedules
        .into_iter()
        .map(|(value, sched)| {
            let traces = infer_all(predictor, &set.images, &sched, cfg)?;
            Ok(SweepRow {
                param: param.name(),
                value,
                metrics: evaluate(&set.records(&traces), fpr_limit)?,
            })
        })
        .collect()
}
