//! Click-driven training of the segmentation network.
//!
//! Each step samples a target, drops a first click on it, crops the patch
//! around that click (the same crop rule inference uses), lets the current
//! model predict and adds corrective clicks from its error region, then
//! takes one optimizer step on the loss of the final prediction.

mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{
    generate_cases, make_synthetic_dataset, synthesize_case, write_cases, ShapeFamily, SyntheticCase, SyntheticSpec,
};

use crate::curate::{CurationReport, DatasetManifest};
use crate::error::{Error, Result};
use crate::infer::{crop_patch, extract_mask_window};
use crate::net3d::graph::sigmoid;
use crate::net3d::{save_model, LossWeights, ModelState};
use crate::nifti;
use crate::promptsim::{first_click, next_click_with, ClickStrategy};
use crate::voxgrid::{dice, BinaryMask, Dims, PointPrompt, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

/// Intensities are clipped to the given percentiles, then z-scored per
/// volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub lower_percentile: f64,
    pub upper_percentile: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            lower_percentile: 0.5,
            upper_percentile: 99.5,
        }
    }
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f32], q: f64) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = (pos - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

pub fn normalize_intensity(v: &Volume, n: &Normalization) -> Volume {
    let mut sorted = v.data.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile(&sorted, n.lower_percentile);
    let hi = percentile(&sorted, n.upper_percentile);
    let clipped: Vec<f64> = v.data.iter().map(|&x| x.clamp(lo, hi) as f64).collect();
    let len = clipped.len().max(1) as f64;
    let mean = clipped.iter().sum::<f64>() / len;
    let std = (clipped.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len).sqrt();
    let data = clipped
        .iter()
        .map(|&x| if std > 0.0 { ((x - mean) / std) as f32 } else { 0.0 })
        .collect();
    Volume { data, ..v.clone() }
}

/// Adam with optional momentum, linear warmup, cosine decay and global
/// gradient-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    /// 0 disables the first-moment average.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 20,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &ModelState<f32>, cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            t: 0,
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, model: &mut ModelState<f32>, grads: &mut [Vec<f32>], lr: f64) -> f64 {
        let norm = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if let Some(c) = self.cfg.clip_norm {
            if norm > c {
                let s = (c / norm) as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = if b1 > 0.0 { 1.0 - b1.powi(self.t) } else { 1.0 };
        let bc2 = 1.0 - b2.powi(self.t);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, (self.cfg.eps * bc2.sqrt()) as f32);
        for (((p, g), m), v) in model
            .params
            .entries_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p.data[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
        norm
    }
}

/// Stage-2 subset rule. `None` fields are not checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityCriteria {
    pub max_components_removed: Option<usize>,
    pub min_foreground_fraction: Option<f64>,
}

impl Default for QualityCriteria {
    /// No components removed by denoising, and at least twice the
    /// background filter's 1% foreground.
    fn default() -> Self {
        QualityCriteria {
            max_components_removed: Some(0),
            min_foreground_fraction: Some(0.02),
        }
    }
}

impl QualityCriteria {
    pub fn always() -> Self {
        QualityCriteria {
            max_components_removed: None,
            min_foreground_fraction: None,
        }
    }

    fn is_always(&self) -> bool {
        self.max_components_removed.is_none() && self.min_foreground_fraction.is_none()
    }
}

/// Keeps the classes whose curation record passes `criteria`; entries
/// left without classes are dropped.
pub fn select_high_quality(
    manifest: &DatasetManifest,
    report: &CurationReport,
    criteria: &QualityCriteria,
) -> DatasetManifest {
    if criteria.is_always() {
        return manifest.clone();
    }
    let records: BTreeMap<(&str, &str), _> = report
        .records
        .iter()
        .filter(|r| r.kept)
        .map(|r| ((r.case_id.as_str(), r.class_name.as_str()), r))
        .collect();
    let mut total = 0usize;
    let mut kept = 0usize;
    let mut entries = Vec::new();
    for e in &manifest.entries {
        let id = e.id();
        let class_map: BTreeMap<u32, String> = e
            .class_map
            .iter()
            .filter(|(_, name)| {
                total += 1;
                let ok = records.get(&(id.as_str(), name.as_str())).is_some_and(|r| {
                    criteria
                        .max_components_removed
                        .is_none_or(|m| r.components_removed <= m)
                        && criteria
                            .min_foreground_fraction
                            .is_none_or(|f| r.foreground_fraction >= f)
                });
                kept += ok as usize;
                ok
            })
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        if !class_map.is_empty() {
            entries.push(crate::curate::ManifestEntry { class_map, ..e.clone() });
        }
    }
    log::info!(
        "high-quality selection kept {kept} of {total} masks ({:.1}%)",
        100.0 * kept as f64 / total.max(1) as f64
    );
    DatasetManifest::new(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Clicks placed before the loss is taken: one initial click and the
    /// rest corrective.
    pub clicks_per_sample: usize,
    /// Draw the click count per sample uniformly from
    /// `1..=clicks_per_sample` instead of always using the maximum.
    pub random_click_count: bool,
    pub click_strategy: ClickStrategy,
    pub loss: LossWeights,
    pub normalization: Normalization,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stage-2 subset rule; requires `curation_report`.
    pub quality: QualityCriteria,
    pub curation_report: Option<PathBuf>,
    /// Checkpoints and `metrics.jsonl` go here when set.
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 1,
            batch_size: 1,
            clicks_per_sample: 3,
            random_click_count: false,
            click_strategy: ClickStrategy::Uniform,
            loss: LossWeights::default(),
            normalization: Normalization::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            quality: QualityCriteria::default(),
            curation_report: None,
            out_dir: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.clicks_per_sample == 0 {
            return bad("batch size and clicks per sample must be at least 1");
        }
        let w = self.loss;
        if w.dice < 0.0 || w.ce < 0.0 || (w.dice == 0.0 && w.ce == 0.0) || w.smooth < 0.0 {
            return bad("loss weights must be non-negative and not both zero");
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.beta1) {
            return bad("learning rate must be positive and beta1 in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, targets: usize) -> usize {
        targets.div_ceil(self.batch_size)
    }
}

/// One (case, class) training target, intensities already normalized.
#[derive(Debug, Clone)]
pub struct TrainTarget {
    pub case_id: String,
    pub class_name: String,
    pub volume: Volume,
    pub gt: BinaryMask,
}

/// Loads every (case, class) pair of `manifest`. Classes with an empty
/// mask are skipped.
pub fn load_targets(manifest: &DatasetManifest, norm: &Normalization) -> Result<Vec<TrainTarget>> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        let volume = normalize_intensity(&nifti::read_volume(&e.image_path)?, norm);
        let labels = nifti::read_labels(&e.label_path, &e.class_map)?;
        if labels.dims != volume.dims {
            return Err(Error::Shape(format!("case {}: image and label dims differ", e.id())));
        }
        for (&id, name) in &labels.class_map {
            let gt = labels.class_mask(id);
            if gt.is_empty() {
                log::warn!("case {} class {name}: empty mask, skipped", e.id());
                continue;
            }
            out.push(TrainTarget {
                case_id: e.id(),
                class_name: name.clone(),
                volume: volume.clone(),
                gt,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metrics: Vec<StepMetrics>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }
}

/// Clicks for one training sample, in patch coordinates, along with the
/// patch and its target.
pub struct Sample {
    pub patch: Volume,
    pub target: BinaryMask,
    pub clicks: Vec<PointPrompt>,
}

/// Builds one sample: first click on the target, crop around it, then
/// `n_clicks − 1` corrective clicks against the model's own predictions.
pub fn simulate_sample<R: Rng + ?Sized>(
    model: &ModelState<f32>,
    t: &TrainTarget,
    n_clicks: usize,
    strategy: ClickStrategy,
    rng: &mut R,
) -> Result<Sample> {
    let size = model.config.patch_input_size;
    let first = first_click(&t.gt, rng)?;
    let (patch, origin) = crop_patch(&t.volume, &first, size)?;
    let target = extract_mask_window(&t.gt, origin, size);
    let local = |p: &PointPrompt| PointPrompt {
        coord: std::array::from_fn(|a| (p.coord[a] as i64 - origin[a]) as usize),
        label: p.label,
    };
    let mut clicks = vec![local(&first)];
    for _ in 1..n_clicks {
        let logits = model.logits(&patch, &clicks)?;
        let pred = BinaryMask {
            dims: Dims::cube(size),
            voxels: logits.iter().map(|&z| z > 0.0).collect(),
        };
        match next_click_with(&target, &pred, &clicks, strategy, rng) {
            Ok(c) => clicks.push(c),
            Err(Error::Converged | Error::ClicksExhausted) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(Sample { patch, target, clicks })
}

fn write_metric(f: &mut Option<std::io::BufWriter<std::fs::File>>, m: &StepMetrics) -> Result<()> {
    if let Some(f) = f {
        serde_json::to_writer(&mut *f, m)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains on in-memory targets. Zero targets or a zero step budget leave
/// the model unchanged.
pub fn train_targets(
    mut model: ModelState<f32>,
    targets: &[TrainTarget],
    cfg: &TrainConfig,
) -> Result<(ModelState<f32>, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if targets.is_empty() {
        return Ok((model, log));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = cfg.steps_per_epoch(targets.len());
    let total = cfg.epochs * per_epoch;
    let mut opt = Adam::new(&model, cfg.optimizer);
    let mut metrics_file = match &cfg.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.params.zeros_like();
            let mut loss_sum = 0.0;
            let mut dice_sum = 0.0;
            for &ti in batch {
                let t = &targets[ti];
                let n = if cfg.random_click_count {
                    rng.gen_range(1..=cfg.clicks_per_sample)
                } else {
                    cfg.clicks_per_sample
                };
                let s = simulate_sample(&model, t, n, cfg.click_strategy, &mut rng)?;
                let (loss, g, logits) = model.loss_grad_and_logits(&s.patch, &s.clicks, &s.target.voxels, cfg.loss)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!(
                            "case {} class {} with {} clicks, loss {loss}",
                            t.case_id,
                            t.class_name,
                            s.clicks.len()
                        ),
                    });
                }
                let pred = BinaryMask {
                    dims: s.target.dims,
                    voxels: logits.iter().map(|&z| sigmoid(z as f64) > 0.5).collect(),
                };
                dice_sum += dice(&pred, &s.target)?;
                loss_sum += loss;
                for (acc, g) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let k = batch.len() as f32;
            if batch.len() > 1 {
                grads.iter_mut().flatten().for_each(|g| *g /= k);
            }
            let lr = cfg.optimizer.lr_at(step, total);
            opt.step(&mut model, &mut grads, lr);
            if !model.params.all_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: "parameters became non-finite after the update".into(),
                });
            }
            let m = StepMetrics {
                step,
                loss: loss_sum / batch.len() as f64,
                dice: dice_sum / batch.len() as f64,
            };
            write_metric(&mut metrics_file, &m)?;
            if step % 50 == 0 {
                log::info!("step {step}/{total} loss {:.4} dice {:.4} lr {lr:.2e}", m.loss, m.dice);
            }
            log.metrics.push(m);
            step += 1;
            if let (Some(d), Some(every)) = (&cfg.out_dir, cfg.checkpoint_every) {
                if every > 0 && step % every == 0 {
                    save_model(&model, &d.join(format!("checkpoint_{step:06}.psg")))?;
                }
            }
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    if let Some(d) = &cfg.out_dir {
        save_model(&model, &d.join("final.psg"))?;
    }
    Ok((model, log))
}

/// Runs one training stage over a manifest. The fine-tuning stage first
/// restricts the manifest with [`select_high_quality`].
pub fn train_stage(
    model: ModelState<f32>,
    data: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<(ModelState<f32>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training manifest is empty".into()));
    }
    let data = match cfg.stage {
        Stage::Pretrain => data.clone(),
        Stage::Finetune if cfg.quality.is_always() => data.clone(),
        Stage::Finetune => {
            let path = cfg
                .curation_report
                .as_deref()
                .ok_or_else(|| Error::Config("fine-tuning needs a curation report for the quality filter".into()))?;
            select_high_quality(data, &CurationReport::read_jsonl(path)?, &cfg.quality)
        }
    };
    let targets = load_targets(&data, &cfg.normalization)?;
    train_targets(model, &targets, cfg)
}

/// Where the report of a curated dataset lives by convention.
pub fn default_report_path(curated_dir: &Path) -> PathBuf {
    curated_dir.join("curation_report.jsonl")
}
