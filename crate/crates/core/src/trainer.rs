//! Optimisation: Adam, early stopping, patch and slice pipelines, and the
//! per-epoch training log.
//!
//! A synthesis epoch draws `patches_per_subject` random patches from every
//! training subject in shuffled order. At least half the patches of every
//! batch cover `min_coverage` or more of the brain mask. Losses are taken
//! over masked voxels only. Validation uses a fixed set of patches drawn
//! once per run. After the last epoch the parameters of the best
//! validation epoch are restored.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{augment, augment_seed, Classifier, SliceStack};
use crate::error::{config_err, Error, Result};
use crate::nn::ParamStore;
use crate::synthnet::SynthModel;
use crate::tensor::{mix_seed, Graph, Mode, Var};
use crate::volume::{crop, normalize, Split, SubjectRecord};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || params.params().iter().map(|p| vec![0.0f32; p.value.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A missing gradient counts as zero. Any non-finite
    /// gradient aborts before a single parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(crate::error::shape_err!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        for (p, g) in params.params().iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.value.len() {
                    return Err(crate::error::shape_err!("gradient of `{}` has {} values, parameter has {}", p.name, g.len(), p.value.len()));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j] as f64);
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = self.lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                p.value[j] = (p.value[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Stops once the monitored value has not improved for `patience`
/// consecutive epochs. Lower is better; NaN never improves.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records `value` for `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// True when the last observation was a new best.
    pub fn improved(&self) -> bool {
        self.since_best == 0 && self.best_epoch > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch records, best and last epoch, a parameter digest per epoch,
/// and wall time per epoch. Everything except wall time is a pure function
/// of the inputs and seed.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub epoch_digests: Vec<String>,
    pub wall_seconds: Vec<f64>,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.best_epoch == other.best_epoch && self.stopped_epoch == other.stopped_epoch && self.epoch_digests == other.epoch_digests
    }
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.records.push(LogRecord { epoch, split: split.into(), metric: metric.into(), value });
    }

    pub fn value(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.records.iter().find(|r| r.epoch == epoch && r.split == split && r.metric == metric).map(|r| r.value)
    }

    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records.iter().filter(|r| r.split == split && r.metric == metric).map(|r| (r.epoch, r.value)).collect()
    }

    /// `epoch\tsplit\tmetric\tvalue` lines with a header; best and stopping
    /// epochs as `summary` rows. Wall time is left out so the file is
    /// reproducible.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tsplit\tmetric\tvalue\n");
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.epoch, r.split, r.metric, r.value);
        }
        let _ = writeln!(s, "{}\tsummary\tbest_epoch\t{}", self.best_epoch, self.best_epoch);
        let _ = writeln!(s, "{}\tsummary\tstopped_epoch\t{}", self.stopped_epoch, self.stopped_epoch);
        s
    }

    pub fn timing_tsv(&self) -> String {
        let mut s = String::from("epoch\twall_seconds\n");
        for (i, w) in self.wall_seconds.iter().enumerate() {
            let _ = writeln!(s, "{}\t{w:.3}", i + 1);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let fields: Vec<&str> = line.trim_end().split('\t').collect();
            let at = offset;
            let bad = || Error::Parse { offset: at, message: format!("train log line {}: expected epoch, split, metric, value", i + 1) };
            offset += line.len();
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let [epoch, split, metric, value] = fields[..] else { return Err(bad()) };
            let epoch: usize = epoch.parse().map_err(|_| bad())?;
            let value: f64 = value.parse().map_err(|_| bad())?;
            match (split, metric) {
                ("summary", "best_epoch") => log.best_epoch = epoch,
                ("summary", "stopped_epoch") => log.stopped_epoch = epoch,
                _ => log.push(epoch, split, metric, value),
            }
        }
        Ok(log)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthLoss {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "l1+ssim")]
    L1Ssim,
}

impl std::str::FromStr for SynthLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(SynthLoss::L1),
            "l2" => Ok(SynthLoss::L2),
            "l1+ssim" => Ok(SynthLoss::L1Ssim),
            _ => Err(config_err!("unknown synthesis loss `{s}` (l1, l2, l1+ssim)")),
        }
    }
}

/// SSIM constants of the loss, for targets of unit dynamic range.
pub const SSIM_LOSS_C1: f64 = 0.01 * 0.01;
pub const SSIM_LOSS_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: SynthLoss,
    pub ssim_window: usize,
    pub patches_per_subject: usize,
    pub val_patches_per_subject: usize,
    pub min_coverage: f64,
    pub seed: u64,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        SynthTrainConfig {
            lr: 1e-4,
            batch: 10,
            max_epochs: 120,
            patience: 10,
            loss: SynthLoss::L1,
            ssim_window: 7,
            patches_per_subject: 1,
            val_patches_per_subject: 2,
            min_coverage: 0.1,
            seed: 0,
        }
    }
}

fn check_common(lr: f64, batch: usize, patience: usize, max_epochs: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err!("lr must be positive, got {lr}"));
    }
    if batch == 0 || patience == 0 || max_epochs == 0 {
        return Err(config_err!("batch, patience and max-epochs must be at least 1"));
    }
    Ok(())
}

impl SynthTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lr, self.batch, self.patience, self.max_epochs)?;
        if self.patches_per_subject == 0 || self.val_patches_per_subject == 0 {
            return Err(config_err!("patches-per-subject and val-patches-per-subject must be at least 1"));
        }
        if self.ssim_window % 2 == 0 {
            return Err(config_err!("ssim-window must be odd, got {}", self.ssim_window));
        }
        Ok(())
    }
}

/// Patches with targets and mask, `[n, 1, p³]`, `[n, tasks, p³]`, `[n, tasks, p³]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBatch {
    pub n: usize,
    pub patch: usize,
    pub tasks: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub weight: Vec<f32>,
}

/// Loss value and its components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    /// `1 − SSIM`.
    pub ssim_term: Option<f64>,
}

impl LossParts {
    fn scaled_add(&mut self, other: &LossParts, w: f64) {
        let add = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + w * b);
            }
        };
        self.total += w * other.total;
        add(&mut self.l1, other.l1);
        add(&mut self.l2, other.l2);
        add(&mut self.ssim_term, other.ssim_term);
    }

    fn log(&self, log: &mut TrainLog, epoch: usize, split: &str) {
        log.push(epoch, split, "loss", self.total);
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("ssim_term", self.ssim_term)] {
            if let Some(v) = v {
                log.push(epoch, split, name, v);
            }
        }
    }
}

/// Builds the selected masked loss on `pred` against the batch targets.
pub fn synth_loss(g: &mut Graph, pred: Var, batch: &SynthBatch, kind: SynthLoss, window: usize) -> Result<(Var, LossParts)> {
    let shape = g.shape(pred).to_vec();
    let target = g.constant(batch.target.clone(), &shape)?;
    let w = Some(batch.weight.as_slice());
    Ok(match kind {
        SynthLoss::L1 => {
            let l = g.l1_loss(pred, target, w)?;
            let v = g.scalar(l) as f64;
            (l, LossParts { total: v, l1: Some(v), ..LossParts::default() })
        }
        SynthLoss::L2 => {
            let l = g.mse_loss(pred, target, w)?;
            let v = g.scalar(l) as f64;
            (l, LossParts { total: v, l2: Some(v), ..LossParts::default() })
        }
        SynthLoss::L1Ssim => {
            let l1 = g.l1_loss(pred, target, w)?;
            let s = g.ssim_loss(pred, target, w, window, SSIM_LOSS_C1, SSIM_LOSS_C2)?;
            let total = g.add(l1, s)?;
            let parts = LossParts { total: g.scalar(total) as f64, l1: Some(g.scalar(l1) as f64), ssim_term: Some(g.scalar(s) as f64), l2: None };
            (total, parts)
        }
    })
}

/// One optimisation step on a batch. `step` keys the dropout streams.
pub fn synth_step(model: &mut SynthModel, adam: &mut Adam, batch: &SynthBatch, cfg: &SynthTrainConfig, step: u64) -> Result<LossParts> {
    let p = batch.patch;
    let mut g = Graph::with_seed(mix_seed(&[cfg.seed, 0xD0]), step);
    let x = g.constant(batch.input.clone(), &[batch.n, 1, p, p, p])?;
    let (y, b) = model.forward(&mut g, x, Mode::Train)?;
    let (loss, parts) = synth_loss(&mut g, y, batch, cfg.loss, cfg.ssim_window)?;
    g.backward(loss)?;
    let grads = b.take_grads(&mut g);
    adam.step(&mut model.params, &grads)?;
    Ok(parts)
}

/// Eval-mode loss on a batch.
pub fn synth_eval_loss(model: &mut SynthModel, batch: &SynthBatch, kind: SynthLoss, window: usize) -> Result<LossParts> {
    let p = batch.patch;
    let mut g = Graph::new();
    let x = g.constant(batch.input.clone(), &[batch.n, 1, p, p, p])?;
    let (y, _) = model.forward(&mut g, x, Mode::Eval)?;
    Ok(synth_loss(&mut g, y, batch, kind, window)?.1)
}

/// Normalised input, target maps and mask of one subject.
struct Prepared {
    dims: [usize; 3],
    input: Vec<f32>,
    targets: Vec<Vec<f32>>,
    mask: Vec<f32>,
}

fn prepare(s: &SubjectRecord, model: &SynthModel) -> Result<Prepared> {
    let mask = s.mask_or_full();
    let input = normalize(&s.t1w, &mask, model.config.input_norm)?.volume.data;
    let targets = model
        .config
        .tasks
        .names()
        .iter()
        .map(|t| {
            let v = if *t == "fa" { &s.fa } else { &s.md };
            v.as_ref().map(|v| v.data.clone()).ok_or_else(|| Error::Invalid(format!("subject {} has no {} ground truth", s.id, t.to_uppercase())))
        })
        .collect::<Result<_>>()?;
    Ok(Prepared { dims: s.t1w.dims, input, targets, mask: mask.data })
}

struct PatchSampler<'a> {
    subjects: &'a [Prepared],
    patch: usize,
    min_coverage: f64,
}

/// Draws per subject before giving up on finding a covered patch.
const MAX_DRAWS: usize = 1000;

impl PatchSampler<'_> {
    fn origin(&self, rng: &mut ChaCha8Rng, s: &Prepared) -> [usize; 3] {
        s.dims.map(|d| rng.gen_range(0..=d - self.patch))
    }

    fn coverage(&self, s: &Prepared, origin: [usize; 3]) -> f64 {
        let m = crop(&s.mask, s.dims, origin, self.patch);
        m.iter().filter(|&&v| v > 0.0).count() as f64 / m.len() as f64
    }

    /// Origins for `subjects`, at least half covering `min_coverage`.
    fn batch_origins(&self, rng: &mut ChaCha8Rng, subjects: &[usize]) -> Result<Vec<[usize; 3]>> {
        let allowed_low = subjects.len() / 2;
        let mut low = 0;
        subjects
            .iter()
            .map(|&i| {
                let s = &self.subjects[i];
                for _ in 0..MAX_DRAWS {
                    let o = self.origin(rng, s);
                    if self.coverage(s, o) >= self.min_coverage {
                        return Ok(o);
                    }
                    if low < allowed_low {
                        low += 1;
                        return Ok(o);
                    }
                }
                Err(Error::Invalid(format!("no {}³ patch covers {} of the brain mask after {MAX_DRAWS} draws", self.patch, self.min_coverage)))
            })
            .collect()
    }

    fn batch(&self, picks: &[(usize, [usize; 3])], tasks: usize) -> SynthBatch {
        let p = self.patch;
        let mut b = SynthBatch { n: picks.len(), patch: p, tasks, input: Vec::new(), target: Vec::new(), weight: Vec::new() };
        for &(i, o) in picks {
            let s = &self.subjects[i];
            b.input.extend(crop(&s.input, s.dims, o, p));
            let m = crop(&s.mask, s.dims, o, p);
            for t in &s.targets {
                b.target.extend(crop(t, s.dims, o, p));
                b.weight.extend_from_slice(&m);
            }
        }
        b
    }
}

fn split_of<'a>(cohort: &'a [SubjectRecord], split: Split) -> Vec<&'a SubjectRecord> {
    cohort.iter().filter(|s| s.split == split).collect()
}

/// Trains `model` in place on the cohort's train split, monitoring loss on
/// the val split, and restores the best-validation parameters.
pub fn train_synth(model: &mut SynthModel, cohort: &[SubjectRecord], cfg: &SynthTrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let (train, val) = (split_of(cohort, Split::Train), split_of(cohort, Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!("synthesis training needs train and val subjects; have {} and {}", train.len(), val.len())));
    }
    let p = model.config.patch_size;
    let tasks = model.config.tasks.count();
    let train_p: Vec<Prepared> = train.iter().map(|s| prepare(s, model)).collect::<Result<_>>()?;
    let val_p: Vec<Prepared> = val.iter().map(|s| prepare(s, model)).collect::<Result<_>>()?;
    for s in train_p.iter().chain(&val_p) {
        if s.dims.iter().any(|&d| d < p) {
            return Err(crate::error::shape_err!("volume {:?} is smaller than patch {p}", s.dims));
        }
    }
    let train_sampler = PatchSampler { subjects: &train_p, patch: p, min_coverage: cfg.min_coverage };
    let val_sampler = PatchSampler { subjects: &val_p, patch: p, min_coverage: cfg.min_coverage };

    // fixed validation patches, all required to meet the coverage rule
    let mut vrng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x7A1]));
    let val_subjects: Vec<usize> = (0..val_p.len()).flat_map(|i| std::iter::repeat_n(i, cfg.val_patches_per_subject)).collect();
    let val_picks: Vec<(usize, [usize; 3])> = val_subjects
        .iter()
        .map(|&i| val_sampler.batch_origins(&mut vrng, &[i]).map(|o| (i, o[0])))
        .collect::<Result<_>>()?;
    let val_batches: Vec<SynthBatch> = val_picks.chunks(cfg.batch).map(|c| val_sampler.batch(c, tasks)).collect();

    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.params.clone();
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5A3]));
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_p.len()).flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_subject)).collect();
        order.shuffle(&mut rng);
        let mut train_parts = LossParts::default();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        for subjects in &batches {
            let origins = train_sampler.batch_origins(&mut rng, subjects)?;
            let picks: Vec<_> = subjects.iter().copied().zip(origins).collect();
            let batch = train_sampler.batch(&picks, tasks);
            let parts = synth_step(model, &mut adam, &batch, cfg, step)?;
            step += 1;
            train_parts.scaled_add(&parts, 1.0 / batches.len() as f64);
        }
        let mut val_parts = LossParts::default();
        for b in &val_batches {
            let parts = synth_eval_loss(model, b, cfg.loss, cfg.ssim_window)?;
            val_parts.scaled_add(&parts, b.n as f64 / val_picks.len() as f64);
        }
        train_parts.log(&mut log, epoch, "train");
        val_parts.log(&mut log, epoch, "val");
        let stop = stopper.observe(epoch, val_parts.total);
        if stopper.improved() {
            best = model.params.clone();
        }
        log.epoch_digests.push(model.params.digest());
        log.wall_seconds.push(t0.elapsed().as_secs_f64());
        log.stopped_epoch = epoch;
        log::info!("synth epoch {epoch}: train {:.5} val {:.5}", train_parts.total, val_parts.total);
        if stop {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch();
    if log.best_epoch > 0 {
        model.params = best;
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClfLoss {
    Bce,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss: ClfLoss,
    pub augment: bool,
    pub seed: u64,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        ClfTrainConfig { lr: 5e-4, batch: 30, max_epochs: 20, patience: 10, loss: ClfLoss::Bce, augment: true, seed: 0 }
    }
}

/// Slices with targets, `[n, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBatch {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
    pub targets: Vec<usize>,
}

fn check_loss(model: &Classifier, loss: ClfLoss) -> Result<()> {
    match (loss, model.config.classes) {
        (ClfLoss::Bce, 2) | (ClfLoss::CrossEntropy, 3) => Ok(()),
        (l, k) => Err(config_err!("loss {l:?} does not fit a {k}-class classifier (bce needs 2 classes, cross-entropy 3)")),
    }
}

fn clf_loss(g: &mut Graph, logits: Var, targets: &[usize], loss: ClfLoss) -> Result<Var> {
    match loss {
        ClfLoss::Bce => {
            let t = g.constant(targets.iter().map(|&t| t as f32).collect(), &[targets.len(), 1])?;
            g.bce_with_logits_loss(logits, t)
        }
        ClfLoss::CrossEntropy => g.cross_entropy_loss(logits, targets),
    }
}

/// Number of rows whose predicted class equals the target.
fn correct(values: &[f32], outputs: usize, targets: &[usize]) -> usize {
    values
        .chunks(outputs)
        .zip(targets)
        .filter(|(row, &t)| {
            let pred = if outputs == 1 { usize::from(row[0] > 0.0) } else { (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }) };
            pred == t
        })
        .count()
}

/// One optimisation step; returns the batch loss and training accuracy.
pub fn clf_step(model: &mut Classifier, adam: &mut Adam, batch: &SliceBatch, loss: ClfLoss, graph_seed: u64, step: u64) -> Result<(f64, f64)> {
    check_loss(model, loss)?;
    let mut g = Graph::with_seed(graph_seed, step);
    let x = g.constant(batch.data.clone(), &batch.shape)?;
    let (y, b) = model.forward(&mut g, x, Mode::Train)?;
    let acc = correct(g.value(y), model.config.outputs(), &batch.targets) as f64 / batch.targets.len() as f64;
    let l = clf_loss(&mut g, y, &batch.targets, loss)?;
    let value = g.scalar(l) as f64;
    g.backward(l)?;
    let grads = b.take_grads(&mut g);
    adam.step(&mut model.params, &grads)?;
    Ok((value, acc))
}

/// Eval-mode loss and accuracy.
pub fn clf_eval(model: &mut Classifier, batch: &SliceBatch, loss: ClfLoss) -> Result<(f64, f64)> {
    check_loss(model, loss)?;
    let mut g = Graph::new();
    let x = g.constant(batch.data.clone(), &batch.shape)?;
    let (y, _) = model.forward(&mut g, x, Mode::Eval)?;
    let acc = correct(g.value(y), model.config.outputs(), &batch.targets) as f64 / batch.targets.len() as f64;
    let l = clf_loss(&mut g, y, &batch.targets, loss)?;
    Ok((g.scalar(l) as f64, acc))
}

/// `(stack, slice)` pairs with their targets.
fn slice_items(model: &Classifier, stacks: &[SliceStack]) -> Result<Vec<(usize, usize, usize)>> {
    let mut items = Vec::new();
    for (si, s) in stacks.iter().enumerate() {
        if s.channels != model.config.in_channels {
            return Err(crate::error::shape_err!("subject {}: {} channels, classifier expects {}", s.subject_id, s.channels, model.config.in_channels));
        }
        let t = model.config.target(s.label).ok_or_else(|| config_err!("subject {} has label {} outside the {}-class task", s.subject_id, s.label, model.config.classes))?;
        items.extend((0..s.len()).map(|k| (si, k, t)));
    }
    Ok(items)
}

fn gather(stacks: &[SliceStack], items: &[(usize, usize, usize)], mut aug: impl FnMut(&mut [f32], &SliceStack, usize, usize)) -> SliceBatch {
    let s0 = &stacks[items[0].0];
    let mut data = Vec::with_capacity(items.len() * s0.slice_len());
    for &(si, k, _) in items {
        let start = data.len();
        data.extend_from_slice(stacks[si].slice(k));
        aug(&mut data[start..], &stacks[si], si, k);
    }
    SliceBatch { shape: [items.len(), s0.channels, s0.height, s0.width], data, targets: items.iter().map(|i| i.2).collect() }
}

/// Trains on slices of the training stacks with augmentation, monitors
/// validation loss, restores the best-validation parameters.
pub fn train_classifier(model: &mut Classifier, train: &[SliceStack], val: &[SliceStack], cfg: &ClfTrainConfig) -> Result<TrainLog> {
    check_common(cfg.lr, cfg.batch, cfg.patience, cfg.max_epochs)?;
    check_loss(model, cfg.loss)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!("classifier training needs train and val subjects; have {} and {}", train.len(), val.len())));
    }
    let train_items = slice_items(model, train)?;
    let val_items = slice_items(model, val)?;
    let val_batches: Vec<SliceBatch> = val_items.chunks(cfg.batch).map(|c| gather(val, c, |_, _, _, _| {})).collect();
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.params.clone();
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xC1F]));
    let graph_seed = mix_seed(&[cfg.seed, 0xD1]);
    let mut step = 0u64;
    let jitter = model.config.jitter;
    let flip_prob = model.config.flip_prob;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order = train_items.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let batch = gather(train, chunk, |x, s, si, k| {
                if cfg.augment {
                    augment(x, s.channels, s.height, s.width, jitter.for_label(s.label), flip_prob, augment_seed(cfg.seed, epoch, si, k));
                }
            });
            let (l, a) = clf_step(model, &mut adam, &batch, cfg.loss, graph_seed, step)?;
            step += 1;
            loss_sum += l * chunk.len() as f64;
            acc_sum += a * chunk.len() as f64;
        }
        let n = order.len() as f64;
        let (mut vloss, mut vacc) = (0.0, 0.0);
        for b in &val_batches {
            let (l, a) = clf_eval(model, b, cfg.loss)?;
            vloss += l * b.targets.len() as f64;
            vacc += a * b.targets.len() as f64;
        }
        let vn = val_items.len() as f64;
        log.push(epoch, "train", "loss", loss_sum / n);
        log.push(epoch, "train", "accuracy", acc_sum / n);
        log.push(epoch, "val", "loss", vloss / vn);
        log.push(epoch, "val", "accuracy", vacc / vn);
        let stop = stopper.observe(epoch, vloss / vn);
        if stopper.improved() {
            best = model.params.clone();
        }
        log.epoch_digests.push(model.params.digest());
        log.wall_seconds.push(t0.elapsed().as_secs_f64());
        log.stopped_epoch = epoch;
        log::info!("clf epoch {epoch}: train {:.4} val {:.4} val-acc {:.3}", loss_sum / n, vloss / vn, vacc / vn);
        if stop {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch();
    if log.best_epoch > 0 {
        model.params = best;
    }
    Ok(log)
}
