//! Experiment configuration and the runs behind each command-line verb.
//!
//! Every run directory receives `config.toml`, the fully resolved
//! configuration. Training runs add `train_log.tsv` (reproducible) and
//! `timing.tsv` (wall time, not reproducible).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClfConfig, SliceStack, SubjectPrediction};
use crate::error::{config_err, Error, Result};
use crate::metrics::{class_metrics, class_table, confusion_matrix, mean_synth_metrics, subject_auc, synth_metrics, synth_table, ClassMetrics, SynthMetrics};
use crate::phantom::{generate_cohort, CohortSpec, Profile, SplitFractions};
use crate::plot::loss_curve_svg;
use crate::synthnet::{self, synthesize, SynthConfig, SynthModel, SynthOutput, Tasks};
use crate::trainer::{train_classifier, train_synth, ClfLoss, ClfTrainConfig, SynthLoss, SynthTrainConfig, TrainLog};
use crate::volume::{load_cohort, save_cohort, Label, ManifestEntry, NormMethod, Split, SubjectRecord};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const SYNTH_CKPT: &str = "model.ckpt";
pub const CLF_CKPT: &str = "classifier.ckpt";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dims: [usize; 3],
    pub n_per_class: usize,
    pub profile: Profile,
    pub split: SplitFractions,
    /// Existing cohort directory; when absent, commands that need data
    /// without a `--cohort` flag generate phantoms from the fields above.
    pub cohort: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { dims: [64, 64, 64], n_per_class: 10, profile: Profile::A, split: SplitFractions::default(), cohort: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub synth: SynthTrainConfig,
    pub clf: ClfTrainConfig,
}

/// One ablation cell: overrides of the `[synth]` and `[train.synth]` values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCell {
    pub name: Option<String>,
    pub transformer: Option<bool>,
    pub input_norm: Option<NormMethod>,
    pub loss: Option<SynthLoss>,
    pub base_channels: Option<usize>,
    pub patch_size: Option<usize>,
    pub depth: Option<usize>,
    pub tasks: Option<Tasks>,
}

/// Explicit `cells`, or else the cartesian product of the axis lists; an
/// empty axis keeps the base value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub cells: Vec<AblateCell>,
    pub transformer: Vec<bool>,
    pub input_norm: Vec<NormMethod>,
    pub loss: Vec<SynthLoss>,
    pub base_channels: Vec<usize>,
    pub patch_size: Vec<usize>,
    pub depth: Vec<usize>,
    pub tasks: Vec<Tasks>,
    /// Cells trained concurrently.
    pub jobs: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            cells: Vec::new(),
            transformer: Vec::new(),
            input_norm: Vec::new(),
            loss: Vec::new(),
            base_channels: Vec::new(),
            patch_size: Vec::new(),
            depth: Vec::new(),
            tasks: Vec::new(),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Sliding-window stride for whole-volume prediction; half the patch
    /// size when absent.
    pub stride: Option<usize>,
    pub plot_width: u32,
    pub plot_height: u32,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { stride: None, plot_width: 640, plot_height: 400 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub train: TrainSection,
    pub clf: ClfConfig,
    pub ablate: AblateSection,
    pub report: ReportSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { offset: e.span().map_or(0, |s| s.start), message: e.message().to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Sets the run seed and copies it into the training sections.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.synth.seed = self.seed;
        self.train.clf.seed = self.seed;
        self
    }

    pub fn stride(&self, patch: usize) -> usize {
        self.report.stride.unwrap_or((patch / 2).max(1))
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec { dims: self.data.dims, n_per_class: self.data.n_per_class, profile: self.data.profile, seed: self.seed, split: self.data.split }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_run_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join(CONFIG_FILE), cfg.to_toml())
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    write(&dir.join(LOG_FILE), log.to_tsv())?;
    write(&dir.join(TIMING_FILE), log.timing_tsv())
}

/// Field-by-field differences between two serialisable configs.
pub fn config_diff<T: Serialize>(a: &T, b: &T, a_name: &str, b_name: &str) -> Vec<String> {
    let flat = |v: &T| -> BTreeMap<String, String> {
        match serde_json::to_value(v).expect("config serializes") {
            serde_json::Value::Object(m) => m.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
            other => BTreeMap::from([(String::new(), other.to_string())]),
        }
    };
    let (fa, fb) = (flat(a), flat(b));
    fa.keys()
        .chain(fb.keys().filter(|k| !fa.contains_key(*k)))
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| format!("{k}: {a_name}={} {b_name}={}", fa.get(k).map_or("-", String::as_str), fb.get(k).map_or("-", String::as_str)))
        .collect()
}

/// Refuses a checkpoint whose architecture differs from the configured one.
pub fn check_synth_config(ckpt: &SynthConfig, expected: &SynthConfig) -> Result<()> {
    let diff = config_diff(ckpt, expected, "checkpoint", "config");
    if diff.is_empty() {
        Ok(())
    } else {
        Err(config_err!("checkpoint does not match [synth]: {}", diff.join("; ")))
    }
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Writes a phantom cohort per `[data]` and the seed.
pub fn phantom_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Vec<ManifestEntry>> {
    if !force && dir_is_nonempty(out)? {
        return Err(Error::Invalid(format!("output directory {} is not empty; pass --force to overwrite", out.display())));
    }
    let cohort = generate_cohort(&cfg.cohort_spec())?;
    let entries = save_cohort(out, &cohort)?;
    write_run_config(out, cfg)?;
    Ok(entries)
}

/// The cohort at `dir`, or else the configured cohort directory, or else
/// phantoms generated from `[data]`.
pub fn resolve_cohort(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<SubjectRecord>> {
    match dir.or(cfg.data.cohort.as_deref()) {
        Some(d) => load_cohort(d),
        None => generate_cohort(&cfg.cohort_spec()),
    }
}

fn split_subjects(cohort: &[SubjectRecord], split: Split) -> Vec<&SubjectRecord> {
    cohort.iter().filter(|s| s.split == split).collect()
}

/// Trains a synthesis model; writes checkpoint, log and config to `out`.
pub fn synth_train(cfg: &ExperimentConfig, cohort: &[SubjectRecord], out: &Path) -> Result<(SynthModel, TrainLog)> {
    let mut model = synthnet::build(cfg.synth.clone(), cfg.seed)?;
    create_dir(out)?;
    write_run_config(out, cfg)?;
    let log = train_synth(&mut model, cohort, &cfg.train.synth)?;
    model.save(out.join(SYNTH_CKPT))?;
    write_log(out, &log)?;
    Ok((model, log))
}

/// Per-map means of the five synthesis metrics over `subjects`.
pub fn evaluate_synth(subjects: &[&SubjectRecord], mut predict: impl FnMut(&SubjectRecord) -> Result<SynthOutput>) -> Result<Vec<(String, SynthMetrics)>> {
    if subjects.is_empty() {
        return Err(Error::Invalid("no subjects to evaluate".into()));
    }
    let mut per_map: BTreeMap<&str, Vec<SynthMetrics>> = BTreeMap::new();
    for s in subjects {
        let out = predict(s)?;
        let mask = s.mask_or_full();
        for (name, pred, truth) in [("fa", &out.fa, &s.fa), ("md", &out.md, &s.md)] {
            if let Some(p) = pred {
                let t = truth.as_ref().ok_or_else(|| Error::Invalid(format!("subject {} has no {} reference", s.id, name.to_uppercase())))?;
                per_map.entry(name).or_default().push(synth_metrics(p, t, &mask)?);
            }
        }
    }
    Ok(per_map.into_iter().map(|(k, v)| (k.to_string(), mean_synth_metrics(&v).expect("nonempty"))).collect())
}

fn labelled(set: &str, rows: Vec<(String, SynthMetrics)>) -> Vec<(String, String, SynthMetrics)> {
    rows.into_iter().map(|(m, v)| (set.to_string(), m, v)).collect()
}

fn test_split(cohort: &[SubjectRecord]) -> Result<Vec<&SubjectRecord>> {
    let t = split_subjects(cohort, Split::Test);
    if t.is_empty() {
        return Err(Error::Invalid("cohort has no test-split subjects".into()));
    }
    Ok(t)
}

fn load_synth(ckpt: &Path, expected: Option<&ExperimentConfig>) -> Result<SynthModel> {
    let model = SynthModel::load(ckpt)?;
    if let Some(cfg) = expected {
        check_synth_config(&model.config, &cfg.synth)?;
    }
    Ok(model)
}

fn stride_of(expected: Option<&ExperimentConfig>, model: &SynthModel) -> usize {
    let p = model.config.patch_size;
    expected.map_or((p / 2).max(1), |c| c.stride(p))
}

/// Test-split synthesis metrics of a checkpoint, written as a report table.
pub fn synth_eval(ckpt: &Path, cohort: &[SubjectRecord], report: &Path, expected: Option<&ExperimentConfig>) -> Result<Vec<(String, String, SynthMetrics)>> {
    let mut model = load_synth(ckpt, expected)?;
    let stride = stride_of(expected, &model);
    let rows = labelled("test", evaluate_synth(&test_split(cohort)?, |s| synthesize(&mut model, s, stride))?);
    write(report, synth_table(&rows))?;
    Ok(rows)
}

/// In-distribution and transfer metrics of one checkpoint, side by side.
pub fn synth_transfer(ckpt: &Path, in_dist: &[SubjectRecord], transfer: &[SubjectRecord], report: &Path, expected: Option<&ExperimentConfig>) -> Result<Vec<(String, String, SynthMetrics)>> {
    let mut model = load_synth(ckpt, expected)?;
    let stride = stride_of(expected, &model);
    let mut rows = labelled("in-dist", evaluate_synth(&test_split(in_dist)?, |s| synthesize(&mut model, s, stride))?);
    rows.extend(labelled("transfer", evaluate_synth(&test_split(transfer)?, |s| synthesize(&mut model, s, stride))?));
    write(report, synth_table(&rows))?;
    Ok(rows)
}

fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

/// Cells of the grid, explicit or expanded from the axes.
pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<AblateCell> {
    let a = &cfg.ablate;
    if !a.cells.is_empty() {
        return a.cells.clone();
    }
    let mut cells = Vec::new();
    for transformer in axis(&a.transformer) {
        for input_norm in axis(&a.input_norm) {
            for loss in axis(&a.loss) {
                for base_channels in axis(&a.base_channels) {
                    for patch_size in axis(&a.patch_size) {
                        for depth in axis(&a.depth) {
                            for tasks in axis(&a.tasks) {
                                cells.push(AblateCell { name: None, transformer, input_norm, loss, base_channels, patch_size, depth, tasks });
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

impl AblateCell {
    /// The cell's model and training configs on top of `base`.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.ablate = AblateSection::default();
        let s = &mut c.synth;
        s.transformer = self.transformer.unwrap_or(s.transformer);
        s.input_norm = self.input_norm.unwrap_or(s.input_norm);
        s.base_channels = self.base_channels.unwrap_or(s.base_channels);
        s.patch_size = self.patch_size.unwrap_or(s.patch_size);
        s.depth = self.depth.unwrap_or(s.depth);
        s.tasks = self.tasks.unwrap_or(s.tasks);
        c.train.synth.loss = self.loss.unwrap_or(c.train.synth.loss);
        c
    }

    pub fn label(&self, resolved: &ExperimentConfig) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let s = &resolved.synth;
        let loss = serde_json::to_value(resolved.train.synth.loss).expect("loss serializes");
        let tasks = serde_json::to_value(s.tasks).expect("tasks serialize");
        let norm = serde_json::to_value(s.input_norm).expect("norm serializes");
        format!(
            "transformer={},norm={},loss={},width={},patch={},depth={},tasks={}",
            if s.transformer { "on" } else { "off" },
            norm.as_str().unwrap_or_default(),
            loss.as_str().unwrap_or_default(),
            s.base_channels,
            s.patch_size,
            s.depth,
            tasks.as_str().unwrap_or_default()
        )
    }
}

/// One ablation cell; a map is absent when the cell does not predict it or
/// was skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub fa: Option<SynthMetrics>,
    pub md: Option<SynthMetrics>,
    pub note: String,
}

pub const ABLATION_METRICS: [&str; 5] = ["mse", "mae", "rmse", "ssim", "pearson_r"];

/// One row per cell with the five metrics of each map side by side.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("cell");
    for map in ["fa", "md"] {
        for m in ABLATION_METRICS {
            s.push_str(&format!("\t{map}_{m}"));
        }
    }
    s.push_str("\tnote\n");
    for r in rows {
        s.push_str(&r.cell);
        for m in [r.fa, r.md] {
            let vals = m.map_or([None; 5], |m| [Some(m.mse), Some(m.mae), Some(m.rmse), m.ssim, m.pearson_r]);
            for v in vals {
                s.push('\t');
                s.push_str(&crate::metrics::cell(v));
            }
        }
        s.push_str(&format!("\t{}\n", r.note));
    }
    s
}

fn run_cell(index: usize, cell: &AblateCell, base: &ExperimentConfig, cohort: &[SubjectRecord], out: &Path) -> Result<AblationRow> {
    let cfg = cell.apply(base);
    let label = cell.label(&cfg);
    let skip = |reason: String| Ok(AblationRow { cell: label.clone(), fa: None, md: None, note: format!("skipped: {reason}") });
    if let Err(e) = cfg.synth.validate() {
        return skip(e.to_string());
    }
    if let Some(s) = cohort.first() {
        if s.t1w.dims.iter().any(|&d| d < cfg.synth.patch_size) {
            return skip(format!("patch {} exceeds volume {:?}", cfg.synth.patch_size, s.t1w.dims));
        }
    }
    let dir = out.join(format!("cell-{index:03}"));
    let (mut model, log) = synth_train(&cfg, cohort, &dir)?;
    let stride = cfg.stride(cfg.synth.patch_size);
    let metrics = evaluate_synth(&test_split(cohort)?, |s| synthesize(&mut model, s, stride))?;
    let get = |map: &str| metrics.iter().find(|r| r.0 == map).map(|r| r.1);
    Ok(AblationRow { cell: label.clone(), fa: get("fa"), md: get("md"), note: format!("dir=cell-{index:03} best_epoch={}", log.best_epoch) })
}

/// Trains and evaluates every cell with the same seed and data; infeasible
/// cells are reported, not trained.
pub fn ablate(cfg: &ExperimentConfig, cohort: &[SubjectRecord], out: &Path) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    write_run_config(out, cfg)?;
    let cells = ablation_cells(cfg);
    let jobs = cfg.ablate.jobs.max(1);
    let mut results: Vec<Option<Result<AblationRow>>> = (0..cells.len()).map(|_| None).collect();
    for (chunk_i, chunk) in cells.chunks(jobs).enumerate() {
        let done: Vec<Result<AblationRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    let idx = chunk_i * jobs + j;
                    scope.spawn(move || run_cell(idx, cell, cfg, cohort, out))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation cell panicked")).collect()
        });
        for (j, r) in done.into_iter().enumerate() {
            results[chunk_i * jobs + j] = Some(r);
        }
    }
    let rows = results.into_iter().map(|r| r.expect("every cell ran")).collect::<Result<Vec<_>>>()?;
    write(&out.join("ablation.tsv"), ablation_table(&rows))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Single,
    Multi,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Modality::Single),
            "multi" => Ok(Modality::Multi),
            _ => Err(config_err!("unknown modality `{s}` (single, multi)")),
        }
    }
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Single => 1,
            Modality::Multi => 3,
        }
    }
}

/// Classifier config for a modality and class count on top of `[clf]`.
pub fn clf_config(cfg: &ExperimentConfig, modality: Modality, classes: usize) -> ClfConfig {
    ClfConfig { in_channels: modality.channels(), classes, ..cfg.clf.clone() }
}

fn clf_train_config(cfg: &ExperimentConfig, classes: usize) -> ClfTrainConfig {
    let loss = if classes == 2 { ClfLoss::Bce } else { ClfLoss::CrossEntropy };
    ClfTrainConfig { loss, ..cfg.train.clf.clone() }
}

/// Subjects of the task: AD and NC for two classes, all three otherwise.
pub fn task_subjects(cohort: &[SubjectRecord], split: Split, classes: usize) -> Vec<&SubjectRecord> {
    cohort.iter().filter(|s| s.split == split && s.label != Label::Unlabeled && (classes == 3 || s.label != Label::MCI)).collect()
}

/// Slice stacks for `subjects`, with synthesised FA and MD when a
/// synthesis model is given.
pub fn slice_stacks(subjects: &[&SubjectRecord], clf: &ClfConfig, synth: Option<(&mut SynthModel, usize)>) -> Result<Vec<SliceStack>> {
    let mut synth = synth;
    subjects
        .iter()
        .map(|s| {
            let maps = match synth.as_mut() {
                Some((m, stride)) => Some(synthesize(m, s, *stride)?),
                None => None,
            };
            classifier::extract_slices(s, maps.as_ref(), clf.slice_count, clf.slice_step)
        })
        .collect()
}

fn synth_for(modality: Modality, synth_ckpt: Option<&Path>) -> Result<Option<SynthModel>> {
    match (modality, synth_ckpt) {
        (Modality::Multi, None) => Err(config_err!("multi-modality classification needs --synth-ckpt")),
        (Modality::Multi, Some(p)) => Ok(Some(SynthModel::load(p)?)),
        (Modality::Single, _) => Ok(None),
    }
}

/// Train, val and test stacks for a task; subject ids never repeat across
/// splits.
pub fn task_stacks(cfg: &ExperimentConfig, cohort: &[SubjectRecord], clf: &ClfConfig, synth: Option<&mut SynthModel>, splits: &[Split]) -> Result<Vec<Vec<SliceStack>>> {
    let mut synth = synth;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &split in splits {
        let subjects = task_subjects(cohort, split, clf.classes);
        for s in &subjects {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Invalid(format!("subject {} appears in more than one split", s.id)));
            }
        }
        let sm = synth.as_deref_mut().map(|m| {
            let stride = cfg.stride(m.config.patch_size);
            (m, stride)
        });
        out.push(slice_stacks(&subjects, clf, sm)?);
    }
    Ok(out)
}

/// Trains a slice classifier; writes checkpoint, log and config to `out`.
pub fn clf_train(cfg: &ExperimentConfig, cohort: &[SubjectRecord], out: &Path, modality: Modality, classes: usize, synth_ckpt: Option<&Path>) -> Result<(classifier::Classifier, TrainLog)> {
    let clf = clf_config(cfg, modality, classes);
    clf.validate()?;
    let mut synth = synth_for(modality, synth_ckpt)?;
    let stacks = task_stacks(cfg, cohort, &clf, synth.as_mut(), &[Split::Train, Split::Val])?;
    let mut model = classifier::build(clf.clone(), cfg.seed)?;
    let resolved = ExperimentConfig { clf, ..cfg.clone() };
    write_run_config(out, &resolved)?;
    let log = train_classifier(&mut model, &stacks[0], &stacks[1], &clf_train_config(cfg, classes))?;
    model.save(out.join(CLF_CKPT))?;
    write_log(out, &log)?;
    Ok((model, log))
}

/// Class names in confusion-matrix order.
pub fn class_names(classes: usize) -> Vec<&'static str> {
    if classes == 2 {
        vec!["AD", "NC"]
    } else {
        vec!["AD", "MCI", "NC"]
    }
}

fn class_row(label: Label, classes: usize) -> Result<usize> {
    let name = label.to_string();
    class_names(classes).iter().position(|n| *n == name).ok_or_else(|| Error::Invalid(format!("label {label} is not part of the {classes}-class task")))
}

/// Subject-level metrics; AD is the positive class and, for two classes,
/// the AD vote fraction is the AUC score.
pub fn subject_metrics(preds: &[SubjectPrediction], classes: usize) -> Result<ClassMetrics> {
    let pairs: Vec<(usize, usize)> = preds.iter().map(|p| Ok((class_row(p.truth, classes)?, class_row(p.predicted, classes)?))).collect::<Result<_>>()?;
    let mut m = class_metrics(&confusion_matrix(&pairs, classes)?, 0)?;
    if classes == 2 {
        let scores: Vec<(f64, bool)> = preds.iter().map(|p| (p.score, p.truth == Label::AD)).collect();
        m.auc = subject_auc(&scores).ok();
    }
    Ok(m)
}

pub fn predictions_table(preds: &[SubjectPrediction]) -> String {
    let mut s = String::from("subject_id\ttruth\tpredicted\tscore\tvotes\n");
    for p in preds {
        let votes: Vec<String> = p.votes.iter().map(usize::to_string).collect();
        s.push_str(&format!("{}\t{}\t{}\t{:.6}\t{}\n", p.subject_id, p.truth, p.predicted, p.score, votes.join(",")));
    }
    s
}

/// Test-split subject predictions and metrics of a classifier checkpoint.
/// Writes the metrics table to `report` and per-subject predictions next
/// to it with a `.predictions.tsv` suffix.
pub fn clf_eval(ckpt: &Path, cohort: &[SubjectRecord], report: &Path, modality: Modality, synth_ckpt: Option<&Path>, cfg: &ExperimentConfig) -> Result<(ClassMetrics, Vec<SubjectPrediction>)> {
    let mut model = classifier::Classifier::load(ckpt)?;
    if model.config.in_channels != modality.channels() {
        return Err(config_err!("checkpoint expects {} input channels but modality {modality:?} gives {}", model.config.in_channels, modality.channels()));
    }
    let mut synth = synth_for(modality, synth_ckpt)?;
    let clf = model.config.clone();
    let stacks = task_stacks(cfg, cohort, &clf, synth.as_mut(), &[Split::Test])?.remove(0);
    if stacks.is_empty() {
        return Err(Error::Invalid("cohort has no test-split subjects for this task".into()));
    }
    let preds: Vec<SubjectPrediction> = stacks.iter().map(|s| model.predict_subject(s)).collect::<Result<_>>()?;
    let m = subject_metrics(&preds, clf.classes)?;
    write(report, class_table(&m, &class_names(clf.classes)))?;
    let mut pred_path = report.as_os_str().to_owned();
    pred_path.push(".predictions.tsv");
    write(Path::new(&pred_path), predictions_table(&preds))?;
    Ok((m, preds))
}

/// Loss-curve plots for every run and a comparison table of their
/// training summaries and, when present, their synthesis reports.
pub fn report(runs: &[PathBuf], out: &Path, cfg: &ExperimentConfig) -> Result<String> {
    let missing: Vec<String> = runs.iter().filter(|r| !r.join(LOG_FILE).is_file()).map(|r| r.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("missing run (no {LOG_FILE}): {}", missing.join(", "))));
    }
    create_dir(out)?;
    let mut table = String::from("run\tbest_epoch\tstopped_epoch\tbest_val_loss\tfa_ssim\tfa_pearson_r\tmd_ssim\tmd_pearson_r\n");
    for (i, run) in runs.iter().enumerate() {
        let log_path = run.join(LOG_FILE);
        let log = TrainLog::from_tsv(&fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?)?;
        let name = run.file_name().map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned());
        let svg = loss_curve_svg(&log, &name, cfg.report.plot_width, cfg.report.plot_height);
        write(&out.join(format!("{i:02}-{name}-loss.svg")), svg)?;
        let best = log.value(log.best_epoch, "val", "loss");
        let synth: Vec<(String, String, SynthMetrics)> = match fs::read_to_string(run.join(REPORT_FILE)) {
            Ok(t) => crate::metrics::parse_synth_table(&t).unwrap_or_default(),
            Err(_) => Vec::new(),
        };
        let get = |map: &str, f: fn(&SynthMetrics) -> Option<f64>| crate::metrics::cell(synth.iter().find(|r| r.1 == map).and_then(|r| f(&r.2)));
        table.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            log.best_epoch,
            log.stopped_epoch,
            crate::metrics::cell(best),
            get("fa", |m| m.ssim),
            get("fa", |m| m.pearson_r),
            get("md", |m| m.ssim),
            get("md", |m| m.pearson_r)
        ));
    }
    write(&out.join("comparison.tsv"), &table)?;
    write_run_config(out, cfg)?;
    Ok(table)
}
