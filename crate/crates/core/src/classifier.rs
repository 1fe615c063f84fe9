//! Slice-level 2D CNN and subject-level vote aggregation.
//!
//! Slices are taken along the last volume axis. The network is
//! `conv_layers` × (3×3 conv → batch-norm → ReLU → 2×2 maxpool) with
//! channels `base · 2^i`, global average pooling, then three linear layers
//! `c → c/2 → c/4 → out` with ReLU and dropout between them. The binary
//! head emits one logit (AD positive); the three-class head emits logits in
//! the order AD, MCI, NC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{add_batch_norm, add_conv, add_linear, load_checkpoint, save_checkpoint, Bound, Ctx, ParamStore};
use crate::synthnet::SynthOutput;
use crate::tensor::{mix_seed, sigmoid, Graph, Mode, Var};
use crate::volume::{Label, SubjectRecord, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterScales {
    pub ad: f32,
    pub mci: f32,
    pub nc: f32,
}

impl Default for JitterScales {
    fn default() -> Self {
        // MCI: geometric mean of the AD and NC scales
        JitterScales { ad: 0.02, mci: (0.02f32 * 0.0775).sqrt(), nc: 0.0775 }
    }
}

impl JitterScales {
    pub fn for_label(&self, label: Label) -> f32 {
        match label {
            Label::AD => self.ad,
            Label::MCI => self.mci,
            Label::NC => self.nc,
            Label::Unlabeled => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClfConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub base_channels: usize,
    pub conv_layers: usize,
    pub fc_dropout: f32,
    pub vote_threshold: f64,
    pub slice_count: usize,
    pub slice_step: usize,
    pub flip_prob: f64,
    pub jitter: JitterScales,
}

impl Default for ClfConfig {
    fn default() -> Self {
        ClfConfig {
            in_channels: 3,
            classes: 2,
            base_channels: 30,
            conv_layers: 4,
            fc_dropout: 0.5,
            vote_threshold: 0.20,
            slice_count: 30,
            slice_step: 2,
            flip_prob: 0.5,
            jitter: JitterScales::default(),
        }
    }
}

impl ClfConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(config_err!("in-channels must be 1 or 3, got {}", self.in_channels));
        }
        if !matches!(self.classes, 2 | 3) {
            return Err(config_err!("classes must be 2 or 3, got {}", self.classes));
        }
        if self.base_channels == 0 || self.conv_layers == 0 || self.slice_count == 0 || self.slice_step == 0 {
            return Err(config_err!("base-channels, conv-layers, slice-count and slice-step must be positive"));
        }
        if !(0.0..1.0).contains(&self.fc_dropout) {
            return Err(config_err!("fc-dropout {} outside [0, 1)", self.fc_dropout));
        }
        Ok(())
    }

    /// Width of the final layer: 1 for binary, else the class count.
    pub fn outputs(&self) -> usize {
        if self.classes == 2 {
            1
        } else {
            self.classes
        }
    }

    fn top_channels(&self) -> usize {
        self.base_channels << (self.conv_layers - 1)
    }

    /// Training target for a label, or `None` when the label is not part of
    /// this task (MCI and unlabeled in the binary task).
    pub fn target(&self, label: Label) -> Option<usize> {
        match (self.classes, label) {
            (_, Label::Unlabeled) => None,
            (2, Label::AD) => Some(1),
            (2, Label::NC) => Some(0),
            (2, Label::MCI) => None,
            (_, l) => l.index(),
        }
    }
}

/// Axial slices of one subject, `[slices, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub subject_id: String,
    pub label: Label,
    pub indices: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn slice_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// `count` indices with step `step`, centred on `depth / 2`.
pub fn slice_indices(depth: usize, count: usize, step: usize) -> Result<Vec<usize>> {
    let need = count * step;
    if depth < need {
        return Err(shape_err!("slice axis has {depth} planes; {count} slices with step {step} need at least {need}"));
    }
    let start = depth / 2 - (count - 1) * step / 2;
    Ok((0..count).map(|i| start + i * step).collect())
}

fn zscore_in_place(x: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in x.iter_mut() {
        *v = if sd > 0.0 { ((*v as f64 - mean) / (sd + 1e-8)) as f32 } else { 0.0 };
    }
}

/// Axial slices of the T1w volume, plus synthesised FA and MD when
/// `synth` is given; every channel of every slice is z-scored on its own.
pub fn extract_slices(subject: &SubjectRecord, synth: Option<&SynthOutput>, count: usize, step: usize) -> Result<SliceStack> {
    let t1 = &subject.t1w;
    let [d, h, w] = t1.dims;
    let indices = slice_indices(w, count, step)?;
    let mut vols: Vec<&Volume3D> = vec![t1];
    if let Some(s) = synth {
        let fa = s.fa.as_ref().ok_or_else(|| config_err!("multi-modality slices need a synthesised FA map"))?;
        let md = s.md.as_ref().ok_or_else(|| config_err!("multi-modality slices need a synthesised MD map"))?;
        for v in [fa, md] {
            t1.expect_same_dims(v, "synthesised map")?;
            vols.push(v);
        }
    }
    let plane = d * h;
    let mut data = Vec::with_capacity(indices.len() * vols.len() * plane);
    for &k in &indices {
        for v in &vols {
            let start = data.len();
            for z in 0..d {
                for y in 0..h {
                    data.push(v.data[(z * h + y) * w + k]);
                }
            }
            zscore_in_place(&mut data[start..]);
        }
    }
    Ok(SliceStack { subject_id: subject.id.clone(), label: subject.label, indices, channels: vols.len(), height: d, width: h, data })
}

/// Random horizontal flip with probability `flip_prob` and per-pixel
/// multiplicative jitter `x·(1 + ε)`, `ε ~ U[-scale, scale]`. Returns
/// whether the slice was flipped.
pub fn augment(slice: &mut [f32], channels: usize, height: usize, width: usize, scale: f32, flip_prob: f64, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(flip_prob);
    if flip {
        for row in slice.chunks_mut(width).take(channels * height) {
            row.reverse();
        }
    }
    if scale > 0.0 {
        for v in slice.iter_mut() {
            *v *= 1.0 + rng.gen_range(-scale..=scale);
        }
    }
    flip
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClfConfig,
    pub params: ParamStore,
}

/// Kaiming-uniform conv and linear weights, zero biases, unit BN gains.
pub fn build(config: ClfConfig, seed: u64) -> Result<Classifier> {
    config.validate()?;
    let mut p = ParamStore::new();
    let mut cin = config.in_channels;
    for i in 0..config.conv_layers {
        let c = config.base_channels << i;
        add_conv(&mut p, &format!("conv{i}"), cin, c, 3, 2, seed)?;
        add_batch_norm(&mut p, &format!("bn{i}"), c, seed)?;
        cin = c;
    }
    let top = config.top_channels();
    let widths = [top, (top / 2).max(1), (top / 4).max(1), config.outputs()];
    for (i, w) in widths.windows(2).enumerate() {
        add_linear(&mut p, &format!("fc{}", i + 1), w[0], w[1], seed)?;
    }
    Ok(Classifier { config, params: p })
}

impl Classifier {
    /// Logits `[N, 1]` (binary) or `[N, classes]` for a batch `[N, C, H, W]`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Bound)> {
        let cfg = self.config.clone();
        let s = g.shape(x);
        if s.len() != 4 || s[1] != cfg.in_channels {
            return Err(shape_err!("classifier expects [N, {}, H, W], got {s:?}", cfg.in_channels));
        }
        let b = self.params.bind(g, mode == Mode::Train)?;
        let mut ctx = Ctx { g, b: &b, stats: &mut self.params.stats, mode };
        let mut h = x;
        for i in 0..cfg.conv_layers {
            h = ctx.conv2d(&format!("conv{i}"), h)?;
            h = ctx.batch_norm(&format!("bn{i}"), h)?;
            h = ctx.g.relu(h);
            h = ctx.g.max_pool2d(h)?;
        }
        h = ctx.g.adaptive_avg_pool(h)?;
        for i in 1..=3 {
            h = ctx.linear(&format!("fc{i}"), h)?;
            if i < 3 {
                h = ctx.g.relu(h);
                h = ctx.g.dropout(h, cfg.fc_dropout, mode)?;
            }
        }
        Ok((h, b))
    }

    /// Eval-mode logits for every slice of a stack, row per slice.
    pub fn slice_logits(&mut self, stack: &SliceStack) -> Result<Vec<Vec<f32>>> {
        if stack.channels != self.config.in_channels {
            return Err(shape_err!("slices have {} channels, classifier expects {}", stack.channels, self.config.in_channels));
        }
        let mut g = Graph::new();
        let x = g.constant(stack.data.clone(), &[stack.len(), stack.channels, stack.height, stack.width])?;
        let (y, _) = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).chunks(self.config.outputs()).map(<[f32]>::to_vec).collect())
    }

    /// Subject-level decision from every slice of a stack.
    pub fn predict_subject(&mut self, stack: &SliceStack) -> Result<SubjectPrediction> {
        let logits = self.slice_logits(stack)?;
        let (label, score, votes) = if self.config.classes == 2 {
            let probs: Vec<f64> = logits.iter().map(|r| sigmoid(r[0]) as f64).collect();
            let votes = probs.iter().map(|&p| usize::from(p > 0.5)).collect();
            let (label, score) = aggregate_binary(&probs, self.config.vote_threshold)?;
            (label, score, votes)
        } else {
            let class = aggregate_multiclass(&logits)?;
            let votes = logits.iter().map(|r| argmax(r)).collect();
            (Label::from_index(class).expect("three classes"), class as f64, votes)
        };
        Ok(SubjectPrediction { subject_id: stack.subject_id.clone(), truth: stack.label, predicted: label, score, votes })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(path, &serde_json::to_string(&self.config).expect("config serializes"), &self.params)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Classifier> {
        let (json, params) = load_checkpoint(path)?;
        let config: ClfConfig = serde_json::from_str(&json).map_err(|e| config_err!("checkpoint config: {e}"))?;
        if !build(config.clone(), 0)?.params.same_layout(&params) {
            return Err(config_err!("checkpoint parameters do not match the layout of its config"));
        }
        Ok(Classifier { config, params })
    }
}

/// First index of the largest value.
fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectPrediction {
    pub subject_id: String,
    pub truth: Label,
    pub predicted: Label,
    /// Binary: fraction of AD slices. Three-class: predicted class index.
    pub score: f64,
    /// Per-slice predicted class (binary: 1 = AD).
    pub votes: Vec<usize>,
}

/// A slice votes AD iff its probability exceeds 0.5; the subject is AD iff
/// the AD fraction strictly exceeds `threshold`. Returns the label and the
/// AD fraction.
pub fn aggregate_binary(slice_probs: &[f64], threshold: f64) -> Result<(Label, f64)> {
    if slice_probs.is_empty() {
        return Err(Error::Invalid("no slice probabilities to aggregate".into()));
    }
    if let Some(p) = slice_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("slice probability {p} outside [0, 1]")));
    }
    let ad = slice_probs.iter().filter(|&&p| p > 0.5).count();
    let score = ad as f64 / slice_probs.len() as f64;
    Ok((if score > threshold { Label::AD } else { Label::NC }, score))
}

/// Class index with the largest mean softmax over slices; ties go to the
/// lower index (AD before MCI before NC).
pub fn aggregate_multiclass(slice_logits: &[Vec<f32>]) -> Result<usize> {
    let k = slice_logits.first().map_or(0, Vec::len);
    if k == 0 || slice_logits.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid("multiclass aggregation needs equal-length, nonempty logit rows".into()));
    }
    let mut probs: Vec<Vec<f64>> = vec![Vec::with_capacity(slice_logits.len()); k];
    for row in slice_logits {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (p, e) in probs.iter_mut().zip(exps) {
            p.push(e / z);
        }
    }
    // summing sorted values makes the mean independent of slice order
    let mean: Vec<f64> = probs
        .into_iter()
        .map(|mut p| {
            p.sort_by(f64::total_cmp);
            p.iter().sum::<f64>() / slice_logits.len() as f64
        })
        .collect();
    Ok((0..k).fold(0, |best, i| if mean[i] > mean[best] { i } else { best }))
}

/// Augmentation seed for slice `slice` of subject `subject` in `epoch`.
pub fn augment_seed(seed: u64, epoch: usize, subject: usize, slice: usize) -> u64 {
    mix_seed(&[seed, 0xA6, epoch as u64, subject as u64, slice as u64])
}
