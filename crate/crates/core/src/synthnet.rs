//! 3D TransUNet mapping a one-channel T1w patch to FA and/or MD patches.
//!
//! ```text
//! enc{i}:      block(c_{i-1} → c_i), maxpool          i = 0..depth
//! bottleneck:  block(c_{depth-1} → E),  E = c_depth
//!              tokens [N, T, E], T = (p / 2^depth)³
//!              y = x + MHA(LN1(x)); y = dropout(relu(LN2(y)))
//! dec{i}:      upsample, up-conv c_{i+1} → c_i, concat skip_i, block(2c_i → c_i)
//! head.{fa,md}: 1³ conv c_0 → 1, concatenated on channels
//! ```
//!
//! `c_i = base · 2^i`. A block is conv-BN-ReLU once (`single`) or twice
//! (`double`). Tokens carry no positional encoding.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{add_batch_norm, add_conv, load_checkpoint, save_checkpoint, Bound, Ctx, Init, ParamStore};
use crate::tensor::{AttentionWeights, ConvSpec, Graph, Mode, Var};
use crate::volume::{extract_patches, normalize, stitch_patches, Modality, NormMethod, Patch, SubjectRecord, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tasks {
    FaMd,
    Fa,
    Md,
}

impl Tasks {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            Tasks::FaMd => &["fa", "md"],
            Tasks::Fa => &["fa"],
            Tasks::Md => &["md"],
        }
    }

    pub fn count(self) -> usize {
        self.names().len()
    }
}

impl std::str::FromStr for Tasks {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fa-md" => Ok(Tasks::FaMd),
            "fa" => Ok(Tasks::Fa),
            "md" => Ok(Tasks::Md),
            _ => Err(config_err!("unknown tasks `{s}` (fa-md, fa, md)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvBlock {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub transformer: bool,
    pub heads: usize,
    pub dropout: f32,
    pub tasks: Tasks,
    pub patch_size: usize,
    pub conv_block: ConvBlock,
    /// Normalisation applied to T1w inputs before the network.
    pub input_norm: NormMethod,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_channels: 32,
            depth: 4,
            transformer: true,
            heads: 4,
            dropout: 0.5,
            tasks: Tasks::FaMd,
            patch_size: 64,
            conv_block: ConvBlock::Double,
            input_norm: NormMethod::Zscore,
        }
    }
}

impl SynthConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn embedding(&self) -> usize {
        self.channels(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(config_err!("base-channels and depth must be positive"));
        }
        let div = 1usize << self.depth;
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(config_err!("patch-size {} is not divisible by 2^depth = {div}", self.patch_size));
        }
        if self.transformer && (self.heads == 0 || self.embedding() % self.heads != 0) {
            return Err(config_err!("bottleneck embedding {} (base-channels·2^depth) is not divisible by heads {}", self.embedding(), self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter count from the architecture alone.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| 27 * cin * cout + cout;
        let bn = |c: usize| 2 * c;
        let block = |cin: usize, cout: usize| match self.conv_block {
            ConvBlock::Single => conv(cin, cout) + bn(cout),
            ConvBlock::Double => conv(cin, cout) + bn(cout) + conv(cout, cout) + bn(cout),
        };
        let mut total = 0;
        for i in 0..self.depth {
            let cin = if i == 0 { 1 } else { self.channels(i - 1) };
            total += block(cin, self.channels(i));
        }
        let e = self.embedding();
        total += block(self.channels(self.depth - 1), e);
        if self.transformer {
            total += 4 * e * e + 4 * e + 2 * 2 * e;
        }
        for i in 0..self.depth {
            let c = self.channels(i);
            total += conv(self.channels(i + 1), c) + block(2 * c, c);
        }
        total + self.tasks.count() * (self.channels(0) + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthModel {
    pub config: SynthConfig,
    pub params: ParamStore,
}

const ATTN: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];

fn add_block(p: &mut ParamStore, cfg: &SynthConfig, name: &str, cin: usize, cout: usize, seed: u64) -> Result<()> {
    add_conv(p, &format!("{name}.conv1"), cin, cout, 3, 3, seed)?;
    add_batch_norm(p, &format!("{name}.bn1"), cout, seed)?;
    if cfg.conv_block == ConvBlock::Double {
        add_conv(p, &format!("{name}.conv2"), cout, cout, 3, 3, seed)?;
        add_batch_norm(p, &format!("{name}.bn2"), cout, seed)?;
    }
    Ok(())
}

/// Kaiming-uniform convolution and attention weights, zero biases, unit
/// norm gains. Every parameter's initial value depends only on `seed` and
/// its name.
pub fn build(config: SynthConfig, seed: u64) -> Result<SynthModel> {
    config.validate()?;
    let c = |i| config.channels(i);
    let mut p = ParamStore::new();
    for i in 0..config.depth {
        add_block(&mut p, &config, &format!("enc{i}"), if i == 0 { 1 } else { c(i - 1) }, c(i), seed)?;
    }
    let e = config.embedding();
    add_block(&mut p, &config, "bottleneck", c(config.depth - 1), e, seed)?;
    if config.transformer {
        for ln in ["ln1", "ln2"] {
            p.add(&format!("bottleneck.{ln}.gamma"), &[e], Init::Ones, seed)?;
            p.add(&format!("bottleneck.{ln}.beta"), &[e], Init::Zeros, seed)?;
        }
        for w in ATTN {
            let name = format!("bottleneck.attn.{w}");
            if w.starts_with('w') {
                p.add(&name, &[e, e], Init::KaimingUniform { fan_in: e }, seed)?;
            } else {
                p.add(&name, &[e], Init::Zeros, seed)?;
            }
        }
    }
    for i in (0..config.depth).rev() {
        add_conv(&mut p, &format!("dec{i}.up"), c(i + 1), c(i), 3, 3, seed)?;
        add_block(&mut p, &config, &format!("dec{i}"), 2 * c(i), c(i), seed)?;
    }
    for t in config.tasks.names() {
        add_conv(&mut p, &format!("head.{t}"), c(0), 1, 1, 3, seed)?;
    }
    Ok(SynthModel { config, params: p })
}

fn block(ctx: &mut Ctx, cfg: &SynthConfig, name: &str, x: Var) -> Result<Var> {
    let mut x = x;
    let convs: &[&str] = if cfg.conv_block == ConvBlock::Double { &["1", "2"] } else { &["1"] };
    for k in convs {
        x = ctx.conv3d(&format!("{name}.conv{k}"), x)?;
        x = ctx.batch_norm(&format!("{name}.bn{k}"), x)?;
        x = ctx.g.relu(x);
    }
    Ok(x)
}

fn transformer(ctx: &mut Ctx, cfg: &SynthConfig, x: Var) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    let (n, e) = (shape[0], shape[1]);
    let t: usize = shape[2..].iter().product();
    let flat = ctx.g.reshape(x, &[n, e, t])?;
    let tokens = ctx.g.permute(flat, &[0, 2, 1])?;
    let h = ctx.layer_norm("bottleneck.ln1", tokens)?;
    let v = |w: &str| ctx.b.var(&format!("bottleneck.attn.{w}"));
    let w = AttentionWeights { wq: v("wq"), bq: v("bq"), wk: v("wk"), bk: v("bk"), wv: v("wv"), bv: v("bv"), wo: v("wo"), bo: v("bo") };
    let a = ctx.g.multi_head_attention(h, cfg.heads, w)?;
    let y = ctx.g.add(tokens, a)?;
    let y = ctx.layer_norm("bottleneck.ln2", y)?;
    let y = ctx.g.relu(y);
    let y = ctx.g.dropout(y, cfg.dropout, ctx.mode)?;
    let back = ctx.g.permute(y, &[0, 2, 1])?;
    ctx.g.reshape(back, &shape)
}

impl SynthModel {
    /// Forward pass on `[N, 1, p, p, p]`, returning `[N, tasks, p, p, p]`
    /// and the parameter handles. Parameters are trainable leaves in train
    /// mode and constants in eval mode; batch-norm running statistics are
    /// updated in train mode only.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Bound)> {
        let cfg = self.config.clone();
        let p = cfg.patch_size;
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [p, p, p] {
            return Err(shape_err!("synthnet expects [N, 1, {p}, {p}, {p}], got {shape:?}"));
        }
        let b = self.params.bind(g, mode == Mode::Train)?;
        let mut ctx = Ctx { g, b: &b, stats: &mut self.params.stats, mode };
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for i in 0..cfg.depth {
            h = block(&mut ctx, &cfg, &format!("enc{i}"), h)?;
            skips.push(h);
            h = ctx.g.max_pool3d(h)?;
        }
        h = block(&mut ctx, &cfg, "bottleneck", h)?;
        if cfg.transformer {
            h = transformer(&mut ctx, &cfg, h)?;
        }
        for i in (0..cfg.depth).rev() {
            let up = ctx.g.upsample3d(h)?;
            let up = ctx.conv3d(&format!("dec{i}.up"), up)?;
            let cat = ctx.g.concat(&[up, skips[i]], 1)?;
            h = block(&mut ctx, &cfg, &format!("dec{i}"), cat)?;
        }
        let heads = cfg
            .tasks
            .names()
            .iter()
            .map(|t| {
                let (w, bias) = (b.var(&format!("head.{t}.weight")), b.var(&format!("head.{t}.bias")));
                ctx.g.conv3d(h, w, Some(bias), ConvSpec::valid())
            })
            .collect::<Result<Vec<_>>>()?;
        let out = if heads.len() == 1 { heads[0] } else { ctx.g.concat(&heads, 1)? };
        Ok((out, b))
    }

    /// Eval-mode forward of one batch of patch values.
    pub fn predict_patches(&mut self, data: Vec<f32>, n: usize) -> Result<Vec<f32>> {
        let p = self.config.patch_size;
        let mut g = Graph::new();
        let x = g.constant(data, &[n, 1, p, p, p])?;
        let (y, _) = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).to_vec())
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(path, &self.config_json(), &self.params)
    }

    /// Loads a checkpoint and checks its parameters against the layout its
    /// config implies.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<SynthModel> {
        let (json, params) = load_checkpoint(path)?;
        let config: SynthConfig = serde_json::from_str(&json).map_err(|e| config_err!("checkpoint config: {e}"))?;
        let expected = build(config.clone(), 0)?;
        if !expected.params.same_layout(&params) {
            return Err(config_err!("checkpoint parameters do not match the layout of its config"));
        }
        Ok(SynthModel { config, params })
    }
}

/// Synthesised maps of one subject; a map is absent when its task is off.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub fa: Option<Volume3D>,
    pub md: Option<Volume3D>,
}

/// Patches per eval batch in [`predict_volume`].
const PREDICT_BATCH: usize = 4;

/// Whole-volume prediction from an already-normalised T1w volume: tile
/// with `stride`, run eval-mode forward per patch, average overlaps,
/// clamp FA to `[0, 1]` and MD to `≥ 0`, zero outside `mask`.
pub fn predict_volume(model: &mut SynthModel, t1w: &Volume3D, mask: &Volume3D, stride: usize) -> Result<SynthOutput> {
    t1w.expect_same_dims(mask, "prediction mask")?;
    let p = model.config.patch_size;
    let patches = extract_patches(t1w, p, stride)?;
    let tasks = model.config.tasks.names();
    let vox = p * p * p;
    let mut per_task: Vec<Vec<Patch>> = vec![Vec::with_capacity(patches.len()); tasks.len()];
    for chunk in patches.chunks(PREDICT_BATCH) {
        let data: Vec<f32> = chunk.iter().flat_map(|q| q.data.iter().copied()).collect();
        let out = model.predict_patches(data, chunk.len())?;
        for (k, q) in chunk.iter().enumerate() {
            for (t, dst) in per_task.iter_mut().enumerate() {
                let at = (k * tasks.len() + t) * vox;
                dst.push(Patch { origin: q.origin, size: p, data: out[at..at + vox].to_vec() });
            }
        }
    }
    let mut out = SynthOutput { fa: None, md: None };
    for (t, list) in tasks.iter().zip(per_task) {
        let mut v = stitch_patches(&list, t1w.dims)?;
        v.spacing = t1w.spacing;
        let (modality, hi) = if *t == "fa" { (Modality::FA, 1.0) } else { (Modality::MD, f32::INFINITY) };
        v.modality = modality;
        for (x, &m) in v.data.iter_mut().zip(&mask.data) {
            *x = if m > 0.0 { x.clamp(0.0, hi) } else { 0.0 };
        }
        if *t == "fa" {
            out.fa = Some(v);
        } else {
            out.md = Some(v);
        }
    }
    Ok(out)
}

/// Normalises a subject's T1w per the model's input normalisation and
/// predicts its maps with the given stride.
pub fn synthesize(model: &mut SynthModel, subject: &SubjectRecord, stride: usize) -> Result<SynthOutput> {
    let mask = subject.mask_or_full();
    let t1 = normalize(&subject.t1w, &mask, model.config.input_norm)?.volume;
    predict_volume(model, &t1, &mask, stride)
}
