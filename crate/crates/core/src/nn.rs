//! Named parameters, initialisation, checkpoints and the layer helpers
//! shared by the synthesis network and the slice classifier.
//!
//! Checkpoint layout, all little-endian:
//!
//! | field | type |
//! |-------|------|
//! | magic | `CKPT` |
//! | version | u32 = 1 |
//! | config length, config | u32, UTF-8 JSON |
//! | entry count | u32 |
//! | per entry: name length, name, rank, extents, data | u32, UTF-8, u32, u32 × rank, f32 × ∏extents |
//!
//! Batch-norm running statistics are stored as entries named
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::tensor::{mix_seed, ConvSpec, Graph, Mode, RunningStats, Var};

pub const BN_EPS: f32 = 1e-5;
pub const LN_EPS: f32 = 1e-5;

const CKPT_MAGIC: &[u8; 4] = b"CKPT";
const CKPT_VERSION: u32 = 1;
const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Parameters in creation order plus batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: Arc<HashMap<String, usize>>,
    pub stats: BTreeMap<String, RunningStats>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Stable 64-bit hash of a parameter name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Each parameter draws from its own stream keyed by
    /// `(seed, name)`, so adding or removing other parameters never changes
    /// its initial value.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, name_hash(name)]));
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.insert(Param { name: name.to_string(), shape: shape.to_vec(), value })
    }

    pub fn insert(&mut self, p: Param) -> Result<()> {
        if p.value.len() != p.shape.iter().product::<usize>() {
            return Err(crate::error::shape_err!("parameter `{}`: shape {:?} vs {} values", p.name, p.shape, p.value.len()));
        }
        if self.index.contains_key(&p.name) {
            return Err(config_err!("duplicate parameter name `{}`", p.name));
        }
        Arc::make_mut(&mut self.index).insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn add_stats(&mut self, name: &str, channels: usize) -> Result<()> {
        if self.stats.insert(name.to_string(), RunningStats::new(channels)).is_some() {
            return Err(config_err!("duplicate batch-norm layer `{name}`"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Places every parameter on `g` as a leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone(), &p.shape, trainable)).collect::<Result<_>>()?;
        Ok(Bound { vars, index: Arc::clone(&self.index) })
    }

    /// SHA-256 over names, shapes, values and running statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, value) in self.entries() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in &shape {
                h.update((d as u32).to_le_bytes());
            }
            for x in value {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn entries(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = self.params.iter().map(|p| (p.name.clone(), p.shape.clone(), p.value.as_slice())).collect();
        for (name, s) in &self.stats {
            out.push((format!("{name}{RUNNING_MEAN}"), vec![s.mean.len()], &s.mean));
            out.push((format!("{name}{RUNNING_VAR}"), vec![s.var.len()], &s.var));
        }
        out
    }

    /// Same names and shapes in the same order, and the same batch-norm
    /// layers.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.shape == b.shape)
            && self.stats.len() == other.stats.len()
            && self.stats.iter().zip(&other.stats).all(|((a, x), (b, y))| a == b && x.channels() == y.channels())
    }
}

/// Graph handles for every parameter of a store.
pub struct Bound {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    /// Handle of the named parameter. Names are fixed by the model builders,
    /// so an unknown name is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named `{name}`"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Takes the gradient of every parameter, in store order.
    pub fn take_grads(&self, g: &mut Graph) -> Vec<Option<Vec<f32>>> {
        self.vars.iter().map(|&v| g.take_grad(v)).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes(config_json: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    put_u32(&mut out, config_json.len());
    out.extend_from_slice(config_json.as_bytes());
    let entries = store.entries();
    put_u32(&mut out, entries.len());
    for (name, shape, value) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len());
        for d in shape {
            put_u32(&mut out, d);
        }
        for x in value {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Parse { offset: self.b.len(), message: format!("checkpoint truncated while reading {what}") });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Parse { offset: at, message: format!("{what} is not UTF-8") })
    }
}

/// Parses checkpoint bytes into the config JSON and the parameter store.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(String, ParamStore)> {
    let mut c = Cursor { b: bytes, pos: 0 };
    if c.take(4, "magic")? != CKPT_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected \"CKPT\"".into() });
    }
    let version = c.u32("version")?;
    if version as u32 != CKPT_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported checkpoint version {version}") });
    }
    let config = c.string("config")?;
    let count = c.u32("entry count")?;
    let mut store = ParamStore::new();
    let mut means: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut vars: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name = c.string("entry name")?;
        let rank = c.u32("rank")?;
        let shape = (0..rank).map(|_| c.u32("extent")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let value = c.take(4 * n, &format!("data of `{name}`"))?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(layer) = name.strip_suffix(RUNNING_MEAN) {
            means.insert(layer.to_string(), value);
        } else if let Some(layer) = name.strip_suffix(RUNNING_VAR) {
            vars.insert(layer.to_string(), value);
        } else {
            store.insert(Param { name, shape, value })?;
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse { offset: c.pos, message: "trailing bytes after last entry".into() });
    }
    for (layer, mean) in means {
        let var = vars.remove(&layer).ok_or_else(|| Error::Parse { offset: c.pos, message: format!("`{layer}` has a running mean but no running variance") })?;
        store.stats.insert(layer, RunningStats { mean, var, momentum: RunningStats::new(0).momentum });
    }
    if let Some(layer) = vars.keys().next() {
        return Err(Error::Parse { offset: c.pos, message: format!("`{layer}` has a running variance but no running mean") });
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config_json: &str, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(config_json, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, ParamStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_bytes(&bytes)
}

/// Weight `[out, in, k..]` and bias `[out]` of a convolution with kernel
/// side `k` over `spatial` dimensions.
pub fn add_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, spatial: usize, seed: u64) -> Result<()> {
    let mut shape = vec![cout, cin];
    shape.extend(std::iter::repeat_n(k, spatial));
    let fan_in = cin * k.pow(spatial as u32);
    store.add(&format!("{name}.weight"), &shape, Init::KaimingUniform { fan_in }, seed)?;
    store.add(&format!("{name}.bias"), &[cout], Init::Zeros, seed)
}

/// Gamma, beta and running statistics of a batch-norm layer.
pub fn add_batch_norm(store: &mut ParamStore, name: &str, channels: usize, seed: u64) -> Result<()> {
    store.add(&format!("{name}.gamma"), &[channels], Init::Ones, seed)?;
    store.add(&format!("{name}.beta"), &[channels], Init::Zeros, seed)?;
    store.add_stats(name, channels)
}

pub fn add_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
    store.add(&format!("{name}.weight"), &[fan_out, fan_in], Init::KaimingUniform { fan_in }, seed)?;
    store.add(&format!("{name}.bias"), &[fan_out], Init::Zeros, seed)
}

/// Graph, bound parameters and running statistics of one forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub b: &'a Bound,
    pub stats: &'a mut BTreeMap<String, RunningStats>,
    pub mode: Mode,
}

impl Ctx<'_> {
    pub fn conv3d(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.b.var(&format!("{name}.weight")), self.b.var(&format!("{name}.bias")));
        self.g.conv3d(x, w, Some(b), ConvSpec::same())
    }

    pub fn conv2d(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.b.var(&format!("{name}.weight")), self.b.var(&format!("{name}.bias")));
        self.g.conv2d(x, w, Some(b), ConvSpec::same())
    }

    /// Batch-norm over the channel axis; updates running statistics in
    /// train mode only.
    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.b.var(&format!("{name}.gamma")), self.b.var(&format!("{name}.beta")));
        let stats = self.stats.get_mut(name).unwrap_or_else(|| panic!("no batch-norm layer named `{name}`"));
        match self.mode {
            Mode::Train => self.g.batch_norm(x, gamma, beta, stats, Mode::Train, BN_EPS),
            Mode::Eval => self.g.batch_norm_eval(x, gamma, beta, stats, BN_EPS),
        }
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.b.var(&format!("{name}.gamma")), self.b.var(&format!("{name}.beta")));
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.b.var(&format!("{name}.weight")), self.b.var(&format!("{name}.bias")));
        self.g.linear(x, w, Some(b))
    }
}
