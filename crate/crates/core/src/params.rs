//! Named model parameters, initialisation and HMTP checkpoints.
//!
//! HMTP v1, little-endian: `"HMTP" | version u32 | param_count u32`, then per
//! parameter `name_len u32 | name | rank u32 | dims u32×rank | f32 data`.
//! Parameters always sit on the f32 grid (initialisation and every optimiser
//! step round to it), so checkpoints reproduce them bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{HmtError, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const HMTP_MAGIC: &[u8; 4] = b"HMTP";
pub const HMTP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform over the two extents.
    Xavier,
    /// Uniform in `±0.02`.
    Small,
}

/// Parameter names of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockNames {
    pub ln1_g: String,
    pub ln1_b: String,
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub ln2_g: String,
    pub ln2_b: String,
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl BlockNames {
    pub fn new(prefix: &str, layer: usize) -> Self {
        let n = |s: &str| format!("{prefix}.{layer}.{s}");
        Self {
            ln1_g: n("ln1.gain"),
            ln1_b: n("ln1.bias"),
            wq: n("attn.wq"),
            wk: n("attn.wk"),
            wv: n("attn.wv"),
            wo: n("attn.wo"),
            ln2_g: n("ln2.gain"),
            ln2_b: n("ln2.bias"),
            w1: n("mlp.w1"),
            b1: n("mlp.b1"),
            w2: n("mlp.w2"),
            b2: n("mlp.b2"),
        }
    }

    fn layout(&self, d: usize) -> Vec<(String, Vec<usize>, Init)> {
        vec![
            (self.ln1_g.clone(), vec![d], Init::Ones),
            (self.ln1_b.clone(), vec![d], Init::Zeros),
            (self.wq.clone(), vec![d, d], Init::Xavier),
            (self.wk.clone(), vec![d, d], Init::Xavier),
            (self.wv.clone(), vec![d, d], Init::Xavier),
            (self.wo.clone(), vec![d, d], Init::Xavier),
            (self.ln2_g.clone(), vec![d], Init::Ones),
            (self.ln2_b.clone(), vec![d], Init::Zeros),
            (self.w1.clone(), vec![d, 4 * d], Init::Xavier),
            (self.b1.clone(), vec![4 * d], Init::Zeros),
            (self.w2.clone(), vec![4 * d, d], Init::Xavier),
            (self.b2.clone(), vec![d], Init::Zeros),
        ]
    }
}

pub const MMT_PREFIX: &str = "mmt";
pub const DMMT_SHARED_PREFIX: &str = "dmmt.shared";
pub const DMMT_TEXT_PREFIX: &str = "dmmt.text";

fn layout(cfg: &TrainConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d;
    let bottleneck = (d / 4).max(1);
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("stg.w".into(), vec![d, d], Init::Xavier),
        ("stg.b".into(), vec![d], Init::Zeros),
        ("img.w".into(), vec![d, d], Init::Xavier),
        ("img.b".into(), vec![d], Init::Zeros),
        ("fuse.w".into(), vec![2 * d, d], Init::Xavier),
        ("fuse.b".into(), vec![d], Init::Zeros),
        ("cls.section".into(), vec![d], Init::Small),
        ("cls.sentence".into(), vec![d], Init::Small),
        ("pos.section".into(), vec![cfg.l_max, d], Init::Small),
        ("pos.sentence".into(), vec![cfg.n_max, d], Init::Small),
        ("dmmt.f1.w".into(), vec![d, bottleneck], Init::Xavier),
        ("dmmt.f1.b".into(), vec![bottleneck], Init::Zeros),
        ("dmmt.f2.w".into(), vec![bottleneck, d], Init::Xavier),
        ("dmmt.f2.b".into(), vec![d], Init::Zeros),
        ("dmmt.wm".into(), vec![cfg.wm_size(), cfg.wm_size()], Init::Ones),
        ("head.w".into(), vec![d, cfg.classes], Init::Xavier),
        ("head.b".into(), vec![cfg.classes], Init::Zeros),
    ];
    for prefix in [MMT_PREFIX, DMMT_SHARED_PREFIX, DMMT_TEXT_PREFIX] {
        for layer in 0..cfg.layers {
            out.extend(BlockNames::new(prefix, layer).layout(d));
        }
    }
    out
}

pub(crate) fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..numel).map(|_| to_f32_grid(rng.random_range(-limit..limit))).collect()
                }
                Init::Small => (0..numel).map(|_| to_f32_grid(rng.random_range(-0.02..0.02))).collect(),
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| HmtError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| HmtError::UnknownParam(name.to_string()))
    }

    /// Replaces the values of an existing parameter (shape must match).
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(HmtError::dim("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Gradient per parameter name; parameters untouched by a pass hold zeros.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Lazily registers parameters as graph leaves for one forward pass.
pub struct ParamBinding<'a> {
    params: &'a ModelParams,
    vars: HashMap<String, Var>,
    track: bool,
}

impl<'a> ParamBinding<'a> {
    /// With `track = false` parameters enter the graph as constants.
    pub fn new(params: &'a ModelParams, track: bool) -> Self {
        Self {
            params,
            vars: HashMap::new(),
            track,
        }
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.track { g.leaf(t.with_grad()) } else { g.constant(t) };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn gradients(&self, g: &Graph) -> Gradients {
        self.params
            .iter()
            .map(|(name, t)| {
                let grad = self
                    .vars
                    .get(name)
                    .and_then(|&v| g.grad(v))
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
                (name.to_string(), grad)
            })
            .collect()
    }
}

pub fn save_params<W: Write>(params: &ModelParams, mut sink: W) -> Result<u64> {
    let mut buf = Vec::new();
    buf.extend_from_slice(HMTP_MAGIC);
    buf.extend_from_slice(&HMTP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

/// Reads a checkpoint and checks it holds exactly the parameters `cfg`
/// defines, with matching shapes.
pub fn load_params<R: Read>(mut source: R, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let total = bytes.len() as u64;
    let mut pos = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or(HmtError::Truncated { offset: total })?;
        let out = &bytes[pos..end];
        pos = end;
        Ok(out)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));

    let magic = take(4)?;
    if magic != HMTP_MAGIC {
        return Err(HmtError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u32_at(take(4)?);
    if version != HMTP_VERSION {
        return Err(HmtError::Format(format!("unsupported HMTP version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut expected = ModelParams::init(cfg)?;
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| HmtError::Format("parameter name is not UTF-8".into()))?;
        let rank = u32_at(take(4)?) as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(u32_at(take(4)?) as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or(HmtError::Truncated { offset: total })?;
        let raw = take(numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor = Tensor::new(dims, data)?;
        expected.set(&name, tensor)?;
        if !seen.insert(name.clone()) {
            return Err(HmtError::Format(format!("duplicate parameter {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(HmtError::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    if let Some(missing) = expected.names().find(|n| !seen.contains(*n)) {
        return Err(HmtError::Format(format!("checkpoint lacks parameter {missing}")));
    }
    Ok(expected)
}
