//! Toy transformer encoder standing in for a pretrained speech SSL model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, NodeId, Segment};
use crate::kv::KvMap;
use crate::pretext::MaskSpec;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretextKind {
    Contrastive,
    Reconstruction,
}

impl PretextKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PretextKind::Contrastive => "contrastive",
            PretextKind::Reconstruction => "reconstruction",
        }
    }
}

impl std::str::FromStr for PretextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(PretextKind::Contrastive),
            "reconstruction" => Ok(PretextKind::Reconstruction),
            other => Err(Error::Config(format!("unknown pretext kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Zero disables the feed-forward sublayer (attention-only blocks).
    pub ffn_dim: usize,
    pub max_time: usize,
    /// CTC output classes including blank (id 0).
    pub vocab_size: usize,
    pub pretext: PretextKind,
    /// When false, no positional signal is added.
    pub use_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_time: 256,
            vocab_size: 14,
            pretext: PretextKind::Contrastive,
            use_positions: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.max_time == 0 {
            return bad("model dimensions must be positive");
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include blank plus at least one token");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("model.feature_dim", self.feature_dim)
            .set("model.hidden_dim", self.hidden_dim)
            .set("model.num_layers", self.num_layers)
            .set("model.num_heads", self.num_heads)
            .set("model.ffn_dim", self.ffn_dim)
            .set("model.max_time", self.max_time)
            .set("model.vocab_size", self.vocab_size)
            .set("model.pretext", self.pretext.as_str())
            .set("model.use_positions", self.use_positions);
        m
    }

    /// Reads `model.*` keys, falling back to defaults for absent ones.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            feature_dim: m.get_or("model.feature_dim", d.feature_dim)?,
            hidden_dim: m.get_or("model.hidden_dim", d.hidden_dim)?,
            num_layers: m.get_or("model.num_layers", d.num_layers)?,
            num_heads: m.get_or("model.num_heads", d.num_heads)?,
            ffn_dim: m.get_or("model.ffn_dim", d.ffn_dim)?,
            max_time: m.get_or("model.max_time", d.max_time)?,
            vocab_size: m.get_or("model.vocab_size", d.vocab_size)?,
            pretext: m.get_or("model.pretext", d.pretext)?,
            use_positions: m.get_or("model.use_positions", d.use_positions)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const POSITION_TABLE: &str = "position.table";
pub const CTC_WEIGHT: &str = "ctc.weight";
pub const CTC_BIAS: &str = "ctc.bias";

/// Named encoder weights in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn sinusoid_table(t_max: usize, h: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; t_max * h];
    for pos in 0..t_max {
        for i in 0..h / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / h as f64);
            let a = pos as f64 * freq;
            data[pos * h + 2 * i] = a.sin() as f32;
            data[pos * h + 2 * i + 1] = a.cos() as f32;
        }
    }
    Tensor::from_vec([t_max, h], data)
}

/// Canonical tensor names and shapes of the encoder (CTC head excluded).
pub fn encoder_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h, f) = (cfg.feature_dim, cfg.hidden_dim, cfg.ffn_dim);
    let mut v = vec![
        ("input.weight".to_string(), vec![d, h]),
        ("input.bias".to_string(), vec![h]),
        ("input.norm.gain".to_string(), vec![h]),
        ("input.norm.bias".to_string(), vec![h]),
        (POSITION_TABLE.to_string(), vec![cfg.max_time, h]),
        ("mask.embedding".to_string(), vec![h]),
    ];
    for l in 0..cfg.num_layers {
        for p in ["q", "k", "v", "o"] {
            v.push((format!("layers.{l}.attn.{p}.weight"), vec![h, h]));
            v.push((format!("layers.{l}.attn.{p}.bias"), vec![h]));
        }
        v.push((format!("layers.{l}.ln1.gain"), vec![h]));
        v.push((format!("layers.{l}.ln1.bias"), vec![h]));
        if f > 0 {
            v.push((format!("layers.{l}.ffn.in.weight"), vec![h, f]));
            v.push((format!("layers.{l}.ffn.in.bias"), vec![f]));
            v.push((format!("layers.{l}.ffn.out.weight"), vec![f, h]));
            v.push((format!("layers.{l}.ffn.out.bias"), vec![h]));
        }
        v.push((format!("layers.{l}.ln2.gain"), vec![h]));
        v.push((format!("layers.{l}.ln2.bias"), vec![h]));
    }
    v.push(("pretext.weight".to_string(), vec![h, h]));
    v.push(("pretext.bias".to_string(), vec![h]));
    v
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Tensor<f32> {
    if name.ends_with(".gain") {
        Tensor::ones(shape.to_vec())
    } else if name.ends_with(".bias") {
        Tensor::zeros(shape.to_vec())
    } else {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| normal.sample(rng) as f32).collect())
    }
}

const INIT_STD: f64 = 0.02;

/// Deterministic initialization: N(0, 0.02²) for projections and the mask
/// embedding, ones/zeros for layer-norm gain/bias, sinusoids for positions.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = encoder_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let t = if name == POSITION_TABLE {
                sinusoid_table(config.max_time, config.hidden_dim)
            } else {
                init_tensor(&name, &shape, &mut rng, &normal)
            };
            (name, t)
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        tensors,
    })
}

/// Deep copy of a parameter set.
pub fn clone_params(p: &Parameters) -> Parameters {
    p.clone()
}

impl Parameters {
    /// Assembles a parameter set, checking names and shapes against the layout.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let mut expected = encoder_layout(&config);
        if tensors.iter().any(|(n, _)| n == CTC_WEIGHT) {
            expected.push((CTC_WEIGHT.to_string(), vec![config.hidden_dim, config.vocab_size]));
            expected.push((CTC_BIAS.to_string(), vec![config.vocab_size]));
        }
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{n}` {:?} does not match expected `{en}` {es:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(n.clone()));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_ctc_head(&self) -> bool {
        self.get(CTC_WEIGHT).is_some()
    }

    /// Replaces (or adds) a freshly initialized linear CTC head.
    pub fn reset_ctc_head(&mut self, seed: u64) {
        self.drop_ctc_head();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (h, v) = (self.config.hidden_dim, self.config.vocab_size);
        let w = init_tensor(CTC_WEIGHT, &[h, v], &mut rng, &normal);
        self.tensors.push((CTC_WEIGHT.to_string(), w));
        self.tensors.push((CTC_BIAS.to_string(), Tensor::zeros([v])));
    }

    pub fn drop_ctc_head(&mut self) {
        self.tensors.retain(|(n, _)| n != CTC_WEIGHT && n != CTC_BIAS);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether the optimizer updates this tensor.
    pub fn is_trainable(name: &str) -> bool {
        name != POSITION_TABLE
    }

    /// Registers every tensor as a graph leaf. With `trainable`, all tensors
    /// except the fixed position table receive gradients.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|(n, t)| {
                if trainable && Self::is_trainable(n) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            ids,
        }
    }
}

/// Graph leaves for one [`Parameters`] set.
pub struct BoundParams {
    names: Vec<String>,
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Config(format!("parameter `{name}` not present")))
    }

    /// Gradients aligned with the canonical parameter order.
    pub fn collect_grads(&self, grads: &mut Gradients<f32>) -> Vec<Option<Tensor<f32>>> {
        self.ids.iter().map(|&id| grads.take(id)).collect()
    }
}

/// Encoder graph outputs for a packed batch.
pub struct EncoderOutput {
    /// Input-projection outputs before mask replacement, detached.
    pub latents: NodeId,
    /// Final block output after its layer norm.
    pub hidden: NodeId,
}

fn linear(g: &mut Graph<f32>, p: &BoundParams, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = p.id(&format!("{prefix}.weight"))?;
    let b = p.id(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

/// Builds the encoder over packed frames `N×d` whose rows split into
/// `segments`. `masked_rows` are global row indices replaced by the mask
/// embedding after the input projection.
pub fn encode_graph(
    g: &mut Graph<f32>,
    cfg: &ModelConfig,
    p: &BoundParams,
    frames: NodeId,
    segments: &[Segment],
    masked_rows: &[usize],
) -> Result<EncoderOutput> {
    if let Some(s) = segments.iter().find(|s| s.len > cfg.max_time) {
        return Err(Error::TooLong {
            len: s.len,
            max: cfg.max_time,
        });
    }
    let z = linear(g, p, frames, "input")?;
    let latents = g.detach(z);
    let x = if masked_rows.is_empty() {
        z
    } else {
        let emb = p.id("mask.embedding")?;
        g.replace_rows(z, emb, masked_rows)?
    };
    // Normalized so frame content is on the scale of the position signal.
    let mut x = g.layer_norm(x, p.id("input.norm.gain")?, p.id("input.norm.bias")?)?;
    if cfg.use_positions {
        let rows: Vec<usize> = segments.iter().flat_map(|s| 0..s.len).collect();
        let table = p.id(POSITION_TABLE)?;
        let pos = g.gather_rows(table, &rows)?;
        x = g.add(x, pos)?;
    }
    for l in 0..cfg.num_layers {
        let q = linear(g, p, x, &format!("layers.{l}.attn.q"))?;
        let k = linear(g, p, x, &format!("layers.{l}.attn.k"))?;
        let v = linear(g, p, x, &format!("layers.{l}.attn.v"))?;
        let a = g.attention(q, k, v, segments, cfg.num_heads)?;
        let o = linear(g, p, a, &format!("layers.{l}.attn.o"))?;
        let r = g.add(x, o)?;
        x = g.layer_norm(
            r,
            p.id(&format!("layers.{l}.ln1.gain"))?,
            p.id(&format!("layers.{l}.ln1.bias"))?,
        )?;
        if cfg.ffn_dim > 0 {
            let f = linear(g, p, x, &format!("layers.{l}.ffn.in"))?;
            let f = g.gelu(f);
            let f = linear(g, p, f, &format!("layers.{l}.ffn.out"))?;
            x = g.add(x, f)?;
        }
        x = g.layer_norm(
            x,
            p.id(&format!("layers.{l}.ln2.gain"))?,
            p.id(&format!("layers.{l}.ln2.bias"))?,
        )?;
    }
    Ok(EncoderOutput { latents, hidden: x })
}

pub fn pretext_head(g: &mut Graph<f32>, p: &BoundParams, hidden: NodeId) -> Result<NodeId> {
    linear(g, p, hidden, "pretext")
}

/// Per-frame CTC logits `N×V`.
pub fn ctc_head(g: &mut Graph<f32>, p: &BoundParams, hidden: NodeId) -> Result<NodeId> {
    linear(g, p, hidden, "ctc")
}

/// Final-layer representations `T×h` for a single utterance.
pub fn encode(params: &Parameters, features: &Tensor<f32>, mask: Option<&MaskSpec>) -> Result<Tensor<f32>> {
    let cfg = params.config();
    let (t, d) = features.dims2();
    if features.rank() != 2 || d != cfg.feature_dim {
        return Err(Error::Config(format!(
            "features {:?} do not match feature_dim {}",
            features.shape(),
            cfg.feature_dim
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let rows = mask.map(|m| m.indices().to_vec()).unwrap_or_default();
    if let Some(&r) = rows.iter().find(|&&r| r >= t) {
        return Err(Error::Config(format!("mask index {r} out of range for length {t}")));
    }
    let out = encode_graph(&mut g, cfg, &bound, x, &[Segment::new(0, t)], &rows)?;
    Ok(g.value(out.hidden).clone())
}
