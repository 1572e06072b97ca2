use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{seeded_gaussian, Matrix};

/// Shape of the toy decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_intermediate: usize,
    pub layers: usize,
    pub seq_len: usize,
    #[serde(default = "default_rope")]
    pub rope: bool,
}

fn default_rope() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            hidden: 32,
            heads: 4,
            ffn_intermediate: 64,
            layers: 4,
            seq_len: 32,
            rope: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_intermediate", self.ffn_intermediate),
            ("layers", self.layers),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

/// The per-layer weight tags. The first seven are the linear maps; the two
/// norm scales ride along with the sub-block they normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    NormAttn,
    NormFfn,
}

impl WeightKind {
    pub const ALL: [WeightKind; 9] = [
        WeightKind::Q,
        WeightKind::K,
        WeightKind::V,
        WeightKind::O,
        WeightKind::Gate,
        WeightKind::Up,
        WeightKind::Down,
        WeightKind::NormAttn,
        WeightKind::NormFfn,
    ];

    pub const FFN_LINEAR: [WeightKind; 3] = [WeightKind::Gate, WeightKind::Up, WeightKind::Down];

    /// Parameters that live on the attention path and therefore receive no
    /// gradient when a node skips the attention branch.
    pub fn is_mha_group(self) -> bool {
        matches!(
            self,
            WeightKind::Q | WeightKind::K | WeightKind::V | WeightKind::O | WeightKind::NormAttn
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Q => "q",
            WeightKind::K => "k",
            WeightKind::V => "v",
            WeightKind::O => "o",
            WeightKind::Gate => "gate",
            WeightKind::Up => "up",
            WeightKind::Down => "down",
            WeightKind::NormAttn => "norm_attn",
            WeightKind::NormFfn => "norm_ffn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Embedding,
    Layer(usize, WeightKind),
    FinalNorm,
    Unembedding,
}

impl ParamId {
    pub fn layer(self) -> Option<usize> {
        match self {
            ParamId::Layer(l, _) => Some(l),
            _ => None,
        }
    }

    pub fn kind(self) -> Option<WeightKind> {
        match self {
            ParamId::Layer(_, k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Embedding => f.write_str("embedding"),
            ParamId::Layer(l, k) => write!(f, "layers.{l}.{}", k.as_str()),
            ParamId::FinalNorm => f.write_str("final_norm"),
            ParamId::Unembedding => f.write_str("unembedding"),
        }
    }
}

/// Weights of one transformer block. Linear maps are stored `(out, in)` so a
/// row-major activation batch `X` maps to `X·Wᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
    pub norm_attn: Matrix,
    pub norm_ffn: Matrix,
}

impl LayerWeights {
    pub fn get(&self, kind: WeightKind) -> &Matrix {
        match kind {
            WeightKind::Q => &self.q,
            WeightKind::K => &self.k,
            WeightKind::V => &self.v,
            WeightKind::O => &self.o,
            WeightKind::Gate => &self.gate,
            WeightKind::Up => &self.up,
            WeightKind::Down => &self.down,
            WeightKind::NormAttn => &self.norm_attn,
            WeightKind::NormFfn => &self.norm_ffn,
        }
    }

    pub fn get_mut(&mut self, kind: WeightKind) -> &mut Matrix {
        match kind {
            WeightKind::Q => &mut self.q,
            WeightKind::K => &mut self.k,
            WeightKind::V => &mut self.v,
            WeightKind::O => &mut self.o,
            WeightKind::Gate => &mut self.gate,
            WeightKind::Up => &mut self.up,
            WeightKind::Down => &mut self.down,
            WeightKind::NormAttn => &mut self.norm_attn,
            WeightKind::NormFfn => &mut self.norm_ffn,
        }
    }

    fn shape_of(cfg: &ModelConfig, kind: WeightKind) -> (usize, usize) {
        let (m, f) = (cfg.hidden, cfg.ffn_intermediate);
        match kind {
            WeightKind::Q | WeightKind::K | WeightKind::V | WeightKind::O => (m, m),
            WeightKind::Gate | WeightKind::Up => (f, m),
            WeightKind::Down => (m, f),
            WeightKind::NormAttn | WeightKind::NormFfn => (1, m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
    pub unembedding: Matrix,
}

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

impl ModelWeights {
    /// `N(0, 0.02²)` linear weights, unit norm scales. Each parameter draws
    /// from its own stream derived from `seed` and its position.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut weights = Self::zeros(cfg);
        for (idx, id) in weights.param_ids().into_iter().enumerate() {
            let target = weights.get_mut(id);
            let (rows, cols) = target.shape();
            *target = match id {
                ParamId::FinalNorm | ParamId::Layer(_, WeightKind::NormAttn | WeightKind::NormFfn) => {
                    Matrix::filled(rows, cols, 1.0)
                }
                _ => seeded_gaussian(rows, cols, 0.0, INIT_STD, derive_seed(seed, idx as u64))?,
            };
        }
        Ok(weights)
    }

    /// Every matrix zero except norm scales, which are one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layer = |_| {
            let z = |k| {
                let (r, c) = LayerWeights::shape_of(cfg, k);
                Matrix::zeros(r, c)
            };
            LayerWeights {
                q: z(WeightKind::Q),
                k: z(WeightKind::K),
                v: z(WeightKind::V),
                o: z(WeightKind::O),
                gate: z(WeightKind::Gate),
                up: z(WeightKind::Up),
                down: z(WeightKind::Down),
                norm_attn: Matrix::filled(1, cfg.hidden, 1.0),
                norm_ffn: Matrix::filled(1, cfg.hidden, 1.0),
            }
        };
        ModelWeights {
            embedding: Matrix::zeros(cfg.vocab, cfg.hidden),
            layers: (0..cfg.layers).map(layer).collect(),
            final_norm: Matrix::filled(1, cfg.hidden, 1.0),
            unembedding: Matrix::zeros(cfg.vocab, cfg.hidden),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every parameter in canonical (ascending `ParamId`) order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Embedding];
        for l in 0..self.layers.len() {
            ids.extend(WeightKind::ALL.iter().map(|&k| ParamId::Layer(l, k)));
        }
        ids.push(ParamId::FinalNorm);
        ids.push(ParamId::Unembedding);
        ids
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::Embedding => &self.embedding,
            ParamId::Layer(l, k) => self.layers[l].get(k),
            ParamId::FinalNorm => &self.final_norm,
            ParamId::Unembedding => &self.unembedding,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::Embedding => &mut self.embedding,
            ParamId::Layer(l, k) => self.layers[l].get_mut(k),
            ParamId::FinalNorm => &mut self.final_norm,
            ParamId::Unembedding => &mut self.unembedding,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.param_ids().iter().map(|&id| self.get(id).len()).sum()
    }

    /// Little-endian `f64` values of every parameter, concatenated in
    /// canonical order, plus a manifest of `(name, rows, cols, offset)`.
    pub fn to_flat_bytes(&self) -> (Vec<u8>, Vec<TensorEntry>) {
        let mut bytes = Vec::with_capacity(self.num_parameters() * 8);
        let mut manifest = Vec::new();
        let mut offset = 0;
        for id in self.param_ids() {
            let m = self.get(id);
            manifest.push(TensorEntry {
                name: id.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += m.len();
        }
        (bytes, manifest)
    }
}

/// One record of the weight-file manifest. `offset` counts `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// SplitMix64 step, used to fan one seed out into independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gradients keyed by parameter. A missing key means "not computed".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    entries: BTreeMap<ParamId, Matrix>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Matrix) {
        self.entries.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Matrix> {
        self.entries.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.keys().copied()
    }

    pub fn insert_block(&mut self, layer: usize, block: BlockGrads) {
        for (kind, g) in block {
            self.entries.insert(ParamId::Layer(layer, kind), g);
        }
    }

    /// Squared 2-norm of all present entries viewed as one flat vector.
    pub fn norm_sq(&self) -> f64 {
        self.entries.values().map(Matrix::frobenius_norm_sq).sum()
    }

    /// `‖self − other‖²` over the union of keys; a key missing on one side
    /// counts as zero there.
    pub fn distance_sq(&self, other: &GradientSet) -> f64 {
        let mut total = 0.0;
        for (id, a) in &self.entries {
            total += match other.entries.get(id) {
                Some(b) => a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum(),
                None => a.frobenius_norm_sq(),
            };
        }
        for (id, b) in &other.entries {
            if !self.entries.contains_key(id) {
                total += b.frobenius_norm_sq();
            }
        }
        total
    }
}

/// Gradients produced by one block's backward pass.
pub type BlockGrads = BTreeMap<WeightKind, Matrix>;
