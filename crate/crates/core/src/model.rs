//! Llama-style decoder with explicit positions over a role-tagged KV cache.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::layout::{visible_with, LayoutError, MaskPolicy, SegmentLayout, SegmentRole};
use crate::rope::RopeFrequencies;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("position {got} does not continue after {last}")]
    PositionRegression { last: u32, got: u32 },
    #[error("decode position {got}, expected {expected}")]
    PositionMismatch { expected: u32, got: u32 },
    #[error("sequence of {len} entries exceeds max_seq {max}")]
    Overflow { len: usize, max: usize },
    #[error("{0} inputs, {1} roles, {2} positions")]
    LengthMismatch(usize, usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("cache was produced by a different model or upstream prompt")]
    HashMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 64,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            max_seq: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq,
        ];
        if all.contains(&0) {
            return Err(ModelError::Config("all sizes must be positive".into()));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(ModelError::Config("d_model != n_heads * head_dim".into()));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::Config("head_dim must be even".into()));
        }
        if self.rope_base <= 1.0 || self.norm_eps < 0.0 {
            return Err(ModelError::Config("rope_base must exceed 1 and norm_eps be >= 0".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let (d, f) = (self.d_model, self.ffn_dim);
        let mut s = vec![vec![self.vocab_size, d]];
        for _ in 0..self.n_layers {
            s.extend([
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d, f],
                vec![d, f],
                vec![f, d],
            ]);
        }
        s.push(vec![d]);
        s.push(vec![d, self.vocab_size]);
        s
    }

    fn header_words(&self) -> Vec<u64> {
        vec![
            self.d_model as u64,
            self.n_layers as u64,
            self.n_heads as u64,
            self.head_dim as u64,
            self.ffn_dim as u64,
            self.vocab_size as u64,
            self.max_seq as u64,
            self.rope_base.to_bits(),
            self.norm_eps.to_bits(),
        ]
    }

    fn from_header_words(w: &[u64]) -> Self {
        Self {
            d_model: w[0] as usize,
            n_layers: w[1] as usize,
            n_heads: w[2] as usize,
            head_dim: w[3] as usize,
            ffn_dim: w[4] as usize,
            vocab_size: w[5] as usize,
            max_seq: w[6] as usize,
            rope_base: f64::from_bits(w[7]),
            norm_eps: f64::from_bits(w[8]),
        }
    }
}

const PER_LAYER: usize = 9;

/// Index of a tensor within one layer block.
#[derive(Clone, Copy, Debug)]
pub enum LayerParam {
    AttnNorm = 0,
    Wq,
    Wk,
    Wv,
    Wo,
    MlpNorm,
    WGate,
    WUp,
    WDown,
}

/// Frozen base parameters in declared order: embedding, per-layer blocks,
/// final norm, output projection.
#[derive(Clone, Debug)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid sigma");
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid sigma");
        let shapes = config.shapes();
        let last = shapes.len() - 1;
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = if s.len() == 1 {
                    vec![T::one(); n]
                } else {
                    let in_layer = i >= 1 && i < last - 1;
                    let slot = (i.wrapping_sub(1)) % PER_LAYER;
                    let dist = if in_layer && (slot == LayerParam::Wo as usize || slot == LayerParam::WDown as usize) {
                        &resid
                    } else {
                        &base
                    };
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                };
                Arc::new(Tensor::new(s.clone(), data).expect("shape matches"))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(ModelError::Config("tensor shapes do not match config".into()));
        }
        Ok(Self {
            config: config.clone(),
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn tensors(&self) -> &[Arc<Tensor<T>>] {
        &self.tensors
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.tensors[0]
    }

    pub fn layer(&self, l: usize, p: LayerParam) -> &Tensor<T> {
        &self.tensors[1 + l * PER_LAYER + p as usize]
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }

    /// Replaces every tensor, keeping shapes.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<(), ModelError> {
        *self = Self::from_tensors(&self.config, tensors)?;
        Ok(())
    }

    /// Token embeddings for `ids`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<T>, ModelError> {
        let e = self.embedding();
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::Tensor(TensorError::TargetOutOfRange {
                    target: id,
                    vocab: self.config.vocab_size,
                }));
            }
            out.extend_from_slice(e.row(id as usize));
        }
        Ok(Tensor::new(vec![ids.len(), d], out)?)
    }

    /// SHA-256 over the config and raw weight bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for w in self.config.header_words() {
            h.update(w.to_le_bytes());
        }
        for t in &self.tensors {
            for &x in t.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        write_header(&mut buf, WEIGHTS_MAGIC, &self.config, &[]);
        for t in &self.tensors {
            write_f32s(&mut buf, t.data());
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        let (config, _) = read_header(&mut r, WEIGHTS_MAGIC, 0)?;
        config.validate()?;
        let mut tensors = Vec::new();
        for s in config.shapes() {
            let n = s.iter().product();
            tensors.push(Tensor::new(s, r.f32s(n)?.into_iter().map(|x| T::of(x as f64)).collect())?);
        }
        r.finish()?;
        Self::from_tensors(&config, tensors)
    }
}

/// Graph handles for every weight tensor.
pub struct WeightVars {
    vars: Vec<Var>,
}

impl WeightVars {
    /// Binds weights into `g`, as trainable parameters or shared constants.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, w: &ModelWeights<T>, trainable: bool) -> Self {
        let vars = w
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param_shared(Arc::clone(t))
                } else {
                    g.shared(Arc::clone(t))
                }
            })
            .collect();
        Self { vars }
    }

    /// Wraps vars already bound in flat tensor order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn embed(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, l: usize, p: LayerParam) -> Var {
        self.vars[1 + l * PER_LAYER + p as usize]
    }

    fn final_norm(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }

    fn lm_head(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}

/// Metadata for one cache entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub position: u32,
    pub role: SegmentRole,
}

/// Per-layer post-RoPE keys and values, `[entries × d_model]` each, plus
/// per-entry metadata shared by all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    d_model: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    meta: Vec<CacheEntry>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.meta
    }

    pub fn last_position(&self) -> Option<u32> {
        self.meta.last().map(|e| e.position)
    }

    /// First position a new entry may take.
    pub fn next_position(&self) -> u32 {
        self.last_position().map_or(0, |p| p + 1)
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same = |a: &[Vec<T>], b: &[Vec<T>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
                })
        };
        self.d_model == other.d_model
            && self.meta == other.meta
            && same(&self.keys, &other.keys)
            && same(&self.values, &other.values)
    }

    /// Bytes held by keys and values.
    pub fn kv_bytes(&self) -> usize {
        2 * self.n_layers() * self.len() * self.d_model * std::mem::size_of::<T>()
    }

    fn append(&mut self, keys: &[&Tensor<T>], values: &[&Tensor<T>], positions: &[u32], roles: &[SegmentRole]) {
        for (l, (k, v)) in keys.iter().zip(values).enumerate() {
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
        }
        self.meta
            .extend(positions.iter().zip(roles).map(|(&position, &role)| CacheEntry { position, role }));
    }

    /// Owned copy keeping only entries whose role passes `keep`.
    pub fn filter(&self, keep: impl Fn(SegmentRole) -> bool) -> Self {
        let d = self.d_model;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.meta[i].role)).collect();
        let pick = |src: &Vec<T>| idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        Self {
            d_model: d,
            keys: self.keys.iter().map(pick).collect(),
            values: self.values.iter().map(pick).collect(),
            meta: idx.iter().map(|&i| self.meta[i]).collect(),
        }
    }

    /// Writes the cache with a header tying it to `hash`.
    pub fn save(&self, path: &Path, hash: &[u8; 32]) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(std::mem::size_of::<T>() as u8);
        buf.extend_from_slice(hash);
        for n in [self.n_layers(), self.d_model, self.len()] {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for l in 0..self.n_layers() {
            for block in [&self.keys[l], &self.values[l]] {
                for &x in block.iter() {
                    if std::mem::size_of::<T>() == 4 {
                        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                    } else {
                        buf.extend_from_slice(&x.as_f64().to_le_bytes());
                    }
                }
            }
        }
        for e in &self.meta {
            buf.extend_from_slice(&e.position.to_le_bytes());
            let (tag, model) = e.role.tag();
            buf.push(tag);
            buf.push(model);
        }
        write_atomic(path, &buf)
    }

    /// Reads a cache; with `expected` set the stored hash must match.
    pub fn load(path: &Path, expected: Option<&[u8; 32]>) -> Result<Self, ModelError> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        if r.take(4)? != CACHE_MAGIC {
            return Err(ModelError::Format("not a cache file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("cache version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != std::mem::size_of::<T>() {
            return Err(ModelError::Format(format!("cache holds {width}-byte scalars")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if expected.is_some_and(|e| *e != hash) {
            return Err(ModelError::HashMismatch);
        }
        let (layers, d, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut keys = Vec::with_capacity(layers);
        let mut values = Vec::with_capacity(layers);
        for _ in 0..layers {
            for dst in [&mut keys, &mut values] {
                let block: Vec<T> = if width == 4 {
                    r.f32s(n * d)?.into_iter().map(|x| T::of(x as f64)).collect()
                } else {
                    r.f64s(n * d)?.into_iter().map(T::of).collect()
                };
                dst.push(block);
            }
        }
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            let position = r.u32()?;
            let tb = r.take(2)?;
            let role = SegmentRole::from_tag(tb[0], tb[1]).ok_or_else(|| ModelError::Format("bad role tag".into()))?;
            meta.push(CacheEntry { position, role });
        }
        r.finish()?;
        Ok(Self {
            d_model: d,
            keys,
            values,
            meta,
        })
    }
}

pub fn filter_cache<T: Scalar>(cache: &KvCache<T>, keep: impl Fn(SegmentRole) -> bool) -> KvCache<T> {
    cache.filter(keep)
}

pub fn cache_save<T: Scalar>(cache: &KvCache<T>, path: &Path, hash: &[u8; 32]) -> Result<(), ModelError> {
    cache.save(path, hash)
}

pub fn cache_load<T: Scalar>(path: &Path, expected: Option<&[u8; 32]>) -> Result<KvCache<T>, ModelError> {
    KvCache::load(path, expected)
}

/// Result of a graph-level forward pass over new rows.
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
    /// Post-RoPE keys of the new rows, one per layer.
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    /// Attention nodes, one per layer (probabilities are probe-able).
    pub attention: Vec<Var>,
}

/// Runs the decoder over `input` rows that sit after the entries of `past`.
///
/// Row `i` attends to past entry `j` when `visible(roles[i], past_j)` holds
/// and to new row `j <= i` under the same rule. This single routine backs
/// training, full forward, prefill and decode.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    wv: &WeightVars,
    config: &ModelConfig,
    input: Var,
    positions: &[u32],
    roles: &[SegmentRole],
    past: Option<&KvCache<T>>,
    policy: MaskPolicy,
) -> Result<ForwardVars, ModelError> {
    let t = g.shape(input)[0];
    if positions.len() != t || roles.len() != t || g.shape(input)[1] != config.d_model {
        return Err(ModelError::LengthMismatch(t, roles.len(), positions.len()));
    }
    let past_len = past.map_or(0, KvCache::len);
    if past_len + t > config.max_seq {
        return Err(ModelError::Overflow {
            len: past_len + t,
            max: config.max_seq,
        });
    }
    let mut last = past.and_then(KvCache::last_position);
    for &p in positions {
        if let Some(l) = last {
            if p <= l {
                return Err(ModelError::PositionRegression { last: l, got: p });
            }
        }
        last = Some(p);
    }
    let kv_len = past_len + t;
    let mut vis = vec![false; t * kv_len];
    for (i, &q) in roles.iter().enumerate() {
        let row = &mut vis[i * kv_len..(i + 1) * kv_len];
        if let Some(c) = past {
            for (j, e) in c.entries().iter().enumerate() {
                row[j] = visible_with(q, e.role, policy);
            }
        }
        for j in 0..=i {
            row[past_len + j] = visible_with(q, roles[j], policy);
        }
    }
    let vis = Arc::new(vis);
    let freqs = RopeFrequencies::<T>::new(config.head_dim, config.rope_base)?;
    let pos_i64: Vec<i64> = positions.iter().map(|&p| p as i64).collect();
    let table = Arc::new(freqs.table(&pos_i64));
    let eps = T::of(config.norm_eps);
    let d = config.d_model;

    let mut h = input;
    let (mut keys, mut values, mut attention) = (Vec::new(), Vec::new(), Vec::new());
    for l in 0..config.n_layers {
        let a = g.rmsnorm(h, wv.layer(l, LayerParam::AttnNorm), eps)?;
        let q = g.matmul(a, wv.layer(l, LayerParam::Wq))?;
        let k = g.matmul(a, wv.layer(l, LayerParam::Wk))?;
        let v = g.matmul(a, wv.layer(l, LayerParam::Wv))?;
        let q = g.rope(q, Arc::clone(&table), config.n_heads)?;
        let k = g.rope(k, Arc::clone(&table), config.n_heads)?;
        let (kk, vv) = match past {
            Some(c) if past_len > 0 => {
                let pk = g.constant(Tensor::new(vec![past_len, d], c.keys(l).to_vec())?);
                let pv = g.constant(Tensor::new(vec![past_len, d], c.values(l).to_vec())?);
                (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
            }
            _ => (k, v),
        };
        let att = g.attention(q, kk, vv, config.n_heads, Arc::clone(&vis))?;
        let o = g.matmul(att, wv.layer(l, LayerParam::Wo))?;
        h = g.add(h, o)?;
        let m = g.rmsnorm(h, wv.layer(l, LayerParam::MlpNorm), eps)?;
        let gate = g.matmul(m, wv.layer(l, LayerParam::WGate))?;
        let gate = g.silu(gate);
        let up = g.matmul(m, wv.layer(l, LayerParam::WUp))?;
        let f = g.mul(gate, up)?;
        let f = g.matmul(f, wv.layer(l, LayerParam::WDown))?;
        h = g.add(h, f)?;
        keys.push(k);
        values.push(v);
        attention.push(att);
    }
    let hn = g.rmsnorm(h, wv.final_norm(), eps)?;
    let logits = g.matmul(hn, wv.lm_head())?;
    g.check_finite()?;
    Ok(ForwardVars {
        hidden: h,
        logits,
        keys,
        values,
        attention,
    })
}

/// One piece of model input.
#[derive(Clone, Debug)]
pub enum Piece<'a> {
    Tokens(&'a [u32]),
    Embeddings(Var),
}

/// Concatenates token lookups and continuous embeddings into one input.
pub fn embed_pieces<T: Scalar>(g: &mut Graph<T>, wv: &WeightVars, pieces: &[Piece<'_>]) -> Result<Var, ModelError> {
    let mut parts = Vec::new();
    for p in pieces {
        match p {
            Piece::Tokens([]) => {}
            Piece::Tokens(ids) => parts.push(g.gather_rows(wv.embed(), ids)?),
            Piece::Embeddings(v) => parts.push(*v),
        }
    }
    if parts.is_empty() {
        return Err(ModelError::LengthMismatch(0, 0, 0));
    }
    Ok(g.concat_rows(&parts)?)
}

/// Output of prefill or decode.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    /// Per layer, `[heads × rows × cache_len]` attention probabilities.
    pub probs: Vec<Vec<T>>,
}

/// Output of a full forward pass.
#[derive(Clone, Debug)]
pub struct FullOutput<T> {
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
}

/// Extends `cache` by the given rows.
pub fn prefill<T: Scalar>(
    weights: &ModelWeights<T>,
    embeddings: &Tensor<T>,
    roles: &[SegmentRole],
    positions: &[u32],
    cache: &mut KvCache<T>,
    policy: MaskPolicy,
) -> Result<StepOutput<T>, ModelError> {
    let mut g = Graph::new();
    let wv = WeightVars::bind(&mut g, weights, false);
    let x = g.constant(embeddings.clone());
    let out = forward_graph(&mut g, &wv, &weights.config, x, positions, roles, Some(cache), policy)?;
    let ks: Vec<&Tensor<T>> = out.keys.iter().map(|&k| g.value(k)).collect();
    let vs: Vec<&Tensor<T>> = out.values.iter().map(|&v| g.value(v)).collect();
    cache.append(&ks, &vs, positions, roles);
    Ok(StepOutput {
        hidden: g.value(out.hidden).clone(),
        logits: g.value(out.logits).clone(),
        probs: out
            .attention
            .iter()
            .map(|&a| g.attention_probs(a).map(<[T]>::to_vec).unwrap_or_default())
            .collect(),
    })
}

/// Prefill of token ids.
pub fn prefill_tokens<T: Scalar>(
    weights: &ModelWeights<T>,
    ids: &[u32],
    roles: &[SegmentRole],
    positions: &[u32],
    cache: &mut KvCache<T>,
    policy: MaskPolicy,
) -> Result<StepOutput<T>, ModelError> {
    let e = weights.embed_tokens(ids)?;
    prefill(weights, &e, roles, positions, cache, policy)
}

/// Single-token step; `position` must be the cache's last position + 1
/// unless the cache is empty.
pub fn decode_step<T: Scalar>(
    weights: &ModelWeights<T>,
    embedding: &Tensor<T>,
    position: u32,
    role: SegmentRole,
    cache: &mut KvCache<T>,
    policy: MaskPolicy,
) -> Result<StepOutput<T>, ModelError> {
    let expected = cache.next_position();
    if !cache.is_empty() && position != expected {
        return Err(ModelError::PositionMismatch {
            expected,
            got: position,
        });
    }
    let e = embedding.clone().reshape(&[1, weights.config.d_model])?;
    prefill(weights, &e, &[role], &[position], cache, policy)
}

/// Whole-layout pass with `build_mask(layout)` semantics.
pub fn forward_full<T: Scalar>(
    weights: &ModelWeights<T>,
    embeddings: &Tensor<T>,
    layout: &SegmentLayout,
    positions: &[u32],
    policy: MaskPolicy,
) -> Result<FullOutput<T>, ModelError> {
    let roles = layout.roles();
    if roles.len() != embeddings.rows() {
        return Err(ModelError::LengthMismatch(embeddings.rows(), roles.len(), positions.len()));
    }
    let mut g = Graph::new();
    let wv = WeightVars::bind(&mut g, weights, false);
    let x = g.constant(embeddings.clone());
    let out = forward_graph(&mut g, &wv, &weights.config, x, positions, &roles, None, policy)?;
    Ok(FullOutput {
        hidden: g.value(out.hidden).clone(),
        logits: g.value(out.logits).clone(),
        keys: out.keys.iter().map(|&k| g.value(k).clone()).collect(),
        values: out.values.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Chooses the next token from a logits row.
pub trait Sampler<T> {
    fn sample(&mut self, logits: &[T]) -> u32;
}

/// Argmax; the lowest id wins ties.
#[derive(Clone, Copy, Debug, Default)]
pub struct Greedy;

impl<T: Scalar> Sampler<T> for Greedy {
    fn sample(&mut self, logits: &[T]) -> u32 {
        argmax(logits)
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

const WEIGHTS_MAGIC: &[u8; 4] = b"KVCW";
pub(crate) const PROMPT_MAGIC: &[u8; 4] = b"KVCP";
const CACHE_MAGIC: &[u8; 4] = b"KVCC";
const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_header(buf: &mut Vec<u8>, magic: &[u8; 4], config: &ModelConfig, extra: &[u64]) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for w in config.header_words().iter().chain(extra) {
        buf.extend_from_slice(&w.to_le_bytes());
    }
}

pub(crate) fn read_header(
    r: &mut Reader<'_>,
    magic: &[u8; 4],
    n_extra: usize,
) -> Result<(ModelConfig, Vec<u64>), ModelError> {
    if r.take(4)? != magic {
        return Err(ModelError::Format("wrong magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Format(format!("version {version}")));
    }
    let mut words = Vec::new();
    for _ in 0..9 + n_extra {
        words.push(r.u64()?);
    }
    Ok((ModelConfig::from_header_words(&words), words[9..].to_vec()))
}

pub(crate) fn write_f32s<T: Scalar>(buf: &mut Vec<u8>, xs: &[T]) {
    for &x in xs {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Format("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| ModelError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| ModelError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn finish(&self) -> Result<(), ModelError> {
        if self.at != self.bytes.len() {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        Ok(())
    }
}
