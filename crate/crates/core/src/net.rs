//! Vector-field transformer.
//!
//! Per frame the input is `[x_t ; context·given ; token embedding]`, mapped
//! by a dense input projection. A sinusoidal embedding of `t` passes through
//! its own dense projection and is added to every frame. Pre-norm blocks use
//! multi-head self-attention with rotary positions on queries and keys (no
//! additive attention bias) followed by a GELU feed-forward. A final norm
//! and dense output projection give one `D`-vector per frame.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{forward_eval, Feed, Graph, NodeId, Params};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::seed;
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub token_vocab: usize,
    pub time_dim: usize,
    pub rope_base: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            model_dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 128,
            token_vocab: 12,
            time_dim: 32,
            rope_base: 10_000.0,
        }
    }
}

impl NetConfig {
    /// Scale used to check adapter overhead against a large synthesizer;
    /// not a claim about any particular published model.
    pub fn reference_large() -> Self {
        Self {
            feature_dim: 80,
            model_dim: 1024,
            layers: 24,
            heads: 16,
            ffn_dim: 4096,
            token_vocab: 100,
            time_dim: 256,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("token_vocab", self.token_vocab),
            ("time_dim", self.time_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if (self.model_dim / self.heads) % 2 != 0 {
            return Err(Error::Config("head width must be even for rotary embedding".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn input_width(&self) -> usize {
        2 * self.feature_dim + self.model_dim
    }

    /// Dense layers in execution order.
    pub fn dense_layers(&self) -> Vec<DenseLayerId> {
        let mut out = vec![DenseLayerId::global(Site::InputProj), DenseLayerId::global(Site::TimeProj)];
        for layer in 0..self.layers {
            for site in Site::BLOCK {
                out.push(DenseLayerId { layer, site });
            }
        }
        out.push(DenseLayerId::global(Site::OutputProj));
        out
    }

    /// `(d_out, d_in)` of a dense layer.
    pub fn dense_shape(&self, id: &DenseLayerId) -> (usize, usize) {
        let m = self.model_dim;
        match id.site {
            Site::Query | Site::Key | Site::Value | Site::AttnOut => (m, m),
            Site::FfnIn => (self.ffn_dim, m),
            Site::FfnOut => (m, self.ffn_dim),
            Site::InputProj => (m, self.input_width()),
            Site::OutputProj => (self.feature_dim, m),
            Site::TimeProj => (m, self.time_dim),
        }
    }

    /// Every parameter name and shape.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = vec![("token_emb".to_string(), (self.token_vocab, self.model_dim))];
        for id in self.dense_layers() {
            let (o, i) = self.dense_shape(&id);
            out.push((format!("{}.weight", id.name()), (o, i)));
            out.push((format!("{}.bias", id.name()), (1, o)));
        }
        for layer in 0..self.layers {
            for ln in ["ln1", "ln2"] {
                out.push((format!("blocks.{layer}.{ln}.gain"), (1, self.model_dim)));
                out.push((format!("blocks.{layer}.{ln}.bias"), (1, self.model_dim)));
            }
        }
        out.push(("final_ln.gain".into(), (1, self.model_dim)));
        out.push(("final_ln.bias".into(), (1, self.model_dim)));
        out
    }

    pub fn base_param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }

    pub fn to_kv(&self, prefix: &str) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(format!("{prefix}{k}"), v);
        };
        put("feature_dim", self.feature_dim.to_string());
        put("model_dim", self.model_dim.to_string());
        put("layers", self.layers.to_string());
        put("heads", self.heads.to_string());
        put("ffn_dim", self.ffn_dim.to_string());
        put("token_vocab", self.token_vocab.to_string());
        put("time_dim", self.time_dim.to_string());
        put("rope_base", self.rope_base.to_string());
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let get = |k: &str, default: usize| -> Result<usize> {
            match kv.get(&format!("{prefix}{k}")) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("{prefix}{k}: expected an integer, got `{v}`"))),
                None => Ok(default),
            }
        };
        let rope_base = match kv.get(&format!("{prefix}rope_base")) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{prefix}rope_base: expected a number, got `{v}`")))?,
            None => d.rope_base,
        };
        let cfg = Self {
            feature_dim: get("feature_dim", d.feature_dim)?,
            model_dim: get("model_dim", d.model_dim)?,
            layers: get("layers", d.layers)?,
            heads: get("heads", d.heads)?,
            ffn_dim: get("ffn_dim", d.ffn_dim)?,
            token_vocab: get("token_vocab", d.token_vocab)?,
            time_dim: get("time_dim", d.time_dim)?,
            rope_base,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Query,
    Key,
    Value,
    AttnOut,
    FfnIn,
    FfnOut,
    InputProj,
    OutputProj,
    TimeProj,
}

impl Site {
    pub const BLOCK: [Site; 6] = [Site::Query, Site::Key, Site::Value, Site::AttnOut, Site::FfnIn, Site::FfnOut];

    pub fn is_global(self) -> bool {
        matches!(self, Site::InputProj | Site::OutputProj | Site::TimeProj)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Query => "q",
            Site::Key => "k",
            Site::Value => "v",
            Site::AttnOut => "attn_out",
            Site::FfnIn => "ffn_in",
            Site::FfnOut => "ffn_out",
            Site::InputProj => "input_proj",
            Site::OutputProj => "output_proj",
            Site::TimeProj => "time_proj",
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Site::Query,
            Site::Key,
            Site::Value,
            Site::AttnOut,
            Site::FfnIn,
            Site::FfnOut,
            Site::InputProj,
            Site::OutputProj,
            Site::TimeProj,
        ]
        .into_iter()
        .find(|site| site.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown dense site `{s}`")))
    }
}

/// A dense layer: block index plus site. Global projections use index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DenseLayerId {
    pub layer: usize,
    pub site: Site,
}

impl DenseLayerId {
    pub fn global(site: Site) -> Self {
        Self { layer: 0, site }
    }

    pub fn name(&self) -> String {
        if self.site.is_global() {
            self.site.as_str().to_string()
        } else {
            format!("blocks.{}.{}", self.layer, self.site.as_str())
        }
    }
}

impl fmt::Display for DenseLayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: Params,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub base: usize,
    pub adapter: usize,
    pub ratio: f64,
}

impl ParamCount {
    pub fn new(base: usize, adapter: usize) -> Self {
        Self {
            base,
            adapter,
            ratio: if base == 0 { 0.0 } else { adapter as f64 / base as f64 },
        }
    }
}

/// Deterministic initialization: dense weights `N(0, 1/d_in)`, zero biases,
/// unit norm gains, token table `N(0, 1)`.
pub fn build_model(config: &NetConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut params = Params::new();
    for (name, (rows, cols)) in config.param_shapes() {
        let mut rng = seed::rng(seed::derive(seed, &name));
        let m = if name == "token_emb" {
            Matrix::randn(rows, cols, 1.0, &mut rng)
        } else if name.ends_with(".weight") {
            Matrix::randn(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng)
        } else if name.ends_with(".gain") {
            Matrix::filled(rows, cols, 1.0)
        } else {
            Matrix::zeros(rows, cols)
        };
        params.insert(name, m);
    }
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Rotates each row's adjacent coordinate pairs by `position · base^(-2i/d)`.
pub fn rotary_rotate(vectors: &Matrix, positions: &[usize], base: f64) -> Result<Matrix> {
    if vectors.cols() % 2 != 0 {
        return Err(Error::Dim(format!("rotary needs an even width, got {}", vectors.cols())));
    }
    if positions.len() != vectors.rows() {
        return Err(Error::Dim(format!("{} positions for {} rows", positions.len(), vectors.rows())));
    }
    Ok(crate::autodiff::rotate_rows(vectors, positions, base, 1.0))
}

/// `[sin(100·t·f_i), cos(100·t·f_i)]` with geometric frequencies.
pub fn time_embedding(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 100.0 * t * freq;
        row[i] = a.sin();
        row[half + i] = a.cos();
    }
    Matrix::row_vector(&row)
}

/// Inputs to one vector-field evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FieldInputs<'a> {
    pub x_t: &'a Matrix,
    pub t: f64,
    pub context: &'a Matrix,
    /// `true` where the context frame is given.
    pub given: &'a [bool],
    pub token_frames: &'a [usize],
}

impl FieldInputs<'_> {
    fn check(&self, cfg: &NetConfig) -> Result<()> {
        let frames = self.x_t.rows();
        if frames == 0 {
            return Err(Error::Dim("empty sequence".into()));
        }
        if self.x_t.cols() != cfg.feature_dim || self.context.cols() != cfg.feature_dim {
            return Err(Error::Dim(format!("features must have {} bins", cfg.feature_dim)));
        }
        if self.context.rows() != frames || self.given.len() != frames || self.token_frames.len() != frames {
            return Err(Error::Dim(format!(
                "length mismatch: x_t {frames}, context {}, mask {}, tokens {}",
                self.context.rows(),
                self.given.len(),
                self.token_frames.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Invalid(format!("t = {} outside [0, 1]", self.t)));
        }
        Ok(())
    }
}

fn mask_matrix(given: &[bool], width: usize) -> Matrix {
    Matrix::from_fn(given.len(), width, |i, _| if given[i] { 1.0 } else { 0.0 })
}

pub(crate) struct GraphBuilder<'m> {
    pub g: Graph,
    cfg: &'m NetConfig,
    params: &'m Params,
    adapters: Option<&'m AdapterSet>,
}

impl<'m> GraphBuilder<'m> {
    pub fn new(cfg: &'m NetConfig, params: &'m Params, adapters: Option<&'m AdapterSet>) -> Self {
        Self {
            g: Graph::new(),
            cfg,
            params,
            adapters,
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        let m = self.params.get(name).ok_or_else(|| Error::Missing {
            kind: "parameter",
            name: name.to_string(),
        })?;
        Ok(self.g.param(name, m.shape()))
    }

    /// Dense map with the layer's adapter delta, when one is attached.
    pub fn dense(&mut self, x: NodeId, id: &DenseLayerId) -> Result<NodeId> {
        let name = id.name();
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let base = self.g.dense(x, w, Some(b))?;
        let Some(adapters) = self.adapters else {
            return Ok(base);
        };
        let Some((a_name, b_name)) = adapters.param_names(id) else {
            return Ok(base);
        };
        let a = self.g.param(a_name.clone(), adapters.params[&a_name].shape());
        let bm = self.g.param(b_name.clone(), adapters.params[&b_name].shape());
        let low = self.g.matmul_bt(x, a)?;
        let up = self.g.matmul_bt(low, bm)?;
        let delta = self.g.scale(up, adapters.scale())?;
        self.g.add(base, delta)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let n = self.g.layer_norm(x, LN_EPS)?;
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        let y = self.g.mul_row(n, gain)?;
        self.g.add_row(y, bias)
    }

    fn attention(&mut self, h: NodeId, layer: usize, frames: usize) -> Result<NodeId> {
        let id = |site| DenseLayerId { layer, site };
        let q = self.dense(h, &id(Site::Query))?;
        let k = self.dense(h, &id(Site::Key))?;
        let v = self.dense(h, &id(Site::Value))?;
        let dh = self.cfg.head_dim();
        let positions: Vec<usize> = (0..frames).collect();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let qh = self.g.slice_cols(q, head * dh, dh)?;
            let kh = self.g.slice_cols(k, head * dh, dh)?;
            let vh = self.g.slice_cols(v, head * dh, dh)?;
            let qh = self.g.rotary(qh, positions.clone(), self.cfg.rope_base)?;
            let kh = self.g.rotary(kh, positions.clone(), self.cfg.rope_base)?;
            let scores = self.g.matmul_bt(qh, kh)?;
            let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let weights = self.g.softmax_rows(scores)?;
            heads.push(self.g.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { self.g.concat_cols(&heads)? };
        self.dense(joined, &id(Site::AttnOut))
    }

    /// Appends the vector-field computation; `x_t` and `context` become the
    /// inputs "x_t{tag}" and "context{tag}".
    pub fn vector_field(&mut self, inputs: &FieldInputs, tag: &str) -> Result<NodeId> {
        let cfg = self.cfg;
        inputs.check(cfg)?;
        let frames = inputs.x_t.rows();
        let x = self.g.input(format!("x_t{tag}"), inputs.x_t.shape());
        let ctx = self.g.input(format!("context{tag}"), inputs.context.shape());
        let mask = self.g.constant(mask_matrix(inputs.given, cfg.feature_dim));
        let ctx = self.g.mul(ctx, mask)?;
        let table = self.param("token_emb")?;
        let tok = self.g.embedding(table, inputs.token_frames.to_vec())?;
        let joined = self.g.concat_cols(&[x, ctx, tok])?;
        let mut h = self.dense(joined, &DenseLayerId::global(Site::InputProj))?;
        let temb = self.g.constant(time_embedding(inputs.t, cfg.time_dim));
        let tproj = self.dense(temb, &DenseLayerId::global(Site::TimeProj))?;
        h = self.g.add_row(h, tproj)?;
        for layer in 0..cfg.layers {
            let n1 = self.norm(h, &format!("blocks.{layer}.ln1"))?;
            let att = self.attention(n1, layer, frames)?;
            h = self.g.add(h, att)?;
            let n2 = self.norm(h, &format!("blocks.{layer}.ln2"))?;
            let up = self.dense(n2, &DenseLayerId { layer, site: Site::FfnIn })?;
            let act = self.g.gelu(up)?;
            let down = self.dense(act, &DenseLayerId { layer, site: Site::FfnOut })?;
            h = self.g.add(h, down)?;
        }
        let out = self.norm(h, "final_ln")?;
        self.dense(out, &DenseLayerId::global(Site::OutputProj))
    }
}

pub(crate) fn add_field_feed(feed: &mut Feed, inputs: &FieldInputs, tag: &str) {
    feed.insert(format!("x_t{tag}"), inputs.x_t.clone());
    feed.insert(format!("context{tag}"), inputs.context.clone());
}

impl Model {
    /// The per-frame vector field, `T × D`.
    pub fn vector_field(&self, adapters: Option<&AdapterSet>, inputs: &FieldInputs) -> Result<Matrix> {
        let mut b = GraphBuilder::new(&self.config, &self.params, adapters);
        let out = b.vector_field(inputs, "")?;
        let graph = b.g;
        let mut feed = Feed::new();
        add_field_feed(&mut feed, inputs, "");
        let stores: Vec<&Params> = match adapters {
            Some(a) => vec![&self.params, &a.params],
            None => vec![&self.params],
        };
        let eval = forward_eval(&graph, &stores, &feed)?;
        Ok(eval.value(out).clone())
    }

    pub fn dense_layers(&self) -> Vec<DenseLayerId> {
        self.config.dense_layers()
    }

    pub fn count_params(&self, adapters: Option<&AdapterSet>) -> ParamCount {
        let base = self.params.values().map(Matrix::len).sum();
        let adapter = adapters.map_or(0, |a| a.params.values().map(Matrix::len).sum());
        ParamCount::new(base, adapter)
    }

    /// SHA-256 over the exact bytes of every parameter.
    pub fn weight_hash(&self) -> String {
        params_hash(&self.params)
    }
}

pub fn params_hash(params: &Params) -> String {
    let mut bytes = Vec::new();
    for (name, m) in params {
        bytes.extend(name.as_bytes());
        for v in m.data() {
            bytes.extend(v.to_le_bytes());
        }
    }
    crate::archive::hash_bytes(&bytes)
}
