//! Low-rank adapters on dense layers: `y = Wx + b + (alpha/r)·B·A·x`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::archive::Archive;
use crate::autodiff::Params;
use crate::error::{Error, Result};
use crate::net::{DenseLayerId, Model, NetConfig, ParamCount, Site};
use crate::seed;
use crate::tensor::Matrix;

/// Which dense layers receive an adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetFilter {
    All,
    Nothing,
    Sites(BTreeSet<Site>),
}

impl TargetFilter {
    pub fn matches(&self, id: &DenseLayerId) -> bool {
        match self {
            TargetFilter::All => true,
            TargetFilter::Nothing => false,
            TargetFilter::Sites(sites) => sites.contains(&id.site),
        }
    }
}

impl fmt::Display for TargetFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetFilter::All => f.write_str("all"),
            TargetFilter::Nothing => f.write_str("none"),
            TargetFilter::Sites(sites) => {
                let names: Vec<&str> = sites.iter().map(|s| s.as_str()).collect();
                f.write_str(&names.join("+"))
            }
        }
    }
}

impl FromStr for TargetFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TargetFilter::All),
            "none" => Ok(TargetFilter::Nothing),
            _ => s
                .split('+')
                .map(str::parse)
                .collect::<Result<BTreeSet<Site>>>()
                .map(TargetFilter::Sites),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the `A` initialization.
    pub init_std: f64,
    /// Standard deviation of the `B` initialization; zero gives a no-op start.
    pub b_init_std: f64,
    pub target: TargetFilter,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            init_std: 0.02,
            b_init_std: 0.0,
            target: TargetFilter::All,
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("lora alpha must be positive, got {}", self.alpha)));
        }
        if !(self.init_std > 0.0) || !(self.b_init_std >= 0.0) {
            return Err(Error::Config("lora init std must be positive (B may be zero)".into()));
        }
        Ok(())
    }

    /// Checks the rank against every targeted layer of `net`.
    pub fn check_against(&self, net: &NetConfig) -> Result<Vec<DenseLayerId>> {
        self.validate()?;
        let targets: Vec<DenseLayerId> = net.dense_layers().into_iter().filter(|id| self.target.matches(id)).collect();
        for id in &targets {
            let (d_out, d_in) = net.dense_shape(id);
            let limit = d_out.min(d_in);
            if self.rank > limit {
                return Err(Error::RankTooLarge {
                    layer: id.name(),
                    rank: self.rank,
                    limit,
                });
            }
        }
        Ok(targets)
    }

    /// Adapter parameter count on `net`, without allocating anything.
    pub fn count_on(&self, net: &NetConfig) -> Result<usize> {
        let targets = self.check_against(net)?;
        Ok(targets
            .iter()
            .map(|id| {
                let (d_out, d_in) = net.dense_shape(id);
                self.rank * (d_in + d_out)
            })
            .sum())
    }
}

/// Analytic base/adapter counts for a configuration.
pub fn count_params_for(net: &NetConfig, lora: Option<&LoraConfig>) -> Result<ParamCount> {
    let adapter = match lora {
        Some(l) => l.count_on(net)?,
        None => 0,
    };
    Ok(ParamCount::new(net.base_param_count(), adapter))
}

pub fn adapter_param_name(id: &DenseLayerId, matrix: char) -> String {
    format!("lora.{}.{matrix}", id.name())
}

/// Adapters over one model. `A` is `r × d_in`, `B` is `d_out × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub config: LoraConfig,
    pub layers: Vec<DenseLayerId>,
    /// Stored under `lora.<layer>.A` and `lora.<layer>.B`.
    pub params: Params,
}

impl AdapterSet {
    pub fn empty(config: LoraConfig) -> Self {
        Self {
            config,
            layers: Vec::new(),
            params: Params::new(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_names(&self, id: &DenseLayerId) -> Option<(String, String)> {
        let a = adapter_param_name(id, 'A');
        self.params
            .contains_key(&a)
            .then(|| (a, adapter_param_name(id, 'B')))
    }

    pub fn a(&self, id: &DenseLayerId) -> Option<&Matrix> {
        self.params.get(&adapter_param_name(id, 'A'))
    }

    pub fn b(&self, id: &DenseLayerId) -> Option<&Matrix> {
        self.params.get(&adapter_param_name(id, 'B'))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Fresh `A ~ N(0, init_std)`, `B ~ N(0, b_init_std)` (zero by default).
    pub fn reset(&mut self, seed: u64) {
        for id in &self.layers {
            let a_name = adapter_param_name(id, 'A');
            let b_name = adapter_param_name(id, 'B');
            let (ar, ac) = self.params[&a_name].shape();
            let (br, bc) = self.params[&b_name].shape();
            let mut rng = seed::rng(seed::derive(seed, &a_name));
            let a = Matrix::randn(ar, ac, self.config.init_std, &mut rng);
            let b = if self.config.b_init_std > 0.0 {
                Matrix::randn(br, bc, self.config.b_init_std, &mut rng)
            } else {
                Matrix::zeros(br, bc)
            };
            self.params.insert(a_name, a);
            self.params.insert(b_name, b);
        }
    }

    /// Manifest entries describing the adapter layout.
    pub fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("lora.rank".into(), self.config.rank.to_string()),
            ("lora.alpha".into(), self.config.alpha.to_string()),
            ("lora.init_std".into(), self.config.init_std.to_string()),
            ("lora.b_init_std".into(), self.config.b_init_std.to_string()),
            ("lora.target".into(), self.config.target.to_string()),
        ]
    }

    /// Rebuilds an adapter set from stored tensors, checking them against `net`.
    pub fn from_parts(config: LoraConfig, net: &NetConfig, params: Params) -> Result<Self> {
        let layers = config.check_against(net)?;
        for id in &layers {
            let (d_out, d_in) = net.dense_shape(id);
            for (m, shape) in [('A', (config.rank, d_in)), ('B', (d_out, config.rank))] {
                let name = adapter_param_name(id, m);
                match params.get(&name) {
                    Some(t) if t.shape() == shape => {}
                    Some(t) => {
                        return Err(Error::Invalid(format!(
                            "{name} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => {
                        return Err(Error::Missing {
                            kind: "adapter tensor",
                            name,
                        })
                    }
                }
            }
        }
        if params.len() != 2 * layers.len() {
            return Err(Error::Invalid("adapter archive has unexpected tensors".into()));
        }
        Ok(Self { config, layers, params })
    }

    /// Tensors under their `lora.` names plus the configuration as metadata.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.meta.extend(self.describe());
        a.insert_all("", &self.params);
        a
    }

    pub fn from_archive(a: &Archive, net: &NetConfig) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            a.meta.get(key).map(String::as_str).ok_or_else(|| Error::Missing {
                kind: "metadata",
                name: key.to_string(),
            })
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Config(format!("{key} is not a number")))
        };
        let config = LoraConfig {
            rank: get("lora.rank")?.parse().map_err(|_| Error::Config("lora.rank is not a count".into()))?,
            alpha: num("lora.alpha")?,
            init_std: num("lora.init_std")?,
            b_init_std: num("lora.b_init_std")?,
            target: get("lora.target")?.parse()?,
        };
        let params = a.extract("").into_iter().filter(|(k, _)| k.starts_with("lora.")).collect();
        Self::from_parts(config, net, params)
    }
}

/// One adapter per targeted dense layer of `model`; base weights untouched.
pub fn inject(model: &Model, config: &LoraConfig, seed: u64) -> Result<AdapterSet> {
    let layers = config.check_against(&model.config)?;
    let mut params = Params::new();
    for id in &layers {
        let (d_out, d_in) = model.config.dense_shape(id);
        params.insert(adapter_param_name(id, 'A'), Matrix::zeros(config.rank, d_in));
        params.insert(adapter_param_name(id, 'B'), Matrix::zeros(d_out, config.rank));
    }
    let mut set = AdapterSet {
        config: config.clone(),
        layers,
        params,
    };
    set.reset(seed);
    Ok(set)
}

fn check_adapter_shapes(w: &Matrix, a: &Matrix, b: &Matrix, rank: usize) -> Result<()> {
    let (d_out, d_in) = w.shape();
    if a.shape() != (rank, d_in) || b.shape() != (d_out, rank) {
        return Err(Error::Dim(format!(
            "adapter shapes A {:?}, B {:?} do not fit a {d_out}x{d_in} layer at rank {rank}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `W·x + bias + (alpha/r)·B·(A·x)` for one input vector.
pub fn adapted_forward(
    w: &Matrix,
    bias: Option<&[f64]>,
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    rank: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_adapter_shapes(w, a, b, rank)?;
    if x.len() != w.cols() || bias.is_some_and(|v| v.len() != w.rows()) {
        return Err(Error::Dim("input or bias length does not match the layer".into()));
    }
    let mut y = w.matvec(x);
    if let Some(bias) = bias {
        for (yi, bi) in y.iter_mut().zip(bias) {
            *yi += bi;
        }
    }
    let low = a.matvec(x);
    let up = b.matvec(&low);
    let s = alpha / rank as f64;
    for (yi, d) in y.iter_mut().zip(up) {
        *yi += s * d;
    }
    Ok(y)
}

/// `W + (alpha/r)·B·A`.
pub fn merge(w: &Matrix, a: &Matrix, b: &Matrix, alpha: f64, rank: usize) -> Result<Matrix> {
    check_adapter_shapes(w, a, b, rank)?;
    Ok(w.add(&b.matmul(a).scale(alpha / rank as f64)))
}

/// `W' − (alpha/r)·B·A`, the inverse of [`merge`] up to rounding.
pub fn unmerge(w: &Matrix, a: &Matrix, b: &Matrix, alpha: f64, rank: usize) -> Result<Matrix> {
    check_adapter_shapes(w, a, b, rank)?;
    Ok(w.sub(&b.matmul(a).scale(alpha / rank as f64)))
}

/// A copy of `model` with every adapter folded into its host weight.
pub fn merge_model(model: &Model, adapters: &AdapterSet) -> Result<Model> {
    let mut merged = model.clone();
    for id in &adapters.layers {
        let key = format!("{}.weight", id.name());
        let w = merged.params.get(&key).ok_or_else(|| Error::Missing {
            kind: "parameter",
            name: key.clone(),
        })?;
        let a = adapters.a(id).expect("layer listed");
        let b = adapters.b(id).expect("layer listed");
        let w2 = merge(w, a, b, adapters.config.alpha, adapters.config.rank)?;
        merged.params.insert(key, w2);
    }
    Ok(merged)
}
