//! Flat `key = value` run configuration with dotted namespaces. Every key
//! is checked against [`SCHEMA`]; absent keys keep their defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::archive::hash_bytes;
use crate::corpus::{CorpusConfig, Regime};
use crate::error::{Error, Result};
use crate::evalkit::{Cell, GridSpec, Mode, QualityPlugin, SweepConfig};
use crate::lora::{LoraConfig, TargetFilter};
use crate::lorp::LorpConfig;
use crate::system::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Count,
    Real,
    Text,
    /// Comma-separated list.
    List,
}

/// Every accepted key, its value kind and a one-line description.
pub const SCHEMA: &[(&str, Kind, &str)] = &[
    ("corpus.dim", Kind::Count, "feature bins per frame"),
    ("corpus.vocab_size", Kind::Count, "number of token prototypes"),
    ("corpus.amplitude", Kind::Real, "prototype norm"),
    ("corpus.text_len_min", Kind::Count, "shortest utterance in tokens"),
    ("corpus.text_len_max", Kind::Count, "longest utterance in tokens"),
    ("corpus.studio_speakers", Kind::Count, "training speakers"),
    ("corpus.wild_speakers", Kind::Count, "held-out speakers"),
    ("corpus.utterances", Kind::Count, "utterances per speaker"),
    ("net.model_dim", Kind::Count, "transformer width"),
    ("net.layers", Kind::Count, "transformer blocks"),
    ("net.heads", Kind::Count, "attention heads"),
    ("net.ffn_dim", Kind::Count, "feed-forward width"),
    ("net.time_dim", Kind::Count, "sinusoidal time embedding width"),
    ("net.rope_base", Kind::Real, "rotary frequency base"),
    ("cfm.sigma_min", Kind::Real, "path width at t = 1"),
    ("cfm.mask_min", Kind::Real, "smallest masked share"),
    ("cfm.mask_max", Kind::Real, "largest masked share"),
    ("cfm.batch", Kind::Count, "utterances per base-training step"),
    ("cfm.steps", Kind::Count, "base-training steps"),
    ("cfm.lr", Kind::Real, "base-training learning rate"),
    ("duration.embed_dim", Kind::Count, "duration predictor token embedding width"),
    ("duration.hidden", Kind::Count, "duration predictor hidden width"),
    ("duration.steps", Kind::Count, "duration predictor training steps"),
    ("duration.batch", Kind::Count, "duration predictor batch"),
    ("duration.lr", Kind::Real, "duration predictor learning rate"),
    ("frames.hidden", Kind::Count, "frame classifier hidden width"),
    ("frames.steps", Kind::Count, "frame classifier training steps"),
    ("frames.batch", Kind::Count, "frame classifier batch"),
    ("frames.lr", Kind::Real, "frame classifier learning rate"),
    ("lora.r", Kind::Count, "adapter rank"),
    ("lora.alpha", Kind::Real, "adapter scale numerator"),
    ("lora.init_std", Kind::Real, "std of A at injection"),
    ("lora.b_init_std", Kind::Real, "std of B at injection, 0 for a no-op start"),
    ("lora.target", Kind::Text, "all, none, or sites joined by + (q+v)"),
    ("lorp.steps", Kind::Count, "adaptation steps K"),
    ("lorp.lr", Kind::Real, "adaptation learning rate"),
    ("lorp.ode_steps", Kind::Count, "Euler steps at synthesis"),
    ("sweep.speakers", Kind::Count, "held-out speakers per cell"),
    ("sweep.texts", Kind::Count, "held-out texts per speaker"),
    ("sweep.plugin", Kind::Text, "quality scorer command line"),
    ("grid.preset", Kind::Text, "fig1, fig2, table1 or table2"),
    ("grid.mode", Kind::List, "baseline, lorp, multi-sample"),
    ("grid.samples", Kind::List, "prompt samples per speaker"),
    ("grid.steps", Kind::List, "adaptation steps"),
    ("grid.rank", Kind::List, "adapter ranks, alpha = rank"),
    ("grid.ode_steps", Kind::List, "Euler steps"),
    ("grid.regime", Kind::List, "studio, wild"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    /// Parses and schema-checks. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        let cfg = Self { entries };
        cfg.check_schema()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    fn check_schema(&self) -> Result<()> {
        for (k, v) in &self.entries {
            let kind = SCHEMA
                .iter()
                .find(|(name, _, _)| name == k)
                .map(|&(_, kind, _)| kind)
                .ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
            let ok = match kind {
                Kind::Count => v.parse::<usize>().is_ok(),
                Kind::Real => v.parse::<f64>().is_ok_and(f64::is_finite),
                Kind::Text | Kind::List => !v.is_empty(),
            };
            if !ok {
                return Err(Error::Config(format!("`{k}` has an invalid value `{v}`")));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.entries.insert(key.to_string(), value.to_string());
        self.check_schema()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("`{key}` has an invalid value `{v}`"))))
            .transpose()
    }

    fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.entries
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("`{key}` has an invalid item `{s}`"))))
                    .collect()
            })
            .transpose()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hash_bytes(self.to_text().as_bytes())
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        let mut c = CorpusConfig::default();
        self.apply("corpus.dim", &mut c.dim)?;
        self.apply("corpus.vocab_size", &mut c.vocab_size)?;
        self.apply("corpus.amplitude", &mut c.amplitude)?;
        self.apply("corpus.text_len_min", &mut c.text_len.0)?;
        self.apply("corpus.text_len_max", &mut c.text_len.1)?;
        self.apply("corpus.studio_speakers", &mut c.studio_speakers)?;
        self.apply("corpus.wild_speakers", &mut c.wild_speakers)?;
        self.apply("corpus.utterances", &mut c.utterances_per_speaker)?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        self.apply("net.model_dim", &mut c.net.model_dim)?;
        self.apply("net.layers", &mut c.net.layers)?;
        self.apply("net.heads", &mut c.net.heads)?;
        self.apply("net.ffn_dim", &mut c.net.ffn_dim)?;
        self.apply("net.time_dim", &mut c.net.time_dim)?;
        self.apply("net.rope_base", &mut c.net.rope_base)?;
        self.apply("cfm.sigma_min", &mut c.cfm.sigma_min)?;
        self.apply("cfm.mask_min", &mut c.cfm.mask_fraction.0)?;
        self.apply("cfm.mask_max", &mut c.cfm.mask_fraction.1)?;
        self.apply("cfm.batch", &mut c.cfm.batch)?;
        self.apply("cfm.steps", &mut c.cfm.steps)?;
        self.apply("cfm.lr", &mut c.cfm.lr)?;
        self.apply("duration.embed_dim", &mut c.duration.embed_dim)?;
        self.apply("duration.hidden", &mut c.duration.hidden)?;
        self.apply("duration.steps", &mut c.duration.steps)?;
        self.apply("duration.batch", &mut c.duration.batch)?;
        self.apply("duration.lr", &mut c.duration.lr)?;
        self.apply("frames.hidden", &mut c.frames.hidden)?;
        self.apply("frames.steps", &mut c.frames.steps)?;
        self.apply("frames.batch", &mut c.frames.batch)?;
        self.apply("frames.lr", &mut c.frames.lr)?;
        c.cfm.validate()?;
        Ok(c)
    }

    pub fn lora(&self) -> Result<LoraConfig> {
        let mut c = LoraConfig::default();
        self.apply("lora.r", &mut c.rank)?;
        c.alpha = c.rank as f64;
        self.apply("lora.alpha", &mut c.alpha)?;
        self.apply("lora.init_std", &mut c.init_std)?;
        self.apply("lora.b_init_std", &mut c.b_init_std)?;
        if let Some(t) = self.entries.get("lora.target") {
            c.target = t.parse::<TargetFilter>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn lorp(&self) -> Result<LorpConfig> {
        let mut c = LorpConfig {
            lora: self.lora()?,
            ..Default::default()
        };
        self.apply("lorp.steps", &mut c.steps)?;
        self.apply("lorp.lr", &mut c.lr)?;
        self.apply("lorp.ode_steps", &mut c.ode_steps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn sweep(&self, seed: u64, jobs: usize) -> Result<SweepConfig> {
        let mut c = SweepConfig {
            seed,
            jobs,
            lorp: self.lorp()?,
            ..Default::default()
        };
        self.apply("sweep.speakers", &mut c.speakers)?;
        self.apply("sweep.texts", &mut c.texts_per_speaker)?;
        if let Some(line) = self.entries.get("sweep.plugin") {
            c.plugin = QualityPlugin::from_command_line(line);
        }
        c.validate()?;
        Ok(c)
    }

    /// A preset, or the cartesian product of the `grid.*` axes (defaults:
    /// lorp, 1 sample, `lorp.steps`, `lora.r`, `lorp.ode_steps`, wild).
    pub fn grid(&self) -> Result<GridSpec> {
        let axes = ["grid.mode", "grid.samples", "grid.steps", "grid.rank", "grid.ode_steps", "grid.regime"];
        if let Some(name) = self.entries.get("grid.preset") {
            if let Some(k) = axes.iter().find(|k| self.entries.contains_key(**k)) {
                return Err(Error::Config(format!("`{k}` cannot be combined with grid.preset")));
            }
            return GridSpec::preset(name);
        }
        let lorp = self.lorp()?;
        let modes = self.list("grid.mode")?.unwrap_or(vec![Mode::Lorp]);
        let samples = self.list("grid.samples")?.unwrap_or(vec![1]);
        let steps = self.list("grid.steps")?.unwrap_or(vec![lorp.steps]);
        let ranks = self.list("grid.rank")?.unwrap_or(vec![lorp.lora.rank]);
        let odes = self.list("grid.ode_steps")?.unwrap_or(vec![lorp.ode_steps]);
        let regimes = self.list::<Regime>("grid.regime")?.unwrap_or(vec![Regime::Wild]);
        let mut cells = Vec::new();
        for &regime in &regimes {
            for &mode in &modes {
                for &ode in &odes {
                    if mode == Mode::Baseline {
                        cells.push(Cell::baseline(ode, regime));
                        continue;
                    }
                    for &rank in &ranks {
                        for &k in &steps {
                            let sample_axis = if mode == Mode::Lorp { samples.clone() } else { vec![0] };
                            for &s in &sample_axis {
                                let mut cell = match mode {
                                    Mode::Lorp => Cell::lorp(s, k, regime),
                                    _ => Cell::multi_sample(k, regime),
                                }
                                .with_rank(rank, lorp.lora.target.clone());
                                cell.ode_steps = ode;
                                cells.push(cell);
                            }
                        }
                    }
                }
            }
        }
        Ok(GridSpec::new("custom", cells))
    }
}

/// Markdown table of the schema.
pub fn schema_doc() -> String {
    let mut out = String::from("| key | kind | meaning |\n|---|---|---|\n");
    for (k, kind, what) in SCHEMA {
        let kind = match kind {
            Kind::Count => "integer",
            Kind::Real => "real",
            Kind::Text => "text",
            Kind::List => "list",
        };
        out.push_str(&format!("| `{k}` | {kind} | {what} |\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let kv = KvConfig::parse("# run\ncorpus.dim = 8\n\nlora.r=4 # small\ncfm.lr = 1e-4\n").unwrap();
        assert_eq!(kv.corpus().unwrap().dim, 8);
        let lora = kv.lora().unwrap();
        assert_eq!((lora.rank, lora.alpha), (4, 4.0));
        assert_eq!(kv.train().unwrap().cfm.lr, 1e-4);
        assert_eq!(KvConfig::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn schema_violations() {
        for text in ["corpus.dims = 8", "corpus.dim = -1", "cfm.lr = fast", "lora.r", "lora.r = 4\nlora.r = 8", "lora.alpha = inf"] {
            assert!(matches!(KvConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(KvConfig::parse("lora.target = qq").unwrap().lora().is_err());
        assert!(KvConfig::parse("grid.preset = fig1\ngrid.rank = 4").unwrap().grid().is_err());
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(KvConfig::load(Path::new("/nonexistent/run.cfg")), Err(Error::Io { .. })));
    }

    #[test]
    fn custom_grid_product() {
        let kv = KvConfig::parse("grid.mode = baseline, lorp\ngrid.samples = 1,2\ngrid.steps = 10,100\n").unwrap();
        let g = kv.grid().unwrap();
        assert_eq!(g.cells.len(), 5);
        g.validate().unwrap();
        assert_eq!(KvConfig::default().grid().unwrap().cells, vec![Cell::lorp(1, 100, Regime::Wild)]);
        assert_eq!(KvConfig::parse("grid.preset = table1").unwrap().grid().unwrap(), GridSpec::table1());
    }

    #[test]
    fn hash_tracks_content() {
        let a = KvConfig::parse("lora.r = 4").unwrap();
        let b = KvConfig::parse("lora.r=4\n").unwrap();
        let c = KvConfig::parse("lora.r = 8").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn schema_keys_unique() {
        let mut keys: Vec<&str> = SCHEMA.iter().map(|s| s.0).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), SCHEMA.len());
        assert!(schema_doc().contains("`lora.r`"));
    }
}
