//! The trained pipeline as one unit: vector-field model, duration
//! predictor and frame classifier, plus the vocabulary they were trained on.

use std::collections::BTreeMap;

use crate::align::{
    train_duration_predictor, train_frame_classifier, DurationConfig, DurationExample, DurationPredictor, FrameClassifier,
    FrameClassifierConfig,
};
use crate::archive::{quantize, Archive};
use crate::cfm::{train_base, CfmConfig};
use crate::corpus::{Corpus, TokenPrototype, Vocabulary};
use crate::error::{Error, Result};
use crate::net::{build_model, Model, NetConfig};
use crate::seed;
use crate::tensor::Matrix;

pub const FORMAT_VERSION: &str = crate::archive::MAGIC;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub cfm: CfmConfig,
    pub duration: DurationConfig,
    pub frames: FrameClassifierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            cfm: CfmConfig::default(),
            duration: DurationConfig::default(),
            frames: FrameClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedSystem {
    pub vocab: Vocabulary,
    pub model: Model,
    pub durations: DurationPredictor,
    pub frames: FrameClassifier,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingCurves {
    pub cfm: Vec<f64>,
    pub duration: Vec<f64>,
    pub frames: Vec<f64>,
}

/// Trains all three networks on the corpus's training speakers. Each
/// utterance's duration context is the next utterance of the same speaker.
pub fn train_system(corpus: &Corpus, config: &TrainConfig, seed: u64) -> Result<(TrainedSystem, TrainingCurves)> {
    let mut net = config.net.clone();
    net.feature_dim = corpus.config.dim;
    net.token_vocab = corpus.vocab.len();
    let data = corpus.train_utterances();
    if data.is_empty() {
        return Err(Error::Invalid("corpus has no training utterances".into()));
    }

    let mut examples = Vec::new();
    for spk in &corpus.train {
        let n = spk.utterances.len();
        for (i, u) in spk.utterances.iter().enumerate() {
            let p = &spk.utterances[(i + 1) % n];
            examples.push(DurationExample {
                tokens: &u.tokens,
                durations: &u.alignment.durations,
                prompt_tokens: &p.tokens,
                prompt_durations: &p.alignment.durations,
            });
        }
    }
    let (durations, duration_curve) =
        train_duration_predictor(&examples, corpus.vocab.len(), &config.duration, seed::derive(seed, "train/duration"))?;

    let pairs: Vec<(&Matrix, &[usize])> = data.iter().map(|u| (&u.features.frames, u.tokens.as_slice())).collect();
    let (frames, frame_curve) =
        train_frame_classifier(&pairs, corpus.vocab.len(), &config.frames, seed::derive(seed, "train/frames"))?;

    let init = build_model(&net, seed::derive(seed, "train/init"))?;
    let outcome = train_base(init, &data, &config.cfm, seed::derive(seed, "train/cfm"))?;

    let system = TrainedSystem {
        vocab: corpus.vocab.clone(),
        model: outcome.model,
        durations,
        frames,
    };
    Ok((
        system,
        TrainingCurves {
            cfm: outcome.curve,
            duration: duration_curve,
            frames: frame_curve,
        },
    ))
}

impl TrainedSystem {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.meta.extend(self.model.config.to_kv("net."));
        a.meta.insert("vocab.durations".into(), join(self.vocab.prototypes.iter().map(|p| p.duration)));
        a.meta.insert("duration.vocab".into(), self.durations.vocab_size.to_string());
        a.meta.insert("frames.vocab".into(), self.frames.vocab_size.to_string());
        a.insert_all("model.", &self.model.params);
        a.insert_all("", &self.durations.params);
        a.insert_all("", &self.frames.params);
        a.tensors.insert("vocab.patterns".into(), self.vocab.patterns());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let net = NetConfig::from_kv(&a.meta, "net.")?;
        let patterns = a.tensors.get("vocab.patterns").ok_or_else(|| Error::Missing {
            kind: "tensor",
            name: "vocab.patterns".into(),
        })?;
        let durs = meta(a, "vocab.durations")?;
        let durs: Vec<usize> = durs
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad vocabulary duration `{s}`"))))
            .collect::<Result<_>>()?;
        if durs.len() != patterns.rows() {
            return Err(Error::Config("vocabulary durations do not match patterns".into()));
        }
        let vocab = Vocabulary {
            prototypes: (0..patterns.rows())
                .map(|i| TokenPrototype {
                    pattern: patterns.row(i).to_vec(),
                    duration: durs[i],
                })
                .collect(),
        };
        let count = |key: &str| -> Result<usize> {
            meta(a, key)?.parse().map_err(|_| Error::Config(format!("{key} is not a count")))
        };
        let model = Model {
            config: net.clone(),
            params: a.extract("model."),
        };
        let expected: BTreeMap<String, (usize, usize)> = net.param_shapes().into_iter().collect();
        if model.params.len() != expected.len()
            || model.params.iter().any(|(k, m)| expected.get(k) != Some(&m.shape()))
        {
            return Err(Error::Config("model tensors do not match the stored configuration".into()));
        }
        Ok(Self {
            vocab,
            model,
            durations: DurationPredictor {
                vocab_size: count("duration.vocab")?,
                params: a.extract("").into_iter().filter(|(k, _)| k.starts_with("duration.")).collect(),
            },
            frames: FrameClassifier {
                vocab_size: count("frames.vocab")?,
                params: a.extract("").into_iter().filter(|(k, _)| k.starts_with("frames.")).collect(),
            },
        })
    }

    /// Rounds every weight through `f32`, matching a save/load round trip.
    pub fn quantized(&self) -> Self {
        let q = |p: &crate::autodiff::Params| p.iter().map(|(k, v)| (k.clone(), quantize(v))).collect();
        let mut out = self.clone();
        out.model.params = q(&self.model.params);
        out.durations.params = q(&self.durations.params);
        out.frames.params = q(&self.frames.params);
        out.vocab.prototypes.iter_mut().for_each(|p| {
            p.pattern.iter_mut().for_each(|v| *v = *v as f32 as f64);
        });
        out
    }
}

fn meta<'a>(a: &'a Archive, key: &str) -> Result<&'a str> {
    a.meta.get(key).map(String::as_str).ok_or_else(|| Error::Missing {
        kind: "metadata",
        name: key.to_string(),
    })
}

fn join(items: impl Iterator<Item = usize>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
