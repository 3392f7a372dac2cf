//! Synthetic speakers and utterances.
//!
//! A frame is `envelope(speaker) + prototype(token) + jitter·g₁ + noise·g₂`
//! where `g₁` is drawn once per utterance and `g₂` once per frame. Speaker
//! and content are additive and separable, which is what makes the
//! median-based speaker embedding an exact oracle on clean renders.

pub mod audio;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::align::Alignment;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Frames per second of the synthetic features (16 kHz audio, hop 256).
pub const FRAME_RATE: f64 = 16_000.0 / 256.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(frames: Matrix) -> Self {
        Self {
            frames,
            frame_rate: FRAME_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.frames.rows() {
            let row: Vec<String> = self.frames.row(i).iter().map(|v| format!("{v:.9e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Invalid(format!("bad feature value `{v}`"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(Matrix::from_rows(&rows)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Studio,
    Wild,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Studio => "studio",
            Regime::Wild => "wild",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "studio" => Ok(Regime::Studio),
            "wild" => Ok(Regime::Wild),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSpec {
    pub seed: u64,
    pub regime: Regime,
    pub bumps: Vec<Bump>,
    pub jitter_std: f64,
    pub noise_std: f64,
}

impl SpeakerSpec {
    /// Spectral envelope over `dim` bins: a sum of Gaussian bumps.
    pub fn envelope(&self, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|k| {
                self.bumps
                    .iter()
                    .map(|b| {
                        let z = (k as f64 - b.center) / b.width;
                        b.height * (-0.5 * z * z).exp()
                    })
                    .sum()
            })
            .collect()
    }
}

/// Draws a speaker. Studio voices have 2–3 modest bumps and at most 0.05
/// noise; wild voices have 4–8 stronger bumps and noise in [0.1, 0.3].
pub fn make_speaker(seed: u64, regime: Regime, dim: usize) -> SpeakerSpec {
    let mut rng = seed::rng(seed::derive(seed, &format!("speaker/{regime}")));
    let (count, width, height, noise, jitter) = match regime {
        Regime::Studio => (2..=3, (1.0, 2.5), (0.5, 1.5), (0.0, 0.05), (0.0, 0.05)),
        Regime::Wild => (4..=8, (0.7, 2.0), (1.0, 2.5), (0.1, 0.3), (0.1, 0.3)),
    };
    let n = rng.random_range(count);
    let bumps = (0..n)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Bump {
                center: rng.random_range(0.0..dim as f64),
                width: rng.random_range(width.0..width.1),
                height: sign * rng.random_range(height.0..height.1),
            }
        })
        .collect();
    SpeakerSpec {
        seed,
        regime,
        bumps,
        jitter_std: rng.random_range(jitter.0..=jitter.1),
        noise_std: rng.random_range(noise.0..=noise.1),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenPrototype {
    pub pattern: Vec<f64>,
    pub duration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub prototypes: Vec<TokenPrototype>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl Vocabulary {
    /// Builds `size` sparse prototypes. Each pattern is `±amplitude/√2` on
    /// two bins and zero elsewhere, and no bin serves more than two tokens.
    /// Per bin, most frames of any varied text therefore carry no content,
    /// so the temporal median of a clean render is the speaker envelope.
    pub fn build(seed: u64, size: usize, dim: usize, amplitude: f64) -> Result<Self> {
        if size == 0 || dim < 2 || size > dim {
            return Err(Error::Config(format!("vocabulary size must be between 1 and {dim} for {dim} bins")));
        }
        let mut rng = seed::rng(seed::derive(seed, "vocabulary"));
        let level = amplitude / 2f64.sqrt();
        'restart: for _ in 0..1000 {
            let mut usage = vec![0usize; dim];
            let mut prototypes: Vec<TokenPrototype> = Vec::with_capacity(size);
            while prototypes.len() < size {
                let mut placed = false;
                for _ in 0..200 {
                    let a = rng.random_range(0..dim);
                    let b = rng.random_range(0..dim);
                    if a == b || usage[a] >= 2 || usage[b] >= 2 {
                        continue;
                    }
                    let mut pattern = vec![0.0; dim];
                    pattern[a] = if rng.random_bool(0.5) { level } else { -level };
                    pattern[b] = if rng.random_bool(0.5) { level } else { -level };
                    if prototypes.iter().any(|p| cosine(&p.pattern, &pattern) >= 0.5) {
                        continue;
                    }
                    usage[a] += 1;
                    usage[b] += 1;
                    prototypes.push(TokenPrototype {
                        pattern,
                        duration: rng.random_range(2..=5),
                    });
                    placed = true;
                    break;
                }
                if !placed {
                    continue 'restart;
                }
            }
            let vocab = Self { prototypes };
            vocab.validate()?;
            return Ok(vocab);
        }
        Err(Error::Config(format!("could not place {size} distinct prototypes in {dim} bins")))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.prototypes.iter().enumerate() {
            for b in &self.prototypes[i + 1..] {
                if cosine(&a.pattern, &b.pattern) >= 0.5 {
                    return Err(Error::Config("token prototypes are not distinct enough".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.pattern.len())
    }

    pub fn patterns(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self.prototypes.iter().map(|p| p.pattern.clone()).collect();
        Matrix::from_rows(&rows).expect("equal widths")
    }

    /// Random token string without immediate repeats.
    pub fn random_text<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let v = rng.random_range(0..self.len());
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
        out
    }

    /// Nominal durations perturbed by one frame either way.
    pub fn sample_durations<R: Rng + ?Sized>(&self, rng: &mut R, tokens: &[usize]) -> Alignment {
        let durations = tokens
            .iter()
            .map(|&v| (self.prototypes[v].duration as i64 + rng.random_range(-1..=1)).max(1) as usize)
            .collect();
        Alignment { durations }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSample {
    pub id: String,
    pub speaker_seed: u64,
    pub regime: Regime,
    pub features: FeatureSequence,
    pub tokens: Vec<usize>,
    pub alignment: Alignment,
}

impl PromptSample {
    pub fn token_frames(&self) -> Vec<usize> {
        self.alignment.expand(&self.tokens)
    }

    /// Header lines `id`, `speaker`, `regime`, `tokens`, `durations`, then
    /// `frames` followed by the feature CSV.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "id {}\nspeaker {}\nregime {}\ntokens {}\ndurations {}\nframes\n{}",
            self.id,
            self.speaker_seed,
            self.regime,
            join(&self.tokens),
            join(&self.alignment.durations),
            self.features.to_csv()
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (head, csv) = text
            .split_once("\nframes\n")
            .ok_or_else(|| Error::Invalid("prompt file has no `frames` section".into()))?;
        let mut fields = std::collections::BTreeMap::new();
        for line in head.lines() {
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            fields.insert(k.trim(), v.trim());
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Invalid(format!("prompt file lacks `{k}`")));
        let counts = |k: &str| -> Result<Vec<usize>> {
            field(k)?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Invalid(format!("bad {k} entry `{v}`"))))
                .collect()
        };
        let sample = Self {
            id: field("id")?.to_string(),
            speaker_seed: field("speaker")?.parse().map_err(|_| Error::Invalid("bad speaker seed".into()))?,
            regime: field("regime")?.parse()?,
            features: FeatureSequence::from_csv(csv)?,
            tokens: counts("tokens")?,
            alignment: Alignment::new(counts("durations")?)?,
        };
        if sample.tokens.len() != sample.alignment.durations.len()
            || sample.alignment.total_frames() != sample.features.len()
        {
            return Err(Error::Invalid(format!("prompt `{}`: tokens, durations and frames disagree", sample.id)));
        }
        Ok(sample)
    }
}

/// Renders one utterance of `tokens` with the given durations.
pub fn render(
    speaker: &SpeakerSpec,
    vocab: &Vocabulary,
    tokens: &[usize],
    durations: &Alignment,
    seed: u64,
) -> Result<PromptSample> {
    if tokens.len() != durations.durations.len() {
        return Err(Error::Invalid(format!(
            "{} tokens but {} durations",
            tokens.len(),
            durations.durations.len()
        )));
    }
    Alignment::new(durations.durations.clone())?;
    if let Some(bad) = tokens.iter().find(|&&v| v >= vocab.len()) {
        return Err(Error::Invalid(format!("token {bad} not in vocabulary")));
    }
    let dim = vocab.dim();
    let env = speaker.envelope(dim);
    let mut rng = seed::rng(seed);
    let shared: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let frame_tokens = durations.expand(tokens);
    let mut frames = Matrix::zeros(frame_tokens.len(), dim);
    for (t, &tok) in frame_tokens.iter().enumerate() {
        let proto = &vocab.prototypes[tok].pattern;
        let row = frames.row_mut(t);
        for k in 0..dim {
            let mut v = env[k] + proto[k];
            if speaker.jitter_std > 0.0 {
                v += speaker.jitter_std * shared[k];
            }
            if speaker.noise_std > 0.0 {
                v += speaker.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            row[k] = v;
        }
    }
    Ok(PromptSample {
        id: format!("{}-{seed:016x}", speaker.regime),
        speaker_seed: speaker.seed,
        regime: speaker.regime,
        features: FeatureSequence::new(frames),
        tokens: tokens.to_vec(),
        alignment: durations.clone(),
    })
}

/// A copy of the speaker with jitter and noise switched off.
pub fn noise_free(speaker: &SpeakerSpec) -> SpeakerSpec {
    SpeakerSpec {
        jitter_std: 0.0,
        noise_std: 0.0,
        ..speaker.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub amplitude: f64,
    pub text_len: (usize, usize),
    pub studio_speakers: usize,
    pub wild_speakers: usize,
    pub utterances_per_speaker: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            vocab_size: 12,
            amplitude: 2.5,
            text_len: (8, 12),
            studio_speakers: 16,
            wild_speakers: 20,
            utterances_per_speaker: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Speaker {
    pub spec: SpeakerSpec,
    pub utterances: Vec<PromptSample>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    /// Training speakers (studio regime).
    pub train: Vec<Speaker>,
    /// Held-out evaluation speakers (wild regime).
    pub eval: Vec<Speaker>,
}

/// Studio and wild speaker seeds live in disjoint streams.
pub fn speaker_seed(corpus_seed: u64, regime: Regime, index: usize) -> u64 {
    seed::derive_indexed(corpus_seed, &format!("speakers/{regime}"), index as u64)
}

impl Corpus {
    pub fn generate(config: &CorpusConfig, corpus_seed: u64) -> Result<Self> {
        let vocab = Vocabulary::build(corpus_seed, config.vocab_size, config.dim, config.amplitude)?;
        let mut corpus = Self {
            seed: corpus_seed,
            config: config.clone(),
            vocab,
            train: Vec::new(),
            eval: Vec::new(),
        };
        let mut rng = seed::rng(seed::derive(corpus_seed, "train-texts"));
        for (regime, count) in [(Regime::Studio, config.studio_speakers), (Regime::Wild, config.wild_speakers)] {
            let speakers = (0..count)
                .map(|i| {
                    let spec = make_speaker(speaker_seed(corpus_seed, regime, i), regime, config.dim);
                    let utterances = (0..config.utterances_per_speaker)
                        .map(|u| corpus.render_random(&spec, &mut rng, i, u))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Speaker { spec, utterances })
                })
                .collect::<Result<Vec<_>>>()?;
            match regime {
                Regime::Studio => corpus.train = speakers,
                Regime::Wild => corpus.eval = speakers,
            }
        }
        Ok(corpus)
    }

    /// Speakers never seen in training. Wild speakers are the held-out set;
    /// studio speakers are drawn fresh past the training indices.
    pub fn evaluation_speakers(&self, regime: Regime, count: usize) -> Result<Vec<Speaker>> {
        match regime {
            Regime::Wild => {
                if count > self.eval.len() {
                    return Err(Error::Config(format!(
                        "{count} wild speakers requested, corpus holds {}",
                        self.eval.len()
                    )));
                }
                Ok(self.eval[..count].to_vec())
            }
            Regime::Studio => {
                let mut rng = seed::rng(seed::derive(self.seed, "studio-eval-texts"));
                (0..count)
                    .map(|i| {
                        let index = self.config.studio_speakers + i;
                        let spec = make_speaker(speaker_seed(self.seed, regime, index), regime, self.config.dim);
                        let utterances = (0..self.config.utterances_per_speaker)
                            .map(|u| self.render_random(&spec, &mut rng, index, u))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Speaker { spec, utterances })
                    })
                    .collect()
            }
        }
    }

    fn render_random(&self, spec: &SpeakerSpec, rng: &mut rand_chacha::ChaCha8Rng, index: usize, u: usize) -> Result<PromptSample> {
        let len = rng.random_range(self.config.text_len.0..=self.config.text_len.1);
        let tokens = self.vocab.random_text(rng, len);
        let durations = self.vocab.sample_durations(rng, &tokens);
        let mut s = render(spec, &self.vocab, &tokens, &durations, seed::derive_indexed(spec.seed, "utterance", u as u64))?;
        s.id = format!("{}{index:03}-{u:03}", spec.regime);
        Ok(s)
    }

    pub fn train_utterances(&self) -> Vec<&PromptSample> {
        self.train.iter().flat_map(|s| &s.utterances).collect()
    }

    /// Held-out synthesis texts, disjoint from every corpus text.
    pub fn held_out_texts(&self, count: usize, seed: u64) -> Vec<Vec<usize>> {
        let seen: std::collections::BTreeSet<&[usize]> = self
            .train
            .iter()
            .chain(&self.eval)
            .flat_map(|s| s.utterances.iter().map(|u| u.tokens.as_slice()))
            .collect();
        let mut rng = seed::rng(seed::derive(seed, "held-out-texts"));
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let len = rng.random_range(self.config.text_len.0..=self.config.text_len.1);
            let text = self.vocab.random_text(&mut rng, len);
            if !seen.contains(text.as_slice()) {
                out.push(text);
            }
        }
        out
    }

    /// One manifest line per utterance:
    /// `id speaker_seed regime tokens durations path`.
    pub fn manifest(&self, path_for: impl Fn(&PromptSample) -> String) -> String {
        let mut out = String::new();
        for s in self.train.iter().chain(&self.eval) {
            for u in &s.utterances {
                let toks: Vec<String> = u.tokens.iter().map(|t| t.to_string()).collect();
                let durs: Vec<String> = u.alignment.durations.iter().map(|d| d.to_string()).collect();
                out.push_str(&format!(
                    "{} {} {} {} {} {}\n",
                    u.id,
                    u.speaker_seed,
                    u.regime,
                    toks.join("-"),
                    durs.join("-"),
                    path_for(u)
                ));
            }
        }
        out
    }
}
