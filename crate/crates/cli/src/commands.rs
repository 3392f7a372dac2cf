use std::fs;
use std::path::{Path, PathBuf};

use lorp::archive::{hash_bytes, Archive};
use lorp::cfm::loss_curve_csv;
use lorp::config::KvConfig;
use lorp::corpus::{Corpus, PromptSample};
use lorp::evalkit::{features_to_wav, run_sweep, EvalContext, EvalReport};
use lorp::lora::AdapterSet;
use lorp::lorp::{adapt, synthesize};
use lorp::system::{train_system, TrainedSystem};
use lorp::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

const CORPUS_FILE: &str = "corpus.json";

/// What `gen-corpus` leaves behind; the corpus is regenerated from it and
/// checked against the stored hash.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    seed: u64,
    config: String,
    content_hash: String,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>, m: &mut RunManifest) -> Result<KvConfig> {
    let cfg = match path {
        Some(p) => {
            m.input(p)?;
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    m.config(&cfg);
    Ok(cfg)
}

fn corpus_hash(corpus: &Corpus) -> String {
    let mut text = String::new();
    for s in corpus.train.iter().chain(&corpus.eval) {
        for u in &s.utterances {
            text.push_str(&u.to_text());
        }
    }
    hash_bytes(text.as_bytes())
}

fn load_corpus(dir: &Path, m: &mut RunManifest) -> Result<Corpus> {
    let path = dir.join(CORPUS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    m.input(&path)?;
    let record: CorpusRecord =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let corpus = Corpus::generate(&KvConfig::parse(&record.config)?.corpus()?, record.seed)?;
    let found = corpus_hash(&corpus);
    if found != record.content_hash {
        return Err(Error::HashMismatch {
            what: format!("corpus {}", dir.display()),
            expected: record.content_hash,
            found,
        });
    }
    Ok(corpus)
}

fn load_checkpoint(path: &Path, m: &mut RunManifest) -> Result<(TrainedSystem, String)> {
    let archive = Archive::load(path)?;
    m.input(path)?;
    Ok((TrainedSystem::from_archive(&archive)?, archive.content_hash()))
}

fn load_prompt(path: &Path, m: &mut RunManifest) -> Result<PromptSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    m.input(path)?;
    PromptSample::from_text(&text)
}

fn check_prompt(sys: &TrainedSystem, prompt: &PromptSample) -> Result<()> {
    if prompt.features.dim() != sys.model.config.feature_dim {
        return Err(Error::Invalid(format!(
            "prompt `{}` has {} bins, the checkpoint expects {}",
            prompt.id,
            prompt.features.dim(),
            sys.model.config.feature_dim
        )));
    }
    check_tokens(sys, &prompt.tokens)
}

fn check_tokens(sys: &TrainedSystem, tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= sys.vocab.len()) {
        Some(t) => Err(Error::Invalid(format!("token {t} is outside the vocabulary of {}", sys.vocab.len()))),
        None => Ok(()),
    }
}

pub fn parse_text(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Invalid(format!("`{s}` is not a token id"))))
        .collect()
}

pub fn gen_corpus(config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let mut m = RunManifest::start("gen-corpus", seed);
    let cfg = load_config(config, &mut m)?;
    let corpus_seed = m.sub_seed("corpus");
    let corpus = Corpus::generate(&cfg.corpus()?, corpus_seed)?;
    for s in corpus.train.iter().chain(&corpus.eval) {
        for u in &s.utterances {
            write(&out.join("utterances").join(format!("{}.txt", u.id)), u.to_text())?;
        }
    }
    let index = out.join("index.txt");
    write(&index, corpus.manifest(|u| format!("utterances/{}.txt", u.id)))?;
    let record = CorpusRecord {
        seed: corpus_seed,
        config: cfg.to_text(),
        content_hash: corpus_hash(&corpus),
    };
    let path = out.join(CORPUS_FILE);
    write(&path, serde_json::to_string_pretty(&record).expect("plain record"))?;
    m.output(&path)?;
    m.output(&index)?;
    m.finish(&out.join("gen-corpus"))?;
    println!(
        "{} training and {} held-out speakers, {} utterances each, in {}",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.config.utterances_per_speaker,
        out.display()
    );
    Ok(())
}

pub fn train(config: Option<&Path>, corpus_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    let mut m = RunManifest::start("train", seed);
    let cfg = load_config(config, &mut m)?;
    let train_cfg = cfg.train()?;
    let corpus = load_corpus(corpus_dir, &mut m)?;
    let (system, curves) = train_system(&corpus, &train_cfg, m.sub_seed("train"))?;
    let mut archive = system.to_archive();
    archive.meta.insert("corpus.hash".into(), corpus_hash(&corpus));
    archive.meta.insert("config.hash".into(), cfg.hash());
    archive.save(out)?;
    let curve = sibling(out, ".cfm-loss.csv");
    write(&curve, loss_curve_csv(&curves.cfm))?;
    m.output(out)?;
    m.output(&curve)?;
    m.finish(out)?;
    let last = |c: &[f64]| c.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps: flow loss {:.4}, duration loss {:.4}, frame loss {:.4}",
        curves.cfm.len(),
        last(&curves.cfm),
        last(&curves.duration),
        last(&curves.frames)
    );
    Ok(())
}

pub fn adapt_cmd(config: Option<&Path>, checkpoint: &Path, prompts: &[PathBuf], out: &Path, seed: u64) -> Result<()> {
    let mut m = RunManifest::start("adapt", seed);
    let cfg = load_config(config, &mut m)?;
    let lorp_cfg = cfg.lorp()?;
    let (sys, base_hash) = load_checkpoint(checkpoint, &mut m)?;
    let samples = prompts.iter().map(|p| load_prompt(p, &mut m)).collect::<Result<Vec<_>>>()?;
    for p in &samples {
        check_prompt(&sys, p)?;
    }
    let refs: Vec<&PromptSample> = samples.iter().collect();
    let res = adapt(&sys.model, &refs, &lorp_cfg, m.sub_seed("adapt"))?;
    let mut archive = res.adapters.to_archive();
    archive.meta.insert("base.hash".into(), base_hash);
    archive.meta.extend(lorp_cfg.describe());
    archive.save(out)?;
    let curve = sibling(out, ".loss.csv");
    write(&curve, loss_curve_csv(&res.curve))?;
    m.output(out)?;
    m.output(&curve)?;
    m.finish(out)?;
    println!(
        "{} adapter parameters on {} layers after {} steps in {:.2?}",
        res.adapters.param_count(),
        res.adapters.len(),
        res.curve.len(),
        res.wall_time
    );
    Ok(())
}

pub struct SynthArgs<'a> {
    pub config: Option<&'a Path>,
    pub checkpoint: &'a Path,
    pub adapters: Option<&'a Path>,
    pub prompt: &'a Path,
    pub text: &'a str,
    pub ode_steps: Option<usize>,
    pub out: &'a Path,
    pub wav: Option<&'a Path>,
}

pub fn synth(a: &SynthArgs<'_>, seed: u64) -> Result<()> {
    let mut m = RunManifest::start("synth", seed);
    let cfg = load_config(a.config, &mut m)?;
    let ode_steps = match a.ode_steps {
        Some(n) => n,
        None => cfg.lorp()?.ode_steps,
    };
    let (sys, base_hash) = load_checkpoint(a.checkpoint, &mut m)?;
    let adapters = match a.adapters {
        Some(path) => {
            let archive = Archive::load(path)?;
            m.input(path)?;
            let recorded = archive.meta.get("base.hash").cloned().unwrap_or_default();
            if recorded != base_hash {
                return Err(Error::HashMismatch {
                    what: format!("adapter base checkpoint ({})", path.display()),
                    expected: recorded,
                    found: base_hash,
                });
            }
            Some(AdapterSet::from_archive(&archive, &sys.model.config)?)
        }
        None => None,
    };
    let prompt = load_prompt(a.prompt, &mut m)?;
    check_prompt(&sys, &prompt)?;
    let text = parse_text(a.text)?;
    check_tokens(&sys, &text)?;
    let synth_seed = m.sub_seed("synth");
    let s = synthesize(&sys.model, adapters.as_ref(), &sys.durations, &prompt, &text, ode_steps, synth_seed)?;
    write(a.out, s.features.to_csv())?;
    m.output(a.out)?;
    if let Some(wav) = a.wav {
        let bytes = features_to_wav(&s.features.frames, synth_seed)
            .ok_or_else(|| Error::Invalid("waveform rendering failed".into()))?;
        write(wav, bytes)?;
        m.output(wav)?;
    }
    m.finish(a.out)?;
    println!("{} frames for {} tokens, {} field evaluations", s.features.len(), text.len(), s.field_evals);
    Ok(())
}

fn write_report(report: &EvalReport, csv: &Path) -> Result<PathBuf> {
    write(csv, report.to_csv())?;
    let json = csv.with_extension("json");
    write(&json, report.to_json()?)?;
    Ok(json)
}

pub fn eval(config: Option<&Path>, checkpoint: &Path, corpus_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    let mut m = RunManifest::start("eval", seed);
    let cfg = load_config(config, &mut m)?;
    let grid = cfg.grid()?;
    let [cell] = grid.cells.as_slice() else {
        return Err(Error::Config(format!("eval scores one configuration, the grid has {} cells", grid.cells.len())));
    };
    let sweep_cfg = cfg.sweep(m.sub_seed("sweep"), 1)?;
    let (sys, _) = load_checkpoint(checkpoint, &mut m)?;
    let corpus = load_corpus(corpus_dir, &mut m)?;
    let ctx = EvalContext::new(&sys, &corpus, &sweep_cfg)?;
    let report = EvalReport {
        rows: vec![ctx.run_cell(cell)?],
    };
    let json = write_report(&report, out)?;
    m.output(out)?;
    m.output(&json)?;
    m.finish(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn sweep(config: Option<&Path>, checkpoint: &Path, corpus_dir: &Path, out: &Path, jobs: usize, seed: u64) -> Result<()> {
    let mut m = RunManifest::start("sweep", seed);
    let cfg = load_config(config, &mut m)?;
    let grid = cfg.grid()?;
    grid.validate()?;
    let sweep_cfg = cfg.sweep(m.sub_seed("sweep"), jobs)?;
    let (sys, _) = load_checkpoint(checkpoint, &mut m)?;
    let corpus = load_corpus(corpus_dir, &mut m)?;
    let ctx = EvalContext::new(&sys, &corpus, &sweep_cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = run_sweep(&ctx, &grid, Some(out))?;
    m.output(&out.join("report.csv"))?;
    m.output(&out.join("report.json"))?;
    m.finish(&out.join("sweep"))?;
    print!("{}", report.to_csv());
    Ok(())
}
