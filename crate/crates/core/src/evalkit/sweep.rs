//! Grid runner: every cell adapts (or not) per held-out speaker, synthesizes
//! the same held-out texts, and scores them against the prompt.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::{cosine_sim, decode_tokens, error_rates, speaker_embed};
use super::quality::{quality_score, QualityPlugin};
use super::report::{EvalReport, EvalRow};
use crate::archive::hash_bytes;
use crate::corpus::{Corpus, PromptSample, Regime};
use crate::error::{Error, Result};
use crate::lora::TargetFilter;
use crate::lorp::{adapt, synthesize, LorpConfig};
use crate::net::Site;
use crate::seed;
use crate::system::TrainedSystem;

pub const SAMPLE_AXIS: [usize; 4] = [1, 2, 5, 10];
pub const STEP_AXIS: [usize; 5] = [10, 25, 50, 100, 1000];
pub const RANK_AXIS: [usize; 5] = [4, 8, 16, 32, 64];
pub const ODE_AXIS: [usize; 4] = [15, 30, 45, 60];
pub const FULL_DATA_STEPS: usize = 3200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    /// Adapters fitted to the first `samples` utterances of the speaker.
    Lorp,
    /// Adapters fitted to every utterance of the speaker.
    MultiSample,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Lorp => "lorp",
            Mode::MultiSample => "multi-sample",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "lorp" => Ok(Mode::Lorp),
            "multi-sample" => Ok(Mode::MultiSample),
            other => Err(Error::Config(format!("unknown sweep mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub samples: usize,
    pub steps: usize,
    /// Rank, with alpha set equal to it.
    pub rank: usize,
    pub ode_steps: usize,
    pub regime: Regime,
    pub target: TargetFilter,
}

impl Cell {
    pub fn baseline(ode_steps: usize, regime: Regime) -> Self {
        Self {
            mode: Mode::Baseline,
            samples: 0,
            steps: 0,
            rank: 16,
            ode_steps,
            regime,
            target: TargetFilter::All,
        }
    }

    pub fn lorp(samples: usize, steps: usize, regime: Regime) -> Self {
        Self {
            mode: Mode::Lorp,
            samples,
            steps,
            ..Self::baseline(30, regime)
        }
    }

    pub fn multi_sample(steps: usize, regime: Regime) -> Self {
        Self {
            mode: Mode::MultiSample,
            steps,
            ..Self::baseline(30, regime)
        }
    }

    pub fn with_rank(mut self, rank: usize, target: TargetFilter) -> Self {
        self.rank = rank;
        self.target = target;
        self
    }

    pub fn descriptor(&self) -> String {
        let mut out = self.mode.to_string();
        match self.mode {
            Mode::Baseline => {}
            Mode::Lorp => out.push_str(&format!(" samples={} steps={} r={}", self.samples, self.steps, self.rank)),
            Mode::MultiSample => out.push_str(&format!(" steps={} r={}", self.steps, self.rank)),
        }
        if self.mode != Mode::Baseline && self.target != TargetFilter::All {
            out.push_str(&format!(" target={}", self.target));
        }
        out.push_str(&format!(" ode={} regime={}", self.ode_steps, self.regime));
        out
    }

    /// File-name form of the descriptor.
    pub fn slug(&self) -> String {
        self.descriptor()
            .chars()
            .filter_map(|c| match c {
                ' ' => Some('_'),
                '=' => None,
                '+' => Some('-'),
                c => Some(c),
            })
            .collect()
    }

    /// Checks the cell against the grid axes the sweeps are defined over.
    pub fn validate_axes(&self) -> Result<()> {
        let bad = |what: &str, v: usize| Err(Error::Config(format!("{what} {v} is off the sweep grid in `{}`", self.descriptor())));
        if !ODE_AXIS.contains(&self.ode_steps) {
            return bad("ode steps", self.ode_steps);
        }
        match self.mode {
            Mode::Baseline => Ok(()),
            Mode::Lorp if !SAMPLE_AXIS.contains(&self.samples) => bad("sample count", self.samples),
            Mode::Lorp if !STEP_AXIS.contains(&self.steps) => bad("step count", self.steps),
            Mode::MultiSample if self.steps != FULL_DATA_STEPS => bad("step count", self.steps),
            _ if !RANK_AXIS.contains(&self.rank) => bad("rank", self.rank),
            _ => Ok(()),
        }
    }

    fn prompts<'a>(&self, utterances: &'a [PromptSample]) -> Result<Vec<&'a PromptSample>> {
        let n = match self.mode {
            Mode::Baseline => 0,
            Mode::Lorp => self.samples,
            Mode::MultiSample => utterances.len(),
        };
        if n > utterances.len() || utterances.is_empty() {
            return Err(Error::Config(format!(
                "`{}` needs {} utterances per speaker, corpus has {}",
                self.descriptor(),
                n.max(1),
                utterances.len()
            )));
        }
        Ok(utterances[..n].iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub name: String,
    pub cells: Vec<Cell>,
}

impl GridSpec {
    pub fn new(name: &str, cells: Vec<Cell>) -> Self {
        Self {
            name: name.to_string(),
            cells,
        }
    }

    /// Baseline, every samples × steps pair, and the full-data cell.
    pub fn fig1() -> Self {
        let mut cells = vec![Cell::baseline(30, Regime::Wild)];
        for samples in SAMPLE_AXIS {
            for steps in STEP_AXIS {
                cells.push(Cell::lorp(samples, steps, Regime::Wild));
            }
        }
        cells.push(Cell::multi_sample(FULL_DATA_STEPS, Regime::Wild));
        Self::new("fig1", cells)
    }

    /// Baseline, single-prompt adaptation and full-data adaptation per regime.
    pub fn fig2() -> Self {
        let cells = [Regime::Studio, Regime::Wild]
            .into_iter()
            .flat_map(|r| [Cell::baseline(30, r), Cell::lorp(1, 100, r), Cell::multi_sample(FULL_DATA_STEPS, r)])
            .collect();
        Self::new("fig2", cells)
    }

    /// The unadapted model at each ODE step count.
    pub fn table1() -> Self {
        Self::new("table1", ODE_AXIS.iter().map(|&n| Cell::baseline(n, Regime::Wild)).collect())
    }

    /// Full-data adaptation at each rank. Ranks above the narrowest global
    /// layer are only meaningful on the transformer blocks, so every row
    /// targets block layers.
    pub fn table2() -> Self {
        let blocks = TargetFilter::Sites(Site::BLOCK.into_iter().collect());
        let cells = RANK_AXIS
            .iter()
            .map(|&r| Cell::multi_sample(FULL_DATA_STEPS, Regime::Wild).with_rank(r, blocks.clone()))
            .collect();
        Self::new("table2", cells)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fig1" => Ok(Self::fig1()),
            "fig2" => Ok(Self::fig2()),
            "table1" => Ok(Self::table1()),
            "table2" => Ok(Self::table2()),
            other => Err(Error::Config(format!("unknown grid preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            c.validate_axes()?;
            if !seen.insert(c.descriptor()) {
                return Err(Error::Config(format!("duplicate grid cell `{}`", c.descriptor())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub speakers: usize,
    pub texts_per_speaker: usize,
    pub seed: u64,
    pub jobs: usize,
    /// Learning rate, loss settings and adapter init; cells override
    /// steps, rank, alpha, target and ODE steps.
    pub lorp: LorpConfig,
    pub plugin: Option<QualityPlugin>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            speakers: 5,
            texts_per_speaker: 20,
            seed: 0,
            jobs: 1,
            lorp: LorpConfig::default(),
            plugin: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.texts_per_speaker == 0 {
            return Err(Error::Config("a sweep needs at least one speaker and one text".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.lorp.validate()
    }

    fn cell_lorp(&self, cell: &Cell) -> LorpConfig {
        let mut cfg = self.lorp.clone();
        cfg.steps = cell.steps;
        cfg.samples = cell.samples.max(1);
        cfg.ode_steps = cell.ode_steps;
        cfg.lora.rank = cell.rank;
        cfg.lora.alpha = cell.rank as f64;
        cfg.lora.target = cell.target.clone();
        cfg
    }
}

/// Evaluation inputs shared by every cell.
pub struct EvalContext<'a> {
    pub system: &'a TrainedSystem,
    pub corpus: &'a Corpus,
    pub config: &'a SweepConfig,
    system_hash: String,
}

impl<'a> EvalContext<'a> {
    pub fn new(system: &'a TrainedSystem, corpus: &'a Corpus, config: &'a SweepConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            system,
            corpus,
            config,
            system_hash: hash_bytes(&system.to_archive().to_bytes()),
        })
    }

    /// Everything a cell's numbers depend on except the seed.
    pub fn config_hash(&self, cell: &Cell) -> String {
        let c = self.config;
        let mut text = format!(
            "{}\nspeakers={}\ntexts={}\ncorpus={}:{:?}\nsystem={}\n",
            cell.descriptor(),
            c.speakers,
            c.texts_per_speaker,
            self.corpus.seed,
            self.corpus.config,
            self.system_hash
        );
        for (k, v) in c.cell_lorp(cell).describe() {
            text.push_str(&format!("{k}={v}\n"));
        }
        if let Some(p) = &c.plugin {
            text.push_str(&format!("plugin={} {}\n", p.program, p.args.join(" ")));
        }
        hash_bytes(text.as_bytes())[..16].to_string()
    }

    /// Scores one cell. Adaptation and synthesis seeds depend on the speaker
    /// and text only, so cells are paired.
    pub fn run_cell(&self, cell: &Cell) -> Result<EvalRow> {
        let (sys, cfg) = (self.system, self.config);
        let speakers = self.corpus.evaluation_speakers(cell.regime, cfg.speakers)?;
        let texts = self.corpus.held_out_texts(cfg.texts_per_speaker, seed::derive(cfg.seed, "sweep/texts"));
        let lorp_cfg = cfg.cell_lorp(cell);
        let (mut sim, mut wer, mut cer) = (0.0, 0.0, 0.0);
        let mut quality = Vec::new();
        let mut speaker_simm = Vec::with_capacity(speakers.len());
        for (si, spk) in speakers.iter().enumerate() {
            let prompts = cell.prompts(&spk.utterances)?;
            let prompt = &spk.utterances[0];
            let adapters = if prompts.is_empty() {
                None
            } else {
                let seed = seed::derive_indexed(cfg.seed, &format!("sweep/adapt/{}", cell.regime), si as u64);
                Some(adapt(&sys.model, &prompts, &lorp_cfg, seed)?.adapters)
            };
            let reference = speaker_embed(&prompt.features.frames)?;
            let synth_seed = seed::derive_indexed(cfg.seed, &format!("sweep/synth/{}", cell.regime), si as u64);
            let mut spk_sim = 0.0;
            for (ti, text) in texts.iter().enumerate() {
                let s = synthesize(
                    &sys.model,
                    adapters.as_ref(),
                    &sys.durations,
                    prompt,
                    text,
                    cell.ode_steps,
                    seed::derive_indexed(synth_seed, "text", ti as u64),
                )?;
                let frames = &s.features.frames;
                spk_sim += cosine_sim(&reference, &speaker_embed(frames)?);
                let (w, c) = error_rates(&decode_tokens(frames, &sys.vocab)?, text)?;
                wer += w;
                cer += c;
                if let Some(q) = quality_score(cfg.plugin.as_ref(), frames, ti as u64) {
                    quality.push(q);
                }
            }
            sim += spk_sim;
            speaker_simm.push(100.0 * spk_sim / texts.len() as f64);
        }
        let n = speakers.len() * texts.len();
        let mean = |v: f64| v / n as f64;
        Ok(EvalRow {
            descriptor: cell.descriptor(),
            simm: 100.0 * mean(sim),
            wer: 100.0 * mean(wer),
            cer: 100.0 * mean(cer),
            quality: (!quality.is_empty()).then(|| quality.iter().sum::<f64>() / quality.len() as f64),
            n,
            seed: cfg.seed,
            config_hash: self.config_hash(cell),
            speaker_simm,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    descriptor: String,
    file: String,
    config_hash: String,
    done: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SweepManifest {
    grid: String,
    seed: u64,
    cells: Vec<ManifestEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_done(path: &Path, expect: &EvalRow) -> Option<EvalRow> {
    let text = fs::read_to_string(path).ok()?;
    let row: EvalRow = serde_json::from_str(&text).ok()?;
    (row.descriptor == expect.descriptor && row.config_hash == expect.config_hash && row.seed == expect.seed && row.n == expect.n)
        .then_some(row)
}

/// Runs every cell of `grid`, up to `config.jobs` at a time. With `out_dir`
/// each finished cell is written to `cells/<slug>.json` and skipped on the
/// next run; `report.csv`, `report.json` and `manifest.json` are written
/// alongside.
pub fn run_sweep(ctx: &EvalContext<'_>, grid: &GridSpec, out_dir: Option<&Path>) -> Result<EvalReport> {
    grid.validate()?;
    let n = ctx.config.speakers * ctx.config.texts_per_speaker;
    let cell_dir = out_dir.map(|d| d.join("cells"));
    if let Some(dir) = &cell_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let files: Vec<Option<PathBuf>> = grid
        .cells
        .iter()
        .map(|c| cell_dir.as_ref().map(|d| d.join(format!("{}.json", c.slug()))))
        .collect();

    let mut rows: Vec<Option<EvalRow>> = Vec::with_capacity(grid.cells.len());
    for (cell, file) in grid.cells.iter().zip(&files) {
        let probe = EvalRow {
            descriptor: cell.descriptor(),
            config_hash: ctx.config_hash(cell),
            seed: ctx.config.seed,
            n,
            ..EvalRow::default()
        };
        let done = file.as_deref().and_then(|f| load_done(f, &probe));
        if done.is_some() {
            log::info!("reusing finished cell `{}`", cell.descriptor());
        }
        rows.push(done);
    }

    let manifest = Mutex::new(SweepManifest {
        grid: grid.name.clone(),
        seed: ctx.config.seed,
        cells: grid
            .cells
            .iter()
            .zip(&rows)
            .map(|(c, r)| ManifestEntry {
                descriptor: c.descriptor(),
                file: format!("cells/{}.json", c.slug()),
                config_hash: ctx.config_hash(c),
                done: r.is_some(),
            })
            .collect(),
    });
    let save_manifest = |m: &SweepManifest| -> Result<()> {
        match out_dir {
            Some(d) => write_atomic(&d.join("manifest.json"), to_json(m)?.as_bytes()),
            None => Ok(()),
        }
    };
    save_manifest(&manifest.lock().expect("manifest lock"))?;

    let pending: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].is_none()).collect();
    let results = Mutex::new(rows);
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = ctx.config.jobs.min(pending.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let cell = &grid.cells[i];
                log::info!("running cell `{}`", cell.descriptor());
                let outcome = ctx.run_cell(cell).and_then(|row| {
                    if let Some(f) = &files[i] {
                        write_atomic(f, to_json(&row)?.as_bytes())?;
                        let mut m = manifest.lock().expect("manifest lock");
                        m.cells[i].done = true;
                        save_manifest(&m)?;
                    }
                    Ok(row)
                });
                match outcome {
                    Ok(row) => results.lock().expect("results lock")[i] = Some(row),
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        first_error.lock().expect("error lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let report = EvalReport {
        rows: results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every cell ran")).collect(),
    };
    if let Some(d) = out_dir {
        write_atomic(&d.join("report.csv"), report.to_csv().as_bytes())?;
        write_atomic(&d.join("report.json"), report.to_json()?.as_bytes())?;
    }
    Ok(report)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(format!("json encoding failed: {e}")))
}
