//! Personalization at inference time: fresh adapters are fitted to the
//! prompt with the masked flow-matching loss for a fixed number of Adam
//! steps, then new text is synthesized with the prompt as context.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::align::{predict_durations, Alignment, DurationPredictor};
use crate::autodiff::{adam_step, AdamConfig, OptimizerState, Wrt};
use crate::cfm::{cfm_loss, cfm_loss_and_grads, sample, CfmConfig};
use crate::corpus::{FeatureSequence, PromptSample};
use crate::error::{Error, Result};
use crate::lora::{inject, AdapterSet, LoraConfig};
use crate::net::Model;
use crate::seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LorpConfig {
    pub steps: usize,
    /// Prompts drawn per speaker.
    pub samples: usize,
    pub lr: f64,
    pub lora: LoraConfig,
    pub ode_steps: usize,
    /// Mask range and `sigma_min` for the adaptation loss.
    pub cfm: CfmConfig,
}

impl Default for LorpConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            samples: 1,
            lr: 1e-3,
            lora: LoraConfig::default(),
            ode_steps: 30,
            cfm: CfmConfig::default(),
        }
    }
}

impl LorpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("at least one prompt sample is required".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("adaptation learning rate must be positive".into()));
        }
        if self.ode_steps == 0 {
            return Err(Error::Config("ode_steps must be at least 1".into()));
        }
        self.lora.validate()?;
        self.cfm.validate()
    }

    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("lorp.steps".to_string(), self.steps.to_string()),
            ("lorp.samples".into(), self.samples.to_string()),
            ("lorp.lr".into(), self.lr.to_string()),
            ("lorp.ode_steps".into(), self.ode_steps.to_string()),
            ("lorp.mask_lo".into(), self.cfm.mask_fraction.0.to_string()),
            ("lorp.mask_hi".into(), self.cfm.mask_fraction.1.to_string()),
            ("lorp.sigma_min".into(), self.cfm.sigma_min.to_string()),
        ];
        out.extend(AdapterSet::empty(self.lora.clone()).describe());
        out
    }
}

#[derive(Clone, Debug)]
pub struct PersonalizationResult {
    pub adapters: AdapterSet,
    /// Loss before each update.
    pub curve: Vec<f64>,
    pub wall_time: Duration,
    pub config: LorpConfig,
}

/// Fits fresh adapters to `prompts`. Each step uses one prompt (cycling
/// through a shuffled order) with a fresh mask and noise draw.
pub fn adapt(model: &Model, prompts: &[&PromptSample], config: &LorpConfig, seed: u64) -> Result<PersonalizationResult> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Invalid("adaptation needs at least one prompt".into()));
    }
    let started = Instant::now();
    let mut adapters = inject(model, &config.lora, seed::derive(seed, "lorp/init"))?;
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr));
    let mut order_rng = seed::rng(seed::derive(seed, "lorp/order"));
    let mut draw_rng = seed::rng(seed::derive(seed, "lorp/draws"));
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut cursor = order.len();
    let wrt = Wrt::params_with_prefix("lora.");
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor == order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch = [prompts[order[cursor]]];
        cursor += 1;
        let (loss, grads) = cfm_loss_and_grads(model, Some(&adapters), &batch, &config.cfm, &mut draw_rng, &wrt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.push(loss);
        adam_step(&mut adapters.params, &grads, &mut opt)?;
    }
    Ok(PersonalizationResult {
        adapters,
        curve,
        wall_time: started.elapsed(),
        config: config.clone(),
    })
}

/// Mean masked loss over `draws` fixed draws per prompt, for comparing
/// adapters on equal footing.
pub fn prompt_loss(
    model: &Model,
    adapters: Option<&AdapterSet>,
    prompts: &[&PromptSample],
    config: &CfmConfig,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seed::rng(seed::derive(seed, "lorp/probe"));
    let mut total = 0.0;
    for _ in 0..draws {
        total += cfm_loss(model, adapters, prompts, config, &mut rng)?;
    }
    Ok(total / draws.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Only the newly generated frames.
    pub features: FeatureSequence,
    pub durations: Alignment,
    pub field_evals: usize,
}

/// Prompt frames (held fixed) followed by frames for `text`, whose
/// durations come from the predictor with the prompt as context.
pub fn synthesize(
    model: &Model,
    adapters: Option<&AdapterSet>,
    durations: &DurationPredictor,
    prompt: &PromptSample,
    text: &[usize],
    ode_steps: usize,
    seed: u64,
) -> Result<Synthesis> {
    if text.is_empty() {
        return Err(Error::Invalid("nothing to synthesize: empty text".into()));
    }
    let plan = predict_durations(durations, text, &prompt.tokens, &prompt.alignment.durations)?;
    let prompt_frames = &prompt.features.frames;
    let (p, n) = (prompt_frames.rows(), plan.total_frames());
    let context = Matrix::concat_rows(&[prompt_frames, &Matrix::zeros(n, prompt_frames.cols())])?;
    let given: Vec<bool> = (0..p + n).map(|i| i < p).collect();
    let mut token_frames = prompt.token_frames();
    token_frames.extend(plan.expand(text));
    let out = sample(model, adapters, &context, &given, &token_frames, ode_steps, seed)?;
    Ok(Synthesis {
        features: FeatureSequence::new(out.frames.slice_rows(p, n)),
        durations: plan,
        field_evals: out.field_evals,
    })
}

/// Zero-shot synthesis without adapters.
pub fn baseline_synthesize(
    model: &Model,
    durations: &DurationPredictor,
    prompt: &PromptSample,
    text: &[usize],
    ode_steps: usize,
    seed: u64,
) -> Result<Synthesis> {
    synthesize(model, None, durations, prompt, text, ode_steps, seed)
}
