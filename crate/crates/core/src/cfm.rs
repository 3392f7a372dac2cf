//! Conditional flow matching: the straight-line probability path, the
//! masked infilling loss, the Euler sampler and base-model training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, forward_eval, AdamConfig, Feed, Gradients, Graph, NodeId, OptimizerState, Params, Wrt};
use crate::corpus::PromptSample;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::net::{add_field_feed, FieldInputs, GraphBuilder, Model};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct CfmConfig {
    pub sigma_min: f64,
    pub ode_steps: usize,
    /// Range of the masked share of each training utterance.
    pub mask_fraction: (f64, f64),
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            ode_steps: 30,
            mask_fraction: (0.7, 1.0),
            batch: 8,
            steps: 1500,
            lr: 1e-3,
        }
    }
}

impl CfmConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_fraction;
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!("sigma_min {} outside [0, 1)", self.sigma_min)));
        }
        if self.ode_steps == 0 {
            return Err(Error::Config("ode_steps must be at least 1".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("mask fraction range ({lo}, {hi}) invalid")));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub x0: Matrix,
    pub x1: Matrix,
    pub t: f64,
    pub x_t: Matrix,
    pub u_t: Matrix,
}

/// `x_t = (1 - (1 - s)·t)·x0 + t·x1` and `u_t = x1 - (1 - s)·x0`.
pub fn ot_path(x0: &Matrix, x1: &Matrix, t: f64, sigma_min: f64) -> Result<PathSample> {
    if x0.shape() != x1.shape() {
        return Err(Error::Dim(format!("noise {:?} vs data {:?}", x0.shape(), x1.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("t = {t} outside [0, 1]")));
    }
    let k = 1.0 - sigma_min;
    Ok(PathSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        x_t: x0.zip_map(x1, |a, b| (1.0 - k * t) * a + t * b),
        u_t: x0.zip_map(x1, |a, b| b - k * a),
    })
}

/// One contiguous masked span covering a uniform share in `fraction` of the
/// frames (at least one). Returns `true` for given (unmasked) frames.
pub fn span_mask<R: Rng + ?Sized>(frames: usize, fraction: (f64, f64), rng: &mut R) -> Vec<bool> {
    let share = if fraction.0 < fraction.1 {
        rng.random_range(fraction.0..=fraction.1)
    } else {
        fraction.0
    };
    let len = ((share * frames as f64).round() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);
    (0..frames).map(|i| i < start || i >= start + len).collect()
}

/// Squared error averaged over the rows where `given` is false.
pub fn masked_mse(pred: &Matrix, target: &Matrix, given: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &g) in given.iter().enumerate() {
        if !g {
            total += pred.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += pred.cols();
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Random draws behind one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub path: PathSample,
    pub given: Vec<bool>,
    /// `x_t` with given frames replaced by the data.
    pub x_in: Matrix,
}

/// Draws `t`, noise and mask for `sample`, in that order.
pub fn draw_example(sample: &PromptSample, config: &CfmConfig, rng: &mut ChaCha8Rng) -> Result<TrainingDraw> {
    let x1 = &sample.features.frames;
    let t: f64 = rng.random_range(0.0..1.0);
    let x0 = Matrix::randn(x1.rows(), x1.cols(), 1.0, rng);
    let given = span_mask(x1.rows(), config.mask_fraction, rng);
    let path = ot_path(&x0, x1, t, config.sigma_min)?;
    let x_in = clamp_given(&path.x_t, x1, &given);
    Ok(TrainingDraw { path, given, x_in })
}

fn clamp_given(x: &Matrix, context: &Matrix, given: &[bool]) -> Matrix {
    let mut out = x.clone();
    for (i, &g) in given.iter().enumerate() {
        if g {
            out.row_mut(i).copy_from_slice(context.row(i));
        }
    }
    out
}

/// A loss graph ready for evaluation.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub feed: Feed,
}

/// Masked flow-matching loss over `batch`, averaged across samples.
pub fn build_cfm_loss(
    model: &Model,
    adapters: Option<&AdapterSet>,
    batch: &[&PromptSample],
    config: &CfmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mut b = GraphBuilder::new(&model.config, &model.params, adapters);
    let mut feed = Feed::new();
    let mut terms = Vec::with_capacity(batch.len());
    for (n, sample) in batch.iter().enumerate() {
        let draw = draw_example(sample, config, rng)?;
        let token_frames = sample.token_frames();
        let inputs = FieldInputs {
            x_t: &draw.x_in,
            t: draw.path.t,
            context: &sample.features.frames,
            given: &draw.given,
            token_frames: &token_frames,
        };
        let tag = format!("#{n}");
        let out = b.vector_field(&inputs, &tag)?;
        add_field_feed(&mut feed, &inputs, &tag);
        let masked = draw.given.iter().filter(|&&g| !g).count();
        let target = b.g.constant(draw.path.u_t.clone());
        let weights = Matrix::from_fn(draw.given.len(), draw.path.u_t.cols(), |i, _| {
            if draw.given[i] {
                0.0
            } else {
                1.0
            }
        });
        let w = b.g.constant(weights);
        let diff = b.g.sub(out, target)?;
        let diff = b.g.mul(diff, w)?;
        let sq = b.g.mul(diff, diff)?;
        let sum = b.g.sum(sq)?;
        let denom = (masked * draw.path.u_t.cols()).max(1) as f64;
        terms.push(b.g.scale(sum, 1.0 / (denom * batch.len() as f64))?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = b.g.add(loss, t)?;
    }
    Ok(LossGraph { graph: b.g, loss, feed })
}

pub fn cfm_loss(
    model: &Model,
    adapters: Option<&AdapterSet>,
    batch: &[&PromptSample],
    config: &CfmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let lg = build_cfm_loss(model, adapters, batch, config, rng)?;
    let stores = param_stores(model, adapters);
    forward_eval(&lg.graph, &stores, &lg.feed)?.scalar(lg.loss)
}

/// Loss value and gradients for the selected parameters.
pub fn cfm_loss_and_grads(
    model: &Model,
    adapters: Option<&AdapterSet>,
    batch: &[&PromptSample],
    config: &CfmConfig,
    rng: &mut ChaCha8Rng,
    wrt: &Wrt,
) -> Result<(f64, Gradients)> {
    let lg = build_cfm_loss(model, adapters, batch, config, rng)?;
    let stores = param_stores(model, adapters);
    let eval = forward_eval(&lg.graph, &stores, &lg.feed)?;
    let value = eval.scalar(lg.loss)?;
    Ok((value, eval.backward(lg.loss, wrt)?))
}

pub(crate) fn param_stores<'a>(model: &'a Model, adapters: Option<&'a AdapterSet>) -> Vec<&'a Params> {
    match adapters {
        Some(a) => vec![&model.params, &a.params],
        None => vec![&model.params],
    }
}

/// Euler integration on the uniform grid `t_i = i / steps`. `project` runs
/// on the start state and after every update. Returns the end state and
/// the number of field evaluations.
pub fn euler_integrate(
    start: &Matrix,
    steps: usize,
    mut field: impl FnMut(&Matrix, f64) -> Result<Matrix>,
    project: impl Fn(&mut Matrix),
) -> Result<(Matrix, usize)> {
    if steps == 0 {
        return Err(Error::Config("ode_steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = start.clone();
    project(&mut x);
    for i in 0..steps {
        let v = field(&x, i as f64 * dt)?;
        if v.shape() != x.shape() {
            return Err(Error::Dim(format!("field returned {:?} for state {:?}", v.shape(), x.shape())));
        }
        x.add_scaled(&v, dt);
        project(&mut x);
    }
    Ok((x, steps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub frames: Matrix,
    pub field_evals: usize,
}

/// Generates the frames where `given` is false; given frames are held at
/// their context values throughout.
pub fn sample(
    model: &Model,
    adapters: Option<&AdapterSet>,
    context: &Matrix,
    given: &[bool],
    token_frames: &[usize],
    ode_steps: usize,
    seed: u64,
) -> Result<Sampled> {
    if given.len() != context.rows() {
        return Err(Error::Dim(format!("mask of {} for {} frames", given.len(), context.rows())));
    }
    let mut rng = seed::rng(seed);
    let x0 = Matrix::randn(context.rows(), context.cols(), 1.0, &mut rng);
    let project = |x: &mut Matrix| {
        for (i, &g) in given.iter().enumerate() {
            if g {
                x.row_mut(i).copy_from_slice(context.row(i));
            }
        }
    };
    let field = |x: &Matrix, t: f64| {
        model.vector_field(
            adapters,
            &FieldInputs {
                x_t: x,
                t,
                context,
                given,
                token_frames,
            },
        )
    };
    let (frames, field_evals) = euler_integrate(&x0, ode_steps, field, project)?;
    Ok(Sampled { frames, field_evals })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<f64>,
}

/// Adam on the masked loss with batches drawn without replacement per
/// epoch. Aborts on the first non-finite loss.
pub fn train_base(model: Model, data: &[&PromptSample], config: &CfmConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training utterances".into()));
    }
    let mut model = model;
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr));
    let mut order_rng = seed::rng(seed::derive(seed, "cfm/order"));
    let mut draw_rng = seed::rng(seed::derive(seed, "cfm/draws"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = cfm_loss_and_grads(&model, None, &batch, config, &mut draw_rng, &Wrt::all_params())
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.push(loss);
        adam_step(&mut model.params, &grads, &mut opt)?;
        if step % 100 == 0 {
            log::debug!("cfm step {step}: loss {loss:.4}");
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// `step,loss` rows with a header.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}
