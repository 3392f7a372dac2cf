//! Per-token duration regression in log space.
//!
//! Each token is described by a learned embedding plus three prompt
//! features: the prompt's mean log-duration, the mean log-duration of the
//! same token inside the prompt (falling back to the prompt mean) and a flag
//! saying whether the token occurs there. A GELU MLP maps that to a
//! log-duration and training minimizes squared error.

use rand::seq::SliceRandom;

use super::Alignment;
use crate::autodiff::{adam_step, forward_eval, AdamConfig, Feed, Graph, NodeId, OptimizerState, Params, Wrt};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

const CONTEXT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DurationConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden: 32,
            steps: 400,
            batch: 8,
            lr: 1e-2,
        }
    }
}

/// One training utterance and the prompt that conditions it.
#[derive(Clone, Copy, Debug)]
pub struct DurationExample<'a> {
    pub tokens: &'a [usize],
    pub durations: &'a [usize],
    pub prompt_tokens: &'a [usize],
    pub prompt_durations: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationPredictor {
    pub vocab_size: usize,
    pub params: Params,
}

const NAMES: [&str; 5] = [
    "duration.token_emb",
    "duration.hidden.weight",
    "duration.hidden.bias",
    "duration.out.weight",
    "duration.out.bias",
];

fn context_features(tokens: &[usize], prompt_tokens: &[usize], prompt_durations: &[usize]) -> Matrix {
    let logs: Vec<f64> = prompt_durations.iter().map(|&d| (d.max(1) as f64).ln()).collect();
    let mean = if logs.is_empty() { 0.0 } else { logs.iter().sum::<f64>() / logs.len() as f64 };
    Matrix::from_fn(tokens.len(), CONTEXT, |i, j| {
        let hits: Vec<f64> = prompt_tokens
            .iter()
            .zip(&logs)
            .filter(|(&t, _)| t == tokens[i])
            .map(|(_, &l)| l)
            .collect();
        match j {
            0 => mean,
            1 if hits.is_empty() => mean,
            1 => hits.iter().sum::<f64>() / hits.len() as f64,
            _ => f64::from(u8::from(!hits.is_empty())),
        }
    })
}

/// `round(exp(log_duration))`, never below one frame.
pub fn durations_from_log(log_durations: &[f64]) -> Vec<usize> {
    log_durations
        .iter()
        .map(|&l| {
            let d = l.exp().round();
            if d.is_finite() && d >= 1.0 {
                d as usize
            } else {
                1
            }
        })
        .collect()
}

impl DurationPredictor {
    pub fn new(vocab_size: usize, config: &DurationConfig, seed: u64) -> Self {
        let width = config.embed_dim + CONTEXT;
        let shapes = [
            (vocab_size, config.embed_dim),
            (config.hidden, width),
            (1, config.hidden),
            (1, config.hidden),
            (1, 1),
        ];
        let mut params = Params::new();
        for (i, (name, (r, c))) in NAMES.iter().zip(shapes).enumerate() {
            let m = if i == 2 || i == 4 {
                Matrix::zeros(r, c)
            } else {
                let mut rng = seed::rng(seed::derive(seed, name));
                let std = if i == 0 { 1.0 } else { 1.0 / (c as f64).sqrt() };
                Matrix::randn(r, c, std, &mut rng)
            };
            params.insert(name.to_string(), m);
        }
        Self { vocab_size, params }
    }

    fn build(&self, g: &mut Graph, tokens: &[usize], context: Matrix) -> Result<NodeId> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Invalid(format!("token {bad} outside duration vocabulary")));
        }
        let p = |g: &mut Graph, i: usize| g.param(NAMES[i], self.params[NAMES[i]].shape());
        let table = p(g, 0);
        let emb = g.embedding(table, tokens.to_vec())?;
        let ctx = g.constant(context);
        let x = g.concat_cols(&[emb, ctx])?;
        let (w1, b1, w2, b2) = (p(g, 1), p(g, 2), p(g, 3), p(g, 4));
        let h = g.dense(x, w1, Some(b1))?;
        let h = g.gelu(h)?;
        g.dense(h, w2, Some(b2))
    }

    /// Predicted log-durations, one per token.
    pub fn log_durations(&self, tokens: &[usize], prompt_tokens: &[usize], prompt_durations: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let out = self.build(&mut g, tokens, context_features(tokens, prompt_tokens, prompt_durations))?;
        let eval = forward_eval(&g, &[&self.params], &Feed::new())?;
        Ok(eval.value(out).column(0))
    }
}

/// Durations for `tokens` given a prompt's tokens and durations.
pub fn predict_durations(
    predictor: &DurationPredictor,
    tokens: &[usize],
    prompt_tokens: &[usize],
    prompt_durations: &[usize],
) -> Result<Alignment> {
    let logs = predictor.log_durations(tokens, prompt_tokens, prompt_durations)?;
    Alignment::new(durations_from_log(&logs))
}

/// Returns the predictor and its per-step loss.
pub fn train_duration_predictor(
    examples: &[DurationExample],
    vocab_size: usize,
    config: &DurationConfig,
    seed: u64,
) -> Result<(DurationPredictor, Vec<f64>)> {
    let mut model = DurationPredictor::new(vocab_size, config, seed::derive(seed, "duration/init"));
    if config.steps > 0 && examples.is_empty() {
        return Err(Error::Invalid("no examples to train the duration predictor on".into()));
    }
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr));
    let mut rng = seed::rng(seed::derive(seed, "duration/batches"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        let mut contexts = Vec::new();
        for _ in 0..config.batch.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            if ex.tokens.len() != ex.durations.len() {
                return Err(Error::Invalid("tokens and durations differ in length".into()));
            }
            tokens.extend_from_slice(ex.tokens);
            targets.extend(ex.durations.iter().map(|&d| (d.max(1) as f64).ln()));
            contexts.push(context_features(ex.tokens, ex.prompt_tokens, ex.prompt_durations));
        }
        let refs: Vec<&Matrix> = contexts.iter().collect();
        let mut g = Graph::new();
        let pred = model.build(&mut g, &tokens, Matrix::concat_rows(&refs)?)?;
        let target = g.constant(Matrix::from_vec(targets.len(), 1, targets)?);
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq)?;
        let eval = forward_eval(&g, &[&model.params], &Feed::new())?;
        let value = eval.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        curve.push(value);
        let grads = eval.backward(loss, &Wrt::all_params())?;
        adam_step(&mut model.params, &grads, &mut opt)?;
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_and_rounding() {
        assert_eq!(durations_from_log(&[3f64.ln(), -2.0, 0.0, f64::NEG_INFINITY]), vec![3, 1, 1, 1]);
        assert_eq!(durations_from_log(&[2.6f64.ln(), 2.4f64.ln()]), vec![3, 2]);
    }

    #[test]
    fn context_features_by_hand() {
        let c = context_features(&[1, 5], &[1, 2, 1], &[2, 4, 8]);
        let mean = (2f64.ln() + 4f64.ln() + 8f64.ln()) / 3.0;
        assert!((c.get(0, 0) - mean).abs() < 1e-12);
        assert!((c.get(0, 1) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(c.get(0, 2), 1.0);
        assert!((c.get(1, 1) - mean).abs() < 1e-12);
        assert_eq!(c.get(1, 2), 0.0);
    }

    #[test]
    fn zero_steps_gives_initialization() {
        let cfg = DurationConfig { steps: 0, ..Default::default() };
        let (p, curve) = train_duration_predictor(&[], 4, &cfg, 7).unwrap();
        assert!(curve.is_empty());
        assert_eq!(p, DurationPredictor::new(4, &cfg, seed::derive(7, "duration/init")));
    }

    fn constant_corpus(k: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut rng = seed::rng(11);
        (0..24)
            .map(|_| {
                let len = rand::Rng::random_range(&mut rng, 4..9);
                let toks: Vec<usize> = (0..len).map(|_| rand::Rng::random_range(&mut rng, 0..6)).collect();
                (toks, vec![k; len])
            })
            .collect()
    }

    #[test]
    fn constant_durations_are_learned() {
        let data = constant_corpus(4);
        let examples: Vec<DurationExample> = data
            .iter()
            .zip(data.iter().cycle().skip(1))
            .map(|((t, d), (pt, pd))| DurationExample {
                tokens: t,
                durations: d,
                prompt_tokens: pt,
                prompt_durations: pd,
            })
            .collect();
        let (pred, curve) = train_duration_predictor(&examples, 6, &DurationConfig::default(), 3).unwrap();
        let window = &curve[curve.len() - 200..];
        let first: f64 = window[..50].iter().sum();
        let last: f64 = window[150..].iter().sum();
        assert!(last <= first, "loss trend went up: {first} -> {last}");
        let logs = pred.log_durations(&[0, 1, 2, 3, 4, 5], &[0, 2], &[4, 4]).unwrap();
        for l in logs {
            assert!((l - 4f64.ln()).abs() <= 0.1 * 4f64.ln(), "log duration {l}");
        }
        let al = predict_durations(&pred, &[5, 3, 1], &[0], &[4]).unwrap();
        let mae = al.durations.iter().map(|&d| (d as f64 - 4.0).abs()).sum::<f64>() / 3.0;
        assert!(mae <= 1.0);
    }
}
