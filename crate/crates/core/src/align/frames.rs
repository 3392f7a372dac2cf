//! Per-frame token classifier trained with CTC.
//!
//! Each frame has its utterance's per-bin median subtracted (removing the
//! speaker) and then goes through a two-layer GELU network to `V + 1`
//! logits, the last one being blank.

use rand::seq::SliceRandom;

use super::{ctc_forced_align, Alignment};
use crate::autodiff::{adam_step, forward_eval, AdamConfig, Feed, Graph, OptimizerState, Params, Wrt};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FrameClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 300,
            batch: 8,
            lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameClassifier {
    pub vocab_size: usize,
    pub params: Params,
}

const NAMES: [&str; 4] = ["frames.hidden.weight", "frames.hidden.bias", "frames.out.weight", "frames.out.bias"];

fn speaker_free(features: &Matrix) -> Matrix {
    features.sub_row(&features.column_medians())
}

impl FrameClassifier {
    pub fn new(dim: usize, vocab_size: usize, hidden: usize, seed: u64) -> Self {
        let shapes = [(hidden, dim), (1, hidden), (vocab_size + 1, hidden), (1, vocab_size + 1)];
        let mut params = Params::new();
        for (name, (r, c)) in NAMES.iter().zip(shapes) {
            let m = if r == 1 {
                Matrix::zeros(r, c)
            } else {
                let mut rng = seed::rng(seed::derive(seed, name));
                Matrix::randn(r, c, 1.0 / (c as f64).sqrt(), &mut rng)
            };
            params.insert(name.to_string(), m);
        }
        Self { vocab_size, params }
    }

    fn logits(&self, g: &mut Graph, input: &str, frames: usize) -> Result<usize> {
        let dim = self.params[NAMES[0]].cols();
        let p = |g: &mut Graph, i: usize| g.param(NAMES[i], self.params[NAMES[i]].shape());
        let x = g.input(input, (frames, dim));
        let (w1, b1, w2, b2) = (p(g, 0), p(g, 1), p(g, 2), p(g, 3));
        let h = g.dense(x, w1, Some(b1))?;
        let h = g.gelu(h)?;
        g.dense(h, w2, Some(b2))
    }

    /// Frame log-probabilities, `T × (V + 1)`.
    pub fn log_probs(&self, features: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let out = self.logits(&mut g, "x", features.rows())?;
        let mut feed = Feed::new();
        feed.insert("x".into(), speaker_free(features));
        let eval = forward_eval(&g, &[&self.params], &feed)?;
        Ok(crate::autodiff::log_softmax_rows(eval.value(out)))
    }

    /// Viterbi durations of `tokens` over `features`.
    pub fn forced_align(&self, features: &Matrix, tokens: &[usize]) -> Result<Alignment> {
        ctc_forced_align(&self.log_probs(features)?, tokens)
    }
}

/// Trains on `(features, tokens)` pairs; returns the classifier and the
/// per-step mean CTC loss.
pub fn train_frame_classifier(
    data: &[(&Matrix, &[usize])],
    vocab_size: usize,
    config: &FrameClassifierConfig,
    seed: u64,
) -> Result<(FrameClassifier, Vec<f64>)> {
    let dim = data
        .first()
        .map(|(f, _)| f.cols())
        .ok_or_else(|| Error::Invalid("no utterances to train the frame classifier on".into()))?;
    let mut model = FrameClassifier::new(dim, vocab_size, config.hidden, seed::derive(seed, "frames/init"));
    let prepared: Vec<Matrix> = data.iter().map(|(f, _)| speaker_free(f)).collect();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr));
    let mut rng = seed::rng(seed::derive(seed, "frames/batches"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut g = Graph::new();
        let mut feed = Feed::new();
        let mut losses = Vec::new();
        for b in 0..config.batch.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let name = format!("x{b}");
            let logits = model.logits(&mut g, &name, prepared[i].rows())?;
            losses.push(g.ctc_loss(logits, data[i].1.to_vec())?);
            feed.insert(name, prepared[i].clone());
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, 1.0 / losses.len() as f64)?;
        let eval = forward_eval(&g, &[&model.params], &feed)?;
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
    fn log_probs_are_normalized() {
        let c = FrameClassifier::new(4, 3, 8, 1);
        let mut rng = seed::rng(0);
        let x = Matrix::randn(6, 4, 1.0, &mut rng);
        let lp = c.log_probs(&x).unwrap();
        assert_eq!(lp.shape(), (6, 4));
        for i in 0..6 {
            let s: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learns_separable_frames() {
        // three well separated one-hot patterns on top of a constant offset
        let mut utts = Vec::new();
        let mut rng = seed::rng(3);
        for u in 0..12 {
            let tokens: Vec<usize> = (0..4).map(|i| (u + i) % 3).collect();
            let mut rows = Vec::new();
            for &t in &tokens {
                for _ in 0..(2 + (u + t) % 3) {
                    let mut r = vec![0.5; 3];
                    r[t] += 3.0;
                    rows.push(r);
                }
            }
            let m = Matrix::from_rows(&rows).unwrap().add(&Matrix::randn(rows.len(), 3, 0.05, &mut rng));
            utts.push((m, tokens));
        }
        let data: Vec<(&Matrix, &[usize])> = utts.iter().map(|(m, t)| (m, t.as_slice())).collect();
        let cfg = FrameClassifierConfig { steps: 150, ..Default::default() };
        let (clf, curve) = train_frame_classifier(&data, 3, &cfg, 5).unwrap();
        assert_eq!(curve.len(), 150);
        assert!(curve[149] < 0.2 * curve[0]);
        let (m, t) = &utts[0];
        let al = clf.forced_align(m, t).unwrap();
        assert_eq!(al.total_frames(), m.rows());
    }
}
