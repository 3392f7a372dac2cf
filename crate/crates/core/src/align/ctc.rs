//! CTC lattice algorithms over `T × (V+1)` log-probabilities whose last
//! column is the blank symbol.

use super::Alignment;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per token plus a blank between
/// each adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice {
    labels: Vec<usize>,
    blank: usize,
}

impl Lattice {
    fn new(log_probs: &Matrix, target: &[usize]) -> Result<Self> {
        let classes = log_probs.cols();
        if classes < 2 {
            return Err(Error::Invalid("lattice needs at least one token and a blank".into()));
        }
        let blank = classes - 1;
        if let Some(bad) = target.iter().find(|&&v| v >= blank) {
            return Err(Error::Invalid(format!("token {bad} outside vocabulary of {blank}")));
        }
        if ctc_min_frames(target) > log_probs.rows() {
            return Err(Error::InfeasibleTarget {
                target: target.len(),
                frames: log_probs.rows(),
            });
        }
        let mut labels = Vec::with_capacity(2 * target.len() + 1);
        labels.push(blank);
        for &v in target {
            labels.push(v);
            labels.push(blank);
        }
        Ok(Self { labels, blank })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    /// Whether state `s` may be entered directly from `s - 2`.
    fn can_skip(&self, s: usize) -> bool {
        s >= 2 && self.labels[s] != self.blank && self.labels[s] != self.labels[s - 2]
    }
}

/// Negative log-likelihood and per-frame class posteriors.
pub fn ctc_forward_backward(log_probs: &Matrix, target: &[usize]) -> Result<(f64, Matrix)> {
    let lat = Lattice::new(log_probs, target)?;
    let (frames, states) = (log_probs.rows(), lat.len());
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| log_probs.get(t, lat.labels[s]);

    let mut alpha = vec![vec![ninf; states]; frames];
    alpha[0][0] = emit(0, 0);
    if states > 1 {
        alpha[0][1] = emit(0, 1);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if lat.can_skip(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc > ninf {
                alpha[t][s] = acc + emit(t, s);
            }
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![vec![ninf; states]; frames];
    beta[frames - 1][states - 1] = 0.0;
    if states > 1 {
        beta[frames - 1][states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s] + emit(t + 1, s);
            if s + 1 < states {
                acc = log_add(acc, beta[t + 1][s + 1] + emit(t + 1, s + 1));
            }
            if s + 2 < states && lat.can_skip(s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + emit(t + 1, s + 2));
            }
            beta[t][s] = acc;
        }
    }

    let mut log_p = alpha[frames - 1][states - 1];
    if states > 1 {
        log_p = log_add(log_p, alpha[frames - 1][states - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::InfeasibleTarget {
            target: target.len(),
            frames,
        });
    }
    let mut occupancy = Matrix::zeros(frames, log_probs.cols());
    for t in 0..frames {
        for s in 0..states {
            let lp = alpha[t][s] + beta[t][s] - log_p;
            if lp > ninf {
                let k = lat.labels[s];
                occupancy.set(t, k, occupancy.get(t, k) + lp.exp());
            }
        }
    }
    Ok((-log_p, occupancy))
}

/// `-log p(target | log_probs)` summed over every CTC path.
pub fn ctc_loss(log_probs: &Matrix, target: &[usize]) -> Result<f64> {
    ctc_forward_backward(log_probs, target).map(|(nll, _)| nll)
}

/// Converts a frame labelling (`None` = blank) into per-token durations:
/// blanks join the token before them, leading blanks join the first token.
pub fn path_to_durations(path: &[Option<usize>], tokens: usize) -> Alignment {
    let mut durations = vec![0usize; tokens];
    let mut current = 0usize;
    for step in path {
        if let Some(pos) = step {
            current = *pos;
        }
        durations[current] += 1;
    }
    Alignment { durations }
}

/// Viterbi best path through the CTC lattice, reported as token durations.
pub fn ctc_forced_align(log_probs: &Matrix, target: &[usize]) -> Result<Alignment> {
    if target.is_empty() {
        return Err(Error::Invalid("cannot align an empty target".into()));
    }
    let lat = Lattice::new(log_probs, target)?;
    let (frames, states) = (log_probs.rows(), lat.len());
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| log_probs.get(t, lat.labels[s]);

    let mut score = vec![ninf; states];
    let mut back = vec![vec![0usize; states]; frames];
    score[0] = emit(0, 0);
    score[1] = emit(0, 1);
    for t in 1..frames {
        let mut next = vec![ninf; states];
        for s in 0..states {
            let mut best = (score[s], s);
            if s >= 1 && score[s - 1] > best.0 {
                best = (score[s - 1], s - 1);
            }
            if lat.can_skip(s) && score[s - 2] > best.0 {
                best = (score[s - 2], s - 2);
            }
            if best.0 > ninf {
                next[s] = best.0 + emit(t, s);
                back[t][s] = best.1;
            }
        }
        score = next;
    }
    let mut s = if score[states - 1] >= score[states - 2] {
        states - 1
    } else {
        states - 2
    };
    if score[s] == ninf {
        return Err(Error::InfeasibleTarget {
            target: target.len(),
            frames,
        });
    }
    let mut path = vec![None; frames];
    for t in (0..frames).rev() {
        if s % 2 == 1 {
            path[t] = Some((s - 1) / 2);
        }
        if t > 0 {
            s = back[t][s];
        }
    }
    Ok(path_to_durations(&path, target.len()))
}
