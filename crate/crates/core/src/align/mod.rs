//! Token durations: CTC lattice math, forced alignment, a per-frame token
//! classifier trained with CTC, and the duration predictor.

mod ctc;
mod duration;
mod frames;

use std::fmt::Write as _;

pub use ctc::{ctc_forced_align, ctc_forward_backward, ctc_loss, ctc_min_frames, path_to_durations};
pub use duration::{
    durations_from_log, predict_durations, train_duration_predictor, DurationConfig, DurationExample, DurationPredictor,
};
pub use frames::{train_frame_classifier, FrameClassifier, FrameClassifierConfig};

use crate::error::{Error, Result};

/// Frames per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub durations: Vec<usize>,
}

impl Alignment {
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(Error::Invalid(format!("token {i} has zero duration")));
        }
        Ok(Self { durations })
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Per-frame token ids.
    pub fn expand(&self, tokens: &[usize]) -> Vec<usize> {
        tokens
            .iter()
            .zip(&self.durations)
            .flat_map(|(&tok, &d)| std::iter::repeat_n(tok, d))
            .collect()
    }

    /// CSV rows `utterance,token_index,duration`.
    pub fn to_csv_rows(&self, utterance: &str) -> String {
        let mut out = String::new();
        for (i, d) in self.durations.iter().enumerate() {
            let _ = writeln!(out, "{utterance},{i},{d}");
        }
        out
    }
}

/// Parses `utterance,token_index,duration` rows (with or without header)
/// into alignments keyed by utterance id, in first-seen order.
pub fn alignments_from_csv(text: &str) -> Result<Vec<(String, Alignment)>> {
    let mut out: Vec<(String, Alignment)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("utterance") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Invalid(format!("alignment line {}: `{line}`", n + 1)));
        }
        let idx: usize = parts[1]
            .parse()
            .map_err(|_| Error::Invalid(format!("alignment line {}: bad index", n + 1)))?;
        let dur: usize = parts[2]
            .parse()
            .map_err(|_| Error::Invalid(format!("alignment line {}: bad duration", n + 1)))?;
        if out.last().is_none_or(|(id, _)| id != parts[0]) {
            out.push((parts[0].to_string(), Alignment { durations: vec![] }));
        }
        let al = &mut out.last_mut().expect("pushed").1;
        if idx != al.durations.len() {
            return Err(Error::Invalid(format!("alignment line {}: index out of order", n + 1)));
        }
        al.durations.push(dur);
    }
    for (_, al) in &out {
        Alignment::new(al.durations.clone())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_duration_rejected() {
        assert!(Alignment::new(vec![1, 0]).is_err());
    }

    #[test]
    fn expand_repeats_tokens() {
        let al = Alignment::new(vec![2, 1, 3]).unwrap();
        assert_eq!(al.expand(&[7, 4, 9]), vec![7, 7, 4, 9, 9, 9]);
        assert_eq!(al.total_frames(), 6);
    }

    #[test]
    fn csv_round_trip() {
        let a = Alignment::new(vec![2, 5]).unwrap();
        let b = Alignment::new(vec![1]).unwrap();
        let text = format!("utterance,token_index,duration\n{}{}", a.to_csv_rows("u1"), b.to_csv_rows("u2"));
        let back = alignments_from_csv(&text).unwrap();
        assert_eq!(back, vec![("u1".to_string(), a), ("u2".to_string(), b)]);
    }
}
