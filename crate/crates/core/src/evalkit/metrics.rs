use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Unit-norm speaker vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub const MIN_EMBED_FRAMES: usize = 8;

/// Per-bin temporal median, L2-normalized. The median suppresses token
/// content, leaving the speaker's envelope.
pub fn speaker_embed(features: &Matrix) -> Result<SpeakerEmbedding> {
    if features.rows() < MIN_EMBED_FRAMES {
        return Err(Error::Invalid(format!(
            "speaker embedding needs at least {MIN_EMBED_FRAMES} frames, got {}",
            features.rows()
        )));
    }
    let med = features.column_medians();
    let n = med.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Invalid("speaker embedding of a zero or non-finite median".into()));
    }
    Ok(SpeakerEmbedding(med.into_iter().map(|v| v / n).collect()))
}

pub fn cosine_sim(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> f64 {
    let d: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    d.clamp(-1.0, 1.0)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

/// Median-removed frames, nearest prototype by cosine, repeats collapsed.
/// When median removal leaves nothing (a single-token utterance) the raw
/// frames are classified instead.
pub fn decode_tokens(features: &Matrix, vocab: &Vocabulary) -> Result<Vec<usize>> {
    if vocab.is_empty() {
        return Err(Error::Invalid("empty vocabulary".into()));
    }
    if features.cols() != vocab.dim() {
        return Err(Error::Dim(format!("{} bins vs vocabulary width {}", features.cols(), vocab.dim())));
    }
    let residual = features.sub_row(&features.column_medians());
    let mut out: Vec<usize> = Vec::new();
    for i in 0..features.rows() {
        let r = residual.row(i);
        let energy: f64 = r.iter().map(|v| v * v).sum();
        let frame = if energy < 1e-18 { features.row(i) } else { r };
        let best = vocab
            .prototypes
            .iter()
            .enumerate()
            .map(|(k, p)| (k, cosine(frame, &p.pattern)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("non-empty vocabulary");
        if out.last() != Some(&best) {
            out.push(best);
        }
    }
    Ok(out)
}

pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Edit distance divided by the reference length.
pub fn edit_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("edit rate against an empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Each token as three base-3 digits, the finer unit behind the
/// character-level rate.
pub fn subunits(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .flat_map(|&t| [(t / 9 % 3) as u8, (t / 3 % 3) as u8, (t % 3) as u8])
        .collect()
}

/// Token-level and sub-unit-level edit rates.
pub fn error_rates(hyp: &[usize], reference: &[usize]) -> Result<(f64, f64)> {
    Ok((edit_rate(hyp, reference)?, edit_rate(&subunits(hyp), &subunits(reference))?))
}
