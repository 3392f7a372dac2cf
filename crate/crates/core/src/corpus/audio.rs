//! Real-audio path: log-mel analysis, Griffin-Lim inversion, silence
//! segmentation and 16-bit WAV I/O.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-5,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fmax > self.sample_rate as f64 / 2.0 || self.fmin >= self.fmax {
            return Err(Error::Config("mel band must satisfy fmin < fmax <= sample_rate/2".into()));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config("hop must be in 1..=n_fft".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Center frequency of every mel filter, in Hz.
    pub fn centers_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        (1..=self.n_mels)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// `n_mels × n_bins` triangular filterbank with unit peaks.
    pub fn filterbank(&self) -> Matrix {
        let (lo, hi) = (hz_to_mel(self.fmin), hz_to_mel(self.fmax));
        let edges: Vec<f64> = (0..self.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect();
        let bin_hz = self.sample_rate as f64 / self.n_fft as f64;
        Matrix::from_fn(self.n_mels, self.n_bins(), |m, k| {
            let f = k as f64 * bin_hz;
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            if f <= l || f >= r {
                0.0
            } else if f <= c {
                (f - l) / (c - l)
            } else {
                (r - f) / (r - c)
            }
        })
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i.min(n - 1)]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n.saturating_sub(2 + i)]);
    }
    out
}

struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn frames_for(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Centered, reflect-padded analysis; returns half-spectra per frame.
    fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = self.n_fft / 2;
        let padded = reflect_pad(x, pad);
        let bins = self.n_fft / 2 + 1;
        (0..self.frames_for(x.len()))
            .map(|f| {
                let start = f * self.hop;
                let mut buf: Vec<Complex64> = (0..self.n_fft)
                    .map(|i| Complex64::new(padded.get(start + i).copied().unwrap_or(0.0) * self.window[i], 0.0))
                    .collect();
                self.forward.process(&mut buf);
                buf.truncate(bins);
                buf
            })
            .collect()
    }

    /// Windowed overlap-add inverse of `analyze`, trimmed of centering pad.
    fn synthesize(&self, spec: &[Vec<Complex64>]) -> Vec<f64> {
        let frames = spec.len();
        let pad = self.n_fft / 2;
        let total = self.n_fft + self.hop * frames.saturating_sub(1);
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        for (f, half) in spec.iter().enumerate() {
            let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
            buf[..half.len()].copy_from_slice(half);
            for k in 1..self.n_fft - half.len() + 1 {
                buf[self.n_fft - k] = half[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                out[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        let len = self.hop * frames.saturating_sub(1);
        (pad..pad + len)
            .map(|i| if norm[i] > 1e-10 { out[i] / norm[i] } else { 0.0 })
            .collect()
    }
}

fn magnitudes(spec: &[Vec<Complex64>]) -> Matrix {
    let bins = spec.first().map_or(0, Vec::len);
    Matrix::from_fn(spec.len(), bins, |f, k| spec[f][k].norm())
}

/// Log-mel features, one row per hop: magnitude STFT, triangular mel
/// projection, natural log with a floor.
pub fn mel_frontend(waveform: &[f64], config: &MelConfig) -> Result<FeatureSequence> {
    config.validate()?;
    if waveform.len() < config.n_fft {
        return Err(Error::Invalid(format!(
            "waveform of {} samples is shorter than one {}-point window",
            waveform.len(),
            config.n_fft
        )));
    }
    let stft = Stft::new(config.n_fft, config.hop);
    let mag = magnitudes(&stft.analyze(waveform));
    let mel = mag.matmul_bt(&config.filterbank());
    let frames = mel.map(|v| v.max(config.log_floor).ln());
    Ok(FeatureSequence {
        frames,
        frame_rate: config.sample_rate as f64 / config.hop as f64,
    })
}

fn cholesky_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                l.set(i, i, (a.get(i, i) - s).max(1e-300).sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l.get(i, k) * x.get(k, c)).sum();
            x.set(i, c, (x.get(i, c) - s) / l.get(i, i));
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x.get(k, c)).sum();
            x.set(i, c, (x.get(i, c) - s) / l.get(i, i));
        }
    }
    x
}

/// Ridge-regularized pseudo-inverse `Mᵀ(MMᵀ + λI)⁻¹`, `n_bins × n_mels`.
pub fn filterbank_pinv(fb: &Matrix) -> Matrix {
    let mut gram = fb.matmul_bt(fb);
    let n = gram.rows();
    for i in 0..n {
        gram.set(i, i, gram.get(i, i) + 1e-8);
    }
    // solve (MMᵀ) Z = M, then pinv = Zᵀ
    cholesky_solve(&gram, fb).transpose()
}

/// Spectral convergence of a waveform against a target magnitude.
pub fn reanalysis_error(waveform: &[f64], target: &Matrix, config: &MelConfig) -> f64 {
    let stft = Stft::new(config.n_fft, config.hop);
    let mut padded = waveform.to_vec();
    if padded.len() < config.n_fft {
        padded.resize(config.n_fft, 0.0);
    }
    let mag = magnitudes(&stft.analyze(&padded));
    let rows = mag.rows().min(target.rows());
    let diff = mag.slice_rows(0, rows).sub(&target.slice_rows(0, rows));
    diff.norm() / target.norm().max(1e-12)
}

pub struct GriffinLim {
    pub waveform: Vec<f64>,
    /// Target linear magnitude recovered from the mel features.
    pub magnitude: Matrix,
    /// Re-analysis error after each iteration (index 0 = initial phase).
    pub errors: Vec<f64>,
}

/// Iterative phase reconstruction from log-mel features.
pub fn griffin_lim(features: &FeatureSequence, config: &MelConfig, iterations: usize, seed: u64) -> Result<GriffinLim> {
    config.validate()?;
    if features.dim() != config.n_mels {
        return Err(Error::Dim(format!("{} feature bins for {} mel filters", features.dim(), config.n_mels)));
    }
    let mel = features.frames.map(f64::exp);
    let magnitude = mel.matmul_bt(&filterbank_pinv(&config.filterbank())).map(|v| v.max(0.0));
    let stft = Stft::new(config.n_fft, config.hop);
    let mut rng = seed::rng(seed);
    let mut spec: Vec<Vec<Complex64>> = (0..magnitude.rows())
        .map(|f| {
            magnitude
                .row(f)
                .iter()
                .map(|&m| Complex64::from_polar(m, rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let mut waveform = stft.synthesize(&spec);
    let mut errors = vec![reanalysis_error(&waveform, &magnitude, config)];
    for _ in 0..iterations {
        let mut padded = waveform.clone();
        if padded.len() < config.n_fft {
            padded.resize(config.n_fft, 0.0);
        }
        let re = stft.analyze(&padded);
        for (f, row) in spec.iter_mut().enumerate() {
            for (k, c) in row.iter_mut().enumerate() {
                let phase = re.get(f).map_or(0.0, |r| r[k].arg());
                *c = Complex64::from_polar(magnitude.get(f, k), phase);
            }
        }
        waveform = stft.synthesize(&spec);
        errors.push(reanalysis_error(&waveform, &magnitude, config));
    }
    Ok(GriffinLim {
        waveform,
        magnitude,
        errors,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn seconds(&self, sample_rate: u32) -> f64 {
        (self.end - self.start) as f64 / sample_rate as f64
    }
}

/// Splits a recording at silent frames into segments of `min_s..=max_s`
/// seconds. Speech runs are accumulated until they reach `min_s`; any
/// candidate longer than `max_s` is dropped.
pub fn segment_silence(waveform: &[f64], sample_rate: u32, threshold: f64, min_s: f64, max_s: f64) -> Vec<Segment> {
    let frame = (sample_rate as usize / 50).max(1); // 20 ms
    let voiced: Vec<bool> = waveform
        .chunks(frame)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt() >= threshold)
        .collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut f = 0;
    while f < voiced.len() {
        if voiced[f] {
            let start = f;
            while f < voiced.len() && voiced[f] {
                f += 1;
            }
            runs.push((start * frame, (f * frame).min(waveform.len())));
        } else {
            f += 1;
        }
    }
    let min_len = (min_s * sample_rate as f64).round() as usize;
    let max_len = (max_s * sample_rate as f64).round() as usize;
    let mut out = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for run in runs {
        current = match current {
            None => Some(run),
            Some((s, _)) if run.1 - s <= max_len => Some((s, run.1)),
            // too short to stand alone and cannot grow: drop it
            Some(_) => Some(run),
        };
        if let Some((s, e)) = current {
            if e - s > max_len {
                current = None;
            } else if e - s >= min_len {
                out.push(Segment { start: s, end: e });
                current = None;
            }
        }
    }
    out
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// 16-bit PCM WAV bytes held in memory.
pub fn wav_bytes(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)?;
        for &s in samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
        }
        w.finalize()?;
    }
    Ok(cursor.into_inner())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Invalid("expected 16-bit mono PCM".into()));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Vec<f64> {
        (0..(seconds * sr as f64) as usize)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let cfg = MelConfig::default();
        let f = mel_frontend(&vec![0.0; 4000], &cfg).unwrap();
        assert!(f.frames.data().iter().all(|&v| v == cfg.log_floor.ln()));
    }

    #[test]
    fn one_second_gives_63_frames() {
        let f = mel_frontend(&vec![0.0; 16_000], &MelConfig::default()).unwrap();
        assert_eq!(f.len(), 63);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn short_input_rejected() {
        assert!(mel_frontend(&[0.0; 100], &MelConfig::default()).is_err());
    }

    #[test]
    fn sine_peaks_at_nearest_center() {
        let cfg = MelConfig::default();
        let f = mel_frontend(&tone(1000.0, 0.5, 16_000), &cfg).unwrap();
        let centers = cfg.centers_hz();
        let expect = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().partial_cmp(&(centers[b] - 1000.0).abs()).unwrap())
            .unwrap();
        let mid = f.len() / 2;
        let row = f.frames.row(mid);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(argmax, expect);
    }

    #[test]
    fn hop_shift_covariance() {
        let cfg = MelConfig::default();
        let mut rng = seed::rng(3);
        let x: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let a = mel_frontend(&x, &cfg).unwrap();
        let b = mel_frontend(&x[cfg.hop..], &cfg).unwrap();
        // frames clear of the reflect padding at either end
        for k in 3..b.len() - 3 {
            for m in 0..cfg.n_mels {
                assert!((a.frames.get(k + 1, m) - b.frames.get(k, m)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn griffin_lim_error_does_not_grow() {
        let cfg = MelConfig::default();
        // chirp-like signal with a few harmonics
        let x: Vec<f64> = (0..12_000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                0.3 * (2.0 * PI * (200.0 + 300.0 * t) * t).sin() + 0.2 * (2.0 * PI * 650.0 * t).sin()
            })
            .collect();
        let feats = mel_frontend(&x, &cfg).unwrap();
        let zero = griffin_lim(&feats, &cfg, 0, 1).unwrap();
        assert!(zero.waveform.iter().all(|v| v.is_finite()));
        let out = griffin_lim(&feats, &cfg, 32, 1).unwrap();
        assert!(out.errors[32] <= out.errors[1], "{:?}", out.errors);
        let expect = feats.len() * cfg.hop;
        assert!((out.waveform.len() as i64 - expect as i64).unsigned_abs() as usize <= cfg.n_fft);
    }

    #[test]
    fn segmentation_cases() {
        let sr = 16_000;
        assert!(segment_silence(&vec![0.0; 10 * sr as usize], sr, 0.01, 5.0, 20.0).is_empty());
        let mut x = tone(300.0, 8.0, sr);
        x.extend(vec![0.0; sr as usize]);
        x.extend(tone(300.0, 8.0, sr));
        let segs = segment_silence(&x, sr, 0.01, 5.0, 20.0);
        assert_eq!(segs.len(), 2);
        for s in &segs {
            assert!((s.seconds(sr) - 8.0).abs() < 0.05);
        }
        assert!(segs[0].end <= segs[1].start);
        assert!(segment_silence(&tone(300.0, 30.0, sr), sr, 0.01, 5.0, 20.0).is_empty());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x = tone(440.0, 0.1, 16_000).iter().map(|v| v * 0.5).collect::<Vec<_>>();
        write_wav(&p, &x, 16_000).unwrap();
        let (y, sr) = read_wav(&p).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(y.len(), x.len());
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
