//! External quality scorer: the command receives a 16-bit mono WAV on
//! standard input and prints one number.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use wait_timeout::ChildExt;

use crate::corpus::audio::{griffin_lim, wav_bytes, MelConfig};
use crate::corpus::FeatureSequence;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct QualityPlugin {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl QualityPlugin {
    /// Splits a command line on whitespace.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
            timeout: Duration::from_secs(30),
        })
    }

    fn run(&self, wav: &[u8]) -> Result<f64, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("could not start `{}`: {e}", self.program))?;
        let mut stdin = child.stdin.take().expect("piped");
        let payload = wav.to_vec();
        // a scorer may exit without reading everything; a broken pipe is not fatal
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(&payload);
        });
        let status = match child.wait_timeout(self.timeout).map_err(|e| e.to_string())? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                let _ = writer.join();
                return Err(format!("timed out after {:?}", self.timeout));
            }
        };
        let _ = writer.join();
        let mut out = String::new();
        child
            .stdout
            .take()
            .expect("piped")
            .read_to_string(&mut out)
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("exited with {status}"));
        }
        let text = out.trim();
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("expected one number, got `{text}`"))
    }

    /// The plug-in's score, or `None` with a logged warning on any failure.
    pub fn score_wav(&self, wav: &[u8]) -> Option<f64> {
        match self.run(wav) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("quality plug-in `{}`: {e}", self.program);
                None
            }
        }
    }
}

/// Renders log-filterbank features to audio with Griffin-Lim, treating the
/// feature bins as mel bands of the standard frontend.
pub fn features_to_wav(features: &Matrix, seed: u64) -> Option<Vec<u8>> {
    let config = MelConfig {
        n_mels: features.cols(),
        ..MelConfig::default()
    };
    let gl = griffin_lim(&FeatureSequence::new(features.clone()), &config, 16, seed).ok()?;
    wav_bytes(&gl.waveform, config.sample_rate).ok()
}

/// Score from the registered plug-in; `None` when absent or failing.
pub fn quality_score(plugin: Option<&QualityPlugin>, features: &Matrix, seed: u64) -> Option<f64> {
    let plugin = plugin?;
    let wav = features_to_wav(features, seed)?;
    plugin.score_wav(&wav)
}
