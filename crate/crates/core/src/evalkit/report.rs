use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated configuration. Similarity is the mean cosine ×100, error
/// rates are percentages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub descriptor: String,
    pub simm: f64,
    pub wer: f64,
    pub cer: f64,
    pub quality: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Mean similarity ×100 per evaluated speaker, in speaker order.
    pub speaker_simm: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const CSV_HEADER: &str = "descriptor,simm,wer,cer,quality,n,seed,config_hash";

impl EvalReport {
    pub fn row(&self, descriptor: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.descriptor == descriptor)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let q = r.quality.map(|q| format!("{q:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{q},{},{},{}\n",
                r.descriptor, r.simm, r.wer, r.cer, r.n, r.seed, r.config_hash
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(format!("json encoding failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed report: {e}")))
    }

    /// Checks the row invariants: similarity within [-100, 100] and
    /// non-negative error rates.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(-100.0..=100.0).contains(&r.simm) || !(r.wer >= 0.0) || !(r.cer >= 0.0) || r.n == 0 {
                return Err(Error::Invalid(format!("report row `{}` is out of range", r.descriptor)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> EvalRow {
        EvalRow {
            descriptor: "baseline ode=30 regime=wild".into(),
            simm: 97.5,
            wer: 12.0,
            cer: 4.25,
            quality: None,
            n: 4,
            seed: 7,
            config_hash: "abc".into(),
            speaker_simm: vec![97.0, 98.0],
        }
    }

    #[test]
    fn csv_layout() {
        let mut r = EvalReport { rows: vec![row()] };
        assert_eq!(
            r.to_csv(),
            format!("{CSV_HEADER}\nbaseline ode=30 regime=wild,97.5000,12.0000,4.2500,,4,7,abc\n")
        );
        r.rows[0].quality = Some(3.05);
        assert!(r.to_csv().contains(",4.2500,3.0500,4,"));
    }

    #[test]
    fn json_round_trip() {
        let r = EvalReport { rows: vec![row()] };
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(EvalReport::from_json("{").is_err());
    }

    #[test]
    fn range_checks() {
        let mut r = EvalReport { rows: vec![row()] };
        r.validate().unwrap();
        r.rows[0].simm = 100.5;
        assert!(r.validate().is_err());
        r.rows[0].simm = 0.0;
        r.rows[0].wer = -1.0;
        assert!(r.validate().is_err());
    }
}
