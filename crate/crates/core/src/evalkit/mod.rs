//! Metrics and the sweep harness.

mod metrics;
mod quality;
mod report;
mod sweep;

pub use metrics::{
    cosine_sim, decode_tokens, edit_distance, edit_rate, error_rates, speaker_embed, subunits, SpeakerEmbedding,
    MIN_EMBED_FRAMES,
};
pub use quality::{features_to_wav, quality_score, QualityPlugin};
pub use report::{EvalReport, EvalRow, CSV_HEADER};
pub use sweep::{
    run_sweep, Cell, EvalContext, GridSpec, Mode, SweepConfig, FULL_DATA_STEPS, ODE_AXIS, RANK_AXIS, SAMPLE_AXIS,
    STEP_AXIS,
};
