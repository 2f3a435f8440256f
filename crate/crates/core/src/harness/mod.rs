//! Metrics, experiment orchestration, result persistence and plots.

mod audit;
mod experiment;
mod pipeline;
mod plot;
mod report;
mod stats;

pub use audit::{audit_patch, background_noise_audit, write_audit, AuditPanel, AuditReport, AUDIT_PANELS, HISTOGRAM_BINS};
pub use experiment::{
    measure_slice, run_ablation, run_averaging_sweep, select_slices, slice_mask, slice_sample_seeds, Baseline,
    ExperimentConfig, ExperimentResult, LoadedModel, ModelSpec, Reference, RegimeKind, ResultRow, SliceMask,
    TestSlice, TrainingData, DPS_METHOD, NO_REGIME,
};
pub use pipeline::{run_pipeline, ModelChoice, PerClassBudget, PipelineConfig, PipelineOutput};
pub use report::{
    emit_report, load_result, results_csv_bytes, ReportFiles, MASK_DIR, PROVENANCE_FILE, RESULTS_FILE,
    RESULTS_HEADER, SUMMARY_FILE, SWEEP_PLOT,
};
pub use stats::{jarque_bera, mean, paired_effect_size, std_dev, wilcoxon_signed_rank, WilcoxonResult};

use crate::error::{Error, Result};
use crate::phantoms::Image;

/// `‖recon − reference‖₂ / ‖reference‖₂`.
pub fn nrmse(recon: &Image, reference: &Image) -> Result<f64> {
    if recon.dim() != reference.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: reconstruction {:?} vs reference {:?}",
            recon.dim(),
            reference.dim()
        )));
    }
    let ref_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(ref_norm > 0.0) {
        return Err(Error::invalid("reference image has zero norm"));
    }
    let err = recon.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(err / ref_norm)
}
