//! Episode runner, inference modes, metrics and CSV reporting.

mod config;
mod metrics;
mod report;
mod runner;

pub use config::{
    CalibrationConfig, GateConfig, LatencyConfig, RunConfig, TransportConfig, TransportKind,
    DEFAULT_ALPHA, DEFAULT_CALIBRATION_SAMPLES, DEFAULT_EPISODES,
};
pub use metrics::{
    compute_metrics, episode_throughput, percentile, shadow_tsr, throughputs, RunReport,
};
pub use report::{
    read_logs, render_table, report_dir, reports_from_logs, write_cdf_csv, write_logs,
    write_report_csv, LoadedLogs, CDF_CSV, EPISODES_CSV, REPORT_CSV, STEPS_CSV,
};
pub use runner::{EpisodeRecord, Harness, Mode, StepRecord};

use crate::calibrate::{calibrate_corpus, CalibrationArtifact, CalibrationCorpus};
use crate::error::{Error, Result};

/// Runs one mode for `cfg.episodes` episodes. `adahi` needs `artifact`.
pub fn run_mode(
    harness: &Harness,
    mode: Mode,
    artifact: Option<&CalibrationArtifact>,
) -> Result<(Vec<EpisodeRecord>, RunReport)> {
    let mut gate = match (mode, artifact) {
        (Mode::Adahi, Some(art)) => harness.gate_from_artifact(art)?,
        (Mode::Adahi, None) => {
            return Err(Error::Artifact(
                "adahi mode needs a calibration artifact; run `adahi calibrate` first and pass it with --artifact"
                    .into(),
            ))
        }
        (_, Some(art)) => harness.gate_from_artifact(art)?,
        (_, None) => harness.logging_gate()?,
    };
    let records = harness.run(mode, &mut gate)?;
    let report = compute_metrics(&records, &harness.config().config_hash())?;
    Ok((records, report))
}

/// All five modes on one config, random mode matched to ADAHI's realized TR.
/// Returned in the order draft_only, random, adahi, hybrid, target_only.
pub fn compare_modes(
    harness: &Harness,
    artifact: &CalibrationArtifact,
) -> Result<Vec<(Vec<EpisodeRecord>, RunReport)>> {
    let adahi = run_mode(harness, Mode::Adahi, Some(artifact))?;
    let tr = adahi.1.tr;
    Ok(vec![
        run_mode(harness, Mode::DraftOnly, Some(artifact))?,
        run_mode(harness, Mode::Random { tr }, Some(artifact))?,
        adahi,
        run_mode(harness, Mode::Hybrid, Some(artifact))?,
        run_mode(harness, Mode::TargetOnly, Some(artifact))?,
    ])
}

/// Artifact re-targeted to another transmission rate on the same corpus.
/// `tr >= 1` transmits at every step after the first, `tr <= 0` never.
pub fn retarget(
    corpus: &CalibrationCorpus,
    base: &CalibrationArtifact,
    harness: &Harness,
    tr: f64,
) -> Result<CalibrationArtifact> {
    if tr >= 1.0 || tr <= 0.0 {
        let mut art = base.clone();
        art.target_tr = tr.clamp(0.0, 1.0);
        art.delta_th = if tr >= 1.0 { 0.0 } else { f64::INFINITY };
        art.tau_star = f64::NAN;
        return Ok(art);
    }
    let mut settings = harness.config().calibration.settings();
    settings.target_tr = tr;
    let mut corpus = corpus.clone();
    calibrate_corpus(
        &mut corpus,
        &settings,
        harness.config().gate.alpha,
        harness.provenance(),
    )
}

/// TR ablation: one ADAHI report per requested rate, all from one corpus.
pub fn sweep(harness: &Harness, trs: &[f64]) -> Result<Vec<(f64, RunReport)>> {
    let settings = harness.config().calibration.settings();
    let corpus = harness.collect_corpus(settings.min_samples, 0)?;
    let base = calibrate_corpus(
        &mut corpus.clone(),
        &settings,
        harness.config().gate.alpha,
        harness.provenance(),
    )?;
    trs.iter()
        .map(|&tr| {
            let art = retarget(&corpus, &base, harness, tr)?;
            let (_, report) = run_mode(harness, Mode::Adahi, Some(&art))?;
            Ok((tr, report))
        })
        .collect()
}
