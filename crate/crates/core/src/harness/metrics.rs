use serde::{Deserialize, Serialize};

use super::runner::EpisodeRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub episodes: usize,
    pub steps: usize,
    pub task_success_rate: f64,
    /// Mean over all steps and action coordinates of `(executed - expert)^2`.
    pub mse: f64,
    pub tr: f64,
    /// Absent when no step was skipped or no shadow verdicts were recorded.
    pub tsr: Option<f64>,
    /// Mean over episodes of episode latency divided by its action count.
    pub mean_per_action_latency_ms: f64,
    /// Mean over episodes of actions per second of episode latency.
    pub action_throughput: f64,
    pub throughput_p2_5: f64,
    pub throughput_p50: f64,
    pub fallback_count: usize,
    pub config_hash: String,
}

/// Percentile with linear interpolation between closest ranks; `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Actions per second for one episode.
pub fn episode_throughput(rec: &EpisodeRecord) -> f64 {
    rec.steps_used() as f64 / (rec.latency_micros_total() as f64 / 1e6)
}

/// Per-episode throughputs, ascending.
pub fn throughputs(records: &[EpisodeRecord]) -> Vec<f64> {
    let mut t: Vec<f64> = records.iter().map(episode_throughput).collect();
    t.sort_by(f64::total_cmp);
    t
}

/// TSR: fraction of shadow-verified skipped steps whose primary index would
/// have been accepted.
pub fn shadow_tsr(records: &[EpisodeRecord]) -> Option<f64> {
    let verdicts: Vec<bool> = records
        .iter()
        .flat_map(|r| &r.steps)
        .filter(|s| !s.transmitted)
        .filter_map(|s| s.shadow_would_reject)
        .collect();
    if verdicts.is_empty() {
        return None;
    }
    Some(verdicts.iter().filter(|&&rej| !rej).count() as f64 / verdicts.len() as f64)
}

pub fn compute_metrics(records: &[EpisodeRecord], config_hash: &str) -> Result<RunReport> {
    if records.is_empty() {
        return Err(Error::Report("no episodes to report on".into()));
    }
    if let Some(r) = records.iter().find(|r| r.steps.is_empty()) {
        return Err(Error::Report(format!("episode {} has no steps", r.episode)));
    }
    let mode = records[0].mode.clone();
    if let Some(r) = records.iter().find(|r| r.mode != mode) {
        return Err(Error::Report(format!(
            "mixed modes `{mode}` and `{}` in one report",
            r.mode
        )));
    }
    let episodes = records.len();
    let steps: usize = records.iter().map(|r| r.steps_used()).sum();
    let successes = records.iter().filter(|r| r.success).count();
    let transmitted = records
        .iter()
        .flat_map(|r| &r.steps)
        .filter(|s| s.transmitted)
        .count();
    let fallback_count = records
        .iter()
        .flat_map(|r| &r.steps)
        .filter(|s| s.fallback)
        .count();

    let mut se = 0.0;
    let mut coords = 0usize;
    for s in records.iter().flat_map(|r| &r.steps) {
        if s.action.len() != s.expert_action.len() {
            return Err(Error::Report(format!(
                "step {} has mismatched action lengths",
                s.step
            )));
        }
        se += s
            .action
            .iter()
            .zip(&s.expert_action)
            .map(|(a, e)| (a - e).powi(2))
            .sum::<f64>();
        coords += s.action.len();
    }

    let per_action: f64 = records
        .iter()
        .map(|r| r.latency_micros_total() as f64 / 1e3 / r.steps_used() as f64)
        .sum::<f64>()
        / episodes as f64;
    let tp = throughputs(records);
    Ok(RunReport {
        mode,
        episodes,
        steps,
        task_success_rate: successes as f64 / episodes as f64,
        mse: se / coords.max(1) as f64,
        tr: transmitted as f64 / steps as f64,
        tsr: shadow_tsr(records),
        mean_per_action_latency_ms: per_action,
        action_throughput: tp.iter().sum::<f64>() / tp.len() as f64,
        throughput_p2_5: percentile(&tp, 2.5),
        throughput_p50: percentile(&tp, 50.0),
        fallback_count,
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner::StepRecord;

    fn step(t: usize, transmitted: bool, latency_micros: u64) -> StepRecord {
        StepRecord {
            step: t,
            delta: None,
            delta_net: None,
            transmitted,
            primary_rejected: transmitted.then_some(false),
            shadow_would_reject: (!transmitted).then_some(t % 2 == 0),
            fallback: false,
            latency_micros,
            action: vec![1.0, 0.0],
            expert_action: vec![0.0, 0.0],
        }
    }

    fn episode(n: usize, latency: u64, transmitted: bool) -> EpisodeRecord {
        EpisodeRecord {
            mode: "hybrid".into(),
            episode: 0,
            seed: 0,
            success: true,
            steps: (0..n).map(|t| step(t, transmitted, latency)).collect(),
        }
    }

    #[test]
    fn definitional_latency_and_throughput() {
        let r = compute_metrics(&[episode(10, 100_000, true)], "h").unwrap();
        assert!((r.mean_per_action_latency_ms - 100.0).abs() < 1e-12);
        assert!((r.action_throughput - 10.0).abs() < 1e-12);
        assert_eq!(r.tr, 1.0);
        assert_eq!(r.tsr, None);
        assert_eq!(r.mse, 0.5);
        assert_eq!(r.task_success_rate, 1.0);
    }

    #[test]
    fn tsr_counts_only_skips() {
        let r = compute_metrics(&[episode(4, 1000, false)], "h").unwrap();
        assert_eq!(r.tr, 0.0);
        assert_eq!(r.tsr, Some(0.5));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(compute_metrics(&[], "h"), Err(Error::Report(_))));
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 50.0), 3.0);
        assert_eq!(percentile(&xs, 100.0), 5.0);
        assert!((percentile(&xs, 2.5) - 1.1).abs() < 1e-12);
    }
}
