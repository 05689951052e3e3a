//! CSV logs and the aggregated report.
//!
//! `steps.csv` columns: `mode,episode,seed,step,delta,delta_net,transmitted,
//! primary_rejected,shadow_would_reject,fallback,latency_micros,action,expert_action`.
//! Optional fields are empty when absent; vectors are `;`-joined.
//!
//! `episodes.csv` columns: `mode,episode,seed,success,steps_used,latency_micros_total,config_hash`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, throughputs, RunReport};
use super::runner::{EpisodeRecord, StepRecord};
use crate::error::{Error, Result};

pub const STEPS_CSV: &str = "steps.csv";
pub const EPISODES_CSV: &str = "episodes.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CDF_CSV: &str = "throughput_cdf.csv";

#[derive(Debug, Serialize, Deserialize)]
struct StepRow {
    mode: String,
    episode: usize,
    seed: u64,
    step: usize,
    delta: Option<f64>,
    delta_net: Option<f64>,
    transmitted: bool,
    primary_rejected: Option<bool>,
    shadow_would_reject: Option<bool>,
    fallback: bool,
    latency_micros: u64,
    action: String,
    expert_action: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRow {
    mode: String,
    episode: usize,
    seed: u64,
    success: bool,
    steps_used: usize,
    latency_micros_total: u64,
    config_hash: String,
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn split(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| {
            x.parse::<f64>()
                .map_err(|e| Error::Report(format!("bad vector entry `{x}`: {e}")))
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

fn writer(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    Ok(csv::WriterBuilder::new()
        .has_headers(!exists)
        .from_writer(file))
}

/// Writes (or appends to) `steps.csv` and `episodes.csv` in `dir`.
pub fn write_logs(
    dir: &Path,
    records: &[EpisodeRecord],
    config_hash: &str,
    append: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut steps = writer(&dir.join(STEPS_CSV), append)?;
    let mut eps = writer(&dir.join(EPISODES_CSV), append)?;
    for r in records {
        for s in &r.steps {
            steps
                .serialize(StepRow {
                    mode: r.mode.clone(),
                    episode: r.episode,
                    seed: r.seed,
                    step: s.step,
                    delta: s.delta,
                    delta_net: s.delta_net,
                    transmitted: s.transmitted,
                    primary_rejected: s.primary_rejected,
                    shadow_would_reject: s.shadow_would_reject,
                    fallback: s.fallback,
                    latency_micros: s.latency_micros,
                    action: join(&s.action),
                    expert_action: join(&s.expert_action),
                })
                .map_err(csv_err)?;
        }
        eps.serialize(EpisodeRow {
            mode: r.mode.clone(),
            episode: r.episode,
            seed: r.seed,
            success: r.success,
            steps_used: r.steps_used(),
            latency_micros_total: r.latency_micros_total(),
            config_hash: config_hash.to_string(),
        })
        .map_err(csv_err)?;
    }
    steps.flush()?;
    eps.flush()?;
    Ok(())
}

/// Episodes grouped by mode (in first-seen order), with each mode's config hash.
pub type LoadedLogs = Vec<(String, String, Vec<EpisodeRecord>)>;

/// Rebuilds episode records from the two log files in `dir`.
pub fn read_logs(dir: &Path) -> Result<LoadedLogs> {
    let open = |name: &str| {
        let p = dir.join(name);
        csv::Reader::from_path(&p)
            .map_err(|e| Error::Report(format!("cannot read {}: {e}", p.display())))
    };
    let mut by_key: BTreeMap<(String, usize), EpisodeRecord> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for row in open(EPISODES_CSV)?.deserialize::<EpisodeRow>() {
        let row = row.map_err(csv_err)?;
        if !order.iter().any(|(m, _)| *m == row.mode) {
            order.push((row.mode.clone(), row.config_hash.clone()));
        }
        by_key.insert(
            (row.mode.clone(), row.episode),
            EpisodeRecord {
                mode: row.mode,
                episode: row.episode,
                seed: row.seed,
                success: row.success,
                steps: Vec::with_capacity(row.steps_used),
            },
        );
    }
    for row in open(STEPS_CSV)?.deserialize::<StepRow>() {
        let row = row.map_err(csv_err)?;
        let rec = by_key
            .get_mut(&(row.mode.clone(), row.episode))
            .ok_or_else(|| {
                Error::Report(format!(
                    "step row for unknown episode {} ({})",
                    row.episode, row.mode
                ))
            })?;
        rec.steps.push(StepRecord {
            step: row.step,
            delta: row.delta,
            delta_net: row.delta_net,
            transmitted: row.transmitted,
            primary_rejected: row.primary_rejected,
            shadow_would_reject: row.shadow_would_reject,
            fallback: row.fallback,
            latency_micros: row.latency_micros,
            action: split(&row.action)?,
            expert_action: split(&row.expert_action)?,
        });
    }
    let mut out = Vec::new();
    for (mode, hash) in order {
        let recs: Vec<EpisodeRecord> = by_key
            .iter()
            .filter(|((m, _), _)| *m == mode)
            .map(|(_, r)| r.clone())
            .collect();
        out.push((mode, hash, recs));
    }
    Ok(out)
}

/// One report per mode found in the logs.
pub fn reports_from_logs(dir: &Path) -> Result<Vec<(RunReport, Vec<f64>)>> {
    let logs = read_logs(dir)?;
    if logs.is_empty() {
        return Err(Error::Report(format!("no episodes in {}", dir.display())));
    }
    logs.into_iter()
        .map(|(_, hash, recs)| Ok((compute_metrics(&recs, &hash)?, throughputs(&recs))))
        .collect()
}

pub fn write_report_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in reports {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Empirical CDF points `(mode, throughput, cdf)` for plotting.
pub fn write_cdf_csv(path: &Path, curves: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["mode", "throughput", "cdf"])
        .map_err(csv_err)?;
    for (mode, tp) in curves {
        let n = tp.len() as f64;
        for (i, x) in tp.iter().enumerate() {
            w.write_record([
                mode.clone(),
                x.to_string(),
                ((i + 1) as f64 / n).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

/// Fixed-width text table, one row per report.
pub fn render_table(reports: &[RunReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>8} {:>10} {:>6} {:>6} {:>11} {:>11} {:>9} {:>9}",
        "mode",
        "episodes",
        "success",
        "mse",
        "tr",
        "tsr",
        "latency_ms",
        "throughput",
        "tp_p2.5",
        "fallbacks"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8.3} {:>10.5} {:>6.3} {:>6} {:>11.3} {:>11.2} {:>9.2} {:>9}",
            r.mode,
            r.episodes,
            r.task_success_rate,
            r.mse,
            r.tr,
            opt(r.tsr),
            r.mean_per_action_latency_ms,
            r.action_throughput,
            r.throughput_p2_5,
            r.fallback_count
        );
    }
    s
}

/// `report` subcommand body: reads logs in `dir`, writes the report CSV and
/// CDF CSV next to them, returns the rendered table.
pub fn report_dir(dir: &Path) -> Result<String> {
    let loaded = reports_from_logs(dir)?;
    let reports: Vec<RunReport> = loaded.iter().map(|(r, _)| r.clone()).collect();
    let curves: Vec<(String, Vec<f64>)> = loaded.into_iter().map(|(r, tp)| (r.mode, tp)).collect();
    write_report_csv(&dir.join(REPORT_CSV), &reports)?;
    write_cdf_csv(&dir.join(CDF_CSV), &curves)?;
    Ok(render_table(&reports))
}
