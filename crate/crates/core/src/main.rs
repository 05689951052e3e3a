use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use adahi::calibrate::CalibrationArtifact;
use adahi::harness::{
    self, render_table, report_dir, write_logs, Harness, Mode, RunConfig, RunReport,
};
use adahi::proto::{ServerHandle, ServerTiming};
use adahi::specsamp::AdjustRule;

const ARTIFACT_FILE: &str = "calibration.toml";

#[derive(Parser)]
#[command(
    name = "adahi",
    version,
    about = "Deviation-gated hybrid inference over residual-quantized actions"
)]
struct Cli {
    /// Run config (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and logs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Resample rejected codes from max(q - p, 0) instead of max(p - q, 0).
    #[arg(long, global = true)]
    paper_literal_adjust: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a hybrid-mode corpus and write the calibration artifact.
    Calibrate {
        /// Target transmission rate; overrides the config.
        #[arg(long)]
        target_tr: Option<f64>,
    },
    /// Serve POST /verify and GET /health until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: SocketAddr,
    },
    /// Run episodes in one mode and append the logs to the output directory.
    Run {
        /// draft_only, target_only, hybrid, random or adahi.
        #[arg(long)]
        mode: String,
        /// Calibration artifact; defaults to <out>/calibration.toml.
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Transmission rate for random mode. Without it, random mode first
        /// runs adahi and matches its rate.
        #[arg(long)]
        tr: Option<f64>,
        /// Replace existing logs instead of appending.
        #[arg(long)]
        fresh: bool,
    },
    /// Run all five modes (random matched to adahi) and write logs and report.
    Compare {
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Aggregate step and episode logs into a table, report CSV and CDF CSV.
    Report {
        /// Directory holding steps.csv and episodes.csv; defaults to --out.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// ADAHI at several transmission rates from one calibration corpus.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.8,0.6,0.4")]
        tr: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Write the run's codebooks as a binary fixture.
    ExportCodebooks { path: PathBuf },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.paper_literal_adjust {
        cfg.adjust_rule = AdjustRule::Reversed;
    }
    Ok(cfg)
}

fn artifact_path(cli: &Cli, given: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    given
        .clone()
        .or_else(|| cfg.gate.artifact.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| cli.out.join(ARTIFACT_FILE))
}

fn load_artifact(path: &Path) -> anyhow::Result<CalibrationArtifact> {
    if !path.exists() {
        bail!(
            "calibration artifact {} not found; run `adahi calibrate` with the same config first",
            path.display()
        );
    }
    CalibrationArtifact::read(path).with_context(|| format!("reading {}", path.display()))
}

fn print_sweep(rows: &[(f64, RunReport)]) {
    println!("{:>6} {}", "tr_set", render_table(&[]).trim_end());
    for (tr, r) in rows {
        print!(
            "{tr:>6.2} {}",
            render_table(std::slice::from_ref(r))
                .lines()
                .nth(1)
                .unwrap_or_default()
        );
        println!();
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Command::Calibrate { target_tr } => {
            if let Some(tr) = target_tr {
                cfg.calibration.target_tr = *tr;
            }
            let h = Harness::new(cfg)?;
            let art = h.calibrate()?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join(ARTIFACT_FILE);
            art.write(&path)?;
            println!(
                "{}: form={} r={:.4} sigma={:.5} delta_th={:.4} tau*={:.4} samples={} -> {}",
                art.env,
                art.form,
                art.linear_r.abs().max(art.logarithmic_r.abs()),
                art.sigma,
                art.delta_th,
                art.tau_star,
                art.samples,
                path.display()
            );
        }
        Command::Serve { addr } => {
            let h = Harness::new(cfg)?;
            let server = ServerHandle::spawn(h.service(ServerTiming::Measured), *addr)?;
            println!(
                "serving {} on {} (codebooks {})",
                h.env().name,
                server.endpoint(),
                h.codebooks().checksum()
            );
            server.join();
        }
        Command::Run {
            mode,
            artifact,
            episodes,
            tr,
            fresh,
        } => {
            if let Some(n) = episodes {
                cfg.episodes = *n;
            }
            let mut mode: Mode = mode.parse()?;
            let art_path = artifact_path(&cli, artifact, &cfg);
            let h = Harness::new(cfg)?;
            let art = match mode {
                Mode::Adahi => Some(load_artifact(&art_path)?),
                _ if art_path.exists() => Some(load_artifact(&art_path)?),
                _ => None,
            };
            if let Mode::Random { .. } = mode {
                let rate = match (tr, &art) {
                    (Some(r), _) => *r,
                    (None, Some(a)) => harness::run_mode(&h, Mode::Adahi, Some(a))?.1.tr,
                    (None, None) => bail!(
                        "random mode needs --tr or a calibration artifact to match (run `adahi calibrate`)"
                    ),
                };
                mode = Mode::Random { tr: rate };
            }
            let (records, report) = harness::run_mode(&h, mode, art.as_ref())?;
            write_logs(&cli.out, &records, &report.config_hash, !fresh)?;
            print!("{}", render_table(&[report]));
        }
        Command::Compare { artifact, episodes } => {
            if let Some(n) = episodes {
                cfg.episodes = *n;
            }
            let art = load_artifact(&artifact_path(&cli, artifact, &cfg))?;
            let h = Harness::new(cfg)?;
            let results = harness::compare_modes(&h, &art)?;
            for (i, (records, report)) in results.iter().enumerate() {
                write_logs(&cli.out, records, &report.config_hash, i > 0)?;
            }
            print!("{}", report_dir(&cli.out)?);
        }
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| cli.out.clone());
            print!("{}", report_dir(&dir)?);
        }
        Command::Sweep { tr, episodes } => {
            if let Some(n) = episodes {
                cfg.episodes = *n;
            }
            let h = Harness::new(cfg)?;
            let rows = harness::sweep(&h, tr)?;
            std::fs::create_dir_all(&cli.out)?;
            let mut w = csv::Writer::from_path(cli.out.join("sweep.csv"))?;
            w.write_record([
                "tr_set",
                "tr",
                "task_success_rate",
                "mse",
                "mean_per_action_latency_ms",
            ])?;
            for (set, r) in &rows {
                w.write_record([
                    set.to_string(),
                    r.tr.to_string(),
                    r.task_success_rate.to_string(),
                    r.mse.to_string(),
                    r.mean_per_action_latency_ms.to_string(),
                ])?;
            }
            w.flush()?;
            print_sweep(&rows);
        }
        Command::ExportCodebooks { path } => {
            let h = Harness::new(cfg)?;
            h.codebooks().write_fixture(path)?;
            println!("{} -> {}", h.codebooks().checksum(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
