//! `herdid`: operator CLI chaining the identification pipeline.
//!
//! Commands are pure functions of (config file, input directory) to an
//! output directory: reruns with the same config and seed are
//! byte-identical except the experiment's marked wall-clock field. Logs go
//! to stderr, summaries to stdout, artifacts to files. On failure the
//! output directory gains an `INCOMPLETE` marker naming the failed stage.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use herdid_core::classifier::{self, load_checkpoint, save_checkpoint};
use herdid_core::consensus::{classify_visit, read_report, write_report, ConsensusResult};
use herdid_core::dataset::{load_frames, partition_by_day, preprocess_frames};
use herdid_core::evaluation::{metrics_report, LabeledResult};
use herdid_core::pointcloud::write_xyz_file;
use herdid_core::recalibration::{run_experiment, ExperimentConfig};
use herdid_core::stream::{
    align_ground_truth, read_rfid_csv, segment_visits, write_manifest, ManifestEntry, Visit,
};
use herdid_core::synthdata::generate_scenario;
use herdid_core::{Cloud, Model};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "herdid", version, about = "Temporal-consensus identification pipeline")]
struct Cli {
    /// TOML run configuration; module defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Force sequential, order-independent execution and suppress the
    /// wall-clock field. Every stage is already deterministic, so this
    /// only changes the experiment report's timing field.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic multi-day herd dataset.
    Synth,
    /// Run the preprocessing chain over a raw dataset directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the base classifier on the schedule's training day.
    Train {
        #[arg(long)]
        input: PathBuf,
    },
    /// Classify visits with a checkpoint and write the consensus report.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one 24-hour block (0-based).
        #[arg(long)]
        day: Option<usize>,
    },
    /// Score a consensus report against RFID-aligned ground truth.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Restrict to one 24-hour block (0-based).
        #[arg(long)]
        day: Option<usize>,
    },
    /// Full multi-day protocol: base training, evaluation and
    /// pseudo-label re-calibration rounds.
    Experiment {
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        // mark partial outputs so consumers never trust them
        if cli.out.exists() {
            let _ = std::fs::write(cli.out.join("INCOMPLETE"), format!("{e:#}\n"));
        }
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?.resolve(cli.seed);
    cfg.validate()
        .map_err(|e| anyhow::anyhow!(e))
        .context("config")?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out),
        Command::Preprocess { input } => cmd_preprocess(&cfg, input, &cli.out),
        Command::Train { input } => cmd_train(&cfg, input, &cli.out),
        Command::Infer {
            input,
            checkpoint,
            day,
        } => cmd_infer(&cfg, input, checkpoint, *day, &cli.out),
        Command::Evaluate { input, report, day } => {
            cmd_evaluate(&cfg, input, report, *day, &cli.out)
        }
        Command::Experiment { input } => {
            cmd_experiment(&cfg, input, &cli.out, cli.deterministic)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("config: cannot read {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("config: cannot parse {}", path.display()))
}

/// Load a preprocessed dataset directory into RFID-aligned visits.
fn load_visits(dir: &Path, cfg: &RunConfig) -> Result<Vec<Visit>> {
    let frames = load_frames(dir)
        .with_context(|| format!("load: dataset directory {}", dir.display()))?;
    eprintln!("loaded {} frames from {}", frames.len(), dir.display());
    let visits = segment_visits(frames, cfg.gap_threshold).context("segment")?;
    let rfid_path = dir.join("rfid.csv");
    if rfid_path.exists() {
        let rfid = read_rfid_csv(&rfid_path).context("align: rfid.csv")?;
        Ok(align_ground_truth(visits, &rfid))
    } else {
        eprintln!("no rfid.csv: visits stay unlabeled");
        Ok(visits)
    }
}

fn select_day(visits: Vec<Visit>, day: Option<usize>, day_seconds: f64) -> Result<Vec<Visit>> {
    let Some(d) = day else { return Ok(visits) };
    let mut days = partition_by_day(visits, day_seconds);
    if d >= days.len() {
        bail!("day {d} out of range ({} days present)", days.len());
    }
    Ok(std::mem::take(&mut days[d]))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let summary = generate_scenario(&cfg.scenario, out).context("synth")?;
    eprintln!("wrote dataset to {}", out.display());
    println!(
        "synth: {} visits, {} frames written ({} generated, drop rate {:.3}), {} contaminated",
        summary.visits,
        summary.frames_written,
        summary.frames_generated,
        summary.drop_rate,
        summary.contaminated_visits
    );
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let frames = load_frames(input)
        .with_context(|| format!("preprocess: dataset directory {}", input.display()))?;
    let total = frames.len();
    let (kept, dropped) = preprocess_frames(frames, &cfg.preprocess, cfg.seed);
    std::fs::create_dir_all(out.join("clouds")).context("preprocess: create output dir")?;

    let mut manifest = Vec::with_capacity(kept.len());
    for f in &kept {
        let rel = format!("clouds/{}.xyz", f.frame_id);
        write_xyz_file(&f.cloud, out.join(&rel))
            .with_context(|| format!("preprocess: write {rel}"))?;
        manifest.push(ManifestEntry {
            frame_id: f.frame_id.clone(),
            station_id: f.station_id.clone(),
            timestamp: f.timestamp,
            cloud_path: rel,
        });
    }
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(out.join("manifest.jsonl")).context("preprocess: manifest")?,
    );
    write_manifest(&manifest, &mut w).context("preprocess: manifest")?;
    drop(w);

    let mut drops = String::new();
    for d in &dropped {
        drops.push_str(&serde_json::to_string(d).context("preprocess: drop log")?);
        drops.push('\n');
    }
    std::fs::write(out.join("drops.jsonl"), drops).context("preprocess: drop log")?;

    // sidecar files ride along unchanged
    for name in ["rfid.csv", "ground_truth.csv"] {
        let src = input.join(name);
        if src.exists() {
            std::fs::copy(&src, out.join(name))
                .with_context(|| format!("preprocess: copy {name}"))?;
        }
    }

    println!(
        "preprocess: kept {}/{total} frames, dropped {}",
        kept.len(),
        dropped.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let visits = load_visits(input, cfg)?;
    let days = partition_by_day(visits, cfg.day_seconds);
    let d = cfg.schedule.train_day;
    if d >= days.len() {
        bail!("train: train_day {d} out of range ({} days present)", days.len());
    }
    let data: Vec<(Cloud, usize)> = days[d]
        .iter()
        .filter_map(|v| v.true_label.map(|y| (v, y)))
        .flat_map(|(v, y)| v.frames.iter().map(move |f| (f.cloud.clone(), y)))
        .collect();
    eprintln!("training on {} labeled frames from day {}", data.len(), d + 1);
    let (params, report) = classifier::train(&cfg.model, &data, &cfg.train).context("train")?;

    std::fs::create_dir_all(out).context("train: create output dir")?;
    save_checkpoint(&params, out.join("model.json")).context("train: checkpoint")?;
    let json = serde_json::to_string_pretty(&report).context("train: report")?;
    std::fs::write(out.join("train_report.json"), json).context("train: report")?;
    println!(
        "train: best validation accuracy {:.4} at epoch {}",
        report.best_val_accuracy,
        report.best_epoch + 1
    );
    Ok(())
}

fn cmd_infer(
    cfg: &RunConfig,
    input: &Path,
    checkpoint: &Path,
    day: Option<usize>,
    out: &Path,
) -> Result<()> {
    if !checkpoint.exists() {
        bail!("infer: checkpoint not found: {}", checkpoint.display());
    }
    let params: Model = load_checkpoint(checkpoint).context("infer: checkpoint")?;
    let visits = select_day(load_visits(input, cfg)?, day, cfg.day_seconds).context("infer")?;
    let results = visits
        .iter()
        .map(|v| classify_visit(v, &params, &cfg.consensus))
        .collect::<Result<Vec<_>, _>>()
        .context("infer")?;

    std::fs::create_dir_all(out).context("infer: create output dir")?;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(out.join("consensus_report.jsonl")).context("infer: report")?,
    );
    write_report(&results, &mut w).context("infer: report")?;
    let assigned = results.iter().filter(|r| r.assignment.is_assigned()).count();
    println!("infer: assigned {assigned}/{} visits", results.len());
    Ok(())
}

fn cmd_evaluate(
    cfg: &RunConfig,
    input: &Path,
    report: &Path,
    day: Option<usize>,
    out: &Path,
) -> Result<()> {
    let file = std::fs::File::open(report)
        .with_context(|| format!("evaluate: cannot open {}", report.display()))?;
    let results: Vec<ConsensusResult> =
        read_report(std::io::BufReader::new(file)).context("evaluate: report")?;
    let visits = select_day(load_visits(input, cfg)?, day, cfg.day_seconds).context("evaluate")?;
    let labels: std::collections::HashMap<&str, usize> = visits
        .iter()
        .filter_map(|v| v.true_label.map(|y| (v.visit_id.as_str(), y)))
        .collect();
    let outcomes: Vec<LabeledResult> = results
        .into_iter()
        .map(|r| {
            let true_label = labels.get(r.visit_id.as_str()).copied();
            LabeledResult { result: r, true_label }
        })
        .collect();
    let metrics = metrics_report(&outcomes);

    std::fs::create_dir_all(out).context("evaluate: create output dir")?;
    let json = serde_json::to_string_pretty(&metrics).context("evaluate: metrics")?;
    std::fs::write(out.join("metrics.json"), json).context("evaluate: metrics")?;
    let pct = |v: Option<f64>| match v {
        Some(f) => format!("{:.2}%", f * 100.0),
        None => "NA".to_string(),
    };
    println!(
        "evaluate: frame {} visit {} conversion {} ({}/{} assigned)",
        pct(metrics.frame_accuracy),
        pct(metrics.visit_accuracy),
        pct(metrics.conversion),
        metrics.assigned_visits,
        metrics.total_visits
    );
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, input: &Path, out: &Path, deterministic: bool) -> Result<()> {
    let t0 = Instant::now();
    let visits = load_visits(input, cfg)?;
    let days = partition_by_day(visits, cfg.day_seconds);
    eprintln!(
        "experiment: {} days, {} visits",
        days.len(),
        days.iter().map(Vec::len).sum::<usize>()
    );
    let exp_cfg = ExperimentConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        fine_tune_epochs: cfg.fine_tune_epochs,
        fine_tune_learning_rate: cfg.fine_tune_learning_rate,
        consensus: cfg.consensus.clone(),
        harvest_mode: cfg.harvest_mode,
    };
    let mut report = run_experiment(&days, &cfg.schedule, &exp_cfg).context("experiment")?;
    if !deterministic {
        report.wall_clock_seconds = Some(t0.elapsed().as_secs_f64());
    }

    std::fs::create_dir_all(out).context("experiment: create output dir")?;
    let csv = report.to_csv();
    std::fs::write(out.join("experiment.csv"), &csv).context("experiment: csv")?;
    let json = serde_json::to_string_pretty(&report).context("experiment: json")?;
    std::fs::write(out.join("experiment.json"), json).context("experiment: json")?;
    print!("{csv}");
    Ok(())
}
