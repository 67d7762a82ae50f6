//! The `voxelrf` command line.
//!
//! Besides the per-command flags, any configuration key can be set with a
//! flag of the same dotted name, e.g. `--train.total_iters 500` or
//! `--scene.tx_modulation=0`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use toml::Value;
use voxelrf_core::metrics::{cdf, percentile_summary, rssi_error, ssim, PercentileSummary, SsimConfig};
use voxelrf_core::renderer::{aggregate_rssi, default_step, render_spectrum};
use voxelrf_core::trainer::{calibration_offset, LogEntry, Trainer};
use voxelrf_core::{SceneGeometry, Vec3};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{parse_value, RunConfig};
use crate::dataset::{generate_dataset, split_indices, Dataset, SynthOptions};
use crate::error::{Error, Result};
use crate::scene::{fine_step_for, SyntheticScene};
use crate::spectrum_io::write_spectrum;

#[derive(Debug, Parser)]
#[command(name = "voxelrf", version, about = "Voxelized wireless radiance fields")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in defaults: `desk` or `paper` (sets `profile`).
    #[arg(long, global = true)]
    pub profile: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with the reference renderer.
    Synth(SynthArgs),
    /// Train a model on the training split of a dataset.
    Train(TrainArgs),
    /// Render the spectrum for one transmitter position.
    Infer(InferArgs),
    /// Score a model on the held-out split of a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene preset (`scene.preset`).
    #[arg(long)]
    scene: Option<String>,
    /// Number of transmitters (`data.n_tx`).
    #[arg(long)]
    n_tx: Option<usize>,
    /// `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `scene.tx_modulation`.
    #[arg(long)]
    tx_modulation: Option<f64>,
    /// Output dataset directory (`data.dir`).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (`data.dir`).
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint to write (`paths.checkpoint`).
    #[arg(long)]
    out: Option<String>,
    /// Loss log CSV (`paths.log`).
    #[arg(long)]
    log: Option<String>,
    /// `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `train.split_seed`.
    #[arg(long)]
    split_seed: Option<u64>,
    /// `train.total_iters`.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Transmitter position `x,y,z` (`infer.tx`).
    #[arg(long, allow_hyphen_values = true)]
    tx: Option<String>,
    /// Spectrum file to write (`paths.out`).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Dataset directory (`data.dir`).
    #[arg(long)]
    data: Option<String>,
    /// Split seed; defaults to the one used in training (`eval.split_seed`).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Directory for metric CSVs (`paths.out`).
    #[arg(long)]
    out: Option<String>,
    /// Also predict and score aggregate RSSI (`eval.rssi`).
    #[arg(long)]
    rssi: bool,
}

/// Dotted overrides in command-line order.
pub type Overrides = Vec<(String, Value)>;

/// Separates `--section.key value` / `--section.key=value` overrides from
/// the arguments clap parses.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let raw = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name, parse_value(&raw)));
    }
    Ok((rest, overrides))
}

fn push<T: Into<Value>>(o: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), v.into()));
    }
}

fn resolve(cli: &Cli, mut overrides: Vec<(String, Value)>) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    // Dedicated flags are applied before generic dotted overrides.
    let mut flags = Vec::new();
    push(&mut flags, "profile", cli.profile.clone());
    match &cli.command {
        Command::Synth(a) => {
            push(&mut flags, "scene.preset", a.scene.clone());
            push(&mut flags, "data.n_tx", a.n_tx.map(|v| v as i64));
            push(&mut flags, "data.seed", a.seed.map(|v| v as i64));
            push(&mut flags, "scene.tx_modulation", a.tx_modulation);
            push(&mut flags, "data.dir", a.out.clone());
        }
        Command::Train(a) => {
            push(&mut flags, "data.dir", a.data.clone());
            push(&mut flags, "paths.checkpoint", a.out.clone());
            push(&mut flags, "paths.log", a.log.clone());
            push(&mut flags, "train.seed", a.seed.map(|v| v as i64));
            push(&mut flags, "train.split_seed", a.split_seed.map(|v| v as i64));
            push(&mut flags, "train.total_iters", a.iters.map(|v| v as i64));
        }
        Command::Infer(a) => {
            push(&mut flags, "paths.checkpoint", a.checkpoint.clone());
            push(&mut flags, "infer.tx", a.tx.as_deref().map(parse_value));
            push(&mut flags, "paths.out", a.out.clone());
        }
        Command::Eval(a) => {
            push(&mut flags, "paths.checkpoint", a.checkpoint.clone());
            push(&mut flags, "data.dir", a.data.clone());
            push(&mut flags, "eval.split_seed", a.split_seed.map(|v| v as i64));
            push(&mut flags, "paths.out", a.out.clone());
            if a.rssi {
                push(&mut flags, "eval.rssi", Some(true));
            }
        }
    }
    flags.append(&mut overrides);
    RunConfig::resolve(text.as_deref(), &flags)
}

/// Parses `args` (without the program name) and runs the command. Returns
/// the process exit code; diagnostics go to stderr.
pub fn run(args: Vec<String>) -> u8 {
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once("voxelrf".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { 0 } else { 2 };
        }
    };
    match execute(&cli, overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, overrides: Vec<(String, Value)>) -> Result<()> {
    let cfg = resolve(cli, overrides)?;
    match cli.command {
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Infer(_) => cmd_infer(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["data.dir"])?;
    let scene = SyntheticScene::preset(&cfg.scene.preset, cfg.scene.tx_modulation)?;
    let fine_step = cfg
        .data
        .fine_step
        .unwrap_or_else(|| fine_step_for(cfg.train.dims, scene.bbox()));
    let opts = SynthOptions {
        n_tx: cfg.data.n_tx,
        seed: cfg.data.seed,
        azimuths: cfg.scene.azimuths,
        elevations: cfg.scene.elevations,
        fine_step,
        rssi_offset_db: cfg.data.rssi_offset_db,
        rssi_noise_db: cfg.data.rssi_noise_db,
    };
    let dir = cfg.data.dir.as_deref().unwrap();
    let manifest = generate_dataset(&scene, &opts, dir)?;
    eprintln!(
        "wrote {} spectra ({}x{}) to {dir}, normalization {}",
        manifest.records.len(),
        opts.azimuths,
        opts.elevations,
        manifest.scene.normalization
    );
    Ok(())
}

fn log_path(cfg: &RunConfig) -> PathBuf {
    match &cfg.paths.log {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(format!("{}.loss.csv", cfg.paths.checkpoint.as_deref().unwrap())),
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["data.dir", "paths.checkpoint"])?;
    let train_cfg = cfg.train_config()?;
    let dataset = Dataset::load(cfg.data.dir.as_deref().unwrap())?;
    let (train_idx, _) = split_indices(dataset.len(), cfg.train.split_seed);
    if train_idx.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let train_set = dataset.data.subset(&train_idx);
    let mut trainer = Trainer::new(&train_set, train_cfg.clone())?;
    let started = Instant::now();
    while !trainer.is_done() {
        let report = trainer.step()?;
        let it = trainer.iteration() - 1;
        if it % train_cfg.log_interval == 0 {
            eprintln!(
                "iter {it:>6}  loss {:.6e}  bg {:.4}  {:.1}s",
                report.spectrum_loss,
                report.bg_loss,
                started.elapsed().as_secs_f64()
            );
        }
    }
    let step = trainer.step_size();
    let iteration = trainer.iteration();
    let history = trainer.history().to_vec();
    let model = trainer.into_model();

    let pairs = train_idx
        .iter()
        .filter_map(|&i| dataset.rssi_dbm[i].map(|m| (i, m)))
        .map(|(i, m)| {
            let s = render_spectrum(&model, &dataset.data.geometry, dataset.data.records[i].tx, step, train_cfg.skip_threshold)?;
            Ok((s.sum(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let calibration = if pairs.is_empty() { None } else { calibration_offset(&pairs).ok() };

    let g = &dataset.data.geometry;
    let mut meta = CheckpointMeta::for_model(&model, train_cfg.seed, iteration);
    meta.rx_position = Some(g.rx().to_array());
    let (m, n) = g.resolution();
    meta.spectrum_res = Some([m, n]);
    meta.step = Some(step);
    meta.skip_threshold = Some(train_cfg.skip_threshold);
    meta.split_seed = Some(cfg.train.split_seed);
    meta.rssi_calibration_db = calibration;
    meta.config = Some(serde_json::to_value(&cfg.train).expect("config serializes"));
    let ckpt = cfg.paths.checkpoint.as_deref().unwrap();
    save_checkpoint(ckpt, &model, &meta)?;

    let log = log_path(cfg);
    let mut text = String::from(LogEntry::CSV_HEADER);
    text.push('\n');
    for e in &history {
        text.push_str(&e.csv_line());
        text.push('\n');
    }
    fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
    eprintln!(
        "trained {iteration} iterations in {:.1}s; checkpoint {ckpt}, log {}",
        started.elapsed().as_secs_f64(),
        log.display()
    );
    Ok(())
}

/// Geometry and render settings recorded in a checkpoint.
fn checkpoint_scene(path: &str, model: &voxelrf_core::FieldModel, meta: &CheckpointMeta) -> Result<(SceneGeometry, f64, f64)> {
    let (Some(rx), Some([m, n])) = (meta.rx_position, meta.spectrum_res) else {
        return Err(Error::format(path, 0, "checkpoint lacks receiver geometry"));
    };
    let g = SceneGeometry::new(Vec3::from_array(rx), *model.bbox(), m, n)
        .map_err(|e| Error::format(path, 0, e.to_string()))?;
    let step = meta.step.unwrap_or_else(|| default_step(model.dims(), model.bbox()));
    Ok((g, step, meta.skip_threshold.unwrap_or(1e-4)))
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["paths.checkpoint", "infer.tx", "paths.out"])?;
    let path = cfg.paths.checkpoint.as_deref().unwrap();
    let (model, meta) = load_checkpoint(path)?;
    let (g, step, tau) = checkpoint_scene(path, &model, &meta)?;
    let tx = Vec3::from_array(cfg.infer.tx.unwrap());
    if !model.bbox().contains(tx) {
        return Err(Error::Config(format!("transmitter {:?} lies outside the model box", tx.to_array())));
    }
    let started = Instant::now();
    let spectrum = render_spectrum(&model, &g, tx, step, tau)?;
    let elapsed = started.elapsed();
    let out = cfg.paths.out.as_deref().unwrap();
    write_spectrum(out, &spectrum)?;
    let (m, n) = spectrum.resolution();
    eprintln!("rendered {m}x{n} spectrum in {:.3} ms -> {out}", elapsed.as_secs_f64() * 1e3);
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summary_row(name: &str, s: &PercentileSummary) -> String {
    format!("{name},{},{},{}", s.p25, s.median, s.p75)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.require(&["paths.checkpoint", "data.dir", "paths.out"])?;
    let path = cfg.paths.checkpoint.as_deref().unwrap();
    let (model, meta) = load_checkpoint(path)?;
    let (_, step, tau) = checkpoint_scene(path, &model, &meta)?;
    let dataset = Dataset::load(cfg.data.dir.as_deref().unwrap())?;
    let g = &dataset.data.geometry;
    let split_seed = cfg.eval.split_seed.or(meta.split_seed).unwrap_or(cfg.train.split_seed);
    let (train_idx, test_idx) = split_indices(dataset.len(), split_seed);
    if test_idx.is_empty() {
        return Err(Error::Config("the held-out split is empty".into()));
    }
    let out = PathBuf::from(cfg.paths.out.as_deref().unwrap());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let ssim_cfg = SsimConfig::default();
    let mut scores = Vec::with_capacity(test_idx.len());
    let mut predicted = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let r = &dataset.data.records[i];
        let p = render_spectrum(&model, g, r.tx, step, tau)?;
        scores.push(ssim(&p, &r.spectrum, &ssim_cfg)?);
        predicted.push(p);
    }
    let summary = percentile_summary(&scores)?;
    write_csv(
        &out.join("ssim.csv"),
        "tx_index,ssim",
        test_idx.iter().zip(&scores).map(|(i, s)| format!("{i},{s}")),
    )?;
    write_csv(&out.join("ssim_cdf.csv"), "ssim,fraction", cdf(&scores)?.into_iter().map(|(v, f)| format!("{v},{f}")))?;
    let mut rows = vec![summary_row("ssim", &summary)];
    eprintln!(
        "ssim over {} held-out records: p25 {:.4}  median {:.4}  p75 {:.4}",
        scores.len(),
        summary.p25,
        summary.median,
        summary.p75
    );

    if cfg.eval.rssi {
        let calibration = match meta.rssi_calibration_db {
            Some(c) => c,
            None => {
                let pairs = train_idx
                    .iter()
                    .filter_map(|&i| dataset.rssi_dbm[i].map(|m| (i, m)))
                    .map(|(i, m)| Ok((render_spectrum(&model, g, dataset.data.records[i].tx, step, tau)?.sum(), m)))
                    .collect::<Result<Vec<_>>>()?;
                calibration_offset(&pairs)?
            }
        };
        let mut idx = Vec::new();
        let mut pred = Vec::new();
        let mut meas = Vec::new();
        for (k, &i) in test_idx.iter().enumerate() {
            if let Some(m) = dataset.rssi_dbm[i] {
                idx.push(i);
                pred.push(aggregate_rssi(&predicted[k], calibration)?);
                meas.push(m);
            }
        }
        if idx.is_empty() {
            return Err(Error::Config("the dataset has no RSSI records in the held-out split".into()));
        }
        let (errors, rs) = rssi_error(&pred, &meas)?;
        write_csv(
            &out.join("rssi_error.csv"),
            "record_index,rssi_error_db",
            idx.iter().zip(&errors).map(|(i, e)| format!("{i},{e}")),
        )?;
        write_csv(
            &out.join("rssi_predictions.csv"),
            "record_index,predicted_dbm,measured_dbm",
            (0..idx.len()).map(|k| format!("{},{},{}", idx[k], pred[k], meas[k])),
        )?;
        write_csv(
            &out.join("rssi_error_cdf.csv"),
            "rssi_error_db,fraction",
            cdf(&errors)?.into_iter().map(|(v, f)| format!("{v},{f}")),
        )?;
        rows.push(summary_row("rssi_error_db", &rs));
        eprintln!(
            "rssi error over {} records (calibration {calibration:.3} dB): p25 {:.3}  median {:.3}  p75 {:.3} dB",
            errors.len(),
            rs.p25,
            rs.median,
            rs.p75
        );
    }
    write_csv(&out.join("summary.csv"), "metric,p25,median,p75", rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, o) = split_overrides(strings(&[
            "train",
            "--train.total_iters",
            "50",
            "--out",
            "m.vxck",
            "--scene.tx_modulation=0",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["train", "--out", "m.vxck"]));
        assert_eq!(o[0], ("train.total_iters".into(), Value::Integer(50)));
        assert_eq!(o[1], ("scene.tx_modulation".into(), Value::Integer(0)));
        assert!(split_overrides(strings(&["--train.seed"])).is_err());
    }

    #[test]
    fn missing_output_is_a_usage_error() {
        assert_eq!(run(strings(&["synth", "--n-tx", "2"])), 2);
        assert_eq!(run(strings(&["frobnicate"])), 2);
        assert_eq!(run(strings(&["synth", "--out", "x", "--data.bogus", "1"])), 2);
    }
}
