use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dualvol_core::config::KvConfig;
use dualvol_core::dataset::{self, LABEL_FILE};
use dualvol_core::metrics::IouAccumulator;
use dualvol_core::model::{Model, ModelConfig, StepReport, TrainSample, Trainer};
use dualvol_core::params::ParamStore;
use dualvol_core::tensor::Tensor;
use dualvol_core::{selftest, voxel, vol};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Dual-volume semantic scene completion from a rectified stereo pair.
#[derive(Parser)]
#[command(name = "dualvol", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render random synthetic scenes with exact ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override a config entry, e.g. `--set mie.enabled=false`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the pipeline on one sample and dump every intermediate volume.
    Forward {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights directory; omitted means freshly initialised weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on every sample directory under `--data`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score predicted label files against ground truth with matching paths.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path; `.csv` and `.json` files are written next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest {
        /// Also write the report lines to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ModelConfig> {
    let mut kv = match path {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KvConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(ModelConfig::from_kv(&kv)?)
}

fn synth(cfg: &ModelConfig, out: &Path, count: usize, seed: u64) -> Result<()> {
    let samples = dataset::synthesize(cfg, count, seed)?;
    for (i, s) in samples.iter().enumerate() {
        let dir = out.join(format!("sample_{i:04}"));
        dataset::write_sample(&dir, s).with_context(|| format!("writing {}", dir.display()))?;
    }
    log::info!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn load_model(cfg: ModelConfig, weights: Option<&Path>) -> Result<Model> {
    match weights {
        Some(w) => {
            let params = ParamStore::load(w).with_context(|| format!("loading weights {}", w.display()))?;
            Ok(Model::with_params(cfg, params)?)
        }
        None => Ok(Model::new(cfg)?),
    }
}

/// Argmax depth and its probability per pixel from the ensembled logits.
fn depth_maps(ensemble: &Tensor, cfg: &ModelConfig) -> Result<(Tensor, Tensor)> {
    let p = dualvol_core::ops::softmax_along(ensemble, 0)?;
    let (conf, idx) = dualvol_core::ops::max_along(&p, 0)?;
    let [_, h, w] = [p.shape()[0], p.shape()[1], p.shape()[2]];
    let depth = Tensor::new(&[h, w], idx.iter().map(|&i| cfg.bins.center(i)).collect())?;
    Ok((depth, conf.reshape(&[h, w])?))
}

fn forward(cfg: ModelConfig, weights: Option<&Path>, sample: &Path, dump: &Path) -> Result<()> {
    let s = dataset::read_sample(sample, cfg.grid.dims, cfg.classes)?;
    let model = load_model(cfg, weights)?;
    let pred = model.predict(&s.left, &s.right)?;
    std::fs::create_dir_all(dump)?;
    vol::write(dump.join("stereo.vol"), &pred.stereo)?;
    vol::write(dump.join("bev.vol"), &pred.bev)?;
    if let Some(c) = &pred.confidence {
        vol::write(dump.join("confidence.vol"), c)?;
    }
    vol::write(dump.join("ensemble.vol"), &pred.ensemble)?;
    vol::write(dump.join("logits.vol"), &pred.logits)?;
    let cfg = &model.cfg;
    let (depth, conf) = depth_maps(&pred.ensemble, cfg)?;
    dataset::write_pgm(dump.join("depth.pgm"), &depth, cfg.bins.d_min, cfg.bins.d_max)?;
    dataset::write_pgm(dump.join("confidence.pgm"), &conf, 0.0, 1.0)?;
    voxel::write_voxel_labels(dump.join(LABEL_FILE), &pred.grid)?;
    log::info!("dumped forward pass to {}", dump.display());
    Ok(())
}

fn train(cfg: ModelConfig, data: &Path, steps: usize, out: &Path) -> Result<()> {
    let dirs = dataset::sample_dirs(data)?;
    if dirs.is_empty() {
        bail!("no sample directories under {}", data.display());
    }
    let samples = dirs
        .iter()
        .map(|d| {
            let s = dataset::read_sample(d, cfg.grid.dims, cfg.classes)?;
            Ok(TrainSample::from_scene(&s, &cfg)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(Model::new(cfg)?, &samples)?;
    trainer.total_steps = steps;
    std::fs::create_dir_all(out)?;
    let mut logf = std::io::BufWriter::new(std::fs::File::create(out.join("train_log.csv"))?);
    writeln!(logf, "{}", StepReport::CSV_HEADER)?;
    for i in 0..steps {
        let r = trainer.step(&samples[i % samples.len()])?;
        writeln!(logf, "{}", r.csv_row())?;
        if i % 100 == 0 || i + 1 == steps {
            log::info!("step {i} loss {:.6}", r.loss);
        }
    }
    logf.flush()?;
    trainer.model.params.save(out)?;
    log::info!("saved weights to {}", out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, report: &Path, cfg: &ModelConfig) -> Result<()> {
    let files = dataset::label_files(pred)?;
    if files.is_empty() {
        bail!("no .label files under {}", pred.display());
    }
    let mut acc = IouAccumulator::new(cfg.classes - 1);
    for rel in &files {
        let p = dataset::read_grid(pred.join(rel), cfg.grid.dims, cfg.classes)?;
        let g = dataset::read_grid(gt.join(rel), cfg.grid.dims, cfg.classes)
            .with_context(|| format!("ground truth for {}", rel.display()))?;
        acc.add(&p, &g)?;
    }
    let r = acc.report();
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(report.with_extension("csv"), r.to_csv())?;
    std::fs::write(report.with_extension("json"), r.to_json())?;
    println!("{}", r.to_json());
    Ok(())
}

fn run_selftest(report: Option<&Path>) -> Result<bool> {
    let checks = selftest::run_all()?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&c.to_string());
        text.push('\n');
    }
    print!("{text}");
    if let Some(p) = report {
        std::fs::write(p, &text)?;
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Synth {
            config,
            out,
            count,
            seed,
            overrides,
        } => synth(&load_config(config.as_deref(), &overrides)?, &out, count, seed)?,
        Cmd::Forward {
            config,
            weights,
            sample,
            dump,
            overrides,
        } => forward(load_config(config.as_deref(), &overrides)?, weights.as_deref(), &sample, &dump)?,
        Cmd::Train {
            config,
            data,
            steps,
            out,
            overrides,
        } => train(load_config(config.as_deref(), &overrides)?, &data, steps, &out)?,
        Cmd::Eval {
            pred,
            gt,
            report,
            config,
        } => eval(&pred, &gt, &report, &load_config(config.as_deref(), &[])?)?,
        Cmd::Selftest { report } => return run_selftest(report.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("selftest: one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
