//! `ahl`: dataset generation, training, evaluation, plotting and run
//! comparison for adaptive heatmap landmark localisation.

mod compare;
mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahl_core::controller::save_controllers;
use ahl_core::laoml::{evaluate_network, SigmaBroadcast};
use ahl_core::rundir::{self, CONFIG_ECHO, CONTROLLERS_CKPT, LEARNER_CKPT, SUMMARY_JSON};
use ahl_core::synthdata::{gen_dataset, load_dataset, save_dataset};
use ahl_core::{run_training, Error, Mode, Network, Precision, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

#[derive(Parser, Debug)]
#[command(name = "ahl", version, about = "Adaptive heatmap target precision for landmark localisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic landmark dataset.
    GenData(GenDataArgs),
    /// Train one run per seed.
    Train(Box<TrainArgs>),
    /// Re-evaluate a trained run's checkpoint.
    Evaluate(EvaluateArgs),
    /// Draw sigma and reward curves as SVG.
    Plot(PlotArgs),
    /// Tabulate test metrics of several runs.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 400)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    landmarks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Laoml,
    Fixed,
    Decay,
    Coordreg,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Laoml => Mode::Laoml,
            ModeArg::Fixed => Mode::Fixed,
            ModeArg::Decay => Mode::Decay,
            ModeArg::Coordreg => Mode::Coordreg,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BroadcastArg {
    PerLandmark,
    Global,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; each run goes to `<out>/seed-<s>`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    inner_epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Initial (or, for `fixed`, constant) sigma.
    #[arg(long, visible_alias = "sigma")]
    sigma_init: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    reward_c: Option<f64>,
    #[arg(long)]
    early_stop: Option<bool>,
    #[arg(long)]
    early_stop_window: Option<usize>,
    #[arg(long)]
    early_stop_threshold: Option<f64>,
    #[arg(long)]
    early_stop_start: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    coordreg_lr: Option<f64>,
    #[arg(long)]
    controller_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pck: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    sigma_broadcast: Option<BroadcastArg>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    controller_hidden: Option<Vec<usize>>,
    /// Also write SVG curves into each run directory.
    #[arg(long)]
    plot: bool,
    /// Print no per-epoch progress.
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    force: bool,
}

impl TrainArgs {
    fn flag_layer(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        put("data", path(&self.data));
        put("out", path(&self.out));
        put(
            "mode",
            self.mode.map(|m| Value::String(Mode::from(m).to_string())),
        );
        put("seed", self.seed.map(Value::from));
        put("seeds", self.seeds.clone().map(Value::from));
        put("threads", self.threads.map(Value::from));
        put("epochs", self.epochs.map(Value::from));
        put("samples", self.samples.map(Value::from));
        put("inner_epochs", self.inner_epochs.map(Value::from));
        put("warmup", self.warmup.map(Value::from));
        put("sigma_init", self.sigma_init.map(Value::from));
        put("sigma_min", self.sigma_min.map(Value::from));
        put("sigma_max", self.sigma_max.map(Value::from));
        put("reward_c", self.reward_c.map(Value::from));
        put("early_stop", self.early_stop.map(Value::from));
        put("early_stop_window", self.early_stop_window.map(Value::from));
        put("early_stop_threshold", self.early_stop_threshold.map(Value::from));
        put("early_stop_start", self.early_stop_start.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("coordreg_lr", self.coordreg_lr.map(Value::from));
        put("controller_lr", self.controller_lr.map(Value::from));
        put("batch", self.batch.map(Value::from));
        put("augment", self.augment.map(Value::from));
        put("pck", self.pck.clone().map(Value::from));
        put(
            "sigma_broadcast",
            self.sigma_broadcast.map(|b| {
                let b = match b {
                    BroadcastArg::PerLandmark => SigmaBroadcast::PerLandmark,
                    BroadcastArg::Global => SigmaBroadcast::Global,
                };
                serde_json::to_value(b).expect("enum serialises")
            }),
        );
        put(
            "precision",
            self.precision.map(|p| {
                let p = match p {
                    PrecisionArg::F64 => Precision::F64,
                    PrecisionArg::F32 => Precision::F32,
                };
                serde_json::to_value(p).expect("enum serialises")
            }),
        );
        put("depth", self.depth.map(Value::from));
        put("widths", self.widths.clone().map(Value::from));
        put("controller_hidden", self.controller_hidden.clone().map(Value::from));
        if self.plot {
            put("plot", Some(Value::Bool(true)));
        }
        m
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory holding `config.echo.json` and `learner.ckpt`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory; defaults to the one recorded in the run's config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Comma-separated PCK radii in pixels; defaults to the run's own.
    #[arg(long, value_delimiter = ',')]
    pck: Option<Vec<f64>>,
    /// Write the summary as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    run: PathBuf,
    /// Second run drawn dashed on the same axes.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Two or more run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "compare.csv")]
    csv: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Plot(a) => cmd_plot(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// One stderr line per problem; configuration errors may carry several.
fn report(e: &Error) {
    match e {
        Error::Config(msg) => {
            for line in msg.lines() {
                eprintln!("error: configuration: {line}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Refuses to overwrite an existing file unless `force`.
pub(crate) fn check_clobber(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let split = gen_dataset(a.n, a.size, a.size, a.landmarks, a.seed)?;
    prepare_dir(&a.out, a.force)?;
    let images = a.out.join("images");
    if images.exists() {
        fs::remove_dir_all(&images).map_err(io_err(&images))?;
    }
    save_dataset(&split, &a.out)?;
    println!("{}", split.summary_line());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut layers = Vec::new();
    if let Some(path) = &a.config {
        layers.push(config::read_config_file(path)?);
    }
    layers.push(config::env_layer()?);
    let mut flags = a.flag_layer();
    // an explicit --seed replaces any seed list coming from the config file
    if a.seed.is_some() && a.seeds.is_none() {
        flags.insert("seeds".into(), Value::from(vec![a.seed.unwrap()]));
    }
    layers.push(flags);
    let exp = config::resolve(&layers)?;
    let data_dir = exp
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--data)".into()))?;
    let out = exp
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out)".into()))?;
    for seed in &exp.seeds {
        let mut c = exp.train.clone();
        c.seed = *seed;
        c.validate()?;
    }
    let data = load_dataset(&data_dir)?;
    eprintln!("{}", data.summary_line());

    let multi = exp.seeds.len() > 1;
    for &seed in &exp.seeds {
        let train = ahl_core::TrainConfig {
            seed,
            ..exp.train.clone()
        };
        let dir = if multi { out.join(format!("seed-{seed}")) } else { out.clone() };
        prepare_dir(&dir, a.force)?;
        rundir::write_json(&dir.join(CONFIG_ECHO), &config::echo(&train, &data_dir, exp.plot))?;
        if multi {
            println!("run seed={seed} dir={}", dir.display());
        }
        let quiet = a.quiet;
        let outcome = run_training(&train, &data, exp.threads, &mut |r| {
            if !quiet {
                println!("epoch={} mean_val_mre={}", r.epoch, r.mean_val_mre());
            }
        })?;
        rundir::write_artifacts(&dir, &outcome.artifacts)?;
        outcome.learner.save(&dir.join(LEARNER_CKPT))?;
        save_controllers(&dir.join(CONTROLLERS_CKPT), &outcome.controllers)?;
        if exp.plot {
            plot::write_plots(&[dir.clone()], &dir, true)?;
        }
        if let Some(s) = &outcome.artifacts.summary {
            print_summary(&format!("test seed={seed}"), s);
        }
    }
    Ok(())
}

fn print_summary(label: &str, s: &ahl_core::metrics::Summary) {
    let per: Vec<String> = s.per_landmark_mre.iter().map(|v| format!("{v:.4}")).collect();
    println!(
        "{label} images={} mre={:.4}\u{b1}{:.4} per_landmark=[{}]",
        s.images,
        s.mean_mre,
        s.sd_mre,
        per.join(", ")
    );
    for p in &s.pck {
        println!("{label} pck@{}={:.2}%", p.radius, p.percent);
    }
}

fn read_echo(run: &Path) -> Result<(ahl_core::TrainConfig, Option<PathBuf>)> {
    let path = run.join(CONFIG_ECHO);
    let layer = config::read_config_file(&path)?;
    let exp = config::resolve(&[layer])?;
    Ok((exp.train, exp.data))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (train, recorded_data) = read_echo(&a.run)?;
    let pck = a.pck.clone().unwrap_or_else(|| train.pck.clone());
    if let Some(r) = pck.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Validation(format!("PCK radius must be positive, got {r}")));
    }
    if let Some(j) = &a.json {
        check_clobber(j, a.force)?;
    }
    let ckpt = a.run.join(LEARNER_CKPT);
    if !ckpt.exists() {
        return Err(Error::Io {
            path: ckpt,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint missing"),
        });
    }
    let data_dir = a
        .data
        .clone()
        .or(recorded_data)
        .ok_or_else(|| Error::Config("no dataset given (--data)".into()))?;
    let data = load_dataset(&data_dir)?;
    let net = Network::load(&ckpt, train.precision)?;
    let (samples, name) = match a.split {
        SplitArg::Train => (&data.train, "train"),
        SplitArg::Validation => (&data.validation, "validation"),
        SplitArg::Test => (&data.test, "test"),
    };
    if net.architecture().landmarks != data.meta.landmarks {
        return Err(Error::Validation(format!(
            "checkpoint predicts {} landmarks but the dataset has {}",
            net.architecture().landmarks,
            data.meta.landmarks
        )));
    }
    let summary = evaluate_network(&net, samples, train.decode(), &pck)?;
    print_summary(name, &summary);
    if let Some(j) = &a.json {
        rundir::write_json(j, &summary)?;
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let mut runs = vec![a.run.clone()];
    runs.extend(a.overlay.clone());
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    for f in plot::write_plots(&runs, &out, a.force)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    if a.runs.len() < 2 {
        return Err(Error::Validation("compare needs at least two runs".into()));
    }
    check_clobber(&a.csv, a.force)?;
    let rows = a
        .runs
        .iter()
        .map(|r| {
            let (train, _) = read_echo(r)?;
            let summary = rundir::read_summary(&r.join(SUMMARY_JSON))?;
            Ok(compare::RunRow {
                name: r.display().to_string(),
                mode: train.mode.to_string(),
                seed: Some(train.seed),
                mre: summary.per_landmark_mre,
                mean: summary.mean_mre,
                sd: summary.sd_mre,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = compare::build(rows)?;
    print!("{}", compare::render_table(&table));
    let csv = compare::render_csv(&table);
    fs::write(&a.csv, csv).map_err(io_err(&a.csv))?;
    println!("wrote {}", a.csv.display());
    Ok(())
}
