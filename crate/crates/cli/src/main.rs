use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use flsim_core::config::{DatasetConfig, ExperimentConfig};
use flsim_core::experiments::{
    dropout_row, experiment_dropout, experiment_scaling, linear_fit, scaling_row, DROPOUT_HEADER, SCALING_HEADER,
};
use flsim_core::metrics::{read_metrics_file, summarize, summary_row, write_metrics, SUMMARY_HEADER};
use flsim_core::model::ModelConfig;
use flsim_core::pipeline::{
    read_labels, read_points, read_raw_dir, run_pipeline, write_segments, PipelineConfig, RawClient,
};
use flsim_core::protocol::{load_data, run_with_data, ProtocolError};
use flsim_core::rng::{derive_seed, Stream};
use flsim_core::synth::synth_generate;

#[derive(Parser)]
#[command(
    name = "flsim",
    version,
    about = "Federated learning simulator for on-device activity recognition"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, segment, split and normalize raw accelerometer recordings.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic non-IID dataset as segment files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one federated training simulation.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `output_dir` from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metrics from a run directory or a directory of runs.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Scripted studies.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Final accuracy as a function of the client dropout probability.
    Dropout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5])]
        p_drop: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Wall-clock aggregation time against the number of clients.
    Scaling {
        /// Model and aggregator settings; defaults to the 64-channel model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![60usize, 120, 240, 480, 960])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

#[derive(Args)]
struct PreprocessArgs {
    /// Sensor CSV (`timestamp_ms,x,y,z`), one per client; pair with --labels.
    #[arg(long)]
    sensors: Vec<PathBuf>,
    /// Label CSV (`start_ms,end_ms,label`), one per client.
    #[arg(long)]
    labels: Vec<PathBuf>,
    /// Directory of per-client subdirectories holding sensor.csv and labels.csv.
    #[arg(long)]
    raw_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gap_ms: Option<i64>,
    /// Accepted sampling rates in Hz.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<u32>>,
    #[arg(long)]
    rate_tolerance: Option<f64>,
    #[arg(long)]
    min_duration_ms: Option<i64>,
    #[arg(long)]
    majority_classes: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    flat_window: Option<usize>,
    #[arg(long)]
    flat_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Errors caused by the user's input map to exit code 2; everything else
/// is a runtime failure with exit code 1.
enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn protocol_failure(e: ProtocolError) -> Failure {
    match e {
        ProtocolError::Config(c) => Failure::Input(c.into()),
        ProtocolError::Data(d) => Failure::Input(anyhow!("dataset: {d}")),
        other => Failure::Runtime(other.into()),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(input)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth { config, out } => synth(&config, &out),
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Report { input } => report(&input),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
        Command::Experiment(ExperimentCommand::Dropout {
            config,
            out,
            p_drop,
            seed,
        }) => dropout(&config, &out, &p_drop, seed),
        Command::Experiment(ExperimentCommand::Scaling {
            config,
            out,
            counts,
            reps,
        }) => scaling(config.as_deref(), &out, &counts, reps),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Runtime)
}

fn preprocess(a: PreprocessArgs) -> Result<(), Failure> {
    if a.sensors.len() != a.labels.len() {
        return Err(input(anyhow!(
            "--sensors given {} times but --labels {} times",
            a.sensors.len(),
            a.labels.len()
        )));
    }
    let mut clients = Vec::new();
    for (i, (s, l)) in a.sensors.iter().zip(&a.labels).enumerate() {
        clients.push(RawClient {
            name: format!("client_{i}"),
            points: read_points(s)
                .with_context(|| format!("--sensors {}", s.display()))
                .map_err(input)?,
            labels: read_labels(l)
                .with_context(|| format!("--labels {}", l.display()))
                .map_err(input)?,
        });
    }
    if let Some(dir) = &a.raw_dir {
        clients.extend(
            read_raw_dir(dir)
                .with_context(|| format!("--raw-dir {}", dir.display()))
                .map_err(input)?,
        );
    }
    if clients.is_empty() {
        return Err(input(anyhow!("no input: pass --sensors/--labels or --raw-dir")));
    }
    let mut cfg = PipelineConfig::default();
    if let Some(v) = a.gap_ms {
        cfg.gap_threshold_ms = v;
    }
    if let Some(v) = a.rates {
        cfg.rate.targets = v;
    }
    if let Some(v) = a.rate_tolerance {
        cfg.rate.tolerance = v;
    }
    if let Some(v) = a.min_duration_ms {
        cfg.rate.min_duration_ms = v;
    }
    if let Some(v) = a.majority_classes {
        cfg.majority_classes = v;
    }
    if let Some(v) = a.test_fraction {
        if !(0.0..1.0).contains(&v) {
            return Err(input(anyhow!("--test-fraction must lie in [0, 1), got {v}")));
        }
        cfg.test_fraction = v;
    }
    if let Some(v) = a.flat_window {
        cfg.flat_window = v;
    }
    if let Some(v) = a.flat_threshold {
        cfg.flat_threshold = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let out = run_pipeline(&clients, &cfg).map_err(input)?;
    create_dir(&a.out)?;
    for (i, segs) in out.train_by_client.iter().enumerate() {
        write_segments(&a.out.join(format!("client_{i}.flsc")), segs, "train")
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    write_segments(&a.out.join("test.flsc"), &out.test, "test").map_err(|e| Failure::Runtime(e.into()))?;
    let mut summary = String::new();
    summary.push_str(&format!("clients,{}\n", clients.len()));
    summary.push_str(&format!("sessions_total,{}\n", out.sessions_total));
    summary.push_str(&format!("sessions_accepted,{}\n", out.sessions_accepted));
    summary.push_str(&format!("dropped_flat,{}\n", out.dropped_flat));
    summary.push_str(&format!(
        "train_segments,{}\n",
        out.train_by_client.iter().map(Vec::len).sum::<usize>()
    ));
    summary.push_str(&format!("test_segments,{}\n", out.test.len()));
    if let Some(s) = &out.stats {
        summary.push_str(&format!(
            "mean,{} {} {}\nstd,{} {} {}\n",
            s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2]
        ));
    }
    write_file(&a.out.join("preprocess.csv"), &summary)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    print!("{summary}");
    Ok(())
}

fn synth(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let DatasetConfig::Synthetic(s) = &cfg.dataset else {
        return Err(input(anyhow!(
            "dataset.source must be \"synthetic\" for the synth command"
        )));
    };
    let d = synth_generate(s, derive_seed(cfg.seed, Stream::Synth, &[])).map_err(input)?;
    create_dir(out)?;
    let rt = |e: flsim_core::pipeline::PipelineError| Failure::Runtime(e.into());
    for (i, segs) in d.clients.iter().enumerate() {
        write_segments(&out.join(format!("client_{i}.flsc")), segs, "train").map_err(rt)?;
    }
    write_segments(&out.join("test.flsc"), &d.test, "test").map_err(rt)?;
    write_segments(&out.join("volunteer.flsc"), &d.volunteer, "volunteer").map_err(rt)?;
    let mut props = String::from("client");
    for c in 0..s.classes {
        props.push_str(&format!(",p{c}"));
    }
    props.push_str(",segments\n");
    for (i, p) in d.proportions.iter().enumerate() {
        props.push_str(&i.to_string());
        for v in p {
            props.push_str(&format!(",{v:.6}"));
        }
        props.push_str(&format!(",{}\n", d.clients[i].len()));
    }
    write_file(&out.join("proportions.csv"), props)?;
    println!(
        "wrote {} clients, {} test and {} volunteer segments to {}",
        d.clients.len(),
        d.test.len(),
        d.volunteer.len(),
        out.display()
    );
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| input(anyhow!("no output directory: pass --out or set output_dir")))?;
    let data = load_data(&cfg).map_err(protocol_failure)?;
    let result = run_with_data(&cfg, &data).map_err(protocol_failure)?;
    create_dir(&out)?;
    let mut metrics = Vec::new();
    write_metrics(&mut metrics, &result.metrics).map_err(|e| Failure::Runtime(e.into()))?;
    write_file(&out.join("metrics.csv"), metrics)?;
    write_file(&out.join("events.jsonl"), result.events.to_jsonl())?;
    write_file(
        &out.join("final_model.flsc"),
        result.final_model.to_container().to_bytes(),
    )?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let s = summarize(&result.metrics);
    println!(
        "{} rounds ({} accepted), initial accuracy {:.4}, final accuracy {}",
        s.rounds,
        s.accepted_rounds,
        result.initial_eval.accuracy,
        s.final_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    Ok(())
}

/// Runs are `dir` itself if it holds `metrics.csv`, plus every immediate
/// subdirectory that does.
fn find_runs(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if !dir.is_dir() {
        return Err(input(anyhow!("{} is not a directory", dir.display())));
    }
    let mut runs = Vec::new();
    if dir.join("metrics.csv").is_file() {
        runs.push((".".to_string(), dir.join("metrics.csv")));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))
        .map_err(Failure::Runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.csv").is_file())
        .collect();
    subdirs.sort();
    for p in subdirs {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        runs.push((name, p.join("metrics.csv")));
    }
    if runs.is_empty() {
        return Err(input(anyhow!("no metrics.csv found in {}", dir.display())));
    }
    Ok(runs)
}

fn report(dir: &Path) -> Result<(), Failure> {
    let mut csv = format!("{SUMMARY_HEADER}\n");
    println!(
        "{:<20} {:>6} {:>8} {:>7} {:>9} {:>9} {:>8} {:>8}",
        "run", "rounds", "accepted", "aborted", "final_acc", "best_acc", "uploads", "dropped"
    );
    for (name, path) in find_runs(dir)? {
        let rows = read_metrics_file(&path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(input)?;
        let s = summarize(&rows);
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<20} {:>6} {:>8} {:>7} {:>9} {:>9} {:>8} {:>8}",
            name,
            s.rounds,
            s.accepted_rounds,
            s.aborted_rounds,
            fmt(s.final_accuracy),
            fmt(s.best_accuracy),
            s.total_uploaded,
            s.total_dropped
        );
        csv.push_str(&summary_row(&name, &s));
        csv.push('\n');
    }
    write_file(&dir.join("summary.csv"), csv)
}

fn dropout(config: &Path, out: &Path, p_drops: &[f64], seed: Option<u64>) -> Result<(), Failure> {
    if let Some(p) = p_drops.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(input(anyhow!("--p-drop values must lie in [0, 1], got {p}")));
    }
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = load_data(&cfg).map_err(protocol_failure)?;
    let results = experiment_dropout(&cfg, &data, p_drops).map_err(protocol_failure)?;
    create_dir(out)?;
    let mut table = format!("{DROPOUT_HEADER}\n");
    for (p, r) in &results {
        let dir = out.join(format!("p_drop_{p}"));
        create_dir(&dir)?;
        let mut metrics = Vec::new();
        write_metrics(&mut metrics, &r.metrics).map_err(|e| Failure::Runtime(e.into()))?;
        write_file(&dir.join("metrics.csv"), metrics)?;
        table.push_str(&dropout_row(*p, &r.metrics, r.initial_eval.accuracy));
        table.push('\n');
    }
    write_file(&out.join("dropout.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn scaling(config: Option<&Path>, out: &Path, counts: &[usize], reps: usize) -> Result<(), Failure> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(input(anyhow!("--counts must be non-empty positive integers")));
    }
    let (model, aggregator, seed) = match config {
        Some(p) => {
            let c = load_config(p)?;
            (c.model, c.aggregator, c.seed)
        }
        None => (ModelConfig::default(), Default::default(), 0),
    };
    let points = experiment_scaling(&model, &aggregator, counts, reps.max(1), seed).map_err(protocol_failure)?;
    create_dir(out)?;
    let mut table = format!("{SCALING_HEADER}\n");
    for p in &points {
        table.push_str(&scaling_row(p));
        table.push('\n');
    }
    write_file(&out.join("scaling.csv"), &table)?;
    print!("{table}");
    let xs: Vec<f64> = points.iter().map(|p| p.k as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_ms).collect();
    if let Some(f) = linear_fit(&xs, &ys) {
        println!(
            "fit: {:.5} ms/client + {:.3} ms, R^2 = {:.4}",
            f.slope, f.intercept, f.r2
        );
    }
    Ok(())
}
