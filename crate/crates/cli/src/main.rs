use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harmoflow::config::RunConfig;
use harmoflow::error::Error;
use harmoflow::pipeline;
use serde_json::json;

#[derive(Parser)]
#[command(name = "harmoflow", version, about = "Flow-guided test-time harmonization of multi-site images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-site phantom dataset.
    SynthData(Common),
    /// Train the normalizing flow on the source site.
    TrainFlow(Common),
    /// Pretrain the harmonizer on augmented source images.
    TrainHarmonizer(Common),
    /// Train the source segmenter.
    TrainSegmenter(Common),
    /// Adapt the harmonizer to every target site.
    Adapt(Common),
    /// Segment every target site and write the metrics report.
    Evaluate(Common),
    /// Run every stage in order.
    RunAll(Common),
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Derive every seed from `seed` alone (`--deterministic=false` mixes in a clock nonce).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Replace existing outputs where a stage would otherwise refuse.
    #[arg(long)]
    force: bool,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.deterministic {
            cfg.deterministic = d;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact(_)
        | Error::Integrity(_)
        | Error::Checkpoint(_)
        | Error::ArchitectureMismatch { .. }
        | Error::Json(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::NonFiniteTransform { .. } | Error::NonFiniteLoss { .. } | Error::SamplingFailure { .. } => 4,
        Error::Io { .. } => 1,
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| {
            let line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn emit(event: &str, body: serde_json::Value) {
    println!("{}", json!({ "event": event, "result": body }));
}

fn run(cmd: &Command) -> Result<(), Error> {
    match cmd {
        Command::SynthData(c) => {
            let cfg = c.resolve()?;
            let dir = pipeline::synth_data(&cfg, c.force)?;
            emit("synth-data", json!({ "dir": dir }));
        }
        Command::TrainFlow(c) => emit("train-flow", serde_json::to_value(pipeline::train_flow_stage(&c.resolve()?)?)?),
        Command::TrainHarmonizer(c) => {
            emit("train-harmonizer", serde_json::to_value(pipeline::train_harmonizer_stage(&c.resolve()?)?)?)
        }
        Command::TrainSegmenter(c) => {
            emit("train-segmenter", serde_json::to_value(pipeline::train_segmenter_stage(&c.resolve()?)?)?)
        }
        Command::Adapt(c) => emit("adapt", serde_json::to_value(pipeline::adapt_stage(&c.resolve()?)?)?),
        Command::Evaluate(c) => {
            let report = pipeline::evaluate_stage(&c.resolve()?)?;
            emit("evaluate", json!({ "overall": report.overall.iter().map(|(m, (d, h))| json!({
                "method": m, "dsc": d, "hd": h })).collect::<Vec<_>>() }));
        }
        Command::RunAll(c) => {
            let cfg = c.resolve()?;
            pipeline::run_all(&cfg, c.force)?;
            emit("run-all", json!({ "report": cfg.out.join("report") }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            println!("{}", json!({ "event": "error", "code": code, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
