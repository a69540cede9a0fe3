use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use tickplant_core::feed::text::format_text_record;
use tickplant_core::feed::vfb::write_stream;
use tickplant_core::harness::{emit_metrics, run_benchmark, run_simulation, BenchConfig, HarnessError, SimConfig};
use tickplant_core::loadgen::{generate_day, EventSpike, LoadgenConfig};
use tickplant_core::model::parse_duration;
use tickplant_core::permissioning::emit_usage_report;
use tickplant_core::VirtualTime;

/// Desk-scale ticker plant: workload generation, deterministic simulation
/// and wall-clock benchmarking.
///
/// Exit status: 0 on success, 1 on I/O errors, 2 on configuration errors,
/// 3 when a run violated an invariant. `TP_SEED` overrides the seed of any
/// configuration file.
#[derive(Parser)]
#[command(name = "tickplant", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamFormat {
    /// One file of VFB1 frames per feed
    Vfb,
    /// One file of text records for all feeds
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload day into stream files
    Gen {
        /// Workload or plant configuration (TOML)
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory
        #[arg(short, long, default_value = "stream")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vfb")]
        format: StreamFormat,
        /// Drop each notification after sequencing with this probability
        #[arg(long)]
        inject_gaps: Option<f64>,
    },
    /// Run a deterministic simulation and write its metric files
    Run {
        /// Plant configuration (TOML)
        #[arg(short, long)]
        config: PathBuf,
        /// Output directory for metric files
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Wall-clock benchmark of the concurrent pipeline
    Bench {
        /// Target notifications per second
        #[arg(long, default_value_t = 50_000.0)]
        rate: f64,
        #[arg(long, default_value = "10s", value_parser = duration_arg)]
        duration: Duration,
        #[arg(long, default_value_t = 10_000)]
        symbols: usize,
        #[arg(long, default_value_t = 5)]
        feeds: usize,
        #[arg(long, default_value_t = 3)]
        brokers: usize,
        #[arg(long, default_value_t = 2)]
        subscribers_per_broker: usize,
        #[arg(long, default_value_t = 1_000)]
        symbols_per_subscriber: usize,
        /// Spike start, offset from run start
        #[arg(long, value_parser = duration_arg)]
        spike_at: Option<Duration>,
        #[arg(long, default_value = "5s", value_parser = duration_arg)]
        spike_for: Duration,
        #[arg(long, default_value_t = 1.5)]
        spike_multiplier: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the summary to this file
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Simulate and print the usage report for a range of days
    Report {
        #[arg(short, long)]
        config: PathBuf,
        /// First UTC day index (default: first day of the run)
        #[arg(long)]
        from: Option<u32>,
        /// Last UTC day index (default: last day of the run)
        #[arg(long)]
        to: Option<u32>,
    },
    /// Check that a plant configuration and the files it names are consistent
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn duration_arg(s: &str) -> Result<Duration, String> {
    parse_duration(s).map_err(|e| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Config(String),
    Invariant(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => Failure::Config(m),
            HarnessError::Invariant(m) => Failure::Invariant(m),
            HarnessError::Io(e) => Failure::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var("TP_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Config(format!("TP_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_plant(path: &Path) -> Result<SimConfig, Failure> {
    let mut config = SimConfig::load(path)?;
    if let Some(seed) = seed_override()? {
        config.set_seed(seed);
    }
    Ok(config)
}

fn gen(config: &Path, out: &Path, format: StreamFormat, inject_gaps: Option<f64>) -> Result<(), Failure> {
    let text = fs::read_to_string(config).map_err(|e| Failure::Config(format!("{}: {e}", config.display())))?;
    let mut lg = LoadgenConfig::from_str(&text).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = seed_override()? {
        lg.seed = seed;
    }
    if let Some(p) = inject_gaps {
        lg.inject_gaps = p;
    }
    let stream = generate_day(&lg).map_err(|e| Failure::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    let mut count = 0usize;
    match format {
        StreamFormat::Text => {
            let mut w = BufWriter::new(File::create(out.join("stream.txt"))?);
            for n in stream {
                writeln!(w, "{}", format_text_record(&n))?;
                count += 1;
            }
            w.flush()?;
        }
        StreamFormat::Vfb => {
            let mut writers = std::collections::BTreeMap::new();
            for p in &lg.profiles {
                let f = File::create(out.join(format!("{}.vfb", p.feed_id)))?;
                writers.insert(p.feed_id.clone(), BufWriter::new(f));
            }
            for n in stream {
                let w = writers.get_mut(&n.feed_id).expect("generated feeds come from profiles");
                count += write_stream(w, [&n])?;
            }
            for w in writers.values_mut() {
                w.flush()?;
            }
        }
    }
    eprintln!("generated {count} notifications into {}", out.display());
    Ok(())
}

fn run(config: &Path, out: &Path) -> Result<(), Failure> {
    let config = load_plant(config)?;
    let output = run_simulation(&config)?;
    emit_metrics(&output, out)?;
    eprintln!(
        "seed {}: generated {}, delivered {}, {} denied subscription(s); metrics in {}",
        config.seed(),
        output.generation.total(),
        output.delivery_count,
        output.denied.len(),
        out.display()
    );
    Ok(())
}

fn bench(cfg: BenchConfig, out: Option<&Path>) -> Result<(), Failure> {
    let report = run_benchmark(&cfg)?;
    let text = report.summary_lines();
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text)?;
    }
    if report.lost() > 0 || report.order_violations > 0 || report.delivered > report.expected_deliveries {
        return Err(Failure::Invariant(format!(
            "expected {} deliveries, got {} with {} order violations",
            report.expected_deliveries, report.delivered, report.order_violations
        )));
    }
    if report.backpressure {
        eprintln!("backpressure: generator sustained {:.0}/s of {:.0}/s", report.achieved_rate, report.target_rate);
    }
    Ok(())
}

fn report(config: &Path, from: Option<u32>, to: Option<u32>) -> Result<(), Failure> {
    let config = load_plant(config)?;
    let output = run_simulation(&config)?;
    let from = from.unwrap_or(0);
    let to = to.unwrap_or(output.last_day);
    let text = emit_usage_report(&output.ledger, from, to).map_err(|e| Failure::Config(e.to_string()))?;
    print!("{text}");
    Ok(())
}

fn validate(config: &Path) -> Result<(), Failure> {
    let config = load_plant(config)?;
    println!(
        "ok: {} profile(s), {} broker(s), {} subscription(s), {} entitlement(s), {} instrument(s)",
        config.loadgen.profiles.len(),
        config.topology.brokers.len(),
        config.subscriptions.len(),
        config.entitlements.len(),
        config.symbology.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            config,
            out,
            format,
            inject_gaps,
        } => gen(&config, &out, format, inject_gaps),
        Command::Run { config, out } => run(&config, &out),
        Command::Bench {
            rate,
            duration,
            symbols,
            feeds,
            brokers,
            subscribers_per_broker,
            symbols_per_subscriber,
            spike_at,
            spike_for,
            spike_multiplier,
            seed,
            out,
        } => {
            let cfg = BenchConfig {
                seed,
                target_rate: rate,
                duration,
                feeds,
                symbols,
                brokers,
                subscribers_per_broker,
                symbols_per_subscriber,
                spike: spike_at.map(|at| EventSpike {
                    start: VirtualTime::ZERO + at,
                    duration: spike_for,
                    multiplier: spike_multiplier,
                }),
                ..BenchConfig::default()
            };
            bench(cfg, out.as_deref())
        }
        Command::Report { config, from, to } => report(&config, from, to),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant violation: {m}");
            ExitCode::from(3)
        }
    }
}
