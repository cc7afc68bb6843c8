use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xkv_core::harness::MetricsFormat;
use xkv_core::{
    emit_metrics, gen_frames, mse_report, quant_error_tensors, run_frames, snapshot, sparsity_matrix, stream_hash,
    write_mse_csv, Error, Mode, StreamConfig,
};

/// Bounded KV cache experiments on synthetic frame streams.
#[derive(Parser, Debug)]
#[command(name = "xkv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stream frames through each cache mode and write per-frame metrics and cache snapshots.
    Bench(BenchArgs),
    /// Key and value reconstruction MSE for both group axes at each bit width.
    QuantError(QuantErrorArgs),
    /// Pooled-query score matrix over the prunable cache segment at one step.
    SparsityDump(SparsityArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML or JSON config file; keys match StreamConfig field names.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config field, applied after the file and XKV_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Comma-separated subset of unbounded, pruned, pruned_quant.
    #[arg(long, value_name = "LIST", default_value = "unbounded,pruned,pruned_quant")]
    modes: String,
    /// Number of frames, overriding the config.
    #[arg(long, value_name = "N")]
    frames: Option<usize>,
    /// Metrics file format.
    #[arg(long, value_name = "FORMAT", default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
}

#[derive(Args, Debug)]
struct QuantErrorArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output CSV file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Comma-separated bit widths.
    #[arg(long, value_name = "LIST", default_value = "2,4")]
    bits: String,
}

#[derive(Args, Debug)]
struct SparsityArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output CSV file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Layer index, from 0.
    #[arg(long, value_name = "N", default_value_t = 0)]
    layer: usize,
    /// Frame index, from 0.
    #[arg(long, value_name = "N")]
    frame: usize,
    /// Number of frames, overriding the config.
    #[arg(long, value_name = "N")]
    frames: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Infeasible(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Infeasible(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            Error::Config(_) | Error::Parameter(_) => Failure::Usage(e.to_string()),
            _ => Failure::Infeasible(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load_config(args: &ConfigArgs, frames: Option<usize>) -> Result<StreamConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => StreamConfig::load(path)?,
        None => StreamConfig::default(),
    };
    if let Ok(seed) = std::env::var("XKV_SEED") {
        config.seed = seed
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("XKV_SEED={seed:?} is not an unsigned integer")))?;
    }
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set_field(key.trim(), value.trim())?;
    }
    if let Some(f) = frames {
        config.frames = f;
    }
    config.validate().map_err(|e| Failure::Infeasible(e.to_string()))?;
    Ok(config)
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| io_failure(path, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, args.frames)?;
    let modes = Mode::parse_list(&args.modes)?;
    let format: MetricsFormat = args.format.parse()?;
    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;

    let frames = gen_frames(&config);
    let hash = stream_hash(&frames);
    let baseline = if modes.iter().any(|&m| m != Mode::Unbounded) {
        Some(run_frames(&config, Mode::Unbounded, &frames, None)?)
    } else {
        None
    };
    for mode in modes {
        let run = match (&baseline, mode) {
            (Some(base), Mode::Unbounded) => base.clone(),
            _ => run_frames(&config, mode, &frames, baseline.as_ref().map(|b| &b.outputs))?,
        };
        let path = args.out.join(format!("{mode}.{}", format.extension()));
        emit_metrics(&run.metrics, format, &path)?;
        for (l, layer) in run.layers.iter().enumerate() {
            let snap = args.out.join(format!("{mode}_layer{l}.xkv"));
            let bytes = snapshot::encode(layer)?;
            fs::write(&snap, bytes).map_err(|e| io_failure(&snap, e))?;
        }
        let m = &run.metrics;
        eprintln!(
            "{mode}: frames={} stream={hash:016x} cache_tokens={} cache_bytes={} peak_bytes={} -> {}",
            m.frames(),
            m.cache_tokens.last().copied().unwrap_or(0),
            m.cache_bytes.last().copied().unwrap_or(0),
            m.peak_bytes,
            path.display()
        );
    }
    Ok(())
}

fn parse_bits(list: &str) -> Result<Vec<u8>, Failure> {
    let bits = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u8>()
                .map_err(|_| Failure::Usage(format!("bad bit width {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if bits.is_empty() {
        return Err(Failure::Usage("empty --bits list".into()));
    }
    Ok(bits)
}

fn cmd_quant_error(args: &QuantErrorArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, None)?;
    let bits = parse_bits(&args.bits)?;
    let (k, v) = quant_error_tensors(&config)?;
    let rows = mse_report(&k, &v, &bits, config.group_size)?;
    let mut out = output(args.out.as_deref())?;
    write_mse_csv(&rows, &mut out)?;
    out.flush()
        .map_err(|e| io_failure(args.out.as_deref().unwrap_or(Path::new("<stdout>")), e))
}

fn cmd_sparsity_dump(args: &SparsityArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, args.frames)?;
    let matrix = sparsity_matrix(&config, Mode::PrunedQuant, args.layer, args.frame)?;
    let path = args.out.as_deref().unwrap_or(Path::new("<stdout>"));
    let mut out = output(args.out.as_deref())?;
    let mut write = || -> io::Result<()> {
        match &matrix {
            None => writeln!(
                out,
                "# no prunable segment at layer {} frame {}",
                args.layer, args.frame
            )?,
            Some(s) => {
                let first = config.tokens_per_frame();
                write!(out, "query")?;
                for j in 0..s.cols() {
                    write!(out, ",{}", first + j)?;
                }
                writeln!(out)?;
                for i in 0..s.rows() {
                    write!(out, "{i}")?;
                    for x in s.row(i) {
                        write!(out, ",{x}")?;
                    }
                    writeln!(out)?;
                }
            }
        }
        out.flush()
    };
    write().map_err(|e| io_failure(path, e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Bench(a) => cmd_bench(a),
        Command::QuantError(a) => cmd_quant_error(a),
        Command::SparsityDump(a) => cmd_sparsity_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("xkv: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
