use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pnl::checkpoint::load_pnl;
use pnl::costmodel::compare_report;
use pnl::pnl::{attention_map_extract, AttendedRegion};
use pnl::tensor::io::{read_feature, read_raw, write_raw, RawTensor};
use pnl::train::{train_eval, BlockChoice, SynthTask, BATCH, EPOCHS};
use pnl::verify::{run_verify, RunConfig, VerifyOptions};
use pnl::{CombMode, DType, PairwiseKind, PnlConfig, PnlError, PnlModule, PoolMode};

/// Largest tensor `convert` will turn into CSV.
const CSV_MAX_ELEMENTS: usize = 1 << 20;

#[derive(Parser)]
#[command(name = "pnl", version, about = "Pyramid non-local blocks: checks, cost model, attention dumps, toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BlockArg {
    None,
    Nl,
    Pnl,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle, gradient, identity and cost-consistency checks for one configuration.
    Verify {
        /// RunConfig JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory holding the module under test.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fail unless the module is an identity mapping.
        #[arg(long)]
        expect_identity: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Analytic and instrumented cost of NL versus PNL at one size.
    Cost {
        #[arg(long, default_value_t = 8)]
        t: usize,
        #[arg(long, default_value_t = 14)]
        h: usize,
        #[arg(long, default_value_t = 14)]
        w: usize,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value = "embedded_gaussian")]
        kind: PairwiseKind,
        #[arg(long, default_value = "attention")]
        comb: CombMode,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Most attended regions per scale for one reference position.
    Attend {
        /// Input feature in PNLT format.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        /// Use a random input drawn from the run configuration's seed.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference position `t,h,w` at full resolution.
        #[arg(long, default_value = "0,0,0", value_parser = parse_position)]
        reference: (usize, usize, usize),
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Train a small classifier on synthetic motion clips.
    Train {
        #[arg(long, value_enum, default_value = "pnl")]
        block: BlockArg,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value = "embedded_gaussian")]
        pairwise: PairwiseKind,
        #[arg(long, default_value = "concat")]
        comb: CombMode,
        #[arg(long, default_value_t = EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = BATCH)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Convert between PNLT and CSV, chosen by the file extensions.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Element type of a PNLT written from CSV.
        #[arg(long, default_value = "f64")]
        dtype: DType,
    },
}

fn parse_position(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [t, h, w] => {
            let p = |v: &str| v.parse::<usize>().map_err(|e| format!("'{v}': {e}"));
            Ok((p(t)?, p(h)?, p(w)?))
        }
        _ => Err(format!("expected t,h,w, got '{s}'")),
    }
}

/// Failure of a subcommand, mapped to the process exit code.
enum Failure {
    Check(String),
    Error(PnlError),
}

impl From<PnlError> for Failure {
    fn from(e: PnlError) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &PnlError) -> u8 {
    match e {
        PnlError::Io { .. } => 3,
        PnlError::Diverged { .. } => 1,
        _ => 2,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), PnlError> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| PnlError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, PnlError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn load_module(checkpoint: Option<&Path>) -> Result<Option<PnlModule>, PnlError> {
    checkpoint.map(|dir| load_pnl(dir).map(|(m, _)| m)).transpose()
}

fn cmd_verify(config: Option<&Path>, checkpoint: Option<&Path>, expect_identity: bool, format: Format) -> CmdResult {
    let cfg = load_config(config)?;
    let opts = VerifyOptions {
        module: load_module(checkpoint)?,
        expect_identity,
    };
    let report = run_verify(&cfg, &opts)?;
    match format {
        Format::Json => println!("{}", report.to_json()),
        _ => print!("{}", report.to_text()),
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check(report.failures().join(", ")))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_cost(t: usize, h: usize, w: usize, c: usize, n: usize, kind: PairwiseKind, comb: CombMode, format: Format) -> CmdResult {
    let report = compare_report(t, h, w, c, n, kind, comb)?;
    match format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()?),
        Format::Json => println!("{}", report.to_json()),
    }
    Ok(())
}

fn regions_csv(regions: &[Vec<AttendedRegion>]) -> Result<String, PnlError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in regions.iter().flatten() {
        w.serialize(r).map_err(|e| PnlError::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| PnlError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_attend(
    input: Option<&Path>,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    reference: (usize, usize, usize),
    topk: usize,
    out: Option<&Path>,
    format: Format,
) -> CmdResult {
    let cfg = load_config(config)?;
    let x = match input {
        Some(p) => read_feature(p)?,
        None => cfg.random_input()?,
    };
    let module = match load_module(checkpoint)? {
        Some(m) => m,
        None => PnlModule::init(x.shape().c, cfg.pnl_config()?, cfg.seed)?,
    };
    let regions = attention_map_extract(&x, &module.shared, &module.cfg, reference, topk)?;
    let text = match format {
        Format::Csv => regions_csv(&regions)?,
        Format::Json => serde_json::to_string_pretty(&regions).expect("regions serialize") + "\n",
        Format::Text => regions
            .iter()
            .flatten()
            .map(|r| {
                format!(
                    "scale {} rank {}: cell ({},{},{}) rows {}..{} cols {}..{} weight {:.6}\n",
                    r.scale, r.k_rank, r.t, r.h, r.w, r.region_h0, r.region_h1, r.region_w0, r.region_w1, r.weight
                )
            })
            .collect(),
    };
    emit(out, &text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    block: BlockArg,
    n: usize,
    pairwise: PairwiseKind,
    comb: CombMode,
    epochs: usize,
    batch: usize,
    seed: u64,
    out: Option<&Path>,
    format: Format,
) -> CmdResult {
    let choice = match block {
        BlockArg::None => BlockChoice::None,
        BlockArg::Nl => BlockChoice::Nl(pairwise),
        BlockArg::Pnl => BlockChoice::Pnl(PnlConfig::new(n, pairwise, comb, PoolMode::Average, DType::F64)?),
    };
    let metrics = train_eval(choice, &SynthTask::default_with_seed(seed), epochs, batch, seed)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    if let Some(p) = out {
        emit(Some(p), &json)?;
    }
    match format {
        Format::Json => print!("{json}"),
        _ => {
            for (i, e) in metrics.per_epoch.iter().enumerate() {
                println!("epoch {:>3}  loss {:.6}  val_top1 {:.4}", i + 1, e.loss, e.val_top1);
            }
            println!("{choice}: final val top-1 {:.4}", metrics.final_top1);
        }
    }
    Ok(())
}

fn extension(p: &Path) -> String {
    p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn tensor_to_csv(t: &RawTensor) -> Result<String, PnlError> {
    if t.data.len() > CSV_MAX_ELEMENTS {
        return Err(PnlError::Size(format!(
            "{} elements exceed the CSV limit of {CSV_MAX_ELEMENTS}",
            t.data.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..t.dims.len()).map(|i| format!("i{i}")).collect();
    header.push("value".into());
    let err = |e: csv::Error| PnlError::Config(format!("csv: {e}"));
    w.write_record(&header).map_err(err)?;
    let mut idx = vec![0usize; t.dims.len()];
    for v in &t.data {
        let mut row: Vec<String> = idx.iter().map(usize::to_string).collect();
        row.push(format!("{v:?}"));
        w.write_record(&row).map_err(err)?;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < t.dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let bytes = w.into_inner().map_err(|e| PnlError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Rows must be in row-major order; dims are one past the largest index.
fn csv_to_tensor(text: &str, path: &str, dtype: DType) -> Result<RawTensor, PnlError> {
    let parse_err = |offset: u64, msg: String| PnlError::Parse {
        path: path.to_string(),
        offset,
        msg,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rank = r.headers().map_err(|e| parse_err(0, e.to_string()))?.len().saturating_sub(1);
    let mut dims = vec![0usize; rank];
    let mut data = Vec::new();
    let mut expected = vec![0usize; rank];
    let mut records: Vec<(u64, Vec<usize>, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.byte()), e.to_string()))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != rank + 1 {
            return Err(parse_err(offset, format!("expected {} fields, found {}", rank + 1, rec.len())));
        }
        let idx = (0..rank)
            .map(|i| rec[i].trim().parse::<usize>().map_err(|e| parse_err(offset, format!("index '{}': {e}", &rec[i]))))
            .collect::<Result<Vec<_>, _>>()?;
        let v = rec[rank].trim().parse::<f64>().map_err(|e| parse_err(offset, format!("value '{}': {e}", &rec[rank])))?;
        for (d, &i) in dims.iter_mut().zip(&idx) {
            *d = (*d).max(i + 1);
        }
        records.push((offset, idx, v));
    }
    for (offset, idx, v) in records {
        if idx != expected {
            return Err(parse_err(offset, format!("index {idx:?} out of row-major order, expected {expected:?}")));
        }
        data.push(v);
        for d in (0..rank).rev() {
            expected[d] += 1;
            if expected[d] < dims[d] {
                break;
            }
            expected[d] = 0;
        }
    }
    RawTensor::new(dtype, dims, data)
}

fn cmd_convert(input: &Path, output: &Path, dtype: DType) -> CmdResult {
    match (extension(input).as_str(), extension(output).as_str()) {
        ("pnlt", "csv") => {
            let t = read_raw(input)?;
            emit(Some(output), &tensor_to_csv(&t)?)?;
        }
        ("csv", "pnlt") => {
            let text = fs::read_to_string(input).map_err(|e| PnlError::Io {
                path: input.to_path_buf(),
                source: e,
            })?;
            write_raw(output, &csv_to_tensor(&text, &input.display().to_string(), dtype)?)?;
        }
        (a, b) => {
            return Err(PnlError::Config(format!("cannot convert .{a} to .{b}; use .pnlt and .csv")).into());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), PnlError> {
    if let Ok(v) = std::env::var("PNL_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| PnlError::Config(format!("PNL_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PnlError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::Verify {
            config,
            checkpoint,
            expect_identity,
            format,
        } => cmd_verify(config.as_deref(), checkpoint.as_deref(), expect_identity, format),
        Command::Cost {
            t,
            h,
            w,
            c,
            n,
            kind,
            comb,
            format,
        } => cmd_cost(t, h, w, c, n, kind, comb, format),
        Command::Attend {
            input,
            synthetic: _,
            config,
            checkpoint,
            reference,
            topk,
            out,
            format,
        } => cmd_attend(input.as_deref(), config.as_deref(), checkpoint.as_deref(), reference, topk, out.as_deref(), format),
        Command::Train {
            block,
            n,
            pairwise,
            comb,
            epochs,
            batch,
            seed,
            out,
            format,
        } => cmd_train(block, n, pairwise, comb, epochs, batch, seed, out.as_deref(), format),
        Command::Convert { input, output, dtype } => cmd_convert(&input, &output, dtype),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(names)) => {
            eprintln!("check failed: {names}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
