use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use rayon::prelude::*;

use moesim_core::engine::{write_csv, write_json, write_sweep_csv, Report};
use moesim_core::ndp::{
    decode_instruction, encode_instruction, Decoded, NdpDevice, NdpInstruction, Opcode, FRAME_LEN,
};
use moesim_core::sweep::{parse_values, run_point, SweepKey};
use moesim_core::workload::{export_trace, ingest_trace};
use moesim_core::{
    load_config, preset, simulate_model, synth_routing, Mode, RoutingTrace, SimConfig, Strategy,
};

#[derive(Parser)]
#[command(
    name = "moesim",
    version,
    about = "MoE inference timing simulator for GPU + near-data memory devices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write a CSV and JSON report per strategy.
    Run(RunArgs),
    /// Simulate every value of one parameter and write a combined CSV.
    Sweep(SweepArgs),
    /// Write a synthetic routing trace as JSONL.
    Tracegen(TracegenArgs),
    /// Decode a file of 64-byte NDP instruction frames, or emit the frames of one expert.
    Hexdump(HexdumpArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in model preset (switch-large-128, nllb-moe).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Batch size B.
    #[arg(long)]
    batch: Option<u64>,
    /// Sequence length S.
    #[arg(long)]
    seq_len: Option<u64>,
    #[arg(long)]
    decode_steps: Option<usize>,
    /// Number of NDP devices.
    #[arg(long)]
    devices: Option<usize>,
    /// Initial hot-expert scaling factor α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Zipf exponent of the synthetic routing.
    #[arg(long)]
    skew: Option<f64>,
    /// Disable runtime α tuning.
    #[arg(long)]
    no_autotune: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Strategy to simulate; repeatable. Defaults to all.
    #[arg(long = "strategy", value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    /// Seed of the synthetic routing trace.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Routing trace (JSONL) to replay instead of synthesizing one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Parameter to sweep.
    #[arg(long, value_parser = parse_sweep_key)]
    sweep: SweepKey,
    /// Comma-separated values; a trailing `x` scales the base value.
    #[arg(long, allow_hyphen_values = true)]
    values: String,
}

#[derive(Args)]
struct TracegenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HexdumpArgs {
    /// Binary file of concatenated frames.
    #[arg(required_unless_present = "expert")]
    file: Option<PathBuf>,
    /// Encode the two kernels of this expert instead of reading a file.
    #[arg(long, conflicts_with = "file")]
    expert: Option<usize>,
    /// Tokens routed to `--expert`.
    #[arg(long, default_value_t = 1)]
    tokens: u64,
    /// MoE layer position of `--expert`.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value = "nllb-moe")]
    preset: String,
    /// Also write the encoded frames to this file.
    #[arg(long, requires = "expert")]
    write: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: moesim_core::Error| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!("{e} (expected one of {})", names.join(", "))
    })
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: moesim_core::Error| e.to_string())
}

fn parse_sweep_key(s: &str) -> Result<SweepKey, String> {
    s.parse().map_err(|e: moesim_core::Error| {
        let names: Vec<&str> = SweepKey::ALL.iter().map(|k| k.name()).collect();
        format!("{e} (expected one of {})", names.join(", "))
    })
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => load_config(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => preset("nllb-moe")?,
        };
        if let Some(m) = self.mode {
            cfg.batch.mode = m;
        }
        if let Some(b) = self.batch {
            cfg.batch.batch_size = b;
        }
        if let Some(s) = self.seq_len {
            cfg.batch.seq_len = s;
        }
        if let Some(n) = self.decode_steps {
            cfg.batch.decode_steps = n;
        }
        if let Some(d) = self.devices {
            cfg.hardware.num_ndp_devices = d;
        }
        if let Some(a) = self.alpha {
            cfg.hardware.alpha = a;
        }
        if let Some(k) = self.skew {
            cfg.sim.skew = k;
        }
        if self.no_autotune {
            cfg.sim.autotune = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunArgs {
    fn strategies(&self) -> Vec<Strategy> {
        if self.strategies.is_empty() {
            Strategy::ALL.to_vec()
        } else {
            self.strategies.clone()
        }
    }

    fn fixed_trace(&self, cfg: &SimConfig) -> Result<Option<RoutingTrace>> {
        self.trace
            .as_ref()
            .map(|p| {
                ingest_trace(p, &cfg.model)
                    .with_context(|| format!("reading trace {}", p.display()))
            })
            .transpose()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_summary(reports: &[Report]) {
    println!(
        "{:<8} {:>14} {:>14} {:>8}",
        "strategy", "latency_s", "tokens_per_s", "alpha"
    );
    for r in reports {
        let alpha = r
            .alpha_history
            .last()
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<8} {:>14.6e} {:>14.6e} {:>8}",
            r.strategy.name(),
            r.latency,
            r.throughput,
            alpha
        );
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let trace = match args.fixed_trace(&cfg)? {
        Some(t) => t,
        None => synth_routing(&cfg.model, &cfg.batch, cfg.sim.skew, args.seed)?,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut reports = Vec::new();
    for s in args.strategies() {
        let report = simulate_model(s, &trace, &cfg)?;
        let mut csv = create(&args.out.join(format!("{}.csv", s.name())))?;
        write_csv(&mut csv, std::slice::from_ref(&report))?;
        csv.flush()?;
        let mut json = create(&args.out.join(format!("{}.json", s.name())))?;
        write_json(&mut json, &report)?;
        json.flush()?;
        reports.push(report);
    }
    print_summary(&reports);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.run.cfg.load()?;
    let values = parse_values(&args.values)?;
    let raw: Vec<&str> = args
        .values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let trace = args.run.fixed_trace(&base)?;
    if trace.is_some() && args.sweep.affects_trace() {
        bail!("cannot sweep {} with a fixed --trace", args.sweep);
    }
    let strategies = args.run.strategies();
    let points = values
        .par_iter()
        .map(|&v| {
            run_point(
                &base,
                args.sweep,
                v,
                &strategies,
                args.run.seed,
                trace.as_ref(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labelled: Vec<(String, Vec<Report>)> =
        raw.iter().map(|s| s.to_string()).zip(points).collect();

    fs::create_dir_all(&args.run.out)
        .with_context(|| format!("creating {}", args.run.out.display()))?;
    let path = args.run.out.join(format!("sweep_{}.csv", args.sweep));
    let mut w = create(&path)?;
    write_sweep_csv(&mut w, args.sweep.name(), &labelled)?;
    w.flush()?;
    for (value, reports) in &labelled {
        println!("{} = {}", args.sweep, value);
        print_summary(reports);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_tracegen(args: &TracegenArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let trace = synth_routing(&cfg.model, &cfg.batch, cfg.sim.skew, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    export_trace(&args.out, &trace)?;
    println!(
        "wrote {} layer invocations to {}",
        trace.layers.len(),
        args.out.display()
    );
    Ok(())
}

fn dump_frame(out: &mut impl Write, index: usize, frame: &[u8]) -> Result<()> {
    writeln!(out, "frame {index}:")?;
    for (i, chunk) in frame.chunks(16).enumerate() {
        let line: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        writeln!(out, "  {:02x}: {}", i * 16, line.join(" "))?;
    }
    match decode_instruction(frame)? {
        Decoded::Kernel(inst) => writeln!(out, "  => {inst}")?,
        Decoded::MemoryTraffic => writeln!(out, "  => memory traffic (not an NDP instruction)")?,
    }
    Ok(())
}

fn cmd_hexdump(args: &HexdumpArgs) -> Result<()> {
    let frames: Vec<[u8; FRAME_LEN]> = match (&args.file, args.expert) {
        (Some(path), _) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            if bytes.is_empty() || bytes.len() % FRAME_LEN != 0 {
                bail!(
                    "{} is {} bytes, not a whole number of {FRAME_LEN}-byte frames",
                    path.display(),
                    bytes.len()
                );
            }
            bytes
                .chunks(FRAME_LEN)
                .map(|c| c.try_into().expect("chunk length"))
                .collect()
        }
        (None, Some(expert)) => {
            let cfg = preset(&args.preset)?;
            if expert >= cfg.model.num_experts {
                bail!(
                    "expert {expert} out of range (model has {})",
                    cfg.model.num_experts
                );
            }
            if args.tokens == 0 {
                bail!("--tokens must be at least 1");
            }
            let m = &cfg.model;
            let mut dev = NdpDevice::new(0, &cfg.hardware, m.dtype_bytes);
            let [up, down] = dev.expert_weights(m, args.layer, expert)?;
            let input = dev.alloc_activation(args.tokens * m.d_model * m.dtype_bytes)?;
            let hidden = dev.alloc_activation(args.tokens * m.d_ff * m.dtype_bytes)?;
            let output = dev.alloc_activation(args.tokens * m.d_model * m.dtype_bytes)?;
            vec![
                encode_instruction(&NdpInstruction::new(Opcode::GEMM_RELU, input, up, hidden))?,
                encode_instruction(&NdpInstruction::new(Opcode::GEMM, hidden, down, output))?,
            ]
        }
        (None, None) => unreachable!("clap requires a file or --expert"),
    };
    if let Some(path) = &args.write {
        let mut w = create(path)?;
        for f in &frames {
            w.write_all(f)?;
        }
        w.flush()?;
    }
    let mut out = std::io::stdout().lock();
    for (i, f) in frames.iter().enumerate() {
        dump_frame(&mut out, i, f)?;
    }
    Ok(())
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Tracegen(a) => cmd_tracegen(a),
        Command::Hexdump(a) => cmd_hexdump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
