//! Command-line surface. Four subcommands cover the full workflow:
//! `quantize` turns a float model into loadable coefficients, `run`
//! executes one or more models on an image and prints a power report,
//! `power` prints the calibrated power table with its efficiency
//! derivation, and `bench` pushes synthetic frames through a model for
//! throughput figures.
//!
//! Exit codes: 0 success, 1 execution failure (device errors while
//! running), 2 usage or input error (bad flags, unreadable or malformed
//! files).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dsfp::DSFP9;
use crate::engine::{EngineGrid, FeatureMap};
use crate::memory::{DeviceMemory, MemoryKind, DEFAULT_MRAM_CAPACITY, DEFAULT_SRAM_CAPACITY};
use crate::power::{
    dynamic_power, efficiency, frame_rate, load_preset, standby_power, CycleModel, PowerConfig,
    Temperature, CYCLE_MODEL_NOTE, OPS_PER_MAC,
};
use crate::quantizer::{
    choose_bias, load_float_model, parse_manifest, quantize_model, serialize_manifest,
    ModelDescriptor, ModelManifest, QuantError, MANIFEST_VERSION,
};
use crate::scheduler::{DeviceState, InferenceJob, JobStatus};

const FMAP_MAGIC: &[u8; 4] = b"FMAP";

#[derive(Debug)]
enum CliError {
    /// Bad flags or unusable input files.
    Usage(String),
    /// The device could not complete the request.
    Exec(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Exec(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Exec(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn exec(e: impl std::fmt::Display) -> CliError {
    CliError::Exec(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "mpim",
    version,
    about = "Simulator for an MRAM processing-in-memory CNN inference device"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a float model into a device manifest plus coefficient blob
    Quantize(QuantizeArgs),
    /// Run one or more resident models over an input image
    Run(RunArgs),
    /// Print the calibrated power table and the efficiency derivation
    Power(PowerArgs),
    /// Push synthetic frames through a model and report throughput
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MemChoice {
    Mram,
    Sram,
}

impl From<MemChoice> for MemoryKind {
    fn from(c: MemChoice) -> Self {
        match c {
            MemChoice::Mram => MemoryKind::Mram,
            MemChoice::Sram => MemoryKind::Sram,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TempChoice {
    Room,
    High,
}

impl From<TempChoice> for Temperature {
    fn from(c: TempChoice) -> Self {
        match c {
            TempChoice::Room => Temperature::Room,
            TempChoice::High => Temperature::High70C,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Human,
    Json,
}

/// Device-shape and reporting flags shared by `run` and `bench`.
#[derive(Args)]
struct DeviceArgs {
    /// Power preset name (embedded, or a file in MPIM_PRESET_DIR)
    #[arg(long, default_value = "paper-22nm")]
    preset: String,
    /// Coefficient-memory build to model
    #[arg(long, value_enum, default_value_t = MemChoice::Mram)]
    memory: MemChoice,
    /// Operating temperature point
    #[arg(long, value_enum, default_value_t = TempChoice::Room)]
    temp: TempChoice,
    /// Override the preset clock frequency
    #[arg(long)]
    clock_hz: Option<f64>,
    /// Engine grid edge: the device has grid-m x grid-m engines
    #[arg(long, default_value_t = 14)]
    grid_m: usize,
    /// Tile edge handled by each engine (must be even)
    #[arg(long, default_value_t = 14)]
    tile_p: usize,
    /// Report style
    #[arg(long, value_enum, default_value_t = OutputFormat::Human)]
    format: OutputFormat,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Float model manifest (JSON next to its binary32 weight file)
    float_manifest: PathBuf,
    /// Where to write the device manifest; the coefficient blob lands
    /// next to it
    out_manifest: PathBuf,
    /// Report style
    #[arg(long, value_enum, default_value_t = OutputFormat::Human)]
    format: OutputFormat,
}

#[derive(Args)]
struct RunArgs {
    /// Quantized model manifest; repeat to run several models on the
    /// same input
    #[arg(short = 'm', long = "model", required = true)]
    model: Vec<PathBuf>,
    /// Input image: binary PPM (P6, 8-bit) or an FMAP tensor file
    #[arg(long)]
    input: PathBuf,
    /// Output FMAP path; with several models the model id is appended
    /// to the file stem
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    device: DeviceArgs,
}

#[derive(Args)]
struct PowerArgs {
    /// Power preset name (embedded, or a file in MPIM_PRESET_DIR)
    #[arg(long, default_value = "paper-22nm")]
    preset: String,
    /// Operating temperature point
    #[arg(long, value_enum, default_value_t = TempChoice::Room)]
    temp: TempChoice,
    /// Report style
    #[arg(long, value_enum, default_value_t = OutputFormat::Human)]
    format: OutputFormat,
}

#[derive(Args)]
struct BenchArgs {
    /// Quantized model manifest
    #[arg(short = 'm', long = "model")]
    model: PathBuf,
    /// Number of synthetic frames to run (must be at least 1)
    #[arg(long)]
    frames: u64,
    /// Report fps as if each frame took this many cycles
    #[arg(long)]
    cycles_override: Option<u64>,
    #[command(flatten)]
    device: DeviceArgs,
}

/// Entry point for the `mpim` binary. Returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 2;
        }
    };
    let result = match cli.command {
        Command::Quantize(args) => cmd_quantize(args),
        Command::Run(args) => cmd_run(args),
        Command::Power(args) => cmd_power(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mpim: {}", e.message());
            e.exit_code()
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| exec(format!("cannot write {}: {e}", path.display())))
}

/// Reads an input tensor: PPM P6 images become 3-channel maps scaled to
/// [0, 1]; FMAP files carry raw binary32 values. Either way the values
/// are encoded at the tightest bias that avoids saturation.
fn load_input(path: &Path) -> Result<FeatureMap, CliError> {
    let bytes = read_file(path)?;
    if bytes.starts_with(FMAP_MAGIC) {
        parse_fmap(&bytes).map_err(|m| usage(format!("{}: {m}", path.display())))
    } else if bytes.starts_with(b"P6") {
        parse_ppm(&bytes).map_err(|m| usage(format!("{}: {m}", path.display())))
    } else {
        Err(usage(format!(
            "{}: unrecognized input format (expected PPM P6 or FMAP)",
            path.display()
        )))
    }
}

fn encode_values(
    channels: usize,
    height: usize,
    width: usize,
    values: &[f64],
) -> Result<FeatureMap, String> {
    let bias = choose_bias(values, &DSFP9).map_err(|e| e.to_string())?;
    FeatureMap::from_values(channels, height, width, bias, values).map_err(|e| e.to_string())
}

fn parse_fmap(bytes: &[u8]) -> Result<FeatureMap, String> {
    if bytes.len() < 16 {
        return Err("FMAP header truncated".into());
    }
    let dim = |i: usize| {
        u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize
    };
    let (c, h, w) = (dim(4), dim(8), dim(12));
    let need = 16 + c * h * w * 4;
    if bytes.len() != need {
        return Err(format!(
            "FMAP of {c}x{h}x{w} needs {need} bytes, file has {}",
            bytes.len()
        ));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]) as f64)
        .collect();
    encode_values(c, h, w, &values)
}

/// Hand-parsed binary PPM: "P6", dimensions, maxval 255, then packed RGB
/// rows. Comments (# to end of line) are allowed in the header.
fn parse_ppm(bytes: &[u8]) -> Result<FeatureMap, String> {
    let mut pos = 0usize;
    let mut token = || -> Result<&[u8], String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("PPM header truncated".into());
        }
        Ok(&bytes[start..pos])
    };

    if token()? != b"P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let number = |t: &[u8]| -> Result<usize, String> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad PPM header token {:?}", String::from_utf8_lossy(t)))
    };
    let width = number(token()?)?;
    let height = number(token()?)?;
    let maxval = number(token()?)?;
    if maxval != 255 {
        return Err(format!("PPM maxval {maxval} unsupported (need 255)"));
    }
    // exactly one whitespace byte sits between the header and the pixels
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("PPM pixel data missing".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != width * height * 3 {
        return Err(format!(
            "PPM raster is {} bytes, {}x{} RGB needs {}",
            raster.len(),
            width,
            height,
            width * height * 3
        ));
    }
    // interleaved RGB rows to planar channel-major values in [0, 1]
    let mut values = vec![0.0f64; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                values[(c * height + y) * width + x] =
                    raster[(y * width + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    encode_values(3, height, width, &values)
}

/// FMAP layout: "FMAP", u32 channels, height, width (little endian),
/// then the decoded values as packed binary32.
fn fmap_bytes(fmap: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + fmap.codes().len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&(fmap.channels as u32).to_le_bytes());
    out.extend_from_slice(&(fmap.height as u32).to_le_bytes());
    out.extend_from_slice(&(fmap.width as u32).to_le_bytes());
    for v in fmap.decoded() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Loads a quantized model pair: manifest JSON plus the coefficient blob
/// it names (relative to the manifest's directory).
fn load_quantized(path: &Path) -> Result<(ModelDescriptor, Vec<u8>), CliError> {
    let manifest =
        parse_manifest(&read_file(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let blob_path = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.weights_file);
    let blob = read_file(&blob_path)?;
    if blob.len() as u64 != manifest.weights_len {
        return Err(usage(format!(
            "{}: blob is {} bytes, manifest declares {}",
            blob_path.display(),
            blob.len(),
            manifest.weights_len
        )));
    }
    Ok((manifest.descriptor(), blob))
}

fn build_power_config(args: &DeviceArgs) -> Result<PowerConfig, CliError> {
    let mut cfg = load_preset(&args.preset).map_err(usage)?;
    if let Some(hz) = args.clock_hz {
        if !(hz.is_finite() && hz > 0.0) {
            return Err(usage(format!(
                "clock must be a positive frequency, got {hz}"
            )));
        }
        cfg.clock_hz = hz;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn build_device(args: &DeviceArgs) -> Result<DeviceState, CliError> {
    let cfg = build_power_config(args)?;
    let grid = EngineGrid::new(args.grid_m, args.tile_p).map_err(usage)?;
    Ok(DeviceState::new(
        DeviceMemory::default(),
        grid,
        cfg,
        CycleModel::default(),
    ))
}

#[derive(Serialize)]
struct QuantizeLayerReport {
    layer: usize,
    in_ch: usize,
    out_ch: usize,
    weight_exp_bias: i32,
    max_abs_error: f64,
    mean_abs_error: f64,
    saturated: usize,
}

#[derive(Serialize)]
struct QuantizeReport {
    model: String,
    manifest: String,
    weights: String,
    coeff_bytes: u64,
    layers: Vec<QuantizeLayerReport>,
}

fn cmd_quantize(args: QuantizeArgs) -> Result<(), CliError> {
    let fm = load_float_model(&args.float_manifest).map_err(usage)?;
    let (descriptor, blob, stats) = quantize_model(&fm).map_err(usage)?;

    let weights_name = format!(
        "{}.weights.bin",
        args.out_manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".to_string())
    );
    let weights_path = args.out_manifest.with_file_name(&weights_name);
    write_file(&weights_path, &blob)?;
    let manifest = ModelManifest {
        version: MANIFEST_VERSION,
        name: descriptor.id.clone(),
        layers: descriptor.layers.clone(),
        weights_file: weights_name,
        weights_len: blob.len() as u64,
    };
    write_file(&args.out_manifest, &serialize_manifest(&manifest))?;

    let report = QuantizeReport {
        model: descriptor.id.clone(),
        manifest: args.out_manifest.display().to_string(),
        weights: weights_path.display().to_string(),
        coeff_bytes: blob.len() as u64,
        layers: stats
            .iter()
            .zip(&descriptor.layers)
            .enumerate()
            .map(
                |(i, (s, l)): (usize, (&QuantError, _))| QuantizeLayerReport {
                    layer: i,
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    weight_exp_bias: l.weight_exp_bias,
                    max_abs_error: s.max_abs,
                    mean_abs_error: s.mean_abs,
                    saturated: s.saturated_count,
                },
            )
            .collect(),
    };
    match args.format {
        OutputFormat::Json => println!("{}", to_json(&report)),
        OutputFormat::Human => {
            println!(
                "quantized {} ({} bytes of coefficients)",
                report.model, report.coeff_bytes
            );
            println!("  manifest: {}", report.manifest);
            println!("  weights:  {}", report.weights);
            println!("  layer  in->out  bias  max |err|      mean |err|     saturated");
            for l in &report.layers {
                println!(
                    "  {:>5}  {:>3}->{:<3}  {:>4}  {:<13.6e}  {:<13.6e}  {}",
                    l.layer,
                    l.in_ch,
                    l.out_ch,
                    l.weight_exp_bias,
                    l.max_abs_error,
                    l.mean_abs_error,
                    l.saturated
                );
            }
        }
    }
    Ok(())
}

/// Output path for one job: the given path as-is for a single model,
/// otherwise the model id is folded into the file stem.
fn output_path_for(base: &Path, model_id: &str, solo: bool) -> PathBuf {
    if solo {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let name = match base.extension() {
        Some(ext) => format!("{stem}.{model_id}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{model_id}"),
    };
    base.with_file_name(name)
}

#[derive(Serialize)]
struct JobReport {
    model: String,
    channels: usize,
    height: usize,
    width: usize,
    out_exp_bias: i32,
    macs: u64,
    cycles: u64,
    output_file: Option<String>,
}

#[derive(Serialize)]
struct RunReport {
    jobs: Vec<JobReport>,
    power: crate::power::PowerReport,
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let input = load_input(&args.input)?;
    let mut dev = build_device(&args.device)?;

    let mut ids = Vec::new();
    for path in &args.model {
        let (descriptor, blob) = load_quantized(path)?;
        ids.push(descriptor.id.clone());
        dev.load_model(descriptor, &blob).map_err(exec)?;
    }

    let finished = if ids.len() == 1 {
        vec![dev.run_inference(&ids[0], input).map_err(exec)?]
    } else {
        let jobs = ids
            .iter()
            .map(|id| InferenceJob::new(id.clone(), input.clone()))
            .collect();
        dev.run_concurrent(jobs)
    };
    for job in &finished {
        if job.status != JobStatus::Done {
            return Err(exec(format!(
                "job for model {:?} failed: {}",
                job.model_id,
                job.failure.as_deref().unwrap_or("unknown reason")
            )));
        }
    }

    let solo = finished.len() == 1;
    let mut job_reports = Vec::new();
    for job in &finished {
        let out = job.output.as_ref().expect("done jobs carry an output");
        let output_file = match &args.output {
            Some(base) => {
                let path = output_path_for(base, &job.model_id, solo);
                write_file(&path, &fmap_bytes(out))?;
                Some(path.display().to_string())
            }
            None => None,
        };
        job_reports.push(JobReport {
            model: job.model_id.clone(),
            channels: out.channels,
            height: out.height,
            width: out.width,
            out_exp_bias: out.exp_bias,
            macs: job.total_macs,
            cycles: job.total_cycles,
            output_file,
        });
    }

    let total_macs: u64 = finished.iter().map(|j| j.total_macs).sum();
    let total_cycles: u64 = finished.iter().map(|j| j.total_cycles).sum();
    let power = dev
        .power_report(
            total_macs,
            total_cycles,
            args.device.memory.into(),
            args.device.temp.into(),
        )
        .map_err(exec)?;

    match args.device.format {
        OutputFormat::Json => println!(
            "{}",
            to_json(&RunReport {
                jobs: job_reports,
                power
            })
        ),
        OutputFormat::Human => {
            for j in &job_reports {
                print!(
                    "{}: output {}x{}x{} (exp bias {}), {} MACs, {} cycles",
                    j.model, j.channels, j.height, j.width, j.out_exp_bias, j.macs, j.cycles
                );
                match &j.output_file {
                    Some(f) => println!(" -> {f}"),
                    None => println!(),
                }
            }
            println!();
            print!("{}", power.render_human());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PowerTableReport {
    preset: String,
    temperature: Temperature,
    mram_dynamic_mw: f64,
    mram_standby_mw: f64,
    sram_dynamic_mw: f64,
    sram_standby_mw: f64,
    base_tops_w: f64,
    efficiency_denominator: f64,
    effective_tops_w: f64,
    mram_capacity_bytes: u64,
    sram_capacity_bytes: u64,
    capacity_ratio: f64,
}

fn cmd_power(args: PowerArgs) -> Result<(), CliError> {
    let cfg = load_preset(&args.preset).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    let temp: Temperature = args.temp.into();

    let f = cfg.coeff_power_fraction;
    let r = cfg.ivdd_ratio_mram_vs_sram;
    let denominator = (1.0 - f) + f * r;
    let effective = efficiency(cfg.base_efficiency_tops_w, f, r).map_err(exec)?;
    let report = PowerTableReport {
        preset: args.preset.clone(),
        temperature: temp,
        mram_dynamic_mw: dynamic_power(&cfg, MemoryKind::Mram, temp),
        mram_standby_mw: standby_power(&cfg, MemoryKind::Mram, temp),
        sram_dynamic_mw: dynamic_power(&cfg, MemoryKind::Sram, temp),
        sram_standby_mw: standby_power(&cfg, MemoryKind::Sram, temp),
        base_tops_w: cfg.base_efficiency_tops_w,
        efficiency_denominator: denominator,
        effective_tops_w: effective,
        mram_capacity_bytes: DEFAULT_MRAM_CAPACITY,
        sram_capacity_bytes: DEFAULT_SRAM_CAPACITY,
        capacity_ratio: DEFAULT_MRAM_CAPACITY as f64 / DEFAULT_SRAM_CAPACITY as f64,
    };

    match args.format {
        OutputFormat::Json => println!("{}", to_json(&report)),
        OutputFormat::Human => {
            println!(
                "preset {} at {} temperature",
                report.preset, report.temperature
            );
            println!(
                "  MRAM build: dynamic {} mW, standby {} mW",
                report.mram_dynamic_mw, report.mram_standby_mw
            );
            println!(
                "  SRAM build: dynamic {} mW, standby {} mW",
                report.sram_dynamic_mw, report.sram_standby_mw
            );
            println!(
                "  efficiency: {} / ((1 - {f}) + {f} * {r}) = {} / {} = {:.1} TOPS/W",
                report.base_tops_w,
                report.base_tops_w,
                report.efficiency_denominator,
                report.effective_tops_w
            );
            println!(
                "  coefficient storage: MRAM {} bytes vs SRAM {} bytes, ratio {:.2}",
                report.mram_capacity_bytes, report.sram_capacity_bytes, report.capacity_ratio
            );
        }
    }
    Ok(())
}

/// Deterministic test pattern: a per-frame phase shifted ramp in [0, 1].
fn synthetic_frame(channels: usize, height: usize, width: usize, frame: u64) -> FeatureMap {
    let mut values = vec![0.0f64; channels * height * width];
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let raw = (x * 31 + y * 17 + c * 7) as u64 + frame * 13;
                values[(c * height + y) * width + x] = (raw % 256) as f64 / 255.0;
            }
        }
    }
    encode_values(channels, height, width, &values).expect("pattern values are finite")
}

#[derive(Serialize)]
struct BenchReport {
    model: String,
    frames: u64,
    frame_shape: [usize; 3],
    preset: String,
    memory: String,
    temperature: Temperature,
    clock_hz: f64,
    grid_m: usize,
    tile_p: usize,
    macs_per_frame: u64,
    total_macs: u64,
    ops_per_mac: u64,
    cycles_per_frame: u64,
    cycles_override: Option<u64>,
    fps: f64,
    effective_tops_w: f64,
    cycle_model_note: String,
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    if args.frames == 0 {
        return Err(usage("--frames must be at least 1: nothing to measure"));
    }
    if args.cycles_override == Some(0) {
        return Err(usage("--cycles-override must be positive"));
    }
    let (descriptor, blob) = load_quantized(&args.model)?;
    let first_in = descriptor
        .layers
        .first()
        .map(|l| l.in_ch)
        .ok_or_else(|| usage("model has no layers"))?;
    let model_id = descriptor.id.clone();

    let mut dev = build_device(&args.device)?;
    dev.load_model(descriptor, &blob).map_err(exec)?;

    let (height, width) = (224, 224);
    let mut total_macs = 0u64;
    let mut modeled_cycles_per_frame = 0u64;
    for frame in 0..args.frames {
        let input = synthetic_frame(first_in, height, width, frame);
        let job = dev.run_inference(&model_id, input).map_err(exec)?;
        total_macs += job.total_macs;
        modeled_cycles_per_frame = job.total_cycles;
    }

    let kind: MemoryKind = args.device.memory.into();
    let cycles_per_frame = args.cycles_override.unwrap_or(modeled_cycles_per_frame);
    let fps = frame_rate(dev.power_cfg.clock_hz, cycles_per_frame).map_err(exec)?;
    let ratio = match kind {
        MemoryKind::Mram => dev.power_cfg.ivdd_ratio_mram_vs_sram,
        MemoryKind::Sram => 1.0,
    };
    let effective = efficiency(
        dev.power_cfg.base_efficiency_tops_w,
        dev.power_cfg.coeff_power_fraction,
        ratio,
    )
    .map_err(exec)?;

    let report = BenchReport {
        model: model_id,
        frames: args.frames,
        frame_shape: [first_in, height, width],
        preset: args.device.preset.clone(),
        memory: kind.to_string(),
        temperature: args.device.temp.into(),
        clock_hz: dev.power_cfg.clock_hz,
        grid_m: args.device.grid_m,
        tile_p: args.device.tile_p,
        macs_per_frame: total_macs / args.frames,
        total_macs,
        ops_per_mac: OPS_PER_MAC,
        cycles_per_frame,
        cycles_override: args.cycles_override,
        fps,
        effective_tops_w: effective,
        cycle_model_note: CYCLE_MODEL_NOTE.to_string(),
    };
    match args.device.format {
        OutputFormat::Json => println!("{}", to_json(&report)),
        OutputFormat::Human => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "bench {} on {} ({} build, {} temperature)",
                report.model, report.preset, report.memory, report.temperature
            );
            let _ = writeln!(
                s,
                "  frames: {} of {}x{}x{}",
                report.frames, report.frame_shape[0], report.frame_shape[1], report.frame_shape[2]
            );
            let _ = writeln!(s, "  MACs per frame: {}", report.macs_per_frame);
            let _ = writeln!(
                s,
                "  cycles per frame: {}{}",
                report.cycles_per_frame,
                if report.cycles_override.is_some() {
                    " (overridden)"
                } else {
                    ""
                }
            );
            let _ = writeln!(s, "  fps at {} Hz: {:.1}", report.clock_hz, report.fps);
            let _ = writeln!(s, "  efficiency: {:.1} TOPS/W", report.effective_tops_w);
            let _ = writeln!(s, "  note: {}", report.cycle_model_note);
            print!("{s}");
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize cleanly")
}
