use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use bitembed::arch::Arch;
use bitembed::bench::{self, SweepConfig};
use bitembed::data::{self, EmbeddingFile, Manifest, Split};
use bitembed::distill::{self, DistillConfig, FileTeacher, RegressorHead, SyntheticTeacher, TeacherOracle};
use bitembed::probe::{self, ProbeConfig};
use bitembed::synth::{self, SynthConfig};
use bitembed::{audio, model_io, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_MODEL: u8 = 5;

#[derive(Parser)]
#[command(name = "bitembed", version, about = "Binary audio-embedding models: distill, embed, probe, benchmark")]
struct Cli {
    /// Override any flag of the subcommand: KEY=VALUE (repeatable).
    #[arg(long = "config", global = true, value_name = "KEY=VALUE")]
    config: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Log-mel spectrogram of a WAV file.
    Frontend(FrontendArgs),
    /// Write a freshly initialized model.
    Init(InitArgs),
    /// Distill a student from teacher embeddings.
    Distill(DistillArgs),
    /// Embed every one-second segment of a manifest.
    Embed(EmbedArgs),
    /// Train and evaluate a linear probe on a frozen model.
    Probe(ProbeArgs),
    /// Single-thread latency benchmark.
    Bench(BenchArgs),
    /// Probe accuracy and latency at every intermediate tap.
    Sweep(SweepArgs),
    /// Parameter counts and storage sizes.
    Size(ModelArgs),
    /// Layer table of a model file.
    Inspect(InspectArgs),
    /// Generate the synthetic tone/noise/chirp corpus.
    Synth(SynthArgs),
}

#[derive(Args, Serialize, Deserialize)]
struct FrontendArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize)]
struct InitArgs {
    #[arg(long, default_value = "densenet28")]
    arch: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Serialize, Deserialize)]
struct DistillArgs {
    /// densenet28, meliusnet22, tiny or tiny:<layer>
    #[arg(long, default_value = "tiny")]
    arch: String,
    #[arg(long)]
    manifest: PathBuf,
    /// file:PATH (embedding file) or synthetic:SEED
    #[arg(long)]
    teacher: String,
    /// Defaults to the desk preset (2000).
    #[arg(long)]
    steps: Option<usize>,
    /// Defaults to the desk preset (32).
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Use the full-scale schedule (batch 512, 234K steps) as defaults.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    binary_head: bool,
    #[arg(long)]
    freeze_bn_stats: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long)]
    out: PathBuf,
    /// Loss trace; defaults to <out>.loss.csv
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Defaults to 64, or 32 below 10,000 training clips.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Per-clip prediction CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Report JSON (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
}

#[derive(Args, Serialize, Deserialize)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Serialize, Deserialize)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Emit JSON instead of a tab-separated table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    clips_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
}

/// Failure with a process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter(_) | Error::UnsupportedRate { .. } => EXIT_CONFIG,
            Error::Io { .. } | Error::Audio { .. } | Error::Manifest { .. } | Error::Data(_) => EXIT_DATA,
            Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Crc { .. }
            | Error::TableCrc { .. }
            | Error::Format(_)
            | Error::UnknownLayer(_) => EXIT_MODEL,
            Error::Shape(_) => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Applies `KEY=VALUE` overrides through the args' serialized form. Values
/// parse as JSON when possible, otherwise as strings.
fn apply_overrides<T: Serialize + DeserializeOwned>(args: T, overrides: &[String]) -> CmdResult<T> {
    if overrides.is_empty() {
        return Ok(args);
    }
    let mut v = serde_json::to_value(&args).expect("args serialize");
    let obj = v.as_object_mut().expect("args are a struct");
    for o in overrides {
        let (k, val) = o
            .split_once('=')
            .ok_or_else(|| config_error(format!("--config expects KEY=VALUE, got `{o}`")))?;
        let key = k.trim().replace('-', "_");
        if !obj.contains_key(&key) {
            return Err(config_error(format!("unknown config key `{k}`")));
        }
        let parsed = serde_json::from_str(val).unwrap_or_else(|_| serde_json::Value::String(val.to_string()));
        obj.insert(key, parsed);
    }
    serde_json::from_value(v).map_err(|e| config_error(format!("bad --config value: {e}")))
}

#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    args: &'a T,
}

/// Writes `<output>.run.json` (or `<dir>/run.json` for directories).
fn write_run_config<T: Serialize>(command: &str, args: &T, seed: Option<u64>, output: &Path) -> CmdResult {
    let path = if output.is_dir() {
        output.join("run.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    };
    let rc = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        args,
    };
    let text = serde_json::to_string_pretty(&rc).expect("run config serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn print_json<T: Serialize>(v: &T) {
    let s = serde_json::to_string_pretty(v).expect("report serializes");
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{s}");
}

fn write_json<T: Serialize>(v: &T, path: &Path) -> CmdResult {
    let s = serde_json::to_string_pretty(v).expect("report serializes");
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_frontend(a: FrontendArgs) -> CmdResult {
    let w = audio::load_clip(&a.wav)?;
    let m = audio::log_mel(&w)?;
    let mut bytes = Vec::with_capacity(16 + 4 * m.data.len());
    bytes.extend_from_slice(&(m.frames as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.bins() as u64).to_le_bytes());
    m.data.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    fs::write(&a.out, bytes).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("{} frames x {} bins -> {}", m.frames, m.bins(), a.out.display());
    write_run_config("frontend", &a, None, &a.out)
}

fn parse_arch(s: &str) -> CmdResult<Arch> {
    s.parse::<Arch>().map_err(|e| config_error(e.to_string()))
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let g = parse_arch(&a.arch)?.build(a.seed)?;
    model_io::save(&g, &a.out)?;
    eprintln!("{} ({} parameters) -> {}", g.arch(), g.parameter_count(), a.out.display());
    write_run_config("init", &a, Some(a.seed), &a.out)
}

fn teacher_from(spec: &str) -> CmdResult<Box<dyn TeacherOracle>> {
    if let Some(p) = spec.strip_prefix("file:") {
        return Ok(Box::new(FileTeacher::load(p)?));
    }
    if let Some(s) = spec.strip_prefix("synthetic:") {
        let seed = s
            .parse()
            .map_err(|_| config_error(format!("bad teacher seed `{s}`")))?;
        return Ok(Box::new(SyntheticTeacher::new(seed)));
    }
    Err(config_error(format!("teacher must be file:PATH or synthetic:SEED, got `{spec}`")))
}

fn cmd_distill(a: DistillArgs) -> CmdResult {
    let arch = parse_arch(&a.arch)?;
    let teacher = teacher_from(&a.teacher)?;
    let base = if a.full_scale { DistillConfig::full_scale() } else { DistillConfig::desk() };
    let cfg = DistillConfig {
        batch_size: a.batch.unwrap_or(base.batch_size),
        steps: a.steps.unwrap_or(base.steps),
        learning_rate: a.lr,
        seed: a.seed,
        log_every: a.log_every,
        freeze_bn_stats: a.freeze_bn_stats,
        binary_head: a.binary_head,
        ..base
    };
    cfg.validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let idx = data::build_segment_index(&manifest.split(Split::Train));
    if idx.is_empty() {
        return Err(Error::Data("no readable training segments".into()).into());
    }
    eprintln!(
        "distilling {arch} on {} segments ({} clips skipped), {} steps x batch {}",
        idx.len(),
        idx.skipped.len(),
        cfg.steps,
        cfg.batch_size
    );
    let mut g = arch.build(cfg.seed)?;
    let mut head = RegressorHead::new(g.embedding_dim(), teacher.dim(), cfg.binary_head, cfg.seed ^ 0x4ead);
    let ckpt_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let report = distill::train_distill(&mut g, &mut head, teacher.as_ref(), &idx, &cfg, Some(ckpt_dir))?;
    distill::export_student(&g, &a.out)?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(&loss_path, csv).map_err(|e| Error::io(&loss_path, e))?;
    if let Some((first, last)) = report.decile_means() {
        eprintln!("loss first decile {first:.4}, last decile {last:.4}");
    }
    eprintln!("model -> {}, loss -> {}", a.out.display(), loss_path.display());
    write_run_config("distill", &a, Some(a.seed), &a.out)
}

fn cmd_embed(a: EmbedArgs) -> CmdResult {
    let g = model_io::load(&a.model)?;
    let manifest = Manifest::load(&a.manifest)?;
    let idx = data::build_segment_index(&manifest.clips);
    let mut file = EmbeddingFile::new(g.embedding_dim());
    let waves: Vec<_> = idx.segments.iter().map(|s| &idx.clips[s.clip].wave).collect();
    let starts: Vec<usize> = idx.segments.iter().map(|s| s.start).collect();
    for (ws, ss) in waves.chunks(256).zip(starts.chunks(256)) {
        let x = probe::segment_batch(ws, ss)?;
        let e = probe::encode_taps(&g, &x, &[g.layers().len() - 1])?.pop().expect("one tap");
        for row in e.data().chunks_exact(g.embedding_dim()) {
            let s = idx.segments[file.records.len()];
            file.push(idx.key(s), row)?;
        }
    }
    file.save(&a.out)?;
    eprintln!("{} segment embeddings of dim {} -> {}", file.records.len(), file.dim, a.out.display());
    write_run_config("embed", &a, None, &a.out)
}

#[derive(Serialize)]
struct ProbeReport {
    accuracy: f64,
    correct: usize,
    total: usize,
    labels: Vec<String>,
    train_clips: usize,
    config: ProbeConfig,
}

fn probe_config(n: usize, epochs: usize, batch: Option<usize>, lr: f32, seed: u64) -> CmdResult<ProbeConfig> {
    let mut cfg = ProbeConfig::for_train_clips(n, seed);
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    if let Some(b) = batch {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(path: &Path) -> CmdResult<(Vec<data::LoadedClip>, Vec<data::LoadedClip>, Vec<String>)> {
    let manifest = Manifest::load(path)?;
    let labels = manifest.labels();
    if labels.len() < 2 {
        return Err(Error::Data("a probe needs at least two labels".into()).into());
    }
    let train = data::build_segment_index(&manifest.split(Split::Train)).clips;
    let test = data::build_segment_index(&manifest.split(Split::Test)).clips;
    Ok((train, test, labels))
}

fn cmd_probe(a: ProbeArgs) -> CmdResult {
    let g = model_io::load(&a.model)?;
    let (train, test, labels) = load_splits(&a.manifest)?;
    let cfg = probe_config(train.len(), a.epochs, a.batch, a.lr, a.seed)?;
    let p = probe::train_probe(&g, &train, &labels, &cfg)?;
    let ev = probe::accuracy(&g, &p, &test)?;
    if let Some(d) = &a.dump {
        probe::write_predictions_csv(&ev.rows, &labels, d)?;
    }
    let report = ProbeReport {
        accuracy: ev.accuracy,
        correct: ev.correct,
        total: ev.total,
        labels,
        train_clips: train.len(),
        config: cfg,
    };
    print_json(&report);
    eprintln!("accuracy {:.4} ({}/{})", ev.accuracy, ev.correct, ev.total);
    if let Some(o) = &a.out {
        write_json(&report, o)?;
        write_run_config("probe", &a, Some(a.seed), o)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let g = model_io::load(&a.model)?;
    let r = bench::latency_bench(&g, a.runs, a.warmup, a.seed)?;
    print_json(&r);
    eprintln!(
        "{}: mean {:.3} ms, std {:.3}, min {:.3}, max {:.3} over {} runs on {}",
        g.arch(),
        r.mean_ms,
        r.std_ms,
        r.min_ms,
        r.max_ms,
        r.runs,
        r.host
    );
    if let Some(o) = &a.out {
        write_json(&r, o)?;
        write_run_config("bench", &a, Some(a.seed), o)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let g = model_io::load(&a.model)?;
    let (train, test, labels) = load_splits(&a.manifest)?;
    let cfg = SweepConfig {
        probe: probe_config(train.len(), a.epochs, a.batch, a.lr, a.seed)?,
        runs: a.runs,
        warmup: a.warmup,
    };
    let out = bench::layer_sweep(&g, &train, &test, &labels, &cfg)?;
    bench::write_sweep_csv(&out.rows, &a.out)?;
    if let Some(svg) = &a.svg {
        fs::write(svg, bench::sweep_svg(&out.rows)).map_err(|e| Error::io(svg, e))?;
    }
    for (tap, why) in &out.failures {
        eprintln!("tap {tap} failed: {why}");
    }
    eprintln!("{} rows -> {} (host: {})", out.rows.len(), a.out.display(), out.host);
    write_run_config("sweep", &a, Some(a.seed), &a.out)
}

fn cmd_size(a: ModelArgs) -> CmdResult {
    let g = model_io::load(&a.model)?;
    let r = model_io::size_report(&g);
    print_json(&r);
    eprintln!(
        "{}: {} parameters ({} binary), {:.3} MiB quantized, {:.3} MiB float",
        g.arch(),
        r.param_count_total,
        r.param_count_binary,
        r.quantized_size_mb,
        r.float_size_mb
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let g = model_io::load(&a.model)?;
    let layers = g.enumerate_layers();
    if a.json {
        print_json(&layers);
    } else {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "index\tname\tkind\tinputs\tout_shape\tbinary_params\tfloat_params");
        for l in &layers {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:?}\t{:?}\t{}\t{}",
                l.index, l.name, l.kind, l.inputs, l.out_shape, l.binary_params, l.float_params
            );
        }
    }
    eprintln!("{}: {} layers, embedding dim {}", g.arch(), layers.len(), g.embedding_dim());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        clips_per_class: a.clips_per_class,
        test_per_class: a.test_per_class,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let m = synth::write_synthetic_dataset(&a.out, &cfg)?;
    println!("{}", m.display());
    write_run_config("synth", &a, Some(a.seed), &a.out)
}

fn run(cli: Cli) -> CmdResult {
    let o = &cli.config;
    match cli.command {
        Command::Frontend(a) => cmd_frontend(apply_overrides(a, o)?),
        Command::Init(a) => cmd_init(apply_overrides(a, o)?),
        Command::Distill(a) => cmd_distill(apply_overrides(a, o)?),
        Command::Embed(a) => cmd_embed(apply_overrides(a, o)?),
        Command::Probe(a) => cmd_probe(apply_overrides(a, o)?),
        Command::Bench(a) => cmd_bench(apply_overrides(a, o)?),
        Command::Sweep(a) => cmd_sweep(apply_overrides(a, o)?),
        Command::Size(a) => cmd_size(apply_overrides(a, o)?),
        Command::Inspect(a) => cmd_inspect(apply_overrides(a, o)?),
        Command::Synth(a) => cmd_synth(apply_overrides(a, o)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
