mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use lpq::autoquant::{run_search, QuantScheme, SearchConfig, Status};
use lpq::calib::{calibrate, Calibration, DEFAULT_BINS};
use lpq::dataset::{load_jsonl, save_jsonl};
use lpq::datagen::{
    gen_dataset, gen_model, gen_snapshots, write_snapshots, DataGenConfig, Drift, Fault, ModelGenConfig,
    SnapshotConfig,
};
use lpq::debugger::{
    compare_backends, extract_bundle, rank_samples, report, shadow_run, DEFAULT_BUNDLE_SIZE, DEFAULT_TOP_OPS,
    DEFAULT_TOP_SAMPLES,
};
use lpq::graph::transform::apply_scheme;
use lpq::graph::{self, predict, BackendConfig, ReferenceBackend};
use lpq::metrics::{compare_ne, normalized_entropy, per_layer_error};
use lpq::monitor::{monitor_run, MonitorConfig};
use lpq::perfmodel::{graph_report, BatchSizeDist, HardwareSpec};
use lpq::{Error, ErrorClass, Exec};

use manifest::Recorder;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_GATE: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

#[derive(Parser)]
#[command(name = "lpq", version, about = "Post-training low-precision toolkit for recommendation models")]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model.
    GenModel(GenModelArgs),
    /// Generate labeled samples from a teacher model.
    GenData(GenDataArgs),
    /// Generate a directory of model snapshots with optional drift.
    GenSnapshots(GenSnapshotsArgs),
    /// Collect activation histograms.
    Calibrate(CalibrateArgs),
    /// Search for a quantization scheme that meets the accuracy gate.
    Search(SearchArgs),
    /// Apply a scheme to a model.
    Quantize(QuantizeArgs),
    /// Compare two models by normalized entropy.
    Eval(EvalArgs),
    /// Build a debug bundle and a per-operator error report.
    Debug(DebugArgs),
    /// Evaluate a directory of snapshots under a frozen scheme.
    Monitor(MonitorArgs),
    /// Roofline latency report.
    Roofline(RooflineArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `outlier:LAYER:MAGNITUDE:COUNT` or `wide:LAYER:SIGMA_MULT`.
    #[arg(long = "fault")]
    faults: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shift added to every dense feature.
    #[arg(long)]
    shift: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSnapshotsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// `none`, `shift:DELTA` or `walk:SIGMA`.
    #[arg(long)]
    drift: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Samples to draw calibration data from.
    #[arg(long)]
    calib: PathBuf,
    /// Full evaluation set.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ne_diff_max: Option<f64>,
    #[arg(long = "max-skip")]
    max_skip_flops_ratio: Option<f64>,
    #[arg(long)]
    out_scheme: PathBuf,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Search log (one JSON record per line).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scheme: PathBuf,
    /// Calibration artifact from `calibrate`.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Candidate (usually low-precision) model.
    #[arg(long)]
    model_a: PathBuf,
    /// Reference model.
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fail with the accuracy-gate exit code above this relative NE change.
    #[arg(long)]
    max_ne_diff: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct DebugArgs {
    #[arg(long)]
    model_lowp: PathBuf,
    #[arg(long)]
    model_fp32: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUNDLE_SIZE)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOP_OPS)]
    top_ops: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_SAMPLES)]
    top_samples: usize,
    /// Backend settings (JSON) to compare bitwise against the default backend.
    #[arg(long)]
    compare_backend: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MonitorArgs {
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long)]
    scheme: PathBuf,
    /// Evaluation set shared by all snapshots instead of their own.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0005)]
    threshold: f64,
    /// Keep the first snapshot's activation ranges.
    #[arg(long)]
    no_recalibrate: bool,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct RooflineArgs {
    #[arg(long)]
    model: PathBuf,
    /// Preset name (`broadwell-like`) or JSON file.
    #[arg(long, default_value = "broadwell-like")]
    hw: String,
    /// `serving-mix`, `fixed:M` or a JSON file.
    #[arg(long, default_value = "serving-mix")]
    batch_dist: String,
    /// Mean ids per sample and slot.
    #[arg(long, default_value_t = 2.5)]
    pooling: f64,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Core(Error),
    Gate(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>, rec: &mut Recorder) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            rec.input(p);
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_fault(spec: &str) -> Result<Fault, Error> {
    let bad = || Error::Config(format!("bad fault `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["outlier", layer, mag, count] => Ok(Fault::OutlierWeights {
            layer: layer.to_string(),
            magnitude: mag.parse().map_err(|_| bad())?,
            count: count.parse().map_err(|_| bad())?,
        }),
        ["wide", layer, mult] => Ok(Fault::WideDynamicRange {
            layer: layer.to_string(),
            sigma_mult: mult.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn parse_drift(spec: &str) -> Result<Drift, Error> {
    let bad = || Error::Config(format!("bad drift `{spec}`"));
    if spec == "none" {
        return Ok(Drift::None);
    }
    let (kind, v) = spec.split_once(':').ok_or_else(bad)?;
    let v: f32 = v.parse().map_err(|_| bad())?;
    match kind {
        "shift" => Ok(Drift::ActivationShift { delta: v }),
        "walk" => Ok(Drift::WeightWalk { sigma_step: v }),
        _ => Err(bad()),
    }
}

fn gen_model_cmd(a: &GenModelArgs, _exec: Exec, rec: &mut Recorder) -> CmdResult {
    let mut cfg: ModelGenConfig = read_config(a.config.as_deref(), rec)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for f in &a.faults {
        cfg.faults.push(parse_fault(f)?);
    }
    rec.config(&cfg);
    rec.seed("model", cfg.seed);
    let g = gen_model(&cfg)?;
    graph::io::save(&g, &a.out)?;
    rec.output(&a.out);
    println!("wrote {} ({} nodes, {} tables)", a.out.display(), g.nodes.len(), g.tables.len());
    Ok(())
}

fn gen_data_cmd(a: &GenDataArgs, exec: Exec, rec: &mut Recorder) -> CmdResult {
    let mut cfg: DataGenConfig = read_config(a.config.as_deref(), rec)?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.shift {
        cfg.dense_shift = s;
    }
    rec.config(&cfg);
    rec.seed("data", cfg.seed);
    rec.input(&a.model);
    let g = graph::io::load(&a.model)?;
    let data = gen_dataset(&g, &cfg, exec)?;
    save_jsonl(&data, &a.out)?;
    rec.output(&a.out);
    let pos = data.iter().filter(|s| s.label == 1).count();
    println!("wrote {} samples ({pos} positive) to {}", data.len(), a.out.display());
    Ok(())
}

fn gen_snapshots_cmd(a: &GenSnapshotsArgs, exec: Exec, rec: &mut Recorder) -> CmdResult {
    let mut cfg: SnapshotConfig = read_config(a.config.as_deref(), rec)?;
    if let Some(s) = a.seed {
        cfg.model.seed = s;
        cfg.data.seed = lpq::rng::derive_seed(s, "snapshots/data");
    }
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if let Some(d) = &a.drift {
        cfg.drift = parse_drift(d)?;
    }
    rec.config(&cfg);
    rec.seed("model", cfg.model.seed);
    rec.seed("data", cfg.data.seed);
    let snaps = gen_snapshots(&cfg, exec)?;
    let dirs = write_snapshots(&snaps, &a.out)?;
    rec.output(&a.out);
    println!("wrote {} snapshots to {}", dirs.len(), a.out.display());
    Ok(())
}

fn calibrate_cmd(a: &CalibrateArgs, exec: Exec, rec: &mut Recorder) -> CmdResult {
    rec.config(&a.bins);
    rec.input(&a.model);
    rec.input(&a.data);
    let g = graph::io::load(&a.model)?;
    let data = load_jsonl(&a.data)?;
    let c = calibrate(&g, &data, a.bins, exec)?;
    c.save(&a.out)?;
    rec.output(&a.out);
    println!("calibrated {} tensors on {} samples", c.histograms.len(), c.samples);
    Ok(())
}

fn search_cmd(a: &SearchArgs, exec: Exec, rec: &mut Recorder) -> CmdResult {
    let mut cfg: SearchConfig = read_config(a.config.as_deref(), rec)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.ne_diff_max {
        cfg.ne_diff_max = v;
    }
    if let Some(v) = a.max_skip_flops_ratio {
        cfg.max_skip_flops_ratio = v;
    }
    rec.config(&cfg);
    rec.seed("search", cfg.seed);
    for p in [&a.model, &a.calib, &a.eval] {
        rec.input(p);
    }
    let g = graph::io::load(&a.model)?;
    let train = load_jsonl(&a.calib)?;
    let eval = load_jsonl(&a.eval)?;
    let out = run_search(&g, &train, &eval, None, &cfg, exec)?;
    let r = &out.result;
    write_json(r, &a.out_scheme)?;
    rec.output(&a.out_scheme);
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out_scheme.file_name().unwrap_or_default().to_os_string();
        name.push(".log.jsonl");
        a.out_scheme.with_file_name(name)
    });
    out.log.write(&log_path)?;
    rec.output(&log_path);
    println!(
        "{:?}: ne_diff small {:.3e}, full {}, skipped flops {:.4}, {} refinement steps, {} rounds",
        r.status,
        r.ne_diff_small,
        r.ne_diff_full.map_or("n/a".to_string(), |v| format!("{v:.3e}")),
        r.skipped_ratio,
        r.iterations,
        r.rounds
    );
    for o in &r.scheme.overrides {
        println!("  {} {:?}", o.node, o.action);
    }
    if r.status == Status::Fail {
        return Err(Failure::Gate(r.reason.clone()));
    }
    if let Some(p) = &a.out_model {
        let q = apply_scheme(&g, &r.scheme, &out.calibration)?;
        graph::io::save(&q, p)?;
        rec.output(p);
    }
    Ok(())
}

/// A scheme file is either a bare scheme or a search result holding one.
fn load_scheme(path: &Path) -> Result<QuantScheme, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let inner = v.get("scheme").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn quantize_cmd(a: &QuantizeArgs, _exec: Exec, rec: &mut Recorder) -> CmdResult {
    for p in [&a.model, &a.scheme, &a.calib] {
        rec.input(p);
    }
    let scheme = load_scheme(&a.scheme)?;
    rec.config(&scheme);
    let g = graph::io::load(&a.model)?;
    let calib = Calibration::load(&a.calib)?;
    let q = apply_scheme(&g, &scheme, &calib)?;
    graph::io::save(&q, &a.out)?;
    rec.output(&a.out);
    println!(
        "wrote {}: fc weights {} -> {} bytes, tables {} -> {} bytes",
        a.out.display(),
        g.fc_weight_bytes(),
        q.fc_weight_bytes(),
        g.table_bytes(),
        q.table_bytes()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs, exec: Exec, rec: &mut Recorder) -> CmdResult {
    for p in [&a.model_a, &a.model_b, &a.data] {
        rec.input(p);
    }
    rec.config(&a.max_ne_diff);
    let ga = graph::io::load(&a.model_a)?;
    let gb = graph::io::load(&a.model_b)?;
    let data = load_jsonl(&a.data)?;
    let b = ReferenceBackend::default();
    let na = normalized_entropy(&predict(&ga, &b, &data, exec)?, &data)?;
    let nb = normalized_entropy(&predict(&gb, &b, &data, exec)?, &data)?;
    let cmp = compare_ne(na.ne, nb.ne);
    let layers = match per_layer_error(&ga, &gb, &data, exec) {
        Ok(l) => l,
        Err(Error::Alignment(msg)) => {
            log::warn!("per-layer errors unavailable: {msg}");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    println!("NE a {:.6}  NE b {:.6}  ne_diff {:+.4e}", cmp.ne_lowp, cmp.ne_fp32, cmp.ne_diff);
    for l in &layers {
        println!("  {:<24} {:.4e}", l.node, l.error);
    }
    if let Some(p) = &a.out {
        let doc = serde_json::json!({ "model_a": na, "model_b": nb, "comparison": cmp, "layers": layers });
        write_json(&doc, p)?;
        rec.output(p);
    }
    match a.max_ne_diff {
        Some(max) if !cmp.passes(max) => Err(Failure::Gate(format!("ne_diff {:.4e} above {max}", cmp.ne_diff))),
        _ => Ok(()),
    }
}

fn debug_cmd(a: &DebugArgs, _exec: Exec, rec: &mut Recorder) -> CmdResult {
    for p in [&a.model_lowp, &a.model_fp32, &a.data] {
        rec.input(p);
    }
    rec.seed("bundle", a.seed);
    rec.config(&(a.n, a.top_ops, a.top_samples));
    let lowp = graph::io::load(&a.model_lowp)?;
    let fp32 = graph::io::load(&a.model_fp32)?;
    let data = load_jsonl(&a.data)?;
    let bundle = extract_bundle(&lowp, &data, a.n, a.seed)?;
    let fp32_small = bundle.shrink_model(&fp32, &data)?;
    let ranked = rank_samples(&bundle.samples, &bundle.model, &fp32_small)?;
    let ops = shadow_run(&bundle.samples, &bundle.model, &fp32_small)?;
    let rep = report(&ops, &ranked, a.top_ops, a.top_samples);
    bundle.save(&a.out)?;
    graph::io::save(&fp32_small, &a.out.join("model-fp32"))?;
    rec.output(&a.out);
    std::fs::write(a.out.join("report.txt"), rep.to_text()).map_err(|e| Error::io(&a.out, e))?;
    std::fs::write(a.out.join("report.json"), rep.to_json()).map_err(|e| Error::io(&a.out, e))?;
    match a.format {
        Format::Text => print!("{}", rep.to_text()),
        Format::Json => println!("{}", rep.to_json()),
    }
    if let Some(p) = &a.compare_backend {
        rec.input(p);
        let cfg: BackendConfig = read_config::<BackendConfig>(Some(p), rec)?;
        let other = ReferenceBackend::named("candidate", cfg);
        let diff = compare_backends(&bundle.model, &ReferenceBackend::default(), &other, &bundle.samples)?;
        write_json(&diff, &a.out.join("backend-diff.json"))?;
        match &diff.first_divergence {
            None => println!("backends agree bitwise on all {} nodes", diff.nodes.len()),
            Some(d) => println!(
                "first divergence at `{}` element {}: {} vs {} ({} nodes differ)",
                d.node,
                d.element,
                d.value_a,
                d.value_b,
                diff.diverging_nodes()
            ),
        }
    }
    Ok(())
}

fn monitor_cmd(a: &MonitorArgs, exec: Exec, rec: &mut Recorder) -> CmdResult {
    let cfg = MonitorConfig {
        threshold: a.threshold,
        recalibrate: !a.no_recalibrate,
        bins: a.bins,
        ..MonitorConfig::default()
    };
    rec.config(&cfg);
    rec.input(&a.snapshots);
    rec.input(&a.scheme);
    let scheme = load_scheme(&a.scheme)?;
    let eval = match &a.eval {
        Some(p) => {
            rec.input(p);
            Some(load_jsonl(p)?)
        }
        None => None,
    };
    let summary = monitor_run(&a.snapshots, &scheme, &cfg, eval.as_deref(), Some(&a.log), exec)?;
    rec.output(&a.log);
    for r in &summary.records {
        match (&r.error, r.ne_diff) {
            (Some(e), _) => println!("{:<12} error: {e}", r.snapshot_id),
            (None, Some(d)) => println!(
                "{:<12} ne_diff {:+.4e}{}",
                r.snapshot_id,
                d,
                if r.alert { "  ALERT" } else { "" }
            ),
            _ => {}
        }
    }
    if summary.any_alert() {
        return Err(Failure::Gate("ne_diff above threshold".into()));
    }
    Ok(())
}

fn roofline_cmd(a: &RooflineArgs, _exec: Exec, rec: &mut Recorder) -> CmdResult {
    rec.input(&a.model);
    let hw = HardwareSpec::load(&a.hw)?;
    let dist = BatchSizeDist::parse(&a.batch_dist)?;
    rec.config(&(&hw, &dist, a.pooling));
    let g = graph::io::load(&a.model)?;
    let rep = graph_report(&g, &hw, &dist, a.pooling);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rep).map_err(Error::from)?);
    } else {
        print!("{}", rep.to_text());
    }
    if let Some(p) = &a.out {
        write_json(&rep, p)?;
        rec.output(p);
    }
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LPQ_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let exec = match cli.jobs {
        Some(0) => {
            eprintln!("--jobs must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        Some(1) => Exec::Sequential,
        Some(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("thread pool already initialised: {e}");
            }
            Exec::Parallel
        }
        None => Exec::default(),
    };
    let (name, run): (&str, Box<dyn Fn(Exec, &mut Recorder) -> CmdResult>) = match &cli.command {
        Command::GenModel(a) => ("gen-model", Box::new(move |e, r| gen_model_cmd(a, e, r))),
        Command::GenData(a) => ("gen-data", Box::new(move |e, r| gen_data_cmd(a, e, r))),
        Command::GenSnapshots(a) => ("gen-snapshots", Box::new(move |e, r| gen_snapshots_cmd(a, e, r))),
        Command::Calibrate(a) => ("calibrate", Box::new(move |e, r| calibrate_cmd(a, e, r))),
        Command::Search(a) => ("search", Box::new(move |e, r| search_cmd(a, e, r))),
        Command::Quantize(a) => ("quantize", Box::new(move |e, r| quantize_cmd(a, e, r))),
        Command::Eval(a) => ("eval", Box::new(move |e, r| eval_cmd(a, e, r))),
        Command::Debug(a) => ("debug", Box::new(move |e, r| debug_cmd(a, e, r))),
        Command::Monitor(a) => ("monitor", Box::new(move |e, r| monitor_cmd(a, e, r))),
        Command::Roofline(a) => ("roofline", Box::new(move |e, r| roofline_cmd(a, e, r))),
    };
    let mut rec = Recorder::new(name);
    let code = match run(exec, &mut rec) {
        Ok(()) => 0,
        Err(Failure::Gate(msg)) => {
            eprintln!("accuracy gate failed: {msg}");
            EXIT_GATE
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Internal => EXIT_INTERNAL,
            }
        }
    };
    rec.finish(code as i32);
    ExitCode::from(code)
}
