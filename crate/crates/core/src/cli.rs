//! The `evfuse` command line.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_gate, load_model, read_checkpoint, save_model, GATE_KIND, MODEL_KIND};
use crate::config::ExperimentConfig;
use crate::detector::DetectMode;
use crate::error::{Error, Result};
use crate::eval::{metrics_csv, plot_data, GtMode, PlotData, SweepPoints};
use crate::event::{evt1, vox1, voxelize, Event, EventStream, Micros, Polarity, VoxelSpec, Window};
use crate::io::{decode_pgm, encode_pgm, write_atomic, write_json};
use crate::labels::{labels_from_json, save_labels, LabelSet};
use crate::pipeline::{eval_model, flextune_model, generate_all, train_model};
use crate::seed;
use crate::synth::{SceneConfig, SceneSequence};
use crate::tune::{pseudo_label_records, records_from_jsonl, records_to_jsonl, rounds_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "evfuse", version, about = "Event and frame fusion detection toolkit")]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene (or every scene of an experiment) to EVT1, PGM frames and labels.
    SynthGen(SynthGenArgs),
    /// Accumulate an EVT1 window into a VOX1 tensor.
    Voxelize(VoxelizeArgs),
    /// Train on full labeled windows, then on sparse high-frequency targets.
    Train(TrainArgs),
    /// Self-training rounds with calibrated pseudo-labels.
    Flextune(FlextuneArgs),
    /// Frequency sweep: metrics CSV and plot JSON.
    Eval(EvalArgs),
    /// Voxelization throughput.
    Bench(BenchArgs),
    /// Summarize any artifact file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Scene config JSON.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    scene: Option<PathBuf>,
    /// Experiment config JSON; writes one directory per scene.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VoxelizeArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    t1: Micros,
    #[arg(long, allow_hyphen_values = true)]
    t2: Micros,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Sensor size for a zero-byte event file.
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path (default: <output_dir>/model.bin).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlextuneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene config to tune on instead of the experiment's training scenes; repeatable.
    #[arg(long)]
    scene: Vec<PathBuf>,
    /// Checkpoint path (default: <output_dir>/tuned.bin).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
    Despawn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Fused,
    EventOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GtArg {
    Exact,
    Interpolated,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated frequencies in Hz; windows end at frame times.
    #[arg(long, value_delimiter = ',', conflicts_with = "offsets")]
    freqs: Option<Vec<f64>>,
    /// Offsets i/n, i = 0..=n, of every frame interval.
    #[arg(long)]
    offsets: Option<usize>,
    #[arg(long, value_enum)]
    gt_mode: Option<GtArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Directory for metrics.csv and plot.json (default: output_dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 4_000_000)]
    events: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(5..))]
    runs: u32,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    #[arg(long, default_value_t = 640)]
    width: u16,
    #[arg(long, default_value_t = 480)]
    height: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default())
        .filter_level(level)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthGen(a) => synth_gen(a),
        Command::Voxelize(a) => voxelize_cmd(a),
        Command::Train(a) => train(a),
        Command::Flextune(a) => flextune(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(&a.path),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Argument(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `scene.json`, `events.evt1`, `frames/<t>.pgm` and `labels.json`.
pub fn write_scene_dir(dir: &Path, scene: &SceneSequence) -> Result<()> {
    write_json(&dir.join("scene.json"), &scene.config)?;
    evt1::write_file(&dir.join("events.evt1"), &scene.events)?;
    let mut labels = LabelSet::new();
    for f in &scene.frames {
        write_atomic(&dir.join("frames").join(format!("{:010}.pgm", f.t)), &encode_pgm(&f.image))?;
        labels.insert(f.t, scene.gt_at(f.t)?);
    }
    save_labels(&dir.join("labels.json"), &labels)
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let named: Vec<(String, SceneConfig)> = match (&a.scene, &a.config) {
        (Some(p), _) => {
            let c: SceneConfig = crate::io::read_json(p)?;
            c.validate().map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
            vec![(String::new(), c)]
        }
        (None, Some(p)) => {
            let cfg = load_config(p)?;
            let (train, test, despawn) = cfg.scene_configs()?;
            let mut v: Vec<(String, SceneConfig)> = Vec::new();
            v.extend(train.into_iter().enumerate().map(|(i, c)| (format!("train-{i:03}"), c)));
            v.extend(test.into_iter().enumerate().map(|(i, c)| (format!("test-{i:03}"), c)));
            v.extend(despawn.map(|c| ("despawn".to_string(), c)));
            v
        }
        (None, None) => return Err(Error::arg("synth-gen needs --scene or --config")),
    };
    let configs: Vec<SceneConfig> = named.iter().map(|(_, c)| c.clone()).collect();
    let scenes = generate_all(&configs)?;
    for ((name, _), scene) in named.iter().zip(&scenes) {
        let dir = a.out.join(name);
        write_scene_dir(&dir, scene)?;
        println!(
            "{}: {} events, {} frames",
            dir.display(),
            scene.events.len(),
            scene.frames.len()
        );
    }
    Ok(())
}

fn voxelize_cmd(a: VoxelizeArgs) -> Result<()> {
    let window = Window::new(a.t1, a.t2)?;
    let bytes = std::fs::read(&a.events).map_err(|e| Error::io(&a.events, e))?;
    let stream = if bytes.is_empty() {
        match (a.width, a.height) {
            (Some(w), Some(h)) if w > 0 && h > 0 => EventStream::empty(w, h),
            _ => return Err(Error::arg("a zero-byte event file needs --width and --height")),
        }
    } else {
        evt1::decode(&bytes).map_err(|e| Error::data(format!("{}: {e}", a.events.display())))?
    };
    let spec = VoxelSpec::new(a.bins, stream.sensor_h().into(), stream.sensor_w().into())?;
    let t = voxelize(&stream, window, spec)?;
    vox1::write_file(&a.out, &t)?;
    println!(
        "{}: (2, {}, {}, {}) tensor, {} events in [{}, {})",
        a.out.display(),
        spec.bins,
        spec.height,
        spec.width,
        t.total(),
        window.t1,
        window.t2
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (train_cfgs, _, _) = cfg.scene_configs()?;
    let scenes = generate_all(&train_cfgs)?;
    let (model, log) = train_model(&cfg, &scenes)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("model.bin"));
    save_model(&out, &model)?;
    write_atomic(&out.with_file_name("train_loss.csv"), log.to_csv().as_bytes())?;
    println!(
        "{}: final loss base {} sparse {}",
        out.display(),
        fmt_last(&log.base),
        fmt_last(&log.sparse)
    );
    Ok(())
}

fn fmt_last(v: &[f64]) -> String {
    v.last().map_or_else(|| "n/a".into(), |l| format!("{l:.4}"))
}

fn flextune(a: FlextuneArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut model = load_model(&a.checkpoint)?;
    let (ids, configs): (Vec<String>, Vec<SceneConfig>) = if a.scene.is_empty() {
        let (train, _, _) = cfg.scene_configs()?;
        train.into_iter().enumerate().map(|(i, c)| (format!("train-{i:03}"), c)).unzip()
    } else {
        let mut v = Vec::new();
        for p in &a.scene {
            let c: SceneConfig = crate::io::read_json(p)?;
            c.validate().map_err(|e| Error::data(format!("{}: {e}", p.display())))?;
            v.push((p.display().to_string(), c));
        }
        v.into_iter().unzip()
    };
    let scenes = generate_all(&configs)?;
    let (labels, history) = flextune_model(&cfg, &cfg.tune, &mut model, &scenes)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("tuned.bin"));
    save_model(&out, &model)?;
    let last = labels.last().ok_or_else(|| Error::arg("flextune ran zero rounds"))?;
    let records = pseudo_label_records(&ids, last)?;
    write_atomic(&out.with_file_name("pseudo_labels.jsonl"), records_to_jsonl(&records)?.as_bytes())?;
    write_atomic(&out.with_file_name("rounds.csv"), rounds_csv(&history).as_bytes())?;
    for r in &history {
        println!("round {}: {} pseudo-labels, loss {:.4}", r.round, r.pseudo_labels, r.mean_loss);
    }
    println!("{}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let model = load_model(&a.checkpoint)?;
    let (train, test, despawn) = cfg.scene_configs()?;
    let configs = match a.split {
        Split::Train => train,
        Split::Test => test,
        Split::Despawn => vec![despawn.ok_or_else(|| Error::arg("this experiment has no despawn scene"))?],
    };
    let scenes = generate_all(&configs)?;
    let points = match (a.freqs, a.offsets) {
        (Some(f), _) => SweepPoints::Frequencies(f),
        (None, Some(n)) => SweepPoints::Offsets { n },
        (None, None) => cfg.eval.points.clone(),
    };
    let gt_mode = match a.gt_mode {
        Some(GtArg::Exact) => GtMode::Exact,
        Some(GtArg::Interpolated) => GtMode::Interpolated,
        None => cfg.eval.gt_mode,
    };
    let mode = match a.mode {
        Some(ModeArg::Fused) => DetectMode::Fused,
        Some(ModeArg::EventOnly) => DetectMode::EventOnly,
        None => cfg.eval.mode,
    };
    let sweep = eval_model(&cfg, &model, &scenes, &points, gt_mode, mode)?;
    let dir = a.out_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let csv = metrics_csv(&sweep);
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
    write_json(&dir.join("plot.json"), &plot_data(&sweep))?;
    print!("{csv}");
    Ok(())
}

/// Schema of the `bench` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub schema_version: u32,
    pub events: usize,
    pub runs: usize,
    pub bins: usize,
    pub width: u16,
    pub height: u16,
    pub run_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub events_per_second: f64,
    pub target_events_per_second: f64,
    pub meets_target: bool,
}

pub const BENCH_TARGET: f64 = 10_000_000.0;

/// Uniform random events over the sensor with evenly spaced timestamps.
pub fn bench_stream(events: usize, width: u16, height: u16, seed_value: u64) -> Result<EventStream> {
    let mut rng = seed::stream(seed_value, seed::SAMPLING);
    let v = (0..events)
        .map(|i| {
            let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.random_range(0..width), rng.random_range(0..height), i as Micros, p)
        })
        .collect();
    EventStream::new(width, height, v)
}

pub fn run_bench(stream: &EventStream, bins: usize, runs: usize) -> Result<BenchReport> {
    if runs < 5 {
        return Err(Error::arg("bench needs at least 5 runs"));
    }
    let spec = VoxelSpec::new(bins, stream.sensor_h().into(), stream.sensor_w().into())?;
    let end = stream.events().last().map_or(1, |e| e.t + 1);
    let window = Window::new(0, end.max(1))?;
    let mut secs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let t = voxelize(stream, window, spec)?;
        secs.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(t.total());
    }
    let mut sorted = secs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 {
        sorted[runs / 2]
    } else {
        0.5 * (sorted[runs / 2 - 1] + sorted[runs / 2])
    };
    let eps = stream.len() as f64 / median.max(1e-12);
    Ok(BenchReport {
        schema_version: 1,
        events: stream.len(),
        runs,
        bins,
        width: stream.sensor_w(),
        height: stream.sensor_h(),
        run_seconds: secs,
        median_seconds: median,
        events_per_second: eps,
        target_events_per_second: BENCH_TARGET,
        meets_target: eps >= BENCH_TARGET,
    })
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.width == 0 || a.height == 0 || a.events == 0 {
        return Err(Error::arg("bench needs a positive sensor size and event count"));
    }
    let stream = bench_stream(a.events, a.width, a.height, a.seed)?;
    let report = run_bench(&stream, a.bins, a.runs as usize)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("bench report", e))?;
    if let Some(p) = &a.out {
        write_atomic(p, format!("{text}\n").as_bytes())?;
    }
    println!("{text}");
    if !report.meets_target {
        log::warn!(
            "throughput {:.0} events/s is below the {:.0} events/s target",
            report.events_per_second,
            BENCH_TARGET
        );
    }
    Ok(())
}

/// Identify and summarize an artifact; returns the printed summary.
pub fn describe(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let ctx = |e: Error| match e {
        Error::Data(m) | Error::Argument(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    };
    if bytes.starts_with(evt1::MAGIC) {
        let s = evt1::decode(&bytes).map_err(ctx)?;
        let pos = s.events().iter().filter(|e| e.p == Polarity::Positive).count();
        let span = match (s.events().first(), s.events().last()) {
            (Some(a), Some(b)) => format!("t [{}, {}] us", a.t, b.t),
            _ => "no timestamps".into(),
        };
        return Ok(format!(
            "EVT1 events: {}x{} sensor, {} events ({} positive, {} negative), {span}",
            s.sensor_w(),
            s.sensor_h(),
            s.len(),
            pos,
            s.len() - pos
        ));
    }
    if bytes.starts_with(vox1::MAGIC) {
        let t = vox1::decode(&bytes).map_err(ctx)?;
        let s = t.spec();
        let w = t.window();
        return Ok(format!(
            "VOX1 tensor: shape (2, {}, {}, {}), window [{}, {}), {} events",
            s.bins,
            s.height,
            s.width,
            w.t1,
            w.t2,
            t.total()
        ));
    }
    if bytes.starts_with(b"P5") {
        let img = decode_pgm(&bytes).map_err(ctx)?;
        let (lo, hi) = img
            .pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        return Ok(format!("PGM frame: {}x{}, intensity [{lo:.3}, {hi:.3}]", img.width, img.height));
    }
    if ext == "bin" {
        return describe_checkpoint(path);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::data(format!("{}: unrecognized binary file", path.display())))?;
    match ext {
        "jsonl" => {
            let recs = records_from_jsonl(&text).map_err(ctx)?;
            let labels: usize = recs.iter().map(|r| r.labels.len()).sum();
            Ok(format!("pseudo-labels: {} sub-windows, {labels} labels", recs.len()))
        }
        "csv" => {
            let mut lines = text.lines();
            let header = lines.next().ok_or_else(|| Error::data(format!("{}: empty CSV", path.display())))?;
            let cols = header.split(',').count();
            let mut rows = 0;
            for (i, l) in lines.enumerate() {
                if l.split(',').count() != cols {
                    return Err(Error::data(format!("{}: line {} has the wrong column count", path.display(), i + 2)));
                }
                rows += 1;
            }
            Ok(format!("CSV table: {rows} rows, columns {header}"))
        }
        _ => describe_json(path, &text),
    }
}

fn describe_checkpoint(path: &Path) -> Result<String> {
    let (s, values) = read_checkpoint(path)?;
    match s.kind.as_str() {
        MODEL_KIND => {
            let m = load_model(path)?;
            let c = &m.config;
            Ok(format!(
                "model checkpoint: {} parameters in {} tensors, input (2, {}, {}, {}), {} classes, {} frequency slot(s)",
                values.len(),
                s.tensors.len(),
                c.time_bins,
                c.height,
                c.width,
                c.num_classes,
                c.frequency_slots
            ))
        }
        GATE_KIND => {
            let g = load_gate(path)?;
            Ok(format!("gate checkpoint: {} rows, sigma {}, lambda {}", g.rows, g.sigma, g.lambda_reg))
        }
        other => Err(Error::data(format!("{}: unknown checkpoint kind {other:?}", path.display()))),
    }
}

fn describe_json(path: &Path, text: &str) -> Result<String> {
    let data = |m: String| Error::data(format!("{}: {m}", path.display()));
    if text.trim().is_empty() {
        return Ok("labels: empty set".into());
    }
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| data(e.to_string()))?;
    let has = |k: &str| v.get(k).is_some();
    if has("kind") && has("tensors") {
        return describe_checkpoint(path);
    }
    if has("schema_version") && has("seed") {
        let c = ExperimentConfig::from_json(text).map_err(|e| data(e.to_string()))?;
        return Ok(format!(
            "experiment config: seed {}, plan {} -> {} Hz, {} tune round(s), output {}",
            c.seed,
            c.plan.base_hz,
            c.plan.high_hz,
            c.tune.rounds,
            c.output_dir.display()
        ));
    }
    if has("records") {
        let l = labels_from_json(text).map_err(|e| data(e.to_string()))?;
        let boxes: usize = l.values().map(Vec::len).sum();
        return Ok(format!("labels: {} timestamps, {boxes} boxes", l.len()));
    }
    if has("sensor_w") {
        let c: SceneConfig = serde_json::from_value(v).map_err(|e| data(e.to_string()))?;
        c.validate().map_err(|e| data(e.to_string()))?;
        return Ok(format!(
            "scene config: {}x{} sensor, {} us at {} Hz, {} objects, seed {}",
            c.sensor_w,
            c.sensor_h,
            c.duration,
            c.frame_hz,
            c.objects.len(),
            c.seed
        ));
    }
    if has("series") && has("x") {
        let p: PlotData = serde_json::from_value(v).map_err(|e| data(e.to_string()))?;
        return Ok(format!("plot data: {} points, {} series, gt {:?}", p.x.len(), p.series.len(), p.gt_mode));
    }
    if has("events_per_second") {
        let r: BenchReport = serde_json::from_value(v).map_err(|e| data(e.to_string()))?;
        return Ok(format!(
            "bench report: {:.3e} events/s over {} runs of {} events",
            r.events_per_second, r.runs, r.events
        ));
    }
    Err(data("unrecognized JSON document".into()))
}

fn inspect(path: &Path) -> Result<()> {
    let s = describe(path)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}
