//! Single command-line entry point: simulate scenes, train, evaluate, run
//! the latency benches, track, and self-check.
//!
//! Configuration resolves in layers, later wins: built-in defaults, a JSON
//! config file (`--config`), dotted-key overrides (`--set scene.frames=40`,
//! repeatable), then the dedicated shorthand flags. Unknown keys anywhere
//! are rejected. Every run writes the fully resolved configuration to
//! `<outdir>/config.snapshot.json` before doing any work, so an experiment
//! can always be replayed from its artifacts.
//!
//! Exit codes: 0 success; 2 usage, config, or stream-ordering errors;
//! 3 I/O, parse, or checkpoint errors; 4 training divergence; 5 selfcheck
//! failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchConfig};
use crate::engine::{DecoderConfig, Engine};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, EvalParams, SplitEval};
use crate::selfcheck::{self, SelfCheckConfig};
use crate::sim::{read_scene_file, simulate, write_scene_file, SceneConfig};
use crate::track::{Tracker, TrackerConfig};
use crate::train::{train_streaming, TrainConfig};

/// Environment variable consulted for the output directory when `--out` is
/// not given.
pub const OUT_ENV: &str = "STREAMDET_OUT";
/// Fallback output directory when neither `--out` nor the env var is set.
pub const DEFAULT_OUT: &str = "streamdet_out";
/// Exit code for a selfcheck run whose suites did not all pass.
pub const EXIT_SELFCHECK_FAILED: i32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Train,
    Eval,
    Bench,
    Track,
    Selfcheck,
}

impl Subcommand {
    pub fn parse(s: &str) -> Option<Subcommand> {
        match s {
            "simulate" => Some(Subcommand::Simulate),
            "train" => Some(Subcommand::Train),
            "eval" => Some(Subcommand::Eval),
            "bench" => Some(Subcommand::Bench),
            "track" => Some(Subcommand::Track),
            "selfcheck" => Some(Subcommand::Selfcheck),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Train => "train",
            Subcommand::Eval => "eval",
            Subcommand::Bench => "bench",
            Subcommand::Track => "track",
            Subcommand::Selfcheck => "selfcheck",
        }
    }
}

/// Scoring knobs not owned by any other section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Planar speed separating the static and moving splits, m/s.
    pub split_speed: f64,
    /// Detections below this score are not scored.
    pub min_score: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split_speed: 1.0, min_score: 0.05 }
    }
}

/// The full configuration tree, one section per module. A partial file or
/// override set fills the rest from defaults; unknown keys are errors at
/// every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub scene: SceneConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub tracker: TrackerConfig,
    pub bench: BenchConfig,
    pub selfcheck: SelfCheckConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            scene: SceneConfig::default(),
            decoder: DecoderConfig::toy(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            tracker: TrackerConfig::default(),
            bench: BenchConfig::default(),
            selfcheck: SelfCheckConfig::default(),
        }
    }
}

/// Everything parsed from the command line. The dedicated flags are applied
/// after `--set` overrides, so the most specific spelling always wins.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    pub config_path: Option<PathBuf>,
    /// Sets every section's seed at once.
    pub seed: Option<u64>,
    pub outdir: PathBuf,
    /// Dotted-key overrides in the order given.
    pub overrides: Vec<(String, String)>,
    /// Train only: one independent training run per seed.
    pub seeds: Vec<u64>,
    /// Train only: worker threads across seeds.
    pub jobs: usize,
    pub frames: Option<u64>,
    pub objects: Option<usize>,
    pub scene_out: Option<PathBuf>,
    pub scene_in: Vec<PathBuf>,
    pub frames_per_seq: Option<usize>,
    pub detach_prefix: Option<usize>,
    pub split_speed: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub corrupt_gradients: bool,
}

pub fn usage() -> String {
    format!(
        "streamdet: streaming object-centric 3D detection at desk scale

usage: streamdet <subcommand> [flags]

subcommands:
  simulate   generate a synthetic scene file (JSON Lines, one frame per line)
  train      train the detector on scene files; writes checkpoint + loss curve
  eval       score a detector on scene files; writes metrics CSV + JSON
  bench      latency comparison of the temporal fusion paradigms
  track      run the greedy tracker over scene files; writes a tracks CSV
  selfcheck  run the numeric invariant suites; exit {EXIT_SELFCHECK_FAILED} if any fail

flags:
  --config PATH        JSON config file with sections scene, decoder, train,
                       eval, tracker, bench, selfcheck (all optional)
  --set KEY=VALUE      dotted-key override, repeatable, e.g. --set scene.frames=40
  --seed N             set every section's seed
  --seeds A,B,C        train: comma-separated seeds, one training run each
  --jobs N             train: run seeds on up to N threads (default 1)
  --frames N           shorthand for --set scene.frames=N
  --objects N          shorthand for --set scene.n_objects=N
  --scene-out PATH     simulate: output file (default <outdir>/scene.jsonl)
  --scene-in PATH      train/eval/track: input scene file, repeatable
  --frames-per-seq N   shorthand for --set train.frames_per_seq=N
  --detach-prefix N    shorthand for --set train.detach_prefix=N
  --split-speed X      shorthand for --set eval.split_speed=X
  --checkpoint PATH    eval/track: engine checkpoint to load
  --out DIR            output directory (else ${OUT_ENV}, else ./{DEFAULT_OUT})
  --corrupt-gradients  selfcheck: sabotage one backward rule on purpose
  --help               print this help

exit codes: 0 ok; 2 usage/config; 3 I/O, parse, or checkpoint; 4 divergence;
{EXIT_SELFCHECK_FAILED} selfcheck failure.
"
    )
}

fn flag_value(args: &[String], i: &mut usize, flag: &str, inline: &Option<String>) -> Result<String> {
    if let Some(v) = inline {
        return Ok(v.clone());
    }
    *i += 1;
    args.get(*i)
        .cloned()
        .ok_or_else(|| Error::Config(format!("flag {flag} needs a value")))
}

fn parse_num<T: std::str::FromStr>(flag: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("flag {flag}: bad value '{v}': {e}")))
}

pub fn parse_args(args: &[String]) -> Result<RunConfig> {
    let first = args.first().ok_or_else(|| Error::Config("missing subcommand".into()))?;
    let subcommand = Subcommand::parse(first).ok_or_else(|| {
        Error::Config(format!(
            "unknown subcommand '{first}'; expected simulate, train, eval, bench, track, or selfcheck"
        ))
    })?;

    let mut rc = RunConfig {
        subcommand,
        config_path: None,
        seed: None,
        outdir: PathBuf::new(),
        overrides: Vec::new(),
        seeds: Vec::new(),
        jobs: 1,
        frames: None,
        objects: None,
        scene_out: None,
        scene_in: Vec::new(),
        frames_per_seq: None,
        detach_prefix: None,
        split_speed: None,
        checkpoint: None,
        corrupt_gradients: false,
    };
    let mut out_flag: Option<PathBuf> = None;

    let mut i = 1;
    while i < args.len() {
        // Accept both `--flag value` and `--flag=value`.
        let (flag, inline) = match args[i].split_once('=') {
            Some((f, v)) if args[i].starts_with("--") => (f.to_string(), Some(v.to_string())),
            _ => (args[i].clone(), None),
        };
        match flag.as_str() {
            "--config" => rc.config_path = Some(PathBuf::from(flag_value(args, &mut i, &flag, &inline)?)),
            "--set" => {
                let raw = flag_value(args, &mut i, &flag, &inline)?;
                let (k, v) = raw.split_once('=').ok_or_else(|| {
                    Error::Config(format!("--set expects KEY=VALUE, got '{raw}'"))
                })?;
                rc.overrides.push((k.to_string(), v.to_string()));
            }
            "--seed" => rc.seed = Some(parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?),
            "--seeds" => {
                let raw = flag_value(args, &mut i, &flag, &inline)?;
                rc.seeds = raw
                    .split(',')
                    .map(|s| parse_num(&flag, s.trim()))
                    .collect::<Result<Vec<u64>>>()?;
                if rc.seeds.is_empty() {
                    return Err(Error::Config("--seeds needs at least one seed".into()));
                }
            }
            "--jobs" => {
                rc.jobs = parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?;
                if rc.jobs == 0 {
                    return Err(Error::Config("--jobs must be at least 1".into()));
                }
            }
            "--frames" => rc.frames = Some(parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?),
            "--objects" => rc.objects = Some(parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?),
            "--scene-out" => rc.scene_out = Some(PathBuf::from(flag_value(args, &mut i, &flag, &inline)?)),
            "--scene-in" => rc.scene_in.push(PathBuf::from(flag_value(args, &mut i, &flag, &inline)?)),
            "--frames-per-seq" => {
                rc.frames_per_seq = Some(parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?)
            }
            "--detach-prefix" => {
                rc.detach_prefix = Some(parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?)
            }
            "--split-speed" => {
                rc.split_speed = Some(parse_num(&flag, &flag_value(args, &mut i, &flag, &inline)?)?)
            }
            "--checkpoint" => rc.checkpoint = Some(PathBuf::from(flag_value(args, &mut i, &flag, &inline)?)),
            "--out" => out_flag = Some(PathBuf::from(flag_value(args, &mut i, &flag, &inline)?)),
            "--corrupt-gradients" => rc.corrupt_gradients = true,
            other => {
                return Err(Error::Config(format!("unknown flag '{other}'; see --help")));
            }
        }
        i += 1;
    }

    rc.outdir = match out_flag {
        Some(p) => p,
        None => match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUT),
        },
    };
    Ok(rc)
}

/// Override values parse as JSON when they can (numbers, booleans, nested
/// literals) and fall back to plain strings (paths, names).
fn parse_override_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Insert `value` at a dotted path, creating intermediate objects. Writing
/// through a non-object (e.g. a scalar already at that key) is an error.
fn set_dotted(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' has an empty segment")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override key '{key}': segment before '{p}' is not an object"))
        })?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| {
        Error::Config(format!("override key '{key}' writes into a non-object value"))
    })?;
    obj.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

/// Layer file, overrides, and dedicated flags into one typed config.
/// Typing happens after the JSON merge, so `deny_unknown_fields` screens
/// file keys and override keys alike.
pub fn resolve_config(rc: &RunConfig) -> Result<AppConfig> {
    let mut root = match &rc.config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::Config(format!("config file {}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    for (key, raw) in &rc.overrides {
        set_dotted(&mut root, key, parse_override_value(raw))?;
    }
    let mut cfg: AppConfig =
        serde_json::from_value(root).map_err(|e| Error::Config(format!("config: {e}")))?;

    if let Some(seed) = rc.seed {
        cfg.scene.seed = seed;
        cfg.train.seed = seed;
        cfg.bench.seed = seed;
        cfg.selfcheck.seed = seed;
    }
    if let Some(v) = rc.frames {
        cfg.scene.frames = v;
    }
    if let Some(v) = rc.objects {
        cfg.scene.n_objects = v;
    }
    if let Some(v) = rc.frames_per_seq {
        cfg.train.frames_per_seq = v;
    }
    if let Some(v) = rc.detach_prefix {
        cfg.train.detach_prefix = v;
    }
    if let Some(v) = rc.split_speed {
        cfg.eval.split_speed = v;
    }
    if rc.corrupt_gradients {
        cfg.selfcheck.corrupt_gradients = true;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Snapshot<'a> {
    subcommand: &'a str,
    outdir: String,
    seed: Option<u64>,
    seeds: &'a [u64],
    jobs: usize,
    config_file: Option<String>,
    overrides: Vec<String>,
    scene_in: Vec<String>,
    scene_out: Option<String>,
    checkpoint: Option<String>,
    config: &'a AppConfig,
}

/// The replay record: flags plus the fully resolved config tree.
pub fn write_snapshot(rc: &RunConfig, cfg: &AppConfig) -> Result<PathBuf> {
    let snap = Snapshot {
        subcommand: rc.subcommand.name(),
        outdir: rc.outdir.display().to_string(),
        seed: rc.seed,
        seeds: &rc.seeds,
        jobs: rc.jobs,
        config_file: rc.config_path.as_ref().map(|p| p.display().to_string()),
        overrides: rc.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect(),
        scene_in: rc.scene_in.iter().map(|p| p.display().to_string()).collect(),
        scene_out: rc.scene_out.as_ref().map(|p| p.display().to_string()),
        checkpoint: rc.checkpoint.as_ref().map(|p| p.display().to_string()),
        config: cfg,
    };
    let path = rc.outdir.join("config.snapshot.json");
    let text = serde_json::to_string_pretty(&snap).expect("config serializes");
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Parse, resolve, snapshot, dispatch. Errors bubble to `dispatch` which
/// maps them onto exit codes.
pub fn run(args: &[String]) -> Result<i32> {
    if args.is_empty() {
        eprintln!("{}", usage());
        return Ok(2);
    }
    if args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{}", usage());
        return Ok(0);
    }
    let rc = parse_args(args)?;
    let cfg = resolve_config(&rc)?;
    std::fs::create_dir_all(&rc.outdir)?;
    write_snapshot(&rc, &cfg)?;
    match rc.subcommand {
        Subcommand::Simulate => cmd_simulate(&rc, &cfg),
        Subcommand::Train => cmd_train(&rc, &cfg),
        Subcommand::Eval => cmd_eval(&rc, &cfg),
        Subcommand::Bench => cmd_bench(&rc, &cfg),
        Subcommand::Track => cmd_track(&rc, &cfg),
        Subcommand::Selfcheck => cmd_selfcheck(&cfg),
    }
}

/// Entry point used by the binary: maps every error to its exit code.
pub fn dispatch(args: &[String]) -> i32 {
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("streamdet: {e}");
            e.exit_code()
        }
    }
}

fn cmd_simulate(rc: &RunConfig, cfg: &AppConfig) -> Result<i32> {
    let path = rc.scene_out.clone().unwrap_or_else(|| rc.outdir.join("scene.jsonl"));
    let scene = simulate(&cfg.scene)?;
    write_scene_file(&scene.frames, &path)?;
    let n_frames = scene.frames.len();
    let tokens: usize = scene.frames.iter().map(|f| f.tokens.dims2().0).sum();
    let mean_tok = if n_frames == 0 { 0.0 } else { tokens as f64 / n_frames as f64 };
    println!(
        "scene: {} frames, {} objects, {:.1} tokens/frame -> {}",
        n_frames,
        cfg.scene.n_objects,
        mean_tok,
        path.display()
    );
    Ok(0)
}

/// One full training run; artifacts land in `dir`. Returns the tail mean
/// loss for the summary line.
fn train_one_seed(
    cfg: &AppConfig,
    scenes: &[Vec<crate::sim::SimFrame>],
    seed: u64,
    dir: &Path,
) -> Result<f64> {
    std::fs::create_dir_all(dir)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut engine = Engine::new(cfg.decoder.clone(), seed)?;
    let report = train_streaming(&mut engine, scenes, &tc)?;
    engine.save(&dir.join("checkpoint.sdeg"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    Ok(report.tail_mean_loss())
}

fn cmd_train(rc: &RunConfig, cfg: &AppConfig) -> Result<i32> {
    if rc.scene_in.is_empty() {
        return Err(Error::Config("train needs at least one --scene-in file".into()));
    }
    let mut scenes = Vec::new();
    for p in &rc.scene_in {
        scenes.push(read_scene_file(p)?);
    }
    let seeds: Vec<u64> = if rc.seeds.is_empty() { vec![cfg.train.seed] } else { rc.seeds.clone() };
    // One seed trains into the outdir itself; several get seed_<s>/ each.
    let multi = seeds.len() > 1;
    let jobs = rc.jobs.min(seeds.len()).max(1);

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(u64, Result<f64>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let seed = seeds[i];
                let dir = if multi {
                    rc.outdir.join(format!("seed_{seed}"))
                } else {
                    rc.outdir.clone()
                };
                let r = train_one_seed(cfg, &scenes, seed, &dir);
                results.lock().unwrap().push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(s, _)| *s);
    for (seed, r) in results {
        let tail = r?;
        let dir = if multi { format!("seed_{seed}/") } else { String::new() };
        println!(
            "seed {seed}: tail mean loss {:.4} -> {}{}checkpoint.sdeg",
            tail,
            rc.outdir.join(&dir).display(),
            if dir.is_empty() { "/" } else { "" }
        );
    }
    Ok(0)
}

/// Either the trained checkpoint or a fresh engine from the decoder section.
fn load_engine(rc: &RunConfig, cfg: &AppConfig) -> Result<Engine> {
    match &rc.checkpoint {
        Some(p) => Engine::load(p),
        None => Engine::new(cfg.decoder.clone(), cfg.train.seed),
    }
}

fn cmd_eval(rc: &RunConfig, cfg: &AppConfig) -> Result<i32> {
    if rc.scene_in.is_empty() {
        return Err(Error::Config("eval needs at least one --scene-in file".into()));
    }
    let mut engine = load_engine(rc, cfg)?;
    let mut frames_all = Vec::new();
    let mut preds_all = Vec::new();
    for p in &rc.scene_in {
        let frames = read_scene_file(p)?;
        engine.reset_stream();
        for f in &frames {
            preds_all.push(engine.infer_step(&f.tokens, &f.refs, &f.ego, f.time)?);
        }
        frames_all.extend(frames);
    }
    let params = EvalParams {
        classes: engine.cfg.classes,
        bounds: engine.cfg.bounds,
        split_speed: cfg.eval.split_speed,
        min_score: cfg.eval.min_score,
    };
    let report = evaluate(&frames_all, &preds_all, &params)?;
    let csv_path = rc.outdir.join("metrics.csv");
    let json_path = rc.outdir.join("metrics.json");
    eval::write_csv_file(&report, &csv_path)?;
    eval::write_json_file(&report, &json_path)?;

    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let line = |s: &SplitEval| {
        println!("{:<7} mAP {:.4}  mATE {}  mAVE {}", s.split, s.map, opt(s.mate), opt(s.mave));
    };
    line(&report.all);
    line(&report.r#static);
    line(&report.moving);
    println!("-> {} and {}", csv_path.display(), json_path.display());
    Ok(0)
}

fn cmd_bench(rc: &RunConfig, cfg: &AppConfig) -> Result<i32> {
    let rows = bench::run_all(&cfg.bench)?;
    let path = rc.outdir.join("bench.csv");
    bench::write_csv_file(&rows, &path)?;
    println!("{:<28} {:>8} {:>12} {:>12} {:>12}", "method", "history", "median_us", "p90_us", "state_bytes");
    for r in &rows {
        println!(
            "{:<28} {:>8} {:>12.1} {:>12.1} {:>12}",
            r.method, r.history, r.stats.median_us, r.stats.p90_us, r.state_bytes
        );
    }
    println!("-> {}", path.display());
    Ok(0)
}

fn cmd_track(rc: &RunConfig, cfg: &AppConfig) -> Result<i32> {
    if rc.scene_in.is_empty() {
        return Err(Error::Config("track needs at least one --scene-in file".into()));
    }
    let mut engine = load_engine(rc, cfg)?;
    let mut csv = String::from("frame,time,scene,track,class,score,x,y,z,vx,vy\n");
    let mut identities: BTreeSet<(usize, u64)> = BTreeSet::new();
    let mut rows = 0usize;
    let mut frame = 0usize;
    for (si, p) in rc.scene_in.iter().enumerate() {
        let frames = read_scene_file(p)?;
        engine.reset_stream();
        // Identities never bridge scenes: each file gets a fresh tracker.
        let mut tracker = Tracker::new(cfg.tracker.clone())?;
        for f in &frames {
            let boxes = engine.infer_step(&f.tokens, &f.refs, &f.ego, f.time)?;
            for tb in tracker.step(&boxes, &f.ego, f.time)? {
                identities.insert((si, tb.id));
                rows += 1;
                csv.push_str(&format!(
                    "{},{},{},{},{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    frame,
                    f.time,
                    si,
                    tb.id,
                    tb.class,
                    tb.score,
                    tb.center.x,
                    tb.center.y,
                    tb.center.z,
                    tb.velocity.x,
                    tb.velocity.y
                ));
            }
            frame += 1;
        }
    }
    let path = rc.outdir.join("tracks.csv");
    std::fs::write(&path, csv)?;
    println!(
        "{} track rows, {} identities over {} frames -> {}",
        rows,
        identities.len(),
        frame,
        path.display()
    );
    Ok(0)
}

fn cmd_selfcheck(cfg: &AppConfig) -> Result<i32> {
    let results = selfcheck::run(&cfg.selfcheck)?;
    print!("{}", selfcheck::render_table(&results));
    Ok(if selfcheck::all_passed(&results) { 0 } else { EXIT_SELFCHECK_FAILED })
}
