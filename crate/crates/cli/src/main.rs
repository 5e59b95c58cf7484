use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gsseg_core::distill::{load_sidecar, train, write_loss_csv, TrainConfig};
use gsseg_core::eval::{evaluate, latency_scene, object_point_prompt, EvalReport, Protocol};
use gsseg_core::masks::{load_guidance_dir, load_stacks, synth_guidance, synth_masks, Granularity, GuidanceSpec};
use gsseg_core::pipeline::{segment, PipelineError, Scene, CAMERAS_FILE, MASKS_DIR, PLY_FILE};
use gsseg_core::prompt::Prompt;
use gsseg_core::scene::{load_cameras, load_ply_with, save_ply, synth_scene, GroundTruthLabels, SceneSpec};
use gsseg_core::Error;
use serde::Deserialize;

/// Promptable segmentation of Gaussian-splat scenes.
#[derive(Parser)]
#[command(name = "gsseg", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle with masks and ground truth.
    Synth(SynthArgs),
    /// Validate the mask stacks and guidance maps of a bundle.
    ExtractCheck(ExtractCheckArgs),
    /// Distill per-Gaussian features from mask stacks.
    Train(TrainArgs),
    /// Run one prompt through the full inference path.
    Segment(SegmentArgs),
    /// Score a trained scene against its ground-truth labels.
    Eval(EvalArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
    /// Time a point-prompt request on a large synthetic scene.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON scene spec; `granularity` and `guidance` keys are optional.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractCheckArgs {
    #[arg(long)]
    scene: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Bundle directory holding scene.ply.
    #[arg(long)]
    scene: PathBuf,
    /// Defaults to <scene>/cameras.json.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Directory of <view>.masks.gsten files.
    #[arg(long)]
    masks: PathBuf,
    /// Directory of <view>.guidance.gsten files; defaults to --masks.
    #[arg(long)]
    guidance: Option<PathBuf>,
    #[arg(long, conflicts_with = "guidance")]
    no_guidance: bool,
    /// Sidecar directory; defaults to <scene>/features.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    iters: usize,
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    lambda: f64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Sidecar directory; defaults to <scene>/features.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    prompt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the member Gaussians as PLY.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Defaults to <scene>/labels.json.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "labels3d")]
    protocol: Protocol,
    /// JSON, or CSV when the name ends in .csv.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Every subdirectory holding scene.ply is loaded at startup.
    #[arg(long, env = "GSSEG_SCENES")]
    scenes: Option<PathBuf>,
    #[arg(long, env = "GSSEG_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "GSSEG_HOST", default_value = "127.0.0.1")]
    host: IpAddr,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000)]
    gaussians: usize,
    #[arg(long, default_value_t = 10)]
    objects: usize,
    /// Requests after the first; all on the same warm scene.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Deserialize)]
struct SynthFile {
    #[serde(flatten)]
    scene: SceneSpec,
    #[serde(default)]
    granularity: Granularity,
    guidance: Option<GuidanceSpec>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Pipeline(PipelineError),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => 2,
        Error::State(_) => 3,
        Error::Format(_) | Error::Data(_) | Error::Json(_) | Error::Io { .. } => 4,
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) => exit_code(e),
            Failure::Pipeline(e) => exit_code(&e.error),
            Failure::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Pipeline(e) => e.fmt(f),
            Failure::Usage(m) => f.write_str(m),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_dir(path: &Path, flag: &str) -> CmdResult {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: {} is not a directory", flag, path.display())))
    }
}

fn require_file(path: &Path, flag: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: {} does not exist", flag, path.display())))
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_scene(dir: &Path, features: Option<&Path>) -> Result<Scene, Failure> {
    require_dir(dir, "--scene")?;
    let mut scene = Scene::load(dir)?;
    if let Some(f) = features {
        require_dir(f, "--features")?;
        scene = scene.with_sidecar(load_sidecar(f)?)?;
    }
    Ok(scene)
}

fn run_synth(args: SynthArgs, seed: Option<u64>) -> CmdResult {
    require_file(&args.spec, "--spec")?;
    let mut spec: SynthFile = serde_json::from_str(&read_text(&args.spec)?).map_err(Error::from)?;
    if let Some(s) = seed {
        spec.scene.seed = s;
    }
    let synth = synth_scene(&spec.scene)?;
    let stacks = synth_masks(&synth.cloud, &synth.cameras, &synth.labels, spec.granularity)?;
    let guidance = match spec.guidance {
        Some(mut g) => {
            if let Some(s) = seed {
                g.seed = s;
            }
            synth_guidance(&synth.cloud, &synth.cameras, &synth.labels, &g)?
        }
        None => Vec::new(),
    };
    let name = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let scene = Scene::new(name, synth.cloud, synth.cameras, synth.held_out)?
        .with_labels(synth.labels)?
        .with_masks(stacks, guidance)?;
    scene.save(&args.out)?;
    println!(
        "wrote {} ({} Gaussians, {} views, {} held out)",
        args.out.display(),
        scene.cloud.len(),
        scene.cameras.len(),
        scene.held_out.len()
    );
    Ok(())
}

fn run_extract_check(args: ExtractCheckArgs) -> CmdResult {
    require_dir(&args.scene, "--scene")?;
    let cameras = load_cameras(args.scene.join(CAMERAS_FILE))?;
    let masks = args.scene.join(MASKS_DIR);
    require_dir(&masks, "--scene (masks/)")?;
    let stacks = load_stacks(&masks, &cameras)?;
    let guidance = load_guidance_dir(&masks, &cameras)?;
    if !guidance.is_empty() && guidance.len() != cameras.len() {
        return Err(Error::Data(format!(
            "guidance maps cover {} of {} views",
            guidance.len(),
            cameras.len()
        ))
        .into());
    }
    for cam in &cameras {
        let s = &stacks[&cam.id];
        let covered = s.support().len();
        let g = guidance
            .get(&cam.id)
            .map(|g| format!(", guidance {}x{}x{}", g.grid_width, g.grid_height, g.dim))
            .unwrap_or_default();
        println!(
            "{}: {} masks, {}/{} pixels covered{}",
            cam.id,
            s.len(),
            covered,
            s.pixel_count(),
            g
        );
    }
    println!("ok: {} views", cameras.len());
    Ok(())
}

fn run_train(args: TrainArgs, seed: Option<u64>) -> CmdResult {
    require_dir(&args.scene, "--scene")?;
    require_dir(&args.masks, "--masks")?;
    let cameras_path = args.cameras.clone().unwrap_or_else(|| args.scene.join(CAMERAS_FILE));
    require_file(&cameras_path, "--cameras")?;
    let guidance_dir = if args.no_guidance {
        None
    } else {
        let dir = args.guidance.clone().unwrap_or_else(|| args.masks.clone());
        require_dir(&dir, "--guidance")?;
        Some(dir)
    };
    let cfg = TrainConfig {
        iterations: args.iters,
        lambda: args.lambda,
        seed: seed.unwrap_or(0),
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let cloud = load_ply_with(args.scene.join(PLY_FILE), cfg.feature_dim, cfg.seed)?;
    let cameras = load_cameras(&cameras_path)?;
    let stacks: Vec<_> = load_stacks(&args.masks, &cameras)?.into_values().collect();
    let guidance: Vec<_> = match &guidance_dir {
        Some(dir) => load_guidance_dir(dir, &cameras)?.into_values().collect(),
        None => Vec::new(),
    };
    if !guidance.is_empty() && guidance.len() != cameras.len() {
        return Err(Error::Data(format!(
            "guidance maps cover {} of {} views; pass --no-guidance to train without them",
            guidance.len(),
            cameras.len()
        ))
        .into());
    }

    let start = Instant::now();
    let out = train(&cloud, &cameras, &stacks, &guidance, &cfg)?;
    let elapsed = start.elapsed();
    let out_dir = args.out.clone().unwrap_or_else(|| args.scene.join("features"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_loss_csv(&out.history, out_dir.join("loss.csv"))?;
    let last = out.history.last().copied();
    let sidecar = out.into_sidecar(&cfg);
    gsseg_core::distill::save_sidecar(&out_dir, &sidecar.manifest, &sidecar.features, sidecar.projector.as_ref())?;
    if let Some(r) = last {
        println!(
            "trained {} iterations in {:.1} s; final loss {:.4} (guidance {:.4}, correspondence {:.4})",
            cfg.iterations,
            elapsed.as_secs_f64(),
            r.total,
            r.guidance,
            r.correspondence
        );
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn run_segment(args: SegmentArgs, seed: Option<u64>) -> CmdResult {
    require_file(&args.prompt, "--prompt")?;
    let scene = load_scene(&args.scene, args.features.as_deref())?;
    let mut prompt = Prompt::from_json(&read_text(&args.prompt)?)?;
    if let Some(s) = seed {
        prompt.config.seed = s;
    }
    let outcome = segment(&scene, &prompt)?;
    let seg = &outcome.grown;
    std::fs::write(&args.out, seg.to_json()?).map_err(|e| Error::io(&args.out, e))?;
    if let Some(path) = &args.export {
        save_ply(&scene.cloud.subset(&seg.membership)?, path)?;
    }
    println!(
        "raw {} | filtered {} | grown {}",
        outcome.raw.count(),
        outcome.filtered.count(),
        seg.count()
    );
    println!("{}", outcome.timing.summary());
    Ok(())
}

fn run_eval(args: EvalArgs) -> CmdResult {
    let mut scene = load_scene(&args.scene, args.features.as_deref())?;
    if let Some(path) = &args.labels {
        require_file(path, "--labels")?;
        scene = scene.with_labels(GroundTruthLabels::load(path)?)?;
    }
    let report: EvalReport = evaluate(&scene, args.protocol)?;
    report.save(&args.report)?;
    println!("mean label IoU {:.4}", report.mean_label_iou);
    if let Some(m) = report.miou {
        println!("held-out mIoU {:.4}", m);
    }
    println!("mean {}", report.mean_timing.summary());
    Ok(())
}

fn run_serve(args: ServeArgs) -> CmdResult {
    let state = gsseg_service::AppState::new(args.scenes.clone());
    if let Some(dir) = &args.scenes {
        require_dir(dir, "--scenes")?;
        let loaded = state.load_all(dir)?;
        log::info!("loaded {} scenes from {}", loaded.len(), dir.display());
    }
    let addr = SocketAddr::new(args.host, args.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(gsseg_service::serve(state, addr))
        .map_err(|e| Error::io(addr.to_string(), e))?;
    Ok(())
}

fn run_bench(args: BenchArgs, seed: Option<u64>) -> CmdResult {
    let seed = seed.unwrap_or(0);
    let start = Instant::now();
    let scene = latency_scene(args.gaussians, args.objects, seed)?;
    println!(
        "scene: {} Gaussians, {} objects, built in {:.2} s",
        scene.cloud.len(),
        args.objects,
        start.elapsed().as_secs_f64()
    );
    let prompt = object_point_prompt(&scene, 1)?
        .ok_or_else(|| Error::Data("object 1 is not visible in any training view".into()))?;
    for i in 0..=args.repeats {
        let outcome = segment(&scene, &prompt)?;
        let tag = if i == 0 { "cold".to_string() } else { format!("warm {}", i) };
        println!("{:>7}: grown {} | {}", tag, outcome.grown.count(), outcome.timing.summary());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => run_synth(a, cli.seed),
        Command::ExtractCheck(a) => run_extract_check(a),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Segment(a) => run_segment(a, cli.seed),
        Command::Eval(a) => run_eval(a),
        Command::Serve(a) => run_serve(a),
        Command::Bench(a) => run_bench(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code())
        }
    }
}
