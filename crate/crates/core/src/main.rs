use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use rgbd_grasp::clock;
use rgbd_grasp::cloud::{build_cloud_with, clean_cloud_with, write_ply};
use rgbd_grasp::geometry::{FrameId, Intrinsics, Pose, Vec3};
use rgbd_grasp::graspplan::plan_grasp;
use rgbd_grasp::imaging::{decode_color, decode_depth, decode_mask, encode_color_with, encode_depth, encode_mask, FramePair};
use rgbd_grasp::pipeline::{
    bench_frames, bench_stages, run_live, Budget, EstimateSink, JsonStream, LiveOptions, Pipeline, PipelineConfig,
    StaticPose, TargetEstimate, TargetServer,
};
use rgbd_grasp::segmentation::{GroundTruthProvider, ProviderKind};
use rgbd_grasp::simulator::{
    evaluate_localization, pose_grid, render_with, write_eval_csv, LocalizationStudy, NoiseConfig, Scene, Stamp,
};
use rgbd_grasp::transport::{
    measure_transit, write_transit_csv, FrameClient, Publisher, PublisherConfig, DEFAULT_MAX_CONSECUTIVE_FAILURES,
};
use rgbd_grasp::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "rgbd-grasp", version, about = "RGB-D target localization and grasp planning")]
struct Cli {
    /// Pipeline config, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every output file.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(long, global = true)]
    min_depth: Option<f64>,
    #[arg(long, global = true)]
    max_depth: Option<f64>,
    #[arg(long, global = true)]
    voxel_size: Option<f64>,
    #[arg(long, global = true)]
    slab_thickness: Option<f64>,
    #[arg(long, global = true)]
    hover_samples: Option<usize>,
    /// Remote segmentation endpoint; switches the provider to remote.
    #[arg(long, global = true)]
    segmenter: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render scenes to color JPEG, depth PNG, masks and ground truth.
    Simulate(SimulateArgs),
    /// Plan a grasp from one image pair and mask.
    Plan(PlanArgs),
    /// Serve simulated frame pairs.
    Stream(StreamArgs),
    /// Consume frames and emit target estimates.
    Run(RunArgs),
    /// Localization grid study.
    Eval(EvalArgs),
    /// Per-stage timings against a budget file.
    Bench(BenchArgs),
    /// Request-reply latency measurement.
    Transit(TransitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Bottle,
    TeddyBear,
}

#[derive(Args, Clone)]
struct SceneArgs {
    /// Scene JSON; overrides --object.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bottle")]
    object: Preset,
    /// Distance behind the target along world x, meters.
    #[arg(long, default_value_t = 1.2)]
    x: f64,
    /// Lateral offset along world y, meters.
    #[arg(long, default_value_t = 0.0)]
    y: f64,
    /// Depth noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera intrinsics JSON.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Render the 42-pose study grid instead of one pose.
    #[arg(long)]
    grid: bool,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    color: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value = "127.0.0.1:5555")]
    bind: String,
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// Stop after this many frames.
    #[arg(long)]
    frames: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// Frame publisher; omit with --simulate.
    #[arg(long)]
    endpoint: Option<String>,
    /// Serve a simulated scene in-process and segment it with ground truth.
    #[arg(long)]
    simulate: bool,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    frames: Option<u64>,
    /// Emit one median estimate per hover window.
    #[arg(long)]
    hover: bool,
    /// Body-to-world pose JSON; defaults to the simulated camera mount or identity.
    #[arg(long)]
    body_pose: Option<PathBuf>,
    /// Also serve the newest estimate on this address.
    #[arg(long)]
    serve: Option<String>,
    #[arg(long, default_value_t = 500)]
    timeout_ms: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_CONSECUTIVE_FAILURES)]
    max_failures: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene JSON; defaults to the bottle study scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bottle")]
    object: Preset,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long)]
    budget: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TransitArgs {
    /// Publisher to measure; omit to measure an in-process simulated one.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 1000)]
    timeout_ms: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        log::error!("{e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = pipeline_config(&cli)?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Simulate(a) => simulate(a, &cfg, out),
        Command::Plan(a) => plan(a, &cfg, out),
        Command::Stream(a) => stream(a),
        Command::Run(a) => live(a, cfg, out),
        Command::Eval(a) => eval(a, cfg, out),
        Command::Bench(a) => bench(a, &cfg, out),
        Command::Transit(a) => transit(a, out),
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.sequential {
        cfg.execution = Execution::Sequential;
    }
    let f = &mut cfg.filter;
    f.min_depth = cli.min_depth.unwrap_or(f.min_depth);
    f.max_depth = cli.max_depth.unwrap_or(f.max_depth);
    f.voxel_size = cli.voxel_size.unwrap_or(f.voxel_size);
    cfg.slab_thickness = cli.slab_thickness.unwrap_or(cfg.slab_thickness);
    cfg.hover_samples = cli.hover_samples.unwrap_or(cfg.hover_samples);
    if let Some(ep) = &cli.segmenter {
        cfg.provider.kind = ProviderKind::Remote;
        cfg.provider.endpoint = Some(ep.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_scene(path: &Option<PathBuf>, preset: Preset, target: Vec3) -> Result<Scene> {
    match path {
        Some(p) => Scene::load(p),
        None => Ok(match preset {
            Preset::Bottle => Scene::bottle_at(target),
            Preset::TeddyBear => Scene::teddy_bear_at(target),
        }),
    }
}

const TARGET: Vec3 = Vec3::new(0.0, 0.0, 1.0);

impl SceneArgs {
    fn scene(&self) -> Result<Scene> {
        load_scene(&self.scene, self.object, TARGET)
    }

    fn intrinsics(&self) -> Result<Intrinsics> {
        match &self.intrinsics {
            Some(p) => Intrinsics::from_json(&fs::read_to_string(p)?),
            None => Ok(Intrinsics::default()),
        }
    }

    fn camera(&self) -> Pose {
        Pose::camera_facing_x(TARGET + Vec3::new(-self.x, self.y, 0.0))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn simulate(a: &SimulateArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let scene = a.scene.scene()?;
    let intr = a.scene.intrinsics()?;
    let poses = if a.grid {
        pose_grid(LocalizationStudy::X_RANGE, LocalizationStudy::Y_RANGE, LocalizationStudy::STEPS, TARGET)?
    } else {
        vec![a.scene.camera()]
    };
    fs::write(out.join("intrinsics.json"), intr.to_json())?;
    fs::write(out.join("scene.json"), scene.to_json())?;
    for (i, pose) in poses.iter().enumerate() {
        let noise = NoiseConfig {
            sigma: a.scene.sigma,
            seed: a.scene.seed.wrapping_add(i as u64),
        };
        let stamp = Stamp {
            timestamp: i as u64 + 1,
            sequence: i as u64 + 1,
        };
        let (pair, truth) = render_with(cfg.execution, &scene, pose, &intr, &noise, stamp)?;
        let stem = format!("frame_{i:03}");
        fs::write(out.join(format!("{stem}_color.jpg")), encode_color_with(&pair.color, &Default::default())?)?;
        fs::write(out.join(format!("{stem}_depth.png")), encode_depth(&pair.depth, 6)?)?;
        for k in 0..truth.objects.len() {
            fs::write(out.join(format!("{stem}_mask{k}.png")), encode_mask(&truth.mask(k))?)?;
        }
        let record = serde_json::json!({
            "camera_pose": truth.camera_pose,
            "objects": truth.objects,
        });
        write_json(&out.join(format!("{stem}_truth.json")), &record)?;
    }
    println!("rendered {} frame(s) into {}", poses.len(), out.display());
    Ok(())
}

fn plan(a: &PlanArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let intr = Intrinsics::from_json(&fs::read_to_string(&a.intrinsics)?)?;
    let color = decode_color(&fs::read(&a.color)?)?;
    let depth = decode_depth(&fs::read(&a.depth)?)?;
    let label = cfg.provider.target_classes.first().map_or("object", String::as_str);
    let mask = decode_mask(&fs::read(&a.mask)?, label)?;
    let pair = FramePair::new(color, depth, intr, 0)?;
    let raw = build_cloud_with(cfg.execution, &pair, &mask, &cfg.filter)?;
    let cloud = clean_cloud_with(cfg.execution, &raw, &cfg.filter)?;
    let plan = plan_grasp(&cloud, &cfg.assumptions, cfg.slab_thickness)?;
    fs::write(out.join("candidates.ply"), write_ply(&plan.candidates))?;
    write_json(&out.join("grasp_plan.json"), &plan.summary(Some("candidates.ply")))?;
    println!("{}", serde_json::to_string_pretty(&plan.summary(Some("candidates.ply")))?);
    Ok(())
}

/// Endless simulated capture: one render per call at a fixed pose.
fn sim_source(
    scene: Scene,
    camera: Pose,
    intr: Intrinsics,
    noise: NoiseConfig,
    truth_sink: Option<GroundTruthProvider>,
    limit: Option<u64>,
) -> impl FnMut() -> Result<Option<FramePair>> + Send + 'static {
    let mut sequence = 0u64;
    move || {
        if limit.is_some_and(|n| sequence >= n) {
            return Ok(None);
        }
        sequence += 1;
        let stamp = Stamp {
            timestamp: clock::now_ns(),
            sequence,
        };
        let noise = NoiseConfig {
            seed: noise.seed.wrapping_add(sequence),
            ..noise
        };
        let (pair, truth) = render_with(Execution::default(), &scene, &camera, &intr, &noise, stamp)?;
        if let Some(gt) = &truth_sink {
            gt.register(stamp.timestamp, truth.detections());
        }
        Ok(Some(pair))
    }
}

fn stream(a: &StreamArgs) -> Result<()> {
    let source = sim_source(
        a.scene.scene()?,
        a.scene.camera(),
        a.scene.intrinsics()?,
        NoiseConfig {
            sigma: a.scene.sigma,
            seed: a.scene.seed,
        },
        None,
        a.frames,
    );
    let cfg = PublisherConfig {
        bind: a.bind.clone(),
        max_rate_hz: Some(a.rate),
        ..PublisherConfig::default()
    };
    let publisher = Publisher::spawn(source, &cfg)?;
    println!("serving frames on {}", publisher.endpoint());
    while !publisher.is_stopped() {
        std::thread::sleep(Duration::from_millis(100));
    }
    if let Some(e) = publisher.source_error() {
        return Err(Error::Remote(e));
    }
    Ok(())
}

struct Sinks<'a> {
    file: JsonStream<fs::File>,
    server: Option<&'a mut TargetServer>,
}

impl EstimateSink for Sinks<'_> {
    fn emit(&mut self, e: &TargetEstimate) -> Result<()> {
        println!(
            "seq {} {} at [{:.4}, {:.4}, {:.4}]",
            e.sequence, e.class_label, e.world_centroid.x, e.world_centroid.y, e.world_centroid.z
        );
        self.file.emit(e)?;
        if let Some(s) = self.server.as_deref_mut() {
            s.emit(e)?;
        }
        Ok(())
    }
}

fn live(a: &RunArgs, cfg: PipelineConfig, out: &Path) -> Result<()> {
    let camera = a.scene.camera();
    let body: Pose = match &a.body_pose {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None if a.simulate => camera.compose(&cfg.extrinsics.inverse())?,
        None => Pose::identity(FrameId::Body, FrameId::World),
    };
    let _publisher;
    let (endpoint, mut pipeline) = if a.simulate {
        let gt = GroundTruthProvider::new();
        let source = sim_source(
            a.scene.scene()?,
            camera,
            a.scene.intrinsics()?,
            NoiseConfig {
                sigma: a.scene.sigma,
                seed: a.scene.seed,
            },
            Some(gt.clone()),
            None,
        );
        let publisher = Publisher::spawn(source, &PublisherConfig::default())?;
        let endpoint = publisher.endpoint();
        _publisher = Some(publisher);
        (endpoint, Pipeline::with_provider(cfg, Box::new(gt))?)
    } else {
        let endpoint = a
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("run needs --endpoint or --simulate".into()))?;
        _publisher = None;
        (endpoint, Pipeline::new(cfg)?)
    };
    let mut client = FrameClient::new(&endpoint, Duration::from_millis(a.timeout_ms))?;
    let mut server = a.serve.as_deref().map(TargetServer::spawn).transpose()?;
    if let Some(s) = &server {
        println!("serving estimates on {}", s.endpoint());
    }
    let mut sink = Sinks {
        file: JsonStream(fs::File::create(out.join("estimates.bin"))?),
        server: server.as_mut(),
    };
    let stop = Arc::new(AtomicBool::new(false));
    let opts = LiveOptions {
        frames: a.frames,
        max_consecutive_failures: a.max_failures,
        hover: a.hover,
        stop: stop.clone(),
    };
    if (body.from_frame(), body.to_frame()) != (FrameId::Body, FrameId::World) {
        return Err(Error::Config("body pose must map body to world".into()));
    }
    let summary = run_live(&mut client, &mut pipeline, &mut StaticPose(body), &mut sink, &opts)?;
    stop.store(true, Ordering::Relaxed);
    write_json(&out.join("run_summary.json"), &summary)?;
    println!(
        "{} frames, {} estimates, {} skipped, {} transport failures",
        summary.frames,
        summary.emitted,
        summary.skips.len(),
        summary.transport_failures
    );
    Ok(())
}

fn eval(a: &EvalArgs, cfg: PipelineConfig, out: &Path) -> Result<()> {
    let mut study = LocalizationStudy::bottle();
    if a.scene.is_some() || !matches!(a.object, Preset::Bottle) {
        study.scene = load_scene(&a.scene, a.object, TARGET)?;
    }
    study.config.noise = NoiseConfig {
        sigma: a.sigma,
        seed: a.seed,
    };
    // the study's relaxed near clip stays unless the config asks for something else
    let study_filter = study.config.pipeline.filter;
    study.config.pipeline = cfg;
    if study.config.pipeline.filter == PipelineConfig::default().filter {
        study.config.pipeline.filter = study_filter;
    }
    study.config.execution = study.config.pipeline.execution;
    let report = evaluate_localization(&study.scene, &study.poses, &study.config)?;
    write_eval_csv(fs::File::create(out.join("eval.csv"))?, &report.rows)?;
    write_json(
        &out.join("eval_summary.json"),
        &serde_json::json!({
            "hits": report.hits,
            "misses": report.misses,
            "mse_m2": report.mse,
            "rmse_m": report.rmse,
            "visible_rmse_m": report.visible_rmse,
        }),
    )?;
    println!("{} poses, {} misses", report.rows.len(), report.misses);
    println!(
        "rmse   x {:.2} cm  y {:.2} cm  z {:.2} cm",
        report.rmse[0] * 100.0,
        report.rmse[1] * 100.0,
        report.rmse[2] * 100.0
    );
    println!(
        "single x {:.2} cm  y {:.2} cm  z {:.2} cm (visible surface only)",
        report.visible_rmse[0] * 100.0,
        report.visible_rmse[1] * 100.0,
        report.visible_rmse[2] * 100.0
    );
    Ok(())
}

fn bench(a: &BenchArgs, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let budget = match &a.budget {
        Some(p) => Budget::load(p)?,
        None => Budget::default(),
    };
    let frames = bench_frames(a.frames, a.seed)?;
    let report = bench_stages(&frames, cfg, &budget)?;
    report.write_csv(fs::File::create(out.join("stages.csv"))?)?;
    print!("{report}");
    println!("reference: about 30 ms point-cloud processing and 100 ms total onboard on the original robot");
    if !report.passes() {
        return Err(Error::Config("stage budget exceeded".into()));
    }
    Ok(())
}

fn transit(a: &TransitArgs, out: &Path) -> Result<()> {
    let _publisher;
    let endpoint = match &a.endpoint {
        Some(e) => {
            _publisher = None;
            e.clone()
        }
        None => {
            let scene = Scene::bottle_at(TARGET);
            let camera = Pose::camera_facing_x(TARGET + Vec3::new(-1.2, 0.0, 0.0));
            let source = sim_source(scene, camera, Intrinsics::default(), NoiseConfig { sigma: 0.002, seed: 0 }, None, None);
            let publisher = Publisher::spawn(source, &PublisherConfig::default())?;
            let endpoint = publisher.endpoint();
            _publisher = Some(publisher);
            endpoint
        }
    };
    let mut client = FrameClient::new(&endpoint, Duration::from_millis(a.timeout_ms))?;
    let report = measure_transit(&mut client, a.pairs, DEFAULT_MAX_CONSECUTIVE_FAILURES)?;
    write_transit_csv(fs::File::create(out.join("transit.csv"))?, &report.records)?;
    write_json(&out.join("transit_summary.json"), &report.summary)?;
    let s = report.summary;
    println!(
        "{} pairs: mean {:.3} ms  p50 {:.3}  p95 {:.3}  p99 {:.3}  max {:.3}  ({} retried)",
        s.count, s.mean_ms, s.p50_ms, s.p95_ms, s.p99_ms, s.max_ms, report.failures
    );
    Ok(())
}
