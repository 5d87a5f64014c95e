//! `azinorm` command-line driver.

mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use azinorm::patching::{DEFAULT_MIN_POINTS, DEFAULT_RADIUS, DEFAULT_STRIDE};
use azinorm::pipeline::{self, Selection};
use azinorm::scene_io::{self, write_labels, write_point_bin, write_predictions};
use azinorm::synth::{N_CLASSES, REPORT_THRESHOLDS};
use azinorm::{
    bench_throughput, gen_scene, recall_precision, Bounds, ClusterDetector, ClusterParams,
    KnnSegmenter, LabeledScene, Layout, MetricReport, NmsParams, OracleDetector, PatchParams,
    Perceiver, PointCloud, RunStats, SceneSpec, SectorParams, SplitMode,
};

const FAST_RADIUS: f64 = 11.2;
const FAST_STRIDE: f64 = 18.8;

#[derive(Parser)]
#[command(
    name = "azinorm",
    version,
    about = "Azimuth-normalized patch processing for LiDAR scenes"
)]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect boxes and write a predictions JSON file.
    #[command(allow_negative_numbers = true)]
    Detect(DetectArgs),
    /// Label every point and write a labels JSON file.
    #[command(allow_negative_numbers = true)]
    Segment(SegmentArgs),
    /// Write a seeded synthetic scene: `<output>.bin` and `<output>.labels.json`.
    #[command(allow_negative_numbers = true)]
    Gen(GenArgs),
    /// Time the pipeline and print a metric report as one JSON line.
    #[command(allow_negative_numbers = true)]
    Bench(BenchArgs),
    /// Draw a scene, its boxes and optionally the patch lattice as SVG.
    #[command(allow_negative_numbers = true)]
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Circle,
    Square,
    Sector,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Fast,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PerceiverArg {
    Oracle,
    Cluster,
    Knn,
}

#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, value_enum, default_value = "circle")]
    layout: LayoutArg,
    /// `paper`: r = 9.6 m, d = 6.4 m. `fast`: r = 11.2 m, d = 18.8 m.
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    /// Patch radius in metres; overrides the preset.
    #[arg(long)]
    radius: Option<f64>,
    /// Square patch side in metres (default: twice the radius).
    #[arg(long)]
    side: Option<f64>,
    /// Lattice stride in metres; overrides the preset.
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_MIN_POINTS)]
    min_points: usize,
    /// Patch centers are kept within `[-extent, extent]` on both axes.
    #[arg(long, default_value_t = 150.0)]
    extent: f64,
    /// Drop points below this height before perception.
    #[arg(long)]
    z_min: Option<f64>,
    /// Drop points above this height before perception.
    #[arg(long)]
    z_max: Option<f64>,
    /// Number of sectors for `--layout sector`.
    #[arg(long, default_value_t = 4)]
    sectors: usize,
    /// Sector overlap in degrees.
    #[arg(long, default_value_t = azinorm::sectorial::DEFAULT_OVERLAP_DEG)]
    overlap_deg: f64,
}

impl SplitArgs {
    fn z_range(&self) -> Result<Option<(f64, f64)>> {
        Ok(match (self.z_min, self.z_max) {
            (None, None) => None,
            (lo, hi) => {
                let range = (lo.unwrap_or(f64::MIN), hi.unwrap_or(f64::MAX));
                if range.0.is_nan() || range.1.is_nan() || range.0 > range.1 {
                    bail!("--z-min must not exceed --z-max");
                }
                Some(range)
            }
        })
    }

    fn mode(&self) -> Result<SplitMode> {
        let (preset_radius, preset_stride) = match self.preset {
            Preset::Paper => (DEFAULT_RADIUS, DEFAULT_STRIDE),
            Preset::Fast => (FAST_RADIUS, FAST_STRIDE),
        };
        let radius = self.radius.unwrap_or(preset_radius);
        let mode = match self.layout {
            LayoutArg::Sector => SplitMode::Sectors(SectorParams::new(
                self.sectors,
                self.overlap_deg.to_radians(),
            )),
            LayoutArg::Circle | LayoutArg::Square => {
                let layout = match self.layout {
                    LayoutArg::Circle => Layout::Circular { radius },
                    _ => Layout::Square {
                        side: self.side.unwrap_or(2.0 * radius),
                    },
                };
                SplitMode::Patches(PatchParams {
                    layout,
                    stride: self.stride.unwrap_or(preset_stride),
                    bounds: Bounds::square(self.extent),
                    min_points: self.min_points,
                    z_range: self.z_range()?,
                })
            }
        };
        mode.validate().context("invalid split configuration")?;
        Ok(mode)
    }
}

#[derive(Args, Clone)]
struct PerceiverArgs {
    #[arg(long, value_enum)]
    perceiver: Option<PerceiverArg>,
    /// Single-link distance for the cluster perceiver, metres.
    #[arg(long, default_value_t = 0.8)]
    link_radius: f64,
    /// Smallest cluster the cluster perceiver turns into a box.
    #[arg(long, default_value_t = 5)]
    min_cluster: usize,
    /// Neighbours voted by the knn perceiver.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = N_CLASSES)]
    n_classes: usize,
}

impl PerceiverArgs {
    fn build(&self, fallback: PerceiverArg) -> Result<Box<dyn Perceiver>> {
        Ok(match self.perceiver.unwrap_or(fallback) {
            PerceiverArg::Oracle => Box::new(OracleDetector),
            PerceiverArg::Cluster => {
                let params = ClusterParams {
                    link_radius: self.link_radius,
                    min_cluster: self.min_cluster,
                    ..ClusterParams::default()
                };
                params.validate()?;
                Box::new(ClusterDetector { params })
            }
            PerceiverArg::Knn => {
                if self.k == 0 || self.n_classes == 0 {
                    bail!("--k and --n-classes must be at least 1");
                }
                Box::new(KnnSegmenter {
                    k: self.k,
                    n_classes: self.n_classes,
                })
            }
        })
    }
}

#[derive(Args, Clone)]
struct SceneArgs {
    /// Point cloud: `.bin` (float32 x,y,z,intensity) or ASCII `x y z [i]`.
    #[arg(long)]
    input: PathBuf,
    /// Labels JSON with GT boxes and optional per-point labels.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SamplingArgs {
    /// Keep only patches holding a GT center plus this many background
    /// patches per foreground patch. Needs `--labels`.
    #[arg(long)]
    neg_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplingArgs {
    fn selection(&self) -> Result<Option<Selection>> {
        match self.neg_ratio {
            Some(r) if !(r.is_finite() && r >= 0.0) => bail!("--neg-ratio must be >= 0, got {r}"),
            Some(neg_ratio) => Ok(Some(Selection {
                neg_ratio,
                seed: self.seed,
            })),
            None => Ok(None),
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    perceiver: PerceiverArgs,
    #[arg(long, default_value_t = azinorm::merge::DEFAULT_NMS_IOU)]
    nms_iou: f64,
    /// Suppress overlapping boxes across classes too.
    #[arg(long)]
    class_agnostic: bool,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    perceiver: PerceiverArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args)]
struct GenArgs {
    /// Output prefix.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Scene spec as JSON or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Point cloud to time; a synthetic scene is generated when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene spec for the generated scene.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    perceiver: PerceiverArgs,
    #[arg(long, default_value_t = azinorm::merge::DEFAULT_NMS_IOU)]
    nms_iou: f64,
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Predictions JSON to overlay.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Overlay the surviving patches (or sector boundaries).
    #[arg(long)]
    render_patches: bool,
    #[command(flatten)]
    split: SplitArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(cli.command))
        }
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Detect(a) => cmd_detect(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn load_scene(input: &Path, labels: Option<&Path>) -> Result<(String, LabeledScene)> {
    let cloud =
        scene_io::load_cloud(input).with_context(|| format!("reading {}", input.display()))?;
    let frame = cloud.frame_id.clone();
    let scene = match labels {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let labels = scene_io::read_labels(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let scene = LabeledScene {
                cloud,
                gt_boxes: labels.boxes,
                point_labels: labels.point_labels,
            };
            scene.validate().with_context(|| {
                format!("{} does not match {}", path.display(), input.display())
            })?;
            scene
        }
        None => LabeledScene {
            cloud,
            gt_boxes: Vec::new(),
            point_labels: None,
        },
    };
    Ok((frame, scene))
}

/// Sectors carry no height filter, so it is applied to the cloud instead.
fn sector_height_filter(
    scene: LabeledScene,
    split: &SplitArgs,
    mode: &SplitMode,
) -> Result<LabeledScene> {
    match (mode, split.z_range()?) {
        (SplitMode::Sectors(_), Some((lo, hi))) => Ok(LabeledScene {
            cloud: scene
                .cloud
                .iter()
                .filter(|p| p.z >= lo && p.z <= hi)
                .collect::<PointCloud>(),
            gt_boxes: scene.gt_boxes,
            point_labels: None,
        }),
        _ => Ok(scene),
    }
}

/// Refuses to run when the output cannot be created, before any work.
fn check_output(path: &Path) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if !parent.is_dir() {
        bail!("output directory {} does not exist", parent.display());
    }
    if path.is_dir() {
        bail!("output {} is a directory", path.display());
    }
    Ok(())
}

/// Writes a sibling temporary file and renames it into place, so a
/// failed run never leaves a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("output {} has no file name", path.display()))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

fn summarize(report: &MetricReport) -> String {
    let mut s = format!(
        "units {} | coverage {:.4} | duplication {:.3}",
        report.patches_processed, report.coverage_fraction, report.duplication_mean
    );
    for (r, p) in report.recall_at_iou.iter().zip(&report.precision_at_iou) {
        s.push_str(&format!(
            " | recall@{} {:.4} precision@{} {:.4}",
            r.threshold, r.value, p.threshold, p.value
        ));
    }
    s
}

fn detection_report(
    stats: &RunStats,
    scene: &LabeledScene,
    boxes: &[azinorm::OrientedBox],
) -> MetricReport {
    let mut report = MetricReport::with_stats(stats);
    let (r, p) = recall_precision(boxes, &scene.gt_boxes, &REPORT_THRESHOLDS);
    report.recall_at_iou = r;
    report.precision_at_iou = p;
    report
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let mode = a.split.mode()?;
    let nms = NmsParams {
        iou_threshold: a.nms_iou,
        class_aware: !a.class_agnostic,
    };
    nms.validate()?;
    let perceiver = a.perceiver.build(PerceiverArg::Cluster)?;
    if !perceiver.capabilities().detects {
        bail!("the knn perceiver only segments; use `segment`");
    }
    if a.perceiver.perceiver == Some(PerceiverArg::Oracle) && a.scene.labels.is_none() {
        bail!("the oracle perceiver needs --labels");
    }
    let selection = a.sampling.selection()?;
    if selection.is_some() && a.scene.labels.is_none() {
        bail!("--neg-ratio needs --labels");
    }
    check_output(&a.output)?;

    let (frame, scene) = load_scene(&a.scene.input, a.scene.labels.as_deref())?;
    let scene = sector_height_filter(scene, &a.split, &mode)?;
    let (pred, stats) =
        pipeline::detect_selected(&scene, &mode, &nms, perceiver.as_ref(), selection.as_ref())?;
    write_atomic(&a.output, write_predictions(&frame, &pred.boxes).as_bytes())?;
    if a.scene.labels.is_some() {
        eprintln!(
            "{}",
            summarize(&detection_report(&stats, &scene, &pred.boxes))
        );
    }
    Ok(())
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    let mode = a.split.mode()?;
    if matches!(mode, SplitMode::Sectors(_)) && a.split.z_range()?.is_some() {
        bail!("--z-min/--z-max are not supported for segmentation in sector mode");
    }
    let perceiver = a.perceiver.build(PerceiverArg::Knn)?;
    if !perceiver.capabilities().segments {
        bail!("only the knn perceiver segments");
    }
    let Some(labels) = a.scene.labels.as_deref() else {
        bail!("segmentation needs --labels with per-point labels as reference");
    };
    let selection = a.sampling.selection()?;
    check_output(&a.output)?;

    let (frame, scene) = load_scene(&a.scene.input, Some(labels))?;
    if scene.point_labels.is_none() {
        bail!("{} has no point_labels", labels.display());
    }
    let n_classes = a.perceiver.n_classes;
    let (pred, stats) = pipeline::segment_selected(
        &scene,
        &mode,
        n_classes,
        perceiver.as_ref(),
        selection.as_ref(),
    )?;
    let point_labels = pred.point_labels.expect("segmentation yields labels");
    write_atomic(
        &a.output,
        write_labels(&frame, &[], Some(&point_labels)).as_bytes(),
    )?;
    eprintln!("{}", summarize(&MetricReport::with_stats(&stats)));
    Ok(())
}

fn scene_spec(seed: Option<u64>, config: Option<&Path>) -> Result<SceneSpec> {
    let mut spec = match config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SceneSpec::from_config_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let spec = scene_spec(a.seed, a.config.as_deref())?;
    let bin = with_suffix(&a.output, ".bin");
    let json = with_suffix(&a.output, ".labels.json");
    check_output(&bin)?;
    check_output(&json)?;
    let scene = gen_scene(&spec)?;
    let frame = bin
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let labels = write_labels(&frame, &scene.gt_boxes, scene.point_labels.as_deref());
    write_atomic(&bin, &write_point_bin(&scene.cloud))?;
    write_atomic(&json, labels.as_bytes())?;
    eprintln!(
        "wrote {} points and {} boxes to {} and {}",
        scene.cloud.len(),
        scene.gt_boxes.len(),
        bin.display(),
        json.display()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mode = a.split.mode()?;
    let nms = NmsParams {
        iou_threshold: a.nms_iou,
        class_aware: !a.class_agnostic,
    };
    nms.validate()?;
    if a.repetitions == 0 {
        bail!("--repetitions must be at least 1");
    }
    let fallback = if a.input.is_some() && a.labels.is_none() {
        PerceiverArg::Cluster
    } else {
        PerceiverArg::Oracle
    };
    let perceiver = a.perceiver.build(fallback)?;
    let scene = match &a.input {
        Some(input) => load_scene(input, a.labels.as_deref())?.1,
        None => gen_scene(&scene_spec(Some(a.seed), a.config.as_deref())?)?,
    };
    let scene = sector_height_filter(scene, &a.split, &mode)?;
    let report = bench_throughput(
        &scene,
        &mode,
        &nms,
        perceiver.as_ref(),
        a.perceiver.n_classes,
        a.repetitions,
    )?;
    eprintln!(
        "{} | {:.4} s/run | {:.1} units/s | {:.0} points/s",
        summarize(&report),
        report.wall_time,
        report.patches_per_sec,
        report.points_per_sec
    );
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mode = if a.render_patches {
        Some(a.split.mode()?)
    } else {
        None
    };
    check_output(&a.output)?;
    let (_, scene) = load_scene(&a.scene.input, a.scene.labels.as_deref())?;
    let predictions = match &a.predictions {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            scene_io::read_predictions(&text)
                .with_context(|| format!("parsing {}", path.display()))?
                .boxes
        }
        None => Vec::new(),
    };
    let overlay = match &mode {
        Some(mode) => Some(render::Overlay::new(&scene.cloud, mode)?),
        None => None,
    };
    let svg = render::svg(
        &scene.cloud,
        &scene.gt_boxes,
        &predictions,
        overlay.as_ref(),
    );
    write_atomic(&a.output, svg.as_bytes())
}
