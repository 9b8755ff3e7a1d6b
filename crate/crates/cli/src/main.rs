use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmsil_core::beamform::{background_subtract, beamform_plane, magnitude_normalize, PlaneGrid};
use mmsil_core::fusion::{
    decode_mask, fuse, AttentionWeights, FeatureBlock, DEFAULT_HEADS, DEFAULT_LAYERS,
};
use mmsil_core::io::{
    evaluate_files, load_calibration, read_cube, read_heatmap, read_json, read_weights,
    to_json_bytes, triangulate_views, write_cube, write_heatmap, write_real_heatmap, AnnotationSet,
    DetectionFile, DetectionFrame, DetectionRecord, HeatmapFile, KeypointViews,
};
use mmsil_core::pipeline::{
    detect_heatmap, run_to_dir, write_failure_marker, DetectSection, PipelineConfig,
};
use mmsil_core::radar::{
    synthesize_frame_cube, ChirpConfig, Orientation, Scene, SynthesisOptions, Vec3, VirtualArray,
    DEFAULT_ELEMENTS,
};

#[derive(Parser)]
#[command(name = "mmsil", version, about = "Radar silhouette pipeline stages")]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "MMSIL_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plane {
    Hor,
    Ver,
}

impl From<Plane> for Orientation {
    fn from(p: Plane) -> Self {
        match p {
            Plane::Hor => Orientation::Horizontal,
            Plane::Ver => Orientation::Vertical,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene JSON: a list of scatterers.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "hor")]
    plane: Plane,
    /// Defaults to the trajectory length, or 1 for static scenes.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_ELEMENTS)]
    elements: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Height of the array center in meters.
    #[arg(long, default_value_t = 1.0)]
    height: f64,
}

#[derive(Args)]
struct BeamformArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long, value_enum)]
    plane: Plane,
    /// Grid as JSON or TOML; the default grid of the plane when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Background subtraction lag in frames; 0 keeps raw frames.
    #[arg(long, default_value_t = 1)]
    lag: usize,
    /// Store normalized magnitudes instead of complex values.
    #[arg(long)]
    normalize: bool,
    /// Array height used when the cube was simulated.
    #[arg(long, default_value_t = 1.0)]
    height: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a raw radar cube from a scene file.
    Simulate(SimulateArgs),
    /// Beamform a cube onto a plane grid.
    Beamform(BeamformArgs),
    /// Run CFAR detection on a heatmap.
    Detect {
        #[arg(long)]
        heatmap: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Detector parameters as TOML (the `[detect]` section of a run config).
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Fuse horizontal and vertical feature blocks into a silhouette.
    Fuse {
        /// Feature block JSON.
        #[arg(long)]
        hor: PathBuf,
        #[arg(long)]
        ver: PathBuf,
        /// Weights file; correlation weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 28)]
        mask_size: usize,
    },
    /// Score detections against annotations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write precision-recall curves as CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Triangulate 2D keypoints from calibrated views.
    Triangulate {
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        kp2d: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Relabel persons by clustering into this many groups.
        #[arg(long)]
        persons: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the whole pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(explicit: Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| dir.join(name))
}

fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn encode(f: impl FnOnce(&mut BufWriter<Vec<u8>>) -> mmsil_core::Result<()>) -> Result<Vec<u8>> {
    let mut w = BufWriter::new(Vec::new());
    f(&mut w)?;
    w.flush()?;
    Ok(w.into_inner()?)
}

fn chirp_for(plane: Orientation, samples: usize) -> ChirpConfig {
    match plane {
        Orientation::Horizontal => ChirpConfig::horizontal(samples),
        Orientation::Vertical => ChirpConfig::vertical(samples),
    }
}

fn load_grid(path: Option<&Path>, plane: Orientation) -> Result<PlaneGrid> {
    let Some(path) = path else {
        return Ok(PlaneGrid::default_for(plane));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let grid: PlaneGrid = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text)?
    } else {
        serde_json::from_str(&text)?
    };
    grid.validate()?;
    if grid.plane != plane {
        bail!("grid is for the {:?} plane", grid.plane);
    }
    Ok(grid)
}

fn simulate(args: SimulateArgs, dir: &Path) -> Result<()> {
    let scene = &args.scene;
    let plane: Orientation = args.plane.into();
    let scene: Scene =
        read_json(scene).with_context(|| format!("reading scene {}", scene.display()))?;
    let frames = args.frames.or(scene.trajectory_frames()).unwrap_or(1);
    let chirp = chirp_for(plane, args.samples);
    let center = Vec3::new(0.0, 0.0, args.height);
    let array = VirtualArray::mimo_equivalent(args.elements, &chirp, plane, center)?;
    let options = SynthesisOptions {
        frames,
        noise_std: args.noise,
        seed: args.seed,
    };
    let cube = synthesize_frame_cube(&scene, &chirp, &array, options)?;
    save(
        &output(args.out, dir, "cube.rfc"),
        &encode(|w| write_cube(w, &cube))?,
    )
}

fn beamform(args: BeamformArgs, dir: &Path) -> Result<()> {
    let plane: Orientation = args.plane.into();
    let cube = &args.cube;
    let file = read_cube(&mut BufReader::new(fs::File::open(cube)?))
        .with_context(|| format!("reading cube {}", cube.display()))?;
    let array = VirtualArray::mimo_equivalent(
        file.elements,
        &file.config,
        plane,
        Vec3::new(0.0, 0.0, args.height),
    )?;
    let cube = file.into_cube(array)?;
    let grid = load_grid(args.grid.as_deref(), plane)?;
    let mut heat = beamform_plane(&cube, &grid)?;
    if args.lag > 0 {
        heat = background_subtract(&heat, args.lag)?;
    }
    let bytes = if args.normalize {
        let norm = magnitude_normalize(&heat);
        encode(|w| write_real_heatmap(w, &norm))?
    } else {
        encode(|w| write_heatmap(w, &heat))?
    };
    save(&output(args.out, dir, "heatmap.rfh"), &bytes)
}

fn detect(heatmap: &Path, out: PathBuf, params: Option<&Path>) -> Result<()> {
    let file = read_heatmap(&mut BufReader::new(fs::File::open(heatmap)?))
        .with_context(|| format!("reading heatmap {}", heatmap.display()))?;
    let real = match file {
        HeatmapFile::Complex(h) => magnitude_normalize(&h),
        HeatmapFile::Real(h) => h,
    };
    let params: DetectSection = match params {
        Some(p) => DetectSection::from_toml(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => DetectSection::default(),
    };
    let per_frame = detect_heatmap(&real, &params)?;
    let file = DetectionFile {
        frames: per_frame
            .iter()
            .enumerate()
            .map(|(t, dets)| DetectionFrame {
                frame: t,
                detections: dets
                    .iter()
                    .map(|d| DetectionRecord {
                        bbox: d.bbox,
                        bbox_cells: Some(d.box_cells(&real.grid)),
                        score: d.score,
                        mask: None,
                    })
                    .collect(),
            })
            .collect(),
    };
    save(&out, &to_json_bytes(&file)?)
}

fn fuse_blocks(
    hor: &Path,
    ver: &Path,
    weights: Option<&Path>,
    out: PathBuf,
    mask_size: usize,
) -> Result<()> {
    let hor: FeatureBlock = read_json(hor)?;
    let ver: FeatureBlock = read_json(ver)?;
    hor.validate()?;
    ver.validate()?;
    let d = hor.channels * hor.height;
    let weights = match weights {
        Some(p) => read_weights(&mut BufReader::new(fs::File::open(p)?))?,
        None => {
            let heads = if d.is_multiple_of(DEFAULT_HEADS) {
                DEFAULT_HEADS
            } else {
                1
            };
            AttentionWeights::correlation(DEFAULT_LAYERS, heads, d, 1.0)?
        }
    };
    let fused = fuse(&hor, &ver, &weights)?;
    let mask = decode_mask(&fused, mask_size)?;
    let doc = serde_json::json!({
        "rows": fused.rows,
        "cols": fused.cols,
        "block": fused.block,
        "mask": { "width": mask.width, "height": mask.height, "values": mask.values },
    });
    save(&out, &to_json_bytes(&doc)?)
}

fn evaluate(pred: &Path, gt: &Path, out: PathBuf, plot: Option<PathBuf>) -> Result<()> {
    let pred: DetectionFile =
        read_json(pred).with_context(|| format!("reading {}", pred.display()))?;
    let gt = AnnotationSet::load(gt).with_context(|| format!("reading {}", gt.display()))?;
    let report = evaluate_files(&pred, &gt)?;
    let json = to_json_bytes(&report)?;
    save(&out, &json)?;
    if let Some(p) = plot {
        save(&p, report.pr_csv().as_bytes())?;
    }
    Ok(())
}

fn triangulate(
    calib: &Path,
    kp2d: &Path,
    out: PathBuf,
    persons: Option<usize>,
    seed: u64,
) -> Result<()> {
    let cameras =
        load_calibration(calib).with_context(|| format!("reading {}", calib.display()))?;
    let views: KeypointViews =
        read_json(kp2d).with_context(|| format!("reading {}", kp2d.display()))?;
    let points = triangulate_views(&cameras, &views, persons.map(|k| (k, seed)))?;
    save(&out, &to_json_bytes(&points)?)
}

fn run(config: &Path, out: Option<PathBuf>, default_dir: &Path) -> Result<()> {
    let parsed = PipelineConfig::load(config);
    let dir = out
        .or_else(|| parsed.as_ref().ok().and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| default_dir.to_path_buf());
    let config = match parsed {
        Ok(c) => c,
        Err(e) => {
            write_failure_marker(&dir, "config", &e.to_string());
            return Err(e).with_context(|| format!("loading {}", config.display()));
        }
    };
    let result = run_to_dir(&config, &dir)?;
    eprintln!(
        "{} frames, AP50 {:.3}, AP50:95 {:.3}, outputs in {}",
        result.frames.len(),
        result.report.ap_50,
        result.report.ap_50_95,
        dir.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let dir = cli.output_dir;
    match cli.command {
        Command::Simulate(args) => simulate(args, &dir),
        Command::Beamform(args) => beamform(args, &dir),
        Command::Detect {
            heatmap,
            out,
            params,
        } => detect(
            &heatmap,
            output(out, &dir, "detections.json"),
            params.as_deref(),
        ),
        Command::Fuse {
            hor,
            ver,
            weights,
            out,
            mask_size,
        } => fuse_blocks(
            &hor,
            &ver,
            weights.as_deref(),
            output(out, &dir, "mask.json"),
            mask_size,
        ),
        Command::Evaluate {
            pred,
            gt,
            out,
            plot,
        } => evaluate(&pred, &gt, output(out, &dir, "report.json"), plot),
        Command::Triangulate {
            calib,
            kp2d,
            out,
            persons,
            seed,
        } => triangulate(
            &calib,
            &kp2d,
            output(out, &dir, "keypoints3d.json"),
            persons,
            seed,
        ),
        Command::Run { config, out } => run(&config, out, &dir),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
