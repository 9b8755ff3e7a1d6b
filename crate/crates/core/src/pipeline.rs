//! End-to-end driver: simulate both radars, beamform, detect, fuse, paste
//! masks and evaluate against the simulated ground truth.
//!
//! Everything is computed in memory first; artifacts are written only after
//! every stage succeeded. A failure while writing leaves a `FAILED` marker.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beamform::{
    background_subtract, beamform_plane, magnitude_normalize, PlaneGrid, RealHeatmap, DEFAULT_LAG,
};
use crate::detect::{
    cfar_detect, non_max_suppression, refine_to_centroid, roi_crop, vertical_box_from_horizontal,
    CfarParams, Detection, DEFAULT_HEIGHT_RANGE,
};
use crate::error::{Error, Result};
use crate::fusion::{
    decode_mask, fuse, AttentionWeights, FeatureBlock, DEFAULT_HEADS, DEFAULT_LAYERS,
};
use crate::geometry::{paste_mask, project_box3d, Box2D, Box3D, ResultPlane};
use crate::io::{
    align_streams, evaluate_files, read_json, read_weights, rle_encode, to_json_bytes,
    uniform_timestamps, write_cube, write_real_heatmap, AnnotatedFrame, AnnotatedObject,
    AnnotationSet, DetectionFile, DetectionFrame, DetectionRecord, FrameIndexPair,
    DEFAULT_MAX_RESIDUAL,
};
use crate::mask::ProbMask;
use crate::metrics::EvalReport;
use crate::radar::{
    synthesize_frame_cube, ChirpConfig, Orientation, RadarFrameCube, Scene, SceneScatterer,
    SynthesisOptions, Vec3, VirtualArray, CAMERA_FPS, DEFAULT_ELEMENTS, RADAR_FPS,
};

pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SceneSpec {
    /// No scatterers at all.
    Empty,
    /// One moving point at a fixed height.
    Point {
        start: [f64; 2],
        velocity: [f64; 2],
        #[serde(default = "default_point_height")]
        height: f64,
        #[serde(default = "default_reflectivity")]
        reflectivity: f64,
        #[serde(default)]
        clutter: usize,
    },
    /// A person-sized rigid group of co-moving points.
    Walker {
        start: [f64; 2],
        velocity: [f64; 2],
        #[serde(default = "default_reflectivity")]
        reflectivity: f64,
        #[serde(default)]
        clutter: usize,
    },
    /// Scene JSON; every moving scatterer is a separate target.
    File { path: PathBuf },
}

fn default_point_height() -> f64 {
    1.0
}

fn default_reflectivity() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSection {
    pub samples: usize,
    pub elements: usize,
    pub noise_std: f64,
    /// Height of both array centers.
    pub height: f64,
}

impl Default for RadarSection {
    fn default() -> Self {
        Self {
            samples: 64,
            elements: DEFAULT_ELEMENTS,
            noise_std: 0.0,
            height: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub horizontal: PlaneGrid,
    pub vertical: PlaneGrid,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            horizontal: PlaneGrid::default_horizontal(),
            vertical: PlaneGrid::default_vertical(),
        }
    }
}

/// Detection settings. The CFAR keys sit directly in `[detect]`; every key
/// left out keeps the value from `DetectSection::default()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub guard: usize,
    pub train: usize,
    pub threshold_factor: f64,
    pub box_extent: f64,
    pub min_value: f64,
    pub nms_iou: f64,
    /// Re-center boxes on the centroid of cells above this fraction of the
    /// peak; `0` in a config file disables refinement.
    pub centroid_fraction: Option<f64>,
    pub lag: usize,
    pub height_range: (f64, f64),
}

impl Default for DetectSection {
    fn default() -> Self {
        let cfar = CfarParams::default();
        Self {
            guard: cfar.guard,
            train: cfar.train,
            threshold_factor: cfar.threshold_factor,
            box_extent: cfar.box_extent,
            // heatmaps here are max-normalized, so this is a quarter of the peak
            min_value: 0.25,
            nms_iou: 0.1,
            centroid_fraction: Some(0.5),
            lag: DEFAULT_LAG,
            height_range: DEFAULT_HEIGHT_RANGE,
        }
    }
}

impl DetectSection {
    pub fn cfar(&self) -> CfarParams {
        CfarParams {
            guard: self.guard,
            train: self.train,
            threshold_factor: self.threshold_factor,
            box_extent: self.box_extent,
            min_value: self.min_value,
        }
    }

    /// Parses a standalone `[detect]` table body.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut section: Self = toml::from_str(text)?;
        section.settle()?;
        Ok(section)
    }

    /// Maps a zero `centroid_fraction` to `None`, then validates.
    fn settle(&mut self) -> Result<()> {
        if self.centroid_fraction == Some(0.0) {
            self.centroid_fraction = None;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.centroid_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(
                    "centroid_fraction must lie in (0, 1]".into(),
                ));
            }
        }
        let (z0, z1) = self.height_range;
        if !(z0 < z1) {
            return Err(Error::InvalidHeightRange(z0, z1));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub layers: usize,
    pub heads: usize,
    /// Query/key gain of the correlation initialization.
    pub gain: f64,
    /// Random initialization with this seed instead of the correlation one.
    pub seed: Option<u64>,
    /// Weights file; overrides `gain` and `seed`.
    pub weights: Option<PathBuf>,
    pub roi_size: usize,
    pub mask_size: usize,
    /// Feed RoI features on a log scale spanning this many dB below the frame
    /// peak; `None` (`0` in a config file) keeps linear magnitudes.
    pub db_range: Option<f64>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS,
            heads: DEFAULT_HEADS,
            gain: 1.0,
            seed: None,
            weights: None,
            roi_size: 16,
            mask_size: 28,
            db_range: Some(30.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub plane: ResultPlane,
    /// Height of the projection center; world `(x, y, z)` maps to camera
    /// `(x, height - z, y)`.
    pub height: f64,
    pub max_residual: f64,
    /// Side length of the ground-truth target box footprint.
    pub target_extent: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            plane: ResultPlane {
                r: 1.0,
                p_x: 0.8,
                p_y: 0.6,
                pixel_scale: 200.0,
                image_size: (320, 240),
            },
            height: 1.0,
            max_residual: DEFAULT_MAX_RESIDUAL,
            target_extent: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Radar frames to simulate.
    pub frames: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub scene: SceneSpec,
    #[serde(default)]
    pub radar: RadarSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub camera: CameraSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text)?;
        config.detect.settle()?;
        // TOML has no null; zero switches the optional stage off
        if config.fusion.db_range == Some(0.0) {
            config.fusion.db_range = None;
        }
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let SceneSpec::File { path } = &mut config.scene {
            rebase(path);
        }
        if let Some(w) = &mut config.fusion.weights {
            rebase(w);
        }
        if let Some(o) = &mut config.output_dir {
            rebase(o);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.detect.validate()?;
        if self.frames <= self.detect.lag || self.detect.lag == 0 {
            return Err(Error::InvalidLag {
                lag: self.detect.lag,
                frames: self.frames,
            });
        }
        if self.radar.samples < 2 || self.radar.elements == 0 {
            return Err(Error::InvalidConfig(
                "radar needs at least 2 samples and 1 element".into(),
            ));
        }
        self.grid.horizontal.validate()?;
        self.grid.vertical.validate()?;
        if self.grid.horizontal.plane != Orientation::Horizontal
            || self.grid.vertical.plane != Orientation::Vertical
        {
            return Err(Error::PlaneMismatch("grid sections swapped".into()));
        }
        self.camera.plane.validate()?;
        if let Some(r) = self.fusion.db_range {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig("db_range must be positive".into()));
            }
        }
        if self.fusion.roi_size == 0 || self.fusion.mask_size == 0 {
            return Err(Error::InvalidConfig(
                "roi_size and mask_size must be positive".into(),
            ));
        }
        if self.fusion.heads == 0 || !self.fusion.roi_size.is_multiple_of(self.fusion.heads) {
            return Err(Error::InvalidConfig(format!(
                "{} heads do not divide d_model {}",
                self.fusion.heads, self.fusion.roi_size
            )));
        }
        if !(self.camera.target_extent > 0.0) {
            return Err(Error::InvalidConfig(
                "target_extent must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One ground-truth target: a path of footprint centers, one per radar frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub person: u32,
    pub path: Vec<[f64; 2]>,
}

/// Scene plus the target paths it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedScene {
    pub scene: Scene,
    pub targets: Vec<Target>,
}

fn linear_path(start: [f64; 2], velocity: [f64; 2], frames: usize) -> Vec<[f64; 2]> {
    (0..frames)
        .map(|t| {
            let s = t as f64 / RADAR_FPS;
            [start[0] + velocity[0] * s, start[1] + velocity[1] * s]
        })
        .collect()
}

fn clutter(n: usize, rng: &mut ChaCha8Rng) -> Vec<SceneScatterer> {
    (0..n)
        .map(|_| {
            let p = Vec3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(1.0..3.7),
                rng.random_range(0.2..2.0),
            );
            SceneScatterer::fixed(p, rng.random_range(0.5..2.0))
        })
        .collect()
}

/// Body points of the walker relative to its footprint center: a 0.4 m by
/// 1.7 m sheet sampled every 5 cm with a little depth jitter.
fn walker_offsets(rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut out = Vec::new();
    for i in 0..9 {
        for j in 0..35 {
            let x = -0.2 + 0.05 * i as f64;
            let z = 0.1 + 0.05 * j as f64;
            out.push(Vec3::new(x, rng.random_range(-0.05..0.05), z));
        }
    }
    out
}

pub fn build_scene(spec: &SceneSpec, frames: usize, seed: u64) -> Result<ScriptedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        SceneSpec::Empty => Ok(ScriptedScene {
            scene: Scene::default(),
            targets: vec![],
        }),
        SceneSpec::Point {
            start,
            velocity,
            height,
            reflectivity,
            clutter: n,
        } => {
            let path = linear_path(*start, *velocity, frames);
            let traj = path
                .iter()
                .map(|p| Vec3::new(p[0], p[1], *height))
                .collect();
            let mut scatterers = vec![SceneScatterer::moving(
                Vec3::new(0.0, 0.0, 0.0),
                *reflectivity,
                traj,
            )];
            scatterers.extend(clutter(*n, &mut rng));
            Ok(ScriptedScene {
                scene: Scene::new(scatterers),
                targets: vec![Target { person: 0, path }],
            })
        }
        SceneSpec::Walker {
            start,
            velocity,
            reflectivity,
            clutter: n,
        } => {
            let path = linear_path(*start, *velocity, frames);
            let traj: Vec<Vec3> = path.iter().map(|p| Vec3::new(p[0], p[1], 0.0)).collect();
            let mut scatterers: Vec<SceneScatterer> = walker_offsets(&mut rng)
                .into_iter()
                .map(|o| SceneScatterer::moving(o, *reflectivity, traj.clone()))
                .collect();
            scatterers.extend(clutter(*n, &mut rng));
            Ok(ScriptedScene {
                scene: Scene::new(scatterers),
                targets: vec![Target { person: 0, path }],
            })
        }
        SceneSpec::File { path } => {
            let scene: Scene = read_json(path)?;
            scene.validate(frames)?;
            let targets = scene
                .scatterers
                .iter()
                .filter(|s| !s.scatterer.is_static)
                .enumerate()
                .map(|(i, s)| Target {
                    person: i as u32,
                    path: (0..frames)
                        .map(|t| {
                            let p = s.position_at(t);
                            [p.x, p.y]
                        })
                        .collect(),
                })
                .collect();
            Ok(ScriptedScene { scene, targets })
        }
    }
}

/// Per-radar-frame outcome kept for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub radar_frame: usize,
    /// Horizontal-plane detections after NMS, score descending.
    pub detections: Vec<Detection>,
    /// Result-plane pixel boxes, one per detection; `None` when the box
    /// reaches the camera plane and cannot be projected.
    pub pixel_boxes: Vec<Option<Box2D>>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub targets: Vec<Target>,
    pub frames: Vec<FrameOutcome>,
    pub pairs: Vec<FrameIndexPair>,
    pub detections: DetectionFile,
    pub ground_truth: AnnotationSet,
    pub report: EvalReport,
    /// File name to contents, written in name order.
    pub artifacts: BTreeMap<String, Vec<u8>>,
}

impl PipelineOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            std::fs::remove_file(&marker)?;
        }
        for (name, bytes) in &self.artifacts {
            if let Err(e) = std::fs::write(dir.join(name), bytes) {
                write_failure_marker(dir, &format!("writing {name}"), &e.to_string());
                return Err(e.into());
            }
        }
        Ok(())
    }
}

/// Best-effort marker naming the failed stage.
pub fn write_failure_marker(dir: &Path, stage: &str, message: &str) {
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(
        dir.join(FAILED_MARKER),
        format!("stage: {stage}\nerror: {message}\n"),
    );
}

fn to_camera(p: Vec3, camera_height: f64) -> Vec3 {
    Vec3::new(p.x, camera_height - p.z, p.y)
}

/// Result-plane pixel box of a world box.
fn image_box(world: &Box3D, camera: &CameraSection) -> Result<Box2D> {
    let a = to_camera(world.min, camera.height);
    let b = to_camera(world.max, camera.height);
    let cam = Box3D::new(a.inf(&b), a.sup(&b))?;
    Ok(camera.plane.to_pixels(&project_box3d(&camera.plane, &cam)?))
}

fn target_box(center: [f64; 2], extent: f64, height_range: (f64, f64)) -> Result<Box3D> {
    let h = extent / 2.0;
    Box3D::new(
        Vec3::new(center[0] - h, center[1] - h, height_range.0),
        Vec3::new(center[0] + h, center[1] + h, height_range.1),
    )
}

fn load_weights(config: &PipelineConfig) -> Result<AttentionWeights> {
    let f = &config.fusion;
    let d = f.roi_size;
    let w = if let Some(path) = &f.weights {
        read_weights(&mut std::io::BufReader::new(std::fs::File::open(path)?))?
    } else if let Some(seed) = f.seed {
        AttentionWeights::seeded(f.layers, f.heads, d, seed)?
    } else {
        AttentionWeights::correlation(f.layers, f.heads, d, f.gain)?
    };
    if w.d_model != d {
        return Err(Error::ShapeMismatch(format!(
            "weights have d_model {}, RoI features have {d}",
            w.d_model
        )));
    }
    Ok(w)
}

struct Radars {
    hor: RadarFrameCube,
    ver: RadarFrameCube,
}

fn simulate(config: &PipelineConfig, scene: &Scene) -> Result<Radars> {
    let r = &config.radar;
    let center = Vec3::new(0.0, 0.0, r.height);
    let run = |chirp: ChirpConfig, orientation, salt: u64| -> Result<RadarFrameCube> {
        let array = VirtualArray::mimo_equivalent(r.elements, &chirp, orientation, center)?;
        let options = SynthesisOptions {
            frames: config.frames,
            noise_std: r.noise_std,
            seed: config.seed.wrapping_add(salt),
        };
        synthesize_frame_cube(scene, &chirp, &array, options)
    };
    Ok(Radars {
        hor: run(
            ChirpConfig::horizontal(r.samples),
            Orientation::Horizontal,
            1,
        )?,
        ver: run(ChirpConfig::vertical(r.samples), Orientation::Vertical, 2)?,
    })
}

fn heatmaps(config: &PipelineConfig, radars: &Radars) -> Result<(RealHeatmap, RealHeatmap)> {
    let lag = config.detect.lag;
    let h = beamform_plane(&radars.hor, &config.grid.horizontal)?;
    let v = beamform_plane(&radars.ver, &config.grid.vertical)?;
    Ok((
        magnitude_normalize(&background_subtract(&h, lag)?),
        magnitude_normalize(&background_subtract(&v, lag)?),
    ))
}

/// CFAR, optional centroid refinement, then NMS on every frame.
pub fn detect_heatmap(h: &RealHeatmap, params: &DetectSection) -> Result<Vec<Vec<Detection>>> {
    let per_frame = cfar_detect(h, &params.cfar())?;
    per_frame
        .into_iter()
        .enumerate()
        .map(|(t, dets)| {
            let dets = match params.centroid_fraction {
                Some(f) => dets
                    .iter()
                    .map(|d| refine_to_centroid(d, h.frame(t), &h.grid, f))
                    .collect::<Result<Vec<_>>>()?,
                None => dets,
            };
            Ok(non_max_suppression(dets, params.nms_iou))
        })
        .collect()
}

/// Maps normalized magnitudes in `[0, 1]` to `[0, 1]` on a dB scale, with
/// everything `range_db` or more below the peak at zero.
pub fn db_scale(values: &[f64], range_db: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            if v <= 0.0 {
                0.0
            } else {
                (1.0 + 20.0 * v.log10() / range_db).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// RoI features of one detection: horizontal block `H = range, W = x` and
/// vertical block `H = range, W = z` with the top height first.
pub fn roi_features(
    det: &Detection,
    hor: &[f64],
    ver: &[f64],
    config: &PipelineConfig,
) -> Result<(FeatureBlock, FeatureBlock)> {
    let (hg, vg) = (&config.grid.horizontal, &config.grid.vertical);
    let p = config.fusion.roi_size;
    let hroi = det.box_cells(hg);
    let hcrop = roi_crop(hor, hg.width, hg.height, &hroi, p)?;
    let hor_block = FeatureBlock::new(1, p, p, hcrop, Orientation::Horizontal)?;

    let vbox = vertical_box_from_horizontal(&det.bbox, config.detect.height_range)?;
    let [a1, b1] = vg.to_cells([vbox.x1, vbox.y1]);
    let [a2, b2] = vg.to_cells([vbox.x2, vbox.y2]);
    let vcrop = roi_crop(ver, vg.width, vg.height, &Box2D::new(a1, b1, a2, b2), p)?;
    let mut vvals = vec![0.0; p * p];
    for ph in 0..p {
        for pw in 0..p {
            vvals[pw * p + (p - 1 - ph)] = vcrop[ph * p + pw];
        }
    }
    let ver_block = FeatureBlock::new(1, p, p, vvals, Orientation::Vertical)?;
    Ok((hor_block, ver_block))
}

fn silhouette(
    det: &Detection,
    hor: &[f64],
    ver: &[f64],
    weights: &AttentionWeights,
    config: &PipelineConfig,
) -> Result<(Box2D, ProbMask)> {
    let (hb, vb) = roi_features(det, hor, ver, config)?;
    let fused = fuse(&hb, &vb, weights)?;
    let mask = decode_mask(&fused, config.fusion.mask_size)?;
    let (z0, z1) = config.detect.height_range;
    let world = Box3D::new(
        Vec3::new(det.bbox.x1, det.bbox.y1, z0),
        Vec3::new(det.bbox.x2, det.bbox.y2, z1),
    )?;
    Ok((image_box(&world, &config.camera)?, mask))
}

fn encode<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Runs every stage in memory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let scripted = build_scene(&config.scene, config.frames, config.seed)?;
    let weights = load_weights(config)?;
    let radars = simulate(config, &scripted.scene)?;
    let (hor, ver) = heatmaps(config, &radars)?;
    let lag = config.detect.lag;
    let (hor_feat, ver_feat) = match config.fusion.db_range {
        Some(r) => (db_scale(&hor.values, r), db_scale(&ver.values, r)),
        None => (hor.values.clone(), ver.values.clone()),
    };
    let (hcells, vcells) = (config.grid.horizontal.cells(), config.grid.vertical.cells());

    let per_frame = detect_heatmap(&hor, &config.detect)?;
    let (w, h) = config.camera.plane.image_size;
    let mut outcomes = Vec::with_capacity(per_frame.len());
    let mut predicted: BTreeMap<usize, Vec<DetectionRecord>> = BTreeMap::new();
    for (i, dets) in per_frame.into_iter().enumerate() {
        let radar_frame = i + lag;
        let mut boxes = Vec::with_capacity(dets.len());
        let mut records = Vec::with_capacity(dets.len());
        for d in &dets {
            let (pixel_box, mask) = match silhouette(
                d,
                &hor_feat[i * hcells..(i + 1) * hcells],
                &ver_feat[i * vcells..(i + 1) * vcells],
                &weights,
                config,
            ) {
                Ok(s) => s,
                // near-field clutter at or behind the camera never shows up in the image
                Err(Error::BehindProjectionCenter(_)) => {
                    boxes.push(None);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let pasted = match paste_mask(&mask, &pixel_box, w, h) {
                Ok(m) => Some(rle_encode(&m)),
                Err(Error::BoxOutsideCanvas) => None,
                Err(e) => return Err(e),
            };
            boxes.push(Some(pixel_box));
            records.push(DetectionRecord {
                bbox: pixel_box,
                bbox_cells: Some(d.box_cells(&config.grid.horizontal)),
                score: d.score,
                mask: pasted,
            });
        }
        predicted.insert(radar_frame, records);
        outcomes.push(FrameOutcome {
            radar_frame,
            detections: dets,
            pixel_boxes: boxes,
        });
    }

    let radar_ts = uniform_timestamps(config.frames, RADAR_FPS);
    let camera_frames = (config.frames as f64 * CAMERA_FPS / RADAR_FPS).ceil() as usize;
    let cam_ts = uniform_timestamps(camera_frames, CAMERA_FPS);
    let pairs: Vec<FrameIndexPair> = align_streams(&cam_ts, &radar_ts, config.camera.max_residual)?
        .into_iter()
        .filter(|p| p.radar_index >= lag)
        .collect();

    let mut detections = DetectionFile::default();
    let mut ground_truth = AnnotationSet {
        image_size: (w, h),
        frames: vec![],
    };
    for pair in &pairs {
        detections.frames.push(DetectionFrame {
            frame: pair.camera_index,
            detections: predicted[&pair.radar_index].clone(),
        });
        let mut objects = Vec::new();
        for t in &scripted.targets {
            let world = target_box(
                t.path[pair.radar_index],
                config.camera.target_extent,
                config.detect.height_range,
            )?;
            let bbox = image_box(&world, &config.camera)?;
            let mask = paste_mask(&ProbMask::filled(1, 1, 1.0)?, &bbox, w, h).ok();
            objects.push(AnnotatedObject {
                person: t.person,
                bbox,
                box3d: Some(world),
                mask: mask.as_ref().map(rle_encode),
                keypoints2d: vec![],
                keypoints3d: vec![],
            });
        }
        ground_truth.frames.push(AnnotatedFrame {
            frame: pair.camera_index,
            timestamp: Some(pair.camera_time),
            objects,
        });
    }
    let report = evaluate_files(&detections, &ground_truth)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert(
        "cube_hor.rfc".into(),
        encode(|b| write_cube(b, &radars.hor))?,
    );
    artifacts.insert(
        "cube_ver.rfc".into(),
        encode(|b| write_cube(b, &radars.ver))?,
    );
    artifacts.insert(
        "heatmap_hor.rfh".into(),
        encode(|b| write_real_heatmap(b, &hor))?,
    );
    artifacts.insert(
        "heatmap_ver.rfh".into(),
        encode(|b| write_real_heatmap(b, &ver))?,
    );
    artifacts.insert("radar_detections.json".into(), to_json_bytes(&outcomes)?);
    artifacts.insert("detections.json".into(), to_json_bytes(&detections)?);
    artifacts.insert("ground_truth.json".into(), to_json_bytes(&ground_truth)?);
    artifacts.insert("alignment.json".into(), to_json_bytes(&pairs)?);
    artifacts.insert("report.json".into(), to_json_bytes(&report)?);
    artifacts.insert("pr_curves.csv".into(), report.pr_csv().into_bytes());

    Ok(PipelineOutput {
        targets: scripted.targets,
        frames: outcomes,
        pairs,
        detections,
        ground_truth,
        report,
        artifacts,
    })
}

/// Runs the pipeline and writes its artifacts to `dir`. A stage failure
/// leaves only the `FAILED` marker in `dir`.
pub fn run_to_dir(config: &PipelineConfig, dir: &Path) -> Result<PipelineOutput> {
    match run_pipeline(config) {
        Ok(out) => {
            out.write(dir)?;
            Ok(out)
        }
        Err(e) => {
            write_failure_marker(dir, "pipeline", &e.to_string());
            Err(e)
        }
    }
}
