//! Radar hardware description and raw chirp-sample synthesis.
//!
//! A scene is a list of point scatterers. Each one contributes
//! `reflectivity / d^2 * exp(-j 2 pi d_m(p_t) / lambda_k)` to sample `(k, m, t)`,
//! where `d` is the one-way range from the array phase center and `d_m` is the
//! monostatic round-trip path to virtual element `m`.

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Element count of each radar's virtual array (86 x 1).
pub const DEFAULT_ELEMENTS: usize = 86;

/// Shared sweep bandwidth of both radars.
pub const DEFAULT_BANDWIDTH: f64 = 1.23e9;

pub const HORIZONTAL_START_FREQ: f64 = 77.0e9;
pub const VERTICAL_START_FREQ: f64 = 79.0e9;

pub const RADAR_FPS: f64 = 20.0;
pub const CAMERA_FPS: f64 = 10.0;

/// Points closer than this to an element are treated as coincident.
const COINCIDENCE_EPS: f64 = 1e-9;

/// Linear FMCW sweep parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChirpConfig {
    pub start_freq: f64,
    pub bandwidth: f64,
    pub num_samples: usize,
    pub sample_period: f64,
    pub frames_per_second: f64,
}

impl ChirpConfig {
    pub fn new(
        start_freq: f64,
        bandwidth: f64,
        num_samples: usize,
        sample_period: f64,
        frames_per_second: f64,
    ) -> Result<Self> {
        let cfg = Self {
            start_freq,
            bandwidth,
            num_samples,
            sample_period,
            frames_per_second,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 77 - 78.23 GHz sweep of the horizontal radar.
    pub fn horizontal(num_samples: usize) -> Self {
        Self {
            start_freq: HORIZONTAL_START_FREQ,
            bandwidth: DEFAULT_BANDWIDTH,
            num_samples,
            sample_period: 1.0 / 10.0e6,
            frames_per_second: RADAR_FPS,
        }
    }

    /// 79 - 80.23 GHz sweep of the vertical radar.
    pub fn vertical(num_samples: usize) -> Self {
        Self {
            start_freq: VERTICAL_START_FREQ,
            ..Self::horizontal(num_samples)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.start_freq,
            self.bandwidth,
            self.sample_period,
            self.frames_per_second,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig(
                "chirp parameters must be finite".into(),
            ));
        }
        if self.start_freq <= 0.0 {
            return Err(Error::InvalidConfig("start_freq must be positive".into()));
        }
        if self.bandwidth <= 0.0 {
            return Err(Error::InvalidConfig("bandwidth must be positive".into()));
        }
        if self.num_samples < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 samples per sweep".into(),
            ));
        }
        if self.sample_period <= 0.0 || self.frames_per_second <= 0.0 {
            return Err(Error::InvalidConfig(
                "sample_period and frames_per_second must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spacing between consecutive sample frequencies.
    pub fn frequency_step(&self) -> f64 {
        self.bandwidth / (self.num_samples - 1) as f64
    }

    pub fn frequency(&self, k: usize) -> f64 {
        self.start_freq + self.frequency_step() * k as f64
    }

    pub fn wavelength(&self, k: usize) -> f64 {
        SPEED_OF_LIGHT / self.frequency(k)
    }

    /// Range resolution `c / (2 B)`.
    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth)
    }
}

/// Which signal plane an array (and its heatmaps) resolves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Array along x, resolves the x-y plane.
    Horizontal,
    /// Array along z, resolves the y-z plane.
    Vertical,
}

impl Orientation {
    pub fn tag(self) -> u8 {
        match self {
            Orientation::Horizontal => 0,
            Orientation::Vertical => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Orientation::Horizontal),
            1 => Some(Orientation::Vertical),
            _ => None,
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hor" | "horizontal" => Ok(Orientation::Horizontal),
            "ver" | "vertical" => Ok(Orientation::Vertical),
            other => Err(Error::InvalidConfig(format!("unknown plane {other:?}"))),
        }
    }
}

/// Virtual (tx x rx) array treated as collocated monostatic elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualArray {
    pub element_positions: Vec<Vec3>,
    pub orientation: Orientation,
}

impl VirtualArray {
    pub fn new(element_positions: Vec<Vec3>, orientation: Orientation) -> Result<Self> {
        if element_positions.is_empty() {
            return Err(Error::InvalidConfig(
                "array needs at least one element".into(),
            ));
        }
        if element_positions
            .iter()
            .any(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "array positions must be finite".into(),
            ));
        }
        Ok(Self {
            element_positions,
            orientation,
        })
    }

    /// Uniform linear array centered on `center`, laid along x (horizontal)
    /// or z (vertical).
    pub fn uniform_linear(
        count: usize,
        spacing: f64,
        orientation: Orientation,
        center: Vec3,
    ) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidConfig(
                "element spacing must be positive".into(),
            ));
        }
        let axis = match orientation {
            Orientation::Horizontal => Vec3::x(),
            Orientation::Vertical => Vec3::z(),
        };
        let mid = (count as f64 - 1.0) / 2.0;
        let positions = (0..count)
            .map(|i| center + axis * ((i as f64 - mid) * spacing))
            .collect();
        Self::new(positions, orientation)
    }

    /// Monostatic stand-in for a MIMO virtual array whose tx+rx positions are
    /// half a wavelength apart: the tx/rx midpoints sit a quarter wavelength
    /// apart, which keeps the round-trip phase free of grating lobes.
    pub fn mimo_equivalent(
        count: usize,
        chirp: &ChirpConfig,
        orientation: Orientation,
        center: Vec3,
    ) -> Result<Self> {
        Self::uniform_linear(count, chirp.wavelength(0) / 4.0, orientation, center)
    }

    pub fn len(&self) -> usize {
        self.element_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_positions.is_empty()
    }

    /// Centroid of the elements.
    pub fn phase_center(&self) -> Vec3 {
        let sum = self
            .element_positions
            .iter()
            .fold(Vec3::zeros(), |acc, p| acc + p);
        sum / self.len() as f64
    }

    /// Round-trip path `||tx - p|| + ||p - rx||` with `tx = rx = element m`.
    pub fn round_trip_distance(&self, m: usize, p: &Vec3) -> Result<f64> {
        let element = self
            .element_positions
            .get(m)
            .ok_or(Error::AntennaIndexOutOfRange {
                index: m,
                count: self.len(),
            })?;
        let one_way = (element - p).norm();
        if one_way <= COINCIDENCE_EPS {
            return Err(Error::CoincidentPoint(m));
        }
        Ok(2.0 * one_way)
    }
}

/// A point reflector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Vec3,
    pub reflectivity: f64,
    #[serde(default)]
    pub is_static: bool,
}

/// A scatterer plus its motion and per-frame visibility.
///
/// `trajectory[t]` is the displacement from `position` at frame `t`.
/// `visibility[t] == false` removes the scatterer from frame `t`, which is how
/// specular (partially visible) bodies are modeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScatterer {
    #[serde(flatten)]
    pub scatterer: Scatterer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Vec<bool>>,
}

impl SceneScatterer {
    pub fn fixed(position: Vec3, reflectivity: f64) -> Self {
        Self {
            scatterer: Scatterer {
                position,
                reflectivity,
                is_static: true,
            },
            trajectory: None,
            visibility: None,
        }
    }

    pub fn moving(position: Vec3, reflectivity: f64, trajectory: Vec<Vec3>) -> Self {
        Self {
            scatterer: Scatterer {
                position,
                reflectivity,
                is_static: false,
            },
            trajectory: Some(trajectory),
            visibility: None,
        }
    }

    /// Position at frame `t`.
    pub fn position_at(&self, t: usize) -> Vec3 {
        match &self.trajectory {
            Some(traj) if !self.scatterer.is_static => self.scatterer.position + traj[t],
            _ => self.scatterer.position,
        }
    }

    pub fn visible_at(&self, t: usize) -> bool {
        self.visibility.as_ref().is_none_or(|v| v[t])
    }
}

/// An ordered list of scatterers. Serializes as a bare JSON list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scene {
    pub scatterers: Vec<SceneScatterer>,
}

impl Scene {
    pub fn new(scatterers: Vec<SceneScatterer>) -> Self {
        Self { scatterers }
    }

    /// Frame count implied by the trajectories, if any scatterer moves.
    pub fn trajectory_frames(&self) -> Option<usize> {
        self.scatterers
            .iter()
            .filter(|s| !s.scatterer.is_static)
            .find_map(|s| s.trajectory.as_ref().map(Vec::len))
    }

    /// Checks motion/visibility tables against `frames` and reflectivities.
    pub fn validate(&self, frames: usize) -> Result<()> {
        for s in &self.scatterers {
            if !s.scatterer.reflectivity.is_finite() || s.scatterer.reflectivity < 0.0 {
                return Err(Error::InvalidConfig(
                    "reflectivity must be finite and non-negative".into(),
                ));
            }
            if !s.scatterer.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(
                    "scatterer position must be finite".into(),
                ));
            }
            match (&s.trajectory, s.scatterer.is_static) {
                (Some(_), true) => {
                    return Err(Error::InvalidConfig(
                        "static scatterer must not carry a trajectory".into(),
                    ))
                }
                (None, false) => {
                    return Err(Error::InvalidConfig(
                        "moving scatterer needs a trajectory".into(),
                    ))
                }
                (Some(traj), false) if traj.len() != frames => {
                    return Err(Error::TrajectoryLength {
                        expected: frames,
                        found: traj.len(),
                    })
                }
                _ => {}
            }
            if let Some(vis) = &s.visibility {
                if vis.len() != frames {
                    return Err(Error::TrajectoryLength {
                        expected: frames,
                        found: vis.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Raw samples `s[k, m, t]`, stored with `k` fastest and `t` slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrameCube {
    pub data: Vec<Complex64>,
    pub config: ChirpConfig,
    pub array: VirtualArray,
    pub frames: usize,
}

impl RadarFrameCube {
    pub fn zeros(config: ChirpConfig, array: VirtualArray, frames: usize) -> Self {
        let len = config.num_samples * array.len() * frames;
        Self {
            data: vec![Complex64::new(0.0, 0.0); len],
            config,
            array,
            frames,
        }
    }

    pub fn from_data(
        data: Vec<Complex64>,
        config: ChirpConfig,
        array: VirtualArray,
        frames: usize,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.num_samples * array.len() * frames;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "cube has {} samples, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidConfig("cube samples must be finite".into()));
        }
        Ok(Self {
            data,
            config,
            array,
            frames,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.config.num_samples
    }

    pub fn num_elements(&self) -> usize {
        self.array.len()
    }

    #[inline]
    pub fn index(&self, k: usize, m: usize, t: usize) -> usize {
        (t * self.num_elements() + m) * self.num_samples() + k
    }

    #[inline]
    pub fn get(&self, k: usize, m: usize, t: usize) -> Complex64 {
        self.data[self.index(k, m, t)]
    }

    /// All `K * M` samples of frame `t`.
    pub fn frame(&self, t: usize) -> &[Complex64] {
        let n = self.num_samples() * self.num_elements();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frame differencing on raw samples: frame `t` of the result is
    /// `s[t + lag] - s[t]`.
    pub fn frame_difference(&self, lag: usize) -> Result<Self> {
        if lag == 0 || lag >= self.frames {
            return Err(Error::InvalidLag {
                lag,
                frames: self.frames,
            });
        }
        let n = self.num_samples() * self.num_elements();
        let data = (lag..self.frames)
            .flat_map(|t| {
                let now = self.frame(t);
                let before = &self.data[(t - lag) * n..(t - lag + 1) * n];
                now.iter().zip(before).map(|(a, b)| a - b)
            })
            .collect();
        Ok(Self {
            data,
            config: self.config.clone(),
            array: self.array.clone(),
            frames: self.frames - lag,
        })
    }
}

/// Frame count, noise level, and RNG seed for [`synthesize_frame_cube`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub frames: usize,
    /// Standard deviation of the circular complex Gaussian noise (total power `std^2`).
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthesisOptions {
    pub fn noiseless(frames: usize) -> Self {
        Self {
            frames,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Simulates the raw cube one radar records for `scene`.
///
/// Scatterers are accumulated in list order, then noise is added in storage
/// order, so the result is bit-identical for a fixed seed.
pub fn synthesize_frame_cube(
    scene: &Scene,
    config: &ChirpConfig,
    array: &VirtualArray,
    options: SynthesisOptions,
) -> Result<RadarFrameCube> {
    config.validate()?;
    if options.frames == 0 {
        return Err(Error::InvalidConfig("need at least one frame".into()));
    }
    if !(options.noise_std >= 0.0) || !options.noise_std.is_finite() {
        return Err(Error::InvalidConfig(
            "noise_std must be finite and >= 0".into(),
        ));
    }
    scene.validate(options.frames)?;

    let mut cube = RadarFrameCube::zeros(config.clone(), array.clone(), options.frames);
    let k_count = config.num_samples;
    let center = array.phase_center();
    let wavenumbers: Vec<f64> = (0..k_count)
        .map(|k| 2.0 * std::f64::consts::PI / config.wavelength(k))
        .collect();

    for t in 0..options.frames {
        for s in &scene.scatterers {
            if !s.visible_at(t) {
                continue;
            }
            let p = s.position_at(t);
            let range = (p - center).norm();
            if range <= COINCIDENCE_EPS {
                return Err(Error::CoincidentPoint(0));
            }
            let amplitude = s.scatterer.reflectivity / (range * range);
            for m in 0..array.len() {
                let d = array.round_trip_distance(m, &p)?;
                let base = cube.index(0, m, t);
                for (k, wn) in wavenumbers.iter().enumerate() {
                    let (sin, cos) = (-wn * d).sin_cos();
                    cube.data[base + k] += Complex64::new(amplitude * cos, amplitude * sin);
                }
            }
        }
    }

    if options.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let normal = Normal::new(0.0, options.noise_std / std::f64::consts::SQRT_2)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for v in cube.data.iter_mut() {
            let re = normal.sample(&mut rng);
            let im = normal.sample(&mut rng);
            *v += Complex64::new(re, im);
        }
    }
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_element(at: Vec3) -> VirtualArray {
        VirtualArray::new(vec![at], Orientation::Horizontal).unwrap()
    }

    #[test]
    fn round_trip_on_axis() {
        let array = single_element(Vec3::zeros());
        let d = array
            .round_trip_distance(0, &Vec3::new(0.0, 1.0, 0.0))
            .unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn round_trip_offset_element() {
        let array = single_element(Vec3::new(0.01, 0.0, 0.0));
        let d = array
            .round_trip_distance(0, &Vec3::new(0.0, 1.0, 0.0))
            .unwrap();
        let expected = 2.0 * (0.01f64 * 0.01 + 1.0).sqrt();
        assert!((d - expected).abs() < 1e-15);
        assert!((d - 2.0001).abs() < 1e-6);
    }

    #[test]
    fn round_trip_errors() {
        let array = single_element(Vec3::zeros());
        assert!(matches!(
            array.round_trip_distance(0, &Vec3::zeros()),
            Err(Error::CoincidentPoint(0))
        ));
        assert!(matches!(
            array.round_trip_distance(3, &Vec3::x()),
            Err(Error::AntennaIndexOutOfRange { index: 3, count: 1 })
        ));
    }

    #[test]
    fn chirp_frequencies_are_linear() {
        let c = ChirpConfig::horizontal(5);
        assert_eq!(c.frequency(0), 77.0e9);
        assert!((c.frequency(4) - 78.23e9).abs() < 1.0);
        for k in 1..5 {
            assert!(c.frequency(k) > c.frequency(k - 1));
        }
        assert!((c.range_resolution() - 0.1219).abs() < 1e-3);
    }

    #[test]
    fn chirp_rejects_bad_values() {
        assert!(ChirpConfig::new(77e9, 0.0, 8, 1e-7, 20.0).is_err());
        assert!(ChirpConfig::new(77e9, 1e9, 1, 1e-7, 20.0).is_err());
        assert!(ChirpConfig::new(-1.0, 1e9, 8, 1e-7, 20.0).is_err());
    }

    #[test]
    fn empty_scene_is_zero() {
        let cfg = ChirpConfig::horizontal(8);
        let array =
            VirtualArray::mimo_equivalent(4, &cfg, Orientation::Horizontal, Vec3::zeros()).unwrap();
        let cube = synthesize_frame_cube(
            &Scene::default(),
            &cfg,
            &array,
            SynthesisOptions::noiseless(3),
        )
        .unwrap();
        assert!(cube.data.iter().all(|c| c.norm() == 0.0));
        assert_eq!(cube.data.len(), 8 * 4 * 3);
    }

    #[test]
    fn static_scatterer_is_frame_invariant() {
        let cfg = ChirpConfig::horizontal(8);
        let array =
            VirtualArray::mimo_equivalent(4, &cfg, Orientation::Horizontal, Vec3::zeros()).unwrap();
        let scene = Scene::new(vec![SceneScatterer::fixed(Vec3::new(0.3, 2.0, 0.1), 1.0)]);
        let cube =
            synthesize_frame_cube(&scene, &cfg, &array, SynthesisOptions::noiseless(4)).unwrap();
        for t in 1..4 {
            assert_eq!(cube.frame(t), cube.frame(0));
        }
    }

    #[test]
    fn trajectory_length_mismatch() {
        let cfg = ChirpConfig::horizontal(8);
        let array =
            VirtualArray::mimo_equivalent(4, &cfg, Orientation::Horizontal, Vec3::zeros()).unwrap();
        let scene = Scene::new(vec![SceneScatterer::moving(
            Vec3::new(0.0, 2.0, 0.0),
            1.0,
            vec![Vec3::zeros(); 2],
        )]);
        let err = synthesize_frame_cube(&scene, &cfg, &array, SynthesisOptions::noiseless(3));
        assert!(matches!(
            err,
            Err(Error::TrajectoryLength {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = ChirpConfig::horizontal(8);
        let array =
            VirtualArray::mimo_equivalent(4, &cfg, Orientation::Horizontal, Vec3::zeros()).unwrap();
        let opts = SynthesisOptions {
            frames: 2,
            noise_std: 0.1,
            seed: 7,
        };
        let a = synthesize_frame_cube(&Scene::default(), &cfg, &array, opts).unwrap();
        let b = synthesize_frame_cube(&Scene::default(), &cfg, &array, opts).unwrap();
        let c = synthesize_frame_cube(
            &Scene::default(),
            &cfg,
            &array,
            SynthesisOptions { seed: 8, ..opts },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn visibility_masks_frames() {
        let cfg = ChirpConfig::horizontal(4);
        let array =
            VirtualArray::mimo_equivalent(2, &cfg, Orientation::Horizontal, Vec3::zeros()).unwrap();
        let mut s = SceneScatterer::fixed(Vec3::new(0.0, 2.0, 0.0), 1.0);
        s.visibility = Some(vec![true, false]);
        let cube = synthesize_frame_cube(
            &Scene::new(vec![s]),
            &cfg,
            &array,
            SynthesisOptions::noiseless(2),
        )
        .unwrap();
        assert!(cube.frame(0).iter().any(|c| c.norm() > 0.0));
        assert!(cube.frame(1).iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn scene_json_is_a_list() {
        let scene = Scene::new(vec![
            SceneScatterer::fixed(Vec3::new(0.0, 1.0, 0.0), 0.5),
            SceneScatterer::moving(
                Vec3::new(0.0, 2.0, 0.0),
                1.0,
                vec![Vec3::zeros(), Vec3::x()],
            ),
        ]);
        let text = serde_json::to_string(&scene).unwrap();
        assert!(text.starts_with('['));
        let back: Scene = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scene);
        assert_eq!(back.trajectory_frames(), Some(2));
    }
}
