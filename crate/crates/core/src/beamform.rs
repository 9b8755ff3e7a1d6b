//! Plane beamforming of raw cubes into AoA-ToF heatmaps, and time-domain
//! background subtraction.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::radar::{Orientation, RadarFrameCube, Vec3, VirtualArray, SPEED_OF_LIGHT};

/// Default frame lag for background subtraction.
pub const DEFAULT_LAG: usize = 1;

/// Regular grid over a signal plane.
///
/// Plane coordinates are `(x, y)` for the horizontal plane and `(y, z)` for the
/// vertical plane. `origin` is the lower corner of cell `(0, 0)`; columns run
/// along the first coordinate and rows along the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneGrid {
    pub plane: Orientation,
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl PlaneGrid {
    pub fn new(
        plane: Orientation,
        origin: [f64; 2],
        cell_size: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let grid = Self {
            plane,
            origin,
            cell_size,
            width,
            height,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::InvalidConfig("cell_size must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(
                "grid must have at least one cell".into(),
            ));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("grid origin must be finite".into()));
        }
        Ok(())
    }

    /// 4 m x 4 m at 5 cm: x in [-2, 2], y in [0, 4].
    pub fn default_horizontal() -> Self {
        Self {
            plane: Orientation::Horizontal,
            origin: [-2.0, 0.0],
            cell_size: 0.05,
            width: 80,
            height: 80,
        }
    }

    /// 4 m x 2.5 m at 5 cm: y in [0, 4], z in [0, 2.5].
    pub fn default_vertical() -> Self {
        Self {
            plane: Orientation::Vertical,
            origin: [0.0, 0.0],
            cell_size: 0.05,
            width: 80,
            height: 50,
        }
    }

    pub fn default_for(plane: Orientation) -> Self {
        match plane {
            Orientation::Horizontal => Self::default_horizontal(),
            Orientation::Vertical => Self::default_vertical(),
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Plane coordinates of the center of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Continuous cell coordinates of a plane point; cell `(i, j)` spans `[i, i+1)`.
    pub fn to_cells(&self, point: [f64; 2]) -> [f64; 2] {
        [
            (point[0] - self.origin[0]) / self.cell_size,
            (point[1] - self.origin[1]) / self.cell_size,
        ]
    }

    pub fn from_cells(&self, cell: [f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + cell[0] * self.cell_size,
            self.origin[1] + cell[1] * self.cell_size,
        ]
    }

    /// Plane extent `[a_min, b_min, a_max, b_max]`.
    pub fn bounds(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + self.width as f64 * self.cell_size,
            self.origin[1] + self.height as f64 * self.cell_size,
        ]
    }

    /// Lifts plane coordinates to 3D. The horizontal plane sits at the array's
    /// height; the vertical plane sits at the array's x offset.
    pub fn lift(&self, point: [f64; 2], anchor: f64) -> Vec3 {
        match self.plane {
            Orientation::Horizontal => Vec3::new(point[0], point[1], anchor),
            Orientation::Vertical => Vec3::new(anchor, point[0], point[1]),
        }
    }

    /// The out-of-plane coordinate that `array` defines for this plane.
    pub fn anchor_for(&self, array: &VirtualArray) -> f64 {
        let c = array.phase_center();
        match self.plane {
            Orientation::Horizontal => c.z,
            Orientation::Vertical => c.x,
        }
    }
}

/// Complex heatmap, values laid out frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: PlaneGrid,
    pub frames: usize,
    pub values: Vec<Complex64>,
}

/// Real-valued heatmap with the same layout as [`Heatmap`].
#[derive(Debug, Clone, PartialEq)]
pub struct RealHeatmap {
    pub grid: PlaneGrid,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(grid: PlaneGrid, frames: usize) -> Self {
        let n = grid.cells() * frames;
        Self {
            grid,
            frames,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize, t: usize) -> usize {
        (t * self.grid.height + row) * self.grid.width + col
    }

    pub fn get(&self, col: usize, row: usize, t: usize) -> Complex64 {
        self.values[self.index(col, row, t)]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let n = self.grid.cells();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Per-cell magnitude without normalization.
    pub fn magnitude(&self) -> RealHeatmap {
        RealHeatmap {
            grid: self.grid.clone(),
            frames: self.frames,
            values: self.values.iter().map(|v| v.norm()).collect(),
        }
    }
}

impl RealHeatmap {
    #[inline]
    pub fn index(&self, col: usize, row: usize, t: usize) -> usize {
        (t * self.grid.height + row) * self.grid.width + col
    }

    pub fn get(&self, col: usize, row: usize, t: usize) -> f64 {
        self.values[self.index(col, row, t)]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.values[t * n..(t + 1) * n]
    }
}

/// Coherently focuses every frame of `cube` onto each cell of `grid`:
/// `y(c, t) = sum_k sum_m s[k, m, t] * exp(j 2 pi d_m(c) / lambda_k)`.
///
/// The per-element phase ramp over `k` is generated by complex recurrence,
/// which matches direct evaluation to ~1e-13 relative for typical sweeps.
pub fn beamform_plane(cube: &RadarFrameCube, grid: &PlaneGrid) -> Result<Heatmap> {
    grid.validate()?;
    if cube.frames == 0 || cube.data.is_empty() {
        return Err(Error::EmptyCube);
    }
    if cube.array.orientation != grid.plane {
        return Err(Error::PlaneMismatch(format!(
            "{:?} array cannot resolve the {:?} plane",
            cube.array.orientation, grid.plane
        )));
    }

    let k_count = cube.num_samples();
    let m_count = cube.num_elements();
    let anchor = grid.anchor_for(&cube.array);
    let two_pi_over_c = 2.0 * std::f64::consts::PI / SPEED_OF_LIGHT;
    let f0 = cube.config.start_freq;
    let df = cube.config.frequency_step();

    let per_cell: Vec<Vec<Complex64>> = (0..grid.cells())
        .into_par_iter()
        .map(|cell| {
            let (col, row) = (cell % grid.width, cell / grid.width);
            let p = grid.lift(grid.cell_center(col, row), anchor);
            let mut steering = Vec::with_capacity(k_count * m_count);
            for element in &cube.array.element_positions {
                let d = 2.0 * (element - p).norm();
                let mut phasor = Complex64::from_polar(1.0, two_pi_over_c * d * f0);
                let step = Complex64::from_polar(1.0, two_pi_over_c * d * df);
                for _ in 0..k_count {
                    steering.push(phasor);
                    phasor *= step;
                }
            }
            (0..cube.frames)
                .map(|t| {
                    cube.frame(t)
                        .iter()
                        .zip(&steering)
                        .fold(Complex64::new(0.0, 0.0), |acc, (s, w)| acc + s * w)
                })
                .collect()
        })
        .collect();

    let mut out = Heatmap::zeros(grid.clone(), cube.frames);
    for (cell, values) in per_cell.into_iter().enumerate() {
        for (t, v) in values.into_iter().enumerate() {
            out.values[t * grid.cells() + cell] = v;
        }
    }
    Ok(out)
}

/// Frame differencing: output frame `i` is `h[i + lag] - h[i]`.
pub fn background_subtract(h: &Heatmap, lag: usize) -> Result<Heatmap> {
    if lag == 0 || lag >= h.frames {
        return Err(Error::InvalidLag {
            lag,
            frames: h.frames,
        });
    }
    let n = h.grid.cells();
    let values = (lag..h.frames)
        .flat_map(|t| {
            h.frame(t)
                .iter()
                .zip(&h.values[(t - lag) * n..(t - lag + 1) * n])
                .map(|(a, b)| a - b)
        })
        .collect();
    Ok(Heatmap {
        grid: h.grid.clone(),
        frames: h.frames - lag,
        values,
    })
}

/// Per-frame `|value| / max |value|`; all-zero frames stay zero.
pub fn magnitude_normalize(h: &Heatmap) -> RealHeatmap {
    let n = h.grid.cells();
    let mut values = Vec::with_capacity(h.values.len());
    for t in 0..h.frames {
        let mags: Vec<f64> = h.frame(t).iter().map(|v| v.norm()).collect();
        let max = mags.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            values.extend(mags.iter().map(|m| (m / max).min(1.0)));
        } else {
            values.extend(std::iter::repeat_n(0.0, n));
        }
    }
    RealHeatmap {
        grid: h.grid.clone(),
        frames: h.frames,
        values,
    }
}
