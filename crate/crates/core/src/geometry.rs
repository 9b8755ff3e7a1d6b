//! Coordinate transforms: result-plane projection, multi-view triangulation,
//! K-means person association and mask pasting.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbMask};
use crate::radar::Vec3;

/// Points at or behind this depth cannot be projected.
pub const PROJECTION_EPS: f64 = 1e-9;

/// Axis-aligned 2D box `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for Box2D {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Box2D> for [f64; 4] {
    fn from(b: Box2D) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection(&self, other: &Box2D) -> Box2D {
        Box2D::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let inter = self.intersection(other).area();
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, bounds: &Box2D) -> Box2D {
        Box2D::new(
            self.x1.clamp(bounds.x1, bounds.x2),
            self.y1.clamp(bounds.y1, bounds.y2),
            self.x2.clamp(bounds.x1, bounds.x2),
            self.y2.clamp(bounds.y1, bounds.y2),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Box2D {
        Box2D::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, s: f64) -> Box2D {
        Box2D::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }
}

/// Axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub min: Vec3,
    pub max: Vec3,
}

impl Box3D {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::InvalidConfig("box min must not exceed max".into()));
        }
        Ok(Self { min, max })
    }

    pub fn vertices(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, v) in out.iter_mut().enumerate() {
            *v = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
        }
        out
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// The virtual imaging plane `Z = r` with in-plane offsets `(p_x, p_y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPlane {
    pub r: f64,
    pub p_x: f64,
    pub p_y: f64,
    /// Pixels per meter on the plane.
    pub pixel_scale: f64,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl ResultPlane {
    pub fn new(
        r: f64,
        p_x: f64,
        p_y: f64,
        pixel_scale: f64,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let plane = Self {
            r,
            p_x,
            p_y,
            pixel_scale,
            image_size,
        };
        plane.validate()?;
        Ok(plane)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0.0 || !self.r.is_finite() {
            return Err(Error::InvalidConfig(
                "result plane r must be nonzero".into(),
            ));
        }
        if !(self.pixel_scale > 0.0) {
            return Err(Error::InvalidConfig("pixel_scale must be positive".into()));
        }
        Ok(())
    }

    /// Plane meters to pixels.
    pub fn to_pixels(&self, b: &Box2D) -> Box2D {
        b.scale(self.pixel_scale)
    }
}

/// Perspective projection onto the result plane:
/// `(x_p, y_p) = (r x / z + p_x, r y / z + p_y)`.
pub fn project_point(plane: &ResultPlane, p: &Vec3) -> Result<[f64; 2]> {
    if !(p.z > PROJECTION_EPS) {
        return Err(Error::BehindProjectionCenter(p.z));
    }
    Ok([
        plane.r * p.x / p.z + plane.p_x,
        plane.r * p.y / p.z + plane.p_y,
    ])
}

/// Axis-aligned hull of the eight projected vertices.
pub fn project_box3d(plane: &ResultPlane, b: &Box3D) -> Result<Box2D> {
    let mut out = Box2D::new(
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for v in b.vertices() {
        let [x, y] = project_point(plane, &v)?;
        out.x1 = out.x1.min(x);
        out.y1 = out.y1.min(y);
        out.x2 = out.x2.max(x);
        out.y2 = out.y2.max(y);
    }
    Ok(out)
}

/// A 3x4 homogeneous projection matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 3]", into = "[[f64; 4]; 3]")]
pub struct CameraModel {
    pub matrix: Matrix3x4<f64>,
}

impl TryFrom<[[f64; 4]; 3]> for CameraModel {
    type Error = Error;

    fn try_from(rows: [[f64; 4]; 3]) -> Result<Self> {
        Self::new(Matrix3x4::from_fn(|r, c| rows[r][c]))
    }
}

impl From<CameraModel> for [[f64; 4]; 3] {
    fn from(cam: CameraModel) -> Self {
        let mut out = [[0.0; 4]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = cam.matrix[(r, c)];
            }
        }
        out
    }
}

impl CameraModel {
    pub fn new(matrix: Matrix3x4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("camera matrix must be finite".into()));
        }
        let block: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let scale = block.norm().max(f64::MIN_POSITIVE);
        if block.determinant().abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::InvalidConfig(
                "camera 3x3 block must be nonsingular".into(),
            ));
        }
        Ok(Self { matrix })
    }

    /// Builds `K [R | t]`.
    pub fn from_parts(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(intrinsics * rt)
    }

    /// Homogeneous projection followed by dehomogenization.
    pub fn project(&self, p: &Vec3) -> Result<[f64; 2]> {
        let h = self.matrix * Vector4::new(p.x, p.y, p.z, 1.0);
        if h.z.abs() <= PROJECTION_EPS {
            return Err(Error::BehindProjectionCenter(h.z));
        }
        Ok([h.x / h.z, h.y / h.z])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint2D {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub joint: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint3D {
    pub position: Vec3,
    #[serde(default)]
    pub joint: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationOptions {
    pub refine: bool,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            refine: true,
            max_iterations: 10,
            step_tolerance: 1e-10,
        }
    }
}

/// Triangulates one keypoint seen by several cameras, minimizing the summed
/// squared reprojection error (DLT start, Gauss-Newton polish).
pub fn triangulate(observations: &[(CameraModel, Keypoint2D)]) -> Result<Keypoint3D> {
    triangulate_with(observations, TriangulationOptions::default())
}

pub fn triangulate_with(
    observations: &[(CameraModel, Keypoint2D)],
    options: TriangulationOptions,
) -> Result<Keypoint3D> {
    if observations.len() < 2 {
        return Err(Error::NotEnoughViews(observations.len()));
    }
    let mut point = triangulate_dlt(observations)?;
    if options.refine {
        point = refine_reprojection(observations, point, &options);
    }
    let first = &observations[0].1;
    Ok(Keypoint3D {
        position: point,
        joint: first.joint,
        person: first.person,
    })
}

fn triangulate_dlt(observations: &[(CameraModel, Keypoint2D)]) -> Result<Vec3> {
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (cam, kp)) in observations.iter().enumerate() {
        let m = &cam.matrix;
        let rows = [m.row(2) * kp.x - m.row(0), m.row(2) * kp.y - m.row(1)];
        for (j, row) in rows.iter().enumerate() {
            let norm = row.norm();
            let row = if norm > 0.0 { row / norm } else { *row };
            a.row_mut(2 * i + j).copy_from(&row);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::RankDeficient)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[order.len() - 2]];
    if largest <= 0.0 || second_smallest <= 1e-9 * largest {
        return Err(Error::RankDeficient);
    }
    let null = v_t.row(order[order.len() - 1]);
    let w = null[3];
    if w.abs() <= f64::EPSILON * null.norm() {
        return Err(Error::RankDeficient);
    }
    Ok(Vec3::new(null[0] / w, null[1] / w, null[2] / w))
}

/// Sum of squared reprojection residuals; `None` if any view sees the point
/// at its projection center.
pub fn reprojection_cost(observations: &[(CameraModel, Keypoint2D)], p: &Vec3) -> Option<f64> {
    observations.iter().try_fold(0.0, |acc, (cam, kp)| {
        let [u, v] = cam.project(p).ok()?;
        Some(acc + (u - kp.x).powi(2) + (v - kp.y).powi(2))
    })
}

fn refine_reprojection(
    observations: &[(CameraModel, Keypoint2D)],
    start: Vec3,
    options: &TriangulationOptions,
) -> Vec3 {
    let mut point = start;
    let Some(mut cost) = reprojection_cost(observations, &point) else {
        return point;
    };
    for _ in 0..options.max_iterations {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (cam, kp) in observations {
            let m = &cam.matrix;
            let h = m * Vector4::new(point.x, point.y, point.z, 1.0);
            let (u, v) = (h.x / h.z, h.y / h.z);
            let row2 = m.fixed_view::<1, 3>(2, 0);
            let ju = (m.fixed_view::<1, 3>(0, 0) - row2 * u) / h.z;
            let jv = (m.fixed_view::<1, 3>(1, 0) - row2 * v) / h.z;
            jtj += ju.transpose() * ju + jv.transpose() * jv;
            jtr += ju.transpose() * (u - kp.x) + jv.transpose() * (v - kp.y);
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        let candidate = point + step;
        match reprojection_cost(observations, &candidate) {
            Some(c) if c <= cost => {
                point = candidate;
                cost = c;
            }
            _ => break,
        }
        if step.norm() < options.step_tolerance {
            break;
        }
    }
    point
}

/// Result of [`cluster_keypoints`].
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec3>,
    /// Inertia after every assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

pub const KMEANS_MAX_ITERATIONS: usize = 100;

/// Lloyd's K-means with farthest-point seeding from a seeded first pick.
pub fn cluster_keypoints(points: &[Vec3], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "cluster count must be at least 1".into(),
        ));
    }
    if k > points.len() {
        return Err(Error::TooFewPoints {
            clusters: k,
            points: points.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| (p - centroids[0]).norm_squared())
        .collect();
    while centroids.len() < k {
        let far = nearest
            .iter()
            .enumerate()
            .fold(0, |best, (i, d)| if *d > nearest[best] { i } else { best });
        let c = points[far];
        centroids.push(c);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min((p - c).norm_squared());
        }
    }

    let assign = |centroids: &[Vec3]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let labels = points
            .iter()
            .map(|p| {
                let (best, d) = centroids
                    .iter()
                    .map(|c| (p - c).norm_squared())
                    .enumerate()
                    .fold(
                        (0, f64::INFINITY),
                        |a, (i, d)| if d < a.1 { (i, d) } else { a },
                    );
                inertia += d;
                best
            })
            .collect();
        (labels, inertia)
    };

    let (mut labels, inertia) = assign(&centroids);
    let mut history = vec![inertia];
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for ((c, s), n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if *n > 0 {
                *c = s / *n as f64;
            }
        }
        let (next, inertia) = assign(&centroids);
        debug_assert!(inertia <= history[history.len() - 1] * (1.0 + 1e-12) + 1e-300);
        history.push(inertia);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(Clustering {
        labels,
        centroids,
        inertia_history: history,
    })
}

/// Pastes an `m x m` probability mask into `box` (pixel coordinates) on a
/// fresh `width x height` canvas. See [`paste_mask_into`].
pub fn paste_mask(mask: &ProbMask, b: &Box2D, width: usize, height: usize) -> Result<BinaryMask> {
    let mut canvas = BinaryMask::new(width, height);
    paste_mask_into(mask, b, &mut canvas)?;
    Ok(canvas)
}

/// Bilinearly resizes `mask` to the box extent, thresholds at 0.5 and ORs the
/// result into `canvas`. A pixel belongs to the box when its center does;
/// pixels off the canvas are dropped.
pub fn paste_mask_into(mask: &ProbMask, b: &Box2D, canvas: &mut BinaryMask) -> Result<()> {
    if !(b.x2 > b.x1 && b.y2 > b.y1) || !b.x1.is_finite() || !b.y2.is_finite() {
        return Err(Error::EmptyBox);
    }
    let bounds = Box2D::new(0.0, 0.0, canvas.width as f64, canvas.height as f64);
    if b.intersection(&bounds).area() <= 0.0 {
        return Err(Error::BoxOutsideCanvas);
    }
    let col_range = pixel_span(b.x1, b.x2, canvas.width);
    let row_range = pixel_span(b.y1, b.y2, canvas.height);
    let (bw, bh) = (b.x2 - b.x1, b.y2 - b.y1);
    for py in row_range {
        let v = ((py as f64 + 0.5 - b.y1) / bh) * mask.height as f64 - 0.5;
        for px in col_range.clone() {
            let u = ((px as f64 + 0.5 - b.x1) / bw) * mask.width as f64 - 0.5;
            if mask.sample(u, v) >= 0.5 {
                canvas.set(px, py, true);
            }
        }
    }
    Ok(())
}

/// Pixels whose centers lie in `[lo, hi)`, clipped to `0..len`.
fn pixel_span(lo: f64, hi: f64, len: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().max(0.0);
    let start = (start as usize).min(len);
    let end = (end as usize).min(len);
    start..end.max(start)
}
