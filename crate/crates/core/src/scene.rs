//! Ground-truth track synthesis from an object point cloud and a trajectory.
//!
//! Each object point is rendered as a small oriented disk (surfel) into a
//! per-frame depth buffer. Visibility of a point in a frame combines an
//! in-image test, a relative projected-depth test against the buffer, and a
//! reference -> frame -> reference cycle projection through both buffers.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{back_project, project, CameraIntrinsics, Pixel, Point3, Pose, Vec3};
use crate::rng::{self, Rng};
use crate::tracks::TrackSet;
use crate::trajgen::Trajectory;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("need {needed} frames, only {available} available")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Ellipsoid,
    BoxCloud,
    Imported,
}

/// Oriented point cloud in the object (world) frame.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    points: Vec<Point3>,
    normals: Vec<Vec3>,
    shape_kind: ShapeKind,
    /// Surfel disk radius per point (m), derived from nearest-neighbour spacing.
    surfel_radius: Vec<f64>,
}

const SURFEL_SPACING_FACTOR: f64 = 0.8;

fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

impl ObjectModel {
    pub fn new(points: Vec<Point3>, normals: Vec<Vec3>, shape_kind: ShapeKind) -> Result<Self, SceneError> {
        if points.len() < 8 {
            return Err(SceneError::InvalidModel(format!("need at least 8 points, got {}", points.len())));
        }
        if normals.len() != points.len() {
            return Err(SceneError::InvalidModel("one normal per point required".into()));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-9) {
            return Err(SceneError::InvalidModel(format!("normal {i} is not unit length")));
        }
        if points.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(SceneError::InvalidModel("non-finite point".into()));
        }
        let surfel_radius = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let nn = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| (p - q).norm())
                    .fold(f64::INFINITY, f64::min);
                SURFEL_SPACING_FACTOR * nn
            })
            .collect();
        Ok(Self { points, normals, shape_kind, surfel_radius })
    }

    /// Evenly spread points on a sphere (Fibonacci lattice).
    pub fn sphere(n: usize, radius: f64) -> Result<Self, SceneError> {
        let dirs = fibonacci_directions(n);
        let points = dirs.iter().map(|d| Point3::from(d * radius)).collect();
        Self::new(points, dirs, ShapeKind::Sphere)
    }

    pub fn ellipsoid(n: usize, semi_axes: Vec3) -> Result<Self, SceneError> {
        let dirs = fibonacci_directions(n);
        let points: Vec<Point3> = dirs.iter().map(|d| Point3::from(d.component_mul(&semi_axes))).collect();
        let inv_sq = semi_axes.map(|a| 1.0 / (a * a));
        let normals = points.iter().map(|p| p.coords.component_mul(&inv_sq).normalize()).collect();
        Self::new(points, normals, ShapeKind::Ellipsoid)
    }

    /// Points spread over the six faces of an axis-aligned box.
    pub fn box_cloud(n: usize, half_extents: Vec3) -> Result<Self, SceneError> {
        let per_face = n.div_ceil(6).max(2);
        let side = (per_face as f64).sqrt().ceil() as usize;
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for a in 0..side {
                    for b in 0..side {
                        let mut p = Vec3::zeros();
                        p[axis] = sign * half_extents[axis];
                        p[u] = half_extents[u] * (2.0 * (a as f64 + 0.5) / side as f64 - 1.0);
                        p[v] = half_extents[v] * (2.0 * (b as f64 + 0.5) / side as f64 - 1.0);
                        let mut nrm = Vec3::zeros();
                        nrm[axis] = sign;
                        points.push(Point3::from(p));
                        normals.push(nrm);
                    }
                }
            }
        }
        Self::new(points, normals, ShapeKind::BoxCloud)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn shape_kind(&self) -> ShapeKind {
        self.shape_kind
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Uniformly rescaled copy.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| Point3::from(p.coords * s)).collect(),
            normals: self.normals.clone(),
            shape_kind: self.shape_kind,
            surfel_radius: self.surfel_radius.iter().map(|r| r * s).collect(),
        }
    }
}

/// Binary object mask with its 4-connected boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    pub width: u32,
    pub height: u32,
    occupancy: Vec<bool>,
    boundary: Vec<(u32, u32)>,
}

impl MaskRaster {
    pub fn from_occupancy(width: u32, height: u32, occupancy: Vec<bool>) -> Self {
        assert_eq!(occupancy.len(), (width * height) as usize, "occupancy size");
        let mut m = Self { width, height, occupancy, boundary: Vec::new() };
        m.recompute_boundary();
        m
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self::from_occupancy(width, height, vec![false; (width * height) as usize])
    }

    /// Solid axis-aligned rectangle `[x0, x0+w) x [y0, y0+h)`.
    pub fn rectangle(width: u32, height: u32, x0: u32, y0: u32, w: u32, h: u32) -> Self {
        let mut occ = vec![false; (width * height) as usize];
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                occ[(y * width + x) as usize] = true;
            }
        }
        Self::from_occupancy(width, height, occ)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.occupancy[(y * self.width + x) as usize]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn boundary(&self) -> &[(u32, u32)] {
        &self.boundary
    }

    pub fn area(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.occupancy.iter().any(|&o| o)
    }

    /// `sqrt(area)`, the mask size used for occlusion radii.
    pub fn size(&self) -> f64 {
        (self.area() as f64).sqrt()
    }

    /// Inclusive pixel bounding box `(x_min, y_min, x_max, y_max)`.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }

    fn recompute_boundary(&mut self) {
        let mut boundary = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if edge {
                    boundary.push((x, y));
                }
            }
        }
        self.boundary = boundary;
    }

    /// Dilation or erosion with a `(2r+1)²` square, done as a row pass then
    /// a column pass with running counts. Pixels outside the image count as
    /// empty, so both results vanish outside the occupied bounding box grown
    /// by `radius`; only that box is processed.
    fn morph(&self, radius: i64, dilate: bool) -> Vec<bool> {
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        let full = 2 * r + 1;
        let mut out = vec![false; self.occupancy.len()];
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for (i, _) in self.occupancy.iter().enumerate().filter(|(_, &v)| v) {
            let (x, y) = (i % w, i / w);
            (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
        }
        if x0 == usize::MAX {
            return out;
        }
        let (x0, x1) = (x0.saturating_sub(r), (x1 + r).min(w - 1));
        let (y0, y1) = (y0.saturating_sub(r), (y1 + r).min(h - 1));
        let window = |count: usize| if dilate { count > 0 } else { count == full };
        let mut rows = vec![false; self.occupancy.len()];
        let mut prefix = vec![0usize; w.max(h) + 1];
        for y in y0..=y1 {
            let line = &self.occupancy[y * w..(y + 1) * w];
            for x in 0..w {
                prefix[x + 1] = prefix[x] + line[x] as usize;
            }
            for x in x0..=x1 {
                rows[y * w + x] = window(prefix[(x + r + 1).min(w)] - prefix[x.saturating_sub(r)]);
            }
        }
        for x in x0..=x1 {
            for y in 0..h {
                prefix[y + 1] = prefix[y] + rows[y * w + x] as usize;
            }
            for y in y0..=y1 {
                out[y * w + x] = window(prefix[(y + r + 1).min(h)] - prefix[y.saturating_sub(r)]);
            }
        }
        out
    }

    /// Morphological closing with a square structuring element of side `size`.
    pub fn closed(&self, size: u32) -> Self {
        let r = (size / 2) as i64;
        if r == 0 {
            return self.clone();
        }
        let dilated = Self { occupancy: self.morph(r, true), ..self.clone() };
        let occ = dilated.morph(r, false);
        // Closing never removes original pixels (border erosion included).
        let occ = occ.iter().zip(&self.occupancy).map(|(&a, &b)| a || b).collect();
        Self::from_occupancy(self.width, self.height, occ)
    }
}

/// An oriented disk in camera coordinates with its image footprint.
#[derive(Debug, Clone, Copy)]
struct Surfel {
    center: Vec3,
    normal: Vec3,
    radius: f64,
    /// Projected center and footprint radius (px); `None` behind the camera.
    footprint: Option<(Pixel, f64)>,
}

impl Surfel {
    /// Depth at which the ray through pixel `px` meets this surfel.
    fn depth_at(&self, px: &Pixel, k: &CameraIntrinsics, splat_radius_px: f64) -> Option<f64> {
        let (c_px, _) = self.footprint?;
        let ray = k.normalize(px);
        match plane_depth(&ray, &self.center, &self.normal) {
            Some(d) if (ray * d - self.center).norm() <= self.radius => Some(d),
            _ if (px - c_px).norm() <= splat_radius_px => Some(self.center.z),
            _ => None,
        }
    }
}

const GRID_CELL_PX: f64 = 16.0;

/// Per-frame depth buffer of rendered surfels.
#[derive(Debug, Clone)]
pub struct DepthBuffer {
    pub width: u32,
    pub height: u32,
    depth: Vec<f64>,
    owner: Vec<u32>,
    surfels: Vec<Surfel>,
    /// Surfel indices per `GRID_CELL_PX` image cell, for footprint queries.
    cells: Vec<Vec<u32>>,
    cols: usize,
    splat_radius_px: f64,
    depth_band: f64,
}

const NO_OWNER: u32 = u32::MAX;

impl DepthBuffer {
    fn pixel_index(&self, px: &Pixel) -> Option<usize> {
        if !(px.x >= 0.0 && px.y >= 0.0) {
            return None;
        }
        let (x, y) = (px.x.floor() as u64, px.y.floor() as u64);
        (x < self.width as u64 && y < self.height as u64).then(|| (y * self.width as u64 + x) as usize)
    }

    fn cell_of(&self, px: &Pixel) -> usize {
        (px.y / GRID_CELL_PX) as usize * self.cols + (px.x / GRID_CELL_PX) as usize
    }

    /// Nearest depth stored at the pixel containing `px`.
    pub fn pixel_depth(&self, px: &Pixel) -> Option<f64> {
        self.pixel_index(px).map(|i| self.depth[i]).filter(|d| d.is_finite())
    }

    /// Point index owning the pixel containing `px`.
    pub fn owner(&self, px: &Pixel) -> Option<usize> {
        self.pixel_index(px).map(|i| self.owner[i]).filter(|&o| o != NO_OWNER).map(|o| o as usize)
    }

    /// Depth of the visible surface along the ray through `px`.
    ///
    /// Among surfels whose footprint covers `px` and whose depth lies within
    /// the relative depth band of the nearest one, the surfel with the
    /// closest projected center is used; a point that is itself visible at its
    /// own projection therefore reproduces its exact depth.
    pub fn surface_depth(&self, px: &Pixel, k: &CameraIntrinsics) -> Option<f64> {
        self.pixel_index(px)?;
        let hits: Vec<(f64, f64)> = self.cells[self.cell_of(px)]
            .iter()
            .filter_map(|&s| {
                let surfel = &self.surfels[s as usize];
                let d = surfel.depth_at(px, k, self.splat_radius_px)?;
                Some((d, (px - surfel.footprint?.0).norm()))
            })
            .collect();
        let d_min = hits.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
        hits.iter().filter(|h| h.0 <= d_min * (1.0 + self.depth_band)).min_by(|a, b| a.1.total_cmp(&b.1)).map(|h| h.0)
    }

    pub fn occupied(&self) -> impl Iterator<Item = bool> + '_ {
        self.owner.iter().map(|&o| o != NO_OWNER)
    }
}

/// Depth at which the ray `ray` (z = 1) meets the plane through `center` with
/// `normal`. `None` for grazing or backward intersections.
fn plane_depth(ray: &Vec3, center: &Vec3, normal: &Vec3) -> Option<f64> {
    let denom = normal.dot(ray);
    if denom.abs() < 0.05 * ray.norm() {
        return None;
    }
    let lambda = normal.dot(center) / denom;
    (lambda > 0.0).then_some(lambda)
}

/// Thresholds for rendering and co-visibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Relative projected-depth tolerance.
    pub tau_depth: f64,
    /// Cycle projection tolerance (px).
    pub tau_cycle: f64,
    /// Minimum splat radius (px).
    pub splat_radius_px: f64,
    /// Side of the square closing element (px).
    pub closing_px: u32,
    /// Skip surfels facing away from the camera (closed, outward-oriented models).
    pub cull_backfaces: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { tau_depth: 0.02, tau_cycle: 1.5, splat_radius_px: 2.0, closing_px: 3, cull_backfaces: true }
    }
}

/// Renders the model into a depth buffer for one pose.
pub fn render_depth(model: &ObjectModel, pose: &Pose, k: &CameraIntrinsics, cfg: &SynthConfig) -> DepthBuffer {
    let surfels: Vec<Surfel> = model
        .points
        .iter()
        .zip(&model.normals)
        .zip(&model.surfel_radius)
        .map(|((p, n), &radius)| {
            let center = pose.transform(&p.coords);
            let normal = pose.rotation() * n;
            let culled = cfg.cull_backfaces && normal.dot(&center) >= 0.0;
            let footprint = k
                .project_camera(&center)
                .ok()
                .filter(|_| !culled)
                .map(|(px, depth)| (px, (k.fx.max(k.fy) * radius / depth).max(cfg.splat_radius_px)));
            Surfel { center, normal, radius, footprint }
        })
        .collect();
    let n = (k.width * k.height) as usize;
    let cols = (k.width as f64 / GRID_CELL_PX).ceil() as usize;
    let rows = (k.height as f64 / GRID_CELL_PX).ceil() as usize;
    let mut buf = DepthBuffer {
        width: k.width,
        height: k.height,
        depth: vec![f64::INFINITY; n],
        owner: vec![NO_OWNER; n],
        surfels,
        cells: vec![Vec::new(); cols * rows],
        cols,
        splat_radius_px: cfg.splat_radius_px,
        depth_band: cfg.tau_depth,
    };
    let (w, h) = (k.width as i64, k.height as i64);
    for idx in 0..buf.surfels.len() {
        let surfel = buf.surfels[idx];
        let Some((px, r_px)) = surfel.footprint else { continue };
        let (x0, x1) = ((px.x - r_px).floor() as i64, (px.x + r_px).ceil() as i64);
        let (y0, y1) = ((px.y - r_px).floor() as i64, (px.y + r_px).ceil() as i64);
        if x1 < 0 || y1 < 0 || x0 >= w || y0 >= h {
            continue;
        }
        let (x0, x1, y0, y1) = (x0.max(0), x1.min(w - 1), y0.max(0), y1.min(h - 1));
        let cell = |v: i64| (v as f64 / GRID_CELL_PX) as usize;
        for cy in cell(y0)..=cell(y1) {
            for cx in cell(x0)..=cell(x1) {
                buf.cells[cy * cols + cx].push(idx as u32);
            }
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let pc = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
                let Some(d) = surfel.depth_at(&pc, k, cfg.splat_radius_px) else { continue };
                let i = (y * w + x) as usize;
                if d < buf.depth[i] {
                    buf.depth[i] = d;
                    buf.owner[i] = idx as u32;
                }
            }
        }
    }
    buf
}

/// Object mask: occupied buffer pixels, morphologically closed.
pub fn mask_from_depth(buf: &DepthBuffer, closing_px: u32) -> MaskRaster {
    MaskRaster::from_occupancy(buf.width, buf.height, buf.occupied().collect()).closed(closing_px)
}

/// Co-visibility of world points over a window.
///
/// The cycle test for a point starts from its reference frame: frame 0 when
/// the point passes the image and depth tests there, otherwise the first frame
/// where it does (a point hidden in frame 0 has no meaningful frame-0 cycle).
/// Returns a frame-major `T x N` visibility vector.
pub fn compute_covisibility(
    points: &[Point3],
    poses: &[Pose],
    buffers: &[DepthBuffer],
    k: &CameraIntrinsics,
    cfg: &SynthConfig,
) -> Vec<bool> {
    let n = points.len();
    let mut candidate = vec![false; poses.len() * n];
    for (t, (pose, buf)) in poses.iter().zip(buffers).enumerate() {
        for (i, x) in points.iter().enumerate() {
            let Ok(proj) = project(x, pose, k) else { continue };
            if !k.contains(&proj.pixel) {
                continue;
            }
            let Some(surface) = buf.surface_depth(&proj.pixel, k) else { continue };
            candidate[t * n + i] = (proj.depth - surface).abs() / surface < cfg.tau_depth;
        }
    }
    let mut vis = vec![false; poses.len() * n];
    for (i, x) in points.iter().enumerate() {
        let Some(r) = (0..poses.len()).find(|&t| candidate[t * n + i]) else { continue };
        for t in r..poses.len() {
            if candidate[t * n + i] {
                let err = cycle_error(x, &poses[r], &buffers[r], &poses[t], &buffers[t], k);
                vis[t * n + i] = err.is_some_and(|e| e < cfg.tau_cycle);
            }
        }
    }
    vis
}

/// Reference -> target -> reference reprojection error (px) of the reference
/// pixel of `x`, lifting through each frame's depth buffer.
pub fn cycle_error(
    x: &Point3,
    ref_pose: &Pose,
    ref_buf: &DepthBuffer,
    pose: &Pose,
    buf: &DepthBuffer,
    k: &CameraIntrinsics,
) -> Option<f64> {
    let p_ref = project(x, ref_pose, k).ok()?.pixel;
    let d_ref = ref_buf.surface_depth(&p_ref, k)?;
    let lifted = back_project(&p_ref, d_ref, ref_pose, k);
    let q = project(&lifted, pose, k).ok()?.pixel;
    let d_t = buf.surface_depth(&q, k)?;
    let back = back_project(&q, d_t, pose, k);
    let p_cycle = project(&back, ref_pose, k).ok()?.pixel;
    Some((p_cycle - p_ref).norm())
}

/// Ground truth for one window.
#[derive(Debug, Clone)]
pub struct SynthWindow {
    pub tracks: TrackSet,
    /// Tracked world points, aligned with `tracks.point_ids()` order.
    pub points: Vec<Point3>,
    pub masks: Vec<MaskRaster>,
    pub depth: Vec<DepthBuffer>,
}

fn project_tracks(points: &[Point3], traj: &Trajectory, k: &CameraIntrinsics) -> Vec<Pixel> {
    traj.poses()
        .iter()
        .flat_map(|pose| {
            points.iter().map(move |x| match project(x, pose, k) {
                Ok(p) => p.pixel,
                Err(_) => Pixel::new(f64::NAN, f64::NAN),
            })
        })
        .collect()
}

fn render_window(
    model: &ObjectModel,
    traj: &Trajectory,
    k: &CameraIntrinsics,
    cfg: &SynthConfig,
) -> (Vec<DepthBuffer>, Vec<MaskRaster>) {
    let depth: Vec<DepthBuffer> = traj.poses().iter().map(|p| render_depth(model, p, k, cfg)).collect();
    let masks = depth.iter().map(|b| mask_from_depth(b, cfg.closing_px)).collect();
    (depth, masks)
}

fn assemble(
    points: Vec<Point3>,
    ids: Vec<u32>,
    traj: &Trajectory,
    k: &CameraIntrinsics,
    cfg: &SynthConfig,
    depth: Vec<DepthBuffer>,
    masks: Vec<MaskRaster>,
) -> Result<SynthWindow, SceneError> {
    let positions = project_tracks(&points, traj, k);
    let visibility = compute_covisibility(&points, traj.poses(), &depth, k, cfg);
    let tracks = TrackSet::new(traj.len(), ids, positions, visibility)
        .map_err(|e| SceneError::InvalidArgument(e.to_string()))?;
    Ok(SynthWindow { tracks, points, masks, depth })
}

/// Tracks every model point through the window.
pub fn synthesize_window(
    model: &ObjectModel,
    traj: &Trajectory,
    k: &CameraIntrinsics,
    cfg: &SynthConfig,
) -> Result<SynthWindow, SceneError> {
    if traj.len() < 2 {
        return Err(SceneError::InsufficientFrames { needed: 2, available: traj.len() });
    }
    let ref_pose = &traj.poses()[0];
    let any_in_ref =
        model.points.iter().any(|x| project(x, ref_pose, k).map(|p| k.contains(&p.pixel)).unwrap_or(false));
    if !any_in_ref {
        return Err(SceneError::EmptyMask);
    }
    let (depth, masks) = render_window(model, traj, k, cfg);
    let ids = (0..model.len() as u32).collect();
    assemble(model.points.clone(), ids, traj, k, cfg, depth, masks)
}

/// Samples keypoints on the reference mask lattice, lifts them to 3D through
/// the reference depth buffer, and tracks the lifted points.
pub fn synthesize_grid_window(
    model: &ObjectModel,
    traj: &Trajectory,
    k: &CameraIntrinsics,
    cfg: &SynthConfig,
    grid: u32,
    cap: usize,
    seed: u64,
) -> Result<SynthWindow, SceneError> {
    if traj.len() < 2 {
        return Err(SceneError::InsufficientFrames { needed: 2, available: traj.len() });
    }
    let (depth, masks) = render_window(model, traj, k, cfg);
    let mut rng = rng::seeded(seed, rng::stream::GRID);
    let samples = grid_sample_mask(&masks[0], grid, cap, &mut rng)?;
    let ref_pose = &traj.poses()[0];
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (id, &(x, y)) in samples.iter().enumerate() {
        let px = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
        // Closing can add mask pixels without rendered depth.
        if let Some(d) = depth[0].surface_depth(&px, k) {
            points.push(back_project(&px, d, ref_pose, k));
            ids.push(id as u32);
        }
    }
    if points.is_empty() {
        return Err(SceneError::EmptyMask);
    }
    assemble(points, ids, traj, k, cfg, depth, masks)
}

/// A perturbed circular occluder: a 32-gon whose vertex radii carry Gaussian
/// noise with sigma `0.1 * radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionDisk {
    pub center: Pixel,
    pub radius: f64,
    pub vertices: Vec<Pixel>,
}

pub const DISK_VERTICES: usize = 32;
pub const DISK_RADIUS_RANGE: (f64, f64) = (0.1, 0.5);

impl OcclusionDisk {
    pub fn circle(center: Pixel, radius: f64) -> Self {
        let vertices = (0..DISK_VERTICES)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / DISK_VERTICES as f64;
                center + Pixel::new(a.cos(), a.sin()) * radius
            })
            .collect();
        Self { center, radius, vertices }
    }

    pub fn perturbed(center: Pixel, radius: f64, rng: &mut Rng) -> Self {
        let noise = Normal::new(0.0, 0.1 * radius).expect("non-negative sigma");
        let vertices = (0..DISK_VERTICES)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / DISK_VERTICES as f64;
                let r = (radius + noise.sample(rng)).max(0.0);
                center + Pixel::new(a.cos(), a.sin()) * r
            })
            .collect();
        Self { center, radius, vertices }
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: &Pixel) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[j]);
            if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn extent(&self) -> f64 {
        self.vertices.iter().map(|v| (v - self.center).norm()).fold(0.0, f64::max)
    }
}

/// Draws `num_disks` occluders centered on random boundary pixels of `mask`,
/// with radii `U(0.1, 0.5) * mask.size()`.
pub fn sample_occlusion_disks(
    mask: &MaskRaster,
    num_disks: usize,
    rng: &mut Rng,
) -> Result<Vec<OcclusionDisk>, SceneError> {
    if num_disks == 0 {
        return Ok(Vec::new());
    }
    if mask.boundary().is_empty() {
        return Err(SceneError::EmptyMask);
    }
    let size = mask.size();
    Ok((0..num_disks)
        .map(|_| {
            let (x, y) = mask.boundary()[rng.random_range(0..mask.boundary().len())];
            let radius = rng.random_range(DISK_RADIUS_RANGE.0..=DISK_RADIUS_RANGE.1) * size;
            OcclusionDisk::perturbed(Pixel::new(x as f64 + 0.5, y as f64 + 0.5), radius, rng)
        })
        .collect())
}

/// Clears mask pixels inside the disks and hides the frame's observations that
/// fall inside them. Never makes an observation visible.
pub fn apply_disks(
    mask: &MaskRaster,
    tracks: &TrackSet,
    frame: usize,
    disks: &[OcclusionDisk],
) -> (MaskRaster, TrackSet) {
    if disks.is_empty() {
        return (mask.clone(), tracks.clone());
    }
    let mut occ = mask.occupancy().to_vec();
    for d in disks {
        let e = d.extent();
        let x0 = (d.center.x - e).floor().max(0.0) as u32;
        let y0 = (d.center.y - e).floor().max(0.0) as u32;
        let x1 = ((d.center.x + e).ceil().max(0.0) as u32).min(mask.width.saturating_sub(1));
        let y1 = ((d.center.y + e).ceil().max(0.0) as u32).min(mask.height.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if d.contains(&Pixel::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    occ[(y * mask.width + x) as usize] = false;
                }
            }
        }
    }
    let mut out = tracks.clone();
    for i in 0..tracks.num_points() {
        if tracks.visible(frame, i) {
            let p = tracks.position(frame, i);
            if disks.iter().any(|d| d.contains(&p)) {
                out.set_visible(frame, i, false);
            }
        }
    }
    (MaskRaster::from_occupancy(mask.width, mask.height, occ), out)
}

/// Random occlusion of one frame.
pub fn apply_occlusion_disks(
    mask: &MaskRaster,
    tracks: &TrackSet,
    frame: usize,
    num_disks: usize,
    rng: &mut Rng,
) -> Result<(MaskRaster, TrackSet), SceneError> {
    if num_disks > 0 && mask.is_empty() {
        return Err(SceneError::EmptyMask);
    }
    let disks = sample_occlusion_disks(mask, num_disks, rng)?;
    Ok(apply_disks(mask, tracks, frame, &disks))
}

/// Occludes each frame independently with probability `p_occlude`.
pub fn occlude_window(
    masks: &[MaskRaster],
    tracks: &TrackSet,
    p_occlude: f64,
    num_disks: usize,
    seed: u64,
) -> Result<(Vec<MaskRaster>, TrackSet), SceneError> {
    let mut rng = rng::seeded(seed, rng::stream::OCCLUSION);
    let mut tracks = tracks.clone();
    let mut out = Vec::with_capacity(masks.len());
    for (t, mask) in masks.iter().enumerate() {
        let hit = rng.random_bool(p_occlude.clamp(0.0, 1.0));
        if hit && !mask.is_empty() {
            let (m, tr) = apply_occlusion_disks(mask, &tracks, t, num_disks, &mut rng)?;
            out.push(m);
            tracks = tr;
        } else {
            out.push(mask.clone());
        }
    }
    Ok((out, tracks))
}

/// Picks `n` strictly increasing indices from `0..total` with consecutive gaps
/// in `1..=k_max`, uniformly among all valid choices.
pub fn subsample_frames(total: usize, n: usize, k_max: usize, rng: &mut Rng) -> Result<Vec<usize>, SceneError> {
    if n == 0 || k_max == 0 {
        return Err(SceneError::InvalidArgument("n and k_max must be positive".into()));
    }
    if total < n {
        return Err(SceneError::InsufficientFrames { needed: n, available: total });
    }
    // ways[m][i]: number of valid ways to place m more indices after index i.
    let mut ways = vec![vec![0f64; total]; n];
    ways[0].iter_mut().for_each(|w| *w = 1.0);
    for m in 1..n {
        for i in 0..total {
            ways[m][i] = (1..=k_max).filter(|g| i + g < total).map(|g| ways[m - 1][i + g]).sum();
        }
    }
    let pick = |weights: &[(usize, f64)], rng: &mut Rng| -> usize {
        let total_w: f64 = weights.iter().map(|w| w.1).sum();
        let mut u = rng.random::<f64>() * total_w;
        for &(i, w) in weights {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rev().find(|w| w.1 > 0.0).expect("a valid choice exists").0
    };
    let starts: Vec<(usize, f64)> = (0..total).map(|i| (i, ways[n - 1][i])).collect();
    let mut out = vec![pick(&starts, rng)];
    for m in (0..n - 1).rev() {
        let last = *out.last().unwrap();
        let next: Vec<(usize, f64)> =
            (1..=k_max).filter(|g| last + g < total).map(|g| (last + g, ways[m][last + g])).collect();
        out.push(pick(&next, rng));
    }
    Ok(out)
}

/// Lattice points with spacing `grid` inside the mask, randomly capped to `cap`
/// (raster order preserved).
pub fn grid_sample_mask(
    mask: &MaskRaster,
    grid: u32,
    cap: usize,
    rng: &mut Rng,
) -> Result<Vec<(u32, u32)>, SceneError> {
    if grid == 0 {
        return Err(SceneError::InvalidArgument("grid must be positive".into()));
    }
    if mask.is_empty() {
        return Err(SceneError::EmptyMask);
    }
    let mut hits = Vec::new();
    for y in (0..mask.height).step_by(grid as usize) {
        for x in (0..mask.width).step_by(grid as usize) {
            if mask.get(x, y) {
                hits.push((x, y));
            }
        }
    }
    if hits.len() > cap {
        let mut keep = index::sample(rng, hits.len(), cap).into_vec();
        keep.sort_unstable();
        hits = keep.into_iter().map(|i| hits[i]).collect();
    }
    Ok(hits)
}

pub const CROP_SIZE: u32 = 512;

/// 2x3 affine from image pixels to crop pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub matrix: [[f64; 3]; 2],
    pub output_size: (u32, u32),
}

impl CropTransform {
    pub fn apply(&self, p: &Pixel) -> Pixel {
        let m = &self.matrix;
        Pixel::new(m[0][0] * p.x + m[0][1] * p.y + m[0][2], m[1][0] * p.x + m[1][1] * p.y + m[1][2])
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    /// Inverse affine mapping crop pixels back to the image.
    pub fn inverse(&self) -> Self {
        let m = &self.matrix;
        let det = self.determinant();
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let tx = -(a * m[0][2] + b * m[1][2]);
        let ty = -(c * m[0][2] + d * m[1][2]);
        Self { matrix: [[a, b, tx], [c, d, ty]], output_size: self.output_size }
    }
}

/// Square crop centered on the mask with random shift (px) and scale jitter.
pub fn make_crop(
    mask: &MaskRaster,
    jitter_shift: f64,
    jitter_scale: f64,
    rng: &mut Rng,
) -> Result<CropTransform, SceneError> {
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(SceneError::EmptyMask)?;
    let (x0, y0, x1, y1) = (x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0);
    let mut center = Pixel::new(0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let mut side = (x1 - x0).max(y1 - y0);
    if jitter_shift > 0.0 {
        center +=
            Pixel::new(rng.random_range(-jitter_shift..=jitter_shift), rng.random_range(-jitter_shift..=jitter_shift));
    }
    if jitter_scale > 0.0 {
        side *= rng.random_range(1.0 - jitter_scale..=1.0 + jitter_scale);
    }
    let a = CROP_SIZE as f64 / side;
    Ok(CropTransform {
        matrix: [[a, 0.0, -a * (center.x - 0.5 * side)], [0.0, a, -a * (center.y - 0.5 * side)]],
        output_size: (CROP_SIZE, CROP_SIZE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajgen::{generate_trajectory, TrajectoryMode, TrajectoryParams};

    fn circling(n: usize) -> Trajectory {
        generate_trajectory(&TrajectoryParams { mode: TrajectoryMode::Circling, num_frames: n, ..Default::default() })
            .unwrap()
    }

    fn naive_closing(m: &MaskRaster, size: u32) -> Vec<bool> {
        let r = (size / 2) as i64;
        let (w, h) = (m.width as i64, m.height as i64);
        let at = |occ: &[bool], x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && occ[(y * w + x) as usize];
        let square = |occ: &[bool], x: i64, y: i64, any: bool| {
            let mut vals =
                (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).map(|(dx, dy)| at(occ, x + dx, y + dy));
            if any {
                vals.any(|v| v)
            } else {
                vals.all(|v| v)
            }
        };
        let grid = |f: &dyn Fn(i64, i64) -> bool| {
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect::<Vec<_>>()
        };
        let dil = grid(&|x, y| square(m.occupancy(), x, y, true));
        let ero = grid(&|x, y| square(&dil, x, y, false));
        ero.iter().zip(m.occupancy()).map(|(&a, &b)| a || b).collect()
    }

    #[test]
    fn closing_matches_brute_force() {
        use rand::Rng;
        let mut rng = rng::seeded(5, 0);
        for trial in 0..20 {
            let (w, h) = (rng.random_range(5..40), rng.random_range(5..40));
            let density = rng.random_range(0.02..0.5);
            let occ: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
            let m = MaskRaster::from_occupancy(w, h, occ);
            for size in [1, 3, 5, 7] {
                assert_eq!(m.closed(size).occupancy(), naive_closing(&m, size).as_slice(), "trial {trial} size {size}");
            }
        }
    }

    #[test]
    fn model_validation() {
        assert!(ObjectModel::sphere(7, 0.1).is_err());
        let pts = vec![Point3::origin(); 8];
        let bad = vec![Vec3::new(2.0, 0.0, 0.0); 8];
        assert!(ObjectModel::new(pts, bad, ShapeKind::Imported).is_err());
        for m in [
            ObjectModel::sphere(200, 0.1).unwrap(),
            ObjectModel::ellipsoid(200, Vec3::new(0.1, 0.07, 0.05)).unwrap(),
            ObjectModel::box_cloud(200, Vec3::new(0.08, 0.06, 0.05)).unwrap(),
        ] {
            assert!(m.len() >= 200);
            assert!(m.normals().iter().all(|n| (n.norm() - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn frontal_point_at_image_center_is_visible() {
        let k = CameraIntrinsics::default();
        let sphere = ObjectModel::sphere(300, 0.1).unwrap();
        // Camera on +z axis looking down at the origin: the sphere's north pole
        // (first Fibonacci point sits near it) faces the camera.
        let pose = Pose::look_at(&Vec3::new(0.0, 0.0, 0.6), &Vec3::zeros(), &Vec3::y());
        let cam2 = Pose::look_at(&Vec3::new(0.05, 0.0, 0.6), &Vec3::zeros(), &Vec3::y());
        let traj = Trajectory::from_poses(vec![pose, cam2]).unwrap();
        // Add an exact pole point.
        let mut pts = sphere.points().to_vec();
        let mut nrm = sphere.normals().to_vec();
        pts.push(Point3::new(0.0, 0.0, 0.1));
        nrm.push(Vec3::z());
        let model = ObjectModel::new(pts, nrm, ShapeKind::Sphere).unwrap();
        let w = synthesize_window(&model, &traj, &k, &SynthConfig::default()).unwrap();
        let pole = model.len() - 1;
        assert!(w.tracks.visible(0, pole));
        let p = w.tracks.position(0, pole);
        assert!((p - Pixel::new(k.cx, k.cy)).norm() < 1e-9);
        // The antipode faces away from the camera.
        let south = model.points().iter().enumerate().min_by(|a, b| a.1.z.total_cmp(&b.1.z)).unwrap().0;
        assert!(!w.tracks.visible(0, south));
    }

    #[test]
    fn single_point_scene_has_exact_cycle() {
        let k = CameraIntrinsics::default();
        let dirs: Vec<Vec3> = (0..8).map(|i| Vec3::new(0.0, 0.0, 1.0) + Vec3::new(i as f64 * 1e-3, 0.0, 0.0)).collect();
        let pts: Vec<Point3> = (0..8).map(|i| Point3::new(i as f64 * 0.05, 0.0, 0.0)).collect();
        let nrm: Vec<Vec3> = dirs.iter().map(|_| Vec3::z()).collect();
        let model = ObjectModel::new(pts, nrm, ShapeKind::Imported).unwrap();
        let a = Pose::look_at(&Vec3::new(0.0, 0.0, 0.6), &Vec3::zeros(), &Vec3::y());
        let b = Pose::look_at(&Vec3::new(0.02, 0.01, 0.6), &Vec3::zeros(), &Vec3::y());
        let cfg = SynthConfig::default();
        let bufs = [render_depth(&model, &a, &k, &cfg), render_depth(&model, &b, &k, &cfg)];
        let err = cycle_error(&model.points()[0], &a, &bufs[0], &b, &bufs[1], &k).unwrap();
        assert!(err < 1e-9, "cycle error {err}");
        let vis = compute_covisibility(model.points(), &[a, b], &bufs, &k, &cfg);
        assert!(vis[0] && vis[model.len()]);
    }

    #[test]
    fn occluded_point_is_hidden() {
        // Two stacked fronto-parallel patches: the far one sits 0.3 m behind the
        // near one, so the depth ratio error is 0.3 / 0.6 = 0.5 > tau_depth.
        let k = CameraIntrinsics::default();
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                pts.push(Point3::new(i as f64 * 0.01 - 0.015, j as f64 * 0.01 - 0.015, 0.0));
            }
        }
        let far = Point3::new(0.0, 0.0, -0.3);
        pts.push(far);
        let nrm = vec![Vec3::z(); pts.len()];
        let model = ObjectModel::new(pts, nrm, ShapeKind::Imported).unwrap();
        let pose = Pose::look_at(&Vec3::new(0.0, 0.0, 0.6), &Vec3::zeros(), &Vec3::y());
        let pose2 = Pose::look_at(&Vec3::new(0.001, 0.0, 0.6), &Vec3::zeros(), &Vec3::y());
        let traj = Trajectory::from_poses(vec![pose, pose2]).unwrap();
        let w = synthesize_window(&model, &traj, &k, &SynthConfig::default()).unwrap();
        let far_idx = model.len() - 1;
        let surface = w.depth[0].surface_depth(&w.tracks.position(0, far_idx), &k).unwrap();
        assert!((0.9 - surface) / surface > 0.4);
        assert!(!w.tracks.visible(0, far_idx));
        assert!(w.tracks.visible(0, 5));
    }

    #[test]
    fn outside_image_is_invisible() {
        let k = CameraIntrinsics::default();
        let model = ObjectModel::sphere(64, 0.1).unwrap();
        // Object far off to the side: only a sliver projects inside.
        let pose = Pose::look_at(&Vec3::new(0.0, 0.0, 0.6), &Vec3::new(0.0, 0.0, 0.0), &Vec3::y());
        let shifted = pose.with_translation(pose.translation() + Vec3::new(0.55, 0.0, 0.0));
        let traj = Trajectory::from_poses(vec![pose, shifted]).unwrap();
        let w = synthesize_window(&model, &traj, &k, &SynthConfig::default()).unwrap();
        for i in 0..model.len() {
            let p = w.tracks.position(1, i);
            if !k.contains(&p) {
                assert!(!w.tracks.visible(1, i));
            }
        }
        assert!((0..model.len()).any(|i| !k.contains(&w.tracks.position(1, i))));
    }

    #[test]
    fn empty_reference_view_is_an_error() {
        let k = CameraIntrinsics::default();
        let model = ObjectModel::sphere(64, 0.1).unwrap();
        let away = Pose::look_at(&Vec3::new(0.0, 0.0, 0.6), &Vec3::new(0.0, 0.0, 2.0), &Vec3::y());
        let traj = Trajectory::from_poses(vec![away, away]).unwrap();
        assert_eq!(synthesize_window(&model, &traj, &k, &SynthConfig::default()).unwrap_err(), SceneError::EmptyMask);
    }

    #[test]
    fn sphere_visibility_matches_backface_oracle() {
        let k = CameraIntrinsics::default();
        let model = ObjectModel::sphere(500, 0.1).unwrap();
        let traj = circling(8);
        let w = synthesize_window(&model, &traj, &k, &SynthConfig::default()).unwrap();
        let mut agree = 0;
        for (t, pose) in traj.poses().iter().enumerate() {
            let c = pose.center();
            for (i, (x, n)) in model.points().iter().zip(model.normals()).enumerate() {
                let front = n.dot(&(c - x.coords)) > 0.0;
                agree += usize::from(front == w.tracks.visible(t, i));
            }
        }
        let frac = agree as f64 / (8 * model.len()) as f64;
        assert!(frac >= 0.99, "agreement {frac}");
    }

    #[test]
    fn sphere_mask_is_hole_free() {
        let k = CameraIntrinsics::default();
        let model = ObjectModel::sphere(200, 0.1).unwrap();
        let traj = circling(8);
        let w = synthesize_window(&model, &traj, &k, &SynthConfig::default()).unwrap();
        let mask = &w.masks[0];
        // Every pixel well inside the silhouette disk is covered.
        let center = Pixel::new(k.cx, k.cy);
        let silhouette = k.fx * 0.1 / (0.6f64.powi(2) - 0.01).sqrt();
        for y in 0..k.height {
            for x in 0..k.width {
                let p = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
                if (p - center).norm() < silhouette - 3.0 {
                    assert!(mask.get(x, y), "hole at {x},{y}");
                }
            }
        }
        assert!(mask.boundary().iter().all(|&(x, y)| mask.get(x, y)));
    }

    #[test]
    fn subsample_examples() {
        let mut rng = rng::seeded(1, 0);
        assert_eq!(subsample_frames(8, 8, 4, &mut rng).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(matches!(subsample_frames(7, 8, 4, &mut rng), Err(SceneError::InsufficientFrames { .. })));
        for seed in 0..1000 {
            let mut rng = rng::seeded(seed, 0);
            let idx = subsample_frames(29, 8, 4, &mut rng).unwrap();
            assert_eq!(idx.len(), 8);
            assert!(*idx.last().unwrap() <= 28);
            assert!(idx.windows(2).all(|w| (1..=4).contains(&(w[1] - w[0]))));
        }
    }

    #[test]
    fn subsample_is_uniform_over_valid_choices() {
        // total=5, n=3, k_max=2: enumerate the valid index sets by brute force.
        let mut valid = Vec::new();
        for a in 0..5usize {
            for b in a + 1..5 {
                for c in b + 1..5 {
                    if b - a <= 2 && c - b <= 2 {
                        valid.push(vec![a, b, c]);
                    }
                }
            }
        }
        let mut counts = vec![0usize; valid.len()];
        let mut rng = rng::seeded(3, 0);
        let draws = 20_000;
        for _ in 0..draws {
            let s = subsample_frames(5, 3, 2, &mut rng).unwrap();
            counts[valid.iter().position(|v| *v == s).unwrap()] += 1;
        }
        let expected = draws as f64 / valid.len() as f64;
        for c in counts {
            assert!((c as f64 - expected).abs() < 0.1 * expected, "{c} vs {expected}");
        }
    }

    #[test]
    fn grid_sampling() {
        let mut rng = rng::seeded(0, 0);
        let sq = MaskRaster::rectangle(64, 64, 10, 20, 30, 30);
        assert_eq!(grid_sample_mask(&sq, 3, 1500, &mut rng).unwrap().len(), 100);
        let big = MaskRaster::rectangle(300, 300, 0, 0, 300, 300);
        assert_eq!(grid_sample_mask(&big, 3, usize::MAX, &mut rng).unwrap().len(), 10_000);
        let capped = grid_sample_mask(&big, 3, 1500, &mut rng).unwrap();
        assert_eq!(capped.len(), 1500);
        assert!(capped.windows(2).all(|w| (w[0].1, w[0].0) < (w[1].1, w[1].0)));
        assert_eq!(grid_sample_mask(&MaskRaster::empty(8, 8), 3, 10, &mut rng), Err(SceneError::EmptyMask));
    }

    #[test]
    fn crop_examples() {
        let mut rng = rng::seeded(0, 0);
        let mask = MaskRaster::rectangle(512, 512, 128, 128, 256, 256);
        let crop = make_crop(&mask, 0.0, 0.0, &mut rng).unwrap();
        let expected = [[2.0, 0.0, -256.0], [0.0, 2.0, -256.0]];
        for r in 0..2 {
            for c in 0..3 {
                assert!((crop.matrix[r][c] - expected[r][c]).abs() < 1e-12);
            }
        }
        let jittered = make_crop(&mask, 10.0, 0.2, &mut rng).unwrap();
        let inv = jittered.inverse();
        for _ in 0..100 {
            let p = Pixel::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0));
            assert!((inv.apply(&jittered.apply(&p)) - p).norm() < 1e-9);
        }
        let a = make_crop(&mask, 0.0, 0.0, &mut rng::seeded(5, 0)).unwrap();
        let b = make_crop(&mask, 0.0, 0.0, &mut rng::seeded(5, 0)).unwrap();
        assert_eq!(a, b);
        assert!(make_crop(&MaskRaster::empty(4, 4), 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn occlusion_examples() {
        let k = CameraIntrinsics::default();
        let model = ObjectModel::sphere(200, 0.1).unwrap();
        let w = synthesize_window(&model, &circling(8), &k, &SynthConfig::default()).unwrap();
        let mut rng = rng::seeded(9, 0);

        let (m, t) = apply_occlusion_disks(&w.masks[2], &w.tracks, 2, 0, &mut rng).unwrap();
        assert_eq!(m, w.masks[2]);
        assert!(t.bitwise_eq(&w.tracks));

        let huge = OcclusionDisk::circle(Pixel::new(k.cx, k.cy), 4.0 * k.width as f64);
        let (m, t) = apply_disks(&w.masks[2], &w.tracks, 2, &[huge]);
        assert!(m.is_empty());
        assert_eq!(t.visible_count(2), 0);
        assert_eq!(t.visible_count(1), w.tracks.visible_count(1));

        // Occlusion only ever hides observations.
        let (_, occluded) = occlude_window(&w.masks, &w.tracks, 1.0, 2, 4).unwrap();
        for (a, b) in occluded.visibility().iter().zip(w.tracks.visibility()) {
            assert!(!a || *b);
        }
    }

    #[test]
    fn occlusion_radii_are_proportional_to_mask_size() {
        let mask = MaskRaster::rectangle(128, 128, 20, 30, 60, 40);
        let size = mask.size();
        let mut rng = rng::seeded(11, 0);
        let disks = sample_occlusion_disks(&mask, 10_000, &mut rng).unwrap();
        for d in &disks {
            let ratio = d.radius / size;
            assert!((0.1..=0.5).contains(&ratio), "{ratio}");
            let (x, y) = (d.center.x.floor() as u32, d.center.y.floor() as u32);
            assert!(mask.boundary().contains(&(x, y)));
        }
    }

    #[test]
    fn boundary_is_four_connected_edge() {
        let m = MaskRaster::rectangle(10, 10, 2, 2, 4, 3);
        assert_eq!(m.boundary().len(), 4 * 3 - 2);
        assert!(!m.boundary().contains(&(3, 3)));
    }
}
