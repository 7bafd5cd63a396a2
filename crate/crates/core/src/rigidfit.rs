//! Multi-view registration: depth-map backprojection, closed-form rigid and
//! similarity alignment, and sequence fitting of a linear face template to
//! landmarks and point clouds.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, RealField, Rotation3, Vector3, SVD};
use ndarray::{Array1, Array2};
use num_traits::Float;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scalar::Real;

pub const TEMPLATE_VERTICES: usize = 500;
pub const TEMPLATE_SHAPE_DIM: usize = 20;
pub const TEMPLATE_EXPRESSION_DIM: usize = 10;
pub const LANDMARK_COUNT: usize = 68;
/// Depth values at or beyond this are discarded.
pub const MAX_DEPTH: f64 = 1.4;
pub const OUTLIER_THRESHOLD: f64 = 0.020;

const POINT_WEIGHT: f64 = 0.1;
const PLANE_WEIGHT: f64 = 0.9;

/// Scalars usable with both the crate's numerics and nalgebra's
/// decompositions.
pub trait AlignScalar: Real + RealField {}
impl<T: Real + RealField> AlignScalar for T {}

fn lit<T: AlignScalar>(x: f64) -> T {
    <T as Real>::lit(x)
}

fn norm_grad<T: AlignScalar>(v: &Vector3<T>) -> Vector3<T> {
    let n = v.norm();
    if n > T::zero() {
        v / n
    } else {
        Vector3::zeros()
    }
}

fn sign<T: AlignScalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn l1<T: AlignScalar>(v: &Vector3<T>) -> T {
    Float::abs(v.x) + Float::abs(v.y) + Float::abs(v.z)
}

/// Pinhole camera. `rotation` and `translation` map camera coordinates to
/// world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams<T: AlignScalar> {
    pub intrinsics: Matrix3<T>,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: AlignScalar> CameraParams<T> {
    pub fn new(intrinsics: Matrix3<T>, rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn identity() -> Self {
        Self {
            intrinsics: Matrix3::identity(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let off = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(off <= lit(1e-8)) || !(Float::abs(det - T::one()) <= lit(1e-8)) {
            return Err(Error::InvalidConfig(format!(
                "camera rotation is not a proper rotation (orthogonality error {off}, det {det})"
            )));
        }
        if self.intrinsics.try_inverse().is_none() {
            return Err(Error::InvalidConfig("camera intrinsics are singular".into()));
        }
        Ok(())
    }

    /// Pixel coordinates and depth of a world point, if it is in front.
    pub fn project(&self, world: &Vector3<T>) -> Option<(T, T, T)> {
        let cam = self.rotation.transpose() * (world - self.translation);
        if cam.z <= T::zero() {
            return None;
        }
        let h = self.intrinsics * cam;
        Some((h.x / h.z, h.y / h.z, cam.z))
    }
}

/// Per-pixel depth along the optical axis and camera-frame normals, row
/// major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: AlignScalar> {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<T>,
    pub normals: Vec<Vector3<T>>,
}

impl<T: AlignScalar> DepthMap<T> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![T::zero(); width * height],
            normals: vec![Vector3::zeros(); width * height],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Backprojection<T: AlignScalar> {
    pub points: Vec<Vector3<T>>,
    pub normals: Vec<Vector3<T>>,
}

/// World points and normals of every masked pixel with depth in
/// `(0, MAX_DEPTH)`. Pixel `(col, row)` looks along `K^-1 (col, row, 1)`.
pub fn backproject<T: AlignScalar>(map: &DepthMap<T>, mask: &[bool], cam: &CameraParams<T>) -> Result<Backprojection<T>> {
    let n = map.width * map.height;
    if map.depth.len() != n || map.normals.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "{}x{} depth map with {} depths, {} normals and {} mask entries",
            map.width,
            map.height,
            map.depth.len(),
            map.normals.len(),
            mask.len()
        )));
    }
    let inv = cam
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::InvalidConfig("camera intrinsics are singular".into()))?;
    let max = lit::<T>(MAX_DEPTH);
    let mut out = Backprojection::default();
    for row in 0..map.height {
        for col in 0..map.width {
            let i = row * map.width + col;
            let d = map.depth[i];
            if !mask[i] || !(d > T::zero() && d < max) {
                continue;
            }
            let ray = inv * Vector3::new(<T as Real>::from_count(col), <T as Real>::from_count(row), T::one());
            out.points.push(cam.rotation * (ray * d) + cam.translation);
            out.normals.push(cam.rotation * map.normals[i]);
        }
    }
    Ok(out)
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity<T: AlignScalar> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: AlignScalar> Similarity<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let s = T::one() / self.scale;
        Self {
            scale: s,
            translation: -(rt * self.translation) * s,
            rotation: rt,
        }
    }
}

fn centroid<T: AlignScalar>(pts: &[Vector3<T>]) -> Vector3<T> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += p;
    }
    c / <T as Real>::from_count(pts.len())
}

/// Fails when the points do not span a plane.
fn check_spread<T: AlignScalar>(pts: &[Vector3<T>], mean: &Vector3<T>, what: &str) -> Result<()> {
    let mut scatter = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    let mut ev: Vec<T> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).expect("finite scatter"));
    if !(ev[1] > ev[0] * lit(1e-12)) {
        return Err(Error::Rank(format!("{what} points are collinear or coincident")));
    }
    Ok(())
}

fn umeyama<T: AlignScalar>(src: &[Vector3<T>], dst: &[Vector3<T>], with_scale: bool) -> Result<Similarity<T>> {
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!("{} source and {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::Rank(format!("{} correspondences, need at least 3", src.len())));
    }
    let n = <T as Real>::from_count(src.len());
    let (ms, md) = (centroid(src), centroid(dst));
    let var: T = src.iter().map(|p| (p - ms).norm_squared()).fold(T::zero(), |a, b| a + b) / n;
    if with_scale && !(var > T::zero()) {
        return Err(Error::Degenerate("source points have zero variance".into()));
    }
    check_spread(src, &ms, "source")?;
    check_spread(dst, &md, "target")?;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    cov /= n;
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut fix = Matrix3::identity();
    if u.determinant() * vt.determinant() < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    let rotation = u * fix * vt;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * fix).trace() / var
    } else {
        T::one()
    };
    Ok(Similarity {
        scale,
        translation: md - rotation * ms * scale,
        rotation,
    })
}

/// Least-squares rotation and translation taking `src` onto `dst`.
pub fn estimate_rigid<T: AlignScalar>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<Similarity<T>> {
    umeyama(src, dst, false)
}

/// Least-squares isotropic scale, rotation and translation taking `src`
/// onto `dst`.
pub fn estimate_similarity<T: AlignScalar>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<Similarity<T>> {
    umeyama(src, dst, true)
}

/// Indices whose distance is at most `threshold`.
pub fn filter_outliers<T: AlignScalar>(src: &[Vector3<T>], dst: &[Vector3<T>], threshold: T) -> Result<Vec<usize>> {
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!("{} source and {} target points", src.len(), dst.len())));
    }
    Ok(src
        .iter()
        .zip(dst)
        .enumerate()
        .filter(|(_, (s, d))| (*s - *d).norm() <= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Landmark groups of the 68-point layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkRegion {
    Jaw,
    Brow,
    Nose,
    Eye,
    Mouth,
}

pub fn landmark_region(index: usize) -> LandmarkRegion {
    match index {
        0..=16 => LandmarkRegion::Jaw,
        17..=26 => LandmarkRegion::Brow,
        27..=35 => LandmarkRegion::Nose,
        36..=47 => LandmarkRegion::Eye,
        _ => LandmarkRegion::Mouth,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionWeights {
    pub mouth: f64,
    pub jaw: f64,
    pub eyes: f64,
    /// Brows and nose.
    pub other: f64,
}

impl Default for RegionWeights {
    fn default() -> Self {
        Self {
            mouth: 2.0,
            jaw: 1.0,
            eyes: 1.0,
            other: 0.5,
        }
    }
}

impl RegionWeights {
    pub fn weight(&self, region: LandmarkRegion) -> f64 {
        match region {
            LandmarkRegion::Mouth => self.mouth,
            LandmarkRegion::Jaw => self.jaw,
            LandmarkRegion::Eye => self.eyes,
            LandmarkRegion::Brow | LandmarkRegion::Nose => self.other,
        }
    }
}

/// Face-region anchor points of the 68 landmarks in normalized face
/// coordinates (x right, y up, both within the unit disc).
fn landmark_anchors() -> Vec<[f64; 2]> {
    let mut a = Vec::with_capacity(LANDMARK_COUNT);
    for k in 0..17 {
        let t = std::f64::consts::PI * (1.0 + k as f64 / 16.0);
        a.push([0.8 * t.cos(), 0.05 + 0.75 * t.sin()]);
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let x = 0.15 + 0.45 * k as f64 / 4.0;
            a.push([side * if side < 0.0 { 0.75 - x } else { x }, 0.5 + 0.05 * (k as f64 - 2.0).abs().min(1.0)]);
        }
    }
    for k in 0..4 {
        a.push([0.0, 0.35 - 0.1 * k as f64]);
    }
    for k in 0..5 {
        a.push([-0.16 + 0.08 * k as f64, -0.08]);
    }
    for cx in [-0.35, 0.35] {
        for k in 0..6 {
            let t = TAU * k as f64 / 6.0;
            a.push([cx + 0.12 * t.cos(), 0.27 + 0.05 * t.sin()]);
        }
    }
    for k in 0..12 {
        let t = TAU * k as f64 / 12.0;
        a.push([0.3 * t.cos(), -0.4 + 0.13 * t.sin()]);
    }
    for k in 0..8 {
        let t = TAU * k as f64 / 8.0;
        a.push([0.18 * t.cos(), -0.4 + 0.05 * t.sin()]);
    }
    a
}

/// Linear face template: `V0 + S shape + E expression`, vertex-major with
/// rows `3 v + axis`. The first 68 vertices are the landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateModel<T: AlignScalar> {
    pub base: Vec<Vector3<T>>,
    /// Outward normals of the neutral template.
    pub normals: Vec<Vector3<T>>,
    pub shape_basis: Array2<T>,
    pub expression_basis: Array2<T>,
    pub landmarks: Vec<usize>,
}

/// Head radii of the template, in meters.
const TEMPLATE_RADII: [f64; 3] = [0.075, 0.1, 0.09];
/// Half-angle cosine of the facial cap around +z.
const TEMPLATE_CAP_COS: f64 = 0.34;
const BUMP_WIDTH: f64 = 0.03;
const BUMPS_PER_MODE: usize = 6;
const SHAPE_RMS: f64 = 0.003;
const EXPRESSION_RMS: f64 = 0.004;

impl<T: AlignScalar> TemplateModel<T> {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::keyed(seed, &[rng::stream::TEMPLATE]);
        let radii = TEMPLATE_RADII;
        let on_face = |u: [f64; 3]| -> ([f64; 3], [f64; 3]) {
            let p = [radii[0] * u[0], radii[1] * u[1], radii[2] * u[2]];
            let n = [u[0] / radii[0], u[1] / radii[1], u[2] / radii[2]];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            (p, [n[0] / len, n[1] / len, n[2] / len])
        };
        let mut pts = Vec::with_capacity(TEMPLATE_VERTICES);
        for [x, y] in landmark_anchors() {
            pts.push(on_face([x, y, (1.0 - x * x - y * y).sqrt()]));
        }
        while pts.len() < TEMPLATE_VERTICES {
            let u = [rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)];
            let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if n < 1e-9 || u[2] / n < TEMPLATE_CAP_COS {
                continue;
            }
            pts.push(on_face([u[0] / n, u[1] / n, u[2] / n]));
        }
        let base: Vec<Vector3<f64>> = pts.iter().map(|(p, _)| Vector3::from(*p)).collect();
        let shape_basis = Self::bump_modes(&base, TEMPLATE_SHAPE_DIM, SHAPE_RMS, None, &mut r);
        let expression_basis = Self::bump_modes(&base, TEMPLATE_EXPRESSION_DIM, EXPRESSION_RMS, Some(0.0), &mut r);
        Self {
            base: base.iter().map(|p| p.map(lit)).collect(),
            normals: pts.iter().map(|(_, n)| Vector3::from(*n).map(lit)).collect(),
            shape_basis,
            expression_basis,
            landmarks: (0..LANDMARK_COUNT).collect(),
        }
    }

    /// Smooth displacement modes: sums of Gaussian bumps with random 3D
    /// amplitudes centered on template vertices (below `max_y` if given),
    /// scaled to the requested RMS vertex displacement.
    fn bump_modes<R: Rng>(base: &[Vector3<f64>], modes: usize, rms: f64, max_y: Option<f64>, r: &mut R) -> Array2<T> {
        let pool: Vec<usize> = (0..base.len()).filter(|&i| max_y.is_none_or(|m| base[i].y < m)).collect();
        let mut out = Array2::zeros((3 * base.len(), modes));
        for k in 0..modes {
            let bumps: Vec<(Vector3<f64>, Vector3<f64>)> = (0..BUMPS_PER_MODE)
                .map(|_| {
                    let c = base[pool[r.random_range(0..pool.len())]];
                    let a = Vector3::new(rng::normal(r), rng::normal(r), rng::normal(r));
                    (c, a)
                })
                .collect();
            let field: Vec<Vector3<f64>> = base
                .iter()
                .map(|p| {
                    bumps.iter().fold(Vector3::zeros(), |acc, (c, a)| {
                        acc + a * (-(p - c).norm_squared() / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
                    })
                })
                .collect();
            let norm = (field.iter().map(|d| d.norm_squared()).sum::<f64>() / base.len() as f64).sqrt();
            for (v, d) in field.iter().enumerate() {
                for c in 0..3 {
                    out[[3 * v + c, k]] = lit(rms * d[c] / norm);
                }
            }
        }
        out
    }

    pub fn vertex_count(&self) -> usize {
        self.base.len()
    }

    /// Unposed vertices for the given codes.
    pub fn vertices(&self, shape: &[T], expression: &[T]) -> Result<Vec<Vector3<T>>> {
        if shape.len() != self.shape_basis.ncols() || expression.len() != self.expression_basis.ncols() {
            return Err(Error::Dimension(format!(
                "template codes of length {} and {}, expected {} and {}",
                shape.len(),
                expression.len(),
                self.shape_basis.ncols(),
                self.expression_basis.ncols()
            )));
        }
        let offset = self.shape_basis.dot(&Array1::from(shape.to_vec()))
            + self.expression_basis.dot(&Array1::from(expression.to_vec()));
        Ok(self
            .base
            .iter()
            .enumerate()
            .map(|(v, p)| p + Vector3::new(offset[3 * v], offset[3 * v + 1], offset[3 * v + 2]))
            .collect())
    }

    pub fn posed(&self, shape: &[T], pose: &FramePose<T>) -> Result<Vec<Vector3<T>>> {
        let sim = pose.similarity();
        Ok(self.vertices(shape, &pose.expression)?.iter().map(|p| sim.apply(p)).collect())
    }

    /// Observation of the template at the given parameters: landmarks, all
    /// vertices as points, and the rotated neutral normals.
    pub fn observe(&self, shape: &[T], pose: &FramePose<T>) -> Result<FrameObservation<T>> {
        let points = self.posed(shape, pose)?;
        let rot = pose.rotation_matrix();
        Ok(FrameObservation {
            landmarks: self.landmarks.iter().map(|&i| points[i]).collect(),
            normals: self.normals.iter().map(|n| rot * n).collect(),
            points,
        })
    }
}

/// Per-frame template parameters. The rotation is an axis-angle vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePose<T: AlignScalar> {
    pub scale: T,
    pub rotation: Vector3<T>,
    pub translation: Vector3<T>,
    pub expression: Vec<T>,
}

impl<T: AlignScalar> FramePose<T> {
    pub fn rotation_matrix(&self) -> Matrix3<T> {
        Rotation3::from_scaled_axis(self.rotation).into_inner()
    }

    pub fn similarity(&self) -> Similarity<T> {
        Similarity {
            scale: self.scale,
            rotation: self.rotation_matrix(),
            translation: self.translation,
        }
    }

    fn from_similarity(sim: &Similarity<T>, expression_dim: usize) -> Self {
        Self {
            scale: sim.scale,
            rotation: Rotation3::from_matrix_unchecked(sim.rotation).scaled_axis(),
            translation: sim.translation,
            expression: vec![T::zero(); expression_dim],
        }
    }
}

/// Derivatives of the rotation matrix with respect to each axis-angle
/// component.
pub fn rotation_derivatives<T: AlignScalar>(v: &Vector3<T>) -> [Matrix3<T>; 3] {
    let theta2 = v.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < lit(1e-20) {
        return basis.map(|e: Vector3<T>| e.cross_matrix());
    }
    let r = Rotation3::from_scaled_axis(*v).into_inner();
    let vx = v.cross_matrix();
    let eye = Matrix3::identity();
    basis.map(|e| {
        let i = if e.x == T::one() {
            0
        } else if e.y == T::one() {
            1
        } else {
            2
        };
        let w = v.cross(&((eye - r) * e));
        (vx * v[i] + w.cross_matrix()) * r / theta2
    })
}

/// One frame of multi-view evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation<T: AlignScalar> {
    pub landmarks: Vec<Vector3<T>>,
    pub points: Vec<Vector3<T>>,
    pub normals: Vec<Vector3<T>>,
}

impl<T: AlignScalar> FrameObservation<T> {
    fn validate(&self, index: usize) -> Result<()> {
        if self.landmarks.len() != LANDMARK_COUNT {
            return Err(Error::Dimension(format!(
                "frame {index} has {} landmarks, expected {LANDMARK_COUNT}",
                self.landmarks.len()
            )));
        }
        if self.points.is_empty() || self.points.len() != self.normals.len() {
            return Err(Error::InsufficientInput(format!(
                "frame {index} has {} points and {} normals",
                self.points.len(),
                self.normals.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateFitConfig {
    pub steps: usize,
    /// Step size at the first step; decays geometrically to
    /// `final_learning_rate` at the last.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub lambda_lmk: f64,
    pub lambda_geo: f64,
    pub lambda_reg: f64,
    pub lambda_smooth: f64,
    /// Steps between nearest-neighbor correspondence updates.
    pub refresh_every: usize,
    pub outlier_threshold: f64,
    pub regions: RegionWeights,
    pub adam: AdamConfig,
}

impl Default for TemplateFitConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            learning_rate: 1e-2,
            final_learning_rate: 1e-5,
            lambda_lmk: 1.0,
            lambda_geo: 1.0,
            lambda_reg: 1e-3,
            lambda_smooth: 0.1,
            refresh_every: 100,
            outlier_threshold: OUTLIER_THRESHOLD,
            regions: RegionWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TemplateFitConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_lmk, self.lambda_geo, self.lambda_reg, self.lambda_smooth];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss weights {lambdas:?} must be non-negative")));
        }
        if self.refresh_every == 0 || !(self.learning_rate > 0.0) || !(self.final_learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "refresh cadence and learning rates must be positive".into(),
            ));
        }
        if !(self.outlier_threshold > 0.0) {
            return Err(Error::InvalidConfig("outlier threshold must be positive".into()));
        }
        Ok(())
    }

    fn lr(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.learning_rate;
        }
        let f = step as f64 / (self.steps - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(f)
    }
}

/// Loss terms of a template fit. `geo` is `0.1 point + 0.9 plane`; `total`
/// applies the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TemplateLoss {
    pub landmark: f64,
    pub point: f64,
    pub plane: f64,
    pub geo: f64,
    pub reg: f64,
    pub smooth: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateFit<T: AlignScalar> {
    pub shape: Vec<T>,
    pub poses: Vec<FramePose<T>>,
    pub loss: TemplateLoss,
    pub history: Vec<f64>,
}

/// Similarity initialization of one frame: rigid alignment of the neutral
/// landmarks, outlier rejection, then a similarity fit on the inliers.
pub fn initialize_pose<T: AlignScalar>(
    template: &TemplateModel<T>,
    observation: &FrameObservation<T>,
    threshold: T,
) -> Result<FramePose<T>> {
    let zero_shape = vec![T::zero(); template.shape_basis.ncols()];
    let zero_expr = vec![T::zero(); template.expression_basis.ncols()];
    let neutral = template.vertices(&zero_shape, &zero_expr)?;
    let src: Vec<Vector3<T>> = template.landmarks.iter().map(|&i| neutral[i]).collect();
    let rigid = estimate_rigid(&src, &observation.landmarks)?;
    let moved: Vec<Vector3<T>> = src.iter().map(|p| rigid.apply(p)).collect();
    let keep = filter_outliers(&moved, &observation.landmarks, threshold)?;
    let pick = |pts: &[Vector3<T>]| keep.iter().map(|&i| pts[i]).collect::<Vec<_>>();
    let sim = estimate_similarity(&pick(&src), &pick(&observation.landmarks))?;
    Ok(FramePose::from_similarity(&sim, zero_expr.len()))
}

fn nearest<T: AlignScalar>(points: &[Vector3<T>], q: &Vector3<T>) -> usize {
    let mut best = 0;
    let mut dist = <T as Float>::infinity();
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

/// Data and per-frame regularization terms of one frame (already divided by
/// the frame count) with their gradients.
struct FrameTerms<T: AlignScalar> {
    landmark: f64,
    point: f64,
    plane: f64,
    reg: f64,
    d_scale: T,
    d_rotation: Vector3<T>,
    d_translation: Vector3<T>,
    d_expression: Array1<T>,
    d_shape: Array1<T>,
}

struct Weights<T> {
    lmk: T,
    geo_point: T,
    geo_plane: T,
    reg: T,
    landmark: Vec<T>,
    inv_frames: T,
}

fn frame_terms<T: AlignScalar>(
    template: &TemplateModel<T>,
    shape: &[T],
    pose: &FramePose<T>,
    obs: &FrameObservation<T>,
    matches: &[usize],
    w: &Weights<T>,
) -> Result<FrameTerms<T>> {
    let local = template.vertices(shape, &pose.expression)?;
    let rot = pose.rotation_matrix();
    let inv_n = w.inv_frames;
    let mut grads = vec![Vector3::<T>::zeros(); local.len()];
    let posed: Vec<Vector3<T>> = local.iter().map(|q| rot * q * pose.scale + pose.translation).collect();
    let (mut landmark, mut point, mut plane) = (T::zero(), T::zero(), T::zero());
    for (l, &v) in template.landmarks.iter().enumerate() {
        let d = posed[v] - obs.landmarks[l];
        landmark += w.landmark[l] * l1(&d);
        grads[v] += d.map(sign) * (w.landmark[l] * w.lmk * inv_n);
    }
    for (v, p) in posed.iter().enumerate() {
        let m = matches[v];
        let d = p - obs.points[m];
        point += l1(&d);
        let n = obs.normals[m];
        let proj = d.dot(&n);
        plane += Float::abs(proj);
        grads[v] += d.map(sign) * (w.geo_point * inv_n) + n * (sign(proj) * w.geo_plane * inv_n);
    }
    // Chain rule through p = s R q + t.
    let mut d_scale = T::zero();
    let mut d_translation = Vector3::zeros();
    let mut outer = Matrix3::zeros();
    let mut d_local = Array1::<T>::zeros(3 * local.len());
    let rt = rot.transpose();
    for (v, (g, q)) in grads.iter().zip(&local).enumerate() {
        d_translation += g;
        let rq = rot * q;
        d_scale += g.dot(&rq);
        outer += g * q.transpose() * pose.scale;
        let dq = rt * g * pose.scale;
        for c in 0..3 {
            d_local[3 * v + c] = dq[c];
        }
    }
    let derivs = rotation_derivatives(&pose.rotation);
    let mut d_rotation = Vector3::from_fn(|k, _| derivs[k].component_mul(&outer).sum());
    let d_expression = template.expression_basis.t().dot(&d_local);
    let d_shape = template.shape_basis.t().dot(&d_local);

    // Per-frame rigid and expression magnitude penalties.
    let two_pi = lit::<T>(TAU);
    let expr = Array1::from(pose.expression.clone());
    let expr_norm = Float::sqrt(expr.dot(&expr));
    let reg = expr_norm + pose.rotation.norm() / two_pi + pose.translation.norm() + Float::abs(pose.scale);
    let mut d_expression = d_expression;
    if expr_norm > T::zero() {
        d_expression.scaled_add(w.reg * inv_n / expr_norm, &expr);
    }
    d_rotation += norm_grad(&pose.rotation) * (w.reg * inv_n / two_pi);
    d_translation += norm_grad(&pose.translation) * (w.reg * inv_n);
    d_scale += sign(pose.scale) * w.reg * inv_n;
    let as_f64 = |x: T| Real::as_f64(x * inv_n);
    Ok(FrameTerms {
        landmark: as_f64(landmark),
        point: as_f64(point),
        plane: as_f64(plane),
        reg: as_f64(reg),
        d_scale,
        d_rotation,
        d_translation,
        d_expression,
        d_shape,
    })
}

const POSE_PARAMS: usize = 7;

fn frame_block(expression_dim: usize) -> usize {
    POSE_PARAMS + expression_dim
}

fn pack<T: AlignScalar>(shape: &[T], poses: &[FramePose<T>]) -> Vec<T> {
    let mut out = shape.to_vec();
    for p in poses {
        out.push(p.scale);
        out.extend(p.rotation.iter().copied());
        out.extend(p.translation.iter().copied());
        out.extend(p.expression.iter().copied());
    }
    out
}

fn unpack<T: AlignScalar>(flat: &[T], shape_dim: usize, expression_dim: usize) -> (Vec<T>, Vec<FramePose<T>>) {
    let shape = flat[..shape_dim].to_vec();
    let poses = flat[shape_dim..]
        .chunks(frame_block(expression_dim))
        .map(|b| FramePose {
            scale: b[0],
            rotation: Vector3::new(b[1], b[2], b[3]),
            translation: Vector3::new(b[4], b[5], b[6]),
            expression: b[POSE_PARAMS..].to_vec(),
        })
        .collect();
    (shape, poses)
}

/// Total loss and gradient with respect to the packed parameters
/// `[shape, (scale, rotation, translation, expression) per frame]`.
pub fn template_loss_gradient<T: AlignScalar>(
    template: &TemplateModel<T>,
    shape: &[T],
    poses: &[FramePose<T>],
    observations: &[FrameObservation<T>],
    matches: &[Vec<usize>],
    config: &TemplateFitConfig,
) -> Result<(TemplateLoss, Vec<T>)> {
    let n = poses.len();
    if observations.len() != n || matches.len() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "{n} poses, {} observations and {} correspondence sets",
            observations.len(),
            matches.len()
        )));
    }
    let inv_n = T::one() / <T as Real>::from_count(n);
    let w = Weights {
        lmk: lit(config.lambda_lmk),
        geo_point: lit(config.lambda_geo * POINT_WEIGHT),
        geo_plane: lit(config.lambda_geo * PLANE_WEIGHT),
        reg: lit(config.lambda_reg),
        landmark: (0..LANDMARK_COUNT)
            .map(|l| lit(config.regions.weight(landmark_region(l))))
            .collect(),
        inv_frames: inv_n,
    };
    let terms: Vec<FrameTerms<T>> = (0..n)
        .into_par_iter()
        .map(|i| frame_terms(template, shape, &poses[i], &observations[i], &matches[i], &w))
        .collect::<Result<_>>()?;
    let d_s = shape.len();
    let d_e = template.expression_basis.ncols();
    let block = frame_block(d_e);
    let mut grad = vec![T::zero(); d_s + n * block];
    let mut loss = TemplateLoss::default();
    let mut shape_grad = Array1::<T>::zeros(d_s);
    for (i, t) in terms.iter().enumerate() {
        for (name, v) in [("landmark", t.landmark), ("point", t.point), ("plane", t.plane), ("reg", t.reg)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite {name} loss in frame {i}")));
            }
        }
        loss.landmark += t.landmark;
        loss.point += t.point;
        loss.plane += t.plane;
        loss.reg += t.reg;
        shape_grad += &t.d_shape;
        let o = d_s + i * block;
        grad[o] = t.d_scale;
        for k in 0..3 {
            grad[o + 1 + k] = t.d_rotation[k];
            grad[o + 4 + k] = t.d_translation[k];
        }
        for (k, g) in t.d_expression.iter().enumerate() {
            grad[o + POSE_PARAMS + k] = *g;
        }
    }
    let shape_vec = Array1::from(shape.to_vec());
    let shape_norm = Float::sqrt(shape_vec.dot(&shape_vec));
    loss.reg += Real::as_f64(shape_norm);
    if shape_norm > T::zero() {
        shape_grad.scaled_add(w.reg / shape_norm, &shape_vec);
    }
    grad[..d_s].copy_from_slice(shape_grad.as_slice().expect("contiguous"));

    let two_pi = lit::<T>(TAU);
    let ws = lit::<T>(config.lambda_smooth) * inv_n;
    let mut smooth = T::zero();
    for i in 1..n {
        let (a, b) = (&poses[i - 1], &poses[i]);
        let de: Vec<T> = b.expression.iter().zip(&a.expression).map(|(x, y)| *x - *y).collect();
        let de_norm = Float::sqrt(de.iter().fold(T::zero(), |s, v| s + *v * *v));
        let dr = b.rotation - a.rotation;
        let dt = b.translation - a.translation;
        smooth += de_norm + dr.norm() / two_pi + dt.norm();
        let (oa, ob) = (d_s + (i - 1) * block, d_s + i * block);
        if de_norm > T::zero() {
            for (k, v) in de.iter().enumerate() {
                let g = ws * *v / de_norm;
                grad[ob + POSE_PARAMS + k] += g;
                grad[oa + POSE_PARAMS + k] -= g;
            }
        }
        let gr = norm_grad(&dr) * (ws / two_pi);
        let gt = norm_grad(&dt) * ws;
        for k in 0..3 {
            grad[ob + 1 + k] += gr[k];
            grad[oa + 1 + k] -= gr[k];
            grad[ob + 4 + k] += gt[k];
            grad[oa + 4 + k] -= gt[k];
        }
    }
    loss.smooth = Real::as_f64(smooth * inv_n);
    loss.geo = POINT_WEIGHT * loss.point + PLANE_WEIGHT * loss.plane;
    loss.total = config.lambda_lmk * loss.landmark
        + config.lambda_geo * loss.geo
        + config.lambda_reg * loss.reg
        + config.lambda_smooth * loss.smooth;
    Ok((loss, grad))
}

/// Nearest observed point to every posed template vertex, per frame.
pub fn correspondences<T: AlignScalar>(
    template: &TemplateModel<T>,
    shape: &[T],
    poses: &[FramePose<T>],
    observations: &[FrameObservation<T>],
) -> Result<Vec<Vec<usize>>> {
    poses
        .par_iter()
        .zip(observations)
        .map(|(pose, obs)| {
            let posed = template.posed(shape, pose)?;
            Ok(posed.iter().map(|p| nearest(&obs.points, p)).collect())
        })
        .collect()
}

/// Fit a shared shape code and per-frame pose and expression to a sequence
/// of observations with Adam, starting from similarity-initialized poses
/// and zero codes.
pub fn fit_template_sequence<T: AlignScalar>(
    template: &TemplateModel<T>,
    observations: &[FrameObservation<T>],
    config: &TemplateFitConfig,
) -> Result<TemplateFit<T>> {
    config.validate()?;
    if observations.is_empty() {
        return Err(Error::InsufficientInput("no frames to fit".into()));
    }
    for (i, o) in observations.iter().enumerate() {
        o.validate(i)?;
    }
    let threshold = lit(config.outlier_threshold);
    let poses = observations
        .iter()
        .map(|o| initialize_pose(template, o, threshold))
        .collect::<Result<Vec<_>>>()?;
    let d_s = template.shape_basis.ncols();
    let d_e = template.expression_basis.ncols();
    let mut flat = pack(&vec![T::zero(); d_s], &poses);
    let mut adam = Adam::new(config.adam, [flat.len()]);
    let mut history = Vec::with_capacity(config.steps);
    let mut matches = Vec::new();
    let mut loss = TemplateLoss::default();
    for step in 0..config.steps {
        let (shape, poses) = unpack(&flat, d_s, d_e);
        if step % config.refresh_every == 0 {
            matches = correspondences(template, &shape, &poses, observations)?;
        }
        let (l, grad) = template_loss_gradient(template, &shape, &poses, observations, &matches, config)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} at step {step}")),
                other => other,
            })?;
        loss = l;
        history.push(l.total);
        adam.step(config.lr(step), [flat.as_mut_slice()], [grad.as_slice()]);
    }
    let (shape, poses) = unpack(&flat, d_s, d_e);
    if config.steps > 0 {
        // Report the loss at the returned parameters.
        matches = correspondences(template, &shape, &poses, observations)?;
        loss = template_loss_gradient(template, &shape, &poses, observations, &matches, config)?.0;
    }
    Ok(TemplateFit {
        shape,
        poses,
        loss,
        history,
    })
}

/// Mean Euclidean distance between fitted and observed landmarks.
pub fn landmark_residual<T: AlignScalar>(
    template: &TemplateModel<T>,
    fit: &TemplateFit<T>,
    observations: &[FrameObservation<T>],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pose, obs) in fit.poses.iter().zip(observations) {
        let posed = template.posed(&fit.shape, pose)?;
        for (l, &v) in template.landmarks.iter().enumerate() {
            sum += Real::as_f64((posed[v] - obs.landmarks[l]).norm());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientInput("no landmarks to compare".into()));
    }
    Ok(sum / count as f64)
}

/// Ground truth and observations for a template-generated sequence: a
/// random shape, slowly varying expressions and a drifting head pose.
pub struct SyntheticTemplateSequence<T: AlignScalar> {
    pub shape: Vec<T>,
    pub poses: Vec<FramePose<T>>,
    pub observations: Vec<FrameObservation<T>>,
}

pub fn synthetic_template_sequence<T: AlignScalar>(
    template: &TemplateModel<T>,
    frames: usize,
    seed: u64,
) -> Result<SyntheticTemplateSequence<T>> {
    let mut r = rng::keyed(seed, &[rng::stream::TEMPLATE, 1]);
    let d_s = template.shape_basis.ncols();
    let d_e = template.expression_basis.ncols();
    let shape: Vec<T> = (0..d_s).map(|_| lit(rng::normal(&mut r))).collect();
    let axis = Vector3::new(rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)).normalize();
    let base_angle = r.random_range(0.1..0.4);
    let base_t = Vector3::new(r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), r.random_range(0.5..0.7));
    let base_scale = r.random_range(0.9..1.1);
    let phases: Vec<f64> = (0..d_e).map(|_| r.random_range(0.0..TAU)).collect();
    let poses: Vec<FramePose<T>> = (0..frames)
        .map(|i| {
            let t = i as f64 / 24.0;
            let rot = axis * (base_angle + 0.05 * (TAU * 0.5 * t).sin());
            let trans = base_t + Vector3::new(0.005 * (TAU * 0.3 * t).sin(), 0.003 * t, 0.0);
            FramePose {
                scale: lit(base_scale),
                rotation: rot.map(lit),
                translation: trans.map(lit),
                expression: phases.iter().map(|p| lit((TAU * 0.8 * t + p).sin())).collect(),
            }
        })
        .collect();
    let observations = poses
        .iter()
        .map(|p| template.observe(&shape, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticTemplateSequence {
        shape,
        poses,
        observations,
    })
}

fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of floats", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Landmark file: consecutive frames of 68 little-endian `f32` triples.
pub fn write_landmarks<T: AlignScalar>(path: impl AsRef<Path>, frames: &[Vec<Vector3<T>>]) -> Result<()> {
    if let Some(bad) = frames.iter().position(|f| f.len() != LANDMARK_COUNT) {
        return Err(Error::Dimension(format!("frame {bad} does not have {LANDMARK_COUNT} landmarks")));
    }
    write_f32s(
        path.as_ref(),
        frames.iter().flatten().flat_map(|p| p.iter().map(|v| v.to_f32_bits()).collect::<Vec<_>>()),
    )
}

pub fn read_landmarks<T: AlignScalar>(path: impl AsRef<Path>) -> Result<Vec<Vec<Vector3<T>>>> {
    let path = path.as_ref();
    let values = read_f32s(path)?;
    let per_frame = 3 * LANDMARK_COUNT;
    if values.is_empty() || values.len() % per_frame != 0 {
        return Err(Error::format(path, format!("{} floats is not a whole number of landmark frames", values.len())));
    }
    Ok(values
        .chunks_exact(per_frame)
        .map(|f| {
            f.chunks_exact(3)
                .map(|c| Vector3::new(lit(c[0] as f64), lit(c[1] as f64), lit(c[2] as f64)))
                .collect()
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthSidecar {
    width: usize,
    height: usize,
    /// Row-major 3x3.
    intrinsics: [f64; 9],
    rotation: [f64; 9],
    translation: [f64; 3],
    channels: Vec<String>,
}

const DEPTH_CHANNELS: [&str; 5] = ["depth", "normal_x", "normal_y", "normal_z", "mask"];

/// A depth map with its segmentation mask and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthView<T: AlignScalar> {
    pub map: DepthMap<T>,
    pub mask: Vec<bool>,
    pub camera: CameraParams<T>,
}

impl<T: AlignScalar> DepthView<T> {
    pub fn backproject(&self) -> Result<Backprojection<T>> {
        backproject(&self.map, &self.mask, &self.camera)
    }

    /// Raw per-pixel `f32` records `(depth, nx, ny, nz, mask)` at `path` and
    /// a JSON sidecar with the resolution and camera next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let m = &self.map;
        write_f32s(
            path,
            (0..m.width * m.height).flat_map(|i| {
                let n = m.normals[i];
                [
                    m.depth[i].to_f32_bits(),
                    n.x.to_f32_bits(),
                    n.y.to_f32_bits(),
                    n.z.to_f32_bits(),
                    if self.mask[i] { 1.0 } else { 0.0 },
                ]
            }),
        )?;
        let flat = |mat: &Matrix3<T>| -> [f64; 9] { std::array::from_fn(|k| Real::as_f64(mat[(k / 3, k % 3)])) };
        let sidecar = DepthSidecar {
            width: m.width,
            height: m.height,
            intrinsics: flat(&self.camera.intrinsics),
            rotation: flat(&self.camera.rotation),
            translation: std::array::from_fn(|k| Real::as_f64(self.camera.translation[k])),
            channels: DEPTH_CHANNELS.iter().map(|s| s.to_string()).collect(),
        };
        let side = path.with_extension("json");
        fs::write(&side, serde_json::to_string_pretty(&sidecar).expect("json")).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DepthSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.channels != DEPTH_CHANNELS {
            return Err(Error::format(&side, format!("unsupported channels {:?}", meta.channels)));
        }
        let values = read_f32s(path)?;
        let n = meta.width * meta.height;
        if values.len() != n * DEPTH_CHANNELS.len() {
            return Err(Error::format(
                path,
                format!("{} floats for a {}x{} map", values.len(), meta.width, meta.height),
            ));
        }
        let mut map = DepthMap::empty(meta.width, meta.height);
        let mut mask = vec![false; n];
        for (i, px) in values.chunks_exact(DEPTH_CHANNELS.len()).enumerate() {
            map.depth[i] = lit(px[0] as f64);
            map.normals[i] = Vector3::new(lit(px[1] as f64), lit(px[2] as f64), lit(px[3] as f64));
            mask[i] = px[4] != 0.0;
        }
        let mat = |a: &[f64; 9]| Matrix3::from_fn(|i, j| lit(a[3 * i + j]));
        let camera = CameraParams::new(
            mat(&meta.intrinsics),
            mat(&meta.rotation),
            Vector3::from_fn(|k, _| lit(meta.translation[k])),
        )
        .map_err(|e| Error::format(&side, e.to_string()))?;
        Ok(Self { map, mask, camera })
    }
}

/// Splat points into a depth view, keeping the nearest point per pixel.
/// Normals are stored in the camera frame.
pub fn render_points<T: AlignScalar>(
    points: &[Vector3<T>],
    normals: &[Vector3<T>],
    camera: &CameraParams<T>,
    width: usize,
    height: usize,
) -> DepthView<T> {
    let mut map = DepthMap::empty(width, height);
    let mut mask = vec![false; width * height];
    let rt = camera.rotation.transpose();
    for (p, n) in points.iter().zip(normals) {
        let Some((u, v, z)) = camera.project(p) else {
            continue;
        };
        let (col, row) = (Float::round(u), Float::round(v));
        if col < T::zero() || row < T::zero() {
            continue;
        }
        let (col, row) = (Real::as_f64(col) as usize, Real::as_f64(row) as usize);
        if col >= width || row >= height {
            continue;
        }
        let i = row * width + col;
        if !mask[i] || z < map.depth[i] {
            map.depth[i] = z;
            map.normals[i] = rt * n;
            mask[i] = true;
        }
    }
    DepthView {
        map,
        mask,
        camera: camera.clone(),
    }
}

/// A camera at `eye` looking at `target` with the image y axis pointing
/// away from `up`, and square pixels of focal length `focal` centered in a
/// `width x height` image.
pub fn look_at<T: AlignScalar>(
    eye: Vector3<T>,
    target: Vector3<T>,
    up: Vector3<T>,
    focal: T,
    width: usize,
    height: usize,
) -> Result<CameraParams<T>> {
    let z = (target - eye).normalize();
    let x = z.cross(&up);
    if !(x.norm() > lit(1e-9)) {
        return Err(Error::InvalidConfig("camera up vector is parallel to the view direction".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    let half = lit::<T>(0.5);
    let cx = <T as Real>::from_count(width.saturating_sub(1)) * half;
    let cy = <T as Real>::from_count(height.saturating_sub(1)) * half;
    let intrinsics = Matrix3::new(focal, T::zero(), cx, T::zero(), focal, cy, T::zero(), T::zero(), T::one());
    CameraParams::new(intrinsics, rotation, eye)
}

/// Views of one frame, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateFrameViews {
    pub views: Vec<PathBuf>,
}

/// Template-fitting dataset: landmark file and per-frame depth views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateManifest {
    pub template_seed: u64,
    pub landmarks: PathBuf,
    pub frames: Vec<TemplateFrameViews>,
}

impl TemplateManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self).expect("json")).map_err(|e| Error::io(path, e))
    }

    /// Template and per-frame observations (landmarks plus the merged
    /// backprojection of every view).
    pub fn load<T: AlignScalar>(path: impl AsRef<Path>) -> Result<(TemplateModel<T>, Vec<FrameObservation<T>>)> {
        let path = path.as_ref();
        let manifest = Self::read(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let landmarks: Vec<Vec<Vector3<T>>> = read_landmarks(root.join(&manifest.landmarks))?;
        if landmarks.len() != manifest.frames.len() {
            return Err(Error::format(
                path,
                format!("{} landmark frames for {} view frames", landmarks.len(), manifest.frames.len()),
            ));
        }
        let observations = manifest
            .frames
            .iter()
            .zip(landmarks)
            .map(|(frame, landmarks)| {
                let mut obs = FrameObservation {
                    landmarks,
                    points: Vec::new(),
                    normals: Vec::new(),
                };
                for v in &frame.views {
                    let cloud = DepthView::<T>::read(root.join(v))?.backproject()?;
                    obs.points.extend(cloud.points);
                    obs.normals.extend(cloud.normals);
                }
                Ok(obs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((TemplateModel::new(manifest.template_seed), observations))
    }
}

/// Square image side of the synthetic capture rig.
pub const RIG_RESOLUTION: usize = 200;

/// Front, left and right cameras around a head roughly 0.6 m in front of
/// the origin.
pub fn capture_rig<T: AlignScalar>() -> Vec<CameraParams<T>> {
    let target = Vector3::new(0.0, 0.0, 0.6);
    [[0.0, 0.0, 0.0], [-0.3, 0.0, 0.1], [0.3, 0.0, 0.1]]
        .iter()
        .map(|e| {
            look_at(
                Vector3::from(*e).map(lit),
                target.map(lit),
                Vector3::new(0.0, -1.0, 0.0).map(lit),
                lit(400.0),
                RIG_RESOLUTION,
                RIG_RESOLUTION,
            )
            .expect("rig cameras are well posed")
        })
        .collect()
}

/// Render a template-generated sequence through the capture rig into
/// `dir`; returns the manifest path.
pub fn write_template_dataset(dir: impl AsRef<Path>, frames: usize, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if frames == 0 {
        return Err(Error::InvalidConfig("template dataset needs at least one frame".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let template = TemplateModel::<f64>::new(seed);
    let data = synthetic_template_sequence(&template, frames, seed)?;
    let rig = capture_rig::<f64>();
    let mut entries = Vec::with_capacity(frames);
    for (i, obs) in data.observations.iter().enumerate() {
        let mut views = Vec::new();
        for (c, cam) in rig.iter().enumerate() {
            let name = PathBuf::from(format!("frame{i:03}_view{c}.depth"));
            render_points(&obs.points, &obs.normals, cam, RIG_RESOLUTION, RIG_RESOLUTION).write(dir.join(&name))?;
            views.push(name);
        }
        entries.push(TemplateFrameViews { views });
    }
    let landmarks = PathBuf::from("landmarks.f32");
    let lmk: Vec<Vec<Vector3<f64>>> = data.observations.iter().map(|o| o.landmarks.clone()).collect();
    write_landmarks(dir.join(&landmarks), &lmk)?;
    let manifest = TemplateManifest {
        template_seed: seed,
        landmarks,
        frames: entries,
    };
    let path = dir.join("template.json");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_similarity(r: &mut impl Rng) -> Similarity<f64> {
        let axis = Vector3::new(rng::normal(r), rng::normal(r), rng::normal(r)).normalize();
        Similarity {
            scale: r.random_range(0.5..2.0),
            rotation: Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), r.random_range(-3.0..3.0))
                .into_inner(),
            translation: Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
        }
    }

    fn cloud(r: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng::normal(r), rng::normal(r), rng::normal(r)))
            .collect()
    }

    #[test]
    fn identity_camera_backprojects_unit_depth() {
        let mut map = DepthMap::<f64>::empty(2, 2);
        map.depth = vec![1.0, 1.5, 0.0, 1.0];
        map.normals[0] = Vector3::new(0.0, 0.0, -1.0);
        let cam = CameraParams::identity();
        let out = backproject(&map, &[true, true, true, false], &cam).unwrap();
        assert_eq!(out.points, vec![Vector3::new(0.0, 0.0, 1.0)]);
        assert_eq!(out.normals, vec![Vector3::new(0.0, 0.0, -1.0)]);
        map.depth = vec![1.5; 4];
        assert!(backproject(&map, &[true; 4], &cam).unwrap().points.is_empty());
        assert!(backproject(&map, &[true; 3], &cam).is_err());
    }

    #[test]
    fn plane_render_roundtrip() {
        // Exact ray-plane depths, backprojected and reprojected.
        let cam = look_at(
            Vector3::new(0.2, -0.1, -0.8),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            300.0,
            64,
            48,
        )
        .unwrap();
        let (n, c) = (Vector3::new(0.1, 0.2, -1.0).normalize(), 0.05);
        let inv = cam.intrinsics.try_inverse().unwrap();
        let mut map = DepthMap::empty(64, 48);
        for row in 0..48 {
            for col in 0..64 {
                let ray = cam.rotation * (inv * Vector3::new(col as f64, row as f64, 1.0));
                let depth = (c - n.dot(&cam.translation)) / n.dot(&ray);
                map.depth[row * 64 + col] = depth;
                map.normals[row * 64 + col] = cam.rotation.transpose() * n;
            }
        }
        let out = backproject(&map, &vec![true; 64 * 48], &cam).unwrap();
        assert_eq!(out.points.len(), 64 * 48);
        for (k, p) in out.points.iter().enumerate() {
            assert!((p.dot(&n) - c).abs() < 1e-9);
            let (u, v, _) = cam.project(p).unwrap();
            assert!((u - (k % 64) as f64).abs() < 1e-6 && (v - (k / 64) as f64).abs() < 1e-6);
            assert!((out.normals[k] - n).norm() < 1e-12);
        }
    }

    #[test]
    fn camera_validation() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraParams::<f64>::new(Matrix3::identity(), bad, Vector3::zeros()).is_err());
        assert!(CameraParams::<f64>::new(Matrix3::zeros(), Matrix3::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn alignment_examples() {
        let mut r = rng::keyed(1, &[]);
        let src = cloud(&mut r, 20);
        let same = estimate_rigid(&src, &src).unwrap();
        assert!((same.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(same.translation.norm() < 1e-12);
        let shift = Vector3::new(0.3, -0.2, 1.0);
        let moved: Vec<_> = src.iter().map(|p| p + shift).collect();
        let t = estimate_rigid(&src, &moved).unwrap();
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!((t.translation - shift).norm() < 1e-12);
        let doubled: Vec<_> = src.iter().map(|p| p * 2.0).collect();
        let s = estimate_similarity(&src, &doubled).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-9 && (s.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(s.translation.norm() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(estimate_rigid(&line, &line), Err(Error::Rank(_))));
        let point = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(estimate_similarity(&point, &point), Err(Error::Degenerate(_))));
        let two: Vec<Vector3<f64>> = vec![Vector3::zeros(), Vector3::x()];
        assert!(matches!(estimate_rigid(&two, &two), Err(Error::Rank(_))));
    }

    #[test]
    fn random_transforms_are_recovered() {
        let mut r = rng::keyed(2, &[]);
        for _ in 0..50 {
            let truth = random_similarity(&mut r);
            let src = cloud(&mut r, 30);
            let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
            let est = estimate_similarity(&src, &dst).unwrap();
            assert!((est.scale - truth.scale).abs() < 1e-9);
            assert!((est.rotation - truth.rotation).norm() < 1e-9);
            assert!((est.translation - truth.translation).norm() < 1e-9);
            let rigid_truth = Similarity { scale: 1.0, ..truth.clone() };
            let dst: Vec<_> = src.iter().map(|p| rigid_truth.apply(p)).collect();
            let est = estimate_rigid(&src, &dst).unwrap();
            assert!((est.rotation - truth.rotation).norm() < 1e-9);
            assert!((est.translation - truth.translation).norm() < 1e-9);
            let sim = estimate_similarity(&src, &dst).unwrap();
            assert!((sim.scale - 1.0).abs() < 1e-9 && (sim.rotation - est.rotation).norm() < 1e-9);
        }
    }

    #[test]
    fn similarity_estimate_composes_with_a_common_transform() {
        let mut r = rng::keyed(3, &[]);
        let truth = random_similarity(&mut r);
        let common = random_similarity(&mut r);
        let src = cloud(&mut r, 25);
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let a: Vec<_> = src.iter().map(|p| common.apply(p)).collect();
        let b: Vec<_> = dst.iter().map(|p| common.apply(p)).collect();
        let est = estimate_similarity(&a, &b).unwrap();
        let expect = common.compose(&truth).compose(&common.inverse());
        assert!((est.scale - expect.scale).abs() < 1e-9);
        assert!((est.rotation - expect.rotation).norm() < 1e-9);
        assert!((est.translation - expect.translation).norm() < 1e-9);
    }

    #[test]
    fn outlier_filter_examples() {
        let pts: Vec<_> = (0..6).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(filter_outliers(&pts, &pts, 0.02).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        let mut moved = pts.clone();
        moved[3].y += 0.1;
        moved[4].z += 0.02;
        assert_eq!(filter_outliers(&pts, &moved, 0.02).unwrap(), vec![0, 1, 2, 4, 5]);
        let kept = filter_outliers(&pts, &moved, 0.02).unwrap();
        let (a, b): (Vec<_>, Vec<_>) = kept.iter().map(|&i| (pts[i], moved[i])).unzip();
        assert_eq!(filter_outliers(&a, &b, 0.02).unwrap().len(), kept.len());
    }

    #[test]
    fn rotation_derivatives_match_differences() {
        let h = 1e-6;
        for v in [Vector3::new(0.3, -0.2, 0.5), Vector3::new(0.0, 0.0, 0.0), Vector3::new(1e-3, 2.0, -0.4)] {
            let d = rotation_derivatives(&v);
            for (k, dk) in d.iter().enumerate() {
                let mut a = v;
                let mut b = v;
                a[k] += h;
                b[k] -= h;
                let fd = (Rotation3::from_scaled_axis(a).into_inner() - Rotation3::from_scaled_axis(b).into_inner())
                    / (2.0 * h);
                assert!((fd - dk).norm() < 1e-8, "{v:?} {k}");
            }
        }
    }

    #[test]
    fn template_is_deterministic_and_well_formed() {
        let a = TemplateModel::<f64>::new(4);
        assert_eq!(a, TemplateModel::new(4));
        assert_eq!(a.vertex_count(), TEMPLATE_VERTICES);
        assert_eq!(a.shape_basis.dim(), (3 * TEMPLATE_VERTICES, TEMPLATE_SHAPE_DIM));
        assert_eq!(a.expression_basis.dim(), (3 * TEMPLATE_VERTICES, TEMPLATE_EXPRESSION_DIM));
        assert!(a.landmarks.iter().all(|&i| i < TEMPLATE_VERTICES));
        assert!(a.shape_basis.iter().chain(a.expression_basis.iter()).all(|v| v.is_finite()));
        assert!(a.normals.iter().all(|n| (n.norm() - 1.0).abs() < 1e-12));
    }

    fn setup(frames: usize) -> (TemplateModel<f64>, SyntheticTemplateSequence<f64>) {
        let t = TemplateModel::new(5);
        let data = synthetic_template_sequence(&t, frames, 6).unwrap();
        (t, data)
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let (t, data) = setup(3);
        let mut r = rng::keyed(7, &[]);
        let shape: Vec<f64> = data.shape.iter().map(|v| v + 0.3 * rng::normal(&mut r)).collect();
        let poses: Vec<FramePose<f64>> = data
            .poses
            .iter()
            .map(|p| FramePose {
                scale: p.scale * 1.01,
                rotation: p.rotation + Vector3::new(0.01, -0.02, 0.015),
                translation: p.translation + Vector3::new(0.002, 0.001, -0.003),
                expression: p.expression.iter().map(|v| v * 0.7 + 0.1).collect(),
            })
            .collect();
        let cfg = TemplateFitConfig::default();
        let matches = correspondences(&t, &shape, &poses, &data.observations).unwrap();
        let (_, grad) = template_loss_gradient(&t, &shape, &poses, &data.observations, &matches, &cfg).unwrap();
        let flat = pack(&shape, &poses);
        let eval = |f: &[f64]| {
            let (s, p) = unpack(f, TEMPLATE_SHAPE_DIM, TEMPLATE_EXPRESSION_DIM);
            template_loss_gradient(&t, &s, &p, &data.observations, &matches, &cfg).unwrap().0.total
        };
        let h = 1e-7;
        for k in 0..flat.len() {
            let mut a = flat.clone();
            let mut b = flat.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (eval(&a) - eval(&b)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn geo_loss_is_the_stated_mix() {
        let (t, data) = setup(2);
        let cfg = TemplateFitConfig::default();
        let poses: Vec<_> = data.poses.iter().map(|p| FramePose { scale: p.scale * 1.02, ..p.clone() }).collect();
        let m = correspondences(&t, &data.shape, &poses, &data.observations).unwrap();
        let (l, _) = template_loss_gradient(&t, &data.shape, &poses, &data.observations, &m, &cfg).unwrap();
        assert!(l.point > 0.0 && l.plane > 0.0);
        assert_eq!(l.geo, 0.1 * l.point + 0.9 * l.plane);
    }

    #[test]
    fn regularizers_alone_pull_toward_zero() {
        let (t, data) = setup(2);
        let cfg = TemplateFitConfig {
            lambda_lmk: 0.0,
            lambda_geo: 0.0,
            lambda_smooth: 0.0,
            lambda_reg: 1.0,
            ..TemplateFitConfig::default()
        };
        let m = correspondences(&t, &data.shape, &data.poses, &data.observations).unwrap();
        let mut flat = pack(&data.shape, &data.poses);
        let before = flat.clone();
        let mut adam = Adam::new(AdamConfig::default(), [flat.len()]);
        for _ in 0..200 {
            let (s, p) = unpack(&flat, TEMPLATE_SHAPE_DIM, TEMPLATE_EXPRESSION_DIM);
            let (_, g) = template_loss_gradient(&t, &s, &p, &data.observations, &m, &cfg).unwrap();
            adam.step(1e-2, [flat.as_mut_slice()], [g.as_slice()]);
        }
        let (s0, p0) = unpack(&before, TEMPLATE_SHAPE_DIM, TEMPLATE_EXPRESSION_DIM);
        let (s1, p1) = unpack(&flat, TEMPLATE_SHAPE_DIM, TEMPLATE_EXPRESSION_DIM);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&s1) < 0.5 * norm(&s0));
        for (a, b) in p0.iter().zip(&p1) {
            assert!(norm(&b.expression) < 0.5 * norm(&a.expression));
            assert!(b.translation.norm() < 0.5 * a.translation.norm());
        }
    }

    #[test]
    fn constant_motion_has_zero_smoothness() {
        let (t, mut data) = setup(3);
        let first = data.poses[0].clone();
        data.poses.iter_mut().for_each(|p| *p = first.clone());
        let m = correspondences(&t, &data.shape, &data.poses, &data.observations).unwrap();
        let cfg = TemplateFitConfig::default();
        let (l, _) = template_loss_gradient(&t, &data.shape, &data.poses, &data.observations, &m, &cfg).unwrap();
        assert_eq!(l.smooth, 0.0);
    }

    #[test]
    fn initialization_recovers_the_pose_at_neutral_codes() {
        let t = TemplateModel::<f64>::new(5);
        let pose = FramePose {
            scale: 1.05,
            rotation: Vector3::new(0.1, -0.2, 0.05),
            translation: Vector3::new(0.01, 0.02, 0.6),
            expression: vec![0.0; TEMPLATE_EXPRESSION_DIM],
        };
        let mut obs = t.observe(&[0.0; TEMPLATE_SHAPE_DIM], &pose).unwrap();
        obs.landmarks[5] += Vector3::new(0.0, 0.1, 0.0);
        let init = initialize_pose(&t, &obs, 0.02).unwrap();
        assert!((init.scale - pose.scale).abs() < 1e-9);
        assert!((init.rotation - pose.rotation).norm() < 1e-9);
        assert!((init.translation - pose.translation).norm() < 1e-9);
    }

    #[test]
    fn depth_view_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TemplateModel::<f64>::new(1);
        let cam = look_at(
            Vector3::new(0.0, 0.0, 0.5),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            400.0,
            40,
            30,
        )
        .unwrap();
        let view = render_points(&t.base, &t.normals, &cam, 40, 30);
        assert!(view.mask.iter().any(|m| *m));
        let path = dir.path().join("v.depth");
        view.write(&path).unwrap();
        let back = DepthView::<f64>::read(&path).unwrap();
        assert_eq!(back.mask, view.mask);
        assert!((back.camera.rotation - cam.rotation).norm() < 1e-6);
        let pts = back.backproject().unwrap();
        assert_eq!(pts.points.len(), view.mask.iter().filter(|m| **m).count());
        let lmk = vec![t.base[..LANDMARK_COUNT].to_vec(); 2];
        let lpath = dir.path().join("l.f32");
        write_landmarks(&lpath, &lmk).unwrap();
        let read: Vec<Vec<Vector3<f64>>> = read_landmarks(&lpath).unwrap();
        assert_eq!(read.len(), 2);
        assert!((read[1][7] - lmk[1][7]).norm() < 1e-6);
    }

    #[test]
    fn template_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_template_dataset(dir.path(), 2, 8).unwrap();
        let (t, obs) = TemplateManifest::load::<f64>(&path).unwrap();
        assert_eq!(t, TemplateModel::new(8));
        assert_eq!(obs.len(), 2);
        let truth = synthetic_template_sequence(&t, 2, 8).unwrap();
        for (o, g) in obs.iter().zip(&truth.observations) {
            assert!(o.points.len() > 300);
            // Splatting moves points by at most half a pixel sideways.
            for p in &o.points {
                let d = g.points.iter().map(|q| (p - q).norm()).fold(f64::MAX, f64::min);
                assert!(d < 2e-3, "{d}");
            }
            assert!((o.landmarks[10] - g.landmarks[10]).norm() < 1e-6);
        }
    }
}
