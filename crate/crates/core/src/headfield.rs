//! Analytic stand-in for a parametric head model.
//!
//! The identity decoder is a smooth union of an ellipsoid head and a vertical
//! capsule neck whose dimensions come from the first entries of the identity
//! code. The expression decoder displaces query points by a sum of Gaussian
//! radial basis functions laid out around the mouth. Each one pushes along
//! the neutral surface normal at its center by a seeded linear function of
//! the expression code.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::vec3::{self, Vec3};

pub const IDENTITY_DIM: usize = 1344;
pub const EXPRESSION_DIM: usize = 200;
pub const RBF_COUNT: usize = 16;
/// Standard deviation of every radial basis function.
pub const RBF_WIDTH: f64 = 0.09;
/// Leading expression entries that drive the deformation; the rest are
/// inert. Each RBF moves along one direction, so the field can never
/// resolve more code directions than it has RBFs.
pub const ACTIVE_EXPRESSION_DIM: usize = RBF_COUNT;
/// Upper bound on `|delta|` for a unit-norm expression code.
pub const DEFORMATION_BOUND: f64 = 0.1;

const SHAPE_ENTRIES: usize = 8;
/// Mouth location relative to the head ellipsoid, in units of its radii.
const MOUTH_DIRECTION: [f64; 3] = [0.0, -0.69, 0.667];
/// RBFs per ring around the mouth; ring `k` sits `k` steps away.
const CENTER_RINGS: [usize; 3] = [1, 5, 10];
const CENTER_RING_STEP: f64 = 0.27;
const CENTER_JITTER: f64 = 0.02;
/// Cosine of the half-angle of the facial cap around the mouth direction.
const FACE_COS: f64 = 0.5;
const RADIUS_RANGE: (f64, f64) = (0.2, 0.9);

/// Geometry read from the leading identity-code entries, in the order
/// `rx, ry, rz, neck radius, neck length, blend, head center y, neck z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseShape {
    pub radii: [f64; 3],
    /// Zero removes the neck.
    pub neck_radius: f64,
    pub neck_length: f64,
    /// Smooth-union width between head and neck.
    pub blend: f64,
    pub head_center_y: f64,
    pub neck_z: f64,
}

impl Default for BaseShape {
    fn default() -> Self {
        Self {
            radii: [0.55, 0.68, 0.6],
            neck_radius: 0.24,
            neck_length: 0.45,
            blend: 0.08,
            head_center_y: 0.12,
            neck_z: -0.05,
        }
    }
}

impl BaseShape {
    /// Centered sphere without a neck.
    pub fn sphere(radius: f64) -> Self {
        Self {
            radii: [radius; 3],
            neck_radius: 0.0,
            neck_length: 0.0,
            blend: 0.08,
            head_center_y: 0.0,
            neck_z: 0.0,
        }
    }

    pub fn is_sphere(&self) -> bool {
        self.neck_radius == 0.0 && self.radii.iter().all(|&r| r == self.radii[0])
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = RADIUS_RANGE;
        if self.radii.iter().any(|&r| !(lo..=hi).contains(&r)) {
            return Err(Error::InvalidConfig(format!(
                "head radii {:?} outside [{lo}, {hi}]",
                self.radii
            )));
        }
        if self.neck_radius != 0.0 && !(0.05..=0.5).contains(&self.neck_radius) {
            return Err(Error::InvalidConfig(format!(
                "neck radius {} must be 0 or within [0.05, 0.5]",
                self.neck_radius
            )));
        }
        if !(0.0..=1.0).contains(&self.neck_length) {
            return Err(Error::InvalidConfig("neck length must be within [0, 1]".into()));
        }
        if !(self.blend > 0.0 && self.blend <= 0.3) {
            return Err(Error::InvalidConfig("blend must be within (0, 0.3]".into()));
        }
        if self.head_center_y.abs() > 0.5 || self.neck_z.abs() > 0.5 {
            return Err(Error::InvalidConfig("head center and neck offset must be within [-0.5, 0.5]".into()));
        }
        Ok(())
    }

    fn entries(&self) -> [f64; SHAPE_ENTRIES] {
        let [rx, ry, rz] = self.radii;
        [rx, ry, rz, self.neck_radius, self.neck_length, self.blend, self.head_center_y, self.neck_z]
    }

    pub fn to_identity<T: Real>(&self) -> IdentityCode<T> {
        let mut values = Array1::zeros(IDENTITY_DIM);
        for (v, e) in values.iter_mut().zip(self.entries()) {
            *v = T::lit(e);
        }
        IdentityCode { values }
    }

    pub fn from_identity<T: Real>(id: &IdentityCode<T>) -> Self {
        let e: Vec<f64> = id.values.iter().take(SHAPE_ENTRIES).map(|v| v.as_f64()).collect();
        Self {
            radii: [e[0], e[1], e[2]],
            neck_radius: e[3],
            neck_length: e[4],
            blend: e[5],
            head_center_y: e[6],
            neck_z: e[7],
        }
    }
}

/// 1344-dimensional identity code. Only the leading entries affect geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCode<T> {
    pub values: Array1<T>,
}

impl<T: Real> IdentityCode<T> {
    pub fn new(values: Array1<T>) -> Result<Self> {
        if values.len() != IDENTITY_DIM {
            return Err(Error::Dimension(format!(
                "identity code has {} entries, expected {IDENTITY_DIM}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> BaseShape {
        BaseShape::from_identity(self)
    }
}

/// Everything needed to rebuild a field: basis seed and base geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSpec {
    pub seed: u64,
    pub shape: BaseShape,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            seed: rng::DEFAULT_SEED,
            shape: BaseShape::default(),
        }
    }
}

impl FieldSpec {
    pub fn identity<T: Real>(&self) -> IdentityCode<T> {
        self.shape.to_identity()
    }

    pub fn bind<T: Real>(&self) -> Result<BoundField<T>> {
        HeadField::new(self.seed).bind(&self.identity())
    }
}

/// Seeded, identity-independent part of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadField<T> {
    pub seed: u64,
    /// Unit directions from the head center to each RBF center, in
    /// unit-head coordinates.
    directions: Vec<Vec3<f64>>,
    /// Unit code loadings, one per RBF, zero beyond the active entries.
    loadings: Vec<Array1<T>>,
}

impl<T: Real> HeadField<T> {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::keyed(seed, &[rng::stream::FIELD]);
        let mouth = vec3::scale(MOUTH_DIRECTION, 1.0 / vec3::norm(MOUTH_DIRECTION));
        // One RBF at the mouth and two rings around it, with seeded phases
        // and jitter, so that all of them sit apart inside the face.
        let side = vec3::cross(mouth, [1.0, 0.0, 0.0]);
        let e1 = vec3::scale(side, 1.0 / vec3::norm(side));
        let e2 = vec3::cross(mouth, e1);
        let mut directions = Vec::with_capacity(RBF_COUNT);
        for (ring, count) in CENTER_RINGS.iter().enumerate() {
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            for i in 0..*count {
                let polar = CENTER_RING_STEP * ring as f64 + CENTER_JITTER * rng::normal(&mut r);
                let azimuth = phase + std::f64::consts::TAU * i as f64 / *count as f64;
                let t = vec3::add(vec3::scale(e1, azimuth.cos()), vec3::scale(e2, azimuth.sin()));
                directions.push(vec3::add(vec3::scale(mouth, polar.cos()), vec3::scale(t, polar.sin())));
            }
        }
        // Orthonormal loadings, so no code direction is favored over another.
        let gauss = DMatrix::<f64>::from_fn(RBF_COUNT, ACTIVE_EXPRESSION_DIM, |_, _| rng::normal(&mut r));
        let q = gauss.qr().q();
        let loadings = (0..RBF_COUNT)
            .map(|j| {
                let mut full = Array1::zeros(EXPRESSION_DIM);
                for k in 0..ACTIVE_EXPRESSION_DIM {
                    full[k] = T::lit(q[(j, k)]);
                }
                full
            })
            .collect();
        Self { seed, directions, loadings }
    }

    /// Specialize the field to one identity. Each RBF sits on the neutral
    /// ellipsoid and pushes along its outward normal there.
    pub fn bind(&self, id: &IdentityCode<T>) -> Result<BoundField<T>> {
        let shape = id.shape();
        shape.validate()?;
        let center = [0.0, shape.head_center_y, 0.0];
        let centers: Vec<Vec3<f64>> = self
            .directions
            .iter()
            .map(|u| [0, 1, 2].map(|k| center[k] + shape.radii[k] * u[k]))
            .collect();
        let unit: Vec<Array2<f64>> = self
            .directions
            .iter()
            .zip(&self.loadings)
            .map(|(u, a)| {
                let n = [0, 1, 2].map(|k| u[k] / shape.radii[k]);
                let n = vec3::scale(n, 1.0 / vec3::norm(n));
                Array2::from_shape_fn((3, EXPRESSION_DIM), |(i, k)| n[i] * a[k].as_f64())
            })
            .collect();
        let gain = T::lit(DEFORMATION_BOUND / deformation_peak(&centers, &unit));
        let neck = (shape.neck_radius > 0.0).then(|| {
            let top = [0.0, shape.head_center_y - 0.5 * shape.radii[1], shape.neck_z];
            let bottom = [top[0], top[1] - shape.neck_length, top[2]];
            Neck {
                top: vec3::cast(top),
                bottom: vec3::cast(bottom),
                radius: T::lit(shape.neck_radius),
            }
        });
        Ok(BoundField {
            shape,
            radii: shape.radii.map(T::lit),
            head_center: vec3::cast(center),
            neck,
            blend: T::lit(shape.blend),
            centers: centers.into_iter().map(vec3::cast).collect(),
            weights: unit.iter().map(|w| w.mapv(|v| T::lit(v) * gain)).collect(),
            inv_two_var: T::lit(1.0 / (2.0 * RBF_WIDTH * RBF_WIDTH)),
        })
    }
}

/// Largest operator norm of the code-to-displacement map
/// `sum_j B_j(x) W_j` over space, with a small safety margin. A lattice
/// around the centers seeds a compass search from the best candidates.
fn deformation_peak(centers: &[Vec3<f64>], maps: &[Array2<f64>]) -> f64 {
    let k = 1.0 / (2.0 * RBF_WIDTH * RBF_WIDTH);
    let cross: Vec<Vec<Matrix3<f64>>> = maps
        .iter()
        .map(|a| {
            maps.iter()
                .map(|b| {
                    let g = a.dot(&b.t());
                    Matrix3::from_fn(|i, j| g[[i, j]])
                })
                .collect()
        })
        .collect();
    let norm = |x: Vec3<f64>| -> f64 {
        let b: Vec<f64> = centers
            .iter()
            .map(|c| (-vec3::dot(vec3::sub(x, *c), vec3::sub(x, *c)) * k).exp())
            .collect();
        let mut g = Matrix3::zeros();
        for (j, row) in cross.iter().enumerate() {
            for (l, m) in row.iter().enumerate() {
                g += m * (b[j] * b[l]);
            }
        }
        g.symmetric_eigenvalues().max().max(0.0).sqrt()
    };
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in centers {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a] - 2.0 * RBF_WIDTH);
            hi[a] = hi[a].max(c[a] + 2.0 * RBF_WIDTH);
        }
    }
    let step = 0.5 * RBF_WIDTH;
    let counts = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / step).ceil() as usize + 1);
    let mut candidates: Vec<(f64, Vec3<f64>)> = centers.iter().map(|c| (norm(*c), *c)).collect();
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for l in 0..counts[2] {
                let x = [lo[0] + i as f64 * step, lo[1] + j as f64 * step, lo[2] + l as f64 * step];
                candidates.push((norm(x), x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = 0.0f64;
    for &(mut value, mut x) in candidates.iter().take(8) {
        let mut h = step;
        while h > 1e-5 {
            let mut moved = false;
            for a in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut y = x;
                    y[a] += sign * h;
                    let v = norm(y);
                    if v > value {
                        value = v;
                        x = y;
                        moved = true;
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        best = best.max(value);
    }
    best * 1.01
}

/// Where [`BoundField::surface_samples`] draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceRegion {
    Whole,
    /// A cap of the head around the mouth, like a masked facial scan.
    Face,
}

#[derive(Debug, Clone, PartialEq)]
struct Neck<T> {
    top: Vec3<T>,
    bottom: Vec3<T>,
    radius: T,
}

/// Field specialized to one identity code.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundField<T> {
    pub shape: BaseShape,
    radii: Vec3<T>,
    head_center: Vec3<T>,
    neck: Option<Neck<T>>,
    blend: T,
    centers: Vec<Vec3<T>>,
    /// Scaled `3 x 200` maps, one per RBF.
    weights: Vec<Array2<T>>,
    inv_two_var: T,
}

/// Per-code precomputation: the 3D offset each RBF contributes at full
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformer<T> {
    offsets: Vec<Vec3<T>>,
}

impl<T: Real> Deformer<T> {
    pub fn is_zero(&self) -> bool {
        self.offsets.iter().all(|o| o.iter().all(|v| *v == T::zero()))
    }
}

impl<T: Real> BoundField<T> {
    pub fn centers(&self) -> &[Vec3<T>] {
        &self.centers
    }

    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    pub fn head_center(&self) -> Vec3<T> {
        self.head_center
    }

    pub fn radii(&self) -> Vec3<T> {
        self.radii
    }

    /// Signed distance of the undeformed shape and its gradient.
    pub fn base_sdf_grad(&self, y: Vec3<T>) -> (T, Vec3<T>) {
        let p = vec3::sub(y, self.head_center);
        let (head, head_grad) = ellipsoid(p, self.radii);
        match &self.neck {
            None => (head, head_grad),
            Some(neck) => {
                let (cap, cap_grad) = capsule(y, neck);
                let (d, wa, wb) = smooth_min(head, cap, self.blend);
                let g = vec3::add(vec3::scale(head_grad, wa), vec3::scale(cap_grad, wb));
                (d, g)
            }
        }
    }

    pub fn base_sdf(&self, y: Vec3<T>) -> T {
        self.base_sdf_grad(y).0
    }

    /// Activations of every RBF at `x`.
    pub fn rbf(&self, x: Vec3<T>) -> [T; RBF_COUNT] {
        let mut b = [T::zero(); RBF_COUNT];
        for (bj, c) in b.iter_mut().zip(&self.centers) {
            let d = vec3::sub(x, *c);
            *bj = (-vec3::dot(d, d) * self.inv_two_var).exp();
        }
        b
    }

    pub fn deformer(&self, code: ArrayView1<T>) -> Result<Deformer<T>> {
        if code.len() != EXPRESSION_DIM {
            return Err(Error::Dimension(format!(
                "expression code has {} entries, expected {EXPRESSION_DIM}",
                code.len()
            )));
        }
        let offsets = self
            .weights
            .iter()
            .map(|w| {
                let u = w.dot(&code);
                [u[0], u[1], u[2]]
            })
            .collect();
        Ok(Deformer { offsets })
    }

    pub fn zero_deformer(&self) -> Deformer<T> {
        Deformer {
            offsets: vec![[T::zero(); 3]; RBF_COUNT],
        }
    }

    pub fn displacement(&self, x: Vec3<T>, deformer: &Deformer<T>) -> Vec3<T> {
        let b = self.rbf(x);
        let mut d = [T::zero(); 3];
        for (bj, u) in b.iter().zip(&deformer.offsets) {
            d = vec3::add(d, vec3::scale(*u, *bj));
        }
        d
    }

    /// Signed distance of `x` under the expression encoded by `deformer`,
    /// with the displacement scaled by `weight` (1 for no smoothing).
    pub fn sdf_weighted(&self, x: Vec3<T>, deformer: &Deformer<T>, weight: T) -> T {
        let d = self.displacement(x, deformer);
        self.base_sdf(vec3::add(x, vec3::scale(d, weight)))
    }

    pub fn sdf(&self, x: Vec3<T>, deformer: &Deformer<T>) -> T {
        self.sdf_weighted(x, deformer, T::one())
    }

    /// Signed distance and its gradient with respect to the query point.
    pub fn sdf_spatial_grad(&self, x: Vec3<T>, deformer: &Deformer<T>) -> (T, Vec3<T>) {
        let b = self.rbf(x);
        let mut d = [T::zero(); 3];
        for (bj, u) in b.iter().zip(&deformer.offsets) {
            d = vec3::add(d, vec3::scale(*u, *bj));
        }
        let (s, g) = self.base_sdf_grad(vec3::add(x, d));
        // grad = (I + sum_j u_j dB_j^T)^T g
        let mut grad = g;
        let two = T::lit(2.0);
        for ((bj, u), c) in b.iter().zip(&deformer.offsets).zip(&self.centers) {
            let coef = vec3::dot(*u, g) * *bj * (-two * self.inv_two_var);
            grad = vec3::add(grad, vec3::scale(vec3::sub(x, *c), coef));
        }
        (s, grad)
    }

    /// Newton iterations onto the zero level set.
    pub fn project_to_surface(&self, mut x: Vec3<T>, deformer: &Deformer<T>, iters: usize) -> Vec3<T> {
        for _ in 0..iters {
            let (s, g) = self.sdf_spatial_grad(x, deformer);
            let gg = vec3::dot(g, g);
            if gg == T::zero() {
                break;
            }
            x = vec3::sub(x, vec3::scale(g, s / gg));
        }
        x
    }

    /// Points on the deformed surface. Directions are drawn uniformly over
    /// the sphere (or the part of it in `region`), mapped onto the head
    /// ellipsoid and projected onto the zero level set.
    pub fn surface_samples<R: Rng + ?Sized>(
        &self,
        deformer: &Deformer<T>,
        count: usize,
        region: SurfaceRegion,
        rng: &mut R,
    ) -> Vec<Vec3<T>> {
        let mouth = vec3::scale(MOUTH_DIRECTION, 1.0 / vec3::norm(MOUTH_DIRECTION));
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let u = [rng::normal(rng), rng::normal(rng), rng::normal(rng)];
            let n = vec3::norm(u);
            if n < 1e-9 {
                continue;
            }
            let u = vec3::scale(u, 1.0 / n);
            if region == SurfaceRegion::Face && vec3::dot(u, mouth) < FACE_COS {
                continue;
            }
            let start: Vec3<T> = [0, 1, 2].map(|k| self.head_center[k] + self.radii[k] * T::lit(u[k]));
            let p = self.project_to_surface(start, deformer, 30);
            if self.sdf(p, deformer).abs() < T::lit(1e-5) && p.iter().all(|v| v.abs() < T::one()) {
                out.push(p);
            }
        }
        out
    }

    /// Rows `g(p)^T A(p)` of the code-to-SDF Jacobian at neutral surface
    /// points, where `A(p)` maps codes to displacements.
    pub fn code_jacobian_row(&self, p: Vec3<T>, grad: Vec3<T>) -> Array1<T> {
        let b = self.rbf(p);
        let mut row = Array1::zeros(EXPRESSION_DIM);
        for (bj, w) in b.iter().zip(&self.weights) {
            for k in 0..3 {
                row.scaled_add(*bj * grad[k], &w.row(k));
            }
        }
        row
    }

    /// Orthonormal rows spanning the `rank` best-observed expression
    /// directions at the given neutral surface points. The field can only
    /// express a low-dimensional family of deformations, so codes outside
    /// this span are invisible to any surface measurement.
    pub fn observable_basis(&self, rank: usize, points: &[Vec3<T>]) -> Result<Array2<T>> {
        if rank == 0 || rank > EXPRESSION_DIM {
            return Err(Error::InvalidConfig(format!("basis rank {rank} out of range")));
        }
        let mut gram = DMatrix::<f64>::zeros(EXPRESSION_DIM, EXPRESSION_DIM);
        for &p in points {
            let (_, g) = self.base_sdf_grad(p);
            let row: Vec<f64> = self.code_jacobian_row(p, g).iter().map(|v| v.as_f64()).collect();
            let r = nalgebra::DVector::from_vec(row);
            gram.ger(1.0, &r, &r, 1.0);
        }
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..EXPRESSION_DIM).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]];
        let cutoff = eig.eigenvalues[order[rank - 1]];
        if !(cutoff > top * 1e-10) {
            return Err(Error::Rank(format!(
                "only fewer than {rank} expression directions are observable at these points"
            )));
        }
        let mut basis = Array2::zeros((rank, EXPRESSION_DIM));
        for (r, &i) in order.iter().take(rank).enumerate() {
            let v = eig.eigenvectors.column(i);
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (k, x) in v.iter().enumerate() {
                basis[[r, k]] = T::lit(sign * x);
            }
        }
        Ok(basis)
    }
}

/// Approximate ellipsoid distance `k0 (k0 - 1) / k1`, exact for spheres.
fn ellipsoid<T: Real>(p: Vec3<T>, r: Vec3<T>) -> (T, Vec3<T>) {
    let q = [p[0] / r[0], p[1] / r[1], p[2] / r[2]];
    let u = [q[0] / r[0], q[1] / r[1], q[2] / r[2]];
    let k0 = vec3::norm(q);
    let k1 = vec3::norm(u);
    if k1 == T::zero() {
        let rmin = r[0].min(r[1]).min(r[2]);
        return (-rmin, [T::zero(); 3]);
    }
    let d = k0 * (k0 - T::one()) / k1;
    let two = T::lit(2.0);
    let mut g = [T::zero(); 3];
    for k in 0..3 {
        let r2 = r[k] * r[k];
        let dk0 = p[k] / (r2 * k0);
        let dk1 = p[k] / (r2 * r2 * k1);
        g[k] = ((two * k0 - T::one()) * dk0 - d * dk1) / k1;
    }
    (d, g)
}

fn capsule<T: Real>(p: Vec3<T>, neck: &Neck<T>) -> (T, Vec3<T>) {
    let axis = vec3::sub(neck.bottom, neck.top);
    let len2 = vec3::dot(axis, axis);
    let h = if len2 > T::zero() {
        (vec3::dot(vec3::sub(p, neck.top), axis) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    let closest = vec3::add(neck.top, vec3::scale(axis, h));
    let diff = vec3::sub(p, closest);
    let dist = vec3::norm(diff);
    let g = if dist > T::zero() {
        vec3::scale(diff, T::one() / dist)
    } else {
        [T::zero(); 3]
    };
    (dist - neck.radius, g)
}

/// Polynomial smooth minimum and its partial derivatives.
fn smooth_min<T: Real>(a: T, b: T, k: T) -> (T, T, T) {
    let half = T::lit(0.5);
    let h = (half + half * (b - a) / k).max(T::zero()).min(T::one());
    let d = b * (T::one() - h) + a * h - k * h * (T::one() - h);
    (d, h, T::one() - h)
}

/// Displacement `delta(x)` for an identity/expression pair.
pub fn expression_deformation<T: Real>(
    field: &HeadField<T>,
    x: Vec3<T>,
    id: &IdentityCode<T>,
    code: ArrayView1<T>,
) -> Result<Vec3<T>> {
    let bound = field.bind(id)?;
    let deformer = bound.deformer(code)?;
    Ok(bound.displacement(x, &deformer))
}

/// Signed distance `base(x + delta(x))`.
pub fn identity_sdf<T: Real>(
    field: &HeadField<T>,
    x: Vec3<T>,
    id: &IdentityCode<T>,
    code: ArrayView1<T>,
) -> Result<T> {
    let bound = field.bind(id)?;
    let deformer = bound.deformer(code)?;
    Ok(bound.sdf(x, &deformer))
}

/// Anisotropic Gaussian that confines deformations to the mouth region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingKernel {
    pub center: [f64; 3],
    pub sigma: [f64; 3],
}

impl Default for SmoothingKernel {
    fn default() -> Self {
        Self {
            center: [0.0, -0.35, 0.3],
            sigma: [0.35, 0.35, 0.35],
        }
    }
}

impl SmoothingKernel {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing kernel needs finite center and positive widths, got {:?}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Axis-scaled distance to the center.
    pub fn distance(&self, p: Vec3<f64>) -> f64 {
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.sigma[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Unnormalized Gaussian density at `p`.
    pub fn density(&self, p: Vec3<f64>) -> f64 {
        let d = self.distance(p);
        let norm = 2.0 * std::f64::consts::PI * self.sigma[0] * self.sigma[1] * self.sigma[2];
        (-0.5 * d * d).exp() / norm
    }
}

/// Gaussian weights min-max normalized over the point set.
pub fn smoothing_weights<T: Real>(kernel: &SmoothingKernel, points: &[Vec3<T>]) -> Result<Vec<T>> {
    kernel.validate()?;
    if points.len() < 2 {
        return Err(Error::InsufficientInput("smoothing needs at least two points".into()));
    }
    let raw: Vec<f64> = points.iter().map(|p| kernel.density(vec3::cast(*p))).collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    if !(hi > lo) {
        return Err(Error::Degenerate("all points have the same smoothing weight".into()));
    }
    Ok(raw.into_iter().map(|w| T::lit((w - lo) / (hi - lo))).collect())
}

/// Scale row `i` of `deltas` by `weights[i]`.
pub fn smooth_deformations<T: Real>(deltas: &Array2<T>, weights: &[T]) -> Result<Array2<T>> {
    if deltas.nrows() != weights.len() || deltas.ncols() != 3 {
        return Err(Error::Dimension(format!(
            "{:?} deformations against {} weights",
            deltas.dim(),
            weights.len()
        )));
    }
    let mut out = deltas.clone();
    for (mut row, &w) in out.rows_mut().into_iter().zip(weights) {
        row *= w;
    }
    Ok(out)
}
