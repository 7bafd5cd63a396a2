//! Uniform-grid SDF sampling and marching-cubes extraction.

mod table;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headfield::{smoothing_weights, BoundField, SmoothingKernel};
use crate::scalar::Real;
use crate::vec3::{self, Vec3};

use table::{table, CORNERS, EDGES};

/// Axis-aligned sampling lattice. Node `(x, y, z)` is stored at
/// `(z * ny + y) * nx + x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub resolution: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::cube(128)
    }
}

impl GridSpec {
    /// `n^3` nodes over `[-1, 1]^3`.
    pub fn cube(n: usize) -> Self {
        Self {
            resolution: [n; 3],
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if self.resolution[k] < 2 {
                return Err(Error::InvalidConfig(format!(
                    "grid resolution {:?} must be at least 2 per axis",
                    self.resolution
                )));
            }
            if !(self.min[k] < self.max[k]) {
                return Err(Error::InvalidConfig(format!(
                    "grid bounds {:?}..{:?} are empty",
                    self.min, self.max
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| (self.max[k] - self.min[k]) / (self.resolution[k] - 1) as f64)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.resolution;
        (z * ny + y) * nx + x
    }

    pub fn node(&self, x: usize, y: usize, z: usize) -> Vec3<f64> {
        let c = self.cell_size();
        [
            self.min[0] + c[0] * x as f64,
            self.min[1] + c[1] * y as f64,
            self.min[2] + c[2] * z as f64,
        ]
    }

    /// Every node in storage order.
    pub fn nodes<T: Real>(&self) -> Vec<Vec3<T>> {
        let [nx, ny, nz] = self.resolution;
        let mut out = Vec::with_capacity(self.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(vec3::cast(self.node(x, y, z)));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid<T> {
    pub spec: GridSpec,
    pub values: Vec<T>,
}

impl<T: Real> ScalarGrid<T> {
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.values[self.spec.index(x, y, z)]
    }

    /// Sample an arbitrary function at every node, in parallel over slabs.
    pub fn from_fn<F: Fn(Vec3<T>) -> T + Sync>(spec: GridSpec, f: F) -> Result<Self> {
        spec.validate()?;
        let [nx, ny, nz] = spec.resolution;
        let values = (0..nz)
            .into_par_iter()
            .flat_map_iter(|z| {
                let f = &f;
                (0..ny).flat_map(move |y| (0..nx).map(move |x| f(vec3::cast(spec.node(x, y, z)))))
            })
            .collect();
        Ok(Self { spec, values })
    }

    /// Raw little-endian `f32` volume plus a JSON sidecar next to it.
    pub fn write_volume(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(4 * self.values.len());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let meta = serde_json::json!({
            "dims": self.spec.resolution,
            "min": self.spec.min,
            "max": self.spec.max,
            "layout": "x-fastest float32 little-endian",
        });
        fs::write(&sidecar, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| Error::io(&sidecar, e))
    }
}

/// Min-max normalized smoothing weight of every grid node.
pub fn grid_smoothing_weights<T: Real>(kernel: &SmoothingKernel, grid: &GridSpec) -> Result<Vec<T>> {
    grid.validate()?;
    smoothing_weights(kernel, &grid.nodes::<T>())
}

/// Signed distance at every node for one expression code. With `weights`,
/// each node's displacement is scaled by its smoothing weight.
pub fn evaluate_grid<T: Real>(
    field: &BoundField<T>,
    code: ArrayView1<T>,
    grid: &GridSpec,
    weights: Option<&[T]>,
) -> Result<ScalarGrid<T>> {
    grid.validate()?;
    if let Some(w) = weights {
        if w.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} smoothing weights for {} grid nodes",
                w.len(),
                grid.len()
            )));
        }
    }
    let deformer = field.deformer(code)?;
    let [nx, ny, nz] = grid.resolution;
    let zero = deformer.is_zero();
    let values = (0..nz)
        .into_par_iter()
        .flat_map_iter(|z| {
            let deformer = &deformer;
            (0..ny).flat_map(move |y| {
                (0..nx).map(move |x| {
                    let p = vec3::cast(grid.node(x, y, z));
                    if zero {
                        return field.base_sdf(p);
                    }
                    let w = weights.map_or(T::one(), |w| w[grid.index(x, y, z)]);
                    field.sdf_weighted(p, deformer, w)
                })
            })
        })
        .collect();
    Ok(ScalarGrid { spec: *grid, values })
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub triangles: Vec<[u32; 3]>,
}

impl<T: Real> Mesh<T> {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| vec3::cast::<T, f64>(self.vertices[i as usize]));
                0.5 * vec3::norm(vec3::cross(vec3::sub(b, a), vec3::sub(c, a)))
            })
            .sum()
    }

    /// Signed enclosed volume; positive when triangles wind outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| vec3::cast::<T, f64>(self.vertices[i as usize]));
                vec3::dot(a, vec3::cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Number of triangles using each undirected edge.
    pub fn edge_use_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_use_counts().values().all(|&c| c == 2)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn export_obj<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(self.to_obj().as_bytes())
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    /// Parse the `v`/`f` records of an OBJ document.
    pub fn parse_obj(text: &str) -> std::result::Result<Self, String> {
        let mut mesh = Self::default();
        for (line_no, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let c: Vec<f64> = parts
                        .map(|p| p.parse::<f64>().map_err(|e| format!("line {}: {e}", line_no + 1)))
                        .collect::<std::result::Result<_, _>>()?;
                    if c.len() != 3 {
                        return Err(format!("line {}: expected 3 coordinates", line_no + 1));
                    }
                    mesh.vertices.push([T::lit(c[0]), T::lit(c[1]), T::lit(c[2])]);
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|p| {
                            p.split('/')
                                .next()
                                .unwrap_or("")
                                .parse::<u32>()
                                .map_err(|e| format!("line {}: {e}", line_no + 1))
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    if idx.len() != 3 || idx.contains(&0) {
                        return Err(format!("line {}: expected 3 one-based indices", line_no + 1));
                    }
                    mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        let n = mesh.vertices.len() as u32;
        if mesh.triangles.iter().flatten().any(|&i| i >= n) {
            return Err("face index out of range".into());
        }
        Ok(mesh)
    }
}

/// Isosurface at `iso`; nodes below `iso` are inside. Triangles wind
/// counter-clockwise seen from outside.
pub fn marching_cubes<T: Real>(grid: &ScalarGrid<T>, iso: T) -> Result<Mesh<T>> {
    let spec = &grid.spec;
    spec.validate()?;
    if grid.values.len() != spec.len() {
        return Err(Error::Dimension(format!(
            "{} values for a {:?} grid",
            grid.values.len(),
            spec.resolution
        )));
    }
    if let Some(i) = grid.values.iter().position(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN at grid node {i}")));
    }
    let [nx, ny, nz] = spec.resolution;
    let cases = table();
    let mut mesh = Mesh::default();
    let mut vertex_of_edge: HashMap<(usize, usize), u32> = HashMap::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (x + o[0], y + o[1], z + o[2])
                };
                let mut mask = 0;
                let mut vals = [T::zero(); 8];
                for (c, v) in vals.iter_mut().enumerate() {
                    let (cx, cy, cz) = corner(c);
                    *v = grid.get(cx, cy, cz);
                    if *v < iso {
                        mask |= 1 << c;
                    }
                }
                let tris = &cases[mask];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let (a, b) = EDGES[e];
                            let (pa, pb) = (corner(a), corner(b));
                            let (lo, hi) = if spec.index(pa.0, pa.1, pa.2) < spec.index(pb.0, pb.1, pb.2) {
                                (pa, pb)
                            } else {
                                (pb, pa)
                            };
                            let key = (spec.index(lo.0, lo.1, lo.2), spec.index(hi.0, hi.1, hi.2));
                            local[e] = *vertex_of_edge.entry(key).or_insert_with(|| {
                                let (va, vb) = (grid.get(lo.0, lo.1, lo.2), grid.get(hi.0, hi.1, hi.2));
                                let t = (iso - va) / (vb - va);
                                let na: Vec3<T> = vec3::cast(spec.node(lo.0, lo.1, lo.2));
                                let nb: Vec3<T> = vec3::cast(spec.node(hi.0, hi.1, hi.2));
                                mesh.vertices.push(vec3::add(na, vec3::scale(vec3::sub(nb, na), t)));
                                (mesh.vertices.len() - 1) as u32
                            });
                        }
                        *slot = local[e];
                    }
                    let [a, b, c] = ids.map(|i| mesh.vertices[i as usize]);
                    let n = vec3::cross(vec3::sub(b, a), vec3::sub(c, a));
                    if n.iter().any(|v| *v != T::zero()) {
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headfield::{BaseShape, FieldSpec, EXPRESSION_DIM};
    use ndarray::Array1;

    fn sphere_grid(n: usize, r: f64, shift: Vec3<f64>) -> ScalarGrid<f64> {
        ScalarGrid::from_fn(GridSpec::cube(n), |p: Vec3<f64>| vec3::norm(vec3::sub(p, shift)) - r).unwrap()
    }

    #[test]
    fn grid_validation_and_indexing() {
        assert!(GridSpec::cube(1).validate().is_err());
        let g = GridSpec::cube(4);
        assert_eq!(g.index(1, 2, 3), (3 * 4 + 2) * 4 + 1);
        assert_eq!(g.node(0, 0, 0), [-1.0; 3]);
        assert_eq!(g.node(3, 3, 3), [1.0; 3]);
        assert_eq!(g.nodes::<f64>()[g.index(1, 2, 3)], g.node(1, 2, 3));
    }

    #[test]
    fn all_positive_grid_is_empty() {
        let g = ScalarGrid::from_fn(GridSpec::cube(8), |_| 1.0f64).unwrap();
        let m = marching_cubes(&g, 0.0).unwrap();
        assert!(m.vertices.is_empty() && m.triangles.is_empty());
    }

    #[test]
    fn nan_is_rejected() {
        let mut g = sphere_grid(8, 0.5, [0.0; 3]);
        g.values[5] = f64::NAN;
        assert!(matches!(marching_cubes(&g, 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn sphere_is_accurate_closed_and_outward() {
        let g = sphere_grid(64, 0.5, [0.0; 3]);
        let m = marching_cubes(&g, 0.0).unwrap();
        let cell = g.spec.cell_size()[0];
        assert!(m.vertices.iter().all(|v| (vec3::norm(*v) - 0.5).abs() < 1.5 * cell));
        let area = 4.0 * std::f64::consts::PI * 0.25;
        assert!((m.area() - area).abs() < 0.02 * area);
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn plane_vertices_are_exact() {
        let g = ScalarGrid::from_fn(GridSpec::cube(17), |p: Vec3<f64>| p[2] - 0.1).unwrap();
        let m = marching_cubes(&g, 0.0).unwrap();
        assert!(!m.vertices.is_empty());
        assert!(m.vertices.iter().all(|v| (v[2] - 0.1).abs() < 1e-6));
    }

    #[test]
    fn translation_equivariance() {
        let n = 33;
        let cell = GridSpec::cube(n).cell_size()[0];
        let a = marching_cubes(&sphere_grid(n, 0.4, [0.0; 3]), 0.0).unwrap();
        let b = marching_cubes(&sphere_grid(n, 0.4, [cell, 0.0, 0.0]), 0.0).unwrap();
        assert_eq!(a.vertices.len(), b.vertices.len());
        let mut pa: Vec<Vec3<f64>> = a.vertices.iter().map(|v| [v[0] + cell, v[1], v[2]]).collect();
        let mut pb = b.vertices.clone();
        let key = |v: &Vec3<f64>| ((v[0] * 1e5).round() as i64, (v[1] * 1e5).round() as i64, (v[2] * 1e5).round() as i64);
        pa.sort_by_key(key);
        pb.sort_by_key(key);
        for (u, v) in pa.iter().zip(&pb) {
            assert!(vec3::norm(vec3::sub(*u, *v)) < 1e-6);
        }
    }

    #[test]
    fn obj_roundtrip() {
        let empty = Mesh::<f64>::default();
        assert_eq!(empty.to_obj(), "");
        let tri = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.25]],
            triangles: vec![[0, 1, 2]],
        };
        assert_eq!(Mesh::<f64>::parse_obj(&tri.to_obj()).unwrap(), tri);
        let m = marching_cubes(&sphere_grid(20, 0.5, [0.0; 3]), 0.0).unwrap();
        let text = m.to_obj();
        let back = Mesh::<f64>::parse_obj(&text).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        assert_eq!(back.triangles, m.triangles);
        for (u, v) in back.vertices.iter().zip(&m.vertices) {
            assert!(vec3::norm(vec3::sub(*u, *v)) < 1e-6);
        }
        assert!(Mesh::<f64>::parse_obj("f 1 2 3\n").is_err());
    }

    #[test]
    fn field_grid_examples() {
        let spec = FieldSpec {
            shape: BaseShape::sphere(0.5),
            ..FieldSpec::default()
        };
        let field = spec.bind::<f64>().unwrap();
        let grid = GridSpec::cube(9);
        let zero = Array1::zeros(EXPRESSION_DIM);
        let g = evaluate_grid(&field, zero.view(), &grid, None).unwrap();
        assert_eq!(g.values.len(), 9 * 9 * 9);
        for (p, v) in grid.nodes::<f64>().iter().zip(&g.values) {
            assert!((vec3::norm(*p) - 0.5 - v).abs() < 1e-12);
        }
        let w = grid_smoothing_weights(&Default::default(), &grid).unwrap();
        assert_eq!(evaluate_grid(&field, zero.view(), &grid, Some(&w)).unwrap(), g);
    }
}
