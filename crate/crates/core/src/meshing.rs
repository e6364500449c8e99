//! Textured mesh extraction: RGB-D capture along the meshing spiral, TSDF
//! fusion, and zero-level-set triangulation.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{spiral_path, Camera, RigSpec, SpiralMode};
use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::renderer::{render_rgbd, RenderConfig};
use crate::splat::{parse_ply_header, read_vertex_rows, validate, SplatCloud};

/// Voxel grid of truncated signed distances. Stores running sums so the
/// update is a plain weighted average.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    /// Center of voxel `(0, 0, 0)`.
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    sdf_sum: Vec<f32>,
    weight: Vec<f32>,
    color_sum: Vec<[f32; 3]>,
}

const MAX_VOXELS: usize = 1 << 28;

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3], truncation: f64) -> Result<Self> {
        if !(voxel_size > 0.0) || !(truncation > 0.0) {
            return Err(Error::param("voxel size and truncation must be > 0"));
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = match n {
            Some(n) if n > 0 && n <= MAX_VOXELS => n,
            _ => return Err(Error::param(format!("unsupported volume dims {dims:?}"))),
        };
        Ok(Self {
            origin,
            voxel_size,
            dims,
            truncation,
            sdf_sum: vec![0.0; n],
            weight: vec![0.0; n],
            color_sum: vec![[0.0; 3]; n],
        })
    }

    /// Grid covering the axis-aligned box `[lo, hi]`.
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, voxel_size: f64, truncation: f64) -> Result<Self> {
        let ext = hi - lo;
        let dims = [0, 1, 2].map(|a| (ext[a] / voxel_size).ceil().max(0.0) as usize + 1);
        Self::new(lo, voxel_size, dims, truncation)
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weight[self.index(i, j, k)] as f64
    }

    /// `None` while unobserved.
    pub fn sdf(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let idx = self.index(i, j, k);
        let w = self.weight[idx];
        (w > 0.0).then(|| (self.sdf_sum[idx] / w) as f64)
    }

    pub fn color(&self, i: usize, j: usize, k: usize) -> Option<[f64; 3]> {
        let idx = self.index(i, j, k);
        let w = self.weight[idx];
        (w > 0.0).then(|| self.color_sum[idx].map(|c| (c / w) as f64))
    }

    /// Overwrites one voxel, clamping the distance to the truncation band.
    pub fn set_voxel(&mut self, i: usize, j: usize, k: usize, sdf: f64, weight: f64, color: [f64; 3]) {
        let idx = self.index(i, j, k);
        let s = sdf.clamp(-self.truncation, self.truncation);
        self.sdf_sum[idx] = (s * weight) as f32;
        self.weight[idx] = weight as f32;
        self.color_sum[idx] = color.map(|c| (c * weight) as f32);
    }

    /// Same observations with the sign of every distance reversed.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        out.sdf_sum.iter_mut().for_each(|s| *s = -*s);
        out
    }

    pub fn observed_voxels(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Box spanned by voxel centers.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let hi = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (self.origin, hi)
    }
}

/// Projective TSDF update with unit weight per observation. Pixels with a
/// non-finite depth are skipped.
pub fn tsdf_integrate(vol: &mut TsdfVolume, depth: &Plane, color: &Image, cam: &Camera) -> Result<()> {
    if depth.width != cam.width || depth.height != cam.height || color.width != cam.width || color.height != cam.height {
        return Err(Error::param("depth and color must match the camera size"));
    }
    let [nx, ny, _] = vol.dims;
    let slab = nx * ny;
    let (origin, vs, trunc) = (vol.origin, vol.voxel_size, vol.truncation);
    vol.sdf_sum
        .par_chunks_mut(slab)
        .zip(vol.weight.par_chunks_mut(slab))
        .zip(vol.color_sum.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(k, ((sdf, weight), rgb))| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64) * vs;
                    let Some((px, z)) = cam.project(&p) else { continue };
                    if px.x < 0.0 || px.y < 0.0 {
                        continue;
                    }
                    let (u, v) = (px.x as usize, px.y as usize);
                    if u >= cam.width || v >= cam.height {
                        continue;
                    }
                    let d = depth.get(u, v);
                    if !d.is_finite() {
                        continue;
                    }
                    let s = d - z;
                    if s < -trunc {
                        continue;
                    }
                    let idx = j * nx + i;
                    sdf[idx] += s.min(trunc) as f32;
                    weight[idx] += 1.0;
                    let c = color.pixel(u, v);
                    for a in 0..3 {
                        rgb[idx][a] += c[a] as f32;
                    }
                }
            }
        });
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    /// Counter-clockwise seen from the outside.
    pub triangles: Vec<[usize; 3]>,
    pub colors: Vec<[f64; 3]>,
}

const MIN_AREA: f64 = 1e-12;

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.vertices.len() {
            return Err(Error::param("one color per vertex required"));
        }
        for (f, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= self.vertices.len()) {
                return Err(Error::param(format!("triangle {f} indexes past the vertex table")));
            }
            if self.area(f) <= MIN_AREA {
                return Err(Error::Degenerate(format!("triangle {f} has zero area")));
            }
        }
        Ok(())
    }

    pub fn corners(&self, f: usize) -> [Vector3<f64>; 3] {
        self.triangles[f].map(|i| self.vertices[i])
    }

    pub fn area(&self, f: usize) -> f64 {
        let [a, b, c] = self.corners(f);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Unit face normal; `None` for degenerate faces.
    pub fn face_normal(&self, f: usize) -> Option<Vector3<f64>> {
        let [a, b, c] = self.corners(f);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        (len > 2.0 * MIN_AREA).then(|| n / len)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|f| self.area(f)).sum()
    }

    /// Binary little-endian PLY with per-vertex RGB.
    pub fn to_ply(&self) -> Vec<u8> {
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nelement face {}\n\
             property list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        );
        let mut out = header.into_bytes();
        for (v, c) in self.vertices.iter().zip(&self.colors) {
            for a in 0..3 {
                out.extend_from_slice(&(v[a] as f32).to_le_bytes());
            }
            for a in 0..3 {
                out.push((c[a].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        for t in &self.triangles {
            out.push(3);
            for &i in t {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        }
        out
    }

    /// Reads the layout written by [`TriangleMesh::to_ply`]; colors are
    /// optional.
    pub fn from_ply(bytes: &[u8]) -> Result<Self> {
        let header = parse_ply_header(bytes)?;
        let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
        let xyz = ["x", "y", "z"].map(find);
        let [Some(ix), Some(iy), Some(iz)] = xyz else {
            return Err(Error::format(header.payload_offset, "mesh vertices need x, y, z"));
        };
        let rgb = ["red", "green", "blue"].map(find);
        let (rows, mut off) = read_vertex_rows(bytes, &header)?;
        let mut mesh = TriangleMesh::default();
        for row in &rows {
            mesh.vertices.push(Vector3::new(row[ix], row[iy], row[iz]));
            mesh.colors.push(match rgb {
                [Some(r), Some(g), Some(b)] => [row[r], row[g], row[b]].map(|c| c / 255.0),
                _ => [0.5; 3],
            });
        }
        for f in 0..header.faces.unwrap_or(0) {
            let count = *bytes.get(off).ok_or_else(|| Error::format(off, "truncated face payload"))? as usize;
            off += 1;
            if count != 3 {
                return Err(Error::format(off, format!("face {f} is not a triangle")));
            }
            let mut tri = [0usize; 3];
            for slot in &mut tri {
                let raw = bytes
                    .get(off..off + 4)
                    .ok_or_else(|| Error::format(off, "truncated face payload"))?;
                let i = i32::from_le_bytes(raw.try_into().unwrap());
                if i < 0 || i as usize >= mesh.vertices.len() {
                    return Err(Error::format(off, format!("face {f} index {i} out of range")));
                }
                *slot = i as usize;
                off += 4;
            }
            mesh.triangles.push(tri);
        }
        Ok(mesh)
    }
}

/// Cube corner offsets, bit `a` of the index selects +1 along axis `a`.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Six tetrahedra around the main diagonal, one per axis order. Neighboring
/// cubes split their shared faces the same way.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Zero-level-set triangulation. Each cube cell is split into six
/// tetrahedra; cells with an unobserved corner are skipped. Faces are
/// oriented toward positive distance.
pub fn marching_cubes(vol: &TsdfVolume) -> TriangleMesh {
    let [nx, ny, nz] = vol.dims;
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut ids = [0usize; 8];
                let mut vals = [0f64; 8];
                let mut observed = true;
                for (c, off) in CORNERS.iter().enumerate() {
                    let (a, b, d) = (i + off[0], j + off[1], k + off[2]);
                    ids[c] = vol.index(a, b, d);
                    match vol.sdf(a, b, d) {
                        Some(s) => vals[c] = s,
                        None => observed = false,
                    }
                }
                if !observed {
                    continue;
                }
                let positive = vals.map(|s| s >= 0.0);
                if positive.iter().all(|p| *p) || positive.iter().all(|p| !*p) {
                    continue;
                }
                for tet in &TETS {
                    let tv = tet.map(|c| Corner {
                        id: ids[c],
                        pos: vol.voxel_center(i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]),
                        sdf: vals[c],
                        positive: positive[c],
                    });
                    emit_tet(&tv, vol, &mut mesh, &mut edge_vertex);
                }
            }
        }
    }
    mesh
}

#[derive(Clone, Copy)]
struct Corner {
    id: usize,
    pos: Vector3<f64>,
    sdf: f64,
    positive: bool,
}

type Edge = (usize, usize);

fn edge_key(a: &Corner, b: &Corner) -> Edge {
    (a.id.min(b.id), a.id.max(b.id))
}

fn emit_tet(tv: &[Corner; 4], vol: &TsdfVolume, mesh: &mut TriangleMesh, edges: &mut HashMap<Edge, usize>) {
    let pos: Vec<&Corner> = tv.iter().filter(|c| c.positive).collect();
    let neg: Vec<&Corner> = tv.iter().filter(|c| !c.positive).collect();
    let outward = centroid(&pos) - centroid(&neg);
    match (pos.len(), neg.len()) {
        (1, 3) | (3, 1) => {
            let (lone, rest) = if pos.len() == 1 { (pos[0], &neg) } else { (neg[0], &pos) };
            let tri = [(lone, rest[0]), (lone, rest[1]), (lone, rest[2])];
            emit_triangle(tri, &outward, vol, mesh, edges);
        }
        (2, 2) => {
            let (a, b, c, d) = (pos[0], pos[1], neg[0], neg[1]);
            let quad = [(a, c), (a, d), (b, d), (b, c)];
            // walk the quad from its smallest edge toward the smaller
            // neighbor so both sign patterns give the same split
            let keys = quad.map(|(p, q)| edge_key(p, q));
            let first = (0..4).min_by_key(|&q| keys[q]).unwrap();
            let step = if keys[(first + 1) % 4] < keys[(first + 3) % 4] { 1 } else { 3 };
            let at = |n: usize| quad[(first + n * step) % 4];
            let (q0, q1, q2, q3) = (at(0), at(1), at(2), at(3));
            emit_triangle([q0, q1, q2], &outward, vol, mesh, edges);
            emit_triangle([q0, q2, q3], &outward, vol, mesh, edges);
        }
        _ => {}
    }
}

fn centroid(cs: &[&Corner]) -> Vector3<f64> {
    cs.iter().map(|c| c.pos).sum::<Vector3<f64>>() / cs.len() as f64
}

fn crossing(a: &Corner, b: &Corner) -> Vector3<f64> {
    // interpolate from the lower id so shared edges match bit for bit
    let (p, q) = if a.id < b.id { (a, b) } else { (b, a) };
    let t = p.sdf / (p.sdf - q.sdf);
    p.pos + (q.pos - p.pos) * t
}

fn emit_triangle(
    tri: [(&Corner, &Corner); 3],
    outward: &Vector3<f64>,
    vol: &TsdfVolume,
    mesh: &mut TriangleMesh,
    edges: &mut HashMap<Edge, usize>,
) {
    let pts = tri.map(|(a, b)| crossing(a, b));
    let keys = tri.map(|(a, b)| edge_key(a, b));
    let n = (pts[1] - pts[0]).cross(&(pts[2] - pts[0]));
    if 0.5 * n.norm() <= MIN_AREA {
        return;
    }
    let mut face = [0usize; 3];
    for s in 0..3 {
        face[s] = *edges.entry(keys[s]).or_insert_with(|| {
            mesh.vertices.push(pts[s]);
            mesh.colors.push(trilinear_color(vol, &pts[s]));
            mesh.vertices.len() - 1
        });
    }
    if n.dot(outward) < 0.0 {
        face.swap(1, 2);
    }
    mesh.triangles.push(face);
}

/// Trilinear color over the observed corners of the enclosing cell.
fn trilinear_color(vol: &TsdfVolume, p: &Vector3<f64>) -> [f64; 3] {
    let g = (p - vol.origin) / vol.voxel_size;
    let base = [0, 1, 2].map(|a| (g[a].floor().max(0.0) as usize).min(vol.dims[a].saturating_sub(2)));
    let frac = [0, 1, 2].map(|a| (g[a] - base[a] as f64).clamp(0.0, 1.0));
    let mut acc = [0.0; 3];
    let mut wsum = 0.0;
    for off in &CORNERS {
        let w: f64 = (0..3).map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
        let idx = [0, 1, 2].map(|a| (base[a] + off[a]).min(vol.dims[a] - 1));
        if let Some(c) = vol.color(idx[0], idx[1], idx[2]) {
            for a in 0..3 {
                acc[a] += w * c[a];
            }
            wsum += w;
        }
    }
    if wsum > 0.0 {
        acc.map(|c| c / wsum)
    } else {
        [0.5; 3]
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    pub n_views: usize,
    pub voxel_size: f64,
    /// Defaults to three voxels.
    pub truncation: Option<f64>,
    /// Square capture resolution.
    pub resolution: usize,
    pub rig_radius: f64,
    pub render: RenderConfig,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            n_views: 36,
            voxel_size: 0.01,
            truncation: None,
            resolution: 256,
            rig_radius: 2.0,
            render: RenderConfig::default(),
        }
    }
}

impl MeshConfig {
    pub fn truncation(&self) -> f64 {
        self.truncation.unwrap_or(3.0 * self.voxel_size)
    }
}

/// Renders color plus median depth along the meshing spiral, fuses all
/// views and triangulates.
pub fn extract_textured_mesh(cloud: &SplatCloud, cfg: &MeshConfig) -> Result<TriangleMesh> {
    let diag = validate(cloud);
    if !diag.is_valid() {
        return Err(Error::param(format!("cannot mesh an invalid cloud: {diag}")));
    }
    if cloud.is_empty() {
        return Ok(TriangleMesh::default());
    }
    let trunc = cfg.truncation();
    let (lo, hi) = splat_bounds(cloud, cfg.render.cutoff_sigma);
    let pad = Vector3::repeat(trunc + cfg.voxel_size);
    let mut vol = TsdfVolume::covering(lo - pad, hi + pad, cfg.voxel_size, trunc)?;
    let rig = RigSpec::new(cfg.rig_radius, cfg.resolution);
    for cam in spiral_path(cfg.n_views, SpiralMode::Meshing, &rig)? {
        let (view, median) = render_rgbd(cloud, &cam, &cfg.render);
        tsdf_integrate(&mut vol, &median, &view.color, &cam)?;
    }
    Ok(marching_cubes(&vol))
}

/// Axis-aligned box holding every splat out to its cutoff ellipsoid.
fn splat_bounds(cloud: &SplatCloud, cutoff: f64) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for g in &cloud.gaussians {
        let cov = g.covariance();
        for a in 0..3 {
            let r = cutoff * cov[(a, a)].sqrt();
            lo[a] = lo[a].min(g.position[a] - r);
            hi[a] = hi[a].max(g.position[a] + r);
        }
    }
    (lo, hi)
}
