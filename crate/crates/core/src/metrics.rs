//! Geometry and appearance metrics: chamfer, point-to-surface, F-score,
//! normal consistency, PSNR and SSIM.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::meshing::TriangleMesh;

pub const DEFAULT_FSCORE_THRESHOLD: f64 = 0.01;
pub const DEFAULT_PSNR_CAP: f64 = 99.0;
const CM: f64 = 100.0;

/// Sum by recursive halving; bounds rounding growth to `O(log n)`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

fn non_empty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        Err(Error::param(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

/// Exact nearest-neighbor lookup over a fixed point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl PointIndex {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self> {
        non_empty(points, "point set")?;
        let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&entries).map_err(|e| Error::param(format!("kd-tree build failed: {e:?}")))?;
        Ok(Self { tree })
    }

    /// Distance to the closest indexed point.
    pub fn nearest(&self, p: &Vector3<f64>) -> f64 {
        let hit = self.tree.query(&[p.x, p.y, p.z]).nearest_one::<SquaredEuclidean<f64>>().execute();
        hit.distance.sqrt()
    }
}

/// For every point of `src`, the distance to its nearest point in `dst`.
pub fn nearest_distances(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Vec<f64>> {
    non_empty(src, "source points")?;
    let index = PointIndex::new(dst)?;
    Ok(src.par_iter().map(|p| index.nearest(p)).collect())
}

/// Mean of the two directed mean nearest-neighbor distances, in cm.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    let ab = nearest_distances(a, b)?;
    let ba = nearest_distances(b, a)?;
    Ok(CM * 0.5 * (mean(&ab) + mean(&ba)))
}

/// Harmonic mean of precision (`a` near `b`) and recall (`b` near `a`).
pub fn fscore(a: &[Vector3<f64>], b: &[Vector3<f64>], threshold: f64) -> Result<f64> {
    let frac = |d: &[f64]| d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
    let precision = frac(&nearest_distances(a, b)?);
    let recall = frac(&nearest_distances(b, a)?);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Closest point of triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    // Voronoi-region walk over vertices, edges, then the face
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&self, o: &Aabb) -> Aabb {
        Aabb {
            lo: self.lo.inf(&o.lo),
            hi: self.hi.sup(&o.hi),
        }
    }

    fn dist2(&self, p: &Vector3<f64>) -> f64 {
        let d = (self.lo - p).sup(&(p - self.hi)).sup(&Vector3::zeros());
        d.norm_squared()
    }
}

enum Node {
    Leaf { bbox: Aabb, start: usize, end: usize },
    Inner { bbox: Aabb, left: usize, right: usize },
}

impl Node {
    fn bbox(&self) -> &Aabb {
        match self {
            Node::Leaf { bbox, .. } | Node::Inner { bbox, .. } => bbox,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over mesh triangles for exact closest-point
/// queries.
pub struct TriangleBvh {
    tris: Vec<[Vector3<f64>; 3]>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

impl TriangleBvh {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::param("mesh has no triangles"));
        }
        let tris: Vec<[Vector3<f64>; 3]> = (0..mesh.triangles.len()).map(|f| mesh.corners(f)).collect();
        let mut ids: Vec<usize> = (0..tris.len()).collect();
        let centroids: Vec<Vector3<f64>> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut nodes = Vec::with_capacity(2 * tris.len() / LEAF_SIZE + 1);
        build(&tris, &centroids, &mut ids, 0, tris.len(), &mut nodes);
        Ok(Self { tris, ids, nodes })
    }

    /// Distance to the surface and the closest face.
    pub fn closest(&self, p: &Vector3<f64>) -> (f64, usize) {
        let (d, faces) = self.closest_faces(p);
        (d, faces[0])
    }

    /// Distance to the surface and every face attaining it, up to a
    /// relative tie tolerance; ties happen on shared edges and vertices.
    pub fn closest_faces(&self, p: &Vector3<f64>) -> (f64, Vec<usize>) {
        let within = |d: f64, best: f64| d <= best * (1.0 + TIE_TOL) + 1e-24;
        let mut best = f64::INFINITY;
        let mut hits: Vec<(f64, usize)> = Vec::new();
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            if !within(self.nodes[n].bbox().dist2(p), best) {
                continue;
            }
            match &self.nodes[n] {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.ids[*start..*end] {
                        let [a, b, c] = &self.tris[f];
                        let d = (closest_point_on_triangle(p, a, b, c) - p).norm_squared();
                        if within(d, best) {
                            best = best.min(d);
                            hits.push((d, f));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let (dl, dr) = (self.nodes[*left].bbox().dist2(p), self.nodes[*right].bbox().dist2(p));
                    // nearer child popped first
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        let mut faces: Vec<usize> = hits.into_iter().filter(|(d, _)| within(*d, best)).map(|(_, f)| f).collect();
        faces.sort_unstable();
        (best.sqrt(), faces)
    }
}

const TIE_TOL: f64 = 1e-9;

fn build(
    tris: &[[Vector3<f64>; 3]],
    centroids: &[Vector3<f64>],
    ids: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut bbox = Aabb::empty();
    for &f in &ids[start..end] {
        tris[f].iter().for_each(|v| bbox.grow(v));
    }
    let me = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bbox, start, end });
        return me;
    }
    let mut cb = Aabb::empty();
    for &f in &ids[start..end] {
        cb.grow(&centroids[f]);
    }
    let ext = cb.hi - cb.lo;
    let axis = ext.imax();
    ids[start..end].sort_by(|&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
    let mid = start + (end - start) / 2;
    nodes.push(Node::Leaf { bbox, start, end });
    let left = build(tris, centroids, ids, start, mid, nodes);
    let right = build(tris, centroids, ids, mid, end, nodes);
    let bbox = nodes[left].bbox().merge(nodes[right].bbox());
    nodes[me] = Node::Inner { bbox, left, right };
    me
}

/// Mean exact point-to-triangle distance, in cm. Not symmetric.
pub fn p2s(points: &[Vector3<f64>], mesh: &TriangleMesh) -> Result<f64> {
    non_empty(points, "point set")?;
    let bvh = TriangleBvh::new(mesh)?;
    let d: Vec<f64> = points.par_iter().map(|p| bvh.closest(p).0).collect();
    Ok(CM * mean(&d))
}

/// Area-uniform surface samples with the face each came from.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<(Vector3<f64>, usize)>> {
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|f| mesh.area(f)).collect();
    let total = pairwise_sum(&areas);
    if !(total > 0.0) {
        return Err(Error::Degenerate("mesh has no surface area".into()));
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a / total;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let f = cdf.partition_point(|&c| c < u).min(areas.len() - 1);
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            let [a, b, c] = mesh.corners(f);
            (a + (b - a) * r1 + (c - a) * r2, f)
        })
        .collect())
}

/// Sampled points of a mesh surface.
pub fn surface_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    Ok(sample_surface(mesh, n, seed)?.into_iter().map(|(p, _)| p).collect())
}

const NC_SEED: u64 = 0x6e63;

/// Mean absolute cosine between sampled normals on one mesh and the normal
/// of the closest face on the other, averaged over both directions.
pub fn normal_consistency(a: &TriangleMesh, b: &TriangleMesh, samples: usize) -> Result<f64> {
    if samples == 0 {
        return Err(Error::param("normal consistency needs samples"));
    }
    let one_way = |src: &TriangleMesh, dst: &TriangleMesh| -> Result<f64> {
        let pts = sample_surface(src, samples, NC_SEED)?;
        let bvh = TriangleBvh::new(dst)?;
        let cos: Vec<f64> = pts
            .par_iter()
            .map(|(p, f)| {
                let (_, faces) = bvh.closest_faces(p);
                let Some(n1) = src.face_normal(*f) else { return 0.0 };
                let cos: f64 = faces
                    .iter()
                    .map(|&g| dst.face_normal(g).map_or(0.0, |n2| n1.dot(&n2).abs().min(1.0)))
                    .sum();
                cos / faces.len() as f64
            })
            .collect();
        Ok(mean(&cos))
    };
    Ok(0.5 * (one_way(a, b)? + one_way(b, a)?))
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::param(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped.
pub fn psnr(a: &Image, b: &Image, cap_db: f64) -> Result<f64> {
    same_size(a, b)?;
    let mse = a.mse(b);
    if mse <= 0.0 {
        return Ok(cap_db);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap_db))
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filter of a single-channel `w x h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.chunks_exact(3).map(|px| px[c]).collect()
}

/// Per-window luminance-contrast-structure and contrast-structure means of
/// one channel.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize) -> (f64, f64) {
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let mxx = filter_valid(&prod(x, x), w, h, &k);
    let myy = filter_valid(&prod(y, y), w, h, &k);
    let mxy = filter_valid(&prod(x, y), w, h, &k);
    let mut full = Vec::with_capacity(mx.len());
    let mut cs = Vec::with_capacity(mx.len());
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        let c = (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
        let l = (2.0 * ux * uy + SSIM_C1) / (ux * ux + uy * uy + SSIM_C1);
        full.push(l * c);
        cs.push(c);
    }
    (mean(&full), mean(&cs))
}

fn ssim_parts(a: &Image, b: &Image) -> Result<(f64, f64)> {
    same_size(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::param(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let (mut s, mut c) = (0.0, 0.0);
    for ch in 0..3 {
        let (sv, cv) = ssim_channel(&channel(a, ch), &channel(b, ch), a.width, a.height);
        s += sv;
        c += cv;
    }
    Ok((s / 3.0, c / 3.0))
}

/// Single-scale SSIM, Gaussian 7x7 window, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_parts(a, b)?.0)
}

/// Common five-scale weights.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Multi-scale SSIM: contrast-structure terms at each 2x box-downsampled
/// scale and the full term at the coarsest, combined with `weights`.
pub fn ms_ssim(a: &Image, b: &Image, weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::param("multi-scale SSIM needs at least one weight"));
    }
    let need = SSIM_WINDOW << (weights.len() - 1);
    if a.width < need || a.height < need {
        return Err(Error::param(format!("{} scales need images of at least {need}px", weights.len())));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut out = 1.0;
    for (s, w) in weights.iter().enumerate() {
        let (full, cs) = ssim_parts(&x, &y)?;
        if s + 1 == weights.len() {
            out *= full.max(0.0).powf(*w);
        } else {
            out *= cs.max(0.0).powf(*w);
            x = halve(&x);
            y = halve(&y);
        }
    }
    Ok(out)
}

fn halve(img: &Image) -> Image {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = img.pixel(2 * x + dx, 2 * y + dy);
                for c in 0..3 {
                    acc[c] += 0.25 * p[c];
                }
            }
            out.set_pixel(x, y, acc);
        }
    }
    out
}

/// Image metrics of one evaluation view.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewMetric {
    pub view: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Summary metrics; geometry entries are absent when no geometry was
/// compared.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub cd_cm: Option<f64>,
    pub p2s_cm: Option<f64>,
    pub fscore: Option<f64>,
    pub nc: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub views: Vec<ViewMetric>,
}

impl MetricReport {
    /// Fills the image metrics from paired renders and references.
    pub fn with_images(mut self, renders: &[Image], refs: &[Image], cap_db: f64) -> Result<Self> {
        if renders.len() != refs.len() || renders.is_empty() {
            return Err(Error::param("need one reference per render"));
        }
        self.views = renders
            .iter()
            .zip(refs)
            .enumerate()
            .map(|(view, (r, g))| {
                Ok(ViewMetric {
                    view,
                    psnr_db: psnr(r, g, cap_db)?,
                    ssim: ssim(r, g)?,
                })
            })
            .collect::<Result<_>>()?;
        let p: Vec<f64> = self.views.iter().map(|v| v.psnr_db).collect();
        let s: Vec<f64> = self.views.iter().map(|v| v.ssim).collect();
        self.psnr_db = Some(mean(&p));
        self.ssim = Some(mean(&s));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: Option<f64>| v.is_none_or(|x| (0.0..=1.0).contains(&x));
        let nonneg = |v: Option<f64>| v.is_none_or(|x| x >= 0.0);
        if !(unit(self.fscore) && unit(self.nc) && nonneg(self.cd_cm) && nonneg(self.p2s_cm)) {
            return Err(Error::param("metric out of range"));
        }
        // SSIM of arbitrary images can dip below zero; clamp-free check
        if self.ssim.is_some_and(|s| s > 1.0 + 1e-12) {
            return Err(Error::param("ssim above 1"));
        }
        Ok(())
    }

    /// Summary row followed by the per-view table.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut out = String::from("cd_cm,p2s_cm,fscore,nc,psnr_db,ssim\n");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f(self.cd_cm),
            f(self.p2s_cm),
            f(self.fscore),
            f(self.nc),
            f(self.psnr_db),
            f(self.ssim)
        ));
        if !self.views.is_empty() {
            out.push_str("\nview,psnr_db,ssim\n");
            for v in &self.views {
                out.push_str(&format!("{},{},{}\n", v.view, v.psnr_db, v.ssim));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
