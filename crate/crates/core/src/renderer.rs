//! Tile-based software rasterizer for Gaussian splats, with analytic
//! gradients of any photometric loss.
//!
//! Each splat is projected with the EWA approximation: the 3D covariance is
//! pushed through the camera rotation and the local Jacobian of the
//! perspective map, giving a 2D screen-space Gaussian. Splats are sorted
//! by camera depth and composited front to back inside 16x16 pixel tiles.
//! Tiles own their pixels, so the result does not depend on how tiles are
//! scheduled across threads.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::splat::{normalize_quat, quat_norm, quat_to_matrix, Gaussian, GaussianGrad, SplatCloud};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    /// Added to the diagonal of every screen-space covariance, px^2.
    pub cov_floor: f64,
    pub tile_size: usize,
    /// Footprint radius used for tile assignment, in standard deviations.
    pub cutoff_sigma: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Splats closer than this (camera z, meters) are culled.
    pub near: f64,
    /// Screen covariances with a larger condition number are skipped.
    pub max_condition: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            cov_floor: 0.3,
            tile_size: 16,
            cutoff_sigma: 3.0,
            min_transmittance: 1e-4,
            near: 0.01,
            max_condition: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub color: Image,
    pub alpha: Plane,
    /// Alpha-weighted expected depth; `+inf` where nothing was hit.
    pub depth: Plane,
    /// Splats dropped for an ill-conditioned footprint.
    pub skipped: usize,
}

/// Gaussian falloff tapered to reach zero exactly on the cutoff ellipse,
/// `(e^p - e^F) / (1 - e^F)` with `F = -cutoff^2 / 2`. The tile footprint
/// encloses that ellipse, so the image stays continuous in every splat
/// parameter.
#[derive(Debug, Clone, Copy)]
struct Taper {
    floor: f64,
    floor_exp: f64,
}

impl Taper {
    fn new(cutoff_sigma: f64) -> Self {
        let floor = -0.5 * cutoff_sigma * cutoff_sigma;
        Self {
            floor,
            floor_exp: floor.exp(),
        }
    }

    #[inline]
    fn value(&self, power: f64) -> f64 {
        (power.exp() - self.floor_exp) / (1.0 - self.floor_exp)
    }

    /// Derivative w.r.t. the power, from the value.
    #[inline]
    fn slope(&self, g: f64) -> f64 {
        g + self.floor_exp / (1.0 - self.floor_exp)
    }
}

/// The fields of a projected splat the per-pixel loops touch.
#[derive(Debug, Clone, Copy)]
struct RasterSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl RasterSplat {
    #[inline]
    fn power(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        -0.5 * (self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy)
    }
}

/// A splat after projection into one camera, with the intermediates the
/// backward pass needs.
#[derive(Debug, Clone)]
struct Projected {
    /// Index into the input cloud.
    source: usize,
    mean: Vector2<f64>,
    /// Inverse screen covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    cam_point: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    rot: Matrix3<f64>,
    quat_unit: [f64; 4],
    quat_norm: f64,
    cov3: Matrix3<f64>,
    tiles: [usize; 4],
    /// Inverse camera-frame covariance and its product with the mean, used
    /// for per-pixel ray/Gaussian peak depth.
    cam_precision: Matrix3<f64>,
    cam_precision_mean: Vector3<f64>,
}

struct Projection {
    splats: Vec<Projected>,
    skipped: usize,
}

fn project(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig) -> Projection {
    let tiles_x = cam.width.div_ceil(cfg.tile_size);
    let tiles_y = cam.height.div_ceil(cfg.tile_size);
    let w = cam.rotation;
    let mut splats = Vec::with_capacity(cloud.len());
    let mut skipped = 0;
    for (source, g) in cloud.gaussians.iter().enumerate() {
        let pc = cam.to_camera(&g.position);
        if pc.z < cfg.near {
            continue;
        }
        let qn = quat_norm(&g.rotation);
        let q = normalize_quat(&g.rotation);
        let rot = quat_to_matrix(&q);
        let m = rot * Matrix3::from_diagonal(&g.scale);
        let cov3 = m * m.transpose();
        let (x, y, z) = (pc.x, pc.y, pc.z);
        let jac = Matrix2x3::new(
            cam.fx / z,
            0.0,
            -cam.fx * x / (z * z),
            0.0,
            cam.fy / z,
            -cam.fy * y / (z * z),
        );
        let t = jac * w;
        let mut cov2: Matrix2<f64> = t * cov3 * t.transpose();
        cov2[(0, 0)] += cfg.cov_floor;
        cov2[(1, 1)] += cfg.cov_floor;
        let (a, b, c) = (cov2[(0, 0)], 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]), cov2[(1, 1)]);
        let det = a * c - b * b;
        let mid = 0.5 * (a + c);
        let disc = (mid * mid - det).max(0.0).sqrt();
        let (l_max, l_min) = (mid + disc, mid - disc);
        if !(det > 0.0 && l_min > 0.0) || l_max / l_min > cfg.max_condition || !det.is_finite() {
            skipped += 1;
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
        let radius = cfg.cutoff_sigma * l_max.sqrt();
        let x_lo = mean.x - radius;
        let x_hi = mean.x + radius;
        let y_lo = mean.y - radius;
        let y_hi = mean.y + radius;
        if x_hi < 0.0 || y_hi < 0.0 || x_lo >= cam.width as f64 || y_lo >= cam.height as f64 {
            continue;
        }
        let ts = cfg.tile_size as f64;
        let tile = |v: f64, n: usize| ((v / ts).floor().max(0.0) as usize).min(n - 1);
        let tiles = [
            tile(x_lo, tiles_x),
            tile(x_hi, tiles_x),
            tile(y_lo, tiles_y),
            tile(y_hi, tiles_y),
        ];
        let cov_cam = w * cov3 * w.transpose();
        let cam_precision = cov_cam.try_inverse().unwrap_or_else(Matrix3::zeros);
        let cam_precision_mean = cam_precision * pc;
        splats.push(Projected {
            source,
            mean,
            conic,
            depth: z,
            opacity: g.opacity,
            color: g.color,
            cam_point: pc,
            jacobian: jac,
            rot,
            quat_unit: q,
            quat_norm: qn,
            cov3,
            tiles,
            cam_precision,
            cam_precision_mean,
        });
    }
    // Total order that does not depend on input order.
    splats.sort_by(|p, q| {
        let (gp, gq) = (&cloud.gaussians[p.source], &cloud.gaussians[q.source]);
        p.depth
            .total_cmp(&q.depth)
            .then_with(|| cmp_gaussian(gp, gq))
    });
    Projection { splats, skipped }
}

fn cmp_gaussian(a: &Gaussian, b: &Gaussian) -> Ordering {
    let key = |g: &Gaussian| {
        [
            g.position.x,
            g.position.y,
            g.position.z,
            g.scale.x,
            g.scale.y,
            g.scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity,
            g.color[0],
            g.color[1],
            g.color[2],
        ]
    };
    let (ka, kb) = (key(a), key(b));
    ka.iter()
        .zip(&kb)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    splat: u32,
    /// Gaussian falloff at the pixel (alpha / opacity).
    falloff: f64,
    /// Transmittance in front of this splat.
    transmittance: f64,
}

struct TileOutput {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    color: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    median: Vec<f64>,
    /// Per-pixel ranges into `contribs` (only when caching).
    ranges: Vec<(u32, u32)>,
    contribs: Vec<Contribution>,
}

struct Raster {
    proj: Projection,
    compact: Vec<RasterSplat>,
    tiles: Vec<TileOutput>,
}

fn tile_lists(proj: &Projection, tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in proj.splats.iter().enumerate() {
        for ty in p.tiles[2]..=p.tiles[3] {
            for tx in p.tiles[0]..=p.tiles[1] {
                lists[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    lists
}

/// Camera depth of the point of maximum density along the pixel ray.
#[inline]
fn peak_depth(p: &Projected, ray: &Vector3<f64>) -> f64 {
    let num = ray.dot(&p.cam_precision_mean);
    let den = ray.dot(&(p.cam_precision * ray));
    let s = num / den;
    if den > 0.0 && s.is_finite() && s > 0.0 {
        s
    } else {
        p.depth
    }
}

fn rasterize(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig, want_depth: bool, cache: bool) -> Raster {
    let proj = project(cloud, cam, cfg);
    let ts = cfg.tile_size;
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let lists = tile_lists(&proj, tiles_x, tiles_y);
    let compact: Vec<RasterSplat> = proj
        .splats
        .iter()
        .map(|p| RasterSplat {
            mean: [p.mean.x, p.mean.y],
            conic: p.conic,
            opacity: p.opacity,
            color: p.color,
        })
        .collect();
    let bg = cfg.background;
    let taper = Taper::new(cfg.cutoff_sigma);
    let tiles: Vec<TileOutput> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let w = ts.min(cam.width - x0);
            let h = ts.min(cam.height - y0);
            let list = &lists[tile];
            let mut out = TileOutput {
                x0,
                y0,
                w,
                h,
                color: vec![0.0; w * h * 3],
                alpha: vec![0.0; w * h],
                depth: vec![f64::INFINITY; w * h],
                median: vec![f64::INFINITY; w * h],
                ranges: Vec::new(),
                contribs: Vec::new(),
            };
            for ly in 0..h {
                for lx in 0..w {
                    let px = (x0 + lx) as f64 + 0.5;
                    let py = (y0 + ly) as f64 + 0.5;
                    let ray = Vector3::new((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
                    let start = out.contribs.len() as u32;
                    let mut t = 1.0f64;
                    let mut rgb = [0.0f64; 3];
                    let mut depth_acc = 0.0;
                    let mut weight_acc = 0.0;
                    let mut median = f64::INFINITY;
                    for &k in list {
                        let p = &compact[k as usize];
                        let power = p.power(px, py);
                        if power <= taper.floor {
                            continue;
                        }
                        let g = taper.value(power);
                        let a = p.opacity * g;
                        if cache {
                            out.contribs.push(Contribution {
                                splat: k,
                                falloff: g,
                                transmittance: t,
                            });
                        }
                        let wgt = a * t;
                        for c in 0..3 {
                            rgb[c] += p.color[c] * wgt;
                        }
                        if want_depth && wgt > 0.0 {
                            let z = peak_depth(&proj.splats[k as usize], &ray);
                            depth_acc += wgt * z;
                            weight_acc += wgt;
                            let t_next = t * (1.0 - a);
                            if median.is_infinite() && t >= 0.5 && t_next < 0.5 {
                                median = z;
                            }
                        }
                        t *= 1.0 - a;
                        if t < cfg.min_transmittance {
                            break;
                        }
                    }
                    let i = ly * w + lx;
                    for c in 0..3 {
                        out.color[i * 3 + c] = rgb[c] + t * bg[c];
                    }
                    out.alpha[i] = 1.0 - t;
                    if want_depth {
                        if weight_acc > 0.0 {
                            out.depth[i] = depth_acc / weight_acc;
                        }
                        out.median[i] = median;
                    }
                    if cache {
                        out.ranges.push((start, out.contribs.len() as u32));
                    }
                }
            }
            out
        })
        .collect();
    Raster { proj, compact, tiles }
}

fn assemble(raster: &Raster, cam: &Camera) -> (RenderedView, Plane) {
    let mut color = Image::zeros(cam.width, cam.height);
    let mut alpha = Plane::new(cam.width, cam.height, 0.0);
    let mut depth = Plane::new(cam.width, cam.height, f64::INFINITY);
    let mut median = Plane::new(cam.width, cam.height, f64::INFINITY);
    for t in &raster.tiles {
        for ly in 0..t.h {
            for lx in 0..t.w {
                let i = ly * t.w + lx;
                let (x, y) = (t.x0 + lx, t.y0 + ly);
                color.set_pixel(x, y, [t.color[i * 3], t.color[i * 3 + 1], t.color[i * 3 + 2]]);
                alpha.set(x, y, t.alpha[i]);
                depth.set(x, y, t.depth[i]);
                median.set(x, y, t.median[i]);
            }
        }
    }
    (
        RenderedView {
            color,
            alpha,
            depth,
            skipped: raster.proj.skipped,
        },
        median,
    )
}

pub fn render(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig) -> RenderedView {
    let raster = rasterize(cloud, cam, cfg, true, false);
    assemble(&raster, cam).0
}

/// Color only; skips the depth bookkeeping.
pub fn render_color(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig) -> Image {
    let raster = rasterize(cloud, cam, cfg, false, false);
    assemble(&raster, cam).0.color
}

/// Depth where accumulated transmittance first drops below one half;
/// `+inf` where the pixel never gets that opaque.
pub fn render_depth_median(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig) -> Plane {
    let raster = rasterize(cloud, cam, cfg, true, false);
    assemble(&raster, cam).1
}

/// Full view plus median depth from a single pass.
pub fn render_rgbd(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig) -> (RenderedView, Plane) {
    let raster = rasterize(cloud, cam, cfg, true, false);
    assemble(&raster, cam)
}

/// Forward state retained for a later backward pass.
pub struct RenderCache {
    raster: Raster,
    width: usize,
    height: usize,
}

impl RenderCache {
    pub fn skipped(&self) -> usize {
        self.raster.proj.skipped
    }
}

/// Color render that keeps per-pixel compositing records for
/// [`backward`].
pub fn render_for_backward(cloud: &SplatCloud, cam: &Camera, cfg: &RenderConfig) -> (Image, RenderCache) {
    let raster = rasterize(cloud, cam, cfg, false, true);
    let color = assemble(&raster, cam).0.color;
    (
        color,
        RenderCache {
            raster,
            width: cam.width,
            height: cam.height,
        },
    )
}

/// Screen-space gradient accumulator for one projected splat.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients of a loss w.r.t. every splat, given `d_color = dL/d(color)`
/// for each pixel and channel of the cached render.
pub fn backward(
    cache: &RenderCache,
    cloud: &SplatCloud,
    cam: &Camera,
    cfg: &RenderConfig,
    d_color: &Image,
) -> Result<Vec<GaussianGrad>> {
    if d_color.width != cache.width || d_color.height != cache.height {
        return Err(Error::param(format!(
            "residual is {}x{}, render is {}x{}",
            d_color.width, d_color.height, cache.width, cache.height
        )));
    }
    let proj = &cache.raster.proj;
    let n = proj.splats.len();
    let bg = cfg.background;
    let compact = &cache.raster.compact;
    let taper = Taper::new(cfg.cutoff_sigma);
    let per_tile: Vec<Vec<ScreenGrad>> = cache
        .raster
        .tiles
        .par_iter()
        .map(|tile| {
            let mut local = vec![ScreenGrad::default(); if tile.contribs.is_empty() { 0 } else { n }];
            for ly in 0..tile.h {
                for lx in 0..tile.w {
                    let i = ly * tile.w + lx;
                    let (start, end) = tile.ranges[i];
                    if start == end {
                        continue;
                    }
                    let (x, y) = (tile.x0 + lx, tile.y0 + ly);
                    let r = d_color.pixel(x, y);
                    if r == [0.0; 3] {
                        continue;
                    }
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let mut behind = bg;
                    for c in tile.contribs[start as usize..end as usize].iter().rev() {
                        let p = &compact[c.splat as usize];
                        let a = p.opacity * c.falloff;
                        let wgt = a * c.transmittance;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            d_alpha += r[ch] * (p.color[ch] - behind[ch]);
                        }
                        d_alpha *= c.transmittance;
                        for ch in 0..3 {
                            behind[ch] = p.color[ch] * a + (1.0 - a) * behind[ch];
                        }
                        let sg = &mut local[c.splat as usize];
                        for ch in 0..3 {
                            sg.color[ch] += wgt * r[ch];
                        }
                        sg.opacity += d_alpha * c.falloff;
                        // d(power)/d(mean) = Q d
                        let dx = px - p.mean[0];
                        let dy = py - p.mean[1];
                        let d_power = d_alpha * p.opacity * taper.slope(c.falloff);
                        sg.mean[0] += d_power * (p.conic[0] * dx + p.conic[1] * dy);
                        sg.mean[1] += d_power * (p.conic[1] * dx + p.conic[2] * dy);
                        sg.conic[0] += d_power * (-0.5 * dx * dx);
                        sg.conic[1] += d_power * (-dx * dy);
                        sg.conic[2] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            local
        })
        .collect();
    let mut screen = vec![ScreenGrad::default(); n];
    for tile in &per_tile {
        for (acc, g) in screen.iter_mut().zip(tile) {
            acc.add(g);
        }
    }
    let mut grads = vec![GaussianGrad::default(); cloud.len()];
    for (p, sg) in proj.splats.iter().zip(&screen) {
        grads[p.source] = chain_to_world(p, cam, cfg, &cloud.gaussians[p.source], sg);
    }
    Ok(grads)
}

/// Forward + backward in one call.
pub fn render_gradients(
    cloud: &SplatCloud,
    cam: &Camera,
    cfg: &RenderConfig,
    d_color: &Image,
) -> Result<Vec<GaussianGrad>> {
    let (_, cache) = render_for_backward(cloud, cam, cfg);
    backward(&cache, cloud, cam, cfg, d_color)
}

/// Pulls a screen-space gradient back to the splat's 3D parameters.
fn chain_to_world(p: &Projected, cam: &Camera, cfg: &RenderConfig, g: &Gaussian, sg: &ScreenGrad) -> GaussianGrad {
    let _ = cfg;
    let w = cam.rotation;
    let [a, b, c] = p.conic;
    let q = Matrix2::new(a, b, b, c);
    // Symmetric gradient w.r.t. the conic: off-diagonal split in half.
    let g_q = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2 = -(q * g_q * q);
    let t = p.jacobian * w;
    let g_t = 2.0 * g_cov2 * t * p.cov3;
    let g_cov3 = t.transpose() * g_cov2 * t;
    let g_j = g_t * w.transpose();

    let (x, y, z) = (p.cam_point.x, p.cam_point.y, p.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = Vector3::new(
        sg.mean[0] * fx / z,
        sg.mean[1] * fy / z,
        -sg.mean[0] * fx * x / z2 - sg.mean[1] * fy * y / z2,
    );
    g_pc.x += g_j[(0, 2)] * (-fx / z2);
    g_pc.y += g_j[(1, 2)] * (-fy / z2);
    g_pc.z += g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * x / z3)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * y / z3);
    let position = w.transpose() * g_pc;

    let s = Matrix3::from_diagonal(&g.scale);
    let m = p.rot * s;
    let g_m = 2.0 * g_cov3 * m;
    let mut scale = Vector3::zeros();
    for j in 0..3 {
        scale[j] = (0..3).map(|i| g_m[(i, j)] * p.rot[(i, j)]).sum();
    }
    let g_r = g_m * s;
    let [qw, qx, qy, qz] = p.quat_unit;
    let d_w = Matrix3::new(0.0, -qz, qy, qz, 0.0, -qx, -qy, qx, 0.0) * 2.0;
    let d_x = Matrix3::new(0.0, qy, qz, qy, -2.0 * qx, -qw, qz, qw, -2.0 * qx) * 2.0;
    let d_y = Matrix3::new(-2.0 * qy, qx, qw, qx, 0.0, qz, -qw, qz, -2.0 * qy) * 2.0;
    let d_z = Matrix3::new(-2.0 * qz, -qw, qx, qw, -2.0 * qz, qy, qx, qy, 0.0) * 2.0;
    let g_unit = [
        g_r.component_mul(&d_w).sum(),
        g_r.component_mul(&d_x).sum(),
        g_r.component_mul(&d_y).sum(),
        g_r.component_mul(&d_z).sum(),
    ];
    let dot: f64 = (0..4).map(|k| g_unit[k] * p.quat_unit[k]).sum();
    let rotation = [0, 1, 2, 3].map(|k| (g_unit[k] - p.quat_unit[k] * dot) / p.quat_norm);

    GaussianGrad {
        position,
        scale,
        rotation,
        opacity: sg.opacity,
        color: sg.color,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{orthogonal_target_rig, Camera, Intrinsics, RigSpec};
    use nalgebra::Vector3;

    fn front_camera(size: usize) -> Camera {
        Camera::orbit(2.0, 0.0, 0.0, &Intrinsics { focal: 1.5 * size as f64, width: size, height: size })
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = front_camera(20);
        let view = render(&SplatCloud::default(), &cam, &RenderConfig::default());
        assert!(view.color.data.iter().all(|&v| v == 1.0));
        assert!(view.alpha.data.iter().all(|&v| v == 0.0));
        assert!(view.depth.data.iter().all(|v| v.is_infinite()));
        let median = render_depth_median(&SplatCloud::default(), &cam, &RenderConfig::default());
        assert!(median.data.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn front_opaque_splat_hides_back_one() {
        let cam = front_camera(32);
        let front = Gaussian::isotropic(Vector3::new(0.0, 0.0, 0.5), 0.3, 1.0, [1.0, 0.0, 0.0]);
        let back = Gaussian::isotropic(Vector3::new(0.0, 0.0, -0.5), 0.3, 1.0, [0.0, 0.0, 1.0]);
        for cloud in [
            SplatCloud::new(vec![front.clone(), back.clone()], 1.0),
            SplatCloud::new(vec![back, front], 1.0),
        ] {
            let view = render(&cloud, &cam, &RenderConfig::default());
            let c = view.color.pixel(16, 16);
            assert!((c[0] - 1.0).abs() < 5e-3 && c[2].abs() < 5e-3, "{c:?}");
        }
    }

    #[test]
    fn alpha_bounded_and_monotone_in_opacity() {
        let cam = front_camera(24);
        let mut prev: Option<Plane> = None;
        for o in [0.1, 0.4, 0.7, 1.0] {
            let cloud = SplatCloud::new(
                vec![
                    Gaussian::isotropic(Vector3::new(0.1, 0.0, 0.0), 0.2, o, [0.3, 0.6, 0.9]),
                    Gaussian::isotropic(Vector3::new(-0.1, 0.05, 0.2), 0.15, 0.5, [0.9, 0.1, 0.1]),
                ],
                1.0,
            );
            let v = render(&cloud, &cam, &RenderConfig::default());
            assert!(v.alpha.data.iter().all(|a| (0.0..=1.0).contains(a)));
            if let Some(p) = prev {
                assert!(v.alpha.data.iter().zip(&p.data).all(|(a, b)| a >= b));
            }
            prev = Some(v.alpha);
        }
    }

    #[test]
    fn median_depth_of_opaque_splat_on_axis() {
        let cam = front_camera(32);
        // camera at z = 2, splat at camera depth 1.5
        let cloud = SplatCloud::new(vec![Gaussian::isotropic(Vector3::new(0.0, 0.0, 0.5), 0.05, 1.0, [0.5; 3])], 1.0);
        let d = render_depth_median(&cloud, &cam, &RenderConfig::default());
        let v = d.get(16, 16);
        assert!((v - 1.5).abs() < 0.05, "{v}");
        let two = SplatCloud::new(
            vec![
                Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.2, 1.0, [0.5; 3]),
                Gaussian::isotropic(Vector3::new(0.0, 0.0, 0.0), 0.2, 1.0, [0.5; 3]),
            ],
            1.0,
        );
        let d = render_depth_median(&two, &cam, &RenderConfig::default());
        assert!((d.get(16, 16) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn needle_splat_is_skipped_and_counted() {
        let cam = front_camera(16);
        let mut g = Gaussian::isotropic(Vector3::zeros(), 0.2, 1.0, [0.5; 3]);
        g.scale = Vector3::new(0.3, 1e-9, 0.3);
        let cfg = RenderConfig {
            cov_floor: 0.0,
            ..RenderConfig::default()
        };
        // rotate so the thin axis lies in the image plane
        let view = render(&SplatCloud::new(vec![g], 1.0), &cam, &cfg);
        assert_eq!(view.skipped, 1);
        assert!(view.alpha.data.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn determinism() {
        let cams = orthogonal_target_rig(&RigSpec::new(2.0, 32)).unwrap();
        let cloud = SplatCloud::new(
            (0..10)
                .map(|i| {
                    let f = i as f64 / 10.0;
                    Gaussian::isotropic(Vector3::new(f - 0.5, 0.3 * f, 0.2 - f * 0.4), 0.1, 0.8, [f, 1.0 - f, 0.5])
                })
                .collect(),
            1.0,
        );
        for cam in &cams {
            let a = render(&cloud, cam, &RenderConfig::default());
            let b = render(&cloud, cam, &RenderConfig::default());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let cam = front_camera(16);
        let cloud = SplatCloud::new(vec![Gaussian::isotropic(Vector3::zeros(), 0.2, 0.7, [0.2, 0.4, 0.6])], 1.0);
        let grads = render_gradients(&cloud, &cam, &RenderConfig::default(), &Image::zeros(16, 16)).unwrap();
        assert!(grads.iter().all(GaussianGrad::is_zero));
        assert!(render_gradients(&cloud, &cam, &RenderConfig::default(), &Image::zeros(8, 16)).is_err());
    }

    #[test]
    fn color_gradient_is_footprint_weighted_residual() {
        let cam = front_camera(16);
        let cloud = SplatCloud::new(vec![Gaussian::isotropic(Vector3::zeros(), 0.5, 0.9, [0.2, 0.4, 0.6])], 1.0);
        let mut resid = Image::zeros(16, 16);
        for (i, v) in resid.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        let cfg = RenderConfig::default();
        let grads = render_gradients(&cloud, &cam, &cfg, &resid).unwrap();
        let alpha = render(&cloud, &cam, &cfg).alpha;
        for ch in 0..3 {
            let expect: f64 = (0..16 * 16).map(|i| alpha.data[i] * resid.data[i * 3 + ch]).sum();
            assert!((grads[0].color[ch] - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }

    fn perturb(g: &mut Gaussian, k: usize, h: f64) {
        match k {
            0..=2 => g.position[k] += h,
            3..=5 => g.scale[k - 3] += h,
            6..=9 => g.rotation[k - 6] += h,
            10 => g.opacity += h,
            _ => g.color[k - 11] += h,
        }
    }

    fn grad_entry(g: &GaussianGrad, k: usize) -> f64 {
        match k {
            0..=2 => g.position[k],
            3..=5 => g.scale[k - 3],
            6..=9 => g.rotation[k - 6],
            10 => g.opacity,
            _ => g.color[k - 11],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cam = Camera::orbit(2.0, 0.3, 0.2, &Intrinsics { focal: 40.0, width: 24, height: 24 });
        let mut cloud = SplatCloud::new(
            vec![
                Gaussian::isotropic(Vector3::new(0.1, 0.05, 0.0), 0.2, 0.6, [0.9, 0.2, 0.1]),
                Gaussian::isotropic(Vector3::new(-0.15, -0.1, 0.2), 0.15, 0.5, [0.1, 0.7, 0.3]),
                Gaussian::isotropic(Vector3::new(0.0, 0.15, -0.2), 0.25, 0.4, [0.2, 0.3, 0.8]),
            ],
            1.0,
        );
        cloud.gaussians[0].scale = Vector3::new(0.25, 0.12, 0.18);
        cloud.gaussians[0].rotation = normalize_quat(&[0.9, 0.2, -0.3, 0.1]);
        cloud.gaussians[2].scale = Vector3::new(0.1, 0.3, 0.2);
        cloud.gaussians[2].rotation = normalize_quat(&[0.5, -0.4, 0.6, 0.2]);
        let cfg = RenderConfig::default();
        let mut weights = Image::zeros(24, 24);
        for (i, v) in weights.data.iter_mut().enumerate() {
            *v = (((i * 2654435761) % 1000) as f64 / 1000.0) - 0.3;
        }
        let loss = |c: &SplatCloud| -> f64 {
            let img = render_color(c, &cam, &cfg);
            img.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        };
        let grads = render_gradients(&cloud, &cam, &cfg, &weights).unwrap();
        let mut worst: f64 = 0.0;
        for (s, g) in grads.iter().enumerate() {
            for k in 0..14 {
                let h = 1e-5;
                let mut plus = cloud.clone();
                perturb(&mut plus.gaussians[s], k, h);
                let mut minus = cloud.clone();
                perturb(&mut minus.gaussians[s], k, -h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad_entry(g, k);
                let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-2);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "splat {s} param {k}: analytic {an} fd {fd}");
            }
        }
        assert!(worst < 1e-3);
    }
}
