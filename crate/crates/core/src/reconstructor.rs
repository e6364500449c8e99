//! Optimization-based 3D reconstruction: fits a [`SplatCloud`] to a set of
//! posed images.
//!
//! [`reconstruct`] has the shape of a feed-forward reconstruction model
//! `(x_t, t, context, x0 estimate) -> cloud`. The timestep enters only as a
//! per-view confidence weight (clamped SNR) and through warm starting from
//! the previous step's cloud.
//!
//! The objective is
//! `l_mse * MSE + l_percep * GradDiff + l_reg * regularizer`,
//! where GradDiff compares finite-difference image gradients at three
//! dyadic scales.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{from_signed, Image};
use crate::renderer::{backward, render_for_backward, RenderConfig};
use crate::schedule::{one_step_x0, NoiseSchedule};
use crate::splat::{normalize_quat, regularizer, validate, Gaussian, GaussianGrad, RegWeights, SplatCloud};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mse: f64,
    pub percep: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            percep: 1.0,
            reg: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub color: f64,
    /// Applied to the pre-softplus scale parameter.
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1e-2,
            color: 1e-2,
            scale: 5e-3,
            rotation: 5e-3,
            opacity: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_splats: usize,
    pub iterations: usize,
    pub lr: LearningRates,
    pub lambdas: LossWeights,
    pub reg: RegWeights,
    /// Weight target views by clamped `alpha_bar / (1 - alpha_bar)`.
    pub snr_weighting: bool,
    pub snr_clamp: [f64; 2],
    /// Fit stops once the image terms fall below this.
    pub tolerance: f64,
    /// Relative loss rise accepted without backtracking; 0 makes the fit
    /// a monotone line search.
    pub rise_tolerance: f64,
    pub seed: u64,
    pub render: RenderConfig,
    #[serde(skip)]
    pub warm_start: Option<SplatCloud>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_splats: 64,
            iterations: 200,
            lr: LearningRates::default(),
            lambdas: LossWeights::default(),
            reg: RegWeights::default(),
            snr_weighting: true,
            snr_clamp: [0.05, 20.0],
            tolerance: 1e-8,
            rise_tolerance: 0.1,
            seed: 0,
            render: RenderConfig::default(),
            warm_start: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.lambdas;
        if self.n_splats == 0 {
            return Err(Error::param("n_splats must be >= 1"));
        }
        if !(l.mse >= 0.0 && l.percep >= 0.0 && l.reg >= 0.0) {
            return Err(Error::param("loss weights must be >= 0"));
        }
        if !(self.rise_tolerance >= 0.0) {
            return Err(Error::param("rise_tolerance must be >= 0"));
        }
        if !(self.snr_clamp[0] > 0.0 && self.snr_clamp[0] <= self.snr_clamp[1]) {
            return Err(Error::param("snr clamp must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// One supervision image in `[0, 1]` with its camera and data weight.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Image,
    pub camera: Camera,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub percep: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn data(&self, w: &LossWeights) -> f64 {
        w.mse * self.mse + w.percep * self.percep
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub cloud: SplatCloud,
    pub loss: LossBreakdown,
    /// Loss after every accepted step, starting with the initial state.
    pub history: Vec<LossBreakdown>,
    /// Whether each history entry was reached through a loss rise.
    pub crossed: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,mse,percep,reg,total,crossed\n");
        for (i, (l, c)) in self.history.iter().zip(&self.crossed).enumerate() {
            out.push_str(&format!("{i},{},{},{},{},{}\n", l.mse, l.percep, l.reg, l.total, *c as u8));
        }
        out
    }
}

const GRAD_DIFF_SCALES: usize = 3;

/// Weighted MSE and multi-scale gradient difference between renders and
/// targets, plus `dL/d(render)` for each view.
pub fn image_loss(renders: &[Image], targets: &[Image], weights: &[f64], lambdas: &LossWeights) -> (f64, f64, Vec<Image>) {
    let total_w: f64 = weights.iter().sum();
    let mut mse = 0.0;
    let mut percep = 0.0;
    let mut grads = Vec::with_capacity(renders.len());
    for ((r, t), &w) in renders.iter().zip(targets).zip(weights) {
        let wn = if total_w > 0.0 { w / total_w } else { 0.0 };
        let diff: Vec<f64> = r.data.iter().zip(&t.data).map(|(a, b)| a - b).collect();
        let n = diff.len().max(1) as f64;
        mse += wn * diff.iter().map(|d| d * d).sum::<f64>() / n;
        let mut g: Vec<f64> = diff.iter().map(|d| lambdas.mse * wn * 2.0 * d / n).collect();
        let (gd, gd_grad) = grad_diff(&diff, r.width, r.height);
        percep += wn * gd;
        for (a, b) in g.iter_mut().zip(&gd_grad) {
            *a += lambdas.percep * wn * b;
        }
        grads.push(Image {
            width: r.width,
            height: r.height,
            data: g,
        });
    }
    (mse, percep, grads)
}

/// Mean over scales of the mean squared finite-difference gradient of
/// `e`, with its gradient w.r.t. `e`.
fn grad_diff(e: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; e.len()];
    let mut used = 0;
    for s in 0..GRAD_DIFF_SCALES {
        let f = 1usize << s;
        let (w, h) = (width / f, height / f);
        if w < 2 || h < 2 {
            break;
        }
        used += 1;
        // box-downsampled residual
        let mut d = vec![0.0; w * h * 3];
        let inv = 1.0 / (f * f) as f64;
        for y in 0..h * f {
            for x in 0..w * f {
                for c in 0..3 {
                    d[((y / f) * w + x / f) * 3 + c] += e[(y * width + x) * 3 + c] * inv;
                }
            }
        }
        let count = ((w - 1) * h + w * (h - 1)) as f64 * 3.0;
        let mut gd = vec![0.0; d.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    if x + 1 < w {
                        let j = i + 3;
                        let v = d[j] - d[i];
                        loss += v * v / count;
                        gd[j] += 2.0 * v / count;
                        gd[i] -= 2.0 * v / count;
                    }
                    if y + 1 < h {
                        let j = i + w * 3;
                        let v = d[j] - d[i];
                        loss += v * v / count;
                        gd[j] += 2.0 * v / count;
                        gd[i] -= 2.0 * v / count;
                    }
                }
            }
        }
        for y in 0..h * f {
            for x in 0..w * f {
                for c in 0..3 {
                    grad[(y * width + x) * 3 + c] += gd[((y / f) * w + x / f) * 3 + c] * inv;
                }
            }
        }
    }
    if used == 0 {
        return (0.0, grad);
    }
    let k = used as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    (loss / k, grad)
}

/// Full objective and its gradient w.r.t. every splat parameter.
pub fn objective(cloud: &SplatCloud, views: &[View], cfg: &FitConfig) -> Result<(LossBreakdown, Vec<GaussianGrad>)> {
    let lambdas = &cfg.lambdas;
    let rendered: Vec<_> = views
        .par_iter()
        .map(|v| render_for_backward(cloud, &v.camera, &cfg.render))
        .collect();
    let renders: Vec<Image> = rendered.iter().map(|(img, _)| img.clone()).collect();
    let targets: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
    let weights: Vec<f64> = views.iter().map(|v| v.weight).collect();
    for (r, t) in renders.iter().zip(&targets) {
        if !r.same_shape(t) {
            return Err(Error::param("view image size does not match its camera"));
        }
    }
    let (mse, percep, d_render) = image_loss(&renders, &targets, &weights, lambdas);
    let mut grads = vec![GaussianGrad::default(); cloud.len()];
    if lambdas.mse > 0.0 || lambdas.percep > 0.0 {
        let per_view: Vec<Vec<GaussianGrad>> = rendered
            .par_iter()
            .zip(views.par_iter())
            .zip(d_render.par_iter())
            .map(|(((_, cache), v), d)| backward(cache, cloud, &v.camera, &cfg.render, d))
            .collect::<Result<_>>()?;
        for g in &per_view {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.add_assign(gi);
            }
        }
    }
    let (reg, reg_grads) = regularizer(cloud, &cfg.reg);
    if lambdas.reg > 0.0 {
        for (acc, gi) in grads.iter_mut().zip(&reg_grads) {
            acc.add_assign(&gi.scaled(lambdas.reg));
        }
    }
    let total = lambdas.mse * mse + lambdas.percep * percep + lambdas.reg * reg;
    Ok((LossBreakdown { mse, percep, reg, total }, grads))
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn softplus_inv(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s + (-(-s).exp_m1()).ln()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

const PARAMS: usize = 14;

fn pack(cloud: &SplatCloud) -> Vec<f64> {
    let mut p = Vec::with_capacity(cloud.len() * PARAMS);
    for g in &cloud.gaussians {
        p.extend_from_slice(g.position.as_slice());
        p.extend(g.scale.iter().map(|&s| softplus_inv(s)));
        p.extend_from_slice(&g.rotation);
        p.push(g.opacity);
        p.extend_from_slice(&g.color);
    }
    p
}

fn unpack(p: &[f64], scene_scale: f64) -> SplatCloud {
    let gaussians = p
        .chunks_exact(PARAMS)
        .map(|c| Gaussian {
            position: Vector3::new(c[0], c[1], c[2]),
            scale: Vector3::new(softplus(c[3]), softplus(c[4]), softplus(c[5])).map(|s| s.max(1e-9)),
            rotation: [c[6], c[7], c[8], c[9]],
            opacity: c[10],
            color: [c[11], c[12], c[13]],
        })
        .collect();
    SplatCloud::new(gaussians, scene_scale)
}

fn flatten_grad(grads: &[GaussianGrad], p: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len());
    for (g, c) in grads.iter().zip(p.chunks_exact(PARAMS)) {
        out.extend_from_slice(g.position.as_slice());
        for k in 0..3 {
            out.push(g.scale[k] * sigmoid(c[3 + k]));
        }
        out.extend_from_slice(&g.rotation);
        out.push(g.opacity);
        out.extend_from_slice(&g.color);
    }
    out
}

fn lr_table(lr: &LearningRates) -> [f64; PARAMS] {
    let mut t = [0.0; PARAMS];
    t[..3].fill(lr.position);
    t[3..6].fill(lr.scale);
    t[6..10].fill(lr.rotation);
    t[10] = lr.opacity;
    t[11..].fill(lr.color);
    t
}

/// Keeps parameters on their feasible sets after an update.
fn project_params(p: &mut [f64]) {
    for c in p.chunks_exact_mut(PARAMS) {
        let q = normalize_quat(&[c[6], c[7], c[8], c[9]]);
        let q = if q.iter().all(|v| v.is_finite()) { q } else { [1.0, 0.0, 0.0, 0.0] };
        c[6..10].copy_from_slice(&q);
        c[10] = c[10].clamp(0.0, 1.0);
        for v in &mut c[11..14] {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MIN_LR_SCALE: f64 = 1.0 / 16.0;

/// Minimizes the objective over `views` starting from `init`.
pub fn fit_views(init: &SplatCloud, views: &[View], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::param("fit needs at least one view"));
    }
    let diag = validate(init);
    if !diag.is_valid() {
        return Err(Error::param(format!("initial cloud is invalid: {diag}")));
    }
    let scene_scale = init.scene_scale;
    let lrs = lr_table(&cfg.lr);
    let mut params = pack(init);
    let mut cloud = init.clone();
    let (mut loss, mut grads) = objective(&cloud, views, cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            loss: loss.total,
            last: Box::new(init.clone()),
        });
    }
    let mut history = vec![loss];
    let mut crossed = vec![false];
    let mut best = (init.clone(), loss);
    let mut adam = Adam {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        step: 0,
    };
    let mut lr_scale = 1.0f64;
    let mut converged = loss.data(&cfg.lambdas) <= cfg.tolerance && (cfg.lambdas.reg == 0.0 || loss.reg == 0.0) || loss.total == 0.0;
    let mut iterations = 0;
    while !converged && iterations < cfg.iterations {
        iterations += 1;
        let g = flatten_grad(&grads, &params);
        let mut m = adam.m.clone();
        let mut v = adam.v.clone();
        let step = adam.step + 1;
        let bc1 = 1.0 - BETA1.powi(step);
        let bc2 = 1.0 - BETA2.powi(step);
        let mut trial = params.clone();
        for i in 0..trial.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            trial[i] -= lr_scale * lrs[i % PARAMS] * mh / (vh.sqrt() + ADAM_EPS);
        }
        project_params(&mut trial);
        let trial_cloud = unpack(&trial, scene_scale);
        let (trial_loss, trial_grads) = objective(&trial_cloud, views, cfg)?;
        if !trial_loss.total.is_finite() {
            return Err(Error::Divergence {
                iteration: iterations,
                loss: trial_loss.total,
                last: Box::new(cloud),
            });
        }
        // Small rises are optimizer noise. A rise that survives several
        // halvings is a depth-order swap, a jump no step size removes.
        let rose = trial_loss.total > loss.total;
        let wall = rose && lr_scale < MIN_LR_SCALE;
        if !rose || wall || trial_loss.total <= loss.total * (1.0 + cfg.rise_tolerance) {
            params = trial;
            cloud = trial_cloud;
            loss = trial_loss;
            grads = trial_grads;
            adam = Adam { m, v, step };
            history.push(loss);
            crossed.push(rose);
            lr_scale = if wall { 1.0 } else { (lr_scale * 1.25).min(1.0) };
            if loss.total < best.1.total {
                best = (cloud.clone(), loss);
            }
            if loss.data(&cfg.lambdas) <= cfg.tolerance && loss.reg == 0.0 {
                converged = true;
            }
        } else {
            lr_scale *= 0.5;
        }
    }
    let (cloud, loss) = best;
    Ok(FitResult {
        cloud,
        loss,
        history,
        crossed,
        iterations,
        converged,
    })
}

/// Fits target views plus the context view, initializing from the views
/// unless `cfg.warm_start` is set.
pub fn fit(
    x0_views: &[Image],
    cams: &[Camera],
    context_view: &Image,
    context_cam: &Camera,
    cfg: &FitConfig,
) -> Result<FitResult> {
    if x0_views.len() != cams.len() {
        return Err(Error::param("one camera per view required"));
    }
    let mut views: Vec<View> = x0_views
        .iter()
        .zip(cams)
        .map(|(img, cam)| View {
            image: img.clone(),
            camera: cam.clone(),
            weight: 1.0,
        })
        .collect();
    views.push(View {
        image: context_view.clone(),
        camera: context_cam.clone(),
        weight: 1.0,
    });
    let init = initial_cloud(&views, cfg)?;
    fit_views(&init, &views, cfg)
}

pub(crate) fn initial_cloud(views: &[View], cfg: &FitConfig) -> Result<SplatCloud> {
    match &cfg.warm_start {
        Some(c) => Ok(c.clone()),
        None => {
            let imgs: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
            let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
            init_from_views(&imgs, &cams, cfg.n_splats, cfg.seed)
        }
    }
}

/// Per-view data weights for timestep `t`.
pub fn snr_weight(t: usize, sched: &NoiseSchedule, cfg: &FitConfig) -> f64 {
    if !cfg.snr_weighting {
        return 1.0;
    }
    let snr = if t == 0 { f64::INFINITY } else { sched.snr(t) };
    snr.clamp(cfg.snr_clamp[0], cfg.snr_clamp[1])
}

/// Reconstruction at timestep `t` from noisy target views `xt_views`
/// (signed range), the context view (`[0, 1]`) and the clean estimates
/// `x0_tilde` (signed range). With `x0_tilde = None` the targets fall back
/// to the zero-noise one-step estimate of `xt_views`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    xt_views: &[Image],
    t: usize,
    context_view: &Image,
    x0_tilde: Option<&[Image]>,
    cams: &[Camera],
    context_cam: &Camera,
    sched: &NoiseSchedule,
    cfg: &FitConfig,
) -> Result<FitResult> {
    if xt_views.len() != cams.len() {
        return Err(Error::param("one camera per view required"));
    }
    let targets: Vec<Image> = match x0_tilde {
        Some(x0) => {
            if x0.len() != xt_views.len() {
                return Err(Error::param("x0 estimate count does not match views"));
            }
            x0.to_vec()
        }
        None => xt_views
            .iter()
            .map(|x| {
                let est = if t == 0 {
                    x.data.clone()
                } else {
                    one_step_x0(&x.data, &vec![0.0; x.data.len()], t, sched)?
                };
                Image::from_data(x.width, x.height, est)
            })
            .collect::<Result<_>>()?,
    };
    let w = snr_weight(t, sched, cfg);
    let mut views: Vec<View> = targets
        .iter()
        .zip(cams)
        .map(|(img, cam)| View {
            image: from_signed(img).map(|v| v.clamp(0.0, 1.0)),
            camera: cam.clone(),
            weight: w,
        })
        .collect();
    views.push(View {
        image: context_view.clone(),
        camera: context_cam.clone(),
        weight: 1.0,
    });
    let init = initial_cloud(&views, cfg)?;
    fit_views(&init, &views, cfg)
}

/// Pixels differing from the white background by more than this count as
/// foreground.
const FOREGROUND_THRESHOLD: f64 = 0.05;

fn is_foreground(px: [f64; 3]) -> bool {
    px.iter().any(|&c| (1.0 - c).abs() > FOREGROUND_THRESHOLD)
}

/// Seeds `n_splats` splats by back-projecting random foreground pixels to
/// the middle of the visual-hull chord along their ray.
pub fn init_from_views(views: &[Image], cams: &[Camera], n_splats: usize, seed: u64) -> Result<SplatCloud> {
    if views.is_empty() || views.len() != cams.len() {
        return Err(Error::param("init needs at least one view and one camera per view"));
    }
    if n_splats == 0 {
        return Err(Error::param("n_splats must be >= 1"));
    }
    let mut fg: Vec<(usize, usize, usize)> = Vec::new();
    for (v, img) in views.iter().enumerate() {
        for y in 0..img.height {
            for x in 0..img.width {
                if is_foreground(img.pixel(x, y)) {
                    fg.push((v, x, y));
                }
            }
        }
    }
    if fg.is_empty() {
        return Err(Error::EmptyScene("no foreground pixels in any view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shell = cams.iter().map(|c| c.center().norm()).fold(0.0, f64::max) * 0.5;
    let mut points = Vec::with_capacity(n_splats);
    for _ in 0..n_splats {
        let (v, x, y) = fg[rng.random_range(0..fg.len())];
        let cam = &cams[v];
        let px = Vector2::new(x as f64 + rng.random::<f64>(), y as f64 + rng.random::<f64>());
        let color = views[v].pixel(x, y);
        let (lo, hi) = hull_chord(&px, v, views, cams, shell);
        let mid = 0.5 * (lo + hi);
        let jitter = 0.25 * (hi - lo) * (rng.random::<f64>() * 2.0 - 1.0);
        points.push((cam.unproject(&px, mid + jitter), color));
    }
    let radius = points
        .iter()
        .map(|(p, _)| p.norm())
        .fold(0.0, f64::max)
        .max(1e-3);
    let sigma = radius / (n_splats as f64).cbrt();
    let gaussians = points
        .into_iter()
        .map(|(p, c)| Gaussian::isotropic(p, sigma, 0.5, c))
        .collect();
    Ok(SplatCloud::new(gaussians, radius))
}

/// Depth interval along the ray of `px` in view `v` whose points fall on
/// foreground in every view that sees them.
fn hull_chord(px: &Vector2<f64>, v: usize, views: &[Image], cams: &[Camera], shell: f64) -> (f64, f64) {
    let cam = &cams[v];
    let dist = cam.center().norm();
    let ray = cam.unproject(px, 1.0) - cam.center();
    let near = (dist - shell).max(1e-3);
    let far = dist + shell;
    const SAMPLES: usize = 96;
    let mut first = None;
    let mut last = None;
    let mut closest = (f64::INFINITY, dist);
    for k in 0..SAMPLES {
        let depth = near + (far - near) * (k as f64 + 0.5) / SAMPLES as f64;
        let p = cam.unproject(px, depth);
        let r = (p - cam.center() - ray * depth).norm();
        debug_assert!(r < 1e-6);
        if p.norm() < closest.0 {
            closest = (p.norm(), depth);
        }
        let inside = views.iter().zip(cams).enumerate().all(|(u, (img, c))| {
            if u == v {
                return true;
            }
            match c.project(&p) {
                Some((q, _)) if q.x >= 0.0 && q.y >= 0.0 && q.x < img.width as f64 && q.y < img.height as f64 => {
                    is_foreground(img.pixel(q.x as usize, q.y as usize))
                }
                _ => true,
            }
        });
        if inside {
            first.get_or_insert(depth);
            last = Some(depth);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => (closest.1, closest.1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{orthogonal_target_rig, Intrinsics, RigSpec};
    use crate::renderer::render_color;

    fn rig(size: usize) -> Vec<Camera> {
        orthogonal_target_rig(&RigSpec::new(2.0, size)).unwrap()
    }

    fn context_cam(size: usize) -> Camera {
        Camera::orbit(2.0, 0.8, 0.3, &Intrinsics { focal: 1.5 * size as f64, width: size, height: size })
    }

    fn scene() -> SplatCloud {
        SplatCloud::new(
            vec![
                Gaussian::isotropic(Vector3::new(0.2, 0.0, 0.0), 0.15, 1.0, [0.9, 0.2, 0.2]),
                Gaussian::isotropic(Vector3::new(-0.2, 0.1, 0.1), 0.15, 1.0, [0.2, 0.8, 0.3]),
                Gaussian::isotropic(Vector3::new(0.0, -0.2, -0.1), 0.12, 1.0, [0.2, 0.3, 0.9]),
            ],
            0.5,
        )
    }

    fn views_of(cloud: &SplatCloud, cams: &[Camera]) -> Vec<View> {
        cams.iter()
            .map(|c| View {
                image: render_color(cloud, c, &RenderConfig::default()),
                camera: c.clone(),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let gt = scene();
        let cams = rig(32);
        let imgs: Vec<Image> = cams.iter().map(|c| render_color(&gt, c, &RenderConfig::default())).collect();
        let ctx = context_cam(32);
        let cfg = FitConfig {
            warm_start: Some(gt.clone()),
            ..FitConfig::default()
        };
        let res = fit(&imgs, &cams, &render_color(&gt, &ctx, &RenderConfig::default()), &ctx, &cfg).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
        assert!(res.loss.mse < 1e-6);
        assert_eq!(res.cloud, gt);
    }

    #[test]
    fn zero_lambdas_leave_cloud_unchanged() {
        let gt = scene();
        let cams = rig(16);
        let views = views_of(&gt, &cams);
        let mut init = gt.clone();
        init.gaussians[0].position.x += 0.1;
        let cfg = FitConfig {
            lambdas: LossWeights {
                mse: 0.0,
                percep: 0.0,
                reg: 0.0,
            },
            ..FitConfig::default()
        };
        let res = fit_views(&init, &views, &cfg).unwrap();
        assert_eq!(res.loss.total, 0.0);
        assert_eq!(res.cloud, init);
    }

    #[test]
    fn recovers_perturbed_single_splat() {
        let gt = SplatCloud::new(vec![Gaussian::isotropic(Vector3::new(0.05, 0.0, -0.05), 0.15, 1.0, [0.8, 0.3, 0.2])], 0.5);
        let cams = rig(32);
        let views = views_of(&gt, &cams);
        let mut init = gt.clone();
        init.gaussians[0].position += Vector3::new(0.1, -0.1, 0.1) / 3f64.sqrt();
        let monotone = FitConfig {
            rise_tolerance: 0.0,
            ..FitConfig::default()
        };
        let res = fit_views(&init, &views, &monotone).unwrap();
        let err = (res.cloud.gaussians[0].position - gt.gaussians[0].position).norm();
        assert!(err < 0.02, "{err}");
        let steps = res.history.windows(2).zip(&res.crossed[1..]);
        assert!(steps.filter(|(_, c)| !**c).all(|(w, _)| w[1].total <= w[0].total));
        assert!(res.loss.total <= res.history.iter().map(|l| l.total).fold(f64::INFINITY, f64::min));
        assert!(validate(&res.cloud).is_valid());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let gt = scene();
        let cams = rig(16);
        let views = views_of(&gt, &cams);
        let mut cloud = gt.clone();
        cloud.gaussians[0].position.y += 0.05;
        cloud.gaussians[0].opacity = 0.9;
        cloud.gaussians[1].opacity = 0.7;
        cloud.gaussians[2].opacity = 0.8;
        cloud.gaussians[1].scale = Vector3::new(0.2, 0.1, 0.15);
        cloud.gaussians[1].rotation = normalize_quat(&[0.8, 0.3, 0.1, -0.2]);
        cloud.gaussians[2].color = [0.5, 0.5, 0.1];
        cloud.gaussians[2].scale = Vector3::new(0.02, 0.3, 0.1);
        let cfg = FitConfig::default();
        let (_, grads) = objective(&cloud, &views, &cfg).unwrap();
        let f = |c: &SplatCloud| objective(c, &views, &cfg).unwrap().0.total;
        for s in 0..cloud.len() {
            for k in 0..14 {
                let h = 1e-6;
                let bump = |sign: f64| {
                    let mut c = cloud.clone();
                    let g = &mut c.gaussians[s];
                    match k {
                        0..=2 => g.position[k] += sign * h,
                        3..=5 => g.scale[k - 3] += sign * h,
                        6..=9 => g.rotation[k - 6] += sign * h,
                        10 => g.opacity += sign * h,
                        _ => g.color[k - 11] += sign * h,
                    }
                    c
                };
                let fd = (f(&bump(1.0)) - f(&bump(-1.0))) / (2.0 * h);
                let g = &grads[s];
                let an = match k {
                    0..=2 => g.position[k],
                    3..=5 => g.scale[k - 3],
                    6..=9 => g.rotation[k - 6],
                    10 => g.opacity,
                    _ => g.color[k - 11],
                };
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-3, "splat {s} param {k}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn init_lands_inside_object() {
        let gt = scene();
        let cams = rig(32);
        let imgs: Vec<Image> = cams.iter().map(|c| render_color(&gt, c, &RenderConfig::default())).collect();
        let a = init_from_views(&imgs, &cams, 200, 5).unwrap();
        let b = init_from_views(&imgs, &cams, 200, 5).unwrap();
        assert_eq!(a, b);
        // bounding sphere of the scene: centers within 0.25, sigma 0.15
        let inside = a.gaussians.iter().filter(|g| g.position.norm() < 0.25 + 3.0 * 0.15).count();
        assert!(inside as f64 >= 0.9 * 200.0, "{inside}");
        let one = init_from_views(&imgs, &cams, 1, 2).unwrap();
        assert_eq!(one.len(), 1);
        let blank = vec![Image::new(32, 32, [1.0; 3]); 4];
        assert!(matches!(init_from_views(&blank, &cams, 8, 0), Err(Error::EmptyScene(_))));
    }

    #[test]
    fn gradient_difference_gradient_is_exact() {
        let (w, h) = (9, 7);
        let e: Vec<f64> = (0..w * h * 3).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4).collect();
        let (_, g) = grad_diff(&e, w, h);
        for i in [0, 5, 40, 100, 188] {
            let mut p = e.clone();
            p[i] += 1e-6;
            let mut m = e.clone();
            m[i] -= 1e-6;
            let fd = (grad_diff(&p, w, h).0 - grad_diff(&m, w, h).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn ablation_without_prior_returns_valid_cloud() {
        let gt = scene();
        let cams = rig(16);
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let imgs: Vec<Image> = cams
            .iter()
            .map(|c| crate::image::to_signed(&render_color(&gt, c, &RenderConfig::default())))
            .collect();
        let ctx = context_cam(16);
        let ctx_img = render_color(&gt, &ctx, &RenderConfig::default());
        let cfg = FitConfig {
            iterations: 5,
            n_splats: 8,
            ..FitConfig::default()
        };
        let res = reconstruct(&imgs, 10, &ctx_img, None, &cams, &ctx, &sched, &cfg).unwrap();
        assert!(validate(&res.cloud).is_valid());
    }
}
