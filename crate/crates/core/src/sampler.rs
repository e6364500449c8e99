//! Multi-view reverse diffusion, with and without 3D trajectory
//! refinement.
//!
//! Both samplers run the same loop. At every reverse step the denoiser
//! gives a clean estimate `x0_tilde` per view; the baseline feeds it
//! straight into the posterior update. The refined sampler first fits one
//! splat cloud to all views, renders it back at the target cameras, and
//! feeds those renders `x0_hat` into the update instead, so the state
//! stays explainable by a single 3D scene.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::Camera;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::{contact_sheet, from_signed, to_signed, Image};
use crate::reconstructor::{fit_views, image_loss, init_from_views, reconstruct, FitConfig, FitResult, LossBreakdown, LossWeights, View};
use crate::renderer::{render_color, RenderConfig};
use crate::schedule::{ddim_step, ddpm_step_between, NoiseSchedule};
use crate::splat::{regularizer, RegWeights, SplatCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub rule: UpdateRule,
    pub seed: u64,
    /// Refine only at steps with `t <= threshold`; `None` refines always.
    pub refine_below: Option<usize>,
    /// Clamp renders to `[-1, 1]` before the posterior update.
    pub clamp: bool,
    /// Relative weights of the final state and of the last denoiser
    /// estimate in the closing reconstruction.
    pub final_weights: [f64; 2],
    /// Fit iterations for the closing reconstruction.
    pub final_iterations: usize,
    /// Keep per-step images in the log.
    pub record_images: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            rule: UpdateRule::Ddim,
            seed: 0,
            refine_below: None,
            clamp: true,
            final_weights: [1.0, 1.0],
            final_iterations: 30,
            record_images: true,
        }
    }
}

/// Everything fixed across a sampling run.
pub struct SamplingSetup<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    pub cams: &'a [Camera],
    /// Conditioning image in `[0, 1]`.
    pub context_view: &'a Image,
    pub context_cam: &'a Camera,
    /// Clean target views in `[0, 1]`, used only for logging residuals.
    pub gt_views: Option<&'a [Image]>,
    pub render: RenderConfig,
}

/// Which estimate entered the posterior update at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum X0Source {
    Denoiser,
    Render,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub source: X0Source,
    /// Signed-range images; empty unless images are recorded.
    pub xt: Vec<Image>,
    pub x0_tilde: Vec<Image>,
    pub x0_hat: Vec<Image>,
    /// Per-view MSE of the estimate used in the update vs ground truth.
    pub gt_mse: Vec<f64>,
    /// Image-term loss of the reconstruction at this step.
    pub fit_loss: Option<LossBreakdown>,
    pub fit_iterations: usize,
    /// Mean MSE between renders of the cloud and the denoiser estimates.
    pub consistency: Option<f64>,
    pub cloud: Option<Arc<SplatCloud>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    /// State at `t = 0`, signed range.
    pub final_state: Vec<Image>,
    pub final_cloud: Option<Arc<SplatCloud>>,
}

impl TrajectoryLog {
    pub fn refinement_records(&self) -> usize {
        self.steps.iter().filter(|s| s.source == X0Source::Render).count()
    }

    pub fn total_fit_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.fit_iterations).sum()
    }

    pub fn final_views(&self) -> Vec<Image> {
        self.final_state.iter().map(|x| from_signed(x).map(|v| v.clamp(0.0, 1.0))).collect()
    }

    pub fn to_csv(&self) -> String {
        let views = self.steps.first().map_or(0, |s| s.gt_mse.len());
        let mut out = String::from("t,t_prev,source,fit_mse,fit_percep,fit_iterations,consistency");
        for v in 0..views {
            out.push_str(&format!(",gt_mse_{v}"));
        }
        out.push('\n');
        for s in &self.steps {
            let src = match s.source {
                X0Source::Denoiser => "denoiser",
                X0Source::Render => "render",
            };
            let (m, p) = s.fit_loss.map_or((String::new(), String::new()), |l| (l.mse.to_string(), l.percep.to_string()));
            let c = s.consistency.map_or(String::new(), |c| c.to_string());
            out.push_str(&format!("{},{},{src},{m},{p},{},{c}", s.t, s.t_prev, s.fit_iterations));
            for v in &s.gt_mse {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Rows: `x_t`, `x0_tilde`, `x0_hat` (when present) for one step.
    pub fn contact_sheet(&self, step: usize) -> Option<Image> {
        let s = self.steps.get(step)?;
        let show = |v: &Vec<Image>| v.iter().map(|x| from_signed(x).map(|c| c.clamp(0.0, 1.0))).collect::<Vec<_>>();
        let mut rows = vec![show(&s.xt), show(&s.x0_tilde)];
        if !s.x0_hat.is_empty() {
            rows.push(show(&s.x0_hat));
        }
        contact_sheet(&rows)
    }

    pub fn save_contact_sheets(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(img) = self.contact_sheet(i) {
                img.save_png(&dir.join(format!("step_{i:03}_t{:04}.png", s.t)))?;
            }
        }
        Ok(())
    }
}

/// A refinement of the denoiser estimates at one step.
pub struct Refinement {
    /// Replacement estimates, signed range.
    pub x0_hat: Vec<Image>,
    pub cloud: Option<SplatCloud>,
    pub fit_loss: Option<LossBreakdown>,
    pub iterations: usize,
}

/// `(x_t, t, x0_tilde) -> Some(refinement)` or `None` to keep `x0_tilde`.
pub type Refiner<'r> = dyn FnMut(&[Image], usize, &[Image]) -> Result<Option<Refinement>> + 'r;

fn initial_noise(cams: &[Camera], seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cams.iter()
        .map(|c| {
            let data = (0..c.width * c.height * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
            Image {
                width: c.width,
                height: c.height,
                data,
            }
        })
        .collect()
}

fn view_mse(a: &Image, b: &Image) -> f64 {
    a.mse(b)
}

/// The shared reverse loop. Both samplers are this function with a
/// different `refiner`.
pub fn sample_with_refiner(setup: &SamplingSetup, cfg: &SamplerConfig, refiner: &mut Refiner) -> Result<TrajectoryLog> {
    let sched = setup.sched;
    let timesteps = sched.strided_timesteps(cfg.steps)?;
    let mut x = initial_noise(setup.cams, cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = TrajectoryLog::default();
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let out = setup
            .denoiser
            .predict(&x, t, sched, setup.context_view)
            .map_err(|e| Error::Sampler {
                t,
                source: Box::new(Error::Denoiser {
                    t,
                    source: Box::new(e),
                }),
                log: Box::new(log.clone()),
            })?;
        let x0_tilde = out.x0_hat;
        let refinement = match refiner(&x, t, &x0_tilde) {
            Ok(r) => r,
            Err(e) => {
                return Err(Error::Sampler {
                    t,
                    source: Box::new(e),
                    log: Box::new(log),
                })
            }
        };
        let (source, used, rec_hat, cloud, fit_loss, iters) = match refinement {
            Some(r) => (X0Source::Render, r.x0_hat.clone(), r.x0_hat, r.cloud, r.fit_loss, r.iterations),
            None => (X0Source::Denoiser, x0_tilde.clone(), Vec::new(), None, None, 0),
        };
        let gt_mse = setup.gt_views.map_or(Vec::new(), |gt| {
            used.iter()
                .zip(gt)
                .map(|(u, g)| view_mse(&from_signed(u), g))
                .collect()
        });
        let consistency = (!rec_hat.is_empty()).then(|| {
            let n = rec_hat.len() as f64;
            rec_hat
                .iter()
                .zip(&x0_tilde)
                .map(|(a, b)| view_mse(&from_signed(a), &from_signed(b)))
                .sum::<f64>()
                / n
        });
        let next = x
            .iter()
            .zip(&used)
            .map(|(xt, x0)| {
                let data = match cfg.rule {
                    UpdateRule::Ddim => ddim_step(&xt.data, &x0.data, t, t_prev, sched)?,
                    UpdateRule::Ddpm => ddpm_step_between(&xt.data, &x0.data, t, t_prev, sched, &mut noise_rng)?,
                };
                Ok(Image {
                    width: xt.width,
                    height: xt.height,
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        log.steps.push(StepRecord {
            t,
            t_prev,
            source,
            xt: if cfg.record_images { x.clone() } else { Vec::new() },
            x0_tilde: if cfg.record_images { x0_tilde } else { Vec::new() },
            x0_hat: if cfg.record_images { rec_hat } else { Vec::new() },
            gt_mse,
            fit_loss,
            fit_iterations: iters,
            consistency,
            cloud: cloud.map(Arc::new),
        });
        x = next;
    }
    log.final_state = x;
    Ok(log)
}

/// Plain multi-view reverse sampling: no 3D model in the loop.
pub fn sample_baseline(setup: &SamplingSetup, cfg: &SamplerConfig) -> Result<(Vec<Image>, TrajectoryLog)> {
    let log = sample_with_refiner(setup, cfg, &mut |_, _, _| Ok(None))?;
    Ok((log.final_views(), log))
}

/// Renders in the signed range, optionally clamped.
fn signed_renders(cloud: &SplatCloud, cams: &[Camera], render: &RenderConfig, clamp: bool) -> Vec<Image> {
    cams.iter()
        .map(|c| {
            let s = to_signed(&render_color(cloud, c, render));
            if clamp {
                s.map(|v| v.clamp(-1.0, 1.0))
            } else {
                s
            }
        })
        .collect()
}

/// Trajectory-refined sampling. Returns the cloud from a closing
/// reconstruction at `t = 0` along with the log.
pub fn sample_3d_consistent(setup: &SamplingSetup, fit_cfg: &FitConfig, cfg: &SamplerConfig) -> Result<(SplatCloud, TrajectoryLog)> {
    let mut prev: Option<SplatCloud> = None;
    let mut last_tilde: Vec<Image> = Vec::new();
    let render = setup.render;
    let mut log = {
        let mut refiner = |xt: &[Image], t: usize, x0_tilde: &[Image]| -> Result<Option<Refinement>> {
            last_tilde = x0_tilde.to_vec();
            if cfg.refine_below.is_some_and(|th| t > th) {
                return Ok(None);
            }
            let fc = FitConfig {
                warm_start: prev.take(),
                render,
                ..fit_cfg.clone()
            };
            let res = reconstruct(xt, t, setup.context_view, Some(x0_tilde), setup.cams, setup.context_cam, setup.sched, &fc)?;
            let x0_hat = signed_renders(&res.cloud, setup.cams, &render, cfg.clamp);
            prev = Some(res.cloud.clone());
            Ok(Some(Refinement {
                x0_hat,
                cloud: Some(res.cloud),
                fit_loss: Some(res.loss),
                iterations: res.iterations,
            }))
        };
        sample_with_refiner(setup, cfg, &mut refiner)?
    };
    // closing reconstruction from the final state and the last estimate
    let unit = |x: &Image| from_signed(x).map(|v| v.clamp(0.0, 1.0));
    let mut views: Vec<View> = Vec::new();
    for (i, cam) in setup.cams.iter().enumerate() {
        views.push(View {
            image: unit(&log.final_state[i]),
            camera: cam.clone(),
            weight: cfg.final_weights[0],
        });
        if cfg.final_weights[1] > 0.0 {
            views.push(View {
                image: unit(&last_tilde[i]),
                camera: cam.clone(),
                weight: cfg.final_weights[1],
            });
        }
    }
    views.push(View {
        image: setup.context_view.clone(),
        camera: setup.context_cam.clone(),
        weight: 1.0,
    });
    let init = match prev {
        Some(c) => c,
        None => {
            let imgs: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
            let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
            init_from_views(&imgs, &cams, fit_cfg.n_splats, fit_cfg.seed)?
        }
    };
    let fc = FitConfig {
        iterations: cfg.final_iterations,
        render,
        warm_start: None,
        ..fit_cfg.clone()
    };
    let res = match fit_views(&init, &views, &fc) {
        Ok(r) => r,
        Err(e) => {
            return Err(Error::Sampler {
                t: 0,
                source: Box::new(e),
                log: Box::new(log),
            })
        }
    };
    log.final_cloud = Some(Arc::new(res.cloud.clone()));
    Ok((res.cloud, log))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct JointLoss {
    pub diffusion: f64,
    pub gs: LossBreakdown,
    pub total: f64,
}

/// Diffusion noise-prediction MSE plus the splat reconstruction loss over
/// all supervised views.
pub fn compute_joint_loss(
    eps_true: &[Image],
    eps_hat: &[Image],
    renders: &[Image],
    gt_views: &[Image],
    cloud: &SplatCloud,
    lambdas: &LossWeights,
    reg: &RegWeights,
) -> Result<JointLoss> {
    if eps_true.len() != eps_hat.len() || renders.len() != gt_views.len() {
        return Err(Error::param("joint loss inputs have mismatched view counts"));
    }
    for (a, b) in eps_true.iter().zip(eps_hat).chain(renders.iter().zip(gt_views)) {
        if !a.same_shape(b) {
            return Err(Error::param("joint loss inputs have mismatched image sizes"));
        }
    }
    let n: usize = eps_true.iter().map(|e| e.data.len()).sum();
    let diffusion = if n == 0 {
        0.0
    } else {
        eps_true
            .iter()
            .zip(eps_hat)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64
    };
    let weights = vec![1.0; renders.len()];
    let (mse, percep, _) = image_loss(renders, gt_views, &weights, lambdas);
    let (reg_v, _) = regularizer(cloud, reg);
    let total_gs = lambdas.mse * mse + lambdas.percep * percep + lambdas.reg * reg_v;
    Ok(JointLoss {
        diffusion,
        gs: LossBreakdown {
            mse,
            percep,
            reg: reg_v,
            total: total_gs,
        },
        total: diffusion + total_gs,
    })
}

/// How well one splat cloud can explain `views` (in `[0, 1]`): the MSE of
/// a fresh fit with the given budget. Duplicate views are ignored.
pub fn consistency_residual(views: &[Image], cams: &[Camera], budget: &FitConfig) -> Result<f64> {
    Ok(consistency_fit(views, cams, budget)?.loss.mse)
}

/// The fit behind [`consistency_residual`].
pub fn consistency_fit(views: &[Image], cams: &[Camera], budget: &FitConfig) -> Result<FitResult> {
    if views.len() < 2 || views.len() != cams.len() {
        return Err(Error::param("consistency residual needs >= 2 views with cameras"));
    }
    let mut unique: Vec<View> = Vec::new();
    for (img, cam) in views.iter().zip(cams) {
        if !unique.iter().any(|u| &u.image == img && &u.camera == cam) {
            unique.push(View {
                image: img.clone(),
                camera: cam.clone(),
                weight: 1.0,
            });
        }
    }
    fresh_fit(&unique, budget)
}

/// Final MSE of a fresh fit to `views`.
pub fn fit_residual(views: &[View], budget: &FitConfig) -> Result<f64> {
    Ok(fresh_fit(views, budget)?.loss.mse)
}

fn fresh_fit(views: &[View], budget: &FitConfig) -> Result<FitResult> {
    let imgs: Vec<Image> = views.iter().map(|v| v.image.clone()).collect();
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let init = init_from_views(&imgs, &cams, budget.n_splats, budget.seed)?;
    let cfg = FitConfig {
        warm_start: None,
        ..budget.clone()
    };
    fit_views(&init, views, &cfg)
}
