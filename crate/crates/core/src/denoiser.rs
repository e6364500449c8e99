//! Stand-ins for a learned multi-view noise predictor.
//!
//! [`OracleDenoiser`] knows the clean target views and returns them with a
//! controlled, independent per-view perturbation, which makes the views
//! mutually inconsistent the way a 2D network's predictions can be.
//! [`gm_predict_x0`] is the exact posterior mean for a 1-D Gaussian-mixture
//! prior and is used to check the reverse process statistically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{to_signed, Image};
use crate::schedule::{implied_noise, one_step_x0, NoiseSchedule};

/// Per-view noise estimate and the clean estimate it implies. All values
/// are in the signed `[-1, 1]` range.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Vec<Image>,
    pub x0_hat: Vec<Image>,
}

impl DenoiserOutput {
    /// Builds the output from noise estimates so that `x0_hat` is always
    /// the one-step estimate of exactly these `eps_hat`.
    pub fn from_eps(xt: &[Image], eps_hat: Vec<Image>, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        let x0_hat = xt
            .iter()
            .zip(&eps_hat)
            .map(|(x, e)| {
                let data = one_step_x0(&x.data, &e.data, t, sched)?;
                Image::from_data(x.width, x.height, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { eps_hat, x0_hat })
    }
}

/// A multi-view noise predictor: `(x_t views, t, context) -> eps_hat`.
pub trait Denoiser: Sync {
    fn predict(&self, xt: &[Image], t: usize, sched: &NoiseSchedule, context: &Image) -> Result<DenoiserOutput>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Smooth random displacement field, std `sigma * width` pixels.
    #[default]
    Warp,
    /// Smooth additive field, std `sigma` per pixel and channel.
    AdditiveLowfreq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleDenoiserConfig {
    /// Clean target views in `[0, 1]`.
    pub gt_views: Vec<Image>,
    pub perturb_sigma: f64,
    pub perturb_mode: PerturbMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    cfg: OracleDenoiserConfig,
}

impl OracleDenoiser {
    pub fn new(cfg: OracleDenoiserConfig) -> Result<Self> {
        if !(cfg.perturb_sigma >= 0.0 && cfg.perturb_sigma.is_finite()) {
            return Err(Error::param(format!("perturb_sigma must be >= 0, got {}", cfg.perturb_sigma)));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleDenoiserConfig {
        &self.cfg
    }

    /// The perturbed clean view the oracle targets at step `t`, in `[0, 1]`.
    pub fn perturbed_view(&self, t: usize, view: usize) -> Image {
        let gt = &self.cfg.gt_views[view];
        let sigma = self.cfg.perturb_sigma;
        if sigma == 0.0 {
            return gt.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((t as u64) << 20) | view as u64);
        match self.cfg.perturb_mode {
            PerturbMode::AdditiveLowfreq => {
                let fields: [Vec<f64>; 3] = std::array::from_fn(|_| lowfreq_field(gt.width, gt.height, &mut rng));
                let mut out = gt.clone();
                for (i, v) in out.data.iter_mut().enumerate() {
                    *v += sigma * fields[i % 3][i / 3];
                }
                out
            }
            PerturbMode::Warp => {
                let dx = lowfreq_field(gt.width, gt.height, &mut rng);
                let dy = lowfreq_field(gt.width, gt.height, &mut rng);
                let amp = sigma * gt.width as f64;
                let mut out = gt.clone();
                for y in 0..gt.height {
                    for x in 0..gt.width {
                        let i = y * gt.width + x;
                        let sx = x as f64 + 0.5 + amp * dx[i];
                        let sy = y as f64 + 0.5 + amp * dy[i];
                        out.set_pixel(x, y, gt.sample_bilinear(sx, sy));
                    }
                }
                out
            }
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, xt: &[Image], t: usize, sched: &NoiseSchedule, _context: &Image) -> Result<DenoiserOutput> {
        if xt.len() != self.cfg.gt_views.len() {
            return Err(Error::param(format!(
                "oracle holds {} views, got {}",
                self.cfg.gt_views.len(),
                xt.len()
            )));
        }
        let mut eps_hat = Vec::with_capacity(xt.len());
        for (v, x) in xt.iter().enumerate() {
            if !x.same_shape(&self.cfg.gt_views[v]) {
                return Err(Error::param(format!(
                    "view {v} is {}x{}, oracle view is {}x{}",
                    x.width, x.height, self.cfg.gt_views[v].width, self.cfg.gt_views[v].height
                )));
            }
            let target = to_signed(&self.perturbed_view(t, v));
            let eps = implied_noise(&x.data, &target.data, t, sched)?;
            eps_hat.push(Image::from_data(x.width, x.height, eps)?);
        }
        DenoiserOutput::from_eps(xt, eps_hat, t, sched)
    }
}

/// Bilinear interpolation of i.i.d. normals on a grid with cell size
/// `height / 8`, rescaled so every pixel has unit variance.
fn lowfreq_field(width: usize, height: usize, rng: &mut impl Rng) -> Vec<f64> {
    let cell = (height as f64 / 8.0).max(1.0);
    let nx = (width as f64 / cell).ceil() as usize + 2;
    let ny = (height as f64 / cell).ceil() as usize + 2;
    let nodes: Vec<f64> = (0..nx * ny).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = (y as f64 + 0.5) / cell;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = (x as f64 + 0.5) / cell;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
            let n = [
                nodes[y0 * nx + x0],
                nodes[y0 * nx + x0 + 1],
                nodes[(y0 + 1) * nx + x0],
                nodes[(y0 + 1) * nx + x0 + 1],
            ];
            let v: f64 = w.iter().zip(&n).map(|(a, b)| a * b).sum();
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            out.push(v / norm);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n == 0 || self.means.len() != n || self.sigmas.len() != n {
            return Err(Error::param("mixture needs matching, non-empty weights/means/sigmas"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::param("mixture weights must be >= 0 and sum to 1"));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("mixture sigmas must be >= 0 and means finite"));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }
}

/// `E[x0 | x_t]` under a Gaussian-mixture prior on `x0`.
pub fn gm_predict_x0(xt: &[f64], t: usize, sched: &NoiseSchedule, mixture: &Mixture) -> Result<Vec<f64>> {
    mixture.validate()?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let sab = ab.sqrt();
    let k = mixture.weights.len();
    let vars: Vec<f64> = mixture.sigmas.iter().map(|s| ab * s * s + 1.0 - ab).collect();
    let mut logp = vec![0.0; k];
    Ok(xt
        .iter()
        .map(|&x| {
            for i in 0..k {
                let d = x - sab * mixture.means[i];
                logp[i] = mixture.weights[i].ln() - 0.5 * vars[i].ln() - 0.5 * d * d / vars[i];
            }
            let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut acc = 0.0;
            for i in 0..k {
                let r = (logp[i] - top).exp();
                let s2 = mixture.sigmas[i] * mixture.sigmas[i];
                let cond = mixture.means[i] + sab * s2 / vars[i] * (x - sab * mixture.means[i]);
                z += r;
                acc += r * cond;
            }
            acc / z
        })
        .collect())
}
