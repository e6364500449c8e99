//! Ancestral sampling of a 1-D two-component mixture with its exact
//! posterior-mean denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use splatdiff::denoiser::{gm_predict_x0, Mixture};
use splatdiff::schedule::{ddim_step, ddpm_step, NoiseSchedule};

fn summary(label: &str, x: &[f64]) {
    let pos = x.iter().filter(|v| **v > 0.0).count();
    let mean = |keep: fn(f64) -> bool| {
        let v: Vec<f64> = x.iter().copied().filter(|v| keep(*v)).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    println!(
        "{label:5}: weight(+) {:.3}  mean(+) {:+.3}  mean(-) {:+.3}",
        pos as f64 / x.len() as f64,
        mean(|v| v > 0.0),
        mean(|v| v <= 0.0)
    );
}

fn main() -> splatdiff::error::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mix = Mixture {
        weights: vec![0.3, 0.7],
        means: vec![1.0, -1.0],
        sigmas: vec![0.1, 0.1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();

    let mut x = start.clone();
    for t in (1..=sched.num_steps()).rev() {
        let x0 = gm_predict_x0(&x, t, &sched, &mix)?;
        x = ddpm_step(&x, &x0, t, &sched, &mut rng)?;
    }
    summary("ddpm", &x);

    let ts = sched.strided_timesteps(50)?;
    let mut x = start;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let x0 = gm_predict_x0(&x, t, &sched, &mix)?;
        x = ddim_step(&x, &x0, t, t_prev, &sched)?;
    }
    summary("ddim", &x);
    Ok(())
}
