//! One paired comparison: plain multi-view sampling against sampling with
//! splat refinement, both driven by the same imperfect oracle denoiser.

use splatdiff::experiment::{run_one, ExperimentConfig, Mode, SceneData};
use splatdiff::scene::make_scene;

fn main() -> splatdiff::error::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("splatdiff_ab_{seed}"));
    let mut cfg = ExperimentConfig::default();
    cfg.output = dir.clone();
    cfg.runs.contact_sheets = false;
    let scene = SceneData::render(make_scene(&cfg.scene)?, &cfg)?;
    let sched = cfg.schedule()?;
    for mode in [Mode::Baseline, Mode::Refined] {
        let (s, _) = run_one(&cfg, &scene, &sched, mode, seed)?;
        println!(
            "{mode:8}: consistency residual {:.2e}, target PSNR {:.2} dB, {} fit iterations",
            s.residual, s.psnr_db, s.fit_iterations
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
