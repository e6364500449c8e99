//! Fits a fresh splat cloud to four clean views of a scene and reports
//! held-out view quality.

use splatdiff::camera::{orthogonal_target_rig, RigSpec};
use splatdiff::metrics::psnr;
use splatdiff::reconstructor::{fit_views, init_from_views, FitConfig, View};
use splatdiff::renderer::{render_color, RenderConfig};
use splatdiff::scene::{make_scene, novel_views, SceneSpec};

fn main() -> splatdiff::error::Result<()> {
    let truth = make_scene(&SceneSpec::default())?;
    let spec = RigSpec::new(2.0, 64);
    let cams = orthogonal_target_rig(&spec)?;
    let render = RenderConfig::default();
    let views: Vec<View> = cams
        .iter()
        .map(|c| View {
            image: render_color(&truth, c, &render),
            camera: c.clone(),
            weight: 1.0,
        })
        .collect();
    let images: Vec<_> = views.iter().map(|v| v.image.clone()).collect();
    let cfg = FitConfig {
        n_splats: 48,
        iterations: 150,
        ..FitConfig::default()
    };
    let init = init_from_views(&images, &cams, cfg.n_splats, cfg.seed)?;
    let res = fit_views(&init, &views, &cfg)?;
    println!("{} iterations, final mse {:.2e}", res.iterations, res.loss.mse);
    for (i, cam) in novel_views(4, &spec).iter().enumerate() {
        let p = psnr(&render_color(&res.cloud, cam, &render), &render_color(&truth, cam, &render), 99.0)?;
        println!("novel view {i}: {p:.2} dB");
    }
    Ok(())
}
