//! Geometry and image metrics between a sphere and a shrunken copy.

use splatdiff::camera::{evaluation_rig, RigSpec};
use splatdiff::meshing::{extract_textured_mesh, MeshConfig};
use splatdiff::metrics::{chamfer, fscore, normal_consistency, p2s, psnr, ssim, surface_points};
use splatdiff::renderer::{render_color, RenderConfig};
use splatdiff::scene::sphere_shell;

fn main() -> splatdiff::error::Result<()> {
    let cfg = MeshConfig {
        voxel_size: 0.02,
        resolution: 128,
        ..MeshConfig::default()
    };
    let gt = sphere_shell(200, 0.5, 0);
    let mut pred = gt.clone();
    for g in &mut pred.gaussians {
        g.position *= 0.98;
    }
    let (gm, pm) = (extract_textured_mesh(&gt, &cfg)?, extract_textured_mesh(&pred, &cfg)?);
    let (gp, pp) = (surface_points(&gm, 20_000, 1)?, surface_points(&pm, 20_000, 1)?);
    println!("chamfer      {:.3} cm", chamfer(&pp, &gp)?);
    println!("point2surf   {:.3} cm", p2s(&pp, &gm)?);
    for thr in [0.005, 0.01, 0.02] {
        println!("{:<13}{:.3}", format!("F@{:.0}mm", thr * 1000.0), fscore(&pp, &gp, thr)?);
    }
    println!("normals      {:.4}", normal_consistency(&pm, &gm, 5000)?);
    let render = RenderConfig::default();
    for (i, cam) in evaluation_rig(4, &RigSpec::new(2.0, 64))?.iter().enumerate() {
        let (a, b) = (render_color(&pred, cam, &render), render_color(&gt, cam, &render));
        println!("view {i}: PSNR {:.2} dB, SSIM {:.4}", psnr(&a, &b, 99.0)?, ssim(&a, &b)?);
    }
    Ok(())
}
