//! Renders a synthetic scene from the four-view target rig and writes
//! color and median depth for each view.

use std::path::PathBuf;

use splatdiff::camera::{orthogonal_target_rig, RigSpec};
use splatdiff::error::Error;
use splatdiff::renderer::{render_rgbd, RenderConfig};
use splatdiff::scene::{make_scene, SceneSpec, Shape};

fn main() -> splatdiff::error::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_rig".into()));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let cloud = make_scene(&SceneSpec {
        shape: Shape::Blob,
        n_splats: 48,
        ..SceneSpec::default()
    })?;
    let cams = orthogonal_target_rig(&RigSpec::new(2.0, 128))?;
    for (i, cam) in cams.iter().enumerate() {
        let (view, median) = render_rgbd(&cloud, cam, &RenderConfig::default());
        view.color.save_png(&out.join(format!("color_{i}.png")))?;
        let path = out.join(format!("median_{i}.pfm"));
        std::fs::File::create(&path)
            .and_then(|f| median.write_pfm(std::io::BufWriter::new(f)))
            .map_err(|e| Error::Io { path, source: e })?;
        let covered = view.alpha.data.iter().filter(|a| **a > 0.5).count();
        println!("view {i}: {covered} pixels above half coverage, {} splats skipped", view.skipped);
    }
    println!("wrote {}", out.display());
    Ok(())
}
