//! Synthetic ground-truth scenes.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Intrinsics, RigSpec};
use crate::error::{Error, Result};
use crate::splat::{normalize_quat, quat_from_z_to, Gaussian, SplatCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Opaque flat splats tiling a sphere shell.
    Sphere,
    /// Random anisotropic splats inside a ball.
    Blob,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub shape: Shape,
    pub n_splats: usize,
    pub seed: u64,
    /// Shell radius (sphere) or bounding radius (blob), meters.
    pub radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            shape: Shape::Blob,
            n_splats: 32,
            seed: 7,
            radius: 0.5,
        }
    }
}

pub fn make_scene(spec: &SceneSpec) -> Result<SplatCloud> {
    if spec.n_splats == 0 {
        return Err(Error::EmptyScene("scene spec asks for 0 splats".into()));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::param("scene radius must be > 0"));
    }
    Ok(match spec.shape {
        Shape::Sphere => sphere_shell(spec.n_splats, spec.radius, spec.seed),
        Shape::Blob => blob(spec.n_splats, spec.radius, spec.seed),
    })
}

/// Fibonacci-lattice shell of disc-shaped splats facing outward.
pub fn sphere_shell(n: usize, radius: f64, seed: u64) -> SplatCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let golden = PI * (3.0 - 5f64.sqrt());
    // disc sigma so neighbouring discs overlap
    let spacing = (4.0 * PI * radius * radius / n as f64).sqrt();
    let sigma = 0.6 * spacing;
    let gaussians = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            let normal = Vector3::new(r * th.cos(), y, r * th.sin());
            let shade = 0.5 + 0.5 * normal.y;
            let jitter: f64 = rng.random_range(-0.05..0.05);
            Gaussian {
                position: normal * radius,
                scale: Vector3::new(sigma, sigma, 0.05 * sigma),
                rotation: quat_from_z_to(&normal),
                opacity: 1.0,
                color: [0.3 + 0.5 * shade + jitter, 0.4 + 0.2 * shade, 0.8 - 0.5 * shade],
            }
        })
        .collect();
    SplatCloud::new(gaussians, radius)
}

pub fn blob(n: usize, radius: f64, seed: u64) -> SplatCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            // uniform in a ball of 0.6 * radius
            let p = loop {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if p.norm_squared() <= 1.0 {
                    break p * 0.6 * radius;
                }
            };
            let base = radius * rng.random_range(0.12..0.24);
            let scale = Vector3::new(
                base * rng.random_range(0.6..1.4),
                base * rng.random_range(0.6..1.4),
                base * rng.random_range(0.6..1.4),
            );
            let q = normalize_quat(&[
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            Gaussian {
                position: p,
                scale,
                rotation: q,
                opacity: 1.0,
                color: [
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                ],
            }
        })
        .collect();
    SplatCloud::new(gaussians, radius)
}

/// The conditioning view: raised and off the target azimuths.
pub fn context_camera(spec: &RigSpec) -> Camera {
    Camera::orbit(spec.radius, PI / 4.0, PI / 12.0, &spec.intrinsics)
}

/// Extra supervision views, elevated and offset from the target rig.
pub fn novel_views(n: usize, spec: &RigSpec) -> Vec<Camera> {
    (0..n)
        .map(|j| {
            let az = 2.0 * PI * (j as f64 + 0.5) / n as f64;
            let el = if j % 2 == 0 { PI / 8.0 } else { -PI / 10.0 };
            Camera::orbit(spec.radius, az, el, &spec.intrinsics)
        })
        .collect()
}

pub fn intrinsics(size: usize) -> Intrinsics {
    RigSpec::new(2.0, size).intrinsics
}
