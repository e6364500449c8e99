//! Pinhole cameras, orbit rigs and Plücker ray embeddings.
//!
//! World frame is y-up with the scene centered at the origin; azimuth turns
//! about +y starting from +z, elevation lifts toward +y. Camera frames use
//! x-right, y-down, z-forward, and `rotation`/`translation` map world points
//! into the camera frame.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, meters.
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("camera image size must be at least 1x1"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("focal lengths must be positive"));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::param("camera rotation is not a proper rotation"));
        }
        Ok(())
    }

    /// Camera on a sphere of `radius` looking at the origin.
    pub fn orbit(radius: f64, azimuth: f64, elevation: f64, intr: &Intrinsics) -> Self {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        let center = Vector3::new(ce * sa, se, ce * ca) * radius;
        let forward = -center / radius;
        // Derivative of the orbit position w.r.t. elevation: always
        // perpendicular to the view direction, also past the poles.
        let up = Vector3::new(-se * sa, ce, -se * ca);
        let down = -up;
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Self {
            fx: intr.focal,
            fy: intr.focal,
            cx: intr.width as f64 / 2.0,
            cy: intr.height as f64 / 2.0,
            width: intr.width,
            height: intr.height,
            rotation,
            translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and camera-frame depth; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        Some((
            Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy),
            pc.z,
        ))
    }

    /// World point at camera-frame depth `depth` through pixel coordinates `px`.
    pub fn unproject(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        );
        self.rotation.transpose() * (pc - self.translation)
    }

    /// Unit world-space ray direction through pixel coordinates `px`.
    pub fn ray_direction(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let dc = Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * dc).normalize()
    }
}

/// Intrinsics shared by all cameras of a rig: square pixels, centered
/// principal point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

/// Orbit radius plus intrinsics for generated camera sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigSpec {
    pub radius: f64,
    pub intrinsics: Intrinsics,
}

impl RigSpec {
    pub fn new(radius: f64, size: usize) -> Self {
        Self {
            radius,
            intrinsics: Intrinsics {
                focal: 1.5 * size as f64,
                width: size,
                height: size,
            },
        }
    }

    pub fn with_focal(mut self, focal: f64) -> Self {
        self.intrinsics.focal = focal;
        self
    }
}

impl Default for RigSpec {
    fn default() -> Self {
        Self::new(2.0, 64)
    }
}

pub const TARGET_AZIMUTHS: [f64; 4] = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];

/// The four zero-elevation target views at quarter turns.
pub fn orthogonal_target_rig(spec: &RigSpec) -> Result<Vec<Camera>> {
    if !(spec.radius > 0.0) {
        return Err(Error::param("rig radius must be positive"));
    }
    Ok(TARGET_AZIMUTHS
        .iter()
        .map(|&az| Camera::orbit(spec.radius, az, 0.0, &spec.intrinsics))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpiralMode {
    /// Wide spiral used to render supervision views.
    Training,
    /// Shallow spiral used for RGB-D capture before TSDF fusion.
    Meshing,
}

/// `(elevation, azimuth)` of spiral view `i` out of `n`.
pub fn spiral_pose(i: usize, n: usize, mode: SpiralMode) -> (f64, f64) {
    let f = i as f64 / n as f64;
    match mode {
        SpiralMode::Training => (-PI / 4.0 + 7.0 / 8.0 * PI * f, 5.0 * PI * f),
        SpiralMode::Meshing => (-PI / 4.0 + PI / 4.0 * f, 3.0 * PI * f),
    }
}

pub fn spiral_path(n: usize, mode: SpiralMode, spec: &RigSpec) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::param("spiral needs at least one view"));
    }
    Ok((0..n)
        .map(|i| {
            let (el, az) = spiral_pose(i, n, mode);
            Camera::orbit(spec.radius, az, el, &spec.intrinsics)
        })
        .collect())
}

/// `n` zero-elevation cameras with uniform azimuth over a full turn.
pub fn evaluation_rig(n: usize, spec: &RigSpec) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::param("evaluation rig needs at least one view"));
    }
    Ok((0..n)
        .map(|j| {
            let az = 2.0 * PI * j as f64 / n as f64;
            Camera::orbit(spec.radius, az, 0.0, &spec.intrinsics)
        })
        .collect())
}

/// Per-pixel `{o x d, d}` line coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RayEmbedding {
    pub width: usize,
    pub height: usize,
    /// Row-major per-pixel `[moment; direction]`.
    pub data: Vec<[f64; 6]>,
    /// Set for the pose-less context view.
    pub is_context: bool,
}

impl RayEmbedding {
    pub fn at(&self, x: usize, y: usize) -> &[f64; 6] {
        &self.data[y * self.width + x]
    }
}

pub fn plucker_embedding(cam: &Camera) -> RayEmbedding {
    let origin = cam.center();
    let mut data = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = cam.ray_direction(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
            let m = origin.cross(&d);
            data.push([m.x, m.y, m.z, d.x, d.y, d.z]);
        }
    }
    RayEmbedding {
        width: cam.width,
        height: cam.height,
        data,
        is_context: false,
    }
}

/// All-zero embedding marking a context view of unknown pose.
pub fn zero_context_embedding(width: usize, height: usize) -> RayEmbedding {
    RayEmbedding {
        width,
        height,
        data: vec![[0.0; 6]; width * height],
        is_context: true,
    }
}

/// One camera per line: `fx fy cx cy w h r00 .. r22 t0 t1 t2`.
pub fn write_cameras(cams: &[Camera]) -> String {
    let mut out = String::from("# fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for c in cams {
        let _ = write!(out, "{} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(out, " {}", c.rotation[(i, j)]);
            }
        }
        let _ = writeln!(
            out,
            " {} {} {}",
            c.translation.x, c.translation.y, c.translation.z
        );
    }
    out
}

pub fn read_cameras(text: &str) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(start, "non-numeric camera field"))?;
        if vals.len() != 18 {
            return Err(Error::format(
                start,
                format!("camera row has {} fields, expected 18", vals.len()),
            ));
        }
        let rotation = Matrix3::from_row_slice(&vals[6..15]);
        let translation = Vector3::new(vals[15], vals[16], vals[17]);
        let cam = Camera::new(
            vals[0],
            vals[1],
            vals[2],
            vals[3],
            vals[4] as usize,
            vals[5] as usize,
            rotation,
            translation,
        )
        .map_err(|e| Error::format(start, e.to_string()))?;
        cams.push(cam);
    }
    Ok(cams)
}
