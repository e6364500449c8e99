//! Gaussian splat data model, invariant checks, geometry regularizer and
//! PLY serialization.

use std::fmt;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Per-axis standard deviations, meters.
    pub scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; unit norm for a valid splat.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            position,
            scale: Vector3::repeat(sigma),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalize_quat(&self.rotation))
    }

    /// `R diag(scale^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion rotating +z onto `normal`.
pub fn quat_from_z_to(normal: &Vector3<f64>) -> [f64; 4] {
    let n = normal.normalize();
    let z = Vector3::z();
    let d = z.dot(&n);
    if d < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let axis = z.cross(&n);
    normalize_quat(&[1.0 + d, axis.x, axis.y, axis.z])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatCloud {
    pub gaussians: Vec<Gaussian>,
    /// Rough scene radius, meters.
    pub scene_scale: f64,
}

impl SplatCloud {
    pub fn new(gaussians: Vec<Gaussian>, scene_scale: f64) -> Self {
        Self {
            gaussians,
            scene_scale,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NonFinite,
    NonPositiveScale,
    QuaternionNorm,
    OpacityRange,
    ColorRange,
    NotPositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub violations: Vec<Violation>,
}

impl Diagnostics {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        write!(f, "{} violation(s):", self.violations.len())?;
        for v in self.violations.iter().take(8) {
            write!(f, " #{} {:?};", v.index, v.kind)?;
        }
        Ok(())
    }
}

pub fn validate(cloud: &SplatCloud) -> Diagnostics {
    let mut violations = Vec::new();
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let mut push = |kind| violations.push(Violation { index, kind });
        let finite = g.position.iter().all(|v| v.is_finite())
            && g.scale.iter().all(|v| v.is_finite())
            && g.rotation.iter().all(|v| v.is_finite())
            && g.opacity.is_finite()
            && g.color.iter().all(|v| v.is_finite());
        if !finite {
            push(ViolationKind::NonFinite);
            continue;
        }
        if g.scale.iter().any(|&s| s <= 0.0) {
            push(ViolationKind::NonPositiveScale);
        }
        if (quat_norm(&g.rotation) - 1.0).abs() > 1e-9 {
            push(ViolationKind::QuaternionNorm);
        }
        if !(0.0..=1.0).contains(&g.opacity) {
            push(ViolationKind::OpacityRange);
        }
        if g.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            push(ViolationKind::ColorRange);
        }
        if g.scale.iter().all(|&s| s > 0.0) && quat_norm(&g.rotation) > 0.0 {
            let cov = g.covariance();
            if cov.cholesky().is_none() {
                push(ViolationKind::NotPositiveDefinite);
            }
        }
    }
    Diagnostics { violations }
}

/// Gradient of a scalar loss w.r.t. one splat's natural parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Default for GaussianGrad {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity: 0.0,
            color: [0.0; 3],
        }
    }
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.position += o.position;
        self.scale += o.scale;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }

    pub fn scaled(&self, s: f64) -> GaussianGrad {
        GaussianGrad {
            position: self.position * s,
            scale: self.scale * s,
            rotation: self.rotation.map(|v| v * s),
            opacity: self.opacity * s,
            color: self.color.map(|v| v * s),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.position.iter().all(|v| *v == 0.0)
            && self.scale.iter().all(|v| *v == 0.0)
            && self.rotation.iter().all(|v| *v == 0.0)
            && self.opacity == 0.0
            && self.color.iter().all(|v| *v == 0.0)
    }
}

/// Weights of the geometry regularizer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegWeights {
    /// Opacity binary-entropy weight. Off by default: at the default
    /// regularizer scale it outweighs the image terms and zeroes most splats.
    pub opacity: f64,
    /// Anisotropy hinge weight.
    pub anisotropy: f64,
    /// Largest tolerated max/min scale ratio.
    pub max_ratio: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            opacity: 0.0,
            anisotropy: 1.0,
            max_ratio: 10.0,
        }
    }
}

const OPACITY_EPS: f64 = 1e-12;

fn binary_entropy(o: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
    term(o) + term(1.0 - o)
}

/// Opacity entropy plus an anisotropy hinge, with analytic gradients.
pub fn regularizer(cloud: &SplatCloud, w: &RegWeights) -> (f64, Vec<GaussianGrad>) {
    let mut loss = 0.0;
    let mut grads = vec![GaussianGrad::default(); cloud.len()];
    for (g, grad) in cloud.gaussians.iter().zip(&mut grads) {
        if w.opacity != 0.0 {
            loss += w.opacity * binary_entropy(g.opacity);
            let o = g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
            grad.opacity = w.opacity * ((1.0 - o) / o).ln();
        }
        if w.anisotropy != 0.0 {
            let (imax, smax) = argmax(&g.scale);
            let (imin, smin) = argmin(&g.scale);
            let ratio = smax / smin;
            if ratio > w.max_ratio {
                loss += w.anisotropy * (ratio - w.max_ratio);
                grad.scale[imax] += w.anisotropy / smin;
                grad.scale[imin] -= w.anisotropy * smax / (smin * smin);
            }
        }
    }
    (loss, grads)
}

fn argmax(v: &Vector3<f64>) -> (usize, f64) {
    (0..3).fold((0, v[0]), |acc, i| if v[i] > acc.1 { (i, v[i]) } else { acc })
}

fn argmin(v: &Vector3<f64>) -> (usize, f64) {
    (0..3).fold((0, v[0]), |acc, i| if v[i] < acc.1 { (i, v[i]) } else { acc })
}

// ---------------------------------------------------------------------------
// PLY

/// Zeroth-order spherical harmonic constant used by splat viewers.
const SH_C0: f64 = 0.282_094_791_773_878_14;
const OPACITY_CLAMP: f64 = 1e-7;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary little-endian PLY using the viewer conventions: log scales,
/// logit opacity and DC spherical-harmonic color.
pub fn save_ply(cloud: &SplatCloud) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment scene_scale {}\n", cloud.scene_scale));
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * PROPERTIES.len() * 4);
    for g in &cloud.gaussians {
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            logit(g.opacity),
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Parsed PLY header: vertex count, typed properties, payload offset.
pub(crate) struct PlyHeader {
    pub vertex_count: usize,
    pub properties: Vec<(String, ScalarTypeHandle)>,
    pub payload_offset: usize,
    pub comments: Vec<String>,
    pub faces: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ScalarTypeHandle(ScalarType);

impl ScalarTypeHandle {
    pub fn size(self) -> usize {
        self.0.size()
    }

    pub fn read(self, b: &[u8]) -> f64 {
        self.0.read(b)
    }
}

pub(crate) fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<(usize, String)> {
        let start = pos;
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(start, "unterminated PLY header"))?;
        pos += nl + 1;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::format(start, "non-UTF8 PLY header"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (_, magic) = next_line()?;
    if magic != "ply" {
        return Err(Error::format(0, "missing 'ply' magic"));
    }
    let mut vertex_count = None;
    let mut faces = None;
    let mut properties = Vec::new();
    let mut comments = Vec::new();
    let mut in_vertex = false;
    let mut format_ok = false;
    loop {
        let (off, line) = next_line()?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("format") => {
                if toks.next() != Some("binary_little_endian") {
                    return Err(Error::format(off, "only binary_little_endian PLY is supported"));
                }
                format_ok = true;
            }
            Some("comment") => comments.push(toks.collect::<Vec<_>>().join(" ")),
            Some("obj_info") => {}
            Some("element") => {
                let name = toks.next().unwrap_or_default();
                let n: usize = toks
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(off, "bad element count"))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    if vertex_count.is_some() {
                        return Err(Error::format(off, "duplicate vertex element"));
                    }
                    vertex_count = Some(n);
                } else if name == "face" {
                    if vertex_count.is_none() {
                        return Err(Error::format(off, "face element before vertex element"));
                    }
                    faces = Some(n);
                } else if vertex_count.is_none() {
                    return Err(Error::format(off, format!("unsupported element {name:?} before vertices")));
                }
            }
            Some("property") => {
                if in_vertex {
                    let ty = toks.next().unwrap_or_default();
                    if ty == "list" {
                        return Err(Error::format(off, "list properties on vertices are unsupported"));
                    }
                    let ty = ScalarType::parse(ty)
                        .ok_or_else(|| Error::format(off, format!("unknown property type {ty:?}")))?;
                    let name = toks
                        .next()
                        .ok_or_else(|| Error::format(off, "property without name"))?;
                    properties.push((name.to_string(), ScalarTypeHandle(ty)));
                }
            }
            Some("end_header") => break,
            _ => return Err(Error::format(off, format!("unexpected header line {line:?}"))),
        }
    }
    if !format_ok {
        return Err(Error::format(0, "missing format line"));
    }
    Ok(PlyHeader {
        vertex_count: vertex_count.ok_or_else(|| Error::format(0, "no vertex element"))?,
        properties,
        payload_offset: pos,
        comments,
        faces,
    })
}

/// Reads the vertex table into rows of `f64` in header property order.
pub(crate) fn read_vertex_rows(bytes: &[u8], header: &PlyHeader) -> Result<(Vec<Vec<f64>>, usize)> {
    let stride: usize = header.properties.iter().map(|(_, t)| t.size()).sum();
    let mut off = header.payload_offset;
    let mut rows = Vec::with_capacity(header.vertex_count);
    for _ in 0..header.vertex_count {
        if off + stride > bytes.len() {
            return Err(Error::format(off, "truncated vertex payload"));
        }
        let mut row = Vec::with_capacity(header.properties.len());
        let mut p = off;
        for (_, ty) in &header.properties {
            row.push(ty.read(&bytes[p..]));
            p += ty.size();
        }
        rows.push(row);
        off += stride;
    }
    Ok((rows, off))
}

pub fn load_ply(bytes: &[u8]) -> Result<SplatCloud> {
    let header = parse_ply_header(bytes)?;
    let mut index = [0usize; PROPERTIES.len()];
    for (k, name) in PROPERTIES.iter().enumerate() {
        index[k] = header
            .properties
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(header.payload_offset, format!("missing property {name}")))?;
    }
    let scene_scale = header
        .comments
        .iter()
        .find_map(|c| c.strip_prefix("scene_scale ")?.trim().parse().ok())
        .unwrap_or(1.0);
    let (rows, _) = read_vertex_rows(bytes, &header)?;
    let gaussians = rows
        .iter()
        .map(|r| {
            let v = |k: usize| r[index[k]];
            Gaussian {
                position: Vector3::new(v(0), v(1), v(2)),
                scale: Vector3::new(v(3).exp(), v(4).exp(), v(5).exp()),
                // stored in f32 and not necessarily unit
                rotation: normalize_quat(&[v(6), v(7), v(8), v(9)]),
                opacity: sigmoid(v(10)),
                color: [
                    0.5 + SH_C0 * v(11),
                    0.5 + SH_C0 * v(12),
                    0.5 + SH_C0 * v(13),
                ]
                .map(|c| c.clamp(0.0, 1.0)),
            }
        })
        .collect();
    Ok(SplatCloud {
        gaussians,
        scene_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_gaussian(rng: &mut impl Rng) -> Gaussian {
        let q = normalize_quat(&[
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        Gaussian {
            position: Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            scale: Vector3::new(
                rng.random_range(0.01..0.3),
                rng.random_range(0.01..0.3),
                rng.random_range(0.01..0.3),
            ),
            rotation: q,
            opacity: rng.random_range(0.05..0.95),
            color: [rng.random(), rng.random(), rng.random()],
        }
    }

    #[test]
    fn empty_cloud_is_valid() {
        assert!(validate(&SplatCloud::default()).is_valid());
    }

    #[test]
    fn bad_quaternion_is_reported() {
        let mut g = Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.5; 3]);
        g.rotation = [0.5, 0.0, 0.0, 0.0];
        let d = validate(&SplatCloud::new(vec![g], 1.0));
        assert_eq!(d.violations.len(), 1);
        assert_eq!(d.violations[0].kind, ViolationKind::QuaternionNorm);
    }

    #[test]
    fn random_splats_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = SplatCloud::new((0..1000).map(|_| random_gaussian(&mut rng)).collect(), 1.0);
        let d = validate(&cloud);
        assert!(d.is_valid(), "{d}");
    }

    #[test]
    fn covariance_is_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let c = g.covariance();
            assert!((c - c.transpose()).abs().max() < 1e-15);
            assert!(c.cholesky().is_some());
        }
    }

    #[test]
    fn regularizer_closed_forms() {
        let w = RegWeights {
            opacity: 1.0,
            ..RegWeights::default()
        };
        let saturated = SplatCloud::new(
            vec![
                Gaussian::isotropic(Vector3::zeros(), 0.1, 1.0, [0.2; 3]),
                Gaussian::isotropic(Vector3::x(), 0.2, 0.0, [0.2; 3]),
            ],
            1.0,
        );
        assert_eq!(regularizer(&saturated, &w).0, 0.0);
        let half = SplatCloud::new(vec![Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.2; 3])], 1.0);
        let w2 = RegWeights { opacity: 3.0, ..w };
        assert!((regularizer(&half, &w2).0 - 3.0 * 2f64.ln()).abs() < 1e-15);
        let mut needle = Gaussian::isotropic(Vector3::zeros(), 0.01, 1.0, [0.2; 3]);
        needle.scale.x = 0.2;
        let (l, _) = regularizer(&SplatCloud::new(vec![needle], 1.0), &w);
        assert!((l - 10.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gs: Vec<Gaussian> = (0..4).map(|_| random_gaussian(&mut rng)).collect();
        // make two splats violate the anisotropy bound
        gs[0].scale = Vector3::new(0.5, 0.02, 0.1);
        gs[2].scale = Vector3::new(0.01, 0.04, 0.3);
        let w = RegWeights {
            opacity: 0.7,
            anisotropy: 1.3,
            max_ratio: 10.0,
        };
        let cloud = SplatCloud::new(gs, 1.0);
        let (_, grads) = regularizer(&cloud, &w);
        let h = 1e-5;
        let eval = |c: &SplatCloud| regularizer(c, &w).0;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..cloud.len() {
            let mut plus = cloud.clone();
            let mut minus = cloud.clone();
            plus.gaussians[i].opacity += h;
            minus.gaussians[i].opacity -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            analytic.push(grads[i].opacity);
            for k in 0..3 {
                let hs = h * cloud.gaussians[i].scale[k];
                let mut plus = cloud.clone();
                let mut minus = cloud.clone();
                plus.gaussians[i].scale[k] += hs;
                minus.gaussians[i].scale[k] -= hs;
                numeric.push((eval(&plus) - eval(&minus)) / (2.0 * hs));
                analytic.push(grads[i].scale[k]);
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-3, "relative error {}", diff / norm);
    }

    #[test]
    fn empty_ply() {
        let bytes = save_ply(&SplatCloud::default());
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("element vertex 0"));
        assert!(load_ply(&bytes).unwrap().is_empty());
    }

    #[test]
    fn missing_opacity_is_format_error() {
        let bytes = save_ply(&SplatCloud::new(vec![Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.5; 3])], 1.0));
        let split = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let header = std::str::from_utf8(&bytes[..split])
            .unwrap()
            .replace("property float opacity\n", "");
        let mut edited = header.into_bytes();
        edited.extend_from_slice(&bytes[split..]);
        match load_ply(&edited) {
            Err(Error::Format { message, .. }) => assert!(message.contains("opacity")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_ply_is_format_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = SplatCloud::new((0..3).map(|_| random_gaussian(&mut rng)).collect(), 1.0);
        let mut bytes = save_ply(&cloud);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(load_ply(&bytes), Err(Error::Format { .. })));
        assert!(matches!(load_ply(b"plx\n"), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn ply_round_trip(seed in 0u64..1000, n in 0usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = SplatCloud::new((0..n).map(|_| random_gaussian(&mut rng)).collect(), 0.75);
            let back = load_ply(&save_ply(&cloud)).unwrap();
            prop_assert_eq!(back.len(), cloud.len());
            prop_assert_eq!(back.scene_scale, 0.75);
            for (a, b) in cloud.gaussians.iter().zip(&back.gaussians) {
                let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(1.0);
                for k in 0..3 {
                    prop_assert!(close(a.position[k], b.position[k]));
                    prop_assert!(close(a.scale[k], b.scale[k]));
                    prop_assert!(close(a.color[k], b.color[k]));
                }
                for k in 0..4 {
                    prop_assert!(close(a.rotation[k], b.rotation[k]));
                }
                prop_assert!(close(a.opacity, b.opacity));
            }
        }
    }
}
