//! Experiment runner: scene synthesis, paired sampling runs, meshing,
//! evaluation and reports over a fixed output layout.
//!
//! ```text
//! <out>/scene/            scene.ply, cameras, ground-truth PNGs
//! <out>/runs/<mode>/<seed>/  trajectory.csv, final.ply, final_*.png, sheets/
//! <out>/runs/summary.csv  one row per seed
//! <out>/mesh/             <name>.ply, stats.csv
//! <out>/eval/             <name>.{csv,json}, report.{csv,md}
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::{evaluation_rig, orthogonal_target_rig, write_cameras, Camera, RigSpec};
use crate::denoiser::{OracleDenoiser, OracleDenoiserConfig, PerturbMode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::meshing::{extract_textured_mesh, MeshConfig, TriangleMesh};
use crate::metrics::{
    chamfer, fscore, ms_ssim, normal_consistency, p2s, psnr, surface_points, MetricReport, ViewMetric,
    DEFAULT_FSCORE_THRESHOLD, DEFAULT_PSNR_CAP,
};
use crate::reconstructor::FitConfig;
use crate::renderer::{render_color, RenderConfig};
use crate::sampler::{consistency_fit, sample_3d_consistent, sample_baseline, SamplerConfig, SamplingSetup};
use crate::scene::{context_camera, make_scene, novel_views, SceneSpec};
use crate::schedule::NoiseSchedule;
use crate::splat::{load_ply, save_ply, SplatCloud};

pub const SCHEMA_VERSION: u32 = 1;
/// Overrides the configured output root.
pub const OUTPUT_ENV: &str = "SPLATDIFF_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Refined,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Refined => "refined",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "refined" => Ok(Mode::Refined),
            _ => Err(Error::param(format!("unknown mode {s:?} (expected baseline or refined)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub radius: f64,
    pub resolution: usize,
    pub novel_views: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            radius: 2.0,
            resolution: 64,
            novel_views: 12,
        }
    }
}

impl RigConfig {
    pub fn spec(&self) -> RigSpec {
        RigSpec::new(self.radius, self.resolution)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Which runs to make and how the oracle denoiser errs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub modes: Vec<Mode>,
    /// Each seed drives both the sampler noise and the oracle error, so
    /// the two modes of one seed form a matched pair.
    pub seeds: Vec<u64>,
    pub perturb_sigma: f64,
    pub perturb_mode: PerturbMode,
    /// Write per-step contact sheets.
    pub contact_sheets: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            modes: vec![Mode::Baseline, Mode::Refined],
            seeds: vec![0, 1, 2],
            perturb_sigma: 0.05,
            perturb_mode: PerturbMode::Warp,
            contact_sheets: true,
        }
    }
}

/// Budget of the fresh fit that scores view consistency.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub n_splats: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            n_splats: 48,
            iterations: 150,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Zero-elevation views over a full turn.
    pub views: usize,
    pub fscore_threshold: f64,
    pub psnr_cap: f64,
    pub surface_samples: usize,
    pub nc_samples: usize,
    /// Multi-scale SSIM weights; single-scale when absent.
    pub ssim_scales: Option<Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 8,
            fscore_threshold: DEFAULT_FSCORE_THRESHOLD,
            psnr_cap: DEFAULT_PSNR_CAP,
            surface_samples: 20_000,
            nc_samples: 5_000,
            ssim_scales: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub output: PathBuf,
    pub scene: SceneSpec,
    pub rig: RigConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub runs: RunConfig,
    pub fit: FitConfig,
    pub residual: ResidualConfig,
    pub render: RenderConfig,
    pub mesh: MeshConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            output: PathBuf::from("out"),
            scene: SceneSpec::default(),
            rig: RigConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig {
                final_iterations: 60,
                record_images: true,
                ..SamplerConfig::default()
            },
            runs: RunConfig::default(),
            fit: FitConfig {
                n_splats: 48,
                iterations: 12,
                ..FitConfig::default()
            },
            residual: ResidualConfig::default(),
            render: RenderConfig::default(),
            mesh: MeshConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub shape: Option<crate::scene::Shape>,
    pub n_splats: Option<usize>,
    pub scene_seed: Option<u64>,
    pub modes: Option<Vec<Mode>>,
    pub seeds: Option<Vec<u64>>,
    pub perturb_sigma: Option<f64>,
    pub steps: Option<usize>,
    pub fit_iterations: Option<usize>,
}

impl ExperimentConfig {
    /// Keys absent from `text` keep the experiment defaults, including
    /// inside sections the file does name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let located = |e: toml::de::Error| Error::format(e.span().map_or(0, |s| s.start), e.message().to_string());
        // shape check with source positions
        toml::from_str::<Self>(text).map_err(located)?;
        let file: toml::Table = toml::from_str(text).map_err(located)?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut merged, file);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::format(0, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// File (or defaults), then the environment, then flags.
    pub fn resolve(file: Option<&Path>, env_output: Option<PathBuf>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(out) = env_output {
            cfg.output = out;
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output {
            self.output = v.clone();
        }
        if let Some(v) = o.shape {
            self.scene.shape = v;
        }
        if let Some(v) = o.n_splats {
            self.scene.n_splats = v;
        }
        if let Some(v) = o.scene_seed {
            self.scene.seed = v;
        }
        if let Some(v) = &o.modes {
            self.runs.modes = v.clone();
        }
        if let Some(v) = &o.seeds {
            self.runs.seeds = v.clone();
        }
        if let Some(v) = o.perturb_sigma {
            self.runs.perturb_sigma = v;
        }
        if let Some(v) = o.steps {
            self.sampler.steps = v;
        }
        if let Some(v) = o.fit_iterations {
            self.fit.iterations = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::param(format!(
                "config schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.runs.modes.is_empty() {
            return Err(Error::param("runs.modes must name at least one mode"));
        }
        let mut modes = self.runs.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.runs.modes.len() {
            return Err(Error::param("runs.modes lists a mode twice"));
        }
        if self.runs.seeds.is_empty() {
            return Err(Error::param("runs.seeds must not be empty"));
        }
        let mut seeds = self.runs.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.runs.seeds.len() {
            return Err(Error::param("runs.seeds lists a seed twice"));
        }
        if !(self.runs.perturb_sigma >= 0.0) {
            return Err(Error::param("runs.perturb_sigma must be >= 0"));
        }
        if self.rig.resolution == 0 || !(self.rig.radius > 0.0) {
            return Err(Error::param("rig needs a positive radius and resolution"));
        }
        if self.eval.views == 0 {
            return Err(Error::param("eval.views must be >= 1"));
        }
        self.fit.validate()?;
        Ok(())
    }

    pub fn scene_dir(&self) -> PathBuf {
        self.output.join("scene")
    }

    pub fn run_dir(&self, mode: Mode, seed: u64) -> PathBuf {
        self.output.join("runs").join(mode.name()).join(seed.to_string())
    }

    pub fn mesh_dir(&self) -> PathBuf {
        self.output.join("mesh")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output.join("eval")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    fn residual_budget(&self) -> FitConfig {
        FitConfig {
            n_splats: self.residual.n_splats,
            iterations: self.residual.iterations,
            seed: self.residual.seed,
            render: self.render,
            warm_start: None,
            ..self.fit.clone()
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A recorded failure; any record makes the command exit nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub stage: String,
    pub message: String,
}

impl fmt::Display for ErrorRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub errors: Vec<ErrorRecord>,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
}

impl Outcome {
    fn fail(&mut self, stage: impl Into<String>, err: impl fmt::Display) {
        self.errors.push(ErrorRecord {
            stage: stage.into(),
            message: err.to_string(),
        });
    }

    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn absorb(&mut self, other: Outcome) {
        self.written.extend(other.written);
        self.errors.extend(other.errors);
        self.lines.extend(other.lines);
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>, out: &mut Outcome) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    out.written.push(path.to_path_buf());
    Ok(())
}

fn save_png(path: &Path, img: &Image, out: &mut Outcome) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_png(path)?;
    out.written.push(path.to_path_buf());
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<SplatCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_ply(&bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TriangleMesh::from_ply(&bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Ground truth shared by every run of one scene.
pub struct SceneData {
    pub cloud: SplatCloud,
    pub cams: Vec<Camera>,
    pub gt_views: Vec<Image>,
    pub context_cam: Camera,
    pub context_view: Image,
}

impl SceneData {
    pub fn render(cloud: SplatCloud, cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.rig.spec();
        let cams = orthogonal_target_rig(&spec)?;
        let gt_views = cams.iter().map(|c| render_color(&cloud, c, &cfg.render)).collect();
        let context_cam = context_camera(&spec);
        let context_view = render_color(&cloud, &context_cam, &cfg.render);
        Ok(Self {
            cloud,
            cams,
            gt_views,
            context_cam,
            context_view,
        })
    }

    /// Loads `scene/scene.ply` and re-renders the ground truth exactly.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.scene_dir();
        let path = dir.join("scene.ply");
        if !path.exists() {
            return Err(Error::File {
                path: dir,
                message: "scene not found; run `make-scene` first".into(),
            });
        }
        Self::render(read_cloud(&path)?, cfg)
    }
}

pub fn cmd_make_scene(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let cloud = make_scene(&cfg.scene)?;
    let scene = SceneData::render(cloud, cfg)?;
    let dir = cfg.scene_dir();
    write_file(&dir.join("scene.ply"), save_ply(&scene.cloud), &mut out)?;
    write_file(&dir.join("cameras_target.txt"), write_cameras(&scene.cams), &mut out)?;
    write_file(&dir.join("camera_context.txt"), write_cameras(std::slice::from_ref(&scene.context_cam)), &mut out)?;
    for (i, v) in scene.gt_views.iter().enumerate() {
        save_png(&dir.join(format!("target_{i:02}.png")), v, &mut out)?;
    }
    save_png(&dir.join("context.png"), &scene.context_view, &mut out)?;
    let novel = novel_views(cfg.rig.novel_views, &cfg.rig.spec());
    write_file(&dir.join("cameras_novel.txt"), write_cameras(&novel), &mut out)?;
    for (i, c) in novel.iter().enumerate() {
        save_png(&dir.join(format!("novel_{i:02}.png")), &render_color(&scene.cloud, c, &cfg.render), &mut out)?;
    }
    // the output root is left out so relocated copies compare equal
    let mut snapshot = toml::Table::try_from(cfg).expect("config serializes");
    snapshot.remove("output");
    write_file(&dir.join("config.toml"), toml::to_string(&snapshot).expect("config serializes"), &mut out)?;
    out.lines.push(format!(
        "scene: {} splats, {} target + {} novel views in {}",
        scene.cloud.len(),
        scene.cams.len(),
        novel.len(),
        dir.display()
    ));
    Ok(out)
}

/// Numbers of one finished run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    /// Fresh-fit MSE of the final target views.
    pub residual: f64,
    /// Mean target-view PSNR of the run's output against ground truth.
    pub psnr_db: f64,
    pub fit_iterations: usize,
}

fn mean_psnr(views: &[Image], gt: &[Image], cap: f64) -> Result<f64> {
    let vals = views.iter().zip(gt).map(|(v, g)| psnr(v, g, cap)).collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One mode for one seed. Refined runs output renders of their final
/// cloud; baseline runs output their final views, and the consistency fit
/// to those views stands in as their cloud.
pub fn run_one(cfg: &ExperimentConfig, scene: &SceneData, sched: &NoiseSchedule, mode: Mode, seed: u64) -> Result<(RunSummary, Outcome)> {
    let mut out = Outcome::default();
    let oracle = OracleDenoiser::new(OracleDenoiserConfig {
        gt_views: scene.gt_views.clone(),
        perturb_sigma: cfg.runs.perturb_sigma,
        perturb_mode: cfg.runs.perturb_mode,
        seed,
    })?;
    let setup = SamplingSetup {
        denoiser: &oracle,
        sched,
        cams: &scene.cams,
        context_view: &scene.context_view,
        context_cam: &scene.context_cam,
        gt_views: Some(&scene.gt_views),
        render: cfg.render,
    };
    let scfg = SamplerConfig {
        seed,
        record_images: cfg.runs.contact_sheets,
        ..cfg.sampler.clone()
    };
    let fit_cfg = FitConfig {
        render: cfg.render,
        ..cfg.fit.clone()
    };
    let (cloud, output_views, final_views, log) = match mode {
        Mode::Baseline => {
            let (views, log) = sample_baseline(&setup, &scfg)?;
            (None, views.clone(), views, log)
        }
        Mode::Refined => {
            let (cloud, log) = sample_3d_consistent(&setup, &fit_cfg, &scfg)?;
            let renders: Vec<Image> = scene.cams.iter().map(|c| render_color(&cloud, c, &cfg.render)).collect();
            (Some(cloud), renders, log.final_views(), log)
        }
    };
    let fit = consistency_fit(&final_views, &scene.cams, &cfg.residual_budget())?;
    let cloud = cloud.unwrap_or(fit.cloud);
    let summary = RunSummary {
        residual: fit.loss.mse,
        psnr_db: mean_psnr(&output_views, &scene.gt_views, cfg.eval.psnr_cap)?,
        fit_iterations: log.total_fit_iterations(),
    };
    let dir = cfg.run_dir(mode, seed);
    write_file(&dir.join("trajectory.csv"), log.to_csv(), &mut out)?;
    write_file(&dir.join("final.ply"), save_ply(&cloud), &mut out)?;
    for (i, v) in output_views.iter().enumerate() {
        save_png(&dir.join(format!("final_{i:02}.png")), v, &mut out)?;
    }
    if cfg.runs.contact_sheets {
        log.save_contact_sheets(&dir.join("sheets"))?;
    }
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
        &mut out,
    )?;
    Ok((summary, out))
}

const SUMMARY_HEADER: [&str; 5] = ["seed", "baseline_residual", "refined_residual", "baseline_psnr_db", "refined_psnr_db"];

pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<Outcome> {
    let scene = SceneData::load(cfg)?;
    let sched = cfg.schedule()?;
    let mut out = Outcome::default();
    let mut rows: Vec<(u64, [Option<RunSummary>; 2])> = Vec::new();
    for &seed in &cfg.runs.seeds {
        let mut row = [None, None];
        for &mode in &cfg.runs.modes {
            match run_one(cfg, &scene, &sched, mode, seed) {
                Ok((s, o)) => {
                    out.absorb(o);
                    out.lines.push(format!(
                        "{mode} seed {seed}: residual {:.6} psnr {:.2} dB",
                        s.residual, s.psnr_db
                    ));
                    row[mode as usize] = Some(s);
                }
                Err(e) => out.fail(format!("sample {mode} seed {seed}"), e),
            }
        }
        rows.push((seed, row));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER).expect("in-memory csv");
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (seed, [b, r]) in &rows {
        w.write_record([
            seed.to_string(),
            f(b.map(|s| s.residual)),
            f(r.map(|s| s.residual)),
            f(b.map(|s| s.psnr_db)),
            f(r.map(|s| s.psnr_db)),
        ])
        .expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    write_file(&cfg.output.join("runs").join("summary.csv"), bytes, &mut out)?;
    Ok(out)
}

/// Writes `dir/errors.csv` when there are records and removes a stale one
/// otherwise.
pub fn record_errors(dir: &Path, errors: &[ErrorRecord]) -> Result<()> {
    let path = dir.join("errors.csv");
    if errors.is_empty() {
        if path.exists() {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        return Ok(());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "message"]).expect("in-memory csv");
    for e in errors {
        w.write_record([&e.stage, &e.message]).expect("in-memory csv");
    }
    write_file(&path, w.into_inner().expect("in-memory csv"), &mut Outcome::default())
}

/// Rows of `runs/summary.csv`.
pub fn read_summary(path: &Path) -> Result<Vec<(u64, [Option<f64>; 4])>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let bad = || Error::File {
            path: path.to_path_buf(),
            message: format!("malformed row {:?}", rec),
        };
        let seed: u64 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mut vals = [None; 4];
        for (k, v) in vals.iter_mut().enumerate() {
            let field = rec.get(k + 1).ok_or_else(bad)?;
            if !field.is_empty() {
                *v = Some(field.parse().map_err(|_| bad())?);
            }
        }
        rows.push((seed, vals));
    }
    Ok(rows)
}

/// Mesh statistics; the radial error assumes a shell of radius
/// `scene_scale` around the origin.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MeshStats {
    pub vertices: usize,
    pub triangles: usize,
    pub mean_radius: f64,
    pub radial_error: f64,
}

pub fn mesh_stats(mesh: &TriangleMesh, scene_scale: f64) -> MeshStats {
    let n = mesh.vertices.len().max(1) as f64;
    let mean_radius = mesh.vertices.iter().map(|v| v.norm()).sum::<f64>() / n;
    let radial_error = mesh.vertices.iter().map(|v| (v.norm() - scene_scale).abs()).sum::<f64>() / n;
    MeshStats {
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        mean_radius,
        radial_error,
    }
}

/// Named clouds the pipeline produced: the scene plus every run.
fn pipeline_clouds(cfg: &ExperimentConfig) -> Vec<(String, PathBuf)> {
    let mut v = vec![("scene".to_string(), cfg.scene_dir().join("scene.ply"))];
    for &mode in &cfg.runs.modes {
        for &seed in &cfg.runs.seeds {
            v.push((format!("{mode}_{seed}"), cfg.run_dir(mode, seed).join("final.ply")));
        }
    }
    v
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("mesh".into(), |s| s.to_string_lossy().into_owned())
}

/// Meshes one cloud, or with no input every cloud of the pipeline.
pub fn cmd_mesh(cfg: &ExperimentConfig, input: Option<&Path>, output: Option<&Path>) -> Result<Outcome> {
    let mut out = Outcome::default();
    let jobs: Vec<(String, PathBuf, PathBuf)> = match input {
        Some(p) => {
            let dst = output.map_or_else(|| cfg.mesh_dir().join(format!("{}.ply", stem(p))), Path::to_path_buf);
            vec![(stem(p), p.to_path_buf(), dst)]
        }
        None => pipeline_clouds(cfg)
            .into_iter()
            .map(|(name, src)| {
                let dst = cfg.mesh_dir().join(format!("{name}.ply"));
                (name, src, dst)
            })
            .collect(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "vertices", "triangles", "mean_radius", "radial_error"]).expect("in-memory csv");
    for (name, src, dst) in &jobs {
        let result = read_cloud(src).and_then(|c| Ok((extract_textured_mesh(&c, &cfg.mesh)?, c.scene_scale)));
        match result {
            Ok((mesh, scale)) => {
                write_file(dst, mesh.to_ply(), &mut out)?;
                let s = mesh_stats(&mesh, scale);
                out.lines.push(format!(
                    "{name}: {} vertices, {} triangles, radial error {:.4} m",
                    s.vertices, s.triangles, s.radial_error
                ));
                w.write_record([
                    name.clone(),
                    s.vertices.to_string(),
                    s.triangles.to_string(),
                    s.mean_radius.to_string(),
                    s.radial_error.to_string(),
                ])
                .expect("in-memory csv");
            }
            Err(e) => out.fail(format!("mesh {name}"), e),
        }
    }
    let stats = match (input, output) {
        (Some(_), Some(dst)) => dst.with_extension("csv"),
        _ => cfg.mesh_dir().join(if input.is_some() { format!("{}_stats.csv", jobs[0].0) } else { "stats.csv".into() }),
    };
    write_file(&stats, w.into_inner().expect("in-memory csv"), &mut out)?;
    Ok(out)
}

/// Full metric report of a predicted cloud against ground truth.
pub fn evaluate(cfg: &ExperimentConfig, pred: &SplatCloud, gt: &SplatCloud, pred_mesh: &TriangleMesh, gt_mesh: &TriangleMesh) -> Result<MetricReport> {
    let cams = evaluation_rig(cfg.eval.views, &cfg.rig.spec())?;
    let renders: Vec<Image> = cams.iter().map(|c| render_color(pred, c, &cfg.render)).collect();
    let refs: Vec<Image> = cams.iter().map(|c| render_color(gt, c, &cfg.render)).collect();
    let mut report = MetricReport::default().with_images(&renders, &refs, cfg.eval.psnr_cap)?;
    if let Some(w) = &cfg.eval.ssim_scales {
        report.views = renders
            .iter()
            .zip(&refs)
            .enumerate()
            .map(|(view, (r, g))| {
                Ok(ViewMetric {
                    view,
                    psnr_db: psnr(r, g, cfg.eval.psnr_cap)?,
                    ssim: ms_ssim(r, g, w)?,
                })
            })
            .collect::<Result<_>>()?;
        report.ssim = Some(report.views.iter().map(|v| v.ssim).sum::<f64>() / report.views.len() as f64);
    }
    if !pred_mesh.is_empty() && !gt_mesh.is_empty() {
        let n = cfg.eval.surface_samples;
        let pp = surface_points(pred_mesh, n, 1)?;
        let gp = surface_points(gt_mesh, n, 1)?;
        report.cd_cm = Some(chamfer(&pp, &gp)?);
        report.fscore = Some(fscore(&pp, &gp, cfg.eval.fscore_threshold)?);
        report.p2s_cm = Some(p2s(&pp, gt_mesh)?);
        report.nc = Some(normal_consistency(pred_mesh, gt_mesh, cfg.eval.nc_samples)?);
    }
    report.validate()?;
    Ok(report)
}

fn mesh_for(cfg: &ExperimentConfig, name: &str, cloud: &SplatCloud) -> Result<TriangleMesh> {
    let cached = cfg.mesh_dir().join(format!("{name}.ply"));
    if cached.exists() {
        read_mesh(&cached)
    } else {
        extract_textured_mesh(cloud, &cfg.mesh)
    }
}

/// Evaluates `pred` against `gt` (default: the scene), or with no input
/// every run of the pipeline. Pipeline runs reuse meshes from `mesh/`.
pub fn cmd_eval(cfg: &ExperimentConfig, pred: Option<&Path>, gt: Option<&Path>) -> Result<Outcome> {
    let mut out = Outcome::default();
    let gt_path = gt.map_or_else(|| cfg.scene_dir().join("scene.ply"), Path::to_path_buf);
    let gt_cloud = read_cloud(&gt_path)?;
    let gt_name = if gt.is_some() { stem(&gt_path) } else { "scene".into() };
    // explicit inputs are meshed fresh on both sides; the cache holds
    // quantized vertices
    let explicit = pred.is_some() || gt.is_some();
    let gt_mesh = if explicit { extract_textured_mesh(&gt_cloud, &cfg.mesh)? } else { mesh_for(cfg, &gt_name, &gt_cloud)? };
    let jobs: Vec<(String, PathBuf)> = match pred {
        Some(p) => vec![(stem(p), p.to_path_buf())],
        None => pipeline_clouds(cfg).into_iter().skip(1).collect(),
    };
    for (name, path) in jobs {
        let result = read_cloud(&path).and_then(|c| {
            let m = if explicit { extract_textured_mesh(&c, &cfg.mesh)? } else { mesh_for(cfg, &name, &c)? };
            evaluate(cfg, &c, &gt_cloud, &m, &gt_mesh)
        });
        match result {
            Ok(report) => {
                let dir = cfg.eval_dir();
                write_file(&dir.join(format!("{name}.csv")), report.to_csv(), &mut out)?;
                write_file(&dir.join(format!("{name}.json")), report.to_json(), &mut out)?;
                out.lines.push(format!("{name}: {}", report_line(&report)));
            }
            Err(e) => out.fail(format!("eval {name}"), e),
        }
    }
    Ok(out)
}

fn report_line(r: &MetricReport) -> String {
    let f = |v: Option<f64>, p: usize| v.map_or("-".into(), |x| format!("{x:.p$}"));
    format!(
        "CD {} cm, P2S {} cm, F {}, NC {}, PSNR {} dB, SSIM {}",
        f(r.cd_cm, 3),
        f(r.p2s_cm, 3),
        f(r.fscore, 3),
        f(r.nc, 3),
        f(r.psnr_db, 2),
        f(r.ssim, 4)
    )
}

/// Paired A/B tallies over the seeds present in both modes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSummary {
    pub pairs: usize,
    pub residual_wins: usize,
    pub mean_psnr_gain_db: f64,
}

pub fn paired_summary(rows: &[(u64, [Option<f64>; 4])]) -> Option<PairedSummary> {
    let pairs: Vec<[f64; 4]> = rows
        .iter()
        .filter_map(|(_, v)| Some([v[0]?, v[1]?, v[2]?, v[3]?]))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    Some(PairedSummary {
        pairs: pairs.len(),
        residual_wins: pairs.iter().filter(|p| p[1] < p[0]).count(),
        mean_psnr_gain_db: pairs.iter().map(|p| p[3] - p[2]).sum::<f64>() / pairs.len() as f64,
    })
}

/// Collects run summaries and evaluation reports into one table.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let summary_path = cfg.output.join("runs").join("summary.csv");
    let rows = read_summary(&summary_path)?;
    let mut md = String::from("| run | residual | target PSNR | CD cm | P2S cm | F-score | NC | PSNR | SSIM |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "residual", "target_psnr_db", "cd_cm", "p2s_cm", "fscore", "nc", "psnr_db", "ssim"])
        .expect("in-memory csv");
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let g = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
    for &mode in &cfg.runs.modes {
        for (seed, vals) in &rows {
            let k = mode as usize;
            let (residual, target_psnr) = (vals[k], vals[2 + k]);
            let name = format!("{mode}_{seed}");
            let eval_path = cfg.eval_dir().join(format!("{name}.json"));
            let report: Option<MetricReport> = match fs::read_to_string(&eval_path) {
                Ok(text) => match serde_json::from_str(&text) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        out.fail(format!("report {name}"), format!("{}: {e}", eval_path.display()));
                        None
                    }
                },
                Err(_) => None,
            };
            let r = report.unwrap_or_default();
            w.write_record([
                name.clone(),
                f(residual),
                f(target_psnr),
                f(r.cd_cm),
                f(r.p2s_cm),
                f(r.fscore),
                f(r.nc),
                f(r.psnr_db),
                f(r.ssim),
            ])
            .expect("in-memory csv");
            md.push_str(&format!(
                "| {name} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                g(residual),
                g(target_psnr),
                g(r.cd_cm),
                g(r.p2s_cm),
                g(r.fscore),
                g(r.nc),
                g(r.psnr_db),
                g(r.ssim)
            ));
        }
    }
    if let Some(p) = paired_summary(&rows) {
        let line = format!(
            "refined residual below baseline in {}/{} pairs; mean target PSNR gain {:+.2} dB",
            p.residual_wins, p.pairs, p.mean_psnr_gain_db
        );
        md.push_str(&format!("\n{line}\n"));
    }
    write_file(&cfg.eval_dir().join("report.csv"), w.into_inner().expect("in-memory csv"), &mut out)?;
    write_file(&cfg.eval_dir().join("report.md"), &md, &mut out)?;
    out.lines.push(md.trim_end().to_string());
    Ok(out)
}
