//! Command-line front end over [`crate::experiment`].

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::denoiser::PerturbMode;
use crate::error::Result;
use crate::experiment::{
    cmd_eval, cmd_make_scene, cmd_mesh, cmd_report, cmd_sample, record_errors, ExperimentConfig, Mode, Outcome,
    Overrides, OUTPUT_ENV,
};
use crate::scene::Shape;

#[derive(Debug, Parser)]
#[command(name = "splatdiff", version, about = "Multi-view diffusion sampling with splat refinement")]
pub struct Cli {
    /// TOML experiment config; defaults apply without one.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (beats the SPLATDIFF_OUT variable and the file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the scene and render its ground-truth views.
    MakeScene(SceneArgs),
    /// Run the sampler for every configured mode and seed.
    Sample(SampleArgs),
    /// Extract textured meshes from a cloud or from every pipeline cloud.
    Mesh(MeshArgs),
    /// Score clouds against the ground truth.
    Eval(EvalArgs),
    /// Tabulate run summaries and evaluations.
    Report,
    /// Print the resolved config.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Sphere,
    Blob,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Refined,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PerturbArg {
    Warp,
    AdditiveLowfreq,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long, value_enum)]
    pub shape: Option<ShapeArg>,
    #[arg(long)]
    pub n_splats: Option<usize>,
    #[arg(long)]
    pub scene_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Run seeds `0..N` instead of a list.
    #[arg(long, conflicts_with = "seeds")]
    pub n_seeds: Option<u64>,
    #[arg(long)]
    pub perturb_sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub perturb_mode: Option<PerturbArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub fit_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Splat PLY; all pipeline clouds when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted splat PLY; all pipeline runs when absent.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Reference splat PLY; the scene when absent.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

fn overrides(cli: &Cli) -> Overrides {
    let mut o = Overrides {
        output: cli.out.clone(),
        ..Overrides::default()
    };
    match &cli.command {
        Command::MakeScene(a) => {
            o.shape = a.shape.map(|s| match s {
                ShapeArg::Sphere => Shape::Sphere,
                ShapeArg::Blob => Shape::Blob,
            });
            o.n_splats = a.n_splats;
            o.scene_seed = a.scene_seed;
        }
        Command::Sample(a) => {
            o.modes = a.mode.map(|m| match m {
                ModeArg::Baseline => vec![Mode::Baseline],
                ModeArg::Refined => vec![Mode::Refined],
                ModeArg::Both => vec![Mode::Baseline, Mode::Refined],
            });
            o.seeds = a.seeds.clone().or(a.n_seeds.map(|n| (0..n).collect()));
            o.perturb_sigma = a.perturb_sigma;
            o.steps = a.steps;
            o.fit_iterations = a.fit_iterations;
        }
        _ => {}
    }
    o
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let env = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let mut cfg = ExperimentConfig::resolve(cli.config.as_deref(), env, &overrides(cli))?;
    match &cli.command {
        Command::Sample(a) => {
            if let Some(m) = a.perturb_mode {
                cfg.runs.perturb_mode = match m {
                    PerturbArg::Warp => PerturbMode::Warp,
                    PerturbArg::AdditiveLowfreq => PerturbMode::AdditiveLowfreq,
                };
            }
        }
        Command::Mesh(a) => {
            if let Some(v) = a.voxel_size {
                cfg.mesh.voxel_size = v;
            }
            if let Some(v) = a.views {
                cfg.mesh.n_views = v;
            }
            if let Some(v) = a.resolution {
                cfg.mesh.resolution = v;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve(cli)?;
    let (out, stage_dir) = match &cli.command {
        Command::MakeScene(_) => (cmd_make_scene(&cfg)?, cfg.scene_dir()),
        Command::Sample(_) => (cmd_sample(&cfg)?, cfg.output.join("runs")),
        Command::Mesh(a) => (cmd_mesh(&cfg, a.input.as_deref(), a.output.as_deref())?, cfg.mesh_dir()),
        Command::Eval(a) => (cmd_eval(&cfg, a.pred.as_deref(), a.gt.as_deref())?, cfg.eval_dir()),
        Command::Report => (cmd_report(&cfg)?, cfg.eval_dir()),
        Command::Config => {
            let out = Outcome {
                lines: vec![cfg.to_toml()],
                ..Outcome::default()
            };
            return Ok(out);
        }
    };
    record_errors(&stage_dir, &out.errors)?;
    Ok(out)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 if anything failed, 2 on bad usage.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli) {
        Ok(out) => {
            for line in &out.lines {
                let _ = writeln!(stdout, "{line}");
            }
            for e in &out.errors {
                eprintln!("error: {e}");
            }
            i32::from(!out.ok())
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_subcommand() {
        for args in [
            vec!["splatdiff", "make-scene", "--shape", "sphere", "--n-splats", "16"],
            vec!["splatdiff", "--out", "o", "sample", "--mode", "both", "--seeds", "1,2,3"],
            vec!["splatdiff", "mesh", "--input", "a.ply", "--output", "b.ply"],
            vec!["splatdiff", "eval", "--pred", "a.ply"],
            vec!["splatdiff", "report", "--config", "c.toml"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["splatdiff", "mesh", "--output", "b.ply"]).is_err());
        assert!(Cli::try_parse_from(["splatdiff", "sample", "--seeds", "1", "--n-seeds", "3"]).is_err());
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from(["splatdiff", "--out", "x", "sample", "--mode", "refined", "--n-seeds", "3"]).unwrap();
        let o = overrides(&cli);
        assert_eq!(o.output, Some(PathBuf::from("x")));
        assert_eq!(o.modes, Some(vec![Mode::Refined]));
        assert_eq!(o.seeds, Some(vec![0, 1, 2]));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["splatdiff", "fly"]), 2);
    }
}
