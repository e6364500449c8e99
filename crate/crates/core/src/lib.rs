pub mod camera;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod image;
pub mod meshing;
pub mod metrics;
pub mod reconstructor;
pub mod renderer;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod splat;
