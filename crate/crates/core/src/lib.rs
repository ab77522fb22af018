pub mod cli;
pub mod fit;
pub mod geom;
pub mod hexplane;
pub mod hoi;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod skeleton;
pub mod spline;
pub mod synth;
