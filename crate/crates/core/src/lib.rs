//! Differentiable 3D Gaussian splatting for underwater scenes.
//!
//! The crate renders a cloud of anisotropic Gaussians through a tiled
//! alpha-compositing rasterizer, passes the result through a per-channel
//! water medium (attenuation plus backscatter), and trains every parameter
//! with hand-written analytic gradients.

// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the math.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod ablation;
pub mod backward;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod densify;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod image;
pub mod la;
pub mod losses;
pub mod medium;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod reduce;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod semantics;
pub mod sh;
pub mod ssim;
pub mod synth;
pub mod train;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{GaussianCloud, ParamGroup, Primitive, SEMANTIC_DIM};
pub use image::{Image, Plane};
pub use medium::MediumParams;
pub use raster::{rasterize, RasterOptions, RenderOutput};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/medium.md")]
    mod medium {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/ablation.md")]
    mod ablation {}
}
