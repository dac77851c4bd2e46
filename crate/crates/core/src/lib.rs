//! Diffusion tensor imaging toolkit.
//!
//! Gradient tables and Q-space subsampling ([`gradscheme`]), log-linear
//! tensor fitting and scalar metrics ([`tensorfit`], [`eigen`]), the
//! geometry-constrained loss with analytic gradients ([`geometry`]), a
//! forward reference of the gradient-encoding block ([`dge`]), NIfTI-1 I/O
//! and phantoms ([`volumeio`]), and evaluation metrics ([`evaluate`]).

// Small fixed-size matrix code reads best with explicit indices, and `!(a > b)`
// is how NaN inputs are rejected alongside out-of-range ones.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dge;
pub mod eigen;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod gradscheme;
pub mod reduce;
pub mod tensor;
pub mod tensorfit;
pub mod volumeio;

pub use eigen::{eigensystem, jacobi_eigensystem, EigenSystem};
pub use error::{Error, ErrorKind, Result};
pub use evaluate::{evaluate_tensors, masked_mae, ssim3d, EvalReport};
pub use geometry::{delta2, delta3, geo_loss, xi, xi_relu, LossReport, LossWeights};
pub use gradscheme::{angular_distance, kennard_stone_select, GradientEntry, GradientScheme, SubsetSelection};
pub use tensor::{DiffusionTensor, Mask, TensorVolume};
pub use tensorfit::{fit_volume, fit_voxel, scalar_metrics, ScalarMaps, ScalarMetrics};
pub use volumeio::{read_nifti, synth_phantom, write_nifti, DataType, PhantomKind, Volume};
