//! Centralized tolerances used by the validation and acceptance suites.
//!
//! Every threshold asserted in tests is defined here, with its origin.

/// Forward model vs. independent adaptive RK4 integration, relative
/// error per frame. The convolution solver is exact for piecewise-linear
/// input functions up to the O(h^2) trapezoid used for the trapped
/// compartment; at the default 0.1 s grid that is ~1e-6 relative.
pub const FORWARD_VS_RK4_REL: f64 = 1e-5;

/// Analytic TAC Jacobian vs. central finite differences.
/// Central FD carries O(step^2) truncation plus cancellation noise, so
/// this is looser than the forward-model tolerance.
pub const JACOBIAN_VS_FD_REL: f64 = 1e-4;

/// Draws with k2 + k3 below this are excluded from Jacobian FD checks;
/// finite differences degenerate at the kernel limit.
pub const JACOBIAN_FD_LAMBDA_MIN: f64 = 1e-6;

/// End-to-end weight gradients (loss -> ODE -> head -> MLP) vs. finite
/// differences on a reduced 16-wide network.
pub const END_TO_END_GRAD_REL: f64 = 1e-3;

/// NLLS region-median recovery on a noise-free phantom, relative error.
pub const NLLS_RECOVERY_REL: f64 = 0.01;

/// Per-voxel NLLS residual MSE on noise-free phantom TACs (normalized
/// units squared). Defines the achievable floor for training acceptance.
pub const NLLS_NOISE_FREE_FLOOR: f64 = 1e-8;

/// INR volume-mean MSE must come within this factor of the NLLS
/// volume-mean MSE on the same noisy data.
pub const INR_VS_NLLS_MSE_FACTOR: f64 = 2.0;

/// INR region-median K1/k3 recovery on the noisy phantom.
pub const INR_RECOVERY_REL: f64 = 0.15;

/// CTHU/CTFM volume-mean MSE must stay within this fraction of COORDS.
pub const VARIANT_PARITY_REL: f64 = 0.10;

/// Exactly representable normalization fixpoints (CT map) and the
/// round-trip bound for PET normalization in f64.
pub const NORMALIZATION_ROUND_TRIP: f64 = 1e-12;

/// Fourier-feature identity sin^2 + cos^2 = 1, elementwise.
pub const GFF_IDENTITY: f64 = 1e-12;

/// Downsampling must conserve per-frame total activity to this
/// relative bound.
pub const DOWNSAMPLE_CONSERVATION_REL: f64 = 1e-3;

/// Aggregation identity: volume-mean MSE vs. voxel-count-weighted mean
/// of slice means, computed with compensated summation.
pub const AGGREGATION_CONSISTENCY: f64 = 1e-12;

/// Hand-computed Adam single-step formula match.
pub const ADAM_STEP_EXACT: f64 = 1e-12;
