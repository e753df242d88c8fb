//! Numeric tolerances used across the test and verification suites, kept in
//! one place so every suite pins the same budgets and each budget carries its
//! rationale.

/// Two f64 computations of the same quantity along different algebraic
/// routes (e.g. blocked vs naive matmul, rank-statistic vs pair-counted
/// AUC). Only summation order differs, so anything past ~1e-13 is a bug.
pub const EXACT_F64: f64 = 1e-12;

/// Relative error budget for reverse-mode gradients vs central finite
/// differences. Central differences carry O(step^2) truncation error plus
/// roundoff near 1e-10 for losses of order one, so 1e-4 leaves two orders
/// of headroom above the noise while catching any wrong backward rule.
pub const GRAD_REL: f64 = 1e-4;

/// Finite-difference step. With f64 and losses of order one this balances
/// truncation (step^2 = 1e-10) against cancellation (eps/step = 1e-11).
pub const GRAD_STEP: f64 = 1e-5;

/// Adapter transparency at initialization: the up-projection starts at zero,
/// so wrapped and unwrapped outputs must agree to roundoff.
pub const LORA_INIT: f64 = 1e-12;

/// Golden fixture comparisons. Fixture tensors are stored as f32, so the
/// budget sits just above f32 quantization (~6e-8 relative) for values of
/// order one.
pub const FIXTURE_F32: f64 = 1e-6;

/// Margin each fused model must hold over its single-modality ablations in
/// the end-to-end run.
pub const FUSION_MARGIN: f64 = 0.05;

/// Mean test AUC floor for the end-to-end synthetic runs.
pub const E2E_MEAN_AUC: f64 = 0.90;
