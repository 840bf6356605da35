//! Soft thresholding and the per-epoch ADMM regularization step.
//!
//! The default step follows the published training loop line by line:
//!
//! ```text
//! z     <- soft(theta + u, lambda / rho)
//! u     <- u + (theta - z)
//! theta <- z - u
//! ```
//!
//! Two documented variants are selectable: `z_from_previous_z` updates z
//! from `z + u` instead of `theta + u`, and disabling `write_back_theta`
//! skips the final line, which is what standard scaled-form ADMM would do
//! (the minimization step keeps ownership of theta).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise soft threshold: sign(x) * max(|x| - t, 0).
pub fn soft_threshold(x: f64, t: f64) -> Result<f64> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::validation("soft_threshold", "threshold must be >= 0"));
    }
    Ok(x.signum() * (x.abs() - t).max(0.0))
}

/// Which tensors the l1 term regularizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdmmScope {
    /// Only the fusion-layer weight matrix.
    FusionWeights,
    /// Every parameter tensor.
    AllParams,
}

/// Behavioral switches for [`admm_update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmOptions {
    /// Update z from `z + u` instead of `theta + u`.
    pub z_from_previous_z: bool,
    /// Apply the final `theta <- z - u` write-back.
    pub write_back_theta: bool,
    pub scope: AdmmScope,
    /// After the last epoch, install the thresholded copy z into theta so
    /// the returned model actually carries the sparsity pattern.
    pub install_sparse_weights: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            z_from_previous_z: false,
            write_back_theta: true,
            scope: AdmmScope::FusionWeights,
            install_sparse_weights: true,
        }
    }
}

/// Splitting variable, scaled dual and penalty constants for one regularized
/// parameter subset.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub rho: f64,
    pub lambda: f64,
}

impl AdmmState {
    /// z starts as a copy of the initial parameters, u at zero.
    pub fn init(theta: &[f64], rho: f64, lambda: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::validation("rho", "must be positive"));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::validation("lambda", "must be non-negative"));
        }
        Ok(Self {
            z: theta.to_vec(),
            u: vec![0.0; theta.len()],
            rho,
            lambda,
        })
    }
}

/// One regularization step over the flattened subset `theta`.
pub fn admm_update(theta: &mut [f64], state: &mut AdmmState, opts: &AdmmOptions) -> Result<()> {
    if theta.len() != state.z.len() || theta.len() != state.u.len() {
        return Err(Error::validation(
            "admm_update",
            format!(
                "{} parameters but state holds {} / {}",
                theta.len(),
                state.z.len(),
                state.u.len()
            ),
        ));
    }
    let t = state.lambda / state.rho;
    for i in 0..theta.len() {
        let basis = if opts.z_from_previous_z {
            state.z[i] + state.u[i]
        } else {
            theta[i] + state.u[i]
        };
        state.z[i] = soft_threshold(basis, t)?;
    }
    for i in 0..theta.len() {
        state.u[i] += theta[i] - state.z[i];
    }
    if opts.write_back_theta {
        for i in 0..theta.len() {
            theta[i] = state.z[i] - state.u[i];
        }
    }
    Ok(())
}
