//! Stationary covariance functions (squared-exponential and rational
//! quadratic) with ARD lengthscales, log-space hyperparameters, and the
//! interval clip that keeps lengthscales in a compact set during training.

use crate::autodiff::{Tape, Var};
use crate::error::{NoviError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    SquaredExponential,
    RationalQuadratic,
}

/// Kernel hyperparameters in log space (unconstrained for optimization).
/// `log_alpha` is the rational-quadratic shape and is ignored for SE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelParams {
    pub kind: KernelKind,
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_alpha: f64,
}

impl KernelParams {
    pub fn new(kind: KernelKind, variance: f64, lengthscales: &[f64]) -> Self {
        KernelParams {
            kind,
            log_variance: variance.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_alpha: 1.0_f64.ln(),
        }
    }

    pub fn isotropic(kind: KernelKind, variance: f64, lengthscale: f64, dim: usize) -> Self {
        Self::new(kind, variance, &vec![lengthscale; dim])
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }
}

/// Closed interval `[lower, upper]` the lengthscales are clipped into.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClipInterval {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ClipInterval {
    fn default() -> Self {
        ClipInterval {
            lower: 1e-3,
            upper: 1e3,
        }
    }
}

impl ClipInterval {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0 && self.upper > self.lower) {
            return Err(NoviError::input(format!(
                "clip interval needs 0 < lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Three-branch clip of every lengthscale into the interval; other fields
/// pass through unchanged. Acts on the exponentiated value.
pub fn apply_clip(params: &KernelParams, interval: &ClipInterval) -> Result<KernelParams> {
    interval.validate()?;
    let (lo, hi) = (interval.lower.ln(), interval.upper.ln());
    let mut out = params.clone();
    for l in &mut out.log_lengthscales {
        *l = l.clamp(lo, hi);
    }
    Ok(out)
}

/// Taped handles on one kernel's hyperparameters.
#[derive(Clone, Copy)]
pub struct KernelVars<'t> {
    pub kind: KernelKind,
    /// `sigma_f^2`, exponentiated from the log leaf.
    pub variance: Var<'t>,
    /// Per-dimension `1 / l`, exponentiated from the log leaves.
    pub inv_lengthscales: Var<'t>,
    /// RQ shape `alpha`.
    pub alpha: Var<'t>,
}

impl<'t> KernelVars<'t> {
    /// Record the hyperparameters on a tape. With `trainable` set the log
    /// leaves are differentiable; the returned leaves are the optimization
    /// handles (log variance, log lengthscales, log alpha).
    pub fn record(
        tape: &'t Tape,
        params: &KernelParams,
        trainable: bool,
    ) -> (Self, KernelLeaves<'t>) {
        let mk = |t: Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let log_var = mk(Tensor::scalar(params.log_variance));
        let log_ls = mk(Tensor::new(
            vec![params.log_lengthscales.len()],
            params.log_lengthscales.clone(),
        )
        .expect("lengthscale shape"));
        let log_alpha = mk(Tensor::scalar(params.log_alpha));
        let vars = KernelVars {
            kind: params.kind,
            variance: log_var.exp(),
            inv_lengthscales: log_ls.scale(-1.0).exp(),
            alpha: log_alpha.exp(),
        };
        (
            vars,
            KernelLeaves {
                log_variance: log_var,
                log_lengthscales: log_ls,
                log_alpha,
            },
        )
    }
}

/// The raw log-space leaves gradients are taken against.
#[derive(Clone, Copy)]
pub struct KernelLeaves<'t> {
    pub log_variance: Var<'t>,
    pub log_lengthscales: Var<'t>,
    pub log_alpha: Var<'t>,
}

/// ARD-scaled squared distance between row sets: `sum_k (x_k - z_k)^2 / l_k^2`.
fn scaled_sqdist<'t>(kv: &KernelVars<'t>, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let d = kv.inv_lengthscales.shape()[0];
    let (xn, xd) = match x.shape()[..] {
        [n, m] => (n, m),
        _ => return Err(NoviError::dim("kern inputs must be 2-d")),
    };
    let zd = z.shape()[1];
    if xd != d || zd != d {
        return Err(NoviError::dim(format!(
            "kern: input dims {xd}/{zd} vs {d} lengthscales"
        )));
    }
    let zn = z.shape()[0];
    let xs = x.mul(kv.inv_lengthscales.broadcast_row(xn)?)?;
    let zs = z.mul(kv.inv_lengthscales.broadcast_row(zn)?)?;
    xs.pairwise_sqdist(zs)
}

/// Taped covariance matrix between two sets of rows.
pub fn kern_taped<'t>(kv: &KernelVars<'t>, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let r2 = scaled_sqdist(kv, x, z)?;
    let shape = r2.shape();
    let var_mat = kv.variance.broadcast_fill(&shape)?;
    match kv.kind {
        KernelKind::SquaredExponential => {
            // sigma_f^2 exp(-r^2 / 2)
            Ok(r2.scale(-0.5).exp().mul(var_mat)?)
        }
        KernelKind::RationalQuadratic => {
            // sigma_f^2 (1 + r^2 / (2 alpha))^(-alpha) via exp(-alpha ln(...))
            let half_inv_alpha = kv.alpha.scale(2.0).powf(-1.0);
            let base = r2
                .mul(half_inv_alpha.broadcast_fill(&shape)?)?
                .add_scalar(1.0);
            let neg_alpha = kv.alpha.scale(-1.0);
            Ok(base
                .ln()
                .mul(neg_alpha.broadcast_fill(&shape)?)?
                .exp()
                .mul(var_mat)?)
        }
    }
}

/// Taped `k(x_i, x_i)` per row; constant `sigma_f^2` for these stationary
/// kernels.
pub fn kern_diag_taped<'t>(kv: &KernelVars<'t>, n: usize) -> Result<Var<'t>> {
    kv.variance.broadcast_fill(&[n])
}

/// Covariance matrix between two sets of rows.
pub fn kern(params: &KernelParams, x: &Tensor, z: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let (kv, _) = KernelVars::record(&tape, params, false);
    let xv = tape.constant(x.clone());
    let zv = tape.constant(z.clone());
    let out = kern_taped(&kv, xv, zv)?;
    Ok((*out.value()).clone())
}

/// `k(x_i, x_i)` per row of `x`.
pub fn kern_diag(params: &KernelParams, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(NoviError::dim("kern_diag expects a 2-d tensor"));
    }
    Ok(Tensor::filled(&[x.rows()], params.variance()))
}
