//! Closed-form references used for verification: the exact single-layer
//! sparse-GP posterior and marginal, the Gaussian Fisher divergence, and
//! finite-difference helpers. Nothing here touches the stochastic training
//! path, which is the point: these are the independent side of every
//! dual-route check.

use crate::error::{NoviError, Result};
use crate::kernel::{kern, KernelParams};
use crate::rng::NoviRng;
use crate::tensor::{cholesky, CholeskyFactor, Tensor, BASE_JITTER};

/// A multivariate normal given by mean vector and dense covariance.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    pub mean: Tensor,
    pub cov: Tensor,
}

impl GaussianDist {
    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    fn factor(&self) -> Result<CholeskyFactor> {
        cholesky(&self.cov, 0.0)
    }

    /// Score `∇ log p(x) = -Σ^{-1}(x - μ)`.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        let diff = x.reshape(&[n])?.sub(&self.mean.reshape(&[n])?)?;
        let f = self.factor()?;
        Ok(f.solve(&diff.reshape(&[n, 1])?)?.reshape(&[n])?.scale(-1.0))
    }

    pub fn log_density(&self, x: &Tensor) -> Result<f64> {
        let n = self.dim();
        let diff = x.reshape(&[n])?.sub(&self.mean.reshape(&[n])?)?;
        let f = self.factor()?;
        let half = crate::tensor::tri_solve(&f, &diff.reshape(&[n, 1])?, crate::tensor::Side::Lower)?;
        let quad: f64 = half.data().iter().map(|v| v * v).sum();
        Ok(-0.5 * (quad + f.log_det() + n as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn sample(&self, rng: &mut NoviRng) -> Result<Tensor> {
        let n = self.dim();
        let f = self.factor()?;
        let eps = rng.normal_tensor(&[n, 1]);
        f.lower()
            .matmul(&eps)?
            .reshape(&[n])?
            .add(&self.mean.reshape(&[n])?)
    }
}

/// Exact Gaussian posterior over the inducing variables of a single-layer
/// model with Gaussian noise, by linear-Gaussian conjugacy on
/// `p(y|u) = N(K_XZ K_ZZ^{-1} u, K_XX - K_XZ K_ZZ^{-1} K_ZX + σ² I)`.
pub fn exact_sgp_posterior(
    y: &Tensor,
    x: &Tensor,
    z: &Tensor,
    kernel: &KernelParams,
    noise_variance: f64,
) -> Result<GaussianDist> {
    let n = x.rows();
    let m = z.rows();
    let y = y.reshape(&[n, 1])?;
    let kzz = kern(kernel, z, z)?;
    let kzx = kern(kernel, z, x)?;
    let kxx = kern(kernel, x, x)?;
    let fz = cholesky(&kzz, 0.0)?;
    // Whitened form: with V = L_Z^{-1} K_ZX the likelihood covariance is
    // R = K_XX - V^T V + sigma^2 I, and the posterior is
    // cov = L_Z (I + C^T C)^{-1} L_Z^T with C = L_R^{-1} V^T.
    let v = crate::tensor::tri_solve(&fz, &kzx, crate::tensor::Side::Lower)?;
    let r = kxx
        .sub(&v.transpose()?.matmul(&v)?)?
        .add(&Tensor::eye(n).scale(noise_variance))?;
    let fr = cholesky(&symmetrize(&r)?, 0.0)?;
    let c = crate::tensor::tri_solve(&fr, &v.transpose()?, crate::tensor::Side::Lower)?;
    let mid = Tensor::eye(m).add(&c.transpose()?.matmul(&c)?)?;
    let fm = cholesky(&symmetrize(&mid)?, 0.0)?;
    let t = crate::tensor::tri_solve(&fm, &fz.lower().transpose()?, crate::tensor::Side::Lower)?;
    let cov = symmetrize(&t.transpose()?.matmul(&t)?)?;
    let w = crate::tensor::tri_solve(&fr, &y, crate::tensor::Side::Lower)?;
    let mean = fz
        .lower()
        .matmul(&fm.solve(&c.transpose()?.matmul(&w)?)?)?
        .reshape(&[m])?;
    Ok(GaussianDist { mean, cov })
}

/// Analytic marginal of a sparse GP with Gaussian inducing distribution
/// `N(m, S)`: mean `K_XZ K_ZZ^{-1} m` and covariance
/// `K_XX - K_XZ K_ZZ^{-1} (K_ZZ - S) K_ZZ^{-1} K_ZX`.
pub fn svgp_marginal(
    m: &Tensor,
    s_cov: &Tensor,
    x: &Tensor,
    z: &Tensor,
    kernel: &KernelParams,
) -> Result<(Tensor, Tensor)> {
    let mz = z.rows();
    let kzz = kern(kernel, z, z)?;
    let kzx = kern(kernel, z, x)?;
    let kxx = kern(kernel, x, x)?;
    let fz = cholesky(&kzz, 0.0)?;
    let v = fz.solve(&kzx)?; // K_ZZ^{-1} K_ZX
    let mean = v.transpose()?.matmul(&m.reshape(&[mz, 1])?)?;
    let mid = kzz.sub(s_cov)?;
    let cov = kxx.sub(&v.transpose()?.matmul(&mid.matmul(&v)?)?)?;
    Ok((mean.reshape(&[x.rows()])?, symmetrize(&cov)?))
}

/// Closed-form Fisher divergence between Gaussians,
/// `tr[(Σq^{-1} - Σp^{-1}) Σq (Σq^{-1} - Σp^{-1})] + |Σp^{-1}(μq - μp)|²`.
/// Derived from the defining integral; the tests cross-check it against a
/// Monte Carlo estimate of that integral.
pub fn gaussian_fisher_divergence(q: &GaussianDist, p: &GaussianDist) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(NoviError::dim("fisher divergence dimension mismatch"));
    }
    let n = q.dim();
    let strict = |cov: &Tensor| -> Result<CholeskyFactor> {
        let f = cholesky(cov, 0.0)?;
        if f.jitter_used() > 0.0 {
            return Err(NoviError::numerical("singular covariance"));
        }
        Ok(f)
    };
    let inv_q = strict(&q.cov)?.inverse()?;
    let inv_p = strict(&p.cov)?.inverse()?;
    let delta = inv_q.sub(&inv_p)?;
    let t = delta.matmul(&q.cov.matmul(&delta)?)?;
    let trace: f64 = (0..n).map(|i| t.at(i, i)).sum();
    let dmean = q.mean.reshape(&[n, 1])?.sub(&p.mean.reshape(&[n, 1])?)?;
    let v = inv_p.matmul(&dmean)?;
    let shift: f64 = v.data().iter().map(|a| a * a).sum();
    Ok(trace + shift)
}

fn symmetrize(a: &Tensor) -> Result<Tensor> {
    a.add(&a.transpose()?).map(|t| t.scale(0.5))
}

/// Central finite differences of a scalar function, coordinate by
/// coordinate, with steps scaled to the coordinate magnitude.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h_scale: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = h_scale * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
