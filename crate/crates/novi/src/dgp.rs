//! The deep GP model: layer conditionals, reparameterized forward sampling,
//! prior and likelihood log-densities, and the Monte Carlo posterior-score
//! estimator.
//!
//! Likelihood-path computations are batched over generator samples `k` and
//! Monte Carlo draws `s`. Batched row blocks use `(s, k, b)` ordering: row
//! `s*K*B + k*B + b` holds draw `s` of sample `k` at batch row `b`. Matrices
//! whose factors depend only on the hyperparameters are factored once per
//! evaluation, outside the tape; gradients through `K_ZZ^{-1}` in the
//! hyperparameter path are recovered with the first-order identity
//! `d(K^{-1}) = -K^{-1} dK K^{-1}` expressed through constant-factor solves.

use crate::autodiff::{Tape, Var};
use crate::error::{NoviError, Result};
use crate::kernel::{
    apply_clip, kern_diag_taped, kern_taped, ClipInterval, KernelKind, KernelLeaves, KernelParams,
    KernelVars,
};
use crate::rng::NoviRng;
use crate::tensor::{cholesky, CholeskyFactor, Tensor, BASE_JITTER};
use std::f64::consts::PI;
use std::sync::Arc;

const LN_2PI: f64 = 1.837877066409345483560659472811235279722794947275566825634; // ln(2*pi)
const _: () = assert!(PI > 3.14);

/// Width bookkeeping for one GP layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub num_inducing: usize,
}

/// Hidden layers are 10 wide and the final layer 1 wide by default.
pub fn default_layer_specs(depth: usize, data_dim: usize, num_inducing: usize) -> Vec<LayerSpec> {
    let hidden = 10;
    (0..depth)
        .map(|l| LayerSpec {
            in_dim: if l == 0 { data_dim } else { hidden },
            out_dim: if l + 1 == depth { 1 } else { hidden },
            num_inducing,
        })
        .collect()
}

/// One layer's trainable pieces: inducing inputs and kernel hyperparameters.
#[derive(Debug, Clone)]
pub struct DgpLayer {
    pub inducing_inputs: Tensor,
    pub kernel: KernelParams,
}

/// All point-estimated model parameters: per-layer inducing inputs and
/// kernel hyperparameters plus the observation noise variance.
#[derive(Debug, Clone)]
pub struct DgpState {
    pub layers: Vec<DgpLayer>,
    pub log_noise_variance: f64,
}

impl DgpState {
    /// Fresh state: inducing inputs from a standard normal, unit kernel
    /// variance, unit lengthscales, noise variance 0.01 (a tenth of the
    /// unit-scale target variance).
    pub fn init(specs: &[LayerSpec], kind: KernelKind, rng: &mut NoviRng) -> Result<Self> {
        validate_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| DgpLayer {
                inducing_inputs: rng.normal_tensor(&[s.num_inducing, s.in_dim]),
                kernel: KernelParams::isotropic(kind, 1.0, 1.0, s.in_dim),
            })
            .collect();
        Ok(DgpState {
            layers,
            log_noise_variance: 0.01_f64.ln(),
        })
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dims(&self, out_dims: &[usize]) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .zip(out_dims)
            .map(|(l, &d)| LayerSpec {
                in_dim: l.inducing_inputs.cols(),
                out_dim: d,
                num_inducing: l.inducing_inputs.rows(),
            })
            .collect()
    }

    /// Clip every layer's lengthscales into the interval.
    pub fn clip(&mut self, interval: &ClipInterval) -> Result<()> {
        for layer in &mut self.layers {
            layer.kernel = apply_clip(&layer.kernel, interval)?;
        }
        Ok(())
    }

    /// Named parameter view in a fixed order (optimizer / checkpoint keys).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("dgp.z{l}"), layer.inducing_inputs.clone()));
            out.push((
                format!("dgp.log_variance{l}"),
                Tensor::scalar(layer.kernel.log_variance),
            ));
            out.push((
                format!("dgp.log_lengthscales{l}"),
                Tensor::new(
                    vec![layer.kernel.log_lengthscales.len()],
                    layer.kernel.log_lengthscales.clone(),
                )
                .expect("lengthscale shape"),
            ));
            out.push((
                format!("dgp.log_alpha{l}"),
                Tensor::scalar(layer.kernel.log_alpha),
            ));
        }
        out.push((
            "dgp.log_noise_variance".into(),
            Tensor::scalar(self.log_noise_variance),
        ));
        out
    }

    /// Write back parameters in the `named_params` order.
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let want = self.layers.len() * 4 + 1;
        if params.len() != want {
            return Err(NoviError::input(format!(
                "expected {want} parameter tensors, got {}",
                params.len()
            )));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.inducing_inputs = params[l * 4].clone();
            layer.kernel.log_variance = params[l * 4 + 1].item();
            layer.kernel.log_lengthscales = params[l * 4 + 2].data().to_vec();
            layer.kernel.log_alpha = params[l * 4 + 3].item();
        }
        self.log_noise_variance = params[want - 1].item();
        Ok(())
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(NoviError::input("model needs at least one layer"));
    }
    for w in specs.windows(2) {
        if w[1].in_dim != w[0].out_dim {
            return Err(NoviError::dim(format!(
                "layer widths do not chain: out {} vs next in {}",
                w[0].out_dim, w[1].in_dim
            )));
        }
    }
    Ok(())
}

/// Flat inducing-variable vector.
///
/// Layout: layers in order, output dimensions in order within a layer,
/// inducing indices in order within a dimension; block `(l, d)` is
/// contiguous. `unflatten`/`flatten` round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSample {
    pub flat: Tensor,
}

/// Per-layer `(offset, num_inducing, out_dim)` blocks of the flat layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub blocks: Vec<(usize, usize, usize)>,
    pub total: usize,
}

impl Layout {
    pub fn new(specs: &[LayerSpec]) -> Self {
        let mut blocks = Vec::with_capacity(specs.len());
        let mut off = 0;
        for s in specs {
            blocks.push((off, s.num_inducing, s.out_dim));
            off += s.num_inducing * s.out_dim;
        }
        Layout { blocks, total: off }
    }
}

impl InducingSample {
    pub fn zeros(layout: &Layout) -> Self {
        InducingSample {
            flat: Tensor::zeros(&[layout.total]),
        }
    }

    /// Split into per-layer `(M, D)` matrices.
    pub fn unflatten(&self, layout: &Layout) -> Result<Vec<Tensor>> {
        if self.flat.numel() != layout.total {
            return Err(NoviError::dim(format!(
                "inducing sample length {} vs layout total {}",
                self.flat.numel(),
                layout.total
            )));
        }
        layout
            .blocks
            .iter()
            .map(|&(off, m, d)| {
                let block = self.flat.data()[off..off + m * d].to_vec();
                // Blocks are dimension-major: (D, M) row-major, transposed to (M, D).
                Tensor::new(vec![d, m], block)?.transpose()
            })
            .collect()
    }

    /// Inverse of `unflatten`.
    pub fn flatten(parts: &[Tensor], layout: &Layout) -> Result<Self> {
        if parts.len() != layout.blocks.len() {
            return Err(NoviError::dim("flatten: layer count mismatch"));
        }
        let mut flat = Vec::with_capacity(layout.total);
        for (part, &(_, m, d)) in parts.iter().zip(&layout.blocks) {
            if part.shape() != [m, d] {
                return Err(NoviError::dim(format!(
                    "flatten: layer block {:?} vs ({m}, {d})",
                    part.shape()
                )));
            }
            flat.extend_from_slice(part.transpose()?.data());
        }
        Ok(InducingSample {
            flat: Tensor::new(vec![layout.total], flat)?,
        })
    }
}

/// One minibatch plus the full-data size used to rescale the likelihood.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub x: Tensor,
    pub y: Tensor,
    pub full_size: usize,
}

impl Minibatch {
    pub fn full(x: &Tensor, y: &Tensor) -> Self {
        Minibatch {
            x: x.clone(),
            y: y.clone(),
            full_size: x.rows(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }
}

/// Which gradients a recorded model graph must support.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradMode {
    /// Track hyperparameters (inducing inputs, kernel, noise) as leaves and
    /// route `K_ZZ^{-1}` applications through the first-order inverse
    /// identity so their gradients are complete.
    pub hyper: bool,
}

struct LayerGraph<'t> {
    z: Var<'t>,
    kv: KernelVars<'t>,
    kernel_leaves: KernelLeaves<'t>,
    /// `K_ZZ + jitter I`, taped.
    kzz: Var<'t>,
    factor: Arc<CholeskyFactor>,
    /// Dense `(K_ZZ + jitter I)^{-1}`, only materialized in hyper mode.
    kzz_inv: Option<Tensor>,
    logdet0: f64,
    out_dim: usize,
    num_inducing: usize,
}

/// Taped view of a [`DgpState`] for one objective evaluation: kernel
/// matrices, factors, and hyperparameter leaves.
pub struct ModelGraph<'t> {
    pub tape: &'t Tape,
    layers: Vec<LayerGraph<'t>>,
    layout: Layout,
    log_noise: Var<'t>,
    noise: Var<'t>,
    hyper: bool,
}

impl<'t> ModelGraph<'t> {
    pub fn record(
        tape: &'t Tape,
        state: &DgpState,
        out_dims: &[usize],
        mode: GradMode,
    ) -> Result<Self> {
        if out_dims.len() != state.layers.len() {
            return Err(NoviError::dim("out_dims length vs layer count"));
        }
        let specs = state.layer_dims(out_dims);
        validate_specs(&specs)?;
        let layout = Layout::new(&specs);
        let mut layers = Vec::with_capacity(state.layers.len());
        for (layer, spec) in state.layers.iter().zip(&specs) {
            let (kv, kernel_leaves) = KernelVars::record(tape, &layer.kernel, mode.hyper);
            let z = if mode.hyper {
                tape.leaf(layer.inducing_inputs.clone())
            } else {
                tape.constant(layer.inducing_inputs.clone())
            };
            let kzz_raw = kern_taped(&kv, z, z)?;
            let factor = cholesky(&kzz_raw.value(), BASE_JITTER)?;
            let m = spec.num_inducing;
            let jitter_eye = tape.constant(Tensor::eye(m).scale(factor.jitter_used()));
            let kzz = kzz_raw.add(jitter_eye)?;
            let factor = Arc::new(factor);
            let kzz_inv = if mode.hyper {
                Some(factor.inverse()?)
            } else {
                None
            };
            layers.push(LayerGraph {
                z,
                kv,
                kernel_leaves,
                kzz,
                logdet0: factor.log_det(),
                factor,
                kzz_inv,
                out_dim: spec.out_dim,
                num_inducing: m,
            });
        }
        let log_noise = if mode.hyper {
            tape.leaf(Tensor::scalar(state.log_noise_variance))
        } else {
            tape.constant(Tensor::scalar(state.log_noise_variance))
        };
        Ok(ModelGraph {
            tape,
            layers,
            layout,
            log_noise,
            noise: log_noise.exp(),
            hyper: mode.hyper,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn d_total(&self) -> usize {
        self.layout.total
    }

    pub fn noise_variance(&self) -> Var<'t> {
        self.noise
    }

    /// Hyperparameter leaves in `DgpState::named_params` order.
    pub fn hyper_leaves(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.z);
            out.push(l.kernel_leaves.log_variance);
            out.push(l.kernel_leaves.log_lengthscales);
            out.push(l.kernel_leaves.log_alpha);
        }
        out.push(self.log_noise);
        out
    }

    /// Apply `(K_ZZ + jitter I)^{-1}` to a `(M, p)` block. In hyper mode this
    /// uses `2 A0 - K^{-1}(K(nu) A0)` with constant factors, which matches
    /// the true value and first-order hyperparameter gradient at the
    /// evaluation point and stays linear in the right-hand side.
    fn inv_apply(&self, l: usize, b: Var<'t>) -> Result<Var<'t>> {
        let layer = &self.layers[l];
        let a0 = b.chol_solve(Arc::clone(&layer.factor))?;
        if !self.hyper {
            return Ok(a0);
        }
        let correction = layer
            .kzz
            .matmul(a0)?
            .chol_solve(Arc::clone(&layer.factor))?;
        a0.scale(2.0).sub(correction)
    }

    /// `log det (K_ZZ + jitter I)` with a first-order hyperparameter path in
    /// hyper mode: `logdet0 + tr(K0^{-1} (K(nu) - K0))`.
    fn logdet(&self, l: usize) -> Result<Var<'t>> {
        let layer = &self.layers[l];
        if !self.hyper {
            return Ok(self.tape.constant_scalar(layer.logdet0));
        }
        let inv = self
            .tape
            .constant(layer.kzz_inv.clone().expect("hyper mode inverse"));
        let k0 = self.tape.constant((*layer.kzz.value()).clone());
        let correction = inv.mul(layer.kzz.sub(k0)?)?.sum()?;
        Ok(correction.add_scalar(layer.logdet0))
    }

    /// Split a `(K, D_total)` batch of flat inducing samples into per-layer
    /// `(K, M, D)` blocks.
    pub fn unflatten_batch(&self, u: Var<'t>) -> Result<Vec<Var<'t>>> {
        let shape = u.shape();
        if shape.len() != 2 || shape[1] != self.layout.total {
            return Err(NoviError::dim(format!(
                "inducing batch shape {shape:?} vs flat width {}",
                self.layout.total
            )));
        }
        let k = shape[0];
        self.layout
            .blocks
            .iter()
            .map(|&(off, m, d)| {
                u.slice_cols(off, off + m * d)?
                    .reshape(&[k, d, m])?
                    .transpose_batch()
            })
            .collect()
    }

    /// Per-sample solve `(K_ZZ)^{-1} U` as `(K, M, D)`.
    fn solve_batched(&self, l: usize, u3: Var<'t>) -> Result<Var<'t>> {
        let (k, m, d) = dim3(&u3)?;
        let two_d = u3
            .transpose_batch()?
            .reshape(&[k * d, m])?
            .transpose()?;
        let solved = self.inv_apply(l, two_d)?;
        solved
            .transpose()?
            .reshape(&[k, d, m])?
            .transpose_batch()
    }

    /// Reparameterized propagation of a batch of inputs under `k_samples`
    /// inducing samples and `s_samples` path draws per sample.
    ///
    /// `eps[l]` must be `(S*K*B, D_l)` in `(s, k, b)` row order. Returns the
    /// final-layer values as `(S*K*B, D_L)`.
    pub fn propagate(
        &self,
        x: &Tensor,
        u: Var<'t>,
        s_samples: usize,
        eps: &[Tensor],
    ) -> Result<Var<'t>> {
        let k = u.shape()[0];
        let b = x.rows();
        let s = s_samples;
        if eps.len() != self.layers.len() {
            return Err(NoviError::dim("one eps block per layer required"));
        }
        for (l, e) in eps.iter().enumerate() {
            if e.shape() != [s * k * b, self.layers[l].out_dim] {
                return Err(NoviError::dim(format!(
                    "eps[{l}] shape {:?} vs ({}, {})",
                    e.shape(),
                    s * k * b,
                    self.layers[l].out_dim
                )));
            }
        }
        let u_blocks = self.unflatten_batch(u)?;

        let mut f_prev: Option<Var<'t>> = None; // None means layer-1 input x
        for (l, layer) in self.layers.iter().enumerate() {
            let d = layer.out_dim;
            let m = layer.num_inducing;
            let a = self.solve_batched(l, u_blocks[l])?; // (K, M, D)
            let eps_l = self.tape.constant(eps[l].clone());

            let (mean, var) = match &f_prev {
                None => {
                    // Layer 1: kernel blocks depend only on the fixed batch
                    // inputs, so compute them once and tile per (s, k).
                    let xv = self.tape.constant(x.clone());
                    let kfz = kern_taped(&layer.kv, xv, layer.z)?; // (B, M)
                    let a2 = a.transpose_batch()?.reshape(&[k * d, m])?.transpose()?; // (M, K*D)
                    let mean = kfz
                        .matmul(a2)? // (B, K*D)
                        .reshape(&[b, k, d])?
                        .swap_axes01()? // (K, B, D)
                        .reshape(&[k * b, d])?
                        .tile_rows(s)?; // (S*K*B, D) rows (s, k, b)
                    let kzf = kfz.transpose()?;
                    let w = self.inv_apply(l, kzf)?;
                    let qdiag = kzf.mul(w)?.col_sums()?; // (B)
                    let var = kern_diag_taped(&layer.kv, b)?
                        .sub(qdiag)?
                        .clamp_min0()
                        .reshape(&[b, 1])?
                        .tile_rows(s * k)? // rows (s, k, b)
                        .reshape(&[s * k * b])?;
                    (mean, var)
                }
                Some(f) => {
                    let kfz = kern_taped(&layer.kv, *f, layer.z)?; // (S*K*B, M)
                    let a_tiled = a
                        .reshape(&[k, m * d])?
                        .tile_rows(s)? // (S*K, M*D)
                        .reshape(&[s * k, m, d])?;
                    let mean = kfz
                        .reshape(&[s * k, b, m])?
                        .bmm(a_tiled)?
                        .reshape(&[s * k * b, d])?;
                    let kzf = kfz.transpose()?;
                    let w = self.inv_apply(l, kzf)?;
                    let qdiag = kzf.mul(w)?.col_sums()?; // (S*K*B)
                    let var = kern_diag_taped(&layer.kv, s * k * b)?
                        .sub(qdiag)?
                        .clamp_min0();
                    (mean, var)
                }
            };
            let noise_part = eps_l.mul(var.sqrt_clamped().broadcast_col(d)?)?;
            f_prev = Some(mean.add(noise_part)?);
        }
        Ok(f_prev.expect("at least one layer"))
    }

    /// Per-sample Monte Carlo data term: `(N/B) (logsumexp_s log N(y | F_L^(s),
    /// sigma^2 I) - log S)` for each of the K inducing samples.
    pub fn log_lik_batch(
        &self,
        batch: &Minibatch,
        u: Var<'t>,
        s_samples: usize,
        eps: &[Tensor],
    ) -> Result<Var<'t>> {
        if s_samples < 1 {
            return Err(NoviError::input("s_samples must be >= 1"));
        }
        let k = u.shape()[0];
        let b = batch.batch_size();
        let s = s_samples;
        let d_l = self.layers.last().expect("layers").out_dim;
        if batch.y.shape() != [b, d_l] {
            return Err(NoviError::dim(format!(
                "batch y shape {:?} vs ({b}, {d_l})",
                batch.y.shape()
            )));
        }
        let f_last = self.propagate(&batch.x, u, s, eps)?;
        let y_tiled = self.tape.constant(batch.y.tile_rows(s * k)?);
        let resid = f_last.sub(y_tiled)?;
        let sq_sums = resid
            .mul(resid)?
            .reshape(&[s * k, b * d_l])?
            .row_sums()?; // (S*K)
        let inv_noise = self.noise.powf(-1.0);
        let quad = sq_sums
            .mul(inv_noise.broadcast_fill(&[s * k])?)?
            .scale(-0.5);
        let log_norm = self
            .log_noise
            .add_scalar(LN_2PI)
            .scale(-(b as f64) * (d_l as f64) / 2.0);
        let ll_sk = quad.add(log_norm.broadcast_fill(&[s * k])?)?;
        let lse = ll_sk
            .reshape(&[s, k])?
            .transpose()?
            .logsumexp_rows()?; // (K)
        let scale = batch.full_size as f64 / b as f64;
        Ok(lse.add_scalar(-(s as f64).ln()).scale(scale))
    }

    /// Per-sample log prior `sum_{l,d} log N(U_{l,d} | 0, K_ZZ + jitter I)`.
    pub fn log_prior_batch(&self, u: Var<'t>) -> Result<Var<'t>> {
        let k = u.shape()[0];
        let u_blocks = self.unflatten_batch(u)?;
        let mut total: Option<Var<'t>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let (m, d) = (layer.num_inducing, layer.out_dim);
            let w = self.solve_batched(l, u_blocks[l])?;
            let quad = u_blocks[l]
                .reshape(&[k, m * d])?
                .mul(w.reshape(&[k, m * d])?)?
                .row_sums()?; // (K)
            let logdet = self.logdet(l)?;
            let consts = logdet
                .scale(-(d as f64) / 2.0)
                .add_scalar(-(m as f64) * (d as f64) / 2.0 * LN_2PI);
            let term = quad.scale(-0.5).add(consts.broadcast_fill(&[k])?)?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    /// Taped prior score `-K_ZZ^{-1} U` per block, flattened back to the
    /// sample layout. Linear in `u`, so second-order paths through it are
    /// exact.
    pub fn prior_score_taped(&self, u: Var<'t>) -> Result<Var<'t>> {
        let k = u.shape()[0];
        let u_blocks = self.unflatten_batch(u)?;
        let mut parts = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (m, d) = (layer.num_inducing, layer.out_dim);
            let w = self.solve_batched(l, u_blocks[l])?.scale(-1.0);
            parts.push(w.transpose_batch()?.reshape(&[k, d * m])?);
        }
        Var::concat_cols_join(&parts)
    }

    /// Per-sample joint density `log p(y, U^k | nu)` (prior + MC data term).
    pub fn log_joint_batch(
        &self,
        batch: &Minibatch,
        u: Var<'t>,
        s_samples: usize,
        eps: &[Tensor],
    ) -> Result<Var<'t>> {
        let prior = self.log_prior_batch(u)?;
        let lik = self.log_lik_batch(batch, u, s_samples, eps)?;
        prior.add(lik)
    }

    /// Draw the per-layer path noise for `propagate` in `(s, k, b)` order.
    pub fn draw_path_eps(
        &self,
        rng: &mut NoviRng,
        s_samples: usize,
        k_samples: usize,
        batch_rows: usize,
    ) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| rng.normal_tensor(&[s_samples * k_samples * batch_rows, l.out_dim]))
            .collect()
    }
}

fn dim3(v: &Var) -> Result<(usize, usize, usize)> {
    match v.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(NoviError::dim(format!("expected 3-d var, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Single-sample convenience surface.
// ---------------------------------------------------------------------------

/// Mean and diagonal variance of one layer's conditional at `f_prev`, given
/// that layer's inducing variables `u_l` of shape `(M, D)`.
pub fn layer_conditional(
    state: &DgpState,
    layer: usize,
    f_prev: &Tensor,
    u_l: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if layer >= state.layers.len() {
        return Err(NoviError::input(format!("no layer {layer}")));
    }
    let spec = &state.layers[layer];
    match u_l.shape() {
        [m, _] if *m == spec.inducing_inputs.rows() => {}
        s => {
            return Err(NoviError::dim(format!(
                "u_l shape {s:?} vs ({}, d)",
                spec.inducing_inputs.rows()
            )))
        }
    }
    let tape = Tape::new();
    let (kv, _) = KernelVars::record(&tape, &spec.kernel, false);
    let z = tape.constant(spec.inducing_inputs.clone());
    let kzz = kern_taped(&kv, z, z)?;
    let factor = Arc::new(cholesky(&kzz.value(), BASE_JITTER)?);
    let fv = tape.constant(f_prev.clone());
    let kfz = kern_taped(&kv, fv, z)?;
    let a = tape.constant(u_l.clone()).chol_solve(Arc::clone(&factor))?;
    let mean = kfz.matmul(a)?;
    let kzf = kfz.transpose()?;
    let w = kzf.chol_solve(factor)?;
    let qdiag = kzf.mul(w)?.col_sums()?;
    let var = kern_diag_taped(&kv, f_prev.rows())?
        .sub(qdiag)?
        .clamp_min0();
    Ok(((*mean.value()).clone(), (*var.value()).clone()))
}

/// Propagate inputs through every layer with externally supplied noise
/// (one `(n, D_l)` block per layer); `eps = 0` gives the mean propagation.
pub fn forward_sample(
    state: &DgpState,
    x: &Tensor,
    u: &InducingSample,
    eps: &[Tensor],
) -> Result<Tensor> {
    let out_dims = infer_out_dims(state, u, eps)?;
    let tape = Tape::new();
    let graph = ModelGraph::record(&tape, state, &out_dims, GradMode::default())?;
    let u_var = tape.constant(u.flat.reshape(&[1, u.flat.numel()])?);
    let out = graph.propagate(x, u_var, 1, eps)?;
    Ok((*out.value()).clone())
}

fn infer_out_dims(state: &DgpState, u: &InducingSample, eps: &[Tensor]) -> Result<Vec<usize>> {
    if eps.len() != state.layers.len() {
        return Err(NoviError::dim("one eps block per layer required"));
    }
    let dims: Vec<usize> = eps.iter().map(|e| e.cols()).collect();
    let layout = Layout::new(&state.layer_dims(&dims));
    if layout.total != u.flat.numel() {
        return Err(NoviError::dim(format!(
            "inducing sample length {} vs layout {}",
            u.flat.numel(),
            layout.total
        )));
    }
    Ok(dims)
}

/// `log p(U)` under the layer-wise GP prior, constants included.
pub fn log_prior(state: &DgpState, u: &InducingSample, out_dims: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let graph = ModelGraph::record(&tape, state, out_dims, GradMode::default())?;
    let u_var = tape.constant(u.flat.reshape(&[1, u.flat.numel()])?);
    Ok(graph.log_prior_batch(u_var)?.value().item())
}

/// Closed-form prior score: block `(l, d)` is `-K_ZZ^{-1} U_{l,d}`.
pub fn prior_score(state: &DgpState, u: &InducingSample, out_dims: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let graph = ModelGraph::record(&tape, state, out_dims, GradMode::default())?;
    let u_var = tape.constant(u.flat.reshape(&[1, u.flat.numel()])?);
    let score = graph.prior_score_taped(u_var)?;
    score.value().reshape(&[u.flat.numel()])
}

/// Monte Carlo data term for a single inducing sample (spec scale `N/B`,
/// `-log S` included), recorded on the caller's tape.
pub fn log_lik_mc<'t>(
    tape: &'t Tape,
    state: &DgpState,
    batch: &Minibatch,
    u: &InducingSample,
    s_samples: usize,
    rng: &mut NoviRng,
) -> Result<Var<'t>> {
    let out_dims = out_dims_for_batch(state, batch);
    let graph = ModelGraph::record(tape, state, &out_dims, GradMode::default())?;
    if graph.d_total() != u.flat.numel() {
        return Err(NoviError::dim("inducing sample length vs model layout"));
    }
    let u_var = tape.leaf(u.flat.reshape(&[1, u.flat.numel()])?);
    let eps = graph.draw_path_eps(rng, s_samples, 1, batch.batch_size());
    graph.log_lik_batch(batch, u_var, s_samples, &eps)
}

fn out_dims_for_batch(state: &DgpState, batch: &Minibatch) -> Vec<usize> {
    let mut dims: Vec<usize> = state
        .layers
        .iter()
        .skip(1)
        .map(|l| l.inducing_inputs.cols())
        .collect();
    dims.push(batch.y.cols());
    dims
}

/// Monte Carlo posterior-score estimate at `u`: prior score plus the
/// gradient of the data term through the reparameterized samples.
pub fn posterior_score(
    state: &DgpState,
    batch: &Minibatch,
    u: &InducingSample,
    s_samples: usize,
    rng: &mut NoviRng,
) -> Result<Tensor> {
    let out_dims = out_dims_for_batch(state, batch);
    let scores = posterior_scores_batch(
        state,
        batch,
        &u.flat.reshape(&[1, u.flat.numel()])?,
        s_samples,
        rng,
        &out_dims,
    )?;
    scores.reshape(&[u.flat.numel()])
}

/// Detached posterior scores for a whole `(K, D_total)` batch of samples.
pub fn posterior_scores_batch(
    state: &DgpState,
    batch: &Minibatch,
    u_batch: &Tensor,
    s_samples: usize,
    rng: &mut NoviRng,
    out_dims: &[usize],
) -> Result<Tensor> {
    let tape = Tape::new();
    let graph = ModelGraph::record(&tape, state, out_dims, GradMode::default())?;
    let k = u_batch.rows();
    let u_var = tape.leaf(u_batch.clone());
    let eps = graph.draw_path_eps(rng, s_samples, k, batch.batch_size());
    let lik = graph.log_lik_batch(batch, u_var, s_samples, &eps)?.sum()?;
    let lik_grad = tape.backward(lik, &[u_var])?.remove(0);
    let prior = graph.prior_score_taped(u_var)?;
    prior.value().add(&lik_grad)
}

/// `log p(y, U | nu)` with a first-order hyperparameter path, recorded on
/// the caller's tape. Returns the scalar together with the hyperparameter
/// leaves to differentiate against.
pub fn log_joint<'t>(
    tape: &'t Tape,
    state: &DgpState,
    batch: &Minibatch,
    u: &InducingSample,
    s_samples: usize,
    rng: &mut NoviRng,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let out_dims = out_dims_for_batch(state, batch);
    let graph = ModelGraph::record(tape, state, &out_dims, GradMode { hyper: true })?;
    if graph.d_total() != u.flat.numel() {
        return Err(NoviError::dim("inducing sample length vs model layout"));
    }
    let u_var = tape.leaf(u.flat.reshape(&[1, u.flat.numel()])?);
    let eps = graph.draw_path_eps(rng, s_samples, 1, batch.batch_size());
    let lj = graph
        .log_joint_batch(batch, u_var, s_samples, &eps)?
        .sum()?;
    Ok((lj, graph.hyper_leaves()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_sgp_posterior, GaussianDist};
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn one_layer_state(rng: &mut NoviRng, m: usize, d_in: usize) -> DgpState {
        let specs = [LayerSpec {
            in_dim: d_in,
            out_dim: 1,
            num_inducing: m,
        }];
        DgpState::init(&specs, KernelKind::SquaredExponential, rng).unwrap()
    }

    fn two_layer_state(rng: &mut NoviRng, m: usize, d_in: usize, hidden: usize) -> DgpState {
        let specs = [
            LayerSpec {
                in_dim: d_in,
                out_dim: hidden,
                num_inducing: m,
            },
            LayerSpec {
                in_dim: hidden,
                out_dim: 1,
                num_inducing: m,
            },
        ];
        DgpState::init(&specs, KernelKind::SquaredExponential, rng).unwrap()
    }

    #[test]
    fn interpolation_at_inducing_inputs() {
        let mut rng = NoviRng::seed_from_u64(1);
        let state = one_layer_state(&mut rng, 6, 2);
        let u = rng.normal_tensor(&[6, 1]);
        let z = state.layers[0].inducing_inputs.clone();
        let (mean, var) = layer_conditional(&state, 0, &z, &u).unwrap();
        for i in 0..6 {
            assert_close(mean.at(i, 0), u.at(i, 0), 1e-5);
            assert!(var.data()[i] <= 1e-5, "var {} too large", var.data()[i]);
        }
    }

    #[test]
    fn zero_inducing_variables_give_zero_mean() {
        let mut rng = NoviRng::seed_from_u64(2);
        let state = one_layer_state(&mut rng, 5, 3);
        let x = rng.normal_tensor(&[4, 3]);
        let (mean, _) = layer_conditional(&state, 0, &x, &Tensor::zeros(&[5, 1])).unwrap();
        assert!(mean.data().iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn conditional_matches_joint_gaussian_oracle() {
        let mut rng = NoviRng::seed_from_u64(3);
        let state = one_layer_state(&mut rng, 4, 1);
        let x = rng.normal_tensor(&[2, 1]);
        let u = rng.normal_tensor(&[4, 1]);
        let (mean, var) = layer_conditional(&state, 0, &x, &u).unwrap();

        // Dense joint over (u, f): condition f on u by block algebra, with
        // the implementation's jitter on the uu block.
        let kernel = &state.layers[0].kernel;
        let z = &state.layers[0].inducing_inputs;
        let kzz = crate::kernel::kern(kernel, z, z).unwrap();
        let kfz = crate::kernel::kern(kernel, &x, z).unwrap();
        let kff = crate::kernel::kern(kernel, &x, &x).unwrap();
        let f = cholesky(&kzz, BASE_JITTER).unwrap();
        let w = f.solve(&kfz.transpose().unwrap()).unwrap();
        let mean_ref = w.transpose().unwrap().matmul(&u).unwrap();
        let cov_ref = kff
            .sub(&kfz.matmul(&w).unwrap())
            .unwrap();
        for i in 0..2 {
            assert_close(mean.at(i, 0), mean_ref.at(i, 0), 1e-8);
            assert_close(var.data()[i], cov_ref.at(i, i).max(0.0), 1e-8);
        }
    }

    #[test]
    fn conditional_variance_nonnegative() {
        let mut rng = NoviRng::seed_from_u64(4);
        for _ in 0..5 {
            let state = one_layer_state(&mut rng, 8, 2);
            let x = rng.normal_tensor(&[10, 2]);
            let u = rng.normal_tensor(&[8, 1]);
            let (_, var) = layer_conditional(&state, 0, &x, &u).unwrap();
            assert!(var.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn forward_sample_zero_eps_is_mean_propagation() {
        let mut rng = NoviRng::seed_from_u64(5);
        let state = two_layer_state(&mut rng, 5, 2, 3);
        let layout = Layout::new(&state.layer_dims(&[3, 1]));
        let parts = vec![rng.normal_tensor(&[5, 3]), rng.normal_tensor(&[5, 1])];
        let u = InducingSample::flatten(&parts, &layout).unwrap();
        let x = rng.normal_tensor(&[4, 2]);
        let eps = vec![Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 1])];
        let out = forward_sample(&state, &x, &u, &eps).unwrap();

        let (f1, _) = layer_conditional(&state, 0, &x, &parts[0]).unwrap();
        let (f2, _) = layer_conditional(&state, 1, &f1, &parts[1]).unwrap();
        for i in 0..4 {
            assert_close(out.at(i, 0), f2.at(i, 0), 1e-12);
        }
    }

    #[test]
    fn forward_sample_interpolates_u_at_inducing_inputs() {
        let mut rng = NoviRng::seed_from_u64(6);
        let state = one_layer_state(&mut rng, 5, 2);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[5, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let z = state.layers[0].inducing_inputs.clone();
        let out = forward_sample(&state, &z, &u, &[Tensor::zeros(&[5, 1])]).unwrap();
        for i in 0..5 {
            assert_close(out.at(i, 0), u_mat.at(i, 0), 1e-5);
        }
    }

    #[test]
    fn forward_sample_moments_match_conditional() {
        let mut rng = NoviRng::seed_from_u64(7);
        let state = one_layer_state(&mut rng, 5, 1);
        let x = rng.normal_tensor(&[3, 1]);
        let u_mat = rng.normal_tensor(&[5, 1]);
        let (mean, var) = layer_conditional(&state, 0, &x, &u_mat).unwrap();

        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[1], GradMode::default()).unwrap();
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u = InducingSample::flatten(&[u_mat], &layout).unwrap();
        let u_var = tape.constant(u.flat.reshape(&[1, 5]).unwrap());
        let s = 10_000;
        let eps = vec![rng.normal_tensor(&[s * 3, 1])];
        let out = graph.propagate(&x, u_var, s, &eps).unwrap();
        let vals = out.value();
        for b in 0..3 {
            let draws: Vec<f64> = (0..s).map(|si| vals.at(si * 3 + b, 0)).collect();
            let m_hat = draws.iter().sum::<f64>() / s as f64;
            let v_hat =
                draws.iter().map(|d| (d - m_hat) * (d - m_hat)).sum::<f64>() / (s - 1) as f64;
            let se_mean = (var.data()[b] / s as f64).sqrt();
            assert!(
                (m_hat - mean.at(b, 0)).abs() <= 4.0 * se_mean.max(1e-9),
                "mean point {b}: {m_hat} vs {}",
                mean.at(b, 0)
            );
            let se_var = var.data()[b] * (2.0 / (s as f64 - 1.0)).sqrt();
            assert!(
                (v_hat - var.data()[b]).abs() <= 4.0 * se_var.max(1e-9),
                "var point {b}: {v_hat} vs {}",
                var.data()[b]
            );
        }
    }

    #[test]
    fn log_prior_standard_normal_at_origin() {
        let mut rng = NoviRng::seed_from_u64(8);
        // Far-separated inducing inputs make K_ZZ essentially the identity.
        let mut state = one_layer_state(&mut rng, 4, 1);
        state.layers[0].inducing_inputs =
            Tensor::new(vec![4, 1], vec![0.0, 100.0, 200.0, 300.0]).unwrap();
        state.layers[0].kernel = KernelParams::isotropic(KernelKind::SquaredExponential, 1.0, 1.0, 1);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u = InducingSample::zeros(&layout);
        let lp = log_prior(&state, &u, &[1]).unwrap();
        assert_close(lp, -(4.0 / 2.0) * LN_2PI, 1e-6);
    }

    #[test]
    fn log_prior_gradient_equals_prior_score() {
        let mut rng = NoviRng::seed_from_u64(9);
        let state = two_layer_state(&mut rng, 4, 2, 3);
        let layout = Layout::new(&state.layer_dims(&[3, 1]));
        let u_flat = rng.normal_tensor(&[1, layout.total]);

        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[3, 1], GradMode::default()).unwrap();
        let u_var = tape.leaf(u_flat.clone());
        let lp = graph.log_prior_batch(u_var).unwrap().sum().unwrap();
        let grad = tape.backward(lp, &[u_var]).unwrap().remove(0);

        let u = InducingSample {
            flat: u_flat.reshape(&[layout.total]).unwrap(),
        };
        let score = prior_score(&state, &u, &[3, 1]).unwrap();
        for i in 0..layout.total {
            assert_close(grad.data()[i], score.data()[i], 1e-10);
        }
    }

    #[test]
    fn log_prior_scalar_case_hand_computed() {
        let mut rng = NoviRng::seed_from_u64(10);
        let mut state = one_layer_state(&mut rng, 1, 1);
        state.layers[0].kernel = KernelParams::isotropic(KernelKind::SquaredExponential, 1.9, 1.0, 1);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u = InducingSample {
            flat: Tensor::new(vec![1], vec![0.7]).unwrap(),
        };
        let lp = log_prior(&state, &u, &[1]).unwrap();
        let var = 1.9 + BASE_JITTER;
        let want = -0.5 * (0.7 * 0.7 / var + var.ln() + LN_2PI);
        assert_close(lp, want, 1e-12);
        let _ = layout;
    }

    #[test]
    fn prior_score_zero_at_origin() {
        let mut rng = NoviRng::seed_from_u64(11);
        let state = two_layer_state(&mut rng, 4, 2, 2);
        let layout = Layout::new(&state.layer_dims(&[2, 1]));
        let score = prior_score(&state, &InducingSample::zeros(&layout), &[2, 1]).unwrap();
        assert!(score.data().iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn prior_score_identity_covariance_is_negated_u() {
        let mut rng = NoviRng::seed_from_u64(12);
        let mut state = one_layer_state(&mut rng, 3, 1);
        state.layers[0].inducing_inputs =
            Tensor::new(vec![3, 1], vec![0.0, 100.0, 200.0]).unwrap();
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[3, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let score = prior_score(&state, &u, &[1]).unwrap();
        for i in 0..3 {
            assert_close(score.data()[i], -u_mat.at(i, 0), 1e-6);
        }
    }

    #[test]
    fn prior_score_2x2_closed_form_inverse() {
        let mut rng = NoviRng::seed_from_u64(13);
        let mut state = one_layer_state(&mut rng, 2, 1);
        // sigma_f^2 = 2, l = 1, |z0 - z1| = sqrt(2 ln 2) gives K = [[2,1],[1,2]].
        let gap = (2.0 * 2.0_f64.ln()).sqrt();
        state.layers[0].inducing_inputs = Tensor::new(vec![2, 1], vec![0.0, gap]).unwrap();
        state.layers[0].kernel = KernelParams::isotropic(KernelKind::SquaredExponential, 2.0, 1.0, 1);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[2, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let score = prior_score(&state, &u, &[1]).unwrap();
        // Closed-form 2x2 inverse of [[a, 1], [1, a]] with the jitter the
        // implementation adds on the diagonal.
        let a = 2.0 + BASE_JITTER;
        let det = a * a - 1.0;
        let want0 = -(a * u_mat.at(0, 0) - u_mat.at(1, 0)) / det;
        let want1 = -(-u_mat.at(0, 0) + a * u_mat.at(1, 0)) / det;
        assert_close(score.data()[0], want0, 1e-12);
        assert_close(score.data()[1], want1, 1e-12);
    }

    #[test]
    fn log_lik_zero_residual_closed_form() {
        let mut rng = NoviRng::seed_from_u64(14);
        let state = one_layer_state(&mut rng, 4, 1);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[4, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let x = rng.normal_tensor(&[3, 1]);
        let (mean, _) = layer_conditional(&state, 0, &x, &u_mat).unwrap();
        let batch = Minibatch {
            x: x.clone(),
            y: mean.clone(),
            full_size: 30, // N/B = 10
        };
        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[1], GradMode::default()).unwrap();
        let u_var = tape.constant(u.flat.reshape(&[1, 4]).unwrap());
        let eps = vec![Tensor::zeros(&[3, 1])];
        let ll = graph.log_lik_batch(&batch, u_var, 1, &eps).unwrap();
        let sigma2 = state.noise_variance();
        let want = 10.0 * (-(3.0 / 2.0) * (2.0 * PI * sigma2).ln());
        assert_close(ll.value().data()[0], want, 1e-9);
    }

    #[test]
    fn log_lik_s1_is_single_sample_likelihood() {
        let mut rng = NoviRng::seed_from_u64(15);
        let state = one_layer_state(&mut rng, 4, 1);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[4, 1]);
        let u = InducingSample::flatten(&[u_mat], &layout).unwrap();
        let x = rng.normal_tensor(&[5, 1]);
        let y = rng.normal_tensor(&[5, 1]);
        let batch = Minibatch {
            x: x.clone(),
            y: y.clone(),
            full_size: 5,
        };
        let eps_mat = rng.normal_tensor(&[5, 1]);
        let f_hat = forward_sample(&state, &x, &u, &[eps_mat.clone()]).unwrap();
        let sigma2 = state.noise_variance();
        let resid = f_hat.sub(&y).unwrap();
        let want: f64 = resid
            .data()
            .iter()
            .map(|r| -0.5 * (r * r / sigma2 + (2.0 * PI * sigma2).ln()))
            .sum();

        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[1], GradMode::default()).unwrap();
        let u_var = tape.constant(u.flat.reshape(&[1, 4]).unwrap());
        let ll = graph.log_lik_batch(&batch, u_var, 1, &[eps_mat]).unwrap();
        let got = ll.value().data()[0];
        assert!(
            ((got - want) / want.abs().max(1.0)).abs() < 1e-12,
            "{got} vs {want}"
        );
    }

    #[test]
    fn log_lik_mc_vs_conjugate_marginal() {
        let mut rng = NoviRng::seed_from_u64(16);
        let mut state = one_layer_state(&mut rng, 4, 1);
        state.log_noise_variance = 0.15_f64.ln();
        state.layers[0].inducing_inputs =
            Tensor::new(vec![4, 1], vec![-0.9, -0.3, 0.3, 0.9]).unwrap();
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[4, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let x = rng.uniform_tensor(&[6, 1], -1.0, 1.0);

        // Draw y from the model at this u so the integrand is well scaled.
        let (mean, var) = layer_conditional(&state, 0, &x, &u_mat).unwrap();
        let sigma2 = state.noise_variance();
        let mut ydata = Vec::with_capacity(6);
        for i in 0..6 {
            ydata.push(mean.at(i, 0) + (var.data()[i] + sigma2).sqrt() * rng.normal());
        }
        let y = Tensor::new(vec![6, 1], ydata).unwrap();
        let batch = Minibatch::full(&x, &y);

        // Exact log p(y | u): y_i | u ~ N(mean_i, var_i + sigma^2), independent
        // across points under the diagonal conditional the sampler uses.
        let exact: f64 = (0..6)
            .map(|i| {
                let v = var.data()[i] + sigma2;
                let r = y.at(i, 0) - mean.at(i, 0);
                -0.5 * (r * r / v + v.ln() + LN_2PI)
            })
            .sum();

        let reps = 24;
        let mut estimates = Vec::with_capacity(reps);
        for _ in 0..reps {
            let tape = Tape::new();
            let ll = log_lik_mc(&tape, &state, &batch, &u, 100, &mut rng).unwrap();
            estimates.push(ll.value().data()[0]);
        }
        let mean_est = estimates.iter().sum::<f64>() / reps as f64;
        let sd = (estimates
            .iter()
            .map(|e| (e - mean_est) * (e - mean_est))
            .sum::<f64>()
            / (reps as f64 - 1.0))
            .sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean_est - exact).abs() <= 3.0 * se.max(0.02),
            "mc {mean_est} vs exact {exact} (se {se})"
        );
    }

    #[test]
    fn posterior_score_flat_likelihood_reduces_to_prior_score() {
        let mut rng = NoviRng::seed_from_u64(17);
        let mut state = one_layer_state(&mut rng, 4, 1);
        state.log_noise_variance = 1e12_f64.ln();
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[4, 1]);
        let u = InducingSample::flatten(&[u_mat], &layout).unwrap();
        let x = rng.normal_tensor(&[5, 1]);
        let y = rng.normal_tensor(&[5, 1]);
        let batch = Minibatch::full(&x, &y);
        let score = posterior_score(&state, &batch, &u, 4, &mut rng).unwrap();
        let pscore = prior_score(&state, &u, &[1]).unwrap();
        for i in 0..4 {
            assert_close(score.data()[i], pscore.data()[i], 1e-6);
        }
    }

    #[test]
    fn posterior_score_matches_crn_finite_differences() {
        let mut rng = NoviRng::seed_from_u64(18);
        let mut state = one_layer_state(&mut rng, 4, 1);
        state.log_noise_variance = 0.2_f64.ln();
        let x = rng.uniform_tensor(&[6, 1], -1.0, 1.0);
        let y = rng.normal_tensor(&[6, 1]);
        let batch = Minibatch::full(&x, &y);
        let u_flat = rng.normal_tensor(&[1, 4]);
        let s = 3;
        let eps = vec![rng.normal_tensor(&[s * 6, 1])];

        // Analytic score at u with these fixed draws.
        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[1], GradMode::default()).unwrap();
        let u_var = tape.leaf(u_flat.clone());
        let obj = graph
            .log_prior_batch(u_var)
            .unwrap()
            .add(graph.log_lik_batch(&batch, u_var, s, &eps).unwrap())
            .unwrap()
            .sum()
            .unwrap();
        let score = tape.backward(obj, &[u_var]).unwrap().remove(0);

        // Same quantity by common-random-number central differences.
        let eval = |u_vals: &[f64]| -> f64 {
            let tape = Tape::new();
            let graph = ModelGraph::record(&tape, &state, &[1], GradMode::default()).unwrap();
            let u_var = tape.constant(Tensor::new(vec![1, 4], u_vals.to_vec()).unwrap());
            graph
                .log_prior_batch(u_var)
                .unwrap()
                .add(graph.log_lik_batch(&batch, u_var, s, &eps).unwrap())
                .unwrap()
                .value()
                .data()[0]
        };
        let mut vals = u_flat.data().to_vec();
        for i in 0..4 {
            let h = 1e-5 * vals[i].abs().max(1.0);
            vals[i] += h;
            let fp = eval(&vals);
            vals[i] -= 2.0 * h;
            let fm = eval(&vals);
            vals[i] += h;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (score.data()[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel <= 1e-4, "coord {i}: {} vs {fd} (rel {rel})", score.data()[i]);
        }
    }

    #[test]
    fn posterior_score_unbiased_on_conjugate_case() {
        let mut rng = NoviRng::seed_from_u64(19);
        let mut state = one_layer_state(&mut rng, 6, 1);
        state.log_noise_variance = 0.2_f64.ln();
        // Inducing points covering the inputs keep the conditional variance
        // tiny, so the dense and diagonal conditionals agree.
        state.layers[0].inducing_inputs =
            Tensor::new(vec![6, 1], vec![-1.1, -0.66, -0.22, 0.22, 0.66, 1.1]).unwrap();
        state.layers[0].kernel =
            KernelParams::isotropic(KernelKind::SquaredExponential, 1.0, 0.9, 1);
        let x = rng.uniform_tensor(&[8, 1], -1.0, 1.0);
        let kernel = state.layers[0].kernel.clone();
        let z = state.layers[0].inducing_inputs.clone();
        let layout = Layout::new(&state.layer_dims(&[1]));
        // Draw y from the model at a prior-scale u_true.
        let u_true = rng.normal_tensor(&[6, 1]).scale(0.8);
        let (gen_mean, gen_var) = layer_conditional(&state, 0, &x, &u_true).unwrap();
        let mut ydata = Vec::with_capacity(8);
        for i in 0..8 {
            ydata.push(
                gen_mean.at(i, 0)
                    + (gen_var.data()[i] + state.noise_variance()).sqrt() * rng.normal(),
            );
        }
        let y = Tensor::new(vec![8, 1], ydata).unwrap();
        let batch = Minibatch::full(&x, &y);
        let u_mat = rng.normal_tensor(&[6, 1]).scale(0.7);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();

        let post = exact_sgp_posterior(
            &y.reshape(&[8]).unwrap(),
            &x,
            &z,
            &kernel,
            state.noise_variance(),
        )
        .unwrap();
        let exact = post.score(&u.flat).unwrap();

        let runs = 50;
        let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(runs); 6];
        for _ in 0..runs {
            let score = posterior_score(&state, &batch, &u, 200, &mut rng).unwrap();
            for i in 0..6 {
                per_coord[i].push(score.data()[i]);
            }
        }
        for i in 0..6 {
            let m = per_coord[i].iter().sum::<f64>() / runs as f64;
            let sd = (per_coord[i]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / (runs as f64 - 1.0))
                .sqrt();
            let se = sd / (runs as f64).sqrt();
            // The exact score uses the dense conditional; the sampler's
            // diagonal conditional contributes a small systematic offset on
            // top of the Monte Carlo noise, absorbed in the floor.
            assert!(
                (m - exact.data()[i]).abs() <= 4.0 * se.max(0.02),
                "coord {i}: mc mean {m} vs exact {} (se {se})",
                exact.data()[i]
            );
        }
        let _ = GaussianDist {
            mean: post.mean.clone(),
            cov: post.cov.clone(),
        };
    }

    #[test]
    fn log_joint_is_prior_plus_likelihood() {
        let mut rng = NoviRng::seed_from_u64(20);
        let state = two_layer_state(&mut rng, 4, 2, 3);
        let layout = Layout::new(&state.layer_dims(&[3, 1]));
        let u_flat = rng.normal_tensor(&[1, layout.total]);
        let x = rng.normal_tensor(&[5, 2]);
        let y = rng.normal_tensor(&[5, 1]);
        let batch = Minibatch::full(&x, &y);
        let eps = vec![rng.normal_tensor(&[2 * 5, 3]), rng.normal_tensor(&[2 * 5, 1])];

        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[3, 1], GradMode::default()).unwrap();
        let u_var = tape.constant(u_flat.clone());
        let joint = graph.log_joint_batch(&batch, u_var, 2, &eps).unwrap();
        let prior = graph.log_prior_batch(u_var).unwrap();
        let lik = graph.log_lik_batch(&batch, u_var, 2, &eps).unwrap();
        assert_close(
            joint.value().data()[0],
            prior.value().data()[0] + lik.value().data()[0],
            1e-12,
        );
    }

    #[test]
    fn log_joint_hyper_gradients_match_crn_finite_differences() {
        let mut rng = NoviRng::seed_from_u64(21);
        let mut state = two_layer_state(&mut rng, 3, 2, 2);
        state.layers[0].kernel.kind = KernelKind::RationalQuadratic;
        state.layers[1].kernel.kind = KernelKind::RationalQuadratic;
        state.log_noise_variance = 0.25_f64.ln();
        let x = rng.normal_tensor(&[4, 2]);
        let y = rng.normal_tensor(&[4, 1]);
        let batch = Minibatch::full(&x, &y);
        let layout = Layout::new(&state.layer_dims(&[2, 1]));
        let u_flat = rng.normal_tensor(&[1, layout.total]);
        let s = 2;
        let eps = vec![rng.normal_tensor(&[s * 4, 2]), rng.normal_tensor(&[s * 4, 1])];

        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, &state, &[2, 1], GradMode { hyper: true }).unwrap();
        let u_var = tape.constant(u_flat.clone());
        let lj = graph
            .log_joint_batch(&batch, u_var, s, &eps)
            .unwrap()
            .sum()
            .unwrap();
        let leaves = graph.hyper_leaves();
        let grads = tape.backward(lj, &leaves).unwrap();

        // True value at perturbed hyperparameters, same eps draws.
        let eval = |st: &DgpState| -> f64 {
            let tape = Tape::new();
            let graph = ModelGraph::record(&tape, st, &[2, 1], GradMode::default()).unwrap();
            let u_var = tape.constant(u_flat.clone());
            graph
                .log_joint_batch(&batch, u_var, s, &eps)
                .unwrap()
                .value()
                .data()[0]
        };
        let h = 1e-5;
        let mut check = |got: f64, fp: f64, fm: f64, what: &str| {
            let fd = (fp - fm) / (2.0 * h);
            let rel = (got - fd).abs() / fd.abs().max(1e-3);
            assert!(rel <= 1e-4, "{what}: analytic {got} vs fd {fd} (rel {rel})");
        };

        // A few inducing-input coordinates per layer.
        for l in 0..2 {
            for idx in [0usize, 3] {
                let mut sp = state.clone();
                let mut zp = sp.layers[l].inducing_inputs.clone();
                zp.data_mut()[idx] += h;
                sp.layers[l].inducing_inputs = zp.clone();
                let fp = eval(&sp);
                zp.data_mut()[idx] -= 2.0 * h;
                sp.layers[l].inducing_inputs = zp;
                let fm = eval(&sp);
                check(grads[l * 4].data()[idx], fp, fm, &format!("z{l}[{idx}]"));
            }
            // log variance
            let mut sp = state.clone();
            sp.layers[l].kernel.log_variance += h;
            let fp = eval(&sp);
            sp.layers[l].kernel.log_variance -= 2.0 * h;
            let fm = eval(&sp);
            check(grads[l * 4 + 1].item(), fp, fm, &format!("log_variance{l}"));
            // lengthscales
            for idx in 0..2 {
                let mut sp = state.clone();
                sp.layers[l].kernel.log_lengthscales[idx] += h;
                let fp = eval(&sp);
                sp.layers[l].kernel.log_lengthscales[idx] -= 2.0 * h;
                let fm = eval(&sp);
                check(
                    grads[l * 4 + 2].data()[idx],
                    fp,
                    fm,
                    &format!("log_lengthscales{l}[{idx}]"),
                );
            }
            // RQ shape
            let mut sp = state.clone();
            sp.layers[l].kernel.log_alpha += h;
            let fp = eval(&sp);
            sp.layers[l].kernel.log_alpha -= 2.0 * h;
            let fm = eval(&sp);
            check(grads[l * 4 + 3].item(), fp, fm, &format!("log_alpha{l}"));
        }
        // Noise variance
        let mut sp = state.clone();
        sp.log_noise_variance += h;
        let fp = eval(&sp);
        sp.log_noise_variance -= 2.0 * h;
        let fm = eval(&sp);
        check(grads[8].item(), fp, fm, "log_noise_variance");
    }

    #[test]
    fn noise_gradient_positive_under_huge_residuals() {
        let mut rng = NoviRng::seed_from_u64(22);
        let state = one_layer_state(&mut rng, 4, 1);
        let x = rng.normal_tensor(&[5, 1]);
        let y = Tensor::filled(&[5, 1], 50.0); // residuals far beyond sigma
        let batch = Minibatch::full(&x, &y);
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u = InducingSample::zeros(&layout);

        let tape = Tape::new();
        let (lj, leaves) = log_joint(&tape, &state, &batch, &u, 2, &mut rng).unwrap();
        let grads = tape.backward(lj, &leaves).unwrap();
        let noise_grad = grads.last().unwrap().item();
        assert!(noise_grad > 0.0, "d log_joint / d log sigma2 = {noise_grad}");
    }

    #[test]
    fn unflatten_blocks_are_dimension_major() {
        let specs = [
            LayerSpec { in_dim: 1, out_dim: 2, num_inducing: 3 },
            LayerSpec { in_dim: 2, out_dim: 1, num_inducing: 2 },
        ];
        let layout = Layout::new(&specs);
        assert_eq!(layout.total, 8);
        let flat: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let u = InducingSample {
            flat: Tensor::new(vec![8], flat).unwrap(),
        };
        let parts = u.unflatten(&layout).unwrap();
        // Layer 1 block is [U_{1,1}; U_{1,2}] = [0,1,2 | 3,4,5] column-wise.
        assert_eq!(parts[0].shape(), &[3, 2]);
        assert_eq!(parts[0].at(0, 0), 0.0);
        assert_eq!(parts[0].at(1, 0), 1.0);
        assert_eq!(parts[0].at(0, 1), 3.0);
        assert_eq!(parts[1].shape(), &[2, 1]);
        assert_eq!(parts[1].at(0, 0), 6.0);
        let back = InducingSample::flatten(&parts, &layout).unwrap();
        assert_eq!(back.flat.data(), u.flat.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flatten_unflatten_roundtrip(
            m1 in 1usize..5, d1 in 1usize..4, m2 in 1usize..5, d2 in 1usize..4,
            seed in 0u64..1000
        ) {
            let specs = [
                LayerSpec { in_dim: 1, out_dim: d1, num_inducing: m1 },
                LayerSpec { in_dim: d1, out_dim: d2, num_inducing: m2 },
            ];
            let layout = Layout::new(&specs);
            let mut rng = NoviRng::seed_from_u64(seed);
            let flat = rng.normal_tensor(&[layout.total]);
            let u = InducingSample { flat: flat.clone() };
            let parts = u.unflatten(&layout).unwrap();
            let back = InducingSample::flatten(&parts, &layout).unwrap();
            prop_assert_eq!(back.flat.data(), flat.data());
        }
    }
}
