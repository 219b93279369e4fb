//! The regularized Stein discrepancy estimator and the adversarial
//! objectives built on it: score-weighted test-function term, Hutchinson
//! divergence term, and the L2 penalty.

use crate::autodiff::{jvp, Tape, Var};
use crate::dgp::{DgpState, GradMode, Minibatch, ModelGraph};
use crate::error::{NoviError, Result};
use crate::nets::{discriminator_forward, generator_forward, GeneratorSpec, MlpParams, MlpVars};
use crate::rng::NoviRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDist {
    Gaussian,
    Rademacher,
}

/// Whether the generator objective differentiates through the score term or
/// treats the score values as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Attached,
    Detached,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RsdConfig {
    pub lambda: f64,
    pub num_probes: usize,
    pub probe_dist: ProbeDist,
    pub score_mode: ScoreMode,
}

impl Default for RsdConfig {
    fn default() -> Self {
        RsdConfig {
            lambda: 10.0,
            num_probes: 1,
            probe_dist: ProbeDist::Gaussian,
            score_mode: ScoreMode::Attached,
        }
    }
}

impl RsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 {
            return Err(NoviError::input(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.num_probes == 0 {
            return Err(NoviError::input("num_probes must be >= 1"));
        }
        Ok(())
    }
}

/// Fresh `(K, P, D)` probe block for the Hutchinson estimator.
pub fn draw_probes(
    rng: &mut NoviRng,
    k: usize,
    num_probes: usize,
    d: usize,
    dist: ProbeDist,
) -> Tensor {
    match dist {
        ProbeDist::Gaussian => rng.normal_tensor(&[k, num_probes, d]),
        ProbeDist::Rademacher => {
            let n = k * num_probes * d;
            let data: Vec<f64> = (0..n)
                .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
                .collect();
            Tensor::new(vec![k, num_probes, d], data).expect("probe shape")
        }
    }
}

fn probe_slice(probes: &Tensor, p: usize) -> Result<Tensor> {
    let (k, np, d) = match probes.shape() {
        [k, np, d] => (*k, *np, *d),
        s => return Err(NoviError::dim(format!("probes shape {s:?}, want (k, p, d)"))),
    };
    let mut data = Vec::with_capacity(k * d);
    for ki in 0..k {
        let start = (ki * np + p) * d;
        data.extend_from_slice(&probes.data()[start..start + d]);
    }
    Tensor::new(vec![k, d], data)
}

/// Per-sample Hutchinson divergence estimate: the probe average of
/// `w^T (d phi / d u) w`, one JVP and an inner product per probe. `phi` must
/// be the discriminator output already recorded against `u`.
pub fn hutchinson_div_taped<'t>(
    tape: &'t Tape,
    phi: Var<'t>,
    u: Var<'t>,
    probes: &Tensor,
) -> Result<Var<'t>> {
    let (k, np, d) = match probes.shape() {
        [k, np, d] => (*k, *np, *d),
        s => return Err(NoviError::dim(format!("probes shape {s:?}"))),
    };
    if u.shape() != [k, d] {
        return Err(NoviError::dim(format!(
            "probes ({k}, {np}, {d}) vs samples {:?}",
            u.shape()
        )));
    }
    let mut acc: Option<Var<'t>> = None;
    for p in 0..np {
        let omega = probe_slice(probes, p)?;
        let jw = jvp(tape, phi, u, &omega)?;
        let term = jw.mul(tape.constant(omega))?.row_sums()?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one probe").scale(1.0 / np as f64))
}

/// Plain-tensor Hutchinson divergence of a discriminator at a sample batch.
/// Probes are evaluated one at a time with the scratch nodes discarded, so
/// memory stays bounded for large probe counts.
pub fn hutchinson_div(disc: &MlpParams, u: &Tensor, probes: &Tensor) -> Result<Tensor> {
    let (k, np, d) = match probes.shape() {
        [k, np, d] => (*k, *np, *d),
        s => return Err(NoviError::dim(format!("probes shape {s:?}"))),
    };
    if u.shape() != [k, d] {
        return Err(NoviError::dim(format!(
            "probes ({k}, {np}, {d}) vs samples {:?}",
            u.shape()
        )));
    }
    let tape = Tape::new();
    let vars = MlpVars::record(&tape, disc, false);
    let u_var = tape.leaf(u.clone());
    let phi = discriminator_forward(&vars, u_var)?;
    let mark = tape.len();
    let mut acc = vec![0.0; k];
    for p in 0..np {
        let omega = probe_slice(probes, p)?;
        let jw = jvp(&tape, phi, u_var, &omega)?;
        let term = jw.value().mul(&omega)?.row_sums()?;
        for (a, t) in acc.iter_mut().zip(term.data()) {
            *a += t;
        }
        tape.truncate(mark);
    }
    Tensor::new(vec![k], acc.iter().map(|a| a / np as f64).collect())
}

/// Score rows entering the first RSD term: either fixed values or a taped
/// function of the samples (the second-order path).
pub enum ScoreTerm<'t> {
    Detached(Tensor),
    Attached(Var<'t>),
}

/// Monte Carlo regularized Stein discrepancy over a row-aligned batch:
/// `(1/K) sum_k [score_k . phi(u_k) + div_k] - (lambda/K) sum_k |phi(u_k)|^2`.
pub fn rsd_core<'t>(
    tape: &'t Tape,
    cfg: &RsdConfig,
    scores: ScoreTerm<'t>,
    u: Var<'t>,
    disc_vars: &MlpVars<'t>,
    probes: &Tensor,
) -> Result<Var<'t>> {
    cfg.validate()?;
    let (k, d) = match u.shape()[..] {
        [k, d] => (k, d),
        ref s => return Err(NoviError::dim(format!("sample batch shape {s:?}"))),
    };
    let score_var = match scores {
        ScoreTerm::Detached(t) => {
            if t.shape() != [k, d] {
                return Err(NoviError::dim(format!(
                    "scores shape {:?} vs samples ({k}, {d})",
                    t.shape()
                )));
            }
            tape.constant(t)
        }
        ScoreTerm::Attached(v) => {
            if v.shape() != [k, d] {
                return Err(NoviError::dim(format!(
                    "scores shape {:?} vs samples ({k}, {d})",
                    v.shape()
                )));
            }
            v
        }
    };
    let phi = discriminator_forward(disc_vars, u)?;
    let term1 = score_var.mul(phi)?.sum()?;
    let div = hutchinson_div_taped(tape, phi, u, probes)?.sum()?;
    let reg = phi.mul(phi)?.sum()?.scale(cfg.lambda);
    Ok(term1.add(div)?.sub(reg)?.scale(1.0 / k as f64))
}

/// RSD estimate with externally supplied scores and fresh probes.
pub fn rsd_estimate<'t>(
    tape: &'t Tape,
    cfg: &RsdConfig,
    scores: &Tensor,
    u: &Tensor,
    disc: &MlpParams,
    rng: &mut NoviRng,
) -> Result<Var<'t>> {
    let (k, d) = match u.shape() {
        [k, d] => (*k, *d),
        s => return Err(NoviError::dim(format!("sample batch shape {s:?}"))),
    };
    let probes = draw_probes(rng, k, cfg.num_probes, d, cfg.probe_dist);
    let disc_vars = MlpVars::record(tape, disc, false);
    let u_var = tape.leaf(u.clone());
    rsd_core(
        tape,
        cfg,
        ScoreTerm::Detached(scores.clone()),
        u_var,
        &disc_vars,
        &probes,
    )
}

/// Discriminator loss: the negated RSD (minimizing it maximizes the
/// discrepancy). Scores are constants with respect to the discriminator.
/// Returns the loss together with the discriminator leaves.
pub fn discriminator_objective<'t>(
    tape: &'t Tape,
    cfg: &RsdConfig,
    scores: &Tensor,
    u: &Tensor,
    disc: &MlpParams,
    probes: &Tensor,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let disc_vars = MlpVars::record(tape, disc, true);
    let u_var = tape.leaf(u.clone());
    let rsd = rsd_core(
        tape,
        cfg,
        ScoreTerm::Detached(scores.clone()),
        u_var,
        &disc_vars,
        probes,
    )?;
    Ok((rsd.scale(-1.0), disc_vars.leaves()))
}

/// Everything the generator objective needs from the model side.
pub struct ModelContext<'a> {
    pub state: &'a DgpState,
    pub batch: &'a Minibatch,
    pub s_samples: usize,
    pub out_dims: &'a [usize],
}

/// Generator loss: the RSD at `u = g_theta(eps)` with the discriminator
/// frozen. In attached mode the score rows are a taped function of `u`
/// (through both the prior term and the reparameterized data term), so the
/// returned gradient includes the second-order path; in detached mode they
/// enter as constants. Returns the RSD var, the generator leaves, and the
/// sampled `u` values (reused by the hyperparameter step).
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<'t>(
    tape: &'t Tape,
    cfg: &RsdConfig,
    spec: &GeneratorSpec,
    gen: &MlpParams,
    disc: &MlpParams,
    ctx: &ModelContext<'_>,
    gen_eps: &Tensor,
    lik_eps: &[Tensor],
    probes: &Tensor,
) -> Result<(Var<'t>, Vec<Var<'t>>, Tensor)> {
    let gen_vars = MlpVars::record(tape, gen, true);
    let disc_vars = MlpVars::record(tape, disc, false);
    let u = generator_forward(spec, &gen_vars, tape.constant(gen_eps.clone()))?;
    let graph = ModelGraph::record(tape, ctx.state, ctx.out_dims, GradMode::default())?;
    let scores = match cfg.score_mode {
        ScoreMode::Attached => {
            let lik = graph
                .log_lik_batch(ctx.batch, u, ctx.s_samples, lik_eps)?
                .sum()?;
            let lik_grad = tape.grad_vars(lik, &[u])?[0];
            let prior = graph.prior_score_taped(u)?;
            ScoreTerm::Attached(prior.add(lik_grad)?)
        }
        ScoreMode::Detached => {
            let scratch = Tape::new();
            let sgraph = ModelGraph::record(&scratch, ctx.state, ctx.out_dims, GradMode::default())?;
            let u_leaf = scratch.leaf((*u.value()).clone());
            let lik = sgraph
                .log_lik_batch(ctx.batch, u_leaf, ctx.s_samples, lik_eps)?
                .sum()?;
            let lik_grad = scratch.backward(lik, &[u_leaf])?.remove(0);
            let prior = sgraph.prior_score_taped(u_leaf)?;
            ScoreTerm::Detached(prior.value().add(&lik_grad)?)
        }
    };
    let u_value = (*u.value()).clone();
    let rsd = rsd_core(tape, cfg, scores, u, &disc_vars, probes)?;
    Ok((rsd, gen_vars.leaves(), u_value))
}
