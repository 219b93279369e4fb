//! The MLP generator (noise in, flat inducing samples out) and discriminator
//! (inducing samples in, a vector field of the same width out).

use crate::autodiff::{Tape, Var};
use crate::error::{NoviError, Result};
use crate::rng::NoviRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// Piecewise-linear with one learnable negative-side slope per layer.
    Prelu,
    Sigmoid,
}

/// Weights, biases, and activation of one MLP. The final layer is affine.
/// `slopes` holds the per-layer learnable slopes and is only consulted for
/// [`Activation::Prelu`].
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activation: Activation,
    pub slopes: Vec<f64>,
}

/// Generator shape: noise width, output width, and the smooth output bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub out_dim: usize,
    /// Applied as `c * tanh(x / c)`; `None` leaves the output unconstrained.
    pub output_clamp: Option<f64>,
}

/// Weights are Glorot-uniform in `[-sqrt(6/(fan_in+fan_out)), +...]`,
/// biases zero, slopes 0.25.
pub fn init_mlp(widths: &[usize], activation: Activation, rng: &mut NoviRng) -> Result<MlpParams> {
    if widths.len() < 2 {
        return Err(NoviError::input("mlp needs at least input and output widths"));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(NoviError::input("mlp widths must be positive"));
    }
    let mut weights = Vec::with_capacity(widths.len() - 1);
    let mut biases = Vec::with_capacity(widths.len() - 1);
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(rng.uniform_tensor(&[fan_out, fan_in], -bound, bound));
        biases.push(Tensor::zeros(&[fan_out]));
    }
    let n_hidden = widths.len().saturating_sub(2);
    Ok(MlpParams {
        widths: widths.to_vec(),
        weights,
        biases,
        activation,
        slopes: vec![0.25; n_hidden],
    })
}

impl MlpParams {
    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn uses_slopes(&self) -> bool {
        self.activation == Activation::Prelu
    }

    /// Named parameter view in a fixed order (optimizer / checkpoint keys).
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.w{i}"), w.clone()));
            out.push((format!("{prefix}.b{i}"), b.clone()));
        }
        if self.uses_slopes() {
            for (i, s) in self.slopes.iter().enumerate() {
                out.push((format!("{prefix}.slope{i}"), Tensor::scalar(*s)));
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let n_layers = self.weights.len();
        let want = 2 * n_layers + if self.uses_slopes() { self.slopes.len() } else { 0 };
        if params.len() != want {
            return Err(NoviError::input(format!(
                "expected {want} tensors, got {}",
                params.len()
            )));
        }
        for i in 0..n_layers {
            self.weights[i] = params[2 * i].clone();
            self.biases[i] = params[2 * i + 1].clone();
        }
        if self.uses_slopes() {
            for i in 0..self.slopes.len() {
                self.slopes[i] = params[2 * n_layers + i].item();
            }
        }
        Ok(())
    }
}

/// Taped handles on one MLP's parameters.
pub struct MlpVars<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
    pub slopes: Vec<Var<'t>>,
    activation: Activation,
}

impl<'t> MlpVars<'t> {
    pub fn record(tape: &'t Tape, params: &MlpParams, trainable: bool) -> Self {
        let mk = |t: Tensor| if trainable { tape.leaf(t) } else { tape.constant(t) };
        MlpVars {
            weights: params.weights.iter().cloned().map(mk).collect(),
            biases: params.biases.iter().cloned().map(mk).collect(),
            slopes: if params.uses_slopes() {
                params.slopes.iter().map(|s| mk(Tensor::scalar(*s))).collect()
            } else {
                Vec::new()
            },
            activation: params.activation,
        }
    }

    /// Leaves in `named_params` order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out.extend(self.slopes.iter().copied());
        out
    }

    /// Forward pass on a `(rows, in_dim)` batch; activations on hidden
    /// layers only.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let rows = h.shape()[0];
            h = h.matmul(w.transpose()?)?.add(b.broadcast_row(rows)?)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Sigmoid => h.sigmoid(),
                    Activation::Prelu => {
                        let pos = h.relu();
                        let neg = h.sub(pos)?;
                        let slope = self.slopes[i].broadcast_fill(&h.shape())?;
                        pos.add(neg.mul(slope)?)?
                    }
                };
            }
        }
        Ok(h)
    }
}

/// Generator pass: MLP on the noise batch, then the smooth clamp
/// `c * tanh(x / c)` when a bound is configured.
pub fn generator_forward<'t>(
    spec: &GeneratorSpec,
    vars: &MlpVars<'t>,
    eps: Var<'t>,
) -> Result<Var<'t>> {
    let shape = eps.shape();
    if shape.len() != 2 || shape[1] != spec.noise_dim {
        return Err(NoviError::dim(format!(
            "generator noise shape {shape:?} vs noise_dim {}",
            spec.noise_dim
        )));
    }
    let out = vars.forward(eps)?;
    if out.shape()[1] != spec.out_dim {
        return Err(NoviError::dim(format!(
            "generator output width {} vs spec {}",
            out.shape()[1],
            spec.out_dim
        )));
    }
    match spec.output_clamp {
        Some(c) => Ok(out.scale(1.0 / c).tanh().scale(c)),
        None => Ok(out),
    }
}

/// Discriminator pass: plain MLP, unconstrained output of the input width.
pub fn discriminator_forward<'t>(vars: &MlpVars<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let shape = u.shape();
    if shape.len() != 2 {
        return Err(NoviError::dim("discriminator input must be 2-d"));
    }
    vars.forward(u)
}

/// Plain-tensor generator evaluation (no tape).
pub fn generator_eval(spec: &GeneratorSpec, params: &MlpParams, eps: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = MlpVars::record(&tape, params, false);
    let out = generator_forward(spec, &vars, tape.constant(eps.clone()))?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::jvp;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn degenerate_net_outputs_bias() {
        let mut rng = NoviRng::seed_from_u64(1);
        let mut params = init_mlp(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        for w in &mut params.weights {
            *w = Tensor::zeros(&w.shape().to_vec());
        }
        params.biases[1] = Tensor::new(vec![2], vec![0.4, -0.7]).unwrap();
        let spec = GeneratorSpec {
            noise_dim: 3,
            out_dim: 2,
            output_clamp: Some(10.0),
        };
        let eps = rng.normal_tensor(&[5, 3]);
        let out = generator_eval(&spec, &params, &eps).unwrap();
        for i in 0..5 {
            assert_close(out.at(i, 0), 10.0 * (0.04_f64).tanh(), 1e-12);
            assert_close(out.at(i, 1), 10.0 * (-0.07_f64).tanh(), 1e-12);
        }
    }

    #[test]
    fn identity_affine_layer_passes_input_through() {
        let mut rng = NoviRng::seed_from_u64(2);
        let mut params = init_mlp(&[3, 3], Activation::Tanh, &mut rng).unwrap();
        params.weights[0] = Tensor::eye(3);
        let spec = GeneratorSpec {
            noise_dim: 3,
            out_dim: 3,
            output_clamp: None,
        };
        let eps = rng.normal_tensor(&[4, 3]);
        let out = generator_eval(&spec, &params, &eps).unwrap();
        assert_eq!(out.data(), eps.data());
    }

    #[test]
    fn clamp_saturates_large_values() {
        let mut rng = NoviRng::seed_from_u64(3);
        let mut params = init_mlp(&[1, 1], Activation::Tanh, &mut rng).unwrap();
        params.weights[0] = Tensor::new(vec![1, 1], vec![1e6]).unwrap();
        let spec = GeneratorSpec {
            noise_dim: 1,
            out_dim: 1,
            output_clamp: Some(5.0),
        };
        let out = generator_eval(&spec, &params, &Tensor::ones(&[1, 1])).unwrap();
        assert_close(out.item(), 5.0, 1e-6);
        assert!(out.item() <= 5.0);
    }

    #[test]
    fn clamped_outputs_stay_strictly_inside_bound() {
        let mut rng = NoviRng::seed_from_u64(4);
        let params = init_mlp(&[4, 16, 6], Activation::Prelu, &mut rng).unwrap();
        let spec = GeneratorSpec {
            noise_dim: 4,
            out_dim: 6,
            output_clamp: Some(10.0),
        };
        let eps = rng.normal_tensor(&[64, 4]).scale(30.0);
        let out = generator_eval(&spec, &params, &eps).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn zero_discriminator_gives_zero_field() {
        let mut rng = NoviRng::seed_from_u64(5);
        let mut params = init_mlp(&[3, 5, 3], Activation::Sigmoid, &mut rng).unwrap();
        let n = params.weights.len();
        params.weights[n - 1] = Tensor::zeros(&[3, 5]);
        let tape = Tape::new();
        let vars = MlpVars::record(&tape, &params, false);
        let u = tape.constant(rng.normal_tensor(&[4, 3]));
        let out = discriminator_forward(&vars, u).unwrap();
        assert!(out.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_discriminator_matches_matmul() {
        let mut rng = NoviRng::seed_from_u64(6);
        let params = init_mlp(&[4, 4], Activation::Tanh, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = MlpVars::record(&tape, &params, false);
        let u0 = rng.normal_tensor(&[3, 4]);
        let out = discriminator_forward(&vars, tape.constant(u0.clone())).unwrap();
        let want = u0.matmul(&params.weights[0].transpose().unwrap()).unwrap();
        for (a, b) in out.value().data().iter().zip(want.data()) {
            assert_close(*a, *b, 1e-13);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = NoviRng::seed_from_u64(7);
        for activation in [Activation::Tanh, Activation::Prelu, Activation::Sigmoid] {
            let params = init_mlp(&[3, 6, 5, 2], activation, &mut rng).unwrap();
            let u0 = rng.normal_tensor(&[4, 3]);
            let eval = |p: &MlpParams| -> f64 {
                let tape = Tape::new();
                let vars = MlpVars::record(&tape, p, false);
                let out = vars.forward(tape.constant(u0.clone())).unwrap();
                out.tanh().sum().unwrap().item()
            };
            let tape = Tape::new();
            let vars = MlpVars::record(&tape, &params, true);
            let out = vars
                .forward(tape.constant(u0.clone()))
                .unwrap()
                .tanh()
                .sum()
                .unwrap();
            let leaves = vars.leaves();
            let grads = tape.backward(out, &leaves).unwrap();

            let named = params.named_params("net");
            let h = 1e-6;
            for (pi, (name, tensor)) in named.iter().enumerate() {
                for ci in 0..tensor.numel().min(6) {
                    let mut plus = params.clone();
                    let mut tensors: Vec<Tensor> =
                        named.iter().map(|(_, t)| t.clone()).collect();
                    tensors[pi].data_mut()[ci] += h;
                    plus.set_params(&tensors).unwrap();
                    let fp = eval(&plus);
                    tensors[pi].data_mut()[ci] -= 2.0 * h;
                    let mut minus = params.clone();
                    minus.set_params(&tensors).unwrap();
                    let fm = eval(&minus);
                    let fd = (fp - fm) / (2.0 * h);
                    let got = grads[pi].data()[ci];
                    let rel = (got - fd).abs() / fd.abs().max(1e-4);
                    assert!(
                        rel < 1e-5,
                        "{activation:?} {name}[{ci}]: {got} vs {fd} ({rel:.2e})"
                    );
                }
            }
        }
    }

    #[test]
    fn jvp_matches_analytic_for_affine_layer() {
        let mut rng = NoviRng::seed_from_u64(8);
        let params = init_mlp(&[4, 4], Activation::Tanh, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = MlpVars::record(&tape, &params, false);
        let u = tape.leaf(rng.normal_tensor(&[2, 4]));
        let out = discriminator_forward(&vars, u).unwrap();
        let omega = rng.normal_tensor(&[2, 4]);
        let j = jvp(&tape, out, u, &omega).unwrap();
        let want = omega.matmul(&params.weights[0].transpose().unwrap()).unwrap();
        for (a, b) in j.value().data().iter().zip(want.data()) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn init_respects_bounds_and_determinism() {
        let mut rng1 = NoviRng::seed_from_u64(9);
        let mut rng2 = NoviRng::seed_from_u64(9);
        let a = init_mlp(&[8, 16, 4], Activation::Prelu, &mut rng1).unwrap();
        let b = init_mlp(&[8, 16, 4], Activation::Prelu, &mut rng2).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert_eq!(wa.data(), wb.data());
        }
        assert!(a.biases.iter().all(|b| b.data().iter().all(|v| *v == 0.0)));
        let bound0 = (6.0_f64 / (8.0 + 16.0)).sqrt();
        assert!(a.weights[0].data().iter().all(|v| v.abs() <= bound0));
        assert_eq!(a.slopes, vec![0.25]);
        assert!(matches!(
            init_mlp(&[], Activation::Tanh, &mut rng1),
            Err(NoviError::Input(_))
        ));
    }

    #[test]
    fn forward_is_deterministic_in_params_and_input() {
        let mut rng = NoviRng::seed_from_u64(10);
        let params = init_mlp(&[5, 7, 5], Activation::Sigmoid, &mut rng).unwrap();
        let u0 = rng.normal_tensor(&[3, 5]);
        let run = || {
            let tape = Tape::new();
            let vars = MlpVars::record(&tape, &params, false);
            let out = vars.forward(tape.constant(u0.clone())).unwrap();
            out.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
