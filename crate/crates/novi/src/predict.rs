//! Posterior-predictive sampling: draw inducing samples from the generator,
//! propagate test inputs with fresh path noise, and report empirical moments.

use crate::autodiff::Tape;
use crate::dgp::{DgpState, GradMode, ModelGraph};
use crate::error::{NoviError, Result};
use crate::nets::{generator_eval, GeneratorSpec, MlpParams};
use crate::rng::NoviRng;
use crate::tensor::Tensor;

/// Empirical mean and variance of the final-layer values at `x` across
/// `num_samples` generator draws (one path-noise draw each).
pub fn predict(
    state: &DgpState,
    spec: &GeneratorSpec,
    generator: &MlpParams,
    x: &Tensor,
    out_dims: &[usize],
    num_samples: usize,
    rng: &mut NoviRng,
) -> Result<(Tensor, Tensor)> {
    if num_samples < 1 {
        return Err(NoviError::input("num_samples must be >= 1"));
    }
    let n = x.rows();
    let d_l = *out_dims.last().expect("at least one layer");
    let mut sum = vec![0.0; n * d_l];
    let mut sumsq = vec![0.0; n * d_l];
    for _ in 0..num_samples {
        let eps = rng.normal_tensor(&[1, spec.noise_dim]);
        let u = generator_eval(spec, generator, &eps)?;
        let tape = Tape::new();
        let graph = ModelGraph::record(&tape, state, out_dims, GradMode::default())?;
        let path_eps = graph.draw_path_eps(rng, 1, 1, n);
        let u_var = tape.constant(u);
        let f = graph.propagate(x, u_var, 1, &path_eps)?;
        for (i, v) in f.value().data().iter().enumerate() {
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    let s = num_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / s).collect();
    let var: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            if num_samples > 1 {
                ((sq / s) - m * m).max(0.0) * s / (s - 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok((
        Tensor::new(vec![n, d_l], mean)?,
        Tensor::new(vec![n, d_l], var)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{InducingSample, LayerSpec, Layout};
    use crate::kernel::KernelKind;
    use crate::nets::Activation;
    use crate::oracle::svgp_marginal;

    /// A generator that ignores its noise and always emits `u`.
    fn constant_generator(u: &Tensor, noise_dim: usize) -> (GeneratorSpec, MlpParams) {
        let d = u.numel();
        let params = MlpParams {
            widths: vec![noise_dim, d],
            weights: vec![Tensor::zeros(&[d, noise_dim])],
            biases: vec![u.reshape(&[d]).unwrap()],
            activation: Activation::Tanh,
            slopes: vec![],
        };
        (
            GeneratorSpec {
                noise_dim,
                out_dim: d,
                output_clamp: None,
            },
            params,
        )
    }

    #[test]
    fn constant_generator_prediction_matches_analytic_marginal() {
        let mut rng = NoviRng::seed_from_u64(1);
        let specs = [LayerSpec {
            in_dim: 1,
            out_dim: 1,
            num_inducing: 5,
        }];
        let mut state = DgpState::init(&specs, KernelKind::SquaredExponential, &mut rng).unwrap();
        state.layers[0].inducing_inputs =
            Tensor::new(vec![5, 1], vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[5, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let (spec, gen) = constant_generator(&u.flat, 3);
        let x = rng.uniform_tensor(&[4, 1], -1.0, 1.0);

        let samples = 10_000;
        let (mean, var) = predict(&state, &spec, &gen, &x, &[1], samples, &mut rng).unwrap();
        // Constant u: the predictive is the layer conditional itself, i.e.
        // the analytic marginal with a point-mass inducing distribution.
        let (mu, cov) = svgp_marginal(
            &u.flat,
            &Tensor::zeros(&[5, 5]),
            &x,
            &state.layers[0].inducing_inputs,
            &state.layers[0].kernel,
        )
        .unwrap();
        for i in 0..4 {
            let se = (var.at(i, 0).max(1e-12) / samples as f64).sqrt();
            assert!(
                (mean.at(i, 0) - mu.data()[i]).abs() <= 4.0 * se,
                "point {i}: {} vs {} (se {se})",
                mean.at(i, 0),
                mu.data()[i]
            );
            let _ = cov.at(i, i);
        }
    }

    #[test]
    fn single_sample_at_inducing_inputs_recovers_u() {
        // With x = Z, a constant generator, and the path noise forced to
        // zero through the zero-variance conditional, the one-sample
        // prediction is u itself.
        let mut rng = NoviRng::seed_from_u64(2);
        let specs = [LayerSpec {
            in_dim: 1,
            out_dim: 1,
            num_inducing: 4,
        }];
        let state = DgpState::init(&specs, KernelKind::SquaredExponential, &mut rng).unwrap();
        let layout = Layout::new(&state.layer_dims(&[1]));
        let u_mat = rng.normal_tensor(&[4, 1]);
        let u = InducingSample::flatten(&[u_mat.clone()], &layout).unwrap();
        let (spec, gen) = constant_generator(&u.flat, 2);
        let z = state.layers[0].inducing_inputs.clone();
        let (mean, _) = predict(&state, &spec, &gen, &z, &[1], 1, &mut rng).unwrap();
        for i in 0..4 {
            // Variance at the inducing inputs is jitter-scale, so the noise
            // contribution is negligible regardless of the draw.
            assert!((mean.at(i, 0) - u_mat.at(i, 0)).abs() < 1e-2);
        }
    }
}
