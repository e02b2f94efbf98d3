//! Finite-difference checks of graph gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that two tiny derivatives do
/// not register as a large relative disagreement.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct DirectionalReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// (analytic, finite-difference) per probe.
    pub pairs: Vec<(f64, f64)>,
}

/// Compares `<grad f(x), v>` with `(f(x + h v) - f(x - h v)) / 2h` for
/// `probes` random Gaussian directions `v`.
///
/// `build` maps parameter handles to a scalar loss on a fresh graph.
pub fn directional<F>(
    build: F,
    inputs: &[Tensor<f64>],
    probes: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<DirectionalReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.grad(loss, &vars)?;

    let mut pairs = Vec::with_capacity(probes);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..probes {
        let dirs: Vec<Tensor<f64>> = inputs.iter().map(|x| rng.normal_tensor(x.shape(), 1.0)).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shift = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| x.zip_map(d, |a, b| a + sign * h * b).expect("same shape"))
                .collect()
        };
        let fd = (eval(&shift(1.0))? - eval(&shift(-1.0))?) / (2.0 * h);
        max_rel_err = max_rel_err.max(rel_err(analytic, fd));
        pairs.push((analytic, fd));
    }
    Ok(DirectionalReport {
        probes,
        max_rel_err,
        pairs,
    })
}

/// Central difference of one scalar coordinate.
pub fn coordinate_fd(
    f: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    which: usize,
    coord: usize,
    h: f64,
) -> Result<f64> {
    let bump = |delta: f64| -> Vec<Tensor<f64>> {
        let mut xs = inputs.to_vec();
        let mut data = xs[which].to_vec();
        data[coord] += delta;
        xs[which] = Tensor::new(inputs[which].shape(), data).expect("same length");
        xs
    };
    Ok((f(&bump(h))? - f(&bump(-h))?) / (2.0 * h))
}
