//! Reverse-mode gradients against central finite differences, one op at a
//! time, each over 100 random probe directions.

use samoe_numerics::gradcheck::directional;
use samoe_numerics::{Graph, Result, Rng, Tensor, Var, Window};

const PROBES: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, shapes: &[&[usize]], seed: u64) {
    let mut rng = Rng::new(seed, 0);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rng.normal_tensor(s, 1.0)).collect();
    let mut probe_rng = Rng::new(seed, 1);
    let report = directional(build, &inputs, PROBES, H, &mut probe_rng).unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "{name}: max relative error {:.3e}",
        report.max_rel_err
    );
}

/// Contracts an arbitrary tensor with a fixed random weight so the loss
/// depends on every output entry.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed, 99).normal_tensor(g.shape(x), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn matmul_batched_and_shared() {
    check(
        "matmul",
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let z = g.matmul(y, v[2])?;
            weighted_sum(g, z, 1)
        },
        &[&[2, 3, 4], &[2, 4, 5], &[5, 2]],
        10,
    );
}

#[test]
fn broadcasting_binary_ops() {
    check(
        "binary",
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.mul(a, v[2])?;
            let c = g.sub(b, v[1])?;
            let d = g.square(v[2]);
            let one = g.constant(Tensor::ones(&[2, 1]));
            let den = g.add(d, one)?;
            let e = g.div(c, den)?;
            weighted_sum(g, e, 2)
        },
        &[&[2, 3], &[3], &[2, 1]],
        11,
    );
}

#[test]
fn silu_softmax_and_scale() {
    check(
        "silu/softmax",
        |g, v| {
            let s = g.silu(v[0]);
            let t = g.scale(s, 0.7);
            let p = g.softmax(t)?;
            weighted_sum(g, p, 3)
        },
        &[&[4, 6]],
        12,
    );
}

#[test]
fn layer_norm_with_affine() {
    check(
        "layer_norm",
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 4)
        },
        &[&[3, 8], &[8], &[8]],
        13,
    );
}

#[test]
fn reductions() {
    check(
        "reductions",
        |g, v| {
            let a = g.mean_axis(v[0], 1)?;
            let b = g.sum_axis(v[0], 0)?;
            let c = g.square(a);
            let d = g.square(b);
            let s1 = weighted_sum(g, c, 5)?;
            let s2 = weighted_sum(g, d, 6)?;
            let m = g.mean_all(v[0]);
            let s = g.add(s1, s2)?;
            g.add(s, m)
        },
        &[&[3, 4, 2]],
        14,
    );
}

#[test]
fn shape_ops() {
    check(
        "shape",
        |g, v| {
            let r = g.reshape(v[0], &[4, 6])?;
            let p = g.permute(v[0], &[2, 0, 1])?;
            let p = g.reshape(p, &[4, 6])?;
            let t = g.transpose(r)?;
            let t = g.reshape(t, &[4, 6])?;
            let c = g.concat(&[r, p, t], 0)?;
            let n = g.narrow(c, 0, 2, 7)?;
            let s = g.index_select(n, 1, &[5, 0, 0, 3])?;
            let a = g.index_add(s, 1, &[1, 1, 2, 0], 3)?;
            let sq = g.square(a);
            weighted_sum(g, sq, 7)
        },
        &[&[2, 3, 4]],
        15,
    );
}

#[test]
fn deformable_sampling_input_and_offsets() {
    check(
        "deform_im2col",
        |g, v| {
            let half = g.constant(Tensor::full(&[1], 0.4));
            let off = g.mul(v[1], half)?;
            let cols = g.deform_im2col(v[0], off, Window::same(3))?;
            let sq = g.square(cols);
            weighted_sum(g, sq, 8)
        },
        &[&[1, 2, 5, 4], &[1, 18, 5, 4]],
        16,
    );
}

#[test]
fn two_layer_net_regression_loss() {
    check(
        "mlp",
        |g, v| {
            let x = g.constant(Rng::new(5, 5).normal_tensor(&[6, 3], 1.0));
            let y = g.constant(Rng::new(5, 6).normal_tensor(&[6, 2], 1.0));
            let h = g.matmul(x, v[0])?;
            let h = g.silu(h);
            let o = g.matmul(h, v[1])?;
            let d = g.sub(o, y)?;
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        },
        &[&[3, 8], &[8, 2]],
        17,
    );
}
