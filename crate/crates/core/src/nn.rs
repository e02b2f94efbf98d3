//! Small graph building blocks shared by the encoder and the planner.

use samoe_numerics::{Graph, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::params::Bound;

/// `x @ w + b` over the last axis.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(match b {
        Some(b) => g.add(y, b)?,
        None => y,
    })
}

/// Linear layer whose weights are bound as `<name>/w` and `<name>/b`.
pub fn linear_named<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}/w"))?;
    let b = p.get(&format!("{name}/b"))?;
    linear(g, x, w, Some(b))
}

pub fn layer_norm_named<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{name}/g"))?;
    let bias = p.get(&format!("{name}/b"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// `[B, L, H*D] -> [B, H, L, D]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, c) = (s[0], s[1], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(CoreError::Config(format!("{heads} heads do not divide width {c}")));
    }
    let r = g.reshape(x, &[b, l, heads, c / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

/// `[B, H, L, D] -> [B, L, H*D]`.
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[s[0], s[2], s[1] * s[3]])?)
}

/// Scaled dot-product attention on `[B, H, Lq, D]` queries and `[B, H, Lk, D]`
/// keys/values. `bias` (broadcastable to the score shape) is added to the
/// scores before the softmax.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    let d = *g.shape(q).last().unwrap();
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let mut s = g.scale(s, T::from_f64(1.0 / (d as f64).sqrt()));
    if let Some(bias) = bias {
        s = g.add(s, bias)?;
    }
    let a = g.softmax(s)?;
    Ok(g.matmul(a, v)?)
}

/// `silu(x W1) * (x W3) W2`. Weights are either plain matrices shared by
/// the batch or per-sample `[B, .., ..]` stacks.
pub fn swiglu<T: Scalar>(g: &mut Graph<T>, x: Var, w1: Var, w3: Var, w2: Var) -> Result<Var> {
    let a = g.matmul(x, w1)?;
    let a = g.silu(a);
    let b = g.matmul(x, w3)?;
    let h = g.mul(a, b)?;
    Ok(g.matmul(h, w2)?)
}

/// Broadcasts `x` over a new leading batch axis of size `batch`.
pub fn repeat_batch<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
    let mut shape = vec![batch];
    shape.extend(std::iter::repeat_n(1, g.shape(x).len()));
    let zeros = g.constant(Tensor::zeros(&shape));
    Ok(g.add(x, zeros)?)
}

/// Fixed sinusoidal position signal, `[len, width]`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, width], |i| {
        let (pos, c) = (i / width, i % width);
        let freq = 1.0 / 10_000f64.powf((c / 2 * 2) as f64 / width as f64);
        let a = pos as f64 * freq;
        T::from_f64(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}
