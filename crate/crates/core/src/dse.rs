//! Deformable scene encoder: distance prior, offset prediction, deformable
//! convolution, query cross-attention and per-layer routing heads.

use samoe_numerics::{Graph, Rng, Scalar, Tensor, Var, Window};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DseConfig {
    /// Input BEV channels.
    pub channels: usize,
    pub kernel: usize,
    /// Routing embedding width C_r.
    pub width: usize,
    pub queries: usize,
    pub heads: usize,
    pub experts: usize,
}

impl Default for DseConfig {
    fn default() -> Self {
        DseConfig {
            channels: 16,
            kernel: 3,
            width: 32,
            queries: 4,
            heads: 4,
            experts: 4,
        }
    }
}

impl DseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "{} attention heads do not divide routing width {}",
                self.heads, self.width
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(CoreError::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.experts == 0 || self.queries == 0 {
            return Err(CoreError::Config("experts and queries must be positive".into()));
        }
        Ok(())
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.kernel * self.kernel
    }
}

/// `M(i,j) = 1 - |(i,j) - c| / max_{i',j'} |(i',j') - c|`, `[H, W]`.
pub fn near_field_map(h: usize, w: usize, center: (usize, usize)) -> Result<Tensor<f64>> {
    if h == 0 || w == 0 || center.0 >= h || center.1 >= w {
        return Err(CoreError::Config(format!("ego center {center:?} outside {h}x{w} grid")));
    }
    let dist = |i: usize, j: usize| (i as f64 - center.0 as f64).hypot(j as f64 - center.1 as f64);
    let corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)];
    let mut dmax = corners.iter().map(|&(i, j)| dist(i, j)).fold(0.0, f64::max);
    if dmax == 0.0 {
        dmax = 1.0;
    }
    Ok(Tensor::from_fn(&[h, w], |k| 1.0 - dist(k / w, k % w) / dmax))
}

pub fn init_params<T: Scalar>(cfg: &DseConfig, moe_layers: &[usize], rng: &mut Rng, store: &mut ParamStore<T>) {
    let k2 = cfg.kernel * cfg.kernel;
    let c = cfg.width;
    // Offset predictor starts at zero so initial sampling is a plain conv.
    store.insert(
        "dse/offset/w",
        Tensor::zeros(&[(cfg.channels + 1) * k2, cfg.offset_channels()]),
    );
    store.insert("dse/offset/b", Tensor::zeros(&[cfg.offset_channels()]));
    store.init_linear("dse/conv", cfg.channels * k2, c, rng);
    store.init_norm("dse/norm", c);
    store.insert("dse/queries", rng.normal_tensor(&[1, cfg.queries, c], 1.0));
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(
            format!("dse/attn/{name}"),
            rng.normal_tensor(&[c, c], 1.0 / (c as f64).sqrt()),
        );
    }
    // Routing heads start random: with identical experts a uniform router
    // would hand every expert the same gradient forever.
    for &l in moe_layers {
        store.insert(
            format!("dse/head{l}/w"),
            rng.normal_tensor(&[c, cfg.experts], 1.0 / (c as f64).sqrt()),
        );
        store.insert(format!("dse/head{l}/b"), Tensor::zeros(&[cfg.experts]));
    }
}

/// Standard `k x k` same-padded patches of `x` (`[B, C, H, W]`), as
/// `[B, H*W, C*k²]`.
pub fn im2col<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let zeros = g.constant(Tensor::zeros(&[s[0], 2 * kernel * kernel, s[2], s[3]]));
    Ok(g.deform_im2col(x, zeros, Window::same(kernel))?)
}

/// `[B, H*W, C] -> [B, C, H, W]`.
fn tokens_to_map<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1])?;
    Ok(g.reshape(p, &[s[0], s[2], h, w])?)
}

/// `Δ = P([F; M])`: a same-padded conv over the BEV channels and the
/// distance prior, `[B, 2k², H, W]`.
pub fn predict_offsets<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    near: &Tensor<f64>,
    w: Var,
    b: Var,
    kernel: usize,
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let (batch, h, wd) = (s[0], s[2], s[3]);
    if near.shape() != [h, wd] {
        return Err(CoreError::Config(format!(
            "distance prior {:?} does not match grid {h}x{wd}",
            near.shape()
        )));
    }
    let plane = near.cast::<T>();
    let m = Tensor::from_fn(&[batch, 1, h, wd], |i| plane.data()[i % (h * wd)]);
    let m = g.constant(m);
    let fm = g.concat(&[f, m], 1)?;
    let cols = im2col(g, fm, kernel)?;
    let y = nn::linear(g, cols, w, Some(b))?;
    tokens_to_map(g, y, h, wd)
}

/// Deformable conv as tokens: `[B, H*W, C_r]`.
pub fn deformable_conv_tokens<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    offsets: Var,
    w: Var,
    b: Var,
    kernel: usize,
) -> Result<Var> {
    let cols = g.deform_im2col(f, offsets, Window::same(kernel))?;
    nn::linear(g, cols, w, Some(b))
}

/// Deformable conv, `[B, C_r, H, W]`.
pub fn deformable_conv<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    offsets: Var,
    w: Var,
    b: Var,
    kernel: usize,
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let t = deformable_conv_tokens(g, f, offsets, w, b, kernel)?;
    tokens_to_map(g, t, s[2], s[3])
}

/// `LayerNorm(Flatten(x))`: `[B, C, H, W] -> [B, H*W, C]`, token index
/// `h * W + w`.
pub fn scene_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let t = g.permute(r, &[0, 2, 1])?;
    Ok(g.layer_norm(t, gain, bias)?)
}

pub struct MhaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Cross-attention of shared queries `[1, T, C]` over scene tokens
/// `[B, N, C]`; returns `[B, T, C]`.
pub fn scene_hidden<T: Scalar>(g: &mut Graph<T>, queries: Var, s: Var, mha: &MhaWeights, heads: usize) -> Result<Var> {
    let batch = g.shape(s)[0];
    let c = g.shape(s)[2];
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(CoreError::Config(format!("{heads} heads do not divide width {c}")));
    }
    let q = g.matmul(queries, mha.wq)?;
    let q = nn::repeat_batch(g, q, batch)?;
    let q = g.reshape(q, &[batch, g.shape(queries)[1], c])?;
    let k = g.matmul(s, mha.wk)?;
    let v = g.matmul(s, mha.wv)?;
    let (q, k, v) = (
        nn::split_heads(g, q, heads)?,
        nn::split_heads(g, k, heads)?,
        nn::split_heads(g, v, heads)?,
    );
    let o = nn::attention(g, q, k, v, None)?;
    let o = nn::merge_heads(g, o)?;
    Ok(g.matmul(o, mha.wo)?)
}

/// `π = softmax(MeanPool_T(H) W + b)`, `[B, E]`.
pub fn routing_weights<T: Scalar>(g: &mut Graph<T>, h: Var, w: Var, b: Var) -> Result<Var> {
    let pooled = g.mean_axis(h, 1)?;
    let r = nn::linear(g, pooled, w, Some(b))?;
    Ok(g.softmax(r)?)
}

/// Routing embeddings of one forward pass, shared by every routing head.
#[derive(Clone, Copy, Debug)]
pub struct SceneHidden {
    pub tokens: Var,
}

/// Full encoder from `[B, C, H, W]` BEV features to `H_BEV`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DseConfig,
    bev: Var,
    near: &Tensor<f64>,
) -> Result<SceneHidden> {
    cfg.validate()?;
    let (ow, ob) = (p.get("dse/offset/w")?, p.get("dse/offset/b")?);
    let offsets = predict_offsets(g, bev, near, ow, ob, cfg.kernel)?;
    let (cw, cb) = (p.get("dse/conv/w")?, p.get("dse/conv/b")?);
    let tokens = deformable_conv_tokens(g, bev, offsets, cw, cb, cfg.kernel)?;
    let s = nn::layer_norm_named(g, p, "dse/norm", tokens)?;
    let mha = MhaWeights {
        wq: p.get("dse/attn/wq")?,
        wk: p.get("dse/attn/wk")?,
        wv: p.get("dse/attn/wv")?,
        wo: p.get("dse/attn/wo")?,
    };
    let queries = p.get("dse/queries")?;
    let tokens = scene_hidden(g, queries, s, &mha, cfg.heads)?;
    Ok(SceneHidden { tokens })
}

/// Routing weights for MoE layer `layer`.
pub fn route<T: Scalar>(g: &mut Graph<T>, p: &Bound, h: SceneHidden, layer: usize) -> Result<Var> {
    let w = p.get(&format!("dse/head{layer}/w"))?;
    let b = p.get(&format!("dse/head{layer}/b"))?;
    routing_weights(g, h.tokens, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_field_small_grid() {
        let m = near_field_map(3, 3, (1, 1)).unwrap();
        assert_eq!(m.get(&[1, 1]), 1.0);
        assert!((m.get(&[0, 1]) - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(m.get(&[0, 0]), 0.0);
        assert_eq!(near_field_map(1, 1, (0, 0)).unwrap().item(), 1.0);
    }

    #[test]
    fn near_field_off_center() {
        let m = near_field_map(32, 32, (16, 16)).unwrap();
        assert_eq!(m.get(&[16, 16]), 1.0);
        assert_eq!(m.get(&[0, 0]), 0.0);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_head_gives_uniform_routing() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Rng::new(1, 0).normal_tensor(&[3, 4, 8], 1.0));
        let w = g.constant(Tensor::zeros(&[8, 5]));
        let b = g.constant(Tensor::zeros(&[5]));
        let pi = routing_weights(&mut g, h, w, b).unwrap();
        assert!(g.value(pi).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn log_two_logits_route_two_thirds() {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::zeros(&[1, 2, 1]));
        let w = g.constant(Tensor::zeros(&[1, 2]));
        let b = g.constant(Tensor::from_f64(&[2], &[2f64.ln(), 0.0]).unwrap());
        let pi = routing_weights(&mut g, h, w, b).unwrap();
        let v = g.value(pi);
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn head_count_must_divide_width() {
        let cfg = DseConfig {
            heads: 3,
            ..DseConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
