//! Conditional cross-modal causal attention.
//!
//! Conditioning tokens see every conditioning token; action tokens see all
//! conditioning tokens plus earlier (and their own) action positions.
//! Tokens are projected by one of two disjoint parameter sets depending on
//! whether they belong to the world-language side or the planning side.

use samoe_numerics::{ops, Graph, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::params::{Bound, ParamStore};

/// Finite stand-in for an infinite masking penalty.
pub const MASK_PENALTY: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct CmcaLayout {
    pub total_len: usize,
    /// Conditioning positions 𝒞.
    pub cond: Vec<usize>,
    /// Action positions 𝒜, strictly increasing.
    pub action: Vec<usize>,
    /// Positions handled by the planning parameter set.
    pub plan: Vec<usize>,
}

impl CmcaLayout {
    /// `[conditioning | actions]` with the last `plan_len` positions on the
    /// planning side.
    pub fn canonical(cond_len: usize, action_len: usize, plan_len: usize) -> Result<Self> {
        let total = cond_len + action_len;
        if plan_len > total {
            return Err(CoreError::Layout(format!(
                "plan length {plan_len} exceeds sequence length {total}"
            )));
        }
        let layout = CmcaLayout {
            total_len: total,
            cond: (0..cond_len).collect(),
            action: (cond_len..total).collect(),
            plan: (total - plan_len..total).collect(),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.total_len;
        let mut seen = vec![0u8; l];
        for &i in self.cond.iter().chain(&self.action) {
            if i >= l {
                return Err(CoreError::Layout(format!(
                    "position {i} outside sequence of length {l}"
                )));
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(CoreError::Layout(format!(
                "position {i} is covered {} times by the two partitions",
                seen[i]
            )));
        }
        if self.action.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Layout("action positions must be strictly increasing".into()));
        }
        if self.plan.len() > l || self.plan.iter().any(|&i| i >= l) {
            return Err(CoreError::Layout("planning positions out of range".into()));
        }
        Ok(())
    }

    pub fn plan_len(&self) -> usize {
        self.plan.len()
    }

    /// Positions on the world-language side, in order.
    pub fn world_language(&self) -> Vec<usize> {
        (0..self.total_len).filter(|i| !self.plan.contains(i)).collect()
    }
}

/// `A[i,j] = 1` iff `j ∈ 𝒞`, or `i, j ∈ 𝒜` with `j <= i`.
pub fn build_mask(layout: &CmcaLayout) -> Result<Tensor<f64>> {
    layout.validate()?;
    let l = layout.total_len;
    let mut is_cond = vec![false; l];
    let mut is_act = vec![false; l];
    for &c in &layout.cond {
        is_cond[c] = true;
    }
    for &a in &layout.action {
        is_act[a] = true;
    }
    Ok(Tensor::from_fn(&[l, l], |k| {
        let (i, j) = (k / l, k % l);
        if is_cond[j] || (is_act[i] && is_act[j] && j <= i) {
            1.0
        } else {
            0.0
        }
    }))
}

/// `(1 - A) * (-M)`.
pub fn mask_bias<T: Scalar>(mask: &Tensor<f64>, penalty: f64) -> Tensor<T> {
    mask.map(|a| (1.0 - a) * -penalty).cast()
}

/// `softmax(q kᵀ/√d + (1-A)(-M)) v` on `[B, H, L, d]` inputs.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<f64>,
    penalty: f64,
) -> Result<Tensor<T>> {
    Ok(ops::matmul(&attention_weights(q, k, mask, penalty)?, v)?)
}

pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    mask: &Tensor<f64>,
    penalty: f64,
) -> Result<Tensor<T>> {
    let d = *q.shape().last().unwrap();
    let s = ops::matmul(q, &ops::transpose(k)?)?.scale(T::from_f64(1.0 / (d as f64).sqrt()));
    let s = ops::add(&s, &mask_bias(mask, penalty))?;
    Ok(ops::softmax_rows(&s)?)
}

pub fn init_block_params<T: Scalar>(
    prefix: &str,
    d: usize,
    m: usize,
    rng: &mut samoe_numerics::Rng,
    store: &mut ParamStore<T>,
) {
    let s = 1.0 / (d as f64).sqrt();
    for side in ["wl", "plan"] {
        store.init_norm(&format!("{prefix}/{side}/ln1"), d);
        store.init_norm(&format!("{prefix}/{side}/ln2"), d);
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}/{side}/{w}"), rng.normal_tensor(&[d, d], s));
        }
        init_ffn(&format!("{prefix}/{side}/ffn"), d, m, rng, store);
    }
}

pub fn init_ffn<T: Scalar>(prefix: &str, d: usize, m: usize, rng: &mut samoe_numerics::Rng, store: &mut ParamStore<T>) {
    let (s1, s2) = (1.0 / (d as f64).sqrt(), 1.0 / (m as f64).sqrt());
    store.insert(format!("{prefix}/w1"), rng.normal_tensor(&[d, m], s1));
    store.insert(format!("{prefix}/w3"), rng.normal_tensor(&[d, m], s1));
    store.insert(format!("{prefix}/w2"), rng.normal_tensor(&[m, d], s2));
}

/// Dense SwiGLU FFN bound under `prefix`.
pub fn dense_ffn<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}/w1"))?;
    let w3 = p.get(&format!("{prefix}/w3"))?;
    let w2 = p.get(&format!("{prefix}/w2"))?;
    nn::swiglu(g, x, w1, w3, w2)
}

/// Static pieces of a block evaluation that do not depend on the layer.
pub struct BlockContext<T: Scalar> {
    pub layout: CmcaLayout,
    pub heads: usize,
    /// `(1-A)(-M)`, `[L, L]`.
    pub bias: Tensor<T>,
    wl_idx: Vec<usize>,
    /// Restores original order from `[wl | plan]`.
    unpermute: Vec<usize>,
}

impl<T: Scalar> BlockContext<T> {
    pub fn new(layout: CmcaLayout, heads: usize) -> Result<Self> {
        let mask = build_mask(&layout)?;
        let wl_idx = layout.world_language();
        let mut order = wl_idx.clone();
        order.extend_from_slice(&layout.plan);
        let mut unpermute = vec![0; order.len()];
        for (k, &pos) in order.iter().enumerate() {
            unpermute[pos] = k;
        }
        Ok(BlockContext {
            bias: mask_bias(&mask, MASK_PENALTY),
            layout,
            heads,
            wl_idx,
            unpermute,
        })
    }

    fn split(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        Ok((
            g.index_select(x, 1, &self.wl_idx)?,
            g.index_select(x, 1, &self.layout.plan)?,
        ))
    }

    fn join(&self, g: &mut Graph<T>, wl: Var, plan: Var) -> Result<Var> {
        let c = g.concat(&[wl, plan], 1)?;
        Ok(g.index_select(c, 1, &self.unpermute)?)
    }
}

/// One CMCA transformer block on `[B, L, d]` tokens.
///
/// `plan_ffn` maps the normalized planning-side tokens `[B, L_p, d]` to
/// their FFN output; it is the dense planning FFN or a merged expert FFN.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    ctx: &BlockContext<T>,
    x: Var,
    plan_ffn: &mut dyn FnMut(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let (x_wl, x_pl) = ctx.split(g, x)?;
    let n_wl = nn::layer_norm_named(g, p, &format!("{prefix}/wl/ln1"), x_wl)?;
    let n_pl = nn::layer_norm_named(g, p, &format!("{prefix}/plan/ln1"), x_pl)?;
    let proj = |g: &mut Graph<T>, w: &str| -> Result<Var> {
        let a = g.matmul(n_wl, p.get(&format!("{prefix}/wl/{w}"))?)?;
        let b = g.matmul(n_pl, p.get(&format!("{prefix}/plan/{w}"))?)?;
        let joined = ctx.join(g, a, b)?;
        nn::split_heads(g, joined, ctx.heads)
    };
    let q = proj(g, "wq")?;
    let k = proj(g, "wk")?;
    let v = proj(g, "wv")?;
    let bias = g.constant(ctx.bias.clone());
    let o = nn::attention(g, q, k, v, Some(bias))?;
    let o = nn::merge_heads(g, o)?;
    let (o_wl, o_pl) = ctx.split(g, o)?;
    let o_wl = g.matmul(o_wl, p.get(&format!("{prefix}/wl/wo"))?)?;
    let o_pl = g.matmul(o_pl, p.get(&format!("{prefix}/plan/wo"))?)?;
    let h_wl = g.add(x_wl, o_wl)?;
    let h_pl = g.add(x_pl, o_pl)?;
    let f_in_wl = nn::layer_norm_named(g, p, &format!("{prefix}/wl/ln2"), h_wl)?;
    let f_in_pl = nn::layer_norm_named(g, p, &format!("{prefix}/plan/ln2"), h_pl)?;
    let f_wl = dense_ffn(g, p, &format!("{prefix}/wl/ffn"), f_in_wl)?;
    let f_pl = plan_ffn(g, f_in_pl)?;
    let y_wl = g.add(h_wl, f_wl)?;
    let y_pl = g.add(h_pl, f_pl)?;
    ctx.join(g, y_wl, y_pl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_token_mask() {
        let layout = CmcaLayout {
            total_len: 4,
            cond: vec![0, 1],
            action: vec![2, 3],
            plan: vec![],
        };
        let m = build_mask(&layout).unwrap();
        assert_eq!(
            m.to_vec(),
            vec![1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 1., 0., 1., 1., 1., 1.]
        );
    }

    #[test]
    fn empty_partitions() {
        let no_actions = CmcaLayout {
            total_len: 3,
            cond: vec![0, 2],
            action: vec![1],
            plan: vec![],
        };
        let m = build_mask(&no_actions).unwrap();
        assert_eq!(m.get(&[0, 1]), 0.0);
        let only_cond = CmcaLayout::canonical(3, 0, 0).unwrap();
        assert!(build_mask(&only_cond).unwrap().data().iter().all(|&v| v == 1.0));
        let causal = CmcaLayout::canonical(0, 2, 0).unwrap();
        assert_eq!(build_mask(&causal).unwrap().to_vec(), vec![1., 0., 1., 1.]);
    }

    #[test]
    fn overlapping_partitions_are_rejected() {
        let bad = CmcaLayout {
            total_len: 3,
            cond: vec![0, 1],
            action: vec![1, 2],
            plan: vec![],
        };
        assert!(matches!(build_mask(&bad), Err(CoreError::Layout(_))));
    }

    #[test]
    fn two_token_attention_weights() {
        // With d = 1, q = 1 and keys (0, ln 3) give scores [0, ln 3].
        let q = Tensor::<f64>::from_f64(&[1, 1, 2, 1], &[1.0, 1.0]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 1, 2, 1], &[0.0, 3f64.ln()]).unwrap();
        let mask = Tensor::ones(&[2, 2]);
        let w = attention_weights(&q, &k, &mask, MASK_PENALTY).unwrap();
        assert!((w.get(&[0, 0, 0, 0]) - 0.25).abs() < 1e-15);
        assert!((w.get(&[0, 0, 0, 1]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_weight_underflows_in_f32() {
        let layout = CmcaLayout::canonical(1, 2, 0).unwrap();
        let mask = build_mask(&layout).unwrap();
        let q = samoe_numerics::Rng::new(2, 0).normal_tensor::<f32>(&[1, 1, 3, 4], 3.0);
        let w = attention_weights(&q, &q, &mask, MASK_PENALTY).unwrap();
        assert_eq!(w.get(&[0, 0, 1, 2]), 0.0);
        assert_eq!(w.get(&[0, 0, 0, 1]), 0.0);
    }
}
