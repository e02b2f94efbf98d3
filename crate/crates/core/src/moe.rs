//! Expert banks, sample-level weight merging, and the token-level sparse and
//! slot-based baselines.
//!
//! Every function here works on plain tensors; the planner builds the
//! differentiable versions from the same pieces.

use samoe_numerics::kernels::{self, BinaryOp};
use samoe_numerics::{ops, Rng, Scalar, Tensor};

use crate::error::{CoreError, Result};

/// Tolerance on `sum(π) = 1` and `π >= 0` for merge inputs.
pub const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<T: Scalar> {
    /// `[d, m]` per expert.
    pub w1: Vec<Tensor<T>>,
    /// `[d, m]` per expert.
    pub w3: Vec<Tensor<T>>,
    /// `[m, d]` per expert.
    pub w2: Vec<Tensor<T>>,
}

impl<T: Scalar> ExpertBank<T> {
    pub fn new(w1: Vec<Tensor<T>>, w3: Vec<Tensor<T>>, w2: Vec<Tensor<T>>) -> Result<Self> {
        let e = w1.len();
        if e == 0 || w3.len() != e || w2.len() != e {
            return Err(CoreError::Config(format!(
                "bank needs equal, nonzero expert counts (w1 {}, w3 {}, w2 {})",
                w1.len(),
                w3.len(),
                w2.len()
            )));
        }
        let (d, m) = (w1[0].shape()[0], w1[0].shape()[1]);
        for i in 0..e {
            if w1[i].shape() != [d, m] || w3[i].shape() != [d, m] || w2[i].shape() != [m, d] {
                return Err(CoreError::Config(format!(
                    "expert {i} does not share the ({d}, {m}) widths"
                )));
            }
        }
        Ok(ExpertBank { w1, w3, w2 })
    }

    pub fn random(experts: usize, d: usize, m: usize, rng: &mut Rng) -> Self {
        let (s1, s2) = (1.0 / (d as f64).sqrt(), 1.0 / (m as f64).sqrt());
        let mut w1 = Vec::new();
        let mut w3 = Vec::new();
        let mut w2 = Vec::new();
        for _ in 0..experts {
            w1.push(rng.normal_tensor(&[d, m], s1));
            w3.push(rng.normal_tensor(&[d, m], s1));
            w2.push(rng.normal_tensor(&[m, d], s2));
        }
        ExpertBank { w1, w3, w2 }
    }

    /// `experts` copies of one FFN, each perturbed by `N(0, σ²)` noise
    /// (exact copies when `σ = 0`).
    pub fn replicate(
        w1: &Tensor<T>,
        w3: &Tensor<T>,
        w2: &Tensor<T>,
        experts: usize,
        sigma: f64,
        rng: &mut Rng,
    ) -> Self {
        let jitter = |t: &Tensor<T>, rng: &mut Rng| -> Tensor<T> {
            if sigma == 0.0 {
                t.clone()
            } else {
                let n: Tensor<T> = rng.normal_tensor(t.shape(), sigma);
                t.zip_map(&n, |a, b| a + b).expect("same shape")
            }
        };
        let mut b = ExpertBank {
            w1: Vec::new(),
            w3: Vec::new(),
            w2: Vec::new(),
        };
        for _ in 0..experts {
            b.w1.push(jitter(w1, rng));
            b.w3.push(jitter(w3, rng));
            b.w2.push(jitter(w2, rng));
        }
        b
    }

    pub fn experts(&self) -> usize {
        self.w1.len()
    }

    pub fn d(&self) -> usize {
        self.w1[0].shape()[0]
    }

    pub fn m(&self) -> usize {
        self.w1[0].shape()[1]
    }

    pub fn params(&self) -> usize {
        self.experts() * 3 * self.d() * self.m()
    }

    /// All weights of expert `e` as one vector (w1, w3, w2 in order).
    pub fn flatten(&self, e: usize) -> Vec<f64> {
        let mut v = self.w1[e].to_f64_vec();
        v.extend(self.w3[e].to_f64_vec());
        v.extend(self.w2[e].to_f64_vec());
        v
    }

    pub fn expert(&self, e: usize) -> MergedFfn<T> {
        MergedFfn {
            w1: self.w1[e].clone(),
            w3: self.w3[e].clone(),
            w2: self.w2[e].clone(),
            pi: (0..self.experts()).map(|i| if i == e { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Stacks one matrix kind as `[E, rows*cols]` for merge-by-matmul.
    pub fn stacked(which: &[Tensor<T>]) -> Tensor<T> {
        let rows = which.len();
        let cols = which[0].len();
        let mut data = Vec::with_capacity(rows * cols);
        for t in which {
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[rows, cols], data).expect("consistent sizes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedFfn<T: Scalar> {
    pub w1: Tensor<T>,
    pub w3: Tensor<T>,
    pub w2: Tensor<T>,
    /// Mixture weights the matrices were merged with.
    pub pi: Vec<f64>,
}

pub fn check_simplex(pi: &[f64], experts: usize) -> Result<()> {
    if pi.len() != experts {
        return Err(CoreError::Simplex(format!(
            "{} weights for {experts} experts",
            pi.len()
        )));
    }
    if let Some(v) = pi.iter().find(|&&v| !(v >= -SIMPLEX_TOL) || !v.is_finite()) {
        return Err(CoreError::Simplex(format!("negative or non-finite weight {v}")));
    }
    let s: f64 = pi.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(CoreError::Simplex(format!("weights sum to {s}")));
    }
    Ok(())
}

fn combine<T: Scalar>(ws: &[Tensor<T>], pi: &[f64]) -> Tensor<T> {
    let mut acc = vec![T::ZERO; ws[0].len()];
    for (w, &p) in ws.iter().zip(pi) {
        let p = T::from_f64(p);
        for (a, &v) in acc.iter_mut().zip(w.data()) {
            *a += p * v;
        }
    }
    Tensor::new(ws[0].shape(), acc).expect("same shape")
}

/// `W̃_i = Σ_e π_e W_i^(e)` for each of the three matrices.
pub fn merge_experts<T: Scalar>(bank: &ExpertBank<T>, pi: &[f64]) -> Result<MergedFfn<T>> {
    check_simplex(pi, bank.experts())?;
    Ok(MergedFfn {
        w1: combine(&bank.w1, pi),
        w3: combine(&bank.w3, pi),
        w2: combine(&bank.w2, pi),
        pi: pi.to_vec(),
    })
}

/// `silu(h W1) ⊙ (h W3) W2`, token-wise over `[.., d]`.
pub fn swiglu_forward<T: Scalar>(h: &Tensor<T>, f: &MergedFfn<T>) -> Result<Tensor<T>> {
    let a = ops::silu(&ops::matmul(h, &f.w1)?);
    let b = ops::matmul(h, &f.w3)?;
    Ok(ops::matmul(&ops::elementwise_mul(&a, &b)?, &f.w2)?)
}

pub fn expert_forward<T: Scalar>(bank: &ExpertBank<T>, e: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
    swiglu_forward(x, &bank.expert(e))
}

/// `Σ_e π_e F_e(x)`.
pub fn ideal_mixture_output<T: Scalar>(bank: &ExpertBank<T>, pi: &[f64], x: &Tensor<T>) -> Result<Tensor<T>> {
    check_simplex(pi, bank.experts())?;
    let mut acc = vec![T::ZERO; x.len()];
    for (e, &p) in pi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let y = expert_forward(bank, e, x)?;
        let p = T::from_f64(p);
        for (a, &v) in acc.iter_mut().zip(y.data()) {
            *a += p * v;
        }
    }
    Ok(Tensor::new(x.shape(), acc)?)
}

/// `‖F_{W(π)}(x) - Σ_e π_e F_e(x)‖₂`.
pub fn merging_residual<T: Scalar>(bank: &ExpertBank<T>, pi: &[f64], x: &Tensor<T>) -> Result<f64> {
    let merged = swiglu_forward(x, &merge_experts(bank, pi)?)?;
    let ideal = ideal_mixture_output(bank, pi, x)?;
    Ok(kernels::binary(&merged, &ideal, BinaryOp::Sub)?.norm())
}

// ---------------------------------------------------------------------------
// token-level routing

/// Renormalized top-k weights of one probability row; ties go to the lower
/// expert index. Returns a dense length-E vector.
pub fn top_k_weights(probs: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    let chosen = &order[..k.min(probs.len())];
    let total: f64 = chosen.iter().map(|&e| probs[e]).sum();
    let mut out = vec![0.0; probs.len()];
    for &e in chosen {
        out[e] = probs[e] / total;
    }
    out
}

/// Per-token dense gate vectors from `[N, E]` logits.
pub fn sparse_gates<T: Scalar>(logits: &Tensor<T>, k: usize) -> Result<Vec<Vec<f64>>> {
    let e = *logits.shape().last().unwrap();
    if k == 0 || k > e {
        return Err(CoreError::Config(format!("top-k needs 1 <= k <= {e}, got {k}")));
    }
    let probs = ops::softmax_rows(logits)?.to_f64_vec();
    Ok(probs.chunks(e).map(|row| top_k_weights(row, k)).collect())
}

/// Runs each expert on its routed tokens and accumulates gate-weighted
/// outputs. `x` is `[N, d]`, `gates` one dense vector per token.
fn dispatch<T: Scalar>(bank: &ExpertBank<T>, x: &Tensor<T>, gates: &[Vec<f64>]) -> Result<Tensor<T>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::ZERO; n * d];
    for e in 0..bank.experts() {
        let idx: Vec<usize> = (0..n).filter(|&t| gates[t][e] != 0.0).collect();
        if idx.is_empty() {
            continue;
        }
        let xe = kernels::index_select(x, 0, &idx)?;
        let ye = expert_forward(bank, e, &xe)?;
        for (r, &t) in idx.iter().enumerate() {
            let g = T::from_f64(gates[t][e]);
            for (o, &v) in out[t * d..(t + 1) * d].iter_mut().zip(&ye.data()[r * d..(r + 1) * d]) {
                *o += g * v;
            }
        }
    }
    Ok(Tensor::new(&[n, d], out)?)
}

fn flatten_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| CoreError::Config("token tensor has no axes".into()))?;
    Ok(x.reshape(&[x.len() / d.max(1), d])?)
}

/// Token-level top-k MoE with router `w_gate` (`[d, E]`).
pub fn sparse_moe_forward<T: Scalar>(
    bank: &ExpertBank<T>,
    w_gate: &Tensor<T>,
    x: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let flat = flatten_tokens(x)?;
    let logits = ops::matmul(&flat, w_gate)?;
    let gates = sparse_gates(&logits, k)?;
    Ok(dispatch(bank, &flat, &gates)?.reshape(x.shape())?)
}

/// Sample-level merging: one merged FFN per sample of `x` (`[B, L, d]`),
/// built from that sample's weights in `pis`.
pub fn scene_merged_forward<T: Scalar>(bank: &ExpertBank<T>, pis: &[Vec<f64>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if pis.len() != b {
        return Err(CoreError::Config(format!(
            "{} routing vectors for batch {b}",
            pis.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for (i, pi) in pis.iter().enumerate() {
        let f = merge_experts(bank, pi)?;
        let xi = Tensor::new(&[l, d], x.data()[i * l * d..(i + 1) * l * d].to_vec())?;
        out.extend_from_slice(swiglu_forward(&xi, &f)?.data());
    }
    Ok(Tensor::new(x.shape(), out)?)
}

/// Sparse MoE whose logits add a per-sample BEV term:
/// `ω_tok x W_tok + ω_bev h W_bev`, with `h` as `[B, c]`.
#[allow(clippy::too_many_arguments)]
pub fn sparse_moe_bev_bias_forward<T: Scalar>(
    bank: &ExpertBank<T>,
    x: &Tensor<T>,
    h_bev: &Tensor<T>,
    w_tok: &Tensor<T>,
    w_bev: &Tensor<T>,
    omega_tok: f64,
    omega_bev: f64,
    k: usize,
) -> Result<Tensor<T>> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let tok = ops::matmul(x, w_tok)?.scale(T::from_f64(omega_tok));
    let bev = ops::matmul(h_bev, w_bev)?.scale(T::from_f64(omega_bev));
    let e = bev.shape()[1];
    let bev = bev.reshape(&[b, 1, e])?;
    let logits = ops::add(&tok, &bev)?.reshape(&[b * l, e])?;
    let gates = sparse_gates(&logits, k)?;
    Ok(dispatch(bank, &x.reshape(&[b * l, d])?, &gates)?.reshape(x.shape())?)
}

/// Slot logits `[B, L, E*Sl]`, optionally with the BEV term
/// `α_e ω_bev ⟨h_b, S_es⟩`.
fn slot_logits<T: Scalar>(
    slots: &Tensor<T>,
    x: &Tensor<T>,
    bev: Option<(&Tensor<T>, &[f64], f64)>,
    omega_slot: f64,
) -> Result<Tensor<T>> {
    let (e, sl, d) = (slots.shape()[0], slots.shape()[1], slots.shape()[2]);
    let s_flat = slots.reshape(&[e * sl, d])?;
    let st = ops::transpose(&s_flat)?;
    let mut logits = ops::matmul(x, &st)?.scale(T::from_f64(omega_slot));
    if let Some((h, alpha, omega_bev)) = bev {
        let b = x.shape()[0];
        let hb = ops::matmul(h, &st)?; // [B, E*Sl]
        let scaled = Tensor::from_fn(&[b, 1, e * sl], |i| {
            let col = i % (e * sl);
            hb.data()[i] * T::from_f64(alpha[col / sl] * omega_bev)
        });
        logits = ops::add(&logits, &scaled)?;
    }
    Ok(logits)
}

/// Output and per-token effective expert weights of a slot-based MoE.
pub struct SoftMoeOut<T: Scalar> {
    pub output: Tensor<T>,
    /// `Σ_s C[b,t,e,s]` per token, `[B*L][E]`.
    pub token_weights: Vec<Vec<f64>>,
}

fn soft_core<T: Scalar>(
    bank: &ExpertBank<T>,
    slots: &Tensor<T>,
    x: &Tensor<T>,
    logits: &Tensor<T>,
) -> Result<SoftMoeOut<T>> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (e, sl) = (slots.shape()[0], slots.shape()[1]);
    if sl == 0 {
        return Err(CoreError::Config("slot count must be at least 1".into()));
    }
    // Dispatch: softmax over tokens for every slot.
    let lt = kernels::permute(logits, &[0, 2, 1])?; // [B, E*Sl, L]
    let dispatch = ops::softmax_rows(&lt)?;
    let slot_in = ops::matmul(&dispatch, x)?; // [B, E*Sl, d]
                                              // Each expert runs on its own slots.
    let mut slot_out = vec![T::ZERO; b * e * sl * d];
    for ei in 0..e {
        let rows: Vec<usize> = (0..sl).map(|s| ei * sl + s).collect();
        let xi = kernels::index_select(&slot_in, 1, &rows)?; // [B, Sl, d]
        let yi = expert_forward(bank, ei, &xi)?;
        for bi in 0..b {
            for s in 0..sl {
                let src = &yi.data()[(bi * sl + s) * d..(bi * sl + s + 1) * d];
                let dst = (bi * e * sl + ei * sl + s) * d;
                slot_out[dst..dst + d].copy_from_slice(src);
            }
        }
    }
    let slot_out = Tensor::new(&[b, e * sl, d], slot_out)?;
    // Combine: softmax over (e, s) for every token.
    let combine = ops::softmax_rows(logits)?; // [B, L, E*Sl]
    let output = ops::matmul(&combine, &slot_out)?;
    let cw = combine.to_f64_vec();
    let token_weights = cw
        .chunks(e * sl)
        .map(|row| (0..e).map(|ei| row[ei * sl..(ei + 1) * sl].iter().sum()).collect())
        .collect();
    debug_assert_eq!(output.shape(), [b, l, d]);
    Ok(SoftMoeOut { output, token_weights })
}

/// Slot-based soft MoE; `slots` is `[E, Sl, d]`, `x` is `[B, L, d]`.
pub fn soft_moe_forward<T: Scalar>(bank: &ExpertBank<T>, slots: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(soft_moe_detailed(bank, slots, x)?.output)
}

pub fn soft_moe_detailed<T: Scalar>(bank: &ExpertBank<T>, slots: &Tensor<T>, x: &Tensor<T>) -> Result<SoftMoeOut<T>> {
    let logits = slot_logits(slots, x, None, 1.0)?;
    soft_core(bank, slots, x, &logits)
}

/// Soft MoE with logits `⟨x,S⟩ ω_slot + (⟨h,S⟩ ⊙ α) ω_bev`; `h_bev` is a
/// per-sample vector `[B, d]`.
#[allow(clippy::too_many_arguments)]
pub fn soft_moe_bev_bias_forward<T: Scalar>(
    bank: &ExpertBank<T>,
    slots: &Tensor<T>,
    x: &Tensor<T>,
    h_bev: &Tensor<T>,
    alpha: &[f64],
    omega_slot: f64,
    omega_bev: f64,
) -> Result<Tensor<T>> {
    let logits = slot_logits(slots, x, Some((h_bev, alpha, omega_bev)), omega_slot)?;
    Ok(soft_core(bank, slots, x, &logits)?.output)
}

// ---------------------------------------------------------------------------
// dispersion

/// Mean squared distance of the realized parameters `θ(w) = Σ_e w_e θ_e`
/// from their mean over `samples`.
///
/// Evaluated through the Gram matrix of expert differences `θ_e - θ_0`, so
/// it is exactly zero for identical samples and unaffected by adding a
/// common offset to every expert.
pub fn parameter_dispersion<T: Scalar>(bank: &ExpertBank<T>, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(CoreError::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    let e = bank.experts();
    let theta: Vec<Vec<f64>> = (0..e).map(|i| bank.flatten(i)).collect();
    let diffs: Vec<Vec<f64>> = theta[1..]
        .iter()
        .map(|t| t.iter().zip(&theta[0]).map(|(a, b)| a - b).collect())
        .collect();
    let mut gram = vec![0.0; (e - 1) * (e - 1)];
    for i in 0..e - 1 {
        for j in i..e - 1 {
            let v: f64 = diffs[i].iter().zip(&diffs[j]).map(|(a, b)| a * b).sum();
            gram[i * (e - 1) + j] = v;
            gram[j * (e - 1) + i] = v;
        }
    }
    dispersion_from_gram(&gram, e, samples)
}

/// Same as [`parameter_dispersion`] with a precomputed difference Gram
/// matrix (`(E-1) x (E-1)`).
pub fn dispersion_from_gram(gram: &[f64], experts: usize, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(CoreError::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let pivot = &samples[0];
    let shifted: Vec<Vec<f64>> = samples
        .iter()
        .map(|w| w.iter().zip(pivot).map(|(a, b)| a - b).collect())
        .collect();
    let mean: Vec<f64> = (0..experts)
        .map(|j| shifted.iter().map(|w| w[j]).sum::<f64>() / n)
        .collect();
    let k = experts - 1;
    let mut total = 0.0;
    for w in &shifted {
        let dv: Vec<f64> = (1..experts).map(|j| w[j] - mean[j]).collect();
        let mut q = 0.0;
        for i in 0..k {
            for j in 0..k {
                q += dv[i] * gram[i * k + j] * dv[j];
            }
        }
        total += q;
    }
    Ok((total / n).max(0.0))
}

/// Both sides of `Σ_e π_e‖W_e - W(π)‖² = ½ Σ_{e≠e'} π_e π_e' ‖W_e - W_e'‖²`
/// on flattened expert vectors.
pub fn dispersion_identity_sides(experts: &[Vec<f64>], pi: &[f64]) -> (f64, f64) {
    let dim = experts[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| experts.iter().zip(pi).map(|(w, p)| p * w[j]).sum())
        .collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let lhs: f64 = experts.iter().zip(pi).map(|(w, p)| p * sq(w, &mean)).sum();
    let mut rhs = 0.0;
    for (i, wi) in experts.iter().enumerate() {
        for (j, wj) in experts.iter().enumerate() {
            if i != j {
                rhs += pi[i] * pi[j] * sq(wi, wj);
            }
        }
    }
    (lhs, 0.5 * rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_bank(vals: &[f64]) -> ExpertBank<f64> {
        let t = |v: f64| Tensor::from_f64(&[1, 1], &[v]).unwrap();
        ExpertBank::new(
            vals.iter().map(|&v| t(v)).collect(),
            vals.iter().map(|&v| t(v)).collect(),
            vals.iter().map(|&v| t(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn weighted_mean_of_scalar_experts() {
        let m = merge_experts(&scalar_bank(&[0.0, 4.0]), &[0.25, 0.75]).unwrap();
        assert_eq!(m.w1.item(), 3.0);
    }

    #[test]
    fn one_hot_merge_is_bit_exact() {
        let bank = ExpertBank::<f64>::random(3, 4, 6, &mut Rng::new(1, 0));
        let m = merge_experts(&bank, &[0.0, 1.0, 0.0]).unwrap();
        assert!(m.w1.bit_eq(&bank.w1[1]) && m.w2.bit_eq(&bank.w2[1]) && m.w3.bit_eq(&bank.w3[1]));
    }

    #[test]
    fn simplex_violations_are_rejected() {
        let bank = scalar_bank(&[0.0, 1.0]);
        assert!(merge_experts(&bank, &[0.7, 0.7]).is_err());
        assert!(merge_experts(&bank, &[1.5, -0.5]).is_err());
        assert!(merge_experts(&bank, &[1.0]).is_err());
    }

    #[test]
    fn unit_swiglu() {
        let f = scalar_bank(&[1.0]).expert(0);
        let y = swiglu_forward(&Tensor::from_f64(&[1, 1], &[1.0]).unwrap(), &f).unwrap();
        assert!((y.item() - 0.731_058_578_630_004_9).abs() < 1e-15);
        let z = swiglu_forward(&Tensor::zeros(&[2, 1]), &f).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_mixture_by_hand() {
        // F_e(x) = silu(w x) * (w x) * w with w in {1, 2} at x = 1.
        let bank = scalar_bank(&[1.0, 2.0]);
        let x = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let want = 0.5 * silu(1.0) + 0.5 * silu(2.0) * 2.0 * 2.0;
        let got = ideal_mixture_output(&bank, &[0.5, 0.5], &x).unwrap().item();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn top_k_ties_pick_lowest_index() {
        assert_eq!(top_k_weights(&[0.25, 0.25, 0.25, 0.25], 1), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(top_k_weights(&[0.1, 0.3, 0.3, 0.3], 2), vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn dispersion_two_vertex_example() {
        // ‖θ1 - θ2‖ = 2 with scalar experts 0 and 2/√3 in three matrices.
        let v = 2.0 / 3f64.sqrt();
        let bank = scalar_bank(&[0.0, v]);
        let d = parameter_dispersion(&bank, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((d - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dispersion_needs_two_samples() {
        let bank = scalar_bank(&[0.0, 1.0]);
        assert!(matches!(
            parameter_dispersion(&bank, &[vec![0.5, 0.5]]),
            Err(CoreError::InsufficientData { .. })
        ));
    }

    #[test]
    fn identity_hand_example() {
        let (l, r) = dispersion_identity_sides(&[vec![0.0], vec![2.0]], &[0.5, 0.5]);
        assert_eq!((l, r), (1.0, 1.0));
    }
}
