//! Flow-matching objective and Euler sampling.
//!
//! Noise sits at t = 1 and data at t = 0: `x_t = t ε + (1 - t) a` with
//! target velocity `u = ε - a`.

use samoe_numerics::{Graph, Rng, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn;
use crate::params::Bound;

pub const TIME_MIN: f64 = 0.001;
pub const TIME_MAX: f64 = 0.999;
pub const MIN_PERIOD: f64 = 4e-3;
pub const MAX_PERIOD: f64 = 4.0;
pub const DEFAULT_STEPS: usize = 10;

/// Maps a uniform draw to `τ = Beta(1.5, 1) * 0.999 + 0.001`, clamped to
/// at most 0.999. `Beta(α, 1)` has inverse CDF `u^(1/α)`.
pub fn time_from_uniform(u: f64) -> f64 {
    (u.powf(1.0 / 1.5) * 0.999 + 0.001).min(TIME_MAX)
}

pub fn sample_time(rng: &mut Rng) -> f64 {
    time_from_uniform(rng.uniform())
}

/// `(x_τ, u)` for actions `a` and noise `eps`.
pub fn interpolate<T: Scalar>(a: &Tensor<T>, eps: &Tensor<T>, tau: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let t = T::from_f64(tau);
    let x = eps.zip_map(a, |e, a| t * e + (T::ONE - t) * a)?;
    let u = eps.zip_map(a, |e, a| e - a)?;
    Ok((x, u))
}

/// One training instance.
#[derive(Clone, Debug)]
pub struct FlowSample<T: Scalar> {
    pub a: Tensor<T>,
    pub eps: Tensor<T>,
    pub tau: f64,
    pub x_tau: Tensor<T>,
    pub u: Tensor<T>,
}

impl<T: Scalar> FlowSample<T> {
    pub fn draw(a: Tensor<T>, rng: &mut Rng) -> Result<Self> {
        let eps = rng.normal_tensor(a.shape(), 1.0);
        let tau = sample_time(rng);
        let (x_tau, u) = interpolate(&a, &eps, tau)?;
        Ok(FlowSample { a, eps, tau, x_tau, u })
    }
}

/// Geometric periods from [`MIN_PERIOD`] to [`MAX_PERIOD`].
pub fn periods(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![MIN_PERIOD];
    }
    let ratio = (MAX_PERIOD / MIN_PERIOD).powf(1.0 / (count - 1) as f64);
    (0..count).map(|i| MIN_PERIOD * ratio.powi(i as i32)).collect()
}

/// `[sin(2πτ/p_i) .., cos(2πτ/p_i) ..]`, length `dim`.
pub fn time_embedding<T: Scalar>(tau: f64, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(CoreError::Config(format!(
            "time embedding width must be even, got {dim}"
        )));
    }
    let ps = periods(dim / 2);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut v: Vec<T> = ps.iter().map(|p| T::from_f64((two_pi * tau / p).sin())).collect();
    v.extend(ps.iter().map(|p| T::from_f64((two_pi * tau / p).cos())));
    Ok(Tensor::new(&[dim], v)?)
}

/// Suffix tokens `MLP([x ψ_act ∥ γ(τ)])` for a batch: `x` is `[B, K, 2]`,
/// one τ per sample; returns `[B, K, D]`.
pub fn suffix_tokens<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, taus: &[f64], width: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, k) = (s[0], s[1]);
    let act = g.matmul(x, p.get("flow/act/w")?)?;
    let mut emb = Vec::with_capacity(b * k * width);
    for &t in taus {
        let e = time_embedding::<T>(t, width)?;
        for _ in 0..k {
            emb.extend_from_slice(e.data());
        }
    }
    let time = g.constant(Tensor::new(&[b, k, width], emb)?);
    let cat = g.concat(&[act, time], 2)?;
    let h = nn::linear_named(g, p, "flow/mlp1", cat)?;
    let h = g.silu(h);
    nn::linear_named(g, p, "flow/mlp2", h)
}

/// `(1/K) Σ_k ‖v_k - u_k‖²` averaged over the batch, for `[B, K, 2]`.
pub fn flow_loss_graph<T: Scalar>(g: &mut Graph<T>, v: Var, u: Var) -> Result<Var> {
    let d = g.sub(v, u)?;
    let sq = g.square(d);
    let per_step = g.sum_axis(sq, 2)?;
    Ok(g.mean_all(per_step))
}

/// Plain flow loss for one `[K, 2]` trajectory.
pub fn flow_loss<T: Scalar>(v: &Tensor<T>, u: &Tensor<T>) -> Result<f64> {
    let k = v.shape()[0].max(1);
    let d = v.zip_map(u, |a, b| a - b)?;
    Ok(d.data().iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>() / k as f64)
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` to `t = 0` with `steps` explicit
/// Euler steps, starting from `x1`.
pub fn euler_from<T: Scalar>(
    mut v_fn: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
    x1: Tensor<T>,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(CoreError::Config("Euler integration needs at least one step".into()));
    }
    let dt = -1.0 / steps as f64;
    let mut x = x1;
    for i in 0..steps {
        let t = 1.0 + i as f64 * dt;
        let v = v_fn(&x, t)?;
        if !v.all_finite() {
            return Err(CoreError::Integration { step: i });
        }
        let dtt = T::from_f64(dt);
        x = x.zip_map(&v, |a, b| a + dtt * b)?;
    }
    Ok(x)
}

/// Draws `x1 ~ N(0, I)` of `shape` and integrates to t = 0.
pub fn euler_sample<T: Scalar>(
    v_fn: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
    shape: &[usize],
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let x1 = rng.normal_tensor(shape, 1.0);
    euler_from(v_fn, x1, steps)
}

/// The exact conditional field `v(x, t) = (x - a)/t` of a point mass at `a`.
pub fn point_mass_field<T: Scalar>(a: &Tensor<T>) -> impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>> + '_ {
    move |x, t| {
        let inv = T::from_f64(1.0 / t);
        Ok(x.zip_map(a, |xv, av| (xv - av) * inv)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_boundaries() {
        assert_eq!(time_from_uniform(1.0), TIME_MAX);
        assert_eq!(time_from_uniform(0.0), TIME_MIN);
        let t = time_from_uniform(0.5);
        assert!((0.5f64.powf(2.0 / 3.0) - 0.629_960_524_947_436_6).abs() < 1e-15);
        assert!((t - (0.629_960_524_947_436_6 * 0.999 + 0.001)).abs() < 1e-15);
        assert!((t - 0.63033).abs() < 1e-5);
    }

    #[test]
    fn interpolation_endpoints_and_example() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let e = Tensor::<f64>::from_f64(&[1, 2], &[-0.3, 0.7]).unwrap();
        let (x0, u) = interpolate(&a, &e, 0.0).unwrap();
        assert_eq!(x0, a);
        assert_eq!(u.to_vec(), vec![-1.3, -1.3]);
        assert_eq!(interpolate(&a, &e, 1.0).unwrap().0, e);
        let (x, u) = interpolate(&a, &Tensor::zeros(&[1, 2]), 0.5).unwrap();
        assert_eq!(x.to_vec(), vec![0.5, 1.0]);
        assert_eq!(u.to_vec(), vec![-1.0, -2.0]);
    }

    #[test]
    fn embedding_properties() {
        let z = time_embedding::<f64>(0.0, 8).unwrap();
        assert_eq!(&z.data()[..4], &[0.0; 4]);
        assert_eq!(&z.data()[4..], &[1.0; 4]);
        assert_eq!(periods(1), vec![MIN_PERIOD]);
        let p = periods(5);
        assert!((p[4] - MAX_PERIOD).abs() < 1e-12);
        assert!(time_embedding::<f32>(0.3, 3).is_err());
        let e = time_embedding::<f64>(0.37, 64).unwrap();
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn loss_examples() {
        let u = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flow_loss(&u, &u).unwrap(), 0.0);
        let v = u
            .zip_map(
                &Tensor::from_f64(&[3, 2], &[1., 0., 1., 0., 1., 0.]).unwrap(),
                |a, b| a + b,
            )
            .unwrap();
        assert_eq!(flow_loss(&v, &u).unwrap(), 1.0);
    }

    #[test]
    fn zero_field_returns_noise() {
        let mut r1 = Rng::new(4, 0);
        let out = euler_sample(|x: &Tensor<f64>, _| Ok(Tensor::zeros(x.shape())), &[6, 2], 10, &mut r1).unwrap();
        let mut r2 = Rng::new(4, 0);
        assert_eq!(out, r2.normal_tensor(&[6, 2], 1.0));
    }

    #[test]
    fn point_mass_is_integrated_exactly() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        for n in [1, 3, 10] {
            let x = euler_sample(point_mass_field(&a), &[1, 2], n, &mut Rng::new(n as u64, 0)).unwrap();
            assert!(x.max_abs_diff(&a) <= 1e-5, "N = {n}");
        }
    }

    #[test]
    fn non_finite_velocity_reports_step() {
        let err = euler_from(
            |x: &Tensor<f64>, t| Ok(if t < 0.75 { x.map(|_| f64::NAN) } else { x.clone() }),
            Tensor::zeros(&[1, 2]),
            4,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Integration { step: 2 }));
    }
}
