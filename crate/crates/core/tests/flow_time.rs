use samoe_core::flow::{sample_time, TIME_MAX, TIME_MIN};
use samoe_numerics::Rng;

/// CDF of `Beta(1.5, 1) * 0.999 + 0.001`.
fn cdf(t: f64) -> f64 {
    if t <= TIME_MIN {
        return 0.0;
    }
    ((t - TIME_MIN) / 0.999).min(1.0).powf(1.5)
}

#[test]
fn time_draws_follow_the_shifted_beta() {
    let n = 100_000;
    let mut rng = Rng::new(11, 0);
    let mut xs: Vec<f64> = (0..n).map(|_| sample_time(&mut rng)).collect();
    assert!(xs.iter().all(|&t| (TIME_MIN..=TIME_MAX).contains(&t)));
    xs.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, &t) in xs.iter().enumerate() {
        let f = cdf(t);
        d = d
            .max((f - i as f64 / n as f64).abs())
            .max(((i + 1) as f64 / n as f64 - f).abs());
    }
    assert!(d < 0.02, "KS distance {d}");
    let mean = xs.iter().sum::<f64>() / n as f64;
    assert!((mean - (0.6 * 0.999 + 0.001)).abs() < 5e-3, "mean {mean}");
}
