use proptest::prelude::*;
use samoe_numerics::kernels::{deform_im2col, matmul, permute};
use samoe_numerics::ops::softmax_rows;
use samoe_numerics::{io, Rng, Tensor, Window};

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let n = vals.len();
        let y = softmax_rows(&Tensor::new(&[n], vals).unwrap()).unwrap();
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_f32(vals in prop::collection::vec(-30.0f32..30.0, 1..40)) {
        let n = vals.len();
        let y = softmax_rows(&Tensor::new(&[n], vals).unwrap()).unwrap();
        prop_assert!((y.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = Rng::new(seed, 0);
        let x: Tensor<f64> = rng.normal_tensor(&[n], 3.0);
        let perm = rng.permutation(n);
        let xp = Tensor::from_fn(&[n], |i| x.data()[perm[i]]);
        let y = softmax_rows(&x).unwrap();
        let yp = softmax_rows(&xp).unwrap();
        for i in 0..n {
            prop_assert!((yp.data()[i] - y.data()[perm[i]]).abs() < 1e-15);
        }
    }

    #[test]
    fn ndt_roundtrip_is_bit_exact(seed in any::<u64>(), dims in prop::collection::vec(0usize..5, 0..4)) {
        let mut rng = Rng::new(seed, 0);
        let t: Tensor<f32> = rng.normal_tensor(&dims, 1e3);
        let back: Tensor<f32> = io::decode(&io::encode(&t)).unwrap();
        prop_assert!(back.bit_eq(&t));
        let t64: Tensor<f64> = rng.normal_tensor(&dims, 1e-3);
        let back64: Tensor<f64> = io::decode(&io::encode(&t64)).unwrap();
        prop_assert!(back64.bit_eq(&t64));
    }

    #[test]
    fn matmul_transpose_identity(seed in any::<u64>(), p in 1usize..6, q in 1usize..6, r in 1usize..6) {
        let mut rng = Rng::new(seed, 0);
        let a: Tensor<f64> = rng.normal_tensor(&[p, q], 1.0);
        let b: Tensor<f64> = rng.normal_tensor(&[q, r], 1.0);
        let ab_t = permute(&matmul(&a, &b).unwrap(), &[1, 0]).unwrap();
        let bt_at = matmul(&permute(&b, &[1, 0]).unwrap(), &permute(&a, &[1, 0]).unwrap()).unwrap();
        prop_assert!(ab_t.max_abs_diff(&bt_at) < 1e-12);
    }

    #[test]
    fn integer_offsets_shift_samples(seed in any::<u64>(), dy in -2i32..3, dx in -2i32..3) {
        // A whole-cell offset on a 1x1 window reads the neighbouring cell.
        let mut rng = Rng::new(seed, 0);
        let (h, w) = (5, 6);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 1, h, w], 1.0);
        let mut off = vec![0.0; 2 * h * w];
        for p in 0..h * w {
            off[p] = dy as f64;
            off[h * w + p] = dx as f64;
        }
        let off = Tensor::new(&[1, 2, h, w], off).unwrap();
        let cols = deform_im2col(&x, &off, Window { k: 1, pad: 0 }).unwrap();
        for y in 0..h {
            for xx in 0..w {
                let sy = y as i32 + dy;
                let sx = xx as i32 + dx;
                let want = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    x.get(&[0, 0, sy as usize, sx as usize])
                } else {
                    0.0
                };
                prop_assert_eq!(cols.get(&[0, y * w + xx, 0]), want);
            }
        }
    }
}

#[test]
fn ops_are_bit_reproducible() {
    let run = || {
        let mut rng = Rng::new(3, 0);
        let a: Tensor<f32> = rng.normal_tensor(&[4, 33, 17], 1.0);
        let b: Tensor<f32> = rng.normal_tensor(&[17, 29], 1.0);
        softmax_rows(&matmul(&a, &b).unwrap()).unwrap()
    };
    assert!(run().bit_eq(&run()));
}
