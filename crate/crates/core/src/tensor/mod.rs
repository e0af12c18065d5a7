//! Dense tensors and the gradient tape.

pub mod kernels;
mod tape;
mod value;

pub use tape::{BatchMoments, BnNormalization, Tape, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Central differences of a scalar function of one tensor, in f64 for the
    /// perturbation bookkeeping.
    fn finite_diff(x: &Tensor, h: f32, f: &dyn Fn(&Tensor) -> f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.push(((f(&plus) as f64 - f(&minus) as f64) / (2.0 * h as f64)) as f32);
        }
        out
    }

    fn rel_err(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1.0)))
            .fold(0.0, f32::max)
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[4]));
        let s = t.softmax(a).unwrap();
        assert!(close(t.value(s).data(), &[0.25; 4], 1e-7));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let mut expected = [0.0f32; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    expected[i * 2 + j] += a.data()[i * 3 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a), t.constant(b));
        let c = t.matmul(va, vb).unwrap();
        assert!(close(t.value(c).data(), &expected, 1e-6));
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let (stride, pad) = (2, 1);
        let (oh, ow) = ((5 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1);
        let mut expected = vec![0.0f32; 2 * 4 * oh * ow];
        for n in 0..2 {
            for o in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += x.data()[((n * 3 + c) * 5 + iy as usize) * 6 + ix as usize]
                                        * w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        expected[((n * 4 + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let mut t = Tape::new();
        let (vx, vw) = (t.constant(x), t.constant(w));
        let y = t.conv2d(vx, vw, stride, pad).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 4, oh, ow]);
        assert!(close(t.value(y).data(), &expected, 1e-5));
    }

    #[test]
    fn backward_square_sum() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mean_is_uniform() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[5]));
        let loss = t.mean(x).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| (g - 0.2).abs() < 1e-7));
    }

    #[test]
    fn backward_rejects_non_scalar_and_consumed_tape() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[3]));
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(crate::HexaError::Contract(_))));
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.recorded_ops(), 0);
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn input_gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![0.3, -1.0, 2.0]));
        let loss = t.sum(x);
        assert_eq!(t.input_gradient(loss, x).unwrap().data(), &[1.0; 3]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn input_gradient_disconnected_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![0.3, -1.0]));
        let w = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let loss = t.sum(w);
        assert_eq!(t.input_gradient(loss, x).unwrap().data(), &[0.0, 0.0]);
        let c = t.constant(Tensor::zeros(&[2]));
        assert!(t.input_gradient(loss, c).is_err());
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = t.param(Tensor::scalar(2.0));
        let y = t.mul(a, s).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(t.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[6, 5], 3.0, &mut rng));
        let y = t.l2_normalize(x).unwrap();
        for r in 0..6 {
            let n: f32 = t.value(y).row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_graph_records_nothing() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::ones(&[2, 2]));
        let b = t.matmul(a, a).unwrap();
        let _ = t.relu(b);
        assert_eq!(t.recorded_ops(), 0);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let weights = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let gamma = Tensor::from_vec(vec![1.3, 0.7]);
        let beta = Tensor::from_vec(vec![0.1, -0.2]);
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let vx = t.param(x.clone());
            let vg = t.constant(gamma.clone());
            let vb = t.constant(beta.clone());
            let (y, _) = t.batch_norm(vx, vg, vb, BnNormalization::Batch, 1e-5).unwrap();
            let w = t.constant(weights.clone());
            let p = t.mul(y, w).unwrap();
            let loss = t.sum(p);
            (t.value(loss).item().unwrap(), t.input_gradient(loss, vx).unwrap())
        };
        let (_, analytic) = f(&x);
        let numeric = finite_diff(&x, 1e-2, &|x| f(x).0);
        assert!(rel_err(analytic.data(), &numeric) < 1e-2, "{:?} {:?}", analytic.data(), numeric);
    }

    #[test]
    fn random_three_layer_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let w1 = Tensor::randn(&[5, 6], 0.5, &mut rng);
            let w2 = Tensor::randn(&[6, 3], 0.5, &mut rng);
            let b1 = Tensor::randn(&[6], 0.1, &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let f = |w1: &Tensor| {
                let mut t = Tape::new();
                let vx = t.constant(x.clone());
                let vw1 = t.param(w1.clone());
                let vb1 = t.param(b1.clone());
                let vw2 = t.param(w2.clone());
                let h = t.matmul(vx, vw1).unwrap();
                let h = t.add_bias(h, vb1).unwrap();
                let h = t.exp(h);
                let h = t.add_scalar(h, 1.0);
                let h = t.log(h);
                let o = t.matmul(h, vw2).unwrap();
                let lp = t.log_softmax(o).unwrap();
                let picked = t.pick(lp, &labels).unwrap();
                let loss = t.sum(picked);
                let value = t.value(loss).item().unwrap();
                t.backward(loss).unwrap();
                (value, t.grad(vw1).unwrap().clone())
            };
            let (_, analytic) = f(&w1);
            let numeric = finite_diff(&w1, 1e-2, &|w| f(w).0);
            assert!(rel_err(analytic.data(), &numeric) < 1e-3, "{:?}\n{:?}", analytic.data(), numeric);
        }
    }

    #[test]
    fn relu_mlp_matches_finite_differences_at_small_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut checked = 0;
        while checked < 5 {
            let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let ws: Vec<Tensor> = [(4, 5), (5, 5), (5, 2)]
                .iter()
                .map(|&(i, o)| Tensor::randn(&[i, o], 0.6, &mut rng))
                .collect();
            let forward = |w0: &Tensor, min_pre: &mut f32| {
                let mut t = Tape::new();
                let mut h = t.constant(x.clone());
                let v0 = t.param(w0.clone());
                for (li, w) in ws.iter().enumerate() {
                    let vw = if li == 0 { v0 } else { t.constant(w.clone()) };
                    h = t.matmul(h, vw).unwrap();
                    if li < 2 {
                        *min_pre = t.value(h).data().iter().fold(*min_pre, |m, v| m.min(v.abs()));
                        h = t.relu(h);
                    }
                }
                let sq = t.mul(h, h).unwrap();
                let loss = t.sum(sq);
                let value = t.value(loss).item().unwrap();
                t.backward(loss).unwrap();
                (value, t.grad(v0).unwrap().clone())
            };
            let mut min_pre = f32::INFINITY;
            let (_, analytic) = forward(&ws[0], &mut min_pre);
            // Resample instances whose pre-activations sit near a relu kink.
            if min_pre < 1e-2 {
                continue;
            }
            let numeric = finite_diff(&ws[0], 1e-3, &|w| { let mut scratch = f32::MAX; forward(w, &mut scratch).0 });
            assert!(rel_err(analytic.data(), &numeric) < 1e-3, "{:?}\n{:?}", analytic.data(), numeric);
            checked += 1;
        }
    }
}
