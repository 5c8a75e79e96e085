//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes in
//! topological order. Calling [`Tape::backward`] on a scalar node walks the
//! list in reverse and accumulates gradients for every node that requires
//! them. Tapes are cheap and short-lived: training steps and attack
//! iterations build a fresh tape per pass.
//!
//! Values are `f64` throughout so finite-difference gradient checks can run
//! at tight tolerances.

mod ops;
mod tape;

pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. every element of `inputs[which]`,
    /// compared against the tape gradient.
    fn check_grad(
        inputs: &[ArrayD<f64>],
        which: usize,
        f: impl Fn(&Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss);
        let analytic = grads.wrt_or_zeros(vars[which], inputs[which].shape());

        let h = 1e-5;
        // Near-zero elements are compared against the gradient's overall
        // scale; otherwise FD roundoff dominates the relative error.
        let scale = analytic.iter().fold(1e-6_f64, |a, &v| a.max(v.abs()));
        let mut max_err: f64 = 0.0;
        let flat_len = inputs[which].len();
        for k in 0..flat_len {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which].as_slice_mut().unwrap()[k] += h;
            minus[which].as_slice_mut().unwrap()[k] -= h;
            let eval = |ins: &[ArrayD<f64>]| {
                let t = Tape::new();
                let vs: Vec<Var> = ins.iter().map(|a| t.leaf(a.clone())).collect();
                t.scalar(f(&t, &vs))
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[k];
            let denom = fd.abs().max(a.abs()).max(1e-3 * scale);
            max_err = max_err.max((fd - a).abs() / denom);
        }
        assert!(max_err < tol, "finite-difference mismatch: {max_err}");
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        for which in 0..2 {
            check_grad(
                &[a.clone(), b.clone()],
                which,
                |t, v| {
                    let m = t.mul(v[0], v[1]);
                    let s = t.add(m, t.sub(v[0], v[1]));
                    let e = t.exp(t.scale(s, 0.3));
                    t.mean(t.relu(e))
                },
                1e-6,
            );
        }
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let c = randn(&mut rng, &[5, 4]);
        for which in 0..2 {
            check_grad(
                &[a.clone(), b.clone()],
                which,
                |t, v| t.sum(t.matmul(v[0], v[1])),
                1e-6,
            );
        }
        check_grad(
            &[a, c],
            1,
            |t, v| t.sum(t.exp(t.scale(t.matmul_nt(v[0], v[1]), 0.5))),
            1e-6,
        );
    }

    #[test]
    fn conv_pool_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[2, 3, 6, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let bias = randn(&mut rng, &[4]);
        for which in 0..3 {
            check_grad(
                &[x.clone(), w.clone(), bias.clone()],
                which,
                |t, v| {
                    let c = t.conv2d(v[0], v[1], v[2], 1, 1);
                    let p = t.avg_pool2(t.relu(c));
                    t.sum(t.global_avg_pool(p))
                },
                1e-6,
            );
        }
        // strided conv, no padding
        check_grad(
            &[x, w, bias],
            0,
            |t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 2, 0);
                t.mean(t.mul(c, c))
            },
            1e-6,
        );
    }

    #[test]
    fn normalization_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let gamma = randn(&mut rng, &[3]).mapv(|v| v + 2.0);
        let beta = randn(&mut rng, &[3]);
        let rm = ndarray::Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let rv = ndarray::Array1::from_vec(vec![0.9, 1.1, 1.3]);
        for which in 0..3 {
            // mean(y·y) is invariant to x under batch statistics; relu
            // breaks the symmetry so input gradients are non-degenerate.
            check_grad(
                &[x.clone(), gamma.clone(), beta.clone()],
                which,
                |t, v| {
                    let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5);
                    let r = t.relu(y);
                    t.mean(t.mul(r, r))
                },
                1e-5,
            );
            let rm = rm.clone();
            let rv = rv.clone();
            check_grad(
                &[x.clone(), gamma.clone(), beta.clone()],
                which,
                move |t, v| {
                    let y = t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5);
                    t.mean(t.mul(y, y))
                },
                1e-6,
            );
        }
    }

    #[test]
    fn softmax_lse_gather_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[4, 5]);
        check_grad(
            &[x.clone()],
            0,
            |t, v| {
                let ls = t.log_softmax_rows(v[0]);
                t.mean(t.mul(ls, ls))
            },
            1e-6,
        );
        let s = randn(&mut rng, &[4, 4]);
        check_grad(
            &[s.clone()],
            0,
            |t, v| t.sum(t.row_lse_excl_self(v[0])),
            1e-6,
        );
        check_grad(
            &[s],
            0,
            |t, v| {
                let picked = t.gather_pairs(v[0], vec![(0, 1), (2, 3), (1, 0), (0, 1)]);
                t.sum(t.exp(picked))
            },
            1e-6,
        );
        let z = randn(&mut rng, &[3, 4]);
        check_grad(
            &[z],
            0,
            |t, v| {
                let n = t.l2_normalize_rows(v[0]);
                let sim = t.matmul_nt(n, n);
                t.sum(t.row_lse_excl_self(t.scale(sim, 2.0)))
            },
            1e-5,
        );
    }

    #[test]
    fn concat_and_constant_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[4, 3]);
        check_grad(
            &[a.clone(), b.clone()],
            0,
            |t, v| t.sum(t.exp(t.concat_rows(&[v[0], v[1]]))),
            1e-6,
        );
        // constants stop gradients
        let tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.constant(b.clone());
        let loss = tape.mean(tape.concat_rows(&[va, vb]));
        let grads = tape.backward(loss);
        assert!(grads.wrt(va).is_some());
        assert!(grads.wrt(vb).is_none());
    }
}

