//! Minimal reverse-mode differentiation core.
//!
//! Operations record onto a [`Tape`]; [`Tape::backward`] emits its own
//! work as tape entries, which is what makes gradient-of-gradient terms
//! (the discriminator's input-gradient penalty) differentiable. Everything
//! is 64-bit; any primitive producing NaN/Inf fails immediately.

mod backward;
mod gradcheck;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::grad_check;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("node {0} does not belong to this record")]
    UnknownNode(usize),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("replay diverged at node {node}")]
    ReplayMismatch { node: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.scalar_value(y), 0.5);
    }

    #[test]
    fn logsumexp_of_two_zeros() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x).unwrap();
        assert_close(t.value(y).data()[0], 2.0f64.ln(), 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.tensor(&t, x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.tensor(&t, x).unwrap().item(), 0.25);
    }

    #[test]
    fn cube_second_derivative_via_double_backward() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let y = t.mul(x2, x).unwrap();
        let g = t.backward(y).unwrap();
        let dy_dx = g.node(x).unwrap();
        assert_close(t.scalar_value(dy_dx), 12.0, 1e-12);
        let g2 = t.backward(dy_dx).unwrap();
        assert_close(g2.tensor(&t, x).unwrap().item(), 12.0, 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g) elementwise.
        let point = Tensor::vector(vec![0.7, -1.3, 0.2]);
        let (a, b) = (2.5, -1.75);

        let build_f = |t: &mut Tape, x: NodeId| -> NodeId {
            let s = t.tanh(x).unwrap();
            t.sum(s).unwrap()
        };
        let build_g = |t: &mut Tape, x: NodeId| -> NodeId {
            let s = t.square(x).unwrap();
            t.sum(s).unwrap()
        };

        let mut t = Tape::new();
        let x = t.var(point.clone());
        let f = build_f(&mut t, x);
        let g = build_g(&mut t, x);
        let af = t.scalar_mul(a, f).unwrap();
        let bg = t.scalar_mul(b, g).unwrap();
        let combo = t.add(af, bg).unwrap();
        let grad_combo = t.backward(combo).unwrap().tensor_or_zeros(&t, x);

        let mut t1 = Tape::new();
        let x1 = t1.var(point.clone());
        let f1 = build_f(&mut t1, x1);
        let gf = t1.backward(f1).unwrap().tensor_or_zeros(&t1, x1);
        let mut t2 = Tape::new();
        let x2 = t2.var(point.clone());
        let g2 = build_g(&mut t2, x2);
        let gg = t2.backward(g2).unwrap().tensor_or_zeros(&t2, x2);

        for i in 0..point.numel() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert_close(grad_combo.data()[i], expect, 1e-12);
        }
    }

    #[test]
    fn differentiable_backward_matches_finite_differences() {
        // f(x) = sum(tanh(x)^2); check d ||grad f||^2 / dx against central
        // differences of ||grad f||^2.
        let point = Tensor::vector(vec![0.3, -0.9, 1.4, 0.05]);

        let norm_sq_of_grad = |t: &mut Tape, x: NodeId| -> Result<NodeId, DiffError> {
            let th = t.tanh(x)?;
            let sq = t.square(th)?;
            let f = t.sum(sq)?;
            let grads = t.backward(f)?;
            let gx = grads.node(x).expect("x participates");
            let gsq = t.square(gx)?;
            t.sum(gsq)
        };

        let err = grad_check(norm_sq_of_grad, &point, 1e-5).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn primitive_gradients_match_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);

        type Builder = fn(&mut Tape, NodeId) -> Result<NodeId, DiffError>;
        let cases: Vec<(&str, Builder)> = vec![
            ("sigmoid", |t, x| {
                let y = t.sigmoid(x)?;
                t.sum(y)
            }),
            ("tanh", |t, x| {
                let y = t.tanh(x)?;
                t.sum(y)
            }),
            ("exp", |t, x| {
                let y = t.exp(x)?;
                t.sum(y)
            }),
            ("softplus", |t, x| {
                let y = t.softplus(x)?;
                t.sum(y)
            }),
            ("square", |t, x| {
                let y = t.square(x)?;
                t.sum(y)
            }),
            ("softmax", |t, x| {
                let y = t.softmax(x)?;
                let w = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.7]));
                t.dot(y, w)
            }),
            ("logsumexp", |t, x| {
                let y = t.logsumexp(x)?;
                t.sum(y)
            }),
            ("mean", |t, x| t.mean(x)),
            ("norm_last", |t, x| {
                let y = t.norm_last(x)?;
                t.sum(y)
            }),
            ("concat_slice", |t, x| {
                let a = t.slice(x, 0, 2)?;
                let b = t.slice(x, 2, 2)?;
                let c = t.concat(&[b, a])?;
                let sq = t.square(c)?;
                t.sum(sq)
            }),
            ("matvec_outer", |t, x| {
                let w = t.constant(Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()));
                let y = t.matvec(w, x)?;
                let o = t.outer(y, x)?;
                let s = t.sum(o)?;
                Ok(s)
            }),
            ("clamp", |t, x| {
                let y = t.clamp(x, -0.9, 0.9)?;
                let sq = t.square(y)?;
                t.sum(sq)
            }),
        ];

        for (name, build) in cases {
            for trial in 0..10 {
                let point = Tensor::vector((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
                // keep clamp inputs away from its kink
                if name == "clamp" && point.data().iter().any(|v| (v.abs() - 0.9).abs() < 1e-3) {
                    continue;
                }
                let err = grad_check(build, &point, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
            }
        }
    }

    #[test]
    fn log_and_sqrt_gradients_on_positive_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10 {
            let point = Tensor::vector((0..4).map(|_| rng.gen_range(0.2..2.0)).collect());
            let err = grad_check(
                |t, x| {
                    let y = t.log(x)?;
                    t.sum(y)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "log: {err}");
            let err = grad_check(
                |t, x| {
                    let y = t.sqrt(x)?;
                    t.sum(y)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "sqrt: {err}");
            let err = grad_check(
                |t, x| {
                    let y = t.recip(x)?;
                    t.sum(y)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "recip: {err}");
        }
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let point = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5]);
        let err = grad_check(
            |t, x| {
                let b = t.constant(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.25, 2.0, 0.125, -1.0]));
                let y = t.matmul(x, b)?;
                let sq = t.square(y)?;
                t.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul: {err}");
    }

    #[test]
    fn grad_check_is_tight_for_quadratics() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::scalar(1.5),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "quadratic central difference is exact: {err}");
    }

    #[test]
    fn min_scalar_routes_gradient_to_smaller_input() {
        let mut t = Tape::new();
        let a = t.var(Tensor::scalar(2.0));
        let b = t.var(Tensor::scalar(5.0));
        let a3 = t.scalar_mul(3.0, a).unwrap();
        let b2 = t.scalar_mul(2.0, b).unwrap();
        let m = t.min_scalar(a3, b2).unwrap();
        assert_eq!(t.scalar_value(m), 6.0);
        let g = t.backward(m).unwrap();
        assert_eq!(g.tensor(&t, a).unwrap().item(), 3.0);
        assert!(g.tensor(&t, b).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(-1.0));
        assert!(matches!(t.log(x), Err(DiffError::NonFinite { .. })));
        let big = t.constant(Tensor::scalar(1e308));
        assert!(matches!(t.exp(big), Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(DiffError::ShapeMismatch { .. })));
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0; 4]));
        assert!(matches!(t.matmul(m, m), Ok(_)));
        let m3 = t.constant(Tensor::matrix(3, 2, vec![1.0; 6]));
        assert!(matches!(t.matmul(m, m3), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut t = Tape::new();
        let x = t.var(Tensor::vector(vec![1.0, 2.0]));
        let y = t.square(x).unwrap();
        assert!(matches!(t.backward(y), Err(DiffError::RootNotScalar(_))));
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let mut t = Tape::new();
        let x = t.var(Tensor::vector(vec![0.3, -1.2, 0.8]));
        let w = t.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6]));
        let h = t.matvec(w, x).unwrap();
        let s = t.sigmoid(h).unwrap();
        let sm = t.softmax(s).unwrap();
        let y = t.sum(sm).unwrap();
        let _ = t.backward(y).unwrap();
        t.replay_check().unwrap();
    }

    #[test]
    fn broadcast_scalar_against_vector() {
        let mut t = Tape::new();
        let v = t.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.var(Tensor::scalar(10.0));
        let y = t.mul(v, s).unwrap();
        assert_eq!(t.value(y).data(), &[10.0, 20.0, 30.0]);
        let total = t.sum(y).unwrap();
        let g = t.backward(total).unwrap();
        assert_eq!(g.tensor(&t, s).unwrap().item(), 6.0);
        assert_eq!(g.tensor(&t, v).unwrap().data(), &[10.0, 10.0, 10.0]);
    }
}
