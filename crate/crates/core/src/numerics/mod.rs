//! Dense linear algebra, activations, stable log-softmax and a finite-difference
//! gradient oracle.

mod matrix;
mod rng;

pub use matrix::{dot, norm, DenseMatrix};
pub use rng::RngStream;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row norms below this are rejected by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-30;

/// Scales each row to unit L2 norm.
pub fn l2_normalize_rows<T: Scalar>(m: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n.as_f64() >= MIN_ROW_NORM) {
            return Err(Error::ZeroRow { row: i });
        }
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

/// `S[i][j] = ⟨F_i, G_j⟩`.
pub fn similarity_matrix<T: Scalar>(f: &DenseMatrix<T>, g: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    f.matmul_t(g)
}

/// Numerically stable `ln Σ exp(x_k)`.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let mut acc = T::zero();
    for &x in xs {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::NonPositiveTemperature(tau.as_f64()));
    }
    Ok(())
}

/// Row-wise `S/τ − logsumexp(S/τ)`.
pub fn log_softmax_rows<T: Scalar>(s: &DenseMatrix<T>, tau: T) -> Result<DenseMatrix<T>> {
    check_tau(tau)?;
    let mut out = s.map(|v| v / tau);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = logsumexp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `S/τ`.
pub fn softmax_rows<T: Scalar>(s: &DenseMatrix<T>, tau: T) -> Result<DenseMatrix<T>> {
    Ok(log_softmax_rows(s, tau)?.map(|v| v.exp()))
}

/// Central differences `(f(p + ε e_k) − f(p − ε e_k)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<T, F>(loss_fn: F, params: &[T], eps: T) -> Vec<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    let mut p = params.to_vec();
    let two_eps = eps + eps;
    (0..params.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + eps;
            let up = loss_fn(&p);
            p[k] = orig - eps;
            let down = loss_fn(&p);
            p[k] = orig;
            (up - down) / two_eps
        })
        .collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh form: `½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = DenseMatrix<f64>;

    fn m(rows: &[&[f64]]) -> M {
        M::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize_rows(&m(&[&[3.0, 4.0]])).unwrap(), m(&[&[0.6, 0.8]]));
        assert_eq!(l2_normalize_rows(&M::identity(2)).unwrap(), M::identity(2));
        assert_eq!(
            l2_normalize_rows(&m(&[&[2.0, 0.0], &[0.0, -5.0]])).unwrap(),
            m(&[&[1.0, 0.0], &[0.0, -1.0]])
        );
        assert!(matches!(
            l2_normalize_rows(&m(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(Error::ZeroRow { row: 1 })
        ));
        assert!(l2_normalize_rows(&m(&[&[1e-31, 0.0]])).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(
            similarity_matrix(&M::identity(2), &M::identity(2)).unwrap(),
            M::identity(2)
        );
        assert_eq!(
            similarity_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap(),
            m(&[&[0.0]])
        );
        assert_eq!(
            similarity_matrix(&m(&[&[1.0, 1.0]]), &m(&[&[2.0, 3.0]])).unwrap(),
            m(&[&[5.0]])
        );
        assert!(matches!(
            similarity_matrix(&M::zeros(1, 2), &M::zeros(1, 3)),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn log_softmax_examples() {
        let ln2 = 2f64.ln();
        let out = log_softmax_rows(&m(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert!((out.get(0, 0) + ln2).abs() < 1e-15);
        assert!((out.get(0, 1) + ln2).abs() < 1e-15);

        let out = log_softmax_rows(&m(&[&[1000.0, 0.0]]), 1.0).unwrap();
        assert!(out.is_finite());
        assert!(out.get(0, 0).abs() < 1e-300);
        assert_eq!(out.get(0, 1), -1000.0);

        let c = (1.0 + (-2f64).exp()).ln();
        let out = log_softmax_rows(&m(&[&[2.0, 0.0]]), 1.0).unwrap();
        assert!((out.get(0, 0) + c).abs() < 1e-15);
        assert!((out.get(0, 1) + 2.0 + c).abs() < 1e-15);

        assert!(matches!(
            log_softmax_rows(&m(&[&[0.0]]), 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(log_softmax_rows(&m(&[&[0.0]]), -1.0).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|p: &[f64]| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_: &[f64]| 4.0, &[1.0, -2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_difference_gradient(|p: &[f64]| p.iter().sum(), &[0.3, -7.0, 12.5], 1e-5);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for i in -40..=40 {
            let x = i as f64 * 0.15;
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = M> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| M::new(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(a in matrix_strategy(5, 4)) {
            prop_assume!(a.row_norms().iter().all(|&n| n > 1e-3));
            let once = l2_normalize_rows(&a).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            for n in once.row_norms() {
                prop_assert!((n - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn similarity_transposes_exactly(a in matrix_strategy(4, 3), b in matrix_strategy(6, 3)) {
            let ab = similarity_matrix(&a, &b).unwrap();
            let ba = similarity_matrix(&b, &a).unwrap();
            prop_assert_eq!(ab, ba.transpose());
        }

        #[test]
        fn log_softmax_rows_sum_to_one(a in matrix_strategy(4, 7), tau in 0.01f64..5.0) {
            let out = log_softmax_rows(&a, tau).unwrap();
            for row in out.row_iter() {
                let s: f64 = row.iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let a = DenseMatrix::<f32>::from_rows(&[[3.0f32, 4.0]]).unwrap();
        let n = l2_normalize_rows(&a).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-6);
        let ls = log_softmax_rows(&DenseMatrix::<f32>::from_rows(&[[80.0f32, 0.0]]).unwrap(), 0.5).unwrap();
        assert!(ls.is_finite());
    }
}
