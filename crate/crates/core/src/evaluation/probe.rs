//! Linear probes on frozen representations: closed-form one-vs-all ridge for the
//! few-shot protocol and softmax regression for full-data probing.

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, DenseMatrix, RngStream};
use crate::scalar::Scalar;
use crate::training::{adam_step, AdamState, TrainConfig};

use super::metrics::argmax;

pub const DEFAULT_SHOTS: usize = 10;
pub const DEFAULT_PROBE_SEEDS: usize = 3;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;

const TAG_SHOTS: u64 = 0x5407;

/// Solves `A·X = B` for symmetric positive definite `A` by Cholesky factorization.
pub fn solve_spd(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> Result<DenseMatrix<f64>> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "cannot solve {}x{} system with {} right-hand rows",
            a.rows(),
            a.cols(),
            b.rows()
        )));
    }
    let mut l = DenseMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::InvalidConfig("ridge system is not positive definite".into()));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

fn with_intercept<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<f64> {
    DenseMatrix::from_fn(x.rows(), x.cols() + 1, |i, j| {
        if j < x.cols() {
            x.get(i, j).as_f64()
        } else {
            1.0
        }
    })
}

/// Ridge regression of one-hot targets on `x` plus an intercept column, which is
/// penalized like every other weight.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeClassifier {
    /// `(d + 1) × C`, last row is the intercept.
    pub weights: DenseMatrix<f64>,
}

impl RidgeClassifier {
    pub fn fit<T: Scalar>(x: &DenseMatrix<T>, labels: &[usize], num_classes: usize, lambda: f64) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} rows for {} labels",
                x.rows(),
                labels.len()
            )));
        }
        let xa = with_intercept(x);
        let y = DenseMatrix::from_fn(labels.len(), num_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let mut gram = xa.t_matmul(&xa)?;
        for i in 0..gram.rows() {
            let v = gram.get(i, i) + lambda;
            gram.set(i, i, v);
        }
        Ok(Self {
            weights: solve_spd(&gram, &xa.t_matmul(&y)?)?,
        })
    }

    pub fn predict<T: Scalar>(&self, x: &DenseMatrix<T>) -> Result<Vec<usize>> {
        let scores = with_intercept(x).matmul(&self.weights)?;
        Ok(scores.row_iter().map(argmax).collect())
    }
}

/// Mean eval accuracy over `seeds` probes, each fit on `shots` examples per class drawn
/// from the training representations.
pub fn few_shot_probe<T: Scalar>(
    train_repr: &DenseMatrix<T>,
    train_labels: &[usize],
    eval_repr: &DenseMatrix<T>,
    eval_labels: &[usize],
    shots: usize,
    seeds: usize,
    lambda: f64,
) -> Result<f64> {
    if train_repr.rows() != train_labels.len() || eval_repr.rows() != eval_labels.len() {
        return Err(Error::LengthMismatch("representations and labels disagree".into()));
    }
    if eval_labels.is_empty() || seeds == 0 {
        return Err(Error::EmptyDataset);
    }
    let num_classes = train_labels.iter().chain(eval_labels).max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in train_labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < shots {
            return Err(Error::InsufficientShots {
                class,
                available: members.len(),
                required: shots,
            });
        }
    }
    let mut total = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = RngStream::derive(seed, TAG_SHOTS);
        let mut chosen = Vec::with_capacity(shots * num_classes);
        for members in &by_class {
            let perm = rng.permutation(members.len());
            chosen.extend(perm[..shots].iter().map(|&k| members[k]));
        }
        let labels: Vec<usize> = chosen.iter().map(|&i| train_labels[i]).collect();
        let probe = RidgeClassifier::fit(&train_repr.select_rows(&chosen), &labels, num_classes, lambda)?;
        let preds = probe.predict(eval_repr)?;
        let correct = preds.iter().zip(eval_labels).filter(|(p, y)| p == y).count();
        total += correct as f64 / eval_labels.len() as f64;
    }
    Ok(total / seeds as f64)
}

/// Multinomial logistic regression on standardized features, fit by full-batch Adam.
/// Used as the general-purpose linear probe; the few-shot protocol uses ridge.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(d + 1) × C`, last row is the bias.
    weights: DenseMatrix<f64>,
}

impl SoftmaxProbe {
    pub fn fit<T: Scalar>(
        x: &DenseMatrix<T>,
        labels: &[usize],
        num_classes: usize,
        iters: usize,
        l2: f64,
    ) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::LengthMismatch(format!(
                "{} rows for {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for row in x.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64() / n as f64;
            }
        }
        for row in x.row_iter() {
            for ((s, m), v) in scale.iter_mut().zip(&mean).zip(row) {
                *s += (v.as_f64() - m).powi(2) / n as f64;
            }
        }
        let scale: Vec<f64> = scale
            .into_iter()
            .map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: DenseMatrix::zeros(d + 1, num_classes),
        };
        let xs = probe.standardize(x);
        let onehot = DenseMatrix::from_fn(n, num_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new((d + 1) * num_classes);
        let decay = vec![false; (d + 1) * num_classes];
        for _ in 0..iters {
            let probs = softmax_rows(&xs.matmul(&probe.weights)?, 1.0)?;
            let mut grad = xs.t_matmul(&probs.sub(&onehot)?)?.scale(1.0 / n as f64);
            for r in 0..d {
                for c in 0..num_classes {
                    let g = grad.get(r, c) + l2 * probe.weights.get(r, c);
                    grad.set(r, c, g);
                }
            }
            let mut w = probe.weights.clone().into_vec();
            adam_step(&mut w, &mut state, grad.as_slice(), 0.05, &config, &decay)?;
            probe.weights = DenseMatrix::new(d + 1, num_classes, w)?;
        }
        Ok(probe)
    }

    fn standardize<T: Scalar>(&self, x: &DenseMatrix<T>) -> DenseMatrix<f64> {
        let d = x.cols();
        DenseMatrix::from_fn(x.rows(), d + 1, |i, j| {
            if j < d {
                (x.get(i, j).as_f64() - self.mean[j]) * self.scale[j]
            } else {
                1.0
            }
        })
    }

    pub fn predict<T: Scalar>(&self, x: &DenseMatrix<T>) -> Result<Vec<usize>> {
        Ok(self
            .standardize(x)
            .matmul(&self.weights)?
            .row_iter()
            .map(argmax)
            .collect())
    }

    /// Fraction of rows of `x` classified as `labels`.
    pub fn accuracy<T: Scalar>(&self, x: &DenseMatrix<T>, labels: &[usize]) -> Result<f64> {
        let preds = self.predict(x)?;
        if preds.len() != labels.len() || labels.is_empty() {
            return Err(Error::LengthMismatch("accuracy needs one label per row".into()));
        }
        Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = DenseMatrix<f64>;

    #[test]
    fn cholesky_solves_known_system() {
        let a = M::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let b = M::from_rows(&[[2.0], [1.0]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        // 4x + 2y = 2, 2x + 3y = 1 → x = 0.5, y = 0
        assert!((x.get(0, 0) - 0.5).abs() < 1e-15);
        assert!(x.get(1, 0).abs() < 1e-15);
        assert!(solve_spd(&M::from_rows(&[[0.0]]).unwrap(), &M::from_rows(&[[1.0]]).unwrap()).is_err());
    }

    #[test]
    fn one_hot_representations_are_separable() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let x = M::from_fn(60, 3, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
        let acc = few_shot_probe(&x, &labels, &x, &labels, 10, 3, 1e-3).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn unrelated_labels_give_chance() {
        let mut rng = RngStream::new(42);
        let n = 4000;
        let x = M::new(n, 4, rng.normal_vec(4 * n, 1.0)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(2)).collect();
        let (tr, ev) = labels.split_at(2000);
        let acc = few_shot_probe(
            &x.select_rows(&(0..2000).collect::<Vec<_>>()),
            tr,
            &x.select_rows(&(2000..n).collect::<Vec<_>>()),
            ev,
            10,
            3,
            1e-3,
        )
        .unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn softmax_probe_separates_linear_classes() {
        let mut rng = RngStream::new(9);
        let x = M::new(400, 2, rng.normal_vec(800, 1.0)).unwrap();
        let labels: Vec<usize> = x.row_iter().map(|r| usize::from(r[0] + 0.5 * r[1] > 0.0)).collect();
        let probe = SoftmaxProbe::fit(&x, &labels, 2, 300, 0.0).unwrap();
        assert!(probe.accuracy(&x, &labels).unwrap() > 0.97);
    }

    #[test]
    fn too_few_shots() {
        let x = M::identity(4);
        let err = few_shot_probe(&x, &[0, 0, 1, 1], &x, &[0, 0, 1, 1], 3, 1, 1e-3).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientShots {
                class: 0,
                available: 2,
                required: 3
            }
        ));
    }
}
