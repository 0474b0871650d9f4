//! Adaptor heads `NL(x) = norm(x·A)` between the towers and the loss terms.

use serde::{Deserialize, Serialize};

use super::encoder::Linear;
use crate::error::{Error, Result};
use crate::losses::HeadOutputs;
use crate::numerics::{dot, DenseMatrix, MIN_ROW_NORM};
use crate::scalar::Scalar;

/// Which adaptor heads are learned; the others are fixed to the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// `f_h`, `g_h`, `h_f`, `h_g` learned; the image–text term uses plain `f`, `g`.
    #[default]
    Default,
    /// Only the third-tower heads `h_f`, `h_g`.
    ThirdOnly,
    /// Only the main-tower heads `f_h`, `g_h`.
    MainOnly,
    /// All four transfer heads plus `f_g`, `g_f` before the image–text term.
    FullyIndependent,
    /// No learned heads.
    Headless,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Default,
        HeadVariant::ThirdOnly,
        HeadVariant::MainOnly,
        HeadVariant::FullyIndependent,
        HeadVariant::Headless,
    ];

    /// Presence of `[f_g, g_f, f_h, g_h, h_f, h_g]`.
    fn learned(self) -> [bool; 6] {
        match self {
            HeadVariant::Default => [false, false, true, true, true, true],
            HeadVariant::ThirdOnly => [false, false, false, false, true, true],
            HeadVariant::MainOnly => [false, false, true, true, false, false],
            HeadVariant::FullyIndependent => [true; 6],
            HeadVariant::Headless => [false; 6],
        }
    }
}

/// Head slots in parameter order. `None` is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads<T> {
    variant: HeadVariant,
    slots: [Option<Linear<T>>; 6],
}

/// Source tower of each slot: 0 = image, 1 = text, 2 = third.
const SOURCE: [usize; 6] = [0, 1, 0, 1, 2, 2];

impl<T: Scalar> Heads<T> {
    /// Learned heads of `variant`, each initialized to the `dim × dim` identity.
    pub fn identity_init(variant: HeadVariant, dim: usize) -> Self {
        let learned = variant.learned();
        Self {
            variant,
            slots: std::array::from_fn(|k| learned[k].then(|| Linear::identity(dim))),
        }
    }

    /// Heads with explicit matrices for the learned slots, in `[f_g, g_f, f_h, g_h, h_f, h_g]` order.
    pub fn from_matrices(variant: HeadVariant, mut matrices: Vec<DenseMatrix<T>>) -> Result<Self> {
        let learned = variant.learned();
        let expected = learned.iter().filter(|&&b| b).count();
        if matrices.len() != expected {
            return Err(Error::DimMismatch(format!(
                "{variant:?} heads need {expected} matrices, got {}",
                matrices.len()
            )));
        }
        matrices.reverse();
        let mut slots: [Option<Linear<T>>; 6] = Default::default();
        for k in 0..6 {
            if learned[k] {
                let m = matrices.pop().expect("counted");
                if m.rows() != m.cols() {
                    return Err(Error::DimMismatch(format!(
                        "head maps must be square, got {}x{}",
                        m.rows(),
                        m.cols()
                    )));
                }
                slots[k] = Some(Linear::new(m, None)?);
            }
        }
        Ok(Self { variant, slots })
    }

    pub fn variant(&self) -> HeadVariant {
        self.variant
    }

    pub fn matrices(&self) -> Vec<&DenseMatrix<T>> {
        self.slots.iter().flatten().map(|l| &l.weight).collect()
    }

    pub fn num_params(&self) -> usize {
        self.slots.iter().flatten().map(Linear::num_params).sum()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        for l in self.slots.iter().flatten() {
            if l.input_dim() != dim {
                return Err(Error::DimMismatch(format!(
                    "head is {}x{}, embeddings have {dim} dims",
                    l.input_dim(),
                    l.output_dim()
                )));
            }
        }
        Ok(())
    }

    /// Normalized inputs for every loss term.
    pub fn apply(
        &self,
        raw_f: &DenseMatrix<T>,
        raw_g: &DenseMatrix<T>,
        raw_h: &DenseMatrix<T>,
    ) -> Result<HeadOutputs<T>> {
        Ok(self.forward_cached(raw_f, raw_g, raw_h)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        raw_f: &DenseMatrix<T>,
        raw_g: &DenseMatrix<T>,
        raw_h: &DenseMatrix<T>,
    ) -> Result<(HeadOutputs<T>, HeadCache<T>)> {
        let dim = raw_f.cols();
        if raw_g.shape() != raw_f.shape() || raw_h.shape() != raw_f.shape() {
            return Err(Error::DimMismatch(format!(
                "tower outputs {:?}, {:?}, {:?} disagree",
                raw_f.shape(),
                raw_g.shape(),
                raw_h.shape()
            )));
        }
        self.check_dim(dim)?;
        let sources = [raw_f, raw_g, raw_h];
        let mut outs = Vec::with_capacity(6);
        let mut norms = Vec::with_capacity(6);
        for k in 0..6 {
            let x = sources[SOURCE[k]];
            let y = match &self.slots[k] {
                Some(l) => l.forward(x)?,
                None => x.clone(),
            };
            let (out, n) = normalize_rows_cached(&y)?;
            outs.push(out);
            norms.push(n);
        }
        let mut it = outs.into_iter();
        let mut next = || it.next().expect("six slots");
        let (f, g, f_h, g_h, h_f, h_g) = (next(), next(), next(), next(), next(), next());
        let out = HeadOutputs {
            f,
            g,
            f_h,
            h_f,
            g_h,
            h_g,
        };
        Ok((out.clone(), HeadCache { out, norms }))
    }

    /// Backpropagates gradients of the head outputs. Returns `(d raw_f, d raw_g, d raw_h)`
    /// and appends head parameter gradients to `grads`.
    pub(crate) fn backward(
        &self,
        raw: [&DenseMatrix<T>; 3],
        cache: &HeadCache<T>,
        d_out: &HeadOutputs<T>,
        grads: &mut Vec<T>,
    ) -> Result<[DenseMatrix<T>; 3]> {
        let outs = slot_order(&cache.out);
        let d_outs = slot_order(d_out);
        let mut d_raw: [DenseMatrix<T>; 3] = std::array::from_fn(|k| DenseMatrix::zeros(raw[k].rows(), raw[k].cols()));
        for k in 0..6 {
            let dy = normalize_rows_backward(outs[k], &cache.norms[k], d_outs[k]);
            let src = SOURCE[k];
            let dx = match &self.slots[k] {
                Some(l) => l.backward(raw[src], &dy, grads)?,
                None => dy,
            };
            d_raw[src].add_assign(&dx)?;
        }
        Ok(d_raw)
    }

    pub fn write_params(&self, out: &mut Vec<T>) {
        for l in self.slots.iter().flatten() {
            l.write_params(out);
        }
    }

    pub fn read_params<'a>(&mut self, mut src: &'a [T]) -> Result<&'a [T]> {
        for l in self.slots.iter_mut().flatten() {
            src = l.read_params(src)?;
        }
        Ok(src)
    }
}

fn slot_order<T>(o: &HeadOutputs<T>) -> [&DenseMatrix<T>; 6] {
    [&o.f, &o.g, &o.f_h, &o.g_h, &o.h_f, &o.h_g]
}

#[derive(Clone, Debug)]
pub(crate) struct HeadCache<T> {
    out: HeadOutputs<T>,
    norms: Vec<Vec<T>>,
}

/// Normalized rows together with the original row norms.
pub(crate) fn normalize_rows_cached<T: Scalar>(y: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, Vec<T>)> {
    let mut out = y.clone();
    let mut norms = Vec::with_capacity(y.rows());
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if !(n.as_f64() >= MIN_ROW_NORM) {
            return Err(Error::ZeroRow { row: i });
        }
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Projection Jacobian `(I − ŷŷᵀ)/‖y‖` applied row by row.
pub(crate) fn normalize_rows_backward<T: Scalar>(
    out: &DenseMatrix<T>,
    norms: &[T],
    d_out: &DenseMatrix<T>,
) -> DenseMatrix<T> {
    let mut d = d_out.clone();
    for (i, &n) in norms.iter().enumerate() {
        let proj = dot(out.row(i), d_out.row(i));
        let yhat = out.row(i);
        for (v, &u) in d.row_mut(i).iter_mut().zip(yhat) {
            *v = (*v - u * proj) / n;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, l2_normalize_rows, RngStream};

    type M = DenseMatrix<f64>;

    fn raw(seed: u64, n: usize, d: usize) -> M {
        let mut rng = RngStream::new(seed);
        M::new(n, d, rng.normal_vec(n * d, 1.0)).unwrap()
    }

    #[test]
    fn headless_outputs_are_plain_normalized_inputs() {
        let (f, g, h) = (raw(1, 3, 2), raw(2, 3, 2), raw(3, 3, 2));
        let heads = Heads::<f64>::identity_init(HeadVariant::Headless, 2);
        assert_eq!(heads.num_params(), 0);
        let out = heads.apply(&f, &g, &h).unwrap();
        let (nf, ng, nh) = (
            l2_normalize_rows(&f).unwrap(),
            l2_normalize_rows(&g).unwrap(),
            l2_normalize_rows(&h).unwrap(),
        );
        assert_eq!(out.f, nf);
        assert_eq!(out.f_h, nf);
        assert_eq!(out.g, ng);
        assert_eq!(out.g_h, ng);
        assert_eq!(out.h_f, nh);
        assert_eq!(out.h_g, nh);
    }

    #[test]
    fn identity_init_matches_headless() {
        let (f, g, h) = (raw(4, 5, 3), raw(5, 5, 3), raw(6, 5, 3));
        let headless = Heads::<f64>::identity_init(HeadVariant::Headless, 3)
            .apply(&f, &g, &h)
            .unwrap();
        for v in HeadVariant::ALL {
            let out = Heads::<f64>::identity_init(v, 3).apply(&f, &g, &h).unwrap();
            assert_eq!(out, headless, "{v:?}");
        }
    }

    #[test]
    fn fully_independent_hand_computed() {
        let f = M::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = M::from_rows(&[[0.0, 1.0]]).unwrap();
        let h = M::from_rows(&[[1.0, 0.0]]).unwrap();
        let swap = M::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let diag = M::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        let ident = M::identity(2);
        let heads = Heads::from_matrices(
            HeadVariant::FullyIndependent,
            vec![swap.clone(), diag.clone(), ident.clone(), ident.clone(), diag, swap],
        )
        .unwrap();
        let out = heads.apply(&f, &g, &h).unwrap();
        let s5 = 5f64.sqrt();
        // f_g = norm([1,2]·swap) = norm([2,1])
        assert_eq!(out.f.row(0), &[2.0 / s5, 1.0 / s5]);
        // g_f = norm([0,1]·diag) = [0,1]
        assert_eq!(out.g.row(0), &[0.0, 1.0]);
        assert_eq!(out.f_h.row(0), &[1.0 / s5, 2.0 / s5]);
        // h_f = norm([1,0]·diag) = [1,0]; h_g = norm([1,0]·swap) = [0,1]
        assert_eq!(out.h_f.row(0), &[1.0, 0.0]);
        assert_eq!(out.h_g.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_matrix_count_or_dim_rejected() {
        assert!(Heads::<f64>::from_matrices(HeadVariant::Default, vec![M::identity(2)]).is_err());
        let heads = Heads::<f64>::identity_init(HeadVariant::Default, 3);
        assert!(matches!(
            heads.apply(&raw(1, 2, 2), &raw(2, 2, 2), &raw(3, 2, 2)),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn normalization_jacobian_matches_differences() {
        let y = raw(9, 3, 4);
        let w = raw(10, 3, 4);
        let (out, norms) = normalize_rows_cached(&y).unwrap();
        let analytic = normalize_rows_backward(&out, &norms, &w);
        let loss = |p: &[f64]| {
            let m = M::new(3, 4, p.to_vec()).unwrap();
            let n = l2_normalize_rows(&m).unwrap();
            n.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let numeric = finite_difference_gradient(loss, y.as_slice(), 1e-6);
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }
}
