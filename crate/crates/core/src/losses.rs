//! Contrastive objectives: the directional and bidirectional InfoNCE losses, the
//! three-tower combination with its ablation variants, and the analytic gradients
//! used by training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_rows, similarity_matrix, DenseMatrix};
use crate::scalar::Scalar;
use crate::towers::{Batch, Model};

/// Initial temperature for every learnable τ.
pub const DEFAULT_TAU: f64 = 0.07;

/// Inputs to the loss must have row norms within this distance of 1 (in `f64`;
/// see [`Scalar::tolerance`]).
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Learnable temperature, stored as `s = ln(1/τ)` so that `τ = exp(−s)` stays positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature<T> {
    pub log_inv_tau: T,
}

impl<T: Scalar> Temperature<T> {
    pub fn from_tau(tau: T) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::NonPositiveTemperature(tau.as_f64()));
        }
        Ok(Self { log_inv_tau: -tau.ln() })
    }

    #[inline]
    pub fn tau(&self) -> T {
        (-self.log_inv_tau).exp()
    }
}

impl<T: Scalar> Default for Temperature<T> {
    fn default() -> Self {
        Self::from_tau(T::lit(DEFAULT_TAU)).expect("default tau is positive")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_fg: T,
    pub l_fh: T,
    pub l_gh: T,
    pub total: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// Bidirectional InfoNCE between each main tower and the third tower.
    #[default]
    Contrastive,
    /// Mean squared distance between the paired head outputs.
    SquaredError,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    #[default]
    Shared,
    PerTerm,
}

/// One of the three terms of the three-tower objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    ImageText,
    ImageThird,
    TextThird,
}

/// Selects which three-tower objective is optimized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub transfer: TransferKind,
    /// Weight `w` on the two transfer terms.
    pub weight: f64,
    pub temperatures: TemperatureMode,
    /// Leaves one term out; the remaining two are averaged.
    #[serde(default)]
    pub dropped: Option<LossTerm>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            transfer: TransferKind::Contrastive,
            weight: 1.0,
            temperatures: TemperatureMode::Shared,
            dropped: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "transfer weight must be finite and nonnegative, got {}",
                self.weight
            )));
        }
        Ok(())
    }

    pub fn num_temperatures(&self) -> usize {
        match self.temperatures {
            TemperatureMode::Shared => 1,
            TemperatureMode::PerTerm => 3,
        }
    }
}

/// Normalized batches entering the three-tower objective. `f`/`g` feed the image–text
/// term, `f_h`/`h_f` the image–third term and `g_h`/`h_g` the text–third term.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T> {
    pub f: DenseMatrix<T>,
    pub g: DenseMatrix<T>,
    pub f_h: DenseMatrix<T>,
    pub h_f: DenseMatrix<T>,
    pub g_h: DenseMatrix<T>,
    pub h_g: DenseMatrix<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    /// All six slots filled with the same batch.
    pub fn uniform(m: &DenseMatrix<T>) -> Self {
        Self {
            f: m.clone(),
            g: m.clone(),
            f_h: m.clone(),
            h_f: m.clone(),
            g_h: m.clone(),
            h_g: m.clone(),
        }
    }

    fn all(&self) -> [&DenseMatrix<T>; 6] {
        [&self.f, &self.g, &self.f_h, &self.h_f, &self.g_h, &self.h_g]
    }

    fn validate(&self) -> Result<()> {
        let shape = self.f.shape();
        for m in self.all() {
            if m.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "head outputs disagree: {:?} vs {:?}",
                    m.shape(),
                    shape
                )));
            }
            check_normalized(m)?;
        }
        Ok(())
    }
}

/// Temperatures for the three terms; all equal when shared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermTemperatures<T> {
    pub fg: T,
    pub fh: T,
    pub gh: T,
}

impl<T: Scalar> TermTemperatures<T> {
    pub fn shared(tau: T) -> Self {
        Self {
            fg: tau,
            fh: tau,
            gh: tau,
        }
    }
}

fn check_normalized<T: Scalar>(m: &DenseMatrix<T>) -> Result<()> {
    for (i, n) in m.row_norms().into_iter().enumerate() {
        let n = n.as_f64();
        if !((n - 1.0).abs() <= T::tolerance(NORMALIZATION_TOLERANCE)) {
            return Err(Error::NotNormalized { row: i, norm: n });
        }
    }
    Ok(())
}

/// `−(1/N) Σ_i log softmax(S_i/τ)_i`: cross-entropy for picking the diagonal in each row.
pub fn directional_loss<T: Scalar>(s: &DenseMatrix<T>, tau: T) -> Result<T> {
    if s.rows() != s.cols() {
        return Err(Error::NonSquare {
            rows: s.rows(),
            cols: s.cols(),
        });
    }
    let logp = log_softmax_rows(s, tau)?;
    let n = s.rows();
    if n == 0 {
        return Ok(T::zero());
    }
    let mut acc = T::zero();
    for i in 0..n {
        acc += logp.get(i, i);
    }
    Ok(-acc / T::from_usize_lossy(n))
}

/// Symmetric InfoNCE over row-normalized `F` and `G`.
pub fn bidirectional_loss<T: Scalar>(f: &DenseMatrix<T>, g: &DenseMatrix<T>, tau: T) -> Result<T> {
    if f.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", f.shape(), g.shape())));
    }
    check_normalized(f)?;
    check_normalized(g)?;
    let s = similarity_matrix(f, g)?;
    let forward = directional_loss(&s, tau)?;
    let backward = directional_loss(&s.transpose(), tau)?;
    Ok(T::lit(0.5) * (forward + backward))
}

/// `(1/N) Σ_i ‖a_i − b_i‖²`.
pub fn mean_squared_distance<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<T> {
    a.check_same_shape(b)?;
    if a.rows() == 0 {
        return Ok(T::zero());
    }
    let mut acc = T::zero();
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        for (&x, &y) in ra.iter().zip(rb) {
            acc += (x - y) * (x - y);
        }
    }
    Ok(acc / T::from_usize_lossy(a.rows()))
}

/// Coefficients of each term in the combined total.
fn term_coefficients<T: Scalar>(w: T, dropped: Option<LossTerm>) -> (T, T, T) {
    let third = T::one() / T::lit(3.0);
    let half = T::lit(0.5);
    match dropped {
        None => (third, w * third, w * third),
        Some(LossTerm::ImageText) => (T::zero(), w * half, w * half),
        Some(LossTerm::ImageThird) => (half, T::zero(), w * half),
        Some(LossTerm::TextThird) => (half, w * half, T::zero()),
    }
}

fn combine<T: Scalar>(l_fg: T, l_fh: T, l_gh: T, w: T, dropped: Option<LossTerm>) -> T {
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    match dropped {
        None => (l_fg + w * (l_fh + l_gh)) / three,
        Some(LossTerm::ImageText) => w * (l_fh + l_gh) / two,
        Some(LossTerm::ImageThird) => (l_fg + w * l_gh) / two,
        Some(LossTerm::TextThird) => (l_fg + w * l_fh) / two,
    }
}

/// Evaluates any three-tower objective variant.
pub fn three_tower_objective<T: Scalar>(
    out: &HeadOutputs<T>,
    taus: TermTemperatures<T>,
    transfer: TransferKind,
    w: T,
    dropped: Option<LossTerm>,
) -> Result<LossBreakdown<T>> {
    out.validate()?;
    if !(w >= T::zero()) {
        return Err(Error::InvalidConfig(format!("negative transfer weight {w}")));
    }
    let l_fg = bidirectional_loss(&out.f, &out.g, taus.fg)?;
    let (l_fh, l_gh) = match transfer {
        TransferKind::Contrastive => (
            bidirectional_loss(&out.f_h, &out.h_f, taus.fh)?,
            bidirectional_loss(&out.g_h, &out.h_g, taus.gh)?,
        ),
        TransferKind::SquaredError => (
            mean_squared_distance(&out.f_h, &out.h_f)?,
            mean_squared_distance(&out.g_h, &out.h_g)?,
        ),
    };
    Ok(LossBreakdown {
        l_fg,
        l_fh,
        l_gh,
        total: combine(l_fg, l_fh, l_gh, w, dropped),
    })
}

/// `(1/3)(L_fg + L_fh + L_gh)` with one shared temperature.
pub fn three_tower_loss<T: Scalar>(out: &HeadOutputs<T>, tau: T) -> Result<LossBreakdown<T>> {
    weighted_three_tower_loss(out, tau, T::one())
}

/// `(1/3)(L_fg + w·(L_fh + L_gh))`.
pub fn weighted_three_tower_loss<T: Scalar>(out: &HeadOutputs<T>, tau: T, w: T) -> Result<LossBreakdown<T>> {
    three_tower_objective(out, TermTemperatures::shared(tau), TransferKind::Contrastive, w, None)
}

/// Transfer terms replaced by mean squared distances between head outputs.
pub fn l2_transfer_loss<T: Scalar>(out: &HeadOutputs<T>, tau: T, w: T) -> Result<LossBreakdown<T>> {
    three_tower_objective(out, TermTemperatures::shared(tau), TransferKind::SquaredError, w, None)
}

pub fn per_term_temperature_loss<T: Scalar>(
    out: &HeadOutputs<T>,
    tau_fg: T,
    tau_fh: T,
    tau_gh: T,
) -> Result<LossBreakdown<T>> {
    three_tower_objective(
        out,
        TermTemperatures {
            fg: tau_fg,
            fh: tau_fh,
            gh: tau_gh,
        },
        TransferKind::Contrastive,
        T::one(),
        None,
    )
}

/// Gradients of a weighted loss term with respect to its two inputs and `ln(1/τ)`.
#[derive(Clone, Debug)]
pub struct PairGradient<T> {
    pub d_a: DenseMatrix<T>,
    pub d_b: DenseMatrix<T>,
    pub d_log_inv_tau: T,
}

/// Gradient of `coef · L_{a↔b}` for the bidirectional loss at temperature `τ = exp(−s)`.
///
/// With `Z = S/τ`, `∂L/∂Z = ((P_row − I) + (P_col − I)) / 2N` where `P_row` and
/// `P_col` are the row- and column-softmax of `Z`.
pub fn bidirectional_backward<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    log_inv_tau: T,
    coef: T,
) -> Result<PairGradient<T>> {
    let n = a.rows();
    let s = similarity_matrix(a, b)?;
    let inv_tau = log_inv_tau.exp();
    let z = s.scale(inv_tau);
    let one = T::one();
    let p_row = log_softmax_rows(&z, one)?.map(|v| v.exp());
    let p_col = log_softmax_rows(&z.transpose(), one)?.map(|v| v.exp()).transpose();
    let scale = coef * T::lit(0.5) / T::from_usize_lossy(n.max(1));
    let mut dz = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { one + one } else { T::zero() };
            dz.set(i, j, scale * (p_row.get(i, j) + p_col.get(i, j) - delta));
        }
    }
    // Σ dZ⊙Z, with each softmax expectation taken around the matching logit so that
    // equal logits give exactly zero.
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            acc += p_row.get(i, j) * (z.get(i, j) - z.get(i, i));
            acc += p_col.get(i, j) * (z.get(i, j) - z.get(j, j));
        }
    }
    let d_log_inv_tau = scale * acc;
    let ds = dz.scale(inv_tau);
    Ok(PairGradient {
        d_a: ds.matmul(b)?,
        d_b: ds.t_matmul(a)?,
        d_log_inv_tau,
    })
}

/// Gradient of `coef · (1/N) Σ ‖a_i − b_i‖²`.
pub fn squared_distance_backward<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    coef: T,
) -> Result<PairGradient<T>> {
    let scale = coef * T::lit(2.0) / T::from_usize_lossy(a.rows().max(1));
    let d_a = a.zip_with(b, |x, y| scale * (x - y))?;
    let d_b = d_a.map(|v| -v);
    Ok(PairGradient {
        d_a,
        d_b,
        d_log_inv_tau: T::zero(),
    })
}

/// Gradients of the combined objective with respect to each head output and to each
/// term's `ln(1/τ)`.
#[derive(Clone, Debug)]
pub struct ObjectiveGradient<T> {
    pub outputs: HeadOutputs<T>,
    pub d_log_inv_tau: TermTemperatures<T>,
}

pub fn three_tower_objective_backward<T: Scalar>(
    out: &HeadOutputs<T>,
    log_inv_taus: TermTemperatures<T>,
    transfer: TransferKind,
    w: T,
    dropped: Option<LossTerm>,
) -> Result<ObjectiveGradient<T>> {
    let (c_fg, c_fh, c_gh) = term_coefficients(w, dropped);
    let fg = bidirectional_backward(&out.f, &out.g, log_inv_taus.fg, c_fg)?;
    let (fh, gh) = match transfer {
        TransferKind::Contrastive => (
            bidirectional_backward(&out.f_h, &out.h_f, log_inv_taus.fh, c_fh)?,
            bidirectional_backward(&out.g_h, &out.h_g, log_inv_taus.gh, c_gh)?,
        ),
        TransferKind::SquaredError => (
            squared_distance_backward(&out.f_h, &out.h_f, c_fh)?,
            squared_distance_backward(&out.g_h, &out.h_g, c_gh)?,
        ),
    };
    Ok(ObjectiveGradient {
        outputs: HeadOutputs {
            f: fg.d_a,
            g: fg.d_b,
            f_h: fh.d_a,
            h_f: fh.d_b,
            g_h: gh.d_a,
            h_g: gh.d_b,
        },
        d_log_inv_tau: TermTemperatures {
            fg: fg.d_log_inv_tau,
            fh: fh.d_log_inv_tau,
            gh: gh.d_log_inv_tau,
        },
    })
}

/// Loss and gradient of `model` evaluated at the flattened trainable parameters `params`.
/// Frozen components never appear in the gradient vector.
pub fn loss_and_gradients<T: Scalar>(
    model: &Model<T>,
    params: &[T],
    batch: &Batch<T>,
) -> Result<(LossBreakdown<T>, Vec<T>)> {
    let mut m = model.clone();
    m.set_params(params)?;
    m.loss_and_gradients(batch)
}
