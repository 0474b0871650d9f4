//! Downstream protocols over trained models: retrieval, zero-shot and few-shot
//! classification, calibration, OOD detection, convex-combination inference and
//! prediction-difference tables.

pub mod metrics;
pub mod probe;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use metrics::{
    argmax, brier, ece, max_probabilities, msp_ood_metrics, nll, recall_at_1, zero_shot_classify, OodMetrics,
    DEFAULT_ECE_BINS,
};
pub use probe::{
    few_shot_probe, RidgeClassifier, SoftmaxProbe, DEFAULT_PROBE_SEEDS, DEFAULT_RIDGE_LAMBDA, DEFAULT_SHOTS,
};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, DenseMatrix};
use crate::scalar::Scalar;
use crate::towers::{HeadVariant, Modality, Model};

/// `α·h + (1−α)·f`, row-renormalized. At `α = 0` and `α = 1` the selected input is
/// returned as is, so endpoint scoring matches single-tower scoring bit for bit.
pub fn convex_combine<T: Scalar>(f_e: &DenseMatrix<T>, h_e: &DenseMatrix<T>, alpha: f64) -> Result<DenseMatrix<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    f_e.check_same_shape(h_e)?;
    if alpha == 0.0 {
        return Ok(f_e.clone());
    }
    if alpha == 1.0 {
        return Ok(h_e.clone());
    }
    let a = T::lit(alpha);
    let b = T::lit(1.0 - alpha);
    l2_normalize_rows(&f_e.zip_with(h_e, |f, h| a * h + b * f)?)
}

/// Five disagreement proportions between models A, B and C.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDiffTable {
    pub a: String,
    pub b: String,
    pub c: String,
    pub a_correct_b_wrong: f64,
    pub b_correct_a_wrong: f64,
    pub c_ne_a: f64,
    pub c_ne_b: f64,
    pub c_ne_both: f64,
}

impl PredictionDiffTable {
    pub const CSV_HEADER: &'static str = "a,b,c,a_correct_b_wrong,b_correct_a_wrong,c_ne_a,c_ne_b,c_ne_both";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.a,
            self.b,
            self.c,
            self.a_correct_b_wrong,
            self.b_correct_a_wrong,
            self.c_ne_a,
            self.c_ne_b,
            self.c_ne_both
        )
    }
}

/// Counts, as fractions of all points: A right and B wrong, B right and A wrong,
/// C differing from A, C differing from B, and C differing from both.
pub fn prediction_difference(
    preds_a: &[usize],
    preds_b: &[usize],
    preds_c: &[usize],
    labels: &[usize],
) -> Result<PredictionDiffTable> {
    let n = labels.len();
    if preds_a.len() != n || preds_b.len() != n || preds_c.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{} / {} / {} predictions for {n} labels",
            preds_a.len(),
            preds_b.len(),
            preds_c.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut counts = [0usize; 5];
    for i in 0..n {
        let (a, b, c, y) = (preds_a[i], preds_b[i], preds_c[i], labels[i]);
        counts[0] += usize::from(a == y && b != y);
        counts[1] += usize::from(b == y && a != y);
        counts[2] += usize::from(c != a);
        counts[3] += usize::from(c != b);
        counts[4] += usize::from(c != a && c != b);
    }
    let f = |k: usize| counts[k] as f64 / n as f64;
    Ok(PredictionDiffTable {
        a: "baseline".into(),
        b: "lit".into(),
        c: "3t".into(),
        a_correct_b_wrong: f(0),
        b_correct_a_wrong: f(1),
        c_ne_a: f(2),
        c_ne_b: f(3),
        c_ne_both: f(4),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub shots: usize,
    pub probe_seeds: usize,
    pub ridge_lambda: f64,
    pub ece_bins: usize,
    /// Number of synthetic OOD images scored against the eval split; `None` skips OOD.
    pub ood_count: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            shots: DEFAULT_SHOTS,
            probe_seeds: DEFAULT_PROBE_SEEDS,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            ece_bins: DEFAULT_ECE_BINS,
            ood_count: Some(1024),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall1_img2txt: f64,
    pub recall1_txt2img: f64,
    pub zeroshot_acc: f64,
    pub fewshot_acc: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub fpr95: Option<f64>,
    pub ece_bins: usize,
    pub alpha: Option<f64>,
    /// Eval-split example ids, with the zero-shot prediction and label of each.
    pub ids: Vec<usize>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "recall1_img2txt,recall1_txt2img,zeroshot_acc,fewshot_acc,nll,brier,ece,auroc,aupr,fpr95";

    /// Metric values in [`CSV_HEADER`](Self::CSV_HEADER) order; missing OOD values are empty.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.recall1_img2txt,
            self.recall1_txt2img,
            self.zeroshot_acc,
            self.fewshot_acc,
            self.nll,
            self.brier,
            self.ece,
            opt(self.auroc),
            opt(self.aupr),
            opt(self.fpr95)
        )
    }

    /// `id,y,pred` lines for the per-example predictions.
    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("id,y,pred\n");
        for ((id, y), p) in self.ids.iter().zip(&self.labels).zip(&self.predictions) {
            writeln!(s, "{id},{y},{p}").expect("string write");
        }
        s
    }

    /// Metric fields only, in header order.
    pub fn metrics(&self) -> [Option<f64>; 10] {
        [
            Some(self.recall1_img2txt),
            Some(self.recall1_txt2img),
            Some(self.zeroshot_acc),
            Some(self.fewshot_acc),
            Some(self.nll),
            Some(self.brier),
            Some(self.ece),
            self.auroc,
            self.aupr,
            self.fpr95,
        ]
    }
}

/// Embeddings and representations one report is computed from.
pub struct EvalInputs<'a, T> {
    /// Normalized eval-split image embeddings, row `i` paired with `text_embeds` row `i`.
    pub image_embeds: &'a DenseMatrix<T>,
    pub text_embeds: &'a DenseMatrix<T>,
    /// Normalized class embeddings, `C × D`.
    pub label_embeds: &'a DenseMatrix<T>,
    pub labels: &'a [usize],
    pub ids: &'a [usize],
    pub probe_train: &'a DenseMatrix<T>,
    pub probe_train_labels: &'a [usize],
    pub probe_eval: &'a DenseMatrix<T>,
    pub tau: T,
    /// Normalized image embeddings of OOD inputs.
    pub ood_embeds: Option<&'a DenseMatrix<T>>,
}

pub fn evaluate_embeddings<T: Scalar>(inputs: &EvalInputs<'_, T>, opts: &EvalOptions) -> Result<EvalReport> {
    let (r_i2t, r_t2i) = recall_at_1(inputs.image_embeds, inputs.text_embeds)?;
    let (preds, probs) = zero_shot_classify(inputs.image_embeds, inputs.label_embeds, inputs.tau)?;
    if preds.len() != inputs.labels.len() {
        return Err(Error::LengthMismatch("eval embeddings and labels disagree".into()));
    }
    let correct = preds.iter().zip(inputs.labels).filter(|(p, y)| p == y).count();
    let fewshot = few_shot_probe(
        inputs.probe_train,
        inputs.probe_train_labels,
        inputs.probe_eval,
        inputs.labels,
        opts.shots,
        opts.probe_seeds,
        opts.ridge_lambda,
    )?;
    let ood = match inputs.ood_embeds {
        Some(out) => {
            let (_, out_probs) = zero_shot_classify(out, inputs.label_embeds, inputs.tau)?;
            Some(msp_ood_metrics(
                &max_probabilities(&probs),
                &max_probabilities(&out_probs),
            )?)
        }
        None => None,
    };
    Ok(EvalReport {
        recall1_img2txt: r_i2t,
        recall1_txt2img: r_t2i,
        zeroshot_acc: correct as f64 / preds.len() as f64,
        fewshot_acc: fewshot,
        nll: nll(&probs, inputs.labels)?,
        brier: brier(&probs, inputs.labels)?,
        ece: ece(&probs, inputs.labels, opts.ece_bins)?,
        auroc: ood.map(|o| o.auroc),
        aupr: ood.map(|o| o.aupr),
        fpr95: ood.map(|o| o.fpr95),
        ece_bins: opts.ece_bins,
        alpha: None,
        ids: inputs.ids.to_vec(),
        predictions: preds,
        labels: inputs.labels.to_vec(),
    })
}

/// Which image representation scores the eval split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ImageView {
    /// The main image tower; few-shot probes use its pre-normalization output.
    Standard,
    /// Normalized main-tower embeddings everywhere, few-shot included.
    Main,
    /// Normalized third-tower embeddings everywhere.
    Third,
    /// `convex_combine(main, third, α)` everywhere. Requires a headless model.
    Combined(f64),
}

struct Split<T> {
    ids: Vec<usize>,
    image: DenseMatrix<T>,
    text: DenseMatrix<T>,
    labels: Vec<usize>,
}

fn split<T: Scalar>(ds: &SyntheticDataset, ids: Vec<usize>) -> Split<T> {
    Split {
        image: ds.image.select_rows(&ids).cast(),
        text: ds.text.select_rows(&ids).cast(),
        labels: ds.labels_of(&ids),
        ids,
    }
}

/// Evaluates `model` on the eval split of `ds`. Zero-shot label embeddings come from the
/// text tower applied to each class's canonical text features.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    ds: &SyntheticDataset,
    view: ImageView,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let ImageView::Combined(alpha) = view {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        if model.heads().variant() != HeadVariant::Headless || model.frozen().is_none() {
            return Err(Error::InvalidConfig(
                "convex combination needs a headless three-tower checkpoint".into(),
            ));
        }
    }
    if matches!(view, ImageView::Third | ImageView::Combined(_))
        && model.frozen().map(|f| f.pretrained().modality) != Some(Modality::Image)
    {
        return Err(Error::InvalidConfig(
            "third-tower image views need an image-side pretrained table".into(),
        ));
    }
    let train = split::<T>(ds, ds.train_ids());
    let eval = split::<T>(ds, ds.eval_ids());
    let text_embeds = model.text_embeddings(&eval.text, Some(&eval.ids))?;
    let label_embeds = model.text_embeddings(&ds.class_text.cast(), None)?;
    let ood_features: Option<DenseMatrix<T>> = opts.ood_count.map(|n| ds.ood_images(n).cast());

    let embed = |x: &DenseMatrix<T>, ids: Option<&[usize]>| -> Result<DenseMatrix<T>> {
        match view {
            ImageView::Standard | ImageView::Main => model.image_embeddings(x, ids),
            ImageView::Third => model.third_embeddings(x, ids),
            ImageView::Combined(a) => {
                convex_combine(&model.image_embeddings(x, ids)?, &model.third_embeddings(x, ids)?, a)
            }
        }
    };
    let image_embeds = embed(&eval.image, Some(&eval.ids))?;
    let ood_embeds = match &ood_features {
        Some(x) => Some(embed(x, None)?),
        None => None,
    };
    let (probe_train, probe_eval) = match view {
        ImageView::Standard => (
            model.image_prelogits(&train.image, Some(&train.ids))?,
            model.image_prelogits(&eval.image, Some(&eval.ids))?,
        ),
        _ => (embed(&train.image, Some(&train.ids))?, image_embeds.clone()),
    };
    let mut report = evaluate_embeddings(
        &EvalInputs {
            image_embeds: &image_embeds,
            text_embeds: &text_embeds,
            label_embeds: &label_embeds,
            labels: &eval.labels,
            ids: &eval.ids,
            probe_train: &probe_train,
            probe_train_labels: &train.labels,
            probe_eval: &probe_eval,
            tau: model.tau(),
            ood_embeds: ood_embeds.as_ref(),
        },
        opts,
    )?;
    if let ImageView::Combined(a) = view {
        report.alpha = Some(a);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = DenseMatrix<f64>;

    #[test]
    fn convex_examples() {
        let f = M::from_rows(&[[1.0, 0.0], [0.6, 0.8]]).unwrap();
        let h = M::from_rows(&[[0.0, 1.0], [0.8, -0.6]]).unwrap();
        assert_eq!(convex_combine(&f, &h, 0.0).unwrap(), f);
        assert_eq!(convex_combine(&f, &h, 1.0).unwrap(), h);
        let mid = convex_combine(&f, &h, 0.5).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mid.get(0, 0) - r).abs() < 1e-15 && (mid.get(0, 1) - r).abs() < 1e-15);
        assert!(matches!(convex_combine(&f, &h, 1.5), Err(Error::AlphaOutOfRange(_))));
        assert!(matches!(convex_combine(&f, &h, -0.1), Err(Error::AlphaOutOfRange(_))));
        assert!(convex_combine(&f, &M::identity(3), 0.5).is_err());
    }

    #[test]
    fn prediction_difference_examples() {
        let y = [0, 1, 2, 1];
        let t = prediction_difference(&y, &y, &y, &y).unwrap();
        assert_eq!(
            [
                t.a_correct_b_wrong,
                t.b_correct_a_wrong,
                t.c_ne_a,
                t.c_ne_b,
                t.c_ne_both
            ],
            [0.0; 5]
        );

        let wrong = [1, 2, 0, 0];
        let t = prediction_difference(&y, &wrong, &wrong, &y).unwrap();
        assert_eq!(t.a_correct_b_wrong, 1.0);
        assert_eq!(t.b_correct_a_wrong, 0.0);
        assert_eq!(t.c_ne_a, 1.0);
        assert_eq!(t.c_ne_b, 0.0);

        let other = [2, 0, 1, 2];
        let t = prediction_difference(&y, &wrong, &other, &y).unwrap();
        assert_eq!(t.c_ne_both, 1.0);

        assert!(matches!(
            prediction_difference(&y, &y[..2], &y, &y),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn report_csv_shape() {
        let r = EvalReport {
            recall1_img2txt: 0.5,
            recall1_txt2img: 0.25,
            zeroshot_acc: 1.0,
            fewshot_acc: 0.75,
            nll: 0.1,
            brier: 0.2,
            ece: 0.0,
            auroc: None,
            aupr: None,
            fpr95: None,
            ece_bins: 10,
            alpha: None,
            ids: vec![3, 7],
            predictions: vec![1, 0],
            labels: vec![1, 1],
        };
        assert_eq!(r.csv_row(), "0.5,0.25,1,0.75,0.1,0.2,0,,,");
        assert_eq!(
            r.csv_row().split(',').count(),
            EvalReport::CSV_HEADER.split(',').count()
        );
        assert_eq!(r.predictions_csv(), "id,y,pred\n3,1,1\n7,1,0\n");
    }
}
