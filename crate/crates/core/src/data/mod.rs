//! Synthetic paired image/text data drawn from shared latent factors, the simulated
//! pretrained classifier that produces the third-tower table, and file I/O.

pub mod io;
mod pretrain;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use io::{read_matrix, write_matrix, ManifestEntry};
pub use pretrain::{
    load_pretrained, pretrain_classifier, save_pretrained, PretrainConfig, PretrainManifest, PRETRAINED_FILE,
};

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix, RngStream};
use crate::scalar::Scalar;
use crate::towers::Batch;

/// Fraction of pairs assigned to the training split.
pub const TRAIN_FRACTION_NUM: usize = 4;
pub const TRAIN_FRACTION_DEN: usize = 5;

const TAG_MIXING: u64 = 0x11;
const TAG_PROTOTYPES: u64 = 0x12;
const TAG_PAIRS: u64 = 0x13;
const TAG_SPLIT: u64 = 0x14;
const TAG_OOD: u64 = 0x15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    pub img_dim: usize,
    pub txt_dim: usize,
    pub num_classes: usize,
    pub num_pairs: usize,
    pub noise_sigma: f64,
    /// Latent dimensions the pretrained classifier's labels depend on.
    pub visible_dims: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            img_dim: 24,
            txt_dim: 20,
            num_classes: 8,
            num_pairs: 4096,
            noise_sigma: 0.1,
            visible_dims: 8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Default spec with a pretrained classifier that sees only 3 latent dims.
    pub fn deficient() -> Self {
        Self {
            visible_dims: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SpecInvalid(m));
        if self.latent_dim == 0 || self.img_dim == 0 || self.txt_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_pairs < self.num_classes {
            return fail(format!(
                "num_pairs ({}) must be at least num_classes ({})",
                self.num_pairs, self.num_classes
            ));
        }
        if self.visible_dims == 0 || self.visible_dims > self.latent_dim {
            return fail(format!(
                "visible_dims must lie in 1..={}, got {}",
                self.latent_dim, self.visible_dims
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Seeded generative parameters shared by every pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    /// `img_dim × k`.
    pub image_mixing: DenseMatrix<f64>,
    /// `txt_dim × k`.
    pub text_mixing: DenseMatrix<f64>,
    /// `C × k`, unit rows.
    pub prototypes: DenseMatrix<f64>,
}

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.latent_dim;
        let mut rng = RngStream::derive(spec.seed, TAG_MIXING);
        let std = 1.0 / (k as f64).sqrt();
        let image_mixing = DenseMatrix::new(spec.img_dim, k, rng.normal_vec(spec.img_dim * k, std))?;
        let text_mixing = DenseMatrix::new(spec.txt_dim, k, rng.normal_vec(spec.txt_dim * k, std))?;
        let mut rng = RngStream::derive(spec.seed, TAG_PROTOTYPES);
        let raw = DenseMatrix::new(spec.num_classes, k, rng.normal_vec(spec.num_classes * k, 1.0))?;
        let prototypes = crate::numerics::l2_normalize_rows(&raw)?;
        Ok(Self {
            image_mixing,
            text_mixing,
            prototypes,
        })
    }

    /// Class whose prototype, restricted to the first `dims` coordinates, has the
    /// largest dot product with `u`. Ties go to the lowest index.
    pub fn label(&self, u: &[f64], dims: usize) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..self.prototypes.rows() {
            let s = dot(&self.prototypes.row(c)[..dims], &u[..dims]);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        best
    }

    /// Noise-free text features of each class: the text mixing applied to the
    /// prototype scaled to the typical latent norm `√k`.
    pub fn class_text(&self) -> DenseMatrix<f64> {
        let k = self.prototypes.cols();
        let scaled = self.prototypes.scale((k as f64).sqrt());
        scaled.matmul_t(&self.text_mixing).expect("latent widths agree")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// `num_pairs × img_dim`.
    pub image: DenseMatrix<f64>,
    /// `num_pairs × txt_dim`.
    pub text: DenseMatrix<f64>,
    /// `num_pairs × k`.
    pub latent: DenseMatrix<f64>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    /// `C × txt_dim` canonical text features per class, for zero-shot label embeddings.
    pub class_text: DenseMatrix<f64>,
}

/// Draws the dataset described by `spec`. Pure function of the spec, seed included.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let gen = Generator::new(spec)?;
    let (n, k) = (spec.num_pairs, spec.latent_dim);
    let mut rng = RngStream::derive(spec.seed, TAG_PAIRS);
    let mut latent = Vec::with_capacity(n * k);
    let mut image_noise = Vec::with_capacity(n * spec.img_dim);
    let mut text_noise = Vec::with_capacity(n * spec.txt_dim);
    for _ in 0..n {
        latent.extend(rng.normal_vec(k, 1.0));
        image_noise.extend(rng.normal_vec(spec.img_dim, spec.noise_sigma));
        text_noise.extend(rng.normal_vec(spec.txt_dim, spec.noise_sigma));
    }
    let latent = DenseMatrix::new(n, k, latent)?;
    let image = latent
        .matmul_t(&gen.image_mixing)?
        .add(&DenseMatrix::new(n, spec.img_dim, image_noise)?)?;
    let text = latent
        .matmul_t(&gen.text_mixing)?
        .add(&DenseMatrix::new(n, spec.txt_dim, text_noise)?)?;
    let labels = latent.row_iter().map(|u| gen.label(u, k)).collect();

    let perm = RngStream::derive(spec.seed, TAG_SPLIT).permutation(n);
    let n_train = n * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN;
    let mut split = vec![Split::Eval; n];
    for &i in &perm[..n_train] {
        split[i] = Split::Train;
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        image,
        text,
        latent,
        labels,
        split,
        class_text: gen.class_text(),
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn train_ids(&self) -> Vec<usize> {
        self.ids(Split::Train)
    }

    pub fn eval_ids(&self) -> Vec<usize> {
        self.ids(Split::Eval)
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    /// Labels a classifier that sees only the first `dims` latent coordinates is trained on.
    pub fn partial_labels(&self, dims: usize) -> Result<Vec<usize>> {
        if dims == 0 || dims > self.spec.latent_dim {
            return Err(Error::SpecInvalid(format!(
                "visible dims must lie in 1..={}, got {dims}",
                self.spec.latent_dim
            )));
        }
        let gen = Generator::new(&self.spec)?;
        Ok(self.latent.row_iter().map(|u| gen.label(u, dims)).collect())
    }

    pub fn batch<T: Scalar>(&self, ids: &[usize]) -> Result<Batch<T>> {
        Batch::new(
            self.image.select_rows(ids).cast(),
            self.text.select_rows(ids).cast(),
            ids.to_vec(),
        )
    }

    /// Image features with no latent structure: isotropic Gaussian noise whose per-feature
    /// variance matches the in-distribution average.
    pub fn ood_images(&self, count: usize) -> DenseMatrix<f64> {
        let n = self.image.rows().max(1) as f64;
        let total: f64 = self.image.as_slice().iter().map(|v| v * v).sum();
        let std = (total / (n * self.spec.img_dim as f64)).sqrt();
        let mut rng = RngStream::derive(self.spec.seed, TAG_OOD);
        DenseMatrix::new(count, self.spec.img_dim, rng.normal_vec(count * self.spec.img_dim, std)).expect("sized")
    }
}

/// Contents of a dataset directory's `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: SyntheticSpec,
    pub tensors: Vec<ManifestEntry>,
    pub labels: String,
}

pub const DATASET_FORMAT: &str = "tritower-dataset-v1";

fn tensor<'a>(entries: &'a [ManifestEntry], name: &str) -> Result<&'a ManifestEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Malformed(format!("manifest lists no tensor `{name}`")))
}

/// Writes `manifest.json`, `image.3tmx`, `text.3tmx`, `latent.3tmx`, `class_text.3tmx`
/// and `labels.csv` (header `id,y,split`).
pub fn save_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tensors = vec![
        io::write_entry(dir, "image", "image.3tmx", &ds.image)?,
        io::write_entry(dir, "text", "text.3tmx", &ds.text)?,
        io::write_entry(dir, "latent", "latent.3tmx", &ds.latent)?,
        io::write_entry(dir, "class_text", "class_text.3tmx", &ds.class_text)?,
    ];
    let mut csv = String::from("id,y,split\n");
    for (i, (y, s)) in ds.labels.iter().zip(&ds.split).enumerate() {
        csv.push_str(&format!("{i},{y},{}\n", s.as_str()));
    }
    fs::write(dir.join("labels.csv"), csv)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        spec: ds.spec.clone(),
        tensors,
        labels: "labels.csv".into(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Malformed(format!("unknown dataset format {}", manifest.format)));
    }
    let read = |name: &str| io::read_entry(dir, tensor(&manifest.tensors, name)?);
    let image = read("image")?;
    let text = read("text")?;
    let latent = read("latent")?;
    let class_text = read("class_text")?;

    let csv = fs::read_to_string(dir.join(&manifest.labels))?;
    let mut lines = csv.lines();
    if lines.next() != Some("id,y,split") {
        return Err(Error::Malformed("labels.csv header must be `id,y,split`".into()));
    }
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for (row, line) in lines.enumerate() {
        let bad = || Error::Malformed(format!("labels.csv line {}: `{line}`", row + 2));
        let mut cols = line.split(',');
        let id: usize = cols.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let y: usize = cols.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let s = match cols.next() {
            Some("train") => Split::Train,
            Some("eval") => Split::Eval,
            _ => return Err(bad()),
        };
        if id != row {
            return Err(bad());
        }
        labels.push(y);
        split.push(s);
    }
    let n = labels.len();
    if image.rows() != n || text.rows() != n || latent.rows() != n {
        return Err(Error::Malformed("tensor row counts disagree with labels.csv".into()));
    }
    Ok(SyntheticDataset {
        spec: manifest.spec,
        image,
        text,
        latent,
        labels,
        split,
        class_text,
    })
}
