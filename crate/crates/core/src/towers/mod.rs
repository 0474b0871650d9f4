//! Encoders, the frozen third tower, adaptor heads and model assembly.

pub(crate) mod checkpoint;
mod encoder;
mod heads;
mod model;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FILE};
pub use encoder::{EncoderCache, EncoderShape, Linear, MlpEncoder};
pub use heads::{HeadVariant, Heads};
pub use model::{Batch, Model, ModelConfig, ParamBlock};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Image,
    Text,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Both towers trained from scratch on the image–text loss.
    Baseline,
    /// One side replaced by the locked pretrained tower.
    Lit,
    /// Both towers trained with the extra transfer terms toward the third tower.
    #[default]
    ThreeTowers,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMode {
    pub mode: TrainingMode,
    /// Which side the pretrained table feeds.
    pub frozen_modality: Modality,
    /// Start the main tower on `frozen_modality`'s side from the pretrained body.
    pub init_main_from_pretrained: bool,
}

impl ModelMode {
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn uses_frozen(&self) -> bool {
        self.mode != TrainingMode::Baseline
    }
}

/// Output of the simulated pretrained classifier: a fixed embedding for every example
/// plus the classifier body that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained<T> {
    /// `num_examples × P`, row `i` for example id `i`.
    pub table: DenseMatrix<T>,
    /// Maps raw features of `modality` to rows of the table. Needed only to embed
    /// inputs outside the table.
    pub body: Option<MlpEncoder<T>>,
    pub modality: Modality,
}

impl<T: Scalar> Pretrained<T> {
    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<DenseMatrix<T>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.table.rows()) {
            return Err(Error::UnknownId(bad));
        }
        Ok(self.table.select_rows(ids))
    }

    /// Table embeddings for arbitrary inputs, through the classifier body.
    pub fn embed_features(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.body
            .as_ref()
            .ok_or_else(|| Error::Malformed("pretrained artifact has no classifier body".into()))?
            .encode(x)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `h = p·W_h`, no bias.
    #[default]
    Linear,
    /// `Lin₂(GELU(Lin₁(p)))` with hidden width `4P`.
    Mlp,
}

/// Third tower: the locked table `p` followed by a trainable projection to `D` dims.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTower<T> {
    pretrained: Arc<Pretrained<T>>,
    projection: MlpEncoder<T>,
}

impl<T: Scalar> FrozenTower<T> {
    pub fn new(pretrained: Arc<Pretrained<T>>, projection: MlpEncoder<T>) -> Result<Self> {
        if projection.input_dim() != pretrained.dim() {
            return Err(Error::DimMismatch(format!(
                "projection expects {} inputs, table has {} columns",
                projection.input_dim(),
                pretrained.dim()
            )));
        }
        Ok(Self { pretrained, projection })
    }

    pub fn random(
        pretrained: Arc<Pretrained<T>>,
        kind: ProjectionKind,
        dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let p = pretrained.dim();
        let projection = match kind {
            ProjectionKind::Linear => MlpEncoder::random(&[p, dim], false, rng)?,
            ProjectionKind::Mlp => MlpEncoder::random(&[p, 4 * p, dim], true, rng)?,
        };
        Self::new(pretrained, projection)
    }

    pub fn pretrained(&self) -> &Arc<Pretrained<T>> {
        &self.pretrained
    }

    pub fn projection(&self) -> &MlpEncoder<T> {
        &self.projection
    }

    pub(crate) fn projection_mut(&mut self) -> &mut MlpEncoder<T> {
        &mut self.projection
    }

    pub fn output_dim(&self) -> usize {
        self.projection.output_dim()
    }

    /// `projection(p[id])` for each id, in input order.
    pub fn third_tower_embed(&self, ids: &[usize]) -> Result<DenseMatrix<T>> {
        self.projection.encode(&self.pretrained.lookup(ids)?)
    }
}
