//! Self-contained checkpoint directories: `checkpoint.json` plus one matrix file per tensor.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderShape, Linear, MlpEncoder};
use super::heads::{HeadVariant, Heads};
use super::model::Model;
use super::{FrozenTower, Modality, ModelMode, Pretrained};
use crate::data::io::{read_entry, write_entry, ManifestEntry};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Temperature};
use crate::numerics::DenseMatrix;
use crate::scalar::Scalar;

pub type TensorEntry = ManifestEntry;

pub const CHECKPOINT_FORMAT: &str = "tritower-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub mode: ModelMode,
    pub loss: LossConfig,
    pub head_variant: HeadVariant,
    pub embed_dim: usize,
    pub image_encoder: EncoderShape,
    pub text_encoder: EncoderShape,
    pub projection: Option<EncoderShape>,
    pub pretrained_modality: Option<Modality>,
    pub pretrained_body: Option<EncoderShape>,
    /// How the stored temperature values map to τ.
    pub temperature_parameterization: String,
    /// Informational copy; the exact values live in the `temperatures` tensor.
    pub log_inv_tau: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub(crate) fn save_encoder<T: Scalar>(
    dir: &Path,
    prefix: &str,
    enc: &MlpEncoder<T>,
    out: &mut Vec<TensorEntry>,
) -> Result<()> {
    for (k, layer) in enc.layers().iter().enumerate() {
        let name = format!("{prefix}.layer{k}.weight");
        out.push(write_entry(dir, &name, &format!("{name}.3tmx"), &layer.weight)?);
        if let Some(b) = &layer.bias {
            let name = format!("{prefix}.layer{k}.bias");
            let m = DenseMatrix::new(1, b.len(), b.clone())?;
            out.push(write_entry(dir, &name, &format!("{name}.3tmx"), &m)?);
        }
    }
    Ok(())
}

pub(crate) fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Malformed(format!("no tensor named `{name}`")))
}

pub(crate) fn load_tensor<T: Scalar>(dir: &Path, entries: &[TensorEntry], name: &str) -> Result<DenseMatrix<T>> {
    Ok(read_entry(dir, find(entries, name)?)?.cast())
}

pub(crate) fn load_encoder<T: Scalar>(
    dir: &Path,
    prefix: &str,
    shape: &EncoderShape,
    entries: &[TensorEntry],
) -> Result<MlpEncoder<T>> {
    let mut layers = Vec::new();
    for (k, w) in shape.dims.windows(2).enumerate() {
        let weight = load_tensor::<T>(dir, entries, &format!("{prefix}.layer{k}.weight"))?;
        if weight.shape() != (w[0], w[1]) {
            return Err(Error::Malformed(format!(
                "{prefix}.layer{k}.weight has the wrong shape"
            )));
        }
        let bias = if shape.bias {
            Some(load_tensor::<T>(dir, entries, &format!("{prefix}.layer{k}.bias"))?.into_vec())
        } else {
            None
        };
        layers.push(Linear::new(weight, bias)?);
    }
    MlpEncoder::new(layers)
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, model: &Model<T>) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let temps: Vec<T> = model.temperatures().iter().map(|t| t.log_inv_tau).collect();
    let temps = DenseMatrix::new(1, temps.len(), temps)?;
    tensors.push(write_entry(dir, "temperatures", "temperatures.3tmx", &temps)?);
    save_encoder(dir, "image", model.image_encoder(), &mut tensors)?;
    save_encoder(dir, "text", model.text_encoder(), &mut tensors)?;
    for (k, m) in model.heads().matrices().into_iter().enumerate() {
        let name = format!("heads.{k}");
        tensors.push(write_entry(dir, &name, &format!("{name}.3tmx"), m)?);
    }
    let mut projection = None;
    let mut pretrained_modality = None;
    let mut pretrained_body = None;
    if let Some(frozen) = model.frozen() {
        save_encoder(dir, "projection", frozen.projection(), &mut tensors)?;
        projection = Some(frozen.projection().shape());
        let p = frozen.pretrained();
        tensors.push(write_entry(dir, "pretrained.table", "pretrained.table.3tmx", &p.table)?);
        pretrained_modality = Some(p.modality);
        if let Some(body) = &p.body {
            save_encoder(dir, "pretrained.body", body, &mut tensors)?;
            pretrained_body = Some(body.shape());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        mode: model.mode(),
        loss: model.loss_config().clone(),
        head_variant: model.heads().variant(),
        embed_dim: model.embed_dim(),
        image_encoder: model.image_encoder().shape(),
        text_encoder: model.text_encoder().shape(),
        projection,
        pretrained_modality,
        pretrained_body,
        temperature_parameterization: "tau = exp(-log_inv_tau)".into(),
        log_inv_tau: temps.as_slice().iter().map(|v| v.as_f64()).collect(),
        tensors,
    };
    fs::write(
        dir.join(CHECKPOINT_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(CHECKPOINT_FILE))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Malformed(format!(
            "unknown checkpoint format `{}`",
            manifest.format
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(manifest.version));
    }
    let t = &manifest.tensors;
    let temperatures = load_tensor::<T>(dir, t, "temperatures")?
        .into_vec()
        .into_iter()
        .map(|log_inv_tau| Temperature { log_inv_tau })
        .collect();
    let image = load_encoder(dir, "image", &manifest.image_encoder, t)?;
    let text = load_encoder(dir, "text", &manifest.text_encoder, t)?;
    let n_heads = t.iter().filter(|e| e.name.starts_with("heads.")).count();
    let head_mats = (0..n_heads)
        .map(|k| load_tensor::<T>(dir, t, &format!("heads.{k}")))
        .collect::<Result<Vec<_>>>()?;
    let heads = if head_mats.is_empty() {
        Heads::identity_init(manifest.head_variant, manifest.embed_dim)
    } else {
        Heads::from_matrices(manifest.head_variant, head_mats)?
    };
    let frozen = match &manifest.projection {
        Some(shape) => {
            let body = match &manifest.pretrained_body {
                Some(s) => Some(load_encoder(dir, "pretrained.body", s, t)?),
                None => None,
            };
            let pretrained = Pretrained {
                table: load_tensor(dir, t, "pretrained.table")?,
                body,
                modality: manifest.pretrained_modality.unwrap_or_default(),
            };
            let projection = load_encoder(dir, "projection", shape, t)?;
            Some(FrozenTower::new(Arc::new(pretrained), projection)?)
        }
        None => None,
    };
    Model::assemble(manifest.mode, image, text, frozen, heads, temperatures, manifest.loss)
}
