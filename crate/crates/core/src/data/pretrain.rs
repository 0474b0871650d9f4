//! Simulated pretrained classifier: a small MLP trained to predict labels that depend on
//! only the first `m` latent dims. Its penultimate activations form the frozen table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SyntheticDataset;
use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, DenseMatrix, RngStream};
use crate::towers::checkpoint::{load_encoder, load_tensor, save_encoder, TensorEntry};
use crate::towers::{EncoderShape, Linear, MlpEncoder, Modality, Pretrained};
use crate::training::{adam_step, clip_global_norm, lr_at_step, AdamState, TrainConfig};

const TAG_BODY: u64 = 0x21;
const TAG_HEAD: u64 = 0x22;
const TAG_BATCHES: u64 = 0x23;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub visible_dims: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    /// Width `P` of the penultimate layer, i.e. of the frozen table.
    pub embed_dim: usize,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            visible_dims: 8,
            steps: 1500,
            batch_size: 128,
            peak_lr: 3e-3,
            weight_decay: 1e-4,
            hidden: 64,
            embed_dim: 16,
            modality: Modality::Image,
            seed: 0,
        }
    }
}

fn features(ds: &SyntheticDataset, modality: Modality) -> &DenseMatrix<f64> {
    match modality {
        Modality::Image => &ds.image,
        Modality::Text => &ds.text,
    }
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
fn cross_entropy(logits: &DenseMatrix<f64>, labels: &[usize]) -> Result<(f64, DenseMatrix<f64>)> {
    let mut probs = softmax_rows(logits, 1.0)?;
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(i);
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss / n, probs))
}

/// Trains the classifier on the training split and embeds every example.
///
/// With `steps == 0` the table holds the activations of the randomly initialized body.
pub fn pretrain_classifier(ds: &SyntheticDataset, config: &PretrainConfig) -> Result<Pretrained<f64>> {
    let labels_all = ds.partial_labels(config.visible_dims)?;
    if config.embed_dim == 0 || config.hidden == 0 || config.batch_size == 0 {
        return Err(Error::SpecInvalid(
            "classifier widths and batch size must be positive".into(),
        ));
    }
    let x_all = features(ds, config.modality);
    let c = ds.spec.num_classes;
    let mut body = MlpEncoder::random(
        &[x_all.cols(), config.hidden, config.embed_dim],
        true,
        &mut RngStream::derive(config.seed, TAG_BODY),
    )?;
    let mut head = Linear::random(config.embed_dim, c, true, &mut RngStream::derive(config.seed, TAG_HEAD));

    if config.steps > 0 {
        let ids = ds.train_ids();
        let batch = config.batch_size.min(ids.len());
        let per_epoch = ids.len() / batch;
        let schedule = TrainConfig {
            peak_lr: config.peak_lr,
            warmup_steps: (config.steps / 20).max(1),
            total_steps: config.steps,
            weight_decay: config.weight_decay,
            ..TrainConfig::default()
        };
        let mut params = Vec::new();
        body.write_params(&mut params);
        head.write_params(&mut params);
        let decay = vec![true; params.len()];
        let mut state = AdamState::new(params.len());
        let mut order = Vec::new();
        for s in 0..config.steps {
            let slot = s % per_epoch;
            if slot == 0 {
                let perm = RngStream::derive(config.seed, TAG_BATCHES + (s / per_epoch) as u64).permutation(ids.len());
                order = perm.into_iter().map(|k| ids[k]).collect();
            }
            let idx = &order[slot * batch..(slot + 1) * batch];
            let x = x_all.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
            let (z, cache) = body.forward_cached(&x)?;
            let logits = head.forward(&z)?;
            let (loss, d_logits) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: s + 1 });
            }
            let mut head_grads = Vec::new();
            let dz = head.backward(&z, &d_logits, &mut head_grads)?;
            let mut grads = body.backward(&cache, &dz)?;
            grads.extend(head_grads);
            let grads = clip_global_norm(&grads, schedule.clip_norm);
            adam_step(
                &mut params,
                &mut state,
                &grads,
                lr_at_step(&schedule, s + 1)?,
                &schedule,
                &decay,
            )?;
            let rest = body.read_params(&params)?;
            head.read_params(rest)?;
        }
    }
    Ok(Pretrained {
        table: body.encode(x_all)?,
        body: Some(body),
        modality: config.modality,
    })
}

pub const PRETRAINED_FORMAT: &str = "tritower-pretrained-v1";
pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const TABLE_FILE: &str = "pretrained.3tmx";

/// Descriptor written next to `pretrained.3tmx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub format: String,
    pub config: PretrainConfig,
    pub body: Option<EncoderShape>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_pretrained(dir: &Path, p: &Pretrained<f64>, config: &PretrainConfig) -> Result<PretrainManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = vec![super::io::write_entry(dir, "pretrained.table", TABLE_FILE, &p.table)?];
    if let Some(body) = &p.body {
        save_encoder(dir, "pretrained.body", body, &mut tensors)?;
    }
    let manifest = PretrainManifest {
        format: PRETRAINED_FORMAT.into(),
        config: config.clone(),
        body: p.body.as_ref().map(MlpEncoder::shape),
        tensors,
    };
    fs::write(
        dir.join(PRETRAINED_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn load_pretrained(dir: &Path) -> Result<(Pretrained<f64>, PretrainManifest)> {
    let manifest: PretrainManifest = serde_json::from_slice(&fs::read(dir.join(PRETRAINED_FILE))?)?;
    if manifest.format != PRETRAINED_FORMAT {
        return Err(Error::Malformed(format!(
            "unknown pretrained format `{}`",
            manifest.format
        )));
    }
    let body = match &manifest.body {
        Some(shape) => Some(load_encoder(dir, "pretrained.body", shape, &manifest.tensors)?),
        None => None,
    };
    let p = Pretrained {
        table: load_tensor(dir, &manifest.tensors, "pretrained.table")?,
        body,
        modality: manifest.config.modality,
    };
    Ok((p, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};

    fn small() -> SyntheticDataset {
        generate_dataset(&SyntheticSpec {
            num_pairs: 300,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_steps_gives_random_body_activations() {
        let ds = small();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let p = pretrain_classifier(&ds, &cfg).unwrap();
        let body = MlpEncoder::<f64>::random(&[24, 64, 16], true, &mut RngStream::derive(0, TAG_BODY)).unwrap();
        assert_eq!(p.table, body.encode(&ds.image).unwrap());
        assert_eq!(p.table.shape(), (300, 16));
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let ds = small();
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 32,
            ..PretrainConfig::default()
        };
        let a = pretrain_classifier(&ds, &cfg).unwrap();
        let b = pretrain_classifier(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        let untrained = pretrain_classifier(
            &ds,
            &PretrainConfig {
                steps: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.table, untrained.table);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = DenseMatrix::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let (loss, d) = cross_entropy(&logits, &[0, 1]).unwrap();
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((loss - 0.5 * (2f64.ln() - (1.0 - p).ln())).abs() < 1e-15);
        assert!((d.get(0, 0) + 0.25).abs() < 1e-15);
        assert!((d.get(1, 1) - 0.5 * (1.0 - p - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_visible_dims() {
        let ds = small();
        for m in [0, 9] {
            let cfg = PretrainConfig {
                visible_dims: m,
                ..PretrainConfig::default()
            };
            assert!(matches!(pretrain_classifier(&ds, &cfg), Err(Error::SpecInvalid(_))));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = small();
        let cfg = PretrainConfig {
            steps: 5,
            ..PretrainConfig::default()
        };
        let p = pretrain_classifier(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pretrained(dir.path(), &p, &cfg).unwrap();
        let (back, m) = load_pretrained(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(m.config, cfg);
        assert!(dir.path().join("pretrained.3tmx").exists());
    }
}
