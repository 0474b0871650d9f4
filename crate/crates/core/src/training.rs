//! Adam with decoupled weight decay, warmup plus cosine schedule, global-norm clipping
//! and the minibatch training loop shared by every mode.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::scalar::Scalar;
use crate::towers::{Batch, Model};

const TAG_EPOCH: u64 = 0x7000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 64,
            clip_norm: 1.0,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `total_steps == 0` is a valid no-op run; otherwise `0 < warmup ≤ total`.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.total_steps > 0 && (self.warmup_steps == 0 || self.warmup_steps > self.total_steps) {
            return fail(format!(
                "warmup_steps must lie in 1..={}, got {}",
                self.total_steps, self.warmup_steps
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return fail(format!("peak_lr must be finite and nonnegative, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at_step(config: &TrainConfig, step: usize) -> Result<f64> {
    let (warmup, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if step < warmup {
        return Ok(config.peak_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(config.peak_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(config.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Scales `grads` down to norm `max_norm` if it is larger.
pub fn clip_global_norm<T: Scalar>(grads: &[T], max_norm: T) -> Vec<T> {
    let norm = grads.iter().map(|&g| g * g).sum::<T>().sqrt();
    if norm <= max_norm {
        return grads.to_vec();
    }
    let s = max_norm / norm;
    grads.iter().map(|&g| g * s).collect()
}

/// First and second moment estimates plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `decay[i]` says whether
/// decoupled weight decay `p ← p − lr·wd·p` applies to parameter `i`.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    state: &mut AdamState<T>,
    grads: &[T],
    lr: f64,
    config: &TrainConfig,
    decay: &[bool],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam: {n} params, {} grads, {}/{} moments, {} decay flags",
            grads.len(),
            state.m.len(),
            state.v.len(),
            decay.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps, wd) = (T::lit(lr), T::lit(config.epsilon), T::lit(config.weight_decay));
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let mut p = params[i];
        if decay[i] {
            p -= lr * wd * p;
        }
        params[i] = p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub l_fg: f64,
    pub l_fh: f64,
    pub l_gh: f64,
    pub total: f64,
    pub tau: f64,
    pub lr: f64,
}

/// One record per optimizer step: the loss before the update and the learning rate used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub const CSV_HEADER: &'static str = "step,l_fg,l_fh,l_gh,total,tau,lr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step, r.l_fg, r.l_fh, r.l_gh, r.total, r.tau, r.lr
            )
            .expect("string write");
        }
        s
    }

    pub fn at_step(&self, step: usize) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.step == step)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

/// Trains `model` on the aligned triples in `data` for `config.total_steps` steps.
///
/// Each epoch visits a fresh seeded permutation in consecutive batches and drops the
/// final short batch. Steps are numbered from 1; step `s` uses `lr_at_step(s)`.
pub fn train<T: Scalar>(mut model: Model<T>, data: &Batch<T>, config: &TrainConfig) -> Result<(Model<T>, LossTrace)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut trace = LossTrace::default();
    if config.total_steps == 0 {
        return Ok((model, trace));
    }
    let per_epoch = n / config.batch_size;
    if per_epoch == 0 {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds the {n} training pairs",
            config.batch_size
        )));
    }
    let decay = model.decay_mask();
    let mut params = model.params();
    let mut state = AdamState::new(params.len());
    let clip = T::lit(config.clip_norm);
    let mut order = Vec::new();
    for s in 0..config.total_steps {
        let epoch = s / per_epoch;
        let slot = s % per_epoch;
        if slot == 0 {
            order = RngStream::derive(config.seed, TAG_EPOCH + epoch as u64).permutation(n);
        }
        let idx = &order[slot * config.batch_size..(slot + 1) * config.batch_size];
        let batch = Batch::new(
            data.image.select_rows(idx),
            data.text.select_rows(idx),
            idx.iter().map(|&i| data.ids[i]).collect(),
        )?;
        let step = s + 1;
        let lr = lr_at_step(config, step)?;
        let tau = model.tau().as_f64();
        let (loss, grads) = model.loss_and_gradients(&batch).map_err(|e| match e {
            // Overflowing parameters surface as degenerate rows or an infinite τ.
            Error::ZeroRow { .. } | Error::NotNormalized { .. } | Error::NonPositiveTemperature(_) => {
                Error::NonFiniteLoss { step }
            }
            e => e,
        })?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.records.push(TraceRecord {
            step,
            l_fg: loss.l_fg.as_f64(),
            l_fh: loss.l_fh.as_f64(),
            l_gh: loss.l_gh.as_f64(),
            total: loss.total.as_f64(),
            tau,
            lr,
        });
        let grads = clip_global_norm(&grads, clip);
        adam_step(&mut params, &mut state, &grads, lr, config, &decay)?;
        model.set_params(&params)?;
    }
    Ok((model, trace))
}

/// [`train`] on the training split of a synthetic dataset.
pub fn train_on_dataset<T: Scalar>(
    model: Model<T>,
    dataset: &SyntheticDataset,
    config: &TrainConfig,
) -> Result<(Model<T>, LossTrace)> {
    let ids = dataset.train_ids();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train(model, &dataset.batch(&ids)?, config)
}
