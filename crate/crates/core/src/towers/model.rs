//! Model assembly for the baseline, locked-tower and three-tower modes, with the
//! flattened parameter view used by the optimizer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderCache, MlpEncoder};
use super::heads::{normalize_rows_backward, normalize_rows_cached, HeadVariant, Heads};
use super::{FrozenTower, Modality, ModelMode, Pretrained, ProjectionKind, TrainingMode};
use crate::error::{Error, Result};
use crate::losses::{
    bidirectional_backward, bidirectional_loss, three_tower_objective, three_tower_objective_backward, LossBreakdown,
    LossConfig, Temperature, TemperatureMode, TermTemperatures,
};
use crate::numerics::{l2_normalize_rows, DenseMatrix, RngStream};
use crate::scalar::Scalar;

/// Aligned features of one minibatch. `ids` index the pretrained table.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub image: DenseMatrix<T>,
    pub text: DenseMatrix<T>,
    pub ids: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(image: DenseMatrix<T>, text: DenseMatrix<T>, ids: Vec<usize>) -> Result<Self> {
        if image.rows() != text.rows() || image.rows() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} images, {} texts, {} ids",
                image.rows(),
                text.rows(),
                ids.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { image, text, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Everything needed to build a freshly initialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Hidden widths of both main encoders.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub projection: ProjectionKind,
    pub heads: HeadVariant,
    pub loss: LossConfig,
    pub init_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::default(),
            image_dim: 24,
            text_dim: 20,
            hidden: vec![64],
            embed_dim: 16,
            projection: ProjectionKind::Linear,
            heads: HeadVariant::Default,
            loss: LossConfig::default(),
            init_tau: crate::losses::DEFAULT_TAU,
        }
    }
}

impl ModelConfig {
    fn encoder_dims(&self, input: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden);
        d.push(self.embed_dim);
        d
    }
}

/// Trainable parameter groups, in the order they appear in the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBlock {
    Temperatures,
    ImageEncoder,
    TextEncoder,
    Projection,
    Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    mode: ModelMode,
    loss: LossConfig,
    temperatures: Vec<Temperature<T>>,
    image: MlpEncoder<T>,
    text: MlpEncoder<T>,
    frozen: Option<FrozenTower<T>>,
    heads: Heads<T>,
}

struct TowerPass<T> {
    raw_f: Option<(DenseMatrix<T>, EncoderCache<T>)>,
    raw_g: Option<(DenseMatrix<T>, EncoderCache<T>)>,
    raw_h: Option<(DenseMatrix<T>, EncoderCache<T>)>,
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from explicit components.
    pub fn assemble(
        mode: ModelMode,
        image: MlpEncoder<T>,
        text: MlpEncoder<T>,
        frozen: Option<FrozenTower<T>>,
        heads: Heads<T>,
        temperatures: Vec<Temperature<T>>,
        loss: LossConfig,
    ) -> Result<Self> {
        loss.validate()?;
        if mode.uses_frozen() && frozen.is_none() {
            return Err(Error::MissingFrozenTower);
        }
        let model = Self {
            mode,
            loss,
            temperatures,
            image,
            text,
            frozen,
            heads,
        };
        let want_temps = model.num_temperatures();
        if model.temperatures.len() != want_temps {
            return Err(Error::InvalidConfig(format!(
                "{:?} needs {want_temps} temperatures, got {}",
                mode.mode,
                model.temperatures.len()
            )));
        }
        let dims: Vec<usize> = model.active_towers().iter().map(|t| t.output_dim()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::DimMismatch(format!("tower output widths {dims:?} differ")));
        }
        if mode.mode == TrainingMode::ThreeTowers {
            if let Some(l) = model.heads.matrices().first() {
                if l.rows() != dims[0] {
                    return Err(Error::DimMismatch(format!(
                        "heads are {}x{}, embeddings have {} dims",
                        l.rows(),
                        l.cols(),
                        dims[0]
                    )));
                }
            }
        }
        Ok(model)
    }

    /// Seeded initialization from a configuration.
    pub fn initialize(config: &ModelConfig, pretrained: Option<Arc<Pretrained<T>>>, seed: u64) -> Result<Self> {
        let mut image = MlpEncoder::random(
            &config.encoder_dims(config.image_dim),
            true,
            &mut RngStream::derive(seed, 1),
        )?;
        let mut text = MlpEncoder::random(
            &config.encoder_dims(config.text_dim),
            true,
            &mut RngStream::derive(seed, 2),
        )?;
        let mode = config.mode;
        let frozen = match (&pretrained, mode.uses_frozen()) {
            (Some(p), true) => Some(FrozenTower::random(
                p.clone(),
                config.projection,
                config.embed_dim,
                &mut RngStream::derive(seed, 3),
            )?),
            (None, true) => return Err(Error::MissingFrozenTower),
            _ => None,
        };
        if let Some(p) = pretrained
            .as_ref()
            .filter(|_| mode.uses_frozen() || mode.init_main_from_pretrained)
        {
            if p.modality != mode.frozen_modality {
                return Err(Error::InvalidConfig(format!(
                    "pretrained table was built from {:?} features but the frozen side is {:?}",
                    p.modality, mode.frozen_modality
                )));
            }
        }
        if mode.init_main_from_pretrained {
            let p = pretrained.as_ref().ok_or(Error::MissingFrozenTower)?;
            let body = p
                .body
                .as_ref()
                .ok_or_else(|| Error::Malformed("pretrained artifact has no classifier body".into()))?;
            let target = match mode.frozen_modality {
                Modality::Image => &mut image,
                Modality::Text => &mut text,
            };
            if body.shape() != target.shape() {
                return Err(Error::DimMismatch(format!(
                    "pretrained body {:?} cannot initialize main encoder {:?}",
                    body.dims(),
                    target.dims()
                )));
            }
            *target = body.clone();
        }
        let heads = Heads::identity_init(config.heads, config.embed_dim);
        let tau = Temperature::from_tau(T::lit(config.init_tau))?;
        let n_temps = if mode.mode == TrainingMode::ThreeTowers {
            config.loss.num_temperatures()
        } else {
            1
        };
        Self::assemble(
            mode,
            image,
            text,
            frozen,
            heads,
            vec![tau; n_temps],
            config.loss.clone(),
        )
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn temperatures(&self) -> &[Temperature<T>] {
        &self.temperatures
    }

    /// Temperature of the image–text term, used for zero-shot probabilities.
    pub fn tau(&self) -> T {
        self.temperatures[0].tau()
    }

    pub fn image_encoder(&self) -> &MlpEncoder<T> {
        &self.image
    }

    pub fn text_encoder(&self) -> &MlpEncoder<T> {
        &self.text
    }

    pub fn frozen(&self) -> Option<&FrozenTower<T>> {
        self.frozen.as_ref()
    }

    pub fn heads(&self) -> &Heads<T> {
        &self.heads
    }

    pub fn embed_dim(&self) -> usize {
        self.active_towers()[0].output_dim()
    }

    fn num_temperatures(&self) -> usize {
        match self.mode.mode {
            TrainingMode::ThreeTowers => self.loss.num_temperatures(),
            _ => 1,
        }
    }

    fn is_lit(&self, side: Modality) -> bool {
        self.mode.mode == TrainingMode::Lit && self.mode.frozen_modality == side
    }

    fn active_towers(&self) -> Vec<&MlpEncoder<T>> {
        let mut t = Vec::new();
        if !self.is_lit(Modality::Image) {
            t.push(&self.image);
        }
        if !self.is_lit(Modality::Text) {
            t.push(&self.text);
        }
        if let (Some(f), true) = (&self.frozen, self.mode.uses_frozen()) {
            t.push(f.projection());
        }
        t
    }

    pub fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut b = vec![ParamBlock::Temperatures];
        if !self.is_lit(Modality::Image) {
            b.push(ParamBlock::ImageEncoder);
        }
        if !self.is_lit(Modality::Text) {
            b.push(ParamBlock::TextEncoder);
        }
        if self.mode.uses_frozen() {
            b.push(ParamBlock::Projection);
        }
        if self.mode.mode == TrainingMode::ThreeTowers {
            b.push(ParamBlock::Heads);
        }
        b
    }

    fn block_len(&self, block: ParamBlock) -> usize {
        match block {
            ParamBlock::Temperatures => self.temperatures.len(),
            ParamBlock::ImageEncoder => self.image.num_params(),
            ParamBlock::TextEncoder => self.text.num_params(),
            ParamBlock::Projection => self.frozen.as_ref().map_or(0, |f| f.projection().num_params()),
            ParamBlock::Heads => self.heads.num_params(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_blocks().into_iter().map(|b| self.block_len(b)).sum()
    }

    /// `(block, offset, len)` for each trainable block.
    pub fn param_layout(&self) -> Vec<(ParamBlock, usize, usize)> {
        let mut off = 0;
        self.param_blocks()
            .into_iter()
            .map(|b| {
                let len = self.block_len(b);
                let entry = (b, off, len);
                off += len;
                entry
            })
            .collect()
    }

    /// Trainable parameters, flattened. Frozen components are excluded.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in self.param_blocks() {
            match b {
                ParamBlock::Temperatures => out.extend(self.temperatures.iter().map(|t| t.log_inv_tau)),
                ParamBlock::ImageEncoder => self.image.write_params(&mut out),
                ParamBlock::TextEncoder => self.text.write_params(&mut out),
                ParamBlock::Projection => {
                    if let Some(f) = &self.frozen {
                        f.projection().write_params(&mut out)
                    }
                }
                ParamBlock::Heads => self.heads.write_params(&mut out),
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} trainable parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut src = params;
        for b in self.param_blocks() {
            src = match b {
                ParamBlock::Temperatures => {
                    let (mine, rest) = src.split_at(self.temperatures.len());
                    for (t, &v) in self.temperatures.iter_mut().zip(mine) {
                        t.log_inv_tau = v;
                    }
                    rest
                }
                ParamBlock::ImageEncoder => self.image.read_params(src)?,
                ParamBlock::TextEncoder => self.text.read_params(src)?,
                ParamBlock::Projection => match &mut self.frozen {
                    Some(f) => f.projection_mut().read_params(src)?,
                    None => src,
                },
                ParamBlock::Heads => self.heads.read_params(src)?,
            };
        }
        Ok(())
    }

    /// Whether weight decay applies to each flat parameter; temperatures are exempt.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        for (b, _, len) in self.param_layout() {
            mask.extend(std::iter::repeat_n(b != ParamBlock::Temperatures, len));
        }
        mask
    }

    fn frozen_tower(&self) -> Result<&FrozenTower<T>> {
        self.frozen.as_ref().ok_or(Error::MissingFrozenTower)
    }

    fn towers_forward(&self, batch: &Batch<T>) -> Result<TowerPass<T>> {
        let raw_f = if self.is_lit(Modality::Image) {
            None
        } else {
            Some(self.image.forward_cached(&batch.image)?)
        };
        let raw_g = if self.is_lit(Modality::Text) {
            None
        } else {
            Some(self.text.forward_cached(&batch.text)?)
        };
        let raw_h = if self.mode.uses_frozen() {
            let f = self.frozen_tower()?;
            Some(f.projection().forward_cached(&f.pretrained().lookup(&batch.ids)?)?)
        } else {
            None
        };
        Ok(TowerPass { raw_f, raw_g, raw_h })
    }

    fn term_temperatures(&self) -> TermTemperatures<T> {
        match self.loss.temperatures {
            TemperatureMode::PerTerm if self.temperatures.len() == 3 => TermTemperatures {
                fg: self.temperatures[0].tau(),
                fh: self.temperatures[1].tau(),
                gh: self.temperatures[2].tau(),
            },
            _ => TermTemperatures::shared(self.tau()),
        }
    }

    fn term_log_inv(&self) -> TermTemperatures<T> {
        match self.loss.temperatures {
            TemperatureMode::PerTerm if self.temperatures.len() == 3 => TermTemperatures {
                fg: self.temperatures[0].log_inv_tau,
                fh: self.temperatures[1].log_inv_tau,
                gh: self.temperatures[2].log_inv_tau,
            },
            _ => TermTemperatures::shared(self.temperatures[0].log_inv_tau),
        }
    }

    /// Image-side and text-side raw embeddings entering the two-tower loss.
    fn two_tower_pair<'a>(&self, pass: &'a TowerPass<T>) -> (&'a DenseMatrix<T>, &'a DenseMatrix<T>) {
        let pick = |o: &'a Option<(DenseMatrix<T>, EncoderCache<T>)>| &o.as_ref().expect("tower ran").0;
        if self.is_lit(Modality::Image) {
            (pick(&pass.raw_h), pick(&pass.raw_g))
        } else if self.is_lit(Modality::Text) {
            (pick(&pass.raw_f), pick(&pass.raw_h))
        } else {
            (pick(&pass.raw_f), pick(&pass.raw_g))
        }
    }

    /// Normalized head outputs entering the three-tower objective.
    pub fn head_outputs(&self, batch: &Batch<T>) -> Result<crate::losses::HeadOutputs<T>> {
        let pass = self.towers_forward(batch)?;
        match (&pass.raw_f, &pass.raw_g, &pass.raw_h) {
            (Some(f), Some(g), Some(h)) => self.heads.apply(&f.0, &g.0, &h.0),
            _ => Err(Error::InvalidConfig(
                "head outputs exist only in three-tower mode".into(),
            )),
        }
    }

    /// Loss of the model's mode on one batch.
    pub fn loss(&self, batch: &Batch<T>) -> Result<LossBreakdown<T>> {
        let pass = self.towers_forward(batch)?;
        self.loss_from_pass(&pass)
    }

    fn loss_from_pass(&self, pass: &TowerPass<T>) -> Result<LossBreakdown<T>> {
        match self.mode.mode {
            TrainingMode::ThreeTowers => {
                let (f, g, h) = (
                    &pass.raw_f.as_ref().expect("image tower").0,
                    &pass.raw_g.as_ref().expect("text tower").0,
                    &pass.raw_h.as_ref().expect("third tower").0,
                );
                let out = self.heads.apply(f, g, h)?;
                three_tower_objective(
                    &out,
                    self.term_temperatures(),
                    self.loss.transfer,
                    T::lit(self.loss.weight),
                    self.loss.dropped,
                )
            }
            _ => {
                let (a, b) = self.two_tower_pair(pass);
                let l = bidirectional_loss(&l2_normalize_rows(a)?, &l2_normalize_rows(b)?, self.tau())?;
                Ok(LossBreakdown {
                    l_fg: l,
                    l_fh: T::zero(),
                    l_gh: T::zero(),
                    total: l,
                })
            }
        }
    }

    /// Loss and its gradient with respect to [`params`](Self::params), by reverse
    /// accumulation through heads, normalization and encoders.
    pub fn loss_and_gradients(&self, batch: &Batch<T>) -> Result<(LossBreakdown<T>, Vec<T>)> {
        let pass = self.towers_forward(batch)?;
        let loss = self.loss_from_pass(&pass)?;

        let mut d_temps = vec![T::zero(); self.temperatures.len()];
        let mut d_f = None;
        let mut d_g = None;
        let mut d_h = None;
        let mut head_grads = Vec::new();

        match self.mode.mode {
            TrainingMode::ThreeTowers => {
                let raw = [
                    &pass.raw_f.as_ref().expect("image tower").0,
                    &pass.raw_g.as_ref().expect("text tower").0,
                    &pass.raw_h.as_ref().expect("third tower").0,
                ];
                let (out, cache) = self.heads.forward_cached(raw[0], raw[1], raw[2])?;
                let grad = three_tower_objective_backward(
                    &out,
                    self.term_log_inv(),
                    self.loss.transfer,
                    T::lit(self.loss.weight),
                    self.loss.dropped,
                )?;
                let t = grad.d_log_inv_tau;
                if d_temps.len() == 3 {
                    d_temps.copy_from_slice(&[t.fg, t.fh, t.gh]);
                } else {
                    d_temps[0] = t.fg + t.fh + t.gh;
                }
                let [df, dg, dh] = self.heads.backward(raw, &cache, &grad.outputs, &mut head_grads)?;
                d_f = Some(df);
                d_g = Some(dg);
                d_h = Some(dh);
            }
            _ => {
                let (a, b) = self.two_tower_pair(&pass);
                let (na, norms_a) = normalize_rows_cached(a)?;
                let (nb, norms_b) = normalize_rows_cached(b)?;
                let g = bidirectional_backward(&na, &nb, self.temperatures[0].log_inv_tau, T::one())?;
                d_temps[0] = g.d_log_inv_tau;
                let da = normalize_rows_backward(&na, &norms_a, &g.d_a);
                let db = normalize_rows_backward(&nb, &norms_b, &g.d_b);
                if self.is_lit(Modality::Image) {
                    d_h = Some(da);
                    d_g = Some(db);
                } else if self.is_lit(Modality::Text) {
                    d_f = Some(da);
                    d_h = Some(db);
                } else {
                    d_f = Some(da);
                    d_g = Some(db);
                }
            }
        }

        let mut grads = Vec::with_capacity(self.num_params());
        for block in self.param_blocks() {
            match block {
                ParamBlock::Temperatures => grads.extend_from_slice(&d_temps),
                ParamBlock::ImageEncoder => {
                    let (_, cache) = pass.raw_f.as_ref().expect("image tower");
                    grads.extend(self.image.backward(cache, d_f.as_ref().expect("image gradient"))?);
                }
                ParamBlock::TextEncoder => {
                    let (_, cache) = pass.raw_g.as_ref().expect("text tower");
                    grads.extend(self.text.backward(cache, d_g.as_ref().expect("text gradient"))?);
                }
                ParamBlock::Projection => {
                    let (_, cache) = pass.raw_h.as_ref().expect("third tower");
                    let proj = self.frozen_tower()?.projection();
                    grads.extend(proj.backward(cache, d_h.as_ref().expect("third gradient"))?);
                }
                ParamBlock::Heads => grads.append(&mut head_grads),
            }
        }
        debug_assert_eq!(grads.len(), self.num_params());
        Ok((loss, grads))
    }

    /// Normalized image embeddings used for retrieval and zero-shot scoring. The
    /// third tower is used only when the image side is the locked tower; without
    /// `ids`, inputs go through the pretrained classifier body.
    pub fn image_embeddings(&self, features: &DenseMatrix<T>, ids: Option<&[usize]>) -> Result<DenseMatrix<T>> {
        l2_normalize_rows(&self.side_raw(Modality::Image, features, ids)?)
    }

    pub fn text_embeddings(&self, features: &DenseMatrix<T>, ids: Option<&[usize]>) -> Result<DenseMatrix<T>> {
        l2_normalize_rows(&self.side_raw(Modality::Text, features, ids)?)
    }

    fn side_raw(&self, side: Modality, features: &DenseMatrix<T>, ids: Option<&[usize]>) -> Result<DenseMatrix<T>> {
        if self.is_lit(side) {
            let f = self.frozen_tower()?;
            let p = self.pretrained_rows(features, ids)?;
            f.projection().encode(&p)
        } else {
            match side {
                Modality::Image => self.image.encode(features),
                Modality::Text => self.text.encode(features),
            }
        }
    }

    fn pretrained_rows(&self, features: &DenseMatrix<T>, ids: Option<&[usize]>) -> Result<DenseMatrix<T>> {
        let p = self.frozen_tower()?.pretrained();
        match ids {
            Some(ids) => p.lookup(ids),
            None => p.embed_features(features),
        }
    }

    /// Pre-normalization image representation for linear probes: the main encoder
    /// output, or the pretrained table when the image tower is locked.
    pub fn image_prelogits(&self, features: &DenseMatrix<T>, ids: Option<&[usize]>) -> Result<DenseMatrix<T>> {
        if self.is_lit(Modality::Image) {
            self.pretrained_rows(features, ids)
        } else {
            self.image.encode(features)
        }
    }

    /// Normalized third-tower embeddings `norm(projection(p))`.
    pub fn third_embeddings(&self, features: &DenseMatrix<T>, ids: Option<&[usize]>) -> Result<DenseMatrix<T>> {
        let f = self.frozen_tower()?;
        l2_normalize_rows(&f.projection().encode(&self.pretrained_rows(features, ids)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::TransferKind;
    use crate::numerics::finite_difference_gradient;

    type M = DenseMatrix<f64>;

    fn pretrained(n: usize, p: usize, seed: u64) -> Arc<Pretrained<f64>> {
        let mut rng = RngStream::new(seed);
        Arc::new(Pretrained {
            table: M::new(n, p, rng.normal_vec(n * p, 1.0)).unwrap(),
            body: None,
            modality: Modality::Image,
        })
    }

    fn tiny_config(mode: TrainingMode) -> ModelConfig {
        ModelConfig {
            mode: ModelMode::new(mode),
            image_dim: 5,
            text_dim: 4,
            hidden: vec![4],
            embed_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize, seed: u64) -> Batch<f64> {
        let mut rng = RngStream::new(seed);
        Batch::new(
            M::new(n, 5, rng.normal_vec(n * 5, 1.0)).unwrap(),
            M::new(n, 4, rng.normal_vec(n * 4, 1.0)).unwrap(),
            (0..n).collect(),
        )
        .unwrap()
    }

    fn check_gradients(model: &Model<f64>, b: &Batch<f64>) {
        let params = model.params();
        let (_, analytic) = model.loss_and_gradients(b).unwrap();
        let numeric = finite_difference_gradient(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                m.loss(b).unwrap().total
            },
            &params,
            1e-5,
        );
        for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < 1e-5 || (a - n).abs() < 1e-9,
                "param {k}: {a} vs {n}"
            );
        }
    }

    #[test]
    fn baseline_params_are_encoders_plus_temperature() {
        let m = Model::<f64>::initialize(&tiny_config(TrainingMode::Baseline), None, 0).unwrap();
        assert_eq!(
            m.param_blocks(),
            vec![
                ParamBlock::Temperatures,
                ParamBlock::ImageEncoder,
                ParamBlock::TextEncoder
            ]
        );
        assert_eq!(
            m.num_params(),
            1 + m.image_encoder().num_params() + m.text_encoder().num_params()
        );
    }

    #[test]
    fn lit_excludes_locked_side() {
        let cfg = tiny_config(TrainingMode::Lit);
        let m = Model::<f64>::initialize(&cfg, Some(pretrained(6, 4, 1)), 0).unwrap();
        assert!(!m.param_blocks().contains(&ParamBlock::ImageEncoder));
        assert!(m.param_blocks().contains(&ParamBlock::TextEncoder));
        let mut cfg = cfg;
        cfg.mode.frozen_modality = Modality::Text;
        assert!(matches!(
            Model::<f64>::initialize(&cfg, Some(pretrained(6, 4, 1)), 0),
            Err(Error::InvalidConfig(_))
        ));
        let text_side = Arc::new(Pretrained {
            modality: Modality::Text,
            ..(*pretrained(6, 4, 1)).clone()
        });
        let m = Model::<f64>::initialize(&cfg, Some(text_side), 0).unwrap();
        assert!(!m.param_blocks().contains(&ParamBlock::TextEncoder));
        assert!(matches!(
            Model::<f64>::initialize(&tiny_config(TrainingMode::Lit), None, 0),
            Err(Error::MissingFrozenTower)
        ));
    }

    #[test]
    fn init_main_from_pretrained_copies_body() {
        let mut rng = RngStream::new(3);
        let body = MlpEncoder::<f64>::random(&[5, 4, 3], true, &mut rng).unwrap();
        let table = body.encode(&M::new(6, 5, rng.normal_vec(30, 1.0)).unwrap()).unwrap();
        let p = Arc::new(Pretrained {
            table,
            body: Some(body.clone()),
            modality: Modality::Image,
        });
        let mut cfg = tiny_config(TrainingMode::ThreeTowers);
        cfg.mode.init_main_from_pretrained = true;
        let m = Model::<f64>::initialize(&cfg, Some(p.clone()), 0).unwrap();
        assert_eq!(m.image_encoder(), &body);
        cfg.hidden = vec![7];
        assert!(matches!(
            Model::<f64>::initialize(&cfg, Some(p), 0),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn param_round_trip_and_decay_mask() {
        let m =
            Model::<f64>::initialize(&tiny_config(TrainingMode::ThreeTowers), Some(pretrained(6, 4, 2)), 5).unwrap();
        let p = m.params();
        let mut other =
            Model::<f64>::initialize(&tiny_config(TrainingMode::ThreeTowers), Some(pretrained(6, 4, 2)), 6).unwrap();
        other.set_params(&p).unwrap();
        assert_eq!(other, m);
        let mask = m.decay_mask();
        assert!(!mask[0]);
        assert!(mask[1..].iter().all(|&b| b));
        assert!(other.set_params(&p[1..]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        let b = batch(3, 11);
        for mode in [TrainingMode::Baseline, TrainingMode::Lit, TrainingMode::ThreeTowers] {
            let mut cfg = tiny_config(mode);
            cfg.init_tau = 0.5;
            let mut m = Model::<f64>::initialize(&cfg, Some(pretrained(3, 4, 7)), 9).unwrap();
            // move heads away from the identity
            let mut p = m.params();
            let mut rng = RngStream::new(1);
            for v in p.iter_mut() {
                *v += 0.1 * rng.next_normal();
            }
            m.set_params(&p).unwrap();
            check_gradients(&m, &b);
        }
    }

    #[test]
    fn gradients_for_variants() {
        let b = batch(4, 12);
        for heads in HeadVariant::ALL {
            for transfer in [TransferKind::Contrastive, TransferKind::SquaredError] {
                for temps in [TemperatureMode::Shared, TemperatureMode::PerTerm] {
                    let mut cfg = tiny_config(TrainingMode::ThreeTowers);
                    cfg.heads = heads;
                    cfg.init_tau = 0.3;
                    cfg.loss = LossConfig {
                        transfer,
                        weight: 1.5,
                        temperatures: temps,
                        dropped: None,
                    };
                    cfg.projection = ProjectionKind::Mlp;
                    let mut m = Model::<f64>::initialize(&cfg, Some(pretrained(4, 2, 3)), 4).unwrap();
                    let mut p = m.params();
                    let mut rng = RngStream::new(2);
                    for v in p.iter_mut() {
                        *v += 0.1 * rng.next_normal();
                    }
                    m.set_params(&p).unwrap();
                    check_gradients(&m, &b);
                }
            }
        }
    }

    #[test]
    fn temperature_gradient_zero_when_logits_equal() {
        // Identical rows everywhere make every similarity equal.
        let mut cfg = tiny_config(TrainingMode::Baseline);
        cfg.hidden = vec![];
        let m = Model::<f64>::initialize(&cfg, None, 0).unwrap();
        let row_i = [1.0, 0.5, -0.2, 0.3, 0.9];
        let row_t = [0.1, -0.4, 0.7, 0.2];
        let b = Batch::new(
            M::from_rows(&[row_i, row_i, row_i]).unwrap(),
            M::from_rows(&[row_t, row_t, row_t]).unwrap(),
            vec![0, 1, 2],
        )
        .unwrap();
        let (_, g) = m.loss_and_gradients(&b).unwrap();
        assert!(g[0].abs() < 1e-15, "{}", g[0]);
    }

    #[test]
    fn headless_identical_towers_give_equal_terms() {
        let mut cfg = tiny_config(TrainingMode::ThreeTowers);
        cfg.heads = HeadVariant::Headless;
        cfg.hidden = vec![];
        cfg.image_dim = 3;
        cfg.text_dim = 3;
        let p = pretrained(4, 3, 5);
        let mut m = Model::<f64>::initialize(&cfg, Some(p.clone()), 0).unwrap();
        // identity maps everywhere, fed the table rows on every side
        let ident = MlpEncoder::new(vec![super::super::Linear::identity(3)]).unwrap();
        m.image = ident.clone();
        m.text = ident.clone();
        m.frozen = Some(FrozenTower::new(p.clone(), ident).unwrap());
        let ids: Vec<usize> = (0..4).collect();
        let b = Batch::new(p.table.clone(), p.table.clone(), ids).unwrap();
        let l = m.loss(&b).unwrap();
        assert!((l.l_fg - l.l_fh).abs() < 1e-12);
        assert!((l.l_fg - l.l_gh).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_matches_baseline_image_text_term() {
        let p = pretrained(4, 4, 8);
        let mut cfg = tiny_config(TrainingMode::ThreeTowers);
        cfg.loss.weight = 0.0;
        let three = Model::<f64>::initialize(&cfg, Some(p), 3).unwrap();
        let base = Model::<f64>::initialize(&tiny_config(TrainingMode::Baseline), None, 3).unwrap();
        assert_eq!(three.image_encoder(), base.image_encoder());
        let b = batch(4, 1);
        let l3 = three.loss(&b).unwrap();
        let lb = base.loss(&b).unwrap();
        assert!((l3.l_fg - lb.l_fg).abs() < 1e-12);
        assert!((l3.total - lb.total / 3.0).abs() < 1e-12);
    }
}
