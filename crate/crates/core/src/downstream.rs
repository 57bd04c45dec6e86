//! Regression head on frozen features.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::container::Container;
use crate::data::{LabeledSample, MAX_SCORE, MIN_SCORE};
use crate::dit::DiTModel;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::DiffusionRng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Hidden width; `None` means half the feature width, rounded up.
    pub hidden: Option<usize>,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Clamp predictions to the score range at inference.
    pub clamp: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: None,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.0,
            clamp: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == Some(0) {
            return Err(Error::Config("head.hidden must be positive".into()));
        }
        self.optim().validate()
    }

    pub fn hidden_for(&self, input_dim: usize) -> usize {
        self.hidden.unwrap_or(input_dim.div_ceil(2))
    }

    fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Where feature vectors come from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    /// Pooled final-block state of a frozen encoder at timestep `t_feat`.
    Encoder { model: &'a DiTModel<f32>, t_feat: usize },
    /// The flattened image itself.
    Pixels,
}

impl FeatureSource<'_> {
    pub fn extract(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        match self {
            FeatureSource::Encoder { model, t_feat } => Ok(model.extract_features(image, *t_feat)?.into_data()),
            FeatureSource::Pixels => Ok(image.data().to_vec()),
        }
    }

    /// Stacks the features of every image into `[n × dim]`.
    pub fn extract_all<'i>(&self, images: impl IntoIterator<Item = &'i Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut rows = 0;
        for img in images {
            data.extend(self.extract(img)?);
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Contract("no images to featurize".into()));
        }
        let dim = data.len() / rows;
        Tensor::new([rows, dim], data)
    }

    fn check_frozen(&self) -> Result<()> {
        match self {
            FeatureSource::Encoder { model, .. } if !model.is_frozen() => {
                Err(Error::Contract("fine-tuning requires a frozen encoder".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `linear2(relu(linear1(standardize(f))))`.
///
/// The standardization statistics are fitted on the training features
/// and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead<S: Real = f32> {
    params: ParamStore<S>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    mean: Vec<S>,
    std: Vec<S>,
    clamp: bool,
}

impl<S: Real> RegressionHead<S> {
    /// He-initialized first layer, small second layer, output bias at `bias`.
    pub fn new(input_dim: usize, hidden: usize, bias: S, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Contract("head dimensions must be positive".into()));
        }
        let mut rng = DiffusionRng::new(seed);
        let mut params = ParamStore::new();
        let w1 = params.add_normal("linear1.w", &[input_dim, hidden], (2.0 / input_dim as f64).sqrt(), &mut rng);
        let b1 = params.add_zeros("linear1.b", &[hidden]);
        let w2 = params.add_normal("linear2.w", &[hidden, 1], (1.0 / hidden as f64).sqrt() * 0.1, &mut rng);
        let b2 = params.add("linear2.b", Tensor::full([1], bias));
        Ok(RegressionHead {
            params,
            w1,
            b1,
            w2,
            b2,
            mean: vec![S::zero(); input_dim],
            std: vec![S::one(); input_dim],
            clamp: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn hidden(&self) -> usize {
        self.params.get(self.b1).len()
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Real>(&self) -> RegressionHead<T> {
        RegressionHead {
            params: self.params.cast(),
            w1: self.w1,
            b1: self.b1,
            w2: self.w2,
            b2: self.b2,
            mean: self.mean.iter().map(|v| T::of(v.as_f64())).collect(),
            std: self.std.iter().map(|v| T::of(v.as_f64())).collect(),
            clamp: self.clamp,
        }
    }

    pub fn set_clamp(&mut self, clamp: bool) {
        self.clamp = clamp;
    }

    /// Fits per-feature mean and std on `features` (`[n × dim]`). A std
    /// below `1e-12` is replaced by 1.
    pub fn fit_standardization(&mut self, features: &Tensor<S>) -> Result<()> {
        let (n, d) = self.check_features(features)?;
        let mut mean = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for row in features.data().chunks_exact(d) {
            for j in 0..d {
                mean[j] += row[j].as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in features.data().chunks_exact(d) {
            for j in 0..d {
                sq[j] += (row[j].as_f64() - mean[j]).powi(2);
            }
        }
        self.mean = mean.iter().map(|&m| S::of(m)).collect();
        self.std = sq
            .iter()
            .map(|&s| {
                let sd = (s / n as f64).sqrt();
                if sd < 1e-12 {
                    S::one()
                } else {
                    S::of(sd)
                }
            })
            .collect();
        Ok(())
    }

    fn check_features(&self, features: &Tensor<S>) -> Result<(usize, usize)> {
        match features.shape() {
            [n, d] if *d == self.input_dim() && *n > 0 => Ok((*n, *d)),
            s => Err(Error::Shape(format!(
                "head expects [n × {}] features, got {s:?}",
                self.input_dim()
            ))),
        }
    }

    fn standardize(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = self.check_features(features)?;
        let mut out = features.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for ((v, &m), &sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / sd;
            }
        }
        Tensor::new([n, d], out)
    }

    /// Taped batch forward, `[n × dim] → [n × 1]`, unclamped.
    pub fn forward(&self, g: &mut Graph<S>, p: &BoundParams, features: &Tensor<S>) -> Result<Var> {
        let x = g.constant(self.standardize(features)?);
        let h = g.matmul(x, p.var(self.w1))?;
        let h = g.add_row(h, p.var(self.b1))?;
        let h = g.relu(h);
        let y = g.matmul(h, p.var(self.w2))?;
        g.add_row(y, p.var(self.b2))
    }

    /// Raw scores, one per row, without clamping.
    pub fn forward_batch(&self, features: &Tensor<S>) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let y = self.forward(&mut g, &p, features)?;
        Ok(g.value(y).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Scores for a batch of features, clamped to `[1, 5]` when enabled.
    pub fn predict_batch(&self, features: &Tensor<S>) -> Result<Vec<f64>> {
        let raw = self.forward_batch(features)?;
        Ok(if self.clamp {
            raw.into_iter().map(|v| v.clamp(MIN_SCORE, MAX_SCORE)).collect()
        } else {
            raw
        })
    }

}

impl RegressionHead<f32> {
    pub fn to_container(&self) -> Result<Container> {
        let header = serde_json::json!({
            "kind": HEAD_KIND,
            "input_dim": self.input_dim(),
            "hidden": self.hidden(),
            "clamp": self.clamp,
        });
        let mut c = Container::new(header.to_string());
        for (name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        c.push("norm.mean", Tensor::new([self.input_dim()], self.mean.clone())?);
        c.push("norm.std", Tensor::new([self.input_dim()], self.std.clone())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            kind: String,
            input_dim: usize,
            hidden: usize,
            clamp: bool,
        }
        let h: Header = serde_json::from_str(&c.header)?;
        if h.kind != HEAD_KIND {
            return Err(Error::Format(format!("expected a {HEAD_KIND} file, found {:?}", h.kind)));
        }
        let mut head = RegressionHead::<f32>::new(h.input_dim, h.hidden, 0.0, 0)?;
        let norm = |name: &str| -> Result<Vec<f32>> {
            let t = c.get(name).ok_or_else(|| Error::Format(format!("missing {name}")))?;
            if t.shape() != [h.input_dim] {
                return Err(Error::Shape(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        head.mean = norm("norm.mean")?;
        head.std = norm("norm.std")?;
        head.params.load_from(
            c.tensors
                .iter()
                .filter(|(n, _)| !n.starts_with("norm."))
                .map(|(n, t)| (n.as_str(), t)),
        )?;
        head.clamp = h.clamp;
        Ok(head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

const HEAD_KIND: &str = "regression-head";

/// Score for one feature vector (clamped when the head clamps).
pub fn head_forward<S: Real>(head: &RegressionHead<S>, feature: &Tensor<S>) -> Result<f64> {
    let row = feature.clone().reshape([1, feature.len()])?;
    Ok(head.predict_batch(&row)?[0])
}

/// Full-batch AdamW on MSE over a fixed feature matrix.
pub struct HeadTrainer {
    head: RegressionHead,
    optimizer: AdamW<f32>,
}

impl HeadTrainer {
    pub fn new(head: RegressionHead, cfg: &HeadConfig) -> Self {
        let optimizer = AdamW::new(cfg.optim(), head.params());
        HeadTrainer { head, optimizer }
    }

    /// One step; returns the MSE before the update.
    pub fn step(&mut self, features: &Tensor<f32>, targets: &[f64]) -> Result<f64> {
        if features.shape().first() != Some(&targets.len()) {
            return Err(Error::Shape(format!(
                "{} targets for features of shape {:?}",
                targets.len(),
                features.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.head.params.bind(&mut g);
        let y = self.head.forward(&mut g, &p, features)?;
        let target = Tensor::new([targets.len(), 1], targets.iter().map(|&v| v as f32).collect())?;
        let target = g.constant(target);
        let diff = g.sub(y, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq);
        g.backward(loss)?;
        self.head.params.collect_grads(&g, &p);
        self.optimizer.step(&mut self.head.params)?;
        Ok(g.value(loss).data()[0] as f64)
    }

    pub fn head(&self) -> &RegressionHead {
        &self.head
    }

    pub fn into_head(self) -> RegressionHead {
        self.head
    }
}

/// Fits a fresh head on precomputed features.
pub fn fit_head(features: &Tensor<f32>, targets: &[f64], cfg: &HeadConfig, seed: u64) -> Result<RegressionHead> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let dim = *features.shape().get(1).ok_or_else(|| Error::Shape("features must be [n × dim]".into()))?;
    let bias = (targets.iter().sum::<f64>() / targets.len() as f64) as f32;
    let mut head = RegressionHead::new(dim, cfg.hidden_for(dim), bias, seed)?;
    head.fit_standardization(features)?;
    head.set_clamp(cfg.clamp);
    let mut trainer = HeadTrainer::new(head, cfg);
    for _ in 0..cfg.steps {
        trainer.step(features, targets)?;
    }
    Ok(trainer.into_head())
}

/// Featurizes every sample once, then trains a head on the cached features.
pub fn finetune_head(source: FeatureSource<'_>, data: &[LabeledSample], cfg: &HeadConfig, seed: u64) -> Result<RegressionHead> {
    source.check_frozen()?;
    if data.is_empty() {
        return Err(Error::Contract("no labeled samples to fine-tune on".into()));
    }
    let features = source.extract_all(data.iter().map(|s| &s.image))?;
    let targets: Vec<f64> = data.iter().map(|s| s.score).collect();
    fit_head(&features, &targets, cfg, seed)
}

pub fn predict(source: FeatureSource<'_>, head: &RegressionHead, image: &Tensor<f32>) -> Result<f64> {
    let f = source.extract(image)?;
    head_forward(head, &Tensor::new([f.len()], f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusSpec};
    use crate::dit::DiTConfig;

    fn encoder() -> DiTModel<f32> {
        let mut m = DiTModel::new_dense_random(DiTConfig::default(), 3).unwrap();
        m.freeze();
        m
    }

    fn labeled(n: usize) -> Vec<LabeledSample> {
        generate_synthetic_corpus(&CorpusSpec { n, ..Default::default() })
            .unwrap()
            .iter()
            .map(|s| s.labeled().unwrap())
            .collect()
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut head = RegressionHead::new(4, 2, 3.25, 0).unwrap();
        for id in head.params.ids().collect::<Vec<_>>() {
            if head.params.name(id) != "linear2.b" {
                head.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let f = Tensor::new([4], vec![9.0, -1.0, 0.5, 7.0]).unwrap();
        assert_eq!(head_forward(&head, &f).unwrap(), 3.25);
    }

    #[test]
    fn hidden_width_defaults_to_half() {
        assert_eq!(HeadConfig::default().hidden_for(32), 16);
        assert_eq!(HeadConfig::default().hidden_for(33), 17);
    }

    #[test]
    fn clamping_applies_only_at_inference() {
        let mut head = RegressionHead::new(2, 2, 9.0, 0).unwrap();
        let f = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(head.forward_batch(&f).unwrap(), vec![9.0]);
        assert_eq!(head.predict_batch(&f).unwrap(), vec![5.0]);
        head.set_clamp(false);
        assert_eq!(head.predict_batch(&f).unwrap(), vec![9.0]);
    }

    #[test]
    fn unfrozen_encoder_and_empty_data_are_rejected() {
        let m = DiTModel::new(DiTConfig::default(), 0).unwrap();
        let src = FeatureSource::Encoder { model: &m, t_feat: 1 };
        assert!(matches!(
            finetune_head(src, &labeled(2), &HeadConfig::default(), 0),
            Err(Error::Contract(_))
        ));
        let m = encoder();
        let src = FeatureSource::Encoder { model: &m, t_feat: 1 };
        assert!(matches!(finetune_head(src, &[], &HeadConfig::default(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn overfits_small_set_and_leaves_encoder_alone() {
        let m = encoder();
        let before = m.params().checksum();
        let data = labeled(32);
        let src = FeatureSource::Encoder { model: &m, t_feat: 1 };
        let head = finetune_head(src, &data, &HeadConfig::default(), 5).unwrap();
        assert_eq!(m.params().checksum(), before);

        let feats = src.extract_all(data.iter().map(|s| &s.image)).unwrap();
        let pred = head.forward_batch(&feats).unwrap();
        let mse = pred.iter().zip(&data).map(|(p, s)| (p - s.score).powi(2)).sum::<f64>() / data.len() as f64;
        assert!(mse < 0.05, "training mse {mse}");
        for s in &data {
            let p = predict(src, &head, &s.image).unwrap();
            assert!((p - s.score).abs() < 0.3 + 1e-9 || mse > 0.05, "{p} vs {}", s.score);
            assert!((1.0..=5.0).contains(&p));
        }

        let again = finetune_head(src, &data, &HeadConfig::default(), 5).unwrap();
        assert_eq!(again, head);
    }

    #[test]
    fn cached_features_match_recomputed() {
        let m = encoder();
        let data = labeled(6);
        let src = FeatureSource::Encoder { model: &m, t_feat: 1 };
        let cfg = HeadConfig { steps: 20, ..Default::default() };
        let cached = finetune_head(src, &data, &cfg, 1).unwrap();

        let targets: Vec<f64> = data.iter().map(|s| s.score).collect();
        let first = src.extract_all(data.iter().map(|s| &s.image)).unwrap();
        let bias = (targets.iter().sum::<f64>() / targets.len() as f64) as f32;
        let mut head = RegressionHead::new(first.shape()[1], cfg.hidden_for(first.shape()[1]), bias, 1).unwrap();
        head.fit_standardization(&first).unwrap();
        let mut trainer = HeadTrainer::new(head, &cfg);
        for _ in 0..cfg.steps {
            let fresh = src.extract_all(data.iter().map(|s| &s.image)).unwrap();
            trainer.step(&fresh, &targets).unwrap();
        }
        assert_eq!(trainer.into_head(), cached);
    }

    #[test]
    fn only_head_parameters_move() {
        let data = labeled(4);
        let cfg = HeadConfig { steps: 3, ..Default::default() };
        let feats = FeatureSource::Pixels.extract_all(data.iter().map(|s| &s.image)).unwrap();
        let targets: Vec<f64> = data.iter().map(|s| s.score).collect();
        let head = fit_head(&feats, &targets, &cfg, 0).unwrap();
        let fresh = RegressionHead::new(256, 128, 0.0, 0).unwrap();
        assert_eq!(head.params().numel(), fresh.params().numel());
        assert!(head.params().iter().zip(fresh.params().iter()).any(|((_, a), (_, b))| a.data() != b.data()));
    }

    #[test]
    fn head_file_roundtrip() {
        let head = RegressionHead::new(5, 3, 2.0, 9).unwrap();
        let bytes = head.to_container().unwrap().encode();
        let back = RegressionHead::from_container(&Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, head);
        assert_eq!(back.to_container().unwrap().encode(), bytes);
    }
}
