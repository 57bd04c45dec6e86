//! Denoising pre-training loop and checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::container::Container;
use crate::diffusion::{denoise_loss, sample_timestep, Denoiser, NoiseSchedule, ScheduleConfig};
use crate::dit::{DiTConfig, DiTModel};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::DiffusionRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Print a progress line every this many steps (0 = silent).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 8,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f32,
}

/// Writes the loss trace as `step,loss` CSV.
pub fn write_loss_csv(mut w: impl Write, trace: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for r in trace {
        writeln!(w, "{},{}", r.step, r.loss)?;
    }
    Ok(())
}

/// Trailing moving average; entry `i` averages `trace[i+1-window ..= i]`
/// (fewer at the start).
pub fn smoothed(trace: &[LossRecord], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, r) in trace.iter().enumerate() {
        acc += r.loss as f64;
        if i >= window {
            acc -= trace[i - window].loss as f64;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Stream id for the per-epoch shuffles; keeps them apart from the noise stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Corpus index of the `position`-th sample drawn: epoch `e` visits a
/// seeded permutation of the corpus in order.
fn batch_index(seed: u64, n: usize, position: u64) -> usize {
    let epoch = position / n as u64;
    let perm = DiffusionRng::derive(seed ^ SHUFFLE_STREAM, epoch).permutation(n);
    perm[(position % n as u64) as usize]
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DiTModel<f32>,
    pub schedule: ScheduleConfig,
    pub optimizer: Option<AdamW<f32>>,
    pub rng_state: u64,
    pub step: u64,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    kind: String,
    model: DiTConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    step: u64,
    rng_state: u64,
    frozen: bool,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

const CHECKPOINT_KIND: &str = "dit-checkpoint";

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let header = CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            model: self.model.config().clone(),
            schedule: self.schedule,
            train: self.train.clone(),
            step: self.step,
            rng_state: self.rng_state,
            frozen: self.model.is_frozen(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: *o.config(),
                step: o.step_count(),
            }),
        };
        let mut c = Container::new(serde_json::to_string(&header)?);
        let params = self.model.params();
        for (name, t) in params.iter() {
            c.push(name, t.clone());
        }
        if let Some(opt) = &self.optimizer {
            let (m, v) = opt.moments();
            for (prefix, moments) in [("adamw.m.", m), ("adamw.v.", v)] {
                for ((name, t), mom) in params.iter().zip(moments) {
                    let mt = Tensor::new(t.shape().to_vec(), mom.clone())?;
                    c.push(format!("{prefix}{name}"), mt);
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_str(&c.header)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a {CHECKPOINT_KIND} file, found {:?}",
                header.kind
            )));
        }
        let mut model = DiTModel::<f32>::new(header.model, 0)?;
        let n = model.params().len();
        let weights = c.tensors.iter().filter(|(name, _)| !name.starts_with("adamw."));
        model
            .params_mut()
            .load_from(weights.map(|(name, t)| (name.as_str(), t)))?;
        if header.frozen {
            model.freeze();
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(oh) => {
                let fetch = |prefix: &str| -> Result<Vec<Vec<f32>>> {
                    model
                        .params()
                        .iter()
                        .map(|(name, _)| {
                            c.get(&format!("{prefix}{name}"))
                                .map(|t| t.data().to_vec())
                                .ok_or_else(|| Error::Format(format!("missing {prefix}{name}")))
                        })
                        .collect()
                };
                let (m, v) = (fetch("adamw.m.")?, fetch("adamw.v.")?);
                debug_assert_eq!(m.len(), n);
                Some(AdamW::from_parts(oh.config, m, v, oh.step))
            }
        };
        Ok(Checkpoint {
            model,
            schedule: header.schedule,
            optimizer,
            rng_state: header.rng_state,
            step: header.step,
            train: header.train,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.encode())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::decode(bytes)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.to_container()?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path)?)
}

/// Stateful pre-training run.
pub struct Trainer {
    model: DiTModel<f32>,
    schedule_cfg: ScheduleConfig,
    schedule: NoiseSchedule,
    optimizer: AdamW<f32>,
    rng: DiffusionRng,
    step: u64,
    train: TrainConfig,
}

fn check_compatible(model: &DiTConfig, schedule: &ScheduleConfig) -> Result<()> {
    if model.timesteps != schedule.timesteps {
        return Err(Error::Config(format!(
            "model.T = {} but schedule.T = {}",
            model.timesteps, schedule.timesteps
        )));
    }
    Ok(())
}

impl Trainer {
    /// Fresh model and optimizer, all seeded from `train.seed`.
    pub fn new(model: DiTConfig, schedule: ScheduleConfig, optim: AdamWConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        optim.validate()?;
        train.validate()?;
        check_compatible(&model, &schedule)?;
        let model = DiTModel::new(model, DiffusionRng::derive(train.seed, 0).next_u64())?;
        let optimizer = AdamW::new(optim, model.params());
        Ok(Trainer {
            schedule: schedule.build()?,
            schedule_cfg: schedule,
            optimizer,
            rng: DiffusionRng::derive(train.seed, 1),
            model,
            step: 0,
            train,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.model.is_frozen() {
            return Err(Error::Contract("cannot train a frozen model".into()));
        }
        check_compatible(ckpt.model.config(), &ckpt.schedule)?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        Ok(Trainer {
            schedule: ckpt.schedule.build()?,
            schedule_cfg: ckpt.schedule,
            optimizer,
            rng: DiffusionRng::from_state(ckpt.rng_state),
            model: ckpt.model,
            step: ckpt.step,
            train: ckpt.train,
        })
    }

    pub fn model(&self) -> &DiTModel<f32> {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            schedule: self.schedule_cfg,
            optimizer: Some(self.optimizer.clone()),
            rng_state: self.rng.state(),
            step: self.step,
            train: self.train.clone(),
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint()
    }

    fn check_corpus(&self, corpus: &[Tensor<f32>]) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Contract("pre-training corpus is empty".into()));
        }
        let want = self.model.image_shape();
        if let Some(bad) = corpus.iter().find(|x| x.shape() != want) {
            return Err(Error::Shape(format!(
                "corpus image shape {:?} does not match model shape {want:?}",
                bad.shape()
            )));
        }
        Ok(())
    }

    /// One optimizer step on the next batch; returns the batch loss.
    pub fn train_step(&mut self, corpus: &[Tensor<f32>]) -> Result<f32> {
        self.check_corpus(corpus)?;
        let batch = self.train.batch;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let mut total = None;
        for k in 0..batch {
            let position = self.step * batch as u64 + k as u64;
            let x0 = &corpus[batch_index(self.train.seed, corpus.len(), position)];
            let t = sample_timestep(&mut self.rng, self.schedule.timesteps());
            let l = denoise_loss(&mut g, &self.model, &bound, x0, t, &mut self.rng, &self.schedule)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let loss = g.scale(total.expect("batch >= 1"), 1.0 / batch as f32);
        g.backward(loss)?;
        self.model.params_mut().collect_grads(&g, &bound);
        self.optimizer.step(self.model.params_mut())?;
        self.step += 1;
        Ok(g.value(loss).data()[0])
    }

    /// Runs `steps` more steps, returning one record per step.
    pub fn run(&mut self, corpus: &[Tensor<f32>], steps: u64) -> Result<Vec<LossRecord>> {
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let step = self.step;
            let loss = self.train_step(corpus)?;
            if self.train.log_every > 0 && step.is_multiple_of(self.train.log_every) {
                eprintln!("step {step:>6}  loss {loss:.5}");
            }
            trace.push(LossRecord { step, loss });
        }
        Ok(trace)
    }
}

/// Trains a fresh model for `train.steps` steps.
pub fn pretrain(
    corpus: &[Tensor<f32>],
    model: DiTConfig,
    schedule: ScheduleConfig,
    optim: AdamWConfig,
    train: TrainConfig,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let steps = train.steps;
    let mut trainer = Trainer::new(model, schedule, optim, train)?;
    let trace = trainer.run(corpus, steps)?;
    Ok((trainer.into_checkpoint(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_like;
    use crate::dit::Pooling;

    fn tiny() -> (DiTConfig, ScheduleConfig, TrainConfig) {
        let model = DiTConfig {
            image_h: 4,
            image_w: 4,
            channels: 1,
            patch_size: 2,
            hidden_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2,
            timesteps: 10,
            feature_pooling: Pooling::ClsToken,
        };
        let train = TrainConfig {
            steps: 6,
            batch: 3,
            seed: 11,
            log_every: 0,
        };
        let schedule = ScheduleConfig {
            timesteps: 10,
            beta_start: 0.01,
            beta_end: 0.2,
        };
        (model, schedule, train)
    }

    fn corpus() -> Vec<Tensor<f32>> {
        let mut rng = DiffusionRng::new(1);
        (0..5).map(|_| gaussian_like(&mut rng, &[4, 4, 1])).collect()
    }

    #[test]
    fn batches_follow_epoch_shuffles() {
        let n = 5;
        let first: Vec<usize> = (0..5).map(|p| batch_index(3, n, p)).collect();
        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let second: Vec<usize> = (5..10).map(|p| batch_index(3, n, p)).collect();
        let mut sorted = second.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn same_seed_same_trace() {
        let (m, s, t) = tiny();
        let data = corpus();
        let (a, ta) = pretrain(&data, m.clone(), s, AdamWConfig::default(), t.clone()).unwrap();
        let (b, tb) = pretrain(&data, m, s, AdamWConfig::default(), t).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    }

    #[test]
    fn rejects_bad_corpus_and_mismatched_schedule() {
        let (m, s, t) = tiny();
        assert!(pretrain(&[], m.clone(), s, AdamWConfig::default(), t.clone()).is_err());
        let wrong = vec![Tensor::zeros([8, 8, 1])];
        assert!(matches!(
            pretrain(&wrong, m.clone(), s, AdamWConfig::default(), t.clone()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Trainer::new(m, ScheduleConfig { timesteps: 20, ..s }, AdamWConfig::default(), t),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let (m, s, t) = tiny();
        let data = corpus();
        let mut full = Trainer::new(m.clone(), s, AdamWConfig::default(), t.clone()).unwrap();
        let full_trace = full.run(&data, 8).unwrap();

        let mut head = Trainer::new(m, s, AdamWConfig::default(), t).unwrap();
        let mut trace = head.run(&data, 3).unwrap();
        let bytes = head.checkpoint().encode().unwrap();
        let restored = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(restored.encode().unwrap(), bytes);
        let mut tail = Trainer::from_checkpoint(restored).unwrap();
        trace.extend(tail.run(&data, 5).unwrap());

        let bits = |tr: &[LossRecord]| tr.iter().map(|r| (r.step, r.loss.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&trace), bits(&full_trace));
        assert_eq!(tail.checkpoint().encode().unwrap(), full.checkpoint().encode().unwrap());
    }

    #[test]
    fn smoothing_window() {
        let tr: Vec<LossRecord> = [4.0, 2.0, 6.0, 8.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| LossRecord { step: i as u64, loss: l })
            .collect();
        assert_eq!(smoothed(&tr, 2), vec![4.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn loss_csv_format() {
        let mut out = Vec::new();
        write_loss_csv(&mut out, &[LossRecord { step: 0, loss: 1.5 }]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,loss\n0,1.5\n");
    }
}
