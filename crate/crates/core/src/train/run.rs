use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use pirt_tensor::{Mode, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::RunConfig;
use super::optim::AdamW;
use super::sampler::PkSampler;
use crate::error::{PirtError, Result};
use crate::model::{ModelConfig, ModelInput, Pirt};
use crate::nn::{Forward, ParamStore};
use crate::pose::{PoseConfig, PoseGuidance};
use crate::synth::{augment, Dataset, Split, SynthSample};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One metrics line: epoch means of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    /// Absent when the pose branch is disabled.
    pub l_local: Option<f64>,
    pub l_global: f64,
    pub loss: f64,
    #[serde(skip)]
    pub step_losses: Vec<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize") + "\n"
    }
}

/// Network inputs for `samples` plus the pose guidance they were built from.
pub fn prepare_batch<T: Real>(
    model: &ModelConfig,
    pose: &PoseConfig,
    samples: &[&SynthSample],
) -> Result<(ModelInput<T>, Vec<PoseGuidance>)> {
    let feature_hw = model.feature_hw();
    let mut guidance = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height(), s.width()) != (model.image_h, model.image_w) {
            return Err(PirtError::Config(format!(
                "model expects {}×{} images, sample is {}×{}",
                model.image_h,
                model.image_w,
                s.height(),
                s.width()
            )));
        }
        guidance.push(PoseGuidance::from_keypoints(&s.keypoints, (s.height(), s.width()), feature_hw, pose)?);
    }
    let images: Vec<&[f32]> = samples.iter().map(|s| s.image.data()).collect();
    let refs: Vec<&PoseGuidance> = guidance.iter().collect();
    Ok((ModelInput::assemble(model, &images, &refs)?, guidance))
}

/// Training state: parameters, optimizer, position in the schedule and the
/// run's random stream.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Pirt,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    /// Epochs completed so far.
    pub epoch: usize,
    rng: ChaCha8Rng,
    dataset: Dataset,
    train: Vec<usize>,
    labels: Vec<usize>,
    sampler: PkSampler,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_for(&dataset)?;
        let train: Vec<usize> = (0..dataset.samples.len())
            .filter(|&i| dataset.samples[i].split == Split::Train)
            .collect();
        let classes: BTreeMap<usize, usize> = train
            .iter()
            .map(|&i| dataset.samples[i].identity)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(c, id)| (id, c))
            .collect();
        if classes.len() != model_config.num_classes {
            return Err(PirtError::Config(format!(
                "dataset declares {} training identities but holds {}",
                model_config.num_classes,
                classes.len()
            )));
        }
        let labels: Vec<usize> = train.iter().map(|&i| classes[&dataset.samples[i].identity]).collect();
        let mut store = ParamStore::new();
        let model = Pirt::build(&model_config, &mut store, config.seed)?;
        let optimizer = AdamW::new(config.optim.clone(), &store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let sampler = PkSampler::new(&labels, config.p, config.k);
        Ok(Trainer {
            config,
            model,
            store,
            optimizer,
            epoch: 0,
            rng,
            dataset,
            train,
            labels,
            sampler,
        })
    }

    /// Restores a run saved by [`Trainer::checkpoint`] against `dataset`.
    pub fn resume(checkpoint: &Checkpoint, dataset: Dataset) -> Result<Self> {
        let config = RunConfig::parse(&checkpoint.config_text)?;
        let mut t = Trainer::new(config, dataset)?;
        if t.model.config != checkpoint.model {
            return Err(PirtError::Config(format!(
                "checkpoint model {:?} does not match the dataset-derived model {:?}",
                checkpoint.model, t.model.config
            )));
        }
        checkpoint.restore_params(&mut t.store)?;
        if checkpoint.moments.len() != t.store.len() {
            return Err(PirtError::Config(format!(
                "checkpoint holds optimizer state for {} of {} parameters",
                checkpoint.moments.len(),
                t.store.len()
            )));
        }
        t.optimizer.step = checkpoint.optimizer_step;
        for (i, slot) in checkpoint.moments.iter().enumerate() {
            let (m, v) = match slot {
                Some((m, v)) => (Some(m.clone()), Some(v.clone())),
                None => (None, None),
            };
            if m.is_some() != t.optimizer.m[i].is_some() {
                return Err(PirtError::Config(format!("optimizer state of {} does not match", t.store.entries()[i].name)));
            }
            t.optimizer.m[i] = m;
            t.optimizer.v[i] = v;
        }
        t.epoch = checkpoint.epoch as usize;
        t.rng = checkpoint.rng.restore();
        Ok(t)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.schedule.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            model: self.model.config.clone(),
            epoch: self.epoch as u64,
            rng: RngState::capture(&self.rng),
            params: self
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.trainable, e.value.clone()))
                .collect(),
            optimizer_step: self.optimizer.step,
            moments: self
                .optimizer
                .m
                .iter()
                .zip(&self.optimizer.v)
                .map(|(m, v)| m.clone().zip(v.clone()))
                .collect(),
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let e = self.epoch;
        let lr = self.config.schedule.lr(self.config.optim.lr, e);
        let mut erng = ChaCha8Rng::seed_from_u64(self.rng.random());
        let batches = self.sampler.epoch(&mut erng);
        if batches.is_empty() {
            return Err(PirtError::Config("the sampler produced no batch".into()));
        }
        let (mut local, mut global, mut total) = (0.0, 0.0, 0.0);
        let mut step_losses = Vec::with_capacity(batches.len());
        for batch in &batches {
            let batch_seed: u64 = erng.random();
            let (l, g, t) = self.step(batch, batch_seed, lr)?;
            local += l.unwrap_or(0.0);
            global += g;
            total += t;
            step_losses.push(t);
        }
        let n = batches.len() as f64;
        self.epoch += 1;
        Ok(EpochLog {
            epoch: e,
            lr,
            l_local: self.model.config.use_pose.then_some(local / n),
            l_global: global / n,
            loss: total / n,
            step_losses,
        })
    }

    /// One optimizer step on the training samples at `batch` (indices into
    /// the training split).
    fn step(&mut self, batch: &[usize], batch_seed: u64, lr: f64) -> Result<(Option<f64>, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let mut owned = Vec::with_capacity(batch.len());
        for &b in batch {
            let s = &self.dataset.samples[self.train[b]];
            owned.push(if self.config.augment { augment(s, &mut rng)? } else { s.clone() });
        }
        let refs: Vec<&SynthSample> = owned.iter().collect();
        let (input, _) = prepare_batch::<f32>(&self.model.config, &self.config.pose, &refs)?;
        let labels: Vec<usize> = batch.iter().map(|&b| self.labels[b]).collect();
        let mut ctx = Forward::new(&mut self.store, Mode::Train, rng.random());
        let out = self.model.forward(&mut ctx, &input)?;
        let terms = self.model.loss(&mut ctx, &out, &labels)?;
        let read = |v| ctx.tape.value(v).item() as f64;
        let local = terms.local.map(read);
        let (global, total) = (read(terms.global), read(terms.total));
        if !total.is_finite() {
            return Err(PirtError::Numeric(format!(
                "non-finite loss {total} in epoch {} (batch seed {batch_seed})",
                self.epoch
            )));
        }
        let grads = ctx.backward(terms.total)?;
        if let Some(bad) = grads.iter().flatten().position(|g| !g.all_finite()) {
            return Err(PirtError::Numeric(format!(
                "non-finite gradient (slot {bad}) in epoch {} (batch seed {batch_seed})",
                self.epoch
            )));
        }
        self.optimizer.update(&mut self.store, &grads, lr)?;
        Ok((local, global, total))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PirtError::io(format!("writing {}", path.display()), e))
}

/// Runs `trainer` to the end of its schedule, appending one metrics line per
/// epoch to `out/metrics.jsonl` and writing checkpoints under `out`.
pub fn train_to_end(trainer: &mut Trainer, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    fs::create_dir_all(out).map_err(|e| PirtError::io(format!("creating {}", out.display()), e))?;
    let metrics = out.join(METRICS_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(trainer.epoch > 0)
        .write(true)
        .truncate(trainer.epoch == 0)
        .open(&metrics)
        .map_err(|e| PirtError::io(format!("opening {}", metrics.display()), e))?;
    let mut logs = Vec::new();
    while !trainer.done() {
        let entry = trainer.run_epoch()?;
        log.write_all(entry.to_json_line().as_bytes())
            .map_err(|e| PirtError::io(format!("writing {}", metrics.display()), e))?;
        on_epoch(&entry);
        logs.push(entry);
        let every = trainer.config.save_every;
        if every > 0 && trainer.epoch % every == 0 && !trainer.done() {
            let path = out.join(format!("checkpoint-{:04}.bin", trainer.epoch));
            write_file(&path, &trainer.checkpoint().to_bytes())?;
        }
    }
    write_file(&out.join(CHECKPOINT_FILE), &trainer.checkpoint().to_bytes())?;
    Ok(logs)
}
