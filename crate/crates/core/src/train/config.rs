use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{PirtError, Result};
use crate::model::ModelConfig;
use crate::pose::PoseConfig;
use crate::retrieval::MatchConfig;
use crate::synth::{generate_dataset, load_dataset, Dataset, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3.5e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-epoch learning rate: linear warmup, a plateau, then cosine decay to
/// `floor` at the last epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub warmup: usize,
    pub decay_start: usize,
    pub floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 30,
            warmup: 5,
            decay_start: 15,
            floor: 1e-6,
        }
    }
}

impl Schedule {
    /// Rate used throughout epoch `epoch` (0-based).
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        if epoch < self.warmup {
            return base * (epoch + 1) as f64 / self.warmup as f64;
        }
        if epoch < self.decay_start {
            return base;
        }
        let span = self.epochs.saturating_sub(1).saturating_sub(self.decay_start);
        if span == 0 {
            return self.floor;
        }
        let t = ((epoch - self.decay_start) as f64 / span as f64).min(1.0);
        self.floor + (base - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Everything one training run depends on. Serialized as flat `key = value`
/// lines with dotted keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Saved dataset directory; `None` generates `synth` in memory.
    pub data_path: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Image extents and class count are taken from the dataset.
    pub model: ModelConfig,
    pub pose: PoseConfig,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity in a batch.
    pub k: usize,
    pub matching: MatchConfig,
    pub seed: u64,
    pub augment: bool,
    /// Extra checkpoint every this many epochs; 0 writes only the final one.
    pub save_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: None,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            pose: PoseConfig::default(),
            optim: OptimConfig::default(),
            schedule: Schedule::default(),
            p: 8,
            k: 4,
            matching: MatchConfig::default(),
            seed: 0,
            augment: true,
            save_every: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| PirtError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let m = &self.model;
        let path = self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let train = s.n_train_identities.map(|n| n.to_string()).unwrap_or_else(|| "auto".into());
        vec![
            ("data.path", path),
            ("data.identities", s.n_identities.to_string()),
            ("data.images", s.images_per_identity.to_string()),
            ("data.cameras", s.n_cameras.to_string()),
            ("data.height", s.height.to_string()),
            ("data.width", s.width.to_string()),
            ("data.occlusion", s.occlusion_prob.to_string()),
            ("data.coverage", s.max_coverage.to_string()),
            ("data.jitter", s.jitter.to_string()),
            ("data.seed", s.seed.to_string()),
            ("data.train_identities", train),
            ("data.queries", s.queries_per_identity.to_string()),
            ("model.c", m.channels.to_string()),
            ("model.d", m.irm_dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.units", m.units.to_string()),
            ("model.ffn", m.ffn.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.margin", m.margin.to_string()),
            ("model.pose", m.use_pose.to_string()),
            ("model.intra", m.use_intra.to_string()),
            ("model.inter", m.use_inter.to_string()),
            ("pose.sigma", self.pose.sigma.to_string()),
            ("pose.occluded_scale", self.pose.occluded_scale.to_string()),
            ("pose.kernel", self.pose.kernel.to_string()),
            ("pose.tau", self.pose.tau.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("schedule.epochs", self.schedule.epochs.to_string()),
            ("schedule.warmup", self.schedule.warmup.to_string()),
            ("schedule.decay_start", self.schedule.decay_start.to_string()),
            ("schedule.floor", self.schedule.floor.to_string()),
            ("sampler.p", self.p.to_string()),
            ("sampler.k", self.k.to_string()),
            ("match.n", self.matching.top_n.to_string()),
            ("match.lambda", self.matching.lambda.to_string()),
            ("match.score_mode", self.matching.score_mode.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.augment", self.augment.to_string()),
            ("train.save_every", self.save_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.synth;
        let m = &mut self.model;
        match key {
            "data.path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.identities" => s.n_identities = parse(key, v)?,
            "data.images" => s.images_per_identity = parse(key, v)?,
            "data.cameras" => s.n_cameras = parse(key, v)?,
            "data.height" => s.height = parse(key, v)?,
            "data.width" => s.width = parse(key, v)?,
            "data.occlusion" => s.occlusion_prob = parse(key, v)?,
            "data.coverage" => s.max_coverage = parse(key, v)?,
            "data.jitter" => s.jitter = parse(key, v)?,
            "data.seed" => s.seed = parse(key, v)?,
            "data.train_identities" => {
                s.n_train_identities = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "data.queries" => s.queries_per_identity = parse(key, v)?,
            "model.c" => m.channels = parse(key, v)?,
            "model.d" => m.irm_dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.units" => m.units = parse(key, v)?,
            "model.ffn" => m.ffn = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.margin" => m.margin = parse(key, v)?,
            "model.pose" => m.use_pose = parse(key, v)?,
            "model.intra" => m.use_intra = parse(key, v)?,
            "model.inter" => m.use_inter = parse(key, v)?,
            "pose.sigma" => self.pose.sigma = parse(key, v)?,
            "pose.occluded_scale" => self.pose.occluded_scale = parse(key, v)?,
            "pose.kernel" => self.pose.kernel = parse(key, v)?,
            "pose.tau" => self.pose.tau = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "schedule.epochs" => self.schedule.epochs = parse(key, v)?,
            "schedule.warmup" => self.schedule.warmup = parse(key, v)?,
            "schedule.decay_start" => self.schedule.decay_start = parse(key, v)?,
            "schedule.floor" => self.schedule.floor = parse(key, v)?,
            "sampler.p" => self.p = parse(key, v)?,
            "sampler.k" => self.k = parse(key, v)?,
            "match.n" => self.matching.top_n = parse(key, v)?,
            "match.lambda" => self.matching.lambda = parse(key, v)?,
            "match.score_mode" => self.matching.score_mode = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.augment" => self.augment = parse(key, v)?,
            "train.save_every" => self.save_every = parse(key, v)?,
            _ => return Err(PirtError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply(text)?;
        Ok(config)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PirtError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| PirtError::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PirtError::Config(msg));
        if self.data_path.is_none() {
            self.synth.validate()?;
        }
        self.pose.validate().map_err(|e| PirtError::Config(strip(e)))?;
        self.matching.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", o.lr));
        }
        if !(o.weight_decay >= 0.0 && o.lr * o.weight_decay < 1.0) {
            return fail(format!("weight decay {} out of range", o.weight_decay));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return fail(format!("betas ({}, {}) must lie in [0, 1)", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) {
            return fail(format!("optimizer epsilon {} must be positive", o.eps));
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.warmup > s.decay_start || s.decay_start > s.epochs {
            return fail(format!(
                "schedule needs 0 < epochs and warmup ≤ decay start ≤ epochs, got {}/{}/{}",
                s.epochs, s.warmup, s.decay_start
            ));
        }
        if !(s.floor >= 0.0 && s.floor <= o.lr) {
            return fail(format!("cosine floor {} must lie in [0, lr]", s.floor));
        }
        if self.p < 2 || self.k < 2 {
            return fail(format!("batches need at least 2 identities × 2 images, got {}×{}", self.p, self.k));
        }
        Ok(())
    }

    /// Loads `data_path`, or generates the synthetic benchmark when unset.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_path {
            Some(dir) => load_dataset(dir),
            None => generate_dataset(&self.synth),
        }
    }

    /// Model shape for `dataset`: image extents and one class per training
    /// identity.
    pub fn model_for(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let classes = dataset.config.train_identities();
        let train_samples = dataset.samples.iter().filter(|s| s.split == crate::synth::Split::Train).count();
        if self.p > classes {
            return Err(PirtError::Config(format!(
                "sampler wants {} identities per batch, dataset has {classes}",
                self.p
            )));
        }
        if self.p * self.k > train_samples {
            return Err(PirtError::Config(format!(
                "batch of {}×{} exceeds the {train_samples} training images",
                self.p, self.k
            )));
        }
        let model = ModelConfig {
            image_h: dataset.config.height,
            image_w: dataset.config.width,
            num_classes: classes,
            ..self.model.clone()
        };
        model.validate()?;
        Ok(model)
    }
}

/// Message of an error without its category prefix.
fn strip(e: PirtError) -> String {
    match e {
        PirtError::Config(m) | PirtError::Param(m) | PirtError::Contract(m) | PirtError::Numeric(m) => m,
        other => other.to_string(),
    }
}

impl FromStr for RunConfig {
    type Err = PirtError;

    fn from_str(s: &str) -> Result<Self> {
        RunConfig::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("match.score_mode", "G").unwrap();
        c.set("data.train_identities", "10").unwrap();
        c.set("data.path", "/tmp/x").unwrap();
        c.set("optim.lr", "0.00012345678901234").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["model.channels = 3", "model.c = many", "no equals sign", "model.pose = yes"] {
            assert!(matches!(RunConfig::parse(text), Err(PirtError::Config(_))), "{text}");
        }
        let c = RunConfig::parse("# comment\n\nmodel.c = 32 # trailing\n").unwrap();
        assert_eq!(c.model.channels, 32);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::default();
        let base = 3.5e-4;
        assert_eq!(s.lr(base, 0), base / 5.0);
        assert_eq!(s.lr(base, 4), base);
        assert_eq!(s.lr(base, 14), base);
        assert_eq!(s.lr(base, 15), base);
        assert!((s.lr(base, 29) - 1e-6).abs() < 1e-9);
        let mut prev = base;
        for e in 15..30 {
            let lr = s.lr(base, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_runs_are_rejected() {
        for (k, v) in [("sampler.k", "1"), ("schedule.warmup", "20"), ("optim.lr", "0"), ("pose.kernel", "2")] {
            let mut c = RunConfig::default();
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(PirtError::Config(_))), "{k}");
        }
        RunConfig::default().validate().unwrap();
    }
}
