//! Siamese mini-batch training with the multi-task objective, step-decay
//! learning rate, momentum SGD, checkpointing and resumption.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_pairs, Dataset, PairSample, VehicleRecord};
use crate::error::{Error, Result};
use crate::losses::{als_loss_from_logits, cross_entropy_from_logits, total_loss, AlsParams, LossComponents, LossWeights, PairContext};
use crate::model::checkpoint::Checkpoint;
use crate::model::verify::{verification_head_backward, DIFFERENT, SAME};
use crate::model::{AgNetParams, BranchGrads, BranchOutputs, Model};
use crate::tensor::{ImageTensor, Real};

pub const TRAIN_LOG_HEADER: &str = "epoch,step,lr,loss_total,loss_category,loss_color,loss_type,loss_verify";
const VELOCITY_PREFIX: &str = "optimizer.velocity.";
pub const FINAL_CHECKPOINT: &str = "final.agnc";

/// Consecutive `(epochs, rate)` spans.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub spans: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            spans: vec![(50, 0.1), (25, 0.01)],
        }
    }
}

impl LrSchedule {
    pub fn constant(epochs: usize, rate: f64) -> Self {
        Self { spans: vec![(epochs, rate)] }
    }

    pub fn total_epochs(&self) -> usize {
        self.spans.iter().map(|s| s.0).sum()
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.spans.iter().map(|(n, r)| format!("{n}:{r}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `"50:0.1,25:0.01"`.
impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("train.lr_schedule: expected `epochs:rate,...`, got `{s}`"));
        let spans = s
            .split(',')
            .map(|part| {
                let (n, r) = part.trim().split_once(':').ok_or_else(bad)?;
                Ok((n.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spans })
    }
}

/// Rate of the span containing the 0-based `epoch`.
pub fn lr_at_epoch(epoch: usize, schedule: &LrSchedule) -> Result<f64> {
    let mut end = 0;
    for &(span, rate) in &schedule.spans {
        end += span;
        if epoch < end {
            return Ok(rate);
        }
    }
    Err(Error::EpochRange {
        epoch,
        total: schedule.total_epochs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_epochs: usize,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub als: AlsParams,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Pairs drawn per epoch; `None` means one pair per training image.
    pub pairs_per_epoch: Option<usize>,
    pub positive_fraction: f64,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_epochs: 75,
            lr_schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 0.0005,
            weights: LossWeights::default(),
            als: AlsParams::default(),
            seed: 0,
            checkpoint_every: 1,
            pairs_per_epoch: None,
            positive_fraction: 0.5,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be positive".into()));
        }
        if self.lr_schedule.total_epochs() != self.total_epochs {
            return Err(Error::Config(format!(
                "train.lr_schedule covers {} epochs but train.epochs is {}",
                self.lr_schedule.total_epochs(),
                self.total_epochs
            )));
        }
        if let Some(&(_, r)) = self.lr_schedule.spans.iter().find(|s| !(s.1 > 0.0 && s.1.is_finite())) {
            return Err(Error::Config(format!("train.lr_schedule rates must be positive, got {r}")));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("train.pairs_per_epoch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!("train.positive_fraction must be in [0, 1], got {}", self.positive_fraction)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        self.weights.validate()?;
        self.als.validate()
    }

    pub fn batches_per_epoch(&self, dataset_len: usize) -> usize {
        self.pairs_per_epoch.unwrap_or(dataset_len).div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogEntry {
    /// 0-based epoch index.
    pub epoch: usize,
    /// Global 1-based step count.
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_category: f64,
    pub loss_color: f64,
    pub loss_type: f64,
    pub loss_verify: f64,
}

impl TrainLogEntry {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.loss_total, self.loss_category, self.loss_color, self.loss_type, self.loss_verify
        )
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            category: self.loss_category,
            color: self.loss_color,
            type_: self.loss_type,
            verify: self.loss_verify,
        }
    }
}

pub fn write_train_log<W: Write>(mut w: W, entries: &[TrainLogEntry]) -> Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for e in entries {
        writeln!(w, "{}", e.csv_row())?;
    }
    Ok(())
}

pub fn read_train_log<R: std::io::Read>(r: R) -> Result<Vec<TrainLogEntry>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let f = |i: usize| -> Result<f64> {
            row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                line,
                message: format!("train log column {i}"),
            })
        };
        out.push(TrainLogEntry {
            epoch: f(0)? as usize,
            step: f(1)? as u64,
            lr: f(2)?,
            loss_total: f(3)?,
            loss_category: f(4)?,
            loss_color: f(5)?,
            loss_type: f(6)?,
            loss_verify: f(7)?,
        });
    }
    Ok(out)
}

/// One verification pair with its images and labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainingPair<'a> {
    pub first: &'a ImageTensor<f32>,
    pub second: &'a ImageTensor<f32>,
    pub first_record: &'a VehicleRecord,
    pub second_record: &'a VehicleRecord,
}

impl<'a> TrainingPair<'a> {
    pub fn from_sample(sample: &PairSample, dataset: &'a Dataset, images: &'a [ImageTensor<f32>]) -> Self {
        Self {
            first: &images[sample.a],
            second: &images[sample.b],
            first_record: &dataset.records()[sample.a],
            second_record: &dataset.records()[sample.b],
        }
    }

    pub fn context(&self) -> PairContext {
        PairContext {
            id1: self.first_record.vehicle_id,
            id2: self.second_record.vehicle_id,
            attr1: self.first_record.attributes(),
            attr2: self.second_record.attributes(),
        }
    }
}

fn to_f64(v: &ndarray::Array1<f32>) -> Vec<f64> {
    v.iter().map(|&x| Real::to_f64(x)).collect()
}

fn scaled(grad: &[f64], scale: f64) -> ndarray::Array1<f32> {
    grad.iter().map(|&g| (g * scale) as f32).collect()
}

/// Mean per-image losses and their logit gradients, already scaled by the
/// loss weight and the averaging denominator.
fn image_losses(
    outputs: &[&BranchOutputs<f32>],
    records: &[&VehicleRecord],
    model: &Model<f32>,
    weights: &LossWeights,
) -> Result<(LossComponents, Vec<BranchGrads<f32>>)> {
    let n = outputs.len() as f64;
    let n_color = records.iter().filter(|r| r.color_id.is_some()).count();
    let n_type = records.iter().filter(|r| r.type_id.is_some()).count();
    let mut comp = LossComponents::default();
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, rec) in outputs.iter().zip(records) {
        let mut g = BranchGrads::zeros(model.config());
        let (l, d) = cross_entropy_from_logits(&to_f64(&out.id_logits), rec.vehicle_id as usize)?;
        comp.category += l / n;
        g.id_logits = scaled(&d, weights.lambda1 / n);
        if let Some(c) = rec.color_id {
            let (l, d) = cross_entropy_from_logits(&to_f64(&out.color_logits), c as usize)?;
            comp.color += l / n_color as f64;
            g.color_logits = scaled(&d, weights.lambda2 / n_color as f64);
        }
        if let Some(t) = rec.type_id {
            let (l, d) = cross_entropy_from_logits(&to_f64(&out.type_logits), t as usize)?;
            comp.type_ += l / n_type as f64;
            g.type_logits = scaled(&d, weights.lambda2 / n_type as f64);
        }
        grads.push(g);
    }
    Ok((comp, grads))
}

/// Model, optimizer state and progress counters of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    velocity: AgNetParams<f32>,
    config: TrainConfig,
    epochs_done: usize,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = model.params.zeros_like();
        Ok(Self {
            model,
            velocity,
            config,
            epochs_done: 0,
            step: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        if ckpt.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with seed {} but the run uses seed {}",
                ckpt.seed, config.seed
            )));
        }
        let model = ckpt.to_model(None)?;
        let mut trainer = Self::new(model, config)?;
        trainer.velocity = ckpt.restore_params(VELOCITY_PREFIX)?;
        trainer.epochs_done = ckpt.epoch as usize;
        trainer.step = ckpt.step;
        if trainer.epochs_done > trainer.config.total_epochs {
            return Err(Error::EpochRange {
                epoch: trainer.epochs_done,
                total: trainer.config.total_epochs,
            });
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    /// Parameters plus momentum buffers and counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, self.config.seed, self.epochs_done as u32, self.step);
        ckpt.push_params(VELOCITY_PREFIX, &self.velocity);
        ckpt
    }

    /// Loss and parameter gradients of one batch without updating anything.
    pub fn batch_gradients(&self, batch: &[TrainingPair<'_>]) -> Result<(LossComponents, AgNetParams<f32>)> {
        if batch.is_empty() {
            return Err(Error::Sampling("empty batch".into()));
        }
        let model = &self.model;
        let cfg = &self.config;
        let mut outputs = Vec::with_capacity(2 * batch.len());
        let mut caches = Vec::with_capacity(2 * batch.len());
        let mut records = Vec::with_capacity(2 * batch.len());
        for pair in batch {
            for (img, rec) in [(pair.first, pair.first_record), (pair.second, pair.second_record)] {
                let (o, c) = model.forward_with_cache(img)?;
                outputs.push(o);
                caches.push(c);
                records.push(rec);
            }
        }
        let out_refs: Vec<&BranchOutputs<f32>> = outputs.iter().collect();
        let (mut comp, mut upstream) = image_losses(&out_refs, &records, model, &cfg.weights)?;

        let mut grads = model.params.zeros_like();
        let b = batch.len() as f64;
        for (k, pair) in batch.iter().enumerate() {
            let (o1, o2) = (&outputs[2 * k], &outputs[2 * k + 1]);
            let logits = model.verify(o1.cat_embedding.view(), o2.cat_embedding.view())?;
            let ctx = pair.context();
            let target = if ctx.same_identity() { SAME } else { DIFFERENT };
            let z = [logits.values[0] as f64, logits.values[1] as f64];
            let (l, d) = als_loss_from_logits(&z, target, &ctx, &cfg.als)?;
            comp.verify += l / b;
            let s = cfg.weights.lambda3 / b;
            let d_logits = [(d[0] * s) as f32, (d[1] * s) as f32];
            let (d1, d2) = verification_head_backward(
                o1.cat_embedding.view(),
                o2.cat_embedding.view(),
                &model.params.verify_head,
                d_logits,
                &mut grads.verify_head,
            );
            upstream[2 * k].cat_embedding += &d1;
            upstream[2 * k + 1].cat_embedding += &d2;
        }
        total_loss(&comp, &cfg.weights)?;
        for ((o, c), u) in outputs.iter().zip(&caches).zip(&upstream) {
            model.backward(o, c, u, &mut grads);
        }
        Ok((comp, grads))
    }

    /// One momentum-SGD update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[TrainingPair<'_>], lr: f64) -> Result<TrainLogEntry> {
        let (comp, grads) = self.batch_gradients(batch)?;
        let total = total_loss(&comp, &self.config.weights)?;
        let (mu, wd, step_lr) = (self.config.momentum as f32, self.config.weight_decay as f32, lr as f32);
        let g = grads.params();
        let norm = g.iter().flat_map(|p| p.data).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let scale = match self.config.grad_clip {
            Some(c) if norm > c => (c / norm) as f32,
            _ => 1.0,
        };
        for (((_, p), (_, v)), g) in self.model.params.params_mut().into_iter().zip(self.velocity.params_mut()).zip(g) {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.data) {
                *v = mu * *v + scale * g + wd * *p;
                *p -= step_lr * *v;
            }
        }
        self.step += 1;
        Ok(TrainLogEntry {
            epoch: self.epochs_done,
            step: self.step,
            lr,
            loss_total: total,
            loss_category: comp.category,
            loss_color: comp.color,
            loss_type: comp.type_,
            loss_verify: comp.verify,
        })
    }

    /// Pair batches of epoch `epoch`; a pure function of the seed and epoch.
    pub fn epoch_batches(&self, dataset: &Dataset, epoch: usize) -> Result<Vec<Vec<PairSample>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        (0..self.config.batches_per_epoch(dataset.len()))
            .map(|_| sample_pairs(dataset, self.config.batch_size, self.config.positive_fraction, rng.next_u64()))
            .collect()
    }

    /// Trains the next epoch.
    pub fn run_epoch(&mut self, dataset: &Dataset, images: &[ImageTensor<f32>]) -> Result<Vec<TrainLogEntry>> {
        if images.len() != dataset.len() {
            return Err(Error::shape("training images", dataset.len(), images.len()));
        }
        let epoch = self.epochs_done;
        let lr = lr_at_epoch(epoch, &self.config.lr_schedule)?;
        let mut log = Vec::new();
        for batch in self.epoch_batches(dataset, epoch)? {
            let pairs: Vec<TrainingPair<'_>> = batch.iter().map(|s| TrainingPair::from_sample(s, dataset, images)).collect();
            log.push(self.train_step(&pairs, lr)?);
        }
        self.epochs_done += 1;
        Ok(log)
    }
}

/// Where [`fit`] writes its artifacts; `None` fields disable that output.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    /// Appended to; the header is written when the file is new or empty.
    pub log_path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct FitResult {
    pub model: Model<f32>,
    pub log: Vec<TrainLogEntry>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("ckpt-e{epochs_done:04}.agnc")
}

fn append_log(path: &Path, entries: &[TrainLogEntry]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
    }
    for e in entries {
        writeln!(f, "{}", e.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Runs the remaining epochs of `trainer`, checkpointing after every
/// `checkpoint_every` epochs and once more as [`FINAL_CHECKPOINT`].
pub fn fit_from(mut trainer: Trainer, dataset: &Dataset, images: &[ImageTensor<f32>], outputs: &FitOutputs) -> Result<FitResult> {
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    while trainer.epochs_done() < trainer.config().total_epochs {
        let entries = trainer.run_epoch(dataset, images)?;
        if let Some(path) = &outputs.log_path {
            append_log(path, &entries)?;
        }
        if let Some(last) = entries.last() {
            log::info!(
                "epoch {} step {} lr {} loss {:.4}",
                last.epoch,
                last.step,
                last.lr,
                last.loss_total
            );
        }
        log.extend(entries);
        let done = trainer.epochs_done();
        if let Some(dir) = &outputs.checkpoint_dir {
            if done % trainer.config().checkpoint_every == 0 {
                let path = dir.join(checkpoint_name(done));
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        trainer.checkpoint().save(&path)?;
        checkpoints.push(path);
    }
    Ok(FitResult {
        model: trainer.into_model(),
        log,
        checkpoints,
    })
}

pub fn fit(model: Model<f32>, dataset: &Dataset, images: &[ImageTensor<f32>], config: &TrainConfig, outputs: &FitOutputs) -> Result<FitResult> {
    fit_from(Trainer::new(model, config.clone())?, dataset, images, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, rgb_to_tensor, SyntheticSpec};
    use crate::model::ModelConfig;

    fn tiny() -> (Dataset, Vec<ImageTensor<f32>>, ModelConfig) {
        let spec = SyntheticSpec {
            num_identities: 4,
            images_per_identity: 2,
            image_side: 16,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let images = data.images.iter().map(rgb_to_tensor).collect();
        let cfg = ModelConfig {
            backbone_channels: vec![4, 8],
            num_identities: 4,
            embedding_dim: 8,
            mask_dim: 8,
            ..ModelConfig::default()
        };
        (data.dataset, images, cfg)
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_epochs: epochs,
            lr_schedule: LrSchedule::constant(epochs, 0.01),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::default();
        assert_eq!(lr_at_epoch(0, &s).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(49, &s).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(50, &s).unwrap(), 0.01);
        assert_eq!(lr_at_epoch(74, &s).unwrap(), 0.01);
        assert!(matches!(lr_at_epoch(75, &s), Err(Error::EpochRange { epoch: 75, total: 75 })));
    }

    #[test]
    fn schedule_text_round_trip() {
        let s: LrSchedule = "50:0.1, 25:0.01".parse().unwrap();
        assert_eq!(s, LrSchedule::default());
        assert_eq!(s.to_string().parse::<LrSchedule>().unwrap(), s);
        assert!("50-0.1".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn config_checks_schedule_length() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.total_epochs = 10;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn batches_per_epoch_rounds_up() {
        let mut c = train_cfg(1);
        c.batch_size = 3;
        assert_eq!(c.batches_per_epoch(8), 3);
        c.pairs_per_epoch = Some(9);
        assert_eq!(c.batches_per_epoch(8), 3);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (ds, images, cfg) = tiny();
        let model = Model::new(cfg).unwrap();
        let before = model.params.clone();
        let mut t = Trainer::new(model, train_cfg(1)).unwrap();
        let batch = &t.epoch_batches(&ds, 0).unwrap()[0];
        let pairs: Vec<_> = batch.iter().map(|s| TrainingPair::from_sample(s, &ds, &images)).collect();
        let entry = t.train_step(&pairs, 0.0).unwrap();
        assert!(entry.loss_total > 0.0);
        assert_eq!(t.model.params, before);
    }

    #[test]
    fn logged_total_matches_weighted_components() {
        let (ds, images, cfg) = tiny();
        let r = fit(Model::new(cfg).unwrap(), &ds, &images, &train_cfg(2), &FitOutputs::default()).unwrap();
        assert_eq!(r.log.len(), 4);
        for e in &r.log {
            let expected = 0.5 * e.loss_category + 0.5 * (e.loss_color + e.loss_type) + e.loss_verify;
            assert!((e.loss_total - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn unlabeled_attributes_are_skipped() {
        let (mut ds, images, cfg) = tiny();
        let mut records = ds.records().to_vec();
        for r in &mut records {
            r.color_id = None;
        }
        ds = Dataset::new(records).unwrap();
        let t = Trainer::new(Model::new(cfg).unwrap(), train_cfg(1)).unwrap();
        let batch = &t.epoch_batches(&ds, 0).unwrap()[0];
        let pairs: Vec<_> = batch.iter().map(|s| TrainingPair::from_sample(s, &ds, &images)).collect();
        let (comp, grads) = t.batch_gradients(&pairs).unwrap();
        assert_eq!(comp.color, 0.0);
        assert!(comp.type_ > 0.0);
        assert!(grads.color_head.weight.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn log_csv_round_trip() {
        let e = TrainLogEntry {
            epoch: 2,
            step: 9,
            lr: 0.01,
            loss_total: 1.5,
            loss_category: 0.25,
            loss_color: 0.125,
            loss_type: 2.0,
            loss_verify: -0.0625,
        };
        let mut buf = Vec::new();
        write_train_log(&mut buf, &[e, e]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRAIN_LOG_HEADER));
        assert_eq!(read_train_log(buf.as_slice()).unwrap(), vec![e, e]);
    }

    #[test]
    fn resume_requires_matching_seed() {
        let (_, _, cfg) = tiny();
        let t = Trainer::new(Model::new(cfg).unwrap(), train_cfg(1)).unwrap();
        let ckpt = t.checkpoint();
        let mut other = train_cfg(1);
        other.seed = 5;
        assert!(matches!(Trainer::resume(&ckpt, other), Err(Error::Checkpoint(_))));
        assert_eq!(Trainer::resume(&ckpt, train_cfg(1)).unwrap().epochs_done(), 0);
    }
}
