//! Training loop shared by the classification, attribute and re-id tasks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::augment::AugmentParams;
use super::triplets::TripletPool;
use crate::autodiff::{Graph, Mode, Var};
use crate::backbone::{build_backbone, BackboneConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gate::{GateConfig, ReidModel};
use crate::heads::{batch_triplet_loss, sigmoid_ce_loss, softmax_ce_loss, HeadKind, SourceModel};
use crate::params::{fnv1a, mix64, Module, ParamStore};
use crate::tensor::Tensor;
use crate::weights::{LoadPolicy, LoadReport, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Attr,
    Reid,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Attr => "attr",
            Task::Reid => "reid",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "attr" => Ok(Task::Attr),
            "reid" => Ok(Task::Reid),
            _ => Err(Error::Config { key: "task".into(), reason: format!("unknown task `{s}`") }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Images per step for the source tasks, triplets per step for re-id.
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before the rate is halved;
    /// 0 keeps the rate fixed.
    pub patience: usize,
    pub val_fraction: f64,
    pub margin: f64,
    /// Backbone stages kept when building the re-id extractor.
    pub keep_stages: usize,
    /// Re-id steps per epoch; by default enough triplets to cover the
    /// training images once.
    pub steps_per_epoch: Option<usize>,
    /// Fixed triplets drawn once for the re-id validation loss.
    pub val_triplets: usize,
    pub checkpoint_every: Option<usize>,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            epochs: 20,
            patience: 3,
            val_fraction: 0.1,
            margin: 0.3,
            keep_stages: 4,
            steps_per_epoch: None,
            val_triplets: 64,
            checkpoint_every: None,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: format!("train.{key}"), reason });
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be finite and >= 0, got {}", self.lr));
        }
        if self.batch < 2 {
            return bad("batch", "must be >= 2".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", format!("must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.margin >= 0.0) {
            return bad("margin", "must be >= 0".into());
        }
        if !(3..=5).contains(&self.keep_stages) {
            return bad("keep_stages", format!("must be 3, 4 or 5, got {}", self.keep_stages));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch", "must be >= 1".into());
        }
        if self.val_triplets == 0 {
            return bad("val_triplets", "must be >= 1".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every", "must be >= 1".into());
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,wall_seconds\n");
    for e in log {
        writeln!(s, "{},{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.lr, e.wall_seconds).expect("string write");
    }
    s
}

/// A model under training.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskModel {
    Source(SourceModel),
    Reid(ReidModel),
}

impl TaskModel {
    pub fn as_reid(&self) -> Option<&ReidModel> {
        match self {
            TaskModel::Reid(m) => Some(m),
            TaskModel::Source(_) => None,
        }
    }

    pub fn as_source(&self) -> Option<&SourceModel> {
        match self {
            TaskModel::Source(m) => Some(m),
            TaskModel::Reid(_) => None,
        }
    }
}

impl Module for TaskModel {
    fn stores(&self) -> Vec<&ParamStore> {
        match self {
            TaskModel::Source(m) => m.stores(),
            TaskModel::Reid(m) => m.stores(),
        }
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        match self {
            TaskModel::Source(m) => m.stores_mut(),
            TaskModel::Reid(m) => m.stores_mut(),
        }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainJob<'a> {
    pub task: Task,
    pub train: &'a TrainConfig,
    pub backbone: &'a BackboneConfig,
    pub gate: &'a GateConfig,
    pub seed: u64,
    /// Source weights to prefix-load before re-id training.
    pub source: Option<&'a WeightStore>,
    /// Where checkpoints go, if anywhere.
    pub run_dir: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TaskModel,
    pub log: Vec<EpochLog>,
    pub load_report: Option<LoadReport>,
    pub train_images: Vec<usize>,
    pub val_images: Vec<usize>,
}

impl TrainOutcome {
    pub fn weights(&self) -> WeightStore {
        WeightStore::from_module(&self.model)
    }
}

pub(crate) fn stream(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(seed ^ fnv1a(tag.as_bytes())), |acc, &p| mix64(acc ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Image-level validation split: `(train, val)`, both sorted.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream(seed, "val-split", &[])));
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Builds the untrained model for `job`.
pub fn build_model(job: &TrainJob<'_>, dataset: &Dataset) -> Result<TaskModel> {
    let backbone = build_backbone(job.backbone, job.seed)?;
    Ok(match job.task {
        Task::Classify => TaskModel::Source(SourceModel::new(backbone, HeadKind::Classify, dataset.num_identities(), job.seed)?),
        Task::Attr => {
            let k = dataset.num_attributes();
            if k == 0 {
                return Err(Error::Invalid("attribute training needs a dataset with attributes".into()));
            }
            TaskModel::Source(SourceModel::new(backbone, HeadKind::Attr, k, job.seed)?)
        }
        Task::Reid => {
            let bb = backbone.truncate(job.train.keep_stages)?;
            TaskModel::Reid(ReidModel::new(bb, job.gate.clone(), mix64(job.seed ^ 0x6c73_746d))?)
        }
    })
}

enum Targets {
    Labels(Vec<usize>),
    Attributes(Vec<f64>),
    Triplets,
}

struct Batch {
    images: Tensor,
    targets: Targets,
}

fn loss(model: &TaskModel, g: &mut Graph, batch: &Batch, mode: Mode, margin: f64) -> Result<Var> {
    let x = g.input(&batch.images);
    match (model, &batch.targets) {
        (TaskModel::Source(m), Targets::Labels(l)) => {
            let z = m.logits(g, x, mode)?;
            softmax_ce_loss(g, z, l)
        }
        (TaskModel::Source(m), Targets::Attributes(a)) => {
            let z = m.logits(g, x, mode)?;
            sigmoid_ce_loss(g, z, a)
        }
        (TaskModel::Reid(m), Targets::Triplets) => {
            let f = m.forward(g, x, mode)?;
            batch_triplet_loss(g, f, margin)
        }
        _ => Err(Error::Invalid("targets do not match the model".into())),
    }
}

struct Loader<'a> {
    task: Task,
    dataset: &'a Dataset,
    augment: &'a AugmentParams,
}

impl Loader<'_> {
    /// Stacks `indices`, augmenting image `j` with the stream `(tag, j)`.
    fn images(&self, indices: &[usize], aug_seed: Option<u64>) -> Tensor {
        let (h, w) = (self.dataset.height(), self.dataset.width());
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        for (j, &i) in indices.iter().enumerate() {
            let img = self.dataset.image(i);
            match aug_seed {
                Some(s) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix64(s ^ (j as u64).wrapping_mul(0xa076_1d64_78bd_642f)));
                    data.extend_from_slice(super::augment::augment(&img, &mut rng, self.augment).data());
                }
                None => data.extend_from_slice(img.data()),
            }
        }
        Tensor::new(&[indices.len(), 3, h, w], data).expect("consistent batch")
    }

    fn batch(&self, indices: &[usize], aug_seed: Option<u64>) -> Batch {
        let targets = match self.task {
            Task::Classify => Targets::Labels(indices.iter().map(|&i| self.dataset.images[i].person).collect()),
            Task::Attr => Targets::Attributes(indices.iter().flat_map(|&i| self.dataset.attribute_targets(i)).collect()),
            Task::Reid => Targets::Triplets,
        };
        Batch { images: self.images(indices, aug_seed), targets }
    }
}

/// Stacks triplets as `[anchors; positives; negatives]`.
fn stack_triplets(t: &[(usize, usize, usize)]) -> Vec<usize> {
    t.iter().map(|x| x.0).chain(t.iter().map(|x| x.1)).chain(t.iter().map(|x| x.2)).collect()
}

fn groups_of(dataset: &Dataset, images: &[usize]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); dataset.num_identities()];
    for &i in images {
        groups[dataset.images[i].person].push(i);
    }
    groups
}

/// Fixed validation triplets: anchors from `val`, partners from any image.
fn validation_triplets(dataset: &Dataset, val: &[usize], count: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let all = groups_of(dataset, &(0..dataset.len()).collect::<Vec<_>>());
    let usable: Vec<usize> = val.iter().copied().filter(|&i| all[dataset.images[i].person].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no validation image has a same-identity partner".into()));
    }
    let total = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, "val-triplets", &[]));
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let &a = usable.choose(&mut rng).expect("non-empty");
        let pid = dataset.images[a].person;
        let p = **all[pid].iter().filter(|&&i| i != a).collect::<Vec<_>>().choose(&mut rng).expect("partner exists");
        let others = total - all[pid].len();
        if others == 0 {
            return Err(Error::Invalid("validation needs at least 2 identities".into()));
        }
        let n = loop {
            let c = rng.gen_range(0..total);
            if dataset.images[c].person != pid {
                break c;
            }
        };
        out.push((a, p, n));
    }
    Ok(out)
}

fn snapshot_dir(dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    dir.map(|d| d.join(name))
}

/// Trains `job.task` on `dataset` and returns the final model and the
/// per-epoch log. On divergence the last good weights are written to the
/// run directory (when set) and a [`Error::Diverged`] is returned.
pub fn train_task(job: &TrainJob<'_>, dataset: &Dataset) -> Result<TrainOutcome> {
    let cfg = job.train;
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Invalid("training needs at least 2 images".into()));
    }
    let mut model = build_model(job, dataset)?;
    let load_report = match (job.task, job.source) {
        (Task::Reid, Some(src)) => {
            let report = src.apply(&mut model, LoadPolicy::PrefixMatch)?;
            log::info!(
                "transferred {} tensors ({} skipped, {} left at init)",
                report.copied.len(),
                report.skipped.len(),
                report.untouched.len()
            );
            Some(report)
        }
        (_, Some(_)) => return Err(Error::Invalid("weight transfer applies to the reid task only".into())),
        _ => None,
    };

    let (train_idx, val_idx) = split_validation(dataset.len(), cfg.val_fraction, job.seed);
    let loader = Loader { task: job.task, dataset, augment: &cfg.augment };
    let (pool, val_batches) = if job.task == Task::Reid {
        let pool = TripletPool::new(groups_of(dataset, &train_idx))?;
        let vt = validation_triplets(dataset, &val_idx, cfg.val_triplets, job.seed)?;
        let batches: Vec<Batch> = vt.chunks(cfg.batch).map(|c| loader.batch(&stack_triplets(c), None)).collect();
        (Some(pool), batches)
    } else {
        let batches = val_idx.chunks(cfg.batch).filter(|c| c.len() >= 2).map(|c| loader.batch(c, None)).collect();
        (None, batches)
    };
    if val_batches.is_empty() {
        return Err(Error::Invalid("validation split is too small to form a batch".into()));
    }

    let mut adam = Adam::new();
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = WeightStore::from_module(&model);
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream(job.seed, "epoch", &[epoch as u64]));
        let steps: Vec<Vec<usize>> = match &pool {
            Some(pool) => {
                let n = cfg.steps_per_epoch.unwrap_or_else(|| train_idx.len().div_ceil(cfg.batch).max(1));
                (0..n)
                    .map(|_| stack_triplets(&(0..cfg.batch).map(|_| pool.sample(&mut rng)).collect::<Vec<_>>()))
                    .collect()
            }
            None => {
                let mut order = train_idx.clone();
                order.shuffle(&mut rng);
                order.chunks(cfg.batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
            }
        };

        let mut total = 0.0;
        for (s, indices) in steps.iter().enumerate() {
            let batch = loader.batch(indices, Some(stream(job.seed, "augment", &[epoch as u64, s as u64])));
            let mut g = Graph::new();
            let l = loss(&model, &mut g, &batch, Mode::Train, cfg.margin)?;
            let value = g.item(l);
            if !value.is_finite() {
                return diverged(job, &last_good, epoch, format!("training loss is {value} at step {s}"));
            }
            g.backward(l)?;
            g.accumulate_module_grads(&mut model);
            let stats = g.take_stat_updates();
            if let Err(e) = adam.step(&mut model, lr) {
                return diverged(job, &last_good, epoch, e.to_string());
            }
            model.apply_stat_updates(&stats);
            total += value;
        }
        let train_loss = total / steps.len() as f64;

        let mut val_total = 0.0;
        for b in &val_batches {
            let mut g = Graph::new();
            let l = loss(&model, &mut g, b, Mode::Eval, cfg.margin)?;
            val_total += g.item(l);
        }
        let val_loss = val_total / val_batches.len() as f64;
        if !val_loss.is_finite() {
            return diverged(job, &last_good, epoch, format!("validation loss is {val_loss}"));
        }

        log.push(EpochLog { epoch, train_loss, val_loss, lr, wall_seconds: started.elapsed().as_secs_f64() });
        log::info!("{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:e}", job.task.as_str());
        last_good = WeightStore::from_module(&model);

        if val_loss < best {
            best = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                lr *= 0.5;
                since_best = 0;
                log::info!("validation plateau: learning rate halved to {lr:e}");
            }
        }
        if let (Some(k), Some(path)) = (cfg.checkpoint_every, snapshot_dir(job.run_dir, &format!("checkpoint_epoch{epoch:03}.rtlw"))) {
            if epoch % k == 0 {
                last_good.save(&path)?;
            }
        }
    }

    Ok(TrainOutcome { model, log, load_report, train_images: train_idx, val_images: val_idx })
}

fn diverged(job: &TrainJob<'_>, last_good: &WeightStore, epoch: usize, reason: String) -> Result<TrainOutcome> {
    if let Some(path) = snapshot_dir(job.run_dir, "last_good.rtlw") {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        last_good.save(&path)?;
        log::error!("training diverged; last good weights saved to {}", path.display());
    }
    Err(Error::Diverged { epoch, reason })
}
