//! Sandwich-rule supernet training with the Bi-Teacher, plus subnet finetuning.
//!
//! Each step trains the largest subnet in FWBA mode on the labels, then the
//! smallest and `num_random_subnets` ND-uniform subnets in BWBA mode against
//! the teacher's (detached) predictions. Gradients of all passes accumulate
//! and a single Adam update follows.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{epoch_order, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::evosearch::{self, EvalData};
use crate::nn::{BnMode, Param};
use crate::searchspace::{largest, sample_uniform, smallest, Architecture};
use crate::supernet::{ExecMode, NetConfig, Subnet, Supernet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Execution mode of the largest subnet when it acts as teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Full-precision weights, binary activations.
    BiTeacher,
    /// Binary weights and activations (control).
    Bwba,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub num_random_subnets: usize,
    pub seed: u64,
    pub finetune: bool,
    pub dataset: DatasetSpec,
    pub teacher: TeacherMode,
    pub augment: bool,
    /// Images per class held out from the training view for evaluation.
    pub val_per_class: usize,
    /// Evaluate smallest/largest every this many epochs (0 disables).
    pub eval_every: usize,
    pub calib_batches: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Caps the steps of each epoch (0: a full pass).
    #[serde(default)]
    pub max_steps_per_epoch: usize,
    pub net: NetConfig,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 512,
            batch_size: 512,
            lr_init: 5e-4,
            weight_decay: 5e-6,
            schedule: Schedule::Cosine,
            num_random_subnets: 2,
            seed: 0,
            finetune: false,
            dataset: DatasetSpec::Folder {
                train: crate::data::data_root().join("imagenet/train"),
                test: Some(crate::data::data_root().join("imagenet/val")),
                resolution: 224,
            },
            teacher: TeacherMode::BiTeacher,
            augment: false,
            val_per_class: 50,
            eval_every: 16,
            calib_batches: 32,
            checkpoint_every: 1,
            max_steps_per_epoch: 0,
            net: NetConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            dataset: DatasetSpec::Cifar10 {
                root: None,
                download: true,
            },
            augment: true,
            eval_every: 5,
            calib_batches: 16,
            checkpoint_every: 5,
            ..Self::paper()
        }
    }

    /// Pipeline-2 finetuning of an extracted subnet.
    pub fn finetune() -> Self {
        Self {
            epochs: 100,
            lr_init: 1e-5,
            finetune: true,
            ..Self::desk()
        }
    }

    /// Seconds-scale configuration on synthetic data for the tiny space.
    pub fn tiny() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            lr_init: 2e-3,
            dataset: DatasetSpec::Synthetic {
                train: 256,
                test: 64,
                classes: 4,
                resolution: 12,
                noise: 0.5,
                seed: 1,
            },
            val_per_class: 8,
            eval_every: 1,
            calib_batches: 2,
            checkpoint_every: 1,
            ..Self::desk()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" | "desk-cifar" => Ok(Self::desk()),
            "finetune" => Ok(Self::finetune()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!(
                "unknown train preset `{name}` (paper, desk, finetune, tiny)"
            ))),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr_init.is_finite() && self.lr_init >= 0.0) {
            return Err(Error::Config("train.lr_init must be finite and non-negative".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train.weight_decay must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr_init,
            Schedule::Cosine => {
                let t = if total_steps <= 1 {
                    1.0
                } else {
                    step as f64 / (total_steps - 1) as f64
                };
                0.5 * self.lr_init * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    fn eval_data<'a>(&self, calib: &'a Dataset, val: &'a Dataset) -> EvalData<'a> {
        EvalData {
            calib,
            val,
            batch_size: self.batch_size,
            calib_batches: self.calib_batches,
            seed: self.seed,
        }
    }
}

/// Loss terms of one sandwich step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce_teacher: f64,
    pub kl_smallest: f64,
    pub kl_random: Vec<f64>,
    pub total: f64,
    /// Mean batch accuracy of the random subnets.
    pub random_acc: f64,
}

fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = labels.len();
    let p = softmax_rows(logits);
    let mut grad = Vec::with_capacity(logits.numel());
    let mut loss = 0.0;
    for (row, &y) in p.iter().zip(labels) {
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        for (j, &v) in row.iter().enumerate() {
            grad.push(((v - if j == y { 1.0 } else { 0.0 }) / n as f64) as f32);
        }
    }
    (loss / n as f64, Tensor::from_vec(logits.shape(), grad).unwrap())
}

/// Teacher probabilities, detached from any gradient path.
#[derive(Clone, Debug)]
pub struct Detached(Vec<Vec<f64>>);

impl Detached {
    pub fn from_logits(logits: &Tensor) -> Self {
        Detached(softmax_rows(logits))
    }
}

/// Mean `KL(p_teacher || p_student)` and its gradient w.r.t. the student logits.
pub fn kl_divergence(teacher: &Detached, student: &Tensor) -> (f64, Tensor) {
    let n = teacher.0.len();
    let q = softmax_rows(student);
    let mut grad = Vec::with_capacity(student.numel());
    let mut loss = 0.0;
    for (p_row, q_row) in teacher.0.iter().zip(&q) {
        for (&p, &qv) in p_row.iter().zip(q_row) {
            if p > 0.0 {
                loss += p * (p.ln() - qv.max(f64::MIN_POSITIVE).ln());
            }
            grad.push(((qv - p) / n as f64) as f32);
        }
    }
    (loss / n as f64, Tensor::from_vec(student.shape(), grad).unwrap())
}

pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Adam with decoupled state per parameter and L2 weight decay on
/// parameters whose kind decays.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Default::default()
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64, weight_decay: f64) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (i, p) in params.into_iter().enumerate() {
            let wd = if p.kind.decays() { weight_decay as f32 } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data();
            let val = p.value.data_mut();
            for j in 0..val.len() {
                let g = grad[j] + wd * val[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                val[j] -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }

    fn save_into(&self, ck: &mut Checkpoint, names: &[String]) {
        for (i, name) in names.iter().enumerate().take(self.m.len()) {
            ck.insert(
                format!("adam.m.{name}"),
                Tensor::from_vec(&[self.m[i].len()], self.m[i].clone()).unwrap(),
            );
            ck.insert(
                format!("adam.v.{name}"),
                Tensor::from_vec(&[self.v[i].len()], self.v[i].clone()).unwrap(),
            );
        }
    }

    fn load_from(ck: &Checkpoint, names: &[String]) -> Self {
        let mut a = Adam::new();
        a.t = ck.header.extra.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        let ms: Option<Vec<Vec<f32>>> = names
            .iter()
            .map(|n| ck.tensors.get(&format!("adam.m.{n}")).map(|t| t.data().to_vec()))
            .collect();
        let vs: Option<Vec<Vec<f32>>> = names
            .iter()
            .map(|n| ck.tensors.get(&format!("adam.v.{n}")).map(|t| t.data().to_vec()))
            .collect();
        if let (Some(m), Some(v)) = (ms, vs) {
            a.m = m;
            a.v = v;
        }
        a
    }
}

fn mix(seed: u64, step: u64, stream: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The random subnets drawn at `step`.
pub fn random_subnets(net: &Supernet, seed: u64, step: u64, count: usize) -> Result<Vec<Architecture>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, 2));
    (0..count)
        .map(|_| sample_uniform(net.space(), &mut rng, true))
        .collect()
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            value: v,
        })
    }
}

fn check_params(net: &Supernet) -> Result<()> {
    for p in net.params() {
        if let Some(v) = p.value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("parameter {}", p.name),
                value: *v as f64,
            });
        }
    }
    Ok(())
}

/// Gradient that reached the teacher logits during one step.
#[derive(Clone, Debug)]
pub struct TeacherProbe {
    pub teacher_logit_grad: Tensor,
    pub ce_grad: Tensor,
}

/// One sandwich-rule step; the optimizer is applied once at the end.
pub fn sandwich_step(
    net: &mut Supernet,
    opt: &mut Adam,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    step: u64,
    lr: f64,
) -> Result<StepLosses> {
    sandwich_step_probed(net, opt, images, labels, cfg, step, lr).map(|(l, _)| l)
}

pub fn sandwich_step_probed(
    net: &mut Supernet,
    opt: &mut Adam,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    step: u64,
    lr: f64,
) -> Result<(StepLosses, TeacherProbe)> {
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    net.zero_grad();
    let space = net.space().clone();
    // Teacher.
    let (t_mode, t_learn) = match cfg.teacher {
        TeacherMode::BiTeacher => (ExecMode::Fwba, false),
        TeacherMode::Bwba => (ExecMode::Bwba, true),
    };
    net.activate(&largest(&space))?;
    let t_logits = net.forward(images, t_mode, BnMode::Train)?;
    let (ce, d_ce) = cross_entropy(&t_logits, labels);
    finite("ce_teacher", ce)?;
    net.backward(&d_ce, t_learn)?;
    let teacher = Detached::from_logits(&t_logits);
    // Only the CE term has a path to the teacher logits.
    let teacher_logit_grad = d_ce.clone();
    let randoms = random_subnets(net, cfg.seed, step, cfg.num_random_subnets)?;
    // Students.
    let mut student = |arch: &Architecture, term: &str| -> Result<(f64, f64)> {
        net.activate(arch)?;
        let s = net.forward(images, ExecMode::Bwba, BnMode::Train)?;
        let (kl, d) = kl_divergence(&teacher, &s);
        finite(term, kl)?;
        net.backward(&d, true)?;
        Ok((kl, batch_accuracy(&s, labels)))
    };
    let (kl_small, _) = student(&smallest(&space), "kl_smallest")?;
    let mut kl_random = Vec::new();
    let mut acc = 0.0;
    for (i, arch) in randoms.iter().enumerate() {
        let (kl, a) = student(arch, &format!("kl_random[{i}]"))?;
        kl_random.push(kl);
        acc += a;
    }
    opt.step(net.params_mut(), lr, cfg.weight_decay);
    check_params(net)?;
    let total = ce + kl_small + kl_random.iter().sum::<f64>();
    finite("total", total)?;
    Ok((
        StepLosses {
            ce_teacher: ce,
            kl_smallest: kl_small,
            kl_random,
            total,
            random_acc: if randoms.is_empty() {
                0.0
            } else {
                acc / randoms.len() as f64
            },
        },
        TeacherProbe {
            teacher_logit_grad,
            ce_grad: d_ce,
        },
    ))
}

/// Append-only JSON-lines writer.
pub struct JsonlLog {
    w: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            w: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.w, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ce_teacher: f64,
    pub kl_smallest: f64,
    pub kl_random: Vec<f64>,
    pub total: f64,
    pub random_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_ce_teacher: f64,
    pub mean_random_acc: f64,
    pub val_smallest: Option<f64>,
    pub val_largest: Option<f64>,
}

/// Training state that survives checkpointing.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
    pub config_hash: String,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.check()?;
        Ok(Self {
            cfg,
            opt: Adam::new(),
            epoch: 0,
            step: 0,
            config_hash: String::new(),
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let full = (n / self.cfg.batch_size).max(1);
        if self.cfg.max_steps_per_epoch > 0 {
            full.min(self.cfg.max_steps_per_epoch)
        } else {
            full
        }
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.steps_per_epoch(n) * self.cfg.epochs) as u64
    }

    /// One pass over the training view.
    pub fn run_epoch(
        &mut self,
        net: &mut Supernet,
        train: &Dataset,
        log: Option<&mut JsonlLog>,
    ) -> Result<Vec<StepLosses>> {
        let n = train.len();
        if n == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        let total = self.total_steps(n);
        let order = epoch_order(n, self.cfg.seed, self.epoch as u64);
        let per = self.steps_per_epoch(n);
        let mut out = Vec::with_capacity(per);
        let mut log = log;
        for b in 0..per {
            let idx: Vec<usize> = order
                .iter()
                .cycle()
                .skip(b * self.cfg.batch_size)
                .take(self.cfg.batch_size.min(n))
                .copied()
                .collect();
            let mut aug = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, self.step, 1));
            let (x, y) = train.batch(&idx, if self.cfg.augment { Some(&mut aug) } else { None });
            let lr = self.cfg.lr_at(self.step, total);
            let losses = sandwich_step(net, &mut self.opt, &x, &y, &self.cfg, self.step, lr)?;
            if let Some(l) = log.as_deref_mut() {
                l.write(&StepRecord {
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    ce_teacher: losses.ce_teacher,
                    kl_smallest: losses.kl_smallest,
                    kl_random: losses.kl_random.clone(),
                    total: losses.total,
                    random_acc: losses.random_acc,
                })?;
            }
            self.step += 1;
            out.push(losses);
        }
        self.epoch += 1;
        Ok(out)
    }

    pub fn checkpoint(&self, net: &Supernet) -> Checkpoint {
        let mut ck = Checkpoint::from_supernet(net);
        ck.header.epoch = self.epoch;
        ck.header.rng_state = RngState {
            seed: self.cfg.seed,
            step: self.step,
        };
        ck.header.config_hash = self.config_hash.clone();
        ck.header.extra = serde_json::json!({
            "adam_t": self.opt.t,
            "train_config": self.cfg,
        });
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        self.opt.save_into(&mut ck, &names);
        ck
    }

    /// Network and trainer state from a supernet checkpoint.
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<(Supernet, Trainer)> {
        let net = ck.to_supernet()?;
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        let mut t = Trainer::new(cfg)?;
        t.opt = Adam::load_from(ck, &names);
        t.epoch = ck.header.epoch;
        t.step = ck.header.rng_state.step;
        t.config_hash = ck.header.config_hash.clone();
        Ok((net, t))
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs the remaining epochs of `trainer`, logging steps to
/// `out/metrics.jsonl`, epochs to `out/epochs.jsonl` and saving
/// `out/supernet.ckpt`.
pub fn train(
    net: &mut Supernet,
    trainer: &mut Trainer,
    train: &Dataset,
    val: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let fresh = trainer.step == 0;
    let mut log = out
        .map(|d| JsonlLog::open(&d.join("metrics.jsonl"), fresh))
        .transpose()?;
    let mut elog = out
        .map(|d| JsonlLog::open(&d.join("epochs.jsonl"), fresh))
        .transpose()?;
    let ck_path = out.map(|d| d.join("supernet.ckpt"));
    let mut records = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let losses = trainer.run_epoch(net, train, log.as_mut())?;
        let n = losses.len() as f64;
        let epoch = trainer.epoch;
        let (mut vs, mut vl) = (None, None);
        let every = trainer.cfg.eval_every;
        if every > 0 && !val.is_empty() && (epoch.is_multiple_of(every) || epoch == trainer.cfg.epochs) {
            let snap = net.bn_snapshot();
            let ed = trainer.cfg.eval_data(train, val);
            vs = Some(evosearch::evaluate(net, &smallest(net.space()), &ed)?);
            vl = Some(evosearch::evaluate(net, &largest(net.space()), &ed)?);
            net.restore_bn(&snap);
        }
        let rec = EpochRecord {
            epoch,
            mean_total: losses.iter().map(|l| l.total).sum::<f64>() / n,
            mean_ce_teacher: losses.iter().map(|l| l.ce_teacher).sum::<f64>() / n,
            mean_random_acc: losses.iter().map(|l| l.random_acc).sum::<f64>() / n,
            val_smallest: vs,
            val_largest: vl,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ce {:.4} random acc {:.3} val small/large {:?}/{:?}",
            rec.mean_total,
            rec.mean_ce_teacher,
            rec.mean_random_acc,
            vs,
            vl
        );
        if let Some(l) = elog.as_mut() {
            l.write(&rec)?;
        }
        records.push(rec);
        let every = trainer.cfg.checkpoint_every;
        if let Some(p) = &ck_path {
            if (every > 0 && epoch.is_multiple_of(every)) || epoch == trainer.cfg.epochs {
                trainer.checkpoint(net).save(p)?;
            }
        }
    }
    Ok(TrainOutcome {
        epochs: records,
        checkpoint: ck_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub losses: Vec<f64>,
}

/// Standard BWBA training of an extracted subnet with cross-entropy.
/// Accuracies are measured after BN recalibration on the training view.
pub fn finetune(sub: &mut Subnet, cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<FinetuneReport> {
    cfg.check()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let arch = sub.net.active().cloned().ok_or(Error::NoActiveSubnet)?;
    let ed = cfg.eval_data(train, val);
    let acc_before = evosearch::evaluate(&mut sub.net, &arch, &ed)?;
    let mut t = Trainer::new(cfg.clone())?;
    let total = t.total_steps(train.len());
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch as u64);
        for b in 0..t.steps_per_epoch(train.len()) {
            let idx: Vec<usize> = order
                .iter()
                .cycle()
                .skip(b * cfg.batch_size)
                .take(cfg.batch_size.min(train.len()))
                .copied()
                .collect();
            let mut aug = ChaCha8Rng::seed_from_u64(mix(cfg.seed, t.step, 1));
            let (x, y) = train.batch(&idx, if cfg.augment { Some(&mut aug) } else { None });
            sub.net.zero_grad();
            let logits = sub.net.forward(&x, ExecMode::Bwba, BnMode::Train)?;
            let (ce, d) = cross_entropy(&logits, &y);
            finite("ce", ce)?;
            sub.net.backward(&d, true)?;
            let lr = cfg.lr_at(t.step, total);
            t.opt.step(sub.net.params_mut(), lr, cfg.weight_decay);
            check_params(&sub.net)?;
            t.step += 1;
            losses.push(ce);
        }
    }
    let acc_after = evosearch::evaluate(&mut sub.net, &arch, &ed)?;
    Ok(FinetuneReport {
        epochs: cfg.epochs,
        acc_before,
        acc_after,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::tiny_space;

    fn oracle_kl(t: &[f64], s: &[f64]) -> f64 {
        let sm = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
        };
        let (p, q) = (sm(t), sm(s));
        p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn kl_matches_scalar_oracle() {
        let t = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let s = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let (kl, _) = kl_divergence(&Detached::from_logits(&t), &s);
        // p = (e^2, 1)/(e^2 + 1), q = (1/2, 1/2)
        let p0 = 2f64.exp() / (2f64.exp() + 1.0);
        let hand = p0 * (2.0 * p0).ln() + (1.0 - p0) * (2.0 * (1.0 - p0)).ln();
        assert!((kl - hand).abs() < 1e-12);
        assert!((kl - oracle_kl(&[2.0, 0.0], &[0.0, 0.0])).abs() < 1e-12);
        let (same, g) = kl_divergence(&Detached::from_logits(&t), &t);
        assert!(same.abs() < 1e-12 && g.data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let t = Detached::from_logits(&Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.3, 0.0, 2.0, -1.0]).unwrap());
        let s = Tensor::from_vec(&[2, 3], vec![0.2, 0.1, -0.4, 1.5, -0.3, 0.0]).unwrap();
        let (_, g) = kl_divergence(&t, &s);
        for i in 0..6 {
            let mut p = s.clone();
            p.data_mut()[i] += 1e-3;
            let mut m = s.clone();
            m.data_mut()[i] -= 1e-3;
            let fd = (kl_divergence(&t, &p).0 - kl_divergence(&t, &m).0) / 2e-3;
            assert!((fd - g.data()[i] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let l = Tensor::zeros(&[2, 4]);
        let (ce, g) = cross_entropy(&l, &[1, 3]);
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((g.data()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::tiny();
        assert_eq!(c.lr_at(0, 100), c.lr_init);
        assert!(c.lr_at(99, 100).abs() < 1e-15);
        assert!((c.lr_at(50, 101) - c.lr_init / 2.0).abs() < 1e-12);
    }

    #[test]
    fn presets_match_the_schedule_of_record() {
        let p = TrainConfig::paper();
        assert_eq!(
            (p.epochs, p.batch_size, p.lr_init, p.weight_decay),
            (512, 512, 5e-4, 5e-6)
        );
        assert_eq!(p.schedule, Schedule::Cosine);
        assert_eq!(p.num_random_subnets, 2);
        let f = TrainConfig::finetune();
        assert_eq!((f.lr_init, f.epochs), (1e-5, 100));
    }

    #[test]
    fn step_is_deterministic_and_decomposes() {
        let space = tiny_space();
        let cfg = TrainConfig::tiny();
        let (train, _) = cfg.dataset.load().unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let (x, y) = train.batch(&idx, None);
        let run = || {
            let mut net = Supernet::build(&space, cfg.net).unwrap();
            let mut opt = Adam::new();
            let a = sandwich_step(&mut net, &mut opt, &x, &y, &cfg, 0, 1e-3).unwrap();
            let b = sandwich_step(&mut net, &mut opt, &x, &y, &cfg, 1, 1e-3).unwrap();
            assert_eq!(opt.t, 2);
            (a, b)
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!((a1.clone(), b1), (a2, b2));
        let sum = a1.ce_teacher + a1.kl_smallest + a1.kl_random.iter().sum::<f64>();
        assert!((sum - a1.total).abs() <= 1e-5 * a1.total.abs());
        assert!(a1.kl_random.len() == 2 && a1.kl_random.iter().all(|&k| k >= 0.0));
    }
}
