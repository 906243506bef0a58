//! Continual training loop: per-step growth of the label space, teacher
//! snapshots, the detector freeze schedule, loss assembly, optimisation,
//! evaluation and checkpointing.

use crate::batch::{images_to_tensor, labels_to_tensor};
use crate::checkpoint;
use crate::detector::{detector_loss, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LabelSpace, LossConfig, LossTerms};
use crate::metrics::{ClassGroups, ConfusionMatrix, GroupScores};
use crate::nn::{self, Sgd};
use crate::replay::{self, ReplayBatch, ReplayEntry, ReservoirBuffer};
use crate::runlog::{EpochLosses, RunLog, StepReport};
use crate::segmodel::{predict, FrozenModel, HeadKind, ModelConfig, SegModel, Segmenter, TokenInit};
use crate::taskstream::{build_stream, Dataset, Image, LabelMap, Sample, StepSpec, StreamConfig, StreamStep, TaskStream};
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Which parts of the method are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Background-shift-aware classification loss; plain cross-entropy
    /// when off.
    pub bacs: bool,
    /// Logit and label replay from the exemplar memory.
    pub der: bool,
    /// Detector-masked feature distillation.
    pub mkd: bool,
    /// Class-token decoder; a per-class classifier head when off.
    pub dec: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            bacs: true,
            der: true,
            mkd: true,
            dec: true,
        }
    }
}

impl Components {
    pub const PRESETS: [&'static str; 5] = ["full", "no-mkd", "no-mkd-dec", "no-der", "finetune"];

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "full" => {}
            "no-mkd" => c.mkd = false,
            "no-mkd-dec" => {
                c.mkd = false;
                c.dec = false;
            }
            "no-der" => c.der = false,
            "finetune" => {
                c.bacs = false;
                c.der = false;
                c.mkd = false;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected one of {:?})",
                    Self::PRESETS
                )))
            }
        }
        Ok(c)
    }

    /// Switch off one component by name (`mkd`, `der`, `dec` or `bacs`).
    pub fn ablate(&mut self, part: &str) -> Result<()> {
        match part {
            "mkd" => self.mkd = false,
            "der" => self.der = false,
            "dec" => self.dec = false,
            "bacs" => self.bacs = false,
            other => return Err(Error::Config(format!("unknown component `{other}`"))),
        }
        Ok(())
    }

    pub fn uses_detector(&self) -> bool {
        self.bacs || self.mkd
    }

    /// Short variant name: `full`, `finetune`, or the disabled parts such
    /// as `-mkd-dec`.
    pub fn label(&self) -> String {
        if *self == Self::default() {
            return "full".into();
        }
        if !self.bacs && !self.der && !self.mkd && self.dec {
            return "finetune".into();
        }
        let mut s = String::new();
        for (on, name) in [(self.bacs, "bacs"), (self.der, "der"), (self.mkd, "mkd"), (self.dec, "dec")] {
            if !on {
                s.push('-');
                s.push_str(name);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub components: Components,
    pub token_init: TokenInit,
    /// Epochs of the first step.
    pub epochs: usize,
    /// Epochs of every later step; `epochs` when unset.
    pub incremental_epochs: Option<usize>,
    pub batch_size: usize,
    /// Replayed images per batch.
    pub replay_batch: usize,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub momentum: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
    pub buffer_capacity: usize,
    /// Memory insertions are attempted only during this many final epochs
    /// of each step, so stored logits come from a trained model.
    pub insert_epochs: usize,
    /// Seed of parameter initialisation, shuffling, augmentation and the
    /// memory.
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            model: ModelConfig::default(),
            detector: DetectorConfig::default(),
            loss: LossConfig::default(),
            components: Components::default(),
            token_init: TokenInit::Mean,
            epochs: 20,
            incremental_epochs: None,
            batch_size: 8,
            replay_batch: 8,
            lr_initial: 1e-2,
            lr_incremental: 1e-3,
            momentum: 0.9,
            grad_clip: None,
            buffer_capacity: 300,
            insert_epochs: 1,
            seed: 0,
            flip: true,
            eval_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Set the training seed and the scene seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stream.data_seed = seed;
        self
    }

    pub fn epochs_for(&self, t: usize) -> usize {
        if t <= 1 {
            self.epochs
        } else {
            self.incremental_epochs.unwrap_or(self.epochs)
        }
    }

    pub fn lr_for(&self, t: usize) -> f64 {
        if t <= 1 {
            self.lr_initial
        } else {
            self.lr_incremental
        }
    }

    /// Model configuration with the head implied by the components.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            head: if self.components.dec {
                HeadKind::ClassTokens
            } else {
                HeadKind::MultiClassifier
            },
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        self.stream.setup.step_sizes(self.stream.num_classes)?;
        if (self.model.height, self.model.width) != (self.stream.height, self.stream.width) {
            return Err(Error::Config(format!(
                "model input {}x{} differs from stream images {}x{}",
                self.model.height, self.model.width, self.stream.height, self.stream.width
            )));
        }
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("replay_batch", self.replay_batch),
            ("buffer_capacity", self.buffer_capacity),
            ("insert_epochs", self.insert_epochs),
            ("eval_batch", self.eval_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.incremental_epochs == Some(0) {
            return Err(Error::Config("incremental_epochs must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_incremental > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-pixel CE averaged per image, from detached logits.
fn per_image_loss(logits: &Tensor, labels: &Tensor, eps: f64) -> Result<Vec<f64>> {
    let (_, c, _, _) = logits.dims4()?;
    let z = logits.detach().to_dtype(DType::F64)?;
    let p = nn::softmax(&z, 1)?;
    let py = (p * losses::one_hot(labels, c, DType::F64)?)?.sum(1)?;
    let valid = labels.ne(crate::taskstream::IGNORE_ID as u32)?.to_dtype(DType::F64)?;
    let nll = (py.maximum(eps)?.log()?.neg()? * &valid)?;
    let sums = nll.flatten_from(1)?.sum(1)?.to_vec1::<f64>()?;
    let counts = valid.flatten_from(1)?.sum(1)?.to_vec1::<f64>()?;
    Ok(sums.iter().zip(&counts).map(|(s, n)| s / n.max(1.0)).collect())
}

/// Confusion matrix of `model` over `data`, predicting the argmax over all
/// logit channels.
pub fn evaluate(model: &dyn Segmenter, data: &Dataset, batch: usize, device: &Device) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let dtype = model.dtype();
    for chunk in data.samples.chunks(batch.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_tensor(&images, dtype, device)?;
        let pred = predict(&model.forward(&x)?.logits)?;
        let pred = pred.flatten_all()?.to_vec1::<u32>()?;
        let hw = chunk[0].labels.as_slice().len();
        for (i, s) in chunk.iter().enumerate() {
            cm.update(s.labels.as_slice(), &pred[i * hw..(i + 1) * hw])?;
        }
    }
    Ok(cm)
}

/// Step report from a confusion matrix over background plus
/// `num_classes - 1` seen classes.
pub fn report_from_matrix(
    step: usize,
    cm: &ConfusionMatrix,
    initial_classes: usize,
    epochs: Vec<EpochLosses>,
    seconds: f64,
) -> StepReport {
    let groups = ClassGroups::new(initial_classes, cm.classes() - 1);
    StepReport {
        step,
        classes: cm.classes(),
        per_class_iou: cm.per_class_iou(),
        scores: GroupScores::from_matrix(cm, &groups),
        epochs,
        seconds,
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: SegModel,
    detector: Detector,
    buffer: ReservoirBuffer,
    teacher: Option<FrozenModel>,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    spec: Option<StepSpec>,
    inserting: bool,
    device: Device,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = SegModel::new(
            cfg.model_config(),
            cfg.stream.setup.initial,
            &mut rng,
            DType::F32,
            &device,
        )?;
        let detector = Detector::new(
            cfg.detector.clone(),
            cfg.model.enc_width,
            &mut rng,
            DType::F32,
            &device,
        )?;
        let buffer = ReservoirBuffer::new(cfg.buffer_capacity, rng.random())?;
        Ok(Self {
            optimizer: Sgd::new(cfg.lr_initial, cfg.momentum),
            cfg,
            model,
            detector,
            buffer,
            teacher: None,
            rng,
            spec: None,
            inserting: true,
            device,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn buffer(&self) -> &ReservoirBuffer {
        &self.buffer
    }

    pub fn teacher(&self) -> Option<&FrozenModel> {
        self.teacher.as_ref()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Index of the step in progress (0 before the first step).
    pub fn step(&self) -> usize {
        self.spec.as_ref().map_or(0, |s| s.index)
    }

    /// Open step `spec.index`: snapshot the teacher, grow the label space,
    /// add the detector head and reset the optimizer.
    pub fn begin_step(&mut self, spec: &StepSpec) -> Result<()> {
        let t = spec.index;
        if t != self.step() + 1 {
            return Err(Error::InvalidArgument {
                arg: "step",
                reason: format!("expected step {}, got {t}", self.step() + 1),
            });
        }
        if t > 1 {
            self.teacher = Some(self.model.snapshot()?);
            self.model
                .add_classes(spec.new_classes.len(), self.cfg.token_init, &mut self.rng)?;
        }
        let space = LabelSpace::for_step(spec)?;
        if space.channels() != self.model.num_classes() {
            return Err(Error::Shape {
                expected: format!("{} channels for step {t}", space.channels()),
                got: format!("{}", self.model.num_classes()),
            });
        }
        self.detector.begin_step(t, &mut self.rng)?;
        self.optimizer = Sgd::new(self.cfg.lr_for(t), self.cfg.momentum);
        self.spec = Some(spec.clone());
        Ok(())
    }

    fn current_spec(&self) -> Result<&StepSpec> {
        self.spec.as_ref().ok_or_else(|| Error::InvalidArgument {
            arg: "step",
            reason: "no step has been started".into(),
        })
    }

    /// Names of every parameter the optimizer updates at the current step.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.model.params().names().map(String::from).collect();
        if self.cfg.components.uses_detector() {
            names.extend(self.detector.trainable_names());
        }
        names
    }

    /// Forward pass and loss terms of one batch at the current step.
    pub fn loss_terms(&mut self, images: &[&Image], labels: &[&LabelMap]) -> Result<(LossTerms, Tensor, Tensor)> {
        let spec = self.current_spec()?.clone();
        let t = spec.index;
        let comps = self.cfg.components;
        let lc = self.cfg.loss.clone();
        let x = images_to_tensor(images, DType::F32, &self.device)?;
        let y = labels_to_tensor(labels, &self.device)?;
        let (_, _, h, w) = x.dims4()?;
        let out = self.model.forward(&x)?;
        let space = LabelSpace::for_step(&spec)?;

        let zero = Tensor::new(0f32, &self.device)?;
        let mut detector_term = zero.clone();
        let mut fg_max = None;
        if comps.uses_detector() {
            let emb = self.detector.embed(&out.features, h, w)?;
            let mask: Vec<bool> = labels
                .iter()
                .flat_map(|l| l.as_slice().iter().map(|c| spec.new_classes.contains(c)))
                .collect();
            self.detector.update_prototype(t, &emb, &mask)?;
            let head = self.detector.scores_for(&emb, t, t)?;
            detector_term = detector_loss(&head.logits, &y, &spec.new_classes, self.cfg.detector.focal_gamma)?;
            // Only pixels labelled background can hide old classes.
            let is_bg = y.eq(0u32)?.to_dtype(DType::F32)?;
            fg_max = self.detector.old_foreground_max(&emb)?.map(|fg| fg * is_bg).transpose()?;
            if let (Some(fg), true) = (&fg_max, log::log_enabled!(log::Level::Trace)) {
                let v = fg.flatten_all()?.to_vec1::<f32>()?;
                let hi = v.iter().filter(|&&p| p as f64 > lc.delta).count();
                let mean = v.iter().map(|&p| p as f64).sum::<f64>() / v.len() as f64;
                log::trace!("fg_max mean {mean:.3}, {hi}/{} above delta", v.len());
            }
        }

        let classification = if comps.bacs {
            losses::bacs_loss(&out.logits, &y, fg_max.as_ref(), space, lc.gamma, lc.eps)?
        } else {
            losses::cross_entropy(&out.logits, &y, lc.eps)?
        };

        let mut kd = None;
        if t > 1 && comps.mkd {
            let teacher = self.teacher.as_ref().ok_or(Error::MissingTeacher(t))?;
            let fg = fg_max.as_ref().ok_or(Error::NoPrototypes)?;
            let tout = teacher.forward(&x)?;
            kd = Some(losses::masked_kd_loss(&out.penultimate, &tout.penultimate, fg, lc.delta)?);
        }

        let (mut der, mut der_pp) = (None, None);
        if t > 1 && comps.der && !self.buffer.is_empty() {
            let idx = self.buffer.sample_indices(self.cfg.replay_batch)?;
            let entries: Vec<&ReplayEntry> = idx.iter().map(|&i| &self.buffer.entries()[i]).collect();
            let rb = ReplayBatch::new(&entries, self.model.num_classes(), DType::F32, &self.device)?;
            let rz = self.model.forward(&rb.images)?.logits;
            der = Some(replay::der_loss_masked(&rz, &rb.stored_logits, &rb.channel_mask, &rb.labels)?);
            der_pp = Some(replay::der_pp_loss(&rz, &rb.labels, lc.eps)?);
        }

        Ok((
            LossTerms {
                classification,
                der,
                der_pp,
                kd,
                detector: detector_term,
            },
            out.logits,
            y,
        ))
    }

    /// One optimisation step on a batch, followed by memory insertions.
    pub fn train_batch(&mut self, samples: &[&Sample]) -> Result<EpochLosses> {
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if self.cfg.flip && self.rng.random::<bool>() {
                images.push(s.image.flipped());
                labels.push(s.labels.flipped());
            } else {
                images.push(s.image.clone());
                labels.push(s.labels.clone());
            }
        }
        let image_refs: Vec<&Image> = images.iter().collect();
        let label_refs: Vec<&LabelMap> = labels.iter().collect();
        let (terms, logits, y) = self.loss_terms(&image_refs, &label_refs)?;
        let total = losses::total_loss(&terms, &self.cfg.loss)?;
        let total_value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step(),
                value: total_value,
            });
        }

        let grads = total.backward()?;
        let model_names: Vec<String> = self.model.params().names().map(String::from).collect();
        let det_names = if self.cfg.components.uses_detector() {
            self.detector.trainable_names()
        } else {
            Vec::new()
        };
        let mut scale = 1.0;
        if let Some(clip) = self.cfg.grad_clip {
            let sq = nn::grad_sq_norm(self.model.params(), model_names.iter().map(String::as_str), &grads)?
                + nn::grad_sq_norm(self.detector.params(), det_names.iter().map(String::as_str), &grads)?;
            let norm = sq.sqrt();
            log::debug!("gradient norm {norm:.4}");
            if norm > clip {
                scale = clip / norm;
            }
        }
        self.optimizer
            .step_scaled(self.model.params(), model_names.iter().map(String::as_str), &grads, scale)?;
        self.optimizer
            .step_scaled(self.detector.params(), det_names.iter().map(String::as_str), &grads, scale)?;

        if self.cfg.components.der && self.inserting {
            let per_image = per_image_loss(&logits, &y, self.cfg.loss.eps)?;
            let (_, c, h, w) = logits.dims4()?;
            let flat = logits.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let n = c * h * w;
            for (i, (img, lab)) in images.into_iter().zip(labels).enumerate() {
                let entry = ReplayEntry::new(img, lab, flat[i * n..(i + 1) * n].to_vec(), c)?;
                self.buffer.maybe_insert(entry, per_image[i]);
            }
        }

        let scalar = |t: &Option<Tensor>| -> Result<f64> {
            Ok(match t {
                Some(t) => t.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                None => 0.0,
            })
        };
        Ok(EpochLosses {
            total: total_value,
            cls: terms.classification.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            der: scalar(&terms.der)?,
            der_pp: scalar(&terms.der_pp)?,
            kd: scalar(&terms.kd)?,
            det: terms.detector.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        })
    }

    /// One pass over `data` in a seeded random order; returns the mean of
    /// the batch losses.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochLosses> {
        if data.is_empty() {
            return Err(Error::EmptyDataset(format!("training data of step {}", self.step())));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = EpochLosses::default();
        let mut batches = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let l = self.train_batch(&samples)?;
            acc.total += l.total;
            acc.cls += l.cls;
            acc.der += l.der;
            acc.der_pp += l.der_pp;
            acc.kd += l.kd;
            acc.det += l.det;
            batches += 1.0;
        }
        Ok(EpochLosses {
            total: acc.total / batches,
            cls: acc.cls / batches,
            der: acc.der / batches,
            der_pp: acc.der_pp / batches,
            kd: acc.kd / batches,
            det: acc.det / batches,
        })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<ConfusionMatrix> {
        evaluate(&self.model, data, self.cfg.eval_batch, &self.device)
    }

    /// Train a full step and evaluate it on the step's validation set.
    pub fn train_step(&mut self, step: &StreamStep) -> Result<StepReport> {
        let start = Instant::now();
        self.begin_step(&step.spec)?;
        let t = step.spec.index;
        let mut epochs = Vec::new();
        let n = self.cfg.epochs_for(t);
        for e in 0..n {
            self.inserting = e + self.cfg.insert_epochs >= n;
            let l = self.train_epoch(&step.train)?;
            log::debug!(
                "step {t} epoch {} loss {:.4} (cls {:.4} der {:.4} der++ {:.4} kd {:.4} det {:.4})",
                e + 1,
                l.total,
                l.cls,
                l.der,
                l.der_pp,
                l.kd,
                l.det
            );
            epochs.push(l);
        }
        self.inserting = true;
        let cm = self.evaluate(&step.val)?;
        let report = report_from_matrix(
            t,
            &cm,
            self.cfg.stream.setup.initial,
            epochs,
            start.elapsed().as_secs_f64(),
        );
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        log::info!(
            "step {t} ({} images, {:.1}s): old {} new {} all {}",
            step.train.samples.len(),
            report.seconds,
            pct(report.scores.old),
            pct(report.scores.new),
            pct(report.scores.all)
        );
        Ok(report)
    }

    /// Write the model/detector checkpoint and the memory of the current
    /// step.
    pub fn save(&self, checkpoint_path: &Path, buffer_path: &Path, class_table: Vec<(u8, String)>) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("train_config".into(), serde_json::to_string(&self.cfg)?);
        extra.insert("rng".into(), serde_json::to_string(&self.rng)?);
        checkpoint::save(checkpoint_path, self.step(), class_table, &self.model, &self.detector, extra)?;
        self.buffer.save(buffer_path)
    }
}

/// Result of [`run_continual`].
pub struct RunOutcome {
    pub stream: TaskStream,
    pub log: RunLog,
    pub trainer: Trainer,
    /// Checkpoint written after the last step, if an output directory was
    /// given.
    pub final_checkpoint: Option<PathBuf>,
}

impl RunOutcome {
    pub fn reports(&self) -> &[StepReport] {
        &self.log.steps
    }
}

pub fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("step_{t:02}.safetensors"))
}

pub fn buffer_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("step_{t:02}.buffer.safetensors"))
}

pub const METRICS_FILE: &str = "metrics.txt";

/// Run every step of the configured stream. With `out`, a checkpoint, the
/// memory and the metrics file are written after each step.
pub fn run_continual(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let stream = build_stream(&cfg.stream)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = RunLog::default();
    let meta = [
        ("variant", cfg.components.label()),
        ("seed", cfg.seed.to_string()),
        ("setup", cfg.stream.setup.to_string()),
        ("mode", cfg.stream.mode.to_string()),
        ("token_init", cfg.token_init.to_string()),
        ("ordering_seed", cfg.stream.ordering_seed.to_string()),
        (
            "class_order",
            stream.class_order.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
        ),
    ];
    for (k, v) in meta {
        log.meta.insert(k.to_string(), v);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let class_table: Vec<(u8, String)> = stream
        .class_order
        .iter()
        .enumerate()
        .map(|(i, k)| (i as u8 + 1, k.name().to_string()))
        .collect();
    let mut final_checkpoint = None;
    for step in &stream.steps {
        let report = trainer.train_step(step)?;
        log.steps.push(report);
        if let Some(dir) = out {
            let t = step.spec.index;
            let ckpt = checkpoint_path(dir, t);
            trainer.save(&ckpt, &buffer_path(dir, t), class_table.clone())?;
            log.write(&dir.join(METRICS_FILE))?;
            final_checkpoint = Some(ckpt);
        }
    }
    Ok(RunOutcome {
        stream,
        log,
        trainer,
        final_checkpoint,
    })
}

/// Evaluate a saved checkpoint on the validation split of a saved stream,
/// at the step the checkpoint was written.
pub fn evaluate_checkpoint(checkpoint_file: &Path, data_dir: &Path) -> Result<StepReport> {
    let device = Device::Cpu;
    let ckpt = checkpoint::load(checkpoint_file, &device)?;
    let stream = crate::taskstream::load_stream(data_dir)?;
    let t = ckpt.state.step;
    let step = stream
        .steps
        .get(t.wrapping_sub(1))
        .ok_or_else(|| Error::MissingData(format!("stream has no step {t}")))?;
    let cm = evaluate(&ckpt.model, &step.val, 32, &device)?;
    Ok(report_from_matrix(t, &cm, stream.config.setup.initial, Vec::new(), 0.0))
}
