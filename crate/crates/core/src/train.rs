//! Mini-batch SGD with momentum and step decay, checkpointing, and the
//! finite-difference gradient audit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::colorspace::{ColorSpace, ImageTensor};
use crate::data::{Dataset, Sample, Split};
use crate::loss::FocalParams;
use crate::error::{Error, Result};
use crate::metrics::{apcer_bpcer_acer, Label, ScoreSet, ScoredSample};
use crate::model::{prepare_inputs, FbcConfig, FusionScheme, Model, ModelConfig, ModelInputs, Weights};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// Keep the weights of the epoch with the lowest validation ACER.
    #[default]
    BestValidAcer,
    LastEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lr0")]
    pub lr0: f64,
    /// The learning rate is divided by this every `decay_every` epochs.
    #[serde(default = "defaults::decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "defaults::decay_every")]
    pub decay_every: usize,
    #[serde(default = "defaults::lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model_selection: ModelSelection,
    /// Stop after this many epochs without a validation ACER improvement.
    #[serde(default)]
    pub early_stopping_patience: Option<usize>,
    #[serde(default)]
    pub model: ModelConfig,
}

mod defaults {
    pub fn lr0() -> f64 {
        0.01
    }
    pub fn decay_factor() -> f64 {
        10.0
    }
    pub fn decay_every() -> usize {
        40
    }
    pub fn lr_floor() -> f64 {
        1e-4
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn epochs() -> usize {
        100
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: defaults::lr0(),
            decay_factor: defaults::decay_factor(),
            decay_every: defaults::decay_every(),
            lr_floor: defaults::lr_floor(),
            weight_decay: defaults::weight_decay(),
            momentum: defaults::momentum(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
            model_selection: ModelSelection::default(),
            early_stopping_patience: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr0) || !positive(self.lr_floor) || !positive(self.decay_factor) {
            return Err(Error::Config("lr0, lr_floor and decay_factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Step decay clamped at the floor; `epoch` counts from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr0, self.decay_factor, self.decay_every, self.lr_floor, epoch)
    }
}

pub fn lr_schedule(lr0: f64, factor: f64, every: usize, floor: f64, epoch: usize) -> f64 {
    let steps = (epoch / every) as i32;
    (lr0 / factor.powi(steps)).max(floor)
}

/// `v ← m·v + g + wd·w`, `w ← w − lr·v`.
pub fn sgd_step<F: Real>(w: &mut [F], g: &[F], v: &mut [F], lr: F, momentum: F, weight_decay: F) -> Result<()> {
    if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {bad} is {:?}", g[bad])));
    }
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi + gi + weight_decay * *wi;
        *wi = *wi - lr * *vi;
    }
    Ok(())
}

/// Applies [`sgd_step`] to every tensor; biases skip weight decay.
pub fn sgd_update<F: Real>(
    weights: &mut Weights<F>,
    grad: &Weights<F>,
    velocity: &mut Weights<F>,
    lr: F,
    momentum: F,
    weight_decay: F,
) -> Result<()> {
    let decay: Vec<bool> = weights.params().iter().map(|p| p.decay).collect();
    let grads: Vec<&[F]> = grad.params().into_iter().map(|p| p.data).collect();
    for (((w, g), v), d) in weights.params_mut().into_iter().zip(grads).zip(velocity.params_mut()).zip(decay) {
        let wd = if d { weight_decay } else { F::zero() };
        sgd_step(w, g, v, lr, momentum, wd)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub valid_acer: Option<f64>,
    /// Samples whose true-class probability hit the floor.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestState {
    pub epoch: usize,
    pub valid_acer: f64,
    pub weights: Weights<f32>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub weights: Weights<f32>,
    pub velocity: Weights<f32>,
    pub best: Option<BestState>,
    pub epochs_since_best: usize,
}

const MAGIC: &[u8; 4] = b"FBC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    epoch: usize,
    config: TrainConfig,
    rng: ChaCha8Rng,
    best_epoch: Option<usize>,
    best_valid_acer: Option<f64>,
    epochs_since_best: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config.model, config.seed);
        let velocity = Weights::zeros(&config.model);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            epoch: 0,
            rng,
            weights,
            velocity,
            best: None,
            epochs_since_best: 0,
        })
    }

    /// The model selected by the configured rule.
    pub fn model(&self) -> Model<f32> {
        let weights = match (self.config.model_selection, &self.best) {
            (ModelSelection::BestValidAcer, Some(b)) => b.weights.clone(),
            _ => self.weights.clone(),
        };
        Model {
            config: self.config.model.clone(),
            weights,
        }
    }

    fn sections(&self) -> Vec<(&'static str, &Weights<f32>)> {
        let mut s = vec![("weights", &self.weights), ("velocity", &self.velocity)];
        if let Some(b) = &self.best {
            s.push(("best", &b.weights));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (prefix, w) in self.sections() {
            for p in w.params() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}.{}", p.name),
                    shape: p.shape,
                });
                payload.extend(p.data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: f32::DTYPE.to_string(),
            epoch: self.epoch,
            config: self.config.clone(),
            rng: self.rng.clone(),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_valid_acer: self.best.as_ref().map(|b| b.valid_acer),
            epochs_since_best: self.epochs_since_best,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&payload);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        if header.dtype != f32::DTYPE {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        header.config.validate()?;
        let mut payload = bytes[8 + len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut entries = header.tensors.iter();
        let model = &header.config.model;
        let mut read_section = |prefix: &str| -> Result<Weights<f32>> {
            let mut w = Weights::<f32>::zeros(model);
            let expected: Vec<(String, Vec<usize>)> = w
                .params()
                .iter()
                .map(|p| (format!("{prefix}.{}", p.name), p.shape.clone()))
                .collect();
            for ((name, shape), dst) in expected.into_iter().zip(w.params_mut()) {
                let entry = entries.next().ok_or_else(|| bad(&format!("missing tensor {name}")))?;
                if entry.name != name || entry.shape != shape {
                    return Err(bad(&format!("expected tensor {name} {shape:?}, found {} {:?}", entry.name, entry.shape)));
                }
                for d in dst.iter_mut() {
                    *d = payload.next().ok_or_else(|| bad("truncated payload"))?;
                }
            }
            Ok(w)
        };
        let weights = read_section("weights")?;
        let velocity = read_section("velocity")?;
        let best = match (header.best_epoch, header.best_valid_acer) {
            (Some(epoch), Some(valid_acer)) => Some(BestState {
                epoch,
                valid_acer,
                weights: read_section("best")?,
            }),
            _ => None,
        };
        if entries.next().is_some() || payload.next().is_some() {
            return Err(bad("trailing data"));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            weights,
            velocity,
            best,
            epochs_since_best: header.epochs_since_best,
        })
    }
}

/// Precomputed network inputs for a list of samples.
pub struct PreparedSplit {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub inputs: Vec<ModelInputs<f32>>,
}

impl PreparedSplit {
    pub fn new(config: &ModelConfig, samples: &[&Sample]) -> Result<Self> {
        let inputs = samples
            .par_iter()
            .map(|s| prepare_inputs(config, &s.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Bona fide scores for every prepared sample.
pub fn score_split<F: Real>(model: &Model<F>, split: &PreparedSplit) -> Result<ScoreSet> {
    let scores = split
        .inputs
        .par_iter()
        .map(|x| {
            let cast = ModelInputs { a: x.a.cast::<F>(), b: x.b.cast::<F>() };
            model.score(&cast).map(|s| s.as_f64().clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::new(
        split
            .ids
            .iter()
            .zip(&split.labels)
            .zip(scores)
            .map(|((id, &label), score)| ScoredSample {
                id: id.clone(),
                label,
                score,
            })
            .collect(),
    )
}

/// Runs one epoch of mini-batch SGD.
pub fn run_epoch(ckpt: &mut Checkpoint, train: &PreparedSplit) -> Result<EpochLog> {
    let cfg = &ckpt.config;
    let lr = cfg.lr_at(ckpt.epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ckpt.rng);
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut clamped = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let model = Model {
            config: cfg.model.clone(),
            weights: ckpt.weights.clone(),
        };
        let results = batch
            .par_iter()
            .map(|&i| model.loss_and_grad(&train.inputs[i], train.labels[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = Weights::<f32>::zeros(&cfg.model);
        for r in &results {
            grad.add_assign(&r.grad);
            total_loss += r.loss as f64;
            correct += r.correct as usize;
            clamped += r.clamped as usize;
        }
        grad.scale(1.0 / batch.len() as f32);
        sgd_update(
            &mut ckpt.weights,
            &grad,
            &mut ckpt.velocity,
            lr as f32,
            cfg.momentum as f32,
            cfg.weight_decay as f32,
        )?;
    }
    if !total_loss.is_finite() || !ckpt.weights.is_finite() {
        return Err(Error::NonFinite(format!("training diverged in epoch {}", ckpt.epoch)));
    }
    let n = train.len().max(1) as f64;
    Ok(EpochLog {
        epoch: ckpt.epoch,
        lr,
        loss: total_loss / n,
        train_acc: correct as f64 / n,
        valid_acer: None,
        clamped,
    })
}

fn require_both_classes(split: &PreparedSplit, name: &'static str) -> Result<()> {
    if split.is_empty() {
        return Err(Error::Empty(name));
    }
    for (label, what) in [(Label::Bonafide, "bonafide"), (Label::Attack, "attack")] {
        if !split.labels.contains(&label) {
            return Err(Error::Data(format!("{name} split has no {what} samples")));
        }
    }
    Ok(())
}

/// Trains from `ckpt` (fresh or resumed) until `config.epochs` epochs are
/// complete or early stopping fires. `on_epoch` sees each log entry and the
/// checkpoint after it was updated.
pub fn train(
    ckpt: &mut Checkpoint,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    ckpt.config.validate()?;
    let model_cfg = ckpt.config.model.clone();
    let train_split = PreparedSplit::new(&model_cfg, &dataset.split(Split::Train))?;
    require_both_classes(&train_split, "train")?;
    let valid_split = PreparedSplit::new(&model_cfg, &dataset.split(Split::Valid))?;
    let use_valid = match require_both_classes(&valid_split, "valid") {
        Ok(()) => true,
        Err(e) => {
            log::warn!("validation disabled ({e}); keeping the last epoch");
            false
        }
    };
    let mut logs = Vec::new();
    while ckpt.epoch < ckpt.config.epochs {
        let mut entry = run_epoch(ckpt, &train_split)?;
        ckpt.epoch += 1;
        if use_valid {
            let model = Model {
                config: model_cfg.clone(),
                weights: ckpt.weights.clone(),
            };
            let scores = score_split(&model, &valid_split)?;
            let acer = apcer_bpcer_acer(&scores, 0.5)?.acer;
            entry.valid_acer = Some(acer);
            if ckpt.best.as_ref().map_or(true, |b| acer < b.valid_acer) {
                ckpt.best = Some(BestState {
                    epoch: ckpt.epoch,
                    valid_acer: acer,
                    weights: ckpt.weights.clone(),
                });
                ckpt.epochs_since_best = 0;
            } else {
                ckpt.epochs_since_best += 1;
            }
        }
        log::info!(
            "epoch {} lr {:.2e} loss {:.4} train_acc {:.3} valid_acer {:?}",
            entry.epoch,
            entry.lr,
            entry.loss,
            entry.train_acc,
            entry.valid_acer
        );
        on_epoch(&entry, ckpt)?;
        logs.push(entry);
        if let Some(patience) = ckpt.config.early_stopping_patience {
            if use_valid && ckpt.epochs_since_best >= patience {
                log::info!("early stopping after {} epochs without improvement", patience);
                break;
            }
        }
    }
    Ok(logs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Perturb the analytic gradient to prove the audit can fail.
    pub corrupt_backward: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-4,
            floor: 1e-6,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: String,
    pub checked: usize,
    /// Coordinates whose probe changed the activation pattern.
    pub skipped_kinks: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of every parameter against central
/// differences in f64. Coordinates whose ±h probe changes any ReLU mask,
/// pooling or max routing, or soft-threshold region are skipped.
pub fn grad_check(
    model: &Model<f64>,
    inputs: &ModelInputs<f64>,
    label: Label,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let lambda = model.config.fbc.lambda;
    let fwd = model.forward(inputs, true)?;
    let base = fwd.pattern(lambda)?;
    let mut analytic = model.backward(&fwd, label)?;
    if opts.corrupt_backward {
        for t in analytic.params_mut() {
            t.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 1.1 + if i % 2 == 0 { 1e-3 } else { 0.0 });
        }
    }
    let names: Vec<String> = model.weights.params().iter().map(|p| p.name.clone()).collect();
    let grads: Vec<Vec<f64>> = analytic.params().iter().map(|p| p.data.to_vec()).collect();
    let coords: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.len()).map(move |i| (t, i)))
        .collect();
    let results = coords
        .par_iter()
        .map(|&(t, i)| -> Result<Option<f64>> {
            let probe = |delta: f64| -> Result<(f64, Vec<u64>)> {
                let mut m = model.clone();
                m.weights.params_mut()[t][i] += delta;
                let f = m.forward(inputs, true)?;
                Ok((m.loss_of(&f, label).0, f.pattern(lambda)?))
            };
            let (lp, pp) = probe(opts.h)?;
            let (lm, pm) = probe(-opts.h)?;
            if pp != base || pm != base {
                return Ok(None);
            }
            let num = (lp - lm) / (2.0 * opts.h);
            let a = grads[t][i];
            Ok(Some((a - num).abs() / a.abs().max(num.abs()).max(opts.floor)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: String::new(),
        checked: 0,
        skipped_kinks: 0,
        passed: true,
    };
    for (&(t, i), r) in coords.iter().zip(results) {
        match r {
            None => report.skipped_kinks += 1,
            Some(err) => {
                report.checked += 1;
                if err >= report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_coordinate = format!("{}[{i}]", names[t]);
                }
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err <= opts.tol;
    Ok(report)
}

/// Model sizes used by the gradient audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditSize {
    /// Two blocks, 8×8 input, k = 8.
    Tiny,
    /// Three blocks, 24×24 input, p = q = 8, k = 16, N = 9.
    Small,
}

impl AuditSize {
    pub fn model_config(self) -> ModelConfig {
        let (channels, input_size, k) = match self {
            AuditSize::Tiny => (vec![4, 6], 8, 8),
            AuditSize::Small => (vec![4, 6, 8], 24, 16),
        };
        ModelConfig {
            color_spaces: [ColorSpace::Rgb, ColorSpace::YCbCr],
            fusion: FusionScheme::Fbc,
            fbc: FbcConfig {
                k,
                r: 1,
                lambda: 0.001,
                normalization: Default::default(),
            },
            backbone: BackboneConfig {
                channels,
                kernel: 3,
                input_size,
            },
            shared_backbone: false,
            focal: FocalParams { alpha: 1.0, gamma: 1.0 },
        }
    }
}

/// Gradient audit of a freshly initialized model on a random image; the
/// seed fixes weights, image and label.
pub fn audit(size: AuditSize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let config = size.model_config();
    let n = config.backbone.input_size;
    let model = Model::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let image = ImageTensor::from_fn(ColorSpace::Rgb, n, n, |_, _| [rng.gen(), rng.gen(), rng.gen()])?;
    let label = if seed % 2 == 0 { Label::Bonafide } else { Label::Attack };
    let inputs = prepare_inputs(&config, &image)?;
    grad_check(&model, &inputs, label, opts)
}
