//! Training loops for the vanilla, mask-supervised and pseudo-mask supervised
//! objectives, plus a scalar value-head probe.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{gradcam_vars, normalize_minmax_vars, target_scalars, upsample_vars};
use crate::autodiff::{Tape, Tensor, Var};
use crate::backend::layers::{cross_entropy, mse};
use crate::backend::{self, Model, ParamStore, ReferenceModel, ScalarTargetSelector};
use crate::datasets::{Dataset, SplitRole};
use crate::error::{Error, Result};
use crate::regularizers::{self, alpha_beta_vars, camal_term_vars, LogRow, MaskBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vanilla,
    Camal,
    Prior,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Camal => "camal",
            Method::Prior => "prior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    GroundTruth,
    ExternalDirectory,
}

/// How per-sample CAM gradients are obtained during a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extraction {
    /// One reverse traversal on the summed scalar.
    BatchLevel,
    /// One reverse traversal per sample.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub mask_source: MaskSource,
    pub pseudo_mask_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub lambda: f32,
    pub seed: u64,
    pub model: String,
    /// Defaults to the model's last spatial layer.
    pub capture_layer: Option<String>,
    /// Differentiate the regularizer through the CAM gradients.
    pub double_backward: bool,
    pub extraction: Extraction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Camal,
            mask_source: MaskSource::GroundTruth,
            pseudo_mask_dir: None,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            lambda: 1.0,
            seed: 0,
            model: "cnn".into(),
            capture_layer: None,
            double_backward: true,
            extraction: Extraction::BatchLevel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bad.push("learning_rate must be positive".to_string());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push("weight_decay must be nonnegative".to_string());
        }
        if let Err(e) = regularizers::check_lambda(self.lambda) {
            bad.push(e.to_string());
        }
        match self.method {
            Method::Prior if self.mask_source != MaskSource::ExternalDirectory || self.pseudo_mask_dir.is_none() => {
                bad.push("method `prior` needs mask_source = \"external-directory\" and pseudo_mask_dir".to_string())
            }
            Method::Camal if self.mask_source != MaskSource::GroundTruth => {
                bad.push("method `camal` uses mask_source = \"ground-truth\"".to_string())
            }
            _ => {}
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Regularizer weight actually applied; vanilla ignores `lambda`.
    pub fn effective_lambda(&self) -> f32 {
        match self.method {
            Method::Vanilla => 0.0,
            _ => self.lambda,
        }
    }

    pub fn uses_attention(&self) -> bool {
        self.method != Method::Vanilla
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f32,
    weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f32, weight_decay: f32) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.raw_dim())).collect();
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            ndarray::Zip::from(&mut *p).and(g).and(&mut *m).and(&mut *v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    /// Time spent turning captured features into attention and regularizer values.
    pub extraction_seconds: f64,
    pub steps: usize,
    pub backward_passes: usize,
    /// Mini-batches whose CAMs were all constant, so the regularizer gave no gradient.
    pub constant_cam_batches: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub model: ReferenceModel,
    pub log: Vec<LogRow>,
    pub fold: usize,
    pub config: TrainConfig,
    pub timing: Timing,
}

impl RunArtifacts {
    pub fn weights(&self) -> &ParamStore {
        self.model.params()
    }

    /// Writes `config.snapshot`, `log.csv`, `weights.bin` and `timing.json`
    /// into `dir`, staging them in a sibling directory first.
    pub fn save(&self, dir: &Path, config_snapshot: &str) -> Result<()> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
        let staging = parent.join(format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        fs::write(staging.join("config.snapshot"), config_snapshot)?;
        regularizers::write_log_csv(&self.log, fs::File::create(staging.join("log.csv"))?)?;
        self.weights().write_to(&mut BufWriter::new(fs::File::create(staging.join("weights.bin"))?))?;
        fs::write(staging.join("timing.json"), serde_json::to_string_pretty(&self.timing)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&staging, dir)?;
        Ok(())
    }
}

/// Where per-sample masks come from during training.
pub enum MaskLookup<'a> {
    GroundTruth,
    External(&'a HashMap<String, Array2<f32>>),
}

impl MaskLookup<'_> {
    fn batch(&self, dataset: &Dataset, indices: &[usize], gt: MaskBatch) -> Result<MaskBatch> {
        match self {
            MaskLookup::GroundTruth => Ok(gt),
            MaskLookup::External(map) => {
                let (h, w) = dataset.image_size();
                let mut out = Array3::zeros((indices.len(), h, w));
                for (b, &i) in indices.iter().enumerate() {
                    let id = &dataset.samples[i].sample_id;
                    let m = map.get(id).ok_or_else(|| Error::Pairing(format!("no pseudo-mask for `{id}`")))?;
                    if m.dim() != (h, w) {
                        return Err(Error::Shape(format!("pseudo-mask `{id}` is {:?}, images are {h}x{w}", m.dim())));
                    }
                    out.index_axis_mut(Axis(0), b).assign(m);
                }
                MaskBatch::new(out)
            }
        }
    }
}

/// Attention and regularizer nodes for one mini-batch.
pub struct AttentionTerms<'t> {
    pub maps: Var<'t>,
    pub alpha: Var<'t>,
    pub beta: Var<'t>,
    pub term: Var<'t>,
    pub constant: bool,
}

/// CAM gradients, normalized upsampled attention and the CAMAL term for a
/// forward pass that has already been recorded.
pub fn attention_terms<'t>(
    fwd: &backend::Forward<'t>,
    selector: &ScalarTargetSelector,
    masks: &MaskBatch,
    extraction: Extraction,
    retain_higher_order: bool,
) -> Result<AttentionTerms<'t>> {
    let scalars = target_scalars(fwd, selector)?;
    let grads = match extraction {
        Extraction::BatchLevel => backend::gradients_for_summed_target(&fwd.features, scalars, retain_higher_order)?,
        Extraction::PerSample => backend::gradients_per_sample(&fwd.features, scalars, retain_higher_order)?,
    };
    let cam = gradcam_vars(fwd.features.values(), grads)?;
    let constant = cam.value().axis_iter(Axis(0)).all(|s| {
        let first = s.iter().next().copied().unwrap_or(0.0);
        s.iter().all(|&v| v == first)
    });
    let (_, h, w) = masks.values().dim();
    let maps = upsample_vars(normalize_minmax_vars(cam), h, w)?;
    let (alpha, beta) = alpha_beta_vars(maps, masks)?;
    let term = camal_term_vars(alpha, beta);
    Ok(AttentionTerms { maps, alpha, beta, term, constant })
}

fn scalar(v: &Var<'_>) -> f32 {
    v.value().iter().next().copied().unwrap_or(f32::NAN)
}

fn mean_of(v: &Var<'_>) -> f32 {
    let t = v.value();
    t.iter().sum::<f32>() / t.len() as f32
}

/// Task-specific part of a training step.
enum Task<'a> {
    Classify,
    Regress(&'a [f32]),
}

fn build_model(config: &TrainConfig, dataset: &Dataset, value_head: bool) -> Result<(ReferenceModel, String)> {
    let model = ReferenceModel::build(&config.model, dataset.n_classes, dataset.image_size(), value_head, config.seed)?;
    let layer = config.capture_layer.clone().unwrap_or_else(|| model.default_capture_layer());
    if !model.capture_layers().contains(&layer) {
        return Err(Error::Config(format!("model `{}` has no capture layer `{layer}`", config.model)));
    }
    Ok((model, layer))
}

fn run_loop(
    config: &TrainConfig,
    dataset: &Dataset,
    train_indices: &[usize],
    fold: usize,
    masks: MaskLookup<'_>,
    task: Task<'_>,
) -> Result<RunArtifacts> {
    config.validate()?;
    if train_indices.is_empty() {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let value_head = matches!(task, Task::Regress(_));
    let (mut model, layer) = build_model(config, dataset, value_head)?;
    let mut opt = AdamW::new(model.params(), config.learning_rate, config.weight_decay);
    let lambda = config.effective_lambda();
    let mut order = train_indices.to_vec();
    let mut log = Vec::new();
    let mut timing = Timing::default();
    let started = Instant::now();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (images, labels, gt) = dataset.batch(chunk, SplitRole::Train)?;
            let tape = Tape::new();
            let fwd = backend::forward_with_capture(&model, &tape, &images, &layer)?;
            let (task_loss, selector) = match task {
                Task::Classify => (cross_entropy(fwd.logits, &labels), ScalarTargetSelector::GroundTruthLogit(labels)),
                Task::Regress(targets) => {
                    let t: Vec<f32> = chunk.iter().map(|&i| targets[i]).collect();
                    let v = fwd.value.ok_or_else(|| Error::Config("probe model lacks a value head".into()))?;
                    (mse(v, &t), ScalarTargetSelector::ValueHead)
                }
            };
            let mut row = LogRow {
                step: timing.steps,
                epoch,
                task_loss: scalar(&task_loss),
                camal_term: None,
                alpha_mean: None,
                beta_mean: None,
                total: scalar(&task_loss),
            };
            let total = if config.uses_attention() {
                let mb = masks.batch(dataset, chunk, gt)?;
                let t0 = Instant::now();
                let terms = attention_terms(&fwd, &selector, &mb, config.extraction, config.double_backward)?;
                timing.extraction_seconds += t0.elapsed().as_secs_f64();
                timing.constant_cam_batches += terms.constant as usize;
                let total = task_loss + terms.term.scale(lambda);
                row.camal_term = Some(scalar(&terms.term));
                row.alpha_mean = Some(mean_of(&terms.alpha));
                row.beta_mean = Some(mean_of(&terms.beta));
                row.total = scalar(&total);
                total
            } else {
                task_loss
            };
            if !row.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {}: task_loss={}, camal_term={:?}, batch={:?}",
                    row.step,
                    row.task_loss,
                    row.camal_term,
                    chunk.iter().map(|&i| dataset.samples[i].sample_id.as_str()).collect::<Vec<_>>()
                )));
            }
            let grads: Vec<Option<Tensor>> =
                tape.grad(total, &fwd.params, false).into_iter().map(|g| g.map(|g| (*g.value()).clone())).collect();
            timing.backward_passes += tape.backward_passes();
            opt.step(model.params_mut(), &grads);
            log.push(row);
            timing.steps += 1;
        }
    }
    timing.total_seconds = started.elapsed().as_secs_f64();
    Ok(RunArtifacts { model, log, fold, config: config.clone(), timing })
}

/// Trains one fold of a classifier under `config.method`.
pub fn train_classifier(
    config: &TrainConfig,
    dataset: &Dataset,
    train_indices: &[usize],
    fold: usize,
    pseudo_masks: Option<&HashMap<String, Array2<f32>>>,
) -> Result<RunArtifacts> {
    let lookup = match (config.method, pseudo_masks) {
        (Method::Prior, Some(map)) => MaskLookup::External(map),
        (Method::Prior, None) => return Err(Error::Config("method `prior` needs pseudo-masks".into())),
        _ => MaskLookup::GroundTruth,
    };
    run_loop(config, dataset, train_indices, fold, lookup, Task::Classify)
}

/// Regression target of the value-head probe: ten times the fraction of the
/// image covered by the object.
pub fn probe_targets(dataset: &Dataset) -> Vec<f32> {
    dataset.samples.iter().map(|s| 10.0 * s.mask.mean().unwrap_or(0.0)).collect()
}

/// Trains a value-head model to regress [`probe_targets`], with attention
/// taken from the value output.
pub fn train_scalar_target_probe(config: &TrainConfig, dataset: &Dataset, train_indices: &[usize]) -> Result<RunArtifacts> {
    let targets = probe_targets(dataset);
    run_loop(config, dataset, train_indices, 0, MaskLookup::GroundTruth, Task::Regress(&targets))
}
