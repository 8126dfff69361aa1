//! Wall-clock measurements of attention extraction and training steps.

use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{gradcam_vars, normalize_minmax_vars, upsample_vars};
use crate::autodiff::{Tape, Tensor};
use crate::backend::layers::cross_entropy;
use crate::backend::{self, Model, ReferenceModel, ScalarTargetSelector};
use crate::error::{Error, Result};
use crate::regularizers::MaskBatch;
use crate::training::{attention_terms, Extraction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionTiming {
    pub batch_size: usize,
    pub batch_level_seconds: f64,
    pub per_sample_seconds: f64,
}

impl ExtractionTiming {
    pub fn ratio(&self) -> f64 {
        self.per_sample_seconds / self.batch_level_seconds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub batch_size: usize,
    pub vanilla_seconds: f64,
    pub camal_batch_seconds: f64,
    pub camal_per_sample_seconds: f64,
}

impl StepTiming {
    pub fn batch_overhead(&self) -> f64 {
        self.camal_batch_seconds / self.vanilla_seconds
    }

    pub fn per_sample_overhead(&self) -> f64 {
        self.camal_per_sample_seconds / self.vanilla_seconds
    }
}

/// Least-squares line `y = slope * x + intercept` with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!("line fit needs two or more paired points, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("line fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit { slope, intercept: my - slope * mx, r_squared })
}

/// Random normalized images and blob masks for timing runs.
pub fn synthetic_batch(model: &dyn Model, batch: usize, seed: u64) -> Result<(Tensor, Vec<usize>, MaskBatch)> {
    let (h, w) = model.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = ArrayD::from_shape_simple_fn(IxDyn(&[batch, 3, h, w]), || rng.random_range(-1.0f32..1.0));
    let labels = (0..batch).map(|i| i % model.n_classes()).collect();
    let masks =
        Array3::from_shape_fn((batch, h, w), |(_, y, x)| ((y >= h / 4 && y < 3 * h / 4) && (x >= w / 4 && x < 3 * w / 4)) as u8 as f32);
    Ok((images, labels, MaskBatch::new(masks)?))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_extraction_once(model: &ReferenceModel, layer: &str, images: &Tensor, labels: &[usize], extraction: Extraction) -> Result<f64> {
    let tape = Tape::new();
    let fwd = backend::forward_with_capture(model, &tape, images, layer)?;
    let (_, _, h, w) = {
        let s = images.shape();
        (s[0], s[1], s[2], s[3])
    };
    let start = Instant::now();
    let scalars = crate::attention::target_scalars(&fwd, &ScalarTargetSelector::GroundTruthLogit(labels.to_vec()))?;
    let grads = match extraction {
        Extraction::BatchLevel => backend::gradients_for_summed_target(&fwd.features, scalars, false)?,
        Extraction::PerSample => backend::gradients_per_sample(&fwd.features, scalars, false)?,
    };
    let maps = upsample_vars(normalize_minmax_vars(gradcam_vars(fwd.features.values(), grads)?), h, w)?;
    std::hint::black_box(maps.value());
    Ok(start.elapsed().as_secs_f64())
}

/// Median attention-extraction time (forward pass excluded) per batch size.
pub fn time_extraction(model: &ReferenceModel, batch_sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<ExtractionTiming>> {
    let layer = model.default_capture_layer();
    let repeats = repeats.max(1);
    batch_sizes
        .iter()
        .map(|&b| {
            let (images, labels, _) = synthetic_batch(model, b, seed)?;
            time_extraction_once(model, &layer, &images, &labels, Extraction::BatchLevel)?;
            let mut batch = Vec::with_capacity(repeats);
            let mut per = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                batch.push(time_extraction_once(model, &layer, &images, &labels, Extraction::BatchLevel)?);
                per.push(time_extraction_once(model, &layer, &images, &labels, Extraction::PerSample)?);
            }
            Ok(ExtractionTiming { batch_size: b, batch_level_seconds: median(batch), per_sample_seconds: median(per) })
        })
        .collect()
}

fn time_step_once(
    model: &ReferenceModel,
    layer: &str,
    images: &Tensor,
    labels: &[usize],
    masks: &MaskBatch,
    extraction: Option<Extraction>,
) -> Result<f64> {
    let start = Instant::now();
    let tape = Tape::new();
    let fwd = backend::forward_with_capture(model, &tape, images, layer)?;
    let mut total = cross_entropy(fwd.logits, labels);
    if let Some(ex) = extraction {
        let terms = attention_terms(&fwd, &ScalarTargetSelector::GroundTruthLogit(labels.to_vec()), masks, ex, true)?;
        total = total + terms.term;
    }
    let grads = tape.grad(total, &fwd.params, false);
    std::hint::black_box(grads);
    Ok(start.elapsed().as_secs_f64())
}

/// Median time of one forward+backward training step (optimizer excluded)
/// for Vanilla, CAMAL with batch-level extraction and CAMAL with the
/// per-sample oracle.
pub fn time_steps(model: &ReferenceModel, batch_sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<StepTiming>> {
    let layer = model.default_capture_layer();
    let repeats = repeats.max(1);
    batch_sizes
        .iter()
        .map(|&b| {
            let (images, labels, masks) = synthetic_batch(model, b, seed)?;
            time_step_once(model, &layer, &images, &labels, &masks, None)?;
            let (mut v, mut cb, mut cp) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..repeats {
                v.push(time_step_once(model, &layer, &images, &labels, &masks, None)?);
                cb.push(time_step_once(model, &layer, &images, &labels, &masks, Some(Extraction::BatchLevel))?);
                cp.push(time_step_once(model, &layer, &images, &labels, &masks, Some(Extraction::PerSample))?);
            }
            Ok(StepTiming {
                batch_size: b,
                vanilla_seconds: median(v),
                camal_batch_seconds: median(cb),
                camal_per_sample_seconds: median(cp),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_lines() {
        let f = fit_line(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(fit_line(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn timings_are_positive() {
        let model = ReferenceModel::build("cnn", 3, (16, 16), false, 0).unwrap();
        let t = time_extraction(&model, &[1, 2], 1, 0).unwrap();
        assert!(t.iter().all(|t| t.batch_level_seconds > 0.0 && t.per_sample_seconds > 0.0));
        let s = time_steps(&model, &[2], 1, 0).unwrap();
        assert!(s[0].vanilla_seconds > 0.0 && s[0].camal_batch_seconds > 0.0);
    }
}
