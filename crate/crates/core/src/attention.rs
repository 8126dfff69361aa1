//! Grad-CAM for a whole mini-batch, min-max normalization, bilinear
//! upsampling, and export of attention maps.
//!
//! Every operation exists in two forms: a graph form on [`Var`] used inside
//! training (so the regularizer can be differentiated through it) and an
//! array form for evaluation.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};

use crate::autodiff::{Tape, Tensor, Var};
use crate::backend::{self, Model, ScalarTargetSelector};
use crate::error::{Error, Result};

/// Per-sample heatmaps with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapBatch {
    pub values: Array3<f32>,
    /// Grid the CAMs were computed on, before any upsampling.
    pub source_resolution: (usize, usize),
}

impl AttentionMapBatch {
    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    pub fn sample(&self, b: usize) -> ndarray::ArrayView2<'_, f32> {
        self.values.index_axis(Axis(0), b)
    }
}

/// `ReLU((1/K) sum_k w_k A^k)` with `w_k` the spatial mean of the gradients.
pub fn gradcam_vars<'t>(features: Var<'t>, grads: Var<'t>) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 4 || grads.shape() != s {
        return Err(Error::Shape(format!("features {:?} and gradients {:?} must be matching B x K x h x w", s, grads.shape())));
    }
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    let weights = grads.mean_axes(&[2, 3]).broadcast_to(&s);
    let cam = (features * weights).sum_axes(&[1]).scale(1.0 / k as f32).relu();
    Ok(cam.reshape(&[b, h, w]))
}

/// Array form of [`gradcam_vars`]; returns the raw (unnormalized) CAMs.
pub fn gradcam_batch(features: &Tensor, grads: &Tensor) -> Result<Array3<f32>> {
    let tape = Tape::new();
    let cam = gradcam_vars(tape.leaf(features.clone()), tape.leaf(grads.clone()))?;
    Ok(to_array3(&cam.value()))
}

/// Reference path: one isolated reverse traversal per sample.
///
/// Runs the forward pass once, then for every sample differentiates that
/// sample's scalar alone. Exists to check batch-level extraction and as the
/// baseline in overhead measurements.
pub fn gradcam_per_sample_oracle(
    model: &dyn Model,
    images: &Tensor,
    selector: &ScalarTargetSelector,
    layer_id: &str,
) -> Result<Array3<f32>> {
    let tape = Tape::new();
    let fwd = backend::forward_with_capture(model, &tape, images, layer_id)?;
    let scalars = target_scalars(&fwd, selector)?;
    let grads = backend::gradients_per_sample(&fwd.features, scalars, false)?;
    let cam = gradcam_vars(fwd.features.values(), grads)?;
    Ok(to_array3(&cam.value()))
}

/// Batch-level raw CAMs: one reverse traversal on the summed scalar.
pub fn gradcam_for_model(model: &dyn Model, images: &Tensor, selector: &ScalarTargetSelector, layer_id: &str) -> Result<Array3<f32>> {
    let tape = Tape::new();
    let fwd = backend::forward_with_capture(model, &tape, images, layer_id)?;
    let scalars = target_scalars(&fwd, selector)?;
    let grads = backend::gradients_for_summed_target(&fwd.features, scalars, false)?;
    let cam = gradcam_vars(fwd.features.values(), grads)?;
    Ok(to_array3(&cam.value()))
}

pub(crate) fn target_scalars<'t>(fwd: &backend::Forward<'t>, selector: &ScalarTargetSelector) -> Result<Var<'t>> {
    match selector {
        ScalarTargetSelector::ValueHead => {
            let v = fwd.value.ok_or_else(|| Error::Config("model has no value head".into()))?;
            backend::select_scalar(v, selector)
        }
        _ => backend::select_scalar(fwd.logits, selector),
    }
}

/// Per-sample `(x - min) / (max - min)`; constant samples map to all zeros.
pub fn normalize_minmax_vars(cam: Var<'_>) -> Var<'_> {
    let s = cam.shape();
    let tape = cam.tape();
    let mx = cam.max_trailing(1);
    let mn = cam.min_trailing(1);
    let range = mx - mn;
    let degenerate = range.value().mapv(|r| if r > 0.0 { 0.0 } else { 1.0 });
    let keep = tape.leaf(degenerate.mapv(|d| 1.0 - d)).broadcast_to(&s);
    let denom = (range + tape.leaf(degenerate)).recip().broadcast_to(&s);
    (cam - mn.broadcast_to(&s)) * denom * keep
}

pub fn normalize_minmax(cam: &Array3<f32>) -> AttentionMapBatch {
    let mut values = cam.clone();
    for mut sample in values.axis_iter_mut(Axis(0)) {
        let mx = sample.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mn = sample.iter().copied().fold(f32::INFINITY, f32::min);
        let range = mx - mn;
        if range > 0.0 {
            let inv = 1.0 / range;
            sample.mapv_inplace(|v| (v - mn) * inv);
        } else {
            sample.fill(0.0);
        }
    }
    let (_, h, w) = cam.dim();
    AttentionMapBatch { values, source_resolution: (h, w) }
}

/// `(out, in)` interpolation weights for half-pixel-centred bilinear resampling.
pub fn bilinear_weights(input: usize, output: usize) -> Array2<f32> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

/// Bilinear upsampling of `(B, h, w)` maps to `(B, H, W)`, clamped to `[0, 1]`.
pub fn upsample_vars(maps: Var<'_>, height: usize, width: usize) -> Result<Var<'_>> {
    let s = maps.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    if height < h || width < w {
        return Err(Error::Unsupported(format!("downscaling {h}x{w} to {height}x{width}")));
    }
    if (h, w) == (height, width) {
        return Ok(maps);
    }
    let tape = maps.tape();
    let cols = tape.leaf(bilinear_weights(w, width).reversed_axes().into_dyn()); // (w, W)
    let rows = tape.leaf(bilinear_weights(h, height).reversed_axes().into_dyn()); // (h, H)
    let x = maps.reshape(&[b * h, w]).matmul(cols); // (B*h, W)
    let x = x.reshape(&[b, h, width]).permute(&[0, 2, 1]).reshape(&[b * width, h]).matmul(rows); // (B*W, H)
    Ok(x.reshape(&[b, width, height]).permute(&[0, 2, 1]).clamp(0.0, 1.0))
}

pub fn upsample_to(maps: &AttentionMapBatch, height: usize, width: usize) -> Result<AttentionMapBatch> {
    let tape = Tape::new();
    let up = upsample_vars(tape.leaf(maps.values.clone().into_dyn()), height, width)?;
    Ok(AttentionMapBatch { values: to_array3(&up.value()), source_resolution: maps.source_resolution })
}

/// Full evaluation-time pipeline: batch-level CAM, normalized and upsampled to image size.
pub fn extract_attention(model: &dyn Model, images: &Tensor, selector: &ScalarTargetSelector, layer_id: &str) -> Result<AttentionMapBatch> {
    let raw = gradcam_for_model(model, images, selector, layer_id)?;
    let norm = normalize_minmax(&raw);
    let (h, w) = model.image_size();
    upsample_to(&norm, h, w)
}

pub(crate) fn to_array3(t: &Tensor) -> Array3<f32> {
    t.clone().into_dimensionality().expect("rank-3 tensor")
}

/// Writes one heatmap as an 8-bit grayscale PNG with value `round(255 * H)`.
pub fn write_png(map: ndarray::ArrayView2<'_, f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(255.0 * map[[y as usize, x as usize]].clamp(0.0, 1.0)).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

const MAP_MAGIC: &[u8; 4] = b"CAMA";

/// Raw f32 container: `b"CAMA"`, u32 version 1, u32 ndim, u64 dims, f32 data (all little-endian, row-major).
pub fn write_raw(values: &ArrayD<f32>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAP_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(values.ndim() as u32).to_le_bytes())?;
    for &d in values.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let bad = || Error::Format("truncated or malformed attention container".into());
    if bytes.len() < 12 || &bytes[..4] != MAP_MAGIC {
        return Err(Error::Format("not an attention container (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != 1 {
        return Err(Error::Format(format!("unsupported container version {}", u32_at(4))));
    }
    let ndim = u32_at(8) as usize;
    let mut off = 12;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(off..off + 8).ok_or_else(bad)?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = shape.iter().product();
    let body = bytes.get(off..off + 4 * n).ok_or_else(bad)?;
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(e.to_string()))
}
