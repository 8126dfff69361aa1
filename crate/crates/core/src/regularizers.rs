//! Mask-guided attention regularizers.
//!
//! `alpha` is the mean attention inside the ground-truth mask, `beta` the mean
//! attention outside it. The CAMAL term is the batch mean of `beta - alpha`;
//! the suppress-only baseline is the batch mean of `beta`.

use std::io::Write;

use ndarray::{Array1, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMapBatch;
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Binary masks `(B, H, W)` with entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    values: Array3<f32>,
}

impl MaskBatch {
    /// Validates binariness and non-degeneracy of every sample.
    pub fn new(values: Array3<f32>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        for (b, m) in values.axis_iter(Axis(0)).enumerate() {
            let ones = m.iter().filter(|&&v| v == 1.0).count();
            if ones == 0 || ones == m.len() {
                return Err(Error::DegenerateMask(format!("batch index {b}")));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    /// `1 - M`.
    pub fn complement(&self) -> Self {
        Self { values: self.values.mapv(|v| 1.0 - v) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBetaBatch {
    pub alpha: Array1<f32>,
    pub beta: Array1<f32>,
}

impl AlphaBetaBatch {
    pub fn alpha_mean(&self) -> f32 {
        self.alpha.mean().unwrap_or(0.0)
    }

    pub fn beta_mean(&self) -> f32 {
        self.beta.mean().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f32,
    pub camal_term: f32,
    pub lambda: f32,
    pub total: f32,
}

fn check_shapes(h: &Array3<f32>, m: &MaskBatch) -> Result<()> {
    if h.dim() != m.values.dim() {
        return Err(Error::Shape(format!("attention {:?} and masks {:?} differ", h.dim(), m.values.dim())));
    }
    if h.dim().0 == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    Ok(())
}

pub fn alpha_beta(h: &AttentionMapBatch, m: &MaskBatch) -> Result<AlphaBetaBatch> {
    alpha_beta_arrays(&h.values, m)
}

pub fn alpha_beta_arrays(h: &Array3<f32>, m: &MaskBatch) -> Result<AlphaBetaBatch> {
    check_shapes(h, m)?;
    let b = h.dim().0;
    let mut alpha = Array1::zeros(b);
    let mut beta = Array1::zeros(b);
    for (i, (hs, ms)) in h.axis_iter(Axis(0)).zip(m.values.axis_iter(Axis(0))).enumerate() {
        let (mut hin, mut nin, mut hout, mut nout) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (&hv, &mv) in hs.iter().zip(ms.iter()) {
            hin += (hv * mv) as f64;
            nin += mv as f64;
            hout += (hv * (1.0 - mv)) as f64;
            nout += (1.0 - mv) as f64;
        }
        if nin == 0.0 || nout == 0.0 {
            return Err(Error::Domain(format!("degenerate mask at batch index {i}")));
        }
        alpha[i] = (hin / nin) as f32;
        beta[i] = (hout / nout) as f32;
    }
    Ok(AlphaBetaBatch { alpha, beta })
}

/// Graph form: per-sample `(alpha, beta)` as two `(B,)` nodes.
pub fn alpha_beta_vars<'t>(h: Var<'t>, m: &MaskBatch) -> Result<(Var<'t>, Var<'t>)> {
    let s = h.shape();
    let (b, mh, mw) = m.values.dim();
    if s != [b, mh, mw] {
        return Err(Error::Shape(format!("attention {s:?} and masks {:?} differ", m.values.dim())));
    }
    if b == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let tape = h.tape();
    let inside = m.values.sum_axis(Axis(2)).sum_axis(Axis(1));
    let outside = inside.mapv(|v| (mh * mw) as f32 - v);
    if inside.iter().chain(outside.iter()).any(|&n| n == 0.0) {
        return Err(Error::Domain("degenerate mask in batch".into()));
    }
    let mv = tape.leaf(m.values.clone().into_dyn());
    let inv = tape.leaf(m.values.mapv(|v| 1.0 - v).into_dyn());
    let alpha = (h * mv).sum_axes(&[1, 2]).reshape(&[b]) * tape.leaf(inside.mapv(|n| 1.0 / n).into_dyn());
    let beta = (h * inv).sum_axes(&[1, 2]).reshape(&[b]) * tape.leaf(outside.mapv(|n| 1.0 / n).into_dyn());
    Ok((alpha, beta))
}

pub fn camal_term(ab: &AlphaBetaBatch) -> Result<f32> {
    if ab.alpha.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    Ok((&ab.beta - &ab.alpha).mean().expect("nonempty"))
}

/// Graph form of [`camal_term`]; returns a `[1]`-shaped node.
pub fn camal_term_vars<'t>(alpha: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let b = alpha.shape()[0];
    (beta - alpha).sum_all().scale(1.0 / b as f32)
}

pub fn suppress_only_term(h: &AttentionMapBatch, m: &MaskBatch) -> Result<f32> {
    Ok(alpha_beta(h, m)?.beta_mean())
}

pub fn suppress_only_term_vars<'t>(beta: Var<'t>) -> Var<'t> {
    let b = beta.shape()[0];
    beta.sum_all().scale(1.0 / b as f32)
}

pub fn total_loss(task_loss: f32, camal_term: f32, lambda: f32) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    Ok(LossBreakdown { task_loss, camal_term, lambda, total: task_loss + lambda * camal_term })
}

pub(crate) fn check_lambda(lambda: f32) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be a finite nonnegative number, got {lambda}")));
    }
    Ok(())
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: f32,
    /// Empty for objectives that skip attention.
    pub camal_term: Option<f32>,
    pub alpha_mean: Option<f32>,
    pub beta_mean: Option<f32>,
    pub total: f32,
}

pub fn write_log_csv(rows: &[LogRow], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_log_csv(r: impl std::io::Read) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}
