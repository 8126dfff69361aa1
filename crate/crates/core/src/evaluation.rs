//! Attention alignment (IoU), faithfulness curves, the mask perturbation
//! study for regularizers, and classification accuracy.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::extract_attention;
use crate::autodiff::{Tape, Tensor};
use crate::backend::{self, Model, ScalarTargetSelector};
use crate::datasets::{Dataset, SplitRole};
use crate::error::{Error, Result};
use crate::regularizers::{alpha_beta_arrays, MaskBatch};
use crate::stats::{self, Correlation, TrialMatrix};

pub const DEFAULT_TAU: f32 = 0.7;

/// `1` where `h > tau`, else `0`.
pub fn binarize_attention(h: ArrayView2<'_, f32>, tau: f32) -> Array2<f32> {
    h.mapv(|v| if v > tau { 1.0 } else { 0.0 })
}

/// `|a ∩ b| / |a ∪ b|` of binary masks; two empty masks score 0.
pub fn iou(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub sample_id: String,
    pub iou: f64,
    pub tau: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = stats::mean_std(xs);
        Self { mean, std, n: xs.len() }
    }
}

/// Normalized, image-resolution attention for `indices`, taken from the
/// ground-truth logit, in chunks of `batch_size`.
pub fn attention_for(
    model: &dyn Model,
    dataset: &Dataset,
    indices: &[usize],
    layer: &str,
    role: SplitRole,
    batch_size: usize,
) -> Result<Array3<f32>> {
    let (h, w) = dataset.image_size();
    let mut out = Array3::zeros((indices.len(), h, w));
    for (c, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let (images, labels, _) = dataset.batch(chunk, role)?;
        let maps = extract_attention(model, &images, &ScalarTargetSelector::GroundTruthLogit(labels), layer)?;
        let start = c * batch_size.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), .., ..]).assign(&maps.values);
    }
    Ok(out)
}

/// Per-sample IoU between binarized attention and the ground-truth mask.
pub fn alignment_from_maps(maps: &Array3<f32>, dataset: &Dataset, indices: &[usize], tau: f32) -> Result<(Vec<AlignmentRecord>, Summary)> {
    let mut records = Vec::with_capacity(indices.len());
    for (h, &i) in maps.axis_iter(Axis(0)).zip(indices) {
        let s = &dataset.samples[i];
        records.push(AlignmentRecord { sample_id: s.sample_id.clone(), iou: iou(binarize_attention(h, tau).view(), s.mask.view())?, tau });
    }
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    Ok((records, Summary::of(&ious)))
}

pub fn alignment_eval(
    model: &dyn Model,
    dataset: &Dataset,
    indices: &[usize],
    layer: &str,
    tau: f32,
) -> Result<(Vec<AlignmentRecord>, Summary)> {
    let maps = attention_for(model, dataset, indices, layer, SplitRole::Test, 32)?;
    alignment_from_maps(&maps, dataset, indices, tau)
}

/// `(B, C)` softmax probabilities for a normalized image batch.
pub fn predict_proba(model: &dyn Model, images: &Tensor) -> Result<Array2<f32>> {
    let tape = Tape::new();
    let layer = model.default_capture_layer();
    let fwd = backend::forward_with_capture(model, &tape, images, &layer)?;
    let p = fwd.logits.softmax().value();
    Ok((*p).clone().into_dimensionality().expect("rank-2 logits"))
}

/// Fraction of correct argmax predictions on the test-role rendering of `indices`.
pub fn accuracy_eval(model: &dyn Model, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InsufficientData("empty evaluation split".into()));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(64) {
        let (images, labels, _) = dataset.batch(chunk, SplitRole::Test)?;
        let p = predict_proba(model, &images)?;
        correct += p.axis_iter(Axis(0)).zip(&labels).filter(|(row, &l)| argmax(row.iter().copied()) == l).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

fn argmax(it: impl Iterator<Item = f32>) -> usize {
    it.enumerate().fold((0, f32::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best }).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaithMode {
    Removal,
    Insertion,
}

impl FaithMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaithMode::Removal => "removal",
            FaithMode::Insertion => "insertion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub mode: FaithMode,
    pub k_grid: Vec<f64>,
    pub confidence: Vec<f64>,
    pub auc: f64,
}

/// `0, 5, .., 100`.
pub fn default_k_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 5.0).collect()
}

pub fn validate_k_grid(k: &[f64]) -> Result<()> {
    let ok = k.len() >= 2 && k[0] == 0.0 && *k.last().unwrap() == 100.0 && k.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config("k_grid must increase strictly from 0 to 100".into()))
    }
}

/// Pixel indices (row-major) sorted by attention, highest first; ties keep row-major order.
pub fn rank_pixels(h: ArrayView2<'_, f32>) -> Vec<usize> {
    let flat: Vec<f32> = h.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]));
    order
}

fn pixel_count(k: f64, total: usize) -> usize {
    ((k / 100.0) * total as f64).round() as usize
}

/// Normalized image `(3, H, W)` with the top-`k`% ranked pixels zeroed (removal)
/// or with only those pixels kept (insertion).
pub fn perturbed_image(image: &Array3<f32>, ranking: &[usize], k: f64, mode: FaithMode) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let n = pixel_count(k, h * w);
    let mut selected = vec![false; h * w];
    for &p in &ranking[..n] {
        selected[p] = true;
    }
    let mut out = image.clone();
    for ch in 0..c {
        for (p, &sel) in selected.iter().enumerate() {
            let zero = match mode {
                FaithMode::Removal => sel,
                FaithMode::Insertion => !sel,
            };
            if zero {
                out[[ch, p / w, p % w]] = 0.0;
            }
        }
    }
    out
}

/// Trapezoidal area under `confidence` against `k / 100`.
pub fn trapezoid_auc(k_grid: &[f64], confidence: &[f64]) -> f64 {
    k_grid.windows(2).zip(confidence.windows(2)).map(|(k, c)| (k[1] - k[0]) / 100.0 * (c[0] + c[1]) / 2.0).sum()
}

/// Removal or insertion curve for one normalized image `(3, H, W)`.
pub fn faithfulness_eval(
    model: &dyn Model,
    image: &Array3<f32>,
    label: usize,
    attention: ArrayView2<'_, f32>,
    mode: FaithMode,
    k_grid: &[f64],
) -> Result<FaithfulnessCurve> {
    validate_k_grid(k_grid)?;
    let ranking = rank_pixels(attention);
    let (c, h, w) = image.dim();
    let mut flat = Vec::with_capacity(k_grid.len() * c * h * w);
    for &k in k_grid {
        flat.extend(perturbed_image(image, &ranking, k, mode).iter().copied());
    }
    let batch = Tensor::from_shape_vec(ndarray::IxDyn(&[k_grid.len(), c, h, w]), flat).expect("batch shape");
    let mut confidence = Vec::with_capacity(k_grid.len());
    for chunk in 0..k_grid.len().div_ceil(32) {
        let lo = chunk * 32;
        let len = (k_grid.len() - lo).min(32);
        let p = predict_proba(model, &backend::batch_slice(&batch, lo, len))?;
        confidence.extend(p.column(label).iter().map(|&v| v as f64));
    }
    let auc = trapezoid_auc(k_grid, &confidence);
    Ok(FaithfulnessCurve { mode, k_grid: k_grid.to_vec(), confidence, auc })
}

/// Mean curve with a pointwise percentile band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub mode: FaithMode,
    pub k_grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub auc: stats::BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCurve {
    pub sample_id: String,
    pub label: usize,
    pub curve: FaithfulnessCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessSuite {
    pub curves: Vec<SuiteCurve>,
    pub bands: Vec<CurveBand>,
}

impl FaithfulnessSuite {
    pub fn mean_auc(&self, mode: FaithMode) -> f64 {
        let aucs: Vec<f64> = self.curves.iter().filter(|c| c.curve.mode == mode).map(|c| c.curve.auc).collect();
        aucs.iter().sum::<f64>() / aucs.len().max(1) as f64
    }
}

/// Seeded choice of `per_class` test samples from every class.
pub fn representative_samples(dataset: &Dataset, indices: &[usize], per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..dataset.n_classes).map(|c| (c, Vec::new())).collect();
    for &i in indices {
        by_class.entry(dataset.samples[i].label).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (class, mut members) in by_class {
        if members.len() < per_class.max(1) {
            return Err(Error::Sampling(format!("class {class} has {} test samples, need {per_class}", members.len())));
        }
        members.sort_by(|&a, &b| dataset.samples[a].sample_id.cmp(&dataset.samples[b].sample_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        chosen.extend(members.into_iter().take(per_class));
    }
    Ok(chosen)
}

/// Pointwise bootstrap band for a set of curves sharing a k grid, resampling
/// curves within each stratum.
pub fn band_for(curves: &[(String, &FaithfulnessCurve)], n_resamples: usize, level: f64, seed: u64) -> Result<CurveBand> {
    let first = curves.first().ok_or_else(|| Error::InsufficientData("no curves to aggregate".into()))?.1;
    let mut strata: BTreeMap<&str, Vec<&FaithfulnessCurve>> = BTreeMap::new();
    for (s, c) in curves {
        strata.entry(s.as_str()).or_default().push(c);
    }
    let k = strata.values().map(Vec::len).min().unwrap_or(0);
    let stratum_names: Vec<String> = strata.keys().map(|s| s.to_string()).collect();
    let matrix_at = |f: &dyn Fn(&FaithfulnessCurve) -> f64| -> Result<TrialMatrix> {
        let rows: Vec<f64> = strata.values().flat_map(|cs| cs.iter().take(k).map(|c| f(c)).collect::<Vec<_>>()).collect();
        TrialMatrix::new(Array2::from_shape_vec((strata.len(), k), rows).expect("rectangular"), stratum_names.clone())
    };
    let mean_of = |m: &TrialMatrix| Ok(m.mean());
    let mut mean = Vec::new();
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for j in 0..first.k_grid.len() {
        let m = matrix_at(&|c: &FaithfulnessCurve| c.confidence[j])?;
        let ci = stats::stratified_bootstrap(&m, mean_of, n_resamples, level, seed)?;
        mean.push(ci.point);
        low.push(ci.low);
        high.push(ci.high);
    }
    let auc = stats::stratified_bootstrap(&matrix_at(&|c: &FaithfulnessCurve| c.auc)?, mean_of, n_resamples, level, seed)?;
    Ok(CurveBand { mode: first.mode, k_grid: first.k_grid.clone(), mean, low, high, auc })
}

/// One removal and one insertion curve for each representative sample, plus
/// mean curves with 95% bands from a bootstrap over the samples.
pub fn representative_faithfulness_suite(
    model: &dyn Model,
    dataset: &Dataset,
    indices: &[usize],
    layer: &str,
    per_class: usize,
    k_grid: &[f64],
    seed: u64,
) -> Result<FaithfulnessSuite> {
    validate_k_grid(k_grid)?;
    let chosen = representative_samples(dataset, indices, per_class, seed)?;
    let maps = attention_for(model, dataset, &chosen, layer, SplitRole::Test, 32)?;
    let (images, labels, _) = dataset.batch(&chosen, SplitRole::Test)?;
    let mut curves = Vec::new();
    for (b, &i) in chosen.iter().enumerate() {
        let image: Array3<f32> = images.index_axis(Axis(0), b).to_owned().into_dimensionality().expect("rank-3 image");
        for mode in [FaithMode::Removal, FaithMode::Insertion] {
            let curve = faithfulness_eval(model, &image, labels[b], maps.index_axis(Axis(0), b), mode, k_grid)?;
            curves.push(SuiteCurve { sample_id: dataset.samples[i].sample_id.clone(), label: labels[b], curve });
        }
    }
    let mut bands = Vec::new();
    if curves.len() >= 4 {
        for mode in [FaithMode::Removal, FaithMode::Insertion] {
            let group: Vec<(String, &FaithfulnessCurve)> =
                curves.iter().filter(|c| c.curve.mode == mode).map(|c| ("all".to_string(), &c.curve)).collect();
            bands.push(band_for(&group, stats::DEFAULT_RESAMPLES, 0.95, seed)?);
        }
    }
    Ok(FaithfulnessSuite { curves, bands })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    Shift,
    Erode,
    Dilate,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [PerturbKind::Shift, PerturbKind::Erode, PerturbKind::Dilate];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbKind::Shift => "shift",
            PerturbKind::Erode => "erode",
            PerturbKind::Dilate => "dilate",
        }
    }

    pub fn default_severities(&self) -> Vec<usize> {
        match self {
            PerturbKind::Shift => vec![1, 2, 4, 8, 16],
            _ => vec![1, 2, 3, 4],
        }
    }
}

/// Binary erosion (`min`) or dilation (`max`) with a `(2r+1)^2` square;
/// pixels outside the image count as background.
pub fn morphology(m: ArrayView2<'_, f32>, radius: usize, dilate: bool) -> Array2<f32> {
    let (h, w) = m.dim();
    let pass = |src: &Array2<f32>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (pos, len) = if horizontal { (x, w) } else { (y, h) };
            let mut acc = if dilate { 0.0f32 } else { 1.0f32 };
            for d in -(radius as isize)..=radius as isize {
                let p = pos as isize + d;
                let v = if p < 0 || p >= len as isize {
                    0.0
                } else if horizontal {
                    src[[y, p as usize]]
                } else {
                    src[[p as usize, x]]
                };
                acc = if dilate { acc.max(v) } else { acc.min(v) };
            }
            acc
        })
    };
    pass(&pass(&m.to_owned(), true), false)
}

/// Translation by `s` pixels along both axes toward the image centre, zero-filled.
pub fn shift_toward_center(m: ArrayView2<'_, f32>, s: usize) -> Array2<f32> {
    let (h, w) = m.dim();
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for ((y, x), &v) in m.indexed_iter() {
        if v > 0.5 {
            sy += y as f64;
            sx += x as f64;
            n += 1.0;
        }
    }
    let dir = |c: f64, len: usize| {
        if n > 0.0 && c / n > (len as f64 - 1.0) / 2.0 {
            -1isize
        } else {
            1
        }
    };
    let (dy, dx) = (dir(sy, h) * s as isize, dir(sx, w) * s as isize);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (yy, xx) = (y as isize - dy, x as isize - dx);
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            m[[yy as usize, xx as usize]]
        } else {
            0.0
        }
    })
}

/// Simulated attention maps for increasing severities, with severity 0 (the
/// mask itself) prepended.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedMasks {
    pub kind: PerturbKind,
    pub severities: Vec<usize>,
    pub maps: Vec<Array2<f32>>,
    /// First requested severity that emptied or filled the map, if any.
    pub truncated_at: Option<usize>,
}

pub fn perturb_masks(m: ArrayView2<'_, f32>, kind: PerturbKind, severities: &[usize]) -> Result<PerturbedMasks> {
    if severities.is_empty() || severities[0] == 0 || severities.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("severities must be strictly increasing positive integers".into()));
    }
    let total = m.len();
    let ones = |a: &Array2<f32>| a.iter().filter(|&&v| v > 0.5).count();
    if !(1..total).contains(&ones(&m.to_owned())) {
        return Err(Error::DegenerateMask("perturbation source".into()));
    }
    let mut out = PerturbedMasks { kind, severities: vec![0], maps: vec![m.to_owned()], truncated_at: None };
    for &s in severities {
        let h = match kind {
            PerturbKind::Shift => shift_toward_center(m, s),
            PerturbKind::Erode => morphology(m, s, false),
            PerturbKind::Dilate => morphology(m, s, true),
        };
        let n = ones(&h);
        if n == 0 || n == total {
            out.truncated_at = Some(s);
            break;
        }
        out.severities.push(s);
        out.maps.push(h);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    Camal,
    SuppressOnly,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 2] = [RegularizerKind::Camal, RegularizerKind::SuppressOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegularizerKind::Camal => "camal",
            RegularizerKind::SuppressOnly => "suppress-only",
        }
    }

    /// `R(M, H)` for a single mask and attention map.
    pub fn response(&self, mask: &Array2<f32>, h: &Array2<f32>) -> Result<f64> {
        let masks = MaskBatch::new(mask.clone().insert_axis(Axis(0)))?;
        let ab = alpha_beta_arrays(&h.clone().insert_axis(Axis(0)), &masks)?;
        Ok(match self {
            RegularizerKind::Camal => (ab.beta[0] - ab.alpha[0]) as f64,
            RegularizerKind::SuppressOnly => ab.beta[0] as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSeries {
    pub mask_id: String,
    pub kind: PerturbKind,
    pub regularizer: RegularizerKind,
    pub severities: Vec<usize>,
    pub responses: Vec<f64>,
    pub correlation: Correlation,
    pub truncated_at: Option<usize>,
}

/// Mean and standard deviation of the defined correlations of one (kind, regularizer) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub kind: PerturbKind,
    pub regularizer: RegularizerKind,
    pub spearman: Option<Summary>,
    pub pearson: Option<Summary>,
    pub n_series: usize,
    pub n_undefined: usize,
}

pub fn regularizer_response_study(
    masks: &[(String, Array2<f32>)],
    regularizers: &[RegularizerKind],
    kinds: &[(PerturbKind, Vec<usize>)],
) -> Result<(Vec<PerturbationSeries>, Vec<StudyCell>)> {
    let mut series = Vec::new();
    for (id, m) in masks {
        for (kind, severities) in kinds {
            let p = perturb_masks(m.view(), *kind, severities)?;
            for &reg in regularizers {
                let responses = p.maps.iter().map(|h| reg.response(m, h)).collect::<Result<Vec<_>>>()?;
                let correlation = if responses.len() >= 2 {
                    let xs: Vec<f64> = p.severities.iter().map(|&s| s as f64).collect();
                    stats::correlations(&xs, &responses)?
                } else {
                    Correlation { spearman: None, pearson: None }
                };
                series.push(PerturbationSeries {
                    mask_id: id.clone(),
                    kind: *kind,
                    regularizer: reg,
                    severities: p.severities.clone(),
                    responses,
                    correlation,
                    truncated_at: p.truncated_at,
                });
            }
        }
    }
    let mut cells = Vec::new();
    for (kind, _) in kinds {
        for &reg in regularizers {
            let group: Vec<&PerturbationSeries> = series.iter().filter(|s| s.kind == *kind && s.regularizer == reg).collect();
            let sp: Vec<f64> = group.iter().filter_map(|s| s.correlation.spearman).collect();
            let pe: Vec<f64> = group.iter().filter_map(|s| s.correlation.pearson).collect();
            cells.push(StudyCell {
                kind: *kind,
                regularizer: reg,
                spearman: (!sp.is_empty()).then(|| Summary::of(&sp)),
                pearson: (!pe.is_empty()).then(|| Summary::of(&pe)),
                n_series: group.len(),
                n_undefined: group.len() - sp.len(),
            });
        }
    }
    Ok((series, cells))
}
