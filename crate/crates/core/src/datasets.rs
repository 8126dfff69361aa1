//! Image + mask datasets: a seeded synthetic shape benchmark with an optional
//! spurious corner tag, an on-disk loader, and stratified k-fold splits.
//!
//! On-disk layout:
//!
//! ```text
//! root/images/<stem>.png   RGB image
//! root/masks/<stem>.png    single-channel mask, values 0 or 255
//! root/labels.csv          stem,label
//! root/spurious.csv        stem,train_class,test_class   (optional)
//! ```
//!
//! Images on disk are always tag-free; the corner tag is re-rendered from
//! `spurious.csv` when a sample is materialized for a training or test split.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::regularizers::MaskBatch;

pub const SHAPE_NAMES: [&str; 5] = ["disc", "triangle", "cross", "square", "ring"];

/// Corner tag attached to a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpuriousTag {
    /// Tag color shown when the sample is used for training (equals the label).
    pub train_class: usize,
    /// Tag color shown when the sample is used for testing (independent of the label).
    pub test_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    /// `(3, H, W)` in `[0, 1]`, without any corner tag.
    pub image: Array3<f32>,
    /// `(H, W)` with entries in `{0, 1}`.
    pub mask: Array2<f32>,
    pub label: usize,
    pub sample_id: String,
    pub tag: Option<SpuriousTag>,
}

impl MaskedSample {
    /// The image as seen in a split of the given role.
    pub fn render(&self, role: SplitRole) -> Array3<f32> {
        let mut img = self.image.clone();
        if let Some(tag) = self.tag {
            let class = match role {
                SplitRole::Train => tag.train_class,
                SplitRole::Test => tag.test_class,
            };
            draw_tag(&mut img, class);
        }
        img
    }
}

fn tag_side(h: usize, w: usize) -> usize {
    (h.min(w) / 8).max(2)
}

fn tag_color(class: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 5] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
    PALETTE[class % PALETTE.len()]
}

fn draw_tag(img: &mut Array3<f32>, class: usize) {
    let (_, h, w) = img.dim();
    let side = tag_side(h, w);
    let color = tag_color(class);
    for (c, &v) in color.iter().enumerate() {
        for y in 0..side {
            for x in 0..side {
                img[[c, y, x]] = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub n_classes: usize,
    pub samples: Vec<MaskedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.samples.first().map(|s| s.mask.dim()).unwrap_or((0, 0))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.sample_id == sample_id)
    }

    /// Normalized `(B, 3, H, W)` images, labels and masks for `indices`.
    pub fn batch(&self, indices: &[usize], role: SplitRole) -> Result<(Tensor, Vec<usize>, MaskBatch)> {
        let (h, w) = self.image_size();
        let mut images = Array3::<f32>::zeros((0, h, w)).into_dyn();
        let mut flat = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut masks = Array3::zeros((indices.len(), h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            let s = self.samples.get(i).ok_or_else(|| Error::Index(format!("sample index {i} out of range")))?;
            flat.extend(s.render(role).iter().map(|&v| normalize_pixel(v)));
            masks.index_axis_mut(Axis(0), b).assign(&s.mask);
            labels.push(s.label);
        }
        if !indices.is_empty() {
            images = Tensor::from_shape_vec(ndarray::IxDyn(&[indices.len(), 3, h, w]), flat).expect("batch shape");
        }
        Ok((images, labels, MaskBatch::new(masks)?))
    }
}

/// Maps `[0, 1]` pixels to the network's input range `[-1, 1]`.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) / 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: (usize, usize),
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Expected clutter strokes per image, as a fraction of 40.
    pub clutter_density: f32,
    /// Probability that a sample carries a corner tag.
    pub spurious_correlation: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { image_size: (64, 64), n_classes: 3, samples_per_class: 60, clutter_density: 0.5, spurious_correlation: 0.9, seed: 7 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("synthetic images must be at least 8x8, got {h}x{w}")));
        }
        if !(2..=SHAPE_NAMES.len()).contains(&self.n_classes) {
            return Err(Error::Config(format!("n_classes must be in 2..={}", SHAPE_NAMES.len())));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        for (name, p) in [("clutter_density", self.clutter_density), ("spurious_correlation", self.spurious_correlation)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Whether the point `(u, v)` in shape-local coordinates (unit radius) lies inside `shape`.
fn inside_shape(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => {
            // Equilateral triangle inscribed in the unit circle, apex up.
            let s3 = 3f32.sqrt();
            v <= 0.5 && s3 * u - v <= 1.0 && -s3 * u - v <= 1.0
        }
        2 => (u.abs() <= 1.0 && v.abs() <= 0.3) || (v.abs() <= 1.0 && u.abs() <= 0.3),
        3 => u.abs() <= 0.75 && v.abs() <= 0.75,
        _ => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
    }
}

fn render_sample(spec: &SyntheticSpec, class: usize, index: usize) -> Result<MaskedSample> {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let side = tag_side(h, w) as f32;
    let dim = h.min(w) as f32;

    let mut image = Array3::<f32>::zeros((3, h, w));
    let bg = rng.random_range(0.15..0.35f32);
    for y in 0..h {
        for x in 0..w {
            let v = bg + rng.random_range(-0.04..0.04f32);
            for c in 0..3 {
                image[[c, y, x]] = v;
            }
        }
    }
    let strokes = (spec.clutter_density * 40.0).round() as usize;
    for _ in 0..strokes {
        let (x0, y0) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let len = rng.random_range(0.06..0.18f32) * dim;
        let level = rng.random_range(0.3..0.8f32);
        let steps = (len * 2.0) as usize + 1;
        for t in 0..steps {
            let f = t as f32 / 2.0;
            let (x, y) = (x0 + f * angle.cos(), y0 + f * angle.sin());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                for c in 0..3 {
                    image[[c, y as usize, x as usize]] = level;
                }
            }
        }
    }

    let radius = rng.random_range(0.16..0.26f32) * dim;
    let rot = rng.random_range(0.0..std::f32::consts::TAU);
    let level = rng.random_range(0.6..0.95f32);
    // Keep the shape clear of the tag corner and the image border.
    let (mut cx, mut cy);
    let mut attempts = 0;
    loop {
        cx = rng.random_range(radius + 1.0..(w as f32 - radius - 1.0).max(radius + 1.5));
        cy = rng.random_range(radius + 1.0..(h as f32 - radius - 1.0).max(radius + 1.5));
        attempts += 1;
        if cx - radius > side + 1.0 || cy - radius > side + 1.0 || attempts > 64 {
            break;
        }
    }
    let (cos, sin) = (rot.cos(), rot.sin());
    let mut mask = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f32 + 0.5 - cx) / radius, (y as f32 + 0.5 - cy) / radius);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            if inside_shape(class, u, v) {
                mask[[y, x]] = 1.0;
                for c in 0..3 {
                    image[[c, y, x]] = level;
                }
            }
        }
    }
    image.mapv_inplace(quantize);

    let ones = mask.iter().filter(|&&m| m == 1.0).count();
    let sample_id = format!("{}_{:04}", SHAPE_NAMES[class], index);
    if ones == 0 || ones == h * w {
        return Err(Error::Generation(format!("shape footprint of `{sample_id}` is degenerate at {h}x{w}")));
    }
    let tag = (rng.random::<f32>() < spec.spurious_correlation)
        .then(|| SpuriousTag { train_class: class, test_class: rng.random_range(0..spec.n_classes) });
    Ok(MaskedSample { image, mask, label: class, sample_id, tag })
}

/// Generates `n_classes * samples_per_class` samples, class-major.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for class in 0..spec.n_classes {
        for j in 0..spec.samples_per_class {
            samples.push(render_sample(spec, class, class * spec.samples_per_class + j)?);
        }
    }
    Ok(Dataset { name: "synthetic".into(), n_classes: spec.n_classes, samples })
}

/// Resize-then-center-crop geometry applied by [`load_directory`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    pub resize: (usize, usize),
    pub crop: (usize, usize),
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { resize: (64, 64), crop: (64, 64) }
    }
}

impl LoadOptions {
    pub fn validate(&self) -> Result<()> {
        if self.crop.0 == 0 || self.crop.1 == 0 || self.crop.0 > self.resize.0 || self.crop.1 > self.resize.1 {
            return Err(Error::Config(format!("crop {:?} must be nonzero and fit inside resize {:?}", self.crop, self.resize)));
        }
        Ok(())
    }

    fn offsets(&self) -> (u32, u32) {
        (((self.resize.1 - self.crop.1) / 2) as u32, ((self.resize.0 - self.crop.0) / 2) as u32)
    }
}

fn stems_in(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn load_image(path: &Path, opts: &LoadOptions) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(&img, opts.resize.1 as u32, opts.resize.0 as u32, FilterType::Triangle);
    let (ox, oy) = opts.offsets();
    let img = image::imageops::crop_imm(&img, ox, oy, opts.crop.1 as u32, opts.crop.0 as u32).to_image();
    let (h, w) = opts.crop;
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

/// Pixels further than this from both 0 and 255 make a mask non-binary.
const MASK_TOLERANCE: u8 = 32;

/// Loads a `{0, 255}` mask, resized with nearest-neighbor and thresholded at 128.
pub fn load_mask(path: &Path, stem: &str, opts: &LoadOptions) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_luma8();
    if img.pixels().any(|p| p[0] > MASK_TOLERANCE && p[0] < 255 - MASK_TOLERANCE) {
        return Err(Error::Format(format!("mask `{stem}` has values other than 0 and 255")));
    }
    let img = image::imageops::resize(&img, opts.resize.1 as u32, opts.resize.0 as u32, FilterType::Nearest);
    let (ox, oy) = opts.offsets();
    let img = image::imageops::crop_imm(&img, ox, oy, opts.crop.1 as u32, opts.crop.0 as u32).to_image();
    let (h, w) = opts.crop;
    let mask = Array2::from_shape_fn((h, w), |(y, x)| if img.get_pixel(x as u32, y as u32)[0] >= 128 { 1.0 } else { 0.0 });
    let ones = mask.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == h * w {
        return Err(Error::DegenerateMask(stem.to_string()));
    }
    Ok(mask)
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    stem: String,
    label: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct SpuriousRow {
    stem: String,
    train_class: usize,
    test_class: usize,
}

pub fn load_directory(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    opts.validate()?;
    let images = stems_in(&root.join("images"))?;
    let masks = stems_in(&root.join("masks"))?;
    for stem in images.keys() {
        if !masks.contains_key(stem) {
            return Err(Error::Pairing(format!("image `{stem}` has no mask")));
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            return Err(Error::Pairing(format!("mask `{stem}` has no image")));
        }
    }
    let mut labels = HashMap::new();
    for row in csv::Reader::from_path(root.join("labels.csv"))?.deserialize() {
        let row: LabelRow = row?;
        labels.insert(row.stem, row.label);
    }
    let mut tags = HashMap::new();
    let spurious = root.join("spurious.csv");
    if spurious.exists() {
        for row in csv::Reader::from_path(spurious)?.deserialize() {
            let row: SpuriousRow = row?;
            tags.insert(row.stem, SpuriousTag { train_class: row.train_class, test_class: row.test_class });
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let label = *labels.get(stem).ok_or_else(|| Error::Pairing(format!("image `{stem}` has no entry in labels.csv")))?;
        samples.push(MaskedSample {
            image: load_image(path, opts)?,
            mask: load_mask(&masks[stem], stem, opts)?,
            label,
            sample_id: stem.clone(),
            tag: tags.get(stem).copied(),
        });
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!("no image/mask pairs under {}", root.display())));
    }
    let n_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string();
    Ok(Dataset { name, n_classes, samples })
}

/// Loads externally supplied pseudo-masks `<dir>/<stem>.png` for every sample id.
pub fn load_pseudo_masks<'a>(
    dir: &Path,
    sample_ids: impl IntoIterator<Item = &'a str>,
    opts: &LoadOptions,
) -> Result<HashMap<String, Array2<f32>>> {
    let mut out = HashMap::new();
    for stem in sample_ids {
        let path = dir.join(format!("{stem}.png"));
        if !path.exists() {
            return Err(Error::Pairing(format!("no pseudo-mask for `{stem}` in {}", dir.display())));
        }
        out.insert(stem.to_string(), load_mask(&path, stem, opts)?);
    }
    Ok(out)
}

pub fn write_mask_png(mask: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img =
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }]));
    img.save(path)?;
    Ok(())
}

pub fn write_rgb_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path)?;
    Ok(())
}

/// Writes `dataset` in the on-disk layout.
pub fn export(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut labels = csv::Writer::from_path(root.join("labels.csv"))?;
    let mut tags = Vec::new();
    for s in &dataset.samples {
        write_rgb_png(&s.image, &root.join("images").join(format!("{}.png", s.sample_id)))?;
        write_mask_png(&s.mask, &root.join("masks").join(format!("{}.png", s.sample_id)))?;
        labels.serialize(LabelRow { stem: s.sample_id.clone(), label: s.label })?;
        if let Some(t) = s.tag {
            tags.push(SpuriousRow { stem: s.sample_id.clone(), train_class: t.train_class, test_class: t.test_class });
        }
    }
    labels.flush()?;
    if !tags.is_empty() {
        let mut w = csv::Writer::from_path(root.join("spurious.csv"))?;
        for t in tags {
            w.serialize(t)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Stratified assignment of sample ids to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.assignments.get(sample_id).copied()
    }

    /// `(train, test)` dataset indices for `fold`.
    pub fn split(&self, dataset: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.k {
            return Err(Error::Index(format!("fold {fold} out of range for k={}", self.k)));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in dataset.samples.iter().enumerate() {
            match self.fold_of(&s.sample_id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => return Err(Error::Pairing(format!("sample `{}` is not in the fold plan", s.sample_id))),
            }
        }
        Ok((train, test))
    }
}

pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Stratification(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for s in &dataset.samples {
        by_class.entry(s.label).or_default().push(s.sample_id.clone());
    }
    let mut assignments = BTreeMap::new();
    let mut offset = 0;
    for (class, mut ids) in by_class {
        if ids.len() < k {
            return Err(Error::Stratification(format!("class {class} has {} samples, fewer than k={k}", ids.len())));
        }
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            assignments.insert(id.clone(), (offset + i) % k);
        }
        offset += ids.len();
    }
    Ok(FoldPlan { k, seed, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec { samples_per_class: 10, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_synthetic(&small_spec()).unwrap(), generate_synthetic(&small_spec()).unwrap());
    }

    #[test]
    fn zero_correlation_means_no_tags() {
        let d = generate_synthetic(&SyntheticSpec { spurious_correlation: 0.0, ..small_spec() }).unwrap();
        assert!(d.samples.iter().all(|s| s.tag.is_none() && s.render(SplitRole::Train) == s.image));
    }

    #[test]
    fn masks_are_non_degenerate_and_untouched_by_tags() {
        let d = generate_synthetic(&SyntheticSpec { spurious_correlation: 1.0, ..small_spec() }).unwrap();
        for s in &d.samples {
            let ones = s.mask.iter().filter(|&&v| v == 1.0).count();
            assert!(ones > 0 && ones < 64 * 64);
            let tag = s.tag.unwrap();
            assert_eq!(tag.train_class, s.label);
            // The tag corner never overlaps the shape.
            assert!(s.mask.slice(ndarray::s![..8, ..8]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn test_role_shows_the_decorrelated_tag() {
        let d = generate_synthetic(&SyntheticSpec { spurious_correlation: 1.0, ..small_spec() }).unwrap();
        let s = d.samples.iter().find(|s| s.tag.unwrap().test_class != s.label).unwrap();
        let test = s.render(SplitRole::Test);
        let color = tag_color(s.tag.unwrap().test_class);
        assert_eq!([test[[0, 0, 0]], test[[1, 0, 0]], test[[2, 0, 0]]], color);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let spec = SyntheticSpec { image_size: (4, 4), ..small_spec() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn exact_fold_divisibility() {
        let d = generate_synthetic(&small_spec()).unwrap();
        let plan = make_folds(&d, 10, 3).unwrap();
        for fold in 0..10 {
            let (train, test) = plan.split(&d, fold).unwrap();
            assert_eq!(test.len(), 3);
            assert_eq!(train.len(), 27);
            let mut classes: Vec<_> = test.iter().map(|&i| d.samples[i].label).collect();
            classes.sort();
            assert_eq!(classes, vec![0, 1, 2]);
        }
        assert_eq!(plan, make_folds(&d, 10, 3).unwrap());
        assert!(matches!(make_folds(&d, 1, 3), Err(Error::Stratification(_))));
        assert!(matches!(make_folds(&d, 11, 3), Err(Error::Stratification(_))));
    }

    #[test]
    fn export_load_roundtrip() {
        let d = generate_synthetic(&SyntheticSpec { samples_per_class: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&d, dir.path()).unwrap();
        let back = load_directory(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(back.len(), d.len());
        for s in &d.samples {
            let t = &back.samples[back.index_of(&s.sample_id).unwrap()];
            assert_eq!(t.mask, s.mask);
            assert_eq!(t.label, s.label);
            assert_eq!(t.tag, s.tag);
            assert_eq!(t.image, s.image);
        }
    }

    #[test]
    fn batch_normalizes_and_renders_role() {
        let d = generate_synthetic(&SyntheticSpec { samples_per_class: 2, spurious_correlation: 1.0, ..Default::default() }).unwrap();
        let (x, labels, masks) = d.batch(&[0, 3], SplitRole::Train).unwrap();
        assert_eq!(x.shape(), &[2, 3, 64, 64]);
        assert_eq!(labels, vec![0, 1]);
        assert_eq!(masks.batch(), 2);
        assert_eq!(x[[0, 0, 0, 0]], 1.0);
        assert_eq!(x[[0, 1, 0, 0]], -1.0);
    }
}
