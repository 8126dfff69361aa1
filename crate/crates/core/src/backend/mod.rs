//! Differentiable model abstraction: forward passes that capture an
//! intermediate spatial feature map, scalar target selection, and gradients
//! of a summed per-sample scalar with respect to the captured maps.

pub mod cnn;
pub mod layers;
pub mod params;
pub mod vit;

use std::cell::OnceCell;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
pub use cnn::{ConvNet, ConvNetConfig};
pub use params::ParamStore;
pub use vit::{Vit, VitConfig};

/// How captured activations map onto a `(B, K, h, w)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReshapeKind {
    /// `(B, h*w + 1, C)` token sequence whose first token is a classification token.
    DropLeadingToken,
    /// `(B, h*w, C)` token sequence.
    Identity,
    /// Activations are already `(B, K, h, w)`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialReshapeRule {
    pub kind: ReshapeKind,
    pub grid: (usize, usize),
}

impl SpatialReshapeRule {
    pub fn none() -> Self {
        Self { kind: ReshapeKind::None, grid: (0, 0) }
    }
}

/// Output of a model's forward pass before feature maps are put in spatial layout.
pub struct RawForward<'t> {
    pub logits: Var<'t>,
    pub value: Option<Var<'t>>,
    pub captured: Var<'t>,
    pub rule: SpatialReshapeRule,
}

/// A differentiable classifier with a hookable intermediate layer.
pub trait Model {
    fn name(&self) -> &str;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn n_classes(&self) -> usize;
    fn image_size(&self) -> (usize, usize);
    fn has_value_head(&self) -> bool;
    fn capture_layers(&self) -> Vec<String>;
    fn default_capture_layer(&self) -> String;
    /// `params` are this model's parameters bound on `tape`, in store order.
    fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], images: Var<'t>, layer_id: &str) -> Result<RawForward<'t>>;
}

/// One of the two shipped reference models.
#[derive(Debug, Clone)]
pub enum ReferenceModel {
    Cnn(ConvNet),
    Vit(Vit),
}

impl ReferenceModel {
    /// Builds `cnn` or `vit` with default architecture for the given task shape.
    pub fn build(name: &str, n_classes: usize, image_size: (usize, usize), value_head: bool, seed: u64) -> Result<Self> {
        match name {
            "cnn" => Ok(Self::Cnn(ConvNet::new(ConvNetConfig { image_size, n_classes, value_head, ..Default::default() }, seed)?)),
            "vit" => Ok(Self::Vit(Vit::new(VitConfig { image_size, n_classes, value_head, ..Default::default() }, seed)?)),
            other => Err(Error::Config(format!("unknown model `{other}` (expected `cnn` or `vit`)"))),
        }
    }

    fn inner(&self) -> &dyn Model {
        match self {
            Self::Cnn(m) => m,
            Self::Vit(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Model {
        match self {
            Self::Cnn(m) => m,
            Self::Vit(m) => m,
        }
    }
}

impl Model for ReferenceModel {
    fn name(&self) -> &str {
        self.inner().name()
    }
    fn params(&self) -> &ParamStore {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }
    fn n_classes(&self) -> usize {
        self.inner().n_classes()
    }
    fn image_size(&self) -> (usize, usize) {
        self.inner().image_size()
    }
    fn has_value_head(&self) -> bool {
        self.inner().has_value_head()
    }
    fn capture_layers(&self) -> Vec<String> {
        self.inner().capture_layers()
    }
    fn default_capture_layer(&self) -> String {
        self.inner().default_capture_layer()
    }
    fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], images: Var<'t>, layer_id: &str) -> Result<RawForward<'t>> {
        self.inner().forward(tape, params, images, layer_id)
    }
}

/// Captured activations of one layer for a mini-batch, viewed as `(B, K, h, w)`.
pub struct FeatureMapBatch<'t> {
    captured: Var<'t>,
    rule: SpatialReshapeRule,
    layer_id: String,
    spatial: OnceCell<Var<'t>>,
}

impl<'t> FeatureMapBatch<'t> {
    pub fn new(captured: Var<'t>, rule: SpatialReshapeRule, layer_id: impl Into<String>) -> Result<Self> {
        let fm = Self { captured, rule, layer_id: layer_id.into(), spatial: OnceCell::new() };
        let spatial = tokens_to_spatial(captured, rule)?;
        let s = spatial.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::Shape(format!("feature maps must be B x K x h x w with all dims >= 1, got {s:?}")));
        }
        let _ = fm.spatial.set(spatial);
        Ok(fm)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rule(&self) -> SpatialReshapeRule {
        self.rule
    }

    /// The node the model actually computed through.
    pub fn captured(&self) -> Var<'t> {
        self.captured
    }

    /// `(B, K, h, w)` view of the captured activations.
    pub fn values(&self) -> Var<'t> {
        *self.spatial.get().expect("spatial view initialised in new")
    }

    /// `(B, K, h, w)`.
    pub fn dims(&self) -> [usize; 4] {
        let s = self.values().shape();
        [s[0], s[1], s[2], s[3]]
    }
}

/// Which per-sample scalar attention is computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScalarTargetSelector {
    /// Logit of each sample's ground-truth class.
    GroundTruthLogit(Vec<usize>),
    /// Output of the scalar value head.
    ValueHead,
    /// Logit at an arbitrary per-sample index.
    CustomIndex(Vec<usize>),
}

/// Outputs of [`forward_with_capture`].
pub struct Forward<'t> {
    pub params: Vec<Var<'t>>,
    pub logits: Var<'t>,
    pub value: Option<Var<'t>>,
    pub features: FeatureMapBatch<'t>,
}

/// Runs `model` on a `(B, 3, H, W)` batch, recording everything on `tape` and
/// capturing `layer_id`'s activations.
pub fn forward_with_capture<'t>(model: &dyn Model, tape: &'t Tape, images: &Tensor, layer_id: &str) -> Result<Forward<'t>> {
    let s = images.shape();
    let (h, w) = model.image_size();
    if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != h || s[3] != w {
        return Err(Error::Shape(format!("expected image batch B x 3 x {h} x {w}, got {s:?}")));
    }
    let params = model.params().bind(tape);
    let x = tape.leaf(images.clone());
    let raw = model.forward(tape, &params, x, layer_id)?;
    if !raw.logits.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits from {}", model.name())));
    }
    if !raw.captured.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite activations at `{layer_id}`")));
    }
    let features = FeatureMapBatch::new(raw.captured, raw.rule, layer_id)?;
    Ok(Forward { params, logits: raw.logits, value: raw.value, features })
}

/// One scalar per sample, as a `(B,)` node.
pub fn select_scalar<'t>(outputs: Var<'t>, selector: &ScalarTargetSelector) -> Result<Var<'t>> {
    let s = outputs.shape();
    match selector {
        ScalarTargetSelector::ValueHead => {
            if s.is_empty() || s.iter().skip(1).any(|&d| d != 1) {
                return Err(Error::Shape(format!("value-head outputs must be (B,) or (B, 1), got {s:?}")));
            }
            Ok(if s.len() == 1 { outputs } else { outputs.reshape(&[s[0]]) })
        }
        ScalarTargetSelector::GroundTruthLogit(idx) | ScalarTargetSelector::CustomIndex(idx) => {
            if s.len() != 2 {
                return Err(Error::Shape(format!("logits must be B x C, got {s:?}")));
            }
            if idx.len() != s[0] {
                return Err(Error::Shape(format!("{} indices for a batch of {}", idx.len(), s[0])));
            }
            if let Some((b, &c)) = idx.iter().enumerate().find(|(_, &c)| c >= s[1]) {
                return Err(Error::Index(format!("sample {b}: class index {c} out of range for {} classes", s[1])));
            }
            let mask = outputs.tape().leaf(layers::one_hot(idx, s[1]));
            Ok((outputs * mask).sum_axes(&[1]).reshape(&[s[0]]))
        }
    }
}

/// Gradients of `sum_b scalars[b]` with respect to the captured feature maps,
/// from a single reverse traversal, laid out as `(B, K, h, w)`.
///
/// With `retain_higher_order` the result stays on the graph so that losses
/// built from it can be differentiated with respect to model parameters.
pub fn gradients_for_summed_target<'t>(features: &FeatureMapBatch<'t>, scalars: Var<'t>, retain_higher_order: bool) -> Result<Var<'t>> {
    let b = features.dims()[0];
    if scalars.shape() != [b] {
        return Err(Error::Shape(format!("expected {b} scalars, got shape {:?}", scalars.shape())));
    }
    let tape = scalars.tape();
    let total = scalars.sum_all();
    let grad = tape.grad(total, &[features.captured()], retain_higher_order)[0]
        .ok_or_else(|| Error::Linkage(format!("scalar target does not depend on layer `{}`", features.layer_id())))?;
    tokens_to_spatial(grad, features.rule())
}

/// Per-sample reference for [`gradients_for_summed_target`]: `B` separate
/// reverse traversals, each seeded from a single sample's scalar, stitched
/// back into one `(B, K, h, w)` node.
pub fn gradients_per_sample<'t>(features: &FeatureMapBatch<'t>, scalars: Var<'t>, retain_higher_order: bool) -> Result<Var<'t>> {
    let b = features.dims()[0];
    if scalars.shape() != [b] {
        return Err(Error::Shape(format!("expected {b} scalars, got shape {:?}", scalars.shape())));
    }
    let tape = scalars.tape();
    let mut stitched: Option<Var<'t>> = None;
    for i in 0..b {
        let mut pick = ndarray::ArrayD::zeros(ndarray::IxDyn(&[b]));
        pick[[i]] = 1.0;
        let yi = (scalars * tape.leaf(pick)).sum_all();
        let grad = tape.grad(yi, &[features.captured()], retain_higher_order)[0]
            .ok_or_else(|| Error::Linkage(format!("scalar target does not depend on layer `{}`", features.layer_id())))?;
        let own = tokens_to_spatial(grad, features.rule())?.narrow(0, i, 1).embed(0, i, b);
        stitched = Some(match stitched {
            Some(acc) => acc + own,
            None => own,
        });
    }
    Ok(stitched.expect("batch has at least one sample"))
}

/// Token sequence `(B, N, C)` to channel-major feature maps `(B, C, h, w)`.
pub fn tokens_to_spatial<'t>(seq: Var<'t>, rule: SpatialReshapeRule) -> Result<Var<'t>> {
    let s = seq.shape();
    if rule.kind == ReshapeKind::None {
        return Ok(seq);
    }
    if s.len() != 3 {
        return Err(Error::Shape(format!("token sequence must be B x N x C, got {s:?}")));
    }
    let (gh, gw) = rule.grid;
    let (b, n, c) = (s[0], s[1], s[2]);
    let tokens = match rule.kind {
        ReshapeKind::DropLeadingToken if n == gh * gw + 1 => seq.narrow(1, 1, gh * gw),
        ReshapeKind::Identity if n == gh * gw => seq,
        _ => return Err(Error::Shape(format!("sequence length {n} incompatible with {:?} onto a {gh}x{gw} grid", rule.kind))),
    };
    Ok(tokens.reshape(&[b, gh, gw, c]).permute(&[0, 3, 1, 2]))
}

/// Array form of [`tokens_to_spatial`].
pub fn tokens_to_spatial_array(seq: &Tensor, rule: SpatialReshapeRule) -> Result<Tensor> {
    let tape = Tape::new();
    let v = tokens_to_spatial(tape.leaf(seq.clone()), rule)?;
    Ok((*v.value()).clone())
}

/// Flattens `(B, C, h, w)` maps back into a `(B, h*w, C)` token sequence.
pub fn spatial_to_tokens_array(maps: &Tensor) -> Result<Tensor> {
    let s = maps.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected B x C x h x w, got {s:?}")));
    }
    let p = maps.view().permuted_axes(ndarray::IxDyn(&[0, 2, 3, 1])).as_standard_layout().into_owned();
    p.into_shape_with_order(ndarray::IxDyn(&[s[0], s[2] * s[3], s[1]])).map_err(|e| Error::Shape(e.to_string()))
}

/// Splits a batch tensor into rows `[start, start+len)` along the batch axis.
pub fn batch_slice(t: &Tensor, start: usize, len: usize) -> Tensor {
    t.slice_axis(Axis(0), ndarray::Slice::from(start..start + len)).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ArrayD, IxDyn};

    fn small_cnn(seed: u64) -> ReferenceModel {
        ReferenceModel::Cnn(
            ConvNet::new(
                ConvNetConfig { image_size: (28, 28), channels: vec![4, 8], strides: vec![2, 2], n_classes: 3, value_head: true },
                seed,
            )
            .unwrap(),
        )
    }

    fn images(b: usize, h: usize, w: usize, seed: f32) -> Tensor {
        let n = b * 3 * h * w;
        ArrayD::from_shape_vec(IxDyn(&[b, 3, h, w]), (0..n).map(|i| (i as f32 * 0.113 + seed).sin()).collect()).unwrap()
    }

    #[test]
    fn cnn_forward_shapes() {
        let model = small_cnn(1);
        let tape = Tape::new();
        let f = forward_with_capture(&model, &tape, &images(2, 28, 28, 0.0), "conv2").unwrap();
        assert_eq!(f.logits.shape(), vec![2, 3]);
        assert_eq!(f.features.dims(), [2, 8, 7, 7]);
    }

    #[test]
    fn zero_input_stays_finite() {
        let model = small_cnn(2);
        let tape = Tape::new();
        let f = forward_with_capture(&model, &tape, &ArrayD::zeros(IxDyn(&[1, 3, 28, 28])), "conv2").unwrap();
        assert!(f.logits.value().iter().all(|v| v.is_finite()));
        assert!(f.features.values().value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unknown_layer_is_config_error() {
        let model = small_cnn(3);
        let tape = Tape::new();
        let err = forward_with_capture(&model, &tape, &images(1, 28, 28, 0.0), "fc9").err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn vit_four_patches_reshape_to_two_by_two() {
        let model = ReferenceModel::Vit(
            Vit::new(
                VitConfig { image_size: (16, 16), patch: 8, dim: 8, depth: 2, heads: 2, mlp_hidden: 8, n_classes: 3, value_head: false },
                4,
            )
            .unwrap(),
        );
        let tape = Tape::new();
        let f = forward_with_capture(&model, &tape, &images(2, 16, 16, 0.5), "block1").unwrap();
        assert_eq!(f.features.captured().shape(), vec![2, 5, 8]);
        assert_eq!(f.features.dims(), [2, 8, 2, 2]);
    }

    #[test]
    fn select_ground_truth_logits() {
        let tape = Tape::new();
        let logits = tape.leaf(array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]].into_dyn());
        let s = select_scalar(logits, &ScalarTargetSelector::GroundTruthLogit(vec![2, 0])).unwrap();
        assert_eq!(s.value().as_slice().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn select_value_head_passes_through() {
        let tape = Tape::new();
        let v = tape.leaf(array![0.7f32, -0.2].into_dyn());
        let s = select_scalar(v, &ScalarTargetSelector::ValueHead).unwrap();
        assert_eq!(s.value().as_slice().unwrap(), &[0.7, -0.2]);
    }

    #[test]
    fn select_out_of_range_is_index_error() {
        let tape = Tape::new();
        let logits = tape.leaf(array![[1.0f32, 2.0, 3.0]].into_dyn());
        let err = select_scalar(logits, &ScalarTargetSelector::GroundTruthLogit(vec![3])).unwrap_err();
        assert!(matches!(err, Error::Index(_)));
    }

    #[test]
    fn linear_model_gradient_is_all_ones() {
        for b in [1, 3, 5] {
            let tape = Tape::new();
            let feats = tape.leaf(ArrayD::from_elem(IxDyn(&[b, 2, 3, 3]), 0.3));
            let fm = FeatureMapBatch::new(feats, SpatialReshapeRule::none(), "x").unwrap();
            let y = feats.sum_axes(&[1, 2, 3]).reshape(&[b]);
            let g = gradients_for_summed_target(&fm, y, false).unwrap();
            assert!(g.value().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn detached_features_are_linkage_error() {
        let tape = Tape::new();
        let feats = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let fm = FeatureMapBatch::new(feats, SpatialReshapeRule::none(), "x").unwrap();
        let other = tape.leaf(array![2.0f32].into_dyn());
        let err = gradients_for_summed_target(&fm, other * other, false).unwrap_err();
        assert!(matches!(err, Error::Linkage(_)));
    }

    #[test]
    fn token_reshape_rules() {
        let seq = ArrayD::from_shape_vec(IxDyn(&[1, 5, 3]), (0..15).map(|v| v as f32).collect()).unwrap();
        let drop = SpatialReshapeRule { kind: ReshapeKind::DropLeadingToken, grid: (2, 2) };
        let sp = tokens_to_spatial_array(&seq, drop).unwrap();
        assert_eq!(sp.shape(), &[1, 3, 2, 2]);
        // channel 0 of token 1 (first patch) lands at (0, 0)
        assert_eq!(sp[[0, 0, 0, 0]], 3.0);
        let ident = SpatialReshapeRule { kind: ReshapeKind::Identity, grid: (2, 2) };
        let four = seq.slice_axis(Axis(1), ndarray::Slice::from(1..5)).to_owned();
        assert_eq!(tokens_to_spatial_array(&four, ident).unwrap().shape(), &[1, 3, 2, 2]);
        assert!(matches!(tokens_to_spatial_array(&seq, ident), Err(Error::Shape(_))));
    }

    #[test]
    fn value_head_gradients_flow_to_features() {
        let model = small_cnn(5);
        let tape = Tape::new();
        let f = forward_with_capture(&model, &tape, &images(2, 28, 28, 1.0), "conv2").unwrap();
        let s = select_scalar(f.value.unwrap(), &ScalarTargetSelector::ValueHead).unwrap();
        let g = gradients_for_summed_target(&f.features, s, false).unwrap();
        assert_eq!(g.shape(), vec![2, 8, 7, 7]);
    }
}
