//! Small convolutional classifier: a stack of 3x3 conv + ReLU layers,
//! global average pooling and a linear head.

use serde::{Deserialize, Serialize};

use super::layers::{conv2d, global_avg_pool, linear};
use super::params::{ParamInit, ParamStore};
use super::{Model, RawForward, SpatialReshapeRule};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub image_size: (usize, usize),
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub n_classes: usize,
    pub value_head: bool,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        Self { image_size: (64, 64), channels: vec![16, 32, 32, 32], strides: vec![2, 2, 2, 1], n_classes: 3, value_head: false }
    }
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    config: ConvNetConfig,
    params: ParamStore,
    convs: Vec<(usize, usize)>,
    head: (usize, usize),
    value: Option<(usize, usize)>,
}

impl ConvNet {
    pub fn new(config: ConvNetConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() != config.strides.len() {
            return Err(Error::Config("conv net needs matching, non-empty channels and strides".into()));
        }
        if config.n_classes < 2 {
            return Err(Error::Config("conv net needs at least two classes".into()));
        }
        let mut init = ParamInit::new(seed);
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let fan_in = in_ch * 9;
            let w = init.he_uniform(&format!("conv{}.weight", i + 1), &[fan_in, out_ch], fan_in);
            let b = init.fill(&format!("conv{}.bias", i + 1), &[out_ch], 0.0);
            convs.push((w, b));
            in_ch = out_ch;
        }
        let head = (
            init.uniform("head.weight", &[in_ch, config.n_classes], (1.0 / in_ch as f32).sqrt()),
            init.fill("head.bias", &[config.n_classes], 0.0),
        );
        let value = config
            .value_head
            .then(|| (init.uniform("value.weight", &[in_ch, 1], (1.0 / in_ch as f32).sqrt()), init.fill("value.bias", &[1], 0.0)));
        Ok(Self { config, params: init.finish(), convs, head, value })
    }

    pub fn config(&self) -> &ConvNetConfig {
        &self.config
    }

    /// Spatial size of each conv layer's output.
    pub fn feature_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.config.image_size;
        self.config
            .strides
            .iter()
            .map(|&s| {
                h = (h + 2 - 3) / s + 1;
                w = (w + 2 - 3) / s + 1;
                (h, w)
            })
            .collect()
    }
}

impl Model for ConvNet {
    fn name(&self) -> &str {
        "cnn"
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn image_size(&self) -> (usize, usize) {
        self.config.image_size
    }

    fn has_value_head(&self) -> bool {
        self.value.is_some()
    }

    fn capture_layers(&self) -> Vec<String> {
        (1..=self.convs.len()).map(|i| format!("conv{i}")).collect()
    }

    fn default_capture_layer(&self) -> String {
        format!("conv{}", self.convs.len())
    }

    fn forward<'t>(&self, _tape: &'t Tape, params: &[Var<'t>], images: Var<'t>, layer_id: &str) -> Result<RawForward<'t>> {
        let layers = self.capture_layers();
        let capture_idx = layers
            .iter()
            .position(|l| l == layer_id)
            .ok_or_else(|| Error::Config(format!("unknown capture layer `{layer_id}` for cnn (have {layers:?})")))?;
        let mut x = images;
        let mut captured = None;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            x = conv2d(x, params[w], params[b], 3, self.config.strides[i], 1).relu();
            if i == capture_idx {
                captured = Some(x);
            }
        }
        let pooled = global_avg_pool(x);
        let logits = linear(pooled, params[self.head.0], params[self.head.1]);
        let value = self.value.map(|(w, b)| {
            let b_sz = pooled.shape()[0];
            linear(pooled, params[w], params[b]).reshape(&[b_sz])
        });
        Ok(RawForward { logits, value, captured: captured.expect("capture index within layers"), rule: SpatialReshapeRule::none() })
    }
}
