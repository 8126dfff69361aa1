//! Small patch-tokenizing transformer classifier with a classification token.
//!
//! Capturable layers are `embed` (tokens after positional embedding) and
//! `block1..blockN` (outputs of each encoder block). The head reads only the
//! classification token of the last block, so the patch tokens of the last
//! block carry no gradient; the default capture is therefore the input of the
//! last block.

use serde::{Deserialize, Serialize};

use super::layers::{layer_norm, linear};
use super::params::{ParamInit, ParamStore};
use super::{Model, RawForward, ReshapeKind, SpatialReshapeRule};
use crate::autodiff::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    pub value_head: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { image_size: (64, 64), patch: 8, dim: 32, depth: 2, heads: 2, mlp_hidden: 64, n_classes: 3, value_head: false }
    }
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1: (usize, usize),
    qkv: [(usize, usize); 3],
    proj: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Vit {
    config: VitConfig,
    params: ParamStore,
    patch_embed: (usize, usize),
    cls: usize,
    pos: usize,
    blocks: Vec<BlockParams>,
    norm: (usize, usize),
    head: (usize, usize),
    value: Option<(usize, usize)>,
}

impl Vit {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        let (h, w) = config.image_size;
        if config.patch == 0 || h % config.patch != 0 || w % config.patch != 0 {
            return Err(Error::Config(format!("image {h}x{w} is not divisible into {}-pixel patches", config.patch)));
        }
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) || config.depth == 0 {
            return Err(Error::Config("transformer dim must be divisible by heads and depth >= 1".into()));
        }
        let d = config.dim;
        let mut init = ParamInit::new(seed);
        let pin = 3 * config.patch * config.patch;
        let patch_embed = (init.he_uniform("patch.weight", &[pin, d], pin), init.fill("patch.bias", &[d], 0.0));
        let cls = init.uniform("cls", &[1, 1, d], 0.02);
        let n_tokens = Self::grid_of(&config).0 * Self::grid_of(&config).1 + 1;
        let pos = init.uniform("pos", &[1, n_tokens, d], 0.02);
        let lin_bound = (1.0 / d as f32).sqrt();
        let mut blocks = Vec::new();
        for i in 1..=config.depth {
            let p = |s: &str| format!("block{i}.{s}");
            let ln1 = (init.fill(&p("ln1.gamma"), &[d], 1.0), init.fill(&p("ln1.beta"), &[d], 0.0));
            let qkv = ["q", "k", "v"]
                .map(|n| (init.uniform(&p(&format!("{n}.weight")), &[d, d], lin_bound), init.fill(&p(&format!("{n}.bias")), &[d], 0.0)));
            let proj = (init.uniform(&p("proj.weight"), &[d, d], lin_bound), init.fill(&p("proj.bias"), &[d], 0.0));
            let ln2 = (init.fill(&p("ln2.gamma"), &[d], 1.0), init.fill(&p("ln2.beta"), &[d], 0.0));
            let fc1 = (init.he_uniform(&p("fc1.weight"), &[d, config.mlp_hidden], d), init.fill(&p("fc1.bias"), &[config.mlp_hidden], 0.0));
            let fc2 = (
                init.uniform(&p("fc2.weight"), &[config.mlp_hidden, d], (1.0 / config.mlp_hidden as f32).sqrt()),
                init.fill(&p("fc2.bias"), &[d], 0.0),
            );
            blocks.push(BlockParams { ln1, qkv, proj, ln2, fc1, fc2 });
        }
        let norm = (init.fill("norm.gamma", &[d], 1.0), init.fill("norm.beta", &[d], 0.0));
        let head = (init.uniform("head.weight", &[d, config.n_classes], lin_bound), init.fill("head.bias", &[config.n_classes], 0.0));
        let value = config.value_head.then(|| (init.uniform("value.weight", &[d, 1], lin_bound), init.fill("value.bias", &[1], 0.0)));
        Ok(Self { config, params: init.finish(), patch_embed, cls, pos, blocks, norm, head, value })
    }

    fn grid_of(config: &VitConfig) -> (usize, usize) {
        (config.image_size.0 / config.patch, config.image_size.1 / config.patch)
    }

    pub fn grid(&self) -> (usize, usize) {
        Self::grid_of(&self.config)
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    fn attention<'t>(&self, x: Var<'t>, p: &[Var<'t>], blk: &BlockParams) -> Var<'t> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let heads = self.config.heads;
        let dh = d / heads;
        let flat = x.reshape(&[b * n, d]);
        let split = |(w, bias): (usize, usize)| {
            linear(flat, p[w], p[bias]).reshape(&[b, n, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, n, dh])
        };
        let q = split(blk.qkv[0]);
        let k = split(blk.qkv[1]);
        let v = split(blk.qkv[2]);
        let scores = q.bmm(k.permute(&[0, 2, 1])).scale(1.0 / (dh as f32).sqrt());
        let mixed = scores.softmax().bmm(v);
        let merged = mixed.reshape(&[b, heads, n, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * n, d]);
        linear(merged, p[blk.proj.0], p[blk.proj.1]).reshape(&[b, n, d])
    }

    fn mlp<'t>(&self, x: Var<'t>, p: &[Var<'t>], blk: &BlockParams) -> Var<'t> {
        let s = x.shape();
        let flat = x.reshape(&[s[0] * s[1], s[2]]);
        let h = linear(flat, p[blk.fc1.0], p[blk.fc1.1]).relu();
        linear(h, p[blk.fc2.0], p[blk.fc2.1]).reshape(&s)
    }
}

impl Model for Vit {
    fn name(&self) -> &str {
        "vit"
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
        std::iter::once("embed".to_string()).chain((1..=self.config.depth).map(|i| format!("block{i}"))).collect()
    }

    fn default_capture_layer(&self) -> String {
        if self.config.depth == 1 {
            "embed".into()
        } else {
            format!("block{}", self.config.depth - 1)
        }
    }

    fn forward<'t>(&self, _tape: &'t Tape, p: &[Var<'t>], images: Var<'t>, layer_id: &str) -> Result<RawForward<'t>> {
        let layers = self.capture_layers();
        let capture_idx = layers
            .iter()
            .position(|l| l == layer_id)
            .ok_or_else(|| Error::Config(format!("unknown capture layer `{layer_id}` for vit (have {layers:?})")))?;
        let s = images.shape();
        let (b, d, pt) = (s[0], self.config.dim, self.config.patch);
        let (gh, gw) = self.grid();
        let geom = ConvGeom { batch: b, channels: s[1], height: s[2], width: s[3], kernel: pt, stride: pt, pad: 0 };
        let patches = linear(images.im2col(&geom), p[self.patch_embed.0], p[self.patch_embed.1]).reshape(&[b, gh * gw, d]);
        let cls = p[self.cls].broadcast_to(&[b, 1, d]);
        let n = gh * gw + 1;
        let mut x = cls.concat(patches, 1) + p[self.pos].broadcast_to(&[b, n, d]);
        let mut captured = (capture_idx == 0).then_some(x);
        for (i, blk) in self.blocks.iter().enumerate() {
            let h = x + self.attention(layer_norm(x, p[blk.ln1.0], p[blk.ln1.1]), p, blk);
            x = h + self.mlp(layer_norm(h, p[blk.ln2.0], p[blk.ln2.1]), p, blk);
            if capture_idx == i + 1 {
                captured = Some(x);
            }
        }
        let x = layer_norm(x, p[self.norm.0], p[self.norm.1]);
        let cls_out = x.narrow(1, 0, 1).reshape(&[b, d]);
        let logits = linear(cls_out, p[self.head.0], p[self.head.1]);
        let value = self.value.map(|(w, bias)| linear(cls_out, p[w], p[bias]).reshape(&[b]));
        Ok(RawForward {
            logits,
            value,
            captured: captured.expect("capture index within layers"),
            rule: SpatialReshapeRule { kind: ReshapeKind::DropLeadingToken, grid: (gh, gw) },
        })
    }
}
