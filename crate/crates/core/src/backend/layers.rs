use crate::autodiff::{ConvGeom, Var};

/// 2-D convolution, weights laid out as `(C*k*k, O)`.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, kernel: usize, stride: usize, pad: usize) -> Var<'t> {
    let s = x.shape();
    let geom = ConvGeom { batch: s[0], channels: s[1], height: s[2], width: s[3], kernel, stride, pad };
    let out_ch = weight.shape()[1];
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let y = x.im2col(&geom).matmul(weight);
    let y = y + bias.reshape(&[1, out_ch]).broadcast_to(&[geom.col_rows(), out_ch]);
    y.reshape(&[s[0], oh, ow, out_ch]).permute(&[0, 3, 1, 2])
}

/// `(N, in) x (in, out) + b`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let n = x.shape()[0];
    let out = weight.shape()[1];
    x.matmul(weight) + bias.reshape(&[1, out]).broadcast_to(&[n, out])
}

/// Layer normalization over the last axis of a rank-3 input.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let d = shape[2];
    let mean = x.mean_axes(&[2]).broadcast_to(&shape);
    let centered = x - mean;
    let var = (centered * centered).mean_axes(&[2]);
    let inv_std = var.add_scalar(1e-5).powf(-0.5).broadcast_to(&shape);
    let g = gamma.reshape(&[1, 1, d]).broadcast_to(&shape);
    let b = beta.reshape(&[1, 1, d]).broadcast_to(&shape);
    centered * inv_std * g + b
}

/// Global average pooling `(B, K, h, w) -> (B, K)`.
pub fn global_avg_pool(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.mean_axes(&[2, 3]).reshape(&[s[0], s[1]])
}

/// Mean cross-entropy of `(B, C)` logits against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let s = logits.shape();
    let one_hot = logits.tape().leaf(one_hot(labels, s[1]));
    (logits.log_softmax() * one_hot).sum_all().scale(-1.0 / s[0] as f32)
}

/// Mean squared error between `(B,)` predictions and targets.
pub fn mse<'t>(pred: Var<'t>, targets: &[f32]) -> Var<'t> {
    let t = pred.tape().leaf(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[targets.len()]), targets.to_vec()).expect("targets"));
    let d = pred - t;
    (d * d).sum_all().scale(1.0 / targets.len() as f32)
}

pub fn one_hot(indices: &[usize], classes: usize) -> ndarray::ArrayD<f32> {
    let mut m = ndarray::ArrayD::zeros(ndarray::IxDyn(&[indices.len(), classes]));
    for (b, &c) in indices.iter().enumerate() {
        m[[b, c]] = 1.0;
    }
    m
}
