//! Raw array kernels used by the tape. Nothing in here records anything.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use super::Tensor;

/// Geometry of a 2-D convolution lowered to a matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    pub fn col_cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

pub(crate) fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f32]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

/// `(B, C, H, W)` -> `(B*Ho*Wo, C*k*k)`, zero padding outside the image.
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let xs = contiguous(x);
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let mut out = vec![0.0f32; g.col_rows() * ncols];
    let plane = g.height * g.width;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                let mut col = 0;
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * plane;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                dst[col] = xs[base + iy as usize * g.width + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.col_rows(), ncols]), out).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatter-adds columns back into image layout.
pub fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    let cs = contiguous(cols);
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let plane = g.height * g.width;
    let mut out = vec![0.0f32; g.batch * g.channels * plane];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let src = &cs[row * ncols..(row + 1) * ncols];
                let mut col = 0;
                for c in 0..g.channels {
                    let base = (b * g.channels + c) * plane;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                out[base + iy as usize * g.width + ix as usize] += src[col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&g.input_shape()), out).expect("col2im shape")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
    a2.dot(&b2).into_dyn()
}

pub fn batch_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-D");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-D");
    let (n, m, _) = a3.dim();
    let p = b3.dim().2;
    let mut out = ndarray::Array3::<f32>::zeros((n, m, p));
    for i in 0..n {
        let prod: Array2<f32> = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out.into_dyn()
}

pub fn permute(a: &Tensor, perm: &[usize]) -> Tensor {
    a.view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned()
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    let std = a.as_standard_layout();
    std.into_owned().into_shape_with_order(IxDyn(shape)).expect("reshape element count mismatch")
}

/// Sums over `axes`, keeping them as length-1 dimensions.
pub fn sum_axes(a: &Tensor, axes: &[usize]) -> Tensor {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = a.clone();
    for &ax in sorted.iter().rev() {
        out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
    }
    out
}

pub fn broadcast_to(a: &Tensor, shape: &[usize]) -> Tensor {
    a.broadcast(IxDyn(shape)).unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape)).to_owned()
}

/// Reduces the trailing axes starting at `from` with `pick`, keeping dims.
pub fn reduce_trailing(a: &Tensor, from: usize, pick: fn(f32, f32) -> f32) -> Tensor {
    let shape = a.shape().to_vec();
    let outer: usize = shape[..from].iter().product();
    let inner: usize = shape[from..].iter().product();
    let data = contiguous(a);
    let mut out = Vec::with_capacity(outer);
    for o in 0..outer {
        let chunk = &data[o * inner..(o + 1) * inner];
        out.push(chunk[1..].iter().fold(chunk[0], |acc, &v| pick(acc, v)));
    }
    let mut oshape = shape[..from].to_vec();
    oshape.extend(std::iter::repeat_n(1, shape.len() - from));
    ArrayD::from_shape_vec(IxDyn(&oshape), out).expect("reduce shape")
}

/// One-hot of the first position matching the reduced value along trailing axes.
pub fn first_match_mask(a: &Tensor, reduced: &Tensor, from: usize) -> Tensor {
    let shape = a.shape().to_vec();
    let outer: usize = shape[..from].iter().product();
    let inner: usize = shape[from..].iter().product();
    let data = contiguous(a);
    let red = contiguous(reduced);
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        let chunk = &data[o * inner..(o + 1) * inner];
        if let Some(pos) = chunk.iter().position(|&v| v == red[o]) {
            out[o * inner + pos] = 1.0;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("mask shape")
}

pub fn log_softmax_last(a: &Tensor) -> Tensor {
    let shape = a.shape().to_vec();
    let last = *shape.last().expect("log_softmax needs at least one axis");
    let data = contiguous(a);
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(last) {
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f32>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("log_softmax shape")
}

pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    a.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len)).as_standard_layout().into_owned()
}

/// Zero-pads `a` along `axis` so that it sits at `start` in a length-`total` axis.
pub fn embed(a: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let mut shape = a.shape().to_vec();
    let len = shape[axis];
    shape[axis] = total;
    let mut out = ArrayD::<f32>::zeros(IxDyn(&shape));
    out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len)).assign(a);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { batch: 2, channels: 3, height: 5, width: 6, kernel: 3, stride: 2, pad: 1 };
        let x = seq(&g.input_shape());
        let c = seq(&[g.col_rows(), g.col_cols()]).mapv(|v| (v * 0.37).sin());
        let lhs: f32 = (&im2col(&x, &g) * &c).sum();
        let rhs: f32 = (&x * &col2im(&c, &g)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let g = ConvGeom { batch: 1, channels: 2, height: 4, width: 4, kernel: 3, stride: 1, pad: 1 };
        let x = seq(&g.input_shape());
        let w = seq(&[g.col_cols(), 1]).mapv(|v| v * 0.1);
        let out = matmul(&im2col(&x, &g), &w);
        // direct sum for output pixel (1, 2)
        let mut direct = 0.0;
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (1 + ky as isize - 1, 2 + kx as isize - 1);
                    if (0..4).contains(&iy) && (0..4).contains(&ix) {
                        direct += x[[0, c, iy as usize, ix as usize]] * w[[(c * 3 + ky) * 3 + kx, 0]];
                    }
                }
            }
        }
        assert!((out[[4 + 2, 0]] - direct).abs() < 1e-5);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let a = seq(&[2, 3]);
        let l = log_softmax_last(&a);
        for r in 0..2 {
            let s: f32 = (0..3).map(|c| l[[r, c]].exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
