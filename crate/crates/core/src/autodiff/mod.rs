//! Reverse-mode automatic differentiation with differentiable backward passes.
//!
//! Every node's value is computed eagerly and stored on a [`Tape`]. The
//! backward rules are written in terms of tape operations themselves, so the
//! gradients returned by [`Tape::grad`] are ordinary nodes: when
//! `create_graph` is set they can be differentiated again. The attention
//! regularizer depends on gradients of a logit with respect to feature maps,
//! and training it needs exactly that second differentiation.
//!
//! Node ids are assigned in creation order, which is a topological order.

mod kernels;

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use kernels::ConvGeom;

pub type Tensor = ArrayD<f32>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
    SumAxes(usize, Vec<usize>),
    BroadcastTo(usize, Vec<usize>),
    Relu(usize),
    Exp(usize),
    Recip(usize),
    Powf(usize, f32),
    MaxTrailing(usize, usize),
    MinTrailing(usize, usize),
    Clamp(usize, f32, f32),
    Narrow { input: usize, axis: usize, start: usize },
    Embed { input: usize, axis: usize, start: usize },
    Im2Col(usize, ConvGeom),
    Col2Im(usize, ConvGeom),
    LogSoftmax(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | BatchMatMul(a, b) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Permute(a, _)
            | Reshape(a, _)
            | SumAxes(a, _)
            | BroadcastTo(a, _)
            | Relu(a)
            | Exp(a)
            | Recip(a)
            | Powf(a, _)
            | MaxTrailing(a, _)
            | MinTrailing(a, _)
            | Clamp(a, _, _)
            | Im2Col(a, _)
            | Col2Im(a, _)
            | LogSoftmax(a) => [Some(a), None],
            Narrow { input, .. } | Embed { input, .. } => [Some(input), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Arena of recorded operations. One tape per forward/backward step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_passes: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of reverse traversals run on this tape so far.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a leaf. Whether it is differentiated is decided by the caller of [`Tape::grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f32) -> Var<'_> {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradients of `output` (a single-element node) with respect to each of `wrt`.
    ///
    /// Entries are `None` when the corresponding node does not influence
    /// `output`. With `create_graph` off the returned nodes are detached leaves.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Vec<Option<Var<'t>>> {
        assert!(std::ptr::eq(output.tape, self), "output recorded on another tape");
        assert_eq!(output.value().len(), 1, "grad requires a single-element output");
        self.backward_passes.set(self.backward_passes.get() + 1);

        let out = output.id;
        let lo = match wrt.iter().map(|w| w.id).min() {
            Some(lo) if lo <= out => lo,
            _ => return vec![None; wrt.len()],
        };
        let mut reach = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                reach[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lo..=out {
                if !reach[i] {
                    reach[i] = nodes[i].op.parents().iter().flatten().any(|&p| p >= lo && reach[p]);
                }
            }
        }
        if !reach[out] {
            return vec![None; wrt.len()];
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; out + 1];
        grads[out] = Some(self.leaf(ArrayD::ones(output.value().raw_dim())));
        for i in (lo..=out).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            let node = Var { tape: self, id: i };
            let needs = |p: usize| p >= lo && reach[p];
            for (p, pg) in backward_rule(node, &op, g, &needs) {
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc + pg,
                    None => pg,
                });
            }
        }
        wrt.iter()
            .map(|w| {
                let g = if w.id <= out { grads[w.id] } else { None };
                g.map(|g| if create_graph { g } else { g.detach() })
            })
            .collect()
    }
}

fn backward_rule<'t>(node: Var<'t>, op: &Op, g: Var<'t>, needs: &dyn Fn(usize) -> bool) -> Vec<(usize, Var<'t>)> {
    let tape = node.tape;
    let v = |id: usize| Var { tape, id };
    let mut out = Vec::with_capacity(2);
    let mut emit = |p: usize, f: &dyn Fn() -> Var<'t>| {
        if needs(p) {
            out.push((p, f()));
        }
    };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, &|| g);
            emit(*b, &|| g);
        }
        Op::Sub(a, b) => {
            emit(*a, &|| g);
            emit(*b, &|| -g);
        }
        Op::Mul(a, b) => {
            emit(*a, &|| g * v(*b));
            emit(*b, &|| g * v(*a));
        }
        Op::Neg(a) => emit(*a, &|| -g),
        Op::Scale(a, s) => emit(*a, &|| g.scale(*s)),
        Op::AddScalar(a) => emit(*a, &|| g),
        Op::MatMul(a, b) => {
            emit(*a, &|| g.matmul(v(*b).t()));
            emit(*b, &|| v(*a).t().matmul(g));
        }
        Op::BatchMatMul(a, b) => {
            emit(*a, &|| g.bmm(v(*b).permute(&[0, 2, 1])));
            emit(*b, &|| v(*a).permute(&[0, 2, 1]).bmm(g));
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            emit(*a, &|| g.permute(&inv));
        }
        Op::Reshape(a, in_shape) => emit(*a, &|| g.reshape(in_shape)),
        Op::SumAxes(a, in_shape) => emit(*a, &|| g.broadcast_to(in_shape)),
        Op::BroadcastTo(a, in_shape) => emit(*a, &|| g.sum_to(in_shape)),
        Op::Relu(a) => emit(*a, &|| g * tape.leaf(v(*a).value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))),
        Op::Exp(a) => emit(*a, &|| g * node),
        Op::Recip(a) => emit(*a, &|| -(g * node * node)),
        Op::Powf(a, p) => emit(*a, &|| g * v(*a).powf(p - 1.0).scale(*p)),
        Op::MaxTrailing(a, from) | Op::MinTrailing(a, from) => emit(*a, &|| {
            let mask = kernels::first_match_mask(&v(*a).value(), &node.value(), *from);
            g.broadcast_to(v(*a).value().shape()) * tape.leaf(mask)
        }),
        Op::Clamp(a, lo, hi) => emit(*a, &|| g * tape.leaf(v(*a).value().mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }))),
        Op::Narrow { input, axis, start } => {
            let total = v(*input).value().shape()[*axis];
            emit(*input, &|| g.embed(*axis, *start, total))
        }
        Op::Embed { input, axis, start } => {
            let len = v(*input).value().shape()[*axis];
            emit(*input, &|| g.narrow(*axis, *start, len))
        }
        Op::Im2Col(a, geom) => emit(*a, &|| g.col2im(geom)),
        Op::Col2Im(a, geom) => emit(*a, &|| g.im2col(geom)),
        Op::LogSoftmax(a) => emit(*a, &|| {
            let last = node.ndim() - 1;
            g - node.exp() * g.sum_axes(&[last]).broadcast_to(&node.shape())
        }),
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.ndim()
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(value, op)
    }

    fn binary(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "operands recorded on different tapes");
        let value = f(&self.value(), &other.value());
        self.tape.push(value, op)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
    }

    /// A new leaf holding the same value, cut off from this node's history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push_rc(self.value(), Op::Leaf)
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        self.unary(|a| a * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f32) -> Var<'t> {
        self.unary(|a| a + s, Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, kernels::matmul, Op::MatMul(self.id, other.id))
    }

    /// Batched product of `(N, M, K)` and `(N, K, P)`.
    pub fn bmm(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, kernels::batch_matmul, Op::BatchMatMul(self.id, other.id))
    }

    /// Transpose of a 2-D node.
    pub fn t(&self) -> Var<'t> {
        self.permute(&[1, 0])
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'t> {
        assert_eq!(perm.len(), self.ndim(), "permutation rank mismatch");
        self.unary(|a| kernels::permute(a, perm), Op::Permute(self.id, perm.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let in_shape = self.shape();
        assert_eq!(in_shape.iter().product::<usize>(), shape.iter().product::<usize>(), "reshape {in_shape:?} -> {shape:?}");
        self.unary(|a| kernels::reshape(a, shape), Op::Reshape(self.id, in_shape))
    }

    /// Sum over `axes`, keeping them as length-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<'t> {
        let in_shape = self.shape();
        self.unary(|a| kernels::sum_axes(a, axes), Op::SumAxes(self.id, in_shape))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f32)
    }

    /// Sum of all elements as a shape-`[1]` node.
    pub fn sum_all(&self) -> Var<'t> {
        let n = self.value().len();
        self.reshape(&[n]).sum_axes(&[0])
    }

    /// Broadcasts size-1 axes up to `shape`; ranks must match.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'t> {
        let in_shape = self.shape();
        if in_shape == shape {
            return *self;
        }
        assert_eq!(in_shape.len(), shape.len(), "broadcast_to needs equal rank");
        self.unary(|a| kernels::broadcast_to(a, shape), Op::BroadcastTo(self.id, in_shape))
    }

    /// Sums broadcast axes back down to `shape` (the adjoint of [`Var::broadcast_to`]).
    pub fn sum_to(&self, shape: &[usize]) -> Var<'t> {
        let cur = self.shape();
        let axes: Vec<usize> = (0..cur.len()).filter(|&i| shape[i] == 1 && cur[i] != 1).collect();
        if axes.is_empty() {
            *self
        } else {
            self.sum_axes(&axes)
        }
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f32::exp), Op::Exp(self.id))
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| 1.0 / x), Op::Recip(self.id))
    }

    pub fn powf(&self, p: f32) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    /// Maximum over all axes from `from` onward, kept as length-1 dims.
    pub fn max_trailing(&self, from: usize) -> Var<'t> {
        self.unary(|a| kernels::reduce_trailing(a, from, f32::max), Op::MaxTrailing(self.id, from))
    }

    pub fn min_trailing(&self, from: usize) -> Var<'t> {
        self.unary(|a| kernels::reduce_trailing(a, from, f32::min), Op::MinTrailing(self.id, from))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        self.unary(|a| kernels::narrow(a, axis, start, len), Op::Narrow { input: self.id, axis, start })
    }

    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Var<'t> {
        self.unary(|a| kernels::embed(a, axis, start, total), Op::Embed { input: self.id, axis, start })
    }

    /// Concatenation along `axis`.
    pub fn concat(&self, other: Var<'t>, axis: usize) -> Var<'t> {
        let (la, lb) = (self.shape()[axis], other.shape()[axis]);
        self.embed(axis, 0, la + lb) + other.embed(axis, la, la + lb)
    }

    pub fn im2col(&self, geom: &ConvGeom) -> Var<'t> {
        assert_eq!(self.shape(), geom.input_shape(), "im2col input shape");
        self.unary(|a| kernels::im2col(a, geom), Op::Im2Col(self.id, *geom))
    }

    pub fn col2im(&self, geom: &ConvGeom) -> Var<'t> {
        self.unary(|a| kernels::col2im(a, geom), Op::Col2Im(self.id, *geom))
    }

    pub fn log_softmax(&self) -> Var<'t> {
        self.unary(kernels::log_softmax_last, Op::LogSoftmax(self.id))
    }

    pub fn softmax(&self) -> Var<'t> {
        self.log_softmax().exp()
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "add");
        self.binary(rhs, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "sub");
        self.binary(rhs, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(&rhs, "mul");
        self.binary(rhs, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(|a| -a, Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t(v: ndarray::ArrayD<f32>) -> Tensor {
        v
    }

    // Central finite differences in f64 of a scalar function of one tensor input.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let h = 1e-2f32;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.as_slice_mut().unwrap()[i] += h;
                xm.as_slice_mut().unwrap()[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h as f64)
            })
            .collect()
    }

    fn check_grad(build: &dyn for<'a> Fn(Var<'a>) -> Var<'a>, x: Tensor, tol: f64) {
        let f = |xv: &Tensor| {
            let tape = Tape::new();
            let out = build(tape.leaf(xv.clone()));
            out.value()[[0]] as f64
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = build(xv);
        let g = tape.grad(out, &[xv], false)[0].unwrap().value();
        let num = numeric_grad(&f, &x);
        for (a, n) in g.iter().zip(&num) {
            assert!((*a as f64 - n).abs() < tol * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample(shape: &[usize], seed: f32) -> Tensor {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|i| ((i as f32 + seed) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        check_grad(&|x| (x * x).sum_all(), sample(&[2, 3], 0.0), 1e-2);
        check_grad(&|x| x.exp().mean_axes(&[0, 1]).reshape(&[1]), sample(&[2, 3], 1.0), 1e-2);
        check_grad(&|x| x.add_scalar(3.0).recip().sum_all(), sample(&[4], 2.0), 1e-2);
        check_grad(&|x| x.add_scalar(3.0).powf(-0.5).sum_all(), sample(&[4], 3.0), 1e-2);
        check_grad(&|x| (x.max_trailing(1) - x.min_trailing(1)).sum_all(), sample(&[2, 5], 4.0), 1e-2);
    }

    #[test]
    fn matmul_and_layout_grads() {
        let w = sample(&[3, 4], 5.0);
        check_grad(
            &move |x| {
                let wv = x.tape().leaf(w.clone());
                x.matmul(wv).permute(&[1, 0]).reshape(&[8]).relu().sum_all()
            },
            sample(&[2, 3], 6.0),
            1e-2,
        );
        let b = sample(&[2, 3, 2], 7.0);
        check_grad(&move |x| x.bmm(x.tape().leaf(b.clone())).softmax().scale(2.0).narrow(1, 1, 1).sum_all(), sample(&[2, 2, 3], 8.0), 1e-2);
    }

    #[test]
    fn conv_lowering_grad() {
        let geom = ConvGeom { batch: 1, channels: 2, height: 4, width: 4, kernel: 3, stride: 2, pad: 1 };
        let w = sample(&[18, 3], 9.0);
        check_grad(
            &move |x| {
                let wv = x.tape().leaf(w.clone());
                let y = x.im2col(&geom).matmul(wv);
                (y * y).sum_all()
            },
            sample(&geom.input_shape(), 10.0),
            2e-2,
        );
    }

    #[test]
    fn second_order_through_gradient() {
        // f(x) = sum(x^3); df/dx = 3x^2; d/dx sum(3x^2 * c) = 6 x c
        let tape = Tape::new();
        let x = tape.leaf(t(array![1.0f32, -2.0, 0.5].into_dyn()));
        let f = (x * x * x).sum_all();
        let dx = tape.grad(f, &[x], true)[0].unwrap();
        let c = tape.leaf(t(array![1.0f32, 2.0, 3.0].into_dyn()));
        let h = (dx * c).sum_all();
        let ddx = tape.grad(h, &[x], false)[0].unwrap().value();
        let expect = [6.0, -24.0, 9.0];
        for (a, e) in ddx.iter().zip(expect) {
            assert!((a - e).abs() < 1e-5);
        }
        assert_eq!(tape.backward_passes(), 2);
    }

    #[test]
    fn unreachable_wrt_is_none() {
        let tape = Tape::new();
        let x = tape.leaf(t(array![1.0f32].into_dyn()));
        let y = tape.leaf(t(array![2.0f32].into_dyn()));
        let out = (x * x).sum_all();
        let g = tape.grad(out, &[x, y], false);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }

    #[test]
    fn detached_grads_do_not_flow_again() {
        let tape = Tape::new();
        let x = tape.leaf(t(array![2.0f32].into_dyn()));
        let f = (x * x).sum_all();
        let dx = tape.grad(f, &[x], false)[0].unwrap();
        let g = tape.grad(dx.sum_all(), &[x], false);
        assert!(g[0].is_none());
    }
}
