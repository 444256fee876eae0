//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is expressed with the same differentiable ops used in the
//! forward pass, so gradients computed with `create_graph = true` can themselves be
//! differentiated. The gradient penalty relies on this (a gradient of a gradient norm).

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::{ConvGeom, Float, Tensor};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static RECTIFIER_SIGNS: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns, alongside its result, whether each rectifier input it
/// evaluated on this thread was positive, in evaluation order. Two evaluations with
/// equal patterns lie on the same linear piece of every rectifier, which is what a
/// finite-difference check needs to know.
pub fn rectifier_signs<R>(f: impl FnOnce() -> R) -> (R, Vec<bool>) {
    let outer = RECTIFIER_SIGNS.with(|s| s.replace(Some(Vec::new())));
    let out = f();
    let signs = RECTIFIER_SIGNS.with(|s| s.replace(outer)).unwrap_or_default();
    (out, signs)
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

enum Op<T> {
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddScalar,
    MulConst(Rc<Tensor<T>>),
    Powf(T),
    Exp,
    Log,
    Tanh,
    SumAll,
    BroadcastTo,
    SumTo,
    Reshape,
    MatMul,
    Transpose,
    Conv2d(ConvGeom),
    ConvTranspose(ConvGeom),
    ConvWeightGrad(ConvGeom),
    Upsample2x,
    SumPool2x,
    ConcatChannels,
    SliceChannels { start: usize },
    PadChannels { start: usize },
}

struct Node<T> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
    parents: Vec<Var<T>>,
}

/// A tensor-valued node in the computation graph. Cloning is cheap.
pub struct Var<T>(Rc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl<T: Float> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self(Rc::new(Node { id: next_id(), value, requires_grad, op: None, parents: Vec::new() }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that gradients are computed for.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor<T>, op: Op<T>, parents: Vec<Var<T>>) -> Self {
        let record = grad_enabled() && parents.iter().any(Var::requires_grad);
        if record {
            Self(Rc::new(Node { id: next_id(), value, requires_grad: true, op: Some(op), parents }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, rhs: &Self) -> Self {
        let v = self.value().zip_map(rhs.value(), |a, b| a + b);
        Self::from_op(v, Op::Add, vec![self.clone(), rhs.clone()])
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        let v = self.value().zip_map(rhs.value(), |a, b| a - b);
        Self::from_op(v, Op::Sub, vec![self.clone(), rhs.clone()])
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let v = self.value().zip_map(rhs.value(), |a, b| a * b);
        Self::from_op(v, Op::Mul, vec![self.clone(), rhs.clone()])
    }

    pub fn neg(&self) -> Self {
        Self::from_op(self.value().map(|a| -a), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_op(self.value().map(|a| a * s), Op::Scale(s), vec![self.clone()])
    }

    pub fn add_scalar(&self, s: T) -> Self {
        Self::from_op(self.value().map(|a| a + s), Op::AddScalar, vec![self.clone()])
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&self, c: Rc<Tensor<T>>) -> Self {
        let v = self.value().zip_map(&c, |a, b| a * b);
        Self::from_op(v, Op::MulConst(c), vec![self.clone()])
    }

    pub fn powf(&self, p: T) -> Self {
        Self::from_op(self.value().map(|a| a.powf(p)), Op::Powf(p), vec![self.clone()])
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    pub fn exp(&self) -> Self {
        Self::from_op(self.value().map(T::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Self {
        Self::from_op(self.value().map(T::ln), Op::Log, vec![self.clone()])
    }

    pub fn tanh(&self) -> Self {
        Self::from_op(self.value().map(T::tanh), Op::Tanh, vec![self.clone()])
    }

    /// Leaky rectifier; `slope = 0` gives the plain ReLU.
    pub fn leaky_relu(&self, slope: T) -> Self {
        RECTIFIER_SIGNS.with(|s| {
            if let Some(signs) = s.borrow_mut().as_mut() {
                signs.extend(self.value().data().iter().map(|&a| a > T::zero()));
            }
        });
        self.rectify(slope)
    }

    fn rectify(&self, slope: T) -> Self {
        let mask = self.value().map(|a| if a > T::zero() { T::one() } else { slope });
        self.mul_const(Rc::new(mask))
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn abs(&self) -> Self {
        let sign = self.value().map(|a| if a < T::zero() { -T::one() } else { T::one() });
        self.mul_const(Rc::new(sign))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Self {
        self.rectify(T::zero()).add(&self.abs().neg().exp().add_scalar(T::one()).ln())
    }

    // ---- reductions and shape --------------------------------------------

    pub fn sum(&self) -> Self {
        Self::from_op(Tensor::scalar(self.value().sum()), Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Self {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        Self::from_op(self.value().broadcast_to(shape), Op::BroadcastTo, vec![self.clone()])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        Self::from_op(self.value().sum_to(shape), Op::SumTo, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        Self::from_op(self.value().clone().reshape(shape), Op::Reshape, vec![self.clone()])
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        Self::from_op(self.value().matmul(rhs.value()), Op::MatMul, vec![self.clone(), rhs.clone()])
    }

    pub fn transpose(&self) -> Self {
        Self::from_op(self.value().transpose2(), Op::Transpose, vec![self.clone()])
    }

    // ---- convolution and resampling ----------------------------------------

    pub fn conv2d(&self, weight: &Self, geom: ConvGeom) -> Self {
        let v = self.value().conv2d(weight.value(), geom);
        Self::from_op(v, Op::Conv2d(geom), vec![self.clone(), weight.clone()])
    }

    /// Transposed convolution producing spatial extent `(h, w)`.
    pub fn conv2d_transpose(&self, weight: &Self, geom: ConvGeom, h: usize, w: usize) -> Self {
        let v = self.value().conv2d_transpose(weight.value(), geom, h, w);
        Self::from_op(v, Op::ConvTranspose(geom), vec![self.clone(), weight.clone()])
    }

    pub fn conv2d_weight_grad(&self, grad: &Self, geom: ConvGeom) -> Self {
        let v = self.value().conv2d_weight_grad(grad.value(), geom);
        Self::from_op(v, Op::ConvWeightGrad(geom), vec![self.clone(), grad.clone()])
    }

    pub fn upsample2x(&self) -> Self {
        Self::from_op(self.value().upsample2x(), Op::Upsample2x, vec![self.clone()])
    }

    pub fn sum_pool2x(&self) -> Self {
        Self::from_op(self.value().sum_pool2x(), Op::SumPool2x, vec![self.clone()])
    }

    pub fn concat_channels(parts: &[Self]) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        Self::from_op(Tensor::concat_channels(&values), Op::ConcatChannels, parts.to_vec())
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let v = self.value().slice_channels(start, len);
        Self::from_op(v, Op::SliceChannels { start }, vec![self.clone()])
    }

    pub fn pad_channels(&self, start: usize, total: usize) -> Self {
        let v = self.value().pad_channels(start, total);
        Self::from_op(v, Op::PadChannels { start }, vec![self.clone()])
    }

    // ---- composites ------------------------------------------------------

    /// Adds a per-channel vector `[C]` to a `[N, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Self) -> Self {
        let mut shape = vec![1; self.shape().len()];
        shape[1] = self.shape()[1];
        self.add(&bias.reshape(&shape).broadcast_to(self.shape()))
    }

    /// Multiplies a `[N, C, ...]` tensor by a per-channel vector `[C]`.
    pub fn mul_channel(&self, scale: &Self) -> Self {
        let mut shape = vec![1; self.shape().len()];
        shape[1] = self.shape()[1];
        self.mul(&scale.reshape(&shape).broadcast_to(self.shape()))
    }

    /// Numerically stabilised log-softmax over axis 1 of `[N, C, H, W]`.
    pub fn log_softmax_channels(&self) -> Self {
        let (n, c, h, w) = self.value().dims4();
        let x = self.value().data();
        let mut max = vec![T::neg_infinity(); n * h * w];
        for b in 0..n {
            for k in 0..c {
                for p in 0..h * w {
                    let v = x[(b * c + k) * h * w + p];
                    let m = &mut max[b * h * w + p];
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
        let shift = Var::constant(Tensor::new(vec![n, 1, h, w], max)).broadcast_to(self.shape());
        let centred = self.sub(&shift);
        let lse = centred.exp().sum_to(&[n, 1, h, w]).ln();
        centred.sub(&lse.broadcast_to(self.shape()))
    }
}

fn backward_rule<T: Float>(node: &Var<T>, g: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
    let n = &node.0;
    let p = &n.parents;
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let op = n.op.as_ref().expect("backward on leaf");
    match op {
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), want(1).then(|| g.neg())],
        Op::Mul => vec![want(0).then(|| g.mul(&p[1])), want(1).then(|| g.mul(&p[0]))],
        Op::Neg => vec![Some(g.neg())],
        Op::Scale(s) => vec![Some(g.scale(*s))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MulConst(c) => vec![Some(g.mul_const(Rc::clone(c)))],
        Op::Powf(e) => vec![Some(g.mul(&p[0].powf(*e - T::one()).scale(*e)))],
        Op::Exp => vec![Some(g.mul(node))],
        Op::Log => vec![Some(g.mul(&p[0].powf(-T::one())))],
        Op::Tanh => vec![Some(g.mul(&node.square().neg().add_scalar(T::one())))],
        Op::SumAll | Op::SumTo => vec![Some(g.reshape_or_broadcast(p[0].shape()))],
        Op::BroadcastTo => vec![Some(g.sum_to(p[0].shape()))],
        Op::Reshape => vec![Some(g.reshape(p[0].shape()))],
        Op::MatMul => vec![
            want(0).then(|| g.matmul(&p[1].transpose())),
            want(1).then(|| p[0].transpose().matmul(g)),
        ],
        Op::Transpose => vec![Some(g.transpose())],
        Op::Conv2d(geom) => {
            let (_, _, h, w) = p[0].value().dims4();
            vec![
                want(0).then(|| g.conv2d_transpose(&p[1], *geom, h, w)),
                want(1).then(|| p[0].conv2d_weight_grad(g, *geom)),
            ]
        }
        Op::ConvTranspose(geom) => vec![
            want(0).then(|| g.conv2d(&p[1], *geom)),
            want(1).then(|| g.conv2d_weight_grad(&p[0], *geom)),
        ],
        Op::ConvWeightGrad(geom) => {
            let (_, _, h, w) = p[0].value().dims4();
            vec![
                want(0).then(|| p[1].conv2d_transpose(g, *geom, h, w)),
                want(1).then(|| p[0].conv2d(g, *geom)),
            ]
        }
        Op::Upsample2x => vec![Some(g.sum_pool2x())],
        Op::SumPool2x => vec![Some(g.upsample2x())],
        Op::ConcatChannels => {
            let mut start = 0;
            p.iter()
                .enumerate()
                .map(|(i, part)| {
                    let len = part.shape()[1];
                    let out = want(i).then(|| g.slice_channels(start, len));
                    start += len;
                    out
                })
                .collect()
        }
        Op::SliceChannels { start } => vec![Some(g.pad_channels(*start, p[0].shape()[1]))],
        Op::PadChannels { start } => vec![Some(g.slice_channels(*start, p[0].shape()[1]))],
    }
}

impl<T: Float> Var<T> {
    fn reshape_or_broadcast(&self, shape: &[usize]) -> Self {
        if self.shape().len() == shape.len() {
            self.broadcast_to(shape)
        } else {
            // scalar gradient of a full reduction
            self.reshape(&vec![1; shape.len()]).broadcast_to(shape)
        }
    }
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// Inputs the output does not depend on receive zeros. With `create_graph` the
/// returned gradients are themselves differentiable.
pub fn grad<T: Float>(output: &Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
    let _guard = (!create_graph).then(NoGradGuard::new);

    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.0.id) {
            continue;
        }
        stack.extend(v.0.parents.iter().cloned());
        order.push(v);
    }
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let wanted: HashSet<u64> = inputs.iter().map(|v| v.0.id).collect();
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(output.0.id, Var::constant(Tensor::full(output.shape(), T::one())));

    for node in &order {
        let Some(g) = (if wanted.contains(&node.0.id) {
            grads.get(&node.0.id).cloned()
        } else {
            grads.remove(&node.0.id)
        }) else {
            continue;
        };
        if node.0.op.is_none() {
            continue;
        }
        let needs: Vec<bool> = node.0.parents.iter().map(Var::requires_grad).collect();
        let parent_grads = backward_rule(node, &g, &needs);
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape());
            let acc = match grads.remove(&parent.0.id) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.0.id, acc);
        }
    }

    inputs
        .iter()
        .map(|v| {
            grads
                .get(&v.0.id)
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d f / d x for every element of `x`.
    fn check_grad(f: impl Fn(&Var<f64>) -> Var<f64>, x0: Tensor<f64>, tol: f64) {
        let x = Var::param(x0.clone());
        let analytic = grad(&f(&x), &[&x], false).remove(0);
        let h = 1e-5;
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fp = f(&Var::constant(plus)).item();
            let fm = f(&Var::constant(minus)).item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.value().data()[i];
            assert!(
                (a - numeric).abs() <= tol * (1.0 + numeric.abs()),
                "element {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&[2, 3], &mut rng);
        check_grad(|x| x.tanh().mul(x).sum(), x0.clone(), 1e-6);
        check_grad(|x| x.softplus().sum(), x0.clone(), 1e-6);
        check_grad(|x| x.exp().add_scalar(1.0).ln().powf(1.5).sum(), x0.clone(), 1e-6);
        check_grad(|x| x.leaky_relu(0.2).square().mean(), x0, 1e-6);
    }

    #[test]
    fn conv_and_structure_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Var::constant(rand_tensor(&[3, 2, 3, 3], &mut rng));
        let x0 = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let wt = Var::constant(rand_tensor(&[3, 2, 4, 4], &mut rng));
        check_grad(
            |x| {
                let y = x.conv2d(&w, ConvGeom::new(3, 1, 1)).upsample2x();
                let z = y.conv2d_transpose(&wt, ConvGeom::new(4, 2, 1), 16, 16);
                let cat = Var::concat_channels(&[z.clone(), x.upsample2x().upsample2x()]);
                cat.log_softmax_channels().slice_channels(1, 2).square().sum()
            },
            x0,
            1e-5,
        );
    }

    #[test]
    fn second_order_through_conv_matches_finite_differences() {
        // f(w) = || d/dx sum(lrelu(conv(x, w))) ||^2 ; differentiate w.r.t. w.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let w0 = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let geom = ConvGeom::new(4, 2, 1);
        let f = |w: &Var<f64>| {
            let x = Var::param(x0.clone());
            let out = x.conv2d(w, geom).leaky_relu(0.2).sum();
            let gx = grad(&out, &[&x], true).remove(0);
            gx.square().sum()
        };
        check_grad(f, w0, 1e-6);
    }

    #[test]
    fn no_grad_guard_stops_recording() {
        let x = Var::param(Tensor::scalar(2.0f64));
        let y = {
            let _g = NoGradGuard::new();
            x.mul(&x)
        };
        assert!(!y.requires_grad());
        assert!(x.mul(&x).requires_grad());
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let x = Var::param(Tensor::scalar(2.0f64));
        let z = Var::param(Tensor::zeros(&[3]));
        let g = grad(&x.square().sum(), &[&x, &z], false);
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1].value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rectifier_signs_cover_only_rectifiers() {
        let x = Var::constant(Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]));
        let (y, signs) = rectifier_signs(|| x.relu().add(&x.softplus()).sum().item());
        assert_eq!(signs, [false, false, true]);
        assert!(y > 2.0);
        let (_, outer) = rectifier_signs(|| {
            let (_, inner) = rectifier_signs(|| x.leaky_relu(0.2));
            assert_eq!(inner.len(), 3);
            x.scale(-1.0).relu()
        });
        assert_eq!(outer, [true, false, false]);
        assert!(rectifier_signs(|| x.relu()).1.len() == 3 && rectifier_signs(|| ()).1.is_empty());
    }
}
