//! Record-and-replay tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to push gradients back into its inputs. Inputs always precede
//! outputs on the tape, so a single reverse sweep visits nodes in valid
//! topological order. Tapes are cheap and meant to live for one forward/
//! backward pass.

use super::ops;
use super::tensor::{ClassMask, Dims, Tensor};
use super::{NumError, Result, Scalar};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    GlobalAvgPool { x: Var },
    SoftmaxCe { x: Var, targets: Vec<ClassMask>, ignore: Option<u16>, count: usize },
    BceLogits { x: Var, targets: Vec<bool> },
    ChannelAbsPowMean { x: Var, p: T },
    L2Normalize { x: Var, norms: Vec<T> },
    MseTo { x: Var, target: Tensor<T> },
    SymKlTo { x: Var, other: Tensor<T> },
    Sum { x: Var },
    SumSq { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Mutable references to two distinct nodes of a slice.
fn pair_mut<T: Scalar>(nodes: &mut [Node<T>], a: usize, b: usize) -> (&mut Node<T>, &mut Node<T>) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register an input tensor. Gradients are tracked through it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a variable, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool_forward(self.value(x), k, stride)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::upsample_forward(self.value(x), out_h, out_w)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample { x }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::GlobalAvgPool { x }, needs)
    }

    /// Mean over non-ignored pixels of -log softmax at the target class.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[ClassMask],
        ignore: Option<u16>,
    ) -> Result<Var> {
        let (loss, count) = ops::softmax_ce_forward(self.value(logits), targets, ignore)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { x: logits, targets: targets.to_vec(), ignore, count },
            needs,
        ))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &[bool]) -> Result<Var> {
        let loss = ops::bce_logits_forward(self.value(logits), targets)?;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { x: logits, targets: targets.to_vec() }, needs))
    }

    /// Channel-flattened attention statistic (N,C,H,W) -> (N,1,H,W).
    pub fn channel_abs_pow_mean(&mut self, x: Var, p: T) -> Result<Var> {
        let out = ops::channel_abs_pow_mean_forward(self.value(x), p)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::ChannelAbsPowMean { x, p }, needs))
    }

    /// Divide each batch sample by its own L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (out, norms) = ops::l2_normalize_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::L2Normalize { x, norms }, needs)
    }

    /// Mean squared difference against a constant (detached) target.
    pub fn mse_to(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let loss = ops::mse_to_forward(self.value(x), &target)?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(loss), Op::MseTo { x, target }, needs))
    }

    /// Symmetric per-pixel KL divergence against constant (detached) logits.
    pub fn sym_kl_to(&mut self, logits: Var, other: Tensor<T>) -> Result<Var> {
        let loss = ops::sym_kl_forward(self.value(logits), &other)?;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SymKlTo { x: logits, other }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = ops::sum_all(self.value(x));
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Sum { x }, needs)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = ops::sum_sq_all(self.value(x));
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::SumSq { x }, needs)
    }

    /// Elementwise sum of two same-shape tensors (scalars included).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(NumError::Shape { op: "add", detail: format!("dims {} vs {}", da, db) });
        }
        let mut out = self.value(a).clone();
        out.clear_grad();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += *v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let mut out = self.value(x).clone();
        out.clear_grad();
        for o in out.data_mut() {
            *o *= k;
        }
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, k }, needs)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into the
    /// `grad` buffers of every tape tensor that needs them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.dims() != Dims::scalar() {
            return Err(NumError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {}", self.nodes[loss.0].value.dims()),
            });
        }
        self.nodes[loss.0].value.check_finite("loss")?;
        self.nodes[loss.0].value.grad_or_init()[0] = T::one();

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].value.grad().is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let gout = node.value.grad().expect("checked above");
            let out_dims = node.value.dims();

            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (stride, pad) = (*stride, *pad);
                    if before[x.0].needs_grad {
                        let (xn, wn) = pair_mut(before, x.0, w.0);
                        let xd = xn.value.dims();
                        ops::conv2d_backward_x(
                            xn.value.grad_or_init(),
                            xd,
                            wn.value.data(),
                            wn.value.dims(),
                            gout,
                            out_dims,
                            stride,
                            pad,
                        );
                    }
                    if before[w.0].needs_grad {
                        let (xn, wn) = pair_mut(before, x.0, w.0);
                        let (xd, wd) = (xn.value.dims(), wn.value.dims());
                        ops::conv2d_backward_w(
                            wn.value.grad_or_init(),
                            wd,
                            xn.value.data(),
                            xd,
                            gout,
                            out_dims,
                            stride,
                            pad,
                        );
                    }
                    if before[b.0].needs_grad {
                        ops::conv2d_backward_b(before[b.0].value.grad_or_init(), gout, out_dims);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if before[x.0].needs_grad {
                        ops::max_pool_backward(before[x.0].value.grad_or_init(), argmax, gout);
                    }
                }
                Op::Upsample { x } => {
                    if before[x.0].needs_grad {
                        let xd = before[x.0].value.dims();
                        ops::upsample_backward(before[x.0].value.grad_or_init(), xd, gout, out_dims);
                    }
                }
                Op::Relu { x } => {
                    if before[x.0].needs_grad {
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        ops::relu_backward(grad, data, gout);
                    }
                }
                Op::Sigmoid { x } => {
                    if before[x.0].needs_grad {
                        ops::sigmoid_backward(
                            before[x.0].value.grad_or_init(),
                            node.value.data(),
                            gout,
                        );
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if before[x.0].needs_grad {
                        let xd = before[x.0].value.dims();
                        ops::global_avg_pool_backward(before[x.0].value.grad_or_init(), xd, gout);
                    }
                }
                Op::SoftmaxCe { x, targets, ignore, count } => {
                    if before[x.0].needs_grad {
                        let d = before[x.0].value.dims();
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        ops::softmax_ce_backward(grad, data, d, targets, *ignore, *count, gout[0]);
                    }
                }
                Op::BceLogits { x, targets } => {
                    if before[x.0].needs_grad {
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        ops::bce_logits_backward(grad, data, targets, gout[0]);
                    }
                }
                Op::ChannelAbsPowMean { x, p } => {
                    if before[x.0].needs_grad {
                        let d = before[x.0].value.dims();
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        ops::channel_abs_pow_mean_backward(grad, data, d, *p, gout);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    if before[x.0].needs_grad {
                        let d = before[x.0].value.dims();
                        ops::l2_normalize_backward(
                            before[x.0].value.grad_or_init(),
                            node.value.data(),
                            d,
                            norms,
                            gout,
                        );
                    }
                }
                Op::MseTo { x, target } => {
                    if before[x.0].needs_grad {
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        ops::mse_to_backward(grad, data, target.data(), gout[0]);
                    }
                }
                Op::SymKlTo { x, other } => {
                    if before[x.0].needs_grad {
                        let d = before[x.0].value.dims();
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        ops::sym_kl_backward(grad, data, d, other.data(), gout[0]);
                    }
                }
                Op::Sum { x } => {
                    if before[x.0].needs_grad {
                        let g = gout[0];
                        for d in before[x.0].value.grad_or_init() {
                            *d += g;
                        }
                    }
                }
                Op::SumSq { x } => {
                    if before[x.0].needs_grad {
                        let g = gout[0] * T::from_f64_lossy(2.0);
                        let (data, grad) = before[x.0].value.data_and_grad_mut();
                        for (d, v) in grad.iter_mut().zip(data) {
                            *d += g * *v;
                        }
                    }
                }
                Op::Add { a, b } => {
                    if before[a.0].needs_grad {
                        for (d, g) in before[a.0].value.grad_or_init().iter_mut().zip(gout) {
                            *d += *g;
                        }
                    }
                    if before[b.0].needs_grad {
                        for (d, g) in before[b.0].value.grad_or_init().iter_mut().zip(gout) {
                            *d += *g;
                        }
                    }
                }
                Op::Scale { x, k } => {
                    if before[x.0].needs_grad {
                        let k = *k;
                        for (d, g) in before[x.0].value.grad_or_init().iter_mut().zip(gout) {
                            *d += k * *g;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
