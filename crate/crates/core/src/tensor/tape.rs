use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels as k;
use super::{Int3, Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { input: usize, weight: usize, bias: usize, stride: Int3, pad: Int3 },
    MaxPool3d { input: usize, argmax: Vec<usize> },
    Dense { input: usize, weight: usize, bias: usize },
    Relu { input: usize },
    Sigmoid { input: usize },
    GlobalAvgPool { input: usize },
    ChannelScale { input: usize, gates: usize },
    LogSumExp { input: usize, subset: Vec<usize> },
    Reshape { input: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { input: usize },
    Scale { input: usize, factor: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Single-owner record of a forward computation.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. Values are immutable once recorded.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value from {op:?}");
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Record an input. Gradients are kept only for `requires_grad` leaves
    /// and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor<T>>> {
        Ok(self.nodes[self.idx(v)?].grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Result<Option<Tensor<T>>> {
        let i = self.idx(v)?;
        Ok(self.nodes[i].grad.take())
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: Int3, pad: Int3) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let y = k::conv3d(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value, stride, pad)?;
        Ok(self.push(y, Op::Conv3d { input: i, weight: w, bias: b, stride, pad }, &[i, w, b]))
    }

    pub fn maxpool3d(&mut self, input: Var, window: Int3, stride: Int3) -> Result<Var> {
        let i = self.idx(input)?;
        let (y, argmax) = k::maxpool3d(&self.nodes[i].value, window, stride)?;
        Ok(self.push(y, Op::MaxPool3d { input: i, argmax }, &[i]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let y = k::dense(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value)?;
        Ok(self.push(y, Op::Dense { input: i, weight: w, bias: b }, &[i, w, b]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let y = k::relu(&self.nodes[i].value);
        Ok(self.push(y, Op::Relu { input: i }, &[i]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let y = k::sigmoid(&self.nodes[i].value);
        Ok(self.push(y, Op::Sigmoid { input: i }, &[i]))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let y = k::global_avg_pool(&self.nodes[i].value)?;
        Ok(self.push(y, Op::GlobalAvgPool { input: i }, &[i]))
    }

    pub fn channel_scale(&mut self, input: Var, gates: Var) -> Result<Var> {
        let (i, g) = (self.idx(input)?, self.idx(gates)?);
        let y = k::channel_scale(&self.nodes[i].value, &self.nodes[g].value)?;
        Ok(self.push(y, Op::ChannelScale { input: i, gates: g }, &[i, g]))
    }

    pub fn logsumexp(&mut self, logits: Var, subset: &[usize]) -> Result<Var> {
        let i = self.idx(logits)?;
        let y = k::logsumexp(&self.nodes[i].value, subset)?;
        Ok(self.push(y, Op::LogSumExp { input: i, subset: subset.to_vec() }, &[i]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(input)?;
        let y = self.nodes[i].value.clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { input: i }, &[i]))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(TensorError::Argument {
                op,
                msg: format!("shapes {sa:?} and {sb:?} differ"),
            });
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", a, b)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let y = Tensor::from_parts(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect());
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let y = Tensor::from_parts(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect());
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let y = Tensor::scalar(self.nodes[i].value.sum());
        Ok(self.push(y, Op::Sum { input: i }, &[i]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.idx(input)?;
        let f = T::of(factor);
        let y = self.nodes[i].value.map(|v| v * f);
        Ok(self.push(y, Op::Scale { input: i, factor }, &[i]))
    }

    /// Arithmetic mean of all elements, as a scalar.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input)?.len();
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Back-propagate from a single-element loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let i = self.idx(loss)?;
        let shape = self.nodes[i].value.shape().to_vec();
        if self.nodes[i].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_seeded(loss, Tensor::ones(&shape))
    }

    /// Back-propagate an arbitrary upstream gradient from `output`.
    pub fn backward_seeded(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        let root = self.idx(output)?;
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if seed.shape() != self.nodes[root].value.shape() {
            return Err(TensorError::Argument {
                op: "backward",
                msg: format!("seed shape {:?} != output shape {:?}", seed.shape(), self.nodes[root].value.shape()),
            });
        }
        self.backward_done = true;
        self.nodes[root].grad = Some(seed);
        for n in (0..=root).rev() {
            if !self.nodes[n].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[n].grad.take() else { continue };
            for (target, contribution) in self.input_grads(n, &g)? {
                if self.nodes[target].requires_grad {
                    accumulate(&mut self.nodes[target].grad, contribution);
                }
            }
            self.nodes[n].grad = Some(g);
        }
        Ok(())
    }

    /// Clear all gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
        self.backward_done = false;
    }

    fn input_grads(&self, n: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        Ok(match &self.nodes[n].op {
            Op::Leaf => vec![],
            Op::Conv3d { input, weight, bias, stride, pad } => {
                let (gi, gw, gb) = k::conv3d_backward(val(*input), val(*weight), g, *stride, *pad, needs(*input))?;
                let mut out = vec![(*weight, gw), (*bias, gb)];
                out.extend(gi.map(|gi| (*input, gi)));
                out
            }
            Op::MaxPool3d { input, argmax } => {
                vec![(*input, k::maxpool3d_backward(val(*input).shape(), argmax, g))]
            }
            Op::Dense { input, weight, bias } => {
                let (gi, gw, gb) = k::dense_backward(val(*input), val(*weight), g)?;
                vec![(*input, gi), (*weight, gw), (*bias, gb)]
            }
            Op::Relu { input } => {
                let x = val(*input);
                let d = x.data().iter().zip(g.data()).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), d))]
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[n].value;
                let d = y.data().iter().zip(g.data()).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                vec![(*input, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::GlobalAvgPool { input } => vec![(*input, k::global_avg_pool_backward(val(*input).shape(), g))],
            Op::ChannelScale { input, gates } => {
                let (gi, gg) = k::channel_scale_backward(val(*input), val(*gates), g)?;
                vec![(*input, gi), (*gates, gg)]
            }
            Op::LogSumExp { input, subset } => {
                vec![(*input, k::logsumexp_backward(val(*input), subset, &self.nodes[n].value, g))]
            }
            Op::Reshape { input } => vec![(*input, g.clone().reshape(val(*input).shape())?)],
            Op::Sub { a, b } => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
                out
            }
            Op::Mul { a, b } => {
                let prod = |x: &Tensor<T>| {
                    Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(g.data()).map(|(&x, &g)| x * g).collect())
                };
                vec![(*a, prod(val(*b))), (*b, prod(val(*a)))]
            }
            Op::Sum { input } => vec![(*input, Tensor::full(val(*input).shape(), g.item()))],
            Op::Scale { input, factor } => {
                let f = T::of(*factor);
                vec![(*input, g.map(|v| v * f))]
            }
        })
    }

    /// Fingerprint of every branch decision taken in the forward pass:
    /// ReLU signs and max-pool winners. Two forwards with equal patterns
    /// are on the same smooth piece of the network function.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[*input].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool3d { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[3]), true);
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.backward(s), Err(TensorError::BackwardAlreadyRun));
        t.reset_grads();
        t.backward(s).unwrap();

        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::ones(&[3]), true);
        assert_eq!(t.sum(y), Err(TensorError::ForeignVar));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[2]), true);
        let c = t.leaf(Tensor::full(&[2], 3.0), false);
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap().data(), &[3.0, 3.0]);
        assert!(t.grad(c).unwrap().is_none());
    }
}
