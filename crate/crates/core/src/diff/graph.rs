use super::{ops, DiffError, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape can record, with its attributes.
///
/// Spatial ops (`Pad`, `UpsampleNearest`, `InstanceNorm`, `GlobalAvgPool`)
/// act on the last two axes. `Softmax` normalizes the last axis. `Add`, `Sub`
/// and `Mul` broadcast with trailing-axis alignment.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Transpose,
    /// inputs: `[N,C,H,W]` image, `[O,C,kh,kw]` kernel, optional `[O]` bias
    Conv2d { stride: usize, pad: usize },
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Atanh,
    Softmax,
    Square,
    Abs,
    Log,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    Concat { axis: usize },
    Pad { pad: usize },
    UpsampleNearest { factor: usize },
    InstanceNorm { eps: f64 },
    Reshape(Vec<usize>),
    GlobalAvgPool,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Atanh => "atanh",
            OpKind::Softmax => "softmax",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concat",
            OpKind::Pad { .. } => "pad",
            OpKind::UpsampleNearest { .. } => "upsample_nearest",
            OpKind::InstanceNorm { .. } => "instance_norm",
            OpKind::Reshape(_) => "reshape",
            OpKind::GlobalAvgPool => "global_avg_pool",
        }
    }
}

struct Node<S> {
    op: Option<OpKind>,
    inputs: Vec<Var>,
    value: Tensor<S>,
    requires_grad: bool,
    aux: Vec<S>,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so the node order is a topological
/// order. A graph is built fresh for every objective evaluation.
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: None, inputs: Vec::new(), value, requires_grad, aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(S::of(value)))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<S, DiffError> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Side of the kink for every input element of every non-differentiable
    /// op, in recording order. Two evaluations of the same function with equal
    /// patterns lie in the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let region: fn(f64, &OpKind) -> u8 = match node.op {
                Some(OpKind::Relu | OpKind::LeakyRelu(_) | OpKind::Abs) => |x, _| u8::from(x > 0.0),
                Some(OpKind::Clamp { .. }) => |x, op| match op {
                    OpKind::Clamp { lo, .. } if x < *lo => 0,
                    OpKind::Clamp { hi, .. } if x > *hi => 2,
                    _ => 1,
                },
                _ => continue,
            };
            let op = node.op.as_ref().expect("matched above");
            out.extend(self.nodes[node.inputs[0].0].value.data().iter().map(|v| region(v.f64(), op)));
        }
        out
    }

    /// Copy of `v` as a new constant leaf: no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, DiffError> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(DiffError::InvalidArgument { op: op.name(), msg: format!("unknown node {}", bad.0) });
        }
        let values: Vec<&Tensor<S>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, aux) = ops::forward(&op, &values)?;
        if let Some(index) = value.first_non_finite() {
            return Err(DiffError::NonFinite { op: op.name(), index });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op: Some(op), inputs: inputs.to_vec(), value, requires_grad, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.apply(OpKind::AddScalar(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var, DiffError> {
        let op = OpKind::Conv2d { stride, pad };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, DiffError> {
        self.apply(OpKind::LeakyRelu(slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn atanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Atanh, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Abs, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn pad(&mut self, a: Var, pad: usize) -> Result<Var, DiffError> {
        self.apply(OpKind::Pad { pad }, &[a])
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var, DiffError> {
        self.apply(OpKind::UpsampleNearest { factor }, &[a])
    }

    pub fn instance_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::InstanceNorm { eps: INSTANCE_NORM_EPS }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        self.apply(OpKind::Reshape(shape), &[a])
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, DiffError> {
        self.apply(OpKind::GlobalAvgPool, &[a])
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Every leaf that requires grad gets a gradient of its own shape; leaves
    /// that did not contribute to `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, DiffError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(DiffError::NotScalar { shape: root.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<S>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &node.aux, &g, &needs)?;
            for ((inp, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            if node.op.is_some() || !node.requires_grad {
                out.push(None);
                continue;
            }
            let shape = node.value.shape().to_vec();
            let t = match g {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(shape),
            };
            if let Some(index) = t.first_non_finite() {
                return Err(DiffError::NonFinite { op: "backward", index });
            }
            out.push(Some(t));
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of one backward sweep, keyed by leaf node.
pub struct Gradients<S = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves carrying a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
