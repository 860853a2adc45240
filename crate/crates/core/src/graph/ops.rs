use crate::error::{Error, Result};
use crate::tensor::{self, BinaryOp, Padding, ReduceOp, Real, Shape, Tensor, UnaryOp};

/// An operation together with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Trainable leaf.
    Parameter { name: String },
    /// Data fed per evaluation. `batched` inputs carry the minibatch on axis 0.
    Input { name: String, batched: bool },
    Constant(Tensor),
    MatMul { trans_a: bool, trans_b: bool },
    Conv2d { stride: usize, padding: Padding },
    Conv2dBackpropInput { stride: usize, padding: Padding, input_dims: Vec<usize> },
    Conv2dBackpropFilter { stride: usize, padding: Padding, kernel_dims: Vec<usize> },
    BiasAdd,
    ScaleChannels,
    Binary(BinaryOp),
    /// Elementwise sum of any number of same-shape inputs.
    AddN,
    Unary(UnaryOp),
    ReluGrad,
    Identity,
    Reduce { op: ReduceOp, axes: Vec<usize>, keep_dims: bool },
    Broadcast { dims: Vec<usize>, axes: Vec<usize> },
    Reshape { dims: Vec<usize> },
    MaxPool2d { size: usize, stride: usize },
    MaxPool2dGrad { size: usize, stride: usize },
    ShortcutPad { stride: usize, channels_out: usize },
    ShortcutPadGrad { stride: usize, input_dims: Vec<usize> },
    SoftmaxCrossEntropy,
    SoftmaxCrossEntropyGrad { wrt_labels: bool },
}

/// Attribute-free discriminant of [`Op`], used as the bprop registry key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Parameter,
    Input,
    Constant,
    MatMul,
    Conv2d,
    Conv2dBackpropInput,
    Conv2dBackpropFilter,
    BiasAdd,
    ScaleChannels,
    Add,
    Sub,
    Mul,
    AddN,
    Relu,
    Sqrt,
    Square,
    Reciprocal,
    ReluGrad,
    Identity,
    ReduceSum,
    ReduceMean,
    Broadcast,
    Reshape,
    MaxPool2d,
    MaxPool2dGrad,
    ShortcutPad,
    ShortcutPadGrad,
    SoftmaxCrossEntropy,
    SoftmaxCrossEntropyGrad,
}

impl OpKind {
    pub const ALL: [OpKind; 29] = {
        use OpKind::*;
        [
            Parameter, Input, Constant, MatMul, Conv2d, Conv2dBackpropInput, Conv2dBackpropFilter, BiasAdd, ScaleChannels,
            Add, Sub, Mul, AddN, Relu, Sqrt, Square, Reciprocal, ReluGrad, Identity, ReduceSum, ReduceMean, Broadcast,
            Reshape, MaxPool2d, MaxPool2dGrad, ShortcutPad, ShortcutPadGrad, SoftmaxCrossEntropy, SoftmaxCrossEntropyGrad,
        ]
    };

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        use OpKind::*;
        match self {
            Parameter => "param",
            Input => "input",
            Constant => "const",
            MatMul => "matmul",
            Conv2d => "conv2d",
            Conv2dBackpropInput => "conv2d_backprop_input",
            Conv2dBackpropFilter => "conv2d_backprop_filter",
            BiasAdd => "bias_add",
            ScaleChannels => "scale_channels",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            AddN => "add_n",
            Relu => "relu",
            Sqrt => "sqrt",
            Square => "square",
            Reciprocal => "reciprocal",
            ReluGrad => "relu_grad",
            Identity => "identity",
            ReduceSum => "reduce_sum",
            ReduceMean => "reduce_mean",
            Broadcast => "broadcast",
            Reshape => "reshape",
            MaxPool2d => "max_pool2d",
            MaxPool2dGrad => "max_pool2d_grad",
            ShortcutPad => "shortcut_pad",
            ShortcutPadGrad => "shortcut_pad_grad",
            SoftmaxCrossEntropy => "softmax_cross_entropy",
            SoftmaxCrossEntropyGrad => "softmax_cross_entropy_grad",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Parameter { .. } => OpKind::Parameter,
            Op::Input { .. } => OpKind::Input,
            Op::Constant(_) => OpKind::Constant,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv2dBackpropInput { .. } => OpKind::Conv2dBackpropInput,
            Op::Conv2dBackpropFilter { .. } => OpKind::Conv2dBackpropFilter,
            Op::BiasAdd => OpKind::BiasAdd,
            Op::ScaleChannels => OpKind::ScaleChannels,
            Op::Binary(BinaryOp::Add) => OpKind::Add,
            Op::Binary(BinaryOp::Sub) => OpKind::Sub,
            Op::Binary(BinaryOp::Mul) => OpKind::Mul,
            Op::AddN => OpKind::AddN,
            Op::Unary(UnaryOp::Relu) => OpKind::Relu,
            Op::Unary(UnaryOp::Sqrt) => OpKind::Sqrt,
            Op::Unary(UnaryOp::Square) => OpKind::Square,
            Op::Unary(UnaryOp::Reciprocal) => OpKind::Reciprocal,
            Op::ReluGrad => OpKind::ReluGrad,
            Op::Identity => OpKind::Identity,
            Op::Reduce { op: ReduceOp::Sum, .. } => OpKind::ReduceSum,
            Op::Reduce { op: ReduceOp::Mean, .. } => OpKind::ReduceMean,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::MaxPool2dGrad { .. } => OpKind::MaxPool2dGrad,
            Op::ShortcutPad { .. } => OpKind::ShortcutPad,
            Op::ShortcutPadGrad { .. } => OpKind::ShortcutPadGrad,
            Op::SoftmaxCrossEntropy => OpKind::SoftmaxCrossEntropy,
            Op::SoftmaxCrossEntropyGrad { .. } => OpKind::SoftmaxCrossEntropyGrad,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Parameter { .. } | Op::Input { .. } | Op::Constant(_))
    }

    /// Number of inputs, or `None` for variadic ops.
    pub fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::AddN => return None,
            Op::Parameter { .. } | Op::Input { .. } | Op::Constant(_) => 0,
            Op::Unary(_)
            | Op::Identity
            | Op::Reduce { .. }
            | Op::Broadcast { .. }
            | Op::Reshape { .. }
            | Op::MaxPool2d { .. }
            | Op::ShortcutPad { .. }
            | Op::ShortcutPadGrad { .. } => 1,
            Op::SoftmaxCrossEntropyGrad { .. } => 3,
            _ => 2,
        })
    }

    /// Output shape from input shapes. Leaves carry their own shape and are
    /// not inferred here.
    pub fn infer_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        match self.arity() {
            Some(n) if n != inputs.len() => return Err(Error::Arity { op: self.name(), expected: n, got: inputs.len() }),
            None if inputs.is_empty() => return Err(Error::Arity { op: self.name(), expected: 1, got: 0 }),
            _ => {}
        }
        let dims = |i: usize| inputs[i].dims();
        match self {
            Op::Parameter { .. } | Op::Input { .. } | Op::Constant(_) => {
                Err(Error::Structure(format!("{} shape is declared, not inferred", self.name())))
            }
            Op::MatMul { trans_a, trans_b } => {
                let (&[ar, ac], &[br, bc]) = (dims(0), dims(1)) else {
                    return Err(Error::shape("matmul", "operands must be rank 2"));
                };
                let (m, k) = if *trans_a { (ac, ar) } else { (ar, ac) };
                let (k2, n) = if *trans_b { (bc, br) } else { (br, bc) };
                if k != k2 {
                    return Err(Error::ShapeMismatch { op: "matmul", lhs: inputs[0].clone(), rhs: inputs[1].clone() });
                }
                Shape::new(vec![m, n])
            }
            Op::Conv2d { stride, padding } => {
                let (&[n, h, w, cin], &[kh, kw, kcin, cout]) = (dims(0), dims(1)) else {
                    return Err(Error::shape("conv2d", "expected NHWC input and HWIO kernel"));
                };
                if cin != kcin {
                    return Err(Error::ShapeMismatch { op: "conv2d", lhs: inputs[0].clone(), rhs: inputs[1].clone() });
                }
                let (ho, _) = tensor::conv_out_extent(h, kh, *stride, *padding)?;
                let (wo, _) = tensor::conv_out_extent(w, kw, *stride, *padding)?;
                Shape::new(vec![n, ho, wo, cout])
            }
            Op::Conv2dBackpropInput { input_dims, .. } => Shape::new(input_dims.clone()),
            Op::Conv2dBackpropFilter { kernel_dims, .. } => Shape::new(kernel_dims.clone()),
            Op::BiasAdd | Op::ScaleChannels => {
                let c = dims(0).last().copied();
                if c.is_none() || dims(1) != [c.unwrap_or(0)] {
                    return Err(Error::ShapeMismatch { op: self.name(), lhs: inputs[0].clone(), rhs: inputs[1].clone() });
                }
                Ok(inputs[0].clone())
            }
            Op::Binary(op) => tensor::binary_shape(*op, inputs[0], inputs[1]),
            Op::AddN => {
                if let Some(bad) = inputs.iter().find(|s| **s != inputs[0]) {
                    return Err(Error::ShapeMismatch { op: "add_n", lhs: inputs[0].clone(), rhs: (*bad).clone() });
                }
                Ok(inputs[0].clone())
            }
            Op::Unary(_) | Op::Identity => Ok(inputs[0].clone()),
            Op::MaxPool2dGrad { .. } => Ok(inputs[1].clone()),
            Op::ReluGrad => {
                if inputs[0] != inputs[1] {
                    return Err(Error::ShapeMismatch { op: "relu_grad", lhs: inputs[0].clone(), rhs: inputs[1].clone() });
                }
                Ok(inputs[0].clone())
            }
            Op::Reduce { axes, keep_dims, .. } => tensor::reduce_shape(inputs[0], axes, *keep_dims),
            Op::Broadcast { dims: out, axes } => {
                let target = Shape::new(out.clone())?;
                let dropped = tensor::reduce_shape(&target, axes, false)?;
                let kept = tensor::reduce_shape(&target, axes, true)?;
                if inputs[0] != &dropped && inputs[0] != &kept {
                    return Err(Error::ShapeMismatch { op: "broadcast", lhs: inputs[0].clone(), rhs: target });
                }
                Ok(target)
            }
            Op::Reshape { dims: out } => {
                let target = Shape::new(out.clone())?;
                if target.numel() != inputs[0].numel() {
                    return Err(Error::ShapeMismatch { op: "reshape", lhs: inputs[0].clone(), rhs: target });
                }
                Ok(target)
            }
            Op::MaxPool2d { size, stride } => {
                let &[n, h, w, c] = dims(0) else {
                    return Err(Error::shape("max_pool2d", "expected NHWC input"));
                };
                let (ho, _) = tensor::conv_out_extent(h, *size, *stride, Padding::Valid)?;
                let (wo, _) = tensor::conv_out_extent(w, *size, *stride, Padding::Valid)?;
                Shape::new(vec![n, ho, wo, c])
            }
            Op::ShortcutPad { stride, channels_out } => {
                let &[n, h, w, c] = dims(0) else {
                    return Err(Error::shape("shortcut_pad", "expected NHWC input"));
                };
                if *stride == 0 || *channels_out < c {
                    return Err(Error::shape("shortcut_pad", "invalid stride or channel count"));
                }
                Shape::new(vec![n, h.div_ceil(*stride), w.div_ceil(*stride), *channels_out])
            }
            Op::ShortcutPadGrad { input_dims, .. } => Shape::new(input_dims.clone()),
            Op::SoftmaxCrossEntropy => {
                if inputs[0] != inputs[1] || inputs[0].rank() != 2 {
                    return Err(Error::ShapeMismatch { op: "softmax_cross_entropy", lhs: inputs[0].clone(), rhs: inputs[1].clone() });
                }
                Ok(Shape::scalar())
            }
            Op::SoftmaxCrossEntropyGrad { .. } => {
                if !inputs[0].is_scalar() || inputs[1] != inputs[2] {
                    return Err(Error::shape("softmax_cross_entropy_grad", "expects scalar upstream and matching logits/labels"));
                }
                Ok(inputs[1].clone())
            }
        }
    }

    /// Runs the forward kernel of a non-leaf op.
    pub fn forward(&self, x: &[&Tensor], checked: bool) -> Result<Tensor> {
        match self {
            Op::Parameter { .. } | Op::Input { .. } => Err(Error::Structure("leaf values are bound, not computed".into())),
            Op::Constant(t) => Ok(t.clone()),
            Op::MatMul { trans_a, trans_b } => tensor::matmul(x[0], x[1], *trans_a, *trans_b),
            Op::Conv2d { stride, padding } => tensor::conv2d(x[0], x[1], *stride, *padding),
            Op::Conv2dBackpropInput { stride, padding, input_dims } => {
                tensor::conv2d_backprop_input(x[0], x[1], input_dims, *stride, *padding)
            }
            Op::Conv2dBackpropFilter { stride, padding, kernel_dims } => {
                tensor::conv2d_backprop_filter(x[0], x[1], kernel_dims, *stride, *padding)
            }
            Op::BiasAdd => tensor::bias_add(x[0], x[1]),
            Op::ScaleChannels => tensor::scale_channels(x[0], x[1]),
            Op::Binary(op) => tensor::binary(*op, x[0], x[1]),
            Op::AddN => tensor::add_n(x),
            Op::Unary(op) => tensor::unary(*op, x[0], checked),
            Op::ReluGrad => tensor::relu_grad(x[0], x[1]),
            Op::Identity => Ok(x[0].clone()),
            Op::Reduce { op, axes, keep_dims } => tensor::reduce(*op, x[0], axes, *keep_dims),
            Op::Broadcast { dims, axes } => tensor::broadcast(x[0], dims, axes),
            Op::Reshape { dims } => x[0].reshape(dims.clone()),
            Op::MaxPool2d { size, stride } => tensor::max_pool2d(x[0], *size, *stride),
            Op::MaxPool2dGrad { size, stride } => tensor::max_pool2d_grad(x[0], x[1], *size, *stride),
            Op::ShortcutPad { stride, channels_out } => tensor::shortcut_pad(x[0], *stride, *channels_out),
            Op::ShortcutPadGrad { stride, input_dims } => tensor::shortcut_pad_grad(x[0], *stride, input_dims),
            Op::SoftmaxCrossEntropy => tensor::softmax_cross_entropy(x[0], x[1], checked),
            Op::SoftmaxCrossEntropyGrad { wrt_labels } => tensor::softmax_cross_entropy_grad(x[0], x[1], x[2], *wrt_labels),
        }
    }

    /// Constant scalar payload, if this is a one-element constant.
    pub fn constant_scalar(&self) -> Option<Real> {
        match self {
            Op::Constant(t) if t.numel() == 1 => Some(t.item()),
            _ => None,
        }
    }
}
