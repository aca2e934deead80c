use super::kernels::{col2im, gemm, im2col, Window};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive kinds, without their attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    MulElementwise,
    MatMul,
    Reshape,
    Concat,
    Mean,
    Sum,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Clamp,
    Scale,
    AddScalar,
    Ln,
    Sqrt,
    BiasAdd,
    Conv2d,
    Conv2dTranspose,
    PadReplicate,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::MulElementwise,
        Primitive::MatMul,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::LeakyRelu,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Clamp,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::Ln,
        Primitive::Sqrt,
        Primitive::BiasAdd,
        Primitive::Conv2d,
        Primitive::Conv2dTranspose,
        Primitive::PadReplicate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::MulElementwise => "mul_elementwise",
            Primitive::MatMul => "matmul",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Clamp => "clamp",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::Ln => "ln",
            Primitive::Sqrt => "sqrt",
            Primitive::BiasAdd => "bias_add",
            Primitive::Conv2d => "conv2d",
            Primitive::Conv2dTranspose => "conv2d_transpose",
            Primitive::PadReplicate => "pad_replicate",
        }
    }
}

impl std::fmt::Display for Primitive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A primitive together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Add,
    Sub,
    MulElementwise,
    MatMul,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Mean,
    Sum,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Clamp { min: f64, max: f64 },
    Scale(f64),
    AddScalar(f64),
    Ln,
    Sqrt,
    /// Adds a rank-1 bias along axis 1.
    BiasAdd,
    Conv2d { stride: usize, pad: usize },
    Conv2dTranspose { stride: usize, pad: usize },
    /// Pads both spatial axes of an NCHW tensor by repeating edge pixels.
    PadReplicate { pad: usize },
}

impl Op {
    pub fn primitive(&self) -> Primitive {
        match self {
            Op::Add => Primitive::Add,
            Op::Sub => Primitive::Sub,
            Op::MulElementwise => Primitive::MulElementwise,
            Op::MatMul => Primitive::MatMul,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Concat { .. } => Primitive::Concat,
            Op::Mean => Primitive::Mean,
            Op::Sum => Primitive::Sum,
            Op::LeakyRelu { .. } => Primitive::LeakyRelu,
            Op::Tanh => Primitive::Tanh,
            Op::Sigmoid => Primitive::Sigmoid,
            Op::Clamp { .. } => Primitive::Clamp,
            Op::Scale(_) => Primitive::Scale,
            Op::AddScalar(_) => Primitive::AddScalar,
            Op::Ln => Primitive::Ln,
            Op::Sqrt => Primitive::Sqrt,
            Op::BiasAdd => Primitive::BiasAdd,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::Conv2dTranspose { .. } => Primitive::Conv2dTranspose,
            Op::PadReplicate { .. } => Primitive::PadReplicate,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat { .. } => None,
            Op::Add
            | Op::Sub
            | Op::MulElementwise
            | Op::MatMul
            | Op::BiasAdd
            | Op::Conv2d { .. }
            | Op::Conv2dTranspose { .. } => Some(2),
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    needs_grad: bool,
    corrupt: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// reverse index order is a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    faulty: Option<Primitive>,
    fault_armed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: deliberately scales every gradient produced by `prim`'s
    /// backward rule, so gradient checks have a negative control.
    #[doc(hidden)]
    pub fn with_faulty_backward(prim: Primitive) -> Self {
        Graph {
            nodes: Vec::new(),
            faulty: Some(prim),
            fault_armed: true,
        }
    }

    /// Stops corrupting nodes recorded from here on.
    #[doc(hidden)]
    pub fn disarm_fault(&mut self) {
        self.fault_armed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        let needs_grad = tensor.requires_grad;
        self.push(tensor, None, Vec::new(), needs_grad)
    }

    /// Copies a parameter in as a differentiable leaf.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(Tensor::from_parts(tensor.shape.clone(), tensor.data.clone()).with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<usize>, needs_grad: bool) -> Var {
        let corrupt = self.fault_armed && op.as_ref().is_some_and(|o| Some(o.primitive()) == self.faulty);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
            corrupt,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let prim = op.primitive();
        match op.arity() {
            Some(n) if n != inputs.len() => {
                return Err(TensorError::Contract(format!(
                    "{prim} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(TensorError::Contract(format!("{prim} needs at least one input")))
            }
            _ => {}
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(TensorError::Contract(format!("{prim}: unknown variable {}", bad.0)));
        }
        let args: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&op, &args)?;
        if value.data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::Overflow { op: prim.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, Some(op), inputs.iter().map(|v| v.0).collect(), needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MulElementwise, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu { slope }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Op::Clamp { min, max }, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.apply(Op::AddScalar(offset), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Ln, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Op::BiasAdd, &[x, bias])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, pad }, &[x, kernel])
    }

    pub fn conv2d_transpose(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Op::Conv2dTranspose { stride, pad }, &[x, kernel])
    }

    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.apply(Op::PadReplicate { pad }, &[x])
    }

    /// Fills the gradient slot of every node that depends on a
    /// `requires_grad` leaf with d`loss`/d`node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if let Some(op) = &self.nodes[i].op {
                let node = &self.nodes[i];
                let args: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].needs_grad).collect();
                let mut gins = backward_op(op, &args, &node.value, &gout, &needs);
                if node.corrupt {
                    for g in gins.iter_mut().flatten() {
                        g.iter_mut().for_each(|x| *x *= 1.5);
                    }
                }
                for (&j, gin) in node.inputs.iter().zip(gins) {
                    let Some(gin) = gin else { continue };
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gin),
                    }
                }
            }
            self.nodes[i].value.grad = Some(gout);
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape.len() != b.shape.len() {
        return Err(TensorError::Rank {
            op,
            expected: a.shape.len(),
            found: b.shape.len(),
        });
    }
    match a.shape.iter().zip(&b.shape).position(|(x, y)| x != y) {
        Some(axis) => Err(TensorError::Dimension {
            op,
            axis,
            expected: a.shape[axis],
            found: b.shape[axis],
        }),
        None => Ok(()),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        Err(TensorError::Rank {
            op,
            expected: rank,
            found: t.shape.len(),
        })
    } else {
        Ok(())
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.shape.is_empty()
}

/// Elementwise binary op with rank-0 broadcasting on either side.
fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape.clone(), data))
    } else if is_scalar(b) {
        let y = b.data[0];
        Ok(Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect()))
    } else if is_scalar(a) {
        let x = a.data[0];
        Ok(Tensor::from_parts(b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect()))
    } else {
        same_shape(op, a, b)?;
        unreachable!()
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_window(x: &Tensor, k: &Tensor, stride: usize, pad: usize, op: &'static str) -> Result<Window> {
    expect_rank(op, x, 4)?;
    expect_rank(op, k, 4)?;
    if stride == 0 {
        return Err(TensorError::Contract(format!("{op}: stride must be positive")));
    }
    if x.shape[1] != k.shape[1] {
        return Err(TensorError::Dimension {
            op,
            axis: 1,
            expected: k.shape[1],
            found: x.shape[1],
        });
    }
    let (h, w, kh, kw) = (x.shape[2], x.shape[3], k.shape[2], k.shape[3]);
    if h + 2 * pad < kh {
        return Err(TensorError::Dimension {
            op,
            axis: 2,
            expected: kh,
            found: h + 2 * pad,
        });
    }
    if w + 2 * pad < kw {
        return Err(TensorError::Dimension {
            op,
            axis: 3,
            expected: kw,
            found: w + 2 * pad,
        });
    }
    Ok(Window {
        channels: x.shape[1],
        height: h,
        width: w,
        kh,
        kw,
        stride,
        pad,
        out_h: (h + 2 * pad - kh) / stride + 1,
        out_w: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Window over the *output* of a transposed convolution.
fn conv_t_window(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Window> {
    let op = "conv2d_transpose";
    expect_rank(op, x, 4)?;
    expect_rank(op, k, 4)?;
    if stride == 0 {
        return Err(TensorError::Contract(format!("{op}: stride must be positive")));
    }
    if x.shape[1] != k.shape[0] {
        return Err(TensorError::Dimension {
            op,
            axis: 1,
            expected: k.shape[0],
            found: x.shape[1],
        });
    }
    let (ih, iw, kh, kw) = (x.shape[2], x.shape[3], k.shape[2], k.shape[3]);
    let full_h = (ih - 1) * stride + kh;
    let full_w = (iw - 1) * stride + kw;
    if full_h <= 2 * pad {
        return Err(TensorError::Dimension {
            op,
            axis: 2,
            expected: 2 * pad + 1,
            found: full_h,
        });
    }
    if full_w <= 2 * pad {
        return Err(TensorError::Dimension {
            op,
            axis: 3,
            expected: 2 * pad + 1,
            found: full_w,
        });
    }
    Ok(Window {
        channels: k.shape[1],
        height: full_h - 2 * pad,
        width: full_w - 2 * pad,
        kh,
        kw,
        stride,
        pad,
        out_h: ih,
        out_w: iw,
    })
}

fn forward(op: &Op, args: &[&Tensor]) -> Result<Tensor> {
    let name = op.primitive().name();
    match op {
        Op::Add => zip_with(name, args[0], args[1], |x, y| x + y),
        Op::Sub => zip_with(name, args[0], args[1], |x, y| x - y),
        Op::MulElementwise => zip_with(name, args[0], args[1], |x, y| x * y),
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            expect_rank(name, a, 2)?;
            expect_rank(name, b, 2)?;
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            if b.shape[0] != k {
                return Err(TensorError::Dimension {
                    op: name,
                    axis: 0,
                    expected: k,
                    found: b.shape[0],
                });
            }
            let mut out = vec![0.0; m * n];
            gemm(false, false, m, k, n, &a.data, &b.data, 0.0, &mut out);
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if shape.contains(&0) || n != args[0].data.len() {
                return Err(TensorError::Contract(format!(
                    "reshape of {:?} into {:?}",
                    args[0].shape, shape
                )));
            }
            Ok(Tensor::from_parts(shape.clone(), args[0].data.clone()))
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let first = args[0];
            if axis >= first.shape.len() {
                return Err(TensorError::Contract(format!(
                    "concat axis {axis} out of range for rank {}",
                    first.shape.len()
                )));
            }
            let mut total = 0;
            for t in args {
                if t.shape.len() != first.shape.len() {
                    return Err(TensorError::Rank {
                        op: name,
                        expected: first.shape.len(),
                        found: t.shape.len(),
                    });
                }
                if let Some(ax) = (0..first.shape.len()).find(|&d| d != axis && t.shape[d] != first.shape[d]) {
                    return Err(TensorError::Dimension {
                        op: name,
                        axis: ax,
                        expected: first.shape[ax],
                        found: t.shape[ax],
                    });
                }
                total += t.shape[axis];
            }
            let outer: usize = first.shape[..axis].iter().product();
            let inner: usize = first.shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in args {
                    let chunk = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape.clone();
            shape[axis] = total;
            Ok(Tensor::from_parts(shape, data))
        }
        Op::Sum => Ok(Tensor::scalar(args[0].data.iter().sum())),
        Op::Mean => Ok(Tensor::scalar(
            args[0].data.iter().sum::<f64>() / args[0].data.len() as f64,
        )),
        Op::LeakyRelu { slope } => Ok(map(args[0], |x| if x > 0.0 { x } else { slope * x })),
        Op::Tanh => Ok(map(args[0], f64::tanh)),
        Op::Sigmoid => Ok(map(args[0], sigmoid)),
        Op::Clamp { min, max } => {
            if min > max {
                return Err(TensorError::Contract(format!("clamp bounds {min} > {max}")));
            }
            Ok(map(args[0], |x| x.clamp(*min, *max)))
        }
        Op::Scale(c) => Ok(map(args[0], |x| c * x)),
        Op::AddScalar(c) => Ok(map(args[0], |x| x + c)),
        Op::Ln => Ok(map(args[0], f64::ln)),
        Op::Sqrt => Ok(map(args[0], f64::sqrt)),
        Op::BiasAdd => {
            let (x, b) = (args[0], args[1]);
            if x.shape.len() < 2 {
                return Err(TensorError::Rank {
                    op: name,
                    expected: 2,
                    found: x.shape.len(),
                });
            }
            expect_rank(name, b, 1)?;
            let c = x.shape[1];
            if b.shape[0] != c {
                return Err(TensorError::Dimension {
                    op: name,
                    axis: 1,
                    expected: c,
                    found: b.shape[0],
                });
            }
            let inner: usize = x.shape[2..].iter().product();
            let mut data = x.data.clone();
            for (i, v) in data.iter_mut().enumerate() {
                *v += b.data[(i / inner) % c];
            }
            Ok(Tensor::from_parts(x.shape.clone(), data))
        }
        Op::Conv2d { stride, pad } => {
            let (x, k) = (args[0], args[1]);
            let w = conv_window(x, k, *stride, *pad, name)?;
            let (n, f) = (x.shape[0], k.shape[0]);
            let in_len = w.channels * w.height * w.width;
            let out_len = f * w.cols();
            let mut cols = vec![0.0; w.rows() * w.cols()];
            let mut out = vec![0.0; n * out_len];
            for s in 0..n {
                im2col(&x.data[s * in_len..(s + 1) * in_len], &w, &mut cols);
                gemm(
                    false,
                    false,
                    f,
                    w.rows(),
                    w.cols(),
                    &k.data,
                    &cols,
                    0.0,
                    &mut out[s * out_len..(s + 1) * out_len],
                );
            }
            Ok(Tensor::from_parts(vec![n, f, w.out_h, w.out_w], out))
        }
        Op::Conv2dTranspose { stride, pad } => {
            let (x, k) = (args[0], args[1]);
            let w = conv_t_window(x, k, *stride, *pad)?;
            let (n, f) = (x.shape[0], k.shape[0]);
            let in_len = f * w.cols();
            let out_len = w.channels * w.height * w.width;
            let mut cols = vec![0.0; w.rows() * w.cols()];
            let mut out = vec![0.0; n * out_len];
            for s in 0..n {
                gemm(
                    true,
                    false,
                    w.rows(),
                    f,
                    w.cols(),
                    &k.data,
                    &x.data[s * in_len..(s + 1) * in_len],
                    0.0,
                    &mut cols,
                );
                col2im(&cols, &w, &mut out[s * out_len..(s + 1) * out_len]);
            }
            Ok(Tensor::from_parts(vec![n, w.channels, w.height, w.width], out))
        }
        Op::PadReplicate { pad } => {
            let x = args[0];
            expect_rank(name, x, 4)?;
            let (h, w) = (x.shape[2], x.shape[3]);
            if h == 0 || w == 0 {
                return Err(TensorError::Contract("cannot replicate-pad an empty plane".into()));
            }
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let planes = x.shape[0] * x.shape[1];
            let mut out = Vec::with_capacity(planes * ph * pw);
            for p in 0..planes {
                let plane = &x.data[p * h * w..(p + 1) * h * w];
                for y in 0..ph {
                    let sy = replicate_index(y, *pad, h);
                    out.extend((0..pw).map(|xx| plane[sy * w + replicate_index(xx, *pad, w)]));
                }
            }
            Ok(Tensor::from_parts(vec![x.shape[0], x.shape[1], ph, pw], out))
        }
    }
}

/// Source index of padded position `i` along an axis of length `len`.
fn replicate_index(i: usize, pad: usize, len: usize) -> usize {
    i.saturating_sub(pad).min(len - 1)
}

/// Reduces a gradient to a rank-0 operand's single slot when it was broadcast.
fn unbroadcast(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if is_scalar(operand) && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn backward_op(op: &Op, args: &[&Tensor], out: &Tensor, gout: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let elementwise = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        (0..t.data.len()).map(|i| f(i, t.data[i])).collect()
    };
    match op {
        Op::Add | Op::Sub | Op::MulElementwise => {
            let (a, b) = (args[0], args[1]);
            // Value of an operand at output position i, honoring rank-0 broadcast.
            let at = |t: &Tensor, i: usize| if is_scalar(t) { t.data[0] } else { t.data[i] };
            let ga = needs[0].then(|| {
                let g: Vec<f64> = (0..gout.len())
                    .map(|i| match op {
                        Op::MulElementwise => gout[i] * at(b, i),
                        _ => gout[i],
                    })
                    .collect();
                unbroadcast(a, g)
            });
            let gb = needs[1].then(|| {
                let g: Vec<f64> = (0..gout.len())
                    .map(|i| match op {
                        Op::Add => gout[i],
                        Op::Sub => -gout[i],
                        _ => gout[i] * at(a, i),
                    })
                    .collect();
                unbroadcast(b, g)
            });
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let ga = needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(false, true, m, n, k, gout, &b.data, 0.0, &mut g);
                g
            });
            let gb = needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(true, false, k, m, n, &a.data, gout, 0.0, &mut g);
                g
            });
            vec![ga, gb]
        }
        Op::Reshape(_) => vec![Some(gout.to_vec())],
        Op::Concat { axis } => {
            let axis = *axis;
            let outer: usize = out.shape[..axis].iter().product();
            let inner: usize = out.shape[axis + 1..].iter().product();
            let row = out.shape[axis] * inner;
            let mut offset = 0;
            args.iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let chunk = t.shape[axis] * inner;
                    let start = offset;
                    offset += chunk;
                    need.then(|| {
                        let mut g = Vec::with_capacity(t.data.len());
                        for o in 0..outer {
                            g.extend_from_slice(&gout[o * row + start..o * row + start + chunk]);
                        }
                        g
                    })
                })
                .collect()
        }
        Op::Sum => vec![Some(vec![gout[0]; args[0].data.len()])],
        Op::Mean => {
            let n = args[0].data.len() as f64;
            vec![Some(vec![gout[0] / n; args[0].data.len()])]
        }
        Op::LeakyRelu { slope } => vec![Some(elementwise(args[0], &|i, x| {
            if x > 0.0 {
                gout[i]
            } else {
                slope * gout[i]
            }
        }))],
        Op::Tanh => vec![Some(elementwise(out, &|i, y| gout[i] * (1.0 - y * y)))],
        Op::Sigmoid => vec![Some(elementwise(out, &|i, y| gout[i] * y * (1.0 - y)))],
        Op::Clamp { min, max } => vec![Some(elementwise(args[0], &|i, x| {
            if x > *min && x < *max {
                gout[i]
            } else {
                0.0
            }
        }))],
        Op::Scale(c) => vec![Some(gout.iter().map(|g| c * g).collect())],
        Op::AddScalar(_) => vec![Some(gout.to_vec())],
        Op::Ln => vec![Some(elementwise(args[0], &|i, x| gout[i] / x))],
        // Subgradient 0 at the origin keeps norms of exact matches finite.
        Op::Sqrt => vec![Some(elementwise(out, &|i, y| {
            if y > 0.0 {
                gout[i] * 0.5 / y
            } else {
                0.0
            }
        }))],
        Op::BiasAdd => {
            let (x, b) = (args[0], args[1]);
            let c = x.shape[1];
            let inner: usize = x.shape[2..].iter().product();
            let gb = needs[1].then(|| {
                let mut g = vec![0.0; c];
                for (i, v) in gout.iter().enumerate() {
                    g[(i / inner) % c] += v;
                }
                g
            });
            let _ = b;
            vec![needs[0].then(|| gout.to_vec()), gb]
        }
        Op::Conv2d { stride, pad } => {
            let (x, k) = (args[0], args[1]);
            let w = conv_window(x, k, *stride, *pad, "conv2d").expect("validated in forward");
            let (n, f) = (x.shape[0], k.shape[0]);
            let in_len = w.channels * w.height * w.width;
            let out_len = f * w.cols();
            let mut gx = needs[0].then(|| vec![0.0; x.data.len()]);
            let mut gk = needs[1].then(|| vec![0.0; k.data.len()]);
            let mut cols = vec![0.0; w.rows() * w.cols()];
            for s in 0..n {
                let go = &gout[s * out_len..(s + 1) * out_len];
                if let Some(gk) = gk.as_mut() {
                    im2col(&x.data[s * in_len..(s + 1) * in_len], &w, &mut cols);
                    gemm(false, true, f, w.cols(), w.rows(), go, &cols, 1.0, gk);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(true, false, w.rows(), f, w.cols(), &k.data, go, 0.0, &mut cols);
                    col2im(&cols, &w, &mut gx[s * in_len..(s + 1) * in_len]);
                }
            }
            vec![gx, gk]
        }
        Op::Conv2dTranspose { stride, pad } => {
            let (x, k) = (args[0], args[1]);
            let w = conv_t_window(x, k, *stride, *pad).expect("validated in forward");
            let (n, f) = (x.shape[0], k.shape[0]);
            let in_len = f * w.cols();
            let out_len = w.channels * w.height * w.width;
            let mut gx = needs[0].then(|| vec![0.0; x.data.len()]);
            let mut gk = needs[1].then(|| vec![0.0; k.data.len()]);
            let mut cols = vec![0.0; w.rows() * w.cols()];
            for s in 0..n {
                im2col(&gout[s * out_len..(s + 1) * out_len], &w, &mut cols);
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        false,
                        false,
                        f,
                        w.rows(),
                        w.cols(),
                        &k.data,
                        &cols,
                        0.0,
                        &mut gx[s * in_len..(s + 1) * in_len],
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(
                        false,
                        true,
                        f,
                        w.cols(),
                        w.rows(),
                        &x.data[s * in_len..(s + 1) * in_len],
                        &cols,
                        1.0,
                        gk,
                    );
                }
            }
            vec![gx, gk]
        }
        Op::PadReplicate { pad } => {
            let x = args[0];
            let (h, w) = (x.shape[2], x.shape[3]);
            let (ph, pw) = (out.shape[2], out.shape[3]);
            let planes = x.shape[0] * x.shape[1];
            let mut gx = vec![0.0; x.data.len()];
            for p in 0..planes {
                for y in 0..ph {
                    let sy = replicate_index(y, *pad, h);
                    for xx in 0..pw {
                        gx[p * h * w + sy * w + replicate_index(xx, *pad, w)] += gout[(p * ph + y) * pw + xx];
                    }
                }
            }
            vec![needs[0].then_some(gx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Direct correlation, one output at a time.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let [n, c, h, w] = x.shape()[..] else { panic!() };
        let [f, _, kh, kw] = k.shape()[..] else { panic!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for s in 0..n {
            for o in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                        acc += x.data()[((s * c + ch) * h + y as usize) * w + xx as usize]
                                            * k.data()[((o * c + ch) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((s * f + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter-accumulate definition of the transposed convolution.
    fn conv_t_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let [n, f, ih, iw] = x.shape()[..] else { panic!() };
        let [_, c, kh, kw] = k.shape()[..] else { panic!() };
        let oh = (ih - 1) * stride + kh - 2 * pad;
        let ow = (iw - 1) * stride + kw - 2 * pad;
        let mut out = vec![0.0; n * c * oh * ow];
        for s in 0..n {
            for i in 0..f {
                for y in 0..ih {
                    for xx in 0..iw {
                        let v = x.data()[((s * f + i) * ih + y) * iw + xx];
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let oy = (y * stride + ky) as isize - pad as isize;
                                    let ox = (xx * stride + kx) as isize - pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        out[((s * c + ch) * oh + oy as usize) * ow + ox as usize] +=
                                            v * k.data()[((i * c + ch) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (vec![n, c, oh, ow], out)
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 0.0);
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 2]);
        let mut want = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    want[i * 2 + j] += a.data()[i * 3 + p] * b.data()[p * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert_eq!(
            g.matmul(a, b).unwrap_err(),
            TensorError::Dimension {
                op: "matmul",
                axis: 0,
                expected: 3,
                found: 4
            }
        );
        let c = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.add(a, c), Err(TensorError::Dimension { axis: 1, .. })));
        let d = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            g.concat(&[a, d], 1),
            Err(TensorError::Dimension { axis: 0, .. })
        ));
        assert!(g.concat(&[a, c], 1).is_ok());
    }

    #[test]
    fn non_finite_forward_is_an_overflow_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
        assert_eq!(g.ln(x).unwrap_err(), TensorError::Overflow { op: "ln" });
        let big = g.constant(Tensor::from_vec(vec![1e300]));
        let sq = g.mul(big, big);
        assert!(matches!(sq, Err(TensorError::Overflow { .. })));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.param(&Tensor::scalar(2.0));
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        let x = random(&mut rng, &[2, 1, 5, 4]);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(vx, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
        let z = g.conv2d_transpose(vx, k, 1, 0).unwrap();
        assert_eq!(g.value(z), &x);
    }

    #[test]
    fn conv_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 5, 5], vec![1.0; 25]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        for (stride, pad, kshape) in [(1, 0, [1, 1, 3, 3]), (2, 1, [3, 2, 4, 4]), (1, 2, [2, 2, 5, 5])] {
            let x = random(&mut rng, &[2, kshape[1], 6, 6]);
            let k = random(&mut rng, &kshape);
            let want = conv_oracle(&x, &k, stride, pad);
            let mut g = Graph::new();
            let (vx, vk) = (g.constant(x), g.constant(k));
            let y = g.conv2d(vx, vk, stride, pad).unwrap();
            assert_eq!(g.value(y).len(), want.len());
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(TensorError::Dimension { axis: 2, .. })));
        assert!(g.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn conv_transpose_replicates_blocks() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = g.conv2d_transpose(x, k, 2, 0).unwrap();
        let (shape, want) = conv_t_oracle(g.value(x), g.value(k), 2, 0);
        assert_eq!(g.shape(y), &shape[..]);
        assert_eq!(shape, vec![1, 1, 4, 4]);
        #[rustfmt::skip]
        let blocks = [1.0, 1.0, 2.0, 2.0,
                      1.0, 1.0, 2.0, 2.0,
                      3.0, 3.0, 4.0, 4.0,
                      3.0, 3.0, 4.0, 4.0];
        assert_eq!(g.value(y).data(), &blocks);
        assert_eq!(want, blocks);
    }

    #[test]
    fn conv_transpose_matches_scatter_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(4);
        let x = random(&mut rng, &[2, 3, 3, 3]);
        let k = random(&mut rng, &[3, 2, 4, 4]);
        let (shape, want) = conv_t_oracle(&x, &k, 2, 1);
        let mut g = Graph::new();
        let (vx, vk) = (g.constant(x), g.constant(k));
        let y = g.conv2d_transpose(vx, vk, 2, 1).unwrap();
        assert_eq!(g.shape(y), &shape[..]);
        assert_eq!(shape, vec![2, 2, 6, 6]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_composition_equals_gram_operator() {
        // Build the conv2d matrix A column by column with the loop oracle,
        // then compare conv2d(conv2d_transpose(y)) against A Aᵀ y.
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let k = random(&mut rng, &[1, 1, 3, 3]);
        let (stride, pad) = (1, 1);
        let n_in = 16;
        let mut a = vec![vec![0.0; n_in]; 16];
        for j in 0..n_in {
            let mut e = vec![0.0; n_in];
            e[j] = 1.0;
            let col = conv_oracle(&t(&[1, 1, 4, 4], &e), &k, stride, pad);
            for (i, v) in col.iter().enumerate() {
                a[i][j] = *v;
            }
        }
        let y = random(&mut rng, &[1, 1, 4, 4]);
        let aty: Vec<f64> = (0..n_in).map(|j| (0..16).map(|i| a[i][j] * y.data()[i]).sum()).collect();
        let want: Vec<f64> = (0..16).map(|i| (0..n_in).map(|j| a[i][j] * aty[j]).sum()).collect();

        let mut g = Graph::new();
        let (vy, vk) = (g.constant(y), g.constant(k));
        let z = g.conv2d_transpose(vy, vk, stride, pad).unwrap();
        let out = g.conv2d(z, vk, stride, pad).unwrap();
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2, 3, 4]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 24][..]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::scalar(0.0));
        let y = g.sigmoid(w).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(6);
        let x = random(&mut rng, &[2, 2, 6, 6]);
        let k = random(&mut rng, &[4, 2, 3, 3]);
        let run = || {
            let mut g = Graph::new();
            let (vx, vk) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.conv2d(vx, vk, 2, 1).unwrap();
            let y = g.tanh(y).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn pad_replicate_repeats_edges() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.pad_replicate(x, 1).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert_eq!(g.value(y).data(), &want);
    }

    #[test]
    fn pad_replicate_grad_counts_copies() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap().with_requires_grad(true));
        let y = g.pad_replicate(x, 1).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // Each corner pixel of a 2x2 plane is copied into a 2x2 block.
        assert_eq!(g.grad(x).unwrap(), &[4.0; 4]);
    }

}
