use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, Mat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic precision of recorded outputs. `F32` rounds every op output
/// through `f32`; accumulation inside an op stays in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Per-channel statistics used by batch normalization in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Leaf,
    /// Inputs: x `[N,C,H,W]`, weight `[O,C,kh,kw]`, optional bias `[O]`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Inputs: x `[N,in]`, weight `[out,in]`, optional bias `[out]`.
    Linear,
    Relu,
    /// Inputs: x `[N,C,H,W]`, gamma `[C]`, beta `[C]`. Uses batch statistics
    /// when `running` is `None`.
    BatchNorm2d {
        eps: f64,
        running: Option<RunningStats>,
    },
    /// Non-overlapping window, kernel == stride.
    MaxPool2d {
        kernel: usize,
    },
    GlobalAvgPool,
    Add,
    Sub,
    Mul,
    /// Inputs: x, s with a single element.
    ScaleByScalar,
    Scale(f64),
    Affine {
        mul: f64,
        add: f64,
    },
    /// Over the whole vector for rank 1, over rows for rank 2.
    Softmax,
    LogSoftmax,
    /// Mean negative log-likelihood over the batch.
    CrossEntropy {
        labels: Vec<usize>,
    },
    SumOfSquares,
    Sum,
    Reshape(Vec<usize>),
    /// Flattens and concatenates every input.
    Concat,
    /// Picks one element of the flattened input as a scalar.
    Select(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::BatchNorm2d { .. } => "batchnorm2d",
            OpKind::MaxPool2d { .. } => "maxpool2d",
            OpKind::GlobalAvgPool => "global-avg-pool",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScaleByScalar => "scale-by-scalar",
            OpKind::Scale(_) => "scale",
            OpKind::Affine { .. } => "affine",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::CrossEntropy { .. } => "cross-entropy",
            OpKind::SumOfSquares => "sum-of-squares",
            OpKind::Sum => "sum",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat => "concat",
            OpKind::Select(_) => "select",
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Conv(ConvGeom),
    MaxPool(Vec<usize>),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var_unbiased: Vec<f64>,
    },
    CrossEntropy(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    cache: Cache,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the insertion order is a topological order and backward walks it in
/// reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    strict: bool,
    backward_done: bool,
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(mismatch(
            op,
            format!("{what} must be rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            op,
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softmax_rows(x: &[f64], row: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn row_len(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.rank() {
        1 => Ok(t.numel()),
        2 => Ok(t.shape()[1]),
        _ => Err(mismatch(
            op,
            format!("expects rank 1 or 2, got shape {:?}", t.shape()),
        )),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    /// In strict mode every op rejects non-finite inputs.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let value = self.round(value);
        self.nodes.push(Node {
            op: OpKind::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            cache: Cache::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Batch mean and unbiased batch variance recorded by a training-mode
    /// batch normalization node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes.get(id.0)?.cache {
            Cache::BatchNorm {
                batch_mean,
                batch_var_unbiased,
                ..
            } => Some((batch_mean, batch_var_unbiased)),
            _ => None,
        }
    }

    /// Allows another backward pass over the same recorded nodes.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    fn round(&self, mut t: Tensor) -> Tensor {
        if self.precision == Precision::F32 {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        t
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::UnknownNode(id.0));
        }
        Ok(())
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            self.check_id(id)?;
        }
        let name = op.name();
        if self.strict {
            for (k, &id) in inputs.iter().enumerate() {
                if !self.nodes[id.0].value.is_finite() {
                    return Err(TensorError::NonFinite { op: name, input: k });
                }
            }
        }
        let arity = |lo: usize, hi: usize| -> Result<()> {
            if inputs.len() < lo || inputs.len() > hi {
                return Err(TensorError::Arity {
                    op: name,
                    expected: lo,
                    actual: inputs.len(),
                });
            }
            Ok(())
        };
        let v = |i: usize| &self.nodes[inputs[i].0].value;

        let (value, cache) = match &op {
            OpKind::Leaf => {
                return Err(mismatch(name, "leaves are created with Graph::leaf"));
            }
            OpKind::Conv2d { stride, padding } => {
                arity(2, 3)?;
                let (x, w) = (v(0), v(1));
                check_rank(name, x, 4, "input")?;
                check_rank(name, w, 4, "weight")?;
                let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                if ci != c {
                    return Err(mismatch(
                        name,
                        format!("input channels {c} vs weight in-channels {ci}"),
                    ));
                }
                if *stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
                    return Err(mismatch(
                        name,
                        format!("kernel {kh}x{kw} with padding {padding} does not fit {h}x{wd}"),
                    ));
                }
                let bias = if inputs.len() == 3 {
                    let b = v(2);
                    if b.shape() != [o] {
                        return Err(mismatch(
                            name,
                            format!("bias shape {:?}, expected [{o}]", b.shape()),
                        ));
                    }
                    Some(b.data())
                } else {
                    None
                };
                let g = ConvGeom {
                    c_in: c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *padding,
                    h_out: (h + 2 * padding - kh) / stride + 1,
                    w_out: (wd + 2 * padding - kw) / stride + 1,
                };
                let out = kernels::conv2d_forward(x.data(), w.data(), bias, n, o, &g);
                (
                    Tensor::new(vec![n, o, g.h_out, g.w_out], out)?,
                    Cache::Conv(g),
                )
            }
            OpKind::Linear => {
                arity(2, 3)?;
                let (x, w) = (v(0), v(1));
                check_rank(name, x, 2, "input")?;
                check_rank(name, w, 2, "weight")?;
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let (fout, win) = (w.shape()[0], w.shape()[1]);
                if fin != win {
                    return Err(mismatch(
                        name,
                        format!("input features {fin} vs weight in-features {win}"),
                    ));
                }
                let mut out = vec![0.0; n * fout];
                kernels::gemm(
                    Mat::new(x.data(), n, fin),
                    Mat::new(w.data(), fout, fin).t(),
                    &mut out,
                    0.0,
                );
                if inputs.len() == 3 {
                    let b = v(2);
                    if b.shape() != [fout] {
                        return Err(mismatch(
                            name,
                            format!("bias shape {:?}, expected [{fout}]", b.shape()),
                        ));
                    }
                    for row in out.chunks_exact_mut(fout) {
                        row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
                    }
                }
                (Tensor::new(vec![n, fout], out)?, Cache::None)
            }
            OpKind::Relu => {
                arity(1, 1)?;
                let x = v(0);
                let out = x
                    .data()
                    .iter()
                    .map(|&a| if a > 0.0 { a } else { 0.0 })
                    .collect();
                (Tensor::new(x.shape().to_vec(), out)?, Cache::None)
            }
            OpKind::BatchNorm2d { eps, running } => {
                arity(3, 3)?;
                let (x, gamma, beta) = (v(0), v(1), v(2));
                check_rank(name, x, 4, "input")?;
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                if gamma.shape() != [c] || beta.shape() != [c] {
                    return Err(mismatch(
                        name,
                        format!(
                            "gamma {:?} / beta {:?} for {c} channels",
                            gamma.shape(),
                            beta.shape()
                        ),
                    ));
                }
                let hw = h * w;
                let m = n * hw;
                let xd = x.data();
                let (mean, var) = match running {
                    Some(rs) => {
                        if rs.mean.len() != c || rs.var.len() != c {
                            return Err(mismatch(name, "running statistics length"));
                        }
                        (rs.mean.clone(), rs.var.clone())
                    }
                    None => {
                        if m < 2 {
                            return Err(mismatch(
                                name,
                                "batch statistics need at least two values per channel",
                            ));
                        }
                        let mut mean = vec![0.0; c];
                        let mut var = vec![0.0; c];
                        for ch in 0..c {
                            let mut s = 0.0;
                            for b in 0..n {
                                s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                                    .iter()
                                    .sum::<f64>();
                            }
                            let mu = s / m as f64;
                            let mut q = 0.0;
                            for b in 0..n {
                                q += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                                    .iter()
                                    .map(|v| (v - mu) * (v - mu))
                                    .sum::<f64>();
                            }
                            mean[ch] = mu;
                            var[ch] = q / m as f64;
                        }
                        (mean, var)
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; xd.len()];
                let mut out = vec![0.0; xd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let (g, bt, mu, is) =
                            (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
                        for i in r {
                            let xh = (xd[i] - mu) * is;
                            xhat[i] = xh;
                            out[i] = g * xh + bt;
                        }
                    }
                }
                let cache = if running.is_some() {
                    Cache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_mean: Vec::new(),
                        batch_var_unbiased: Vec::new(),
                    }
                } else {
                    let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                    Cache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var_unbiased: unbiased,
                    }
                };
                (Tensor::new(x.shape().to_vec(), out)?, cache)
            }
            OpKind::MaxPool2d { kernel } => {
                arity(1, 1)?;
                let x = v(0);
                check_rank(name, x, 4, "input")?;
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                if *kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                    return Err(mismatch(
                        name,
                        format!("kernel {kernel} does not tile {h}x{w}"),
                    ));
                }
                let (out, arg) = kernels::maxpool_forward(x.data(), n * c, h, w, *kernel);
                (
                    Tensor::new(vec![n, c, h / kernel, w / kernel], out)?,
                    Cache::MaxPool(arg),
                )
            }
            OpKind::GlobalAvgPool => {
                arity(1, 1)?;
                let x = v(0);
                check_rank(name, x, 4, "input")?;
                let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
                let out = x
                    .data()
                    .chunks_exact(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect();
                (Tensor::new(vec![n, c], out)?, Cache::None)
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2, 2)?;
                let (a, b) = (v(0), v(1));
                check_same(name, a, b)?;
                let f: fn(f64, f64) -> f64 = match op {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                (Tensor::new(a.shape().to_vec(), out)?, Cache::None)
            }
            OpKind::ScaleByScalar => {
                arity(2, 2)?;
                let (x, s) = (v(0), v(1));
                let s = s.item().ok_or_else(|| {
                    mismatch(
                        name,
                        format!("scale must have one element, got {:?}", s.shape()),
                    )
                })?;
                let out = x.data().iter().map(|a| a * s).collect();
                (Tensor::new(x.shape().to_vec(), out)?, Cache::None)
            }
            OpKind::Scale(c) => {
                arity(1, 1)?;
                let x = v(0);
                let out = x.data().iter().map(|a| a * c).collect();
                (Tensor::new(x.shape().to_vec(), out)?, Cache::None)
            }
            OpKind::Affine { mul, add } => {
                arity(1, 1)?;
                let x = v(0);
                let out = x.data().iter().map(|a| a * mul + add).collect();
                (Tensor::new(x.shape().to_vec(), out)?, Cache::None)
            }
            OpKind::Softmax => {
                arity(1, 1)?;
                let x = v(0);
                let row = row_len(name, x)?;
                if row == 0 {
                    return Err(mismatch(name, "empty softmax"));
                }
                (
                    Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), row))?,
                    Cache::None,
                )
            }
            OpKind::LogSoftmax => {
                arity(1, 1)?;
                let x = v(0);
                let row = row_len(name, x)?;
                if row == 0 {
                    return Err(mismatch(name, "empty log-softmax"));
                }
                let mut out = vec![0.0; x.numel()];
                for (src, dst) in x.data().chunks_exact(row).zip(out.chunks_exact_mut(row)) {
                    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + src.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s - lse);
                }
                (Tensor::new(x.shape().to_vec(), out)?, Cache::None)
            }
            OpKind::CrossEntropy { labels } => {
                arity(1, 1)?;
                let x = v(0);
                check_rank(name, x, 2, "logits")?;
                let (n, c) = (x.shape()[0], x.shape()[1]);
                if labels.len() != n || n == 0 {
                    return Err(mismatch(
                        name,
                        format!("{} labels for batch of {n}", labels.len()),
                    ));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(TensorError::LabelOutOfRange {
                        op: name,
                        label: bad,
                        classes: c,
                    });
                }
                let mut loss = 0.0;
                let mut probs = vec![0.0; n * c];
                for (i, (src, p)) in x
                    .data()
                    .chunks_exact(c)
                    .zip(probs.chunks_exact_mut(c))
                    .enumerate()
                {
                    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = src.iter().map(|s| (s - m).exp()).sum();
                    loss -= src[labels[i]] - m - z.ln();
                    p.iter_mut()
                        .zip(src)
                        .for_each(|(p, s)| *p = (s - m).exp() / z);
                }
                (Tensor::scalar(loss / n as f64), Cache::CrossEntropy(probs))
            }
            OpKind::SumOfSquares => {
                arity(1, 1)?;
                (
                    Tensor::scalar(v(0).data().iter().map(|a| a * a).sum()),
                    Cache::None,
                )
            }
            OpKind::Sum => {
                arity(1, 1)?;
                (Tensor::scalar(v(0).data().iter().sum()), Cache::None)
            }
            OpKind::Reshape(shape) => {
                arity(1, 1)?;
                let x = v(0);
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(mismatch(
                        name,
                        format!("cannot view {:?} as {shape:?}", x.shape()),
                    ));
                }
                (x.reshaped(shape)?, Cache::None)
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(TensorError::Arity {
                        op: name,
                        expected: 1,
                        actual: 0,
                    });
                }
                let data: Vec<f64> = (0..inputs.len())
                    .flat_map(|i| v(i).data().to_vec())
                    .collect();
                (Tensor::from_vec(data), Cache::None)
            }
            OpKind::Select(index) => {
                arity(1, 1)?;
                let x = v(0);
                let value = *x.data().get(*index).ok_or_else(|| {
                    mismatch(
                        name,
                        format!("index {index} outside {} elements", x.numel()),
                    )
                })?;
                (Tensor::scalar(value), Cache::None)
            }
        };

        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let value = self.round(value);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            cache,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.apply(OpKind::Conv2d { stride, padding }, &ins)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let mut ins = vec![x, w];
        ins.extend(bias);
        self.apply(OpKind::Linear, &ins)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: Option<RunningStats>,
    ) -> Result<NodeId> {
        self.apply(OpKind::BatchNorm2d { eps, running }, &[x, gamma, beta])
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize) -> Result<NodeId> {
        self.apply(OpKind::MaxPool2d { kernel }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ScaleByScalar, &[x, s])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        self.apply(OpKind::Affine { mul, add }, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmax, &[x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(
            OpKind::CrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum_of_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SumOfSquares, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::Concat, xs)
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.apply(OpKind::Select(index), &[x])
    }

    /// Sums a list of same-shaped nodes left to right.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs.split_first().ok_or(TensorError::Arity {
            op: "add",
            expected: 1,
            actual: 0,
        })?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Multiplies a list of same-shaped nodes left to right.
    pub fn mul_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs.split_first().ok_or(TensorError::Arity {
            op: "mul",
            expected: 1,
            actual: 0,
        })?;
        rest.iter().try_fold(first, |acc, &x| self.mul(acc, x))
    }

    /// Reverse-mode pass from a scalar `loss`. Every leaf that requires a
    /// gradient gets one; leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        self.check_id(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(node, &dy);
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Interior gradients are dropped once consumed; leaves keep theirs.
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (OpKind::Leaf, Some(g)) if node.requires_grad => {
                    Tensor::new(node.value.shape().to_vec(), g).ok()
                }
                (OpKind::Leaf, None) if node.requires_grad => Some(Tensor::zeros_like(&node.value)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, node: &Node, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let want = |i: usize| self.wants(node.inputs[i]);
        match (&node.op, &node.cache) {
            (OpKind::Conv2d { .. }, Cache::Conv(g)) => {
                let (x, w) = (val(0), val(1));
                let c_out = w.shape()[0];
                let n = x.shape()[0];
                let (dx, dw) =
                    kernels::conv2d_backward(x.data(), w.data(), dy, n, c_out, g, want(0), want(1));
                let mut out = vec![dx, dw];
                if node.inputs.len() == 3 {
                    out.push(want(2).then(|| {
                        let hw = g.col_cols();
                        let mut db = vec![0.0; c_out];
                        for (k, chunk) in dy.chunks_exact(hw).enumerate() {
                            db[k % c_out] += chunk.iter().sum::<f64>();
                        }
                        db
                    }));
                }
                out
            }
            (OpKind::Linear, _) => {
                let (x, w) = (val(0), val(1));
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                let dym = Mat::new(dy, n, fout);
                let dx = want(0).then(|| {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(dym, Mat::new(w.data(), fout, fin), &mut dx, 0.0);
                    dx
                });
                let dw = want(1).then(|| {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(dym.t(), Mat::new(x.data(), n, fin), &mut dw, 0.0);
                    dw
                });
                let mut out = vec![dx, dw];
                if node.inputs.len() == 3 {
                    out.push(want(2).then(|| {
                        let mut db = vec![0.0; fout];
                        for row in dy.chunks_exact(fout) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        db
                    }));
                }
                out
            }
            (OpKind::Relu, _) => {
                let x = val(0);
                vec![Some(
                    x.data()
                        .iter()
                        .zip(dy)
                        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                        .collect(),
                )]
            }
            (OpKind::BatchNorm2d { running, .. }, Cache::BatchNorm { xhat, inv_std, .. }) => {
                let (x, gamma) = (val(0), val(1));
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let hw = x.shape()[2] * x.shape()[3];
                let m = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        for i in r {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                let dx = want(0).then(|| {
                    let mut dx = vec![0.0; dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let g = gamma.data()[ch];
                            let is = inv_std[ch];
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            if running.is_some() {
                                for i in r {
                                    dx[i] = dy[i] * g * is;
                                }
                            } else {
                                // dbeta = sum(dy), dgamma = sum(dy * xhat)
                                let (sd, sdx) = (dbeta[ch], dgamma[ch]);
                                for i in r {
                                    dx[i] = g * is / m * (m * dy[i] - sd - xhat[i] * sdx);
                                }
                            }
                        }
                    }
                    dx
                });
                vec![dx, want(1).then_some(dgamma), want(2).then_some(dbeta)]
            }
            (OpKind::MaxPool2d { .. }, Cache::MaxPool(arg)) => {
                let mut dx = vec![0.0; val(0).numel()];
                for (&i, &g) in arg.iter().zip(dy) {
                    dx[i] += g;
                }
                vec![Some(dx)]
            }
            (OpKind::GlobalAvgPool, _) => {
                let x = val(0);
                let hw = x.shape()[2] * x.shape()[3];
                let mut dx = vec![0.0; x.numel()];
                for (plane, &g) in dx.chunks_exact_mut(hw).zip(dy) {
                    plane.fill(g / hw as f64);
                }
                vec![Some(dx)]
            }
            (OpKind::Add, _) => vec![want(0).then(|| dy.to_vec()), want(1).then(|| dy.to_vec())],
            (OpKind::Sub, _) => vec![
                want(0).then(|| dy.to_vec()),
                want(1).then(|| dy.iter().map(|g| -g).collect()),
            ],
            (OpKind::Mul, _) => {
                let (a, b) = (val(0), val(1));
                vec![
                    want(0).then(|| dy.iter().zip(b.data()).map(|(g, y)| g * y).collect()),
                    want(1).then(|| dy.iter().zip(a.data()).map(|(g, x)| g * x).collect()),
                ]
            }
            (OpKind::ScaleByScalar, _) => {
                let (x, s) = (val(0), val(1));
                let sv = s.data()[0];
                vec![
                    want(0).then(|| dy.iter().map(|g| g * sv).collect()),
                    want(1).then(|| vec![dy.iter().zip(x.data()).map(|(g, x)| g * x).sum()]),
                ]
            }
            (OpKind::Scale(c), _) => vec![Some(dy.iter().map(|g| g * c).collect())],
            (OpKind::Affine { mul, .. }, _) => vec![Some(dy.iter().map(|g| g * mul).collect())],
            (OpKind::Softmax, _) => {
                let y = node.value.data();
                let row = if node.value.rank() == 1 {
                    y.len()
                } else {
                    node.value.shape()[1]
                };
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(row)
                    .zip(dy.chunks_exact(row))
                    .zip(dx.chunks_exact_mut(row))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            }
            (OpKind::LogSoftmax, _) => {
                let y = node.value.data();
                let row = if node.value.rank() == 1 {
                    y.len()
                } else {
                    node.value.shape()[1]
                };
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(row)
                    .zip(dy.chunks_exact(row))
                    .zip(dx.chunks_exact_mut(row))
                {
                    let s: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * s;
                    }
                }
                vec![Some(dx)]
            }
            (OpKind::CrossEntropy { labels }, Cache::CrossEntropy(probs)) => {
                let c = val(0).shape()[1];
                let n = labels.len() as f64;
                let g = dy[0] / n;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * g).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * c + l] -= g;
                }
                vec![Some(dx)]
            }
            (OpKind::SumOfSquares, _) => {
                let g = dy[0];
                vec![Some(val(0).data().iter().map(|x| 2.0 * x * g).collect())]
            }
            (OpKind::Sum, _) => vec![Some(vec![dy[0]; val(0).numel()])],
            (OpKind::Reshape(_), _) => vec![Some(dy.to_vec())],
            (OpKind::Concat, _) => {
                let mut offset = 0;
                (0..node.inputs.len())
                    .map(|i| {
                        let n = val(i).numel();
                        let g = want(i).then(|| dy[offset..offset + n].to_vec());
                        offset += n;
                        g
                    })
                    .collect()
            }
            (OpKind::Select(index), _) => {
                let mut dx = vec![0.0; val(0).numel()];
                dx[*index] = dy[0];
                vec![Some(dx)]
            }
            (op, _) => unreachable!("no gradient rule for {}", op.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let data = vec![0.1, -3.7, 1e-300, 5.5];
        let x = g.constant(t(&[2, 2], &data));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_ones_border_pattern() {
        // Direct evaluation of the padded convolution sum at each position.
        let mut expected = [0.0; 16];
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (y, x) = (oy + dy, ox + dx);
                        if (0..4).contains(&y) && (0..4).contains(&x) {
                            s += 1.0;
                        }
                    }
                }
                expected[(oy * 4 + ox) as usize] = s;
            }
        }
        assert_eq!(expected[0], 4.0);
        assert_eq!(expected[1], 6.0);
        assert_eq!(expected[5], 9.0);

        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(g.value(y).data(), &expected[..]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");

        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let msg = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.starts_with("conv2d"), "{msg}");
    }

    #[test]
    fn strict_mode_rejects_non_finite() {
        let mut g = Graph::new();
        g.set_strict(true);
        let x = g.constant(Tensor::from_vec(vec![1.0, f64::NAN]));
        assert!(matches!(g.relu(x), Err(TensorError::NonFinite { .. })));
        let mut lax = Graph::new();
        let x = lax.constant(Tensor::from_vec(vec![1.0, f64::NAN]));
        assert!(lax.relu(x).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.5, -1.0, 3.0]), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let s = g.sum_of_squares(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let unused = g.leaf(Tensor::from_vec(vec![7.0; 3]), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
        g.reset();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn inputs_precede_consumers() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        let z = g.add(x, y).unwrap();
        let s = g.sum(z).unwrap();
        for id in [y, z, s] {
            assert!(g.inputs(id).iter().all(|i| i.index() < id.index()));
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_reports_stats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(Tensor::from_vec(vec![1.0]));
        let beta = g.constant(Tensor::from_vec(vec![0.0]));
        let y = g.batchnorm2d(x, gamma, beta, 0.0, None).unwrap();
        let out = g.value(y).data();
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
        assert!((out.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        let (mean, var) = g.batch_stats(y).unwrap();
        assert_eq!(mean, &[2.5]);
        assert!((var[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f32_precision_rounds_outputs() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::from_vec(vec![0.1]));
        assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
    }
}
