use std::fmt;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, ConvGeometry};
use super::{Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward pass is computed by the caller.
///
/// Used for fused kernels (losses) that live outside this module.
pub trait Function: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input given the upstream gradient of
    /// the output. `None` means "no gradient flows to this input".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    TransposeLast2(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(Var),
    SpatialBroadcast(Var),
    ConcatChannels(Var, Var),
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Running mean/variance used by eval-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub populated: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            populated: false,
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * stats.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * stats.var[c] * unbias;
        }
        self.populated = true;
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no path
    /// connects them.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("shape"))
    }

    /// Like [`get`](Self::get) but zero-filled when disconnected.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

/// Records differentiable operations in execution order.
///
/// Nodes are appended as ops run, so every node's inputs precede it and a
/// single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((1, c, h, w)),
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

/// Number of times `small` repeats inside `big` when `small` is a trailing
/// suffix of `big`.
fn suffix_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(big[..big.len() - small.len()].iter().product())
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Sum of `g` (shape of the broadcast result) folded back onto a suffix operand.
fn reduce_repeats(g: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for chunk in g.chunks_exact(small_len) {
        add_into(&mut out, chunk);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape_err = || TensorError::Shape {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if suffix_repeats(ta.shape(), tb.shape()).is_some() {
            let n = tb.len();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % n]))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if suffix_repeats(tb.shape(), ta.shape()).is_some() {
            let n = ta.len();
            let data = tb
                .data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(ta.data()[i % n], y))
                .collect();
            Tensor::new(tb.shape().to_vec(), data)
        } else {
            Err(shape_err())
        }
    }

    /// Elementwise sum; the lower-rank operand must match the other's
    /// trailing dimensions and is repeated over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), self.rg(&[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a), self.rg(&[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), self.rg(&[a]))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "ln",
                index,
                value,
            });
        }
        let v = t.map(f64::ln);
        Ok(self.push(v, Op::Ln(a), self.rg(&[a])))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.rg(&[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), self.rg(&[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), self.rg(&[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.rg(&[a])))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (batch, rows, cols) = match *t.shape() {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => {
                return Err(TensorError::Shape {
                    op: "transpose",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        let mut data = vec![0.0; t.len()];
        transpose_into(batch, rows, cols, t.data(), &mut data);
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::TransposeLast2(a), self.rg(&[a])))
    }

    /// Matrix product `[m×k]·[k×n]`, or batched `[b×m×k]·[b×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (batch, m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                m,
                k,
                n,
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if ta.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&n) = t.shape().last() else {
            return Err(TensorError::Shape {
                op: "softmax_rows",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::SoftmaxRows(a), self.rg(&[a])))
    }

    /// Same-padded 2-D convolution (cross-correlation) with zero padding of
    /// `dilation·(k−1)/2` per side.
    ///
    /// `input` is `[C_in, H, W]` or `[B, C_in, H, W]`; `kernel` is
    /// `[C_out, C_in, k, k]` with odd `k`; `bias`, when given, is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let err = || TensorError::Shape {
            op: "conv2d",
            lhs: ti.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        };
        let (batch, cin, h, w) = image_dims(ti.shape()).ok_or_else(err)?;
        let &[cout, kcin, k, k2] = tk.shape() else {
            return Err(err());
        };
        if kcin != cin || k != k2 {
            return Err(err());
        }
        if k % 2 == 0 {
            return Err(TensorError::Param(format!(
                "conv2d kernel size must be odd, got {k}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(TensorError::Param(
                "conv2d stride and dilation must be positive".into(),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(TensorError::Shape {
                    op: "conv2d bias",
                    lhs: self.value(b).shape().to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let geo = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kernel: k,
            stride,
            dilation,
        };
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let plane = oh * ow;
        let mut cols = vec![0.0; geo.col_rows() * plane];
        let mut out = vec![0.0; batch * cout * plane];
        for bi in 0..batch {
            geo.im2col(
                &ti.data()[bi * cin * h * w..(bi + 1) * cin * h * w],
                &mut cols,
            );
            let ob = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
            if let Some(b) = bias {
                for (co, chunk) in ob.chunks_exact_mut(plane).enumerate() {
                    chunk.fill(self.nodes[b.0].value.data()[co]);
                }
            }
            gemm_nn(cout, geo.col_rows(), plane, tk.data(), &cols, ob);
        }
        let shape = if ti.rank() == 3 {
            vec![cout, oh, ow]
        } else {
            vec![batch, cout, oh, ow]
        };
        let v = Tensor::new(shape, out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                dilation,
            },
            rg,
        ))
    }

    /// Training-mode batch norm over `[B, C, H, W]` (or `[C, H, W]`):
    /// normalises with the batch's per-channel statistics and returns them
    /// so the caller can fold them into its [`RunningStats`].
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats)> {
        let (_, c, _, _) = self.bn_check(input, gamma, beta)?;
        let t = self.value(input);
        let (mean, var, count) = channel_moments(t, c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (v, xhat) = self.bn_apply(input, gamma, beta, &mean, &inv_std);
        let rg = self.rg(&[input, gamma, beta]);
        let var_out = self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Eval-mode batch norm using previously accumulated running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
    ) -> Result<Var> {
        let (_, c, _, _) = self.bn_check(input, gamma, beta)?;
        if !running.populated {
            return Err(TensorError::State(
                "batch norm evaluated before any training step populated its running statistics"
                    .into(),
            ));
        }
        if running.mean.len() != c {
            return Err(TensorError::Shape {
                op: "batch_norm running stats",
                lhs: vec![running.mean.len()],
                rhs: vec![c],
            });
        }
        let inv_std: Vec<f64> = running
            .var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (v, xhat) = self.bn_apply(input, gamma, beta, &running.mean, &inv_std);
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    fn bn_check(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize, usize)> {
        let shape = self.value(input).shape();
        let dims = image_dims(shape).ok_or_else(|| TensorError::Shape {
            op: "batch_norm",
            lhs: shape.to_vec(),
            rhs: vec![],
        })?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [dims.1] {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    lhs: shape.to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        Ok(dims)
    }

    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let t = self.value(input);
        let (_, c, h, w) = image_dims(t.shape()).expect("checked");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let plane = h * w;
        let mut xhat = t.data().to_vec();
        let mut out = vec![0.0; t.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / plane) % c;
            *xh = (*xh - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        (Tensor::new(t.shape().to_vec(), out).expect("shape"), xhat)
    }

    /// Per-channel spatial mean: `[B, C, H, W] → [B, C]`, `[C, H, W] → [C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let (batch, c, h, w) = image_dims(t.shape()).ok_or_else(|| TensorError::Shape {
            op: "global_avg_pool",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })?;
        let plane = h * w;
        let data: Vec<f64> = t
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let shape = if t.rank() == 3 {
            vec![c]
        } else {
            vec![batch, c]
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::GlobalAvgPool(input), self.rg(&[input])))
    }

    /// Replicates `[B, C]` (or `[C]`) over an `h × w` grid.
    pub fn spatial_broadcast(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(input);
        if t.rank() != 1 && t.rank() != 2 {
            return Err(TensorError::Shape {
                op: "spatial_broadcast",
                lhs: t.shape().to_vec(),
                rhs: vec![h, w],
            });
        }
        let mut data = Vec::with_capacity(t.len() * h * w);
        for &v in t.data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        let mut shape = t.shape().to_vec();
        shape.extend([h, w]);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::SpatialBroadcast(input), self.rg(&[input])))
    }

    /// Concatenates two image tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || TensorError::Shape {
            op: "concat_channels",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (ba, ca, ha, wa) = image_dims(ta.shape()).ok_or_else(err)?;
        let (bb, cb, hb, wb) = image_dims(tb.shape()).ok_or_else(err)?;
        if ta.rank() != tb.rank() || (ba, ha, wa) != (bb, hb, wb) {
            return Err(err());
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for bi in 0..ba {
            data.extend_from_slice(&ta.data()[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let mut shape = ta.shape().to_vec();
        let r = shape.len();
        shape[r - 3] = ca + cb;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), self.rg(&[a, b])))
    }

    /// Records an externally computed value produced by `func` from `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// where a value fans out to several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.node_backward(id, &g);
            grads[id] = Some(g);
            for (var, contribution) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => add_into(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn node_backward(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let mut res = Vec::new();
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !want(v) {
                        continue;
                    }
                    let n = val(v).len();
                    let mut gv = if n == g.len() {
                        g.to_vec()
                    } else {
                        reduce_repeats(g, n)
                    };
                    if s != 1.0 {
                        gv.iter_mut().for_each(|x| *x *= s);
                    }
                    res.push((v, gv));
                }
                res
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut res = Vec::new();
                for (v, other) in [(*a, tb), (*b, ta)] {
                    if !want(v) {
                        continue;
                    }
                    let n = val(v).len();
                    let m = other.len();
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * other.data()[i % m])
                        .collect();
                    let gv = if n == g.len() {
                        full
                    } else {
                        reduce_repeats(&full, n)
                    };
                    res.push((v, gv));
                }
                res
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|x| x * f).collect())],
            Op::Shift(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect())],
            Op::Ln(a) => vec![(
                *a,
                g.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect(),
            )],
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )],
            Op::Abs(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a).data())
                    .map(|(gi, &x)| {
                        gi * if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::TransposeLast2(a) => {
                let shape = val(*a).shape();
                let (batch, rows, cols) = match *shape {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!(),
                };
                // g has shape [.., cols, rows]
                let mut gv = vec![0.0; g.len()];
                transpose_into(batch, cols, rows, g, &mut gv);
                vec![(*a, gv)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let r = ta.rank();
                let (m, k) = (ta.shape()[r - 2], ta.shape()[r - 1]);
                let n = tb.shape()[r - 1];
                let batch = ta.len() / (m * k);
                let mut res = Vec::new();
                if want(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    for bi in 0..batch {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    res.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = vec![0.0; tb.len()];
                    for bi in 0..batch {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::SoftmaxRows(a) => {
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut gv = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(n)
                    .zip(out.chunks_exact(n))
                    .zip(gv.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*a, gv)]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                dilation,
            } => self.conv_backward(g, *input, *kernel, *bias, *stride, *dilation),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let ti = val(*input);
                let (_, c, h, w) = image_dims(ti.shape()).expect("checked");
                let plane = h * w;
                let gamma_v = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    dgamma[ch] += gi * xh;
                    dbeta[ch] += gi;
                }
                let mut res = Vec::new();
                if want(*input) {
                    let count = (ti.len() / c) as f64;
                    let mut dx = vec![0.0; ti.len()];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = (i / plane) % c;
                        let dxhat = g[i] * gamma_v[ch];
                        *d = if *train {
                            // d/dx of (x − μ)/σ with μ, σ from the same batch
                            inv_std[ch]
                                * (dxhat
                                    - (dbeta[ch] * gamma_v[ch]) / count
                                    - xhat[i] * (dgamma[ch] * gamma_v[ch]) / count)
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                    res.push((*input, dx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
                res
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = image_dims(val(*a).shape()).expect("checked");
                let plane = h * w;
                let mut gv = Vec::with_capacity(val(*a).len());
                for gi in g {
                    gv.extend(std::iter::repeat(gi / plane as f64).take(plane));
                }
                vec![(*a, gv)]
            }
            Op::SpatialBroadcast(a) => {
                let n = val(*a).len();
                let plane = g.len() / n;
                vec![(*a, g.chunks_exact(plane).map(|c| c.iter().sum()).collect())]
            }
            Op::ConcatChannels(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, ca, h, w) = image_dims(ta.shape()).expect("checked");
                let cb = tb.len() / (batch * h * w);
                let plane = h * w;
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for bi in 0..batch {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Custom { inputs, func } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                let gs = func.backward(&ins, &node.value, &gt);
                debug_assert_eq!(
                    gs.len(),
                    inputs.len(),
                    "{} returned wrong arity",
                    func.name()
                );
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(v, gi)| gi.map(|t| (*v, t.into_data())))
                    .collect()
            }
        }
    }

    fn conv_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
    ) -> Vec<(Var, Vec<f64>)> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (batch, cin, h, w) = image_dims(ti.shape()).expect("checked");
        let (cout, k) = (tk.shape()[0], tk.shape()[2]);
        let geo = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kernel: k,
            stride,
            dilation,
        };
        let plane = geo.col_cols();
        let rows = geo.col_rows();
        let want_input = self.requires_grad(input);
        let want_kernel = self.requires_grad(kernel);
        let mut cols = vec![0.0; rows * plane];
        let mut dcols = vec![0.0; rows * plane];
        let mut dk = vec![0.0; tk.len()];
        let mut dx = vec![0.0; if want_input { ti.len() } else { 0 }];
        for bi in 0..batch {
            let gb = &g[bi * cout * plane..(bi + 1) * cout * plane];
            if want_kernel {
                geo.im2col(
                    &ti.data()[bi * cin * h * w..(bi + 1) * cin * h * w],
                    &mut cols,
                );
                gemm_nt(cout, plane, rows, gb, &cols, &mut dk);
            }
            if want_input {
                dcols.fill(0.0);
                gemm_tn(rows, cout, plane, tk.data(), gb, &mut dcols);
                geo.col2im(&dcols, &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w]);
            }
        }
        let mut res = Vec::new();
        if want_input {
            res.push((input, dx));
        }
        if want_kernel {
            res.push((kernel, dk));
        }
        if let Some(b) = bias {
            let mut db = vec![0.0; cout];
            for (i, chunk) in g.chunks_exact(plane).enumerate() {
                db[i % cout] += chunk.iter().sum::<f64>();
            }
            res.push((b, db));
        }
        res
    }
}

fn transpose_into(batch: usize, rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                d[j * rows + i] = s[i * cols + j];
            }
        }
    }
}

pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-channel mean and biased variance over batch and spatial axes.
fn channel_moments(t: &Tensor, c: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let (_, _, h, w) = image_dims(t.shape()).expect("checked");
    let plane = h * w;
    let count = t.len() / c;
    let mut mean = vec![0.0; c];
    for (i, chunk) in t.data().chunks_exact(plane).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for (i, chunk) in t.data().chunks_exact(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (mean, var, count)
}
