use rand::Rng;

use super::kernels::{self, ConvGeometry, MatRef};
use super::{Result, Tensor, TensorError, LOG_EPSILON};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanOffDiagonal(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    RbfKernel {
        x: Var,
        y: Var,
        /// Per-pair `sum_s k_s(x_i, y_j) / sigma_s^2`.
        slope: Vec<f64>,
        /// Scalar bandwidth base and per-pair `dK_ij / d base`, when the
        /// bandwidths are tied to a graph value.
        base: Option<(Var, Vec<f64>)>,
    },
    PairSqDistance {
        x: Var,
        y: Var,
        /// `(row a, row b, weight)` over the stacked rows of `x` then `y`.
        pairs: Vec<(usize, usize, f64)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanOffDiagonal(_) => "mean_off_diagonal",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Dropout { .. } => "dropout",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::RbfKernel { .. } => "rbf_kernel",
            Op::PairSqDistance { .. } => "pair_sq_distance",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Tape of operations in creation order.
///
/// Inputs always precede their consumers, so the tape is acyclic and
/// [`Graph::backward`] only has to walk it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it keeps its own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.name(),
                pass: "forward",
            });
        }
        let requires_grad = self.inputs(&op).iter().any(|&v| self.needs_grad(v));
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires_grad);
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanOffDiagonal(a)
            | Op::Reshape(a)
            | Op::Softmax(a) => vec![a],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::AddBias { input, bias } => vec![input, bias],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![input, kernel, bias],
            Op::MaxPool { input, .. } | Op::Dropout { input, .. } => vec![input],
            Op::CrossEntropy { probs, .. } => vec![probs],
            Op::RbfKernel { x, y, base: None, .. } | Op::PairSqDistance { x, y, .. } => vec![x, y],
            Op::RbfKernel {
                x,
                y,
                base: Some((b, _)),
                ..
            } => vec![x, y, b],
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        match *self.shape(var) {
            [r, c] => Ok((r, c)),
            ref other => Err(TensorError::InvalidInput {
                op,
                reason: format!("expected a rank-2 tensor, got shape {other:?}"),
            }),
        }
    }

    /// Applies one elementwise operation. Binary ops require `b` and identical shapes.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |g: &Self, name| {
            let b = b.ok_or(TensorError::InvalidInput {
                op: name,
                reason: "second operand missing".into(),
            })?;
            g.same_shape(name, a, b)?;
            Ok::<_, TensorError>(b)
        };
        let shape = self.shape(a).to_vec();
        let x = self.data(a);
        match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => {
                let name = match op {
                    ElementwiseOp::Add => "add",
                    ElementwiseOp::Sub => "sub",
                    _ => "mul",
                };
                let b = binary(self, name)?;
                let y = self.data(b);
                let f: fn(f64, f64) -> f64 = match op {
                    ElementwiseOp::Add => |p, q| p + q,
                    ElementwiseOp::Sub => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let data = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
                let node = match op {
                    ElementwiseOp::Add => Op::Add(a, b),
                    ElementwiseOp::Sub => Op::Sub(a, b),
                    _ => Op::Mul(a, b),
                };
                self.push(node, shape, data)
            }
            ElementwiseOp::Relu => {
                let data = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                self.push(Op::Relu(a), shape, data)
            }
            ElementwiseOp::Exp => {
                let data = x.iter().map(|v| v.exp()).collect();
                self.push(Op::Exp(a), shape, data)
            }
            ElementwiseOp::Log => {
                let data = x.iter().map(|v| v.max(LOG_EPSILON).ln()).collect();
                self.push(Op::Log(a), shape, data)
            }
            ElementwiseOp::Scale(s) => {
                let data = x.iter().map(|v| v * s).collect();
                self.push(Op::Scale(a, s), shape, data)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Relu, a, None)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Exp, a, None)
    }

    /// Natural log after clamping inputs to at least [`LOG_EPSILON`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Log, a, None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::Scale(factor), a, None)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().sum();
        self.push(Op::Sum(a), vec![1], vec![total])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let m = x.iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(a), vec![1], vec![m])
    }

    /// Mean of the off-diagonal entries of a square matrix with side >= 2.
    pub fn mean_off_diagonal(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("mean_off_diagonal", a)?;
        if r != c || r < 2 {
            return Err(TensorError::InvalidInput {
                op: "mean_off_diagonal",
                reason: format!("needs a square matrix of side >= 2, got {r}x{c}"),
            });
        }
        let x = self.data(a);
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..c {
                if i != j {
                    total += x[i * c + j];
                }
            }
        }
        let m = total / (r * (r - 1)) as f64;
        self.push(Op::MeanOffDiagonal(a), vec![1], vec![m])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            0.0,
            &mut out,
        );
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out)
    }

    /// Adds a bias vector along the last axis of `input`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let units = *self.shape(input).last().unwrap_or(&0);
        if self.shape(bias) != [units] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(input).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(input)
            .chunks_exact(units)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(input).to_vec();
        self.push(Op::AddBias { input, bias }, shape, data)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        self.push(Op::Reshape(a), shape.to_vec(), data)
    }

    /// Valid, stride-1 cross-correlation of NHWC `input` with a square
    /// `[k, k, c_in, c_out]` kernel, plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let [batch, height, width, in_channels] = *self.shape(input) else {
            return Err(TensorError::InvalidInput {
                op: "conv2d",
                reason: format!("input must be [N,H,W,C], got {:?}", self.shape(input)),
            });
        };
        let [kh, kw, kc, out_channels] = *self.shape(kernel) else {
            return Err(TensorError::InvalidInput {
                op: "conv2d",
                reason: format!("kernel must be [k,k,Cin,Cout], got {:?}", self.shape(kernel)),
            });
        };
        if kh != kw || kc != in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(input).to_vec(),
                right: self.shape(kernel).to_vec(),
            });
        }
        if height < kh || width < kw {
            return Err(TensorError::InvalidInput {
                op: "conv2d",
                reason: format!("spatial extent {height}x{width} smaller than kernel {kh}x{kw}"),
            });
        }
        if self.shape(bias) != [out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape(kernel).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let geometry = ConvGeometry {
            batch,
            height,
            width,
            in_channels,
            out_channels,
            kernel: kh,
        };
        let out = kernels::conv_forward(self.data(input), self.data(kernel), self.data(bias), &geometry);
        let shape = vec![
            batch,
            geometry.out_height(),
            geometry.out_width(),
            out_channels,
        ];
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            shape,
            out,
        )
    }

    /// Non-overlapping 2x2 max pooling, stride 2, floor mode.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let [n, h, w, c] = *self.shape(input) else {
            return Err(TensorError::InvalidInput {
                op: "maxpool2d",
                reason: format!("input must be [N,H,W,C], got {:?}", self.shape(input)),
            });
        };
        if h < 2 || w < 2 {
            return Err(TensorError::InvalidInput {
                op: "maxpool2d",
                reason: format!("spatial extent {h}x{w} smaller than the 2x2 window"),
            });
        }
        let (values, argmax) = kernels::maxpool2x2(self.data(input), n, h, w, c);
        self.push(
            Op::MaxPool { input, argmax },
            vec![n, h / 2, w / 2, c],
            values,
        )
    }

    /// Train-mode inverted dropout: zero with probability `rate`, scale survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidInput {
                op: "dropout",
                reason: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(input).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self
            .data(input)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(input).to_vec();
        self.push(Op::Dropout { input, mask }, shape, data)
    }

    /// Row-wise softmax over the last axis of a `[N, K]` tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (_, k) = self.matrix_dims("softmax", logits)?;
        if k < 2 {
            return Err(TensorError::InvalidInput {
                op: "softmax",
                reason: format!("needs at least 2 classes, got {k}"),
            });
        }
        let mut out = Vec::with_capacity(self.value(logits).len());
        for row in self.data(logits).chunks_exact(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= total);
        }
        let shape = self.shape(logits).to_vec();
        self.push(Op::Softmax(logits), shape, out)
    }

    /// Mean categorical cross-entropy of `[N, K]` probabilities against constant targets.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let (n, _) = self.matrix_dims("cross_entropy", probs)?;
        if targets.shape() != self.shape(probs) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(probs).to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let total: f64 = self
            .data(probs)
            .iter()
            .zip(targets.data())
            .map(|(p, y)| if *y == 0.0 { 0.0 } else { y * p.max(LOG_EPSILON).ln() })
            .sum();
        let loss = -total / n as f64;
        self.push(
            Op::CrossEntropy {
                probs,
                targets: targets.data().to_vec(),
            },
            vec![1],
            vec![loss],
        )
    }

    /// RBF mixture kernel matrix `K[i,j] = sum_s exp(-|x_i - y_j|^2 / (2 sigma_s^2))`.
    pub fn rbf_kernel(&mut self, x: Var, y: Var, sigmas: &[f64]) -> Result<Var> {
        let (m, d) = self.matrix_dims("rbf_kernel", x)?;
        let (n, d2) = self.matrix_dims("rbf_kernel", y)?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "rbf_kernel",
                left: self.shape(x).to_vec(),
                right: self.shape(y).to_vec(),
            });
        }
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(TensorError::InvalidInput {
                op: "rbf_kernel",
                reason: format!("bandwidths must be positive and finite, got {sigmas:?}"),
            });
        }
        let inv_two_var: Vec<f64> = sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
        let (xs, ys) = (self.data(x), self.data(y));
        let mut values = Vec::with_capacity(m * n);
        let mut slope = Vec::with_capacity(m * n);
        for xi in xs.chunks_exact(d) {
            for yj in ys.chunks_exact(d) {
                let dist: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                let (mut k, mut s) = (0.0, 0.0);
                for c in &inv_two_var {
                    let e = (-dist * c).exp();
                    k += e;
                    s += e * 2.0 * c;
                }
                values.push(k);
                slope.push(s);
            }
        }
        self.push(Op::RbfKernel { x, y, slope, base: None }, vec![m, n], values)
    }

    /// RBF mixture kernel whose bandwidths follow a scalar graph value:
    /// `sigma_s^2 = multipliers[s] * base`. Gradient flows into `base` too.
    pub fn rbf_kernel_scaled(&mut self, x: Var, y: Var, base: Var, multipliers: &[f64]) -> Result<Var> {
        let (m, d) = self.matrix_dims("rbf_kernel", x)?;
        let (n, d2) = self.matrix_dims("rbf_kernel", y)?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "rbf_kernel",
                left: self.shape(x).to_vec(),
                right: self.shape(y).to_vec(),
            });
        }
        let b = self.value(base);
        if !b.is_scalar() || !(b.data()[0] > 0.0) {
            return Err(TensorError::InvalidInput {
                op: "rbf_kernel",
                reason: format!("bandwidth base must be a positive scalar, got {:?}", b.data()),
            });
        }
        if multipliers.is_empty() || multipliers.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(TensorError::InvalidInput {
                op: "rbf_kernel",
                reason: format!("multipliers must be positive and finite, got {multipliers:?}"),
            });
        }
        let base_value = b.data()[0];
        let coef: Vec<f64> = multipliers.iter().map(|mu| 1.0 / (2.0 * mu * base_value)).collect();
        let (xs, ys) = (self.data(x), self.data(y));
        let mut values = Vec::with_capacity(m * n);
        let mut slope = Vec::with_capacity(m * n);
        let mut dbase = Vec::with_capacity(m * n);
        for xi in xs.chunks_exact(d) {
            for yj in ys.chunks_exact(d) {
                let dist: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                let (mut k, mut sl, mut db) = (0.0, 0.0, 0.0);
                for c in &coef {
                    let e = (-dist * c).exp();
                    k += e;
                    sl += e * 2.0 * c;
                    db += e * dist * c / base_value;
                }
                values.push(k);
                slope.push(sl);
                dbase.push(db);
            }
        }
        self.push(
            Op::RbfKernel {
                x,
                y,
                slope,
                base: Some((base, dbase)),
            },
            vec![m, n],
            values,
        )
    }

    /// Weighted sum of squared distances between selected rows of the stacked
    /// sample `[x; y]`, as a scalar.
    pub fn pair_sq_distance(&mut self, x: Var, y: Var, pairs: &[(usize, usize, f64)]) -> Result<Var> {
        let (m, d) = self.matrix_dims("pair_sq_distance", x)?;
        let (n, d2) = self.matrix_dims("pair_sq_distance", y)?;
        if d != d2 || pairs.iter().any(|&(a, b, _)| a >= m + n || b >= m + n) {
            return Err(TensorError::InvalidInput {
                op: "pair_sq_distance",
                reason: format!("pairs must index the {} stacked rows of width {d}", m + n),
            });
        }
        let (xs, ys) = (self.data(x), self.data(y));
        let row = |i: usize| if i < m { &xs[i * d..(i + 1) * d] } else { &ys[(i - m) * d..(i - m + 1) * d] };
        let total: f64 = pairs
            .iter()
            .map(|&(a, b, w)| w * row(a).iter().zip(row(b)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum();
        self.push(
            Op::PairSqDistance {
                x,
                y,
                pairs: pairs.to_vec(),
            },
            vec![1],
            vec![total],
        )
    }

    /// Reverse pass from a scalar `loss`, filling gradients of every node that requires one.
    ///
    /// Gradients accumulate into existing buffers, so call this once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        let root = &mut self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(TensorError::NotScalar(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        root.grad_mut_or_zero()[0] += 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.value.requires_grad() {
                continue;
            }
            let Some(upstream) = node.value.grad() else {
                continue;
            };
            let contributions = self.input_grads(&node.op, &node.value, upstream);
            let op_name = node.op.name();
            for (var, grad) in contributions {
                let target = self.nodes[var.0].value.accumulate_grad(grad);
                if target.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: op_name,
                        pass: "backward",
                    });
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, op: &Op, out: &Tensor, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut grads = Vec::new();
        let mut emit = |var: Var, f: &dyn Fn() -> Vec<f64>| {
            if self.needs_grad(var) {
                grads.push((var, f()));
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(a, &|| up.to_vec());
                emit(b, &|| up.to_vec());
            }
            Op::Sub(a, b) => {
                emit(a, &|| up.to_vec());
                emit(b, &|| up.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                emit(a, &|| up.iter().zip(self.data(b)).map(|(g, y)| g * y).collect());
                emit(b, &|| up.iter().zip(self.data(a)).map(|(g, x)| g * x).collect());
            }
            Op::Relu(a) => emit(a, &|| {
                up.iter()
                    .zip(self.data(a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()
            }),
            Op::Exp(a) => emit(a, &|| up.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => emit(a, &|| {
                up.iter()
                    .zip(self.data(a))
                    .map(|(g, x)| if *x > LOG_EPSILON { g / x } else { 0.0 })
                    .collect()
            }),
            Op::Scale(a, s) => emit(a, &|| up.iter().map(|g| g * s).collect()),
            Op::Sum(a) => emit(a, &|| vec![up[0]; self.value(a).len()]),
            Op::Mean(a) => emit(a, &|| {
                let n = self.value(a).len();
                vec![up[0] / n as f64; n]
            }),
            Op::MeanOffDiagonal(a) => emit(a, &|| {
                let r = self.shape(a)[0];
                let w = up[0] / (r * (r - 1)) as f64;
                let mut g = vec![w; r * r];
                (0..r).for_each(|i| g[i * r + i] = 0.0);
                g
            }),
            Op::MatMul { a, b, m, k, n } => {
                emit(a, &|| {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm(
                        MatRef::new(up, m, n),
                        MatRef::transpose_of(self.data(b), k, n),
                        0.0,
                        &mut g,
                    );
                    g
                });
                emit(b, &|| {
                    let mut g = vec![0.0; k * n];
                    kernels::gemm(
                        MatRef::transpose_of(self.data(a), m, k),
                        MatRef::new(up, m, n),
                        0.0,
                        &mut g,
                    );
                    g
                });
            }
            Op::AddBias { input, bias } => {
                emit(input, &|| up.to_vec());
                emit(bias, &|| column_sums(up, self.value(bias).len()));
            }
            Op::Reshape(a) => emit(a, &|| up.to_vec()),
            Op::Conv2d {
                input,
                kernel,
                bias,
                ref geometry,
            } => {
                emit(kernel, &|| kernels::conv_kernel_grad(self.data(input), up, geometry));
                emit(bias, &|| column_sums(up, geometry.out_channels));
                emit(input, &|| kernels::conv_input_grad(self.data(kernel), up, geometry));
            }
            Op::MaxPool { input, ref argmax } => emit(input, &|| {
                let mut g = vec![0.0; self.value(input).len()];
                for (&src, gv) in argmax.iter().zip(up) {
                    g[src] += gv;
                }
                g
            }),
            Op::Dropout { input, ref mask } => {
                emit(input, &|| up.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Softmax(logits) => emit(logits, &|| {
                let k = self.shape(logits)[1];
                let mut g = Vec::with_capacity(up.len());
                for (gr, pr) in up.chunks_exact(k).zip(out.data().chunks_exact(k)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    g.extend(gr.iter().zip(pr).map(|(gi, pi)| pi * (gi - dot)));
                }
                g
            }),
            Op::CrossEntropy { probs, ref targets } => emit(probs, &|| {
                let n = self.shape(probs)[0] as f64;
                self.data(probs)
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| {
                        if *y == 0.0 || *p <= LOG_EPSILON {
                            0.0
                        } else {
                            -up[0] * y / (p * n)
                        }
                    })
                    .collect()
            }),
            Op::PairSqDistance { x, y, ref pairs } => {
                let (m, d) = (self.shape(x)[0], self.shape(x)[1]);
                let n = self.shape(y)[0];
                let (xs, ys) = (self.data(x), self.data(y));
                let row = |i: usize| if i < m { &xs[i * d..(i + 1) * d] } else { &ys[(i - m) * d..(i - m + 1) * d] };
                let mut stacked = vec![0.0; (m + n) * d];
                for &(a, b, w) in pairs {
                    for k in 0..d {
                        let diff = 2.0 * w * up[0] * (row(a)[k] - row(b)[k]);
                        stacked[a * d + k] += diff;
                        stacked[b * d + k] -= diff;
                    }
                }
                emit(x, &|| stacked[..m * d].to_vec());
                emit(y, &|| stacked[m * d..].to_vec());
            }
            Op::RbfKernel {
                x,
                y,
                ref slope,
                ref base,
            } => {
                if let Some((b, dbase)) = base {
                    emit(*b, &|| vec![up.iter().zip(dbase).map(|(u, g)| u * g).sum()]);
                }
                let (m, d) = (self.shape(x)[0], self.shape(x)[1]);
                let n = self.shape(y)[0];
                let (xs, ys) = (self.data(x), self.data(y));
                // dK_ij/dx_i = -slope_ij (x_i - y_j); dK_ij/dy_j = +slope_ij (x_i - y_j)
                let weighted = |i: usize, j: usize| up[i * n + j] * slope[i * n + j];
                emit(x, &|| {
                    let mut g = vec![0.0; m * d];
                    for i in 0..m {
                        let xi = &xs[i * d..(i + 1) * d];
                        let gi = &mut g[i * d..(i + 1) * d];
                        for j in 0..n {
                            let w = weighted(i, j);
                            for ((gv, a), b) in gi.iter_mut().zip(xi).zip(&ys[j * d..(j + 1) * d])
                            {
                                *gv -= w * (a - b);
                            }
                        }
                    }
                    g
                });
                emit(y, &|| {
                    let mut g = vec![0.0; n * d];
                    for i in 0..m {
                        let xi = &xs[i * d..(i + 1) * d];
                        for j in 0..n {
                            let w = weighted(i, j);
                            let gj = &mut g[j * d..(j + 1) * d];
                            for ((gv, a), b) in gj.iter_mut().zip(xi).zip(&ys[j * d..(j + 1) * d])
                            {
                                *gv += w * (a - b);
                            }
                        }
                    }
                    g
                });
            }
        }
        grads
    }
}

fn column_sums(data: &[f64], width: usize) -> Vec<f64> {
    let mut sums = vec![0.0; width];
    for row in data.chunks_exact(width) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}
