use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean exclusion mask for row-wise softmax; `true` removes the entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "mask",
                left: vec![rows, cols],
                right: vec![masked.len()],
            });
        }
        Ok(Self { rows, cols, masked })
    }

    /// Masks column `col` in every row.
    pub fn column(rows: usize, cols: usize, col: usize) -> Self {
        let mut masked = vec![false; rows * cols];
        for r in 0..rows {
            masked[r * cols + col] = true;
        }
        Self { rows, cols, masked }
    }

    /// Masks the diagonal of a square matrix (the `i != k` indicator).
    pub fn diagonal(n: usize) -> Self {
        let mut masked = vec![false; n * n];
        for i in 0..n {
            masked[i * n + i] = true;
        }
        Self {
            rows: n,
            cols: n,
            masked,
        }
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.masked[i * self.cols..(i + 1) * self.cols]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.cols + col]
    }
}

/// Custom backward rule: `(inputs, output, output_grad) -> input grads`.
pub type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

/// Batch statistics source for [`Tape::batch_norm`].
pub enum BatchNormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub struct BatchNormOutput {
    pub out: Var,
    /// Per-channel batch mean (train mode only).
    pub batch_mean: Vec<f64>,
    /// Per-channel unbiased batch variance (train mode only).
    pub batch_var: Vec<f64>,
}

enum Op<T> {
    MatMul { transpose_rhs: bool },
    RowDot,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale(T),
    Relu,
    Sum,
    Mean,
    WeightedSum(Vec<T>),
    ConcatCols(Vec<usize>),
    L2Normalize { norms: Vec<f64>, eps: f64 },
    Softmax { temperature: f64 },
    LogSumExp { temperature: f64, mask: Option<Mask> },
    CrossEntropy { eps: f64 },
    Conv2d { geom: ConvGeometry, cols: Vec<T> },
    AvgPool2,
    GlobalAvgPool,
    BatchNorm {
        layout: (usize, usize, usize),
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Custom(BackwardFn<T>),
}

struct Node<T> {
    inputs: Vec<Var>,
    output: Var,
    op: Op<T>,
}

/// Linear record of operations for one forward pass.
///
/// Nodes are only recorded when at least one input requires a gradient, so
/// evaluating on constants costs no more than a plain forward pass. A tape
/// supports exactly one [`Tape::backward`] call.
pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    needs_grad: Vec<bool>,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            needs_grad: Vec::new(),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Records a leaf; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.values.push(t);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.values[v.0].item()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, out: Tensor<T>) -> Var {
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(out);
        self.needs_grad.push(needs);
        let output = Var(self.values.len() - 1);
        if needs {
            self.nodes.push(Node { inputs, output, op });
        }
        output
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul")?;
        let (k2, m) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![n, k],
                right: vec![k2, m],
            });
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        Ok(self.push(
            Op::MatMul { transpose_rhs: false },
            vec![a, b],
            Tensor::raw(vec![n, m], out),
        ))
    }

    /// `a * b^T` for `a: N x K`, `b: M x K`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul_nt")?;
        let (m, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: vec![n, k],
                right: vec![m, k2],
            });
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), true, T::zero(), &mut out);
        Ok(self.push(
            Op::MatMul { transpose_rhs: true },
            vec![a, b],
            Tensor::raw(vec![n, m], out),
        ))
    }

    /// Row-wise dot products of two `N x D` matrices, as `N x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (n, _) = self.value(a).dims2("row_dot")?;
        let out: Vec<T> = (0..n)
            .map(|i| T::of(kernels::dot(self.value(a).row(i), self.value(b).row(i))))
            .collect();
        Ok(self.push(Op::RowDot, vec![a, b], Tensor::raw(vec![n, 1], out)))
    }

    fn zip_with(&mut self, op: Op<T>, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let out: Vec<T> = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(op, vec![a, b], Tensor::raw(shape, out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Adds a length-`K` bias to every row of an `N x K` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2("add_row_bias")?;
        if self.value(bias).len() != k {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: vec![n, k],
                right: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % k])
            .collect();
        Ok(self.push(Op::AddRowBias, vec![x, bias], Tensor::raw(vec![n, k], out)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| e * s).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Scale(s), vec![x], Tensor::raw(shape, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| e.max(T::zero())).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Relu, vec![x], Tensor::raw(shape, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(T::of(s)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|e| e.f64()).sum::<f64>() / v.len() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(T::of(s)))
    }

    /// `sum_i w_i * x_i` over scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = 0.0f64;
        for &(v, w) in terms {
            s += w.f64() * self.value(v).item()?.f64();
        }
        let (vars, weights): (Vec<Var>, Vec<T>) = terms.iter().copied().unzip();
        Ok(self.push(Op::WeightedSum(weights), vars, Tensor::scalar(T::of(s))))
    }

    /// Horizontal concatenation of `N x k_i` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (n, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![n],
                    right: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Op::ConcatCols(widths), parts.to_vec(), Tensor::raw(vec![n, total], out)))
    }

    /// Divides every row by `max(||row||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2("l2_normalize_rows")?;
        let v = self.value(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = v.row(i);
            let nrm = kernels::norm(row);
            norms.push(nrm);
            let denom = nrm.max(eps);
            out.extend(row.iter().map(|&e| T::of(e.f64() / denom)));
        }
        Ok(self.push(Op::L2Normalize { norms, eps }, vec![x], Tensor::raw(vec![n, d], out)))
    }

    fn check_mask(&self, x: Var, mask: Option<&Mask>, op: &'static str) -> Result<(usize, usize)> {
        let (n, k) = self.value(x).dims2(op)?;
        if let Some(m) = mask {
            if m.dims() != (n, k) {
                return Err(Error::ShapeMismatch {
                    op,
                    left: vec![n, k],
                    right: vec![m.rows, m.cols],
                });
            }
        }
        Ok((n, k))
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("temperature must be positive, got {temperature}")))
        }
    }

    /// Row-wise softmax of `x / temperature`; masked entries get exactly 0.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64, mask: Option<&Mask>) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let (n, k) = self.check_mask(x, mask, "softmax_rows")?;
        let mut out = vec![T::zero(); n * k];
        let v = self.value(x);
        for i in 0..n {
            let row_mask = mask.map(|m| m.row(i));
            if !kernels::softmax_row(v.row(i), temperature, row_mask, &mut out[i * k..(i + 1) * k]) {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        Ok(self.push(
            Op::Softmax { temperature },
            vec![x],
            Tensor::raw(vec![n, k], out),
        ))
    }

    /// Row-wise `log sum exp(x / temperature)` over unmasked entries, `N x 1`.
    pub fn logsumexp_rows(&mut self, x: Var, temperature: f64, mask: Option<&Mask>) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let (n, _) = self.check_mask(x, mask, "logsumexp_rows")?;
        let v = self.value(x);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let lse = kernels::logsumexp_row(v.row(i), temperature, mask.map(|m| m.row(i)))
                .ok_or(Error::DegenerateRow { row: i })?;
            out.push(T::of(lse));
        }
        Ok(self.push(
            Op::LogSumExp {
                temperature,
                mask: mask.cloned(),
            },
            vec![x],
            Tensor::raw(vec![n, 1], out),
        ))
    }

    /// `-(1/N) sum_ik target_ik log(max(pred_ik, eps))`. The target never
    /// receives a gradient.
    pub fn cross_entropy_rows(&mut self, target: Var, pred: Var, eps: f64) -> Result<Var> {
        self.same_shape("cross_entropy_rows", target, pred)?;
        let (n, _) = self.value(pred).dims2("cross_entropy_rows")?;
        let s: f64 = self
            .value(target)
            .data()
            .iter()
            .zip(self.value(pred).data())
            .filter(|(t, _)| **t != T::zero())
            .map(|(t, p)| t.f64() * p.f64().max(eps).ln())
            .sum();
        let loss = T::of(-s / n as f64);
        // Only `pred` participates in the gradient graph.
        let needs = self.needs_grad[pred.0];
        self.values.push(Tensor::scalar(loss));
        self.needs_grad.push(needs);
        let output = Var(self.values.len() - 1);
        if needs {
            self.nodes.push(Node {
                inputs: vec![target, pred],
                output,
                op: Op::CrossEntropy { eps },
            });
        }
        Ok(output)
    }

    /// Cross-correlation of `x: N x C x H x W` with `w: F x C x kh x kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (f, c2, kh, kw) = self.value(w).dims4("conv2d")?;
        let geom = ConvGeometry::new(c, h, wd, kh, kw, stride, padding).filter(|_| c == c2).ok_or_else(|| {
            Error::ShapeMismatch {
                op: "conv2d",
                left: vec![n, c, h, wd],
                right: vec![f, c2, kh, kw],
            }
        })?;
        let pl = geom.patch_len();
        let ol = geom.out_len();
        let mut cols = vec![T::zero(); n * pl * ol];
        {
            let xs = self.value(x).data();
            par::for_each_chunk_mut(&mut cols, pl * ol, |s, chunk| {
                kernels::im2col(&geom, &xs[s * c * h * wd..(s + 1) * c * h * wd], chunk);
            });
        }
        let mut out = vec![T::zero(); n * f * ol];
        {
            let ws = self.value(w).data();
            let cols = &cols;
            par::for_each_chunk_mut(&mut out, f * ol, |s, chunk| {
                kernels::gemm_serial(f, pl, ol, ws, false, &cols[s * pl * ol..(s + 1) * pl * ol], false, T::zero(), chunk);
            });
        }
        Ok(self.push(
            Op::Conv2d { geom, cols },
            vec![x, w],
            Tensor::raw(vec![n, f, geom.out_h, geom.out_w], out),
        ))
    }

    /// 2x2 average pooling with stride 2 (trailing odd rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid(format!("avg_pool2 needs at least 2x2 input, got {h}x{w}")));
        }
        let xs = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let p = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x0) = (2 * oy, 2 * ox);
                    out.push((p[y * w + x0] + p[y * w + x0 + 1] + p[(y + 1) * w + x0] + p[(y + 1) * w + x0 + 1]) * quarter);
                }
            }
        }
        Ok(self.push(Op::AvgPool2, vec![x], Tensor::raw(vec![n, c, oh, ow], out)))
    }

    /// Mean over spatial axes: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let s = h * w;
        let xs = self.value(x).data();
        let out = (0..n * c)
            .map(|p| T::of(xs[p * s..(p + 1) * s].iter().map(|v| v.f64()).sum::<f64>() / s as f64))
            .collect();
        Ok(self.push(Op::GlobalAvgPool, vec![x], Tensor::raw(vec![n, c], out)))
    }

    /// Batch normalization over the channel axis of an `N x D` or
    /// `N x C x H x W` input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<BatchNormOutput> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = match shape.as_slice() {
            [n, d] => (*n, *d, 1),
            [n, c, h, w] => (*n, *c, h * w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: shape,
                    right: vec![0, 0],
                })
            }
        };
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: shape,
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let xs = self.value(x).data();
        let m = (n * s) as f64;
        let idx = |b: usize, ch: usize, k: usize| (b * c + ch) * s + k;
        let (train, mean, var_biased, batch_var) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        for k in 0..s {
                            acc += xs[idx(b, ch, k)].f64();
                        }
                    }
                    let mu = acc / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for k in 0..s {
                            let d = xs[idx(b, ch, k)].f64() - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
                (true, mean, var, unbiased)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::invalid("batch_norm running stats have the wrong length"));
                }
                (
                    false,
                    mean.iter().map(|v| v.f64()).collect(),
                    var.iter().map(|v| v.f64()).collect(),
                    Vec::new(),
                )
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                for k in 0..s {
                    let i = idx(b, ch, k);
                    let h = (xs[i].f64() - mean[ch]) * inv_std[ch];
                    xhat[i] = T::of(h);
                    out[i] = T::of(g[ch].f64() * h + bt[ch].f64());
                }
            }
        }
        let var = self.push(
            Op::BatchNorm {
                layout: (n, c, s),
                xhat,
                inv_std,
                train,
            },
            vec![x, gamma, beta],
            Tensor::raw(shape, out),
        );
        Ok(BatchNormOutput {
            out: var,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var,
        })
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(Op::Custom(backward), inputs.to_vec(), output)
    }

    /// Reverse accumulation from a scalar `loss`. Gradients land in the grad
    /// slot of every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            let Some(gout) = grads[node.output.0].take() else {
                continue;
            };
            let input_grads = self.node_backward(node, &gout);
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.needs_grad[inp.0] {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the output gradient for leaves reached as outputs (none).
        }
        self.nodes = nodes;
        for (i, g) in grads.into_iter().enumerate() {
            if self.values[i].requires_grad() {
                let len = self.values[i].len();
                self.values[i].set_grad(g.unwrap_or_else(|| vec![T::zero(); len]));
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let inp = |i: usize| &self.values[node.inputs[i].0];
        let out = &self.values[node.output.0];
        let want = |i: usize| self.needs_grad[node.inputs[i].0];
        match &node.op {
            Op::MatMul { transpose_rhs } => {
                let (a, b) = (inp(0), inp(1));
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = out.shape()[1];
                let da = want(0).then(|| {
                    let mut da = vec![T::zero(); n * k];
                    // dA = dC * B^T (or dC * B when B is stored transposed)
                    kernels::gemm(n, m, k, g, false, b.data(), !transpose_rhs, T::zero(), &mut da);
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![T::zero(); k * m];
                    if *transpose_rhs {
                        // dB (m x k) = dC^T * A
                        kernels::gemm(m, n, k, g, true, a.data(), false, T::zero(), &mut db);
                    } else {
                        kernels::gemm(k, n, m, a.data(), true, g, false, T::zero(), &mut db);
                    }
                    db
                });
                vec![da, db]
            }
            Op::RowDot => {
                let (a, b) = (inp(0), inp(1));
                let d = a.shape()[1];
                let scaled = |src: &Tensor<T>| -> Vec<T> {
                    src.data().iter().enumerate().map(|(i, &v)| v * g[i / d]).collect()
                };
                vec![want(0).then(|| scaled(b)), want(1).then(|| scaled(a))]
            }
            Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
            Op::Sub => vec![
                want(0).then(|| g.to_vec()),
                want(1).then(|| g.iter().map(|&v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                vec![
                    want(0).then(|| g.iter().zip(b.data()).map(|(&x, &y)| x * y).collect()),
                    want(1).then(|| g.iter().zip(a.data()).map(|(&x, &y)| x * y).collect()),
                ]
            }
            Op::AddRowBias => {
                let k = inp(1).len();
                let db = want(1).then(|| {
                    let mut acc = vec![0.0f64; k];
                    for (i, &v) in g.iter().enumerate() {
                        acc[i % k] += v.f64();
                    }
                    acc.into_iter().map(T::of).collect()
                });
                vec![want(0).then(|| g.to_vec()), db]
            }
            Op::Scale(s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
            Op::Relu => vec![Some(
                inp(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect(),
            )],
            Op::Sum => vec![Some(vec![g[0]; inp(0).len()])],
            Op::Mean => {
                let len = inp(0).len();
                vec![Some(vec![g[0] / T::of(len as f64); len])]
            }
            Op::WeightedSum(w) => w.iter().map(|&wi| Some(vec![wi * g[0]])).collect(),
            Op::ConcatCols(widths) => {
                let total: usize = widths.iter().sum();
                let n = out.shape()[0];
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (p, &w) in widths.iter().enumerate() {
                    res.push(want(p).then(|| {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                res
            }
            Op::L2Normalize { norms, eps } => {
                let d = out.shape()[1];
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    if nrm >= *eps {
                        let yg = kernels::dot(&y[r.clone()], &g[r.clone()]);
                        for j in r {
                            dx[j] = T::of((g[j].f64() - y[j].f64() * yg) / nrm);
                        }
                    } else {
                        for j in r {
                            dx[j] = T::of(g[j].f64() / eps);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Softmax { temperature } => {
                let k = out.shape()[1];
                let p = out.data();
                let mut dx = vec![T::zero(); p.len()];
                for i in 0..out.shape()[0] {
                    let r = i * k..(i + 1) * k;
                    let pg = kernels::dot(&p[r.clone()], &g[r.clone()]);
                    for j in r {
                        dx[j] = T::of(p[j].f64() * (g[j].f64() - pg) / temperature);
                    }
                }
                vec![Some(dx)]
            }
            Op::LogSumExp { temperature, mask } => {
                let x = inp(0);
                let k = x.shape()[1];
                let mut dx = vec![T::zero(); x.len()];
                for i in 0..x.shape()[0] {
                    let r = i * k..(i + 1) * k;
                    kernels::softmax_row(&x.data()[r.clone()], *temperature, mask.as_ref().map(|m| m.row(i)), &mut dx[r.clone()]);
                    let scale = g[i].f64() / temperature;
                    for v in &mut dx[r] {
                        *v = T::of(v.f64() * scale);
                    }
                }
                vec![Some(dx)]
            }
            Op::CrossEntropy { eps } => {
                let (t, p) = (inp(0), inp(1));
                let n = p.shape()[0] as f64;
                let dp = t
                    .data()
                    .iter()
                    .zip(p.data())
                    .map(|(&tv, &pv)| {
                        if tv == T::zero() || pv.f64() < *eps {
                            T::zero()
                        } else {
                            T::of(-g[0].f64() * tv.f64() / (n * pv.f64()))
                        }
                    })
                    .collect();
                vec![None, Some(dp)]
            }
            Op::Conv2d { geom, cols } => {
                let (x, w) = (inp(0), inp(1));
                let n = x.shape()[0];
                let f = w.shape()[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let img = geom.channels * geom.height * geom.width;
                let dx = want(0).then(|| {
                    let mut dx = vec![T::zero(); x.len()];
                    let ws = w.data();
                    par::for_each_chunk_mut(&mut dx, img, |s, chunk| {
                        let mut dcols = vec![T::zero(); pl * ol];
                        kernels::gemm_serial(pl, f, ol, ws, true, &g[s * f * ol..(s + 1) * f * ol], false, T::zero(), &mut dcols);
                        kernels::col2im(geom, &dcols, chunk);
                    });
                    dx
                });
                let dw = want(1).then(|| {
                    let mut dw = vec![T::zero(); w.len()];
                    for s in 0..n {
                        kernels::gemm(
                            f,
                            ol,
                            pl,
                            &g[s * f * ol..(s + 1) * f * ol],
                            false,
                            &cols[s * pl * ol..(s + 1) * pl * ol],
                            true,
                            T::one(),
                            &mut dw,
                        );
                    }
                    dw
                });
                vec![dx, dw]
            }
            Op::AvgPool2 => {
                let x = inp(0);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let planes = x.shape()[0] * x.shape()[1];
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); x.len()];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(p * oh + oy) * ow + ox] * quarter;
                            let base = p * h * w;
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[base + (2 * oy + dy) * w + 2 * ox + dxo] = gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::GlobalAvgPool => {
                let x = inp(0);
                let s = x.shape()[2] * x.shape()[3];
                let inv = T::of(1.0 / s as f64);
                let dx = (0..x.len()).map(|i| g[i / s] * inv).collect();
                vec![Some(dx)]
            }
            Op::BatchNorm {
                layout: (n, c, s),
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = (*n, *c, *s);
                let gamma = inp(1).data();
                let idx = |b: usize, ch: usize, k: usize| (b * c + ch) * s + k;
                let m = (n * s) as f64;
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in 0..s {
                            let i = idx(b, ch, k);
                            dgamma[ch] += g[i].f64() * xhat[i].f64();
                            dbeta[ch] += g[i].f64();
                        }
                    }
                }
                let dx = want(0).then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let gm = gamma[ch].f64();
                        for b in 0..n {
                            for k in 0..s {
                                let i = idx(b, ch, k);
                                let v = if *train {
                                    gm * inv_std[ch] / m
                                        * (m * g[i].f64() - dbeta[ch] - xhat[i].f64() * dgamma[ch])
                                } else {
                                    gm * inv_std[ch] * g[i].f64()
                                };
                                dx[i] = T::of(v);
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    want(1).then(|| dgamma.into_iter().map(T::of).collect()),
                    want(2).then(|| dbeta.into_iter().map(T::of).collect()),
                ]
            }
            Op::Custom(f) => {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
                f(&inputs, out, g)
            }
        }
    }
}
