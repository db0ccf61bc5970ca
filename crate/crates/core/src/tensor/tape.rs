use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{Tensor, TensorError, TensorResult};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Zero,
    Replicate,
}

/// Batch normalization statistics source.
#[derive(Debug, Clone)]
pub enum BatchNormMode<'a, T> {
    /// Normalize by the batch's own statistics.
    Train { eps: T },
    /// Normalize by stored running statistics.
    Eval {
        mean: &'a [T],
        var: &'a [T],
        eps: T,
    },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool2d {
        input: Var,
        geom: PoolGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SliceColumns {
        input: Var,
        start: usize,
    },
    SampleFilter {
        input: Var,
        kernels: Var,
        k: usize,
    },
    ColorAffine {
        input: Var,
        matrix: Var,
        shift: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run computation record. Build one per step, call
/// [`Tape::backward`] once, then drop it.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> TensorResult<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TensorError::Dimension {
            op,
            axis,
            expected,
            got,
        })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a graph input. Gradients are only tracked for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "add",
                reason: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op: "mul",
                reason: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    /// 2-D convolution with odd square kernels and "same" padding of `k/2`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        mode: PaddingMode,
    ) -> TensorResult<Var> {
        let (n, c_in, h, w) = self.value(input).dims4("conv2d")?;
        let (c_out, wc, kh, kw) = self.value(weight).dims4("conv2d")?;
        check_dim("conv2d", "input channels", wc, c_in)?;
        check_dim("conv2d", "kernel width", kh, kw)?;
        if kh % 2 == 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                reason: format!("kernel size {kh} must be odd"),
            });
        }
        if let Some(b) = bias {
            check_dim("conv2d", "bias", c_out, self.value(b).len())?;
        }
        if stride == 0 {
            return Err(TensorError::Shape {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let pad = kh / 2;
        let geom = ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kh) / stride + 1,
            mode,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Average pooling; windows overlapping the zero-padded border are
    /// averaged over their in-image cells only.
    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize, pad: usize) -> TensorResult<Var> {
        let (n, c, h, w) = self.value(input).dims4("avg_pool2d")?;
        if kernel == 0 || stride == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
            return Err(TensorError::Shape {
                op: "avg_pool2d",
                reason: format!("kernel {kernel} (pad {pad}) does not fit {h}x{w} input"),
            });
        }
        if pad >= kernel {
            return Err(TensorError::Shape {
                op: "avg_pool2d",
                reason: format!("padding {pad} must be smaller than kernel {kernel}"),
            });
        }
        let geom = PoolGeometry {
            planes: n * c,
            h,
            w,
            k: kernel,
            stride,
            pad,
            h_out: (h + 2 * pad - kernel) / stride + 1,
            w_out: (w + 2 * pad - kernel) / stride + 1,
        };
        let data = kernels::avg_pool_forward(self.value(input).data(), &geom);
        let out = Tensor::new(vec![n, c, geom.h_out, geom.w_out], data)?;
        Ok(self.push(out, Op::AvgPool2d { input, geom }, &[input]))
    }

    /// Per-channel batch normalization over `(N, H, W)`. In training mode the
    /// returned statistics are the batch mean and unbiased variance.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> TensorResult<(Var, Option<super::BatchStats<T>>)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("batch_norm2d")?;
        check_dim("batch_norm2d", "gamma", c, self.value(gamma).len())?;
        check_dim("batch_norm2d", "beta", c, self.value(beta).len())?;
        let hw = h * w;
        let count = n * hw;
        let (mean, var, eps, batch_stats) = match mode {
            BatchNormMode::Train { eps } => {
                if count < 2 {
                    return Err(TensorError::DegenerateBatch { count });
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        acc += x.data()[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let m = acc / T::of(count as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &x.data()[(b * c + ch) * hw..][..hw] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::of(count as f64);
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                check_dim("batch_norm2d", "running mean", c, mean.len())?;
                check_dim("batch_norm2d", "running var", c, var.len())?;
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&x.data()[off..off + hw]) {
                    *o = v * scale + shift;
                }
            }
        }
        let shape = x.shape().to_vec();
        let stats = batch_stats.then(|| {
            let correction = T::of(count as f64 / (count - 1) as f64);
            super::BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * correction).collect(),
            }
        });
        let out = Tensor::new(shape, out)?;
        let var_out = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        );
        Ok((var_out, stats))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> TensorResult<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let denom = T::of(hw as f64);
        let data = (0..n * c)
            .map(|p| x.data()[p * hw..(p + 1) * hw].iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    /// `input · weightᵀ + bias` for `input: N×F`, `weight: G×F`, `bias: G`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> TensorResult<Var> {
        let (n, f) = self.value(input).dims2("linear")?;
        let (g, wf) = self.value(weight).dims2("linear")?;
        check_dim("linear", "features", wf, f)?;
        check_dim("linear", "bias", g, self.value(bias).len())?;
        let mut out = Vec::with_capacity(n * g);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            f,
            g,
            T::one(),
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        let out = Tensor::new(vec![n, g], out)?;
        Ok(self.push(out, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Batch-mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> TensorResult<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        check_dim("softmax_cross_entropy", "labels", n, labels.len())?;
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            loss += denom.ln() + max - row[label];
        }
        let out = Tensor::scalar(loss / T::of(n as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Columns `start..start+len` of an `N×F` matrix.
    pub fn slice_columns(&mut self, input: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (n, f) = self.value(input).dims2("slice_columns")?;
        if start + len > f {
            return Err(TensorError::Shape {
                op: "slice_columns",
                reason: format!("columns {start}..{} exceed width {f}", start + len),
            });
        }
        let x = self.value(input).data();
        let data = (0..n).flat_map(|i| x[i * f + start..i * f + start + len].iter().copied()).collect();
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.push(out, Op::SliceColumns { input, start }, &[input]))
    }

    /// Filters every channel of sample `i` with the `k×k` kernel in row `i`
    /// of `kernels` (`N×k²`), replicate padding, same spatial size.
    pub fn sample_filter(&mut self, input: Var, kernels: Var) -> TensorResult<Var> {
        let dims = self.value(input).dims4("sample_filter")?;
        let (kn, kk) = self.value(kernels).dims2("sample_filter")?;
        check_dim("sample_filter", "batch", dims.0, kn)?;
        let k = (kk as f64).sqrt().round() as usize;
        if k * k != kk || k % 2 == 0 {
            return Err(TensorError::Shape {
                op: "sample_filter",
                reason: format!("{kk} kernel taps do not form an odd square"),
            });
        }
        let data =
            kernels::sample_filter_forward(self.value(input).data(), self.value(kernels).data(), dims, k);
        let out = Tensor::new(self.value(input).shape().to_vec(), data)?;
        Ok(self.push(out, Op::SampleFilter { input, kernels, k }, &[input, kernels]))
    }

    /// Per-pixel `x ← M·x + s` with a `C×C` matrix (row `i` of `matrix`,
    /// `N×C²`) and shift (row `i` of `shift`, `N×C`) per sample.
    pub fn color_affine(&mut self, input: Var, matrix: Var, shift: Var) -> TensorResult<Var> {
        let (n, c, h, w) = self.value(input).dims4("color_affine")?;
        let (mn, mc) = self.value(matrix).dims2("color_affine")?;
        let (sn, sc) = self.value(shift).dims2("color_affine")?;
        check_dim("color_affine", "matrix batch", n, mn)?;
        check_dim("color_affine", "matrix entries", c * c, mc)?;
        check_dim("color_affine", "shift batch", n, sn)?;
        check_dim("color_affine", "shift entries", c, sc)?;
        let hw = h * w;
        let (x, m, s) = (
            self.value(input).data(),
            self.value(matrix).data(),
            self.value(shift).data(),
        );
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for i in 0..c {
                let dst = &mut out[(b * c + i) * hw..][..hw];
                dst.fill(s[b * c + i]);
                for j in 0..c {
                    let coef = m[b * c * c + i * c + j];
                    let src = &x[(b * c + j) * hw..][..hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += coef * v;
                    }
                }
            }
        }
        let out = Tensor::new(self.value(input).shape().to_vec(), out)?;
        Ok(self.push(out, Op::ColorAffine { input, matrix, shift }, &[input, matrix, shift]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let t = Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape");
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    send(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if needs(*b) {
                    send(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => send(*a, gd.iter().map(|&g| g * *f).collect()),
            Op::Sum(a) => send(*a, vec![gd[0]; self.value(*a).len()]),
            Op::Reshape(a) => send(*a, gd.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (needs(*input), needs(*weight), bias.is_some_and(needs));
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    geom,
                    need,
                );
                if let Some(d) = cg.input {
                    send(*input, d);
                }
                if let Some(d) = cg.weight {
                    send(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    send(*b, d);
                }
            }
            Op::AvgPool2d { input, geom } => send(*input, kernels::avg_pool_backward(gd, geom)),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("batch_norm2d").expect("recorded NCHW");
                let hw = h * w;
                let count = T::of((n * hw) as f64);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for (&go, &v) in gd[off..off + hw].iter().zip(&x.data()[off..off + hw]) {
                            dbeta[ch] += go;
                            dgamma[ch] += go * (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if needs(*input) {
                    let mut dx = vec![T::zero(); x.len()];
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for ((d, &go), &v) in dx[off..off + hw]
                                .iter_mut()
                                .zip(&gd[off..off + hw])
                                .zip(&x.data()[off..off + hw])
                            {
                                *d = if *batch_stats {
                                    let xhat = (v - mean[ch]) * inv_std[ch];
                                    k * (go - dbeta[ch] / count - xhat * dgamma[ch] / count)
                                } else {
                                    k * go
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.value(*a).dims4("global_avg_pool").expect("recorded NCHW");
                let hw = h * w;
                let denom = T::of(hw as f64);
                send(*a, gd.iter().flat_map(|&g| std::iter::repeat(g / denom).take(hw)).collect());
            }
            Op::Linear { input, weight, bias } => {
                let (n, f) = self.value(*input).dims2("linear").expect("recorded");
                let gdim = self.value(*bias).len();
                if needs(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, gdim, f, T::one(), gd, false, self.value(*weight).data(), false, T::zero(), &mut dx);
                    send(*input, dx);
                }
                if needs(*weight) {
                    let mut dw = vec![T::zero(); gdim * f];
                    T::gemm(gdim, n, f, T::one(), gd, true, self.value(*input).data(), false, T::zero(), &mut dw);
                    send(*weight, dw);
                }
                if needs(*bias) {
                    let mut db = vec![T::zero(); gdim];
                    for row in gd.chunks(gdim) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = gd[0] / T::of(n as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * c + l] -= scale;
                }
                send(*logits, dz);
            }
            Op::SliceColumns { input, start } => {
                let (n, f) = self.value(*input).dims2("slice_columns").expect("recorded");
                let len = g.len() / n.max(1);
                let mut dx = vec![T::zero(); n * f];
                for i in 0..n {
                    dx[i * f + start..i * f + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                send(*input, dx);
            }
            Op::SampleFilter { input, kernels: kv, k } => {
                let dims = self.value(*input).dims4("sample_filter").expect("recorded");
                let (dx, dk) = kernels::sample_filter_backward(
                    self.value(*input).data(),
                    self.value(*kv).data(),
                    gd,
                    dims,
                    *k,
                    (needs(*input), needs(*kv)),
                );
                if let Some(d) = dx {
                    send(*input, d);
                }
                if let Some(d) = dk {
                    send(*kv, d);
                }
            }
            Op::ColorAffine { input, matrix, shift } => {
                let (n, c, h, w) = self.value(*input).dims4("color_affine").expect("recorded");
                let hw = h * w;
                let x = self.value(*input).data();
                let m = self.value(*matrix).data();
                if needs(*input) {
                    let mut dx = vec![T::zero(); x.len()];
                    for b in 0..n {
                        for i in 0..c {
                            let go = &gd[(b * c + i) * hw..][..hw];
                            for j in 0..c {
                                let coef = m[b * c * c + i * c + j];
                                for (d, &gv) in dx[(b * c + j) * hw..][..hw].iter_mut().zip(go) {
                                    *d += coef * gv;
                                }
                            }
                        }
                    }
                    send(*input, dx);
                }
                if needs(*matrix) {
                    let mut dm = vec![T::zero(); n * c * c];
                    for b in 0..n {
                        for i in 0..c {
                            let go = &gd[(b * c + i) * hw..][..hw];
                            for j in 0..c {
                                let xs = &x[(b * c + j) * hw..][..hw];
                                dm[b * c * c + i * c + j] = go.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                            }
                        }
                    }
                    send(*matrix, dm);
                }
                if needs(*shift) {
                    let ds = (0..n * c).map(|p| gd[p * hw..(p + 1) * hw].iter().copied().sum()).collect();
                    send(*shift, ds);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not influence the loss or
    /// does not track gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when nothing reached it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}
