use std::sync::Arc;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{DType, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution hyperparameters. Convolutions never carry a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, dilation: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
            groups,
        }
    }

    /// Stride-`stride` convolution whose output keeps the input's spatial size
    /// at stride 1.
    pub fn same(kernel: usize, dilation: usize, stride: usize, groups: usize) -> Self {
        let span = dilation * (kernel - 1) + 1;
        Self::new(stride, dilation, (span - 1) / 2, groups)
    }

    fn geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

type Taps = Arc<[(usize, usize)]>;

enum Op {
    Leaf,
    Conv { x: Var, k: Var, geom: ConvGeom, taps: Option<Taps> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, scale: Vec<f64> },
    Relu { x: Var },
    AvgPool { x: Var, geom: PoolGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Subsample { x: Var, stride: usize },
    Softmax { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Concat { xs: Vec<Var> },
    Sum { x: Var },
    RecipClamped { x: Var, clamped: bool },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: Var },
    AddN { xs: Vec<Var> },
    WeightedSum { xs: Vec<Var>, w: Var },
    MulConst { x: Var, c: f64 },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ComposeSeparable { dw: Var, pw: Var },
    DepthwiseToDense { dw: Var },
    Embed { k: Var, dilation: usize },
    Normalize { x: Var, groups: usize, sigma: Vec<f64>, clamped: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Backward replays it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    dtype: DType,
}

/// Accumulated gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    dtype: DType,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; unreached values get zeros of their shape.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0], self.dtype),
        }
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Self {
            nodes: Vec::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(what.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn out(&self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let dtype = self.dtype;
        let data = if dtype == DType::F32 {
            data.into_iter().map(|v| dtype.round(v)).collect()
        } else {
            data
        };
        Tensor::from_parts(shape, data, dtype)
    }

    /// Records a leaf. `requires_grad` leaves are the values gradients are
    /// reported for.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = if value.dtype() == self.dtype {
            value
        } else {
            value.cast(self.dtype)
        };
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, p: ConvParams) -> Result<Var> {
        self.conv2d_taps(x, k, p, None)
    }

    /// Convolution that only visits the listed kernel positions. Entries of
    /// `k` outside `taps` must be zero.
    pub fn conv2d_taps(
        &mut self,
        x: Var,
        k: Var,
        p: ConvParams,
        taps: Option<Arc<[(usize, usize)]>>,
    ) -> Result<Var> {
        if p.stride == 0 || p.dilation == 0 || p.groups == 0 {
            return Err(TensorError::Parameter(format!(
                "conv2d needs positive stride/dilation/groups, got {p:?}"
            )));
        }
        let xs = self.value(x).dims4("conv2d input")?;
        let ks = self.value(k).dims4("conv2d kernel")?;
        let [_, c, h, w] = xs;
        let [o, cg, kh, kw] = ks;
        if c % p.groups != 0 || o % p.groups != 0 {
            return Err(TensorError::Dimension(format!(
                "conv2d: channels {c} / out {o} not divisible by groups {}",
                p.groups
            )));
        }
        if cg != c / p.groups {
            return Err(TensorError::Dimension(format!(
                "conv2d: kernel expects {cg} input channels per group, input has {}",
                c / p.groups
            )));
        }
        let geom = p.geom();
        if kernels::conv_out_size(h, kh, &geom).is_none()
            || kernels::conv_out_size(w, kw, &geom).is_none()
        {
            return Err(TensorError::Dimension(format!(
                "conv2d: kernel {kh}x{kw} at dilation {} exceeds padded input {h}x{w}",
                p.dilation
            )));
        }
        let (data, shape) = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(k).data(),
            ks,
            &geom,
            taps.as_deref(),
        );
        let v = self.out(shape.to_vec(), data);
        let rg = self.requires(x) || self.requires(k);
        self.push(v, Op::Conv { x, k, geom, taps }, rg, "conv2d")
    }

    /// Train-mode batch normalization without affine parameters. Returns the
    /// output plus the batch mean and unbiased variance for running statistics.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.value(x).dims4("batch_norm")?;
        let [n, c, h, w] = xs;
        let count = n * h * w;
        if count < 2 {
            return Err(TensorError::Parameter(format!(
                "batch_norm in train mode needs N*H*W >= 2, got {count}"
            )));
        }
        let (mean, var) = kernels::channel_stats(self.value(x).data(), xs);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                for i in base..base + h * w {
                    data[i] = (src[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| v * count as f64 / (count - 1) as f64)
            .collect();
        let v = self.out(xs.to_vec(), data);
        let rg = self.requires(x);
        let out = self.push(v, Op::BatchNorm { x, inv_std }, rg, "batch_norm")?;
        Ok((out, mean, unbiased))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xs = self.value(x).dims4("batch_norm")?;
        let [n, c, h, w] = xs;
        if mean.len() != c || var.len() != c {
            return Err(TensorError::Dimension(format!(
                "batch_norm: {c} channels but {} running statistics",
                mean.len()
            )));
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                for i in base..base + h * w {
                    data[i] = (src[i] - mean[ch]) * scale[ch];
                }
            }
        }
        let v = self.out(xs.to_vec(), data);
        let rg = self.requires(x);
        self.push(v, Op::ChannelAffine { x, scale }, rg, "batch_norm_eval")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let v = self.out(src.shape().to_vec(), data);
        let rg = self.requires(x);
        self.push(v, Op::Relu { x }, rg, "relu")
    }

    fn pool_geom(&self, x: Var, kernel: usize, stride: usize, what: &str) -> Result<(PoolGeom, [usize; 4])> {
        if kernel == 0 || kernel % 2 == 0 || stride == 0 {
            return Err(TensorError::Parameter(format!(
                "{what}: kernel must be odd and positive, stride positive (got k={kernel}, s={stride})"
            )));
        }
        let xs = self.value(x).dims4(what)?;
        Ok((PoolGeom { kernel, stride }, xs))
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, xs) = self.pool_geom(x, kernel, stride, "avg_pool")?;
        let (data, shape) = kernels::avg_pool_forward(self.value(x).data(), xs, &geom);
        let v = self.out(shape.to_vec(), data);
        let rg = self.requires(x);
        self.push(v, Op::AvgPool { x, geom }, rg, "avg_pool")
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (geom, xs) = self.pool_geom(x, kernel, stride, "max_pool")?;
        let (data, argmax, shape) = kernels::max_pool_forward(self.value(x).data(), xs, &geom);
        let v = self.out(shape.to_vec(), data);
        let rg = self.requires(x);
        self.push(v, Op::MaxPool { x, argmax }, rg, "max_pool")
    }

    /// Keeps every `stride`-th row and column.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::Parameter("subsample stride must be positive".into()));
        }
        if stride == 1 {
            return Ok(x);
        }
        let [n, c, h, w] = self.value(x).dims4("subsample")?;
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    data.push(src[plane * h * w + oy * stride * w + ox * stride]);
                }
            }
        }
        let v = self.out(vec![n, c, oh, ow], data);
        let rg = self.requires(x);
        self.push(v, Op::Subsample { x, stride }, rg, "subsample")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.numel() == 0 {
            return Err(TensorError::Parameter("softmax of an empty vector".into()));
        }
        let data = softmax_slice(src.data());
        let v = self.out(src.shape().to_vec(), data);
        let rg = self.requires(x);
        self.push(v, Op::Softmax { x }, rg, "softmax")
    }

    /// Selects entries of a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if idx.is_empty() {
            return Err(TensorError::Parameter("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.numel()) {
            return Err(TensorError::Dimension(format!(
                "gather index {bad} out of range for {} elements",
                src.numel()
            )));
        }
        let data = idx.iter().map(|&i| src.data()[i]).collect();
        let v = self.out(vec![idx.len()], data);
        let rg = self.requires(x);
        self.push(v, Op::Gather { x, idx: idx.to_vec() }, rg, "gather")
    }

    /// Flattens and concatenates values into one vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Parameter("concat of nothing".into()));
        }
        let data: Vec<f64> = xs.iter().flat_map(|&x| self.value(x).data().to_vec()).collect();
        let n = data.len();
        let v = self.out(vec![n], data);
        let rg = xs.iter().any(|&x| self.requires(x));
        self.push(v, Op::Concat { xs: xs.to_vec() }, rg, "concat")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let v = self.out(vec![1], vec![s]);
        let rg = self.requires(x);
        self.push(v, Op::Sum { x }, rg, "sum")
    }

    /// `1 / max(x, eps)` for a scalar `x`.
    pub fn recip_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        if src.numel() != 1 {
            return Err(TensorError::Dimension("recip_clamped expects a scalar".into()));
        }
        let raw = src.item();
        let clamped = raw < eps;
        let v = self.out(vec![1], vec![1.0 / raw.max(eps)]);
        let rg = self.requires(x);
        self.push(v, Op::RecipClamped { x, clamped }, rg, "recip_clamped")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let v = self.out(t.shape().to_vec(), t.to_vec());
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul { a, b }, rg, "mul")
    }

    /// Multiplies a tensor by a scalar value.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Dimension("scale expects a scalar factor".into()));
        }
        let sv = self.value(s).item();
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * sv).collect();
        let v = self.out(src.shape().to_vec(), data);
        let rg = self.requires(x) || self.requires(s);
        self.push(v, Op::Scale { x, s }, rg, "scale")
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let v = self.out(src.shape().to_vec(), data);
        let rg = self.requires(x);
        self.push(v, Op::MulConst { x, c }, rg, "mul_const")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::Parameter("add_n of nothing".into()))?;
        if rest.is_empty() {
            return Ok(first);
        }
        let mut acc = self.value(first).data().to_vec();
        for &x in rest {
            self.value(first).expect_same_shape(self.value(x), "add_n")?;
            for (a, &b) in acc.iter_mut().zip(self.value(x).data()) {
                *a += b;
            }
        }
        let v = self.out(self.value(first).shape().to_vec(), acc);
        let rg = xs.iter().any(|&x| self.requires(x));
        self.push(v, Op::AddN { xs: xs.to_vec() }, rg, "add_n")
    }

    /// `Σ w_i · xs_i` for a weight vector `w` with one entry per input.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Parameter("weighted_sum of nothing".into()))?;
        let wv = self.value(w).data().to_vec();
        if wv.len() != xs.len() {
            return Err(TensorError::Dimension(format!(
                "weighted_sum: {} inputs but {} weights",
                xs.len(),
                wv.len()
            )));
        }
        let mut acc = vec![0.0; self.value(first).numel()];
        for (&x, &wi) in xs.iter().zip(&wv) {
            self.value(first).expect_same_shape(self.value(x), "weighted_sum")?;
            for (a, &b) in acc.iter_mut().zip(self.value(x).data()) {
                *a += wi * b;
            }
        }
        let v = self.out(self.value(first).shape().to_vec(), acc);
        let rg = self.requires(w) || xs.iter().any(|&x| self.requires(x));
        self.push(v, Op::WeightedSum { xs: xs.to_vec(), w }, rg, "weighted_sum")
    }

    /// NCHW -> NC by spatial averaging.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let src = self.value(x).data();
        let data = (0..n * c)
            .map(|p| src[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let v = self.out(vec![n, c], data);
        let rg = self.requires(x);
        self.push(v, Op::GlobalAvgPool { x }, rg, "global_avg_pool")
    }

    /// `x · wᵀ + b` for `x` (N, C), `w` (K, C), `b` (K).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, c, k) = match (xs, ws) {
            ([n, c], [k, c2]) if c == c2 => (*n, *c, *k),
            _ => {
                return Err(TensorError::Dimension(format!(
                    "linear: input {xs:?} incompatible with weight {ws:?}"
                )))
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [k] {
                return Err(TensorError::Dimension(format!(
                    "linear: bias shape {:?}, expected [{k}]",
                    self.value(b).shape()
                )));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut data = vec![0.0; n * k];
        for ni in 0..n {
            for ki in 0..k {
                let mut acc = b.map_or(0.0, |b| self.value(b).data()[ki]);
                for ci in 0..c {
                    acc += xd[ni * c + ci] * wd[ki * c + ci];
                }
                data[ni * k + ki] = acc;
            }
        }
        let v = self.out(vec![n, k], data);
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        self.push(v, Op::Linear { x, w, b }, rg, "linear")
    }

    /// Mean softmax cross-entropy of `logits` (N, K) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] => (*n, *k),
            s => {
                return Err(TensorError::Dimension(format!(
                    "cross_entropy expects (N, K) logits, got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(TensorError::Dimension(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Dimension(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (ni, &label) in labels.iter().enumerate() {
            let row = &z[ni * k..(ni + 1) * k];
            let p = softmax_slice(row);
            loss -= p[label].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        let v = self.out(vec![1], vec![loss / n as f64]);
        let rg = self.requires(logits);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Dense kernel equal to a depthwise kernel (C,1,k,k) followed by a
    /// pointwise kernel (O,C,1,1).
    pub fn compose_separable(&mut self, dw: Var, pw: Var) -> Result<Var> {
        let [c, one, kh, kw] = self.value(dw).dims4("compose_separable depthwise")?;
        let [o, c2, ph, pwid] = self.value(pw).dims4("compose_separable pointwise")?;
        if one != 1 || c2 != c || ph != 1 || pwid != 1 {
            return Err(TensorError::Dimension(format!(
                "compose_separable: depthwise {:?} incompatible with pointwise {:?}",
                self.value(dw).shape(),
                self.value(pw).shape()
            )));
        }
        let (dd, pd) = (self.value(dw).data(), self.value(pw).data());
        let taps = kh * kw;
        let mut data = vec![0.0; o * c * taps];
        for oi in 0..o {
            for ci in 0..c {
                let p = pd[oi * c + ci];
                for t in 0..taps {
                    data[(oi * c + ci) * taps + t] = p * dd[ci * taps + t];
                }
            }
        }
        let v = self.out(vec![o, c, kh, kw], data);
        let rg = self.requires(dw) || self.requires(pw);
        self.push(v, Op::ComposeSeparable { dw, pw }, rg, "compose_separable")
    }

    /// Dense (C,C,k,k) kernel equivalent to a depthwise (C,1,k,k) kernel.
    pub fn depthwise_to_dense(&mut self, dw: Var) -> Result<Var> {
        let [c, one, kh, kw] = self.value(dw).dims4("depthwise_to_dense")?;
        if one != 1 {
            return Err(TensorError::Dimension("depthwise kernel must have I = 1".into()));
        }
        let taps = kh * kw;
        let src = self.value(dw).data();
        let mut data = vec![0.0; c * c * taps];
        for ci in 0..c {
            data[(ci * c + ci) * taps..(ci * c + ci + 1) * taps]
                .copy_from_slice(&src[ci * taps..(ci + 1) * taps]);
        }
        let v = self.out(vec![c, c, kh, kw], data);
        let rg = self.requires(dw);
        self.push(v, Op::DepthwiseToDense { dw }, rg, "depthwise_to_dense")
    }

    /// Places a (O,I,k,k) kernel used at `dilation` into a centred
    /// (O,I,t,t) kernel for use at dilation 1.
    pub fn embed_kernel(&mut self, k: Var, target: usize, dilation: usize) -> Result<Var> {
        let [o, i, kh, kw] = self.value(k).dims4("embed_kernel")?;
        let offsets = embed_offsets(kh, kw, target, dilation)?;
        let src = self.value(k).data();
        let mut data = vec![0.0; o * i * target * target];
        for p in 0..o * i {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (ty, tx) = (offsets.0 + ky * dilation, offsets.1 + kx * dilation);
                    data[p * target * target + ty * target + tx] = src[p * kh * kw + ky * kw + kx];
                }
            }
        }
        let v = self.out(vec![o, i, target, target], data);
        let rg = self.requires(k);
        self.push(v, Op::Embed { k, dilation }, rg, "embed_kernel")
    }

    /// Standardizes a kernel to zero mean and unit population deviation,
    /// either over all elements or per output channel.
    pub fn normalize_kernel(&mut self, x: Var, eps_std: f64, per_output_channel: bool) -> Result<Var> {
        let src = self.value(x);
        let groups = if per_output_channel { src.shape()[0] } else { 1 };
        let len = src.numel() / groups;
        let mut data = vec![0.0; src.numel()];
        let mut sigma = Vec::with_capacity(groups);
        let mut clamped = Vec::with_capacity(groups);
        for gi in 0..groups {
            let part = &src.data()[gi * len..(gi + 1) * len];
            let mean = part.iter().sum::<f64>() / len as f64;
            let var = part.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let std = var.sqrt();
            let s = std.max(eps_std);
            for (d, &v) in data[gi * len..(gi + 1) * len].iter_mut().zip(part) {
                *d = (v - mean) / s;
            }
            sigma.push(s);
            clamped.push(std < eps_std);
        }
        let v = self.out(src.shape().to_vec(), data);
        let rg = self.requires(x);
        self.push(
            v,
            Op::Normalize {
                x,
                groups,
                sigma,
                clamped,
            },
            rg,
            "normalize_kernel",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::State(
                "backward called before a forward pass was recorded".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let dtype = self.dtype;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0, dtype));
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.requires(input) {
                    continue;
                }
                let contrib = if dtype == DType::F32 {
                    contrib.into_iter().map(|v| dtype.round(v)).collect()
                } else {
                    contrib
                };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib) {
                            *a = dtype.round(*a + c);
                        }
                    }
                    slot @ None => {
                        let shape = self.shape(input).to_vec();
                        *slot = Some(Tensor::from_parts(shape, contrib, dtype));
                    }
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            dtype,
        })
    }

    /// Vector-Jacobian products of one node for each of its inputs.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Vec<f64>)>> {
        let gd = g.data();
        let y = node.value.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, k, geom, taps } => {
                let xs = self.value(*x).dims4("conv2d")?;
                let ks = self.value(*k).dims4("conv2d")?;
                let ys = node.value.dims4("conv2d")?;
                let mut out = Vec::with_capacity(2);
                if self.requires(*x) {
                    out.push((
                        *x,
                        kernels::conv2d_grad_input(gd, ys, self.value(*k).data(), ks, xs, geom, taps.as_deref()),
                    ));
                }
                if self.requires(*k) {
                    out.push((
                        *k,
                        kernels::conv2d_grad_kernel(gd, ys, self.value(*x).data(), xs, ks, geom, taps.as_deref()),
                    ));
                }
                out
            }
            Op::BatchNorm { x, inv_std } => {
                let [n, c, h, w] = node.value.dims4("batch_norm")?;
                let m = (n * h * w) as f64;
                let mut dx = vec![0.0; gd.len()];
                for ch in 0..c {
                    let (mut sg, mut sgy) = (0.0, 0.0);
                    for ni in 0..n {
                        let base = (ni * c + ch) * h * w;
                        for i in base..base + h * w {
                            sg += gd[i];
                            sgy += gd[i] * y[i];
                        }
                    }
                    for ni in 0..n {
                        let base = (ni * c + ch) * h * w;
                        for i in base..base + h * w {
                            dx[i] = inv_std[ch] / m * (m * gd[i] - sg - y[i] * sgy);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::ChannelAffine { x, scale } => {
                let [n, c, h, w] = node.value.dims4("batch_norm_eval")?;
                let mut dx = vec![0.0; gd.len()];
                for p in 0..n * c {
                    let s = scale[p % c];
                    for i in p * h * w..(p + 1) * h * w {
                        dx[i] = gd[i] * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::AvgPool { x, geom } => {
                let xs = self.value(*x).dims4("avg_pool")?;
                let ys = node.value.dims4("avg_pool")?;
                vec![(*x, kernels::avg_pool_backward(gd, ys, xs, geom))]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&g, &i) in gd.iter().zip(argmax) {
                    dx[i] += g;
                }
                vec![(*x, dx)]
            }
            Op::Subsample { x, stride } => {
                let [n, c, h, w] = self.value(*x).dims4("subsample")?;
                let [_, _, oh, ow] = node.value.dims4("subsample")?;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[p * h * w + oy * stride * w + ox * stride] = gd[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Softmax { x } => {
                let dot: f64 = gd.iter().zip(y).map(|(g, p)| g * p).sum();
                let dx = gd.iter().zip(y).map(|(g, p)| p * (g - dot)).collect();
                vec![(*x, dx)]
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&g, &i) in gd.iter().zip(idx) {
                    dx[i] += g;
                }
                vec![(*x, dx)]
            }
            Op::Concat { xs } => {
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let n = self.value(x).numel();
                        let part = gd[offset..offset + n].to_vec();
                        offset += n;
                        (x, part)
                    })
                    .collect()
            }
            Op::Sum { x } => vec![(*x, vec![gd[0]; self.value(*x).numel()])],
            Op::RecipClamped { x, clamped } => {
                let d = if *clamped { 0.0 } else { -gd[0] * y[0] * y[0] };
                vec![(*x, vec![d])]
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, gd.iter().zip(bd).map(|(g, v)| g * v).collect()),
                    (*b, gd.iter().zip(ad).map(|(g, v)| g * v).collect()),
                ]
            }
            Op::Scale { x, s } => {
                let sv = self.value(*s).item();
                let xd = self.value(*x).data();
                let ds: f64 = gd.iter().zip(xd).map(|(g, v)| g * v).sum();
                vec![(*x, gd.iter().map(|g| g * sv).collect()), (*s, vec![ds])]
            }
            Op::MulConst { x, c } => vec![(*x, gd.iter().map(|g| g * c).collect())],
            Op::AddN { xs } => xs.iter().map(|&x| (x, gd.to_vec())).collect(),
            Op::WeightedSum { xs, w } => {
                let wv = self.value(*w).data();
                let mut out: Vec<(Var, Vec<f64>)> = xs
                    .iter()
                    .zip(wv)
                    .map(|(&x, &wi)| (x, gd.iter().map(|g| g * wi).collect()))
                    .collect();
                let dw = xs
                    .iter()
                    .map(|&x| gd.iter().zip(self.value(x).data()).map(|(g, v)| g * v).sum())
                    .collect();
                out.push((*w, dw));
                out
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = self.value(*x).dims4("global_avg_pool")?;
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    dx[p * h * w..(p + 1) * h * w].fill(gd[p] * inv);
                }
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; n * c];
                let mut dw = vec![0.0; k * c];
                for ni in 0..n {
                    for ki in 0..k {
                        let gv = gd[ni * k + ki];
                        for ci in 0..c {
                            dx[ni * c + ci] += gv * wd[ki * c + ci];
                            dw[ki * c + ci] += gv * xd[ni * c + ci];
                        }
                    }
                }
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    let db = (0..k).map(|ki| (0..n).map(|ni| gd[ni * k + ki]).sum()).collect();
                    out.push((*b, db));
                }
                out
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gd[0] / n as f64;
                let mut dz = probs.clone();
                for (ni, &l) in labels.iter().enumerate() {
                    dz[ni * k + l] -= 1.0;
                }
                dz.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, dz)]
            }
            Op::ComposeSeparable { dw, pw } => {
                let [o, c, kh, kw] = node.value.dims4("compose_separable")?;
                let taps = kh * kw;
                let (dd, pd) = (self.value(*dw).data(), self.value(*pw).data());
                let mut d_dw = vec![0.0; c * taps];
                let mut d_pw = vec![0.0; o * c];
                for oi in 0..o {
                    for ci in 0..c {
                        let p = pd[oi * c + ci];
                        let mut acc = 0.0;
                        for t in 0..taps {
                            let gv = gd[(oi * c + ci) * taps + t];
                            d_dw[ci * taps + t] += p * gv;
                            acc += dd[ci * taps + t] * gv;
                        }
                        d_pw[oi * c + ci] = acc;
                    }
                }
                vec![(*dw, d_dw), (*pw, d_pw)]
            }
            Op::DepthwiseToDense { dw } => {
                let [c, _, kh, kw] = node.value.dims4("depthwise_to_dense")?;
                let taps = kh * kw;
                let mut d = vec![0.0; c * taps];
                for ci in 0..c {
                    d[ci * taps..(ci + 1) * taps]
                        .copy_from_slice(&gd[(ci * c + ci) * taps..(ci * c + ci + 1) * taps]);
                }
                vec![(*dw, d)]
            }
            Op::Embed { k, dilation } => {
                let [o, i, kh, kw] = self.value(*k).dims4("embed_kernel")?;
                let t = node.value.shape()[2];
                let offsets = embed_offsets(kh, kw, t, *dilation)?;
                let mut d = vec![0.0; o * i * kh * kw];
                for p in 0..o * i {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (ty, tx) = (offsets.0 + ky * dilation, offsets.1 + kx * dilation);
                            d[p * kh * kw + ky * kw + kx] = gd[p * t * t + ty * t + tx];
                        }
                    }
                }
                vec![(*k, d)]
            }
            Op::Normalize {
                x,
                groups,
                sigma,
                clamped,
            } => {
                let len = y.len() / groups;
                let mut dx = vec![0.0; y.len()];
                for gi in 0..*groups {
                    let r = gi * len..(gi + 1) * len;
                    let gm = gd[r.clone()].iter().sum::<f64>() / len as f64;
                    let gym = if clamped[gi] {
                        0.0
                    } else {
                        gd[r.clone()].iter().zip(&y[r.clone()]).map(|(g, v)| g * v).sum::<f64>() / len as f64
                    };
                    for i in r {
                        dx[i] = (gd[i] - gm - y[i] * gym) / sigma[gi];
                    }
                }
                vec![(*x, dx)]
            }
        })
    }
}

fn embed_offsets(kh: usize, kw: usize, target: usize, dilation: usize) -> Result<(usize, usize)> {
    if target % 2 == 0 || dilation == 0 {
        return Err(TensorError::Parameter(format!(
            "embed target must be odd and dilation positive (target {target}, dilation {dilation})"
        )));
    }
    let (eh, ew) = (dilation * (kh - 1) + 1, dilation * (kw - 1) + 1);
    if eh > target || ew > target || eh % 2 == 0 || ew % 2 == 0 {
        return Err(TensorError::Parameter(format!(
            "kernel {kh}x{kw} at dilation {dilation} (effective {eh}x{ew}) does not fit odd target {target}"
        )));
    }
    Ok(((target - eh) / 2, (target - ew) / 2))
}

/// Kernel positions touched by a (kh, kw) kernel at `dilation` once embedded
/// into a `target`-sized kernel.
pub(crate) fn embedded_taps(kh: usize, kw: usize, target: usize, dilation: usize) -> Result<Vec<(usize, usize)>> {
    let (oy, ox) = embed_offsets(kh, kw, target, dilation)?;
    Ok((0..kh)
        .flat_map(|ky| (0..kw).map(move |kx| (oy + ky * dilation, ox + kx * dilation)))
        .collect())
}

/// Softmax with max subtraction.
pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
