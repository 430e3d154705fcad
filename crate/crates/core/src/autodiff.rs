//! Minimal tape-based reverse-mode differentiation engine.
//!
//! Exactly the operations the generator/discriminator pair needs, nothing
//! more: no broadcasting, no dynamic shapes beyond the batch dimension, no
//! operator fusion. Forward evaluation is eager; every op records its inputs
//! and enough context for a local backward rule, and [`Tape::backward`]
//! replays the records in reverse, accumulating gradients additively into
//! every `requires_grad` tensor reachable from the loss.
//!
//! All values are `f64`. Parameters are persisted as little-endian `f32` by
//! the checkpoint format; computation stays in doubles so that gradient
//! checks against central finite differences are meaningful.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batchnorm eval mode requested before any training step initialized running stats")]
    UninitializedStats,
    #[error("tensor data length {got} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, got: usize },
}

fn mismatch(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

// ============================================================
// Values
// ============================================================

/// A plain n-dimensional value: row-major data plus its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, DiffError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(DiffError::BadTensor {
                shape,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Running batch-normalization statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Whether batchnorm uses batch statistics (and updates running stats) or
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

// ============================================================
// Recorded operations
// ============================================================

enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Conv1x1 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: Mode,
        // Saved forward context: normalized input and per-channel 1/sqrt(var+eps).
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: TensorId,
    },
    SoftmaxRows {
        x: TensorId,
    },
    SoftmaxChannels {
        x: TensorId,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    ScaleAdd {
        a: TensorId,
        b: TensorId,
        alpha: TensorId,
    },
    Reshape {
        x: TensorId,
    },
    Transpose2d {
        x: TensorId,
    },
    SliceBatch {
        x: TensorId,
        index: usize,
    },
    StackBatch {
        xs: Vec<TensorId>,
    },
    BroadcastSpatial {
        x: TensorId,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Neg {
        x: TensorId,
    },
    AddScalar {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    MeanAll {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    Detach,
}

struct Node {
    tensor: Tensor,
    /// Lazily allocated on the backward sweep; `None` means all-zero.
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// The gradient buffer of a node, allocated on first write.
fn grad_buf<'n>(node: &'n mut Node, pool: &mut BufPool) -> &'n mut Vec<f64> {
    let n = node.tensor.numel();
    node.grad.get_or_insert_with(|| take_zeroed(pool, n))
}

/// Records a forward computation and replays it backward.
///
/// A tape and its tensors belong to one logical thread; there is no shared
/// mutation. Typical use is one fresh tape per training step; callers that
/// build many tapes should recycle buffers through [`Tape::with_pool`] /
/// [`Tape::into_pool`] to keep large intermediate allocations warm.
pub struct Tape {
    nodes: Vec<Node>,
    pool: BufPool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Recycled buffer storage, bucketed by capacity so repeated graph shapes
/// reuse identically sized allocations without reallocating.
#[derive(Default)]
pub struct BufPool {
    buckets: std::collections::BTreeMap<usize, Vec<Vec<f64>>>,
    count: usize,
}

/// Buffers below this length are cheaper to allocate fresh.
const POOL_MIN_LEN: usize = 256;
/// Cap on pooled buffers; the excess returns to the allocator.
const POOL_MAX_BUFS: usize = 16_384;

impl BufPool {
    /// A cleared buffer with capacity for at least `len` elements.
    fn take(&mut self, len: usize) -> Vec<f64> {
        if len >= POOL_MIN_LEN {
            if let Some(&key) = self.buckets.range(len..).next().map(|(k, _)| k) {
                let bucket = self.buckets.get_mut(&key).expect("bucket exists");
                let mut v = bucket.pop().expect("bucket non-empty");
                if bucket.is_empty() {
                    self.buckets.remove(&key);
                }
                self.count -= 1;
                v.clear();
                return v;
            }
        }
        Vec::with_capacity(len)
    }

    fn take_zeroed(&mut self, len: usize) -> Vec<f64> {
        let mut v = self.take(len);
        v.resize(len, 0.0);
        v
    }

    fn give(&mut self, v: Vec<f64>) {
        let cap = v.capacity();
        if cap >= POOL_MIN_LEN && self.count < POOL_MAX_BUFS {
            self.buckets.entry(cap).or_default().push(v);
            self.count += 1;
        }
    }
}

fn take_zeroed(pool: &mut BufPool, len: usize) -> Vec<f64> {
    pool.take_zeroed(len)
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            pool: BufPool::default(),
        }
    }

    /// A tape that draws its intermediate buffers from `pool`.
    pub fn with_pool(pool: BufPool) -> Tape {
        Tape {
            nodes: Vec::new(),
            pool,
        }
    }

    /// Tears the tape down, returning every buffer for reuse.
    pub fn into_pool(mut self) -> BufPool {
        let mut pool = std::mem::take(&mut self.pool);
        for node in self.nodes.drain(..) {
            pool.give(node.tensor.data);
            if let Some(g) = node.grad {
                pool.give(g);
            }
            if let Op::BatchNorm { xhat, .. } = node.op {
                pool.give(xhat);
            }
        }
        pool
    }

    fn zeroed(&mut self, len: usize) -> Vec<f64> {
        self.pool.take_zeroed(len)
    }

    fn empty(&mut self, len_hint: usize) -> Vec<f64> {
        self.pool.take(len_hint)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> TensorId {
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Accumulated gradient; `None` until [`Tape::backward`] has reached
    /// this tensor (an unreached gradient is identically zero).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            grad: None,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ============================================================
    // Operations
    // ============================================================

    /// `a[m,k] x b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = self.zeroed(m * n);
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul { a, b },
            requires,
        ))
    }

    /// Affine map `x[n,in] x w[out,in]^T + b[out] -> [n,out]`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, DiffError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sw[0] != sb[0] {
            return Err(mismatch("linear", format!("x{sx:?} w{sw:?} b{sb:?}")));
        }
        let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let mut out = self.zeroed(n * d_out);
        {
            let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
            for s in 0..n {
                let xrow = &xd[s * d_in..(s + 1) * d_in];
                let orow = &mut out[s * d_out..(s + 1) * d_out];
                for o in 0..d_out {
                    let wrow = &wd[o * d_in..(o + 1) * d_in];
                    orow[o] = dot(xrow, wrow) + bd[o];
                }
            }
        }
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, d_out],
                data: out,
            },
            Op::Linear { x, w, b },
            requires,
        ))
    }

    /// Per-position linear map `x[n,ci,h,w] * w[co,ci] + b[co] -> [n,co,h,w]`.
    ///
    /// With kernel 1 and stride 1 the transpose convolution is the same map,
    /// so this op serves both networks.
    pub fn conv1x1(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, DiffError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[1] || sw[0] != sb[0] {
            return Err(mismatch("conv1x1", format!("x{sx:?} w{sw:?} b{sb:?}")));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        let plane = h * wd;
        let mut out = self.zeroed(n * co * plane);
        {
            let (xd, wt, bd) = (self.data(x), self.data(w), self.data(b));
            for s in 0..n {
                let xs = &xd[s * ci * plane..(s + 1) * ci * plane];
                let os = &mut out[s * co * plane..(s + 1) * co * plane];
                for o in 0..co {
                    let orow = &mut os[o * plane..(o + 1) * plane];
                    orow.fill(bd[o]);
                    let wrow = &wt[o * ci..(o + 1) * ci];
                    for i in 0..ci {
                        axpy(orow, wrow[i], &xs[i * plane..(i + 1) * plane]);
                    }
                }
            }
        }
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, co, h, wd],
                data: out,
            },
            Op::Conv1x1 { x, w, b },
            requires,
        ))
    }

    /// Channel-wise batch normalization over `x[n,c,h,w]`.
    ///
    /// Train mode normalizes with batch statistics (biased variance) and
    /// folds them into `stats` with `running = momentum * running +
    /// (1 - momentum) * batch`. Eval mode normalizes with the frozen running
    /// statistics and leaves `stats` untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut RunningStats,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(mismatch("batchnorm", format!("x{sx:?} is not 4-d")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(mismatch(
                "batchnorm",
                format!(
                    "gamma{:?} beta{:?} stats[{}] vs {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    stats.channels(),
                    c
                ),
            ));
        }
        if mode == Mode::Eval && !stats.initialized {
            return Err(DiffError::UninitializedStats);
        }
        let plane = h * w;
        let m = (n * plane) as f64;

        let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let xd = self.data(x);
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for p in 0..plane {
                            acc += xd[base + p];
                        }
                    }
                    mean[ch] = acc / m;
                    let mut vacc = 0.0;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for p in 0..plane {
                            let d = xd[base + p] - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc / m;
                }
                for ch in 0..c {
                    stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                    stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch];
                }
                stats.initialized = true;
                let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => {
                let inv: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                (stats.mean.clone(), inv)
            }
        };

        let numel = n * c * plane;
        let mut xhat = self.zeroed(numel);
        let mut out = self.zeroed(numel);
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let (mu, inv) = (mean[ch], inv_std[ch]);
                    let (g, b) = (gd[ch], bd[ch]);
                    for p in 0..plane {
                        let xh = (xd[base + p] - mu) * inv;
                        xhat[base + p] = xh;
                        out[base + p] = g * xh + b;
                    }
                }
            }
        }
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor {
                shape: sx,
                data: out,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
            requires,
        ))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let mut data = self.empty(self.value(x).numel());
        data.extend(self.data(x).iter().map(|&v| v.max(0.0)));
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(Tensor { shape, data }, Op::Relu { x }, requires)
    }

    /// Row-wise softmax of a 2-d tensor, with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(mismatch("softmax_rows", format!("x{sx:?} is not 2-d")));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = self.zeroed(r * c);
        {
            let xd = self.data(x);
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                softmax_slice(row, orow);
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor {
                shape: sx,
                data: out,
            },
            Op::SoftmaxRows { x },
            requires,
        ))
    }

    /// Softmax over the channel axis of `x[n,c,h,w]`, per spatial position.
    pub fn softmax_channels(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(mismatch("softmax_channels", format!("x{sx:?} is not 4-d")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = h * w;
        let mut out = self.zeroed(n * c * plane);
        {
            let xd = self.data(x);
            let mut col = vec![0.0; c];
            let mut ocol = vec![0.0; c];
            for s in 0..n {
                for p in 0..plane {
                    for ch in 0..c {
                        col[ch] = xd[(s * c + ch) * plane + p];
                    }
                    softmax_slice(&col, &mut ocol);
                    for ch in 0..c {
                        out[(s * c + ch) * plane + p] = ocol[ch];
                    }
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor {
                shape: sx,
                data: out,
            },
            Op::SoftmaxChannels { x },
            requires,
        ))
    }

    /// Concatenates two `[n,*,h,w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(mismatch("concat_channels", format!("{sa:?} ++ {sb:?}")));
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut out = self.zeroed(n * (ca + cb) * plane);
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for s in 0..n {
                let dst = &mut out[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&ad[s * ca * plane..(s + 1) * ca * plane]);
                dst[ca * plane..].copy_from_slice(&bd[s * cb * plane..(s + 1) * cb * plane]);
            }
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, ca + cb, h, w],
                data: out,
            },
            Op::ConcatChannels { a, b },
            requires,
        ))
    }

    /// `a + alpha * b` where `alpha` is a single-element tensor.
    pub fn scale_add(
        &mut self,
        a: TensorId,
        b: TensorId,
        alpha: TensorId,
    ) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || self.value(alpha).numel() != 1 {
            return Err(mismatch(
                "scale_add",
                format!("a{sa:?} b{sb:?} alpha{:?}", self.shape(alpha)),
            ));
        }
        let al = self.data(alpha)[0];
        let mut data = self.empty(self.value(a).numel());
        data.extend(
            self.data(a)
                .iter()
                .zip(self.data(b).iter())
                .map(|(&x, &y)| x + al * y),
        );
        let requires = self.requires(a) || self.requires(b) || self.requires(alpha);
        Ok(self.push(
            Tensor {
                shape: sa,
                data,
            },
            Op::ScaleAdd { a, b, alpha },
            requires,
        ))
    }

    /// Reinterprets the data under a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let mut data = self.empty(numel);
        data.extend_from_slice(self.data(x));
        let requires = self.requires(x);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, requires))
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(mismatch("transpose2d", format!("x{sx:?} is not 2-d")));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = self.zeroed(r * c);
        {
            let xd = self.data(x);
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xd[i * c + j];
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose2d { x },
            requires,
        ))
    }

    /// Extracts sample `index` from the leading axis.
    pub fn slice_batch(&mut self, x: TensorId, index: usize) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || index >= sx[0] {
            return Err(mismatch(
                "slice_batch",
                format!("index {index} out of {sx:?}"),
            ));
        }
        let chunk: usize = sx[1..].iter().product();
        let mut data = self.empty(chunk);
        data.extend_from_slice(&self.data(x)[index * chunk..(index + 1) * chunk]);
        let requires = self.requires(x);
        Ok(self.push(
            Tensor {
                shape: sx[1..].to_vec(),
                data,
            },
            Op::SliceBatch { x, index },
            requires,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack_batch(&mut self, xs: &[TensorId]) -> Result<TensorId, DiffError> {
        if xs.is_empty() {
            return Err(mismatch("stack_batch", "empty input".to_string()));
        }
        let first = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != first {
                return Err(mismatch(
                    "stack_batch",
                    format!("{:?} vs {first:?}", self.shape(x)),
                ));
            }
        }
        let chunk: usize = first.iter().product();
        let mut data = self.empty(xs.len() * chunk);
        for &x in xs {
            data.extend_from_slice(self.data(x));
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&first);
        let requires = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(
            Tensor { shape, data },
            Op::StackBatch { xs: xs.to_vec() },
            requires,
        ))
    }

    /// Broadcasts `x[n,c]` to `[n,c,h,w]`.
    pub fn broadcast_spatial(
        &mut self,
        x: TensorId,
        h: usize,
        w: usize,
    ) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(mismatch("broadcast_spatial", format!("x{sx:?} is not 2-d")));
        }
        let (n, c) = (sx[0], sx[1]);
        let plane = h * w;
        let mut data = self.zeroed(n * c * plane);
        {
            let xd = self.data(x);
            for s in 0..n {
                for ch in 0..c {
                    let v = xd[s * c + ch];
                    data[(s * c + ch) * plane..(s * c + ch + 1) * plane].fill(v);
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, h, w],
                data,
            },
            Op::BroadcastSpatial { x },
            requires,
        ))
    }

    /// Mean over the spatial axes: `x[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(mismatch("global_avg_pool", format!("x{sx:?} is not 4-d")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        {
            let xd = self.data(x);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let mut acc = 0.0;
                    for p in 0..plane {
                        acc += xd[base + p];
                    }
                    out[s * c + ch] = acc / plane as f64;
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, c],
                data: out,
            },
            Op::GlobalAvgPool { x },
            requires,
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch("add", format!("{sa:?} + {sb:?}")));
        }
        let mut data = self.empty(self.value(a).numel());
        data.extend(
            self.data(a)
                .iter()
                .zip(self.data(b).iter())
                .map(|(&x, &y)| x + y),
        );
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape: sa, data }, Op::Add { a, b }, requires))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(mismatch("mul", format!("{sa:?} * {sb:?}")));
        }
        let mut data = self.empty(self.value(a).numel());
        data.extend(
            self.data(a)
                .iter()
                .zip(self.data(b).iter())
                .map(|(&x, &y)| x * y),
        );
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape: sa, data }, Op::Mul { a, b }, requires))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, x: TensorId) -> TensorId {
        let mut data = self.empty(self.value(x).numel());
        data.extend(self.data(x).iter().map(|&v| -v));
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(Tensor { shape, data }, Op::Neg { x }, requires)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let mut data = self.empty(self.value(x).numel());
        data.extend(self.data(x).iter().map(|&v| v + c));
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(Tensor { shape, data }, Op::AddScalar { x }, requires)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let mut data = self.empty(self.value(x).numel());
        data.extend(self.data(x).iter().map(|&v| v * c));
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, requires)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let xd = self.data(x);
        let mut acc = 0.0;
        for &v in xd {
            acc += v;
        }
        let mean = acc / xd.len() as f64;
        let requires = self.requires(x);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, requires)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let xd = self.data(x);
        let mut acc = 0.0;
        for &v in xd {
            acc += v;
        }
        let requires = self.requires(x);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, requires)
    }

    /// Copies the value but blocks gradient flow through it.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let mut data = self.empty(self.value(x).numel());
        data.extend_from_slice(self.data(x));
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::Detach, false)
    }

    // ============================================================
    // Backward
    // ============================================================

    /// Accumulates `d loss / d tensor` into every `requires_grad` tensor
    /// reachable from `loss`, which must be a single-element tensor.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), DiffError> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let Tape { nodes, pool } = self;
        grad_buf(&mut nodes[loss.0], pool)[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            if !nodes[idx].requires_grad || nodes[idx].grad.is_none() {
                continue;
            }
            let (before, rest) = nodes.split_at_mut(idx);
            let node = &rest[0];
            backprop_node(node, before, pool);
        }
        Ok(())
    }
}

/// Numerically stable softmax of one slice.
fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        s += x * y;
    }
    s
}

/// `out += c * src`, elementwise.
fn axpy(out: &mut [f64], c: f64, src: &[f64]) {
    debug_assert_eq!(out.len(), src.len());
    for (o, &s) in out.iter_mut().zip(src.iter()) {
        *o += c * s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            axpy(orow, av, &b[t * n..(t + 1) * n]);
        }
    }
}

/// Adds `src` into node `id`'s gradient buffer.
fn accumulate(before: &mut [Node], id: TensorId, src: &[f64], pool: &mut BufPool) {
    let grad = grad_buf(&mut before[id.0], pool);
    for (d, &g) in grad.iter_mut().zip(src.iter()) {
        *d += g;
    }
}

/// Applies one node's backward rule, accumulating into earlier nodes.
///
/// Contributions that read one input's data while writing another's gradient
/// go through a scratch buffer, which also keeps aliased inputs (the same
/// tensor used twice) correct.
fn backprop_node(node: &Node, before: &mut [Node], pool: &mut BufPool) {
    let go = node.grad.as_deref().expect("caller checked grad presence");
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Matmul { a, b } => {
            let (m, n) = (node.tensor.shape[0], node.tensor.shape[1]);
            let k = before[a.0].tensor.shape[1];
            if before[a.0].requires_grad {
                // dA[i,t] = sum_j go[i,j] * B[t,j]
                let mut tmp = take_zeroed(pool, m * k);
                let bd = &before[b.0].tensor.data;
                for i in 0..m {
                    let grow = &go[i * n..(i + 1) * n];
                    let trow = &mut tmp[i * k..(i + 1) * k];
                    for t in 0..k {
                        trow[t] = dot(grow, &bd[t * n..(t + 1) * n]);
                    }
                }
                accumulate(before, *a, &tmp, pool);
                pool.give(tmp);
            }
            if before[b.0].requires_grad {
                // dB[t,j] = sum_i A[i,t] * go[i,j]
                let mut tmp = take_zeroed(pool, k * n);
                let ad = &before[a.0].tensor.data;
                for i in 0..m {
                    let grow = &go[i * n..(i + 1) * n];
                    for t in 0..k {
                        let av = ad[i * k + t];
                        if av != 0.0 {
                            axpy(&mut tmp[t * n..(t + 1) * n], av, grow);
                        }
                    }
                }
                accumulate(before, *b, &tmp, pool);
                pool.give(tmp);
            }
        }
        Op::Linear { x, w, b } => {
            let (n, d_out) = (node.tensor.shape[0], node.tensor.shape[1]);
            let d_in = before[x.0].tensor.shape[1];
            if before[x.0].requires_grad {
                let mut tmp = take_zeroed(pool, n * d_in);
                let wd = &before[w.0].tensor.data;
                for s in 0..n {
                    let grow = &go[s * d_out..(s + 1) * d_out];
                    let trow = &mut tmp[s * d_in..(s + 1) * d_in];
                    for o in 0..d_out {
                        let g = grow[o];
                        if g != 0.0 {
                            axpy(trow, g, &wd[o * d_in..(o + 1) * d_in]);
                        }
                    }
                }
                accumulate(before, *x, &tmp, pool);
                pool.give(tmp);
            }
            if before[w.0].requires_grad {
                let mut tmp = take_zeroed(pool, d_out * d_in);
                let xd = &before[x.0].tensor.data;
                for s in 0..n {
                    let grow = &go[s * d_out..(s + 1) * d_out];
                    let xrow = &xd[s * d_in..(s + 1) * d_in];
                    for o in 0..d_out {
                        let g = grow[o];
                        if g != 0.0 {
                            axpy(&mut tmp[o * d_in..(o + 1) * d_in], g, xrow);
                        }
                    }
                }
                accumulate(before, *w, &tmp, pool);
                pool.give(tmp);
            }
            if before[b.0].requires_grad {
                let gb = grad_buf(&mut before[b.0], pool);
                for s in 0..n {
                    let grow = &go[s * d_out..(s + 1) * d_out];
                    for o in 0..d_out {
                        gb[o] += grow[o];
                    }
                }
            }
        }
        Op::Conv1x1 { x, w, b } => {
            let (n, co) = (node.tensor.shape[0], node.tensor.shape[1]);
            let plane = node.tensor.shape[2] * node.tensor.shape[3];
            let ci = before[x.0].tensor.shape[1];
            if before[x.0].requires_grad {
                let mut tmp = take_zeroed(pool, n * ci * plane);
                let wt = &before[w.0].tensor.data;
                for s in 0..n {
                    let gos = &go[s * co * plane..(s + 1) * co * plane];
                    let txs = &mut tmp[s * ci * plane..(s + 1) * ci * plane];
                    for o in 0..co {
                        let gorow = &gos[o * plane..(o + 1) * plane];
                        let wrow = &wt[o * ci..(o + 1) * ci];
                        for i in 0..ci {
                            if wrow[i] != 0.0 {
                                axpy(&mut txs[i * plane..(i + 1) * plane], wrow[i], gorow);
                            }
                        }
                    }
                }
                accumulate(before, *x, &tmp, pool);
                pool.give(tmp);
            }
            if before[w.0].requires_grad {
                let mut tmp = take_zeroed(pool, co * ci);
                let xd = &before[x.0].tensor.data;
                for s in 0..n {
                    let gos = &go[s * co * plane..(s + 1) * co * plane];
                    let xs = &xd[s * ci * plane..(s + 1) * ci * plane];
                    for o in 0..co {
                        let gorow = &gos[o * plane..(o + 1) * plane];
                        for i in 0..ci {
                            tmp[o * ci + i] += dot(gorow, &xs[i * plane..(i + 1) * plane]);
                        }
                    }
                }
                accumulate(before, *w, &tmp, pool);
                pool.give(tmp);
            }
            if before[b.0].requires_grad {
                let gb = grad_buf(&mut before[b.0], pool);
                for s in 0..n {
                    let gos = &go[s * co * plane..(s + 1) * co * plane];
                    for o in 0..co {
                        let gorow = &gos[o * plane..(o + 1) * plane];
                        let mut acc = 0.0;
                        for p in 0..plane {
                            acc += gorow[p];
                        }
                        gb[o] += acc;
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mode,
            xhat,
            inv_std,
        } => {
            let (n, c) = (node.tensor.shape[0], node.tensor.shape[1]);
            let plane = node.tensor.shape[2] * node.tensor.shape[3];
            let m = (n * plane) as f64;
            let gd: Vec<f64> = before[gamma.0].tensor.data.clone();

            // Per-channel sums of go and go*xhat, shared by all three grads.
            let mut s1 = vec![0.0; c];
            let mut s2 = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let mut a1 = 0.0;
                    let mut a2 = 0.0;
                    for p in 0..plane {
                        a1 += go[base + p];
                        a2 += go[base + p] * xhat[base + p];
                    }
                    s1[ch] += a1;
                    s2[ch] += a2;
                }
            }
            if before[x.0].requires_grad {
                let gx = grad_buf(&mut before[x.0], pool);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let scale = gd[ch] * inv_std[ch];
                        match mode {
                            Mode::Train => {
                                let c1 = s1[ch] / m;
                                let c2 = s2[ch] / m;
                                for p in 0..plane {
                                    gx[base + p] +=
                                        scale * (go[base + p] - c1 - xhat[base + p] * c2);
                                }
                            }
                            Mode::Eval => {
                                for p in 0..plane {
                                    gx[base + p] += scale * go[base + p];
                                }
                            }
                        }
                    }
                }
            }
            if before[gamma.0].requires_grad {
                let gg = grad_buf(&mut before[gamma.0], pool);
                for ch in 0..c {
                    gg[ch] += s2[ch];
                }
            }
            if before[beta.0].requires_grad {
                let gb = grad_buf(&mut before[beta.0], pool);
                for ch in 0..c {
                    gb[ch] += s1[ch];
                }
            }
        }
        Op::Relu { x } => {
            if before[x.0].requires_grad {
                let Node { tensor, grad, .. } = &mut before[x.0];
                let n = tensor.numel();
                let grad = grad.get_or_insert_with(|| take_zeroed(pool, n));
                let xd = tensor.data();
                for i in 0..grad.len() {
                    if xd[i] > 0.0 {
                        grad[i] += go[i];
                    }
                }
            }
        }
        Op::SoftmaxRows { x } => {
            if before[x.0].requires_grad {
                let (r, c) = (node.tensor.shape[0], node.tensor.shape[1]);
                let y = &node.tensor.data;
                let gx = grad_buf(&mut before[x.0], pool);
                for i in 0..r {
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &go[i * c..(i + 1) * c];
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += grow[j] * yrow[j];
                    }
                    let gxrow = &mut gx[i * c..(i + 1) * c];
                    for j in 0..c {
                        gxrow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::SoftmaxChannels { x } => {
            if before[x.0].requires_grad {
                let (n, c) = (node.tensor.shape[0], node.tensor.shape[1]);
                let plane = node.tensor.shape[2] * node.tensor.shape[3];
                let y = &node.tensor.data;
                let gx = grad_buf(&mut before[x.0], pool);
                for s in 0..n {
                    for p in 0..plane {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let i = (s * c + ch) * plane + p;
                            dot += go[i] * y[i];
                        }
                        for ch in 0..c {
                            let i = (s * c + ch) * plane + p;
                            gx[i] += y[i] * (go[i] - dot);
                        }
                    }
                }
            }
        }
        Op::ConcatChannels { a, b } => {
            let n = node.tensor.shape[0];
            let plane = node.tensor.shape[2] * node.tensor.shape[3];
            let ca = before[a.0].tensor.shape[1];
            let cb = before[b.0].tensor.shape[1];
            if before[a.0].requires_grad {
                let ga = grad_buf(&mut before[a.0], pool);
                for s in 0..n {
                    let src = &go[s * (ca + cb) * plane..s * (ca + cb) * plane + ca * plane];
                    let dst = &mut ga[s * ca * plane..(s + 1) * ca * plane];
                    for (d, &g) in dst.iter_mut().zip(src.iter()) {
                        *d += g;
                    }
                }
            }
            if before[b.0].requires_grad {
                let gb = grad_buf(&mut before[b.0], pool);
                for s in 0..n {
                    let src =
                        &go[s * (ca + cb) * plane + ca * plane..(s + 1) * (ca + cb) * plane];
                    let dst = &mut gb[s * cb * plane..(s + 1) * cb * plane];
                    for (d, &g) in dst.iter_mut().zip(src.iter()) {
                        *d += g;
                    }
                }
            }
        }
        Op::ScaleAdd { a, b, alpha } => {
            let al = before[alpha.0].tensor.data[0];
            if before[a.0].requires_grad {
                accumulate(before, *a, go, pool);
            }
            if before[b.0].requires_grad {
                let gb = grad_buf(&mut before[b.0], pool);
                for (d, &g) in gb.iter_mut().zip(go.iter()) {
                    *d += al * g;
                }
            }
            if before[alpha.0].requires_grad {
                let mut acc = 0.0;
                {
                    let bd = &before[b.0].tensor.data;
                    for (&g, &bv) in go.iter().zip(bd.iter()) {
                        acc += g * bv;
                    }
                }
                grad_buf(&mut before[alpha.0], pool)[0] += acc;
            }
        }
        Op::Reshape { x } => {
            if before[x.0].requires_grad {
                accumulate(before, *x, go, pool);
            }
        }
        Op::Transpose2d { x } => {
            if before[x.0].requires_grad {
                let (c, r) = (node.tensor.shape[0], node.tensor.shape[1]);
                let gx = grad_buf(&mut before[x.0], pool);
                for j in 0..c {
                    for i in 0..r {
                        gx[i * c + j] += go[j * r + i];
                    }
                }
            }
        }
        Op::SliceBatch { x, index } => {
            if before[x.0].requires_grad {
                let chunk = node.tensor.numel();
                let gx = &mut grad_buf(&mut before[x.0], pool)[index * chunk..(index + 1) * chunk];
                for (d, &g) in gx.iter_mut().zip(go.iter()) {
                    *d += g;
                }
            }
        }
        Op::StackBatch { xs } => {
            let chunk = node.tensor.numel() / xs.len();
            for (i, &x) in xs.iter().enumerate() {
                if before[x.0].requires_grad {
                    accumulate(before, x, &go[i * chunk..(i + 1) * chunk], pool);
                }
            }
        }
        Op::BroadcastSpatial { x } => {
            if before[x.0].requires_grad {
                let (n, c) = (node.tensor.shape[0], node.tensor.shape[1]);
                let plane = node.tensor.shape[2] * node.tensor.shape[3];
                let gx = grad_buf(&mut before[x.0], pool);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let mut acc = 0.0;
                        for p in 0..plane {
                            acc += go[base + p];
                        }
                        gx[s * c + ch] += acc;
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            if before[x.0].requires_grad {
                let (n, c) = (node.tensor.shape[0], node.tensor.shape[1]);
                let plane = before[x.0].tensor.shape[2] * before[x.0].tensor.shape[3];
                let inv = 1.0 / plane as f64;
                let gx = grad_buf(&mut before[x.0], pool);
                for s in 0..n {
                    for ch in 0..c {
                        let g = go[s * c + ch] * inv;
                        let base = (s * c + ch) * plane;
                        for p in 0..plane {
                            gx[base + p] += g;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if before[a.0].requires_grad {
                accumulate(before, *a, go, pool);
            }
            if before[b.0].requires_grad {
                accumulate(before, *b, go, pool);
            }
        }
        Op::Mul { a, b } => {
            if before[a.0].requires_grad {
                let mut tmp = pool.take(go.len());
                tmp.extend(
                    go.iter()
                        .zip(before[b.0].tensor.data.iter())
                        .map(|(&g, &bv)| g * bv),
                );
                accumulate(before, *a, &tmp, pool);
                pool.give(tmp);
            }
            if before[b.0].requires_grad {
                let mut tmp = pool.take(go.len());
                tmp.extend(
                    go.iter()
                        .zip(before[a.0].tensor.data.iter())
                        .map(|(&g, &av)| g * av),
                );
                accumulate(before, *b, &tmp, pool);
                pool.give(tmp);
            }
        }
        Op::Neg { x } => {
            if before[x.0].requires_grad {
                let gx = grad_buf(&mut before[x.0], pool);
                for (d, &g) in gx.iter_mut().zip(go.iter()) {
                    *d -= g;
                }
            }
        }
        Op::AddScalar { x } => {
            if before[x.0].requires_grad {
                accumulate(before, *x, go, pool);
            }
        }
        Op::Scale { x, c } => {
            if before[x.0].requires_grad {
                let gx = grad_buf(&mut before[x.0], pool);
                for (d, &g) in gx.iter_mut().zip(go.iter()) {
                    *d += c * g;
                }
            }
        }
        Op::MeanAll { x } => {
            if before[x.0].requires_grad {
                let gx = grad_buf(&mut before[x.0], pool);
                let g = go[0] / gx.len() as f64;
                for d in gx.iter_mut() {
                    *d += g;
                }
            }
        }
        Op::SumAll { x } => {
            if before[x.0].requires_grad {
                let gx = grad_buf(&mut before[x.0], pool);
                for d in gx.iter_mut() {
                    *d += go[0];
                }
            }
        }
    }
}
