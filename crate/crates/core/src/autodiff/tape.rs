//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its output value. Nodes whose
//! inputs do not require gradients are stored without a backward rule, so a
//! tape built entirely from constants never records anything to replay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use super::conv::{col2im_add, im2col, ConvGeom, Padding};
use super::tensor::numel;
use super::{ParamId, ParamSet, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, b: Var },
    Scale { a: Var, c: T },
    ScaleBy { a: Var, s: Var },
    Shift { a: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumRows { a: Var, cols: usize },
    SoftmaxXent { logits: Var, probs: Vec<T>, labels: Vec<usize>, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, n: usize },
    Reshape { a: Var },
    Slice { a: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Minimum { a: Var, b: Var },
    GaussianLogProb { x: Var, mu: Var, log_std: Var, d: usize },
    SubRowMax { a: Var, argmax: Vec<usize>, cols: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    leaves: Vec<(u64, ParamId, Var)>,
    grad_enabled: bool,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(shape_err(op, format!("{a:?} vs {b:?}")))
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_into_with<T: Scalar>(dst: &mut Option<Vec<T>>, len: usize, f: impl Fn(usize) -> T) {
    let d = dst.get_or_insert_with(|| vec![T::zero(); len]);
    for (i, v) in d.iter_mut().enumerate() {
        *v = *v + f(i);
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), leaves: Vec::new(), grad_enabled: true, strict: false }
    }

    /// A tape on which nothing requires a gradient.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Rejects non-finite op inputs when set.
    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches its value")
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_leaves(&self, set_id: u64) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.leaves.iter().filter(move |(s, _, _)| *s == set_id).map(|&(_, p, v)| (p, v))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, requires_grad: requires_grad && self.grad_enabled, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if self.strict && inputs.iter().any(|v| self.nodes[v.0].value.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = self.any_requires(inputs);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves -------------------------------------------------------

    /// Records a tensor as a leaf; it tracks gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != value.len() {
            return Err(shape_err("constant", format!("shape {shape:?} with {} values", value.len())));
        }
        Ok(self.push_leaf(shape, value, false))
    }

    /// Binds a parameter. Repeated binds of the same parameter share one leaf,
    /// so gradients from every use accumulate there.
    pub fn param(&mut self, set: &ParamSet<T>, id: ParamId) -> Var {
        let sid = set.id();
        if let Some(&(_, _, v)) = self.leaves.iter().find(|(s, p, _)| *s == sid && *p == id) {
            return v;
        }
        let t = set.get(id);
        let v = self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad());
        if self.nodes[v.0].requires_grad {
            self.leaves.push((sid, id, v));
        }
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push_leaf(shape, value, false)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.check_finite("matmul", &[a, b])?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), (k, 1), self.value(b), (n, 1), T::zero(), &mut out, (n, 1));
        Ok(self.push(vec![m, n], out, &[a, b], || Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected 2-d, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, &[a], || Op::Transpose { a, rows, cols }))
    }

    /// NHWC convolution: `x [B,H,W,C]`, `w [k,k,C,F]`, optional `b [F]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] {
            return Err(shape_err("conv2d", format!("input {sx:?} with kernel {sw:?}")));
        }
        let geom = ConvGeom::new(sx[0], (sx[1], sx[2], sx[3]), sw[0], stride, sw[3], padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {sw:?} stride {stride} does not fit input {sx:?}")))?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_c] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} filters", self.shape(b), geom.out_c)));
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.check_finite("conv2d", &inputs)?;

        let (rows, patch, f) = (geom.rows(), geom.patch(), geom.out_c);
        let mut cols = vec![T::zero(); rows * patch];
        im2col(&geom, self.value(x), &mut cols);
        let mut out = vec![T::zero(); rows * f];
        if let Some(b) = b {
            let bias = self.value(b);
            out.chunks_exact_mut(f).for_each(|r| r.copy_from_slice(bias));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(rows, patch, f, T::one(), &cols, (patch, 1), self.value(w), (f, 1), beta, &mut out, (f, 1));
        let shape = vec![geom.batch, geom.out_h, geom.out_w, f];
        Ok(self.push(shape, out, &inputs, move || Op::Conv2d { x, w, b, geom, cols }))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        same_shape(name, self.shape(a), self.shape(b))?;
        self.check_finite(name, &[a, b])?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((self.shape(a).to_vec(), out))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.check_finite(name, &[a])?;
        Ok((self.shape(a).to_vec(), self.value(a).iter().map(|&x| f(x)).collect()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(s, v, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(s, v, &[a, b], || Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(s, v, &[a, b], || Op::Mul { a, b }))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary("min_elementwise", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push(s, v, &[a, b], || Op::Minimum { a, b }))
    }

    /// Adds a `[n]` bias to every row of a tensor whose last axis is `n`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let n = *sb.first().unwrap_or(&0);
        if sb.len() != 1 || sa.last() != Some(&n) {
            return Err(shape_err("add", format!("bias {sb:?} for {sa:?}")));
        }
        self.check_finite("add", &[a, b])?;
        let bias = self.value(b).to_vec();
        let mut out = self.value(a).to_vec();
        out.chunks_exact_mut(n).for_each(|r| r.iter_mut().zip(&bias).for_each(|(o, &b)| *o = *o + b));
        Ok(self.push(sa.to_vec(), out, &[a, b], || Op::AddBias { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let (s, v) = self.unary("mul", a, |x| x * c)?;
        Ok(self.push(s, v, &[a], || Op::Scale { a, c }))
    }

    /// Multiplies `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul", format!("scalar factor has shape {:?}", self.shape(s))));
        }
        let c = self.value(s)[0];
        let (shape, v) = self.unary("mul", a, |x| x * c)?;
        Ok(self.push(shape, v, &[a, s], || Op::ScaleBy { a, s }))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let (s, v) = self.unary("add", a, |x| x + c)?;
        Ok(self.push(s, v, &[a], || Op::Shift { a }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (s, v) = self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() })?;
        Ok(self.push(s, v, &[a], || Op::Relu { a }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (s, v) = self.unary("tanh", a, T::tanh)?;
        Ok(self.push(s, v, &[a], || Op::Tanh { a }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let (s, v) = self.unary("exp", a, T::exp)?;
        Ok(self.push(s, v, &[a], || Op::Exp { a }))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let (s, v) = self.unary("log", a, T::ln)?;
        Ok(self.push(s, v, &[a], || Op::Log { a }))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite("sum", &[a])?;
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        Ok(self.push(vec![1], vec![s], &[a], || Op::Sum { a }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_finite("mean", &[a])?;
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean", "empty input".into()));
        }
        let s = v.iter().fold(T::zero(), |acc, &x| acc + x) / T::from_f64(v.len() as f64);
        Ok(self.push(vec![1], vec![s], &[a], || Op::Mean { a }))
    }

    /// Sums the last axis: `[.., n] -> [..]` (a 1-d input yields `[1]`).
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite("sum", &[a])?;
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err("sum", "scalar input".into()))?;
        if cols == 0 {
            return Err(shape_err("sum", format!("empty last axis in {shape:?}")));
        }
        let out: Vec<T> =
            self.value(a).chunks_exact(cols).map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x)).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(out_shape, out, &[a], || Op::SumRows { a, cols }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `[1]` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(shape_err("softmax_cross_entropy", format!("label {bad} for {cols} classes")));
        }
        self.check_finite("softmax_cross_entropy", &[logits])?;
        let v = self.value(logits);
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for (p, &x) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (x - max).exp();
                z = z + *p;
            }
            probs[r * cols..(r + 1) * cols].iter_mut().for_each(|p| *p = *p / z);
            loss = loss - (row[labels[r]] - max - z.ln());
        }
        loss = loss / T::from_f64(rows as f64);
        let labels = labels.to_vec();
        Ok(self.push(vec![1], vec![loss], &[logits], move || Op::SoftmaxXent { logits, probs, labels, cols }))
    }

    /// Subtracts each row's maximum from that row of a 2-d tensor.
    pub fn sub_row_max(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err("sub_row_max", format!("{s:?}")));
        }
        self.check_finite("sub_row_max", &[a])?;
        let cols = s[1];
        let mut out = self.value(a).to_vec();
        let mut argmax = Vec::with_capacity(s[0]);
        for row in out.chunks_exact_mut(cols) {
            let (idx, max) = row.iter().enumerate().fold((0, row[0]), |(bi, bm), (i, &x)| if x > bm { (i, x) } else { (bi, bm) });
            row.iter_mut().for_each(|x| *x = *x - max);
            argmax.push(idx);
        }
        Ok(self.push(s, out, &[a], move || Op::SubRowMax { a, argmax, cols }))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if n == 0 || self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let nf = T::from_f64(n as f64);
        let rows = self.value(x).len() / n;
        let mut xhat = vec![T::zero(); rows * n];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(sx, out, &[x, gamma, beta], move || Op::LayerNorm { x, gamma, beta, xhat, inv_std, n }))
    }

    /// Sum over the last axis of the diagonal Gaussian log-density of `x`
    /// under mean `mu` and log standard deviation `log_std`.
    pub fn gaussian_log_prob(&mut self, x: Var, mu: Var, log_std: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        same_shape("gaussian_log_prob", &s, self.shape(mu))?;
        same_shape("gaussian_log_prob", &s, self.shape(log_std))?;
        let d = *s.last().ok_or_else(|| shape_err("gaussian_log_prob", "scalar input".into()))?;
        self.check_finite("gaussian_log_prob", &[x, mu, log_std])?;
        let half_log_2pi = T::from_f64(0.5 * libm::log(2.0 * core::f64::consts::PI));
        let half = T::from_f64(0.5);
        let (xv, mv, lv) = (self.value(x), self.value(mu), self.value(log_std));
        let out: Vec<T> = (0..xv.len() / d)
            .map(|r| {
                (r * d..(r + 1) * d).fold(T::zero(), |acc, i| {
                    let z = (xv[i] - mv[i]) / lv[i].exp();
                    acc - half * z * z - lv[i] - half_log_2pi
                })
            })
            .collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, out, &[x, mu, log_std], move || Op::GaussianLogProb { x, mu, log_std, d }))
    }

    // ---- shape ----------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape, v, &[a], || Op::Reshape { a }))
    }

    /// Takes `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", format!("[{start}, {end}) on axis {axis} of {s:?}")));
        }
        let (outer, axis_len, inner) = axis_split(&s, axis);
        let len = end - start;
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, &[a], move || Op::Slice { a, outer, axis_len, inner, start, len }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} for {s0:?}")));
        }
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == s0.len() && sp.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{sp:?} vs {s0:?} on axis {axis}")));
            }
        }
        self.check_finite("concat", parts)?;
        let (outer, _, inner) = axis_split(&s0, axis);
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let spec: Vec<(Var, usize)> = parts.iter().copied().zip(lens).collect();
        Ok(self.push(shape, out, parts, move || Op::Concat { parts: spec, outer, inner }))
    }

    // ---- backward -------------------------------------------------------------

    /// Fills gradients of the scalar `loss` with respect to every node.
    /// Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Take the op out so input grads can be written while reading it.
        let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, (n, 1), self.value(b), (1, n), T::zero(), &mut da, (k, 1));
                    add_into(&mut self.grads[a.0], &da);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(a), (1, k), g, (n, 1), T::zero(), &mut db, (n, 1));
                    add_into(&mut self.grads[b.0], &db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                add_into_with(&mut self.grads[a.0], rows * cols, |idx| {
                    let (r, c) = (idx / cols, idx % cols);
                    g[c * rows + r]
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, patch, f) = (geom.rows(), geom.patch(), geom.out_c);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); patch * f];
                    T::gemm(patch, rows, f, T::one(), cols, (1, patch), g, (f, 1), T::zero(), &mut dw, (f, 1));
                    add_into(&mut self.grads[w.0], &dw);
                }
                if let Some(b) = *b {
                    if self.wants(b) {
                        let mut db = vec![T::zero(); f];
                        for r in g.chunks_exact(f) {
                            db.iter_mut().zip(r).for_each(|(d, &v)| *d = *d + v);
                        }
                        add_into(&mut self.grads[b.0], &db);
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    T::gemm(rows, f, patch, T::one(), g, (f, 1), self.value(*w), (1, f), T::zero(), &mut dcols, (patch, 1));
                    let gx = self.grads[x.0].get_or_insert_with(|| vec![T::zero(); geom.batch * geom.in_h * geom.in_w * geom.in_c]);
                    col2im_add(geom, &dcols, gx);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    add_into(&mut self.grads[a.0], g);
                }
                if self.wants(b) {
                    add_into(&mut self.grads[b.0], g);
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    add_into(&mut self.grads[a.0], g);
                }
                if self.wants(b) {
                    add_into_with(&mut self.grads[b.0], g.len(), |j| -g[j]);
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bv = mem::take(&mut self.nodes[b.0].value);
                    add_into_with(&mut self.grads[a.0], g.len(), |j| g[j] * bv[j]);
                    self.nodes[b.0].value = bv;
                }
                if self.wants(b) {
                    let av = mem::take(&mut self.nodes[a.0].value);
                    add_into_with(&mut self.grads[b.0], g.len(), |j| g[j] * av[j]);
                    self.nodes[a.0].value = av;
                }
            }
            &Op::AddBias { a, b } => {
                if self.wants(a) {
                    add_into(&mut self.grads[a.0], g);
                }
                if self.wants(b) {
                    let n = self.nodes[b.0].value.len();
                    let mut db = vec![T::zero(); n];
                    for r in g.chunks_exact(n) {
                        db.iter_mut().zip(r).for_each(|(d, &v)| *d = *d + v);
                    }
                    add_into(&mut self.grads[b.0], &db);
                }
            }
            &Op::Scale { a, c } => add_into_with(&mut self.grads[a.0], g.len(), |j| g[j] * c),
            &Op::ScaleBy { a, s } => {
                let c = self.value(s)[0];
                if self.wants(a) {
                    add_into_with(&mut self.grads[a.0], g.len(), |j| g[j] * c);
                }
                if self.wants(s) {
                    let ds = g.iter().zip(self.value(a)).fold(T::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                    add_into(&mut self.grads[s.0], &[ds]);
                }
            }
            &Op::Shift { a } => add_into(&mut self.grads[a.0], g),
            &Op::Relu { a } => {
                let av = mem::take(&mut self.nodes[a.0].value);
                add_into_with(&mut self.grads[a.0], g.len(), |j| if av[j] > T::zero() { g[j] } else { T::zero() });
                self.nodes[a.0].value = av;
            }
            &Op::Tanh { a } => {
                let y = &self.nodes[i].value;
                let d: Vec<T> = g.iter().zip(y).map(|(&gj, &yj)| gj * (T::one() - yj * yj)).collect();
                add_into(&mut self.grads[a.0], &d);
            }
            &Op::Exp { a } => {
                let y = &self.nodes[i].value;
                let d: Vec<T> = g.iter().zip(y).map(|(&gj, &yj)| gj * yj).collect();
                add_into(&mut self.grads[a.0], &d);
            }
            &Op::Log { a } => {
                let av = mem::take(&mut self.nodes[a.0].value);
                add_into_with(&mut self.grads[a.0], g.len(), |j| g[j] / av[j]);
                self.nodes[a.0].value = av;
            }
            &Op::Sum { a } => {
                let n = self.nodes[a.0].value.len();
                add_into_with(&mut self.grads[a.0], n, |_| g[0]);
            }
            &Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                let s = g[0] / T::from_f64(n as f64);
                add_into_with(&mut self.grads[a.0], n, |_| s);
            }
            &Op::SumRows { a, cols } => {
                let n = self.nodes[a.0].value.len();
                add_into_with(&mut self.grads[a.0], n, |j| g[j / cols]);
            }
            Op::SoftmaxXent { logits, probs, labels, cols } => {
                let rows = labels.len();
                let s = g[0] / T::from_f64(rows as f64);
                add_into_with(&mut self.grads[logits.0], probs.len(), |j| {
                    let (r, c) = (j / cols, j % cols);
                    let onehot = if labels[r] == c { T::one() } else { T::zero() };
                    (probs[j] - onehot) * s
                });
            }
            Op::SubRowMax { a, argmax, cols } => {
                let cols = *cols;
                let row_sums: Vec<T> = g.chunks_exact(cols).map(|r| r.iter().fold(T::zero(), |acc, &x| acc + x)).collect();
                add_into_with(&mut self.grads[a.0], g.len(), |j| {
                    let (r, c) = (j / cols, j % cols);
                    if argmax[r] == c {
                        g[j] - row_sums[r]
                    } else {
                        g[j]
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std, n } => {
                let n = *n;
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                    add_into(&mut self.grads[gamma.0], &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); n];
                    for gr in g.chunks_exact(n) {
                        db.iter_mut().zip(gr).for_each(|(d, &v)| *d = *d + v);
                    }
                    add_into(&mut self.grads[beta.0], &db);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).to_vec();
                    let nf = T::from_f64(n as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dx[r * n + j] = is * (dh - s1 / nf - hr[j] * s2 / nf);
                        }
                    }
                    add_into(&mut self.grads[x.0], &dx);
                }
            }
            &Op::Reshape { a } => add_into(&mut self.grads[a.0], g),
            &Op::Slice { a, outer, axis_len, inner, start, len } => {
                let gx = self.grads[a.0].get_or_insert_with(|| vec![T::zero(); outer * axis_len * inner]);
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner].iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(p, l) in parts {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + l * inner]);
                        }
                        add_into(&mut self.grads[p.0], &gp);
                    }
                    offset += l;
                }
            }
            &Op::Minimum { a, b } => {
                let (av, bv) = (self.value(a).to_vec(), self.value(b).to_vec());
                if self.wants(a) {
                    add_into_with(&mut self.grads[a.0], g.len(), |j| if av[j] <= bv[j] { g[j] } else { T::zero() });
                }
                if self.wants(b) {
                    add_into_with(&mut self.grads[b.0], g.len(), |j| if av[j] <= bv[j] { T::zero() } else { g[j] });
                }
            }
            &Op::GaussianLogProb { x, mu, log_std, d } => {
                let (xv, mv, lv) = (self.value(x), self.value(mu), self.value(log_std));
                let n = xv.len();
                let mut dx = vec![T::zero(); n];
                let mut dls = vec![T::zero(); n];
                for j in 0..n {
                    let sigma = lv[j].exp();
                    let z = (xv[j] - mv[j]) / sigma;
                    let gr = g[j / d];
                    dx[j] = -gr * z / sigma;
                    dls[j] = gr * (z * z - T::one());
                }
                if self.wants(x) {
                    add_into(&mut self.grads[x.0], &dx);
                }
                if self.wants(mu) {
                    add_into_with(&mut self.grads[mu.0], n, |j| -dx[j]);
                }
                if self.wants(log_std) {
                    add_into(&mut self.grads[log_std.0], &dls);
                }
            }
        }
        self.nodes[i].op = op;
    }
}
