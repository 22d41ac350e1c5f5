use rand::Rng;

use super::{matmul_into, Array, Float};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Swish,
    Relu,
    /// Splits the last axis in half: `a * sigmoid(b)`.
    Glu,
    /// Softmax over the last axis.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// `x: [C_in, H, W]`, kernel `[C_out, C_in, kh, kw]`.
    Conv2d,
    /// `x: [T, C]`, kernel `[C, K]`, one filter per channel.
    Depthwise1d,
    /// `x: [T, C_in]`, kernel `[C_in, C_out]`.
    Pointwise1d,
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        cols: Vec<T>,
    },
    Depthwise1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Dropout(Var, Vec<T>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    MeanRows(Var),
    ChannelsToFrames(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    /// Loss whose per-entry derivative was computed during the forward pass.
    Loss {
        logits: Var,
        dlogits: Vec<T>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward pass in execution order for reverse-mode differentiation.
///
/// Nodes are appended as ops run, so every node's inputs precede it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Array<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Array::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0]
            .take()
            .map(|g| Array::new(shape, g).expect("grad shape"))
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input array.
    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Array<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}: inner extents differ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), m, k, false, self.value(b).data(), k, n, false, &mut out, false);
        let value = Array::new(vec![m, n], out)?;
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Array::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let value = self.value(a).map(|x| x * f);
        self.push("scale", value, Op::Scale(a, f), &[a])
    }

    /// Adds a `[n]` vector to every row of a `[.. × n]` array.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v += bb);
        }
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x @ w + b` for `x: [T × d_in]`, `w: [d_in × d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let input = self.value(x);
        let value = match kind {
            Activation::Sigmoid => input.map(sigmoid),
            Activation::Tanh => input.map(|v| v.tanh()),
            Activation::Relu => input.map(|v| v.max(T::zero())),
            Activation::Swish => input.map(|v| v * sigmoid(v)),
            Activation::Glu => {
                let d = input.last_dim();
                if d % 2 != 0 {
                    return Err(Error::shape("glu", format!("last extent {d} is odd")));
                }
                let h = d / 2;
                let mut out = Vec::with_capacity(input.len() / 2);
                for r in 0..input.rows() {
                    let row = input.row(r);
                    out.extend(row[..h].iter().zip(&row[h..]).map(|(&a, &b)| a * sigmoid(b)));
                }
                let mut shape = input.shape().to_vec();
                *shape.last_mut().unwrap() = h;
                Array::new(shape, out)?
            }
            Activation::Softmax => {
                let d = input.last_dim();
                let mut out = input.clone();
                for row in out.data_mut().chunks_mut(d) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v = *v / total);
                }
                out
            }
        };
        self.push("activation", value, Op::Act(x, kind), &[x])
    }

    /// Normalizes each row over its last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs last extent {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::of(eps);
        let input = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::of(d as f64);
        let rows = input.rows();
        let mut xhat = Vec::with_capacity(input.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(input.len());
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rs;
                xhat.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        let value = Array::new(input.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Convolution in one of the supported layouts; see [`ConvMode`].
    pub fn convolution(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        mode: ConvMode,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        match mode {
            ConvMode::Conv2d => self.conv2d(x, kernel, bias, stride, padding),
            ConvMode::Depthwise1d => self.depthwise1d(x, kernel, bias, stride, padding),
            ConvMode::Pointwise1d => {
                if stride != 1 || padding != 0 {
                    return Err(Error::Config(
                        "pointwise convolution takes stride 1 and no padding".into(),
                    ));
                }
                let y = self.matmul(x, kernel)?;
                match bias {
                    Some(b) => self.add_row(y, b),
                    None => Ok(y),
                }
            }
        }
    }

    fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::shape("conv2d", format!("input must be [C, H, W], got {s:?}"))),
        };
        let (c_out, kc, kh, kw) = match *self.shape(w) {
            [o, i, kh, kw] => (o, i, kh, kw),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be [C_out, C_in, kh, kw], got {s:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs {c_out} channels", self.shape(b))));
            }
        }
        let geom = Conv2dGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            ho: conv_out_len(h, kh, stride, padding),
            wo: conv_out_len(wd, kw, stride, padding),
            stride,
            padding,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let kdim = c_in * kh * kw;
        let npos = geom.ho * geom.wo;
        let mut out = vec![T::zero(); c_out * npos];
        matmul_into(self.value(w).data(), c_out, kdim, false, &cols, kdim, npos, false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, chunk) in out.chunks_mut(npos).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let value = Array::new(vec![c_out, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, cols }, &inputs)
    }

    fn depthwise1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (t, c) = self.dims2("depthwise1d", x)?;
        let (kc, k) = self.dims2("depthwise1d", w)?;
        if kc != c {
            return Err(Error::shape(
                "depthwise1d",
                format!("kernel has {kc} channels, input has {c}"),
            ));
        }
        if k > t + 2 * padding {
            return Err(Error::shape(
                "depthwise1d",
                format!("kernel {k} larger than padded input {}", t + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::shape("depthwise1d", format!("bias {:?} vs {c} channels", self.shape(b))));
            }
        }
        let to = conv_out_len(t, k, stride, padding);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); to * c];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(c) {
                row.copy_from_slice(bias);
            }
        }
        for o in 0..to {
            for kk in 0..k {
                let Some(src) = (o * stride + kk).checked_sub(padding).filter(|&s| s < t) else {
                    continue;
                };
                let orow = &mut out[o * c..(o + 1) * c];
                let irow = &xs[src * c..(src + 1) * c];
                for ch in 0..c {
                    orow[ch] += ws[ch * k + kk] * irow[ch];
                }
            }
        }
        let value = Array::new(vec![to, c], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "depthwise1d",
            value,
            Op::Depthwise1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity when
    /// not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let input = self.value(x);
        let data = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Array::new(input.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout(x, mask), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Array::new(vec![r, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Array::new(vec![r, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Array::new(vec![rows, c], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row `index` of a matrix as a `[1 × n]` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (r, c) = self.dims2("row", x)?;
        if index >= r {
            return Err(Error::shape("row", format!("row {index} of {r}")));
        }
        let value = Array::new(vec![1, c], self.value(x).row(index).to_vec())?;
        self.push("row", value, Op::Row { x, index }, &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            out.iter_mut().zip(&src[i * c..(i + 1) * c]).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Array::new(vec![1, c], out)?;
        self.push("mean_rows", value, Op::MeanRows(x), &[x])
    }

    /// `[C, T, F] -> [T, C·F]`: one flattened feature vector per frame.
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let (c, t, f) = match *self.shape(x) {
            [c, t, f] => (c, t, f),
            ref s => return Err(Error::shape("channels_to_frames", format!("expected [C, T, F], got {s:?}"))),
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                let s = &src[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                out[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(s);
            }
        }
        let value = Array::new(vec![t, c * f], out)?;
        self.push("channels_to_frames", value, Op::ChannelsToFrames(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Array::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let value = Array::scalar(a.sum() / T::of(a.len() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Records a scalar loss over `logits` whose value and per-entry
    /// derivative were computed by the caller.
    pub fn loss_from_entries(&mut self, logits: Var, value: f64, dlogits: Vec<f64>) -> Result<Var> {
        if dlogits.len() != self.value(logits).len() {
            return Err(Error::shape(
                "loss",
                format!("{} derivatives for {} logits", dlogits.len(), self.value(logits).len()),
            ));
        }
        let dlogits = dlogits.into_iter().map(T::of).collect();
        self.push("loss", Array::scalar(T::of(value)), Op::Loss { logits, dlogits }, &[logits])
    }

    /// Reverse pass from a scalar `loss`. Fan-out contributions accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *f));
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
                let n = self.value(*b).len();
                acc(*b, &mut |buf| {
                    for row in g.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| matmul_into(g, m, n, false, bv, k, n, true, buf, true));
                acc(*b, &mut |buf| matmul_into(av, m, k, true, g, m, n, false, buf, true));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                match kind {
                    Activation::Sigmoid => acc(*x, &mut |buf| {
                        for ((d, &dy), &y) in buf.iter_mut().zip(g).zip(out) {
                            *d += dy * y * (T::one() - y);
                        }
                    }),
                    Activation::Tanh => acc(*x, &mut |buf| {
                        for ((d, &dy), &y) in buf.iter_mut().zip(g).zip(out) {
                            *d += dy * (T::one() - y * y);
                        }
                    }),
                    Activation::Relu => acc(*x, &mut |buf| {
                        for ((d, &dy), &v) in buf.iter_mut().zip(g).zip(xv) {
                            if v > T::zero() {
                                *d += dy;
                            }
                        }
                    }),
                    Activation::Swish => acc(*x, &mut |buf| {
                        for ((d, &dy), &v) in buf.iter_mut().zip(g).zip(xv) {
                            let s = sigmoid(v);
                            *d += dy * (s + v * s * (T::one() - s));
                        }
                    }),
                    Activation::Glu => {
                        let h = self.value(*x).last_dim() / 2;
                        acc(*x, &mut |buf| {
                            for (r, dy) in g.chunks(h).enumerate() {
                                let row = &xv[r * 2 * h..(r + 1) * 2 * h];
                                let drow = &mut buf[r * 2 * h..(r + 1) * 2 * h];
                                for j in 0..h {
                                    let (a, b) = (row[j], row[h + j]);
                                    let s = sigmoid(b);
                                    drow[j] += dy[j] * s;
                                    drow[h + j] += dy[j] * a * s * (T::one() - s);
                                }
                            }
                        });
                    }
                    Activation::Softmax => {
                        let d = node.value.last_dim();
                        acc(*x, &mut |buf| {
                            for ((drow, dy), y) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                                let dot: T = dy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                                for j in 0..d {
                                    drow[j] += y[j] * (dy[j] - dot);
                                }
                            }
                        });
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |buf| {
                    for (dy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += dy[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for dy in g.chunks(d) {
                        buf.iter_mut().zip(dy).for_each(|(b, &v)| *b += v);
                    }
                });
                let dn = T::of(d as f64);
                acc(*x, &mut |buf| {
                    for (r, (dy, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dxhat: Vec<T> = dy.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let drow = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let kdim = geom.c_in * geom.kh * geom.kw;
                let npos = geom.ho * geom.wo;
                acc(*w, &mut |buf| matmul_into(g, geom.c_out, npos, false, cols, kdim, npos, true, buf, true));
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for (o, chunk) in g.chunks(npos).enumerate() {
                            buf[o] += chunk.iter().copied().sum();
                        }
                    });
                }
                let wv = self.value(*w).data();
                acc(*x, &mut |buf| {
                    let mut dcols = vec![T::zero(); kdim * npos];
                    matmul_into(wv, geom.c_out, kdim, true, g, geom.c_out, npos, false, &mut dcols, false);
                    col2im_add(&dcols, geom, buf);
                });
            }
            Op::Depthwise1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                let to = node.value.shape()[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let src_row = |o: usize, kk: usize| (o * stride + kk).checked_sub(*padding).filter(|&s| s < t);
                acc(*w, &mut |buf| {
                    for o in 0..to {
                        for kk in 0..k {
                            if let Some(s) = src_row(o, kk) {
                                for ch in 0..c {
                                    buf[ch * k + kk] += g[o * c + ch] * xv[s * c + ch];
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |buf| {
                        for row in g.chunks(c) {
                            buf.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
                acc(*x, &mut |buf| {
                    for o in 0..to {
                        for kk in 0..k {
                            if let Some(s) = src_row(o, kk) {
                                for ch in 0..c {
                                    buf[s * c + ch] += g[o * c + ch] * wv[ch * k + kk];
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |buf| {
                    for ((d, &dy), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *d += dy * m;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.value.last_dim();
                acc(*x, &mut |buf| {
                    for (r, dy) in g.chunks(len).enumerate() {
                        buf[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(dy)
                            .for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    acc(p, &mut |buf| {
                        for (r, drow) in buf.chunks_mut(w).enumerate() {
                            drow.iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                                .for_each(|(d, &v)| *d += v);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |buf| {
                        buf.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &v)| *d += v);
                    });
                    offset += n;
                }
            }
            Op::Row { x, index } => {
                let c = g.len();
                acc(*x, &mut |buf| {
                    buf[index * c..(index + 1) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d += v);
                });
            }
            Op::MeanRows(x) => {
                let r = self.shape(*x)[0];
                let inv = T::one() / T::of(r as f64);
                acc(*x, &mut |buf| {
                    for drow in buf.chunks_mut(g.len()) {
                        drow.iter_mut().zip(g).for_each(|(d, &v)| *d += v * inv);
                    }
                });
            }
            Op::ChannelsToFrames(x) => {
                let (c, t, f) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                acc(*x, &mut |buf| {
                    for ci in 0..c {
                        for ti in 0..t {
                            let dst = &mut buf[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                            let src = &g[ti * c * f + ci * f..ti * c * f + (ci + 1) * f];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
            }
            Op::Sum(x) => {
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Loss { logits, dlogits } => {
                acc(*logits, &mut |buf| {
                    buf.iter_mut().zip(dlogits).for_each(|(d, &v)| *d += g[0] * v);
                });
            }
        }
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `floor((len + 2·padding − kernel) / stride) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

fn im2col<T: Float>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    let npos = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * npos];
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * npos;
                for oh in 0..g.ho {
                    let Some(ih) = (oh * g.stride + i).checked_sub(g.padding).filter(|&v| v < g.h) else {
                        continue;
                    };
                    for ow in 0..g.wo {
                        if let Some(iw) = (ow * g.stride + j).checked_sub(g.padding).filter(|&v| v < g.w) {
                            cols[row + oh * g.wo + ow] = x[(c * g.h + ih) * g.w + iw];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Float>(dcols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let npos = g.ho * g.wo;
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * npos;
                for oh in 0..g.ho {
                    let Some(ih) = (oh * g.stride + i).checked_sub(g.padding).filter(|&v| v < g.h) else {
                        continue;
                    };
                    for ow in 0..g.wo {
                        if let Some(iw) = (ow * g.stride + j).checked_sub(g.padding).filter(|&v| v < g.w) {
                            dx[(c * g.h + ih) * g.w + iw] += dcols[row + oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}
