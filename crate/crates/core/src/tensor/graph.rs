use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize },
    // One entry per (point, pixel) tap that landed inside the map.
    Bilinear { f: Var, taps: Vec<(u32, u32, f64)> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    ScaleRows { x: Var, w: Var },
    Affine { x: Var, scale: f64 },
    AffineElem { x: Var, scale: Vec<f64> },
    Powf { x: Var, p: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Concat { a: Var, b: Var },
    ConcatAxis0(Vec<Var>),
    GroupedMax { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SparseMix { x: Var, rows: Vec<Vec<(usize, f64)>> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    SmoothL1 { x: Var, beta: f64 },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Nodes are appended in evaluation order, so the recording order is a
/// topological order; `backward` walks it in exact reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.is_requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff the tensor requires one.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// `x·w (+ b)` for `x: N×Cin`, `w: Cin×Cout`, `b: Cout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[0] {
            return dim_err(format!("linear: input {:?} and weight {:?}", tx.shape(), tw.shape()));
        }
        let (n, cin, cout) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        let mut out = vec![0.0; n * cout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != cout {
                return dim_err(format!("linear: bias {:?} for {cout} outputs", tb.shape()));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(tb.data());
            }
        }
        let (xd, wd) = (tx.data(), tw.data());
        for i in 0..n {
            let orow = &mut out[i * cout..(i + 1) * cout];
            for k in 0..cin {
                let xv = xd[i * cin + k];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[k * cout..(k + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(vec![n, cout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Cross-correlation of `x: C×H×W` with square kernels `k: K×C×S×S`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.ndim() != 3 || tk.ndim() != 4 || tk.shape()[1] != tx.shape()[0] || tk.shape()[2] != tk.shape()[3] {
            return dim_err(format!("conv2d: input {:?} and kernels {:?}", tx.shape(), tk.shape()));
        }
        if stride == 0 {
            return Err(Error::Input("conv2d: stride must be positive".into()));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (kn, ks) = (tk.shape()[0], tk.shape()[2]);
        if h + 2 * padding < ks || w + 2 * padding < ks {
            return dim_err(format!(
                "conv2d: input {h}×{w} with padding {padding} is smaller than the {ks}×{ks} kernel"
            ));
        }
        let ho = (h + 2 * padding - ks) / stride + 1;
        let wo = (w + 2 * padding - ks) / stride + 1;
        let mut out = vec![0.0; kn * ho * wo];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != kn {
                return dim_err(format!("conv2d: bias {:?} for {kn} kernels", tb.shape()));
            }
            for (o, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.fill(tb.data()[o]);
            }
        }
        let (xd, kd) = (tx.data(), tk.data());
        for o in 0..kn {
            let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            for ci in 0..c {
                let xplane = &xd[ci * h * w..(ci + 1) * h * w];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let kv = kd[((o * c + ci) * ks + ky) * ks + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *ov += kv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![kn, ho, wo], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, k, b, stride, padding }, &inputs))
    }

    /// Bilinear lookup of `f: C×H×W` at continuous pixel positions `(u, v)`
    /// (column, row; pixel centers on integers). Taps falling outside the map
    /// contribute zero and invalid points give zero rows. Coordinates are
    /// constants: no gradient flows to them.
    pub fn bilinear_sample(&mut self, f: Var, coords: &[(f64, f64)], valid: &[bool]) -> Result<Var> {
        if coords.len() != valid.len() {
            return dim_err(format!(
                "bilinear_sample: {} coordinates but {} mask entries",
                coords.len(),
                valid.len()
            ));
        }
        let tf = self.value(f);
        if tf.ndim() != 3 {
            return dim_err(format!("bilinear_sample: feature map {:?} is not C×H×W", tf.shape()));
        }
        let (c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
        let n = coords.len();
        let mut taps = Vec::with_capacity(4 * n);
        for (p, (&(u, v), &ok)) in coords.iter().zip(valid).enumerate() {
            if !ok {
                continue;
            }
            if !u.is_finite() || !v.is_finite() {
                return Err(Error::Input(format!("bilinear_sample: non-finite coordinate ({u}, {v}) at point {p}")));
            }
            let (x0, y0) = (u.floor(), v.floor());
            let (fx, fy) = (u - x0, v - y0);
            for (dx, dy, wt) in [
                (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                (1.0, 0.0, fx * (1.0 - fy)),
                (0.0, 1.0, (1.0 - fx) * fy),
                (1.0, 1.0, fx * fy),
            ] {
                let (px, py) = (x0 + dx, y0 + dy);
                if wt == 0.0 || px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                    continue;
                }
                taps.push((p as u32, (py as usize * w + px as usize) as u32, wt));
            }
        }
        let fd = tf.data();
        let mut out = vec![0.0; n * c];
        for &(p, pix, wt) in &taps {
            let row = &mut out[p as usize * c..(p as usize + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                *o += wt * fd[ch * h * w + pix as usize];
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::Bilinear { f, taps }, &[f]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Scales each row of `x: N×C` by the matching entry of `w: N×1`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.shape() != [tx.shape()[0], 1] {
            return dim_err(format!("scale_rows: input {:?} and weights {:?}", tx.shape(), tw.shape()));
        }
        let c = tx.shape()[1];
        let mut data = tx.data().to_vec();
        if c > 0 {
            for (row, &s) in data.chunks_mut(c).zip(tw.data()) {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `scale[i]·x[i] + shift[i]` with constant per-element coefficients.
    pub fn affine_elem(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if scale.len() != tx.numel() || shift.len() != tx.numel() {
            return dim_err(format!(
                "affine_elem: {} elements but {} scales and {} shifts",
                tx.numel(),
                scale.len(),
                shift.len()
            ));
        }
        let data = tx
            .data()
            .iter()
            .zip(scale.iter().zip(shift))
            .map(|(&v, (&s, &o))| s * v + o)
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AffineElem { x, scale: scale.to_vec() }, &[x]))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf { x, p })
    }

    /// Clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let m = if n == 0 { 0.0 } else { t.data().iter().sum::<f64>() / n as f64 };
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Channel-wise concatenation of `a: N×Ca` and `b: N×Cb`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[0] != tb.shape()[0] {
            return dim_err(format!("concat: leading dimensions of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let (n, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(vec![n, ca + cb], data)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Stacks tensors along their first axis (trailing extents must agree).
    pub fn concat_axis0(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_axis0: no operands".into()));
        };
        let Some(tail) = self.value(first).shape().get(1..).map(<[usize]>::to_vec) else {
            return dim_err("concat_axis0: operands must have at least one axis".to_string());
        };
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() == 0 || t.shape()[1..] != tail[..] {
                return dim_err(format!("concat_axis0: {:?} does not stack with trailing {:?}", t.shape(), tail));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatAxis0(parts.to_vec()), parts))
    }

    /// Per-group, per-channel maximum of `x: G×K×C`. The first maximal
    /// element of a group wins ties.
    pub fn grouped_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 3 {
            return dim_err(format!("grouped_max: {:?} is not G×K×C", tx.shape()));
        }
        let (g, k, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if k == 0 {
            return Err(Error::Input("grouped_max: empty group".into()));
        }
        let d = tx.data();
        let mut out = vec![0.0; g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            let base = gi * k * c;
            for ch in 0..c {
                let mut best = base + ch;
                for m in 1..k {
                    let idx = base + m * c + ch;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out[gi * c + ch] = d[best];
                argmax[gi * c + ch] = best;
            }
        }
        let value = Tensor::new(vec![g, c], out)?;
        Ok(self.push(value, Op::GroupedMax { x, argmax }, &[x]))
    }

    /// Nearest-neighbour replication of `x: C×H×W` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Input("upsample_nearest: factor must be positive".into()));
        }
        let tx = self.value(x);
        if tx.ndim() != 3 {
            return dim_err(format!("upsample_nearest: {:?} is not C×H×W", tx.shape()));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let d = tx.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                let src = &d[ch * h * w + (oy / factor) * w..ch * h * w + (oy / factor + 1) * w];
                let dst = &mut out[ch * ho * wo + oy * wo..ch * ho * wo + (oy + 1) * wo];
                for (ox, o) in dst.iter_mut().enumerate() {
                    *o = src[ox / factor];
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Rows `idx` of `x: N×C`, in order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return dim_err(format!("gather_rows: {:?} is not N×C", tx.shape()));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Input(format!("gather_rows: row {i} out of {n}")));
            }
            data.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Output row `i` is `Σ weight·x[row]` over the constant pairs in `rows[i]`.
    pub fn sparse_mix(&mut self, x: Var, rows: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return dim_err(format!("sparse_mix: {:?} is not N×C", tx.shape()));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; rows.len() * c];
        for (orow, terms) in data.chunks_mut(c.max(1)).zip(&rows) {
            for &(i, wt) in terms {
                if i >= n {
                    return Err(Error::Input(format!("sparse_mix: row {i} out of {n}")));
                }
                for (o, &v) in orow.iter_mut().zip(&tx.data()[i * c..(i + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(value, Op::SparseMix { x, rows }, &[x]))
    }

    /// Columns `start..end` of `x: N×C`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || start > end || end > tx.shape()[1] {
            return dim_err(format!("slice_cols: {start}..{end} of {:?}", tx.shape()));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![n, end - start], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Elementwise smooth-L1: `0.5·d²/β` inside `|d| < β`, `|d| − 0.5·β` outside.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        self.unary(
            x,
            |d| if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta },
            Op::SmoothL1 { x, beta },
        )
    }

    /// Row-wise softmax cross entropy of `logits: N×K` against class indices.
    /// Returns the `N×1` per-row losses.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return dim_err(format!(
                "softmax_cross_entropy: logits {:?} for {} targets",
                t.shape(),
                targets.len()
            ));
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let mut probs = vec![0.0; n * k];
        let mut loss = vec![0.0; n];
        for i in 0..n {
            if targets[i] >= k {
                return Err(Error::Input(format!("softmax_cross_entropy: class {} of {k}", targets[i])));
            }
            let row = &t.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss[i] = z.ln() + m - row[targets[i]];
        }
        let value = Tensor::new(vec![n, 1], loss)?;
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a one-element `loss`. Populates gradients on every
    /// leaf that requires one (zeros where the loss does not depend on it).
    /// May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph; build a new graph".into()));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, cin, cout) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                if needs(*x) {
                    let gx = acc(grads, *x, n * cin);
                    for r in 0..n {
                        let grow = &gout[r * cout..(r + 1) * cout];
                        for k in 0..cin {
                            let wrow = &tw.data()[k * cout..(k + 1) * cout];
                            gx[r * cin + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if needs(*w) {
                    let gw = acc(grads, *w, cin * cout);
                    for r in 0..n {
                        let grow = &gout[r * cout..(r + 1) * cout];
                        for k in 0..cin {
                            let xv = tx.data()[r * cin + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for (gwv, &gv) in gw[k * cout..(k + 1) * cout].iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = acc(grads, *b, cout);
                        for grow in gout.chunks(cout.max(1)) {
                            for (gbv, &gv) in gb.iter_mut().zip(grow) {
                                *gbv += gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, stride, padding } => {
                let (tx, tk) = (val(*x), val(*k));
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (kn, ks) = (tk.shape()[0], tk.shape()[2]);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let (stride, padding) = (*stride, *padding as isize);
                let need_x = needs(*x);
                let need_k = needs(*k);
                let mut gx = need_x.then(|| vec![0.0; c * h * w]);
                let mut gk = need_k.then(|| vec![0.0; kn * c * ks * ks]);
                for o in 0..kn {
                    let gplane = &gout[o * ho * wo..(o + 1) * ho * wo];
                    for ci in 0..c {
                        let xoff = ci * h * w;
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let kidx = ((o * c + ci) * ks + ky) * ks + kx;
                                let kv = tk.data()[kidx];
                                let mut kacc = 0.0;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - padding;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = xoff + iy as usize * w;
                                    let grow = &gplane[oy * wo..(oy + 1) * wo];
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        let ix = (ox * stride + kx) as isize - padding;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = row + ix as usize;
                                        kacc += gv * tx.data()[xi];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xi] += gv * kv;
                                        }
                                    }
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[kidx] += kacc;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    add_into(acc(grads, *x, c * h * w), &gx);
                }
                if let Some(gk) = gk {
                    add_into(acc(grads, *k, kn * c * ks * ks), &gk);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = acc(grads, *b, kn);
                        for (o, plane) in gout.chunks(ho * wo).enumerate() {
                            gb[o] += plane.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Bilinear { f, taps } => {
                if needs(*f) {
                    let tf = val(*f);
                    let (c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2]);
                    let gf = acc(grads, *f, c * h * w);
                    for &(p, pix, wt) in taps {
                        let grow = &gout[p as usize * c..(p as usize + 1) * c];
                        for (ch, &gv) in grow.iter().enumerate() {
                            gf[ch * h * w + pix as usize] += wt * gv;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let gx = acc(grads, *x, gout.len());
                    for ((g, &o), &gv) in gx.iter_mut().zip(out.data()).zip(gout) {
                        if o > 0.0 {
                            *g += gv;
                        }
                    }
                }
            }
            Op::Tanh(x) => elementwise(grads, *x, needs(*x), gout, |j, gv| gv * (1.0 - out.data()[j].powi(2))),
            Op::Sigmoid(x) => elementwise(grads, *x, needs(*x), gout, |j, gv| {
                let y = out.data()[j];
                gv * y * (1.0 - y)
            }),
            Op::Log(x) => elementwise(grads, *x, needs(*x), gout, |j, gv| gv / val(*x).data()[j]),
            Op::Exp(x) => elementwise(grads, *x, needs(*x), gout, |j, gv| gv * out.data()[j]),
            Op::Add(a, b) => {
                elementwise(grads, *a, needs(*a), gout, |_, gv| gv);
                elementwise(grads, *b, needs(*b), gout, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                elementwise(grads, *a, needs(*a), gout, |_, gv| gv);
                elementwise(grads, *b, needs(*b), gout, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                elementwise(grads, *a, needs(*a), gout, |j, gv| gv * tb.data()[j]);
                elementwise(grads, *b, needs(*b), gout, |j, gv| gv * ta.data()[j]);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                elementwise(grads, *a, needs(*a), gout, |j, gv| gv / tb.data()[j]);
                elementwise(grads, *b, needs(*b), gout, |j, gv| -gv * ta.data()[j] / tb.data()[j].powi(2));
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick_a = |j: usize| ta.data()[j] <= tb.data()[j];
                elementwise(grads, *a, needs(*a), gout, |j, gv| if pick_a(j) { gv } else { 0.0 });
                elementwise(grads, *b, needs(*b), gout, |j, gv| if pick_a(j) { 0.0 } else { gv });
            }
            Op::Maximum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick_a = |j: usize| ta.data()[j] >= tb.data()[j];
                elementwise(grads, *a, needs(*a), gout, |j, gv| if pick_a(j) { gv } else { 0.0 });
                elementwise(grads, *b, needs(*b), gout, |j, gv| if pick_a(j) { 0.0 } else { gv });
            }
            Op::ScaleRows { x, w } => {
                let (tx, tw) = (val(*x), val(*w));
                let c = tx.shape()[1];
                if needs(*x) {
                    let gx = acc(grads, *x, tx.numel());
                    for (j, (g, &gv)) in gx.iter_mut().zip(gout).enumerate() {
                        *g += gv * tw.data()[j / c];
                    }
                }
                if needs(*w) && c > 0 {
                    let gw = acc(grads, *w, tw.numel());
                    for (r, (grow, xrow)) in gout.chunks(c).zip(tx.data().chunks(c)).enumerate() {
                        gw[r] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Affine { x, scale } => elementwise(grads, *x, needs(*x), gout, |_, gv| gv * scale),
            Op::AffineElem { x, scale } => elementwise(grads, *x, needs(*x), gout, |j, gv| gv * scale[j]),
            Op::Powf { x, p } => {
                elementwise(grads, *x, needs(*x), gout, |j, gv| gv * p * val(*x).data()[j].powf(p - 1.0))
            }
            Op::Clamp { x, lo, hi } => elementwise(grads, *x, needs(*x), gout, |j, gv| {
                let v = val(*x).data()[j];
                if v < *lo || v > *hi {
                    0.0
                } else {
                    gv
                }
            }),
            Op::Sum(x) => elementwise(grads, *x, needs(*x), &vec![gout[0]; val(*x).numel()], |_, gv| gv),
            Op::Mean(x) => {
                let n = val(*x).numel();
                if n > 0 {
                    let g = gout[0] / n as f64;
                    elementwise(grads, *x, needs(*x), &vec![g; n], |_, gv| gv);
                }
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (val(*a).shape()[1], val(*b).shape()[1]);
                let n = val(*a).shape()[0];
                if needs(*a) {
                    let ga = acc(grads, *a, n * ca);
                    for r in 0..n {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &gout[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, n * cb);
                    for r in 0..n {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &gout[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                }
            }
            Op::ConcatAxis0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if needs(p) {
                        add_into(acc(grads, p, n), &gout[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GroupedMax { x, argmax } => {
                if needs(*x) {
                    let gx = acc(grads, *x, val(*x).numel());
                    for (&src, &gv) in argmax.iter().zip(gout) {
                        gx[src] += gv;
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if needs(*x) {
                    let tx = val(*x);
                    let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (ho, wo) = (h * factor, w * factor);
                    let gx = acc(grads, *x, c * h * w);
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                gx[ch * h * w + (oy / factor) * w + ox / factor] += gout[ch * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let tx = val(*x);
                    let c = tx.shape()[1];
                    let gx = acc(grads, *x, tx.numel());
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &gout[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SparseMix { x, rows } => {
                if needs(*x) {
                    let tx = val(*x);
                    let c = tx.shape()[1];
                    let gx = acc(grads, *x, tx.numel());
                    for (r, terms) in rows.iter().enumerate() {
                        let grow = &gout[r * c..(r + 1) * c];
                        for &(src, wt) in terms {
                            for (g, &gv) in gx[src * c..(src + 1) * c].iter_mut().zip(grow) {
                                *g += wt * gv;
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let tx = val(*x);
                    let (n, c) = (tx.shape()[0], tx.shape()[1]);
                    let width = out.shape()[1];
                    let gx = acc(grads, *x, n * c);
                    for r in 0..n {
                        add_into(&mut gx[r * c + start..r * c + start + width], &gout[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Reshape(x) => elementwise(grads, *x, needs(*x), gout, |_, gv| gv),
            Op::SmoothL1 { x, beta } => elementwise(grads, *x, needs(*x), gout, |j, gv| {
                let d = val(*x).data()[j];
                if d.abs() < *beta {
                    gv * d / beta
                } else {
                    gv * d.signum()
                }
            }),
            Op::SoftmaxXent { logits, targets, probs } => {
                if needs(*logits) {
                    let k = val(*logits).shape()[1];
                    let gl = acc(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * k + c] += gout[r] * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn elementwise(
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    needed: bool,
    gout: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !needed {
        return;
    }
    let g = grads[x.0].get_or_insert_with(|| vec![0.0; gout.len()]);
    for (j, (gv, &go)) in g.iter_mut().zip(gout).enumerate() {
        *gv += f(j, go);
    }
}
