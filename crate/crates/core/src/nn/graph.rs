//! Reverse-mode tape. Every operation appends a node holding its value;
//! [`Graph::backward`] walks the nodes in reverse and accumulates
//! gradients into every node that needs one.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Mat, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Kernel, stride and padding of a 2D (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }

    /// Output size of a convolution along one axis.
    pub fn conv_out(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        (input + 2 * p).checked_sub(k).map(|v| v / s + 1)
    }

    /// Output size of a transposed convolution along one axis:
    /// `(in − 1)·s − 2p + k`.
    pub fn conv_t_out(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        ((input.max(1) - 1) * s + k).checked_sub(2 * p)
    }
}

enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, g: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Var, g: ConvGeom },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { a: Var, b: Var },
    Reparam { mu: Var, logvar: Var, eps: Vec<T> },
    BceLogits { logits: Var, target: Vec<T> },
    Kl { mu: Var, logvar: Var },
    SqDist { a: Var, b: Var },
    Sum { x: Var },
    DotConst { x: Var, r: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(detail: String) -> Error {
    Error::ShapeMismatch { layer: 0, detail }
}

/// Image columns for a convolution: `img` is C×H×W, the result is
/// (C·kh·kw)×(oh·ow).
fn im2col<T: Scalar>(
    img: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let hw = oh * ow;
    for ch in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * hw;
                for oy in 0..oh {
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `img`.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    img: &mut [T],
) {
    let hw = oh * ow;
    for ch in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * hw;
                for oy in 0..oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is kept after backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(mismatch(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(&self.value(b).data);
        }
        gemm(
            Mat::new(&self.value(x).data, n, i),
            Mat::new(&self.value(w).data, o, i).t(),
            T::one(),
            &mut y,
        );
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![n, o], data: y }, Op::Dense { x, w, b }, needs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, g: ConvGeom) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = || mismatch(format!("conv2d: input {xs:?}, weight {ws:?}, bias {bs:?}"));
        if xs.len() != 4 || ws != [ws[0], xs[1], g.kh, g.kw] || bs != [ws[0]] {
            return Err(bad());
        }
        let (n, c, h, wd, o) = (xs[0], xs[1], xs[2], xs[3], ws[0]);
        let oh = ConvGeom::conv_out(h, g.kh, g.sh, g.ph).ok_or_else(bad)?;
        let ow = ConvGeom::conv_out(wd, g.kw, g.sw, g.pw).ok_or_else(bad)?;
        let k = c * g.kh * g.kw;
        let (hw_in, hw) = (c * h * wd, oh * ow);
        let mut cols = vec![T::zero(); k * hw];
        let mut y = vec![T::zero(); n * o * hw];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for item in 0..n {
            im2col(&xv[item * hw_in..(item + 1) * hw_in], (c, h, wd), &g, (oh, ow), &mut cols);
            let out = &mut y[item * o * hw..(item + 1) * o * hw];
            for (ch, row) in out.chunks_mut(hw).enumerate() {
                row.fill(bv[ch]);
            }
            gemm(Mat::new(wv, o, k), Mat::new(&cols, k, hw), T::one(), out);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor { shape: vec![n, o, oh, ow], data: y },
            Op::Conv2d { x, w, b, g },
            needs,
        ))
    }

    /// Transposed convolution; `w` has shape C_in×C_out×kh×kw.
    pub fn conv_t2d(&mut self, x: Var, w: Var, b: Var, g: ConvGeom) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = || mismatch(format!("conv_t2d: input {xs:?}, weight {ws:?}, bias {bs:?}"));
        if xs.len() != 4 || ws != [xs[1], ws[1], g.kh, g.kw] || bs != [ws[1]] {
            return Err(bad());
        }
        let (n, c, h, wd, o) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
        let oh = ConvGeom::conv_t_out(h, g.kh, g.sh, g.ph).ok_or_else(bad)?;
        let ow = ConvGeom::conv_t_out(wd, g.kw, g.sw, g.pw).ok_or_else(bad)?;
        if ConvGeom::conv_out(oh, g.kh, g.sh, g.ph) != Some(h)
            || ConvGeom::conv_out(ow, g.kw, g.sw, g.pw) != Some(wd)
        {
            return Err(bad());
        }
        let k = o * g.kh * g.kw;
        let (hw_in, hw_out) = (h * wd, oh * ow);
        let mut cols = vec![T::zero(); k * hw_in];
        let mut y = vec![T::zero(); n * o * hw_out];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for item in 0..n {
            gemm(
                Mat::new(wv, c, k).t(),
                Mat::new(&xv[item * c * hw_in..(item + 1) * c * hw_in], c, hw_in),
                T::zero(),
                &mut cols,
            );
            let out = &mut y[item * o * hw_out..(item + 1) * o * hw_out];
            for (ch, row) in out.chunks_mut(hw_out).enumerate() {
                row.fill(bv[ch]);
            }
            col2im(&cols, (o, oh, ow), &g, (h, wd), out);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor { shape: vec![n, o, oh, ow], data: y },
            Op::ConvT2d { x, w, b, g },
            needs,
        ))
    }

    /// `max(x, slope·x)`; slope 0 gives ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .map(|&a| if a > T::zero() { a } else { a * slope })
            .collect();
        let shape = v.shape.clone();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape.clone();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(p, q)| *p + *q)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(x);
        let data = v.data.iter().map(|a| *a * c).collect();
        let shape = v.shape.clone();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Scale { x, c }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch(format!(
                "reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).data.clone();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Reshape { x }, needs))
    }

    /// Columns `start..start + len` of an N×F matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || start + len > xs[1] {
            return Err(mismatch(format!("slice {start}..{} of {xs:?}", start + len)));
        }
        let (n, f) = (xs[0], xs[1]);
        let v = &self.value(x).data;
        let data = (0..n)
            .flat_map(|i| v[i * f + start..i * f + start + len].iter().copied())
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor { shape: vec![n, len], data },
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Row-wise concatenation `[a | b]` of N×Fa and N×Fb matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch(format!("concat {sa:?} with {sb:?}")));
        }
        let (n, fa, fb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            data.extend_from_slice(&va[i * fa..(i + 1) * fa]);
            data.extend_from_slice(&vb[i * fb..(i + 1) * fb]);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![n, fa + fb], data },
            Op::ConcatCols { a, b },
            needs,
        ))
    }

    /// `mu + eps · exp(logvar / 2)` with fixed noise `eps`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Vec<T>) -> Result<Var> {
        let (sm, sl) = (self.shape(mu), self.shape(logvar));
        if sm != sl || eps.len() != self.value(mu).len() {
            return Err(mismatch(format!(
                "reparameterize: mu {sm:?}, logvar {sl:?}, {} noise values",
                eps.len()
            )));
        }
        let two = T::of(2.0);
        let data = self
            .value(mu)
            .data
            .iter()
            .zip(&self.value(logvar).data)
            .zip(&eps)
            .map(|((m, l), e)| *m + *e * (*l / two).exp())
            .collect();
        let shape = sm.to_vec();
        let needs = self.needs(&[mu, logvar]);
        Ok(self.push(Tensor { shape, data }, Op::Reparam { mu, logvar, eps }, needs))
    }

    /// Bernoulli negative log-likelihood of `target` under
    /// `sigmoid(logits)`, summed per item and averaged over the batch.
    pub fn bce_logits(&mut self, logits: Var, target: Vec<T>) -> Result<Var> {
        let v = self.value(logits);
        if target.len() != v.len() {
            return Err(mismatch(format!(
                "bce: {} logits vs {} targets",
                v.len(),
                target.len()
            )));
        }
        let n = T::of(v.batch() as f64);
        let total: T = v
            .data
            .iter()
            .zip(&target)
            .map(|(l, t)| softplus(*l) - *t * *l)
            .sum();
        let needs = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits { logits, target }, needs))
    }

    /// KL divergence of N(mu, exp(logvar)) from N(0, I), summed per item
    /// and averaged over the batch.
    pub fn kl_standard_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(mismatch("kl: mu and logvar shapes differ".into()));
        }
        let n = T::of(self.value(mu).batch() as f64);
        let half = T::of(0.5);
        let total: T = self
            .value(mu)
            .data
            .iter()
            .zip(&self.value(logvar).data)
            .map(|(m, l)| half * (*m * *m + l.exp() - T::one() - *l))
            .sum();
        let needs = self.needs(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(total / n), Op::Kl { mu, logvar }, needs))
    }

    /// Squared Euclidean distance per item, averaged over the batch.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!(
                "sq_dist: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = T::of(self.value(a).batch() as f64);
        let total: T = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(p, q)| (*p - *q) * (*p - *q))
            .sum();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), Op::SqDist { a, b }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    /// `Σ x ⊙ r` for a constant `r`.
    pub fn dot_const(&mut self, x: Var, r: Vec<T>) -> Result<Var> {
        if r.len() != self.value(x).len() {
            return Err(mismatch("dot_const: length differs".into()));
        }
        let total = self
            .value(x)
            .data
            .iter()
            .zip(&r)
            .map(|(a, b)| *a * *b)
            .sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::DotConst { x, r }, needs))
    }

    /// Accumulates d`loss`/d(node) into every node that needs a gradient.
    /// Intermediate gradients are released; leaf gradients are kept.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if self.value(loss).len() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                self.grads[i] = Some(dy);
                continue;
            }
            backprop(&self.nodes, &mut self.grads, i, &dy);
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, created as zeros on first use. `None` when
/// `v` needs no gradient.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, dy: &[T]) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let (n, inp) = (val(*x).shape[0], val(*x).shape[1]);
            let o = val(*w).shape[0];
            if let Some(g) = slot(nodes, grads, *x) {
                gemm(Mat::new(dy, n, o), Mat::new(&val(*w).data, o, inp), T::one(), g);
            }
            if let Some(g) = slot(nodes, grads, *w) {
                gemm(Mat::new(dy, n, o).t(), Mat::new(&val(*x).data, n, inp), T::one(), g);
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for row in dy.chunks(o) {
                    for (a, d) in g.iter_mut().zip(row) {
                        *a += *d;
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, g: geom } => {
            let xs = &val(*x).shape;
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let ys = &nodes[i].value.shape;
            let (o, oh, ow) = (ys[1], ys[2], ys[3]);
            let k = c * geom.kh * geom.kw;
            let (hw_in, hw) = (c * h * wd, oh * ow);
            let need_x = nodes[x.0].needs_grad;
            let need_w = nodes[w.0].needs_grad;
            let mut cols = vec![T::zero(); k * hw];
            let mut dcols = vec![T::zero(); k * hw];
            let xv = &val(*x).data;
            let wv = &val(*w).data;
            for item in 0..n {
                let dyi = &dy[item * o * hw..(item + 1) * o * hw];
                if need_w {
                    im2col(&xv[item * hw_in..(item + 1) * hw_in], (c, h, wd), geom, (oh, ow), &mut cols);
                    let gw = slot(nodes, grads, *w).expect("needs grad");
                    gemm(Mat::new(dyi, o, hw), Mat::new(&cols, k, hw).t(), T::one(), gw);
                }
                if need_x {
                    gemm(Mat::new(wv, o, k).t(), Mat::new(dyi, o, hw), T::zero(), &mut dcols);
                    let gx = slot(nodes, grads, *x).expect("needs grad");
                    col2im(&dcols, (c, h, wd), geom, (oh, ow), &mut gx[item * hw_in..(item + 1) * hw_in]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (idx, row) in dy.chunks(hw).enumerate() {
                    gb[idx % o] += row.iter().copied().sum();
                }
            }
        }
        Op::ConvT2d { x, w, b, g: geom } => {
            let xs = &val(*x).shape;
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let ys = &nodes[i].value.shape;
            let (o, oh, ow) = (ys[1], ys[2], ys[3]);
            let k = o * geom.kh * geom.kw;
            let (hw_in, hw_out) = (h * wd, oh * ow);
            let mut dcols = vec![T::zero(); k * hw_in];
            let xv = &val(*x).data;
            let wv = &val(*w).data;
            for item in 0..n {
                let dyi = &dy[item * o * hw_out..(item + 1) * o * hw_out];
                im2col(dyi, (o, oh, ow), geom, (h, wd), &mut dcols);
                if let Some(gx) = slot(nodes, grads, *x) {
                    gemm(
                        Mat::new(wv, c, k),
                        Mat::new(&dcols, k, hw_in),
                        T::one(),
                        &mut gx[item * c * hw_in..(item + 1) * c * hw_in],
                    );
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    gemm(
                        Mat::new(&xv[item * c * hw_in..(item + 1) * c * hw_in], c, hw_in),
                        Mat::new(&dcols, k, hw_in).t(),
                        T::one(),
                        gw,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (idx, row) in dy.chunks(hw_out).enumerate() {
                    gb[idx % o] += row.iter().copied().sum();
                }
            }
        }
        Op::LeakyRelu { x, slope } => {
            let xv = &val(*x).data;
            if let Some(g) = slot(nodes, grads, *x) {
                for ((a, d), xi) in g.iter_mut().zip(dy).zip(xv) {
                    *a += if *xi > T::zero() { *d } else { *d * *slope };
                }
            }
        }
        Op::Sigmoid { x } => {
            let yv = &nodes[i].value.data;
            if let Some(g) = slot(nodes, grads, *x) {
                for ((a, d), y) in g.iter_mut().zip(dy).zip(yv) {
                    *a += *d * *y * (T::one() - *y);
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(g) = slot(nodes, grads, *v) {
                    for (s, d) in g.iter_mut().zip(dy) {
                        *s += *d;
                    }
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(g) = slot(nodes, grads, *x) {
                for (s, d) in g.iter_mut().zip(dy) {
                    *s += *d * *c;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(g) = slot(nodes, grads, *x) {
                for (s, d) in g.iter_mut().zip(dy) {
                    *s += *d;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let f = val(*x).shape[1];
            let len = nodes[i].value.shape[1];
            if let Some(g) = slot(nodes, grads, *x) {
                for (row, d) in dy.chunks(len).enumerate() {
                    for (s, v) in g[row * f + start..row * f + start + len].iter_mut().zip(d) {
                        *s += *v;
                    }
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let (fa, fb) = (val(*a).shape[1], val(*b).shape[1]);
            if let Some(g) = slot(nodes, grads, *a) {
                for (row, d) in dy.chunks(fa + fb).enumerate() {
                    for (s, v) in g[row * fa..(row + 1) * fa].iter_mut().zip(&d[..fa]) {
                        *s += *v;
                    }
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for (row, d) in dy.chunks(fa + fb).enumerate() {
                    for (s, v) in g[row * fb..(row + 1) * fb].iter_mut().zip(&d[fa..]) {
                        *s += *v;
                    }
                }
            }
        }
        Op::Reparam { mu, logvar, eps } => {
            if let Some(g) = slot(nodes, grads, *mu) {
                for (s, d) in g.iter_mut().zip(dy) {
                    *s += *d;
                }
            }
            let lv = &val(*logvar).data;
            let half = T::of(0.5);
            if let Some(g) = slot(nodes, grads, *logvar) {
                for (((s, d), e), l) in g.iter_mut().zip(dy).zip(eps).zip(lv) {
                    *s += *d * *e * (*l * half).exp() * half;
                }
            }
        }
        Op::BceLogits { logits, target } => {
            let lv = val(*logits);
            let scale = dy[0] / T::of(lv.batch() as f64);
            if let Some(g) = slot(nodes, grads, *logits) {
                for ((s, l), t) in g.iter_mut().zip(&lv.data).zip(target) {
                    *s += (sigmoid(*l) - *t) * scale;
                }
            }
        }
        Op::Kl { mu, logvar } => {
            let scale = dy[0] / T::of(val(*mu).batch() as f64);
            let half = T::of(0.5);
            if let Some(g) = slot(nodes, grads, *mu) {
                for (s, m) in g.iter_mut().zip(&val(*mu).data) {
                    *s += *m * scale;
                }
            }
            if let Some(g) = slot(nodes, grads, *logvar) {
                for (s, l) in g.iter_mut().zip(&val(*logvar).data) {
                    *s += half * (l.exp() - T::one()) * scale;
                }
            }
        }
        Op::SqDist { a, b } => {
            let scale = T::of(2.0) * dy[0] / T::of(val(*a).batch() as f64);
            let (va, vb) = (&val(*a).data, &val(*b).data);
            if let Some(g) = slot(nodes, grads, *a) {
                for ((s, p), q) in g.iter_mut().zip(va).zip(vb) {
                    *s += (*p - *q) * scale;
                }
            }
            if let Some(g) = slot(nodes, grads, *b) {
                for ((s, p), q) in g.iter_mut().zip(va).zip(vb) {
                    *s -= (*p - *q) * scale;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(g) = slot(nodes, grads, *x) {
                for s in g.iter_mut() {
                    *s += dy[0];
                }
            }
        }
        Op::DotConst { x, r } => {
            if let Some(g) = slot(nodes, grads, *x) {
                for (s, v) in g.iter_mut().zip(r) {
                    *s += *v * dy[0];
                }
            }
        }
    }
}
