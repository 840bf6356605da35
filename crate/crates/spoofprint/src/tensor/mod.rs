//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Ops append
//! nodes in topological order and register a backward closure; [`Tape::backward`]
//! replays the closures in reverse, accumulating gradients with the sum rule.
//! Every op output is checked for NaN/Inf so numeric failures surface at the
//! op that produced them instead of corrupting a training run downstream.
//!
//! Tapes are single-owner and not thread-safe; run one tape per worker and
//! exchange parameter snapshots ([`ParamSet`]) between workers instead.

mod optim;
mod params;

pub use optim::{adam_step, sgd_step, AdamState};
pub use params::{load_checkpoint, save_checkpoint, ParamSet, ParamTensor};

use crate::error::{Error, Result};

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn FnOnce(&[Vec<f64>], &mut [Vec<f64>])>;

/// Records one forward pass and owns all intermediate values.
#[derive(Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    backs: Vec<Option<BackFn>>,
    grads: Option<Vec<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a leaf tensor. Leaves receive gradients like any other node.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::validation(
                "leaf",
                format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    numel(shape),
                    data.len()
                ),
            ));
        }
        check_finite("leaf", &data)?;
        self.push(shape.to_vec(), data, None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    /// Gradient of the last [`Tape::backward`] loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        match &self.grads {
            Some(g) => Ok(&g[v.0]),
            None => Err(Error::numeric("gradients not computed; call backward first")),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, back: Option<BackFn>) -> Result<Var> {
        if self.grads.is_some() {
            return Err(Error::numeric("tape already consumed by backward"));
        }
        let id = self.values.len();
        self.shapes.push(shape);
        self.values.push(value);
        self.backs.push(back);
        Ok(Var(id))
    }

    /// Reverse pass from a scalar loss. Fills gradients for every node;
    /// a second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::numeric("backward already ran on this tape"));
        }
        if numel(&self.shapes[loss.0]) != 1 {
            return Err(Error::validation(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shapes[loss.0]),
            ));
        }
        let mut grads: Vec<Vec<f64>> = self.shapes.iter().map(|s| vec![0.0; numel(s)]).collect();
        grads[loss.0][0] = 1.0;
        for i in (0..self.values.len()).rev() {
            if let Some(back) = self.backs[i].take() {
                back(&self.values, &mut grads);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient at node {i} (shape {:?})",
                    self.shapes[i]
                )));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// y = x W + b, with `x` a vector `[n]` or a row batch `[m, n]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, n, batched) = match self.shapes[x.0].as_slice() {
            [n] => (1usize, *n, false),
            [m, n] => (*m, *n, true),
            s => {
                return Err(Error::validation(
                    "dense",
                    format!("input must be rank 1 or 2, got {s:?}"),
                ))
            }
        };
        let (wn, p) = match self.shapes[w.0].as_slice() {
            [wn, p] => (*wn, *p),
            s => {
                return Err(Error::validation(
                    "dense",
                    format!("weight must be rank 2, got {s:?}"),
                ))
            }
        };
        if wn != n || self.shapes[b.0].as_slice() != [p] {
            return Err(Error::validation(
                "dense",
                format!(
                    "shape mismatch: x {:?}, w {:?}, b {:?}",
                    self.shapes[x.0], self.shapes[w.0], self.shapes[b.0]
                ),
            ));
        }
        let mut out = vec![0.0; rows * p];
        matmul(&self.values[x.0], &self.values[w.0], &mut out, rows, n, p);
        for row in out.chunks_exact_mut(p) {
            for (o, bv) in row.iter_mut().zip(&self.values[b.0]) {
                *o += bv;
            }
        }
        check_finite("dense", &out)?;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        let id = self.values.len();
        self.push(
            if batched { vec![rows, p] } else { vec![p] },
            out,
            Some(Box::new(move |vals, grads| {
                let g = grads[id].clone();
                let (xv, wv) = (&vals[xi], &vals[wi]);
                // dx = g W^T
                for r in 0..rows {
                    for k in 0..n {
                        let mut acc = 0.0;
                        for j in 0..p {
                            acc += g[r * p + j] * wv[k * p + j];
                        }
                        grads[xi][r * n + k] += acc;
                    }
                }
                // dW = x^T g
                for r in 0..rows {
                    for k in 0..n {
                        let xrk = xv[r * n + k];
                        if xrk == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            grads[wi][k * p + j] += xrk * g[r * p + j];
                        }
                    }
                }
                // db = column sums of g
                for r in 0..rows {
                    for j in 0..p {
                        grads[bi][j] += g[r * p + j];
                    }
                }
            })),
        )
    }

    /// Valid-mode 2-d cross-correlation of `x` `[C, H, W]` with kernels
    /// `k` `[F, C, KH, KW]`, implemented as im2col + matmul.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (c, h, w) = match self.shapes[x.0].as_slice() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::validation(
                    "conv2d",
                    format!("input must be rank 3 [C,H,W], got {s:?}"),
                ))
            }
        };
        let (f, kc, kh, kw) = match self.shapes[k.0].as_slice() {
            [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
            s => {
                return Err(Error::validation(
                    "conv2d",
                    format!("kernel must be rank 4 [F,C,KH,KW], got {s:?}"),
                ))
            }
        };
        if stride == 0 || kc != c || kh > h || kw > w {
            return Err(Error::validation(
                "conv2d",
                format!(
                    "shape mismatch: input {:?}, kernel {:?}, stride {stride}",
                    self.shapes[x.0], self.shapes[k.0]
                ),
            ));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let krows = c * kh * kw;
        let cols = oh * ow;
        let mut col = vec![0.0; krows * cols];
        im2col(&self.values[x.0], c, h, w, kh, kw, stride, oh, ow, &mut col);
        let mut out = vec![0.0; f * cols];
        matmul(&self.values[k.0], &col, &mut out, f, krows, cols);
        check_finite("conv2d", &out)?;
        let (xi, ki) = (x.0, k.0);
        let id = self.values.len();
        self.push(
            vec![f, oh, ow],
            out,
            Some(Box::new(move |vals, grads| {
                let g = grads[id].clone(); // [F, cols]
                let mut col = vec![0.0; krows * cols];
                im2col(&vals[xi], c, h, w, kh, kw, stride, oh, ow, &mut col);
                // dK[f, r] = sum_q g[f, q] col[r, q]
                for fi in 0..f {
                    for r in 0..krows {
                        let mut acc = 0.0;
                        for q in 0..cols {
                            acc += g[fi * cols + q] * col[r * cols + q];
                        }
                        grads[ki][fi * krows + r] += acc;
                    }
                }
                // dcol[r, q] = sum_f k[f, r] g[f, q], scattered back to dx
                let kv = &vals[ki];
                let mut dcol = vec![0.0; krows * cols];
                for fi in 0..f {
                    for r in 0..krows {
                        let kfr = kv[fi * krows + r];
                        if kfr == 0.0 {
                            continue;
                        }
                        for q in 0..cols {
                            dcol[r * cols + q] += kfr * g[fi * cols + q];
                        }
                    }
                }
                col2im_add(&dcol, c, h, w, kh, kw, stride, oh, ow, &mut grads[xi]);
            })),
        )
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.values[x.0].iter().map(|&v| v.max(0.0)).collect();
        check_finite("relu", &out)?;
        let shape = self.shapes[x.0].clone();
        let xi = x.0;
        let id = self.values.len();
        self.push(
            shape,
            out,
            Some(Box::new(move |vals, grads| {
                let g = grads[id].clone();
                for (k, gv) in g.iter().enumerate() {
                    if vals[xi][k] > 0.0 {
                        grads[xi][k] += gv;
                    }
                }
            })),
        )
    }

    /// 2x2 max pooling with stride 2 over `[C, H, W]`; trailing odd row/column
    /// is dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shapes[x.0].as_slice() {
            [c, h, w] => (*c, *h, *w),
            s => {
                return Err(Error::validation(
                    "maxpool2",
                    format!("input must be rank 3 [C,H,W], got {s:?}"),
                ))
            }
        };
        if h < 2 || w < 2 {
            return Err(Error::validation(
                "maxpool2",
                format!("input {:?} too small for a 2x2 window", self.shapes[x.0]),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.values[x.0];
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ci * h * w + 2 * i * w + 2 * j;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    for &idx in &cand[1..] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = ci * oh * ow + i * ow + j;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        check_finite("maxpool2", &out)?;
        let xi = x.0;
        let id = self.values.len();
        self.push(
            vec![c, oh, ow],
            out,
            Some(Box::new(move |_vals, grads| {
                let g = grads[id].clone();
                for (o, &src) in argmax.iter().enumerate() {
                    grads[xi][src] += g[o];
                }
            })),
        )
    }

    /// Mean over all entries, returning a scalar (shape `[1]`).
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].len();
        if n == 0 {
            return Err(Error::validation("mean", "empty tensor"));
        }
        let m = self.values[x.0].iter().sum::<f64>() / n as f64;
        check_finite("mean", &[m])?;
        let xi = x.0;
        let id = self.values.len();
        self.push(
            vec![1],
            vec![m],
            Some(Box::new(move |_vals, grads| {
                let g = grads[id][0] / n as f64;
                for d in grads[xi].iter_mut() {
                    *d += g;
                }
            })),
        )
    }

    /// Flattening concatenation of any number of tensors into a rank-1 vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::validation("concat", "no inputs"));
        }
        let mut out = Vec::new();
        let mut spans = Vec::with_capacity(xs.len());
        for v in xs {
            let start = out.len();
            out.extend_from_slice(&self.values[v.0]);
            spans.push((v.0, start, out.len()));
        }
        let total = out.len();
        let id = self.values.len();
        self.push(
            vec![total],
            out,
            Some(Box::new(move |_vals, grads| {
                let g = grads[id].clone();
                for (src, start, end) in spans {
                    for (k, gv) in g[start..end].iter().enumerate() {
                        grads[src][k] += gv;
                    }
                }
            })),
        )
    }

    /// Reinterprets `x` with a new shape of identical element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.values[x.0].len() {
            return Err(Error::validation(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} values) into {:?}",
                    self.shapes[x.0],
                    self.values[x.0].len(),
                    shape
                ),
            ));
        }
        let data = self.values[x.0].clone();
        let xi = x.0;
        let id = self.values.len();
        self.push(
            shape.to_vec(),
            data,
            Some(Box::new(move |_vals, grads| {
                let g = grads[id].clone();
                for (d, gv) in grads[xi].iter_mut().zip(&g) {
                    *d += gv;
                }
            })),
        )
    }

    /// y = c * x for a fixed scalar c.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::validation("scale", "factor must be finite"));
        }
        let out: Vec<f64> = self.values[x.0].iter().map(|&v| c * v).collect();
        check_finite("scale", &out)?;
        let shape = self.shapes[x.0].clone();
        let xi = x.0;
        let id = self.values.len();
        self.push(
            shape,
            out,
            Some(Box::new(move |_vals, grads| {
                let g = grads[id].clone();
                for (d, gv) in grads[xi].iter_mut().zip(&g) {
                    *d += c * gv;
                }
            })),
        )
    }

    /// Pairwise squared Euclidean distances between the rows of `a` `[m, d]`
    /// and the rows of `b` `[n, d]`, returning `[m, n]`.
    pub fn sq_euclidean_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = match self.shapes[a.0].as_slice() {
            [m, d] => (*m, *d),
            s => {
                return Err(Error::validation(
                    "sq_euclidean_rows",
                    format!("left operand must be rank 2, got {s:?}"),
                ))
            }
        };
        let (n, d2) = match self.shapes[b.0].as_slice() {
            [n, d2] => (*n, *d2),
            s => {
                return Err(Error::validation(
                    "sq_euclidean_rows",
                    format!("right operand must be rank 2, got {s:?}"),
                ))
            }
        };
        if d != d2 {
            return Err(Error::validation(
                "sq_euclidean_rows",
                format!("row width mismatch: {:?} vs {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..d {
                    let diff = av[i * d + k] - bv[j * d + k];
                    acc += diff * diff;
                }
                out[i * n + j] = acc;
            }
        }
        check_finite("sq_euclidean_rows", &out)?;
        let (ai, bi) = (a.0, b.0);
        let id = self.values.len();
        self.push(
            vec![m, n],
            out,
            Some(Box::new(move |vals, grads| {
                let g = grads[id].clone();
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = vals[ai][i * d + k] - vals[bi][j * d + k];
                            grads[ai][i * d + k] += 2.0 * diff * gij;
                            grads[bi][j * d + k] -= 2.0 * diff * gij;
                        }
                    }
                }
            })),
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits` `[m, C]` against
    /// integer class labels, computed with log-sum-exp stabilization.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = match self.shapes[logits.0].as_slice() {
            [m, c] => (*m, *c),
            s => {
                return Err(Error::validation(
                    "softmax_cross_entropy",
                    format!("logits must be rank 2, got {s:?}"),
                ))
            }
        };
        if labels.len() != m {
            return Err(Error::validation(
                "softmax_cross_entropy",
                format!("{} logit rows but {} labels", m, labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::validation(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let lv = &self.values[logits.0];
        let mut softmax = vec![0.0; m * c];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                softmax[r * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                softmax[r * c + j] /= denom;
            }
            loss += denom.ln() + max - row[labels[r]];
        }
        loss /= m as f64;
        check_finite("softmax_cross_entropy", &[loss])?;
        let li = logits.0;
        let labels = labels.to_vec();
        let id = self.values.len();
        self.push(
            vec![1],
            vec![loss],
            Some(Box::new(move |_vals, grads| {
                let g = grads[id][0] / m as f64;
                for r in 0..m {
                    for j in 0..c {
                        let indicator = if labels[r] == j { 1.0 } else { 0.0 };
                        grads[li][r * c + j] += g * (softmax[r * c + j] - indicator);
                    }
                }
            })),
        )
    }
}

/// Row-major matmul: c[rows x p] += a[rows x n] * b[n x p].
fn matmul(a: &[f64], b: &[f64], c: &mut [f64], rows: usize, n: usize, p: usize) {
    for i in 0..rows {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * p..(i + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let cols = oh * ow;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let r = (ci * kh + i) * kw + j;
                for y in 0..oh {
                    let src = ci * h * w + (y * stride + i) * w + j;
                    for xq in 0..ow {
                        col[r * cols + y * ow + xq] = x[src + xq * stride];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let cols = oh * ow;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let r = (ci * kh + i) * kw + j;
                for y in 0..oh {
                    let dst = ci * h * w + (y * stride + i) * w + j;
                    for xq in 0..ow {
                        x[dst + xq * stride] += col[r * cols + y * ow + xq];
                    }
                }
            }
        }
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{op} produced a non-finite value")));
    }
    Ok(())
}
