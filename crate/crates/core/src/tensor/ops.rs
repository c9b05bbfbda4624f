use std::rc::Rc;

use super::kernels::{gemm, View};
use super::tape::Var;
use super::{Result, TensorError};

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn shape_err(op: &'static str, lhs: Vec<usize>, rhs: Vec<usize>) -> TensorError {
    TensorError::Shape { op, lhs, rhs }
}

fn dims2(op: &'static str, v: &Var<'_>) -> Result<(usize, usize)> {
    let s = v.shape();
    match s.as_slice() {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

/// GELU with the tanh approximation
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl<'t> Var<'t> {
    fn unary<F, G>(self, f: F, df: G) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y_rc = Rc::new(y.clone());
        let id = self.id();
        self.tape().custom(&[self], self.shape(), y, move |g, sink| {
            let slot = sink.slot(id);
            for i in 0..g.len() {
                slot[i] += g[i] * df(x[i], y_rc[i]);
            }
        })
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, a, b));
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let (a, b) = (self.value(), other.value());
        let y = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.id(), other.id());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().custom(&[self, other], self.shape(), y, move |g, sink| {
            if ra {
                sink.add(ia, g);
            }
            if rb {
                sink.add(ib, g);
            }
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add(other.scale(-1.0))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let y = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let (ia, ib) = (self.id(), other.id());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().custom(&[self, other], self.shape(), y, move |g, sink| {
            if ra {
                let s = sink.slot(ia);
                for i in 0..g.len() {
                    s[i] += g[i] * b[i];
                }
            }
            if rb {
                let s = sink.slot(ib);
                for i in 0..g.len() {
                    s[i] += g[i] * a[i];
                }
            }
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().iter().map(|v| v * c).collect();
        let id = self.id();
        self.tape().custom(&[self], self.shape(), y, move |g, sink| {
            let s = sink.slot(id);
            for i in 0..g.len() {
                s[i] += g[i] * c;
            }
        })
    }

    /// Multiplies every element by a single-element node.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        if s.numel() != 1 {
            return Err(shape_err("mul_scalar", self.shape(), s.shape()));
        }
        let x = self.value();
        let c = s.item();
        let y = x.iter().map(|v| v * c).collect();
        let (ix, is) = (self.id(), s.id());
        let (rx, rs) = (self.requires_grad(), s.requires_grad());
        Ok(self.tape().custom(&[self, s], self.shape(), y, move |g, sink| {
            if rx {
                let sl = sink.slot(ix);
                for i in 0..g.len() {
                    sl[i] += g[i] * c;
                }
            }
            if rs {
                let dot: f64 = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                sink.slot(is)[0] += dot;
            }
        }))
    }

    /// Adds a vector along the last axis (bias broadcast over rows).
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let d = *shape.last().unwrap();
        if bias.shape() != [d] {
            return Err(shape_err("add_row", shape, bias.shape()));
        }
        let (x, b) = (self.value(), bias.value());
        let y = x.iter().enumerate().map(|(i, v)| v + b[i % d]).collect();
        let (ix, ib) = (self.id(), bias.id());
        let (rx, rb) = (self.requires_grad(), bias.requires_grad());
        Ok(self.tape().custom(&[self, bias], shape, y, move |g, sink| {
            if rx {
                sink.add(ix, g);
            }
            if rb {
                let s = sink.slot(ib);
                for (i, gi) in g.iter().enumerate() {
                    s[i % d] += gi;
                }
            }
        }))
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (p, q) = dims2("matmul", &self)?;
        let (q2, r) = dims2("matmul", &other)?;
        if q != q2 {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; p * r];
        gemm(p, q, r, 1.0, &a, View::rows(q), &b, View::rows(r), 0.0, &mut c, View::rows(r));
        let (ia, ib) = (self.id(), other.id());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().custom(&[self, other], vec![p, r], c, move |g, sink| {
            if ra {
                // dA = dC · Bᵀ
                gemm(p, r, q, 1.0, g, View::rows(r), &b, View::transposed(r), 1.0, sink.slot(ia), View::rows(q));
            }
            if rb {
                // dB = Aᵀ · dC
                gemm(q, p, r, 1.0, &a, View::transposed(q), g, View::rows(r), 1.0, sink.slot(ib), View::rows(r));
            }
        }))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let (p, q) = dims2("matmul_t", &self)?;
        let (r, q2) = dims2("matmul_t", &other)?;
        if q != q2 {
            return Err(shape_err("matmul_t", self.shape(), other.shape()));
        }
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; p * r];
        gemm(p, q, r, 1.0, &a, View::rows(q), &b, View::transposed(q), 0.0, &mut c, View::rows(r));
        let (ia, ib) = (self.id(), other.id());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().custom(&[self, other], vec![p, r], c, move |g, sink| {
            if ra {
                // dA = dC · B
                gemm(p, r, q, 1.0, g, View::rows(r), &b, View::rows(q), 1.0, sink.slot(ia), View::rows(q));
            }
            if rb {
                // dB = dCᵀ · A
                gemm(r, p, q, 1.0, g, View::transposed(r), &a, View::rows(q), 1.0, sink.slot(ib), View::rows(q));
            }
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (r, c) = dims2("transpose", &self)?;
        let x = self.value();
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = x[i * c + j];
            }
        }
        let id = self.id();
        Ok(self.tape().custom(&[self], vec![c, r], y, move |g, sink| {
            let s = sink.slot(id);
            for i in 0..r {
                for j in 0..c {
                    s[i * c + j] += g[j * r + i];
                }
            }
        }))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        let id = self.id();
        Ok(self
            .tape()
            .custom(&[self], shape, self.value().to_vec(), move |g, sink| sink.add(id, g)))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().iter().sum();
        let (id, n) = (self.id(), self.numel());
        self.tape().custom(&[self], vec![1], vec![total], move |g, sink| {
            let s = sink.slot(id);
            for v in s.iter_mut().take(n) {
                *v += g[0];
            }
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - m).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] /= z;
                }
            }
        }
        let y_rc = Rc::new(y.clone());
        let id = self.id();
        Ok(self.tape().custom(&[self], shape, y, move |g, sink| {
            let s = sink.slot(id);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..len).map(|k| g[at(k)] * y_rc[at(k)]).sum();
                    for k in 0..len {
                        s[at(k)] += y_rc[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
        }))
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    /// `min(x, c)`; gradient is zero where the clamp is active.
    pub fn clamp_max(self, c: f64) -> Var<'t> {
        self.unary(move |x| x.min(c), move |x, _| if x < c { 1.0 } else { 0.0 })
    }

    /// Gathers rows of a matrix (row indices may repeat).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (r, c) = dims2("gather_rows", &self)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let x = self.value();
        let mut y = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            y.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rows = rows.to_vec();
        let id = self.id();
        Ok(self.tape().custom(&[self], vec![rows.len(), c], y, move |g, sink| {
            let s = sink.slot(id);
            for (k, &i) in rows.iter().enumerate() {
                for j in 0..c {
                    s[i * c + j] += g[k * c + j];
                }
            }
        }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, c) = dims2("concat_rows", first)?;
        let mut y = Vec::new();
        let mut spans = Vec::new();
        for p in parts {
            let (r, c2) = dims2("concat_rows", p)?;
            if c2 != c {
                return Err(shape_err("concat_rows", first.shape(), p.shape()));
            }
            spans.push((p.id(), y.len(), r * c, p.requires_grad()));
            y.extend_from_slice(&p.value());
        }
        let rows = y.len() / c;
        Ok(first.tape().custom(parts, vec![rows, c], y, move |g, sink| {
            for &(id, start, len, rg) in &spans {
                if rg {
                    sink.add(id, &g[start..start + len]);
                }
            }
        }))
    }
}

/// Row gather from an embedding table; backward scatter-adds.
pub fn embedding_lookup<'t>(table: Var<'t>, ids: &[u32]) -> Result<Var<'t>> {
    let (v, _) = dims2("embedding_lookup", &table)?;
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
        return Err(TensorError::Index {
            op: "embedding_lookup",
            index: bad as usize,
            bound: v,
        });
    }
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    table.gather_rows(&rows)
}

/// Layer normalization over the last axis followed by the affine map.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let shape = x.shape();
    let d = *shape.last().unwrap();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err("layer_norm", shape, gain.shape()));
    }
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            msg: "eps must be positive".into(),
        });
    }
    let xv = x.value();
    let (gv, bv) = (gain.value(), bias.value());
    let rows = xv.len() / d;
    let mut xhat = vec![0.0; xv.len()];
    let mut rstd = vec![0.0; rows];
    let mut y = vec![0.0; xv.len()];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gv[j] + bv[j];
        }
    }
    let (ix, ig, ib) = (x.id(), gain.id(), bias.id());
    let (rx, rg, rb) = (x.requires_grad(), gain.requires_grad(), bias.requires_grad());
    Ok(x.tape().custom(&[x, gain, bias], shape, y, move |g, sink| {
        if rg {
            let s = sink.slot(ig);
            for r in 0..rows {
                for j in 0..d {
                    s[j] += g[r * d + j] * xhat[r * d + j];
                }
            }
        }
        if rb {
            let s = sink.slot(ib);
            for r in 0..rows {
                for j in 0..d {
                    s[j] += g[r * d + j];
                }
            }
        }
        if rx {
            let s = sink.slot(ix);
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    dxhat[j] = g[r * d + j] * gv[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[r * d + j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    s[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                }
            }
        }
    }))
}

/// Result of [`cross_entropy`]; `all_masked` flags an empty selection.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy<'t> {
    pub loss: Var<'t>,
    pub all_masked: bool,
    pub count: usize,
}

/// Mean of `-log softmax(logits)[target]` over rows whose mask is set.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[u32], mask: &[bool]) -> Result<CrossEntropy<'t>> {
    let (n, c) = dims2("cross_entropy", &logits)?;
    if targets.len() != n || mask.len() != n {
        return Err(shape_err("cross_entropy", vec![n, c], vec![targets.len(), mask.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(TensorError::Index {
            op: "cross_entropy",
            index: bad as usize,
            bound: c,
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    let tape = logits.tape();
    if count == 0 {
        return Ok(CrossEntropy {
            loss: tape.scalar(0.0),
            all_masked: true,
            count,
        });
    }
    let x = logits.value();
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        let row = &x[r * c..(r + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[targets[r] as usize];
        for j in 0..c {
            probs[r * c + j] = (row[j] - lse).exp();
        }
    }
    let inv = 1.0 / count as f64;
    let targets = targets.to_vec();
    let mask = mask.to_vec();
    let id = logits.id();
    let loss = tape.custom(&[logits], vec![1], vec![total * inv], move |g, sink| {
        let s = sink.slot(id);
        let k = g[0] * inv;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            for j in 0..c {
                s[r * c + j] += k * probs[r * c + j];
            }
            s[r * c + targets[r] as usize] -= k;
        }
    });
    Ok(CrossEntropy {
        loss,
        all_masked: false,
        count,
    })
}

/// Layout of a batched multi-head attention call: queries are
/// `[batch·q_len, width]`, keys/values `[batch·k_len, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

/// Scaled dot-product attention with a boolean `allowed` mask of shape
/// `[batch, q_len, k_len]`. Fully masked query rows produce zeros.
pub fn masked_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    shape: AttentionShape,
    allowed: Rc<Vec<bool>>,
) -> Result<Var<'t>> {
    let AttentionShape {
        batch,
        q_len: tq,
        k_len: tk,
        heads,
    } = shape;
    let (qr, width) = dims2("masked_attention", &q)?;
    let (kr, kw) = dims2("masked_attention", &k)?;
    if qr != batch * tq || kr != batch * tk || kw != width || v.shape() != k.shape() {
        return Err(shape_err("masked_attention", q.shape(), k.shape()));
    }
    if heads == 0 || width % heads != 0 {
        return Err(TensorError::Invalid {
            op: "masked_attention",
            msg: format!("width {width} not divisible by {heads} heads"),
        });
    }
    if allowed.len() != batch * tq * tk {
        return Err(shape_err("masked_attention", vec![batch, tq, tk], vec![allowed.len()]));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let mut probs = vec![0.0; batch * heads * tq * tk];
    let mut out = vec![0.0; batch * tq * width];
    for b in 0..batch {
        let mask = &allowed[b * tq * tk..(b + 1) * tq * tk];
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
            let qo = b * tq * width + h * dh;
            let ko = b * tk * width + h * dh;
            gemm(
                tq,
                dh,
                tk,
                scale,
                &qv,
                View::rows(width).at(qo),
                &kv,
                View::transposed(width).at(ko),
                0.0,
                p,
                View::rows(tk),
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let mrow = &mask[i * tk..(i + 1) * tk];
                let m = row
                    .iter()
                    .zip(mrow)
                    .filter(|(_, &a)| a)
                    .map(|(x, _)| *x)
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut z = 0.0;
                for (x, &a) in row.iter_mut().zip(mrow) {
                    *x = if a { (*x - m).exp() } else { 0.0 };
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            gemm(
                tq,
                tk,
                dh,
                1.0,
                p,
                View::rows(tk),
                &vv,
                View::rows(width).at(ko),
                0.0,
                &mut out,
                View::rows(width).at(qo),
            );
        }
    }
    let (iq, ik, iv) = (q.id(), k.id(), v.id());
    let (rq, rk, rv) = (q.requires_grad(), k.requires_grad(), v.requires_grad());
    Ok(q.tape().custom(&[q, k, v], vec![batch * tq, width], out, move |g, sink| {
        let mut dp = vec![0.0; tq * tk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                let qo = b * tq * width + h * dh;
                let ko = b * tk * width + h * dh;
                if rv {
                    // dV = Pᵀ · dO
                    gemm(
                        tk,
                        tq,
                        dh,
                        1.0,
                        p,
                        View::transposed(tk),
                        g,
                        View::rows(width).at(qo),
                        1.0,
                        sink.slot(iv),
                        View::rows(width).at(ko),
                    );
                }
                if !(rq || rk) {
                    continue;
                }
                // dP = dO · Vᵀ, then through the softmax.
                gemm(
                    tq,
                    dh,
                    tk,
                    1.0,
                    g,
                    View::rows(width).at(qo),
                    &vv,
                    View::transposed(width).at(ko),
                    0.0,
                    &mut dp,
                    View::rows(tk),
                );
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut dp[i * tk..(i + 1) * tk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..tk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                if rq {
                    gemm(
                        tq,
                        tk,
                        dh,
                        scale,
                        &dp,
                        View::rows(tk),
                        &kv,
                        View::rows(width).at(ko),
                        1.0,
                        sink.slot(iq),
                        View::rows(width).at(qo),
                    );
                }
                if rk {
                    gemm(
                        tk,
                        tq,
                        dh,
                        scale,
                        &dp,
                        View::transposed(tk),
                        &qv,
                        View::rows(width).at(qo),
                        1.0,
                        sink.slot(ik),
                        View::rows(width).at(ko),
                    );
                }
            }
        }
    }))
}
