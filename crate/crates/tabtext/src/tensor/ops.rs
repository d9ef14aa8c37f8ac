//! Tape primitives: forward kernels and their adjoints.
//!
//! Every primitive validates shapes, computes the forward value, and (on
//! recording tapes) registers an adjoint closure that routes gradient
//! contributions to whichever parents are gradient-tracked. No primitive
//! mutates its inputs.

use super::tape::{BackwardFn, Tape, Var};
use super::{Tensor, TensorError};

/// Label for rows that contribute no loss in [`Tape::cross_entropy`].
pub const IGNORE_INDEX: u32 = u32::MAX;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `A[m,k] · B[k,n] -> C[m,n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `A[m,n] · B[p,n]^T -> C[m,p]` (row-by-row dot products)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for q in 0..p {
            let brow = &b[q * n..(q + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * p + q] = acc;
        }
    }
    c
}

/// `A[m,k]^T · B[m,n] -> C[k,n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Map a relative offset to a bucket in `[0, 2*window)`.
fn rel_bucket(delta: i64, window: usize) -> usize {
    let w = window as i64;
    (delta.clamp(-w, w - 1) + w) as usize
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        [n] => (1, *n),
        _ => (1, t.len()),
    }
}

impl Tape {
    /// `a[m,k] · b[k,n] -> [m,n]`. Both operands must be 2-D.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::new(vec![m, n], mm(av.data(), bv.data(), m, k, n))?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn> = if ra || rb {
            Some(Box::new(move |g, sink| {
                if ra {
                    let da = mm_nt(g.data(), bv.data(), m, n, k);
                    sink(a.0, Tensor::new(vec![m, k], da).unwrap());
                }
                if rb {
                    let db = mm_tn(av.data(), g.data(), m, k, n);
                    sink(b.0, Tensor::new(vec![k, n], db).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, ra || rb, back))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let &[m, n] = av.shape() else {
            return Err(shape_err("transpose", av.shape(), &[]));
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        let ra = self.requires_grad(a);
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g.data()[j * m + i];
                    }
                }
                sink(a.0, Tensor::new(vec![m, n], da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Elementwise sum; also accepts `[m,n] + [n]` (bias broadcast over rows).
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = av.shape() != bv.shape();
        if broadcast {
            let rows_ok = av.shape().len() == 2
                && bv.shape().len() == 1
                && av.shape()[1] == bv.shape()[0];
            if !rows_ok {
                return Err(shape_err("add", av.shape(), bv.shape()));
            }
        }
        let n = bv.len();
        let mut out = av.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += bv.data()[if broadcast { i % n } else { i }];
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let bshape = bv.shape().to_vec();
        let back: Option<BackwardFn> = if ra || rb {
            Some(Box::new(move |g, sink| {
                if ra {
                    sink(a.0, g.clone());
                }
                if rb {
                    if broadcast {
                        let mut db = vec![0.0; n];
                        for (i, gv) in g.data().iter().enumerate() {
                            db[i % n] += gv;
                        }
                        sink(b.0, Tensor::new(bshape.clone(), db).unwrap());
                    } else {
                        sink(b.0, g.clone());
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, ra || rb, back))
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn> = if ra || rb {
            Some(Box::new(move |g, sink| {
                if ra {
                    sink(a.0, g.clone());
                }
                if rb {
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    sink(b.0, Tensor::new(g.shape().to_vec(), neg).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, ra || rb, back))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let back: Option<BackwardFn> = if ra || rb {
            Some(Box::new(move |g, sink| {
                if ra {
                    let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    sink(a.0, Tensor::new(g.shape().to_vec(), da).unwrap());
                }
                if rb {
                    let db: Vec<f64> = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    sink(b.0, Tensor::new(g.shape().to_vec(), db).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, ra || rb, back))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let ra = self.requires_grad(a);
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let da: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (rows, cols) = dims2(&av);
        if cols == 0 {
            return Err(shape_err("softmax", av.shape(), &[]));
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let src = &av.data()[i * cols..(i + 1) * cols];
            let dst = &mut out[i * cols..(i + 1) * cols];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let ra = self.requires_grad(a);
        let y = out.clone();
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    let yr = &y.data()[i * cols..(i + 1) * cols];
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    let dr = &mut da[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                sink(a.0, Tensor::new(g.shape().to_vec(), da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = dims2(&xv);
        if gv.shape() != [cols] || bv.shape() != [cols] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let src = &xv.data()[i * cols..(i + 1) * cols];
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..cols {
                let xh = (src[j] - mean) * s;
                xhat[i * cols + j] = xh;
                out[i * cols + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let back: Option<BackwardFn> = if rx || rg || rb {
            Some(Box::new(move |g, sink| {
                if rb {
                    let mut db = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] += g.data()[i * cols + j];
                        }
                    }
                    sink(beta.0, Tensor::new(vec![cols], db).unwrap());
                }
                if rg {
                    let mut dg = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[j] += g.data()[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                    sink(gamma.0, Tensor::new(vec![cols], dg).unwrap());
                }
                if rx {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let gr = &g.data()[i * cols..(i + 1) * cols];
                        let xh = &xhat[i * cols..(i + 1) * cols];
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..cols {
                            let h = gv.data()[j] * gr[j];
                            mean_h += h;
                            mean_hx += h * xh[j];
                        }
                        mean_h /= cols as f64;
                        mean_hx /= cols as f64;
                        for j in 0..cols {
                            let h = gv.data()[j] * gr[j];
                            dx[i * cols + j] = (h - mean_h - xh[j] * mean_hx) * inv_std[i];
                        }
                    }
                    sink(x.0, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, rx || rg || rb, back))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self, a: Var) -> Result<Var, TensorError> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let av = self.value(a);
        let out: Vec<f64> = av
            .data()
            .iter()
            .map(|&x| {
                let t = (C * (x + K * x.powi(3))).tanh();
                0.5 * x * (1.0 + t)
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let ra = self.requires_grad(a);
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let inner = C * (x + K * x.powi(3));
                        let t = inner.tanh();
                        let d_inner = C * (1.0 + 3.0 * K * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)
                    })
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Gather rows of `table[V,d]` for each id; adjoint scatter-adds rows.
    pub fn embedding_lookup(&self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let &[v, d] = tv.shape() else {
            return Err(shape_err("embedding_lookup", tv.shape(), &[]));
        };
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id as usize,
                    bound: v,
                });
            }
        }
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rt = self.requires_grad(table);
        let ids_owned: Vec<u32> = ids.to_vec();
        let back: Option<BackwardFn> = if rt {
            Some(Box::new(move |g, sink| {
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids_owned.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    let src = &g.data()[i * d..(i + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
                sink(table.0, Tensor::new(vec![v, d], dt).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, rt, back))
    }

    /// Mean cross entropy of `logits[n,V]` against integer targets.
    ///
    /// Rows whose target is [`IGNORE_INDEX`] contribute nothing; with no
    /// counted rows the loss is exactly zero.
    pub fn cross_entropy(&self, logits: Var, targets: &[u32]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let &[n, v] = lv.shape() else {
            return Err(shape_err("cross_entropy", lv.shape(), &[]));
        };
        if targets.len() != n {
            return Err(TensorError::LengthMismatch {
                op: "cross_entropy",
                shape: vec![n, v],
                len: targets.len(),
            });
        }
        for &t in targets {
            if t != IGNORE_INDEX && t as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t as usize,
                    bound: v,
                });
            }
        }
        let mut count = 0usize;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            count += 1;
            let row = &lv.data()[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let out = Tensor::scalar(loss);
        let rl = self.requires_grad(logits);
        let targets_owned: Vec<u32> = targets.to_vec();
        let back: Option<BackwardFn> = if rl {
            Some(Box::new(move |g, sink| {
                let gscale = g.item();
                let mut dl = vec![0.0; n * v];
                if count > 0 {
                    let inv = gscale / count as f64;
                    for (i, &t) in targets_owned.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &lv.data()[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        let drow = &mut dl[i * v..(i + 1) * v];
                        for (d, &x) in drow.iter_mut().zip(row) {
                            *d = (x - max).exp();
                            sum += *d;
                        }
                        for d in drow.iter_mut() {
                            *d = *d / sum * inv;
                        }
                        drow[t as usize] -= inv;
                    }
                }
                sink(logits.0, Tensor::new(vec![n, v], dl).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, rl, back))
    }

    /// Copy of rows `range` of a 2-D tensor.
    pub fn slice_rows(&self, a: Var, range: std::ops::Range<usize>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let &[m, n] = av.shape() else {
            return Err(shape_err("slice_rows", av.shape(), &[]));
        };
        if range.end > m || range.start > range.end {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: range.end,
                bound: m,
            });
        }
        let out = Tensor::new(
            vec![range.len(), n],
            av.data()[range.start * n..range.end * n].to_vec(),
        )?;
        let ra = self.requires_grad(a);
        let start = range.start;
        let len = range.len();
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; m * n];
                da[start * n..(start + len) * n].copy_from_slice(g.data());
                sink(a.0, Tensor::new(vec![m, n], da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Copy of columns `range` of a 2-D tensor.
    pub fn slice_cols(&self, a: Var, range: std::ops::Range<usize>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let &[m, n] = av.shape() else {
            return Err(shape_err("slice_cols", av.shape(), &[]));
        };
        if range.end > n || range.start > range.end {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: range.end,
                bound: n,
            });
        }
        let width = range.len();
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&av.data()[i * n + range.start..i * n + range.end]);
        }
        let out = Tensor::new(vec![m, width], out)?;
        let ra = self.requires_grad(a);
        let start = range.start;
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + width]
                        .copy_from_slice(&g.data()[i * width..(i + 1) * width]);
                }
                sink(a.0, Tensor::new(vec![m, n], da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", &[], &[]));
        }
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let m = values[0].rows();
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            if v.shape().len() != 2 || v.rows() != m {
                return Err(shape_err("concat_cols", values[0].shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (v, &w) in values.iter().zip(&widths) {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let any = reqs.iter().any(|&r| r);
        let parts_owned: Vec<Var> = parts.to_vec();
        let back: Option<BackwardFn> = if any {
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for ((&p, &w), &req) in parts_owned.iter().zip(&widths).zip(&reqs) {
                    if req {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        sink(p.0, Tensor::new(vec![m, w], dp).unwrap());
                    }
                    off += w;
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, any, back))
    }

    /// Stack 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", &[], &[]));
        }
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let n = values[0].cols();
        let mut heights = Vec::with_capacity(values.len());
        for v in &values {
            if v.shape().len() != 2 || v.cols() != n {
                return Err(shape_err("concat_rows", values[0].shape(), v.shape()));
            }
            heights.push(v.rows());
        }
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for v in &values {
            out.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![total, n], out)?;
        let reqs: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let any = reqs.iter().any(|&r| r);
        let parts_owned: Vec<Var> = parts.to_vec();
        let back: Option<BackwardFn> = if any {
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for ((&p, &h), &req) in parts_owned.iter().zip(&heights).zip(&reqs) {
                    if req {
                        sink(
                            p.0,
                            Tensor::new(vec![h, n], g.data()[off * n..(off + h) * n].to_vec())
                                .unwrap(),
                        );
                    }
                    off += h;
                }
            }))
        } else {
            None
        };
        Ok(self.push(out, any, back))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(shape_err("mean", av.shape(), &[]));
        }
        let len = av.len();
        let out = Tensor::scalar(av.data().iter().sum::<f64>() / len as f64);
        let ra = self.requires_grad(a);
        let shape = av.shape().to_vec();
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let v = g.item() / len as f64;
                sink(a.0, Tensor::full(&shape, v));
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let out = Tensor::scalar(av.data().iter().sum::<f64>());
        let ra = self.requires_grad(a);
        let shape = av.shape().to_vec();
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                sink(a.0, Tensor::full(&shape, g.item()));
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by `1/(1-rate)`. The adjoint reuses the sampled mask. A rate
    /// of zero is the identity.
    pub fn dropout<R: rand::Rng>(
        &self,
        a: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate == 0.0 {
            return Ok(a);
        }
        let av = self.value(a);
        let keep = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let ra = self.requires_grad(a);
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&factors)
                    .map(|(g, f)| g * f)
                    .collect();
                sink(a.0, Tensor::new(g.shape().to_vec(), da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Expand a query-indexed relative table `a[q, 2w]` to scores `[q, keys]`:
    /// `out[i,j] = a[i, bucket(i - j)]`.
    pub fn relative_gather_q(
        &self,
        a: Var,
        keys: usize,
        window: usize,
    ) -> Result<Var, TensorError> {
        let av = self.value(a);
        let &[q, r] = av.shape() else {
            return Err(shape_err("relative_gather_q", av.shape(), &[]));
        };
        if r != 2 * window {
            return Err(shape_err("relative_gather_q", av.shape(), &[q, 2 * window]));
        }
        let mut out = vec![0.0; q * keys];
        for i in 0..q {
            for j in 0..keys {
                let b = rel_bucket(i as i64 - j as i64, window);
                out[i * keys + j] = av.data()[i * r + b];
            }
        }
        let out = Tensor::new(vec![q, keys], out)?;
        let ra = self.requires_grad(a);
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; q * r];
                for i in 0..q {
                    for j in 0..keys {
                        let b = rel_bucket(i as i64 - j as i64, window);
                        da[i * r + b] += g.data()[i * keys + j];
                    }
                }
                sink(a.0, Tensor::new(vec![q, r], da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }

    /// Expand a key-indexed relative table `a[k, 2w]` to scores `[queries, k]`:
    /// `out[i,j] = a[j, bucket(j - i)]`.
    pub fn relative_gather_k(
        &self,
        a: Var,
        queries: usize,
        window: usize,
    ) -> Result<Var, TensorError> {
        let av = self.value(a);
        let &[k, r] = av.shape() else {
            return Err(shape_err("relative_gather_k", av.shape(), &[]));
        };
        if r != 2 * window {
            return Err(shape_err("relative_gather_k", av.shape(), &[k, 2 * window]));
        }
        let mut out = vec![0.0; queries * k];
        for i in 0..queries {
            for j in 0..k {
                let b = rel_bucket(j as i64 - i as i64, window);
                out[i * k + j] = av.data()[j * r + b];
            }
        }
        let out = Tensor::new(vec![queries, k], out)?;
        let ra = self.requires_grad(a);
        let back: Option<BackwardFn> = if ra {
            Some(Box::new(move |g, sink| {
                let mut da = vec![0.0; k * r];
                for i in 0..queries {
                    for j in 0..k {
                        let b = rel_bucket(j as i64 - i as i64, window);
                        da[j * r + b] += g.data()[i * k + j];
                    }
                }
                sink(a.0, Tensor::new(vec![k, r], da).unwrap());
            }))
        } else {
            None
        };
        Ok(self.push(out, ra, back))
    }
}
