use super::{Graph, Op, Sink, Var};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Affine map along the last axis: `y = x W^T + b` with `W: [F_out x F_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(Error::dim("weights", format!("expected [F_out, F_in], got {ws:?}")));
        }
        let (fout, fin) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&fin) {
            return Err(Error::dim(
                "last axis",
                format!("input {xs:?} does not end in F_in = {fin}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != fout {
                return Err(Error::dim(
                    "bias",
                    format!("{} entries for F_out = {fout}", self.value(b).numel()),
                ));
            }
        }
        let rows = self.value(x).numel() / fin.max(1);
        let wv = self.value(w).data();
        let mut wt = vec![S::zero(); fin * fout];
        for o in 0..fout {
            for i in 0..fin {
                wt[i * fout + o] = wv[o * fin + i];
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); rows * fout];
        for (r, yr) in out.chunks_exact_mut(fout).enumerate() {
            if let Some(b) = b {
                yr.copy_from_slice(self.value(b).data());
            }
            for (i, xi) in xv[r * fin..(r + 1) * fin].iter().enumerate() {
                if *xi != S::zero() {
                    axpy(*xi, &wt[i * fout..(i + 1) * fout], yr);
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("non-empty") = fout;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Multi-head scaled dot-product attention over `[T x E]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 {
            return Err(Error::dim("attention input", format!("expected [T, E], got {qs:?}")));
        }
        for (name, other) in [("keys", k), ("values", v)] {
            if self.shape(other) != qs.as_slice() {
                return Err(Error::dim(
                    name,
                    format!("shape {:?} differs from queries {qs:?}", self.shape(other)),
                ));
            }
        }
        let (t, e) = (qs[0], qs[1]);
        if heads == 0 || e % heads != 0 {
            return Err(Error::Config(format!("embedding {e} not divisible by {heads} heads")));
        }
        let dh = e / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mut probs = vec![S::zero(); heads * t * t];
        let mut out = vec![S::zero(); t * e];
        for h in 0..heads {
            let qh = split_head(self.value(q).data(), t, e, h, dh);
            let kh = split_head(self.value(k).data(), t, e, h, dh);
            let vh = split_head(self.value(v).data(), t, e, h, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let qi = &qh[i * dh..(i + 1) * dh];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[i * e + h * dh..i * e + (h + 1) * dh];
                for (j, pij) in row.iter().enumerate() {
                    axpy(*pij, &vh[j * dh..(j + 1) * dh], oi);
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(Tensor::new([t, e], out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }
}

fn split_head<S: Scalar>(x: &[S], t: usize, e: usize, h: usize, dh: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(t * dh);
    for i in 0..t {
        out.extend_from_slice(&x[i * e + h * dh..i * e + (h + 1) * dh]);
    }
    out
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for s in row.iter_mut() {
        *s = (*s - m).exp();
        z += *s;
    }
    for s in row.iter_mut() {
        *s /= z;
    }
}

pub(super) fn backward_linear<S: Scalar>(
    sink: &mut Sink<'_, S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[S],
) {
    let ws = sink.val(w).shape();
    let (fout, fin) = (ws[0], ws[1]);
    let xv = sink.val(x).data();
    let wv = sink.val(w).data();
    if let Some(dx) = sink.slot(x) {
        for (gr, dxr) in g.chunks_exact(fout).zip(dx.chunks_exact_mut(fin)) {
            for (o, go) in gr.iter().enumerate() {
                if *go != S::zero() {
                    axpy(*go, &wv[o * fin..(o + 1) * fin], dxr);
                }
            }
        }
    }
    if let Some(dw) = sink.slot(w) {
        for (gr, xr) in g.chunks_exact(fout).zip(xv.chunks_exact(fin)) {
            for (o, go) in gr.iter().enumerate() {
                if *go != S::zero() {
                    axpy(*go, xr, &mut dw[o * fin..(o + 1) * fin]);
                }
            }
        }
    }
    if let Some(b) = b {
        if let Some(db) = sink.slot(b) {
            for gr in g.chunks_exact(fout) {
                for (d, s) in db.iter_mut().zip(gr) {
                    *d += *s;
                }
            }
        }
    }
}

pub(super) fn backward_attention<S: Scalar>(
    sink: &mut Sink<'_, S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[S],
    g: &[S],
) {
    let (t, e) = (sink.val(q).shape()[0], sink.val(q).shape()[1]);
    let dh = e / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut dq = vec![S::zero(); t * e];
    let mut dk = vec![S::zero(); t * e];
    let mut dv = vec![S::zero(); t * e];
    let mut ds = vec![S::zero(); t * t];
    for h in 0..heads {
        let qh = split_head(sink.val(q).data(), t, e, h, dh);
        let kh = split_head(sink.val(k).data(), t, e, h, dh);
        let vh = split_head(sink.val(v).data(), t, e, h, dh);
        let go = split_head(g, t, e, h, dh);
        let p = &probs[h * t * t..(h + 1) * t * t];
        let mut dqh = vec![S::zero(); t * dh];
        let mut dkh = vec![S::zero(); t * dh];
        let mut dvh = vec![S::zero(); t * dh];
        for i in 0..t {
            let gi = &go[i * dh..(i + 1) * dh];
            let pi = &p[i * t..(i + 1) * t];
            let dsi = &mut ds[i * t..(i + 1) * t];
            for j in 0..t {
                dsi[j] = dot(gi, &vh[j * dh..(j + 1) * dh]);
                axpy(pi[j], gi, &mut dvh[j * dh..(j + 1) * dh]);
            }
            let centre: S = pi.iter().zip(dsi.iter()).map(|(a, b)| *a * *b).sum();
            for j in 0..t {
                dsi[j] = pi[j] * (dsi[j] - centre) * scale;
            }
            for j in 0..t {
                axpy(dsi[j], &kh[j * dh..(j + 1) * dh], &mut dqh[i * dh..(i + 1) * dh]);
                axpy(dsi[j], &qh[i * dh..(i + 1) * dh], &mut dkh[j * dh..(j + 1) * dh]);
            }
        }
        for i in 0..t {
            let cols = i * e + h * dh..i * e + (h + 1) * dh;
            dq[cols.clone()].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
            dk[cols.clone()].copy_from_slice(&dkh[i * dh..(i + 1) * dh]);
            dv[cols].copy_from_slice(&dvh[i * dh..(i + 1) * dh]);
        }
    }
    sink.accumulate(q, &dq);
    sink.accumulate(k, &dk);
    sink.accumulate(v, &dv);
}
