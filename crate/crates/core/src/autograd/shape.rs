use super::{Graph, Op, Sink, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose2d(x), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::dim(
                    "trailing axes",
                    format!("cannot concatenate {s:?} with [_, {tail:?}]"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Selects leading-axis slices by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::dim("gather", "cannot index a scalar"));
        }
        let (n, len) = (t.rows(), t.row_len());
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            if i >= n {
                return Err(Error::Bounds(format!("row {i} of {n}")));
            }
            data.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Contiguous leading-axis range `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Elementwise maximum over one axis. Ties resolve to the lowest index.
    pub fn max_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("axis", format!("axis {axis} out of range for {s:?}")));
        }
        let n = s[axis];
        if n == 0 {
            return Err(Error::EmptyInput("pooling over an empty axis".into()));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xv[o * n * inner + i];
                let mut arg = 0;
                for j in 1..n {
                    let v = xv[(o * n + j) * inner + i];
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = arg as u32;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPoolAxis { x, outer, n, inner, argmax }, rg))
    }
}

pub(super) fn backward_transpose2d<S: Scalar>(sink: &mut Sink<'_, S>, x: Var, g: &[S]) {
    let s = sink.val(x).shape();
    let (r, c) = (s[0], s[1]);
    if let Some(d) = sink.slot(x) {
        for i in 0..r {
            for j in 0..c {
                d[i * c + j] += g[j * r + i];
            }
        }
    }
}

pub(super) fn backward_concat<S: Scalar>(sink: &mut Sink<'_, S>, parts: &[Var], g: &[S]) {
    let mut off = 0;
    for p in parts {
        let n = sink.val(*p).numel();
        sink.accumulate(*p, &g[off..off + n]);
        off += n;
    }
}

pub(super) fn backward_gather_rows<S: Scalar>(sink: &mut Sink<'_, S>, x: Var, idx: &[usize], g: &[S]) {
    let len = sink.val(x).row_len();
    if let Some(d) = sink.slot(x) {
        for (k, &i) in idx.iter().enumerate() {
            for (dst, src) in d[i * len..(i + 1) * len].iter_mut().zip(&g[k * len..(k + 1) * len]) {
                *dst += *src;
            }
        }
    }
}

pub(super) fn backward_max_pool<S: Scalar>(
    sink: &mut Sink<'_, S>,
    x: Var,
    outer: usize,
    n: usize,
    inner: usize,
    argmax: &[u32],
    g: &[S],
) {
    if let Some(d) = sink.slot(x) {
        for o in 0..outer {
            for i in 0..inner {
                let j = argmax[o * inner + i] as usize;
                d[(o * n + j) * inner + i] += g[o * inner + i];
            }
        }
    }
}
