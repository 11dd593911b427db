use super::{same_shape, Graph, Op, Sink, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect()).expect("same shape")
}

impl<S: Scalar> Graph<S> {
    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        same_shape(self, a, b, what)?;
        let out = zip_map(self.value(a), self.value(b), f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
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

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = map(self.value(a), |x| x * c);
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = map(self.value(a), |x| x + c);
        let rg = self.requires_grad(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Adds `row` (length F) to every row of `x` viewed as `[R x F]` along its last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let f = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).numel() != f {
            return Err(Error::dim(
                "last axis",
                format!("row of {} elements added to rows of {f}", self.value(row).numel()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(f) {
            for (o, v) in chunk.iter_mut().zip(&r) {
                *o += *v;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Scales every leading-axis slice `x[c, ...]` by `s[c]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(s).numel() != rows {
            return Err(Error::dim(
                "axis 0",
                format!("{} scales for {rows} leading slices", self.value(s).numel()),
            ));
        }
        let len = self.value(x).row_len();
        let sc = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, c) in out.data_mut().chunks_exact_mut(len).zip(&sc) {
            for o in chunk {
                *o *= *c;
            }
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::MulRows(x, s), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum::<S>() / S::lit(t.numel() as f64);
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| S::one() / (S::one() + (-x).exp()));
        let rg = self.requires_grad(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (S::lit(GELU_C), S::lit(GELU_A));
        let half = S::lit(0.5);
        let out = map(self.value(a), |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.requires_grad(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(
                "mse",
                format!("prediction {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        if target.numel() == 0 {
            return Err(Error::EmptyInput("mse over zero elements".into()));
        }
        let p = self.value(pred).data();
        let s: S = p.iter().zip(target.data()).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
        let loss = s / S::lit(target.numel() as f64);
        let rg = self.requires_grad(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.data().to_vec() }, rg))
    }
}

pub(super) fn backward_add<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, b: Var, g: &[S]) {
    sink.accumulate(a, g);
    sink.accumulate(b, g);
}

pub(super) fn backward_sub<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, b: Var, g: &[S]) {
    sink.accumulate(a, g);
    if let Some(d) = sink.slot(b) {
        for (d, s) in d.iter_mut().zip(g) {
            *d -= *s;
        }
    }
}

pub(super) fn backward_mul<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, b: Var, g: &[S]) {
    let bv = sink.val(b).data();
    if let Some(d) = sink.slot(a) {
        for ((d, s), y) in d.iter_mut().zip(g).zip(bv) {
            *d += *s * *y;
        }
    }
    let av = sink.val(a).data();
    if let Some(d) = sink.slot(b) {
        for ((d, s), x) in d.iter_mut().zip(g).zip(av) {
            *d += *s * *x;
        }
    }
}

pub(super) fn backward_div<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, b: Var, g: &[S]) {
    let av = sink.val(a).data();
    let bv = sink.val(b).data();
    if let Some(d) = sink.slot(a) {
        for ((d, s), y) in d.iter_mut().zip(g).zip(bv) {
            *d += *s / *y;
        }
    }
    if let Some(d) = sink.slot(b) {
        for (((d, s), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
            *d -= *s * *x / (*y * *y);
        }
    }
}

pub(super) fn backward_scale<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, c: S, g: &[S]) {
    if let Some(d) = sink.slot(a) {
        for (d, s) in d.iter_mut().zip(g) {
            *d += *s * c;
        }
    }
}

pub(super) fn backward_add_row<S: Scalar>(sink: &mut Sink<'_, S>, x: Var, row: Var, g: &[S]) {
    sink.accumulate(x, g);
    let f = sink.val(row).numel();
    if let Some(d) = sink.slot(row) {
        for chunk in g.chunks_exact(f) {
            for (d, s) in d.iter_mut().zip(chunk) {
                *d += *s;
            }
        }
    }
}

pub(super) fn backward_mul_rows<S: Scalar>(sink: &mut Sink<'_, S>, x: Var, s: Var, g: &[S]) {
    let len = sink.val(x).row_len();
    let sc = sink.val(s).data();
    if let Some(d) = sink.slot(x) {
        for ((dc, gc), c) in d.chunks_exact_mut(len).zip(g.chunks_exact(len)).zip(sc) {
            for (d, s) in dc.iter_mut().zip(gc) {
                *d += *s * *c;
            }
        }
    }
    let xv = sink.val(x).data();
    if let Some(d) = sink.slot(s) {
        for ((d, gc), xc) in d.iter_mut().zip(g.chunks_exact(len)).zip(xv.chunks_exact(len)) {
            *d += crate::scalar::dot(gc, xc);
        }
    }
}

pub(super) fn backward_sum<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, g: S) {
    if let Some(d) = sink.slot(a) {
        for d in d.iter_mut() {
            *d += g;
        }
    }
}

pub(super) fn backward_sigmoid<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, out: &[S], g: &[S]) {
    if let Some(d) = sink.slot(a) {
        for ((d, s), y) in d.iter_mut().zip(g).zip(out) {
            *d += *s * *y * (S::one() - *y);
        }
    }
}

pub(super) fn backward_gelu<S: Scalar>(sink: &mut Sink<'_, S>, a: Var, g: &[S]) {
    let (c, k) = (S::lit(GELU_C), S::lit(GELU_A));
    let half = S::lit(0.5);
    let three_k = S::lit(3.0 * GELU_A);
    let xv = sink.val(a).data();
    if let Some(d) = sink.slot(a) {
        for ((d, s), x) in d.iter_mut().zip(g).zip(xv) {
            let x = *x;
            let t = (c * (x + k * x * x * x)).tanh();
            let dt = (S::one() - t * t) * c * (S::one() + three_k * x * x);
            *d += *s * (half * (S::one() + t) + half * x * dt);
        }
    }
}

pub(super) fn backward_mse<S: Scalar>(sink: &mut Sink<'_, S>, pred: Var, target: &[S], g: S) {
    let pv = sink.val(pred).data();
    let c = g * S::lit(2.0) / S::lit(target.len() as f64);
    if let Some(d) = sink.slot(pred) {
        for ((d, p), t) in d.iter_mut().zip(pv).zip(target) {
            *d += c * (*p - *t);
        }
    }
}
