use super::{Graph, Op, Sink, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Graph<S> {
    /// Layer normalisation over the last axis with learnable affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let f = match self.shape(x).last() {
            Some(&f) if f >= 1 => f,
            _ => return Err(Error::dim("last axis", "layer norm needs at least one feature")),
        };
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).numel() != f {
                return Err(Error::dim(
                    name,
                    format!("{} entries for {f} features", self.value(p).numel()),
                ));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / f;
        let nf = S::lit(f as f64);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let xr = &xv[r * f..(r + 1) * f];
            let mean = xr.iter().copied().sum::<S>() / nf;
            let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / nf;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..f {
                let h = (xr[i] - mean) * rs;
                xhat[r * f + i] = h;
                out[r * f + i] = gv[i] * h + bv[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }
}

pub(super) fn backward_layer_norm<S: Scalar>(
    sink: &mut Sink<'_, S>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[S],
    rstd: &[S],
    g: &[S],
) {
    let gv = sink.val(gamma).data();
    let f = gv.len();
    let nf = S::lit(f as f64);
    if let Some(dx) = sink.slot(x) {
        for (r, rs) in rstd.iter().enumerate() {
            let gr = &g[r * f..(r + 1) * f];
            let hr = &xhat[r * f..(r + 1) * f];
            let mut mean_d = S::zero();
            let mut mean_dh = S::zero();
            for i in 0..f {
                let d = gr[i] * gv[i];
                mean_d += d;
                mean_dh += d * hr[i];
            }
            mean_d /= nf;
            mean_dh /= nf;
            for i in 0..f {
                let d = gr[i] * gv[i];
                dx[r * f + i] += *rs * (d - mean_d - hr[i] * mean_dh);
            }
        }
    }
    if let Some(dg) = sink.slot(gamma) {
        for (gr, hr) in g.chunks_exact(f).zip(xhat.chunks_exact(f)) {
            for i in 0..f {
                dg[i] += gr[i] * hr[i];
            }
        }
    }
    if let Some(db) = sink.slot(beta) {
        for gr in g.chunks_exact(f) {
            for i in 0..f {
                db[i] += gr[i];
            }
        }
    }
}
