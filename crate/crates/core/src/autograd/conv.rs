use super::{Graph, Op, Sink, Var};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Tensor;

const AXES: [&str; 3] = ["H", "W", "D"];

/// Output indices `o` in `0..n_out` with `o * stride + offset` inside `0..n_in`.
fn valid(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let lo = lo.div_ceil(stride);
    let last = n_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn off(&self, kk: usize) -> isize {
        kk as isize - self.pad as isize
    }
}

impl<S: Scalar> Graph<S> {
    /// 3D convolution of a `[C_in, H, W, D]` volume with `[C_out, C_in, k, k, k]` weights.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geo = conv_geometry(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).numel() != geo.cout {
                return Err(Error::dim(
                    "bias",
                    format!("{} entries for C_out = {}", self.value(b).numel(), geo.cout),
                ));
            }
        }
        let plane: usize = geo.out.iter().product();
        let taps = geo.cin * geo.k.pow(3);
        let col = im2col(&geo, self.value(x).data());
        let wv = self.value(w).data();
        let mut out = vec![S::zero(); geo.cout * plane];
        for (co, oc) in out.chunks_exact_mut(plane).enumerate() {
            if let Some(b) = b {
                oc.fill(self.value(b).data()[co]);
            }
            for (r, wt) in wv[co * taps..(co + 1) * taps].iter().enumerate() {
                if *wt != S::zero() {
                    axpy(*wt, &col[r * plane..(r + 1) * plane], oc);
                }
            }
        }
        let [oh_n, ow_n, od_n] = geo.out;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let shape = vec![geo.cout, oh_n, ow_n, od_n];
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv3d { x, w, b, stride, pad }, rg))
    }

    /// Transposed 3D convolution whose kernel equals its stride (non-overlapping
    /// upsampling). Weights are `[C_in, C_out, s, s, s]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("input", format!("expected [C, H, W, D], got {xs:?}")));
        }
        if ws.len() != 5 || ws[2..].iter().any(|&e| e != stride) {
            return Err(Error::dim(
                "kernel",
                format!("expected [C_in, C_out, {stride}, {stride}, {stride}], got {ws:?}"),
            ));
        }
        if ws[0] != xs[0] {
            return Err(Error::dim("C_in", format!("weights expect {} channels, input has {}", ws[0], xs[0])));
        }
        let (cin, cout, s) = (ws[0], ws[1], stride);
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::dim("bias", format!("{} entries for C_out = {cout}", self.value(b).numel())));
            }
        }
        let [h, wd, d] = [xs[1], xs[2], xs[3]];
        let [oh, ow, od] = [h * s, wd * s, d * s];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![S::zero(); cout * oh * ow * od];
        if let Some(b) = b {
            for (co, bias) in self.value(b).data().iter().enumerate() {
                out[co * oh * ow * od..(co + 1) * oh * ow * od].fill(*bias);
            }
        }
        for ci in 0..cin {
            for co in 0..cout {
                for a in 0..s {
                    for bb in 0..s {
                        for c in 0..s {
                            let wt = wv[(((ci * cout + co) * s + a) * s + bb) * s + c];
                            for ih in 0..h {
                                for iw in 0..wd {
                                    let ib = ((ci * h + ih) * wd + iw) * d;
                                    let ob = ((co * oh + ih * s + a) * ow + iw * s + bb) * od + c;
                                    for id in 0..d {
                                        out[ob + id * s] += wt * xv[ib + id];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow, od], out)?,
            Op::ConvTranspose3d { x, w, b, stride },
            rg,
        ))
    }
}

fn conv_geometry(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    if xs.len() != 4 {
        return Err(Error::dim("input", format!("expected [C, H, W, D], got {xs:?}")));
    }
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::dim("kernel", format!("expected [C_out, C_in, k, k, k], got {ws:?}")));
    }
    if ws[1] != xs[0] {
        return Err(Error::dim("C_in", format!("weights expect {} channels, input has {}", ws[1], xs[0])));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let k = ws[2];
    let mut out = [0; 3];
    for ax in 0..3 {
        let n = xs[ax + 1] + 2 * pad;
        if k > n {
            return Err(Error::dim(AXES[ax], format!("kernel {k} exceeds padded extent {n}")));
        }
        if k == stride && pad == 0 && !xs[ax + 1].is_multiple_of(stride) {
            return Err(Error::dim(
                AXES[ax],
                format!("extent {} not divisible by patch size {stride}", xs[ax + 1]),
            ));
        }
        out[ax] = (n - k) / stride + 1;
    }
    Ok(Geometry {
        cin: xs[0],
        cout: ws[0],
        k,
        stride,
        pad,
        inp: [xs[1], xs[2], xs[3]],
        out,
    })
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_conv3d<S: Scalar>(
    sink: &mut Sink<'_, S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    _out_shape: &[usize],
    g: &[S],
) {
    let geo = conv_geometry(sink.val(x).shape(), sink.val(w).shape(), stride, pad)
        .expect("validated in forward");
    let plane = geo.out.iter().product::<usize>();
    let xv = sink.val(x).data();
    let wv = sink.val(w).data();

    if let Some(b) = b {
        if let Some(db) = sink.slot(b) {
            for (co, d) in db.iter_mut().enumerate() {
                *d += g[co * plane..(co + 1) * plane].iter().copied().sum::<S>();
            }
        }
    }

    let taps = geo.cin * geo.k.pow(3);
    if sink.slot(w).is_some() {
        let col = im2col(&geo, xv);
        let dw = sink.slot(w).expect("checked");
        for (co, gc) in g.chunks_exact(plane).enumerate() {
            for r in 0..taps {
                dw[co * taps + r] += dot(gc, &col[r * plane..(r + 1) * plane]);
            }
        }
    }
    if let Some(dx) = sink.slot(x) {
        let mut dcol = vec![S::zero(); taps * plane];
        for (co, gc) in g.chunks_exact(plane).enumerate() {
            for (r, dc) in dcol.chunks_exact_mut(plane).enumerate() {
                let wt = wv[co * taps + r];
                if wt != S::zero() {
                    axpy(wt, gc, dc);
                }
            }
        }
        let stride = geo.stride;
        visit_rows(&geo, &mut |r, o0, i0, len| {
            let src = &dcol[r * plane + o0..r * plane + o0 + len];
            if stride == 1 {
                for (d, s) in dx[i0..i0 + len].iter_mut().zip(src) {
                    *d += *s;
                }
            } else {
                for (j, s) in src.iter().enumerate() {
                    dx[i0 + j * stride] += *s;
                }
            }
        });
    }
}

/// Unfolds the input into a `[C_in * k^3, plane]` matrix, one row per kernel
/// tap, zero where the tap falls in the padding.
fn im2col<S: Scalar>(geo: &Geometry, xv: &[S]) -> Vec<S> {
    let plane: usize = geo.out.iter().product();
    let mut col = vec![S::zero(); geo.cin * geo.k.pow(3) * plane];
    let stride = geo.stride;
    visit_rows(geo, &mut |r, o0, i0, len| {
        let dst = &mut col[r * plane + o0..r * plane + o0 + len];
        if stride == 1 {
            dst.copy_from_slice(&xv[i0..i0 + len]);
        } else {
            for (j, v) in dst.iter_mut().enumerate() {
                *v = xv[i0 + j * stride];
            }
        }
    });
    col
}

/// Calls `f(tap row, output offset within the plane, input offset, run length)`
/// for every contiguous run of output positions touched by one kernel tap.
fn visit_rows(geo: &Geometry, f: &mut dyn FnMut(usize, usize, usize, usize)) {
    let [h, wd, d] = geo.inp;
    let [oh_n, ow_n, od_n] = geo.out;
    let (k, stride) = (geo.k, geo.stride);
    for ci in 0..geo.cin {
        for a in 0..k {
            let (h0, h1) = valid(oh_n, h, stride, geo.off(a));
            for bb in 0..k {
                let (w0, w1) = valid(ow_n, wd, stride, geo.off(bb));
                for c in 0..k {
                    let (d0, d1) = valid(od_n, d, stride, geo.off(c));
                    if d0 >= d1 {
                        continue;
                    }
                    let r = ((ci * k + a) * k + bb) * k + c;
                    for oh in h0..h1 {
                        let ih = ((oh * stride) as isize + geo.off(a)) as usize;
                        for ow in w0..w1 {
                            let iw = ((ow * stride) as isize + geo.off(bb)) as usize;
                            let ob = (oh * ow_n + ow) * od_n;
                            let ib = ((ci * h + ih) * wd + iw) * d;
                            let id0 = ((d0 * stride) as isize + geo.off(c)) as usize;
                            f(r, ob + d0, ib + id0, d1 - d0);
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn backward_conv_transpose3d<S: Scalar>(
    sink: &mut Sink<'_, S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    out_shape: &[usize],
    g: &[S],
) {
    let xs = sink.val(x).shape();
    let ws = sink.val(w).shape();
    let (cin, cout, s) = (ws[0], ws[1], stride);
    let [h, wd, d] = [xs[1], xs[2], xs[3]];
    let [oh, ow, od] = [out_shape[1], out_shape[2], out_shape[3]];
    let xv = sink.val(x).data();
    let wv = sink.val(w).data();
    if let Some(b) = b {
        if let Some(db) = sink.slot(b) {
            let plane = oh * ow * od;
            for (co, d) in db.iter_mut().enumerate() {
                *d += g[co * plane..(co + 1) * plane].iter().copied().sum::<S>();
            }
        }
    }
    let need_x = sink.slot(x).is_some();
    let need_w = sink.slot(w).is_some();
    let mut dx = vec![S::zero(); if need_x { xv.len() } else { 0 }];
    let mut dw = vec![S::zero(); if need_w { wv.len() } else { 0 }];
    for ci in 0..cin {
        for co in 0..cout {
            for a in 0..s {
                for bb in 0..s {
                    for c in 0..s {
                        let widx = (((ci * cout + co) * s + a) * s + bb) * s + c;
                        let wt = wv[widx];
                        let mut acc = S::zero();
                        for ih in 0..h {
                            for iw in 0..wd {
                                let ib = ((ci * h + ih) * wd + iw) * d;
                                let ob = ((co * oh + ih * s + a) * ow + iw * s + bb) * od + c;
                                for id in 0..d {
                                    let go = g[ob + id * s];
                                    if need_x {
                                        dx[ib + id] += wt * go;
                                    }
                                    acc += go * xv[ib + id];
                                }
                            }
                        }
                        if need_w {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    if need_x {
        sink.accumulate(x, &dx);
    }
    if need_w {
        sink.accumulate(w, &dw);
    }
}
