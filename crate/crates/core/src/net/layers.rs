//! Forward and backward kernels on `[channel][z][y][x]` volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3d,
    MaxPool,
    TransposeConv3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::None => {}
        }
    }

    /// Turns `grad` w.r.t. the activated output into grad w.r.t. its input.
    pub fn backward(self, out: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => grad.iter_mut().zip(out).for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.iter_mut().zip(out).for_each(|(g, &y)| *g *= 1.0 - y * y),
            Activation::None => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, kernel: usize, padding: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv3d,
            kernel,
            stride: 1,
            padding,
            in_channels: cin,
            out_channels: cout,
            activation,
        }
    }

    pub fn max_pool(channels: usize, size: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            kernel: size,
            stride: size,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
            activation: Activation::None,
        }
    }

    pub fn transpose_conv(cin: usize, cout: usize, kernel: usize, stride: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::TransposeConv3d,
            kernel,
            stride,
            padding: 0,
            in_channels: cin,
            out_channels: cout,
            activation,
        }
    }

    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool => 0,
            _ => self.in_channels * self.out_channels * self.kernel.pow(3),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool => 0,
            _ => self.out_channels,
        }
    }

    /// Standard size arithmetic for one axis.
    pub fn output_extent(&self, n: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let bad = || Error::Shape {
            expected: format!("extent compatible with {:?} k={k} s={s} p={p}", self.kind),
            got: n.to_string(),
        };
        if k == 0 || s == 0 || n == 0 {
            return Err(bad());
        }
        match self.kind {
            LayerKind::Conv3d | LayerKind::MaxPool => {
                if self.kind == LayerKind::MaxPool && p >= k {
                    return Err(bad());
                }
                let span = n + 2 * p;
                if span < k {
                    return Err(bad());
                }
                Ok((span - k) / s + 1)
            }
            LayerKind::TransposeConv3d => {
                let full = (n - 1) * s + k;
                if full <= 2 * p {
                    return Err(bad());
                }
                Ok(full - 2 * p)
            }
        }
    }

    pub fn output_dims(&self, d: Dims) -> Result<Dims> {
        Ok([self.output_extent(d[0])?, self.output_extent(d[1])?, self.output_extent(d[2])?])
    }
}

fn vol(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Output positions `o` in `0..out` for which `o*s + t - p` lands inside `0..n`.
fn valid_range(out: usize, n: usize, s: usize, t: usize, p: usize) -> (usize, usize) {
    // smallest o with o*s + t >= p
    let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
    // largest o with o*s + t - p <= n - 1
    let top = n + p - 1;
    if t > top {
        return (0, 0);
    }
    let hi = ((top - t) / s + 1).min(out);
    (lo.min(hi), hi)
}

/// Stride-1 convolutions run over a zero-padded copy of the input in which
/// every kernel tap is a constant offset, so each tap is one long axpy.
struct Padded {
    px: usize,
    py: usize,
    plane: usize,
    /// Length of the output run in padded coordinates.
    run: usize,
}

impl Padded {
    fn new(d: Dims, od: Dims, p: usize) -> Self {
        let (px, py) = (d[0] + 2 * p, d[1] + 2 * p);
        let plane = px * py * (d[2] + 2 * p);
        let run = ((od[2] - 1) * py + (od[1] - 1)) * px + od[0];
        Self { px, py, plane, run }
    }

    fn offset(&self, kz: usize, ky: usize, kx: usize) -> usize {
        (kz * self.py + ky) * self.px + kx
    }

    fn pad(&self, src: &[f64], d: Dims, p: usize, channels: usize) -> Vec<f64> {
        let n = d[0] * d[1] * d[2];
        let mut out = vec![0.0; channels * self.plane];
        for c in 0..channels {
            for z in 0..d[2] {
                for y in 0..d[1] {
                    let s = c * n + (z * d[1] + y) * d[0];
                    let t = c * self.plane + self.offset(z + p, y + p, p);
                    out[t..t + d[0]].copy_from_slice(&src[s..s + d[0]]);
                }
            }
        }
        out
    }

    /// Position of output voxel `(x, y, z)` inside the run.
    fn run_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.py + y) * self.px + x
    }
}

/// `out[o][q] += Σ_i Σ_t w[o][i][t] · src[i][q + offs[t]]` for `q < len`.
///
/// Four output channels by eight positions stay in registers across all
/// inputs and taps.
#[allow(clippy::too_many_arguments)]
fn stencil(
    out: &mut [f64],
    ostride: usize,
    nout: usize,
    len: usize,
    src: &[f64],
    sstride: usize,
    nin: usize,
    w: &[f64],
    offs: &[usize],
) {
    const C: usize = 4;
    const L: usize = 8;
    let taps = offs.len();
    let mut ob = 0;
    while ob < nout {
        let cb = C.min(nout - ob);
        let mut q0 = 0;
        while q0 < len {
            let lanes = L.min(len - q0);
            if cb == C && lanes == L {
                let mut acc = [[0.0f64; L]; C];
                for (c, a) in acc.iter_mut().enumerate() {
                    a.copy_from_slice(&out[(ob + c) * ostride + q0..][..L]);
                }
                for i in 0..nin {
                    let xs = &src[i * sstride + q0..];
                    for (t, &off) in offs.iter().enumerate() {
                        let x: &[f64; L] = xs[off..off + L].try_into().unwrap();
                        for (c, a) in acc.iter_mut().enumerate() {
                            let wv = w[((ob + c) * nin + i) * taps + t];
                            for l in 0..L {
                                a[l] += wv * x[l];
                            }
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out[(ob + c) * ostride + q0..][..L].copy_from_slice(a);
                }
            } else {
                for c in 0..cb {
                    for l in 0..lanes {
                        let q = q0 + l;
                        let mut a = out[(ob + c) * ostride + q];
                        for i in 0..nin {
                            for (t, &off) in offs.iter().enumerate() {
                                a += w[((ob + c) * nin + i) * taps + t] * src[i * sstride + q + off];
                            }
                        }
                        out[(ob + c) * ostride + q] = a;
                    }
                }
            }
            q0 += lanes;
        }
        ob += cb;
    }
}

/// `out[t] += Σ_q g[q] · x[q + offs[t]]`, eight taps per pass over `g`.
fn shifted_dots(g: &[f64], x: &[f64], offs: &[usize], out: &mut [f64]) {
    let mut blocks = offs.chunks_exact(8);
    let mut t = 0;
    for b in &mut blocks {
        dots_block::<8>(g, x, b.try_into().unwrap(), &mut out[t..t + 8]);
        t += 8;
    }
    for &off in blocks.remainder() {
        dots_block::<1>(g, x, [off], &mut out[t..t + 1]);
        t += 1;
    }
}

fn dots_block<const T: usize>(g: &[f64], x: &[f64], offs: [usize; T], out: &mut [f64]) {
    const L: usize = 4;
    let n = g.len();
    let xs: [&[f64]; T] = offs.map(|o| &x[o..o + n]);
    let mut acc = [[0.0f64; L]; T];
    let chunks = n / L;
    for c in 0..chunks {
        let q = c * L;
        let gv: [f64; L] = g[q..q + L].try_into().unwrap();
        for j in 0..T {
            let xv: [f64; L] = xs[j][q..q + L].try_into().unwrap();
            for l in 0..L {
                acc[j][l] += gv[l] * xv[l];
            }
        }
    }
    for j in 0..T {
        let a = acc[j];
        let mut s = (a[0] + a[1]) + (a[2] + a[3]);
        for q in chunks * L..n {
            s += g[q] * xs[j][q];
        }
        out[j] += s;
    }
}

fn tap_offsets(g: &Padded, k: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(k * k * k);
    for kz in 0..k {
        for ky in 0..k {
            for kx in 0..k {
                offs.push(g.offset(kz, ky, kx));
            }
        }
    }
    offs
}

fn conv_forward_dense(spec: &LayerSpec, input: &[f64], d: Dims, od: Dims, w: &[f64], b: &[f64]) -> Vec<f64> {
    let p = spec.padding;
    let g = Padded::new(d, od, p);
    let xp = g.pad(input, d, p, spec.in_channels);
    let offs = tap_offsets(&g, spec.kernel);
    let mut acc = vec![0.0; spec.out_channels * g.run];
    stencil(&mut acc, g.run, spec.out_channels, g.run, &xp, g.plane, spec.in_channels, w, &offs);
    let nout = vol(od);
    let mut out = vec![0.0; spec.out_channels * nout];
    for co in 0..spec.out_channels {
        for z in 0..od[2] {
            for y in 0..od[1] {
                let r = co * g.run + g.run_index(0, y, z);
                let o = co * nout + (z * od[1] + y) * od[0];
                for x in 0..od[0] {
                    out[o + x] = acc[r + x] + b[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_dense(
    spec: &LayerSpec,
    input: &[f64],
    d: Dims,
    od: Dims,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let (k, p) = (spec.kernel, spec.padding);
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let g = Padded::new(d, od, p);
    let xp = g.pad(input, d, p, cin);
    let offs = tap_offsets(&g, k);
    let taps = offs.len();
    let reach = *offs.last().unwrap();
    let nout = vol(od);
    // Output gradients along the run, zero at wrap-around slots, with `reach`
    // leading zeros so the input gradient is a correlation with reversed taps.
    let gstride = reach + g.plane;
    let mut gq = vec![0.0; cout * gstride];
    for co in 0..cout {
        for z in 0..od[2] {
            for y in 0..od[1] {
                let r = co * gstride + reach + g.run_index(0, y, z);
                let o = co * nout + (z * od[1] + y) * od[0];
                gq[r..r + od[0]].copy_from_slice(&dout[o..o + od[0]]);
            }
        }
    }
    for co in 0..cout {
        let gc = &gq[co * gstride + reach..co * gstride + reach + g.run];
        for ci in 0..cin {
            let xc = &xp[ci * g.plane..(ci + 1) * g.plane];
            shifted_dots(gc, xc, &offs, &mut dw[(co * cin + ci) * taps..(co * cin + ci + 1) * taps]);
        }
    }
    if let Some(di) = din {
        let rev: Vec<usize> = offs.iter().map(|&o| reach - o).collect();
        let mut wt = vec![0.0; w.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..taps {
                    wt[(ci * cout + co) * taps + t] = w[(co * cin + ci) * taps + t];
                }
            }
        }
        let mut dxp = vec![0.0; cin * g.plane];
        stencil(&mut dxp, g.plane, cin, g.plane, &gq, gstride, cout, &wt, &rev);
        let nin = vol(d);
        for ci in 0..cin {
            for z in 0..d[2] {
                for y in 0..d[1] {
                    let s = ci * g.plane + g.offset(z + p, y + p, p);
                    let t = ci * nin + (z * d[1] + y) * d[0];
                    di[t..t + d[0]].copy_from_slice(&dxp[s..s + d[0]]);
                }
            }
        }
    }
}

pub fn conv_forward(spec: &LayerSpec, input: &[f64], d: Dims, w: &[f64], b: &[f64]) -> (Vec<f64>, Dims) {
    let od = spec.output_dims(d).expect("validated shape");
    if spec.stride == 1 {
        return (conv_forward_dense(spec, input, d, od, w, b), od);
    }
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (nin, nout) = (vol(d), vol(od));
    let mut out = vec![0.0; spec.out_channels * nout];
    for co in 0..spec.out_channels {
        let oc = &mut out[co * nout..(co + 1) * nout];
        oc.fill(b[co]);
        for ci in 0..spec.in_channels {
            let ic = &input[ci * nin..(ci + 1) * nin];
            let wbase = (co * spec.in_channels + ci) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = valid_range(od[2], d[2], s, kz, p);
                for ky in 0..k {
                    let (y0, y1) = valid_range(od[1], d[1], s, ky, p);
                    for kx in 0..k {
                        let (x0, x1) = valid_range(od[0], d[0], s, kx, p);
                        let wv = w[wbase + (kz * k + ky) * k + kx];
                        if x0 >= x1 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let orow = (oz * od[1] + oy) * od[0];
                                let irow = (iz * d[1] + iy) * d[0];
                                for ox in x0..x1 {
                                    oc[orow + ox] += wv * ic[irow + ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, od)
}

/// Accumulates weight and bias gradients; fills `din` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    spec: &LayerSpec,
    input: &[f64],
    d: Dims,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let od = spec.output_dims(d).expect("validated shape");
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (nin, nout) = (vol(d), vol(od));
    for co in 0..spec.out_channels {
        db[co] += dout[co * nout..(co + 1) * nout].iter().sum::<f64>();
    }
    if s == 1 {
        conv_backward_dense(spec, input, d, od, w, dout, dw, din);
        return;
    }
    if let Some(g) = din.as_deref_mut() {
        g.fill(0.0);
    }
    for co in 0..spec.out_channels {
        let gc = &dout[co * nout..(co + 1) * nout];
        for ci in 0..spec.in_channels {
            let ic = &input[ci * nin..(ci + 1) * nin];
            let wbase = (co * spec.in_channels + ci) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = valid_range(od[2], d[2], s, kz, p);
                for ky in 0..k {
                    let (y0, y1) = valid_range(od[1], d[1], s, ky, p);
                    for kx in 0..k {
                        let (x0, x1) = valid_range(od[0], d[0], s, kx, p);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = wbase + (kz * k + ky) * k + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oz in z0..z1 {
                            let iz = oz * s + kz - p;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let orow = (oz * od[1] + oy) * od[0];
                                let irow = (iz * d[1] + iy) * d[0];
                                for ox in x0..x1 {
                                    let ii = irow + ox * s + kx - p;
                                    acc += gc[orow + ox] * ic[ii];
                                    if let Some(di) = din.as_deref_mut() {
                                        di[ci * nin + ii] += wv * gc[orow + ox];
                                    }
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}


/// Max pooling; also returns the flat input index chosen for every output.
pub fn pool_forward(spec: &LayerSpec, input: &[f64], d: Dims) -> (Vec<f64>, Vec<usize>, Dims) {
    let od = spec.output_dims(d).expect("validated shape");
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let (nin, nout) = (vol(d), vol(od));
    let mut out = vec![f64::NEG_INFINITY; spec.in_channels * nout];
    let mut arg = vec![0usize; out.len()];
    for c in 0..spec.in_channels {
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let o = c * nout + (oz * od[1] + oy) * od[0] + ox;
                    for kz in 0..k {
                        let Some(iz) = (oz * s + kz).checked_sub(p).filter(|&v| v < d[2]) else { continue };
                        for ky in 0..k {
                            let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&v| v < d[1]) else { continue };
                            for kx in 0..k {
                                let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&v| v < d[0]) else { continue };
                                let i = c * nin + (iz * d[1] + iy) * d[0] + ix;
                                if input[i] > out[o] {
                                    out[o] = input[i];
                                    arg[o] = i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg, od)
}

pub fn pool_backward(arg: &[usize], dout: &[f64], din: &mut [f64]) {
    din.fill(0.0);
    for (&i, &g) in arg.iter().zip(dout) {
        din[i] += g;
    }
}

/// Output voxel reached from input `i` along one axis by tap `t`.
fn tconv_target(i: usize, s: usize, t: usize, p: usize, out: usize) -> Option<usize> {
    (i * s + t).checked_sub(p).filter(|&o| o < out)
}

/// Input/output index pairs linked by one tap.
fn tconv_pairs(spec: &LayerSpec, d: Dims, od: Dims, tap: [usize; 3]) -> Vec<(usize, usize)> {
    let (s, p) = (spec.stride, spec.padding);
    let mut pairs = Vec::new();
    for iz in 0..d[2] {
        let Some(oz) = tconv_target(iz, s, tap[2], p, od[2]) else { continue };
        for iy in 0..d[1] {
            let Some(oy) = tconv_target(iy, s, tap[1], p, od[1]) else { continue };
            for ix in 0..d[0] {
                let Some(ox) = tconv_target(ix, s, tap[0], p, od[0]) else { continue };
                pairs.push(((iz * d[1] + iy) * d[0] + ix, (oz * od[1] + oy) * od[0] + ox));
            }
        }
    }
    pairs
}

fn taps3(k: usize) -> impl Iterator<Item = (usize, [usize; 3])> {
    (0..k * k * k).map(move |t| (t, [t % k, (t / k) % k, t / (k * k)]))
}

/// Weights are laid out `[cin][cout][k^3]`. Each tap is a 1x1 channel mix of
/// the whole input scattered onto a strided sub-lattice of the output.
pub fn tconv_forward(spec: &LayerSpec, input: &[f64], d: Dims, w: &[f64], b: &[f64]) -> (Vec<f64>, Dims) {
    let od = spec.output_dims(d).expect("validated shape");
    let (cin, cout, k3) = (spec.in_channels, spec.out_channels, spec.kernel.pow(3));
    let (nin, nout) = (vol(d), vol(od));
    let mut out = vec![0.0; cout * nout];
    for co in 0..cout {
        out[co * nout..(co + 1) * nout].fill(b[co]);
    }
    let mut wt = vec![0.0; cout * cin];
    let mut mixed = vec![0.0; cout * nin];
    for (t, tap) in taps3(spec.kernel) {
        for ci in 0..cin {
            for co in 0..cout {
                wt[co * cin + ci] = w[(ci * cout + co) * k3 + t];
            }
        }
        mixed.fill(0.0);
        stencil(&mut mixed, nin, cout, nin, input, nin, cin, &wt, &[0]);
        for (ii, oi) in tconv_pairs(spec, d, od, tap) {
            for co in 0..cout {
                out[co * nout + oi] += mixed[co * nin + ii];
            }
        }
    }
    (out, od)
}

#[allow(clippy::too_many_arguments)]
pub fn tconv_backward(
    spec: &LayerSpec,
    input: &[f64],
    d: Dims,
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut [f64]>,
) {
    let od = spec.output_dims(d).expect("validated shape");
    let (cin, cout, k3) = (spec.in_channels, spec.out_channels, spec.kernel.pow(3));
    let (nin, nout) = (vol(d), vol(od));
    for co in 0..cout {
        db[co] += dout[co * nout..(co + 1) * nout].iter().sum::<f64>();
    }
    if let Some(g) = din.as_deref_mut() {
        g.fill(0.0);
    }
    let mut gt = vec![0.0; cout * nin];
    let mut wt = vec![0.0; cin * cout];
    let mut part = [0.0];
    for (t, tap) in taps3(spec.kernel) {
        gt.fill(0.0);
        for (ii, oi) in tconv_pairs(spec, d, od, tap) {
            for co in 0..cout {
                gt[co * nin + ii] = dout[co * nout + oi];
            }
        }
        for ci in 0..cin {
            let x = &input[ci * nin..(ci + 1) * nin];
            for co in 0..cout {
                part[0] = 0.0;
                dots_block::<1>(&gt[co * nin..(co + 1) * nin], x, [0], &mut part);
                dw[(ci * cout + co) * k3 + t] += part[0];
            }
        }
        if let Some(di) = din.as_deref_mut() {
            for ci in 0..cin {
                for co in 0..cout {
                    wt[ci * cout + co] = w[(ci * cout + co) * k3 + t];
                }
            }
            stencil(di, nin, cin, nin, &gt, nin, cout, &wt, &[0]);
        }
    }
}
