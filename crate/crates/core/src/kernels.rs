//! Forward and backward kernels on raw tensors.
//!
//! Every reduction runs in a fixed order so repeated runs are bit-identical.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        x: &[usize],
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let [n, c, h, w] = *x else {
            return Err(TensorError::Rank { op, expected: 4, shape: x.to_vec() });
        };
        if stride == 0 {
            return Err(TensorError::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge { op, kernel: kh.max(kw), padded: ph.min(pw) });
        }
        Ok(Self { n, c, h, w, kh, kw, stride, pad, oh: (ph - kh) / stride + 1, ow: (pw - kw) / stride + 1 })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `lo..hi` whose input coordinate for tap `k` lies
    /// inside `0..limit`.
    #[inline]
    fn valid(&self, k: usize, limit: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if limit + self.pad > k { ((limit - 1 + self.pad - k) / self.stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// `y += a·x`
#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

/// Four-lane dot product; lanes are combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds one sample `[c, h, w]` into `[c*kh*kw, oh*ow]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = g.valid(ki, g.h, g.oh);
            for kj in 0..g.kw {
                let (x0, x1) = g.valid(kj, g.w, g.ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                for oy in y0..y1 {
                    let iy = oy * g.stride + ki - g.pad;
                    let xr = &xc[iy * g.w..][..g.w];
                    let dr = &mut dst[oy * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let off = x0 + kj - g.pad;
                        dr[x0..x1].copy_from_slice(&xr[off..off + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dr[ox] = xr[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y0, y1) = g.valid(ki, g.h, g.oh);
            for kj in 0..g.kw {
                let (x0, x1) = g.valid(kj, g.w, g.ow);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ki - g.pad;
                    let dr = &mut dxc[iy * g.w..][..g.w];
                    let sr = &src[oy * g.ow..][..g.ow];
                    if g.stride == 1 {
                        let off = x0 + kj - g.pad;
                        axpy(T::one(), &sr[x0..x1], &mut dr[off..off + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kj - g.pad;
                            dr[ix] = dr[ix] + sr[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom), TensorError> {
    let (o, wc, kh, kw) = w.dims4()?;
    let g = ConvGeom::new("conv2d", x.shape(), kh, kw, stride, pad)?;
    if wc != g.c {
        return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
    }
    let (plane, ckk) = (g.oh * g.ow, g.c * kh * kw);
    let mut out = vec![T::zero(); g.n * o * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    let in_len = g.c * g.h * g.w;
    for s in 0..g.n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        let ys = &mut out[s * o * plane..(s + 1) * o * plane];
        T::gemm(o, ckk, plane, T::one(), w.data(), ckk, 1, b, plane, 1, T::zero(), ys, plane, 1);
    }
    Ok((Tensor::new(&[g.n, o, g.oh, g.ow], out)?, g))
}

/// Gradients of [`conv2d`]; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let o = w.shape()[0];
    let (plane, ckk) = (g.oh * g.ow, g.c * g.kh * g.kw);
    let in_len = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { ckk * plane }];
    let mut dcols = vec![T::zero(); if need_dx { ckk * plane } else { 0 }];
    for s in 0..g.n {
        let dys = &dy.data()[s * o * plane..(s + 1) * o * plane];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * in_len..(s + 1) * in_len];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW[o, ckk] += dY[o, plane] * cols^T[plane, ckk]
            T::gemm(o, plane, ckk, T::one(), dys, plane, 1, b, 1, plane, T::one(), dw, ckk, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            // dcols[ckk, plane] = W^T[ckk, o] * dY[o, plane]
            let wt_dy = |target: &mut [T]| {
                T::gemm(ckk, o, plane, T::one(), w.data(), 1, ckk, dys, plane, 1, T::zero(), target, plane, 1)
            };
            if g.is_pointwise() {
                wt_dy(dxs);
            } else {
                wt_dy(&mut dcols);
                col2im(g, &dcols, dxs);
            }
        }
    }
    (dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")), dw.map(|d| Tensor::new(w.shape(), d).expect("dw shape")))
}

/// Zero-padded copy of one map with every padded row split into `stride`
/// phases, so tap `kj` of output column `ox` sits at
/// `phase(py, kj % stride)[ox + kj / stride]`.
struct Phased<T> {
    data: Vec<T>,
    stride: usize,
    /// Length of one phase row.
    len: usize,
}

impl<T: Scalar> Phased<T> {
    fn new(g: &ConvGeom) -> Self {
        let pw = g.w + 2 * g.pad;
        let len = pw.div_ceil(g.stride);
        Self { data: vec![T::zero(); (g.h + 2 * g.pad) * g.stride * len], stride: g.stride, len }
    }

    /// First input column landing in phase `r`, and its index within the phase.
    #[inline]
    fn phase_start(&self, g: &ConvGeom, r: usize) -> Option<(usize, usize)> {
        let first = g.pad + (r + self.stride - g.pad % self.stride) % self.stride;
        (first < g.w + g.pad).then(|| (first - g.pad, first / self.stride))
    }

    fn load(&mut self, g: &ConvGeom, map: &[T]) {
        for iy in 0..g.h {
            let row = &map[iy * g.w..][..g.w];
            for r in 0..self.stride {
                let Some((ix0, j0)) = self.phase_start(g, r) else { continue };
                let count = (g.w - ix0).div_ceil(self.stride);
                let at = self.at(iy + g.pad, r) + j0;
                let dst = &mut self.data[at..at + count];
                if self.stride == 1 {
                    dst.copy_from_slice(row);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = row[ix0 + j * self.stride];
                    }
                }
            }
        }
    }

    fn store(&self, g: &ConvGeom, map: &mut [T]) {
        for iy in 0..g.h {
            let row = &mut map[iy * g.w..][..g.w];
            for r in 0..self.stride {
                let Some((ix0, j0)) = self.phase_start(g, r) else { continue };
                let count = (g.w - ix0).div_ceil(self.stride);
                let at = self.at(iy + g.pad, r) + j0;
                let src = &self.data[at..at + count];
                if self.stride == 1 {
                    row.copy_from_slice(src);
                } else {
                    for (j, &v) in src.iter().enumerate() {
                        row[ix0 + j * self.stride] = v;
                    }
                }
            }
        }
    }

    #[inline]
    fn at(&self, py: usize, phase: usize) -> usize {
        (py * self.stride + phase) * self.len
    }

    #[inline]
    fn tap(&self, py: usize, kj: usize, n: usize) -> &[T] {
        &self.data[self.at(py, kj % self.stride) + kj / self.stride..][..n]
    }

    #[inline]
    fn tap_mut(&mut self, py: usize, kj: usize, n: usize) -> &mut [T] {
        let at = self.at(py, kj % self.stride) + kj / self.stride;
        &mut self.data[at..][..n]
    }
}

pub(crate) fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom), TensorError> {
    let (wc, one, kh, kw) = w.dims4()?;
    let g = ConvGeom::new("depthwise_conv2d", x.shape(), kh, kw, stride, pad)?;
    if wc != g.c || one != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (plane, map) = (g.oh * g.ow, g.h * g.w);
    let mut out = vec![T::zero(); g.n * g.c * plane];
    let mut ph = Phased::new(&g);
    for m in 0..g.n * g.c {
        let ci = m % g.c;
        ph.load(&g, &x.data()[m * map..][..map]);
        let km = &w.data()[ci * kh * kw..][..kh * kw];
        let ym = &mut out[m * plane..][..plane];
        for oy in 0..g.oh {
            let row = &mut ym[oy * g.ow..][..g.ow];
            for ki in 0..kh {
                for kj in 0..kw {
                    axpy(km[ki * kw + kj], ph.tap(oy * g.stride + ki, kj, g.ow), row);
                }
            }
        }
    }
    Ok((Tensor::new(&[g.n, g.c, g.oh, g.ow], out)?, g))
}

pub(crate) fn depthwise_conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (kh, kw) = (g.kh, g.kw);
    let (plane, map) = (g.oh * g.ow, g.h * g.w);
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    let mut ph = Phased::new(g);
    let mut dph = Phased::new(g);
    for m in 0..g.n * g.c {
        let ci = m % g.c;
        let km = &w.data()[ci * kh * kw..][..kh * kw];
        let dym = &dy.data()[m * plane..][..plane];
        if let Some(dw) = dw.as_mut() {
            ph.load(g, &x.data()[m * map..][..map]);
            let dwm = &mut dw[ci * kh * kw..][..kh * kw];
            for oy in 0..g.oh {
                let dr = &dym[oy * g.ow..][..g.ow];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let t = ki * kw + kj;
                        dwm[t] = dwm[t] + dot(dr, ph.tap(oy * g.stride + ki, kj, g.ow));
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dph.data.fill(T::zero());
            for oy in 0..g.oh {
                let dr = &dym[oy * g.ow..][..g.ow];
                for ki in 0..kh {
                    for kj in 0..kw {
                        axpy(km[ki * kw + kj], dr, dph.tap_mut(oy * g.stride + ki, kj, g.ow));
                    }
                }
            }
            dph.store(g, &mut dx[m * map..][..map]);
        }
    }
    (dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")), dw.map(|d| Tensor::new(w.shape(), d).expect("dw shape")))
}

/// Output of [`normalize`]: standardized values plus per-group statistics
/// (population variance).
pub(crate) struct Normalized<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn runs_of(kind: NormKind, n: usize, c: usize, map: usize, group: usize) -> impl Iterator<Item = (usize, usize)> {
    let (start, count) = match kind {
        NormKind::PerChannel => (group, n),
        NormKind::PerMap => (group, 1),
    };
    (0..count).map(move |i| match kind {
        NormKind::PerChannel => ((i * c + start) * map, map),
        NormKind::PerMap => (start * map, map),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NormKind {
    /// Statistics over N·H·W for each channel.
    PerChannel,
    /// Statistics over H·W for each (sample, channel) map.
    PerMap,
}

impl NormKind {
    pub fn groups(self, n: usize, c: usize) -> usize {
        match self {
            NormKind::PerChannel => c,
            NormKind::PerMap => n * c,
        }
    }

    /// Contiguous `(offset, len)` runs of the data covered by `group`.
    pub fn runs(self, n: usize, c: usize, map: usize, group: usize) -> impl Iterator<Item = (usize, usize)> {
        runs_of(self, n, c, map, group)
    }
}

pub(crate) fn normalize<T: Scalar>(x: &Tensor<T>, kind: NormKind) -> Result<Normalized<T>, TensorError> {
    let (n, c, h, w) = x.dims4()?;
    let map = h * w;
    let groups = kind.groups(n, c);
    let eps = T::from_f64_lossy(T::NORM_EPS);
    let mut out = Normalized {
        xhat: vec![T::zero(); x.numel()],
        inv_std: Vec::with_capacity(groups),
        mean: Vec::with_capacity(groups),
        var: Vec::with_capacity(groups),
    };
    let data = x.data();
    for gi in 0..groups {
        let count = T::from_usize(kind.runs(n, c, map, gi).map(|(_, l)| l).sum()).unwrap();
        let mut sum = T::zero();
        for (off, len) in kind.runs(n, c, map, gi) {
            sum = sum + data[off..off + len].iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for (off, len) in kind.runs(n, c, map, gi) {
            for &v in &data[off..off + len] {
                sq = sq + (v - mean) * (v - mean);
            }
        }
        let var = sq / count;
        let inv_std = T::one() / (var + eps).sqrt();
        for (off, len) in kind.runs(n, c, map, gi) {
            for i in off..off + len {
                out.xhat[i] = (data[i] - mean) * inv_std;
            }
        }
        out.inv_std.push(inv_std);
        out.mean.push(mean);
        out.var.push(var);
    }
    Ok(out)
}

/// Backward of `xhat = (x - mean) * inv_std` with batch statistics.
pub(crate) fn normalize_backward<T: Scalar>(
    shape: &[usize],
    kind: NormKind,
    xhat: &[T],
    inv_std: &[T],
    dxhat: &[T],
) -> Vec<T> {
    let [n, c, h, w] = *shape else { unreachable!("normalize_backward on non-4d shape") };
    let map = h * w;
    let mut dx = vec![T::zero(); xhat.len()];
    for (gi, &inv) in inv_std.iter().enumerate() {
        let count = T::from_usize(kind.runs(n, c, map, gi).map(|(_, l)| l).sum()).unwrap();
        let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
        for (off, len) in kind.runs(n, c, map, gi) {
            for i in off..off + len {
                sum_d = sum_d + dxhat[i];
                sum_dx = sum_dx + dxhat[i] * xhat[i];
            }
        }
        let (mean_d, mean_dx) = (sum_d / count, sum_dx / count);
        for (off, len) in kind.runs(n, c, map, gi) {
            for i in off..off + len {
                dx[i] = inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
            }
        }
    }
    dx
}

pub(crate) fn avg_pool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, ConvGeom), TensorError> {
    if k == 0 {
        return Err(TensorError::InvalidArgument("avg_pool2d: kernel must be >= 1".into()));
    }
    let g = ConvGeom::new("avg_pool2d", x.shape(), k, k, stride, 0)?;
    let (plane, map) = (g.oh * g.ow, g.h * g.w);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); g.n * g.c * plane];
    for m in 0..g.n * g.c {
        let xm = &x.data()[m * map..(m + 1) * map];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ki in 0..k {
                    for kj in 0..k {
                        acc = acc + xm[(oy * stride + ki) * g.w + ox * stride + kj];
                    }
                }
                out[m * plane + oy * g.ow + ox] = acc * scale;
            }
        }
    }
    Ok((Tensor::new(&[g.n, g.c, g.oh, g.ow], out)?, g))
}

pub(crate) fn avg_pool2d_backward<T: Scalar>(g: &ConvGeom, dy: &Tensor<T>) -> Tensor<T> {
    let (plane, map, k) = (g.oh * g.ow, g.h * g.w, g.kh);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut dx = vec![T::zero(); g.n * g.c * map];
    for m in 0..g.n * g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dy.data()[m * plane + oy * g.ow + ox] * scale;
                for ki in 0..k {
                    for kj in 0..k {
                        let i = m * map + (oy * g.stride + ki) * g.w + ox * g.stride + kj;
                        dx[i] = dx[i] + d;
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.c, g.h, g.w], dx).expect("pool dx shape")
}

/// Row-wise softmax of `[n, classes]` logits, computed stably.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_ranges_match_brute_force() {
        for (h, k, stride, pad) in [(5, 3, 1, 1), (6, 3, 2, 1), (7, 5, 2, 2), (4, 1, 1, 0), (3, 3, 3, 0), (8, 3, 2, 0)]
        {
            let g = ConvGeom::new("t", &[1, 1, h, h], k, k, stride, pad).unwrap();
            for tap in 0..k {
                let inside: Vec<usize> =
                    (0..g.oh).filter(|&o| (o * stride + tap).checked_sub(pad).is_some_and(|i| i < h)).collect();
                let (lo, hi) = g.valid(tap, h, g.oh);
                assert_eq!((lo..hi).collect::<Vec<_>>(), inside, "h={h} k={k} s={stride} p={pad} tap={tap}");
            }
        }
    }

    #[test]
    fn geometry_output_extent() {
        let g = ConvGeom::new("t", &[1, 1, 32, 32], 3, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        let g = ConvGeom::new("t", &[1, 1, 5, 5], 3, 3, 1, 0).unwrap();
        assert_eq!((g.oh, g.ow), (3, 3));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let err = ConvGeom::new("t", &[1, 1, 2, 2], 5, 5, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::KernelTooLarge { .. }));
    }

    #[test]
    fn zero_stride_is_rejected() {
        assert!(ConvGeom::new("t", &[1, 1, 4, 4], 3, 3, 0, 1).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new("t", &[1, 2, 5, 4], 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows = 2 * 9 * g.oh * g.ow;
        let c: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; rows];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_extreme_logits() {
        let p = softmax_rows(&[1000.0f64, 0.0, -1000.0, 3.0, 3.0, 3.0], 3);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
