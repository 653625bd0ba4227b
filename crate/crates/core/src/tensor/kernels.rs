//! Slice-level numeric kernels shared by forward and backward passes.

use super::Element;
use crate::error::{Error, Result};

/// Interpolation used when resizing feature-resolution maps to image resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(ResizeMode::Bilinear),
            "nearest" => Ok(ResizeMode::Nearest),
            other => Err(Error::Config(format!("unknown resize mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResizeMode::Bilinear => "bilinear",
            ResizeMode::Nearest => "nearest",
        })
    }
}

/// Spatial output size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution along one axis.
pub fn conv_transpose_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&v| v > 0)
}

/// Row-major `c = a·b (+ c if accumulate)`, `a` is `m×k`, `b` is `k×n`.
/// `trans_a` / `trans_b` read the operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    trans_a: bool,
    b: &[E],
    trans_b: bool,
    c: &mut [E],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: the asserted slice lengths cover every index addressed by the strides above.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one square-kernel convolution on a single sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: conv_out_dim(height, kernel, stride, padding)?,
            out_w: conv_out_dim(width, kernel, stride, padding)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `[lo, hi)` whose tap at offset `kj` lands inside the input row.
    fn valid_range(&self, kj: usize, out: usize, size: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let shift = kj as isize - p;
        // need 0 ≤ o·s + shift < size
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = if size as isize - shift <= 0 {
            0
        } else {
            ((size as isize - shift + s - 1) / s).min(out as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }

    /// Unfolds `x` (`C×H×W`) into `col` (`C·K·K × Ho·Wo`).
    pub fn im2col<E: Element>(&self, x: &[E], col: &mut [E]) {
        let (k, s) = (self.kernel, self.stride);
        let cols = self.col_cols();
        let hw = self.height * self.width;
        for c in 0..self.channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                let (ylo, yhi) = self.valid_range(ki, self.out_h, self.height);
                for kj in 0..k {
                    let (xlo, xhi) = self.valid_range(kj, self.out_w, self.width);
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    dst[..ylo * self.out_w].fill(E::zero());
                    dst[yhi * self.out_w..].fill(E::zero());
                    for oy in ylo..yhi {
                        let iy = oy * s + ki - self.padding;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        line[..xlo].fill(E::zero());
                        line[xhi..].fill(E::zero());
                        if xhi > xlo {
                            let base = iy * self.width + xlo * s + kj - self.padding;
                            if s == 1 {
                                line[xlo..xhi].copy_from_slice(&plane[base..base + xhi - xlo]);
                            } else {
                                for (i, v) in line[xlo..xhi].iter_mut().enumerate() {
                                    *v = plane[base + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `col` back into `x`, accumulating overlapping taps.
    pub fn col2im<E: Element>(&self, col: &[E], x: &mut [E]) {
        let (k, s) = (self.kernel, self.stride);
        let cols = self.col_cols();
        let hw = self.height * self.width;
        for c in 0..self.channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                let (ylo, yhi) = self.valid_range(ki, self.out_h, self.height);
                for kj in 0..k {
                    let (xlo, xhi) = self.valid_range(kj, self.out_w, self.width);
                    if xhi <= xlo {
                        continue;
                    }
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in ylo..yhi {
                        let iy = oy * s + ki - self.padding;
                        let line = &src[oy * self.out_w + xlo..oy * self.out_w + xhi];
                        let base = iy * self.width + xlo * s + kj - self.padding;
                        if s == 1 {
                            for (d, &v) in plane[base..base + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in line.iter().enumerate() {
                                plane[base + i * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(N,C,H,W) ⊛ (O,C,K,K) → (N,O,Ho,Wo)`.
pub(crate) fn conv2d_forward<E: Element>(
    x: &[E],
    batch: usize,
    geom: &ConvGeom,
    weight: &[E],
    out_channels: usize,
) -> Vec<E> {
    let in_per = geom.channels * geom.height * geom.width;
    let out_per = out_channels * geom.col_cols();
    let mut out = vec![E::zero(); batch * out_per];
    let mut col = vec![E::zero(); geom.col_rows() * geom.col_cols()];
    for n in 0..batch {
        geom.im2col(&x[n * in_per..(n + 1) * in_per], &mut col);
        gemm(
            out_channels,
            geom.col_rows(),
            geom.col_cols(),
            weight,
            false,
            &col,
            false,
            &mut out[n * out_per..(n + 1) * out_per],
            false,
        );
    }
    out
}

/// Returns `(dx, dweight)` for [`conv2d_forward`]; either may be skipped.
pub(crate) fn conv2d_backward<E: Element>(
    x: &[E],
    batch: usize,
    geom: &ConvGeom,
    weight: &[E],
    out_channels: usize,
    dy: &[E],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let in_per = geom.channels * geom.height * geom.width;
    let out_per = out_channels * geom.col_cols();
    let mut dx = want_dx.then(|| vec![E::zero(); batch * in_per]);
    let mut dw = want_dw.then(|| vec![E::zero(); weight.len()]);
    let mut col = vec![E::zero(); geom.col_rows() * geom.col_cols()];
    for n in 0..batch {
        let dy_n = &dy[n * out_per..(n + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            geom.im2col(&x[n * in_per..(n + 1) * in_per], &mut col);
            gemm(
                out_channels,
                geom.col_cols(),
                geom.col_rows(),
                dy_n,
                false,
                &col,
                true,
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                geom.col_rows(),
                out_channels,
                geom.col_cols(),
                weight,
                true,
                dy_n,
                false,
                &mut col,
                false,
            );
            geom.col2im(&col, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    (dx, dw)
}

/// Transposed convolution `(N,O,H,W) → (N,C,Ho,Wo)` with a `(O,C,K,K)` kernel;
/// `geom` describes the *output* side as if it were a conv2d input.
pub(crate) fn conv_transpose2d_forward<E: Element>(
    x: &[E],
    batch: usize,
    geom: &ConvGeom,
    weight: &[E],
    in_channels: usize,
) -> Vec<E> {
    let in_per = in_channels * geom.col_cols();
    let out_per = geom.channels * geom.height * geom.width;
    let mut out = vec![E::zero(); batch * out_per];
    let mut col = vec![E::zero(); geom.col_rows() * geom.col_cols()];
    for n in 0..batch {
        gemm(
            geom.col_rows(),
            in_channels,
            geom.col_cols(),
            weight,
            true,
            &x[n * in_per..(n + 1) * in_per],
            false,
            &mut col,
            false,
        );
        geom.col2im(&col, &mut out[n * out_per..(n + 1) * out_per]);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<E: Element>(
    x: &[E],
    batch: usize,
    geom: &ConvGeom,
    weight: &[E],
    in_channels: usize,
    dy: &[E],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let in_per = in_channels * geom.col_cols();
    let out_per = geom.channels * geom.height * geom.width;
    let mut dx = want_dx.then(|| vec![E::zero(); batch * in_per]);
    let mut dw = want_dw.then(|| vec![E::zero(); weight.len()]);
    let mut col = vec![E::zero(); geom.col_rows() * geom.col_cols()];
    for n in 0..batch {
        geom.im2col(&dy[n * out_per..(n + 1) * out_per], &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm(
                in_channels,
                geom.col_rows(),
                geom.col_cols(),
                weight,
                false,
                &col,
                false,
                &mut dx[n * in_per..(n + 1) * in_per],
                false,
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                in_channels,
                geom.col_cols(),
                geom.col_rows(),
                &x[n * in_per..(n + 1) * in_per],
                false,
                &col,
                true,
                dw,
                true,
            );
        }
    }
    (dx, dw)
}

/// Per-axis sampling table for resizing: `(low index, high index, high weight)`.
pub(crate) fn resize_table(src: usize, dst: usize, mode: ResizeMode) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| match mode {
            ResizeMode::Nearest => {
                let s = ((d as f64 * scale).floor() as usize).min(src - 1);
                (s, s, 0.0)
            }
            ResizeMode::Bilinear => {
                let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            }
        })
        .collect()
}

/// Resizes every `H×W` plane of `x` (`planes` of them) to `th×tw`.
pub(crate) fn resize_forward<E: Element>(
    x: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    mode: ResizeMode,
) -> Vec<E> {
    let rows = resize_table(h, th, mode);
    let cols = resize_table(w, tw, mode);
    let mut out = vec![E::zero(); planes * th * tw];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * th * tw..(p + 1) * th * tw];
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            let wy = E::from_f64_lossy(wy);
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let wx = E::from_f64_lossy(wx);
                let top = src[y0 * w + x0] * (E::one() - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (E::one() - wx) + src[y1 * w + x1] * wx;
                dst[oy * tw + ox] = top * (E::one() - wy) + bot * wy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<E: Element>(
    dy: &[E],
    planes: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
    mode: ResizeMode,
) -> Vec<E> {
    let rows = resize_table(h, th, mode);
    let cols = resize_table(w, tw, mode);
    let mut dx = vec![E::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * th * tw..(p + 1) * th * tw];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            let wy = E::from_f64_lossy(wy);
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let wx = E::from_f64_lossy(wx);
                let v = g[oy * tw + ox];
                d[y0 * w + x0] += v * (E::one() - wy) * (E::one() - wx);
                d[y0 * w + x1] += v * (E::one() - wy) * wx;
                d[y1 * w + x0] += v * wy * (E::one() - wx);
                d[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    dx
}

/// Broadcast output shape for same-rank operands, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Row-major strides of `shape` with broadcast axes (size 1 vs larger output) zeroed.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == out[i] { acc } else { 0 };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast output.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        // odometer over the leading axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape_arithmetic() {
        assert_eq!(conv_out_dim(8, 4, 2, 1), Some(4));
        assert_eq!(conv_out_dim(3, 2, 1, 0), Some(2));
        assert_eq!(conv_out_dim(1, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_dim(4, 4, 2, 1), Some(8));
    }

    #[test]
    fn bilinear_table_matches_half_pixel_convention() {
        let t = resize_table(2, 4, ResizeMode::Bilinear);
        let w: Vec<f64> = t
            .iter()
            .map(|&(lo, hi, w)| lo as f64 * (1.0 - w) + hi as f64 * w)
            .collect();
        assert_eq!(w, vec![0.0, 0.25, 0.75, 1.0]);
        let id = resize_table(5, 5, ResizeMode::Bilinear);
        assert!(id.iter().enumerate().all(|(i, &(lo, _, w))| lo == i && w == 0.0));
    }

    #[test]
    fn broadcast_walk_visits_channel_broadcast() {
        let mut seen = Vec::new();
        for_each_broadcast(&[1, 2, 2], &[1, 1, 2], &[1, 2, 2], |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen, vec![(0, 0, 0), (1, 1, 1), (2, 2, 0), (3, 3, 1)]);
        assert_eq!(broadcast_shape(&[2, 1, 3], &[2, 4, 3]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[2, 2], &[3, 2]), None);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, true, &mut c, false);
        // aᵀ·bᵀ = (b·a)ᵀ
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }
}
