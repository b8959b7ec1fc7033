//! Slice-level numeric kernels behind the graph operations.

use crate::scalar::Scalar;
use crate::tensor::{numel, Result, TensorError};

/// Numpy-style broadcast of two shapes, aligned at the trailing dimension.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into an input of shape
/// `input` that broadcasts to it. `None` when the shapes are identical.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let n = numel(out);
    if numel(input) == 1 {
        return Some(vec![0; n]);
    }
    let offset = out.len() - input.len();
    // input strides expressed on the output's axes, zero where broadcast
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(map)
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

/// Lower Cholesky factor of a row-major `n x n` symmetric matrix.
pub(crate) fn cholesky<S: Scalar>(a: &[S], n: usize) -> Result<Vec<S>> {
    let mut l = vec![S::zero(); n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > S::zero()) || !d.is_finite() {
            let diag: Vec<f64> = (0..n).map(|i| a[i * n + i].as_f64()).collect();
            let max = diag.iter().cloned().fold(f64::MIN, f64::max);
            let min = diag.iter().cloned().fold(f64::MAX, f64::min);
            return Err(TensorError::NotPositiveDefinite {
                index: j,
                pivot: d.as_f64(),
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub(crate) fn cholesky_solve<S: Scalar>(l: &[S], n: usize, b: &[S]) -> Vec<S> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Calls `f(col_row, out_pos, in_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(
                                row,
                                oy * ow + ox,
                                (c * self.height + iy as usize) * self.width + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Unfolds one `C x H x W` image into a `(C*kh*kw) x (Ho*Wo)` matrix.
    pub fn im2col<S: Scalar>(&self, image: &[S]) -> Vec<S> {
        let cols = self.out_h() * self.out_w();
        let mut out = vec![S::zero(); self.patch_len() * cols];
        self.for_each_tap(|row, pos, src| out[row * cols + pos] = image[src]);
        out
    }

    /// Adjoint of [`im2col`](Self::im2col), accumulating into `image`.
    pub fn col2im_add<S: Scalar>(&self, cols_buf: &[S], image: &mut [S]) {
        let cols = self.out_h() * self.out_w();
        self.for_each_tap(|row, pos, dst| image[dst] += cols_buf[row * cols + pos]);
    }
}

/// Half-pixel bilinear sampling table along one axis:
/// `(lower index, upper index, upper weight)` per output position.
pub(crate) fn bilinear_taps<S: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, S)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            if i0 + 1 >= input {
                (input - 1, input - 1, S::zero())
            } else {
                (i0, i0 + 1, S::lit(src - i0 as f64))
            }
        })
        .collect()
}

/// Resizes every trailing `h x w` plane of `x` to `oh x ow`.
pub(crate) fn resize_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<S> {
    let ty = bilinear_taps::<S>(h, oh);
    let tx = bilinear_taps::<S>(w, ow);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (S::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (S::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (S::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<S: Scalar>(
    g: &[S],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    gx: &mut [S],
) {
    let ty = bilinear_taps::<S>(h, oh);
    let tx = bilinear_taps::<S>(w, ow);
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                let top = v * (S::one() - fy);
                let bot = v * fy;
                dst[y0 * w + x0] += top * (S::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (S::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
}
