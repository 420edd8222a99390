//! Raw loops behind the graph operations. Buffers are row-major `[C×T]`.

use super::Scalar;

/// Geometry of a "same-odd" padded 1D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, c_out: usize, t_in: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            c_in,
            c_out,
            t_in,
            t_out: t_in.div_ceil(stride),
            kernel,
            stride,
            groups,
        }
    }

    fn pad(&self) -> isize {
        ((self.kernel - 1) / 2) as isize
    }

    /// Output index range `[lo, hi)` whose input tap at `offset` is in bounds.
    #[inline]
    fn valid_range(&self, offset: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { (((-offset) + s - 1) / s).min(self.t_out as isize) };
        let last_src = self.t_in as isize - 1 - offset;
        let hi = if last_src < 0 { 0 } else { (last_src / s + 1).min(self.t_out as isize) };
        (lo as usize, hi.max(lo) as usize)
    }

    /// Visits every `(out_channel, in_channel, weight_index, offset)` tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize)) {
        let cin_g = self.c_in / self.groups;
        let cout_g = self.c_out / self.groups;
        let pad = self.pad();
        for o in 0..self.c_out {
            let g = o / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                for kk in 0..self.kernel {
                    f(o, ci, (o * cin_g + cl) * self.kernel + kk, kk as isize - pad);
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); geom.c_out * geom.t_out];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(geom.t_out).enumerate() {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    let (t_in, t_out, stride) = (geom.t_in, geom.t_out, geom.stride);
    geom.for_each_tap(|o, ci, wi, offset| {
        let wv = w[wi];
        if wv == T::zero() {
            return;
        }
        let (lo, hi) = geom.valid_range(offset);
        if lo == hi {
            return;
        }
        let src = &x[ci * t_in..(ci + 1) * t_in];
        let dst = &mut out[o * t_out..(o + 1) * t_out];
        if stride == 1 {
            let start = (lo as isize + offset) as usize;
            for (d, &s) in dst[lo..hi].iter_mut().zip(&src[start..start + (hi - lo)]) {
                *d = *d + wv * s;
            }
        } else {
            for j in lo..hi {
                let s = (j as isize * stride as isize + offset) as usize;
                dst[j] = dst[j] + wv * src[s];
            }
        }
    });
    out
}

/// Returns `(dx, dw)` and, when `with_bias`, `db`.
pub(crate) fn conv1d_backward<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    with_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let (t_in, t_out, stride) = (geom.t_in, geom.t_out, geom.stride);
    geom.for_each_tap(|o, ci, wi, offset| {
        let (lo, hi) = geom.valid_range(offset);
        if lo == hi {
            return;
        }
        let wv = w[wi];
        let g = &dy[o * t_out..(o + 1) * t_out];
        let src = &x[ci * t_in..(ci + 1) * t_in];
        let dsrc = &mut dx[ci * t_in..(ci + 1) * t_in];
        let mut acc = T::zero();
        if stride == 1 {
            let start = (lo as isize + offset) as usize;
            let n = hi - lo;
            for ((&gy, &xs), dxs) in g[lo..hi]
                .iter()
                .zip(&src[start..start + n])
                .zip(dsrc[start..start + n].iter_mut())
            {
                acc = acc + gy * xs;
                *dxs = *dxs + wv * gy;
            }
        } else {
            for j in lo..hi {
                let s = (j as isize * stride as isize + offset) as usize;
                acc = acc + g[j] * src[s];
                dsrc[s] = dsrc[s] + wv * g[j];
            }
        }
        dw[wi] = dw[wi] + acc;
    });
    let db = with_bias.then(|| dy.chunks(t_out).map(|row| row.iter().copied().sum()).collect());
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        let g = ConvGeom::new(1, 1, 4, 3, 2, 1);
        assert_eq!(g.t_out, 2);
        // offset -1: j=0 reads x[-1], out of range
        assert_eq!(g.valid_range(-1), (1, 2));
        assert_eq!(g.valid_range(0), (0, 2));
        assert_eq!(g.valid_range(1), (0, 2));
    }
}
