//! Separable bilinear resampling with corner-aligned sampling: the first and
//! last output samples sit exactly on the first and last input samples.

use crate::real::Real;

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

#[derive(Debug, Clone)]
struct Axis {
    taps: Vec<Tap>,
}

impl Axis {
    fn corner_aligned(input: usize, output: usize) -> Self {
        assert!(input >= 1 && output >= 1, "resample axis must be non-empty");
        let taps = (0..output)
            .map(|i| {
                if input == 1 {
                    return Tap { lo: 0, hi: 0, frac: 0.0 };
                }
                let src = if output == 1 {
                    (input - 1) as f64 / 2.0
                } else {
                    (i * (input - 1)) as f64 / (output - 1) as f64
                };
                let lo = (src.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                Tap {
                    lo,
                    hi,
                    frac: src - lo as f64,
                }
            })
            .collect();
        Axis { taps }
    }
}

/// Precomputed bilinear weights for one source/target size pair.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub src_height: usize,
    pub src_width: usize,
    pub dst_height: usize,
    pub dst_width: usize,
    rows: Axis,
    cols: Axis,
}

#[inline]
fn lerp<T: Real>(a: T, b: T, frac: T) -> T {
    // a + f (b - a) reproduces constants exactly.
    a + frac * (b - a)
}

impl Resampler {
    pub fn new(src_height: usize, src_width: usize, dst_height: usize, dst_width: usize) -> Self {
        Self {
            src_height,
            src_width,
            dst_height,
            dst_width,
            rows: Axis::corner_aligned(src_height, dst_height),
            cols: Axis::corner_aligned(src_width, dst_width),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src_height == self.dst_height && self.src_width == self.dst_width
    }

    pub fn forward_plane<T: Real>(&self, src: &[T], dst: &mut [T]) {
        debug_assert_eq!(src.len(), self.src_height * self.src_width);
        debug_assert_eq!(dst.len(), self.dst_height * self.dst_width);
        let (sw, dw) = (self.src_width, self.dst_width);
        let mut tmp = vec![T::zero(); self.src_height * dw];
        for y in 0..self.src_height {
            let row = &src[y * sw..(y + 1) * sw];
            let out = &mut tmp[y * dw..(y + 1) * dw];
            for (o, t) in out.iter_mut().zip(&self.cols.taps) {
                *o = lerp(row[t.lo], row[t.hi], T::of(t.frac));
            }
        }
        for (y, t) in self.rows.taps.iter().enumerate() {
            let f = T::of(t.frac);
            let (lo, hi) = (&tmp[t.lo * dw..(t.lo + 1) * dw], &tmp[t.hi * dw..(t.hi + 1) * dw]);
            for ((o, &a), &b) in dst[y * dw..(y + 1) * dw].iter_mut().zip(lo).zip(hi) {
                *o = lerp(a, b, f);
            }
        }
    }

    /// Accumulates the transpose of [`forward_plane`](Self::forward_plane)
    /// applied to `grad_dst` into `grad_src`.
    pub fn adjoint_plane<T: Real>(&self, grad_dst: &[T], grad_src: &mut [T]) {
        debug_assert_eq!(grad_dst.len(), self.dst_height * self.dst_width);
        debug_assert_eq!(grad_src.len(), self.src_height * self.src_width);
        let (sw, dw) = (self.src_width, self.dst_width);
        let mut tmp = vec![T::zero(); self.src_height * dw];
        for (y, t) in self.rows.taps.iter().enumerate() {
            let f = T::of(t.frac);
            let one_minus = T::one() - f;
            for x in 0..dw {
                let g = grad_dst[y * dw + x];
                tmp[t.lo * dw + x] += g * one_minus;
                tmp[t.hi * dw + x] += g * f;
            }
        }
        for y in 0..self.src_height {
            for (x, t) in self.cols.taps.iter().enumerate() {
                let g = tmp[y * dw + x];
                let f = T::of(t.frac);
                grad_src[y * sw + t.lo] += g * (T::one() - f);
                grad_src[y * sw + t.hi] += g * f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjoint_matches_dense_transpose() {
        let r = Resampler::new(3, 2, 5, 4);
        let n_src = 6;
        let n_dst = 20;
        // Build the dense operator column by column.
        let mut dense = vec![vec![0.0f64; n_src]; n_dst];
        for j in 0..n_src {
            let mut e = vec![0.0; n_src];
            e[j] = 1.0;
            let mut out = vec![0.0; n_dst];
            r.forward_plane(&e, &mut out);
            for i in 0..n_dst {
                dense[i][j] = out[i];
            }
        }
        let g: Vec<f64> = (0..n_dst).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut adj = vec![0.0; n_src];
        r.adjoint_plane(&g, &mut adj);
        for j in 0..n_src {
            let want: f64 = (0..n_dst).map(|i| dense[i][j] * g[i]).sum();
            assert!((adj[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn three_point_midpoint() {
        let r = Resampler::new(2, 1, 3, 1);
        let mut out = vec![0.0f64; 3];
        r.forward_plane(&[0.2, 0.6], &mut out);
        assert_eq!(out[0], 0.2);
        assert!((out[1] - 0.4).abs() < 1e-15);
        assert_eq!(out[2], 0.6);
    }
}
