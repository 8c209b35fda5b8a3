//! Differentiable layer primitives over [`Tensor4`].

use crate::real::Real;
use crate::tensor::Tensor4;

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output extent along one axis, or `None` when the input is smaller
    /// than the dilated kernel.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn fan_in(&self) -> usize {
        self.patch_len()
    }
}

/// Saved forward state of a convolution.
#[derive(Debug, Clone)]
pub struct ConvTrace<T> {
    cols: Vec<T>,
    in_height: usize,
    in_width: usize,
    batch: usize,
}

fn im2col<T: Real>(g: &ConvGeom, x: &Tensor4<T>, oh: usize, ow: usize) -> Vec<T> {
    let k = g.kernel;
    let positions = x.batch * oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * positions];
    let (h, w) = (x.height as isize, x.width as isize);
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for b in 0..x.batch {
                    let src = x.plane(ci, b);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        let out_row = &mut dst[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < w {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut Tensor4<T>, oh: usize, ow: usize) {
    let k = g.kernel;
    let positions = dx.batch * oh * ow;
    let (h, w) = (dx.height as isize, dx.width as isize);
    let width = dx.width;
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for b in 0..dx.batch {
                    let dst = dx.plane_mut(ci, b);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let in_row = &src[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                        let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                        for (ox, &v) in in_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < w {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = W * x + b`. `weight` is `[out][in][k][k]`.
///
/// # Panics
///
/// If the input is smaller than the dilated kernel; callers validate sizes.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
    x: &Tensor4<T>,
) -> (Tensor4<T>, ConvTrace<T>) {
    assert_eq!(x.channels, g.in_channels, "conv input channels");
    let oh = g.out_extent(x.height).expect("conv input too small");
    let ow = g.out_extent(x.width).expect("conv input too small");
    let cols = im2col(g, x, oh, ow);
    let positions = x.batch * oh * ow;
    let mut y = Tensor4::zeros(g.out_channels, x.batch, oh, ow);
    for (co, &b) in bias.iter().enumerate() {
        y.data[co * positions..(co + 1) * positions].fill(b);
    }
    T::gemm(
        false,
        false,
        g.out_channels,
        positions,
        g.patch_len(),
        T::one(),
        weight,
        &cols,
        T::one(),
        &mut y.data,
    );
    let trace = ConvTrace {
        cols,
        in_height: x.height,
        in_width: x.width,
        batch: x.batch,
    };
    (y, trace)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
///
/// `param_grads` receives `(dweight, dbias)`; pass `None` when the layer's
/// parameters are frozen.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    weight: &[T],
    trace: &ConvTrace<T>,
    dy: &Tensor4<T>,
    param_grads: Option<(&mut [T], &mut [T])>,
    need_input_grad: bool,
) -> Option<Tensor4<T>> {
    let positions = dy.batch * dy.height * dy.width;
    let patch = g.patch_len();
    if let Some((dweight, dbias)) = param_grads {
        T::gemm(
            false,
            true,
            g.out_channels,
            patch,
            positions,
            T::one(),
            &dy.data,
            &trace.cols,
            T::one(),
            dweight,
        );
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += dy.data[co * positions..(co + 1) * positions].iter().copied().sum::<T>();
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![T::zero(); patch * positions];
    T::gemm(
        true,
        false,
        patch,
        positions,
        g.out_channels,
        T::one(),
        weight,
        &dy.data,
        T::zero(),
        &mut dcols,
    );
    let mut dx = Tensor4::zeros(g.in_channels, trace.batch, trace.in_height, trace.in_width);
    col2im(g, &dcols, &mut dx, dy.height, dy.width);
    Some(dx)
}

/// Leaky rectifier; `slope = 0` gives a plain ReLU.
pub fn leaky_relu_inplace<T: Real>(x: &mut Tensor4<T>, slope: T) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu_inplace`] given its output.
pub fn leaky_relu_backward<T: Real>(out: &Tensor4<T>, dy: &mut Tensor4<T>, slope: T) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o < T::zero() || (o == T::zero() && slope == T::zero()) {
            *g *= slope;
        }
    }
}

/// Fully connected layer mapping each sample's flattened map to `outputs`
/// values. `weight` is `[outputs][channels*height*width]`.
pub fn dense_forward<T: Real>(weight: &[T], bias: &[T], x: &Tensor4<T>) -> Vec<Vec<T>> {
    let features = x.channels * x.plane_len();
    let outputs = bias.len();
    assert_eq!(weight.len(), outputs * features, "dense weight size");
    (0..x.batch)
        .map(|b| {
            (0..outputs)
                .map(|o| {
                    let w = &weight[o * features..(o + 1) * features];
                    let mut s = bias[o];
                    for c in 0..x.channels {
                        let plane = x.plane(c, b);
                        let wc = &w[c * plane.len()..(c + 1) * plane.len()];
                        for (&a, &bw) in plane.iter().zip(wc) {
                            s += a * bw;
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Backward of [`dense_forward`]. `dy[b][o]` is the gradient per sample.
pub fn dense_backward<T: Real>(
    weight: &[T],
    x: &Tensor4<T>,
    dy: &[Vec<T>],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor4<T> {
    let features = x.channels * x.plane_len();
    let mut dx = Tensor4::zeros(x.channels, x.batch, x.height, x.width);
    for (b, g) in dy.iter().enumerate() {
        for (o, &go) in g.iter().enumerate() {
            dbias[o] += go;
            let w = &weight[o * features..(o + 1) * features];
            let dw = &mut dweight[o * features..(o + 1) * features];
            for c in 0..x.channels {
                let p = x.plane_len();
                let plane = x.plane(c, b);
                for i in 0..p {
                    dw[c * p + i] += go * plane[i];
                }
                let dplane = dx.plane_mut(c, b);
                for i in 0..p {
                    dplane[i] += go * w[c * p + i];
                }
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax over `channels` values spaced `stride` apart.
pub fn softmax_strided(data: &mut [f64], channels: usize, stride: usize, offset: usize) {
    let mut max = f64::NEG_INFINITY;
    for c in 0..channels {
        max = max.max(data[c * stride + offset]);
    }
    let mut sum = 0.0;
    for c in 0..channels {
        let e = (data[c * stride + offset] - max).exp();
        data[c * stride + offset] = e;
        sum += e;
    }
    for c in 0..channels {
        data[c * stride + offset] /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(g: &ConvGeom, w: &[f64], b: &[f64], x: &Tensor4<f64>) -> Tensor4<f64> {
        let oh = g.out_extent(x.height).unwrap();
        let ow = g.out_extent(x.width).unwrap();
        let mut y = Tensor4::zeros(g.out_channels, x.batch, oh, ow);
        for n in 0..x.batch {
            for co in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                        continue;
                                    }
                                    let wi = ((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx;
                                    s += w[wi] * x.data[x.index(ci, n, iy as usize, ix as usize)];
                                }
                            }
                        }
                        let i = y.index(co, n, oy, ox);
                        y.data[i] = s;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, s, p, d) in &[(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (4, 2, 1, 1), (3, 1, 4, 4)] {
            let g = ConvGeom {
                in_channels: 2,
                out_channels: 3,
                kernel: k,
                stride: s,
                padding: p,
                dilation: d,
            };
            let x = Tensor4::from_vec(2, 2, 7, 6, pseudo(2 * 2 * 7 * 6, 0.31));
            let w = pseudo(g.weight_len(), 0.17);
            let b = pseudo(3, 0.9);
            let (y, _) = conv2d_forward(&g, &w, &b, &x);
            let want = direct_conv(&g, &w, &b, &x);
            assert!(y.same_shape(&want));
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
        };
        let x = Tensor4::from_vec(2, 2, 6, 5, pseudo(2 * 2 * 6 * 5, 0.23));
        let w = pseudo(g.weight_len(), 0.41);
        let b = pseudo(2, 0.5);
        let (y, trace) = conv2d_forward(&g, &w, &b, &x);
        let dy_data = pseudo(y.data.len(), 0.77);
        let dy = Tensor4::from_vec(y.channels, y.batch, y.height, y.width, dy_data.clone());
        let objective = |w: &[f64], b: &[f64], x: &Tensor4<f64>| -> f64 {
            let (y, _) = conv2d_forward(&g, w, b, x);
            y.data.iter().zip(&dy_data).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = conv2d_backward(&g, &w, &trace, &dy, Some((&mut dw, &mut db)), true).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (objective(&wp, &b, &x) - objective(&wm, &b, &x)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-7, "dw[{i}]: {fd} vs {}", dw[i]);
        }
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (objective(&w, &b, &xp) - objective(&w, &b, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7, "dx[{i}]");
        }
        let total: f64 = dy_data.iter().take(y.plane_len() * y.batch).sum();
        assert!((db[0] - total).abs() < 1e-12);
    }

    #[test]
    fn out_extent_follows_floor_rule() {
        let g = ConvGeom {
            in_channels: 1,
            out_channels: 1,
            kernel: 4,
            stride: 2,
            padding: 1,
            dilation: 1,
        };
        let mut n = 321;
        let mut seen = vec![];
        for _ in 0..5 {
            n = g.out_extent(n).unwrap();
            seen.push(n);
        }
        assert_eq!(seen, vec![160, 80, 40, 20, 10]);
        assert_eq!(g.out_extent(1), None);
        assert_eq!(g.out_extent(2), Some(1));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let x = Tensor4::from_vec(2, 3, 2, 2, pseudo(24, 0.13));
        let w = pseudo(2 * 8, 0.29);
        let b = vec![0.1, -0.2];
        let dy: Vec<Vec<f64>> = (0..3).map(|i| vec![0.3 * i as f64 - 0.2, 0.5]).collect();
        let f = |w: &[f64], x: &Tensor4<f64>| -> f64 {
            dense_forward(w, &b, x)
                .iter()
                .zip(&dy)
                .map(|(o, g)| o.iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = dense_backward(&w, &x, &dy, &mut dw, &mut db);
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            assert!(((f(&p, &x) - f(&m, &x)) / (2.0 * h) - dw[i]).abs() < 1e-8);
        }
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            assert!(((f(&w, &p) - f(&w, &m)) / (2.0 * h) - dx.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut v = vec![1.0, 1000.0, -3.0];
        softmax_strided(&mut v, 3, 1, 0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(v[1] > 0.999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
