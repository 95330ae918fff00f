//! Forward and reverse-mode kernels for the fixed operation set the networks
//! are built from: convolution, ReLU, bilinear resize, area pooling and
//! channel concatenation.

use crate::numerics::Grid;

/// Geometry of a square-kernel 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Unfolded input patches kept from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

/// `c = a * b + beta * c` for dense row-major operands with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: operand extents are checked above; c is a distinct &mut slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Grid, out_h: usize, out_w: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = out_h * out_w;
        let mut cols = vec![0.0; self.in_ch * k * k * p];
        for c in 0..self.in_ch {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for ox in 0..out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], cache: &ConvCache) -> Grid {
        let k = self.kernel;
        let (oh, ow) = (cache.out_h, cache.out_w);
        let p = oh * ow;
        let mut dx = Grid::zeros(self.in_ch, cache.in_h, cache.in_w);
        let w = cache.in_w;
        for c in 0..self.in_ch {
            let plane = dx.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= cache.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Grid, weight: &[f64], bias: &[f64]) -> (Grid, ConvCache) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        assert_eq!(weight.len(), self.weight_len());
        assert_eq!(bias.len(), self.out_ch);
        let (oh, ow) = self.out_dims(x.height, x.width);
        let p = oh * ow;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let cols = self.im2col(x, oh, ow);
        let mut out = Grid::zeros(self.out_ch, oh, ow);
        for (o, &b) in bias.iter().enumerate() {
            out.plane_mut(o).fill(b);
        }
        gemm(self.out_ch, ckk, p, weight, (ckk, 1), &cols, (p, 1), 1.0, &mut out.data);
        (
            out,
            ConvCache {
                cols,
                in_h: x.height,
                in_w: x.width,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Accumulates weight and bias gradients into `dw`/`db`; returns the
    /// input gradient when asked for.
    pub fn backward(
        &self,
        cache: &ConvCache,
        weight: &[f64],
        d_out: &Grid,
        dw: &mut [f64],
        db: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Grid> {
        let p = cache.out_h * cache.out_w;
        let ckk = self.in_ch * self.kernel * self.kernel;
        assert_eq!(d_out.data.len(), self.out_ch * p);
        gemm(self.out_ch, p, ckk, &d_out.data, (p, 1), &cache.cols, (1, p), 1.0, dw);
        for (o, g) in db.iter_mut().enumerate() {
            *g += d_out.plane(o).iter().sum::<f64>();
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; ckk * p];
        gemm(ckk, self.out_ch, p, weight, (1, ckk), &d_out.data, (p, 1), 0.0, &mut dcols);
        Some(self.col2im(&dcols, cache))
    }
}

/// Zero mean and unit variance over the whole image (all channels
/// jointly). Near-constant images map to zero.
pub fn standardize(x: &Grid) -> Grid {
    let n = x.data.len().max(1) as f64;
    let mean = x.data.iter().sum::<f64>() / n;
    let var = x.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-3);
    x.map(|v| (v - mean) * inv)
}

pub fn relu(x: &Grid) -> Grid {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &Grid, d_out: &Grid) -> Grid {
    Grid {
        data: out
            .data
            .iter()
            .zip(&d_out.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect(),
        ..*d_out
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear(x: &Grid, out_h: usize, out_w: usize) -> Grid {
    let ty = bilinear_taps(x.height, out_h);
    let tx = bilinear_taps(x.width, out_w);
    let mut out = Grid::zeros(x.channels, out_h, out_w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let w = x.width;
        let dst = out.plane_mut(c);
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &src[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1])
                    + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(d_out: &Grid, in_h: usize, in_w: usize) -> Grid {
    let ty = bilinear_taps(in_h, d_out.height);
    let tx = bilinear_taps(in_w, d_out.width);
    let mut dx = Grid::zeros(d_out.channels, in_h, in_w);
    for c in 0..d_out.channels {
        let g = d_out.plane(c);
        let dst = dx.plane_mut(c);
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * d_out.width + ox];
                dst[a.i0 * in_w + b.i0] += a.w0 * b.w0 * v;
                dst[a.i0 * in_w + b.i1] += a.w0 * b.w1 * v;
                dst[a.i1 * in_w + b.i0] += a.w1 * b.w0 * v;
                dst[a.i1 * in_w + b.i1] += a.w1 * b.w1 * v;
            }
        }
    }
    dx
}

fn pool_bounds(n_in: usize, n_out: usize) -> Vec<(usize, usize)> {
    (0..n_out)
        .map(|o| ((o * n_in) / n_out, ((o + 1) * n_in).div_ceil(n_out)))
        .collect()
}

/// Adaptive average pooling to `out_h x out_w`.
pub fn area_pool(x: &Grid, out_h: usize, out_w: usize) -> Grid {
    let by = pool_bounds(x.height, out_h);
    let bx = pool_bounds(x.width, out_w);
    let mut out = Grid::zeros(x.channels, out_h, out_w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += src[y * x.width + xx];
                    }
                }
                dst[oy * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn area_pool_backward(d_out: &Grid, in_h: usize, in_w: usize) -> Grid {
    let by = pool_bounds(in_h, d_out.height);
    let bx = pool_bounds(in_w, d_out.width);
    let mut dx = Grid::zeros(d_out.channels, in_h, in_w);
    for c in 0..d_out.channels {
        let g = d_out.plane(c);
        let dst = dx.plane_mut(c);
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let v = g[oy * d_out.width + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * in_w + xx] += v;
                    }
                }
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Grid, b: &Grid) -> Grid {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Grid {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Grid {
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_naive(cv: &Conv2d, x: &Grid, w: &[f64], b: &[f64]) -> Grid {
        let (oh, ow) = cv.out_dims(x.height, x.width);
        let k = cv.kernel;
        let mut out = Grid::zeros(cv.out_ch, oh, ow);
        for o in 0..cv.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for c in 0..cv.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * cv.stride + ky) as isize - cv.pad as isize;
                                let ix = (ox * cv.stride + kx) as isize - cv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    s += w[((o * cv.in_ch + c) * k + ky) * k + kx]
                                        * x.get(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cv in [
            Conv2d { in_ch: 3, out_ch: 4, kernel: 3, stride: 2, pad: 1 },
            Conv2d { in_ch: 2, out_ch: 5, kernel: 3, stride: 1, pad: 1 },
            Conv2d { in_ch: 4, out_ch: 2, kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = rand_grid(cv.in_ch, 7, 6, &mut rng);
            let w: Vec<f64> = (0..cv.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cv.out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, _) = cv.forward(&x, &w, &b);
            assert!(out.max_abs_diff(&conv_naive(&cv, &x, &w, &b)) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cv = Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let x = rand_grid(2, 5, 6, &mut rng);
        let w: Vec<f64> = (0..cv.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, cache) = cv.forward(&x, &w, &b);
        let probe = rand_grid(out.channels, out.height, out.width, &mut rng);
        let loss = |x: &Grid, w: &[f64], b: &[f64]| -> f64 {
            let (o, _) = cv.forward(x, w, b);
            o.data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = cv.backward(&cache, &w, &probe, &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        let fd_b0 = {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[0] += h;
            bm[0] -= h;
            (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h)
        };
        assert!((fd_b0 - db[0]).abs() < 1e-7);
    }

    #[test]
    fn resize_and_pool_are_adjoint_to_their_backward() {
        // <R x, y> == <x, R^T y> for the linear resampling operators.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_grid(2, 4, 5, &mut rng);
        let y = rand_grid(2, 16, 20, &mut rng);
        let lhs: f64 = resize_bilinear(&x, 16, 20).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = resize_bilinear_backward(&y, 4, 5).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let lhs: f64 = area_pool(&y, 4, 5).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = area_pool_backward(&x, 16, 20).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_keeps_constants() {
        let x = Grid::filled(1, 4, 4, 2.5);
        assert!(resize_bilinear(&x, 16, 16).data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(area_pool(&resize_bilinear(&x, 16, 16), 4, 4).max_abs_diff(&x) < 1e-12);
    }
}
