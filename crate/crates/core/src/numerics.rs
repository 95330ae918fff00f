//! Dense grid math shared by every other module: channel-major grids, the
//! centered 2D FFT, polar decomposition, and per-pixel softmax/argmax.
//!
//! Everything here is a pure function of its inputs.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Imaginary residue above this after an inverse transform means the
/// spectrum handed to [`ifft2`] was not Hermitian.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-4;

/// A `channels x height x width` grid of reals stored channel-major,
/// row-major within each channel. Carries images, logits and feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Grid::from_vec",
                format!("{} values for {channels}x{height}x{width}", channels * height * width),
                data.len(),
            ));
        }
        Ok(Grid {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: element {i} is {}", self.data[i]))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_same(&self, other: &Grid, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ))
        }
    }

    /// Per-pixel values across channels.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }
}

/// Per-pixel class indices in `0..K`, or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("LabelMap::from_vec", height * width, data.len()));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rejects any value that is neither a class below `k` nor [`IGNORE`].
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= k) {
            None => Ok(()),
            Some(v) => Err(Error::InvalidArgument(format!("label {v} out of range for K={k}"))),
        }
    }
}

/// Binary per-pixel noise mask; `true` marks a pixel whose label is noisy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl NoiseMask {
    pub fn clean(height: usize, width: usize) -> Self {
        NoiseMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("NoiseMask::from_vec", height * width, data.len()));
        }
        Ok(NoiseMask {
            height,
            width,
            data,
        })
    }

    /// Thresholds pre-sigmoid noise logits at probability 0.5.
    pub fn from_logits(noise_logits: &Grid) -> Self {
        NoiseMask {
            height: noise_logits.height,
            width: noise_logits.width,
            data: noise_logits.plane(0).iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn count_noisy(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_noisy() as f64 / self.data.len() as f64
        }
    }
}

/// Complex spectrum of a [`Grid`], stored with the DC bin of every channel
/// at `(height / 2, width / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let n = channels * height * width;
        Spectrum {
            channels,
            height,
            width,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn dc_index(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn max_abs_diff(&self, other: &Spectrum) -> f64 {
        self.re
            .iter()
            .zip(&other.re)
            .chain(self.im.iter().zip(&other.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Result of an inverse transform: the real part plus the largest absolute
/// imaginary component that was dropped.
#[derive(Clone, Debug)]
pub struct Inverse {
    pub grid: Grid,
    pub imag_residue: f64,
}

fn transform_plane(planner: &mut FftPlanner<f64>, buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Per-channel 2D DFT with the zero-frequency bin moved to the centre.
pub fn fft2(g: &Grid) -> Result<Spectrum> {
    if g.height == 0 || g.width == 0 {
        return Err(Error::InvalidInput("fft2 on an empty grid".into()));
    }
    g.ensure_finite("fft2 input").map_err(|e| Error::InvalidInput(e.to_string()))?;
    let (h, w) = (g.height, g.width);
    let (sh, sw) = (h / 2, w / 2);
    let mut out = Spectrum::zeros(g.channels, h, w);
    let mut planner = FftPlanner::new();
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for c in 0..g.channels {
        for (b, &v) in buf.iter_mut().zip(g.plane(c)) {
            *b = Complex64::new(v, 0.0);
        }
        transform_plane(&mut planner, &mut buf, h, w, false);
        for y in 0..h {
            for x in 0..w {
                let o = out.idx(c, (y + sh) % h, (x + sw) % w);
                let v = buf[y * w + x];
                out.re[o] = v.re;
                out.im[o] = v.im;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`fft2`]; returns the real part and the dropped imaginary residue.
pub fn ifft2(s: &Spectrum) -> Inverse {
    let (h, w) = (s.height, s.width);
    let (sh, sw) = (h / 2, w / 2);
    let norm = 1.0 / (h * w) as f64;
    let mut grid = Grid::zeros(s.channels, h, w);
    let mut residue = 0.0f64;
    let mut planner = FftPlanner::new();
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for c in 0..s.channels {
        for y in 0..h {
            for x in 0..w {
                let i = s.idx(c, (y + sh) % h, (x + sw) % w);
                buf[y * w + x] = Complex64::new(s.re[i], s.im[i]);
            }
        }
        transform_plane(&mut planner, &mut buf, h, w, true);
        for (dst, v) in grid.plane_mut(c).iter_mut().zip(&buf) {
            *dst = v.re * norm;
            residue = residue.max((v.im * norm).abs());
        }
    }
    if residue > IMAG_RESIDUE_LIMIT {
        log::warn!("ifft2: imaginary residue {residue:.3e} exceeds {IMAG_RESIDUE_LIMIT:.0e}");
    }
    Inverse {
        grid,
        imag_residue: residue,
    }
}

/// Polar decomposition of a spectrum. A bin with zero magnitude gets phase 0.
pub fn amp_phase(s: &Spectrum) -> (Grid, Grid) {
    let mut amp = Grid::zeros(s.channels, s.height, s.width);
    let mut phase = Grid::zeros(s.channels, s.height, s.width);
    for i in 0..s.re.len() {
        let (re, im) = (s.re[i], s.im[i]);
        let a = re.hypot(im);
        amp.data[i] = a;
        phase.data[i] = if a == 0.0 { 0.0 } else { im.atan2(re) };
    }
    (amp, phase)
}

/// Inverse of [`amp_phase`].
pub fn recompose(amp: &Grid, phase: &Grid) -> Result<Spectrum> {
    amp.check_same(phase, "recompose")?;
    let mut s = Spectrum::zeros(amp.channels, amp.height, amp.width);
    for i in 0..amp.data.len() {
        let (sin, cos) = phase.data[i].sin_cos();
        s.re[i] = amp.data[i] * cos;
        s.im[i] = amp.data[i] * sin;
    }
    Ok(s)
}

/// Per-pixel softmax across channels, max-subtracted.
pub fn softmax_channels(l: &Grid) -> Result<Grid> {
    if l.channels < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 channels, got {}",
            l.channels
        )));
    }
    let n = l.plane_len();
    let k = l.channels;
    let mut out = Grid::zeros(k, l.height, l.width);
    for p in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(l.data[c * n + p]);
        }
        let mut z = 0.0;
        for c in 0..k {
            let e = (l.data[c * n + p] - m).exp();
            out.data[c * n + p] = e;
            z += e;
        }
        for c in 0..k {
            out.data[c * n + p] /= z;
        }
    }
    Ok(out)
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
pub fn argmax_labels(l: &Grid) -> LabelMap {
    let n = l.plane_len();
    let mut data = vec![0u8; n];
    for (p, out) in data.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = l.data[p];
        for c in 1..l.channels {
            let v = l.data[c * n + p];
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        *out = best as u8;
    }
    LabelMap {
        height: l.height,
        width: l.width,
        data,
    }
}

/// Per-pixel maximum over channels.
pub fn max_channel(l: &Grid) -> Vec<f64> {
    let n = l.plane_len();
    (0..n)
        .map(|p| (0..l.channels).map(|c| l.data[c * n + p]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(c: usize, h: usize, w: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct O(N^2) DFT of one plane, unshifted.
    fn direct_dft(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += plane[y * w + x] * ang.cos();
                        im += plane[y * w + x] * ang.sin();
                    }
                }
                out[u * w + v] = (re, im);
            }
        }
        out
    }

    #[test]
    fn constant_grid_has_energy_only_at_dc() {
        let g = Grid::filled(1, 8, 8, 1.0);
        let s = fft2(&g).unwrap();
        let (amp, _) = amp_phase(&s);
        let (dy, dx) = s.dc_index();
        assert_eq!((dy, dx), (4, 4));
        for y in 0..8 {
            for x in 0..8 {
                let a = amp.get(0, y, x);
                if (y, x) == (dy, dx) {
                    assert!((a - 64.0).abs() < 1e-12);
                } else {
                    assert!(a < 1e-12, "bin ({y},{x}) = {a}");
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_amplitude() {
        let mut g = Grid::zeros(1, 8, 6);
        g.set(0, 0, 0, 1.0);
        let (amp, _) = amp_phase(&fft2(&g).unwrap());
        assert!(amp.data.iter().all(|&a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn matches_direct_dft_after_shift() {
        for &(h, w) in &[(4, 4), (5, 3), (6, 7)] {
            let g = random_grid(1, h, w, 3);
            let s = fft2(&g).unwrap();
            let oracle = direct_dft(g.plane(0), h, w);
            for u in 0..h {
                for v in 0..w {
                    let i = s.idx(0, (u + h / 2) % h, (v + w / 2) % w);
                    assert!((s.re[i] - oracle[u * w + v].0).abs() < 1e-10);
                    assert!((s.im[i] - oracle[u * w + v].1).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn roundtrip_random_16x16() {
        let g = random_grid(3, 16, 16, 11);
        let inv = ifft2(&fft2(&g).unwrap());
        assert!(inv.grid.max_abs_diff(&g) < 1e-6);
        assert!(inv.imag_residue < 1e-12);
    }

    #[test]
    fn parseval_energy() {
        let g = random_grid(2, 12, 10, 5);
        let s = fft2(&g).unwrap();
        let e_space: f64 = g.data.iter().map(|v| v * v).sum();
        let e_freq: f64 =
            s.re.iter().zip(&s.im).map(|(a, b)| a * a + b * b).sum::<f64>() / (12.0 * 10.0);
        assert!(((e_space - e_freq) / e_space).abs() < 1e-6);
    }

    #[test]
    fn zero_spectrum_gives_zero_grid() {
        let inv = ifft2(&Spectrum::zeros(2, 4, 4));
        assert!(inv.grid.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_dc_shifts_mean_by_direct_sum() {
        let g = random_grid(1, 4, 4, 9);
        let mut s = fft2(&g).unwrap();
        let i = s.idx(0, 2, 2);
        // DC is the plain sum of the samples.
        let dc: f64 = g.data.iter().sum();
        assert!((s.re[i] - dc).abs() < 1e-12);
        s.re[i] *= 2.0;
        s.im[i] *= 2.0;
        let out = ifft2(&s).grid;
        for (o, v) in out.data.iter().zip(&g.data) {
            assert!((o - (v + dc / 16.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut g = Grid::zeros(1, 4, 4);
        g.data[3] = f64::NAN;
        assert!(matches!(fft2(&g), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn amp_phase_pythagorean_and_zero_bin() {
        let mut s = Spectrum::zeros(1, 2, 2);
        s.re[0] = 3.0;
        s.im[0] = 4.0;
        let (amp, phase) = amp_phase(&s);
        assert_eq!(amp.data[0], 5.0);
        assert!((phase.data[0] - 4f64.atan2(3.0)).abs() < 1e-15);
        assert_eq!(amp.data[1], 0.0);
        assert_eq!(phase.data[1], 0.0);
    }

    #[test]
    fn softmax_examples() {
        let l = Grid::from_vec(2, 1, 2, vec![0.0, 1000.0, 0.0, 0.0]).unwrap();
        let p = softmax_channels(&l).unwrap();
        assert_eq!(p.data, vec![0.5, 1.0, 0.5, 0.0]);

        let l = Grid::from_vec(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax_channels(&l).unwrap();
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, &v) in p.data.iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert!((p.data[0] - 0.0900).abs() < 1e-4);
        assert!((p.data[1] - 0.2447).abs() < 1e-4);
        assert!((p.data[2] - 0.6652).abs() < 1e-4);

        assert!(softmax_channels(&Grid::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn argmax_ties_and_one_hot() {
        let l = Grid::filled(4, 3, 3, 0.7);
        assert!(argmax_labels(&l).data.iter().all(|&v| v == 0));

        let mut l = Grid::zeros(3, 2, 2);
        let truth = [2u8, 0, 1, 2];
        for (p, &t) in truth.iter().enumerate() {
            l.data[t as usize * 4 + p] = 1.0;
        }
        assert_eq!(argmax_labels(&l).data, truth);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let l = random_grid(4, 8, 8, 21);
        let labels = argmax_labels(&l);
        for y in 0..8 {
            for x in 0..8 {
                let px = l.pixel(y, x);
                let mut best = 0;
                for k in 0..4 {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                assert_eq!(labels.get(y, x) as usize, best);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid_strategy() -> impl Strategy<Value = Grid> {
            (1usize..3, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
                proptest::collection::vec(-10.0f64..10.0, c * h * w)
                    .prop_map(move |d| Grid::from_vec(c, h, w, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn fft_roundtrip(g in grid_strategy()) {
                let back = ifft2(&fft2(&g).unwrap()).grid;
                prop_assert!(back.max_abs_diff(&g) < 1e-6);
            }

            #[test]
            fn polar_roundtrip(g in grid_strategy()) {
                let s = fft2(&g).unwrap();
                let (a, p) = amp_phase(&s);
                prop_assert!(a.data.iter().all(|&v| v >= 0.0));
                prop_assert!(recompose(&a, &p).unwrap().max_abs_diff(&s) < 1e-6);
            }

            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                d in proptest::collection::vec(-50.0f64..50.0, 3 * 16),
                shift in -100.0f64..100.0,
            ) {
                let l = Grid::from_vec(3, 4, 4, d).unwrap();
                let p = softmax_channels(&l).unwrap();
                for px in 0..16 {
                    let s: f64 = (0..3).map(|c| p.data[c * 16 + px]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
                let shifted = l.map(|v| v + shift);
                prop_assert_eq!(argmax_labels(&softmax_channels(&shifted).unwrap()), argmax_labels(&p));
            }

            #[test]
            fn argmax_invariant_under_monotone_map(d in proptest::collection::vec(-5.0f64..5.0, 4 * 9)) {
                let l = Grid::from_vec(4, 3, 3, d).unwrap();
                let t = l.map(|v| (2.0 * v).exp() + v.powi(3));
                prop_assert_eq!(argmax_labels(&t), argmax_labels(&l));
            }
        }
    }
}
