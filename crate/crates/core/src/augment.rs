//! Target-stream augmentations. None of them move pixels, so label maps stay
//! aligned with their images.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grid, LabelMap, NoiseMask, IGNORE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
    pub jitter_prob: f64,
    /// In pixels. The default is sized for 64-pixel images; wider kernels
    /// erase the class textures of the synthetic benchmark.
    pub blur_sigma_range: (f64, f64),
    pub blur_prob: f64,
    /// Fraction of source classes pasted by ClassMix (rounded up).
    pub classmix_fraction: f64,
    pub rng_seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            jitter_strength: 0.2,
            jitter_prob: 0.5,
            blur_sigma_range: (0.1, 0.5),
            blur_prob: 0.5,
            classmix_fraction: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blur_sigma_range;
        let ok = self.jitter_strength >= 0.0
            && (0.0..=1.0).contains(&self.jitter_prob)
            && (0.0..=1.0).contains(&self.blur_prob)
            && lo >= 0.0
            && hi >= lo
            && (0.0..=1.0).contains(&self.classmix_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings: {self:?}")))
        }
    }
}

fn clamp01(g: &mut Grid) {
    g.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn adjust_brightness(x: &Grid, factor: f64) -> Grid {
    let mut out = x.map(|v| v * factor);
    clamp01(&mut out);
    out
}

/// Blends every value toward the image mean.
pub fn adjust_contrast(x: &Grid, factor: f64) -> Grid {
    let mean = if x.data.is_empty() {
        0.0
    } else {
        x.data.iter().sum::<f64>() / x.data.len() as f64
    };
    let mut out = x.map(|v| mean + factor * (v - mean));
    clamp01(&mut out);
    out
}

/// Blends each RGB pixel toward its luma. Other channel counts pass through.
pub fn adjust_saturation(x: &Grid, factor: f64) -> Grid {
    if x.channels != 3 {
        return x.clone();
    }
    let n = x.plane_len();
    let mut out = x.clone();
    for p in 0..n {
        let (r, g, b) = (x.data[p], x.data[n + p], x.data[2 * n + p]);
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        for c in 0..3 {
            let v = x.data[c * n + p];
            out.data[c * n + p] = (luma + factor * (v - luma)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Random brightness, contrast and saturation scaling within
/// `±jitter_strength`, applied in that order.
pub fn color_jitter<R: Rng + ?Sized>(x: &Grid, cfg: &AugConfig, rng: &mut R) -> Grid {
    let s = cfg.jitter_strength;
    if s == 0.0 {
        return x.clone();
    }
    let mut draw = || rng.gen_range(1.0 - s..=1.0 + s).max(0.0);
    let (b, c, sat) = (draw(), draw(), draw());
    let out = adjust_brightness(x, b);
    let out = adjust_contrast(&out, c);
    adjust_saturation(&out, sat)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflect padding, radius `ceil(3 sigma)`.
pub fn gaussian_blur(x: &Grid, sigma: f64) -> Result<Grid> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (x.height, x.width);
    let mut tmp = Grid::zeros(x.channels, h, w);
    let mut out = Grid::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let t = tmp.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * src[y * w + reflect(xx as isize + j as isize - r, w)];
                }
                t[y * w + xx] = acc;
            }
        }
        let t = tmp.plane(c);
        let o = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * t[reflect(y as isize + j as isize - r, h) * w + xx];
                }
                o[y * w + xx] = acc;
            }
        }
    }
    clamp01(&mut out);
    Ok(out)
}

/// Jitter and blur, each applied with its configured probability.
pub fn photometric<R: Rng + ?Sized>(x: &Grid, cfg: &AugConfig, rng: &mut R) -> Result<Grid> {
    let mut out = x.clone();
    if rng.gen_bool(cfg.jitter_prob) {
        out = color_jitter(&out, cfg, rng);
    }
    if rng.gen_bool(cfg.blur_prob) {
        let (lo, hi) = cfg.blur_sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out)
}

/// Result of a mixing operation. `weights` is the per-pixel loss weight and
/// `from_source` marks pixels taken from the source pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub image: Grid,
    pub labels: LabelMap,
    pub weights: Vec<f64>,
    pub from_source: Vec<bool>,
}

fn check_pair(img: &Grid, lbl: &LabelMap, ctx: &'static str) -> Result<()> {
    if (img.height, img.width) != (lbl.height, lbl.width) {
        return Err(Error::shape(ctx, format!("{:?}", (img.height, img.width)), format!("{:?}", (lbl.height, lbl.width))));
    }
    Ok(())
}

fn select(src: (&Grid, &LabelMap), tgt: (&Grid, &LabelMap), take: &[bool], tgt_weights: &[f64]) -> Result<Mixed> {
    check_pair(src.0, src.1, "mix source")?;
    check_pair(tgt.0, tgt.1, "mix target")?;
    if src.0.shape() != tgt.0.shape() {
        return Err(Error::shape("mix images", format!("{:?}", tgt.0.shape()), format!("{:?}", src.0.shape())));
    }
    let n = tgt.1.len();
    if take.len() != n || tgt_weights.len() != n {
        return Err(Error::shape("mix mask/weights", n, format!("{:?}", (take.len(), tgt_weights.len()))));
    }
    let mut image = tgt.0.clone();
    let mut labels = tgt.1.clone();
    let mut weights = tgt_weights.to_vec();
    for p in (0..n).filter(|&p| take[p]) {
        for c in 0..image.channels {
            image.data[c * n + p] = src.0.data[c * n + p];
        }
        labels.data[p] = src.1.data[p];
        weights[p] = 1.0;
    }
    Ok(Mixed {
        image,
        labels,
        weights,
        from_source: take.to_vec(),
    })
}

/// Classes present in a label map, ascending, without `IGNORE`.
pub fn classes_present(y: &LabelMap) -> Vec<u8> {
    let mut seen = [false; 256];
    y.data.iter().for_each(|&v| seen[v as usize] = true);
    (0..255u8).filter(|&c| seen[c as usize] && c != IGNORE).collect()
}

/// Pastes the source pixels of `classes` over the target pair.
pub fn classmix_with_classes(
    src: (&Grid, &LabelMap),
    tgt: (&Grid, &LabelMap),
    tgt_weights: &[f64],
    classes: &[u8],
) -> Result<Mixed> {
    let take: Vec<bool> = src.1.data.iter().map(|v| classes.contains(v)).collect();
    select(src, tgt, &take, tgt_weights)
}

/// ClassMix with `ceil(fraction * n)` of the `n` source classes drawn at
/// random. Pasted pixels get weight 1; the rest keep `tgt_weights`.
pub fn classmix<R: Rng + ?Sized>(
    src: (&Grid, &LabelMap),
    tgt: (&Grid, &LabelMap),
    tgt_weights: &[f64],
    fraction: f64,
    rng: &mut R,
) -> Result<Mixed> {
    let mut classes = classes_present(src.1);
    let pick = (fraction * classes.len() as f64).ceil() as usize;
    classes.shuffle(rng);
    classes.truncate(pick);
    classmix_with_classes(src, tgt, tgt_weights, &classes)
}

/// Pixels the noise mask flags take the source image values and GT labels.
pub fn mask_guided_mix(
    tgt: (&Grid, &LabelMap),
    m: &NoiseMask,
    src: (&Grid, &LabelMap),
) -> Result<(Grid, LabelMap)> {
    if (m.height, m.width) != (tgt.1.height, tgt.1.width) {
        return Err(Error::shape("mask_guided_mix mask", format!("{:?}", (tgt.1.height, tgt.1.width)), format!("{:?}", (m.height, m.width))));
    }
    let mixed = select(src, tgt, &m.data, &vec![0.0; m.data.len()])?;
    Ok((mixed.image, mixed.labels))
}
