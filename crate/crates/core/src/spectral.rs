//! Low-frequency amplitude swapping.
//!
//! The same primitive drives three things: perturbing segmentation logits to
//! synthesise pseudo-label noise for training the refinement network, the
//! ground-truth noise masks derived from those perturbations, and Fourier
//! style adaptation of source images toward the target domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{amp_phase, argmax_labels, fft2, ifft2, recompose, Grid, NoiseMask, IMAG_RESIDUE_LIMIT};

/// Centered binary mask over the shifted spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    pub height: usize,
    pub width: usize,
    pub epsilon: f64,
    pub data: Vec<bool>,
}

impl FreqMask {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Union of the mask with its reflection through the DC bin.
    ///
    /// Swapping amplitudes on a set that is closed under `k -> -k` keeps the
    /// spectrum of a real signal Hermitian, so the inverse stays real.
    pub fn symmetric_closure(&self) -> FreqMask {
        let (h, w) = (self.height, self.width);
        let (cy, cx) = (h / 2, w / 2);
        let mut data = self.data.clone();
        for y in 0..h {
            for x in 0..w {
                if self.get(y, x) {
                    let my = (2 * cy + h - y) % h;
                    let mx = (2 * cx + w - x) % w;
                    data[my * w + mx] = true;
                }
            }
        }
        FreqMask {
            data,
            ..self.clone()
        }
    }

    pub fn is_subset_of(&self, other: &FreqMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

fn window(n: usize, half: usize) -> (usize, usize) {
    let c = n / 2;
    let lo = c.saturating_sub(half);
    let hi = (c + half.max(1)).min(n);
    (lo, hi)
}

/// Ones on the half-open window `[c - floor(eps*n), c + floor(eps*n))` along
/// each axis around the DC bin `c = n / 2`; a zero half-extent keeps DC only.
pub fn low_freq_mask(height: usize, width: usize, eps: f64) -> Result<FreqMask> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("mask epsilon {eps} outside [0, 1)")));
    }
    let (y0, y1) = window(height, (eps * height as f64).floor() as usize);
    let (x0, x1) = window(width, (eps * width as f64).floor() as usize);
    let mut data = vec![false; height * width];
    for y in y0..y1 {
        for x in x0..x1 {
            data[y * width + x] = true;
        }
    }
    Ok(FreqMask {
        height,
        width,
        epsilon: eps,
        data,
    })
}

/// Range from which a fresh perturbation strength is drawn per image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub eps_min: f64,
    pub eps_max: f64,
    pub rng_seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            eps_min: 0.05,
            eps_max: 0.2,
            rng_seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps_min && self.eps_min <= self.eps_max && self.eps_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation range [{}, {}] must satisfy 0 <= min <= max < 1",
                self.eps_min, self.eps_max
            )));
        }
        Ok(())
    }

    pub fn sample_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.eps_max > self.eps_min {
            rng.gen_range(self.eps_min..self.eps_max)
        } else {
            self.eps_min
        }
    }
}

/// Keeps the phase of `base` everywhere and takes the amplitude of `donor`
/// inside the (symmetrised) low-frequency mask, per channel.
pub fn amplitude_swap(base: &Grid, donor: &Grid, eps: f64) -> Result<crate::numerics::Inverse> {
    base.check_same(donor, "amplitude_swap")?;
    let mask = low_freq_mask(base.height, base.width, eps)?.symmetric_closure();
    let sb = fft2(base)?;
    let sd = fft2(donor)?;
    let (mut amp, phase) = amp_phase(&sb);
    let (amp_d, _) = amp_phase(&sd);
    let n = base.plane_len();
    for c in 0..base.channels {
        for (p, &inside) in mask.data.iter().enumerate() {
            if inside {
                amp.data[c * n + p] = amp_d.data[c * n + p];
            }
        }
    }
    Ok(ifft2(&recompose(&amp, &phase)?))
}

fn checked_swap(base: &Grid, donor: &Grid, eps: f64) -> Result<Grid> {
    let inv = amplitude_swap(base, donor, eps)?;
    if inv.imag_residue > IMAG_RESIDUE_LIMIT {
        return Err(Error::NonFinite(format!(
            "amplitude swap left imaginary residue {:.3e}",
            inv.imag_residue
        )));
    }
    Ok(inv.grid)
}

/// Logit perturbation: low-frequency amplitude of `l_other`, everything else
/// (including all phase) from `l_self`.
pub fn perturb_logits(l_self: &Grid, l_other: &Grid, eps: f64) -> Result<Grid> {
    checked_swap(l_self, l_other, eps)
}

/// 1 wherever the argmax label of the perturbed logits differs from the
/// original.
pub fn make_noise_mask_gt(l_orig: &Grid, l_pert: &Grid) -> Result<NoiseMask> {
    l_orig.check_same(l_pert, "make_noise_mask_gt")?;
    let a = argmax_labels(l_orig);
    let b = argmax_labels(l_pert);
    Ok(NoiseMask {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x != y).collect(),
    })
}

/// Gives a source image the low-frequency amplitude (style) of a target
/// image while keeping its own phase; output clamped to `[0, 1]`.
pub fn fda_image(x_src: &Grid, x_tgt: &Grid, eps: f64) -> Result<Grid> {
    x_src.check_same(x_tgt, "fda_image")?;
    if x_src.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "fda_image expects 3 channels, got {}",
            x_src.channels
        )));
    }
    Ok(checked_swap(x_src, x_tgt, eps)?.map(|v| v.clamp(0.0, 1.0)))
}
