//! Pixel-to-pixel contrastive loss on encoder features.
//!
//! Pixels of the same class are pulled together and pixels of other classes
//! pushed apart, with similarity `exp(cos(f_a, f_b) / temperature)`. Source
//! pixels use ground-truth labels; target pixels use refined pseudo-labels
//! and are skipped wherever the noise mask flags them.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grid, LabelMap, NoiseMask, IGNORE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub anchors_per_class: usize,
    pub max_positives: usize,
    pub max_negatives: usize,
    pub rng_seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.1,
            anchors_per_class: 16,
            max_positives: 128,
            max_negatives: 128,
            rng_seed: 0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "contrastive temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-pixel feature vectors from one or more feature maps, indexed
/// image-major then pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub vectors: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

impl FeatureBank {
    pub fn from_grids(grids: &[&Grid]) -> Result<Self> {
        let dim = grids.first().map_or(0, |g| g.channels);
        let mut vectors = Vec::new();
        let mut shapes = Vec::new();
        for g in grids {
            if g.channels != dim {
                return Err(Error::shape("FeatureBank", dim, g.channels));
            }
            let n = g.plane_len();
            for p in 0..n {
                for c in 0..dim {
                    vectors.push(g.data[c * n + p]);
                }
            }
            shapes.push((g.height, g.width));
        }
        Ok(FeatureBank { dim, vectors, shapes })
    }

    pub fn from_vectors(dim: usize, vectors: Vec<f64>) -> Self {
        let n = vectors.len().checked_div(dim).unwrap_or(0);
        FeatureBank {
            dim,
            vectors,
            shapes: vec![(1, n)],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Splits a bank-layout gradient back into one grid per source map.
    pub fn split_grad(&self, grad: &[f64]) -> Vec<Grid> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut base = 0;
        for &(h, w) in &self.shapes {
            let n = h * w;
            let mut g = Grid::zeros(self.dim, h, w);
            for p in 0..n {
                for c in 0..self.dim {
                    g.data[c * n + p] = grad[(base + p) * self.dim + c];
                }
            }
            base += n;
            out.push(g);
        }
        out
    }
}

/// Majority vote of labels inside each cell of an `out_h x out_w` grid.
/// Ignored pixels do not vote; ties and empty cells become `IGNORE`.
pub fn downsample_labels(y: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let mut data = vec![IGNORE; out_h * out_w];
    let mut counts = [0usize; 256];
    for oy in 0..out_h {
        let (y0, y1) = (oy * y.height / out_h, ((oy + 1) * y.height).div_ceil(out_h));
        for ox in 0..out_w {
            let (x0, x1) = (ox * y.width / out_w, ((ox + 1) * y.width).div_ceil(out_w));
            counts.iter_mut().for_each(|c| *c = 0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let v = y.get(yy, xx);
                    if v != IGNORE {
                        counts[v as usize] += 1;
                    }
                }
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            if best > 0 && counts.iter().filter(|&&c| c == best).count() == 1 {
                data[oy * out_w + ox] = counts.iter().position(|&c| c == best).unwrap() as u8;
            }
        }
    }
    LabelMap {
        height: out_h,
        width: out_w,
        data,
    }
}

/// A cell is noisy when at least half of its pixels are.
pub fn downsample_mask(m: &NoiseMask, out_h: usize, out_w: usize) -> NoiseMask {
    let mut data = vec![false; out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1) = (oy * m.height / out_h, ((oy + 1) * m.height).div_ceil(out_h));
        for ox in 0..out_w {
            let (x0, x1) = (ox * m.width / out_w, ((ox + 1) * m.width).div_ceil(out_w));
            let mut noisy = 0;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    noisy += m.data[yy * m.width + xx] as usize;
                }
            }
            data[oy * out_w + ox] = 2 * noisy >= (y1 - y0) * (x1 - x0);
        }
    }
    NoiseMask {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Anchors with their positive and negative pixel lists (bank indices,
/// sorted ascending).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelPairSet {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PixelPairSet {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn sample_sorted<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], cap: usize) -> Vec<usize> {
    let mut v: Vec<usize> = if pool.len() <= cap {
        pool.to_vec()
    } else {
        sample(rng, pool.len(), cap).into_iter().map(|i| pool[i]).collect()
    };
    v.sort_unstable();
    v
}

/// Samples anchors per class from per-index labels (`IGNORE` = unusable).
pub fn sample_pairs_from_labels<R: Rng + ?Sized>(labels: &[u8], cfg: &ContrastConfig, rng: &mut R) -> PixelPairSet {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &l) in labels.iter().enumerate() {
        if l != IGNORE {
            by_class[l as usize].push(i);
        }
    }
    let mut set = PixelPairSet::default();
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < 2 {
            continue;
        }
        let others: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l != IGNORE && l as usize != class)
            .map(|(i, _)| i)
            .collect();
        for a in sample_sorted(rng, pool, cfg.anchors_per_class) {
            if others.is_empty() {
                continue;
            }
            let pos_pool: Vec<usize> = pool.iter().copied().filter(|&i| i != a).collect();
            let positives = sample_sorted(rng, &pos_pool, cfg.max_positives);
            let negatives = sample_sorted(rng, &others, cfg.max_negatives);
            set.anchors.push(a);
            set.positives.push(positives);
            set.negatives.push(negatives);
        }
    }
    set
}

/// Builds pairs over a source feature map followed by a target feature map.
/// Labels are majority-voted down to the feature grid; target cells the noise
/// mask flags are excluded. Pairs may span both images.
pub fn sample_pairs<R: Rng + ?Sized>(
    src_features: &Grid,
    tgt_features: &Grid,
    src_labels: &LabelMap,
    tgt_labels: &LabelMap,
    tgt_mask: Option<&NoiseMask>,
    cfg: &ContrastConfig,
    rng: &mut R,
) -> Result<(FeatureBank, PixelPairSet)> {
    cfg.validate()?;
    let bank = FeatureBank::from_grids(&[src_features, tgt_features])?;
    let ys = downsample_labels(src_labels, src_features.height, src_features.width);
    let mut yt = downsample_labels(tgt_labels, tgt_features.height, tgt_features.width);
    if let Some(m) = tgt_mask {
        let md = downsample_mask(m, tgt_features.height, tgt_features.width);
        for (l, &noisy) in yt.data.iter_mut().zip(&md.data) {
            if noisy {
                *l = IGNORE;
            }
        }
    }
    let labels: Vec<u8> = ys.data.iter().chain(&yt.data).copied().collect();
    Ok((bank, sample_pairs_from_labels(&labels, cfg, rng)))
}

/// Loss value, gradient in bank layout, and whether any anchor took part.
#[derive(Clone, Debug)]
pub struct ContrastOutput {
    pub value: f64,
    pub grad: Vec<f64>,
    pub empty: bool,
}

const NORM_EPS: f64 = 1e-12;

fn normalise(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = n.max(NORM_EPS);
    (v.iter().map(|x| x / d).collect(), n)
}

/// Mean over anchors of
/// `-(1/|P|) sum_p log(s(a,p) / (s(a,p) + sum_n s(a,n)))`,
/// `s(a,b) = exp(cos(f_a, f_b) / temperature)`.
pub fn contrastive_loss(pairs: &PixelPairSet, bank: &FeatureBank, temperature: f64) -> Result<ContrastOutput> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let mut grad = vec![0.0; bank.vectors.len()];
    if pairs.is_empty() {
        return Ok(ContrastOutput {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let dim = bank.dim;
    let units: Vec<(Vec<f64>, f64)> = (0..bank.len()).map(|i| normalise(bank.vector(i))).collect();
    let cos = |i: usize, j: usize| -> f64 { units[i].0.iter().zip(&units[j].0).map(|(a, b)| a * b).sum() };
    // d(cos)/d(f_i) = (u_j - cos * u_i) / |f_i|, or u_j / eps below the clamp.
    let push_cos_grad = |grad: &mut [f64], i: usize, j: usize, c: f64, g: f64| {
        let (ui, ni) = (&units[i].0, units[i].1);
        let uj = &units[j].0;
        let dst = &mut grad[i * dim..(i + 1) * dim];
        if ni > NORM_EPS {
            for d in 0..dim {
                dst[d] += g * (uj[d] - c * ui[d]) / ni;
            }
        } else {
            for d in 0..dim {
                dst[d] += g * uj[d] / NORM_EPS;
            }
        }
    };
    let inv_t = 1.0 / temperature;
    let n_anchors = pairs.anchors.len() as f64;
    let mut total = 0.0;
    for (ai, &a) in pairs.anchors.iter().enumerate() {
        let mut pos = pairs.positives[ai].clone();
        let mut neg = pairs.negatives[ai].clone();
        pos.sort_unstable();
        neg.sort_unstable();
        if pos.is_empty() {
            continue;
        }
        let c_neg: Vec<f64> = neg.iter().map(|&n| cos(a, n)).collect();
        let e_neg: Vec<f64> = c_neg.iter().map(|c| (c * inv_t).exp()).collect();
        let s_neg: f64 = e_neg.iter().sum();
        let wp = 1.0 / pos.len() as f64;
        let mut term = 0.0;
        let mut g_neg = vec![0.0; neg.len()];
        for &p in &pos {
            let c = cos(a, p);
            let e = (c * inv_t).exp();
            let denom = e + s_neg;
            term -= wp * (e / denom).ln();
            // dL/dc_ap and dL/dc_an for this positive, already divided by the anchor count.
            let g_p = -wp * inv_t * (1.0 - e / denom) / n_anchors;
            push_cos_grad(&mut grad, a, p, c, g_p);
            push_cos_grad(&mut grad, p, a, c, g_p);
            for (k, en) in e_neg.iter().enumerate() {
                g_neg[k] += wp * inv_t * en / denom / n_anchors;
            }
        }
        for (k, &n) in neg.iter().enumerate() {
            push_cos_grad(&mut grad, a, n, c_neg[k], g_neg[k]);
            push_cos_grad(&mut grad, n, a, c_neg[k], g_neg[k]);
        }
        total += term;
    }
    Ok(ContrastOutput {
        value: total / n_anchors,
        grad,
        empty: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_anchor(pos: Vec<usize>, neg: Vec<usize>) -> PixelPairSet {
        PixelPairSet {
            anchors: vec![0],
            positives: vec![pos],
            negatives: vec![neg],
        }
    }

    #[test]
    fn no_negatives_gives_zero() {
        let bank = FeatureBank::from_vectors(2, vec![1.0, 0.0, 0.3, 0.7]);
        let out = contrastive_loss(&one_anchor(vec![1], vec![]), &bank, 0.1).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn one_orthogonal_negative_at_unit_temperature() {
        let bank = FeatureBank::from_vectors(2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let out = contrastive_loss(&one_anchor(vec![1], vec![2]), &bank, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn moving_negative_away_lowers_loss() {
        let near = FeatureBank::from_vectors(2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let far = FeatureBank::from_vectors(2, vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        let pairs = one_anchor(vec![1], vec![2]);
        let a = contrastive_loss(&pairs, &near, 0.5).unwrap().value;
        let b = contrastive_loss(&pairs, &far, 0.5).unwrap().value;
        assert!(b < a);
        assert!(b > 0.0);
    }

    #[test]
    fn empty_pairs_flagged() {
        let bank = FeatureBank::from_vectors(2, vec![1.0, 0.0]);
        let out = contrastive_loss(&PixelPairSet::default(), &bank, 0.1).unwrap();
        assert!(out.empty);
        assert_eq!(out.value, 0.0);
        assert!(contrastive_loss(&PixelPairSet::default(), &bank, 0.0).is_err());
    }

    #[test]
    fn downsample_majority_and_ties() {
        let y = LabelMap::from_vec(2, 4, vec![1, 1, 2, 3, 1, 2, 2, 3]).unwrap();
        let d = downsample_labels(&y, 1, 2);
        assert_eq!(d.data, vec![1, IGNORE]);
        let m = NoiseMask::from_vec(2, 4, vec![true, true, false, false, false, false, false, true]).unwrap();
        assert_eq!(downsample_mask(&m, 1, 2).data, vec![true, false]);
    }

    #[test]
    fn single_class_drops_all_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = sample_pairs_from_labels(&[3u8; 20], &ContrastConfig::default(), &mut rng);
        assert!(set.is_empty());
    }

    #[test]
    fn half_half_gives_full_lists_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<u8> = (0..40).map(|i| (i >= 20) as u8).collect();
        let set = sample_pairs_from_labels(&labels, &ContrastConfig::default(), &mut rng);
        assert_eq!(set.anchors.len(), 32);
        for (i, &a) in set.anchors.iter().enumerate() {
            assert!(!set.positives[i].is_empty() && !set.negatives[i].is_empty());
            assert!(set.positives[i].iter().all(|&p| labels[p] == labels[a] && p != a));
            assert!(set.negatives[i].iter().all(|&n| labels[n] != labels[a]));
        }
    }

    #[test]
    fn fully_noisy_target_samples_only_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = Grid::filled(3, 2, 2, 1.0);
        let ft = Grid::filled(3, 2, 2, 1.0);
        let ys = LabelMap::from_vec(4, 4, (0..16).map(|i| (i % 4 >= 2) as u8).collect()).unwrap();
        let yt = LabelMap::filled(4, 4, 1);
        let mask = NoiseMask::from_vec(4, 4, vec![true; 16]).unwrap();
        let (bank, set) = sample_pairs(&fs, &ft, &ys, &yt, Some(&mask), &ContrastConfig::default(), &mut rng).unwrap();
        assert_eq!(bank.len(), 8);
        assert!(!set.is_empty());
        let all = set
            .anchors
            .iter()
            .chain(set.positives.iter().flatten())
            .chain(set.negatives.iter().flatten());
        for &i in all {
            assert!(i < 4, "index {i} points into the masked target");
        }
    }

    fn random_problem(seed: u64) -> (FeatureBank, PixelPairSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16;
        let dim = 5;
        let bank = FeatureBank::from_vectors(dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let cfg = ContrastConfig {
            anchors_per_class: 3,
            max_negatives: 6,
            max_positives: 4,
            ..Default::default()
        };
        (bank, sample_pairs_from_labels(&labels, &cfg, &mut rng))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (bank, pairs) = random_problem(seed);
            let out = contrastive_loss(&pairs, &bank, 0.3).unwrap();
            let h = 1e-5;
            for i in 0..bank.vectors.len() {
                let (mut a, mut b) = (bank.clone(), bank.clone());
                a.vectors[i] += h;
                b.vectors[i] -= h;
                let fd = (contrastive_loss(&pairs, &a, 0.3).unwrap().value
                    - contrastive_loss(&pairs, &b, 0.3).unwrap().value)
                    / (2.0 * h);
                let rel = (fd - out.grad[i]).abs() / fd.abs().max(out.grad[i].abs()).max(1e-6);
                assert!(rel < 1e-3, "seed {seed} idx {i}: fd {fd} analytic {}", out.grad[i]);
            }
        }
    }

    #[test]
    fn scale_invariant_and_order_stable() {
        let (bank, pairs) = random_problem(9);
        let base = contrastive_loss(&pairs, &bank, 0.1).unwrap().value;
        assert!(base > 0.0);
        let scaled = FeatureBank {
            vectors: bank.vectors.iter().map(|v| v * 3.7).collect(),
            ..bank.clone()
        };
        assert!((contrastive_loss(&pairs, &scaled, 0.1).unwrap().value - base).abs() < 1e-12);
        let mut shuffled = pairs.clone();
        for n in shuffled.negatives.iter_mut() {
            n.reverse();
        }
        assert_eq!(contrastive_loss(&shuffled, &bank, 0.1).unwrap().value.to_bits(), base.to_bits());
    }

    #[test]
    fn split_grad_roundtrips_layout() {
        let a = Grid::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Grid::from_vec(2, 1, 1, vec![5.0, 6.0]).unwrap();
        let bank = FeatureBank::from_grids(&[&a, &b]).unwrap();
        assert_eq!(bank.vector(0), &[1.0, 3.0]);
        assert_eq!(bank.vector(2), &[5.0, 6.0]);
        let back = bank.split_grad(&bank.vectors);
        assert_eq!(back[0], a);
        assert_eq!(back[1], b);
    }
}
