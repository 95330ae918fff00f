//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

use prnuda::numerics::{Grid, LabelMap, NoiseMask, IGNORE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Grid {
    Grid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn rand_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, p_ignore: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| if rng.gen_bool(p_ignore) { IGNORE } else { rng.gen_range(0..k) as u8 })
        .collect();
    LabelMap::from_vec(h, w, data).unwrap()
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> NoiseMask {
    NoiseMask::from_vec(h, w, (0..h * w).map(|_| rng.gen_bool(p)).collect()).unwrap()
}

fn logit(l: &Grid, c: usize, y: usize, x: usize) -> f64 {
    l.data[(c * l.height + y) * l.width + x]
}

/// Index of the first largest channel at one pixel.
pub fn argmax_at(l: &Grid, y: usize, x: usize) -> usize {
    let mut best = 0;
    for c in 1..l.channels {
        if logit(l, c, y, x) > logit(l, best, y, x) {
            best = c;
        }
    }
    best
}

/// Largest softmax probability at one pixel, from the logits directly.
pub fn max_prob_at(l: &Grid, y: usize, x: usize) -> f64 {
    let m = (0..l.channels).map(|c| logit(l, c, y, x)).fold(f64::MIN, f64::max);
    let z: f64 = (0..l.channels).map(|c| (logit(l, c, y, x) - m).exp()).sum();
    1.0 / z
}

/// Fraction of pixels with maximum probability above `tau`.
pub fn oracle_threshold_confidence(l: &Grid, tau: f64) -> f64 {
    let mut n = 0;
    for y in 0..l.height {
        for x in 0..l.width {
            if max_prob_at(l, y, x) > tau {
                n += 1;
            }
        }
    }
    n as f64 / (l.height * l.width) as f64
}

pub fn oracle_mask_confidence(m: &NoiseMask) -> f64 {
    let mut clean = 0;
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.data[y * m.width + x] {
                clean += 1;
            }
        }
    }
    clean as f64 / (m.height * m.width) as f64
}

pub fn oracle_noise_mask(a: &Grid, b: &Grid) -> Vec<bool> {
    let mut out = Vec::new();
    for y in 0..a.height {
        for x in 0..a.width {
            out.push(argmax_at(a, y, x) != argmax_at(b, y, x));
        }
    }
    out
}

/// Pixel-wise mix: where `take(y, x)` holds, image and label come from the
/// source and the weight becomes 1.
pub fn oracle_mix(
    src: (&Grid, &LabelMap),
    tgt: (&Grid, &LabelMap),
    w: &[f64],
    take: impl Fn(usize, usize) -> bool,
) -> (Grid, LabelMap, Vec<f64>) {
    let (h, wd) = (tgt.1.height, tgt.1.width);
    let mut img = tgt.0.clone();
    let mut lbl = tgt.1.clone();
    let mut weights = w.to_vec();
    for y in 0..h {
        for x in 0..wd {
            if take(y, x) {
                for c in 0..img.channels {
                    img.set(c, y, x, src.0.get(c, y, x));
                }
                lbl.data[y * wd + x] = src.1.get(y, x);
                weights[y * wd + x] = 1.0;
            }
        }
    }
    (img, lbl, weights)
}

/// mIoU by counting per class directly, skipping classes absent from the
/// ground truth.
pub fn oracle_miou(preds: &[LabelMap], gts: &[LabelMap], k: usize) -> (Vec<Option<f64>>, f64) {
    let mut per = Vec::new();
    for c in 0..k as u8 {
        let (mut inter, mut union, mut in_gt) = (0u64, 0u64, 0u64);
        for (p, g) in preds.iter().zip(gts) {
            for i in 0..g.data.len() {
                if g.data[i] == IGNORE {
                    continue;
                }
                let a = p.data[i] == c;
                let b = g.data[i] == c;
                in_gt += b as u64;
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
        per.push((in_gt > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let m = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, m)
}

pub fn oracle_mask_quality(pred: &NoiseMask, truth: &NoiseMask) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for i in 0..pred.data.len() {
        match (pred.data[i], truth.data[i]) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let p = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
    let r = if tp + fneg == 0.0 { 1.0 } else { tp / (tp + fneg) };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Direct O(n^2) DFT of one channel with the DC bin moved to the centre.
pub fn naive_dft(g: &Grid, c: usize) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (g.height, g.width);
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    sr += g.get(c, y, x) * a.cos();
                    si += g.get(c, y, x) * a.sin();
                }
            }
            let o = ((u + h / 2) % h) * w + (v + w / 2) % w;
            re[o] = sr;
            im[o] = si;
        }
    }
    (re, im)
}

/// Runs every library estimator against its oracle on `n` random instances
/// and returns, per check, the number of mismatches.
pub fn oracle_suite(seed: u64, n: usize) -> Vec<(&'static str, usize)> {
    use prnuda::augment::{classmix_with_classes, mask_guided_mix};
    use prnuda::metrics::{mask_quality, miou};
    use prnuda::numerics::softmax_channels;
    use prnuda::selftrain::{confidence_mask, confidence_threshold};
    use prnuda::spectral::make_noise_mask_gt;
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = [0usize; 7];
    for i in 0..n {
        let k = rng.gen_range(2..7);
        let (h, w) = (rng.gen_range(2..10), rng.gen_range(2..10));
        // Every third instance uses small integer logits so ties occur.
        let quantize = |g: Grid| if i % 3 == 0 { g.map(|v| v.round()) } else { g };
        let la = quantize(rand_grid(&mut rng, k, h, w, 4.0));
        let lb = quantize(rand_grid(&mut rng, k, h, w, 4.0));

        let tau = rng.gen_range(0.3..0.99);
        let eta = confidence_threshold(&softmax_channels(&la).unwrap(), tau).unwrap();
        bad[0] += (eta != oracle_threshold_confidence(&la, tau)) as usize;

        let density = rng.gen_range(0.0..1.0);
        let m = rand_mask(&mut rng, h, w, density);
        bad[1] += (confidence_mask(&m) != oracle_mask_confidence(&m)) as usize;

        bad[2] += (make_noise_mask_gt(&la, &lb).unwrap().data != oracle_noise_mask(&la, &lb)) as usize;

        let src = (rand_grid(&mut rng, 3, h, w, 1.0), rand_labels(&mut rng, h, w, k, 0.1));
        let tgt = (rand_grid(&mut rng, 3, h, w, 1.0), rand_labels(&mut rng, h, w, k, 0.1));
        let wts: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
        let classes: Vec<u8> = (0..k as u8).filter(|_| rng.gen_bool(0.5)).collect();
        let mix = classmix_with_classes((&src.0, &src.1), (&tgt.0, &tgt.1), &wts, &classes).unwrap();
        let (oi, ol, ow) = oracle_mix((&src.0, &src.1), (&tgt.0, &tgt.1), &wts, |y, x| {
            classes.contains(&src.1.get(y, x))
        });
        bad[3] += (mix.image != oi || mix.labels != ol || mix.weights != ow) as usize;

        let (gi, gl) = mask_guided_mix((&tgt.0, &tgt.1), &m, (&src.0, &src.1)).unwrap();
        let (oi, ol, _) = oracle_mix((&src.0, &src.1), (&tgt.0, &tgt.1), &wts, |y, x| m.data[y * w + x]);
        bad[4] += (gi != oi || gl != ol) as usize;

        let imgs = rng.gen_range(1..4);
        let preds: Vec<LabelMap> = (0..imgs).map(|_| rand_labels(&mut rng, h, w, k, 0.0)).collect();
        let gts: Vec<LabelMap> = (0..imgs).map(|_| rand_labels(&mut rng, h, w, k, 0.2)).collect();
        let rec = miou(&preds, &gts, k, IGNORE).unwrap();
        let (per, mean) = oracle_miou(&preds, &gts, k);
        bad[5] += (rec.per_class_iou != per || rec.miou != mean) as usize;

        let density = rng.gen_range(0.0..1.0);
        let truth = rand_mask(&mut rng, h, w, density);
        bad[6] += (mask_quality(&m, &truth).unwrap() != oracle_mask_quality(&m, &truth)) as usize;
    }
    ["threshold confidence", "mask confidence", "noise-mask target", "classmix", "mask-guided mix", "miou", "mask precision/recall"]
        .into_iter()
        .zip(bad)
        .collect()
}
