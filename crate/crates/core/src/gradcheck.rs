//! Central finite-difference checks of every training loss against its
//! analytic parameter gradient, end to end through the networks.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_loss, sample_pairs, ContrastConfig};
use crate::error::Result;
use crate::numerics::{Grid, LabelMap, NoiseMask};
use crate::segnet::{prn_backward, prn_forward, seg_backward, seg_forward, Arch, ModelState};
use crate::selftrain::{ce_source, ce_target, prn_source_losses, prn_target_losses, PseudoLabelBundle};
use crate::spectral::{make_noise_mask_gt, perturb_logits};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

/// Names of the checked terms, in report order.
pub const TERMS: [&str; 7] = [
    "source_ce",
    "target_ce",
    "prn_source_ce",
    "prn_source_bce",
    "prn_target_ce",
    "prn_target_bce",
    "contrastive",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients
/// from dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `grad` with central differences of `f` at `probes` coordinates
/// of `x`.
pub fn check(term: &str, x: &[f64], grad: &[f64], probes: &[usize], f: impl Fn(&[f64]) -> f64) -> TermCheck {
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for &i in probes {
        let x0 = xs[i];
        xs[i] = x0 + STEP;
        let up = f(&xs);
        xs[i] = x0 - STEP;
        let down = f(&xs);
        xs[i] = x0;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * STEP)));
    }
    TermCheck {
        term: term.into(),
        probes: probes.len(),
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    }
}

/// Random coordinates plus the ones with the largest analytic gradient.
fn probes(grad: &[f64], n_random: usize, n_top: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).collect();
    idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    let mut out: Vec<usize> = idx[..n_top.min(idx.len())].to_vec();
    idx.shuffle(rng);
    out.extend(idx.into_iter().take(n_random));
    out.sort_unstable();
    out.dedup();
    out
}

fn with_params(m: &ModelState, p: &[f64]) -> ModelState {
    ModelState {
        arch: m.arch.clone(),
        layout: m.layout.clone(),
        params: p.to_vec(),
    }
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    Grid::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
}

/// Left half class 0, right half class 1, one pixel of class 2.
fn halves(h: usize, w: usize) -> LabelMap {
    let mut y = LabelMap::from_vec(h, w, (0..h * w).map(|p| (p % w >= w / 2) as u8).collect()).unwrap();
    y.data[0] = 2;
    y
}

/// Which term's analytic gradient to corrupt, for negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Corrupt {
    #[default]
    None,
    Term(usize),
}

pub fn run_gradcheck(seed: u64) -> Result<Vec<TermCheck>> {
    run_gradcheck_with(seed, Corrupt::None)
}

/// Checks all seven terms on 8x8 inputs with three classes.
pub fn run_gradcheck_with(seed: u64, corrupt: Corrupt) -> Result<Vec<TermCheck>> {
    const K: usize = 3;
    const S: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = ModelState::init(Arch::segmenter(K), &mut rng);
    let mut prn = ModelState::init(Arch::refiner(K), &mut rng);
    // Wake the zero-initialised refinement head so its gradients are generic.
    for v in &mut prn.params {
        if *v == 0.0 {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let xs = image(&mut rng, S, S);
    let xt = image(&mut rng, S, S);
    let ys = halves(S, S);
    let yt = {
        let mut y = halves(S, S);
        y.data.reverse();
        y
    };
    let mask = NoiseMask::from_vec(S, S, (0..S * S).map(|_| rng.gen_bool(0.3)).collect())?;
    let mut out = Vec::new();
    let mut finish = |i: usize, x: &[f64], mut grad: Vec<f64>, f: &dyn Fn(&[f64]) -> f64, rng: &mut ChaCha8Rng| {
        let pr = probes(&grad, 24, 8, rng);
        if corrupt == Corrupt::Term(i) {
            grad[pr[pr.len() / 2]] *= 1.5;
            grad[pr[0]] += 1e-2;
        }
        out.push(check(TERMS[i], x, &grad, &pr, f));
    };

    // Student terms.
    {
        let (o, tape) = seg_forward(&student, &xs)?;
        let g = seg_backward(&student, &tape, Some(&ce_source(&o.logits, &ys)?.grad), None);
        let f = |p: &[f64]| {
            let m = with_params(&student, p);
            ce_source(&seg_forward(&m, &xs).unwrap().0.logits, &ys).unwrap().value
        };
        finish(0, &student.params, g, &f, &mut rng);
    }
    {
        let eta = 0.7;
        let (o, tape) = seg_forward(&student, &xt)?;
        let g = seg_backward(&student, &tape, Some(&ce_target(&o.logits, &yt, &mask, eta)?.grad), None);
        let f = |p: &[f64]| {
            let m = with_params(&student, p);
            ce_target(&seg_forward(&m, &xt).unwrap().0.logits, &yt, &mask, eta)
                .unwrap()
                .value
        };
        finish(1, &student.params, g, &f, &mut rng);
    }

    // Refinement terms: features and logits are constants.
    let (so, _) = seg_forward(&student, &xs)?;
    let (to, _) = seg_forward(&student, &xt)?;
    let ls = perturb_logits(&so.logits, &to.logits, 0.2)?;
    let mu_s = make_noise_mask_gt(&so.logits, &ls)?;
    let lt = perturb_logits(&to.logits, &so.logits, 0.2)?;
    let mu_t = make_noise_mask_gt(&to.logits, &lt)?;
    let reference = PseudoLabelBundle {
        labels: yt.clone(),
        confidence: 0.5,
        max_prob: (0..S * S).map(|p| if p % 3 == 0 { 0.99 } else { 0.5 }).collect(),
        noise_mask: Some(mask.clone()),
    };
    let source_terms = |m: &ModelState| {
        let (o, _) = prn_forward(m, &so.features, &ls).unwrap();
        prn_source_losses(&o, &ys, &mu_s).unwrap()
    };
    let target_terms = |m: &ModelState| {
        let (o, _) = prn_forward(m, &to.features, &lt).unwrap();
        prn_target_losses(&o, &reference, &mu_t, 10, 5, 0.968).unwrap()
    };
    {
        let (_, tape) = prn_forward(&prn, &so.features, &ls)?;
        let (ce, bce) = source_terms(&prn);
        let g = prn_backward(&prn, &tape, Some(&ce.grad), None);
        finish(2, &prn.params, g, &|p| source_terms(&with_params(&prn, p)).0.value, &mut rng);
        let g = prn_backward(&prn, &tape, None, Some(&bce.grad));
        finish(3, &prn.params, g, &|p| source_terms(&with_params(&prn, p)).1.value, &mut rng);
    }
    {
        let (_, tape) = prn_forward(&prn, &to.features, &lt)?;
        let (ce, bce) = target_terms(&prn);
        let g = prn_backward(&prn, &tape, Some(&ce.grad), None);
        finish(4, &prn.params, g, &|p| target_terms(&with_params(&prn, p)).0.value, &mut rng);
        let g = prn_backward(&prn, &tape, None, Some(&bce.grad));
        finish(5, &prn.params, g, &|p| target_terms(&with_params(&prn, p)).1.value, &mut rng);
    }

    // Contrastive term through the encoder of both images.
    {
        let cfg = ContrastConfig::default();
        let loss = |m: &ModelState| -> Result<(f64, Vec<f64>)> {
            let (a, ta) = seg_forward(m, &xs)?;
            let (b, tb) = seg_forward(m, &xt)?;
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
            let (bank, pairs) = sample_pairs(&a.features, &b.features, &ys, &yt, None, &cfg, &mut r)?;
            let c = contrastive_loss(&pairs, &bank, cfg.temperature)?;
            let parts = bank.split_grad(&c.grad);
            let mut g = seg_backward(m, &ta, None, Some(&parts[0]));
            let gb = seg_backward(m, &tb, None, Some(&parts[1]));
            g.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
            Ok((c.value, g))
        };
        let (_, g) = loss(&student)?;
        let f = |p: &[f64]| loss(&with_params(&student, p)).unwrap().0;
        finish(6, &student.params, g, &f, &mut rng);
    }
    Ok(out)
}

/// Plain-text table of a report.
pub fn format_report(rows: &[TermCheck]) -> String {
    let mut s = format!("{:<16} {:>6} {:>12}  result\n", "term", "probes", "max rel err");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>6} {:>12.3e}  {}\n",
            r.term,
            r.probes,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
        assert!(rel_err(1e-10, 0.0) < 1e-3);
    }

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let x = [0.3, -1.2];
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[1];
        assert!(check("q", &x, &[0.6, 3.0], &[0, 1], f).passed);
        assert!(!check("q", &x, &[0.6, 2.9], &[0, 1], f).passed);
    }
}
