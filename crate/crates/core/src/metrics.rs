//! Evaluation metrics: confusion-matrix mIoU, binary mask quality, rank
//! correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LabelMap, NoiseMask};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// IoU per class; `None` for classes absent from every ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Set when no pixel was evaluated (all ignored or no images).
    pub empty: bool,
    pub mask_precision: Option<f64>,
    pub mask_recall: Option<f64>,
    pub mask_f1: Option<f64>,
    /// Pseudo-label accuracy over pixels the predicted noise mask calls clean.
    pub clean_pixel_accuracy: Option<f64>,
}

/// Row-major `k x k` confusion counts, `[gt][pred]`.
pub fn confusion(preds: &[LabelMap], gts: &[LabelMap], k: usize, ignore: u8) -> Result<Vec<u64>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "miou: {} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = vec![0u64; k * k];
    for (p, g) in preds.iter().zip(gts) {
        if p.height != g.height || p.width != g.width {
            return Err(Error::shape("miou", format!("{:?}", (g.height, g.width)), format!("{:?}", (p.height, p.width))));
        }
        for (&pv, &gv) in p.data.iter().zip(&g.data) {
            if gv == ignore {
                continue;
            }
            if gv as usize >= k {
                return Err(Error::InvalidInput(format!("label {gv} out of range for K={k}")));
            }
            // Predictions outside 0..K are dropped here; `miou` still counts
            // them as misses through the ground-truth totals.
            if (pv as usize) < k {
                cm[gv as usize * k + pv as usize] += 1;
            }
        }
    }
    Ok(cm)
}

pub fn miou(preds: &[LabelMap], gts: &[LabelMap], k: usize, ignore: u8) -> Result<MetricsRecord> {
    let cm = confusion(preds, gts, k, ignore)?;
    // Row totals come from the ground truth directly so out-of-range predictions
    // still count against their class.
    let mut gt_count = vec![0u64; k];
    for g in gts {
        for &v in &g.data {
            if v != ignore {
                gt_count[v as usize] += 1;
            }
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        if gt_count[c] == 0 {
            per_class.push(None);
            continue;
        }
        let tp = cm[c * k + c];
        let fp: u64 = (0..k).filter(|&r| r != c).map(|r| cm[r * k + c]).sum();
        let fn_ = gt_count[c] - tp;
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        per_class.push(Some(iou));
        sum += iou;
        present += 1;
    }
    Ok(MetricsRecord {
        per_class_iou: per_class,
        miou: if present > 0 { sum / present as f64 } else { 0.0 },
        empty: present == 0,
        ..Default::default()
    })
}

/// Precision, recall and F1 with noisy = positive. With no true positives in
/// the truth, recall is 1; with no predicted positives, precision is 1.
pub fn mask_quality(pred: &NoiseMask, truth: &NoiseMask) -> Result<(f64, f64, f64)> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::shape("mask_quality", format!("{:?}", (truth.height, truth.width)), format!("{:?}", (pred.height, pred.width))));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(prf(tp, fp, fn_))
}

pub(crate) fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Pooled mask quality over many images.
pub fn mask_quality_pooled(pairs: &[(NoiseMask, NoiseMask)]) -> Result<(f64, f64, f64)> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, truth) in pairs {
        if pred.data.len() != truth.data.len() {
            return Err(Error::shape("mask_quality", truth.data.len(), pred.data.len()));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            tp += (p && t) as u64;
            fp += (p && !t) as u64;
            fn_ += (!p && t) as u64;
        }
    }
    Ok(prf(tp, fp, fn_))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman: length mismatch");
    pearson(&ranks(a), &ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
