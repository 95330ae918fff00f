//! Parameter containers and the two network families: the segmenter
//! (encoder + decoder, shared by student and teacher) and the refinement
//! decoder with its segmentation and noise-mask heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    area_pool, concat_channels, standardize, relu, relu_backward, resize_bilinear,
    resize_bilinear_backward, Conv2d, ConvCache,
};
use crate::error::{Error, Result};
use crate::numerics::Grid;

/// Architecture descriptor. Two states with equal descriptors are
/// parameter-compatible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Segmenter {
        in_channels: usize,
        widths: [usize; 3],
        strides: [usize; 3],
        kernel: usize,
        num_classes: usize,
    },
    Refiner {
        feat_channels: usize,
        num_classes: usize,
        width: usize,
        kernel: usize,
    },
}

impl Arch {
    /// Reference segmenter: 3x3 convs, widths 16/32/64, strides 2-1-2.
    pub fn segmenter(num_classes: usize) -> Arch {
        Arch::Segmenter {
            in_channels: 3,
            widths: [16, 32, 64],
            strides: [2, 1, 2],
            kernel: 3,
            num_classes,
        }
    }

    /// Reference refinement decoder matching [`Arch::segmenter`] features.
    pub fn refiner(num_classes: usize) -> Arch {
        Arch::Refiner {
            feat_channels: 64,
            num_classes,
            width: 64,
            kernel: 3,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Arch::Segmenter { num_classes, .. } | Arch::Refiner { num_classes, .. } => num_classes,
        }
    }

    fn convs(&self) -> Vec<(&'static str, Conv2d, ParamGroup)> {
        match *self {
            Arch::Segmenter {
                in_channels,
                widths,
                strides,
                kernel,
                num_classes,
            } => {
                let pad = kernel / 2;
                let ins = [in_channels, widths[0], widths[1]];
                let names = ["enc.conv1", "enc.conv2", "enc.conv3"];
                let mut v: Vec<_> = (0..3)
                    .map(|i| {
                        (
                            names[i],
                            Conv2d {
                                in_ch: ins[i],
                                out_ch: widths[i],
                                kernel,
                                stride: strides[i],
                                pad,
                            },
                            ParamGroup::Encoder,
                        )
                    })
                    .collect();
                v.push((
                    "dec.cls",
                    Conv2d {
                        in_ch: widths[2],
                        out_ch: num_classes,
                        kernel: 1,
                        stride: 1,
                        pad: 0,
                    },
                    ParamGroup::Decoder,
                ));
                v
            }
            Arch::Refiner {
                feat_channels,
                num_classes,
                width,
                kernel,
            } => {
                let pad = kernel / 2;
                let conv = |in_ch, out_ch, k, p| Conv2d {
                    in_ch,
                    out_ch,
                    kernel: k,
                    stride: 1,
                    pad: p,
                };
                vec![
                    ("prn.conv1", conv(feat_channels + num_classes, width, kernel, pad), ParamGroup::Decoder),
                    ("prn.conv2", conv(width, width, kernel, pad), ParamGroup::Decoder),
                    ("prn.seg_head", conv(width, num_classes, 1, 0), ParamGroup::Decoder),
                    ("prn.noise_head", conv(width, 1, 1, 0), ParamGroup::Decoder),
                ]
            }
        }
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut offset = 0;
        let mut out = Vec::new();
        for (name, cv, group) in self.convs() {
            let wshape = vec![cv.out_ch, cv.in_ch, cv.kernel, cv.kernel];
            let wlen = cv.weight_len();
            out.push(ParamBlock {
                name: format!("{name}.weight"),
                shape: wshape,
                offset,
                group,
            });
            offset += wlen;
            out.push(ParamBlock {
                name: format!("{name}.bias"),
                shape: vec![cv.out_ch],
                offset,
                group,
            });
            offset += cv.out_ch;
        }
        out
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", serde_json::to_string(self).unwrap_or_default())
    }
}

/// Learning-rate group a parameter block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: ParamGroup,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector plus the layout that gives it meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Arch,
    pub layout: Vec<ParamBlock>,
    pub params: Vec<f64>,
}

impl ModelState {
    pub fn zeros(arch: Arch) -> Self {
        let layout = arch.layout();
        let n = layout.iter().map(ParamBlock::len).sum();
        ModelState {
            arch,
            layout,
            params: vec![0.0; n],
        }
    }

    /// Kaiming-uniform weights and zero biases. The refinement decoder's
    /// segmentation head starts at zero so refined logits begin as a copy of
    /// the input logits.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let mut m = ModelState::zeros(arch);
        for b in m.layout.clone() {
            if !b.name.ends_with(".weight") || b.name.starts_with("prn.seg_head") {
                continue;
            }
            let fan_in: usize = b.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut m.params[b.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        m
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        let mut m = ModelState::zeros(arch);
        if params.len() != m.params.len() {
            return Err(Error::shape("ModelState::from_params", m.params.len(), params.len()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&ParamBlock> {
        self.layout.iter().find(|b| b.name == name)
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let b = self.find(name).unwrap_or_else(|| panic!("no parameter block {name}"));
        &self.params[b.range()]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .find(name)
            .unwrap_or_else(|| panic!("no parameter block {name}"))
            .range();
        &mut self.params[r]
    }

    pub fn ensure_compatible(&self, other: &ModelState) -> Result<()> {
        if self.arch != other.arch || self.params.len() != other.params.len() {
            return Err(Error::ArchMismatch {
                expected: self.arch.to_string(),
                actual: other.arch.to_string(),
            });
        }
        Ok(())
    }

    fn conv_params(&self, name: &str) -> (&[f64], &[f64]) {
        (self.block(&format!("{name}.weight")), self.block(&format!("{name}.bias")))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Student/teacher forward result.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub features: Grid,
    pub logits: Grid,
}

/// Values recorded by a segmenter forward pass for reverse-mode replay.
#[derive(Clone, Debug)]
pub struct SegTape {
    caches: Vec<ConvCache>,
    acts: Vec<Grid>,
    cls_cache: ConvCache,
}

/// Refinement decoder outputs: refined K-class logits and pre-sigmoid noise
/// logits, both at the input logits' resolution.
#[derive(Clone, Debug)]
pub struct PrnOutput {
    pub refined_logits: Grid,
    pub noise_logits: Grid,
}

#[derive(Clone, Debug)]
pub struct PrnTape {
    c1: ConvCache,
    h1: Grid,
    c2: ConvCache,
    h2: Grid,
    seg: ConvCache,
    noise: ConvCache,
    small_hw: (usize, usize),
}

fn expect_segmenter(m: &ModelState) -> Result<(usize, usize)> {
    match m.arch {
        Arch::Segmenter {
            in_channels, widths, ..
        } => Ok((in_channels, widths[2])),
        _ => Err(Error::ArchMismatch {
            expected: "segmenter".into(),
            actual: m.arch.to_string(),
        }),
    }
}

fn encode_impl(m: &ModelState, x: &Grid) -> Result<(Grid, Vec<ConvCache>, Vec<Grid>)> {
    let (in_ch, _) = expect_segmenter(m)?;
    if x.channels != in_ch {
        return Err(Error::shape("encode", format!("{in_ch} input channels"), x.channels));
    }
    let convs = m.arch.convs();
    let mut caches = Vec::with_capacity(3);
    let mut acts = Vec::with_capacity(3);
    let mut cur = standardize(x);
    for (name, cv, _) in convs.iter().take(3) {
        let (w, b) = m.conv_params(name);
        let (pre, cache) = cv.forward(&cur, w, b);
        cur = relu(&pre);
        caches.push(cache);
        acts.push(cur.clone());
    }
    Ok((cur, caches, acts))
}

/// Encoder: per-image standardisation, then three strided conv + ReLU
/// blocks.
pub fn encode(m: &ModelState, x: &Grid) -> Result<Grid> {
    Ok(encode_impl(m, x)?.0)
}

fn decode_impl(m: &ModelState, f: &Grid, out_hw: (usize, usize)) -> Result<(Grid, ConvCache)> {
    let (_, feat) = expect_segmenter(m)?;
    if f.channels != feat {
        return Err(Error::shape("decode", format!("{feat} feature channels"), f.channels));
    }
    let (name, cv, _) = m.arch.convs()[3];
    let (w, b) = m.conv_params(name);
    let (small, cache) = cv.forward(f, w, b);
    Ok((resize_bilinear(&small, out_hw.0, out_hw.1), cache))
}

/// Decoder: 1x1 classifier then bilinear upsampling to `out_hw`.
pub fn decode(m: &ModelState, f: &Grid, out_hw: (usize, usize)) -> Result<Grid> {
    Ok(decode_impl(m, f, out_hw)?.0)
}

/// Full segmenter pass with no recording.
pub fn segment(m: &ModelState, x: &Grid) -> Result<SegOutput> {
    let features = encode(m, x)?;
    let logits = decode(m, &features, (x.height, x.width))?;
    Ok(SegOutput { features, logits })
}

/// Segmenter pass that records what [`seg_backward`] needs.
pub fn seg_forward(m: &ModelState, x: &Grid) -> Result<(SegOutput, SegTape)> {
    let (features, caches, acts) = encode_impl(m, x)?;
    let out_hw = (x.height, x.width);
    let (logits, cls_cache) = decode_impl(m, &features, out_hw)?;
    Ok((
        SegOutput { features, logits },
        SegTape {
            caches,
            acts,
            cls_cache,
        },
    ))
}

/// Parameter gradient given upstream gradients on logits and/or features.
pub fn seg_backward(
    m: &ModelState,
    tape: &SegTape,
    d_logits: Option<&Grid>,
    d_features: Option<&Grid>,
) -> Vec<f64> {
    let mut grad = vec![0.0; m.len()];
    let convs = m.arch.convs();
    let feats = &tape.acts[2];
    let mut d_f = match d_features {
        Some(g) => g.clone(),
        None => Grid::zeros(feats.channels, feats.height, feats.width),
    };
    if let Some(dl) = d_logits {
        let (name, cv, _) = convs[3];
        let d_small = resize_bilinear_backward(dl, feats.height, feats.width);
        let (w, _) = m.conv_params(name);
        let w = w.to_vec();
        let (dw, db) = grad_blocks(m, &mut grad, name);
        let dx = cv
            .backward(&tape.cls_cache, &w, &d_small, dw, db, true)
            .expect("input grad requested");
        for (a, b) in d_f.data.iter_mut().zip(&dx.data) {
            *a += b;
        }
    }
    let mut d = d_f;
    for i in (0..3).rev() {
        let (name, cv, _) = convs[i];
        let d_pre = relu_backward(&tape.acts[i], &d);
        let w = m.conv_params(name).0.to_vec();
        let (dw, db) = grad_blocks(m, &mut grad, name);
        match cv.backward(&tape.caches[i], &w, &d_pre, dw, db, i > 0) {
            Some(dx) => d = dx,
            None => break,
        }
    }
    grad
}

fn grad_blocks<'g>(m: &ModelState, grad: &'g mut [f64], name: &str) -> (&'g mut [f64], &'g mut [f64]) {
    let wr = m.find(&format!("{name}.weight")).expect("weight block").range();
    let br = m.find(&format!("{name}.bias")).expect("bias block").range();
    debug_assert_eq!(wr.end, br.start);
    let (w, b) = grad[wr.start..br.end].split_at_mut(wr.len());
    (w, b)
}

fn expect_refiner(m: &ModelState) -> Result<(usize, usize)> {
    match m.arch {
        Arch::Refiner {
            feat_channels,
            num_classes,
            ..
        } => Ok((feat_channels, num_classes)),
        _ => Err(Error::ArchMismatch {
            expected: "refiner".into(),
            actual: m.arch.to_string(),
        }),
    }
}

/// Refinement decoder pass: logits are area-pooled to the feature grid,
/// concatenated with the features, run through two conv + ReLU layers and
/// two 1x1 heads. The segmentation head is a residual on the input logits.
pub fn prn_forward(m: &ModelState, f: &Grid, l: &Grid) -> Result<(PrnOutput, PrnTape)> {
    let (feat, k) = expect_refiner(m)?;
    if f.channels != feat {
        return Err(Error::shape("prn_decode features", feat, f.channels));
    }
    if l.channels != k {
        return Err(Error::shape("prn_decode logits", k, l.channels));
    }
    if l.height < f.height || l.width < f.width {
        return Err(Error::shape(
            "prn_decode spatial",
            format!("logits at least {}x{}", f.height, f.width),
            format!("{}x{}", l.height, l.width),
        ));
    }
    let convs = m.arch.convs();
    let l_small = area_pool(l, f.height, f.width);
    let z = concat_channels(f, &l_small);
    let run = |i: usize, x: &Grid| {
        let (name, cv, _) = convs[i];
        let (w, b) = m.conv_params(name);
        cv.forward(x, w, b)
    };
    let (p1, c1) = run(0, &z);
    let h1 = relu(&p1);
    let (p2, c2) = run(1, &h1);
    let h2 = relu(&p2);
    let (seg_small, seg) = run(2, &h2);
    let (noise_small, noise) = run(3, &h2);
    let mut refined = resize_bilinear(&seg_small, l.height, l.width);
    for (r, v) in refined.data.iter_mut().zip(&l.data) {
        *r += v;
    }
    let noise_logits = resize_bilinear(&noise_small, l.height, l.width);
    Ok((
        PrnOutput {
            refined_logits: refined,
            noise_logits,
        },
        PrnTape {
            c1,
            h1,
            c2,
            h2,
            seg,
            noise,
            small_hw: (f.height, f.width),
        },
    ))
}

pub fn prn_decode(m: &ModelState, f: &Grid, l: &Grid) -> Result<PrnOutput> {
    Ok(prn_forward(m, f, l)?.0)
}

/// Gradient over the refinement decoder's parameters only. Features and
/// input logits are treated as constants.
pub fn prn_backward(m: &ModelState, tape: &PrnTape, d_refined: Option<&Grid>, d_noise: Option<&Grid>) -> Vec<f64> {
    let mut grad = vec![0.0; m.len()];
    let convs = m.arch.convs();
    let (sh, sw) = tape.small_hw;
    let width = tape.h2.channels;
    let mut d_h2 = Grid::zeros(width, sh, sw);
    let heads = [(2usize, d_refined, &tape.seg), (3usize, d_noise, &tape.noise)];
    for (i, d_out, cache) in heads {
        if let Some(d) = d_out {
            let (name, cv, _) = convs[i];
            let d_small = resize_bilinear_backward(d, sh, sw);
            let w = m.conv_params(name).0.to_vec();
            let (dw, db) = grad_blocks(m, &mut grad, name);
            let dx = cv.backward(cache, &w, &d_small, dw, db, true).expect("input grad");
            for (a, b) in d_h2.data.iter_mut().zip(&dx.data) {
                *a += b;
            }
        }
    }
    let d_p2 = relu_backward(&tape.h2, &d_h2);
    let (name, cv, _) = convs[1];
    let w = m.conv_params(name).0.to_vec();
    let (dw, db) = grad_blocks(m, &mut grad, name);
    let d_h1 = cv.backward(&tape.c2, &w, &d_p2, dw, db, true).expect("input grad");
    let d_p1 = relu_backward(&tape.h1, &d_h1);
    let (name, cv, _) = convs[0];
    let w = m.conv_params(name).0.to_vec();
    let (dw, db) = grad_blocks(m, &mut grad, name);
    cv.backward(&tape.c1, &w, &d_p1, dw, db, false);
    grad
}
