//! Side-by-side PNG panels for inspection.

use std::path::Path;

use crate::data::io::{default_palette, write_image};
use crate::error::{Error, Result};
use crate::numerics::{Grid, LabelMap, NoiseMask};

const GAP: usize = 2;

/// Label map as an RGB image using `palette` (missing entries render grey).
pub fn colorize(y: &LabelMap, palette: &[[u8; 3]]) -> Grid {
    let n = y.len();
    let mut g = Grid::zeros(3, y.height, y.width);
    for (p, &v) in y.data.iter().enumerate() {
        let c = palette.get(v as usize).copied().unwrap_or([128, 128, 128]);
        for ch in 0..3 {
            g.data[ch * n + p] = c[ch] as f64 / 255.0;
        }
    }
    g
}

/// Binary mask as white-on-black RGB.
pub fn mask_image(m: &NoiseMask) -> Grid {
    let n = m.data.len();
    let mut g = Grid::zeros(3, m.height, m.width);
    for (p, &b) in m.data.iter().enumerate() {
        if b {
            for ch in 0..3 {
                g.data[ch * n + p] = 1.0;
            }
        }
    }
    g
}

fn to_rgb(g: &Grid) -> Result<Grid> {
    match g.channels {
        3 => Ok(g.clone()),
        1 => {
            let mut out = Grid::zeros(3, g.height, g.width);
            for ch in 0..3 {
                out.plane_mut(ch).copy_from_slice(g.plane(0));
            }
            Ok(out)
        }
        c => Err(Error::InvalidArgument(format!("cannot render a {c}-channel grid"))),
    }
}

/// Concatenates same-height panels left to right with a thin white gap.
pub fn hstack(panels: &[Grid]) -> Result<Grid> {
    let first = panels
        .first()
        .ok_or_else(|| Error::InvalidArgument("hstack of no panels".into()))?;
    let h = first.height;
    if panels.iter().any(|p| p.height != h) {
        return Err(Error::InvalidArgument("hstack panels differ in height".into()));
    }
    let w: usize = panels.iter().map(|p| p.width).sum::<usize>() + GAP * (panels.len() - 1);
    let mut out = Grid::filled(3, h, w, 1.0);
    let mut x0 = 0;
    for p in panels {
        let p = to_rgb(p)?;
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..p.width {
                    out.set(ch, y, x0 + x, p.get(ch, y, x).clamp(0.0, 1.0));
                }
            }
        }
        x0 += p.width + GAP;
    }
    Ok(out)
}

/// Image, prediction and (when present) ground truth.
pub fn write_overlay(path: &Path, image: &Grid, pred: &LabelMap, gt: Option<&LabelMap>) -> Result<()> {
    let pal = default_palette();
    let mut panels = vec![image.clone(), colorize(pred, &pal)];
    if let Some(g) = gt {
        panels.push(colorize(g, &pal));
    }
    write_image(path, &hstack(&panels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_width_and_gap() {
        let a = Grid::zeros(3, 4, 5);
        let b = Grid::zeros(1, 4, 3);
        let s = hstack(&[a, b]).unwrap();
        assert_eq!(s.shape(), (3, 4, 5 + GAP + 3));
        assert_eq!(s.get(0, 0, 5), 1.0);
        assert_eq!(s.get(0, 0, 7), 0.0);
        assert!(hstack(&[]).is_err());
    }

    #[test]
    fn colorize_uses_palette() {
        let y = LabelMap::from_vec(1, 2, vec![0, 9]).unwrap();
        let g = colorize(&y, &[[255, 0, 0]]);
        assert_eq!(g.pixel(0, 0), vec![1.0, 0.0, 0.0]);
        assert!((g.pixel(0, 1)[0] - 128.0 / 255.0).abs() < 1e-12);
    }
}
