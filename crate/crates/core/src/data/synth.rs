//! Parametric two-domain segmentation scenes.
//!
//! A scene is a textured background with a few filled shapes drawn in
//! painter's order. Each foreground class has its own shape kind, surface
//! texture and hue band. The domain style (hue rotation, gain, gamma, sensor
//! noise) is applied after rendering and never touches labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grid, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub hue_shift_deg: f64,
    pub brightness: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl Style {
    pub fn identity() -> Self {
        Style {
            hue_shift_deg: 0.0,
            brightness: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Darker, hue-rotated, noisier rendering.
    pub fn dusk() -> Self {
        Style {
            hue_shift_deg: 60.0,
            brightness: 0.6,
            gamma: 1.4,
            noise_sigma: 0.03,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub shapes_per_image: usize,
    /// Half-width of the hue band around each class's base hue; 180 makes
    /// colour uninformative.
    pub hue_jitter_deg: f64,
    /// Depth of the class surface pattern, in `[0, 1)`.
    pub texture_contrast: f64,
    pub source_style: Style,
    pub target_style: Style,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_classes: 5,
            shapes_per_image: 4,
            hue_jitter_deg: 45.0,
            texture_contrast: 0.4,
            source_style: Style::identity(),
            target_style: Style::dusk(),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.texture_contrast) || !(0.0..=180.0).contains(&self.hue_jitter_deg) {
            return Err(Error::Config(format!(
                "texture_contrast {} / hue_jitter_deg {} out of range",
                self.texture_contrast, self.hue_jitter_deg
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        for s in [self.source_style, self.target_style] {
            if !(s.brightness > 0.0 && s.gamma > 0.0 && s.noise_sigma >= 0.0) {
                return Err(Error::Config(format!("invalid style {s:?}")));
            }
        }
        Ok(())
    }

    pub fn style(&self, d: Domain) -> Style {
        match d {
            Domain::Source => self.source_style,
            Domain::Target => self.target_style,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> ShapeKind {
        match (class.max(1) - 1) % 4 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Ellipse,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Diamond,
        }
    }
}

/// A filled shape in pixel coordinates (pixel centres at `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            // Apex up, base on dy = 1.
            ShapeKind::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= 1.0,
        }
    }
}

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// A rendered scene before styling.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub image: Grid,
    pub labels: LabelMap,
}

fn class_hue(class: u8, k: usize) -> f64 {
    (class as f64 - 1.0) * 360.0 / (k - 1) as f64
}

/// Multiplicative surface pattern per class.
fn texture(class: u8, y: usize, x: usize, phase: usize, depth: f64) -> f64 {
    let low = 1.0 - depth;
    let (y, x) = (y + phase, x + phase);
    match (class.max(1) - 1) % 4 {
        0 => 1.0,
        1 => {
            if (y / 2) % 2 == 0 {
                1.0
            } else {
                low
            }
        }
        2 => {
            if ((y / 2) + (x / 2)) % 2 == 0 {
                1.0
            } else {
                low
            }
        }
        _ => {
            if (x / 2) % 2 == 0 {
                1.0
            } else {
                low
            }
        }
    }
}

/// Renders scene `index` of the stream seeded by `seed`.
pub fn render_scene(cfg: &SynthConfig, seed: u64, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = cfg.image_size;
    let mut image = Grid::zeros(3, s, s);
    let mut labels = LabelMap::filled(s, s, 0);

    // Background: low-saturation base colour, two sinusoids and fine grain.
    let base = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.0..0.15), rng.gen_range(0.35..0.6));
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let n = s * s;
    for y in 0..s {
        for x in 0..s {
            let mut t = 0.0;
            for &(f, a, p) in &waves {
                t += 0.06 * (f * (x as f64 * a.cos() + y as f64 * a.sin()) + p).sin();
            }
            let grain = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                image.data[c * n + y * s + x] = (base[c] + t + grain).clamp(0.0, 1.0);
            }
        }
    }

    let k = cfg.num_classes;
    let mut shapes = Vec::with_capacity(cfg.shapes_per_image);
    if k > 1 {
        for _ in 0..cfg.shapes_per_image {
            let class = rng.gen_range(1..k) as u8;
            let lo = s as f64 / 10.0;
            let hi = s as f64 / 4.0;
            let ry = rng.gen_range(lo..hi);
            let rx = rng.gen_range(lo..hi);
            let color = hsv_to_rgb(
                class_hue(class, k) + cfg.hue_jitter_deg * rng.gen_range(-1.0..1.0),
                rng.gen_range(0.65..0.9),
                rng.gen_range(0.7..0.95),
            );
            shapes.push(Shape {
                class,
                kind: ShapeKind::for_class(class),
                cy: rng.gen_range(0.0..s as f64),
                cx: rng.gen_range(0.0..s as f64),
                ry,
                rx,
                color,
            });
        }
    }
    for (i, sh) in shapes.iter().enumerate() {
        let phase = i * 3;
        for y in 0..s {
            for x in 0..s {
                if sh.contains(y, x) {
                    let t = texture(sh.class, y, x, phase, cfg.texture_contrast);
                    for c in 0..3 {
                        image.data[c * n + y * s + x] = (sh.color[c] * t).clamp(0.0, 1.0);
                    }
                    labels.data[y * s + x] = sh.class;
                }
            }
        }
    }
    Scene { shapes, image, labels }
}

/// Hue rotation, gain, gamma and Gaussian noise, clamped to `[0, 1]`.
pub fn apply_style<R: Rng + ?Sized>(img: &Grid, style: &Style, rng: &mut R) -> Grid {
    let n = img.plane_len();
    let mut out = img.clone();
    for p in 0..n {
        let mut rgb = [img.data[p], img.data[n + p], img.data[2 * n + p]];
        if style.hue_shift_deg != 0.0 {
            let (h, s, v) = rgb_to_hsv(rgb);
            rgb = hsv_to_rgb(h + style.hue_shift_deg, s, v);
        }
        for (c, v) in rgb.iter().enumerate() {
            let mut v = (v * style.brightness).clamp(0.0, 1.0).powf(style.gamma);
            if style.noise_sigma > 0.0 {
                v += style.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            out.data[c * n + p] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// One labelled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Grid,
    pub labels: LabelMap,
}

/// `n` scenes from stream `seed`, styled for `domain`. A pure function of
/// its arguments.
pub fn gen_synthetic_seeded(cfg: &SynthConfig, seed: u64, n: usize, domain: Domain) -> Vec<Sample> {
    let style = cfg.style(domain);
    (0..n as u64)
        .map(|i| {
            let scene = render_scene(cfg, seed, i);
            let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_57_1e);
            noise.set_stream(i * 2 + matches!(domain, Domain::Target) as u64);
            Sample {
                image: apply_style(&scene.image, &style, &mut noise),
                labels: scene.labels,
            }
        })
        .collect()
}

pub fn gen_synthetic(cfg: &SynthConfig, n: usize, domain: Domain) -> Vec<Sample> {
    gen_synthetic_seeded(cfg, cfg.rng_seed, n, domain)
}

/// Source train, target train and target validation splits. The three
/// splits use different scene streams.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_val: Vec<Sample>,
}

pub fn benchmark(cfg: &SynthConfig, n_source: usize, n_target: usize, n_val: usize) -> Result<Benchmark> {
    cfg.validate()?;
    let s = cfg.rng_seed;
    Ok(Benchmark {
        source_train: gen_synthetic_seeded(cfg, s, n_source, Domain::Source),
        target_train: gen_synthetic_seeded(cfg, s.wrapping_add(1), n_target, Domain::Target),
        target_val: gen_synthetic_seeded(cfg, s.wrapping_add(2), n_val, Domain::Target),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_synthetic(&cfg, 3, Domain::Target), gen_synthetic(&cfg, 3, Domain::Target));
    }

    #[test]
    fn no_shapes_means_background() {
        let cfg = SynthConfig {
            shapes_per_image: 0,
            ..Default::default()
        };
        for s in gen_synthetic(&cfg, 4, Domain::Source) {
            assert!(s.labels.data.iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn style_leaves_labels_alone() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic(&cfg, 5, Domain::Source);
        let b = gen_synthetic(&cfg, 5, Domain::Target);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels, y.labels);
            assert_ne!(x.image, y.image);
            assert!(y.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_shape_mask_is_exact() {
        let cfg = SynthConfig {
            shapes_per_image: 1,
            ..Default::default()
        };
        for i in 0..20 {
            let scene = render_scene(&cfg, 7, i);
            let sh = scene.shapes[0];
            let (mut inter, mut uni) = (0, 0);
            for y in 0..cfg.image_size {
                for x in 0..cfg.image_size {
                    let a = sh.contains(y, x);
                    let b = scene.labels.get(y, x) == sh.class;
                    inter += (a && b) as usize;
                    uni += (a || b) as usize;
                }
            }
            if uni > 0 {
                assert_eq!(inter, uni, "scene {i}");
            }
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for &rgb in &[[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splits_differ() {
        let b = benchmark(&SynthConfig::default(), 2, 2, 2).unwrap();
        assert_ne!(b.target_train[0].labels, b.target_val[0].labels);
        assert_ne!(b.source_train[0].labels, b.target_train[0].labels);
    }
}
