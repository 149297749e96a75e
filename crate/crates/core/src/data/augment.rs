//! Image resizing, cropping and random geometric augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Train,
    Eval,
}

/// Augmentation parameters. Angles are in degrees, translation is a fraction
/// of the image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub resize: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub max_shear: f64,
    pub max_translate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::for_resolution(224)
    }
}

impl AugmentConfig {
    /// Resize to `256/224` of the target resolution, then crop to it.
    pub fn for_resolution(resolution: usize) -> Self {
        AugmentConfig {
            resize: (resolution as f64 * 256.0 / 224.0).round() as usize,
            crop: resolution,
            flip_prob: 0.5,
            max_rotation: 15.0,
            scale_range: (0.9, 1.1),
            max_shear: 10.0,
            max_translate: 0.05,
        }
    }

    /// No flip and an identity affine transform.
    pub fn disabled(resize: usize, crop: usize) -> Self {
        AugmentConfig {
            resize,
            crop,
            flip_prob: 0.0,
            max_rotation: 0.0,
            scale_range: (1.0, 1.0),
            max_shear: 0.0,
            max_translate: 0.0,
        }
    }

    fn is_identity_affine(&self) -> bool {
        self.max_rotation == 0.0
            && self.scale_range == (1.0, 1.0)
            && self.max_shear == 0.0
            && self.max_translate == 0.0
    }
}

/// Affine parameters drawn for one training image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub scale: f64,
    pub shear: f64,
    pub translate: (f64, f64),
}

impl AffineParams {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let (lo, hi) = cfg.scale_range;
        AffineParams {
            rotation: sym(rng, cfg.max_rotation),
            scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            shear: sym(rng, cfg.max_shear),
            translate: (sym(rng, cfg.max_translate), sym(rng, cfg.max_translate)),
        }
    }
}

/// Train: resize → random horizontal flip → random affine → random crop.
/// Eval: resize → center crop.
pub fn augment_image<R: Rng + ?Sized>(
    x: &Tensor,
    mode: AugmentMode,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[1] < 8 || s[2] < 8 {
        return Err(Error::dim(format!(
            "augmentation expects C×H×W with H, W ≥ 8, got {s:?}"
        )));
    }
    if cfg.crop > cfg.resize {
        return Err(Error::invalid(format!(
            "crop {} larger than resize {}",
            cfg.crop, cfg.resize
        )));
    }
    let mut img = resize_bilinear(x, cfg.resize, cfg.resize);
    let margin = cfg.resize - cfg.crop;
    let (top, left) = match mode {
        AugmentMode::Eval => (margin / 2, margin / 2),
        AugmentMode::Train => {
            if rng.random::<f64>() < cfg.flip_prob {
                img = flip_horizontal(&img);
            }
            if !cfg.is_identity_affine() {
                img = affine(&img, AffineParams::sample(cfg, rng));
            }
            (rng.random_range(0..=margin), rng.random_range(0..=margin))
        }
    };
    Ok(crop(&img, top, left, cfg.crop, cfg.crop))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                out[(ch * out_h + oy) * out_w + ox] = sample(plane, h, w, fy, fx);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("resize shape")
}

fn sample(plane: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - dx) + plane[y0 * w + x1] * dx;
    let bottom = plane[y1 * w + x0] * (1.0 - dx) + plane[y1 * w + x1] * dx;
    top * (1.0 - dy) + bottom * dy
}

pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = x.clone();
    let d = out.data_mut();
    for row in 0..c * h {
        d[row * w..(row + 1) * w].reverse();
    }
    out
}

/// Applies rotation, isotropic scale, x-shear and translation about the image
/// centre by inverse mapping; samples falling outside the image read zero.
pub fn affine(x: &Tensor, p: AffineParams) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (theta, shear) = (p.rotation.to_radians(), p.shear.to_radians());
    // Forward map A = R(θ) · Shear(φ) · scale.
    let (cos, sin, tan) = (theta.cos(), theta.sin(), shear.tan());
    let a = [
        [p.scale * cos, p.scale * (cos * tan - sin)],
        [p.scale * sin, p.scale * (sin * tan + cos)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ty, tx) = (p.translate.1 * h as f64, p.translate.0 * w as f64);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                let (dx, dy) = (ox as f64 - cx - tx, oy as f64 - cy - ty);
                let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                    continue;
                }
                out[(ch * h + oy) * w + ox] = sample(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::new([c, h, w], out).expect("affine shape")
}

pub fn crop(x: &Tensor, top: usize, left: usize, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(top + out_h <= h && left + out_w <= w, "crop window out of bounds");
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in top..top + out_h {
            let start = (ch * h + y) * w + left;
            out.extend_from_slice(&x.data()[start..start + out_w]);
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("crop shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(c: usize, h: usize, w: usize) -> Tensor {
        let n = c * h * w;
        Tensor::new([c, h, w], (0..n).map(|i| ((i * 13 % 31) as f64) / 31.0).collect()).unwrap()
    }

    #[test]
    fn eval_mode_center_crops_256_to_224() {
        let x = image(3, 256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.resize, 256);
        let y = augment_image(&x, AugmentMode::Eval, &cfg, &mut rng).unwrap();
        assert_eq!(y.shape(), &[3, 224, 224]);
        assert_eq!(y, crop(&x, 16, 16, 224, 224));
        let again = augment_image(&x, AugmentMode::Eval, &cfg, &mut rng).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn disabled_augmentation_returns_resized_input() {
        let x = image(3, 16, 16);
        let cfg = AugmentConfig::disabled(18, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = augment_image(&x, AugmentMode::Train, &cfg, &mut rng).unwrap();
        assert_eq!(y, resize_bilinear(&x, 18, 18));
    }

    #[test]
    fn sizes_scale_with_resolution() {
        let cfg = AugmentConfig::for_resolution(32);
        assert_eq!((cfg.resize, cfg.crop), (37, 32));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = augment_image(&image(3, 32, 32), AugmentMode::Train, &cfg, &mut rng).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sampled_affine_respects_bounds() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = AffineParams::sample(&cfg, &mut rng);
            assert!(p.rotation.abs() <= 15.0);
            assert!((0.9..=1.1).contains(&p.scale));
            assert!(p.shear.abs() <= 10.0);
            assert!(p.translate.0.abs() <= 0.05 && p.translate.1.abs() <= 0.05);
        }
    }

    #[test]
    fn identity_affine_is_exact() {
        let x = image(1, 9, 11);
        let p = AffineParams { rotation: 0.0, scale: 1.0, shear: 0.0, translate: (0.0, 0.0) };
        assert_eq!(affine(&x, p), x);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = image(2, 8, 9);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)), x);
    }

    #[test]
    fn rejects_tiny_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig::for_resolution(8);
        assert!(augment_image(&image(3, 4, 4), AugmentMode::Eval, &cfg, &mut rng).is_err());
    }
}
