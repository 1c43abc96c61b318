//! Seedable two-view augmentation: crop, color jitter, (optional blur),
//! horizontal flip, cutout and patch shuffle, always in that order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Planar RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; CHANNELS * width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len().max(1) as f64
    }

    /// (1, 3, H, W) tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            [1, CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image layout matches tensor layout")
    }

    /// Binary PPM (P6), for eyeballing augmented views.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

// ── individual operations ────────────────────────────────────────────

/// Split into a g×g grid; output tile `t` (row-major) is input tile `perm[t]`.
pub fn patch_shuffle(img: &Image, grid: usize, perm: &[usize]) -> Result<Image> {
    if grid == 0 || img.width % grid != 0 || img.height % grid != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch shuffle: {}x{} image is not divisible into a {grid}x{grid} grid",
            img.width, img.height
        )));
    }
    let tiles = grid * grid;
    let mut seen = vec![false; tiles];
    if perm.len() != tiles
        || perm
            .iter()
            .any(|&p| p >= tiles || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidArgument(format!(
            "patch shuffle: {perm:?} is not a permutation of {tiles} tiles"
        )));
    }
    let (tw, th) = (img.width / grid, img.height / grid);
    let mut out = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = ((dst / grid) * th, (dst % grid) * tw);
        let (sy, sx) = ((src / grid) * th, (src % grid) * tw);
        for c in 0..CHANNELS {
            for y in 0..th {
                for x in 0..tw {
                    out.set(c, dy + y, dx + x, img.get(c, sy + y, sx + x));
                }
            }
        }
    }
    Ok(out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Fill a `side`×`side` square centred at (`cx`, `cy`), clipped to the image.
pub fn cutout(img: &Image, cx: usize, cy: usize, side: usize, fill: f32) -> Result<Image> {
    if cx >= img.width || cy >= img.height {
        return Err(Error::InvalidArgument(format!(
            "cutout centre ({cx},{cy}) outside {}x{} image",
            img.width, img.height
        )));
    }
    if !(0.0..=1.0).contains(&fill) {
        return Err(Error::InvalidArgument(format!(
            "cutout fill {fill} outside [0,1]"
        )));
    }
    let mut out = img.clone();
    if side == 0 {
        return Ok(out);
    }
    let x0 = cx.saturating_sub(side / 2);
    let y0 = cy.saturating_sub(side / 2);
    let x1 = (cx + side - side / 2).min(img.width);
    let y1 = (cy + side - side / 2).min(img.height);
    for c in 0..CHANNELS {
        for y in y0..y1 {
            for x in x0..x1 {
                out.set(c, y, x, fill);
            }
        }
    }
    Ok(out)
}

/// `clamp(v·mult + add, 0, 1)` on every value.
pub fn color_jitter(img: &Image, mult: f32, add: f32) -> Result<Image> {
    if !(mult > 0.0) || !mult.is_finite() || !add.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "color jitter needs mult > 0 and finite add, got ({mult}, {add})"
        )));
    }
    Ok(Image {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|&v| (v * mult + add).clamp(0.0, 1.0))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropBox {
    pub fn full(img: &Image) -> Self {
        Self {
            x: 0,
            y: 0,
            width: img.width,
            height: img.height,
        }
    }
}

fn source_coord(o: usize, out_len: usize, start: usize, len: usize) -> f64 {
    if out_len <= 1 {
        start as f64
    } else {
        start as f64 + o as f64 * (len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Crop, resize back to the input size (bilinear, corner-aligned) and
/// optionally mirror horizontally.
pub fn random_crop_flip(img: &Image, crop: CropBox, flip: bool) -> Result<Image> {
    if crop.width == 0
        || crop.height == 0
        || crop.x + crop.width > img.width
        || crop.y + crop.height > img.height
    {
        return Err(Error::InvalidArgument(format!(
            "crop {crop:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut out = Image::filled(w, h, 0.0);
    for oy in 0..h {
        let sy = source_coord(oy, h, crop.y, crop.height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(crop.y + crop.height - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..w {
            let sx = source_coord(ox, w, crop.x, crop.width);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(crop.x + crop.width - 1);
            let fx = (sx - x0 as f64) as f32;
            let dst_x = if flip { w - 1 - ox } else { ox };
            for c in 0..CHANNELS {
                let v = if fx == 0.0 && fy == 0.0 {
                    img.get(c, y0, x0)
                } else {
                    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                out.set(c, oy, dst_x, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// 3×3 binomial blur with edge replication.
pub fn blur3(img: &Image) -> Image {
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, ky) in (-1..=1).zip(K) {
                    for (dx, kx) in (-1..=1).zip(K) {
                        let sy = (y + dy).clamp(0, h - 1) as usize;
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        acc += ky * kx * img.get(c, sy, sx);
                    }
                }
                out.set(c, y as usize, x as usize, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

// ── pipeline ─────────────────────────────────────────────────────────

pub const PIPELINE_ORDER: [&str; 6] = ["crop", "color", "blur", "flip", "cutout", "psa"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Crop side as a fraction of the image side, sampled uniformly.
    pub crop_scale: (f64, f64),
    pub color: bool,
    /// Multiplier sampled from 1 ± this.
    pub contrast: f64,
    /// Offset sampled from ± this.
    pub brightness: f64,
    pub blur: bool,
    pub flip: bool,
    pub flip_p: f64,
    pub cutout: bool,
    pub cutout_fraction: f64,
    pub cutout_fill: f32,
    pub psa: bool,
    pub psa_grid: usize,
    /// Informational; the pipeline always runs in [`PIPELINE_ORDER`].
    pub order: Vec<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            crop_scale: (0.8, 1.0),
            color: true,
            contrast: 0.2,
            brightness: 0.1,
            blur: false,
            flip: true,
            flip_p: 0.5,
            cutout: true,
            cutout_fraction: 0.25,
            cutout_fill: 0.0,
            psa: true,
            psa_grid: 3,
            order: PIPELINE_ORDER.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AugmentConfig {
    /// Every operation switched off; views equal the input.
    pub fn disabled() -> Self {
        Self {
            crop: false,
            color: false,
            blur: false,
            flip: false,
            cutout: false,
            psa: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if self.crop && !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if self.color && !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("contrast amplitude must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_p) || !(0.0..=1.0).contains(&self.cutout_fraction) {
            return Err(Error::Config(
                "flip_p and cutout_fraction must be in [0, 1]".into(),
            ));
        }
        if self.psa && (self.psa_grid == 0 || image_side % self.psa_grid != 0) {
            return Err(Error::Config(format!(
                "image side {image_side} is not divisible by psa_grid {}",
                self.psa_grid
            )));
        }
        if self.order.iter().map(String::as_str).ne(PIPELINE_ORDER) {
            return Err(Error::Config(format!(
                "augmentation order is fixed to {PIPELINE_ORDER:?}"
            )));
        }
        Ok(())
    }
}

/// Parameters drawn for one view. `None` means the step is skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewParams {
    pub crop: Option<CropBox>,
    pub color: Option<(f32, f32)>,
    pub blur: bool,
    pub flip: bool,
    pub cutout: Option<(usize, usize, usize)>,
    pub perm: Option<Vec<usize>>,
}

/// Stream seed for (run seed, sample, view).
pub fn view_stream_seed(seed: u64, sample_id: u64, view: u64) -> u64 {
    rng::derive_seed(seed, &[sample_id, view])
}

pub fn sample_view_params(
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
    seed: u64,
    sample_id: u64,
    view: u64,
) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(view_stream_seed(seed, sample_id, view));
    let crop = cfg.crop.then(|| {
        let (lo, hi) = cfg.crop_scale;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let cw = ((width as f64 * scale).round() as usize).clamp(1, width);
        let ch = ((height as f64 * scale).round() as usize).clamp(1, height);
        CropBox {
            x: rng.gen_range(0..=width - cw),
            y: rng.gen_range(0..=height - ch),
            width: cw,
            height: ch,
        }
    });
    let color = cfg.color.then(|| {
        let m = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
        let a = rng.gen_range(-cfg.brightness..=cfg.brightness);
        (m as f32, a as f32)
    });
    let flip = cfg.flip && rng.gen_bool(cfg.flip_p);
    let cutout = cfg.cutout.then(|| {
        let side = (cfg.cutout_fraction * width.min(height) as f64).round() as usize;
        (rng.gen_range(0..width), rng.gen_range(0..height), side)
    });
    let perm = cfg.psa.then(|| {
        let mut p: Vec<usize> = (0..cfg.psa_grid * cfg.psa_grid).collect();
        p.shuffle(&mut rng);
        p
    });
    ViewParams {
        crop,
        color,
        blur: cfg.blur,
        flip,
        cutout,
        perm,
    }
}

pub fn apply_view_params(img: &Image, p: &ViewParams, cfg: &AugmentConfig) -> Result<Image> {
    let mut out = match p.crop {
        Some(crop) => random_crop_flip(img, crop, false)?,
        None => img.clone(),
    };
    if let Some((m, a)) = p.color {
        out = color_jitter(&out, m, a)?;
    }
    if p.blur {
        out = blur3(&out);
    }
    if p.flip {
        out = random_crop_flip(&out, CropBox::full(&out), true)?;
    }
    if let Some((cx, cy, side)) = p.cutout {
        out = cutout(&out, cx, cy, side, cfg.cutout_fill)?;
    }
    if let Some(perm) = &p.perm {
        out = patch_shuffle(&out, cfg.psa_grid, perm)?;
    }
    Ok(out)
}

/// One augmented view, fully determined by (seed, sample_id, view).
pub fn augment_view(
    img: &Image,
    cfg: &AugmentConfig,
    seed: u64,
    sample_id: u64,
    view: u64,
) -> Result<Image> {
    let p = sample_view_params(cfg, img.width, img.height, seed, sample_id, view);
    apply_view_params(img, &p, cfg)
}

/// The two views of one sample.
pub fn compose_views(
    img: &Image,
    cfg: &AugmentConfig,
    seed: u64,
    sample_id: u64,
) -> Result<(Image, Image)> {
    Ok((
        augment_view(img, cfg, seed, sample_id, 0)?,
        augment_view(img, cfg, seed, sample_id, 1)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_image(side: usize, phase: f32) -> Image {
        let mut img = Image::filled(side, side, 0.0);
        for c in 0..CHANNELS {
            for y in 0..side {
                for x in 0..side {
                    let v = ((x * 7 + y * 13 + c * 29) as f32 * 0.173 + phase).sin() * 0.5 + 0.5;
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    fn sorted_channel(img: &Image, c: usize) -> Vec<u32> {
        let mut v: Vec<u32> = img.channel(c).iter().map(|f| f.to_bits()).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn identity_shuffle_is_noop() {
        let img = test_image(9, 0.0);
        let id: Vec<usize> = (0..9).collect();
        assert_eq!(patch_shuffle(&img, 3, &id).unwrap(), img);
    }

    #[test]
    fn shuffle_moves_whole_tiles() {
        let img = test_image(6, 0.3);
        let perm = [8, 7, 6, 5, 4, 3, 2, 1, 0];
        let out = patch_shuffle(&img, 3, &perm).unwrap();
        // Output tile 0 (top-left) is input tile 8 (bottom-right).
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.get(1, y, x), img.get(1, 4 + y, 4 + x));
            }
        }
    }

    #[test]
    fn shuffle_rejects_bad_inputs() {
        let img = test_image(8, 0.0);
        let id: Vec<usize> = (0..9).collect();
        assert!(patch_shuffle(&img, 3, &id).is_err());
        let img = test_image(9, 0.0);
        assert!(patch_shuffle(&img, 3, &[0, 1, 2, 3, 4, 5, 6, 7, 7]).is_err());
        assert!(patch_shuffle(&img, 3, &[0, 1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn shuffle_preserves_histogram_and_inverts(seed in any::<u64>(), grid in 1usize..5) {
            let img = test_image(grid * 4, (seed % 100) as f32 * 0.01);
            let mut perm: Vec<usize> = (0..grid * grid).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let out = patch_shuffle(&img, grid, &perm).unwrap();
            for c in 0..CHANNELS {
                prop_assert_eq!(sorted_channel(&out, c), sorted_channel(&img, c));
            }
            let back = patch_shuffle(&out, grid, &inverse_permutation(&perm)).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn pipeline_stays_in_unit_range(seed in any::<u64>(), sample in 0u64..1000) {
            let img = test_image(12, 0.7);
            let cfg = AugmentConfig { blur: true, ..AugmentConfig::default() };
            let (a, b) = compose_views(&img, &cfg, seed, sample).unwrap();
            prop_assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_cutout_and_neutral_jitter_are_noops() {
        let img = test_image(8, 0.2);
        assert_eq!(cutout(&img, 3, 3, 0, 0.0).unwrap(), img);
        assert_eq!(color_jitter(&img, 1.0, 0.0).unwrap(), img);
        assert_eq!(
            random_crop_flip(&img, CropBox::full(&img), false).unwrap(),
            img
        );
    }

    #[test]
    fn cutout_clips_at_border() {
        let img = Image::filled(6, 6, 1.0);
        let out = cutout(&img, 0, 0, 4, 0.0).unwrap();
        let zeros = out.channel(0).iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4); // rows 0..2 × cols 0..2
        assert!(cutout(&img, 6, 0, 2, 0.0).is_err());
    }

    #[test]
    fn double_flip_restores() {
        let img = test_image(7, 0.1);
        let once = random_crop_flip(&img, CropBox::full(&img), true).unwrap();
        assert_ne!(once, img);
        assert_eq!(once.get(0, 2, 0), img.get(0, 2, 6));
        assert_eq!(
            random_crop_flip(&once, CropBox::full(&img), true).unwrap(),
            img
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        let img = test_image(8, 0.0);
        assert!(color_jitter(&img, 0.0, 0.0).is_err());
        assert!(random_crop_flip(
            &img,
            CropBox {
                x: 4,
                y: 0,
                width: 5,
                height: 4
            },
            false
        )
        .is_err());
    }

    #[test]
    fn crop_resizes_back() {
        let img = test_image(8, 0.4);
        let out = random_crop_flip(
            &img,
            CropBox {
                x: 2,
                y: 1,
                width: 4,
                height: 4,
            },
            false,
        )
        .unwrap();
        assert_eq!((out.width(), out.height()), (8, 8));
        assert_eq!(out.get(0, 0, 0), img.get(0, 1, 2));
        assert_eq!(out.get(2, 7, 7), img.get(2, 4, 5));
    }

    #[test]
    fn disabled_pipeline_returns_input() {
        let img = test_image(9, 0.0);
        let (a, b) = compose_views(&img, &AugmentConfig::disabled(), 1, 2).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let img = test_image(9, 0.0);
        let cfg = AugmentConfig::default();
        let first = compose_views(&img, &cfg, 10, 3).unwrap();
        assert_eq!(first, compose_views(&img, &cfg, 10, 3).unwrap());
        assert_ne!(first.0, first.1);
        assert_ne!(first, compose_views(&img, &cfg, 11, 3).unwrap());
    }

    #[test]
    fn shuffle_keeps_channel_means_of_pre_shuffle_image() {
        let img = test_image(12, 0.9);
        let cfg = AugmentConfig::default();
        let p = sample_view_params(&cfg, 12, 12, 5, 7, 0);
        let before = apply_view_params(
            &img,
            &ViewParams {
                perm: None,
                ..p.clone()
            },
            &cfg,
        )
        .unwrap();
        let after = apply_view_params(&img, &p, &cfg).unwrap();
        for c in 0..CHANNELS {
            assert_eq!(sorted_channel(&before, c), sorted_channel(&after, c));
            assert!((before.channel_mean(c) - after.channel_mean(c)).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate(64).is_err());
        assert!(AugmentConfig::default().validate(48).is_ok());
        let bad_order = AugmentConfig {
            order: vec!["psa".into()],
            ..AugmentConfig::default()
        };
        assert!(bad_order.validate(48).is_err());
    }
}
